mod common;

use std::collections::HashMap;
use std::fs;

use common::{fixture, FixtureServer};
use desklm::ingest::{
    build_corpus, extract_dir, fetch_all, fetch_document, read_checkpoint, read_corpus, write_corpus, DocumentText,
    FetchOptions, FetchOutcome, PaperRecord,
};

fn record(id: &str, url: Option<String>) -> PaperRecord {
    PaperRecord {
        paper_id: id.into(),
        pdf_url: url,
    }
}

fn server() -> (FixtureServer, Vec<u8>) {
    let ten = b"0123456789".to_vec();
    let big: Vec<u8> = (0..50_000u32).map(|i| (i * 7 % 251) as u8).collect();
    let files = HashMap::from([("ten.pdf".to_string(), ten.clone()), ("big.pdf".to_string(), big)]);
    (FixtureServer::start(files), ten)
}

#[test]
fn fresh_and_resumed_downloads_match() {
    let (srv, ten) = server();
    let dir = tempfile::tempdir().unwrap();
    let rec = record("ten", Some(srv.url("ten.pdf")));

    let fresh = dir.path().join("fresh.pdf");
    let r = fetch_document(&rec, &fresh, false).unwrap();
    assert_eq!((r.bytes_written, r.resumed), (10, false));
    assert_eq!(fs::read(&fresh).unwrap(), ten);

    let partial = dir.path().join("partial.pdf");
    fs::write(&partial, &ten[..4]).unwrap();
    let r = fetch_document(&rec, &partial, true).unwrap();
    assert_eq!((r.bytes_written, r.resumed), (6, true));
    assert_eq!(fs::read(&partial).unwrap(), fs::read(&fresh).unwrap());
    assert_eq!(srv.requests().last().unwrap().range.as_deref(), Some("bytes=4-"));

    // already complete: the server refuses the range and the file is kept
    let r = fetch_document(&rec, &partial, true).unwrap();
    assert_eq!(r.bytes_written, 0);
    assert_eq!(fs::read(&partial).unwrap(), ten);
}

#[test]
fn failures_do_not_stop_the_pool_and_resume_skips_finished_records() {
    let (srv, _) = server();
    let dir = tempfile::tempdir().unwrap();
    let records = vec![
        record("a", Some(srv.url("ten.pdf"))),
        record("b", Some(srv.url("fail"))),
        record("c", None),
        record("d", Some(srv.url("big.pdf"))),
    ];
    let opts = FetchOptions {
        resume: true,
        workers: 3,
    };
    let out = fetch_all(&records, dir.path(), &opts).unwrap();
    assert!(matches!(out[0], Some(FetchOutcome::Downloaded(_))));
    assert!(matches!(out[1], Some(FetchOutcome::Failed(_))));
    assert_eq!(out[2], Some(FetchOutcome::NoUrl));
    assert!(matches!(out[3], Some(FetchOutcome::Downloaded(_))));
    assert_eq!(read_checkpoint(dir.path()).unwrap(), Some(3));
    assert_eq!(fs::read(dir.path().join("d.pdf")).unwrap().len(), 50_000);

    let before = srv.requests().len();
    let again = fetch_all(&records, dir.path(), &opts).unwrap();
    assert!(again.iter().all(Option::is_none));
    assert_eq!(srv.requests().len(), before);
}

fn expected_texts() -> Vec<(&'static str, &'static str)> {
    vec![
        (
            "01_orbitrap.xml",
            "Orbitrap analyzers trap ions in an electrostatic field. The image current is converted to a spectrum by \
             Fourier transform. Resolving power falls with increasing m/z at fixed transient length.",
        ),
        (
            "02_esi.xml",
            "Electrospray ionization produces multiply charged ions from solution. Desolvation depends on gas \
             temperature & flow. Charge state envelopes are deconvolved to recover neutral mass.",
        ),
        (
            "04_tof.xml",
            "Time-of-flight instruments separate ions by their flight time in a field-free drift region. A \
             reflectron compensates for the spread in initial kinetic energy and improves resolution.",
        ),
        (
            "05_maldi.xml",
            "Matrix-assisted laser desorption ionization mostly yields singly charged ions.",
        ),
    ]
}

#[test]
fn tei_fixtures_extract_to_body_paragraphs() {
    let docs = extract_dir(&fixture("tei")).unwrap();
    assert_eq!(docs.len(), 7);
    let kept: Vec<(&str, &str)> = docs
        .iter()
        .filter(|d| d.kept)
        .map(|d| (d.source_id.as_str(), d.text.as_str()))
        .collect();
    assert_eq!(kept, expected_texts());
    for d in &docs {
        assert!(!d.text.contains('<') && !d.text.contains('>'));
        assert!(!d.text.contains("must not appear"));
    }
}

#[test]
fn corpus_split_reassembles_documents() {
    let docs = extract_dir(&fixture("tei")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    write_corpus(&docs, &corpus).unwrap();
    let reread = read_corpus(&corpus).unwrap();
    let texts: Vec<&str> = reread.iter().map(|d| d.text.as_str()).collect();
    let expected: Vec<&str> = expected_texts().iter().map(|e| e.1).collect();
    assert_eq!(texts, expected);

    let (train, test) = (dir.path().join("train.txt"), dir.path().join("test.txt"));
    let stats = build_corpus(&docs, 0.5, &train, &test).unwrap();
    assert_eq!(stats.documents_kept + stats.documents_skipped, 7);
    assert_eq!((stats.train_documents, stats.test_documents), (2, 2));
    let joined = fs::read_to_string(&train).unwrap() + &fs::read_to_string(&test).unwrap();
    assert_eq!(joined.len(), stats.total_bytes);
    let back: Vec<String> = joined
        .split("\n\n")
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    assert_eq!(back, expected);
}

#[test]
fn documents_with_blank_lines_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let doc = |t: &str| DocumentText {
        source_id: t.into(),
        text: t.into(),
        kept: true,
    };
    let r = build_corpus(
        &[doc("one"), doc("two\n\nthree")],
        0.5,
        &dir.path().join("a"),
        &dir.path().join("b"),
    );
    assert!(r.is_err());
}
