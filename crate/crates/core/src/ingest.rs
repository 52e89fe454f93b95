//! Paper manifest parsing, resumable downloads, TEI paragraph extraction and
//! the document-level train/test split.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::textprep::split_documents;

/// File in the fetch output directory holding the last completed index.
pub const CHECKPOINT_FILE: &str = "resume.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaperRecord {
    pub paper_id: String,
    pub pdf_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestDiagnostic {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(rename = "paperId")]
    paper_id: Option<String>,
    #[serde(rename = "openAccessPdf", default)]
    open_access_pdf: Option<RawPdf>,
}

#[derive(Deserialize)]
struct RawPdf {
    url: Option<String>,
}

/// Parses a JSON-lines manifest. Malformed lines become diagnostics and are
/// skipped; blank lines are ignored.
pub fn parse_manifest<R: BufRead>(input: R) -> Result<(Vec<PaperRecord>, Vec<ManifestDiagnostic>)> {
    let mut records = Vec::new();
    let mut diags = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Ingest(format!("reading manifest: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let diag = |message: String| ManifestDiagnostic { line: i + 1, message };
        match serde_json::from_str::<RawRecord>(&line) {
            Ok(RawRecord {
                paper_id: Some(id),
                open_access_pdf,
            }) if !id.is_empty() => records.push(PaperRecord {
                paper_id: id,
                pdf_url: open_access_pdf.and_then(|p| p.url).filter(|u| !u.is_empty()),
            }),
            Ok(_) => diags.push(diag("missing or empty paperId".into())),
            Err(e) => diags.push(diag(e.to_string())),
        }
    }
    for d in &diags {
        log::warn!("manifest line {}: {}", d.line, d.message);
    }
    Ok((records, diags))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DownloadResult {
    pub bytes_written: u64,
    pub resumed: bool,
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(300)))
        .build()
        .into()
}

/// Downloads `record.pdf_url` to `dest`. With `resume`, an existing partial
/// file is continued with a `Range: bytes=<len>-` request; a server that
/// ignores the range gets a full rewrite.
pub fn fetch_document(record: &PaperRecord, dest: &Path, resume: bool) -> Result<DownloadResult> {
    let url = record
        .pdf_url
        .as_deref()
        .ok_or_else(|| Error::Ingest(format!("{}: no PDF URL", record.paper_id)))?;
    let offset = if resume {
        fs::metadata(dest).map(|m| m.len()).unwrap_or(0)
    } else {
        0
    };
    let fail = |msg: String| Error::Ingest(format!("{}: {msg}", record.paper_id));

    let mut req = agent().get(url);
    if offset > 0 {
        req = req.header("Range", format!("bytes={offset}-"));
    }
    let mut resp = req.call().map_err(|e| fail(e.to_string()))?;
    let status = resp.status().as_u16();
    let (append, resumed) = match status {
        206 if offset > 0 => (true, true),
        200 => (false, false),
        // the partial file already holds everything
        416 if offset > 0 => {
            return Ok(DownloadResult {
                bytes_written: 0,
                resumed: true,
            })
        }
        s => return Err(fail(format!("HTTP status {s}"))),
    };
    let mut file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(dest)
        .map_err(|e| Error::io(dest, e))?;
    let mut body = resp.body_mut().as_reader();
    let n = io::copy(&mut body, &mut file).map_err(|e| fail(format!("body: {e}")))?;
    file.flush().map_err(|e| Error::io(dest, e))?;
    Ok(DownloadResult {
        bytes_written: n,
        resumed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum FetchOutcome {
    Downloaded(DownloadResult),
    NoUrl,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct FetchOptions {
    pub resume: bool,
    pub workers: usize,
}

/// Filesystem-safe name for a record's download.
pub fn download_path(out_dir: &Path, paper_id: &str) -> PathBuf {
    let safe: String = paper_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    out_dir.join(format!("{safe}.pdf"))
}

pub fn read_checkpoint(out_dir: &Path) -> Result<Option<usize>> {
    let p = out_dir.join(CHECKPOINT_FILE);
    match fs::read_to_string(&p) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| Error::Ingest(format!("{}: {e}", p.display()))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(p, e)),
    }
}

fn write_checkpoint(out_dir: &Path, index: usize) -> Result<()> {
    let p = out_dir.join(CHECKPOINT_FILE);
    let tmp = out_dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    fs::write(&tmp, index.to_string()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &p).map_err(|e| Error::io(p, e))
}

/// Fetches every record with a bounded worker pool. Outcomes come back in
/// record order. The checkpoint holds the last index of the contiguous
/// prefix of finished records; with `resume`, records up to it are skipped.
pub fn fetch_all(records: &[PaperRecord], out_dir: &Path, opts: &FetchOptions) -> Result<Vec<Option<FetchOutcome>>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let start = match (opts.resume, read_checkpoint(out_dir)?) {
        (true, Some(i)) => i + 1,
        _ => 0,
    };
    let mut outcomes: Vec<Option<FetchOutcome>> = vec![None; records.len()];
    if start >= records.len() {
        return Ok(outcomes);
    }
    let next = AtomicUsize::new(start);
    let (tx, rx) = mpsc::channel::<(usize, FetchOutcome)>();
    let workers = opts.workers.max(1).min(records.len() - start);

    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(rec) = records.get(i) else { break };
                let outcome = if rec.pdf_url.is_none() {
                    FetchOutcome::NoUrl
                } else {
                    match fetch_document(rec, &download_path(out_dir, &rec.paper_id), opts.resume) {
                        Ok(r) => FetchOutcome::Downloaded(r),
                        Err(e) => FetchOutcome::Failed(e.to_string()),
                    }
                };
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut done = BTreeSet::new();
        let mut watermark = start;
        for (i, outcome) in rx {
            match &outcome {
                FetchOutcome::Failed(msg) => log::warn!("record {i}: {msg}"),
                FetchOutcome::NoUrl => log::info!("record {i}: no open-access PDF, skipped"),
                FetchOutcome::Downloaded(_) => {}
            }
            outcomes[i] = Some(outcome);
            done.insert(i);
            let before = watermark;
            while done.remove(&watermark) {
                watermark += 1;
            }
            if watermark > before {
                write_checkpoint(out_dir, watermark - 1)?;
            }
        }
        Ok(())
    })?;
    Ok(outcomes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentText {
    pub source_id: String,
    pub text: String,
    pub kept: bool,
}

/// Accepts bytes that decode as UTF-8 and strips C0 control characters
/// other than newline and tab. `None` means the document is skipped.
pub fn encoding_filter(bytes: &[u8]) -> Option<String> {
    let s = std::str::from_utf8(bytes).ok()?;
    Some(
        s.chars()
            .filter(|&c| !(c.is_ascii_control() && c != '\n' && c != '\t' && c != '\u{7f}'))
            .collect(),
    )
}

const EXCLUDED: [&str; 5] = ["listBibl", "back", "teiHeader", "fw", "figure"];

fn excluded(node: roxmltree::Node) -> bool {
    node.ancestors().any(|a| {
        a.is_element()
            && (EXCLUDED.contains(&a.tag_name().name())
                || (a.tag_name().name() == "note" && matches!(a.attribute("place"), Some("foot" | "head"))))
    })
}

/// Space-joined text of the body's paragraphs in document order, with
/// whitespace collapsed. Reference lists, notes at the page head or foot,
/// figures and all header and back matter are left out.
pub fn extract_tei_text(source_id: &str, xml: &str) -> Result<DocumentText> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| Error::Tei {
        source_id: source_id.to_string(),
        message: e.to_string(),
    })?;
    let mut paragraphs = Vec::new();
    let bodies = doc
        .descendants()
        .filter(|n| n.is_element() && n.tag_name().name() == "body" && !excluded(*n));
    for body in bodies {
        for p in body
            .descendants()
            .filter(|n| n.is_element() && n.tag_name().name() == "p")
        {
            if excluded(p) {
                continue;
            }
            let raw: String = p
                .descendants()
                .filter(|n| n.is_text())
                .filter_map(|n| n.text())
                .collect();
            let words: Vec<&str> = raw.split_whitespace().collect();
            if !words.is_empty() {
                paragraphs.push(words.join(" "));
            }
        }
    }
    let text = encoding_filter(paragraphs.join(" ").as_bytes()).unwrap_or_default();
    Ok(DocumentText {
        source_id: source_id.to_string(),
        kept: !text.is_empty(),
        text,
    })
}

/// Extracts every `*.xml` file in `dir`, sorted by file name. Files failing
/// the encoding filter or XML parsing are returned with `kept = false`.
pub fn extract_dir(dir: &Path) -> Result<Vec<DocumentText>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xml"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for (n, p) in paths.iter().enumerate() {
        let id = p.file_name().unwrap().to_string_lossy().into_owned();
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        let skipped = |why: String| {
            log::warn!("skipped paper number {n} ({id}): {why}");
            DocumentText {
                source_id: id.clone(),
                text: String::new(),
                kept: false,
            }
        };
        let doc = match encoding_filter(&bytes) {
            None => skipped("not valid UTF-8".into()),
            Some(s) => match extract_tei_text(&id, &s) {
                Ok(d) if d.kept => d,
                Ok(_) => skipped("no body paragraphs".into()),
                Err(e) => skipped(e.to_string()),
            },
        };
        out.push(doc);
    }
    Ok(out)
}

/// Writes kept documents, each followed by a blank line.
pub fn write_corpus(documents: &[DocumentText], out: &Path) -> Result<usize> {
    let mut buf = String::new();
    for d in documents.iter().filter(|d| d.kept) {
        check_document(d)?;
        buf.push_str(d.text.trim());
        buf.push_str("\n\n");
    }
    fs::write(out, &buf).map_err(|e| Error::io(out, e))?;
    Ok(buf.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusStats {
    pub documents_kept: usize,
    pub documents_skipped: usize,
    pub train_documents: usize,
    pub test_documents: usize,
    pub total_bytes: usize,
    pub train_bytes: usize,
    pub test_bytes: usize,
}

fn check_document(d: &DocumentText) -> Result<()> {
    let t = d.text.trim();
    if t.is_empty() || t.contains("\n\n") {
        return Err(Error::Ingest(format!(
            "{}: document is empty or contains a blank line",
            d.source_id
        )));
    }
    Ok(())
}

/// Splits kept documents in order at `train_fraction` (rounded, leaving at
/// least one document on each side) and writes both parts.
pub fn build_corpus(
    documents: &[DocumentText],
    train_fraction: f64,
    out_train: &Path,
    out_test: &Path,
) -> Result<CorpusStats> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let kept: Vec<&DocumentText> = documents.iter().filter(|d| d.kept).collect();
    if kept.len() < 2 {
        return Err(Error::CorpusTooSmall { kept: kept.len() });
    }
    for d in &kept {
        check_document(d)?;
    }
    let n = kept.len();
    let k = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let render = |docs: &[&DocumentText]| {
        docs.iter().fold(String::new(), |mut s, d| {
            s.push_str(d.text.trim());
            s.push_str("\n\n");
            s
        })
    };
    let (train, test) = (render(&kept[..k]), render(&kept[k..]));
    fs::write(out_train, &train).map_err(|e| Error::io(out_train, e))?;
    fs::write(out_test, &test).map_err(|e| Error::io(out_test, e))?;
    Ok(CorpusStats {
        documents_kept: n,
        documents_skipped: documents.len() - n,
        train_documents: k,
        test_documents: n - k,
        total_bytes: train.len() + test.len(),
        train_bytes: train.len(),
        test_bytes: test.len(),
    })
}

/// Reads a blank-line separated corpus back into documents.
pub fn read_corpus(path: &Path) -> Result<Vec<DocumentText>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(split_documents(&text)
        .into_iter()
        .enumerate()
        .map(|(i, t)| DocumentText {
            source_id: format!("{}#{i}", path.display()),
            text: t.to_string(),
            kept: true,
        })
        .collect())
}
