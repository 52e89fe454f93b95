//! Word-level tokenization, fixed-length block datasets and padded batches.
//!
//! The tokenization rule: lowercase, split on Unicode whitespace, then peel
//! leading and trailing punctuation off each chunk as single-character tokens.
//! Interior punctuation (`m/z`, `cf-fab`) stays inside the word.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

pub type TokenId = u32;

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace())
}

/// Splits text into word and punctuation tokens (lowercased).
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let mut start = 0;
        while start < chars.len() && is_punct(chars[start]) {
            out.push(chars[start].to_string());
            start += 1;
        }
        let mut end = chars.len();
        while end > start && is_punct(chars[end - 1]) {
            end -= 1;
        }
        if end > start {
            out.push(chars[start..end].iter().collect());
        }
        for &c in &chars[end.max(start)..] {
            out.push(c.to_string());
        }
    }
    out
}

/// True when a token consists only of punctuation characters.
pub fn is_punctuation_token(token: &str) -> bool {
    !token.is_empty() && token.chars().all(is_punct)
}

/// Joins tokens back into text, re-attaching punctuation that the
/// tokenizer detached.
pub fn join_words<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for tok in tokens {
        let tok = tok.as_ref();
        let opening = matches!(tok, "(" | "[" | "{");
        let closing = is_punctuation_token(tok) && !opening;
        if !out.is_empty() && !glue_next && !closing {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = opening;
    }
    out
}

/// Bidirectional token/id map with three reserved ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub const PAD_ID: TokenId = 0;
    pub const UNK_ID: TokenId = 1;
    pub const EOS_ID: TokenId = 2;

    /// Builds from an ordered token list whose first three entries are the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != PAD || tokens[1] != UNK || tokens[2] != EOS {
            return Err(Error::Vocabulary(format!(
                "first three tokens must be {PAD}, {UNK}, {EOS}"
            )));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("invalid token on line {}", i + 1)));
            }
            if token_to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary {
            id_to_token: tokens,
            token_to_id,
        })
    }

    pub fn pad_id(&self) -> TokenId {
        Self::PAD_ID
    }

    pub fn unk_id(&self) -> TokenId {
        Self::UNK_ID
    }

    pub fn eos_id(&self) -> TokenId {
        Self::EOS_ID
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id <= Self::EOS_ID
    }

    /// Writes one token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.id_to_token.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }
}

/// Builds a vocabulary of at most `max_size` entries (including the three
/// specials) from the most frequent tokens; ties break lexicographically.
pub fn build_vocabulary(corpus: &str, max_size: usize) -> Result<Vocabulary> {
    if corpus.trim().is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if max_size < 3 {
        return Err(Error::Vocabulary(format!(
            "max_size {max_size} cannot hold the three special tokens"
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for w in split_words(corpus) {
        *counts.entry(w).or_default() += 1;
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, _)| t != PAD && t != UNK && t != EOS)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens = vec![PAD.to_owned(), UNK.to_owned(), EOS.to_owned()];
    tokens.extend(ranked.into_iter().take(max_size - 3).map(|(t, _)| t));
    Vocabulary::from_tokens(tokens)
}

/// Token ids produced under a particular vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    TokenSequence::new(
        split_words(text)
            .iter()
            .map(|w| vocab.id(w).unwrap_or(Vocabulary::UNK_ID))
            .collect(),
    )
}

/// Renders ids as text. Padding and end-of-sequence markers are skipped.
pub fn detokenize(ids: &[TokenId], vocab: &Vocabulary) -> String {
    let words: Vec<&str> = ids
        .iter()
        .filter(|&&id| id != Vocabulary::PAD_ID && id != Vocabulary::EOS_ID)
        .map(|&id| vocab.token(id).unwrap_or(UNK))
        .collect();
    join_words(&words)
}

/// Splits a corpus file into documents on blank-line separators.
pub fn split_documents(corpus: &str) -> Vec<&str> {
    corpus.split("\n\n").map(str::trim).filter(|d| !d.is_empty()).collect()
}

/// Tokenizes a blank-line separated corpus, terminating each document with `<eos>`.
pub fn tokenize_corpus(corpus: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = Vec::new();
    for doc in split_documents(corpus) {
        ids.extend(tokenize(doc, vocab).ids);
        ids.push(Vocabulary::EOS_ID);
    }
    TokenSequence::new(ids)
}

/// A fixed-length training window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    ids: Vec<TokenId>,
}

impl Block {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Block { ids }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunked {
    pub blocks: Vec<Block>,
    pub dropped: usize,
}

/// Cuts consecutive, non-overlapping windows of exactly `block_size`; the
/// trailing remainder is dropped.
pub fn chunk_blocks(tokens: &TokenSequence, block_size: usize) -> Result<Chunked> {
    if block_size < 2 {
        return Err(Error::Config(format!("block_size {block_size} < 2")));
    }
    if tokens.len() < block_size {
        log::warn!(
            "token stream of {} is shorter than block_size {block_size}; no blocks",
            tokens.len()
        );
    }
    let blocks: Vec<Block> = tokens
        .ids
        .chunks_exact(block_size)
        .map(|c| Block::new(c.to_vec()))
        .collect();
    let dropped = tokens.len() - blocks.len() * block_size;
    Ok(Chunked { blocks, dropped })
}

/// Right-padded rows plus a 0/1 attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub rows: Vec<Vec<TokenId>>,
    pub attention_mask: Vec<Vec<u8>>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.rows.len()
    }

    pub fn max_len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Number of unpadded tokens in row `i`.
    pub fn row_len(&self, i: usize) -> usize {
        self.attention_mask[i].iter().map(|&m| m as usize).sum()
    }

    pub fn from_blocks(blocks: &[&Block]) -> Self {
        Batch {
            rows: blocks.iter().map(|b| b.ids.clone()).collect(),
            attention_mask: blocks.iter().map(|b| vec![1; b.len()]).collect(),
        }
    }
}

pub fn collate(sequences: &[TokenSequence], pad_id: TokenId) -> Result<Batch> {
    let max_len = sequences
        .iter()
        .map(TokenSequence::len)
        .max()
        .ok_or(Error::EmptyBatch)?;
    let mut rows = Vec::with_capacity(sequences.len());
    let mut attention_mask = Vec::with_capacity(sequences.len());
    for s in sequences {
        let mut row = s.ids.clone();
        row.resize(max_len, pad_id);
        let mut mask = vec![1u8; s.len()];
        mask.resize(max_len, 0);
        rows.push(row);
        attention_mask.push(mask);
    }
    Ok(Batch { rows, attention_mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab_of(words: &[&str]) -> Vocabulary {
        let mut t = vec![PAD.to_owned(), UNK.to_owned(), EOS.to_owned()];
        t.extend(words.iter().map(|w| w.to_string()));
        Vocabulary::from_tokens(t).unwrap()
    }

    #[test]
    fn vocabulary_orders_by_frequency() {
        let v = build_vocabulary("a a b", 5).unwrap();
        assert_eq!(v.tokens(), &[PAD, UNK, EOS, "a", "b"]);
    }

    #[test]
    fn vocabulary_ties_break_lexicographically() {
        let v = build_vocabulary("b a a b", 4).unwrap();
        assert_eq!(v.tokens(), &[PAD, UNK, EOS, "a"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(build_vocabulary("", 10), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn tokenize_known_and_unknown() {
        let v = vocab_of(&["mass", "spec"]);
        assert_eq!(tokenize("mass spec", &v).ids, vec![3, 4]);
        assert_eq!(tokenize("xyzzy", &v).ids, vec![Vocabulary::UNK_ID]);
    }

    #[test]
    fn whitespace_is_normalized() {
        let v = vocab_of(&["a", "b", "c"]);
        assert_eq!(tokenize("a  b\t c", &v), tokenize("a b c", &v));
    }

    #[test]
    fn punctuation_detaches_at_word_edges_only() {
        assert_eq!(
            split_words("The (CF-FAB) mat. m/z"),
            vec!["the", "(", "cf-fab", ")", "mat", ".", "m/z"]
        );
        assert_eq!(split_words("--"), vec!["-", "-"]);
    }

    #[test]
    fn join_reattaches_punctuation() {
        let words = split_words("a (b), c.");
        assert_eq!(join_words(&words), "a (b), c.");
    }

    #[test]
    fn chunking_examples() {
        let seq = |n: u32| TokenSequence::new((0..n).collect());
        let c = chunk_blocks(&seq(10), 4).unwrap();
        assert_eq!((c.blocks.len(), c.dropped), (2, 2));
        let c = chunk_blocks(&seq(8), 4).unwrap();
        assert_eq!((c.blocks.len(), c.dropped), (2, 0));
        let c = chunk_blocks(&seq(3), 4).unwrap();
        assert_eq!((c.blocks.len(), c.dropped), (0, 3));
        assert!(chunk_blocks(&seq(3), 1).is_err());
    }

    #[test]
    fn collate_examples() {
        let s = |n: usize| TokenSequence::new(vec![7; n]);
        let b = collate(&[s(3), s(5)], 0).unwrap();
        assert_eq!((b.batch_size(), b.max_len()), (2, 5));
        assert_eq!(b.rows[0].iter().filter(|&&x| x == 0).count(), 2);
        assert_eq!((b.row_len(0), b.row_len(1)), (3, 5));

        let b = collate(&[s(4), s(4)], 0).unwrap();
        assert!(b.attention_mask.iter().flatten().all(|&m| m == 1));

        let b = collate(&[s(1), s(2), s(3)], 0).unwrap();
        let pads: usize = b.attention_mask.iter().flatten().filter(|&&m| m == 0).count();
        assert_eq!(pads, (3 - 1) + (3 - 2));

        assert!(matches!(collate(&[], 0), Err(Error::EmptyBatch)));
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocabulary("alpha beta beta gamma", 10).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<pad>\n<unk>\n<eos>\n"));
    }

    #[test]
    fn corpus_documents_end_with_eos() {
        let v = vocab_of(&["a", "b"]);
        let t = tokenize_corpus("a b\n\nb a\n\n", &v);
        assert_eq!(t.ids, vec![3, 4, 2, 4, 3, 2]);
    }

    proptest! {
        #[test]
        fn chunk_lengths_partition_input(n in 0usize..500, bs in 2usize..40) {
            let seq = TokenSequence::new((0..n as u32).collect());
            let c = chunk_blocks(&seq, bs).unwrap();
            prop_assert!(c.blocks.iter().all(|b| b.len() == bs));
            prop_assert_eq!(c.blocks.len() * bs + c.dropped, n);
            prop_assert!(c.dropped < bs);
        }

        #[test]
        fn collate_preserves_real_positions(lens in proptest::collection::vec(1usize..12, 1..6)) {
            let seqs: Vec<TokenSequence> = lens
                .iter()
                .enumerate()
                .map(|(i, &n)| TokenSequence::new((0..n as u32).map(|x| x + 3 + i as u32).collect()))
                .collect();
            let b = collate(&seqs, 0).unwrap();
            for (i, s) in seqs.iter().enumerate() {
                prop_assert_eq!(&b.rows[i][..s.len()], &s.ids[..]);
                prop_assert!(b.rows[i][s.len()..].iter().all(|&x| x == 0));
                prop_assert_eq!(b.row_len(i), s.len());
            }
        }

        #[test]
        fn vocabulary_ids_invert(words in proptest::collection::vec("[a-z]{1,6}", 1..40)) {
            let corpus = words.join(" ");
            let v = build_vocabulary(&corpus, 64).unwrap();
            for (id, tok) in v.tokens().iter().enumerate().skip(3) {
                prop_assert_eq!(v.id(tok), Some(id as TokenId));
                prop_assert_eq!(v.token(id as TokenId), Some(tok.as_str()));
            }
        }

        #[test]
        fn detokenize_inverts_tokenize(
            words in proptest::collection::vec(("[a-z]{1,5}", "[.,;)]?"), 1..20)
        ) {
            let text: Vec<String> = words.iter().map(|(w, p)| format!("{w}{p}")).collect();
            let text = text.join(" ");
            let v = build_vocabulary(&text, 1000).unwrap();
            prop_assert_eq!(detokenize(&tokenize(&text, &v).ids, &v), text);
        }
    }
}
