//! Text-similarity scores, perplexity, embedding cosine and the report
//! files built from them.

mod report;

use std::collections::HashMap;
use std::hash::Hash;

pub use report::{
    evaluate_models, read_prompt_set, reproducibility, write_repro_csv, EvalOptions, MetricRow, ModelReport,
    PromptPair, PromptResult, ReproReport, AVERAGES_FILE, INDIVIDUAL_FILE, METRIC_COLUMNS,
};

use crate::error::{Error, Result};
use crate::model::{log_softmax_row, Model};
use crate::tensor::Float;
use crate::textprep::{is_punctuation_token, split_words, tokenize, TokenId, Vocabulary};

/// Word tokens used by every similarity metric: the corpus tokenization
/// rule with pure-punctuation tokens removed.
pub fn metric_tokens(text: &str) -> Vec<String> {
    split_words(text)
        .into_iter()
        .filter(|t| !is_punctuation_token(t))
        .collect()
}

fn ngram_counts<S: Eq + Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrevityPenalty {
    /// `min(1, c/r)`.
    Ratio,
    /// `1` if `c > r`, else `exp(1 − r/c)`.
    Exponential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuOptions {
    pub max_n: usize,
    pub weights: Vec<f64>,
    pub brevity: BrevityPenalty,
}

impl Default for BleuOptions {
    fn default() -> Self {
        BleuOptions::uniform(4)
    }
}

impl BleuOptions {
    pub fn uniform(max_n: usize) -> Self {
        BleuOptions {
            max_n,
            weights: vec![1.0 / max_n as f64; max_n],
            brevity: BrevityPenalty::Ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BleuFlag {
    EmptyCandidate,
    /// Precision of this n-gram order was zero.
    ZeroPrecision(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub flag: Option<BleuFlag>,
}

/// `bp · exp(Σ wₙ ln pₙ)`; 0 when any precision is 0.
pub fn bleu_from_parts(precisions: &[f64], weights: &[f64], bp: f64) -> f64 {
    if precisions.iter().any(|&p| p <= 0.0) {
        return 0.0;
    }
    let s: f64 = precisions.iter().zip(weights).map(|(p, w)| w * p.ln()).sum();
    bp * s.exp()
}

/// Sentence BLEU with clipped n-gram precision against one or more
/// references. The reference length for the brevity penalty is the one
/// closest to the candidate length (the shorter on ties).
pub fn bleu<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>], opts: &BleuOptions) -> Result<BleuScore> {
    if opts.max_n == 0 || opts.weights.len() != opts.max_n {
        return Err(Error::Config(format!(
            "BLEU needs {} weights, got {}",
            opts.max_n,
            opts.weights.len()
        )));
    }
    if (opts.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config("BLEU weights must sum to 1".into()));
    }
    if references.is_empty() {
        return Err(Error::Config("BLEU needs at least one reference".into()));
    }
    let cand: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let refs: Vec<Vec<&str>> = references
        .iter()
        .map(|r| r.iter().map(AsRef::as_ref).collect())
        .collect();
    if cand.is_empty() {
        return Ok(BleuScore {
            score: 0.0,
            precisions: vec![0.0; opts.max_n],
            brevity_penalty: 0.0,
            flag: Some(BleuFlag::EmptyCandidate),
        });
    }

    let mut precisions = Vec::with_capacity(opts.max_n);
    for n in 1..=opts.max_n {
        let counts = ngram_counts(&cand, n);
        let total: usize = counts.values().sum();
        let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        precisions.push(if total == 0 { 0.0 } else { clipped as f64 / total as f64 });
    }

    let c = cand.len() as f64;
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| ((l as i64 - cand.len() as i64).abs(), l))
        .expect("non-empty") as f64;
    let bp = match opts.brevity {
        BrevityPenalty::Ratio => (c / r).min(1.0),
        BrevityPenalty::Exponential => {
            if c > r {
                1.0
            } else {
                (1.0 - r / c).exp()
            }
        }
    };
    let flag = precisions
        .iter()
        .position(|&p| p == 0.0)
        .map(|i| BleuFlag::ZeroPrecision(i + 1));
    if let Some(BleuFlag::ZeroPrecision(n)) = flag {
        log::debug!("BLEU: no matching {n}-grams, score is 0");
    }
    Ok(BleuScore {
        score: bleu_from_parts(&precisions, &opts.weights, bp),
        precisions,
        brevity_penalty: bp,
        flag,
    })
}

/// Clipped n-gram recall against the reference; `None` when the reference
/// has no n-grams of this order.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> Option<f64> {
    let cand: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let refr: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let ref_counts = ngram_counts(&refr, n);
    let total: usize = ref_counts.values().sum();
    if total == 0 {
        return None;
    }
    let cand_counts = ngram_counts(&cand, n);
    let overlap: usize = ref_counts
        .iter()
        .map(|(g, &c)| c.min(cand_counts.get(g).copied().unwrap_or(0)))
        .sum();
    Some(overlap as f64 / total as f64)
}

/// Length of the longest common subsequence.
pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS length over the longer length; `None` if either side is empty.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Option<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return None;
    }
    let a: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let b: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    Some(lcs_len(&a, &b) as f64 / a.len().max(b.len()) as f64)
}

/// `2^(−mean log₂ p)` over per-token probabilities.
pub fn perplexity(probabilities: &[f64]) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut sum = 0.0;
    for &p in probabilities {
        if p == 0.0 {
            return Err(Error::ZeroProbability);
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidProbability(p));
        }
        sum += p.log2();
    }
    Ok((-sum / probabilities.len() as f64).exp2())
}

/// Probability the model gives each next token of `ids`. Sequences longer
/// than the context are scored in consecutive windows.
pub fn next_token_probabilities<T: Float>(model: &Model<T>, ids: &[TokenId]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ids.len().saturating_sub(1));
    for window in ids.chunks(model.config.max_seq_len) {
        if window.len() < 2 {
            continue;
        }
        let logits = model.forward(window)?;
        for t in 0..window.len() - 1 {
            let lp = log_softmax_row(logits.row(t));
            out.push(lp[window[t + 1] as usize].as_f64().exp());
        }
    }
    Ok(out)
}

/// `exp(mean NLL)` of the text's next-token predictions.
pub fn model_perplexity<T: Float>(model: &Model<T>, vocab: &Vocabulary, text: &str) -> Result<f64> {
    let ids = tokenize(text, vocab).ids;
    if ids.len() < 2 {
        return Err(Error::TextTooShort {
            tokens: ids.len(),
            needed: 2,
        });
    }
    let probs = next_token_probabilities(model, &ids)?;
    let nll: f64 = probs.iter().map(|p| -p.ln()).sum::<f64>() / probs.len() as f64;
    Ok(nll.exp())
}

/// Maps text to a fixed-width vector.
pub trait Embedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

impl<F: Fn(&str) -> Result<Vec<f64>>> Embedder for F {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self(text)
    }
}

/// Mean of the final normalized hidden states over the text's tokens
/// (the first `max_seq_len` tokens of longer texts).
pub fn embed<T: Float>(model: &Model<T>, vocab: &Vocabulary, text: &str) -> Result<Vec<f64>> {
    let mut ids = tokenize(text, vocab).ids;
    if ids.is_empty() {
        return Err(Error::EmptyText);
    }
    ids.truncate(model.config.max_seq_len);
    let h = model.hidden_states(&ids)?;
    let mut v = vec![0.0; h.cols()];
    for r in 0..h.rows() {
        v.iter_mut().zip(h.row(r)).for_each(|(a, &b)| *a += b.as_f64());
    }
    let n = h.rows() as f64;
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

pub struct ModelEmbedder<'a, T: Float> {
    pub model: &'a Model<T>,
    pub vocab: &'a Vocabulary,
}

impl<T: Float> Embedder for ModelEmbedder<'_, T> {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        embed(self.model, self.vocab, text)
    }
}

/// `u·v / (‖u‖‖v‖)`; `None` when either vector has zero norm.
pub fn cosine(u: &[f64], v: &[f64]) -> Option<f64> {
    if u.len() != v.len() {
        return None;
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return None;
    }
    Some(dot / (nu * nv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        metric_tokens(s)
    }

    #[test]
    fn bleu_parts_golden() {
        let s = bleu_from_parts(&[0.8, 0.6, 0.4], &[1.0 / 3.0; 3], 1.0);
        let expect = (0.8f64 * 0.6 * 0.4).cbrt();
        assert!((s - expect).abs() < 1e-12);
        assert!((s - 0.5769).abs() < 1e-3);
    }

    #[test]
    fn bleu_examples() {
        let c = toks("a b c");
        let r = vec![toks("a b c d")];
        let s = bleu(&c, &r, &BleuOptions::uniform(1)).unwrap();
        assert_eq!(s.precisions, vec![1.0]);
        assert!((s.score - 0.75).abs() < 1e-12);

        let same = toks("the ion source was heated");
        let s = bleu(&same, std::slice::from_ref(&same), &BleuOptions::default()).unwrap();
        assert!((s.score - 1.0).abs() < 1e-12);

        let empty: Vec<String> = Vec::new();
        let s = bleu(&empty, &r, &BleuOptions::default()).unwrap();
        assert_eq!((s.score, s.flag), (0.0, Some(BleuFlag::EmptyCandidate)));
    }

    #[test]
    fn bleu_clips_and_flags_zero_precision() {
        let c = toks("the the the the");
        let r = vec![toks("the cat")];
        let s = bleu(&c, &r, &BleuOptions::uniform(1)).unwrap();
        assert_eq!(s.precisions, vec![0.25]);
        let s = bleu(&c, &r, &BleuOptions::uniform(2)).unwrap();
        assert_eq!(s.score, 0.0);
        assert_eq!(s.flag, Some(BleuFlag::ZeroPrecision(2)));
    }

    #[test]
    fn exponential_brevity_penalty() {
        let c = toks("a b");
        let r = vec![toks("a b c d")];
        let opts = BleuOptions {
            brevity: BrevityPenalty::Exponential,
            ..BleuOptions::uniform(1)
        };
        let s = bleu(&c, &r, &opts).unwrap();
        assert!((s.brevity_penalty - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn bad_weights_rejected() {
        let c = toks("a");
        let opts = BleuOptions {
            weights: vec![0.5, 0.6],
            ..BleuOptions::uniform(2)
        };
        assert!(bleu(&c, std::slice::from_ref(&c), &opts).is_err());
    }

    #[test]
    fn rouge_one_golden() {
        let c = toks("The cat is on the mat.");
        let r = toks("The cat is sitting on the mat.");
        assert!((rouge_n(&c, &r, 1).unwrap() - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_n(&c, &c, 2), Some(1.0));
        assert_eq!(rouge_n(&toks("x y"), &r, 1), Some(0.0));
        assert_eq!(rouge_n(&c, &toks("one"), 2), None);
    }

    #[test]
    fn rouge_l_examples() {
        let a = toks("a b c d");
        assert_eq!(rouge_l(&a, &toks("a x c y")), Some(0.5));
        assert_eq!(rouge_l(&a, &a), Some(1.0));
        assert_eq!(rouge_l(&a, &toks("p q")), Some(0.0));
        assert_eq!(rouge_l(&a, &[]), None);
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(&[1.0, 1.0]).unwrap(), 1.0);
        assert!((perplexity(&[0.125; 5]).unwrap() - 8.0).abs() < 1e-12);
        let probs = [0.8, 0.7, 0.6, 0.5, 0.8, 0.9];
        let mean: f64 = probs.iter().map(|p: &f64| p.log2()).sum::<f64>() / 6.0;
        let got = perplexity(&probs).unwrap();
        assert!((got - (-mean).exp2()).abs() < 1e-12);
        assert!((got - 1.4217).abs() < 1e-3);
        assert!(matches!(perplexity(&[0.5, 0.0]), Err(Error::ZeroProbability)));
        assert!(perplexity(&[1.5]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), Some(0.0));
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
    }
}
