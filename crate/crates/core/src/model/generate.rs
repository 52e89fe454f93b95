//! Beam-search decoding with n-gram repetition blocking.

use super::loss::log_softmax_row;
use super::network::Model;
use crate::error::{Error, Result};
use crate::tensor::Float;
use crate::textprep::{detokenize, tokenize, TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    /// Total length cap including the prompt; also capped by the model's
    /// context length.
    pub max_length: usize,
    pub num_beams: usize,
    /// 0 disables blocking.
    pub no_repeat_ngram_size: usize,
    /// Tokens that end a hypothesis. They are not part of the returned
    /// continuation.
    pub stop_ids: Vec<TokenId>,
    /// Tokens never generated.
    pub banned_ids: Vec<TokenId>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_length: 200,
            num_beams: 2,
            no_repeat_ngram_size: 2,
            stop_ids: Vec::new(),
            banned_ids: Vec::new(),
        }
    }
}

/// Tokens that would complete an n-gram already present in `seq`.
pub fn banned_next_tokens(seq: &[TokenId], n: usize) -> Vec<TokenId> {
    if n == 0 || seq.len() + 1 < n {
        return Vec::new();
    }
    let prefix = &seq[seq.len() + 1 - n..];
    let mut out: Vec<TokenId> = seq
        .windows(n)
        .filter(|w| &w[..n - 1] == prefix)
        .map(|w| w[n - 1])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Debug, Clone)]
struct Hypothesis {
    ids: Vec<TokenId>,
    score: f64,
}

/// Beam search from `prompt`; returns the best continuation (prompt and stop
/// token excluded) and its total log-probability.
///
/// Candidates are ranked by total log-probability, ties broken by beam index
/// then token id. A stop token ranked within the top `num_beams` candidates
/// finishes its hypothesis. Search ends once `num_beams` hypotheses have
/// finished and none alive scores higher, at the length cap, or when every
/// continuation is banned.
pub fn generate_ids<T: Float>(
    model: &Model<T>,
    prompt: &[TokenId],
    cfg: &GenerationConfig,
) -> Result<(Vec<TokenId>, f64)> {
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if cfg.num_beams == 0 {
        return Err(Error::Config("num_beams must be at least 1".into()));
    }
    let cap = cfg.max_length.min(model.config.max_seq_len);
    if prompt.len() > model.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: prompt.len(),
            max: model.config.max_seq_len,
        });
    }
    let vocab = model.config.vocab_size;
    let mut alive = vec![Hypothesis {
        ids: prompt.to_vec(),
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while alive[0].ids.len() < cap {
        let rows: Vec<&[TokenId]> = alive.iter().map(|h| h.ids.as_slice()).collect();
        let logits = model.last_logits(&rows)?;
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        for (b, h) in alive.iter().enumerate() {
            let lp = log_softmax_row(logits.row(b));
            let mut blocked = vec![false; vocab];
            for &t in banned_next_tokens(&h.ids, cfg.no_repeat_ngram_size)
                .iter()
                .chain(&cfg.banned_ids)
            {
                if (t as usize) < vocab {
                    blocked[t as usize] = true;
                }
            }
            for (t, &l) in lp.iter().enumerate() {
                let l = l.as_f64();
                if !blocked[t] && l.is_finite() {
                    cands.push((h.score + l, b, t as TokenId));
                }
            }
        }
        if cands.is_empty() {
            break;
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

        let mut next = Vec::with_capacity(cfg.num_beams);
        for (rank, &(score, b, t)) in cands.iter().enumerate() {
            if cfg.stop_ids.contains(&t) {
                if rank < cfg.num_beams {
                    finished.push(Hypothesis {
                        ids: alive[b].ids.clone(),
                        score,
                    });
                }
                continue;
            }
            let mut ids = alive[b].ids.clone();
            ids.push(t);
            next.push(Hypothesis { ids, score });
            if next.len() == cfg.num_beams {
                break;
            }
        }
        let best_finished = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let done = finished.len() >= cfg.num_beams && next.first().is_none_or(|h| best_finished >= h.score);
        if next.is_empty() || done {
            alive = next;
            break;
        }
        alive = next;
    }

    let best = finished
        .into_iter()
        .chain(alive)
        .reduce(|a, b| if b.score > a.score { b } else { a })
        .expect("at least the prompt hypothesis");
    Ok((best.ids[prompt.len()..].to_vec(), best.score))
}

/// Tokens that end a sentence for truncation purposes.
pub fn is_sentence_end(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| matches!(c, '.' | '!' | '?'))
}

/// One-sentence generation: the prompt is continued with beam search and
/// the prompt-plus-continuation text is cut before its first sentence
/// terminator. Sentence terminators and `<eos>` stop a hypothesis.
pub fn generate<T: Float>(
    model: &Model<T>,
    vocab: &Vocabulary,
    prompt: &str,
    cfg: &GenerationConfig,
) -> Result<String> {
    let prompt_ids = tokenize(prompt, vocab).ids;
    if prompt_ids.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let mut cfg = cfg.clone();
    cfg.stop_ids.push(vocab.eos_id());
    cfg.stop_ids.extend(
        vocab
            .tokens()
            .iter()
            .enumerate()
            .filter(|(_, t)| is_sentence_end(t))
            .map(|(i, _)| i as TokenId),
    );
    cfg.banned_ids.push(vocab.pad_id());
    let (cont, _) = generate_ids(model, &prompt_ids, &cfg)?;
    let mut ids = prompt_ids;
    ids.extend(cont);
    let cut = ids
        .iter()
        .position(|&i| vocab.token(i).is_some_and(is_sentence_end))
        .unwrap_or(ids.len());
    Ok(detokenize(&ids[..cut], vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(vocab_size: usize, seed: u64) -> Model<f64> {
        Model::init(ModelConfig {
            vocab_size,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_seq_len: 16,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn bigram_bans() {
        assert_eq!(banned_next_tokens(&[1, 2, 3, 1], 2), vec![2]);
        assert_eq!(banned_next_tokens(&[1, 2, 1, 3, 1], 2), vec![2, 3]);
        assert_eq!(banned_next_tokens(&[4, 5], 3), Vec::<TokenId>::new());
        assert_eq!(banned_next_tokens(&[4, 5, 6, 4, 5], 3), vec![6]);
        assert!(banned_next_tokens(&[1, 1, 1], 0).is_empty());
    }

    #[test]
    fn empty_prompt_is_an_error() {
        let m = model(7, 0);
        assert!(matches!(
            generate_ids(&m, &[], &GenerationConfig::default()),
            Err(Error::EmptyPrompt)
        ));
    }

    #[test]
    fn beam_one_is_greedy() {
        let m = model(9, 4);
        let cfg = GenerationConfig {
            max_length: 12,
            num_beams: 1,
            no_repeat_ngram_size: 0,
            ..GenerationConfig::default()
        };
        let (got, _) = generate_ids(&m, &[3, 5], &cfg).unwrap();
        let mut seq = vec![3, 5];
        while seq.len() < 12 {
            let logits = m.forward(&seq).unwrap();
            let last = logits.row(seq.len() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            seq.push(best as TokenId);
        }
        assert_eq!(got, seq[2..]);
    }

    #[test]
    fn length_cap_includes_prompt() {
        let m = model(9, 1);
        let cfg = GenerationConfig {
            max_length: 6,
            no_repeat_ngram_size: 0,
            ..GenerationConfig::default()
        };
        let (got, _) = generate_ids(&m, &[1, 2, 3], &cfg).unwrap();
        assert_eq!(got.len(), 3);
    }

    #[test]
    fn sentence_end_tokens() {
        assert!(is_sentence_end("."));
        assert!(is_sentence_end("?!"));
        assert!(!is_sentence_end(","));
        assert!(!is_sentence_end("3.5"));
    }
}
