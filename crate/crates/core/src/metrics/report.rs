use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{bleu, cosine, metric_tokens, model_perplexity, rouge_l, rouge_n, BleuOptions, Embedder};
use crate::error::{Error, Result};
use crate::model::{generate, GenerationConfig, Model};
use crate::tensor::Float;
use crate::textprep::Vocabulary;

pub const AVERAGES_FILE: &str = "model_comparison_metrics.csv";
pub const INDIVIDUAL_FILE: &str = "model_comparison_metrics_individual.csv";
pub const METRIC_COLUMNS: [&str; 5] = [
    "BLEU Score",
    "ROUGE-1 Score",
    "ROUGE-2 Score",
    "ROUGE-L Score",
    "Perplexity Score",
];

/// A prompt, the text it should produce, and an optional reworded prompt
/// for reproducibility runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub prompt: String,
    pub reference: String,
    #[serde(default)]
    pub variant: Option<String>,
}

#[derive(Debug, Deserialize)]
struct PromptFile {
    prompt: Vec<PromptPair>,
}

/// Reads a TOML file of `[[prompt]]` tables with `prompt`, `reference`
/// and optional `variant` keys.
pub fn read_prompt_set(path: &Path) -> Result<Vec<PromptPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: PromptFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if file.prompt.is_empty() {
        return Err(Error::Config(format!("{}: no prompts", path.display())));
    }
    Ok(file.prompt)
}

/// Scores for one generation. Undefined scores are NaN and explained in
/// `flag`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub perplexity: f64,
    pub flag: Option<String>,
}

impl MetricRow {
    pub fn values(&self) -> [f64; 5] {
        [self.bleu, self.rouge1, self.rouge2, self.rouge_l, self.perplexity]
    }

    fn from_values(v: [f64; 5]) -> Self {
        MetricRow {
            bleu: v[0],
            rouge1: v[1],
            rouge2: v[2],
            rouge_l: v[3],
            perplexity: v[4],
            flag: None,
        }
    }

    fn failed(reason: String) -> Self {
        MetricRow {
            flag: Some(reason),
            ..MetricRow::from_values([f64::NAN; 5])
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptResult {
    pub prompt: String,
    pub generated: Option<String>,
    pub variant_generated: Option<String>,
    pub row: MetricRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelReport {
    pub label: String,
    pub results: Vec<PromptResult>,
    /// Column means over the rows where that score is defined.
    pub averages: MetricRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub generation: GenerationConfig,
    pub bleu: BleuOptions,
    /// Also generate from each prompt's variant.
    pub variants: bool,
    /// Where report files go; `None` writes nothing.
    pub out_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            generation: GenerationConfig::default(),
            bleu: BleuOptions::default(),
            variants: false,
            out_dir: None,
        }
    }
}

fn score<T: Float>(
    model: &Model<T>,
    vocab: &Vocabulary,
    generated: &str,
    reference: &str,
    opts: &BleuOptions,
) -> MetricRow {
    let cand = metric_tokens(generated);
    let refr = metric_tokens(reference);
    let mut flags = Vec::new();
    let mut defined = |name: &str, v: Option<f64>| {
        v.unwrap_or_else(|| {
            flags.push(format!("{name} undefined"));
            f64::NAN
        })
    };
    let b = match bleu(&cand, std::slice::from_ref(&refr), opts) {
        Ok(s) => s.score,
        Err(e) => defined(&format!("BLEU ({e})"), None),
    };
    let r1 = defined("ROUGE-1", rouge_n(&cand, &refr, 1));
    let r2 = defined("ROUGE-2", rouge_n(&cand, &refr, 2));
    let rl = defined("ROUGE-L", rouge_l(&cand, &refr));
    let ppl = defined("perplexity", model_perplexity(model, vocab, generated).ok());
    MetricRow {
        flag: (!flags.is_empty()).then(|| flags.join("; ")),
        ..MetricRow::from_values([b, r1, r2, rl, ppl])
    }
}

fn column_means(rows: &[MetricRow]) -> MetricRow {
    let mut out = [f64::NAN; 5];
    for (c, slot) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = rows.iter().map(|r| r.values()[c]).filter(|v| v.is_finite()).collect();
        if !vals.is_empty() {
            *slot = vals.iter().sum::<f64>() / vals.len() as f64;
        }
    }
    MetricRow::from_values(out)
}

/// Generates one sentence per prompt with every model, scores it against the
/// reference, and (with an output directory) writes the two comparison CSVs
/// plus one generated-text file per model.
pub fn evaluate_models<T: Float>(
    models: &[(String, &Model<T>, &Vocabulary)],
    prompts: &[PromptPair],
    opts: &EvalOptions,
) -> Result<Vec<ModelReport>> {
    if prompts.is_empty() {
        return Err(Error::Config("prompt set is empty".into()));
    }
    let mut reports = Vec::with_capacity(models.len());
    for (label, model, vocab) in models {
        let mut results = Vec::with_capacity(prompts.len());
        for p in prompts {
            let generated = generate(*model, vocab, &p.prompt, &opts.generation);
            let row = match &generated {
                Ok(text) => score(*model, vocab, text, &p.reference, &opts.bleu),
                Err(e) => {
                    log::warn!("{label}: generation failed for `{}`: {e}", p.prompt);
                    MetricRow::failed(format!("generation failed: {e}"))
                }
            };
            let variant_generated = match (&p.variant, opts.variants) {
                (Some(v), true) => Some(generate(*model, vocab, v, &opts.generation).unwrap_or_default()),
                _ => None,
            };
            results.push(PromptResult {
                prompt: p.prompt.clone(),
                generated: generated.ok(),
                variant_generated,
                row,
            });
        }
        let rows: Vec<MetricRow> = results.iter().map(|r| r.row.clone()).collect();
        reports.push(ModelReport {
            label: label.clone(),
            averages: column_means(&rows),
            results,
        });
    }
    if let Some(dir) = &opts.out_dir {
        write_reports(&reports, dir)?;
    }
    Ok(reports)
}

fn write_reports(reports: &[ModelReport], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let open = |name: &str| {
        let p = dir.join(name);
        fs::File::create(&p).map_err(|e| Error::io(p, e))
    };

    let mut avg = csv::Writer::from_writer(open(AVERAGES_FILE)?);
    let mut head = vec!["Model"];
    head.extend(METRIC_COLUMNS);
    avg.write_record(&head)?;
    for r in reports {
        let mut rec = vec![r.label.clone()];
        rec.extend(r.averages.values().iter().map(f64::to_string));
        avg.write_record(&rec)?;
    }
    avg.flush().map_err(|e| Error::io(dir.join(AVERAGES_FILE), e))?;

    let mut ind = csv::Writer::from_writer(open(INDIVIDUAL_FILE)?);
    let mut head = vec!["Model", "Prompt"];
    head.extend(METRIC_COLUMNS);
    ind.write_record(&head)?;
    for r in reports {
        for p in &r.results {
            let mut rec = vec![r.label.clone(), p.prompt.clone()];
            rec.extend(p.row.values().iter().map(f64::to_string));
            ind.write_record(&rec)?;
        }
    }
    ind.flush().map_err(|e| Error::io(dir.join(INDIVIDUAL_FILE), e))?;

    for r in reports {
        let write_lines = |name: String, lines: Vec<&str>| -> Result<()> {
            let mut f = open(&name)?;
            for l in lines {
                writeln!(f, "{}", l.replace('\n', " ")).map_err(|e| Error::io(dir.join(&name), e))?;
            }
            Ok(())
        };
        let main = r.results.iter().map(|p| p.generated.as_deref().unwrap_or("")).collect();
        write_lines(format!("{}_generated_text.txt", r.label), main)?;
        if r.results.iter().any(|p| p.variant_generated.is_some()) {
            let var = r
                .results
                .iter()
                .map(|p| p.variant_generated.as_deref().unwrap_or(""))
                .collect();
            write_lines(format!("{}_generated_text_synonyms.txt", r.label), var)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReproReport {
    /// One entry per pair; `None` where an embedding had zero norm.
    pub cosines: Vec<Option<f64>>,
    /// Mean over defined pairs.
    pub mean: Option<f64>,
}

/// Cosine similarity between the embeddings of each base/variant pair.
pub fn reproducibility<E: Embedder + ?Sized>(base: &[String], variant: &[String], embedder: &E) -> Result<ReproReport> {
    if base.len() != variant.len() {
        return Err(Error::LengthMismatch(base.len(), variant.len()));
    }
    let mut cosines = Vec::with_capacity(base.len());
    for (i, (a, b)) in base.iter().zip(variant).enumerate() {
        let c = cosine(&embedder.embed(a)?, &embedder.embed(b)?);
        if c.is_none() {
            log::warn!("pair {}: zero-norm embedding, cosine undefined", i + 1);
        }
        cosines.push(c);
    }
    let defined: Vec<f64> = cosines.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(ReproReport { cosines, mean })
}

/// `Pair Number,Cosine Similarity` rows numbered from 1; undefined pairs
/// are written as `NaN`.
pub fn write_repro_csv<W: Write>(report: &ReproReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["Pair Number", "Cosine Similarity"])?;
    for (i, c) in report.cosines.iter().enumerate() {
        w.write_record([(i + 1).to_string(), c.unwrap_or(f64::NAN).to_string()])?;
    }
    w.flush().map_err(|e| Error::Report(e.to_string()))?;
    Ok(())
}
