use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use super::{rank_sum_test, signed_rank_test, Alternative, RankOptions, RankTestResult, Sample};
use crate::error::{Error, Result};

/// Metric columns compared by default.
pub const DEFAULT_METRICS: [&str; 4] = ["BLEU Score", "ROUGE-1 Score", "ROUGE-L Score", "Perplexity Score"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    RankSum,
    SignedRank,
}

impl std::str::FromStr for TestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "ranksum" => Ok(TestKind::RankSum),
            "signedrank" => Ok(TestKind::SignedRank),
            _ => Err(Error::Config(format!("test must be ranksum or signedrank, got `{s}`"))),
        }
    }
}

/// Per-metric one-sided directions, matched by case-insensitive prefix of
/// the column name, with a fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct Directions {
    pub rules: Vec<(String, Alternative)>,
    pub default: Alternative,
}

impl Default for Directions {
    fn default() -> Self {
        Directions {
            rules: vec![("perplexity".into(), Alternative::Less)],
            default: Alternative::Greater,
        }
    }
}

impl Directions {
    /// Parses `perplexity=less,default=greater`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut out = Directions {
            rules: Vec::new(),
            default: Alternative::Greater,
        };
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected metric=direction, got `{part}`")))?;
            let alt: Alternative = v.trim().parse()?;
            let k = k.trim().to_ascii_lowercase();
            if k == "default" {
                out.default = alt;
            } else {
                out.rules.push((k, alt));
            }
        }
        Ok(out)
    }

    pub fn for_metric(&self, metric: &str) -> Alternative {
        let m = metric.to_ascii_lowercase();
        self.rules
            .iter()
            .find(|(k, _)| m.starts_with(k.as_str()))
            .map_or(self.default, |&(_, a)| a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricComparison {
    pub metric: String,
    pub x_label: String,
    pub y_label: String,
    pub result: RankTestResult,
}

struct Table {
    models: Vec<String>,
    prompts: BTreeMap<String, Vec<String>>,
    columns: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
}

fn parse_value(s: &str) -> f64 {
    s.trim().parse().unwrap_or(f64::NAN)
}

fn read_table<R: Read>(input: R, metrics: &[String]) -> Result<Table> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let model_col = find("Model")?;
    let prompt_col = headers.iter().position(|h| h.trim() == "Prompt");
    let metric_cols: Vec<usize> = metrics.iter().map(|m| find(m)).collect::<Result<_>>()?;

    let mut table = Table {
        models: Vec::new(),
        prompts: BTreeMap::new(),
        columns: metrics.iter().map(|m| (m.clone(), BTreeMap::new())).collect(),
    };
    for rec in rdr.records() {
        let rec = rec?;
        let model = rec.get(model_col).unwrap_or("").to_string();
        if !table.models.contains(&model) {
            table.models.push(model.clone());
        }
        let prompt = prompt_col.and_then(|c| rec.get(c)).unwrap_or("").to_string();
        table.prompts.entry(model.clone()).or_default().push(prompt);
        for (m, &c) in metrics.iter().zip(&metric_cols) {
            let v = parse_value(rec.get(c).unwrap_or(""));
            table
                .columns
                .get_mut(m)
                .unwrap()
                .entry(model.clone())
                .or_default()
                .push(v);
        }
    }
    Ok(table)
}

fn finite(label: &str, metric: &str, values: &[f64]) -> Vec<f64> {
    let kept: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if kept.len() < values.len() {
        log::warn!(
            "{metric}: dropped {} undefined value(s) for `{label}`",
            values.len() - kept.len()
        );
    }
    kept
}

/// Runs the configured test for each metric column of an individual-scores
/// CSV. `x` is compared against `y`; when not given, the file must hold
/// exactly two models and `x` is the one listed last.
pub fn compare_reports(
    individual_csv: &Path,
    metrics: &[String],
    directions: &Directions,
    test: TestKind,
    labels: Option<(String, String)>,
    opts: &RankOptions,
) -> Result<Vec<MetricComparison>> {
    let file = std::fs::File::open(individual_csv).map_err(|e| Error::io(individual_csv, e))?;
    let table = read_table(file, metrics)?;
    let (x, y) = match labels {
        Some(pair) => pair,
        None => match table.models.as_slice() {
            [a, b] => (b.clone(), a.clone()),
            other => {
                return Err(Error::Report(format!(
                    "expected exactly two models, found {}; name them explicitly",
                    other.len()
                )))
            }
        },
    };
    for l in [&x, &y] {
        if !table.models.contains(l) {
            return Err(Error::MissingLabel(l.clone()));
        }
    }
    if test == TestKind::SignedRank && table.prompts[&x] != table.prompts[&y] {
        return Err(Error::Report(format!(
            "`{x}` and `{y}` were not scored on the same prompts in the same order"
        )));
    }

    let mut out = Vec::with_capacity(metrics.len());
    for m in metrics {
        let col = &table.columns[m];
        let alt = directions.for_metric(m);
        let result = match test {
            TestKind::RankSum => {
                let xs = Sample::new(&x, finite(&x, m, &col[&x]))?;
                let ys = Sample::new(&y, finite(&y, m, &col[&y]))?;
                rank_sum_test(&xs, &ys, alt, opts)?
            }
            TestKind::SignedRank => {
                let (xv, yv): (Vec<f64>, Vec<f64>) = col[&x]
                    .iter()
                    .zip(&col[&y])
                    .filter(|(a, b)| a.is_finite() && b.is_finite())
                    .map(|(a, b)| (*a, *b))
                    .unzip();
                if xv.len() < col[&x].len() {
                    log::warn!(
                        "{m}: dropped {} pair(s) with undefined values",
                        col[&x].len() - xv.len()
                    );
                }
                signed_rank_test(&Sample::new(&x, xv)?, &Sample::new(&y, yv)?, alt, opts)?
            }
        };
        out.push(MetricComparison {
            metric: m.clone(),
            x_label: x.clone(),
            y_label: y.clone(),
            result,
        });
    }
    Ok(out)
}

/// Reads the `Cosine Similarity` column of a reproducibility CSV, skipping
/// undefined pairs.
pub fn read_repro_csv(path: &Path) -> Result<Vec<f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let table = read_table_repro(file)?;
    let label = path.display().to_string();
    Ok(finite(&label, "Cosine Similarity", &table))
}

fn read_table_repro<R: Read>(input: R) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_reader(input);
    let col = rdr
        .headers()?
        .iter()
        .position(|h| h.trim() == "Cosine Similarity")
        .ok_or_else(|| Error::MissingColumn("Cosine Similarity".into()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        out.push(parse_value(rec?.get(col).unwrap_or("")));
    }
    Ok(out)
}

/// Rank-sum test on two reproducibility CSVs.
pub fn compare_repro(a: &Path, b: &Path, alternative: Alternative, opts: &RankOptions) -> Result<MetricComparison> {
    let (la, lb) = (a.display().to_string(), b.display().to_string());
    let xs = Sample::new(&la, read_repro_csv(a)?)?;
    let ys = Sample::new(&lb, read_repro_csv(b)?)?;
    Ok(MetricComparison {
        metric: "Cosine Similarity".into(),
        result: rank_sum_test(&xs, &ys, alternative, opts)?,
        x_label: la,
        y_label: lb,
    })
}

/// Aligned `Metric / Test statistic / P-value` table.
pub fn render_comparison(rows: &[MetricComparison]) -> String {
    let cells: Vec<[String; 3]> = rows
        .iter()
        .map(|r| {
            [
                r.metric.clone(),
                format!("{:.1}", r.result.statistic),
                format!("{:.4}", r.result.p_value),
            ]
        })
        .collect();
    let head = ["Metric", "Test statistic", "P-value"];
    let mut w = head.map(str::len);
    for c in &cells {
        for i in 0..3 {
            w[i] = w[i].max(c[i].len());
        }
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<a$}  {:>b$}  {:>c$}",
        head[0],
        head[1],
        head[2],
        a = w[0],
        b = w[1],
        c = w[2]
    );
    for c in &cells {
        let _ = writeln!(
            s,
            "{:<a$}  {:>b$}  {:>c$}",
            c[0],
            c[1],
            c[2],
            a = w[0],
            b = w[1],
            c = w[2]
        );
    }
    s
}

pub fn write_comparison_csv<W: Write>(rows: &[MetricComparison], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["Metric", "Test statistic", "P-value", "Method", "Alternative", "X", "Y"])?;
    for r in rows {
        w.write_record([
            r.metric.clone(),
            r.result.statistic.to_string(),
            r.result.p_value.to_string(),
            r.result.method.to_string(),
            r.result.alternative.to_string(),
            r.x_label.clone(),
            r.y_label.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::Report(e.to_string()))?;
    Ok(())
}
