use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::meter::{meter, ResourceReport};
use super::{train, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{OptimizerKind, OptimizerSpec};
use crate::tensor::Float;
use crate::textprep::Block;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub optimizers: Vec<OptimizerKind>,
    pub rates: Vec<f64>,
    /// Optimizer steps for each learning rate; rates not listed use
    /// `base.max_steps`.
    pub steps_per_rate: Vec<(f64, usize)>,
    /// Shared settings. Its optimizer supplies every hyperparameter except
    /// kind and learning rate.
    pub base: TrainConfig,
    pub power_watts: f64,
    /// Cells run concurrently on up to this many threads.
    pub threads: usize,
}

impl GridSpec {
    pub fn steps_for(&self, rate: f64) -> usize {
        self.steps_per_rate
            .iter()
            .find(|(r, _)| (r - rate).abs() <= 1e-12 * rate.abs().max(1.0))
            .map_or(self.base.max_steps, |&(_, s)| s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Ok { val_error: f64, resources: ResourceReport },
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
    pub outcome: CellOutcome,
}

impl GridRow {
    pub fn ok(optimizer: OptimizerKind, lr: f64, steps: usize, val_error: f64, resources: ResourceReport) -> Self {
        GridRow {
            optimizer,
            lr,
            steps,
            outcome: CellOutcome::Ok { val_error, resources },
        }
    }

    fn metrics(&self) -> Option<(f64, &ResourceReport)> {
        match &self.outcome {
            CellOutcome::Ok { val_error, resources } => Some((*val_error, resources)),
            CellOutcome::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    /// Index into `rows`; `None` when every cell failed.
    pub chosen: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    /// Rows whose validation error is within this many nats of the best
    /// are treated as tied.
    pub delta_val: f64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy { delta_val: 0.02 }
    }
}

/// Lexicographic choice: validation error within `delta_val` of the best,
/// then least energy, least RAM, least runtime, then table order.
pub fn select_best(rows: &[GridRow], policy: &SelectionPolicy) -> Result<usize> {
    let ok: Vec<(usize, f64, &ResourceReport)> = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.metrics().map(|(v, res)| (i, v, res)))
        .collect();
    let best = ok.iter().map(|&(_, v, _)| v).fold(f64::INFINITY, f64::min);
    // Slack absorbs decimal rounding in tables such as 3.30 vs 3.28.
    let limit = best + policy.delta_val + 1e-9;
    ok.into_iter()
        .filter(|&(_, v, _)| v <= limit)
        .min_by(|a, b| {
            a.2.energy_kwh
                .total_cmp(&b.2.energy_kwh)
                .then(a.2.ram_mb.total_cmp(&b.2.ram_mb))
                .then(a.2.run_time_s.total_cmp(&b.2.run_time_s))
                .then(a.0.cmp(&b.0))
        })
        .map(|(i, _, _)| i)
        .ok_or(Error::NoSuccessfulRows)
}

/// One independent training run per (rate, optimizer) cell, each starting
/// from a copy of `initial`. A failing cell is recorded and the grid goes on.
pub fn grid_search<T: Float>(
    spec: &GridSpec,
    initial: &Model<T>,
    train_blocks: &[Block],
    eval_blocks: &[Block],
    policy: &SelectionPolicy,
) -> Result<GridResult> {
    if spec.optimizers.is_empty() || spec.rates.is_empty() {
        return Err(Error::TrainConfig(
            "grid needs at least one optimizer and one rate".into(),
        ));
    }
    let cells: Vec<(OptimizerKind, f64, usize)> = spec
        .rates
        .iter()
        .flat_map(|&lr| spec.optimizers.iter().map(move |&k| (k, lr, spec.steps_for(lr))))
        .collect();
    let results: Mutex<Vec<Option<GridRow>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let workers = spec.threads.clamp(1, cells.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(kind, lr, steps)) = cells.get(i) else { break };
                let config = TrainConfig {
                    max_steps: steps,
                    optimizer: OptimizerSpec {
                        kind,
                        eta: lr,
                        ..spec.base.optimizer
                    },
                    output_dir: None,
                    ..spec.base.clone()
                };
                let (outcome, resources) = meter(spec.power_watts, || {
                    let mut model = initial.clone();
                    train(&config, &mut model, train_blocks, eval_blocks)
                });
                let outcome = match outcome {
                    Ok(log) => match log.final_eval() {
                        Some(v) => CellOutcome::Ok {
                            val_error: v,
                            resources,
                        },
                        None => CellOutcome::Failed("no evaluation recorded".into()),
                    },
                    Err(e) => {
                        log::warn!("grid cell {kind} lr={lr} failed: {e}");
                        CellOutcome::Failed(e.to_string())
                    }
                };
                log::info!("grid cell {kind} lr={lr} steps={steps} done");
                results.lock().expect("grid results lock")[i] = Some(GridRow {
                    optimizer: kind,
                    lr,
                    steps,
                    outcome,
                });
            });
        }
    });

    let rows: Vec<GridRow> = results
        .into_inner()
        .expect("grid results lock")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect();
    let chosen = select_best(&rows, policy).ok();
    Ok(GridResult { rows, chosen })
}

const HEADER: [&str; 7] = [
    "optimizer",
    "lr",
    "steps",
    "val_error",
    "run_time_s",
    "ram_mb",
    "energy_kwh",
];

pub fn write_grid_csv<W: Write>(rows: &[GridRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in rows {
        let mut rec = vec![r.optimizer.to_string(), r.lr.to_string(), r.steps.to_string()];
        match r.metrics() {
            Some((v, res)) => rec.extend([
                v.to_string(),
                res.run_time_s.to_string(),
                res.ram_mb.to_string(),
                res.energy_kwh.to_string(),
            ]),
            None => rec.extend(std::iter::repeat_n(String::new(), 4)),
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::Report(e.to_string()))?;
    Ok(())
}

/// Reads a table written by [`write_grid_csv`]; rows with empty metric
/// fields are failed cells.
pub fn read_grid_csv<R: Read>(input: R) -> Result<Vec<GridRow>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let idx: Vec<usize> = HEADER.iter().map(|h| col(h)).collect::<Result<_>>()?;
    let num = |s: &str, what: &str| -> Result<f64> {
        s.trim()
            .parse()
            .map_err(|_| Error::Report(format!("bad {what} value `{s}`")))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |k: usize| rec.get(idx[k]).unwrap_or("");
        let optimizer: OptimizerKind = f(0).parse()?;
        let lr = num(f(1), "lr")?;
        let steps = num(f(2), "steps")? as usize;
        let outcome = if f(3).trim().is_empty() {
            CellOutcome::Failed("failed".into())
        } else {
            CellOutcome::Ok {
                val_error: num(f(3), "val_error")?,
                resources: ResourceReport {
                    run_time_s: num(f(4), "run_time_s")?,
                    ram_mb: num(f(5), "ram_mb")?,
                    energy_kwh: num(f(6), "energy_kwh")?,
                },
            }
        };
        rows.push(GridRow {
            optimizer,
            lr,
            steps,
            outcome,
        });
    }
    Ok(rows)
}

/// Human-readable table with one line per cell; the chosen cell is starred.
pub fn render_table(result: &GridResult) -> String {
    let head = [
        "Optimizer",
        "Learning rate",
        "Steps",
        "Validation error",
        "Run time (sec)",
        "RAM usage (MB)",
        "Electricity usage (kWh)",
    ];
    let mut lines: Vec<Vec<String>> = vec![head.iter().map(|s| s.to_string()).collect()];
    for (i, r) in result.rows.iter().enumerate() {
        let mark = if result.chosen == Some(i) { "*" } else { "" };
        let mut line = vec![format!("{}{mark}", r.optimizer), r.lr.to_string(), r.steps.to_string()];
        match r.metrics() {
            Some((v, res)) => line.extend([
                format!("{v:.4}"),
                format!("{:.2}", res.run_time_s),
                format!("{:.2}", res.ram_mb),
                format!("{:.6}", res.energy_kwh),
            ]),
            None => line.extend(["failed".to_string(), "-".into(), "-".into(), "-".into()]),
        }
        lines.push(line);
    }
    let widths: Vec<usize> = (0..head.len())
        .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for l in &lines {
        let cells: Vec<String> = l.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: f64, energy: f64, ram: f64, time: f64) -> GridRow {
        GridRow::ok(
            OptimizerKind::Sgd,
            0.01,
            10,
            v,
            ResourceReport {
                run_time_s: time,
                ram_mb: ram,
                energy_kwh: energy,
            },
        )
    }

    #[test]
    fn tie_broken_by_energy() {
        let rows = [row(3.0, 0.03, 1.0, 1.0), row(3.0, 0.02, 1.0, 1.0)];
        assert_eq!(select_best(&rows, &SelectionPolicy::default()).unwrap(), 1);
    }

    #[test]
    fn clear_winner_beats_cheaper_rows() {
        let rows = [row(3.0, 0.01, 1.0, 1.0), row(2.5, 0.09, 9.0, 9.0)];
        assert_eq!(select_best(&rows, &SelectionPolicy::default()).unwrap(), 1);
    }

    #[test]
    fn ram_then_runtime_then_order() {
        let rows = [
            row(3.0, 0.02, 2.0, 1.0),
            row(3.0, 0.02, 1.0, 5.0),
            row(3.0, 0.02, 1.0, 4.0),
            row(3.0, 0.02, 1.0, 4.0),
        ];
        assert_eq!(select_best(&rows, &SelectionPolicy::default()).unwrap(), 2);
    }

    #[test]
    fn failed_rows_are_skipped_and_all_failed_is_an_error() {
        let failed = GridRow {
            outcome: CellOutcome::Failed("boom".into()),
            ..row(0.0, 0.0, 0.0, 0.0)
        };
        let rows = [failed.clone(), row(3.0, 0.5, 1.0, 1.0)];
        assert_eq!(select_best(&rows, &SelectionPolicy::default()).unwrap(), 1);
        assert!(matches!(
            select_best(&[failed], &SelectionPolicy::default()),
            Err(Error::NoSuccessfulRows)
        ));
    }

    #[test]
    fn csv_round_trip() {
        let mut rows = vec![row(3.25, 0.0275, 301.5, 2601.52)];
        rows.push(GridRow {
            optimizer: OptimizerKind::Adam,
            outcome: CellOutcome::Failed("x".into()),
            ..row(0.0, 0.0, 0.0, 0.0)
        });
        let mut buf = Vec::new();
        write_grid_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("optimizer,lr,steps,val_error,run_time_s,ram_mb,energy_kwh\n"));
        let back = read_grid_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(matches!(back[1].outcome, CellOutcome::Failed(_)));
    }
}
