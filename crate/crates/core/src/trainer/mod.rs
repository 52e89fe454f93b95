//! Training and evaluation loops, resource metering and the optimizer grid.

mod grid;
mod meter;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use grid::{
    grid_search, read_grid_csv, render_table, select_best, write_grid_csv, CellOutcome, GridResult, GridRow, GridSpec,
    SelectionPolicy,
};
pub use meter::{meter, os_peak_rss_mb, ResourceReport, DEFAULT_POWER_WATTS};

use crate::error::{Error, Result};
use crate::model::{checkpoint, Model};
use crate::optim::{make_state, step, AccumulationBuffer, OptimizerSpec};
use crate::tensor::Float;
use crate::textprep::{Batch, Block};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Optimizer updates to perform.
    pub max_steps: usize,
    /// Blocks per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer update.
    pub grad_accum: usize,
    /// 0 evaluates only at the start and the end.
    pub eval_steps: usize,
    pub logging_steps: usize,
    pub block_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerSpec,
    /// 0 writes only the final checkpoint.
    pub save_steps: usize,
    /// Where checkpoints go; `None` keeps everything in memory.
    pub output_dir: Option<PathBuf>,
    /// Reshuffle block order each pass instead of sequential order.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 300,
            batch_size: 4,
            grad_accum: 4,
            eval_steps: 50,
            logging_steps: 10,
            block_size: 64,
            seed: 42,
            optimizer: OptimizerSpec::default(),
            save_steps: 0,
            output_dir: None,
            shuffle: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::TrainConfig(
                "batch_size and grad_accum must be at least 1".into(),
            ));
        }
        if self.block_size < 2 {
            return Err(Error::TrainConfig("block_size must be at least 2".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean micro-batch loss of the update at each logging point.
    pub train: Vec<LossPoint>,
    pub eval: Vec<LossPoint>,
    /// Seconds elapsed since the previous logging point.
    pub interval_seconds: Vec<f64>,
    pub optimizer_steps: usize,
    pub micro_batches: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainingLog {
    /// The loss trace without timing, for determinism comparisons.
    pub fn losses(&self) -> (Vec<LossPoint>, Vec<LossPoint>) {
        (self.train.clone(), self.eval.clone())
    }

    pub fn initial_eval(&self) -> Option<f64> {
        self.eval.first().map(|p| p.loss)
    }

    pub fn final_eval(&self) -> Option<f64> {
        self.eval.last().map(|p| p.loss)
    }
}

/// Mean next-token NLL over every eval block, dropout off.
pub fn evaluate<T: Float>(model: &Model<T>, blocks: &[Block]) -> Result<f64> {
    const CHUNK: usize = 8;
    if blocks.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let len = blocks[0].len();
    if blocks.iter().any(|b| b.len() != len) {
        return Err(Error::Shape("eval blocks differ in length".into()));
    }
    let mut total = 0.0;
    for chunk in blocks.chunks(CHUNK) {
        let refs: Vec<&Block> = chunk.iter().collect();
        let loss = model.loss(&Batch::from_blocks(&refs))?.as_f64();
        total += loss * chunk.len() as f64;
    }
    Ok(total / blocks.len() as f64)
}

struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    shuffle: bool,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, shuffle: bool, seed: u64) -> Self {
        let mut s = Sampler {
            order: (0..n).collect(),
            cursor: 0,
            shuffle,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        if shuffle {
            s.order.shuffle(&mut s.rng);
        }
        s
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.cursor = 0;
            if self.shuffle {
                self.order.shuffle(&mut self.rng);
            }
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint-{step}.ckpt"))
}

/// Trains the model's trainable tensors in place.
///
/// Each optimizer step consumes `grad_accum` micro-batches of `batch_size`
/// blocks taken in order with wraparound. Validation runs before the first
/// step, every `eval_steps` and after the last step. With an output
/// directory, checkpoints are written every `save_steps` and as
/// `final.ckpt`.
pub fn train<T: Float>(
    config: &TrainConfig,
    model: &mut Model<T>,
    train_blocks: &[Block],
    eval_blocks: &[Block],
) -> Result<TrainingLog> {
    config.validate()?;
    if train_blocks.is_empty() {
        return Err(Error::TrainConfig("training data yields no blocks".into()));
    }
    if eval_blocks.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = TrainingLog::default();
    let mut last_good: Option<PathBuf> = None;
    let save = |model: &Model<T>, path: PathBuf, log: &mut TrainingLog| -> Result<PathBuf> {
        checkpoint::save(model, &path)?;
        log.checkpoints.push(path.clone());
        Ok(path)
    };

    if config.max_steps == 0 {
        if let Some(dir) = &config.output_dir {
            save(model, dir.join("final.ckpt"), &mut log)?;
        }
        return Ok(log);
    }

    let shapes = model.trainable_shapes();
    let mut state = make_state::<T>(&config.optimizer, &shapes);
    let mut buffer = AccumulationBuffer::<T>::new(config.grad_accum, &shapes)?;
    let mut sampler = Sampler::new(train_blocks.len(), config.shuffle, config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    log.eval.push(LossPoint {
        step: 0,
        loss: evaluate(model, eval_blocks)?,
    });
    let mut tick = Instant::now();

    for s in 1..=config.max_steps {
        let mut step_loss = 0.0;
        let mut mean_grads = None;
        for _ in 0..config.grad_accum {
            let picks: Vec<&Block> = (0..config.batch_size).map(|_| &train_blocks[sampler.next()]).collect();
            let batch = Batch::from_blocks(&picks);
            let (loss, grads) = model.backward(&batch, Some(&mut dropout_rng))?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: s, last_good });
            }
            step_loss += loss;
            log.micro_batches += 1;
            mean_grads = buffer.accumulate(&grads)?;
        }
        let grads = mean_grads.expect("buffer flushes after grad_accum micro-batches");
        if let Some(bad) = grads.iter().find(|(_, g)| !g.is_finite()).map(|(n, _)| n.to_owned()) {
            log::error!("non-finite gradient in `{bad}` at step {s}");
            return Err(Error::NonFiniteLoss { step: s, last_good });
        }
        step(&config.optimizer, &mut state, model.trainable_tensors_mut(), &grads)?;
        log.optimizer_steps += 1;
        step_loss /= config.grad_accum as f64;

        if config.logging_steps > 0 && (s % config.logging_steps == 0 || s == config.max_steps) {
            log.train.push(LossPoint {
                step: s,
                loss: step_loss,
            });
            log.interval_seconds.push(tick.elapsed().as_secs_f64());
            tick = Instant::now();
            log::info!("step {s}: train loss {step_loss:.4}");
        }
        if s == config.max_steps || (config.eval_steps > 0 && s % config.eval_steps == 0) {
            let loss = evaluate(model, eval_blocks)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: s, last_good });
            }
            log::info!("step {s}: eval loss {loss:.4}");
            log.eval.push(LossPoint { step: s, loss });
        }
        if let Some(dir) = &config.output_dir {
            if config.save_steps > 0 && s % config.save_steps == 0 && s != config.max_steps {
                last_good = Some(save(model, checkpoint_path(dir, s), &mut log)?);
            }
        }
    }
    if let Some(dir) = &config.output_dir {
        save(model, dir.join("final.ckpt"), &mut log)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::optim::OptimizerKind;

    fn blocks(n: usize, len: usize, vocab: u32) -> Vec<Block> {
        (0..n)
            .map(|i| Block::new((0..len).map(|j| ((i * 3 + j * 5) as u32) % vocab).collect()))
            .collect()
    }

    fn tiny() -> Model<f64> {
        Model::init(ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_seq_len: 8,
            seed: 1,
        })
        .unwrap()
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            max_steps: steps,
            batch_size: 2,
            grad_accum: 2,
            eval_steps: 3,
            logging_steps: 1,
            block_size: 6,
            optimizer: OptimizerSpec::new(OptimizerKind::Adam, 0.01),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_leaves_model_and_log_empty() {
        let mut m = tiny();
        let before = m.clone();
        let log = train(&cfg(0), &mut m, &blocks(4, 6, 12), &blocks(2, 6, 12)).unwrap();
        assert_eq!(m, before);
        assert!(log.train.is_empty() && log.eval.is_empty());
    }

    #[test]
    fn step_and_micro_batch_counts() {
        let mut m = tiny();
        let log = train(&cfg(7), &mut m, &blocks(5, 6, 12), &blocks(2, 6, 12)).unwrap();
        assert_eq!(log.optimizer_steps, 7);
        assert_eq!(log.micro_batches, 14);
        let eval_steps: Vec<usize> = log.eval.iter().map(|p| p.step).collect();
        assert_eq!(eval_steps, [0, 3, 6, 7]);
        assert_eq!(log.train.len(), 7);
    }

    #[test]
    fn same_seed_same_log() {
        let (tr, ev) = (blocks(5, 6, 12), blocks(2, 6, 12));
        let mut a = tiny();
        let mut b = tiny();
        let la = train(&cfg(5), &mut a, &tr, &ev).unwrap();
        let lb = train(&cfg(5), &mut b, &tr, &ev).unwrap();
        assert_eq!(la.losses(), lb.losses());
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_is_pure_and_rejects_empty() {
        let m = tiny();
        let ev = blocks(3, 6, 12);
        assert_eq!(evaluate(&m, &ev).unwrap(), evaluate(&m, &ev).unwrap());
        assert!(matches!(evaluate(&m, &[]), Err(Error::EmptyEvalSet)));
    }

    #[test]
    fn sampler_wraps_in_order() {
        let mut s = Sampler::new(3, false, 0);
        let seen: Vec<usize> = (0..7).map(|_| s.next()).collect();
        assert_eq!(seen, [0, 1, 2, 0, 1, 2, 0]);
    }
}
