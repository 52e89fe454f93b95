use std::path::Path;

use anyhow::{bail, Context, Result};
use desklm::model::{LoraSpec, ModelConfig};
use desklm::optim::OptimizerKind;
use desklm::trainer::{SelectionPolicy, TrainConfig, DEFAULT_POWER_WATTS};
use serde::{Deserialize, Serialize};

use crate::args::{GlobalOpts, Mode, TrainingInputs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(1, 0);
        ModelSection {
            d_model: d.d_model,
            n_heads: d.n_heads,
            n_layers: d.n_layers,
            d_ff: d.d_ff,
            max_seq_len: d.max_seq_len,
        }
    }
}

impl ModelSection {
    pub fn config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub optimizers: Vec<OptimizerKind>,
    pub rates: Vec<f64>,
    /// `[[rate, steps], ...]`; unlisted rates use `train.max_steps`.
    pub steps_per_rate: Vec<(f64, usize)>,
    pub delta_val: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            optimizers: OptimizerKind::ALL.to_vec(),
            rates: vec![1e-2, 5e-3, 5e-4],
            steps_per_rate: Vec::new(),
            delta_val: SelectionPolicy::default().delta_val,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub power_watts: f64,
    pub threads: usize,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub lora: LoraSpec,
    pub grid: GridSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Full,
            seed: TrainConfig::default().seed,
            power_watts: DEFAULT_POWER_WATTS,
            threads: default_threads(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            lora: LoraSpec::default(),
            grid: GridSection::default(),
        }
    }
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Applies command-line flags on top of the file values. The run seed
    /// is copied into every seeded component.
    pub fn apply(&mut self, global: &GlobalOpts, inputs: &TrainingInputs) -> Result<()> {
        if let Some(s) = global.seed {
            self.seed = s;
        }
        if let Some(t) = global.threads {
            self.threads = t;
        }
        if let Some(w) = global.power_watts {
            self.power_watts = w;
        }
        if let Some(m) = inputs.mode {
            self.mode = m;
        }
        let t = &mut self.train;
        let overrides = [
            (&mut t.max_steps, inputs.max_steps),
            (&mut t.batch_size, inputs.batch_size),
            (&mut t.grad_accum, inputs.grad_accum),
            (&mut t.block_size, inputs.block_size),
            (&mut t.eval_steps, inputs.eval_steps),
        ];
        for (slot, v) in overrides {
            if let Some(v) = v {
                *slot = v;
            }
        }
        self.train.seed = self.seed;
        self.lora.seed = self.seed;
        if self.threads == 0 {
            bail!("threads must be at least 1");
        }
        if !(self.power_watts.is_finite() && self.power_watts >= 0.0) {
            bail!("power must be a non-negative number of watts");
        }
        Ok(())
    }
}
