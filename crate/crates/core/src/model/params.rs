//! Named base tensors of the transformer, in a fixed canonical order.
//!
//! Linear weights are stored `[in × out]` so a layer computes `x · W + b`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Tensors per transformer block.
pub(crate) const PER_LAYER: usize = 12;

/// Offsets of a block's tensors relative to its first index.
pub(crate) mod slot {
    pub const LN1_W: usize = 0;
    pub const LN1_B: usize = 1;
    pub const ATTN_W: usize = 2;
    pub const ATTN_B: usize = 3;
    pub const PROJ_W: usize = 4;
    pub const PROJ_B: usize = 5;
    pub const LN2_W: usize = 6;
    pub const LN2_B: usize = 7;
    pub const FC_W: usize = 8;
    pub const FC_B: usize = 9;
    pub const MLP_PROJ_W: usize = 10;
    pub const MLP_PROJ_B: usize = 11;
}

pub(crate) const WTE: usize = 0;
pub(crate) const WPE: usize = 1;

pub(crate) fn layer_base(layer: usize) -> usize {
    2 + layer * PER_LAYER
}

pub(crate) fn lnf_w(cfg: &ModelConfig) -> usize {
    layer_base(cfg.n_layers)
}

pub(crate) fn lnf_b(cfg: &ModelConfig) -> usize {
    layer_base(cfg.n_layers) + 1
}

pub(crate) fn lm_head(cfg: &ModelConfig) -> usize {
    layer_base(cfg.n_layers) + 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Weight,
    Zero,
    One,
}

/// Canonical (name, shape, init) inventory for a config.
fn inventory(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    use InitKind::*;
    let (v, d, ff) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
    let mut out = vec![
        ("wte.weight".to_owned(), vec![v, d], Weight),
        ("wpe.weight".to_owned(), vec![cfg.max_seq_len, d], Weight),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("h.{l}.{s}");
        out.extend([
            (p("ln_1.weight"), vec![d], One),
            (p("ln_1.bias"), vec![d], Zero),
            (p("attn.c_attn.weight"), vec![d, 3 * d], Weight),
            (p("attn.c_attn.bias"), vec![3 * d], Zero),
            (p("attn.c_proj.weight"), vec![d, d], Weight),
            (p("attn.c_proj.bias"), vec![d], Zero),
            (p("ln_2.weight"), vec![d], One),
            (p("ln_2.bias"), vec![d], Zero),
            (p("mlp.c_fc.weight"), vec![d, ff], Weight),
            (p("mlp.c_fc.bias"), vec![ff], Zero),
            (p("mlp.c_proj.weight"), vec![ff, d], Weight),
            (p("mlp.c_proj.bias"), vec![d], Zero),
        ]);
    }
    out.extend([
        ("ln_f.weight".to_owned(), vec![d], One),
        ("ln_f.bias".to_owned(), vec![d], Zero),
        ("lm_head.weight".to_owned(), vec![d, v], Weight),
    ]);
    out
}

/// A base tensor and whether the optimizer may update it.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Float> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Float> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamSet<T> {
    /// Deterministic initialization: weights uniform in ±1/√d_model, biases 0,
    /// norm scales 1. Values are drawn in f64 and rounded, so both widths see
    /// the same sample stream.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bound = 1.0 / (cfg.d_model as f64).sqrt();
        let params = inventory(cfg)
            .into_iter()
            .map(|(name, shape, kind)| {
                let tensor = match kind {
                    InitKind::Weight => Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-bound..bound))),
                    InitKind::Zero => Tensor::zeros(&shape),
                    InitKind::One => Tensor::filled(&shape, T::one()),
                };
                Param {
                    name,
                    tensor,
                    trainable: true,
                }
            })
            .collect();
        Ok(Self::from_params(params))
    }

    fn from_params(params: Vec<Param<T>>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        ParamSet { params, index }
    }

    /// Rebuilds from loaded tensors, checking names and shapes against `cfg`.
    pub fn from_loaded(cfg: &ModelConfig, loaded: Vec<Param<T>>) -> Result<Self> {
        cfg.validate()?;
        let inv = inventory(cfg);
        if inv.len() != loaded.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                inv.len(),
                loaded.len()
            )));
        }
        for ((name, shape, _), p) in inv.iter().zip(&loaded) {
            if name != &p.name {
                return Err(Error::Checkpoint(format!(
                    "expected tensor `{name}`, found `{}`",
                    p.name
                )));
            }
            if shape.as_slice() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    p.tensor.shape(),
                    shape
                )));
            }
        }
        Ok(Self::from_params(loaded))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub(crate) fn at(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub(crate) fn at_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub(crate) fn w(&self, i: usize) -> &Tensor<T> {
        &self.params[i].tensor
    }

    pub fn freeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = false);
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet::from_params(
            self.params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        )
    }
}

/// True for the dense projection matrices LoRA may adapt.
pub(crate) fn is_linear_weight(name: &str) -> bool {
    name == "lm_head.weight"
        || name.ends_with(".c_attn.weight")
        || name.ends_with(".c_proj.weight")
        || name.ends_with(".c_fc.weight")
}
