//! Low-rank adapters: a frozen weight `W` is used as `W + alpha · (B·A)ᵀ`
//! (the transpose because base weights are stored `[in × out]`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{is_linear_weight, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Adapter hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraSpec {
    pub r: usize,
    /// Module names or suffixes, e.g. `c_attn` matches `h.0.attn.c_attn`.
    pub targets: Vec<String>,
    pub dropout_p: f64,
    /// Multiplier on `B·A`. 1 leaves the update exactly `B·A`.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for LoraSpec {
    fn default() -> Self {
        LoraSpec {
            r: 4,
            targets: vec!["c_attn".into(), "c_proj".into(), "lm_head".into()],
            dropout_p: 0.05,
            alpha: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T: Float> {
    /// Adapted module, e.g. `h.0.attn.c_attn`.
    pub target: String,
    pub(crate) param_index: usize,
    /// `[r × in]`
    pub a: Tensor<T>,
    /// `[out × r]`
    pub b: Tensor<T>,
    pub r: usize,
    pub dropout_p: f64,
}

impl<T: Float> LoraAdapter<T> {
    pub fn a_name(&self) -> String {
        format!("{}.lora_A", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora_B", self.target)
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `alpha · (B·A)ᵀ`, shaped like the base weight `[in × out]`.
    pub fn delta(&self, alpha: T) -> Tensor<T> {
        let (r, i, o) = (self.r, self.in_dim(), self.out_dim());
        let mut out = Tensor::zeros(&[i, o]);
        // (B·A)ᵀ = Aᵀ·Bᵀ : [in × r]·[r × out]
        crate::tensor::matmul_at(self.a.data(), self.b.transpose().data(), out.data_mut(), i, r, o, false);
        out.scale(alpha);
        out
    }
}

/// All adapters attached to one model, with the shared scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T: Float> {
    pub adapters: Vec<LoraAdapter<T>>,
    pub alpha: f64,
}

impl<T: Float> Default for AdapterSet<T> {
    fn default() -> Self {
        AdapterSet {
            adapters: Vec::new(),
            alpha: 1.0,
        }
    }
}

impl<T: Float> AdapterSet<T> {
    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter<T>> {
        self.adapters.iter()
    }

    pub(crate) fn for_param(&self, param_index: usize) -> Option<(usize, &LoraAdapter<T>)> {
        self.adapters
            .iter()
            .enumerate()
            .find(|(_, a)| a.param_index == param_index)
    }

    pub fn param_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::param_count).sum()
    }

    pub fn cast<U: Float>(&self) -> AdapterSet<U> {
        AdapterSet {
            alpha: self.alpha,
            adapters: self
                .adapters
                .iter()
                .map(|a| LoraAdapter {
                    target: a.target.clone(),
                    param_index: a.param_index,
                    a: a.a.cast(),
                    b: a.b.cast(),
                    r: a.r,
                    dropout_p: a.dropout_p,
                })
                .collect(),
        }
    }
}

fn module_of(name: &str) -> &str {
    name.strip_suffix(".weight").unwrap_or(name)
}

fn matches_target(module: &str, target: &str) -> bool {
    module == target || module.ends_with(&format!(".{target}"))
}

/// Freezes every base tensor and attaches one adapter per matching module.
/// `A` is uniform in ±1/√in and `B` is zero, so the model is unchanged
/// until the first update.
pub fn attach_lora<T: Float>(params: &mut ParamSet<T>, spec: &LoraSpec) -> Result<AdapterSet<T>> {
    if spec.r == 0 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&spec.dropout_p) {
        return Err(Error::Config(format!("LoRA dropout {} outside [0, 1)", spec.dropout_p)));
    }
    let mut selected: Vec<usize> = Vec::new();
    for target in &spec.targets {
        let hits: Vec<usize> = params
            .iter()
            .enumerate()
            .filter(|(_, p)| is_linear_weight(&p.name) && matches_target(module_of(&p.name), target))
            .map(|(i, _)| i)
            .collect();
        if hits.is_empty() {
            return Err(Error::UnknownTarget(target.clone()));
        }
        selected.extend(hits);
    }
    selected.sort_unstable();
    selected.dedup();

    params.freeze_all();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let adapters = selected
        .into_iter()
        .map(|i| {
            let p = params.at(i);
            let (in_dim, out_dim) = (p.tensor.rows(), p.tensor.cols());
            let bound = 1.0 / (in_dim as f64).sqrt();
            LoraAdapter {
                target: module_of(&p.name).to_owned(),
                param_index: i,
                a: Tensor::from_fn(&[spec.r, in_dim], |_| T::lit(rng.random_range(-bound..bound))),
                b: Tensor::zeros(&[out_dim, spec.r]),
                r: spec.r,
                dropout_p: spec.dropout_p,
            }
        })
        .collect();
    Ok(AdapterSet {
        adapters,
        alpha: spec.alpha,
    })
}

/// Element counts over base tensors plus adapters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
}

pub fn count_params<T: Float>(params: &ParamSet<T>, adapters: &AdapterSet<T>) -> ParamCount {
    let base_total: usize = params.iter().map(|p| p.tensor.len()).sum();
    let base_trainable: usize = params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum();
    let adapter = adapters.param_count();
    let total = base_total + adapter;
    let trainable = base_trainable + adapter;
    ParamCount {
        total,
        trainable,
        fraction: if total == 0 {
            0.0
        } else {
            trainable as f64 / total as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            max_seq_len: 8,
            seed: 3,
        }
    }

    #[test]
    fn attach_freezes_base_and_zeroes_b() {
        let mut p = ParamSet::<f64>::init(&tiny()).unwrap();
        let set = attach_lora(&mut p, &LoraSpec::default()).unwrap();
        assert!(p.iter().all(|x| !x.trainable));
        // c_proj matches both the attention and the MLP projection.
        let targets: Vec<&str> = set.iter().map(|a| a.target.as_str()).collect();
        assert_eq!(
            targets,
            [
                "h.0.attn.c_attn",
                "h.0.attn.c_proj",
                "h.0.mlp.c_proj",
                "h.1.attn.c_attn",
                "h.1.attn.c_proj",
                "h.1.mlp.c_proj",
                "lm_head"
            ]
        );
        assert!(set.iter().all(|a| a.b.data().iter().all(|&x| x == 0.0)));
        assert!(set.iter().all(|a| a.a.data().iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn rank_four_on_16x32_has_192_params() {
        let mut p = ParamSet::<f64>::init(&tiny()).unwrap();
        let spec = LoraSpec {
            targets: vec!["h.0.mlp.c_fc".into()],
            ..LoraSpec::default()
        };
        let set = attach_lora(&mut p, &spec).unwrap();
        let a = &set.adapters[0];
        assert_eq!(a.a.shape(), &[4, 16]);
        assert_eq!(a.b.shape(), &[32, 4]);
        assert_eq!(a.param_count(), 192);
    }

    #[test]
    fn unknown_target_is_an_error() {
        let mut p = ParamSet::<f32>::init(&tiny()).unwrap();
        let spec = LoraSpec {
            targets: vec!["q_proj".into()],
            ..LoraSpec::default()
        };
        assert!(matches!(attach_lora(&mut p, &spec), Err(Error::UnknownTarget(t)) if t == "q_proj"));
    }

    #[test]
    fn counts_with_no_adapters_all_frozen() {
        let mut p = ParamSet::<f32>::init(&tiny()).unwrap();
        p.freeze_all();
        let c = count_params(&p, &AdapterSet::default());
        assert_eq!(c.trainable, 0);
        assert_eq!(c.fraction, 0.0);
        assert!(c.total > 0);
    }

    #[test]
    fn delta_is_transposed_product() {
        let mut p = ParamSet::<f64>::init(&tiny()).unwrap();
        let mut set = attach_lora(
            &mut p,
            &LoraSpec {
                targets: vec!["lm_head".into()],
                ..LoraSpec::default()
            },
        )
        .unwrap();
        let ad = &mut set.adapters[0];
        ad.b.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x = i as f64 * 0.01);
        let d = ad.delta(2.0);
        assert_eq!(d.shape(), &[16, 11]);
        for i in 0..16 {
            for o in 0..11 {
                let expect: f64 = (0..4).map(|k| ad.b.row(o)[k] * ad.a.row(k)[i]).sum::<f64>() * 2.0;
                assert!((d.row(i)[o] - expect).abs() < 1e-14);
            }
        }
    }
}
