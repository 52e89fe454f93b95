//! SGD, Adagrad, RMSProp and Adam as elementwise update rules, with decoupled
//! weight decay and gradient accumulation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Gradients;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adagrad,
    #[serde(rename = "rmsprop")]
    RmsProp,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Sgd,
        OptimizerKind::Adagrad,
        OptimizerKind::RmsProp,
        OptimizerKind::Adam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "SGD",
            OptimizerKind::Adagrad => "Adagrad",
            OptimizerKind::RmsProp => "RMSProp",
            OptimizerKind::Adam => "Adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::OptimizerSpec(format!(
                "unknown optimizer `{s}` (expected sgd, adagrad, rmsprop or adam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub eta: f64,
    /// RMSProp decay.
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Adam only: divide the moments by `1 − βᵗ`.
    pub bias_correction: bool,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::new(OptimizerKind::Sgd, 0.01)
    }
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind, eta: f64) -> Self {
        OptimizerSpec {
            kind,
            eta,
            beta: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            bias_correction: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::OptimizerSpec(m));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.eta));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        for (name, v) in [("beta", self.beta), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be nonnegative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Per-tensor accumulators. Which ones exist depends on the optimizer kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot<T: Float> {
    /// Adagrad running sum or RMSProp moving average of g².
    pub g: Option<Tensor<T>>,
    pub m: Option<Tensor<T>>,
    pub v: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Float> {
    pub t: u64,
    pub slots: BTreeMap<String, Slot<T>>,
}

/// Fresh zero state for tensors of the given names and shapes.
pub fn make_state<T: Float>(spec: &OptimizerSpec, shapes: &[(String, Vec<usize>)]) -> OptimizerState<T> {
    let slots = shapes
        .iter()
        .map(|(name, shape)| {
            let z = || Some(Tensor::zeros(shape));
            let slot = match spec.kind {
                OptimizerKind::Sgd => Slot {
                    g: None,
                    m: None,
                    v: None,
                },
                OptimizerKind::Adagrad | OptimizerKind::RmsProp => Slot {
                    g: z(),
                    m: None,
                    v: None,
                },
                OptimizerKind::Adam => Slot {
                    g: None,
                    m: z(),
                    v: z(),
                },
            };
            (name.clone(), slot)
        })
        .collect();
    OptimizerState { t: 0, slots }
}

fn check_keys<T: Float>(names: &[&str], grads: &Gradients<T>) -> Result<()> {
    for &n in names {
        if grads.get(n).is_none() {
            return Err(Error::KeyMismatch(format!("no gradient for trainable tensor `{n}`")));
        }
    }
    if let Some(extra) = grads.keys().find(|k| !names.contains(k)) {
        return Err(Error::KeyMismatch(format!("gradient for unknown tensor `{extra}`")));
    }
    Ok(())
}

/// One update of every tensor in `params` from `grads`.
///
/// Inputs are validated before anything is modified, so an error leaves
/// parameters and state untouched.
pub fn step<T: Float>(
    spec: &OptimizerSpec,
    state: &mut OptimizerState<T>,
    params: Vec<(String, &mut Tensor<T>)>,
    grads: &Gradients<T>,
) -> Result<()> {
    let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
    check_keys(&names, grads)?;
    for &n in &names {
        if !grads.get(n).expect("checked").is_finite() {
            return Err(Error::NonFiniteGradient(n.to_owned()));
        }
        if !state.slots.contains_key(n) {
            return Err(Error::KeyMismatch(format!("no optimizer state for `{n}`")));
        }
    }
    state.t += 1;
    let eta = T::lit(spec.eta);
    let eps = T::lit(spec.epsilon);
    let one = T::one();
    let shrink = one - T::lit(spec.eta * spec.weight_decay);
    let (c1, c2) = if spec.bias_correction {
        let t = state.t as i32;
        (T::lit(1.0 - spec.beta1.powi(t)), T::lit(1.0 - spec.beta2.powi(t)))
    } else {
        (one, one)
    };

    for (name, theta) in params {
        let g = grads.get(&name).expect("checked").data();
        let slot = state.slots.get_mut(&name).expect("checked");
        let th = theta.data_mut();
        if spec.weight_decay > 0.0 {
            th.iter_mut().for_each(|x| *x *= shrink);
        }
        match spec.kind {
            OptimizerKind::Sgd => {
                for (x, &gi) in th.iter_mut().zip(g) {
                    *x -= eta * gi;
                }
            }
            OptimizerKind::Adagrad => {
                let acc = slot.g.as_mut().expect("adagrad slot").data_mut();
                for ((x, &gi), a) in th.iter_mut().zip(g).zip(acc) {
                    *a += gi * gi;
                    *x -= eta * gi / (a.sqrt() + eps);
                }
            }
            OptimizerKind::RmsProp => {
                let beta = T::lit(spec.beta);
                let acc = slot.g.as_mut().expect("rmsprop slot").data_mut();
                for ((x, &gi), a) in th.iter_mut().zip(g).zip(acc) {
                    *a = beta * *a + (one - beta) * gi * gi;
                    *x -= eta * gi / (a.sqrt() + eps);
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::lit(spec.beta1), T::lit(spec.beta2));
                let m = slot.m.as_mut().expect("adam slot").data_mut();
                let v = slot.v.as_mut().expect("adam slot").data_mut();
                for (((x, &gi), mi), vi) in th.iter_mut().zip(g).zip(m).zip(v) {
                    *mi = b1 * *mi + (one - b1) * gi;
                    *vi = b2 * *vi + (one - b2) * gi * gi;
                    *x -= eta * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Sums micro-batch gradients and releases their mean every `target` calls.
#[derive(Debug, Clone)]
pub struct AccumulationBuffer<T: Float> {
    sum: Gradients<T>,
    pub micro_steps_seen: usize,
    pub target: usize,
}

impl<T: Float> AccumulationBuffer<T> {
    pub fn new(target: usize, shapes: &[(String, Vec<usize>)]) -> Result<Self> {
        if target == 0 {
            return Err(Error::OptimizerSpec(
                "gradient accumulation target must be at least 1".into(),
            ));
        }
        let mut sum = Gradients::new();
        for (n, s) in shapes {
            sum.insert(n.clone(), Tensor::zeros(s));
        }
        Ok(AccumulationBuffer {
            sum,
            micro_steps_seen: 0,
            target,
        })
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<Option<Gradients<T>>> {
        let names: Vec<&str> = self.sum.keys().collect();
        check_keys(&names, grads)?;
        for (n, t) in self.sum.iter_mut() {
            let g = grads.get(n).expect("checked");
            if g.shape() != t.shape() {
                return Err(Error::KeyMismatch(format!(
                    "gradient `{n}` has shape {:?}, expected {:?}",
                    g.shape(),
                    t.shape()
                )));
            }
            t.add_assign(g);
        }
        self.micro_steps_seen += 1;
        if self.micro_steps_seen < self.target {
            return Ok(None);
        }
        let k = T::lit(self.target as f64);
        let mut mean = self.sum.clone();
        for (_, t) in mean.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x /= k);
        }
        for (_, t) in self.sum.iter_mut() {
            t.fill_zero();
        }
        self.micro_steps_seen = 0;
        Ok(Some(mean))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![value]).unwrap()
    }

    fn run_one(kind: OptimizerKind, theta: f64, g: f64, eta: f64) -> (f64, OptimizerState<f64>) {
        let spec = OptimizerSpec {
            weight_decay: 0.0,
            ..OptimizerSpec::new(kind, eta)
        };
        let shapes = vec![("w".to_string(), vec![1])];
        let mut state = make_state(&spec, &shapes);
        let mut p = one(theta);
        let mut grads = Gradients::new();
        grads.insert("w", one(g));
        step(&spec, &mut state, vec![("w".into(), &mut p)], &grads).unwrap();
        (p.data()[0], state)
    }

    #[test]
    fn sgd_single_step() {
        let (t, _) = run_one(OptimizerKind::Sgd, 1.0, 2.0, 0.1);
        assert!((t - 0.8).abs() < 1e-12);
    }

    #[test]
    fn adagrad_single_step() {
        let (t, s) = run_one(OptimizerKind::Adagrad, 1.0, 2.0, 0.1);
        assert_eq!(s.slots["w"].g.as_ref().unwrap().data(), &[4.0]);
        assert!((t - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_single_step() {
        let (t, s) = run_one(OptimizerKind::RmsProp, 1.0, 2.0, 0.1);
        let acc = 0.1 * 4.0;
        assert!((s.slots["w"].g.as_ref().unwrap().data()[0] - acc).abs() < 1e-15);
        assert!((t - (1.0 - 0.1 * 2.0 / (acc.sqrt() + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn adam_single_step_without_bias_correction() {
        let (t, s) = run_one(OptimizerKind::Adam, 0.5, 1.0, 0.1);
        let slot = &s.slots["w"];
        assert!((slot.m.as_ref().unwrap().data()[0] - 0.1).abs() < 1e-15);
        assert!((slot.v.as_ref().unwrap().data()[0] - 0.001).abs() < 1e-15);
        assert!((t - (0.5 - 0.1 * 0.1 / (0.001f64.sqrt() + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn adam_bias_correction_flag() {
        let spec = OptimizerSpec {
            weight_decay: 0.0,
            bias_correction: true,
            ..OptimizerSpec::new(OptimizerKind::Adam, 0.1)
        };
        let mut state = make_state(&spec, &[("w".to_string(), vec![1])]);
        let mut p = one(0.0);
        let mut grads = Gradients::new();
        grads.insert("w", one(1.0));
        step(&spec, &mut state, vec![("w".into(), &mut p)], &grads).unwrap();
        // m̂ = 1, v̂ = 1 after one step
        assert!((p.data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_first() {
        let spec = OptimizerSpec {
            weight_decay: 0.5,
            ..OptimizerSpec::new(OptimizerKind::Sgd, 0.1)
        };
        let mut state = make_state(&spec, &[("w".to_string(), vec![1])]);
        let mut p = one(2.0);
        let mut grads = Gradients::new();
        grads.insert("w", one(1.0));
        step(&spec, &mut state, vec![("w".into(), &mut p)], &grads).unwrap();
        assert!((p.data()[0] - (2.0 * 0.95 - 0.1)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for kind in OptimizerKind::ALL {
            let (t, _) = run_one(kind, 0.7, 0.0, 0.1);
            assert_eq!(t, 0.7, "{kind}");
        }
    }

    #[test]
    fn state_shapes() {
        let shapes = vec![("w".to_string(), vec![2, 2])];
        let adam = make_state::<f64>(&OptimizerSpec::new(OptimizerKind::Adam, 0.1), &shapes);
        let slot = &adam.slots["w"];
        assert_eq!(slot.m.as_ref().unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(slot.v.as_ref().unwrap(), &Tensor::zeros(&[2, 2]));
        let sgd = make_state::<f64>(&OptimizerSpec::new(OptimizerKind::Sgd, 0.1), &shapes);
        assert_eq!(
            sgd.slots["w"],
            Slot {
                g: None,
                m: None,
                v: None
            }
        );
        assert_eq!(sgd.t, 0);
    }

    #[test]
    fn errors_name_the_tensor() {
        let spec = OptimizerSpec::new(OptimizerKind::Sgd, 0.1);
        let mut state = make_state(&spec, &[("w".to_string(), vec![1])]);
        let mut p = one(1.0);
        let mut grads = Gradients::new();
        grads.insert("w", one(f64::NAN));
        let err = step(&spec, &mut state, vec![("w".into(), &mut p)], &grads).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(p.data(), &[1.0]);

        let mut grads = Gradients::new();
        grads.insert("v", one(1.0));
        let err = step(&spec, &mut state, vec![("w".into(), &mut p)], &grads).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn invalid_specs() {
        assert!(OptimizerSpec::new(OptimizerKind::Sgd, 0.0).validate().is_err());
        let s = OptimizerSpec {
            beta2: 1.0,
            ..OptimizerSpec::new(OptimizerKind::Adam, 0.1)
        };
        assert!(s.validate().is_err());
        assert!("lion".parse::<OptimizerKind>().is_err());
        assert_eq!("RMSProp".parse::<OptimizerKind>().unwrap(), OptimizerKind::RmsProp);
    }

    #[test]
    fn accumulation_examples() {
        let shapes = vec![("w".to_string(), vec![1])];
        let grads = |x: f64| {
            let mut g = Gradients::new();
            g.insert("w", one(x));
            g
        };
        let mut b1 = AccumulationBuffer::new(1, &shapes).unwrap();
        assert_eq!(b1.accumulate(&grads(5.0)).unwrap().unwrap(), grads(5.0));

        let mut b2 = AccumulationBuffer::new(2, &shapes).unwrap();
        assert!(b2.accumulate(&grads(1.0)).unwrap().is_none());
        assert_eq!(b2.accumulate(&grads(3.0)).unwrap().unwrap(), grads(2.0));
        // buffer was reset
        assert!(b2.accumulate(&grads(7.0)).unwrap().is_none());

        let mut b4 = AccumulationBuffer::new(4, &shapes).unwrap();
        for _ in 0..3 {
            assert!(b4.accumulate(&grads(0.3)).unwrap().is_none());
        }
        assert_eq!(b4.accumulate(&grads(0.3)).unwrap().unwrap(), grads(0.3));

        let mut g = Gradients::new();
        g.insert("x", one(1.0));
        assert!(b4.accumulate(&g).is_err());
    }
}
