//! Pre-norm decoder-only transformer with a hand-derived reverse pass.
//!
//! Block: `x += proj(attn(c_attn(ln_1(x))))`, then `x += mlp_proj(gelu(c_fc(ln_2(x))))`;
//! output: `lm_head(ln_f(x))`. Sequences in a batch are stacked into one
//! `[batch·len × d]` activation matrix; attention runs per sequence and head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::causal_softmax_row;
use super::config::ModelConfig;
use super::grads::Gradients;
use super::lora::{attach_lora, count_params, AdapterSet, LoraSpec, ParamCount};
use super::loss::{log_softmax_row, shifted_targets};
use super::params::{layer_base, lm_head, lnf_b, lnf_w, slot, ParamSet, WPE, WTE};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_at, matmul_bt, Float, Tensor};
use crate::textprep::{Batch, TokenId};

const LN_EPS: f64 = 1e-5;

/// Base parameters plus any attached adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Float> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub adapters: AdapterSet<T>,
}

struct LinearCache<T: Float> {
    x: Tensor<T>,
    /// Per-element dropout factors (0 or 1/(1-p)) on the adapter input.
    drop: Option<Vec<T>>,
    /// Adapter bottleneck `dropout(x)·Aᵀ`.
    u: Option<Tensor<T>>,
}

struct NormCache<T: Float> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

struct LayerCache<T: Float> {
    ln1: NormCache<T>,
    attn_in: LinearCache<T>,
    qkv: Tensor<T>,
    probs: Vec<Tensor<T>>,
    proj_in: LinearCache<T>,
    ln2: NormCache<T>,
    fc_in: LinearCache<T>,
    pre_gelu: Tensor<T>,
    mlp_proj_in: LinearCache<T>,
}

struct Trace<T: Float> {
    batch: usize,
    len: usize,
    layers: Vec<LayerCache<T>>,
    lnf: NormCache<T>,
    head_in: LinearCache<T>,
}

struct GradBuf<T: Float> {
    base: Vec<Option<Tensor<T>>>,
    a: Vec<Tensor<T>>,
    b: Vec<Tensor<T>>,
}

fn gelu<T: Float>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * k * x * x)
}

impl<T: Float> Model<T> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        Ok(Model {
            config,
            params: ParamSet::init(&config)?,
            adapters: AdapterSet::default(),
        })
    }

    /// Freezes the base and attaches adapters (replacing any existing ones).
    pub fn attach_lora(&mut self, spec: &LoraSpec) -> Result<()> {
        self.adapters = attach_lora(&mut self.params, spec)?;
        Ok(())
    }

    pub fn count_params(&self) -> ParamCount {
        count_params(&self.params, &self.adapters)
    }

    /// Folds every adapter into its base weight and drops the adapters.
    pub fn merged(&self) -> Model<T> {
        let mut params = self.params.clone();
        let alpha = T::lit(self.adapters.alpha);
        for ad in self.adapters.iter() {
            let delta = ad.delta(alpha);
            params.at_mut(ad.param_index).tensor.add_assign(&delta);
        }
        Model {
            config: self.config,
            params,
            adapters: AdapterSet::default(),
        }
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
            adapters: self.adapters.cast(),
        }
    }

    /// Names of every tensor the optimizer updates, in a stable order.
    pub fn trainable_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = self
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect();
        for ad in self.adapters.iter() {
            keys.push(ad.a_name());
            keys.push(ad.b_name());
        }
        keys
    }

    pub fn trainable_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = self
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect();
        for ad in self.adapters.iter() {
            out.push((ad.a_name(), ad.a.shape().to_vec()));
            out.push((ad.b_name(), ad.b.shape().to_vec()));
        }
        out
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = self
            .params
            .iter_mut()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), &mut p.tensor))
            .collect();
        for ad in self.adapters.adapters.iter_mut() {
            let (an, bn) = (ad.a_name(), ad.b_name());
            out.push((an, &mut ad.a));
            out.push((bn, &mut ad.b));
        }
        out
    }

    fn check_tokens(&self, ids: &[TokenId]) -> Result<()> {
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if ids.is_empty() {
            return Err(Error::EmptyText);
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Next-token logits `[len × vocab]` for one sequence, dropout off.
    pub fn forward(&self, ids: &[TokenId]) -> Result<Tensor<T>> {
        self.forward_batch(&[ids])
    }

    /// Logits for equal-length sequences stacked as `[batch·len × vocab]`.
    pub fn forward_batch(&self, rows: &[&[TokenId]]) -> Result<Tensor<T>> {
        let (_, logits, _) = self.run(rows, &mut None, false, false)?;
        Ok(logits)
    }

    /// Logits of the final position only, one row per sequence.
    pub fn last_logits(&self, rows: &[&[TokenId]]) -> Result<Tensor<T>> {
        let (_, logits, _) = self.run(rows, &mut None, false, true)?;
        Ok(logits)
    }

    /// Final normalized hidden states `[len × d_model]`.
    pub fn hidden_states(&self, ids: &[TokenId]) -> Result<Tensor<T>> {
        let (hidden, _, _) = self.run(&[ids], &mut None, false, false)?;
        Ok(hidden)
    }

    /// Mean next-token NLL over a batch, without gradients or dropout.
    pub fn loss(&self, batch: &Batch) -> Result<T> {
        let rows: Vec<&[TokenId]> = batch.rows.iter().map(Vec::as_slice).collect();
        let (_, logits, _) = self.run(&rows, &mut None, false, false)?;
        let (loss, _) = loss_and_grad(&logits, batch, false)?;
        Ok(loss)
    }

    /// Mean NLL and its exact gradient for every trainable tensor.
    /// Adapter dropout is sampled from `dropout` when given.
    pub fn backward(&self, batch: &Batch, dropout: Option<&mut ChaCha8Rng>) -> Result<(T, Gradients<T>)> {
        let rows: Vec<&[TokenId]> = batch.rows.iter().map(Vec::as_slice).collect();
        let mut dropout = dropout;
        let (_, logits, trace) = self.run(&rows, &mut dropout, true, false)?;
        let trace = trace.expect("trace requested");
        let (loss, dlogits) = loss_and_grad(&logits, batch, true)?;
        drop(logits);
        let dlogits = dlogits.expect("gradient requested");

        let mut g = GradBuf {
            base: self
                .params
                .iter()
                .map(|p| p.trainable.then(|| Tensor::zeros(p.tensor.shape())))
                .collect(),
            a: self.adapters.iter().map(|a| Tensor::zeros(a.a.shape())).collect(),
            b: self.adapters.iter().map(|a| Tensor::zeros(a.b.shape())).collect(),
        };
        if g.base.iter().all(Option::is_none) && g.a.is_empty() {
            return Ok((loss, Gradients::new()));
        }

        let cfg = &self.config;
        let dhf = self.linear_backward(&dlogits, &trace.head_in, lm_head(cfg), None, &mut g);
        drop(dlogits);
        let mut dx = self.norm_backward(&dhf, &trace.lnf, lnf_w(cfg), lnf_b(cfg), &mut g);

        for (l, lc) in trace.layers.iter().enumerate().rev() {
            let base = layer_base(l);
            let dg = self.linear_backward(
                &dx,
                &lc.mlp_proj_in,
                base + slot::MLP_PROJ_W,
                Some(base + slot::MLP_PROJ_B),
                &mut g,
            );
            let mut df = dg;
            for (d, &x) in df.data_mut().iter_mut().zip(lc.pre_gelu.data()) {
                *d *= gelu_grad(x);
            }
            let dh2 = self.linear_backward(&df, &lc.fc_in, base + slot::FC_W, Some(base + slot::FC_B), &mut g);
            let dmid = self.norm_backward(&dh2, &lc.ln2, base + slot::LN2_W, base + slot::LN2_B, &mut g);
            dx.add_assign(&dmid);

            let da = self.linear_backward(&dx, &lc.proj_in, base + slot::PROJ_W, Some(base + slot::PROJ_B), &mut g);
            let dqkv = self.attention_backward(&da, &lc.qkv, &lc.probs, trace.batch, trace.len);
            let dh1 = self.linear_backward(
                &dqkv,
                &lc.attn_in,
                base + slot::ATTN_W,
                Some(base + slot::ATTN_B),
                &mut g,
            );
            let din = self.norm_backward(&dh1, &lc.ln1, base + slot::LN1_W, base + slot::LN1_B, &mut g);
            dx.add_assign(&din);
        }

        let d = cfg.d_model;
        if g.base[WTE].is_some() || g.base[WPE].is_some() {
            for (bi, row) in rows.iter().enumerate() {
                for (t, &tok) in row.iter().enumerate() {
                    let src = dx.row(bi * trace.len + t);
                    if let Some(gw) = g.base[WTE].as_mut() {
                        let dst = &mut gw.data_mut()[tok as usize * d..(tok as usize + 1) * d];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                    if let Some(gp) = g.base[WPE].as_mut() {
                        let dst = &mut gp.data_mut()[t * d..(t + 1) * d];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
            }
        }

        let mut grads = Gradients::new();
        for (p, gt) in self.params.iter().zip(g.base) {
            if let Some(gt) = gt {
                grads.insert(p.name.clone(), gt);
            }
        }
        for ((ad, ga), gb) in self.adapters.iter().zip(g.a).zip(g.b) {
            grads.insert(ad.a_name(), ga);
            grads.insert(ad.b_name(), gb);
        }
        Ok((loss, grads))
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        rows: &[&[TokenId]],
        dropout: &mut Option<&mut ChaCha8Rng>,
        keep: bool,
        last_only: bool,
    ) -> Result<(Tensor<T>, Tensor<T>, Option<Trace<T>>)> {
        let cfg = &self.config;
        let batch = rows.len();
        let len = rows.first().map_or(0, |r| r.len());
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        for r in rows {
            if r.len() != len {
                return Err(Error::Shape("sequences in a batch must share a length".into()));
            }
            self.check_tokens(r)?;
        }
        let d = cfg.d_model;
        let n = batch * len;

        let mut x = Tensor::zeros(&[n, d]);
        let (wte, wpe) = (self.params.w(WTE), self.params.w(WPE));
        for (bi, row) in rows.iter().enumerate() {
            for (t, &tok) in row.iter().enumerate() {
                let dst = x.row_mut(bi * len + t);
                let (e, p) = (wte.row(tok as usize), wpe.row(t));
                for j in 0..d {
                    dst[j] = e[j] + p[j];
                }
            }
        }

        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let base = layer_base(l);
            let (h1, ln1) = self.norm(&x, base + slot::LN1_W, base + slot::LN1_B);
            let (qkv, attn_in) = self.linear(h1, base + slot::ATTN_W, Some(base + slot::ATTN_B), dropout);
            let (a, probs) = self.self_attention(&qkv, batch, len);
            let (o, proj_in) = self.linear(a, base + slot::PROJ_W, Some(base + slot::PROJ_B), dropout);
            x.add_assign(&o);
            drop(o);
            let (h2, ln2) = self.norm(&x, base + slot::LN2_W, base + slot::LN2_B);
            let (pre_gelu, fc_in) = self.linear(h2, base + slot::FC_W, Some(base + slot::FC_B), dropout);
            let act = Tensor::from_fn(pre_gelu.shape(), |i| gelu(pre_gelu.data()[i]));
            let (m, mlp_proj_in) = self.linear(act, base + slot::MLP_PROJ_W, Some(base + slot::MLP_PROJ_B), dropout);
            x.add_assign(&m);
            if keep {
                layers.push(LayerCache {
                    ln1,
                    attn_in,
                    qkv,
                    probs,
                    proj_in,
                    ln2,
                    fc_in,
                    pre_gelu,
                    mlp_proj_in,
                });
            }
        }

        let (mut hf, lnf) = self.norm(&x, lnf_w(cfg), lnf_b(cfg));
        if last_only {
            hf = Tensor::from_fn(&[batch, d], |i| hf.data()[((i / d) * len + len - 1) * d + i % d]);
        }
        let (logits, head_in) = self.linear(hf, lm_head(cfg), None, dropout);
        let hidden = head_in.x.clone();
        let trace = keep.then_some(Trace {
            batch,
            len,
            layers,
            lnf,
            head_in,
        });
        Ok((hidden, logits, trace))
    }

    fn linear(
        &self,
        x: Tensor<T>,
        w_idx: usize,
        b_idx: Option<usize>,
        dropout: &mut Option<&mut ChaCha8Rng>,
    ) -> (Tensor<T>, LinearCache<T>) {
        let w = self.params.w(w_idx);
        let (n, i, o) = (x.rows(), w.rows(), w.cols());
        let mut y = Tensor::zeros(&[n, o]);
        matmul(x.data(), w.data(), y.data_mut(), n, i, o, false);
        if let Some(bi) = b_idx {
            let b = self.params.w(bi).data();
            for r in 0..n {
                y.row_mut(r).iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
            }
        }
        let mut cache = LinearCache { x, drop: None, u: None };
        if let Some((_, ad)) = self.adapters.for_param(w_idx) {
            let r = ad.r;
            let drop = match dropout.as_deref_mut() {
                Some(rng) if ad.dropout_p > 0.0 => {
                    let keep_scale = T::lit(1.0 / (1.0 - ad.dropout_p));
                    Some(
                        (0..n * i)
                            .map(|_| {
                                if rng.random::<f64>() < ad.dropout_p {
                                    T::zero()
                                } else {
                                    keep_scale
                                }
                            })
                            .collect::<Vec<T>>(),
                    )
                }
                _ => None,
            };
            let mut u = Tensor::zeros(&[n, r]);
            match &drop {
                Some(mask) => {
                    let xd = Tensor::from_fn(&[n, i], |k| cache.x.data()[k] * mask[k]);
                    matmul_bt(xd.data(), ad.a.data(), u.data_mut(), n, i, r, false);
                }
                None => matmul_bt(cache.x.data(), ad.a.data(), u.data_mut(), n, i, r, false),
            }
            let mut delta = Tensor::zeros(&[n, o]);
            matmul_bt(u.data(), ad.b.data(), delta.data_mut(), n, r, o, false);
            delta.scale(T::lit(self.adapters.alpha));
            y.add_assign(&delta);
            cache.drop = drop;
            cache.u = Some(u);
        }
        (y, cache)
    }

    fn linear_backward(
        &self,
        dy: &Tensor<T>,
        cache: &LinearCache<T>,
        w_idx: usize,
        b_idx: Option<usize>,
        g: &mut GradBuf<T>,
    ) -> Tensor<T> {
        let w = self.params.w(w_idx);
        let (n, i, o) = (dy.rows(), w.rows(), w.cols());
        if let Some(gw) = g.base[w_idx].as_mut() {
            matmul_at(cache.x.data(), dy.data(), gw.data_mut(), i, n, o, true);
        }
        if let Some(bi) = b_idx {
            if let Some(gb) = g.base[bi].as_mut() {
                for r in 0..n {
                    gb.data_mut().iter_mut().zip(dy.row(r)).for_each(|(a, &b)| *a += b);
                }
            }
        }
        let mut dx = Tensor::zeros(&[n, i]);
        matmul_bt(dy.data(), w.data(), dx.data_mut(), n, o, i, false);

        if let Some((k, ad)) = self.adapters.for_param(w_idx) {
            let r = ad.r;
            let alpha = T::lit(self.adapters.alpha);
            let u = cache.u.as_ref().expect("adapter cache");
            // dB += alpha · dyᵀ·u
            let mut gb = Tensor::zeros(&[o, r]);
            matmul_at(dy.data(), u.data(), gb.data_mut(), o, n, r, false);
            gb.scale(alpha);
            g.b[k].add_assign(&gb);
            // du = alpha · dy·B
            let mut du = Tensor::zeros(&[n, r]);
            matmul(dy.data(), ad.b.data(), du.data_mut(), n, o, r, false);
            du.scale(alpha);
            // dA += duᵀ·dropout(x)
            match &cache.drop {
                Some(mask) => {
                    let xd = Tensor::from_fn(&[n, i], |q| cache.x.data()[q] * mask[q]);
                    matmul_at(du.data(), xd.data(), g.a[k].data_mut(), r, n, i, true);
                }
                None => matmul_at(du.data(), cache.x.data(), g.a[k].data_mut(), r, n, i, true),
            }
            // dx += (du·A) ⊙ mask
            let mut dxa = Tensor::zeros(&[n, i]);
            matmul(du.data(), ad.a.data(), dxa.data_mut(), n, r, i, false);
            if let Some(mask) = &cache.drop {
                dxa.data_mut().iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
            }
            dx.add_assign(&dxa);
        }
        dx
    }

    fn norm(&self, x: &Tensor<T>, w_idx: usize, b_idx: usize) -> (Tensor<T>, NormCache<T>) {
        let (n, d) = (x.rows(), x.cols());
        let (gamma, beta) = (self.params.w(w_idx).data(), self.params.w(b_idx).data());
        let mut xhat = Tensor::zeros(&[n, d]);
        let mut y = Tensor::zeros(&[n, d]);
        let mut rstd = Vec::with_capacity(n);
        let dn = T::lit(d as f64);
        let eps = T::lit(LN_EPS);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for j in 0..d {
                xh[j] = (row[j] - mean) * rs;
            }
            let yr = y.row_mut(r);
            let xh = xhat.row(r);
            for j in 0..d {
                yr[j] = xh[j] * gamma[j] + beta[j];
            }
        }
        (y, NormCache { xhat, rstd })
    }

    fn norm_backward(
        &self,
        dy: &Tensor<T>,
        cache: &NormCache<T>,
        w_idx: usize,
        b_idx: usize,
        g: &mut GradBuf<T>,
    ) -> Tensor<T> {
        let (n, d) = (dy.rows(), dy.cols());
        let gamma = self.params.w(w_idx).data();
        let dn = T::lit(d as f64);
        let mut dx = Tensor::zeros(&[n, d]);
        for r in 0..n {
            let (dyr, xh) = (dy.row(r), cache.xhat.row(r));
            if let Some(gg) = g.base[w_idx].as_mut() {
                gg.data_mut()
                    .iter_mut()
                    .enumerate()
                    .for_each(|(j, a)| *a += dyr[j] * xh[j]);
            }
            if let Some(gb) = g.base[b_idx].as_mut() {
                gb.data_mut().iter_mut().enumerate().for_each(|(j, a)| *a += dyr[j]);
            }
            let mut mean_dxh = T::zero();
            let mut mean_dxh_xh = T::zero();
            for j in 0..d {
                let dxh = dyr[j] * gamma[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh /= dn;
            mean_dxh_xh /= dn;
            let rs = cache.rstd[r];
            let out = dx.row_mut(r);
            for j in 0..d {
                out[j] = rs * (dyr[j] * gamma[j] - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        dx
    }

    fn gather_head(&self, qkv: &Tensor<T>, b: usize, len: usize, part: usize, h: usize) -> Tensor<T> {
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let mut out = Tensor::zeros(&[len, dh]);
        for t in 0..len {
            let src = &qkv.row(b * len + t)[part * d + h * dh..part * d + (h + 1) * dh];
            out.row_mut(t).copy_from_slice(src);
        }
        out
    }

    fn self_attention(&self, qkv: &Tensor<T>, batch: usize, len: usize) -> (Tensor<T>, Vec<Tensor<T>>) {
        let (d, nh, dh) = (self.config.d_model, self.config.n_heads, self.config.head_dim());
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut out = Tensor::zeros(&[batch * len, d]);
        let mut probs = Vec::with_capacity(batch * nh);
        for b in 0..batch {
            for h in 0..nh {
                let q = self.gather_head(qkv, b, len, 0, h);
                let k = self.gather_head(qkv, b, len, 1, h);
                let v = self.gather_head(qkv, b, len, 2, h);
                let mut p = Tensor::zeros(&[len, len]);
                matmul_bt(q.data(), k.data(), p.data_mut(), len, dh, len, false);
                p.scale(scale);
                for t in 0..len {
                    causal_softmax_row(p.row_mut(t), t + 1);
                }
                let mut o = Tensor::zeros(&[len, dh]);
                matmul(p.data(), v.data(), o.data_mut(), len, len, dh, false);
                for t in 0..len {
                    out.row_mut(b * len + t)[h * dh..(h + 1) * dh].copy_from_slice(o.row(t));
                }
                probs.push(p);
            }
        }
        (out, probs)
    }

    fn attention_backward(
        &self,
        da: &Tensor<T>,
        qkv: &Tensor<T>,
        probs: &[Tensor<T>],
        batch: usize,
        len: usize,
    ) -> Tensor<T> {
        let (d, nh, dh) = (self.config.d_model, self.config.n_heads, self.config.head_dim());
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dqkv = Tensor::zeros(&[batch * len, 3 * d]);
        for b in 0..batch {
            for h in 0..nh {
                let p = &probs[b * nh + h];
                let q = self.gather_head(qkv, b, len, 0, h);
                let k = self.gather_head(qkv, b, len, 1, h);
                let v = self.gather_head(qkv, b, len, 2, h);
                let mut dout = Tensor::zeros(&[len, dh]);
                for t in 0..len {
                    dout.row_mut(t)
                        .copy_from_slice(&da.row(b * len + t)[h * dh..(h + 1) * dh]);
                }
                let mut dp = Tensor::zeros(&[len, len]);
                matmul_bt(dout.data(), v.data(), dp.data_mut(), len, dh, len, false);
                let mut dv = Tensor::zeros(&[len, dh]);
                matmul_at(p.data(), dout.data(), dv.data_mut(), len, len, dh, false);
                // softmax backward: ds = p ⊙ (dp − Σ dp⊙p)
                let mut ds = dp;
                for t in 0..len {
                    let pr = p.row(t);
                    let dot: T = ds.row(t).iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    ds.row_mut(t)
                        .iter_mut()
                        .zip(pr)
                        .for_each(|(x, &pp)| *x = pp * (*x - dot) * scale);
                }
                let mut dq = Tensor::zeros(&[len, dh]);
                matmul(ds.data(), k.data(), dq.data_mut(), len, len, dh, false);
                let mut dk = Tensor::zeros(&[len, dh]);
                matmul_at(ds.data(), q.data(), dk.data_mut(), len, len, dh, false);
                for t in 0..len {
                    let row = dqkv.row_mut(b * len + t);
                    row[h * dh..(h + 1) * dh].copy_from_slice(dq.row(t));
                    row[d + h * dh..d + (h + 1) * dh].copy_from_slice(dk.row(t));
                    row[2 * d + h * dh..2 * d + (h + 1) * dh].copy_from_slice(dv.row(t));
                }
            }
        }
        dqkv
    }
}

/// Mean shifted NLL over the batch and, optionally, `d loss / d logits`.
fn loss_and_grad<T: Float>(logits: &Tensor<T>, batch: &Batch, want_grad: bool) -> Result<(T, Option<Tensor<T>>)> {
    let len = batch.max_len();
    let vocab = logits.cols();
    let mut total = T::zero();
    let mut count = 0usize;
    let mut grad = want_grad.then(|| Tensor::zeros(logits.shape()));
    let mut valid: Vec<(usize, TokenId)> = Vec::new();
    for (b, (ids, mask)) in batch.rows.iter().zip(&batch.attention_mask).enumerate() {
        for (t, target) in shifted_targets(ids, mask).into_iter().enumerate() {
            if let Some(target) = target {
                valid.push((b * len + t, target));
            }
        }
    }
    if valid.is_empty() {
        return Err(Error::AllMasked);
    }
    for &(row, target) in &valid {
        let lsm = log_softmax_row(logits.row(row));
        total -= lsm[target as usize];
        count += 1;
        if let Some(g) = grad.as_mut() {
            let gr = g.row_mut(row);
            for v in 0..vocab {
                gr[v] = lsm[v].exp();
            }
            gr[target as usize] -= T::one();
        }
    }
    let inv = T::one() / T::lit(count as f64);
    if let Some(g) = grad.as_mut() {
        g.scale(inv);
    }
    Ok((total * inv, grad))
}
