//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes   "DESKLM01"
//! width     u8        4 (f32) or 8 (f64)
//! hlen      u64 LE    byte length of the JSON header
//! header    hlen bytes UTF-8 JSON, see `Header`
//! data      every base tensor in header order, then A and B of each
//!           adapter in header order; row-major little-endian floats
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::lora::{AdapterSet, LoraAdapter};
use super::network::Model;
use super::params::{Param, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

const MAGIC: &[u8; 8] = b"DESKLM01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterEntry {
    target: String,
    r: usize,
    dropout_p: f64,
    a_shape: Vec<usize>,
    b_shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    alpha: f64,
    tensors: Vec<TensorEntry>,
    adapters: Vec<AdapterEntry>,
}

/// Serializes `model` to bytes at its own float width.
pub fn to_bytes<T: Float>(model: &Model<T>) -> Vec<u8> {
    let header = Header {
        config: model.config,
        alpha: model.adapters.alpha,
        tensors: model
            .params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
        adapters: model
            .adapters
            .iter()
            .map(|a| AdapterEntry {
                target: a.target.clone(),
                r: a.r,
                dropout_p: a.dropout_p,
                a_shape: a.a.shape().to_vec(),
                b_shape: a.b.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(T::BYTES as u8);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let tensors = model
        .params
        .iter()
        .map(|p| &p.tensor)
        .chain(model.adapters.iter().flat_map(|a| [&a.a, &a.b]));
    for t in tensors {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensor<T: Float>(&mut self, shape: &[usize], width: usize) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * width)?;
        let data = raw
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    T::lit(f32::read_le(c) as f64)
                } else {
                    T::lit(f64::read_le(c))
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

/// Parses a checkpoint, converting to `T` if stored at the other width.
/// Every tensor shape is checked against the stored config.
pub fn from_bytes<T: Float>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let width = r.take(1)?[0] as usize;
    if width != 4 && width != 8 {
        return Err(Error::Checkpoint(format!("unsupported float width {width}")));
    }
    let hlen = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    let cfg = header.config;

    let mut loaded = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        loaded.push(Param {
            name: e.name.clone(),
            tensor: r.tensor(&e.shape, width)?,
            trainable: e.trainable,
        });
    }
    let params = ParamSet::from_loaded(&cfg, loaded)?;

    let mut adapters = Vec::with_capacity(header.adapters.len());
    for e in &header.adapters {
        let weight = format!("{}.weight", e.target);
        let idx = params
            .index_of(&weight)
            .ok_or_else(|| Error::Checkpoint(format!("adapter targets unknown tensor `{weight}`")))?;
        let base = params.at(idx).tensor.shape();
        if e.a_shape != [e.r, base[0]] || e.b_shape != [base[1], e.r] {
            return Err(Error::Checkpoint(format!(
                "adapter `{}` shapes {:?}/{:?} do not fit base {:?} at rank {}",
                e.target, e.a_shape, e.b_shape, base, e.r
            )));
        }
        let a = r.tensor(&e.a_shape, width)?;
        let b = r.tensor(&e.b_shape, width)?;
        adapters.push(LoraAdapter {
            target: e.target.clone(),
            param_index: idx,
            a,
            b,
            r: e.r,
            dropout_p: e.dropout_p,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensor data",
            bytes.len() - r.pos
        )));
    }
    Ok(Model {
        config: cfg,
        params,
        adapters: AdapterSet {
            adapters,
            alpha: header.alpha,
        },
    })
}

/// Writes via a temporary sibling and rename, so a crash never leaves a
/// torn checkpoint at `path`.
pub fn save<T: Float>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Float>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LoraSpec;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            max_seq_len: 6,
            seed: 9,
        }
    }

    #[test]
    fn round_trip_with_adapters() {
        let mut m = Model::<f32>::init(cfg()).unwrap();
        m.attach_lora(&LoraSpec::default()).unwrap();
        m.adapters.adapters[0].b.data_mut()[3] = 0.25;
        let back: Model<f32> = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn widening_preserves_values() {
        let m = Model::<f32>::init(cfg()).unwrap();
        let wide: Model<f64> = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(wide.cast::<f32>(), m);
    }

    #[test]
    fn corrupted_files_rejected() {
        let m = Model::<f64>::init(cfg()).unwrap();
        let bytes = to_bytes(&m);
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f64>(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes::<f64>(&extra).is_err());
    }

    #[test]
    fn shape_mismatch_against_config_rejected() {
        let m = Model::<f64>::init(cfg()).unwrap();
        let bytes = to_bytes(&m);
        // Rewrite the header's vocab size so wte no longer matches.
        let text = String::from_utf8_lossy(&bytes[17..]).into_owned();
        let hlen = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
        let header = &text[..hlen];
        let patched = header.replacen("\"vocab_size\":10", "\"vocab_size\":11", 1);
        assert_eq!(patched.len(), header.len());
        let mut out = bytes[..17].to_vec();
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[17 + hlen..]);
        assert!(matches!(from_bytes::<f64>(&out), Err(Error::Checkpoint(_))));
    }
}
