//! The `DQC1` checkpoint container.
//!
//! Layout: the 8-byte magic `DQC1\0\0\0\0`, one line of UTF-8 JSON
//! `{"entries": {name: {shape, dtype, offset}}, "meta": {...}}` terminated by
//! `\n`, then every payload as little-endian values in name order. Offsets
//! are byte positions relative to the start of the payload section. Names
//! and meta keys are kept sorted, so a load followed by a save reproduces
//! the file byte for byte.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tensor;
use crate::denoiser::{ConvLayer, DenoiserParams, ScalarParams};
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::hqs::Variant;
use crate::model::Model;
use crate::train::{Adam, AdamConfig, FitState};

pub const MAGIC: &[u8; 8] = b"DQC1\0\0\0\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    U64,
}

#[derive(Clone, Debug, PartialEq)]
enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl Payload {
    fn dtype(&self) -> DType {
        match self {
            Payload::F64(_) => DType::F64,
            Payload::U64(_) => DType::U64,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Stored {
    shape: Vec<usize>,
    payload: Payload,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    entries: BTreeMap<String, IndexEntry>,
    meta: BTreeMap<String, Value>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "DQC1",
        detail: detail.into(),
    }
}

/// Named tensors plus JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Stored>,
    meta: BTreeMap<String, Value>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn insert_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        check_len(name, &shape, data.len())?;
        self.entries.insert(
            name.to_string(),
            Stored {
                shape,
                payload: Payload::F64(data),
            },
        );
        Ok(())
    }

    pub fn insert_u64(&mut self, name: &str, shape: Vec<usize>, data: Vec<u64>) -> Result<()> {
        check_len(name, &shape, data.len())?;
        self.entries.insert(
            name.to_string(),
            Stored {
                shape,
                payload: Payload::U64(data),
            },
        );
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: &str, t: &Tensor) {
        self.insert_f64(name, t.shape().to_vec(), t.data().to_vec())
            .expect("tensor data matches its shape");
    }

    pub fn insert_scalar(&mut self, name: &str, v: f64) {
        self.insert_f64(name, vec![], vec![v]).expect("scalar");
    }

    pub fn insert_count(&mut self, name: &str, v: u64) {
        self.insert_u64(name, vec![], vec![v]).expect("scalar");
    }

    fn get(&self, name: &str) -> Result<&Stored> {
        self.entries
            .get(name)
            .ok_or_else(|| bad(format!("missing entry {name:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let s = self.get(name)?;
        match &s.payload {
            Payload::F64(v) => Tensor::new(s.shape.clone(), v.clone()),
            Payload::U64(_) => Err(bad(format!("{name:?} is not f64"))),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        match &self.get(name)?.payload {
            Payload::F64(v) => Ok(v.clone()),
            Payload::U64(_) => Err(bad(format!("{name:?} is not f64"))),
        }
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        match self.f64s(name)?.as_slice() {
            [v] => Ok(*v),
            other => Err(bad(format!("{name:?} holds {} values, expected 1", other.len()))),
        }
    }

    pub fn count(&self, name: &str) -> Result<u64> {
        match &self.get(name)?.payload {
            Payload::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(bad(format!("{name:?} is not a u64 scalar"))),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<Value>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&Value> {
        self.meta.get(key)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut offset = 0;
        let mut entries = BTreeMap::new();
        for (name, s) in &self.entries {
            entries.insert(
                name.clone(),
                IndexEntry {
                    shape: s.shape.clone(),
                    dtype: s.payload.dtype(),
                    offset,
                },
            );
            offset += s.payload.len() * 8;
        }
        let header = Header {
            entries,
            meta: self.meta.clone(),
        };
        let mut out = Vec::with_capacity(offset + 256);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(
            serde_json::to_string(&header)
                .expect("header serializes")
                .as_bytes(),
        );
        out.push(b'\n');
        for s in self.entries.values() {
            match &s.payload {
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("bad magic"));
        }
        let rest = &bytes[MAGIC.len()..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("header line is not terminated"))?;
        let header: Header = serde_json::from_slice(&rest[..nl]).map_err(|e| bad(e.to_string()))?;
        let payload = &rest[nl + 1..];
        let mut expected = 0;
        let mut entries = BTreeMap::new();
        for (name, e) in header.entries {
            let count: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(bad(format!("{name:?} starts at {}, expected {expected}", e.offset)));
            }
            let end = e.offset + count * 8;
            let raw = payload
                .get(e.offset..end)
                .ok_or_else(|| bad(format!("{name:?} runs past the end of the file")))?;
            let words = raw.chunks_exact(8).map(|c| c.try_into().unwrap());
            let data = match e.dtype {
                DType::F64 => Payload::F64(words.map(f64::from_le_bytes).collect()),
                DType::U64 => Payload::U64(words.map(u64::from_le_bytes).collect()),
            };
            entries.insert(
                name,
                Stored {
                    shape: e.shape,
                    payload: data,
                },
            );
            expected = end;
        }
        if expected != payload.len() {
            return Err(bad(format!(
                "{} trailing payload bytes",
                payload.len() - expected
            )));
        }
        Ok(Self {
            entries,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn put_dictionary(&mut self, dict: &Dictionary) {
        self.insert_tensor("dictionary.atoms", dict.matrix());
    }

    pub fn dictionary(&self) -> Result<Dictionary> {
        Dictionary::new(self.tensor("dictionary.atoms")?)
    }

    /// Stores the denoiser under `{prefix}denoiser.layer{1..4}.*`.
    pub fn put_denoiser(&mut self, prefix: &str, params: &DenoiserParams) {
        for (i, l) in params.layers.iter().enumerate() {
            let base = format!("{prefix}denoiser.layer{}", i + 1);
            self.insert_tensor(&format!("{base}.weight"), &l.weight);
            self.insert_tensor(&format!("{base}.bias"), &l.bias);
            self.insert_f64(&format!("{base}.u"), vec![l.u.len()], l.u.clone())
                .expect("vector");
            self.insert_f64(&format!("{base}.v"), vec![l.v.len()], l.v.clone())
                .expect("vector");
        }
    }

    pub fn denoiser(&self, prefix: &str) -> Result<DenoiserParams> {
        let mut layers = Vec::new();
        for i in 1.. {
            let base = format!("{prefix}denoiser.layer{i}");
            if !self.contains(&format!("{base}.weight")) {
                break;
            }
            let layer = ConvLayer {
                weight: self.tensor(&format!("{base}.weight"))?,
                bias: self.tensor(&format!("{base}.bias"))?,
                u: self.f64s(&format!("{base}.u"))?,
                v: self.f64s(&format!("{base}.v"))?,
            };
            if layer.u.len() != layer.out_channels() || layer.v.len() != layer.in_channels() * 9 {
                return Err(bad(format!("{base} power-iteration vectors have the wrong length")));
            }
            layers.push(layer);
        }
        DenoiserParams::from_layers(layers)
    }

    pub fn put_scalars(&mut self, prefix: &str, s: &ScalarParams) {
        self.insert_scalar(&format!("{prefix}scalars.raw_b"), s.raw_b);
        self.insert_scalar(&format!("{prefix}scalars.raw_mu"), s.raw_mu);
    }

    pub fn scalars(&self, prefix: &str) -> Result<ScalarParams> {
        Ok(ScalarParams {
            raw_b: self.scalar(&format!("{prefix}scalars.raw_b"))?,
            raw_mu: self.scalar(&format!("{prefix}scalars.raw_mu"))?,
        })
    }

    /// Dictionary, denoiser, scalars and the variant settings.
    pub fn put_model(&mut self, model: &Model) {
        self.put_dictionary(&model.dictionary);
        self.put_denoiser("", &model.denoiser);
        self.put_scalars("", &model.scalars);
        self.set_meta("variant", model.variant.as_str());
        self.set_meta("sparsity", model.sparsity);
    }

    pub fn model(&self) -> Result<Model> {
        let variant = match self.meta("variant").and_then(Value::as_str) {
            Some(v) => v.parse()?,
            None => Variant::Full,
        };
        let sparsity = self
            .meta("sparsity")
            .and_then(Value::as_u64)
            .map_or(crate::model::DEFAULT_SPARSITY, |s| s as usize);
        Model::new(
            self.dictionary()?,
            self.denoiser("")?,
            self.scalars("")?,
            variant,
            sparsity,
        )
    }

    /// The best model as the main entries plus everything needed to resume:
    /// the current parameters, optimizer moments and counters.
    pub fn put_fit_state(&mut self, state: &FitState) {
        let (best, score) = state
            .best
            .as_ref()
            .map_or((&state.model, f64::NEG_INFINITY), |(m, s)| (m, *s));
        self.put_model(best);
        self.put_denoiser("resume.", &state.model.denoiser);
        self.put_scalars("resume.", &state.model.scalars);
        self.insert_scalar("resume.best_score", score);
        self.insert_count("resume.epoch", state.epoch as u64);
        self.insert_count("resume.step", state.step as u64);
        if let Some(adam) = &state.adam {
            self.insert_f64("optimizer.adam.m", vec![adam.m.len()], adam.m.clone())
                .expect("vector");
            self.insert_f64("optimizer.adam.v", vec![adam.v.len()], adam.v.clone())
                .expect("vector");
            self.insert_count("optimizer.adam.t", adam.t);
            self.insert_f64(
                "optimizer.adam.hyper",
                vec![4],
                vec![adam.cfg.lr, adam.cfg.beta1, adam.cfg.beta2, adam.cfg.eps],
            )
            .expect("vector");
        }
    }

    /// Restores a [`FitState`]. Plain model checkpoints resume at epoch 0.
    pub fn fit_state(&self) -> Result<FitState> {
        let best = self.model()?;
        if !self.contains("resume.epoch") {
            return Ok(FitState::from(best));
        }
        let mut model = best.clone();
        model.denoiser = self.denoiser("resume.")?;
        model.scalars = self.scalars("resume.")?;
        let adam = if self.contains("optimizer.adam.t") {
            let h = self.f64s("optimizer.adam.hyper")?;
            if h.len() != 4 {
                return Err(bad("optimizer.adam.hyper must hold 4 values"));
            }
            let adam = Adam {
                cfg: AdamConfig {
                    lr: h[0],
                    beta1: h[1],
                    beta2: h[2],
                    eps: h[3],
                },
                m: self.f64s("optimizer.adam.m")?,
                v: self.f64s("optimizer.adam.v")?,
                t: self.count("optimizer.adam.t")?,
            };
            if adam.m.len() != model.flatten().len() || adam.v.len() != adam.m.len() {
                return Err(bad("optimizer state does not match the model size"));
            }
            Some(adam)
        } else {
            None
        };
        let score = self.scalar("resume.best_score")?;
        Ok(FitState {
            model,
            adam,
            best: score.is_finite().then_some((best, score)),
            epoch: self.count("resume.epoch")? as usize,
            step: self.count("resume.step")? as usize,
        })
    }
}

fn check_len(name: &str, shape: &[usize], len: usize) -> Result<()> {
    let want: usize = shape.iter().product();
    if want != len {
        return Err(Error::Shape(format!("{name:?}: shape {shape:?} needs {want} values, got {len}")));
    }
    Ok(())
}
