//! Binary checkpoint: magic, JSON header, then raw little-endian tensor data.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::KbMode;
use crate::model::{ModelConfig, NeuralAssistant};
use crate::tensor::{Real, Tensor};
use crate::text::Vocabulary;
use crate::train::{AdamState, TrainState};

const MAGIC: &[u8; 8] = b"NASSTCK1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: String,
    vocab: Vec<String>,
    vocab_hash: String,
    step: u64,
    kb_mode: KbMode,
    tensors: Vec<TensorEntry>,
    optimizer_step: Option<u64>,
    train_state: Option<TrainState>,
}

/// Everything needed to serve, evaluate, or resume training.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real> {
    pub model: NeuralAssistant<T>,
    pub vocab: Vocabulary,
    pub step: u64,
    /// Slice mode used in training; the serving default.
    pub kb_mode: KbMode,
    pub optimizer: Option<AdamState<T>>,
    pub train_state: Option<TrainState>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        let mut push = |name: String, t: &Tensor<T>, data: &mut Vec<u8>| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset: data.len(),
            });
            for &x in t.data() {
                x.write_le(data);
            }
        };
        for (name, t) in self.model.param_names().iter().zip(self.model.params()) {
            push(name.clone(), t, &mut data);
        }
        if let Some(opt) = &self.optimizer {
            for (name, t) in self.model.param_names().iter().zip(&opt.m) {
                push(format!("adam.m.{name}"), t, &mut data);
            }
            for (name, t) in self.model.param_names().iter().zip(&opt.v) {
                push(format!("adam.v.{name}"), t, &mut data);
            }
        }
        let header = Header {
            config: self.model.config().clone(),
            dtype: T::DTYPE.to_string(),
            vocab: self.vocab.plain_tokens().to_vec(),
            vocab_hash: self.vocab.hash(),
            step: self.step,
            kb_mode: self.kb_mode,
            tensors,
            optimizer_step: self.optimizer.as_ref().map(|o| o.t),
            train_state: self.train_state.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let data = &bytes[16 + hlen..];

        let vocab = Vocabulary::from_tokens(header.vocab.iter().cloned());
        if vocab.hash() != header.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: header.vocab_hash,
                actual: vocab.hash(),
            });
        }
        if vocab.len() != header.config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                header.config.vocab_size
            )));
        }
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
        };
        let read = |e: &TensorEntry| -> Result<Tensor<T>> {
            let n: usize = e.shape.iter().product();
            let raw = data
                .get(e.offset..e.offset + n * width)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past end of file", e.name)))?;
            let values: Vec<T> = if width == T::BYTES {
                raw.chunks_exact(width).map(T::read_le).collect()
            } else if width == 4 {
                raw.chunks_exact(4).map(|c| T::c(f32::read_le(c) as f64)).collect()
            } else {
                raw.chunks_exact(8).map(|c| T::c(f64::read_le(c))).collect()
            };
            Tensor::new(e.shape.clone(), values)
        };

        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.tensors {
            let t = read(e)?;
            if let Some(rest) = e.name.strip_prefix("adam.m.") {
                m.push((rest.to_string(), t));
            } else if let Some(rest) = e.name.strip_prefix("adam.v.") {
                v.push((rest.to_string(), t));
            } else {
                params.push((e.name.clone(), t));
            }
        }
        let model = NeuralAssistant::from_named(header.config, params)?;
        let optimizer = match header.optimizer_step {
            Some(t) => {
                let order = |list: Vec<(String, Tensor<T>)>| -> Result<Vec<Tensor<T>>> {
                    if list.len() != model.params().len() {
                        return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
                    }
                    list.into_iter()
                        .zip(model.param_names())
                        .map(|((n, t), expect)| {
                            if &n == expect {
                                Ok(t)
                            } else {
                                Err(Error::Checkpoint(format!("optimizer tensor `{n}` out of order")))
                            }
                        })
                        .collect()
                };
                Some(AdamState { t, m: order(m)?, v: order(v)? })
            }
            None => None,
        };
        Ok(Checkpoint {
            model,
            vocab,
            step: header.step,
            kb_mode: header.kb_mode,
            optimizer,
            train_state: header.train_state,
        })
    }

    /// Writes to a sibling temporary file first, then renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
