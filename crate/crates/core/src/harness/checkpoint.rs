//! Binary checkpoints: an 8-byte magic, a little-endian `u32` version and
//! `u64` header length, a JSON header, then raw little-endian `f64` blobs
//! (parameters, then Adam first moments, then second moments) in header
//! order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::TrainerState;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::pipeline::AgentModel;
use crate::policy::AdamState;

pub const MAGIC: &[u8; 8] = b"AVNAVCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    trainer: Option<TrainerState>,
    params: Vec<ParamMeta>,
    /// Adam step count when optimizer moments follow the parameters.
    adam_t: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub trainer: Option<TrainerState>,
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<AdamState>,
}

fn read_blob(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated tensor data: {e}")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn write_blob(w: &mut impl Write, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

impl Checkpoint {
    /// Weights only, for evaluation.
    pub fn of_model(config: &RunConfig, model: &AgentModel) -> Self {
        Checkpoint {
            config: RunConfig {
                model: model.config.clone(),
                ..config.clone()
            },
            trainer: None,
            params: model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            adam: None,
        }
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            trainer: self.trainer.clone(),
            params: self
                .params
                .iter()
                .map(|(n, t)| ParamMeta {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            adam_t: self.adam.as_ref().map(|a| a.t),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.params {
            write_blob(&mut w, t.data())?;
        }
        if let Some(a) = &self.adam {
            for m in &a.m {
                write_blob(&mut w, m)?;
            }
            for v in &a.v {
                write_blob(&mut w, v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short for a checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut params = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let n = p.shape.iter().product();
            params.push((p.name.clone(), Tensor::new(p.shape.clone(), read_blob(&mut r, n)?)?));
        }
        let adam = match header.adam_t {
            Some(t) => {
                let mut m = Vec::with_capacity(params.len());
                for (_, p) in &params {
                    m.push(read_blob(&mut r, p.len())?);
                }
                let mut v = Vec::with_capacity(params.len());
                for (_, p) in &params {
                    v.push(read_blob(&mut r, p.len())?);
                }
                Some(AdamState { m, v, t })
            }
            None => None,
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint {
            config: header.config,
            trainer: header.trainer,
            params,
            adam,
        })
    }

    /// Write to a sibling temporary file and rename, so an interrupted save
    /// never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = std::fs::File::create(&tmp)?;
            self.write(std::io::BufWriter::new(f))?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }

    /// Rebuild the model and load the stored weights into it.
    pub fn model(&self) -> Result<AgentModel> {
        let mut model = AgentModel::new(self.config.model.clone(), self.config.seed)?;
        model.store.load(self.params.clone())?;
        Ok(model)
    }
}
