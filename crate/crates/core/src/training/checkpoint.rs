//! Checkpoint container.
//!
//! Layout (little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `DTTSCKPT` |
//! | 4     | format version (`u32`) |
//! | 8     | header length `H` (`u64`) |
//! | H     | JSON header: model config, config hash, step, seed, training config, speakers, tensor table |
//! | 4·N   | `f32` tensor payload, in tensor-table order |
//! | 32    | SHA-256 of every preceding byte |

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, TrainConfig, TrainRun};
use crate::autograd::{cast, to_f64, ParamStore, Scalar};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TtsModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DTTSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREFIX_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    config_hash: String,
    step: u64,
    seed: u64,
    train: Option<TrainConfig>,
    speakers: Vec<String>,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

/// Named single-precision tensors.
pub type NamedTensors = Vec<(String, Array2<f32>)>;

/// In-memory form of a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub train: Option<TrainConfig>,
    pub speakers: Vec<String>,
    pub params: NamedTensors,
    pub adam_step: u64,
    pub adam_m: NamedTensors,
    pub adam_v: NamedTensors,
}

fn to_f32<F: Scalar>(a: &Array2<F>) -> Array2<f32> {
    a.mapv(|v| to_f64(v) as f32)
}

impl Checkpoint {
    /// Snapshot of the weights (and optimiser moments) of a run.
    pub fn capture<F: Scalar>(
        run: &TrainRun,
        step: u64,
        speakers: &[String],
        params: &ParamStore<F>,
        optimizer: Option<&Adam<F>>,
    ) -> Self {
        let named = |map: &std::collections::BTreeMap<_, Array2<F>>| -> NamedTensors {
            map.iter()
                .map(|(&id, a)| (params.param(id).name.clone(), to_f32(a)))
                .collect()
        };
        Self {
            config: run.model.clone(),
            step,
            seed: run.seed,
            train: Some(run.train.clone()),
            speakers: speakers.to_vec(),
            params: params
                .iter()
                .map(|(_, p)| (p.name.clone(), to_f32(&*p.value)))
                .collect(),
            adam_step: optimizer.map_or(0, |o| o.step),
            adam_m: optimizer.map_or_else(Vec::new, |o| named(&o.m)),
            adam_v: optimizer.map_or_else(Vec::new, |o| named(&o.v)),
        }
    }

    /// Writes the container atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let groups = [
            (TensorKind::Param, &self.params),
            (TensorKind::AdamM, &self.adam_m),
            (TensorKind::AdamV, &self.adam_v),
        ];
        for (kind, group) in groups {
            for (name, a) in group.iter() {
                tensors.push(TensorEntry {
                    name: name.clone(),
                    kind,
                    rows: a.nrows(),
                    cols: a.ncols(),
                });
            }
        }
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            step: self.step,
            seed: self.seed,
            train: self.train.clone(),
            speakers: self.speakers.clone(),
            adam_step: self.adam_step,
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let payload_len: usize = groups
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|(_, a)| a.len())
            .sum();
        let mut buf = Vec::with_capacity(PREFIX_LEN + header.len() + 4 * payload_len + DIGEST_LEN);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for (_, group) in groups {
            for (_, a) in group.iter() {
                for v in a.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);

        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let mut tmp = tempfile_in(dir, path)?;
        tmp.1.write_all(&buf).map_err(|e| Error::io(&tmp.0, e))?;
        tmp.1.sync_all().map_err(|e| Error::io(&tmp.0, e))?;
        drop(tmp.1);
        std::fs::rename(&tmp.0, path).map_err(|e| Error::io(path, e))
    }

    /// Reads and fully validates a container; nothing is returned unless the
    /// digest, header and every tensor check out.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < PREFIX_LEN + DIGEST_LEN {
            return Err(bad("file is truncated".into()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (file is corrupted)".into()));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[PREFIX_LEN..header_end])
            .map_err(|e| bad(format!("bad header: {e}")))?;
        if header.config.hash() != header.config_hash {
            return Err(bad("config hash does not match the stored config".into()));
        }
        let payload = &body[header_end..];
        let total: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        if payload.len() != 4 * total {
            return Err(bad(format!(
                "payload holds {} bytes, tensor table needs {}",
                payload.len(),
                4 * total
            )));
        }
        let mut params = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        let mut offset = 0;
        for t in header.tensors {
            let n = t.rows * t.cols;
            let values = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += 4 * n;
            let a = Array2::from_shape_vec((t.rows, t.cols), values).expect("sized from table");
            match t.kind {
                TensorKind::Param => params.push((t.name, a)),
                TensorKind::AdamM => adam_m.push((t.name, a)),
                TensorKind::AdamV => adam_v.push((t.name, a)),
            }
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            seed: header.seed,
            train: header.train,
            speakers: header.speakers,
            params,
            adam_step: header.adam_step,
            adam_m,
            adam_v,
        })
    }

    /// Copies the stored weights into `params`. Every parameter must be
    /// present with a matching shape; on error `params` is left untouched.
    pub fn apply_to<F: Scalar>(&self, params: &mut ParamStore<F>) -> Result<()> {
        if self.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        let mut resolved = Vec::with_capacity(self.params.len());
        for (name, a) in &self.params {
            let id = params.id(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint tensor {name} is not a model parameter"))
            })?;
            if params.get(id).dim() != a.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    a.dim(),
                    params.get(id).dim()
                )));
            }
            resolved.push((id, a));
        }
        for (id, a) in resolved {
            params.set(id, a.mapv(|v| cast::<F>(v as f64)));
        }
        Ok(())
    }

    /// Optimiser state restored against `params` (matched by name).
    pub fn optimizer<F: Scalar>(
        &self,
        train: &TrainConfig,
        params: &ParamStore<F>,
    ) -> Result<Adam<F>> {
        let mut opt = Adam::new(train);
        opt.step = self.adam_step;
        for (group, target) in [(&self.adam_m, &mut opt.m), (&self.adam_v, &mut opt.v)] {
            for (name, a) in group {
                let id = params.id(name).ok_or_else(|| {
                    Error::Checkpoint(format!("optimizer state for unknown parameter {name}"))
                })?;
                if params.get(id).dim() != a.dim() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state for {name} has the wrong shape"
                    )));
                }
                target.insert(id, a.mapv(|v| cast::<F>(v as f64)));
            }
        }
        Ok(opt)
    }

    /// Builds the model this checkpoint describes.
    pub fn to_model(&self) -> Result<TtsModel> {
        let mut model = TtsModel::new(self.config.clone(), self.seed)?;
        self.apply_to(&mut model.params)?;
        Ok(model)
    }
}

fn tempfile_in(dir: &Path, target: &Path) -> Result<(PathBuf, std::fs::File)> {
    let stem = target
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{stem}.{}.tmp", std::process::id()));
    let f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    Ok((tmp, f))
}

/// `dir/step-00000042.ckpt`
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.ckpt"))
}

/// Newest `step-*.ckpt` in `dir` by step number, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
