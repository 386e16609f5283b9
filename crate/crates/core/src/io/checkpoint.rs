//! The `PORLCKPT` model checkpoint format.
//!
//! ```text
//! "PORLCKPT"  u16 version  u32 header length  header (JSON)
//! u32 tensor count
//! per tensor: u32 name length, name (UTF-8), u32 rank, u64 dims*, f64 values*
//! ```
//!
//! The JSON header carries only structure (schema, architecture, step
//! count, flags). Every floating-point value, including normalization
//! statistics, the β range and the denoiser's time frequencies, is stored
//! as a tensor so that a reload is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{MeanForm, MlpDenoiser, MlpDenoiserSpec, NoiseSchedule};
use crate::error::{Error, Result};
use crate::io::{atomic_write, Reader};
use crate::numerics::{ParamSet, SeededRng, Tensor};
use crate::trajectory::{TrajectoryModel, TransformerDenoiser, TransformerSpec};
use crate::transition::{NormStats, Schema, TransitionModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PORLCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

const STATS_MEAN: &str = "@stats.mean";
const STATS_STD: &str = "@stats.std";
const BETA_RANGE: &str = "@schedule.beta_range";
const FREQS: &str = "@denoiser.freqs";

/// Denoiser architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKind {
    Transition(MlpDenoiserSpec),
    Trajectory(TransformerSpec),
}

/// Structural part of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelKind,
    pub schema: Schema,
    pub schedule_steps: usize,
    pub mean_form: MeanForm,
    pub stats_fixed: Vec<bool>,
    pub stats_constant: Vec<usize>,
}

/// Either synthesizer.
#[derive(Clone, Debug)]
pub enum SavedModel {
    Transition(TransitionModel),
    Trajectory(TrajectoryModel),
}

/// A decoded checkpoint: header plus named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

fn vector(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("1-D shape matches")
}

impl Checkpoint {
    pub fn from_model(model: &SavedModel) -> Self {
        let (kind, schema, stats, schedule, params, freqs) = match model {
            SavedModel::Transition(m) => (
                ModelKind::Transition(m.denoiser.spec().clone()),
                &m.schema,
                &m.stats,
                &m.schedule,
                &m.params,
                Some(m.denoiser.freqs()),
            ),
            SavedModel::Trajectory(m) => (
                ModelKind::Trajectory(m.denoiser.spec().clone()),
                &m.schema,
                &m.stats,
                &m.schedule,
                &m.params,
                None,
            ),
        };
        let (lo, hi) = schedule.beta_range();
        let mut tensors = vec![
            (STATS_MEAN.to_string(), vector(&stats.mean)),
            (STATS_STD.to_string(), vector(&stats.std)),
            (BETA_RANGE.to_string(), vector(&[lo, hi])),
        ];
        if let Some(f) = freqs {
            tensors.push((FREQS.to_string(), vector(f)));
        }
        tensors.extend(params.iter().map(|(n, t)| (n.to_string(), t.clone())));
        Self {
            header: CheckpointHeader {
                model: kind,
                schema: schema.clone(),
                schedule_steps: schedule.steps(),
                mean_form: schedule.mean_form(),
                stats_fixed: stats.fixed.clone(),
                stats_constant: stats.constant.clone(),
            },
            tensors,
        }
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
    }

    /// Rebuilds the model. Parameter names and shapes must match the
    /// architecture exactly.
    pub fn into_model(self) -> Result<SavedModel> {
        let h = &self.header;
        let stats = NormStats {
            mean: self.tensor(STATS_MEAN)?.data().to_vec(),
            std: self.tensor(STATS_STD)?.data().to_vec(),
            fixed: h.stats_fixed.clone(),
            constant: h.stats_constant.clone(),
        };
        if stats.std.len() != stats.mean.len() || stats.fixed.len() != stats.mean.len() {
            return Err(Error::Format("normalization statistics of unequal widths".into()));
        }
        let range = self.tensor(BETA_RANGE)?.data();
        if range.len() != 2 {
            return Err(Error::Format("beta range must hold two values".into()));
        }
        let schedule = NoiseSchedule::linear(h.schedule_steps, range[0], range[1])?.with_mean_form(h.mean_form);
        // Initial values are overwritten below; the stream only shapes them.
        let mut rng = SeededRng::new(0);
        let mut fresh = ParamSet::new();
        let model = match &h.model {
            ModelKind::Transition(spec) => {
                let freqs = self.tensor(FREQS)?.data().to_vec();
                let denoiser = MlpDenoiser::with_freqs(spec.clone(), freqs, &mut fresh, &mut rng)?;
                let params = self.fill(&fresh)?;
                SavedModel::Transition(TransitionModel::from_parts(
                    h.schema.clone(),
                    stats,
                    schedule,
                    denoiser,
                    params,
                )?)
            }
            ModelKind::Trajectory(spec) => {
                let denoiser = TransformerDenoiser::new(spec.clone(), &mut fresh, &mut rng)?;
                let params = self.fill(&fresh)?;
                SavedModel::Trajectory(TrajectoryModel::from_parts(
                    h.schema.clone(),
                    stats,
                    schedule,
                    denoiser,
                    params,
                )?)
            }
        };
        Ok(model)
    }

    fn fill(&self, fresh: &ParamSet) -> Result<ParamSet> {
        let stored = self.tensors.iter().filter(|(n, _)| !n.starts_with('@')).count();
        if stored != fresh.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {stored} parameter tensors, architecture needs {}",
                fresh.len()
            )));
        }
        let mut params = fresh.clone();
        for (name, slot) in params.iter_mut() {
            let t = self.tensor(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(params)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a PORLCKPT checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name =
                String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflows".into()))?);
            }
            let size = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&s| s.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format(format!("tensor {name} overruns the file")))?;
            let mut data = Vec::with_capacity(size);
            for _ in 0..size {
                data.push(r.f64()?);
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the tensors",
                r.remaining()
            )));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

impl SavedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_model(self).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::load(path)?.into_model()
    }
}
