//! The `PORL1` binary dataset format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PORL1"  u16 version  u8 mode (0 transitions, 1 trajectories)
//! u32 |s|  u32 |a|  u8 terminal  u32 n_discrete  (u32 column, u32 cardinality)*
//! u64 count
//! transitions:  count rows of width f32 values
//! trajectories: count records of (u32 length, length rows of width f32 values)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{atomic_write, Reader};
use crate::numerics::Tensor;
use crate::trajectory::Trajectory;
use crate::transition::{DiscreteColumn, Schema, TransitionDataset};

pub const DATASET_MAGIC: &[u8; 5] = b"PORL1";
pub const DATASET_VERSION: u16 = 1;

/// Contents of a dataset file.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetFile {
    Transitions(TransitionDataset),
    Trajectories {
        schema: Schema,
        trajectories: Vec<Trajectory>,
    },
}

impl DatasetFile {
    pub fn schema(&self) -> &Schema {
        match self {
            DatasetFile::Transitions(d) => d.schema(),
            DatasetFile::Trajectories { schema, .. } => schema,
        }
    }

    pub fn mode(&self) -> &'static str {
        match self {
            DatasetFile::Transitions(_) => "transition",
            DatasetFile::Trajectories { .. } => "trajectory",
        }
    }

    /// All transitions in one table.
    pub fn transitions(&self) -> Result<TransitionDataset> {
        match self {
            DatasetFile::Transitions(d) => Ok(d.clone()),
            DatasetFile::Trajectories { schema, trajectories } => crate::trajectory::flatten(schema, trajectories),
        }
    }

    pub fn into_trajectories(self) -> Result<Vec<Trajectory>> {
        match self {
            DatasetFile::Trajectories { trajectories, .. } => Ok(trajectories),
            DatasetFile::Transitions(_) => Err(Error::Format("file holds transitions, not trajectories".into())),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let schema = self.schema();
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.push(u8::from(matches!(self, DatasetFile::Trajectories { .. })));
        out.extend_from_slice(&(schema.state_dim as u32).to_le_bytes());
        out.extend_from_slice(&(schema.action_dim as u32).to_le_bytes());
        out.push(u8::from(schema.terminal));
        out.extend_from_slice(&(schema.discrete.len() as u32).to_le_bytes());
        for d in &schema.discrete {
            out.extend_from_slice(&(d.column as u32).to_le_bytes());
            out.extend_from_slice(&(d.cardinality as u32).to_le_bytes());
        }
        let push_rows = |out: &mut Vec<u8>, t: &Tensor| {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        };
        match self {
            DatasetFile::Transitions(d) => {
                out.extend_from_slice(&(d.len() as u64).to_le_bytes());
                push_rows(&mut out, d.rows());
            }
            DatasetFile::Trajectories { trajectories, .. } => {
                out.extend_from_slice(&(trajectories.len() as u64).to_le_bytes());
                for t in trajectories {
                    out.extend_from_slice(&(t.len() as u32).to_le_bytes());
                    push_rows(&mut out, t.rows());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(DATASET_MAGIC.len())? != DATASET_MAGIC {
            return Err(Error::Format("not a PORL1 dataset (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let mode = r.u8()?;
        let state_dim = r.u32()? as usize;
        let action_dim = r.u32()? as usize;
        let terminal = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("terminal flag byte {other}"))),
        };
        let mut schema = Schema::new(state_dim, action_dim, terminal);
        for _ in 0..r.u32()? {
            let column = r.u32()? as usize;
            let cardinality = r.u32()? as usize;
            schema.discrete.push(DiscreteColumn { column, cardinality });
        }
        schema.validate()?;
        let width = schema.width();
        let count = r.u64()?;
        let read_rows = |r: &mut Reader, rows: usize| -> Result<Tensor> {
            let n = rows
                .checked_mul(width)
                .ok_or_else(|| Error::Format("row count overflows".into()))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format("row count overflows".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4-byte chunk"))))
                .collect();
            Tensor::matrix(rows, width, data)
        };
        let file = match mode {
            0 => {
                let rows = usize::try_from(count).map_err(|_| Error::Format("row count overflows".into()))?;
                let t = read_rows(&mut r, rows)?;
                DatasetFile::Transitions(TransitionDataset::new(schema, t)?)
            }
            1 => {
                let mut trajectories = Vec::new();
                for _ in 0..count {
                    let len = r.u32()? as usize;
                    let t = read_rows(&mut r, len)?;
                    trajectories.push(Trajectory::new(schema.clone(), t)?);
                }
                DatasetFile::Trajectories { schema, trajectories }
            }
            other => return Err(Error::Format(format!("unknown dataset mode {other}"))),
        };
        if !r.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the payload",
                r.remaining()
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
