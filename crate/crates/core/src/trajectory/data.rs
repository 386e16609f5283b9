//! Trajectories and their fixed-horizon fragments.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::transition::{Schema, TransitionDataset};

/// An episode: transitions in order, ending in at most one terminal.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    schema: Schema,
    rows: Tensor,
}

impl Trajectory {
    /// Checks that every flag is 0 or 1, that only the last transition may
    /// be terminal and that a terminal transition has a zero next state.
    pub fn new(schema: Schema, rows: Tensor) -> Result<Self> {
        schema.validate()?;
        let Some(tc) = schema.terminal_col() else {
            return Err(Error::invalid("trajectories need a terminal column"));
        };
        if rows.shape().len() != 2 || rows.cols() != schema.width() {
            return Err(Error::shape(format!(
                "rows {:?} for transition width {}",
                rows.shape(),
                schema.width()
            )));
        }
        if rows.rows() == 0 {
            return Err(Error::Empty("trajectory without transitions".into()));
        }
        if !rows.all_finite() {
            return Err(Error::invalid("trajectory values must be finite"));
        }
        let last = rows.rows() - 1;
        for (p, r) in rows.row_iter().enumerate() {
            let d = r[tc];
            if d != 0.0 && d != 1.0 {
                return Err(Error::invalid(format!("terminal flag {d} at step {p}")));
            }
            if d == 1.0 {
                if p != last {
                    return Err(Error::invalid(format!("terminal at step {p} before the end")));
                }
                if schema.next_state_cols().any(|c| r[c] != 0.0) {
                    return Err(Error::invalid("terminal transition with a non-zero next state"));
                }
            }
        }
        // Reuses the categorical checks of the flat table.
        TransitionDataset::new(schema.clone(), rows.clone())?;
        Ok(Self { schema, rows })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transition(&self, p: usize) -> &[f64] {
        self.rows.row(p)
    }

    pub fn is_terminated(&self) -> bool {
        let tc = self.schema.terminal_col().expect("validated");
        self.rows.row(self.len() - 1)[tc] == 1.0
    }
}

/// Flattens trajectories into one transition table.
pub fn flatten(schema: &Schema, trajectories: &[Trajectory]) -> Result<TransitionDataset> {
    let mut data = Vec::new();
    let mut n = 0;
    for t in trajectories {
        if t.schema() != schema {
            return Err(Error::shape("trajectory schema differs"));
        }
        data.extend_from_slice(t.rows().data());
        n += t.len();
    }
    TransitionDataset::new(schema.clone(), Tensor::matrix(n, schema.width(), data)?)
}

/// `H` consecutive transitions of one trajectory with the transition that
/// precedes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Fragment {
    /// `[H, width]`; rows past `real_len` are zero.
    pub rows: Tensor,
    /// Which of the `H` rows hold real transitions.
    pub mask: Vec<bool>,
    /// Preceding transition, all zero for the first fragment.
    pub link: Vec<f64>,
    pub index: usize,
    pub parent: usize,
}

impl Fragment {
    pub fn horizon(&self) -> usize {
        self.mask.len()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Last unmasked transition.
    pub fn last_real(&self) -> &[f64] {
        self.rows.row(self.real_len() - 1)
    }
}

/// Cuts `traj` into `ceil(|τ|/H)` fragments, zero-padding the tail.
pub fn fragment(traj: &Trajectory, horizon: usize, parent: usize) -> Result<Vec<Fragment>> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let w = traj.schema().width();
    let count = traj.len().div_ceil(horizon);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let lo = i * horizon;
        let hi = (lo + horizon).min(traj.len());
        let mut rows = Tensor::zeros(&[horizon, w]);
        rows.data_mut()[..(hi - lo) * w].copy_from_slice(&traj.rows().data()[lo * w..hi * w]);
        let link = if i == 0 {
            vec![0.0; w]
        } else {
            traj.transition(lo - 1).to_vec()
        };
        out.push(Fragment {
            rows,
            mask: (0..horizon).map(|p| p < hi - lo).collect(),
            link,
            index: i,
            parent,
        });
    }
    Ok(out)
}

/// Concatenates the real transitions of consecutive fragments.
pub fn stitch(schema: &Schema, fragments: &[Fragment]) -> Result<Trajectory> {
    let w = schema.width();
    let mut data = Vec::new();
    for (i, f) in fragments.iter().enumerate() {
        if f.index != i || f.rows.cols() != w {
            return Err(Error::invalid(format!("fragment {i} out of order or mis-shaped")));
        }
        let n = f.real_len();
        if f.mask[..n].iter().any(|m| !m) {
            return Err(Error::invalid("padding must trail the real transitions"));
        }
        data.extend_from_slice(&f.rows.data()[..n * w]);
    }
    let n = data.len() / w;
    Trajectory::new(schema.clone(), Tensor::matrix(n, w, data)?)
}
