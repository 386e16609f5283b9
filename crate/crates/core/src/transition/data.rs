//! Transition tables, categorical encoding and standardization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A categorical column holding indices `0..cardinality`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteColumn {
    pub column: usize,
    pub cardinality: usize,
}

/// Column layout of a transition row: `s | a | r | s′ [| d]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub state_dim: usize,
    pub action_dim: usize,
    pub terminal: bool,
    pub discrete: Vec<DiscreteColumn>,
}

/// How one raw column appears in the encoded table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoded {
    Continuous(usize),
    OneHot { start: usize, cardinality: usize },
}

impl Encoded {
    pub fn span(self) -> std::ops::Range<usize> {
        match self {
            Encoded::Continuous(c) => c..c + 1,
            Encoded::OneHot { start, cardinality } => start..start + cardinality,
        }
    }
}

impl Schema {
    pub fn new(state_dim: usize, action_dim: usize, terminal: bool) -> Self {
        Self {
            state_dim,
            action_dim,
            terminal,
            discrete: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        2 * self.state_dim + self.action_dim + 1 + usize::from(self.terminal)
    }

    pub fn reward_col(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn next_state_cols(&self) -> std::ops::Range<usize> {
        let start = self.reward_col() + 1;
        start..start + self.state_dim
    }

    pub fn terminal_col(&self) -> Option<usize> {
        self.terminal.then(|| 2 * self.state_dim + self.action_dim + 1)
    }

    /// Raw column ranges of the five components `s, a, r, s′, d`. The last
    /// range is empty without a terminal column.
    pub fn components(&self) -> [std::ops::Range<usize>; 5] {
        let (s, a) = (self.state_dim, self.action_dim);
        let d_end = self.width();
        [
            0..s,
            s..s + a,
            s + a..s + a + 1,
            s + a + 1..2 * s + a + 1,
            2 * s + a + 1..d_end,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::invalid("state dimension must be positive"));
        }
        let mut seen = Vec::new();
        for d in &self.discrete {
            if d.cardinality < 2 {
                return Err(Error::invalid(format!(
                    "discrete column {} needs at least two categories",
                    d.column
                )));
            }
            if d.column >= self.width() || Some(d.column) == self.terminal_col() {
                return Err(Error::invalid(format!("discrete column {} out of range", d.column)));
            }
            if seen.contains(&d.column) {
                return Err(Error::invalid(format!("discrete column {} declared twice", d.column)));
            }
            seen.push(d.column);
        }
        Ok(())
    }

    fn cardinality(&self, col: usize) -> Option<usize> {
        self.discrete.iter().find(|d| d.column == col).map(|d| d.cardinality)
    }

    /// Encoded position of every raw column.
    pub fn encoding(&self) -> Vec<Encoded> {
        let mut next = 0;
        (0..self.width())
            .map(|c| match self.cardinality(c) {
                Some(m) => {
                    let e = Encoded::OneHot {
                        start: next,
                        cardinality: m,
                    };
                    next += m;
                    e
                }
                None => {
                    next += 1;
                    Encoded::Continuous(next - 1)
                }
            })
            .collect()
    }

    pub fn encoded_width(&self) -> usize {
        self.encoding().last().map_or(0, |e| e.span().end)
    }

    /// Encoded columns kept out of standardization: one-hot blocks and the
    /// terminal flag.
    pub fn fixed_columns(&self) -> Vec<bool> {
        let enc = self.encoding();
        let mut fixed = vec![false; self.encoded_width()];
        for (c, e) in enc.iter().enumerate() {
            let keep = matches!(e, Encoded::OneHot { .. }) || Some(c) == self.terminal_col();
            if keep {
                for i in e.span() {
                    fixed[i] = true;
                }
            }
        }
        fixed
    }

    /// Encoded column ranges of the five components.
    pub fn encoded_components(&self) -> [std::ops::Range<usize>; 5] {
        let enc = self.encoding();
        let span = |r: std::ops::Range<usize>| {
            if r.is_empty() {
                let at = enc.get(r.start).map_or(self.encoded_width(), |e| e.span().start);
                at..at
            } else {
                enc[r.start].span().start..enc[r.end - 1].span().end
            }
        };
        self.components().map(span)
    }
}

/// `N` transitions stored row-wise in raw (unencoded) form.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDataset {
    schema: Schema,
    rows: Tensor,
}

impl TransitionDataset {
    pub fn new(schema: Schema, rows: Tensor) -> Result<Self> {
        schema.validate()?;
        if rows.shape().len() != 2 || rows.cols() != schema.width() {
            return Err(Error::shape(format!(
                "rows {:?} for transition width {}",
                rows.shape(),
                schema.width()
            )));
        }
        if !rows.all_finite() {
            return Err(Error::invalid("transition values must be finite"));
        }
        for d in &schema.discrete {
            for r in rows.row_iter() {
                let v = r[d.column];
                if v.fract() != 0.0 || v < 0.0 || v >= d.cardinality as f64 {
                    return Err(Error::invalid(format!(
                        "column {} holds {v}, not a category below {}",
                        d.column, d.cardinality
                    )));
                }
            }
        }
        Ok(Self { schema, rows })
    }

    pub fn empty(schema: Schema) -> Result<Self> {
        let w = schema.width();
        Self::new(schema, Tensor::zeros(&[0, w]))
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

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.row(i)[..self.schema.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        let s = self.schema.state_dim;
        &self.row(i)[s..s + self.schema.action_dim]
    }

    pub fn reward(&self, i: usize) -> f64 {
        self.row(i)[self.schema.reward_col()]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.row(i)[self.schema.next_state_cols()]
    }

    pub fn terminal(&self, i: usize) -> Option<f64> {
        self.schema.terminal_col().map(|c| self.row(i)[c])
    }

    /// `states | actions` as a two-block table, for behaviour cloning.
    pub fn state_action(&self) -> (Tensor, Tensor) {
        let idx: Vec<usize> = (0..self.len()).collect();
        let s: Vec<f64> = idx.iter().flat_map(|&i| self.state(i).to_vec()).collect();
        let a: Vec<f64> = idx.iter().flat_map(|&i| self.action(i).to_vec()).collect();
        (
            Tensor::matrix(self.len(), self.schema.state_dim, s).expect("state block"),
            Tensor::matrix(self.len(), self.schema.action_dim, a).expect("action block"),
        )
    }

    pub fn select(&self, indices: &[usize]) -> TransitionDataset {
        TransitionDataset {
            schema: self.schema.clone(),
            rows: self.rows.select_rows(indices),
        }
    }

    pub fn concat(&self, other: &TransitionDataset) -> Result<TransitionDataset> {
        if self.schema != other.schema {
            return Err(Error::shape("datasets have different schemas"));
        }
        Ok(TransitionDataset {
            schema: self.schema.clone(),
            rows: self.rows.vstack(&other.rows)?,
        })
    }
}

/// Expands every categorical column into a one-hot block.
pub fn one_hot_encode(ds: &TransitionDataset) -> Result<Tensor> {
    encode_rows(ds.schema(), ds.rows())
}

/// [`one_hot_encode`] on bare rows that follow `schema`.
pub fn encode_rows(schema: &Schema, rows: &Tensor) -> Result<Tensor> {
    if rows.cols() != schema.width() {
        return Err(Error::shape(format!(
            "rows of width {} for schema width {}",
            rows.cols(),
            schema.width()
        )));
    }
    let enc = schema.encoding();
    let w = schema.encoded_width();
    let mut out = Tensor::zeros(&[rows.rows(), w]);
    for r in 0..rows.rows() {
        let src = rows.row(r);
        let dst = out.row_mut(r);
        for (c, e) in enc.iter().enumerate() {
            match *e {
                Encoded::Continuous(i) => dst[i] = src[c],
                Encoded::OneHot { start, cardinality } => {
                    let k = src[c];
                    if k.fract() != 0.0 || k < 0.0 || k >= cardinality as f64 {
                        return Err(Error::invalid(format!("column {c} holds {k}, not a category")));
                    }
                    dst[start + k as usize] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

/// Maps each one-hot block back to the index of its largest entry (lowest
/// index on ties).
pub fn argmax_decode(schema: &Schema, encoded: &Tensor) -> Result<TransitionDataset> {
    if encoded.cols() != schema.encoded_width() {
        return Err(Error::shape(format!(
            "encoded width {} for schema expecting {}",
            encoded.cols(),
            schema.encoded_width()
        )));
    }
    let enc = schema.encoding();
    let mut out = Tensor::zeros(&[encoded.rows(), schema.width()]);
    for r in 0..encoded.rows() {
        let src = encoded.row(r);
        let dst = out.row_mut(r);
        for (c, e) in enc.iter().enumerate() {
            dst[c] = match *e {
                Encoded::Continuous(i) => src[i],
                Encoded::OneHot { start, cardinality } => {
                    let block = &src[start..start + cardinality];
                    let mut best = 0;
                    for (i, v) in block.iter().enumerate() {
                        if *v > block[best] {
                            best = i;
                        }
                    }
                    best as f64
                }
            };
        }
    }
    TransitionDataset::new(schema.clone(), out)
}

/// Per-column mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns passed through unchanged.
    pub fixed: Vec<bool>,
    /// Columns whose spread fell below the floor.
    pub constant: Vec<usize>,
}

/// Smallest standard deviation used for scaling.
pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    /// Fits statistics to `x`; `fixed` columns get mean 0 and std 1.
    pub fn fit(x: &Tensor, fixed: &[bool]) -> Result<Self> {
        if x.rows() < 2 {
            return Err(Error::invalid("need at least two rows to estimate spread"));
        }
        if fixed.len() != x.cols() {
            return Err(Error::shape("one fixed flag per column required"));
        }
        let n = x.rows() as f64;
        let mut mean = x.column_means();
        let mut std = vec![1.0; x.cols()];
        let mut constant = Vec::new();
        for c in 0..x.cols() {
            if fixed[c] {
                mean[c] = 0.0;
                continue;
            }
            let var = x.row_iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n;
            let s = var.sqrt();
            if s < STD_FLOOR {
                constant.push(c);
            }
            std[c] = s.max(STD_FLOOR);
        }
        Ok(Self {
            mean,
            std,
            fixed: fixed.to_vec(),
            constant,
        })
    }

    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
            fixed: vec![true; width],
            constant: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.width() {
            return Err(Error::shape(format!(
                "{} columns for stats of width {}",
                x.cols(),
                self.width()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        for r in 0..out.rows() {
            self.normalize_row(out.row_mut(r));
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        for r in 0..out.rows() {
            self.denormalize_row(out.row_mut(r));
        }
        Ok(out)
    }

    pub fn normalize_row(&self, row: &mut [f64]) {
        for (c, v) in row.iter_mut().enumerate() {
            if !self.fixed[c] {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }

    pub fn denormalize_row(&self, row: &mut [f64]) {
        for (c, v) in row.iter_mut().enumerate() {
            if !self.fixed[c] {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
    }
}

/// Standardizes every non-fixed column of `x`.
pub fn normalize(x: &Tensor, fixed: &[bool]) -> Result<(Tensor, NormStats)> {
    let stats = NormStats::fit(x, fixed)?;
    Ok((stats.normalize(x)?, stats))
}

/// Inverse of [`normalize`].
pub fn denormalize(stats: &NormStats, x: &Tensor) -> Result<Tensor> {
    stats.denormalize(x)
}

/// Rounds the terminal flag to `{0, 1}` at 0.5 and zeroes the next state of
/// terminal rows.
pub fn settle_terminal(schema: &Schema, row: &mut [f64]) -> bool {
    let Some(tc) = schema.terminal_col() else {
        return false;
    };
    let done = row[tc] >= 0.5;
    row[tc] = if done { 1.0 } else { 0.0 };
    if done {
        for c in schema.next_state_cols() {
            row[c] = 0.0;
        }
    }
    done
}
