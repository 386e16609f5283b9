//! Fidelity scores for synthetic data and a loss-threshold
//! membership-inference probe.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    Activation, MlpCache, MlpLayout, Network, NetworkSpec, Optimizer, OptimizerKind, ParamSet, SeededRng, Tensor,
};

/// Largest gap between the empirical CDFs of two samples.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < x.len() && j < y.len() {
        let v = if x[i] <= y[j] { x[i] } else { y[j] };
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

fn column(t: &Tensor, c: usize) -> Vec<f64> {
    t.row_iter().map(|r| r[c]).collect()
}

fn check_pair(real: &Tensor, synth: &Tensor) -> Result<()> {
    if real.cols() != synth.cols() {
        return Err(Error::shape(format!(
            "real has {} columns, synthetic has {}",
            real.cols(),
            synth.cols()
        )));
    }
    if real.rows() == 0 || synth.rows() == 0 {
        return Err(Error::Empty("fidelity of an empty dataset".into()));
    }
    Ok(())
}

/// Per-column Kolmogorov-Smirnov distances.
pub fn ks_per_column(real: &Tensor, synth: &Tensor) -> Result<Vec<f64>> {
    check_pair(real, synth)?;
    Ok((0..real.cols())
        .map(|c| ks_distance(&column(real, c), &column(synth, c)))
        .collect())
}

/// `1 − mean` per-column KS distance.
pub fn marginal_fidelity(real: &Tensor, synth: &Tensor) -> Result<f64> {
    let d = ks_per_column(real, synth)?;
    Ok(1.0 - d.iter().sum::<f64>() / d.len() as f64)
}

/// Which correlation coefficient to compare.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMode {
    #[default]
    Pearson,
    /// Pearson correlation of average ranks.
    Spearman,
}

/// A correlation matrix, with columns of zero variance listed separately.
#[derive(Clone, Debug, PartialEq)]
pub struct Correlation {
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub matrix: Vec<f64>,
    pub constant_columns: Vec<usize>,
}

impl Correlation {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.dim + j]
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[order[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Pairwise correlation matrix. Constant columns correlate as 0 with every
/// other column and 1 with themselves.
pub fn correlation_matrix(x: &Tensor, mode: CorrelationMode) -> Correlation {
    let dim = x.cols();
    let cols: Vec<Vec<f64>> = (0..dim)
        .map(|c| {
            let v = column(x, c);
            match mode {
                CorrelationMode::Pearson => v,
                CorrelationMode::Spearman => ranks(&v),
            }
        })
        .collect();
    let n = x.rows() as f64;
    let centred: Vec<Vec<f64>> = cols
        .iter()
        .map(|v| {
            let m = v.iter().sum::<f64>() / n;
            v.iter().map(|a| a - m).collect()
        })
        .collect();
    let ss: Vec<f64> = centred.iter().map(|v| v.iter().map(|a| a * a).sum()).collect();
    let constant_columns: Vec<usize> = (0..dim).filter(|&c| !(ss[c] > 0.0)).collect();
    let mut matrix = vec![0.0; dim * dim];
    for i in 0..dim {
        matrix[i * dim + i] = 1.0;
        for j in i + 1..dim {
            let r = if ss[i] > 0.0 && ss[j] > 0.0 {
                let s: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
                (s / (ss[i] * ss[j]).sqrt()).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            matrix[i * dim + j] = r;
            matrix[j * dim + i] = r;
        }
    }
    Correlation {
        dim,
        matrix,
        constant_columns,
    }
}

/// `1 − mean_{i<j} |ρ_real − ρ_synth| / 2`.
pub fn correlation_fidelity(real: &Tensor, synth: &Tensor, mode: CorrelationMode) -> Result<f64> {
    check_pair(real, synth)?;
    if real.cols() < 2 {
        return Err(Error::invalid("correlation fidelity needs at least two columns"));
    }
    if real.rows() < 3 || synth.rows() < 3 {
        return Err(Error::invalid("correlation fidelity needs at least three rows"));
    }
    let a = correlation_matrix(real, mode);
    let b = correlation_matrix(synth, mode);
    let d = real.cols();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..d {
        for j in i + 1..d {
            total += (a.get(i, j) - b.get(i, j)).abs() / 2.0;
            pairs += 1;
        }
    }
    Ok(1.0 - total / pairs as f64)
}

/// Scores written to reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub marginal: f64,
    pub correlation: f64,
    pub trajscore: Option<f64>,
}

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (d / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean over `synth` of the best cosine similarity against any `real` row.
pub fn mean_best_cosine(real: &Tensor, synth: &Tensor) -> Result<f64> {
    check_pair(real, synth)?;
    let total: f64 = synth
        .row_iter()
        .map(|s| real.row_iter().map(|r| cosine(s, r)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / synth.rows() as f64)
}

/// Autoencoder settings for [`trajscore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Trajectories are padded or truncated to this many steps.
    pub max_len: usize,
    pub hidden: usize,
    pub latent: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            max_len: 32,
            hidden: 64,
            latent: 16,
            epochs: 200,
            batch: 32,
            lr: 1e-3,
        }
    }
}

struct Autoencoder {
    encoder: MlpLayout,
    decoder: MlpLayout,
}

impl Network for Autoencoder {
    type Cache = (MlpCache, MlpCache);

    fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    fn forward_cached(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, Self::Cache)> {
        self.check_input(input)?;
        let rows = input.rows();
        let (z, ce) = self.encoder.forward_rows(params, input.data(), rows);
        let (y, cd) = self.decoder.forward_rows(params, &z, rows);
        Ok((Tensor::matrix(rows, self.output_dim(), y)?, (ce, cd)))
    }

    fn backward(&self, params: &ParamSet, cache: &Self::Cache, g: &Tensor, grads: &mut ParamSet) -> Result<()> {
        let gz = self.decoder.backward_rows(params, &cache.1, g.data(), grads, true);
        self.encoder.backward_rows(params, &cache.0, &gz, grads, false);
        Ok(())
    }
}

/// Flattens trajectories (each a row-major `len × width` block) into
/// fixed-length vectors of `max_len · width`, zero-padded or truncated.
pub fn flatten_trajectories(trajs: &[Vec<f64>], width: usize, max_len: usize) -> Result<Tensor> {
    let d = width * max_len;
    let mut out = Vec::with_capacity(trajs.len() * d);
    for t in trajs {
        if t.len() % width != 0 {
            return Err(Error::shape(format!(
                "trajectory of {} values is not a multiple of {width}",
                t.len()
            )));
        }
        let take = t.len().min(d);
        out.extend_from_slice(&t[..take]);
        out.extend(std::iter::repeat_n(0.0, d - take));
    }
    Tensor::matrix(trajs.len(), d, out)
}

/// Trains an autoencoder on `real` and returns the mean best cosine
/// similarity of synthetic embeddings against real embeddings.
pub fn trajscore(
    real: &[Vec<f64>],
    synth: &[Vec<f64>],
    width: usize,
    cfg: &EncoderConfig,
    rng: &mut SeededRng,
) -> Result<f64> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Empty("trajscore needs real and synthetic trajectories".into()));
    }
    let xr = flatten_trajectories(real, width, cfg.max_len)?;
    let xs = flatten_trajectories(synth, width, cfg.max_len)?;
    let d = xr.cols();
    let mut params = ParamSet::new();
    let encoder = MlpLayout::register(
        NetworkSpec::new(d, vec![cfg.hidden], cfg.latent, Activation::Tanh, false),
        &mut params,
        "encoder",
        rng,
    )?;
    let decoder = MlpLayout::register(
        NetworkSpec::new(cfg.latent, vec![cfg.hidden], d, Activation::Tanh, false),
        &mut params,
        "decoder",
        rng,
    )?;
    let ae = Autoencoder { encoder, decoder };
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.lr));
    let mut order: Vec<usize> = (0..xr.rows()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let loss = |r: usize, out: &[f64], g: &mut [f64]| {
                let target = xr.row(r);
                let mut s = 0.0;
                for ((o, t), gi) in out.iter().zip(target).zip(g.iter_mut()) {
                    *gi = 2.0 * (o - t);
                    s += (o - t) * (o - t);
                }
                s
            };
            let (_, grads) = crate::numerics::grad_of_rows(&ae, &params, &xr, chunk, &loss)?;
            opt.step(&mut params, &grads)?;
        }
    }
    let embed = |x: &Tensor| -> Result<Tensor> {
        let (z, _) = ae.encoder.forward_rows(&params, x.data(), x.rows());
        Tensor::matrix(x.rows(), cfg.latent, z)
    };
    mean_best_cosine(&embed(&xr)?, &embed(&xs)?)
}

/// True-positive rates of a loss-threshold attack at fixed false-positive
/// rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

/// Vertices of the empirical ROC curve of the rule "member iff loss ≤ t",
/// swept over every distinct loss value (plus the empty rule).
pub fn roc_points(members: &[f64], non_members: &[f64]) -> Vec<(f64, f64)> {
    let mut m = members.to_vec();
    let mut n = non_members.to_vec();
    m.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = m.iter().chain(&n).cloned().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut points = vec![(0.0, 0.0)];
    let (mut i, mut j) = (0, 0);
    for t in all {
        while i < m.len() && m[i] <= t {
            i += 1;
        }
        while j < n.len() && n[j] <= t {
            j += 1;
        }
        points.push((j as f64 / n.len() as f64, i as f64 / m.len() as f64));
    }
    points
}

/// Linear interpolation of the ROC curve at `level`.
pub fn tpr_at(points: &[(f64, f64)], level: f64) -> f64 {
    let lo = points
        .iter()
        .rev()
        .find(|p| p.0 <= level)
        .copied()
        .unwrap_or((0.0, 0.0));
    match points.iter().find(|p| p.0 > level) {
        Some(&hi) => lo.1 + (level - lo.0) / (hi.0 - lo.0) * (hi.1 - lo.1),
        None => lo.1,
    }
}

/// TPR of the loss-threshold attack at each FPR level in `(0, 1)`.
pub fn mia_tpr_at_fpr(members: &[f64], non_members: &[f64], levels: &[f64]) -> Result<MiaReport> {
    if members.is_empty() || non_members.is_empty() {
        return Err(Error::Empty("membership inference needs both loss lists".into()));
    }
    if let Some(l) = levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(Error::invalid(format!(
            "false-positive level must lie in (0, 1), got {l}"
        )));
    }
    let points = roc_points(members, non_members);
    Ok(MiaReport {
        fpr: levels.to_vec(),
        tpr: levels.iter().map(|&l| tpr_at(&points, l)).collect(),
    })
}
