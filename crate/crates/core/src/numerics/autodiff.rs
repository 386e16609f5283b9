//! Reverse-mode gradients for networks that map row batches to row batches.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

/// A differentiable map from `[rows, input_dim]` to `[rows, output_dim]`.
///
/// Rows never interact, so the gradient of a batch-mean loss is the mean of
/// the per-row gradients.
pub trait Network: Sync {
    type Cache: Send;

    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    fn forward_cached(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, Self::Cache)>;

    /// Accumulates `dL/dθ` into `grads` given `dL/d(output)`.
    fn backward(
        &self,
        params: &ParamSet,
        cache: &Self::Cache,
        grad_output: &Tensor,
        grads: &mut ParamSet,
    ) -> Result<()>;

    fn forward(&self, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(params, input)?.0)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape().len() != 2 || input.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects [rows, {}], got {:?}",
                self.input_dim(),
                input.shape()
            )));
        }
        Ok(())
    }
}

/// A scalar loss defined row by row.
///
/// `row` is the index of the row in the batch the caller passed in, so a loss
/// can look up per-row targets. The implementation writes `dloss/doutput`
/// into `grad` and returns the loss value.
pub trait RowLoss: Sync {
    fn row_loss(&self, row: usize, output: &[f64], grad: &mut [f64]) -> f64;
}

impl<F> RowLoss for F
where
    F: Fn(usize, &[f64], &mut [f64]) -> f64 + Sync,
{
    fn row_loss(&self, row: usize, output: &[f64], grad: &mut [f64]) -> f64 {
        self(row, output, grad)
    }
}

/// Mean loss over `rows` of `batch` and its gradient w.r.t. every parameter.
///
/// `rows` selects (and orders) the batch rows that participate; the loss is
/// called with the original row indices.
pub fn grad_of_rows<N: Network, L: RowLoss + ?Sized>(
    net: &N,
    params: &ParamSet,
    batch: &Tensor,
    rows: &[usize],
    loss: &L,
) -> Result<(f64, ParamSet)> {
    if rows.is_empty() {
        return Err(Error::Empty("gradient of an empty batch".into()));
    }
    let sub = batch.select_rows(rows);
    let (out, cache) = net.forward_cached(params, &sub)?;
    let width = out.cols();
    let scale = 1.0 / rows.len() as f64;
    let mut g_out = Tensor::zeros(out.shape());
    let mut total = 0.0;
    for (local, &global) in rows.iter().enumerate() {
        let g = &mut g_out.data_mut()[local * width..(local + 1) * width];
        total += loss.row_loss(global, out.row(local), g);
        g.iter_mut().for_each(|v| *v *= scale);
    }
    let mut grads = params.zeros_like();
    net.backward(params, &cache, &g_out, &mut grads)?;
    Ok((total * scale, grads))
}

/// Gradient of the batch-mean loss.
pub fn grad<N: Network, L: RowLoss + ?Sized>(
    net: &N,
    params: &ParamSet,
    batch: &Tensor,
    loss: &L,
) -> Result<(f64, ParamSet)> {
    net.check_input(batch)?;
    let rows: Vec<usize> = (0..batch.rows()).collect();
    grad_of_rows(net, params, batch, &rows, loss)
}

/// One gradient per batch row, each obtained by replaying the forward and
/// reverse pass on that row alone.
pub fn per_example_grads<N: Network, L: RowLoss + ?Sized>(
    net: &N,
    params: &ParamSet,
    batch: &Tensor,
    loss: &L,
) -> Result<Vec<(f64, ParamSet)>> {
    net.check_input(batch)?;
    if batch.rows() == 0 {
        return Err(Error::Empty("per-example gradients of an empty batch".into()));
    }
    (0..batch.rows())
        .into_par_iter()
        .map(|i| grad_of_rows(net, params, batch, &[i], loss))
        .collect()
}

/// Agreement between reverse-mode and central-difference gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    pub params: usize,
    /// `‖g_fd − g‖ / max(‖g_fd‖, ‖g‖)`.
    pub relative: f64,
    /// Largest per-entry relative error, skipping entries that agree to 1e-8
    /// absolutely.
    pub worst_entry: f64,
}

/// Compares [`grad`] with central differences of step `h` on every
/// parameter.
pub fn gradient_check<N: Network, L: RowLoss + ?Sized>(
    net: &N,
    params: &ParamSet,
    batch: &Tensor,
    loss: &L,
    h: f64,
) -> Result<GradientCheck> {
    let (_, g) = grad(net, params, batch, loss)?;
    let analytic = g.flatten();
    let base = params.flatten();
    let mut probe = params.clone();
    let mut scratch = vec![0.0; net.output_dim()];
    let mut loss_at = |flat: &[f64]| -> Result<f64> {
        probe.assign_flat(flat)?;
        let y = net.forward(&probe, batch)?;
        let total: f64 = (0..batch.rows())
            .map(|r| loss.row_loss(r, y.row(r), &mut scratch))
            .sum();
        Ok(total / batch.rows() as f64)
    };
    let mut flat = base.clone();
    let (mut diff_sq, mut fd_sq, mut an_sq, mut worst) = (0.0, 0.0, 0.0, 0.0f64);
    for i in 0..base.len() {
        flat[i] = base[i] + h;
        let up = loss_at(&flat)?;
        flat[i] = base[i] - h;
        let down = loss_at(&flat)?;
        flat[i] = base[i];
        let fd = (up - down) / (2.0 * h);
        let d = (fd - analytic[i]).abs();
        diff_sq += d * d;
        fd_sq += fd * fd;
        an_sq += analytic[i] * analytic[i];
        if d >= 1e-8 {
            worst = worst.max(d / fd.abs().max(analytic[i].abs()));
        }
    }
    let scale = fd_sq.sqrt().max(an_sq.sqrt());
    Ok(GradientCheck {
        params: base.len(),
        relative: if scale > 0.0 { diff_sq.sqrt() / scale } else { 0.0 },
        worst_entry: worst,
    })
}
