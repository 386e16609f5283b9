//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Costs are tracked per integer Rényi order, composed additively over
//! steps and converted to an `(ε, δ)` guarantee at the end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The integer orders `2..=256`.
pub fn default_orders() -> Vec<u32> {
    (2..=256).collect()
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Rényi cost of one subsampled Gaussian step at integer order `alpha`.
///
/// Evaluates `ln Σ_i C(α,i)(1−q)^{α−i} q^i exp((i²−i)/(2σ²))` in the log
/// domain and divides by `α − 1`.
pub fn rdp_single_step(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("sampling ratio must lie in (0, 1], got {q}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "noise multiplier must be positive, got {sigma}"
        )));
    }
    if alpha < 2 {
        return Err(Error::invalid(format!("order must be an integer >= 2, got {alpha}")));
    }
    let a = alpha as f64;
    if q == 1.0 {
        return Ok(a / (2.0 * sigma * sigma));
    }
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let terms: Vec<f64> = (0..=alpha)
        .map(|i| {
            let i_f = i as f64;
            ln_binomial(alpha, i) + i_f * lq + (a - i_f) * l1q + (i_f * i_f - i_f) / (2.0 * sigma * sigma)
        })
        .collect();
    Ok((log_sum_exp(&terms) / (a - 1.0)).max(0.0))
}

/// Sampling ratio, noise multiplier and step count of a training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgmParams {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
}

/// Rényi costs on a grid of orders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<u32>,
    pub costs: Vec<f64>,
}

impl RdpCurve {
    /// Single-step curve of the subsampled Gaussian mechanism.
    pub fn subsampled_gaussian(q: f64, sigma: f64, orders: &[u32]) -> Result<Self> {
        let costs = orders
            .iter()
            .map(|&a| rdp_single_step(q, sigma, a))
            .collect::<Result<_>>()?;
        Ok(Self {
            orders: orders.to_vec(),
            costs,
        })
    }

    /// `K`-fold composition: every cost multiplied by `steps`.
    pub fn compose(&self, steps: u64) -> RdpCurve {
        RdpCurve {
            orders: self.orders.clone(),
            costs: self.costs.iter().map(|c| c * steps as f64).collect(),
        }
    }
}

/// Composes a curve over `steps` steps.
pub fn compose(curve: &RdpCurve, steps: u64) -> RdpCurve {
    curve.compose(steps)
}

/// How a Rényi guarantee is turned into `(ε, δ)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conversion {
    /// `ε = γ + ln(1/δ)/(α−1)`.
    Classic,
    /// `ε = γ + ln(1 − 1/α) − (ln δ + ln α)/(α−1)`, never larger than
    /// `Classic` for `α ≥ 2`.
    #[default]
    Improved,
}

impl Conversion {
    pub fn epsilon(self, gamma: f64, alpha: f64, delta: f64) -> f64 {
        match self {
            Conversion::Classic => gamma + (1.0 / delta).ln() / (alpha - 1.0),
            Conversion::Improved => gamma + (1.0 - 1.0 / alpha).ln() - (delta.ln() + alpha.ln()) / (alpha - 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Conversion::Classic => "classic",
            Conversion::Improved => "improved",
        }
    }
}

/// An `(ε, δ)` guarantee and the order that attains it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
    pub order: u32,
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// Smallest `ε` over the grid.
pub fn to_dp(curve: &RdpCurve, delta: f64, conversion: Conversion) -> Result<PrivacyParams> {
    check_delta(delta)?;
    if curve.orders.is_empty() {
        return Err(Error::Empty("order grid".into()));
    }
    let mut best = PrivacyParams {
        epsilon: f64::INFINITY,
        delta,
        order: curve.orders[0],
    };
    for (&a, &g) in curve.orders.iter().zip(&curve.costs) {
        let eps = conversion.epsilon(g, a as f64, delta).max(0.0);
        if eps < best.epsilon {
            best.epsilon = eps;
            best.order = a;
        }
    }
    Ok(best)
}

/// Accounting configuration shared by calibration and reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accountant {
    pub orders: Vec<u32>,
    pub conversion: Conversion,
    /// Relative slack below the target accepted by calibration.
    pub tolerance: f64,
}

impl Default for Accountant {
    fn default() -> Self {
        Self {
            orders: default_orders(),
            conversion: Conversion::Improved,
            tolerance: 1e-3,
        }
    }
}

/// Result of [`Accountant::calibrate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub sigma: f64,
    pub privacy: PrivacyParams,
}

const SIGMA_LO: f64 = 1e-2;
const SIGMA_HI: f64 = 1e4;

impl Accountant {
    /// `(ε, δ)` spent by `steps` steps at ratio `q` and multiplier `sigma`.
    pub fn epsilon(&self, q: f64, sigma: f64, steps: u64, delta: f64) -> Result<PrivacyParams> {
        let curve = RdpCurve::subsampled_gaussian(q, sigma, &self.orders)?;
        to_dp(&curve.compose(steps), delta, self.conversion)
    }

    /// Bisects (geometrically) for the noise multiplier whose `ε` lies in
    /// `[target·(1−tol), target]`.
    pub fn calibrate(&self, q: f64, steps: u64, target: f64, delta: f64) -> Result<Calibration> {
        if !(target > 0.0) || target.is_nan() {
            return Err(Error::invalid(format!("target epsilon must be positive, got {target}")));
        }
        check_delta(delta)?;
        if steps == 0 {
            return Err(Error::invalid("step count must be at least 1"));
        }
        let eps_at = |s: f64| self.epsilon(q, s, steps, delta);
        let (mut lo, mut hi) = (SIGMA_LO, SIGMA_HI);
        let e_lo = eps_at(lo)?;
        let e_hi = eps_at(hi)?;
        let unreachable = || Error::Unreachable {
            target,
            lo: SIGMA_LO,
            hi: SIGMA_HI,
            eps_lo: e_lo.epsilon,
            eps_hi: e_hi.epsilon,
        };
        if e_hi.epsilon > target {
            return Err(unreachable());
        }
        if e_lo.epsilon <= target {
            return Ok(Calibration {
                sigma: lo,
                privacy: e_lo,
            });
        }
        let mut best = Calibration {
            sigma: hi,
            privacy: e_hi,
        };
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            let e = eps_at(mid)?;
            if e.epsilon > target {
                lo = mid;
            } else {
                best = Calibration { sigma: mid, privacy: e };
                hi = mid;
                if e.epsilon >= target * (1.0 - self.tolerance) {
                    return Ok(best);
                }
            }
            if hi / lo - 1.0 < 1e-12 {
                break;
            }
        }
        Ok(best)
    }
}

/// Calibrates with the default grid, conversion and tolerance.
pub fn calibrate_sigma(q: f64, steps: u64, target: f64, delta: f64) -> Result<Calibration> {
    Accountant::default().calibrate(q, steps, target, delta)
}

/// Everything needed to audit one private training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub orders: Vec<u32>,
    pub conversion: Conversion,
    /// Spent `ε`; infinite when no noise is added.
    pub epsilon: f64,
    pub delta: f64,
    /// Order attaining `epsilon`, if any.
    pub order: Option<u32>,
}

impl PrivacyLedger {
    /// Chooses `σ` for `steps` steps at ratio `q` so that the run spends at
    /// most `target`. An infinite target disables noise.
    pub fn plan(accountant: &Accountant, q: f64, steps: u64, target: f64, delta: f64) -> Result<Self> {
        check_delta(delta)?;
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::invalid(format!("sampling ratio must lie in (0, 1], got {q}")));
        }
        let mut ledger = Self {
            q,
            sigma: 0.0,
            steps,
            orders: accountant.orders.clone(),
            conversion: accountant.conversion,
            epsilon: 0.0,
            delta,
            order: None,
        };
        if target.is_infinite() && target > 0.0 {
            ledger.epsilon = if steps == 0 { 0.0 } else { f64::INFINITY };
            return Ok(ledger);
        }
        if steps == 0 {
            return Ok(ledger);
        }
        let cal = accountant.calibrate(q, steps, target, delta)?;
        ledger.sigma = cal.sigma;
        ledger.epsilon = cal.privacy.epsilon;
        ledger.order = Some(cal.privacy.order);
        Ok(ledger)
    }

    /// Ledger of a run with a fixed multiplier `sigma`.
    pub fn fixed(accountant: &Accountant, q: f64, steps: u64, sigma: f64, delta: f64) -> Result<Self> {
        check_delta(delta)?;
        let mut ledger = Self {
            q,
            sigma,
            steps,
            orders: accountant.orders.clone(),
            conversion: accountant.conversion,
            epsilon: 0.0,
            delta,
            order: None,
        };
        if steps > 0 {
            if sigma > 0.0 {
                let p = accountant.epsilon(q, sigma, steps, delta)?;
                ledger.epsilon = p.epsilon;
                ledger.order = Some(p.order);
            } else {
                ledger.epsilon = f64::INFINITY;
            }
        }
        Ok(ledger)
    }

    pub fn is_private(&self) -> bool {
        self.epsilon.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_matches_gaussian_closed_form() {
        assert!((rdp_single_step(1.0, 1.0, 2).unwrap() - 1.0).abs() < 1e-12);
        assert!((rdp_single_step(1.0, 2.0, 8).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vanishing_ratio_costs_nothing() {
        let g = rdp_single_step(1e-12, 1.0, 8).unwrap();
        assert!(g < 1e-10, "{g}");
    }

    #[test]
    fn invalid_arguments_rejected() {
        assert!(rdp_single_step(0.1, 0.0, 2).is_err());
        assert!(rdp_single_step(0.0, 1.0, 2).is_err());
        assert!(rdp_single_step(0.1, 1.0, 1).is_err());
        let curve = RdpCurve {
            orders: vec![],
            costs: vec![],
        };
        assert!(to_dp(&curve, 1e-5, Conversion::Classic).is_err());
        assert!(calibrate_sigma(0.01, 100, 1.0, 0.0).is_err());
    }

    #[test]
    fn single_order_classic_conversion() {
        let curve = RdpCurve {
            orders: vec![2],
            costs: vec![1.0],
        };
        let p = to_dp(&curve, (-1.0f64).exp(), Conversion::Classic).unwrap();
        assert!((p.epsilon - 2.0).abs() < 1e-12);
        assert_eq!(p.order, 2);
    }

    #[test]
    fn zero_cost_epsilon_shrinks_with_largest_order() {
        let orders: Vec<u32> = (2..=4096).collect();
        let curve = RdpCurve {
            costs: vec![0.0; orders.len()],
            orders,
        };
        let p = to_dp(&curve, 1e-6, Conversion::Classic).unwrap();
        assert_eq!(p.order, 4096);
        assert!((p.epsilon - (1e6f64).ln() / 4095.0).abs() < 1e-12);
    }

    #[test]
    fn composition_is_linear() {
        let c = RdpCurve::subsampled_gaussian(0.05, 1.3, &[2, 5, 17]).unwrap();
        assert_eq!(c.compose(1), c);
        let d = c.compose(2);
        for (a, b) in c.costs.iter().zip(&d.costs) {
            assert_eq!(2.0 * a, *b);
        }
    }
}
