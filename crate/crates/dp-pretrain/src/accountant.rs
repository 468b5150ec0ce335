//! Renyi differential privacy accounting for subsampled Gaussian mechanisms,
//! with composition over batch-size schedules, conversion to (epsilon, delta)
//! guarantees, and noise-multiplier calibration.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Largest Renyi order the divergence routine accepts; keeps the term loop
/// bounded and (k^2 - k) comfortably inside u64.
pub const MAX_ORDER: u64 = 1_000_000;

/// The standard order grid: every integer order from 2 through 256.
pub fn default_orders() -> Vec<u64> {
    (2..=256).collect()
}

fn validate_orders(orders: &[u64]) -> Result<()> {
    if orders.is_empty() {
        return Err(Error::parameter("order list must be non-empty"));
    }
    for pair in orders.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::parameter(format!(
                "orders must be strictly increasing, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if orders[0] < 2 {
        return Err(Error::parameter(format!("orders must be >= 2, got {}", orders[0])));
    }
    Ok(())
}

fn validate_rate(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::parameter(format!("sampling rate must be in [0, 1], got {q}")));
    }
    Ok(())
}

fn validate_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::parameter(format!("noise multiplier must be positive, got {sigma}")));
    }
    Ok(())
}

fn validate_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::parameter(format!("delta must be in (0, 1), got {delta}")));
    }
    Ok(())
}

/// Renyi divergence at integer order `alpha` of one step of the Poisson
/// subsampled Gaussian mechanism with sampling rate `q` and noise multiplier
/// `sigma`:
///
///   eps(alpha) = log( sum_{k=0..alpha} C(alpha,k) (1-q)^(alpha-k) q^k
///                     exp((k^2 - k) / (2 sigma^2)) ) / (alpha - 1)
///
/// evaluated in log space so large orders and small noise do not overflow.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u64) -> Result<f64> {
    validate_rate(q)?;
    validate_sigma(sigma)?;
    if !(2..=MAX_ORDER).contains(&alpha) {
        return Err(Error::parameter(format!("order must be in [2, {MAX_ORDER}], got {alpha}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    if q == 1.0 {
        // no subsampling: the plain Gaussian mechanism
        return Ok(alpha as f64 * inv2s2);
    }
    if alpha == 2 && 2.0 * inv2s2 <= 700.0 {
        // closed form: the binomial sum collapses to 1 + q^2 (e^{1/sigma^2} - 1)
        return Ok((q * q * (2.0 * inv2s2).exp_m1()).ln_1p());
    }
    let ln_q = q.ln();
    let ln_1q = (-q).ln_1p();
    let mut terms = Vec::with_capacity(alpha as usize + 1);
    let mut ln_c = 0.0; // ln C(alpha, k), updated incrementally
    let mut max_t = f64::NEG_INFINITY;
    for k in 0..=alpha {
        if k > 0 {
            ln_c += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        let t = ln_c
            + (alpha - k) as f64 * ln_1q
            + k as f64 * ln_q
            + (k * k - k) as f64 * inv2s2;
        if t > max_t {
            max_t = t;
        }
        terms.push(t);
    }
    let sum: f64 = terms.iter().map(|t| (t - max_t).exp()).sum();
    let eps = (max_t + sum.ln()) / (alpha - 1) as f64;
    // the divergence is nonnegative; underflow of the q^k terms can round a
    // vanishing result slightly negative
    Ok(eps.max(0.0))
}

/// Accumulated Renyi divergence at each tracked order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<u64>,
    values: Vec<f64>,
}

impl RdpCurve {
    pub fn zero(orders: &[u64]) -> Result<Self> {
        validate_orders(orders)?;
        Ok(RdpCurve { orders: orders.to_vec(), values: vec![0.0; orders.len()] })
    }

    /// Curve of a single mechanism invocation.
    pub fn subsampled_gaussian(q: f64, sigma: f64, orders: &[u64]) -> Result<Self> {
        validate_orders(orders)?;
        let values = orders
            .iter()
            .map(|&a| rdp_subsampled_gaussian(q, sigma, a))
            .collect::<Result<Vec<f64>>>()?;
        Ok(RdpCurve { orders: orders.to_vec(), values })
    }

    pub fn orders(&self) -> &[u64] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at(&self, order: u64) -> Option<f64> {
        self.orders.iter().position(|&a| a == order).map(|i| self.values[i])
    }

    /// Add `steps` repetitions of `other` to this curve (adaptive sequential
    /// composition adds divergences order by order).
    pub fn accumulate(&mut self, other: &RdpCurve, steps: u64) -> Result<()> {
        if self.orders != other.orders {
            return Err(Error::contract("composing curves over different order grids"));
        }
        let s = steps as f64;
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v += s * o;
        }
        Ok(())
    }
}

/// A run of training steps sharing one sampling rate and noise multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSegment {
    pub steps: u64,
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
}

/// Compose the segments of a schedule into one divergence curve.
pub fn compose_schedule(segments: &[ScheduleSegment], orders: &[u64]) -> Result<RdpCurve> {
    let mut total = RdpCurve::zero(orders)?;
    for seg in segments {
        let one = RdpCurve::subsampled_gaussian(seg.sampling_rate, seg.noise_multiplier, orders)?;
        total.accumulate(&one, seg.steps)?;
    }
    Ok(total)
}

/// Convert an accumulated curve to the tightest (epsilon, delta) guarantee on
/// the order grid: epsilon = min over alpha of rdp(alpha) + ln(1/delta)/(alpha-1).
/// Returns the guarantee and the order that achieved it.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<(f64, u64)> {
    validate_delta(delta)?;
    let ln_inv_delta = -delta.ln();
    let mut best = f64::INFINITY;
    let mut best_order = curve.orders[0];
    for (&alpha, &v) in curve.orders.iter().zip(&curve.values) {
        let candidate = v + ln_inv_delta / (alpha - 1) as f64;
        if candidate < best {
            best = candidate;
            best_order = alpha;
        }
    }
    Ok((best, best_order))
}

/// One segment's share of the total divergence at the reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpend {
    pub steps: u64,
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
    pub rdp_at_optimal_order: f64,
}

/// Full accounting result for a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub epsilon: f64,
    pub delta: f64,
    pub optimal_order: u64,
    /// False when the schedule was executed with fixed-size batches rather
    /// than Poisson sampling; the guarantee is then an approximation that
    /// treats batch-fraction rates as Poisson rates.
    pub poisson_sampling: bool,
    pub segments: Vec<SegmentSpend>,
}

/// Account a full schedule and report the guarantee with per-segment
/// divergence contributions at the optimal order.
pub fn account_schedule(
    segments: &[ScheduleSegment],
    delta: f64,
    orders: &[u64],
    poisson_sampling: bool,
) -> Result<PrivacyReport> {
    let curve = compose_schedule(segments, orders)?;
    let (epsilon, optimal_order) = rdp_to_dp(&curve, delta)?;
    let mut spends = Vec::with_capacity(segments.len());
    for seg in segments {
        let one = rdp_subsampled_gaussian(seg.sampling_rate, seg.noise_multiplier, optimal_order)?;
        spends.push(SegmentSpend {
            steps: seg.steps,
            sampling_rate: seg.sampling_rate,
            noise_multiplier: seg.noise_multiplier,
            rdp_at_optimal_order: seg.steps as f64 * one,
        });
    }
    Ok(PrivacyReport { epsilon, delta, optimal_order, poisson_sampling, segments: spends })
}

/// Bisection bracket for calibration.
pub const SIGMA_LO: f64 = 0.3;
pub const SIGMA_HI: f64 = 100.0;

/// Find the noise multiplier that makes the schedule spend exactly
/// `target_epsilon` at `delta`. The shape is given as (steps, sampling rate)
/// pairs; every segment shares the calibrated multiplier. Errors if the
/// target falls outside what multipliers in [SIGMA_LO, SIGMA_HI] can achieve.
pub fn calibrate_sigma(
    shape: &[(u64, f64)],
    target_epsilon: f64,
    delta: f64,
    orders: &[u64],
) -> Result<f64> {
    if !(target_epsilon > 0.0) || !target_epsilon.is_finite() {
        return Err(Error::parameter(format!(
            "target epsilon must be positive and finite, got {target_epsilon}"
        )));
    }
    validate_delta(delta)?;
    validate_orders(orders)?;
    if shape.iter().map(|&(s, _)| s).sum::<u64>() == 0 {
        return Err(Error::parameter("schedule has no steps to calibrate over"));
    }
    let eps_at = |sigma: f64| -> Result<f64> {
        let segments: Vec<ScheduleSegment> = shape
            .iter()
            .map(|&(steps, rate)| ScheduleSegment {
                steps,
                sampling_rate: rate,
                noise_multiplier: sigma,
            })
            .collect();
        let curve = compose_schedule(&segments, orders)?;
        Ok(rdp_to_dp(&curve, delta)?.0)
    };
    let mut lo = SIGMA_LO;
    let mut hi = SIGMA_HI;
    let eps_lo = eps_at(lo)?;
    if eps_lo < target_epsilon {
        return Err(Error::Calibration(format!(
            "target epsilon {target_epsilon} needs a noise multiplier below {SIGMA_LO} \
             (epsilon at the bracket floor is {eps_lo:.6})"
        )));
    }
    let eps_hi = eps_at(hi)?;
    if eps_hi > target_epsilon {
        return Err(Error::Calibration(format!(
            "target epsilon {target_epsilon} needs a noise multiplier above {SIGMA_HI} \
             (epsilon at the bracket ceiling is {eps_hi:.6})"
        )));
    }
    // epsilon is strictly decreasing in sigma; invariant eps(lo) >= target >= eps(hi)
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? >= target_epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-10 * lo {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Running privacy spend, updated one training step at a time. Repeated
/// steps with the same (rate, multiplier) reuse a cached per-step curve, so
/// per-step tracking costs one vector add.
#[derive(Debug, Clone)]
pub struct SpendTracker {
    delta: f64,
    total: RdpCurve,
    steps: u64,
    cached: Option<(f64, f64, RdpCurve)>,
}

impl SpendTracker {
    pub fn new(delta: f64, orders: &[u64]) -> Result<Self> {
        validate_delta(delta)?;
        Ok(SpendTracker { delta, total: RdpCurve::zero(orders)?, steps: 0, cached: None })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Record one executed step at the given sampling rate and multiplier.
    pub fn record_step(&mut self, q: f64, sigma: f64) -> Result<()> {
        let hit = matches!(&self.cached, Some((cq, cs, _)) if *cq == q && *cs == sigma);
        if !hit {
            let one = RdpCurve::subsampled_gaussian(q, sigma, self.total.orders())?;
            self.cached = Some((q, sigma, one));
        }
        let one = &self.cached.as_ref().unwrap().2;
        self.total.accumulate(one, 1)?;
        self.steps += 1;
        Ok(())
    }

    /// Current (epsilon, optimal order). Zero recorded steps means zero spend.
    pub fn epsilon(&self) -> Result<(f64, u64)> {
        if self.steps == 0 {
            return Ok((0.0, *self.total.orders().last().unwrap()));
        }
        rdp_to_dp(&self.total, self.delta)
    }
}
