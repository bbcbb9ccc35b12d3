//! Matrix-free curvature probes of the loss surface in parameter space.
//!
//! Everything here works against the [`LossSurface`] trait — a value and a
//! gradient — so the same code serves the real network loss, quadratic
//! surrogates in tests, and explicit matrices. Hessian-vector products are
//! central finite differences of two gradients; on top of them sit the power
//! method, the Taylor-expansion bound pair, an exact dense Hessian for tiny
//! models (the test oracle), and exact/stochastic trace estimators. The
//! per-sample batch scorer amortizes the expensive pieces across a sub-batch
//! by sharing its mean gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::network::{self, dot, l2_norm, NetworkSpec, ParamVector};
use crate::{Error, Result};

/// Largest parameter count for which dense operations (exact Hessian, exact
/// trace) are allowed.
pub const PARAM_GUARD: usize = 500;

/// Gradient norms below this are treated as a stationary point.
const ZERO_GRAD_FLOOR: f64 = 1e-12;
/// Absolute floor for the Taylor probe offset.
const ALPHA_FLOOR: f64 = 1e-8;

/// Settings for every curvature estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Taylor probe offset as a fraction of the gradient norm.
    pub alpha_fraction: f64,
    /// Power-method iteration cap.
    pub power_iters: usize,
    /// Relative change in the Rayleigh quotient that counts as converged.
    pub power_tol: f64,
    /// Base step for finite-difference Hessian-vector products; scaled by
    /// `1 + |theta|`.
    pub fd_step: f64,
    /// Sub-batch size for the amortized per-sample scorer.
    pub hessian_subbatch: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            alpha_fraction: 0.01,
            power_iters: 100,
            power_tol: 1e-6,
            fd_step: 1e-5,
            hessian_subbatch: 32,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_fraction > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha_fraction must be > 0, got {}",
                self.alpha_fraction
            )));
        }
        if self.power_iters < 1 {
            return Err(Error::InvalidConfig("power_iters must be >= 1".into()));
        }
        if !(self.power_tol > 0.0) {
            return Err(Error::InvalidConfig(format!("power_tol must be > 0, got {}", self.power_tol)));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidConfig(format!("fd_step must be > 0, got {}", self.fd_step)));
        }
        if self.hessian_subbatch < 1 {
            return Err(Error::InvalidConfig("hessian_subbatch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Result bundle for the spectral estimators. Fields not produced by a given
/// estimator are `NaN`.
#[derive(Debug, Clone)]
pub struct HessianEstimate {
    /// |dominant eigenvalue| from the power method.
    pub power_value: f64,
    /// Second-order Taylor-probe lower bound on the top eigenvalue.
    pub lower: f64,
    /// Second-order Taylor-probe upper bound.
    pub upper: f64,
    /// Curvature along the gradient, `(2/alpha^2)`-scaled; the default
    /// per-sample difficulty score.
    pub rayleigh: f64,
    /// Gradient norm at the evaluation point.
    pub grad_norm: f64,
    /// Power iterations actually executed.
    pub iterations: usize,
    /// Whether the power method met its tolerance before the cap.
    pub converged: bool,
    /// Set when the gradient vanished and the Taylor scores were defined
    /// as 0.
    pub zero_gradient: bool,
}

impl HessianEstimate {
    fn empty() -> Self {
        Self {
            power_value: f64::NAN,
            lower: f64::NAN,
            upper: f64::NAN,
            rayleigh: f64::NAN,
            grad_norm: f64::NAN,
            iterations: 0,
            converged: false,
            zero_gradient: false,
        }
    }
}

/// A differentiable scalar objective over a flat parameter vector.
pub trait LossSurface {
    fn dim(&self) -> usize;
    fn loss(&self, theta: &[f64]) -> Result<f64>;
    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// Mean cross-entropy of a fixed batch as a function of the parameters.
pub struct NetworkLoss<'a> {
    pub spec: &'a NetworkSpec,
    pub inputs: &'a [f64],
    pub labels: &'a [usize],
}

impl LossSurface for NetworkLoss<'_> {
    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        let p = ParamVector::from_values(theta.to_vec());
        Ok(network::forward(&p, self.spec, self.inputs, self.labels)?.mean_loss())
    }

    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let p = ParamVector::from_values(theta.to_vec());
        Ok(network::grad_params(&p, self.spec, self.inputs, self.labels)?.values)
    }
}

/// Quadratic surrogate `loss(theta) = theta' A theta / 2` with the general
/// gradient `(A + A') theta / 2`; its Hessian is the symmetrized matrix.
/// Used as an analytic oracle throughout the tests.
pub struct QuadraticSurface {
    pub n: usize,
    /// Row-major `n x n`.
    pub matrix: Vec<f64>,
}

impl QuadraticSurface {
    pub fn new(n: usize, matrix: Vec<f64>) -> Self {
        assert_eq!(matrix.len(), n * n, "matrix shape");
        Self { n, matrix }
    }

    fn sym_apply(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += 0.5 * (self.matrix[i * n + j] + self.matrix[j * n + i]) * theta[j];
            }
            out[i] = s;
        }
        out
    }
}

impl LossSurface for QuadraticSurface {
    fn dim(&self) -> usize {
        self.n
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        let n = self.n;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += theta[i] * self.matrix[i * n + j] * theta[j];
            }
        }
        Ok(0.5 * s)
    }

    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.sym_apply(theta))
    }
}

/// Hessian-vector product by central finite differences of the gradient:
/// `(grad(theta + s vhat) - grad(theta - s vhat)) / (2 s) * |v|` with
/// `s = fd_step * (1 + |theta|)`.
pub fn hvp_surface(
    surface: &dyn LossSurface,
    theta: &[f64],
    v: &[f64],
    cfg: &ProbeConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if theta.len() != surface.dim() || v.len() != surface.dim() {
        return Err(Error::ShapeMismatch(format!(
            "hvp on dim {} with theta {} and v {}",
            surface.dim(),
            theta.len(),
            v.len()
        )));
    }
    let vn = l2_norm(v);
    if vn == 0.0 {
        return Err(Error::Numerical("hvp direction is the zero vector".into()));
    }
    let s = cfg.fd_step * (1.0 + l2_norm(theta));
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    for i in 0..theta.len() {
        let dv = s * v[i] / vn;
        plus[i] += dv;
        minus[i] -= dv;
    }
    let gp = surface.grad(&plus)?;
    let gm = surface.grad(&minus)?;
    let scale = vn / (2.0 * s);
    let out: Vec<f64> = gp
        .iter()
        .zip(&gm)
        .map(|(&a, &b)| (a - b) * scale)
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite Hessian-vector product".into()));
    }
    Ok(out)
}

/// Power iteration for the dominant eigenvalue magnitude. Starts from a
/// normalized Gaussian vector, stops when the Rayleigh quotient's relative
/// change is within `power_tol`, and reports the quotient at the final
/// vector. Hitting the cap is not fatal: the best magnitude seen is returned
/// with `converged = false`.
pub fn power_method_surface(
    surface: &dyn LossSurface,
    theta: &[f64],
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<HessianEstimate> {
    cfg.validate()?;
    let n = surface.dim();
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let vn = l2_norm(&v);
    if vn == 0.0 {
        return Err(Error::Numerical("degenerate power-method start vector".into()));
    }
    for x in v.iter_mut() {
        *x /= vn;
    }

    let mut est = HessianEstimate::empty();
    let mut lam_prev: Option<f64> = None;
    let mut best_abs = 0.0f64;
    let mut lam = 0.0f64;
    for i in 1..=cfg.power_iters {
        let w = hvp_surface(surface, theta, &v, cfg)?;
        lam = dot(&v, &w);
        est.iterations = i;
        best_abs = best_abs.max(lam.abs());
        let wn = l2_norm(&w);
        if wn < 1e-300 {
            // v is (numerically) in the kernel; the quotient is exact.
            est.converged = true;
            break;
        }
        if let Some(lp) = lam_prev {
            if (lam - lp).abs() <= cfg.power_tol * lam.abs() {
                est.converged = true;
                break;
            }
        }
        lam_prev = Some(lam);
        for (x, &wi) in v.iter_mut().zip(&w) {
            *x = wi / wn;
        }
    }
    est.power_value = if est.converged { lam.abs() } else { best_abs };
    Ok(est)
}

/// Shared Rayleigh arithmetic so the batched scorer and the single-surface
/// estimator agree bit-for-bit.
fn rayleigh_from(l0: f64, l_plus: f64, l_minus: f64, alpha: f64, grad_norm: f64) -> f64 {
    (2.0 / (alpha * alpha))
        * (l_plus - l0 - alpha * grad_norm).max(l_minus - l0 + alpha * grad_norm)
}

/// Taylor-expansion estimates along the normalized gradient `g` with offset
/// `alpha = alpha_fraction * |grad|` (floored at 1e-8):
///
/// * `lower = (1/alpha) * max(loss(theta + alpha g) - alpha |grad|,
///   loss(theta - alpha g) + alpha |grad|) - loss(theta)`
/// * `upper = (1/alpha) * (loss(theta + alpha g) + alpha |grad|) - loss(theta)`
/// * `rayleigh` — the `(2/alpha^2)`-scaled curvature that is exact on
///   quadratics and serves as the default difficulty score.
///
/// A vanishing gradient defines all three as 0 and sets the flag.
pub fn taylor_surface(
    surface: &dyn LossSurface,
    theta: &[f64],
    cfg: &ProbeConfig,
) -> Result<HessianEstimate> {
    cfg.validate()?;
    let grad = surface.grad(theta)?;
    let gn = l2_norm(&grad);
    let mut est = HessianEstimate::empty();
    est.grad_norm = gn;
    if gn < ZERO_GRAD_FLOOR {
        est.lower = 0.0;
        est.upper = 0.0;
        est.rayleigh = 0.0;
        est.zero_gradient = true;
        return Ok(est);
    }
    let alpha = (cfg.alpha_fraction * gn).max(ALPHA_FLOOR);
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    for i in 0..theta.len() {
        let dv = alpha * grad[i] / gn;
        plus[i] += dv;
        minus[i] -= dv;
    }
    let l0 = surface.loss(theta)?;
    let lp = surface.loss(&plus)?;
    let lm = surface.loss(&minus)?;
    est.lower = (1.0 / alpha) * (lp - alpha * gn).max(lm + alpha * gn) - l0;
    est.upper = (1.0 / alpha) * (lp + alpha * gn) - l0;
    est.rayleigh = rayleigh_from(l0, lp, lm, alpha, gn);
    if !(est.lower.is_finite() && est.upper.is_finite() && est.rayleigh.is_finite()) {
        return Err(Error::Numerical("non-finite Taylor estimate".into()));
    }
    Ok(est)
}

/// Dense Hessian assembled column-by-column from coordinate HVPs, then
/// symmetrized; the raw asymmetry is reported for self-checks. Guarded to
/// tiny models.
#[derive(Debug, Clone)]
pub struct ExactHessian {
    pub n: usize,
    /// Row-major symmetrized matrix `(H + H') / 2`.
    pub matrix: Vec<f64>,
    /// `max |H - H'|` of the raw finite-difference estimate.
    pub asymmetry: f64,
}

impl ExactHessian {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = dot(&self.matrix[i * n..(i + 1) * n], v);
        }
        out
    }
}

pub fn exact_hessian_surface(
    surface: &dyn LossSurface,
    theta: &[f64],
    cfg: &ProbeConfig,
) -> Result<ExactHessian> {
    let n = surface.dim();
    if n > PARAM_GUARD {
        return Err(Error::GuardExceeded { count: n, guard: PARAM_GUARD });
    }
    let mut raw = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = hvp_surface(surface, theta, &e, cfg)?;
        e[j] = 0.0;
        for i in 0..n {
            raw[i * n + j] = col[i];
        }
    }
    let mut asym = 0.0f64;
    let mut matrix = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            asym = asym.max((raw[i * n + j] - raw[j * n + i]).abs());
            matrix[i * n + j] = 0.5 * (raw[i * n + j] + raw[j * n + i]);
        }
    }
    Ok(ExactHessian { n, matrix, asymmetry: asym })
}

/// Trace estimation mode: exact coordinate sweep (guarded) or Hutchinson's
/// Rademacher-probe estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    Exact,
    Hutchinson { probes: usize },
}

pub fn trace_surface(
    surface: &dyn LossSurface,
    theta: &[f64],
    mode: TraceMode,
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = surface.dim();
    match mode {
        TraceMode::Exact => {
            if n > PARAM_GUARD {
                return Err(Error::GuardExceeded { count: n, guard: PARAM_GUARD });
            }
            let mut t = 0.0;
            let mut e = vec![0.0; n];
            for j in 0..n {
                e[j] = 1.0;
                t += hvp_surface(surface, theta, &e, cfg)?[j];
                e[j] = 0.0;
            }
            Ok(t)
        }
        TraceMode::Hutchinson { probes } => {
            if probes < 1 {
                return Err(Error::InvalidConfig("hutchinson needs at least one probe".into()));
            }
            let mut acc = 0.0;
            let mut z = vec![0.0; n];
            for _ in 0..probes {
                for x in z.iter_mut() {
                    *x = if rng.random::<bool>() { 1.0 } else { -1.0 };
                }
                let hz = hvp_surface(surface, theta, &z, cfg)?;
                acc += dot(&z, &hz);
            }
            Ok(acc / probes as f64)
        }
    }
}

// Network-batch entry points: the same estimators on the mean cross-entropy
// of a fixed (adversarial) batch.

pub fn hvp(
    params: &ParamVector,
    spec: &NetworkSpec,
    inputs: &[f64],
    labels: &[usize],
    v: &ParamVector,
    cfg: &ProbeConfig,
) -> Result<ParamVector> {
    let s = NetworkLoss { spec, inputs, labels };
    Ok(ParamVector::from_values(hvp_surface(&s, &params.values, &v.values, cfg)?))
}

pub fn top_eigenvalue(
    params: &ParamVector,
    spec: &NetworkSpec,
    inputs: &[f64],
    labels: &[usize],
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<HessianEstimate> {
    let s = NetworkLoss { spec, inputs, labels };
    power_method_surface(&s, &params.values, cfg, rng)
}

pub fn taylor_estimates(
    params: &ParamVector,
    spec: &NetworkSpec,
    inputs: &[f64],
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<HessianEstimate> {
    let s = NetworkLoss { spec, inputs, labels };
    taylor_surface(&s, &params.values, cfg)
}

pub fn exact_hessian(
    params: &ParamVector,
    spec: &NetworkSpec,
    inputs: &[f64],
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ExactHessian> {
    let s = NetworkLoss { spec, inputs, labels };
    exact_hessian_surface(&s, &params.values, cfg)
}

pub fn trace(
    params: &ParamVector,
    spec: &NetworkSpec,
    inputs: &[f64],
    labels: &[usize],
    mode: TraceMode,
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let s = NetworkLoss { spec, inputs, labels };
    trace_surface(&s, &params.values, mode, cfg, rng)
}

/// Per-sample curvature scores for a (typically adversarial) batch.
///
/// The batch is cut into sub-batches of `hessian_subbatch`; within one
/// sub-batch every sample shares the sub-batch mean gradient for its probe
/// direction and offset, so the whole sub-batch costs one backward plus three
/// forward passes. Each sample's own losses at `theta` and `theta ± alpha g`
/// feed the Rayleigh score. At `hessian_subbatch = 1` this reproduces
/// [`taylor_estimates`]'s `rayleigh` per sample exactly.
pub fn hessian_score_batch(
    params: &ParamVector,
    spec: &NetworkSpec,
    adv_inputs: &[f64],
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let d = spec.input_dim();
    if labels.is_empty() || adv_inputs.len() != labels.len() * d {
        return Err(Error::ShapeMismatch("inconsistent score batch".into()));
    }
    let b = labels.len();
    let mut scores = Vec::with_capacity(b);
    for start in (0..b).step_by(cfg.hessian_subbatch) {
        let end = (start + cfg.hessian_subbatch).min(b);
        let xs = &adv_inputs[start * d..end * d];
        let ys = &labels[start..end];
        let gbar = network::grad_params(params, spec, xs, ys)?;
        let gn = gbar.norm();
        if gn < ZERO_GRAD_FLOOR {
            scores.extend(std::iter::repeat(0.0).take(end - start));
            continue;
        }
        let alpha = (cfg.alpha_fraction * gn).max(ALPHA_FLOOR);
        let mut plus = params.clone();
        let mut minus = params.clone();
        for i in 0..params.len() {
            let dv = alpha * gbar.values[i] / gn;
            plus.values[i] += dv;
            minus.values[i] -= dv;
        }
        let l0 = network::forward(params, spec, xs, ys)?.losses;
        let lp = network::forward(&plus, spec, xs, ys)?.losses;
        let lm = network::forward(&minus, spec, xs, ys)?.losses;
        for i in 0..(end - start) {
            scores.push(rayleigh_from(l0[i], lp[i], lm[i], alpha, gn));
        }
    }
    Ok(scores)
}
