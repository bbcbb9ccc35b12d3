//! Difficulty metrics, constraint thresholds, lambda schedules, and the
//! batch-fraction selector that drive curriculum-masked attacks.
//!
//! Two difficulty notions are supported. The probability gap compares the
//! largest rival softmax probability with the true-class probability, so it is
//! free at every attack iterate. The Hessian score ranks samples by estimated
//! curvature; the selector then keeps only the easiest fraction of each batch.
//! The lambda knob for the first is a threshold in [-1, 1]-gap space mapped to
//! [0, 1]; for the second it is the fraction itself.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{masked_pgd, AttackConfig, DifficultyMetric};
use crate::data::Batch;
use crate::hessian::ProbeConfig;
use crate::network::{forward, NetworkSpec, ParamVector};
use crate::{Error, Result};

/// Guard on the total number of grid points a brute-force sweep may touch.
const GRID_GUARD: usize = 20_000_000;

/// Softmax probability gap: `max_{j != y} probs[j] - probs[y]`, in `[-1, 1]`.
/// Near -1 the sample is confidently correct ("easy"); near +1 it is
/// confidently wrong ("hard").
pub fn prob_gap(probs: &[f64], label: usize) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::InvalidSpec("probability gap needs at least 2 classes".into()));
    }
    if label >= probs.len() {
        return Err(Error::LabelOutOfRange { label, classes: probs.len() });
    }
    let mut rival = f64::NEG_INFINITY;
    for (j, &p) in probs.iter().enumerate() {
        if j != label && p > rival {
            rival = p;
        }
    }
    Ok(rival - probs[label])
}

/// Loss threshold equivalent to the gap constraint at level `lambda`:
/// `-ln(max_{j != y} probs[j] - lambda)`, or `+inf` when the largest rival
/// probability is already at most `lambda` (constraint automatically
/// satisfied). `probs` must be a valid distribution with `label` in range.
pub fn gamma(probs: &[f64], label: usize, lambda: f64) -> f64 {
    debug_assert!(label < probs.len());
    let mut rival = f64::NEG_INFINITY;
    for (j, &p) in probs.iter().enumerate() {
        if j != label && p > rival {
            rival = p;
        }
    }
    if rival <= lambda {
        f64::INFINITY
    } else {
        -(rival - lambda).ln()
    }
}

/// Binary-classifier closed form of the threshold: `-ln((1 - lambda) / 2)`.
/// Depends on lambda alone; `+inf` at lambda = 1.
pub fn gamma_binary(lambda: f64) -> f64 {
    -((1.0 - lambda) / 2.0).ln()
}

/// Lambda as a function of the epoch counter.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Constant { value: f64 },
    /// Piecewise-constant; `knots` are (epoch, value) with the first knot at
    /// epoch 0.
    Step { knots: Vec<(usize, f64)> },
    /// Linear ramp between two epochs, clamped outside.
    Linear { start_epoch: usize, start_value: f64, end_epoch: usize, end_value: f64 },
}

/// Which difficulty rule a training run uses; `None` is the plain-PGD
/// adversarial-training baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    None,
    ProbGap,
    HessianScore,
}

impl Schedule {
    /// All values the schedule can emit (used for range validation).
    fn attainable(&self) -> Vec<f64> {
        match self {
            Schedule::Constant { value } => vec![*value],
            Schedule::Step { knots } => knots.iter().map(|&(_, v)| v).collect(),
            Schedule::Linear { start_value, end_value, .. } => vec![*start_value, *end_value],
        }
    }

    fn max_value(&self) -> f64 {
        self.attainable().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    /// First epoch at which the maximum value is attained.
    pub fn earliest_max_epoch(&self) -> usize {
        match self {
            Schedule::Constant { .. } => 0,
            Schedule::Step { knots } => {
                let m = self.max_value();
                knots.iter().find(|&&(_, v)| v == m).map_or(0, |&(e, _)| e)
            }
            Schedule::Linear { start_epoch, start_value, end_epoch, end_value } => {
                if end_value > start_value {
                    *end_epoch
                } else {
                    *start_epoch
                }
            }
        }
    }

    /// Structural checks plus the metric-specific value range: gap thresholds
    /// live in [0, 1], batch fractions in (0, 1]. The maximum must be reached
    /// strictly before the final epoch so every run ends with some full-
    /// strength training.
    pub fn validate(&self, metric: MetricKind, epochs: usize) -> Result<()> {
        match self {
            Schedule::Constant { .. } => {}
            Schedule::Step { knots } => {
                if knots.is_empty() {
                    return Err(Error::InvalidConfig("step schedule needs at least one knot".into()));
                }
                if knots[0].0 != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "step schedule must start at epoch 0, got {}",
                        knots[0].0
                    )));
                }
                for w in knots.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return Err(Error::InvalidConfig("step knots must have increasing epochs".into()));
                    }
                    if w[1].1 < w[0].1 {
                        return Err(Error::InvalidConfig("step knot values must be non-decreasing".into()));
                    }
                }
            }
            Schedule::Linear { start_epoch, start_value, end_epoch, end_value } => {
                if start_epoch >= end_epoch {
                    return Err(Error::InvalidConfig(format!(
                        "linear schedule needs start_epoch < end_epoch, got {start_epoch}..{end_epoch}"
                    )));
                }
                if start_value > end_value {
                    return Err(Error::InvalidConfig("linear schedule must be non-decreasing".into()));
                }
            }
        }
        for v in self.attainable() {
            let ok = match metric {
                MetricKind::HessianScore => v > 0.0 && v <= 1.0,
                _ => (0.0..=1.0).contains(&v),
            };
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "schedule value {v} outside the valid range for {metric:?}"
                )));
            }
        }
        if self.earliest_max_epoch() + 1 >= epochs {
            return Err(Error::InvalidConfig(format!(
                "schedule reaches its maximum at epoch {} which is not strictly before the final epoch of a {epochs}-epoch run",
                self.earliest_max_epoch()
            )));
        }
        Ok(())
    }
}

/// Evaluates the schedule at an epoch (piecewise-constant for steps,
/// clamped interpolation for ramps).
pub fn schedule_value(schedule: &Schedule, epoch: usize) -> f64 {
    match schedule {
        Schedule::Constant { value } => *value,
        Schedule::Step { knots } => {
            let mut v = knots.first().map_or(0.0, |&(_, v)| v);
            for &(e, kv) in knots {
                if e <= epoch {
                    v = kv;
                } else {
                    break;
                }
            }
            v
        }
        Schedule::Linear { start_epoch, start_value, end_epoch, end_value } => {
            if epoch <= *start_epoch {
                *start_value
            } else if epoch >= *end_epoch {
                *end_value
            } else {
                let t = (epoch - start_epoch) as f64 / (end_epoch - start_epoch) as f64;
                start_value + (end_value - start_value) * t
            }
        }
    }
}

/// Full curriculum description carried by a training run.
#[derive(Debug, Clone)]
pub struct CurriculumConfig {
    pub metric: MetricKind,
    pub schedule: Schedule,
    /// Curvature probe settings, used when `metric` is `HessianScore`.
    pub probe: ProbeConfig,
    /// Recompute Hessian scores every this many attack steps.
    pub hessian_recompute_every: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            metric: MetricKind::None,
            schedule: Schedule::Constant { value: 1.0 },
            probe: ProbeConfig::default(),
            hessian_recompute_every: 1,
        }
    }
}

impl CurriculumConfig {
    /// With `metric = None` the schedule is ignored entirely.
    pub fn validate(&self, epochs: usize) -> Result<()> {
        if self.metric == MetricKind::None {
            return Ok(());
        }
        self.schedule.validate(self.metric, epochs)?;
        if self.metric == MetricKind::HessianScore {
            self.probe.validate()?;
            if self.hessian_recompute_every < 1 {
                return Err(Error::InvalidConfig("hessian_recompute_every must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// The attack-side mask rule, or `None` for the plain-PGD baseline.
    pub fn difficulty_metric(&self) -> Option<DifficultyMetric> {
        match self.metric {
            MetricKind::None => None,
            MetricKind::ProbGap => Some(DifficultyMetric::ProbGap),
            MetricKind::HessianScore => Some(DifficultyMetric::HessianScore {
                probe: self.probe.clone(),
                recompute_every: self.hessian_recompute_every,
            }),
        }
    }
}

/// Marks the `ceil(lambda * B)` samples with the smallest scores for
/// perturbation; ties break toward the lower index. `lambda = 0` selects
/// nothing, `lambda = 1` everything.
pub fn select_fraction(scores: &[f64], lambda: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("fraction lambda must be in [0,1], got {lambda}")));
    }
    let b = scores.len();
    let k = ((lambda * b as f64).ceil() as usize).min(b);
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    let mut mask = vec![false; b];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    Ok(mask)
}

fn check_binary_instance(spec: &NetworkSpec, x: &[f64], lambda: f64) -> Result<()> {
    spec.validate()?;
    if spec.classes() != 2 {
        return Err(Error::InvalidSpec(format!(
            "binary curriculum loss needs 2 classes, got {}",
            spec.classes()
        )));
    }
    if x.len() != spec.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "single sample of dim {} for input dim {}",
            x.len(),
            spec.input_dim()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("lambda must be in [0,1], got {lambda}")));
    }
    Ok(())
}

/// Early-terminated PGD estimate of the binary constrained adversarial loss:
/// runs the gap-masked attack on one sample and returns
/// `min(final loss, gamma_binary(lambda))`. In the binary case the gap mask
/// and the loss threshold coincide exactly, so a frozen iterate certifies the
/// threshold value.
pub fn curriculum_loss_binary(
    params: &ParamVector,
    spec: &NetworkSpec,
    x: &[f64],
    label: usize,
    lambda: f64,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    check_binary_instance(spec, x, lambda)?;
    let batch = Batch {
        inputs: x.to_vec(),
        labels: vec![label],
        indices: vec![0],
        dim: x.len(),
    };
    let adv = masked_pgd(params, spec, &batch, cfg, &DifficultyMetric::ProbGap, lambda, rng)?;
    let loss = forward(params, spec, &adv.x_adv, &batch.labels)?.losses[0];
    Ok(loss.min(gamma_binary(lambda)))
}

/// Brute-force reference for the same quantity: sweeps the l-inf ball
/// (intersected with the clip box) on a regular grid of the given pitch and
/// returns `max` over grid points of `min(loss, gamma_binary(lambda))`.
/// Corners are always included. Exponential in the input dimension; guarded.
pub fn curriculum_loss_binary_grid(
    params: &ParamVector,
    spec: &NetworkSpec,
    x: &[f64],
    label: usize,
    lambda: f64,
    cfg: &AttackConfig,
    pitch: f64,
) -> Result<f64> {
    check_binary_instance(spec, x, lambda)?;
    cfg.validate()?;
    if !(pitch > 0.0) {
        return Err(Error::InvalidConfig(format!("grid pitch must be > 0, got {pitch}")));
    }
    let d = x.len();
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut total: usize = 1;
    for j in 0..d {
        let lo = (x[j] - cfg.epsilon).max(cfg.clip_min);
        let hi = (x[j] + cfg.epsilon).min(cfg.clip_max);
        let n = if hi > lo { ((hi - lo) / pitch).round() as usize + 1 } else { 1 };
        let mut axis = Vec::with_capacity(n);
        for i in 0..n {
            axis.push(if i + 1 == n { hi } else { lo + pitch * i as f64 });
        }
        total = total.saturating_mul(n);
        axes.push(axis);
    }
    if total > GRID_GUARD {
        return Err(Error::GuardExceeded { count: total, guard: GRID_GUARD });
    }

    let g = gamma_binary(lambda);
    let mut best = f64::NEG_INFINITY;
    let mut chunk: Vec<f64> = Vec::with_capacity(4096 * d);
    let mut idx = vec![0usize; d];
    let mut done = false;
    while !done {
        for j in 0..d {
            chunk.push(axes[j][idx[j]]);
        }
        // Odometer increment over the grid indices.
        let mut j = d;
        loop {
            if j == 0 {
                done = true;
                break;
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] < axes[j].len() {
                break;
            }
            idx[j] = 0;
        }
        if chunk.len() >= 4096 * d || done {
            let labels = vec![label; chunk.len() / d];
            let fr = forward(params, spec, &chunk, &labels)?;
            for &l in &fr.losses {
                let v = l.min(g);
                if v > best {
                    best = v;
                }
            }
            chunk.clear();
        }
    }
    Ok(best)
}
