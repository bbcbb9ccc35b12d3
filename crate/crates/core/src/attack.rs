//! l-inf projected-gradient attacks, plain and difficulty-masked.
//!
//! Both entry points run the same inner loop: sign (or raw-gradient) ascent on
//! each sample's own loss, projected after every step into the l-inf ball
//! around the clean input intersected with the valid pixel range. The masked
//! variant evaluates a difficulty rule at the current iterate *before* each
//! step and freezes samples that violate it, so a sample can overshoot its
//! constraint by at most one step. With a mask that is always on, the masked
//! path executes the identical instruction sequence and rng stream as the
//! plain one — adversarial training is literally the masked loop with the
//! mask saturated.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::{prob_gap, select_fraction};
use crate::data::Batch;
use crate::hessian::{hessian_score_batch, ProbeConfig};
use crate::network::{self, NetworkSpec, ParamVector};
use crate::{Error, Result};

/// Attack hyperparameters for one PGD adversary.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// l-inf radius of the perturbation ball.
    pub epsilon: f64,
    /// Ascent step size per iteration.
    pub step_size: f64,
    /// Number of ascent iterations.
    pub steps: usize,
    /// Start from a uniform random point in the ball instead of the input.
    pub random_init: bool,
    /// Independent restarts; the highest-loss perturbation wins per sample.
    pub restarts: usize,
    /// Valid input range (pixel box), intersected with the ball.
    pub clip_min: f64,
    pub clip_max: f64,
    /// Ascend along sign(grad) (standard l-inf PGD) instead of the raw
    /// gradient.
    pub signed_grad: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            step_size: 0.02,
            steps: 40,
            random_init: true,
            restarts: 1,
            clip_min: 0.0,
            clip_max: 1.0,
            signed_grad: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidConfig(format!("step_size must be finite and > 0, got {}", self.step_size)));
        }
        if self.restarts < 1 {
            return Err(Error::InvalidConfig("restarts must be >= 1".into()));
        }
        if !(self.clip_min < self.clip_max) || !self.clip_min.is_finite() || !self.clip_max.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "need finite clip_min < clip_max, got [{}, {}]",
                self.clip_min, self.clip_max
            )));
        }
        if self.epsilon > self.clip_max - self.clip_min {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} exceeds the clip range width {}",
                self.epsilon,
                self.clip_max - self.clip_min
            )));
        }
        Ok(())
    }
}

/// The per-sample difficulty rule used by [`masked_pgd`].
#[derive(Debug, Clone)]
pub enum DifficultyMetric {
    /// Update sample `i` while its softmax probability gap at the current
    /// iterate is at most lambda.
    ProbGap,
    /// Update the `ceil(lambda * B)` samples with the smallest curvature
    /// scores; scores come from [`hessian_score_batch`] at the current
    /// iterates, recomputed every `recompute_every` steps.
    HessianScore { probe: ProbeConfig, recompute_every: usize },
}

/// One attacked batch: the perturbed inputs plus provenance and per-sample
/// bookkeeping (`steps_applied` counts ascent updates actually applied;
/// `delta_norms` is the l-inf size of the final perturbation).
#[derive(Debug, Clone)]
pub struct AdvBatch {
    pub x_adv: Vec<f64>,
    pub x_clean: Vec<f64>,
    pub labels: Vec<usize>,
    pub steps_applied: Vec<usize>,
    pub delta_norms: Vec<f64>,
    pub dim: usize,
}

impl AdvBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn adv_row(&self, i: usize) -> &[f64] {
        &self.x_adv[i * self.dim..(i + 1) * self.dim]
    }
}

/// Coordinate-wise clamp of `x` into `[x_clean - eps, x_clean + eps]`
/// intersected with `[clip_min, clip_max]`.
pub fn project(x: &[f64], x_clean: &[f64], cfg: &AttackConfig) -> Vec<f64> {
    let mut out = x.to_vec();
    project_in_place(&mut out, x_clean, cfg);
    out
}

fn project_in_place(x: &mut [f64], x_clean: &[f64], cfg: &AttackConfig) {
    debug_assert_eq!(x.len(), x_clean.len());
    for (v, &c) in x.iter_mut().zip(x_clean) {
        let lo = (c - cfg.epsilon).max(cfg.clip_min);
        let hi = (c + cfg.epsilon).min(cfg.clip_max);
        *v = v.clamp(lo, hi);
    }
}

fn ascent_dir(g: f64, signed: bool) -> f64 {
    if signed {
        if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        }
    } else {
        g
    }
}

/// Plain PGD: every sample receives all `steps` updates.
pub fn pgd(
    params: &ParamVector,
    spec: &NetworkSpec,
    batch: &Batch,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdvBatch> {
    run_pgd(params, spec, batch, cfg, None, rng)
}

/// Difficulty-masked PGD: before each step the metric is evaluated at the
/// current iterate and only samples passing the rule are updated. Random
/// initialization (when enabled) is applied unconditionally, so a saturated
/// mask reproduces [`pgd`] bit-exactly on the same rng stream.
pub fn masked_pgd(
    params: &ParamVector,
    spec: &NetworkSpec,
    batch: &Batch,
    cfg: &AttackConfig,
    metric: &DifficultyMetric,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<AdvBatch> {
    run_pgd(params, spec, batch, cfg, Some((metric, lambda)), rng)
}

fn run_pgd(
    params: &ParamVector,
    spec: &NetworkSpec,
    batch: &Batch,
    cfg: &AttackConfig,
    masker: Option<(&DifficultyMetric, f64)>,
    rng: &mut ChaCha8Rng,
) -> Result<AdvBatch> {
    cfg.validate()?;
    if let Some((DifficultyMetric::HessianScore { probe, recompute_every }, _)) = masker {
        probe.validate()?;
        if *recompute_every < 1 {
            return Err(Error::InvalidConfig("recompute_every must be >= 1".into()));
        }
    }
    let b = batch.len();
    let d = batch.dim;
    if b == 0 || batch.inputs.len() != b * d {
        return Err(Error::ShapeMismatch("empty or inconsistent batch".into()));
    }
    if batch
        .inputs
        .iter()
        .any(|&v| v < cfg.clip_min || v > cfg.clip_max)
    {
        return Err(Error::InvalidConfig("clean inputs outside the clip range".into()));
    }
    let x_clean = &batch.inputs;
    let labels = &batch.labels;
    let eps = cfg.epsilon;

    let mut best_x: Vec<f64> = x_clean.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; b];
    let mut best_steps = vec![0usize; b];

    for _restart in 0..cfg.restarts {
        let mut x = x_clean.clone();
        if cfg.random_init && eps > 0.0 {
            for v in x.iter_mut() {
                *v += rng.random_range(-eps..=eps);
            }
            project_in_place(&mut x, x_clean, cfg);
        }
        let mut steps_applied = vec![0usize; b];
        // Cache for the fraction mask between score refreshes.
        let mut frac_mask = vec![true; b];
        for k in 0..cfg.steps {
            let (fr, gin) = network::forward_with_input_grads(params, spec, &x, labels)?;
            let mask: Vec<bool> = match masker {
                None => vec![true; b],
                Some((DifficultyMetric::ProbGap, lambda)) => {
                    let mut m = Vec::with_capacity(b);
                    for i in 0..b {
                        m.push(prob_gap(fr.prob_row(i), labels[i])? <= lambda);
                    }
                    m
                }
                Some((DifficultyMetric::HessianScore { probe, recompute_every }, lambda)) => {
                    if k % recompute_every == 0 {
                        let scores = hessian_score_batch(params, spec, &x, labels, probe)?;
                        frac_mask = select_fraction(&scores, lambda)?;
                    }
                    frac_mask.clone()
                }
            };
            for i in 0..b {
                if !mask[i] {
                    continue;
                }
                steps_applied[i] += 1;
                for j in 0..d {
                    let idx = i * d + j;
                    let lo = (x_clean[idx] - eps).max(cfg.clip_min);
                    let hi = (x_clean[idx] + eps).min(cfg.clip_max);
                    let step = cfg.step_size * ascent_dir(gin[idx], cfg.signed_grad);
                    x[idx] = (x[idx] + step).clamp(lo, hi);
                }
            }
        }
        let losses = network::forward(params, spec, &x, labels)?.losses;
        for i in 0..b {
            // Strict improvement keeps the earliest restart on ties.
            if losses[i] > best_loss[i] {
                best_loss[i] = losses[i];
                best_steps[i] = steps_applied[i];
                best_x[i * d..(i + 1) * d].copy_from_slice(&x[i * d..(i + 1) * d]);
            }
        }
    }

    let delta_norms = (0..b)
        .map(|i| {
            (0..d)
                .map(|j| (best_x[i * d + j] - x_clean[i * d + j]).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(AdvBatch {
        x_adv: best_x,
        x_clean: x_clean.clone(),
        labels: labels.clone(),
        steps_applied: best_steps,
        delta_norms,
        dim: d,
    })
}
