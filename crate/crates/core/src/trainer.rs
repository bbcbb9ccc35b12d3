//! SGD-with-momentum training loops for the adversarial baseline and both
//! curriculum variants, plus robust evaluation, early stopping, history
//! tracking, and the generalization-gap statistic.
//!
//! One loop serves all three regimes: the curriculum settings decide whether
//! batches are attacked with plain PGD or the difficulty-masked variant, and
//! a saturated schedule makes the masked runs reproduce the baseline
//! bit-for-bit. Every random choice (shuffling, attack init, evaluation) is
//! drawn from a stream derived from the run seed and a structural tag, so a
//! fixed config and datasets give a bit-identical result.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::{self, AttackConfig};
use crate::curriculum::{schedule_value, CurriculumConfig};
use crate::data::{self, Dataset};
use crate::derive_seed;
use crate::diagnostics::{self, SmoothnessReport};
use crate::hessian::ProbeConfig;
use crate::network::{self, init_network, NetworkSpec, ParamVector};
use crate::{Error, Result};

/// Evaluation batching granularity (memory bound, not a tuning knob).
const EVAL_BATCH: usize = 256;

/// Per-epoch smoothness probing of the loss in parameter space, measured on
/// a fixed subset of training samples.
#[derive(Debug, Clone)]
pub struct SmoothnessConfig {
    /// Number of training samples in the fixed probe subset.
    pub n_samples: usize,
    /// Probe every this many epochs (1 = every epoch).
    pub every: usize,
    /// Estimator settings.
    pub probe: ProbeConfig,
}

impl Default for SmoothnessConfig {
    fn default() -> Self {
        Self { n_samples: 64, every: 1, probe: ProbeConfig::default() }
    }
}

/// Full description of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub spec: NetworkSpec,
    pub attack: AttackConfig,
    /// Attack used for per-epoch robust evaluation (often stronger than the
    /// training attack).
    pub eval_attack: AttackConfig,
    pub curriculum: CurriculumConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative decay knots `(epoch, factor)`: at the start of that
    /// epoch the learning rate is multiplied by the factor.
    pub lr_decay: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// When set, smoothness statistics are recorded into the history.
    pub smoothness: Option<SmoothnessConfig>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.attack.validate()?;
        self.eval_attack.validate()?;
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        self.curriculum.validate(self.epochs)?;
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        let mut prev: Option<usize> = None;
        for &(epoch, factor) in &self.lr_decay {
            if let Some(p) = prev {
                if epoch <= p {
                    return Err(Error::InvalidConfig(
                        "lr_decay knots must have strictly increasing epochs".into(),
                    ));
                }
            }
            if !(factor > 0.0 && factor.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "lr_decay factor must be > 0, got {factor}"
                )));
            }
            prev = Some(epoch);
        }
        if let Some(s) = &self.smoothness {
            if s.n_samples < 1 || s.every < 1 {
                return Err(Error::InvalidConfig(
                    "smoothness n_samples and every must be >= 1".into(),
                ));
            }
            s.probe.validate()?;
        }
        Ok(())
    }
}

/// Smoothness triple recorded in a history row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothness {
    pub max_eig: f64,
    pub trace: f64,
    pub grad_norm: f64,
}

impl From<&SmoothnessReport> for Smoothness {
    fn from(r: &SmoothnessReport) -> Self {
        Self { max_eig: r.max_eig, trace: r.trace, grad_norm: r.grad_norm }
    }
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    /// Mean adversarial training loss over the epoch's samples.
    pub train_loss: f64,
    /// Accuracy on the adversarial training examples the updates saw.
    pub train_adv_acc: f64,
    pub test_clean_acc: f64,
    pub test_adv_acc: f64,
    /// Mean l-inf perturbation norm over the epoch's training samples.
    pub mean_delta_norm: f64,
    pub smoothness: Option<Smoothness>,
}

/// Per-epoch training records, in epoch order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Writes the history as CSV. The three smoothness columns appear only
    /// if at least one row recorded them; rows without leave those fields
    /// empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let with_smooth = self.rows.iter().any(|r| r.smoothness.is_some());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "epoch",
            "lambda",
            "train_loss",
            "train_adv_acc",
            "test_clean_acc",
            "test_adv_acc",
            "mean_delta_norm",
        ];
        if with_smooth {
            header.extend_from_slice(&["max_eig", "trace", "grad_norm"]);
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.epoch.to_string(),
                r.lambda.to_string(),
                r.train_loss.to_string(),
                r.train_adv_acc.to_string(),
                r.test_clean_acc.to_string(),
                r.test_adv_acc.to_string(),
                r.mean_delta_norm.to_string(),
            ];
            if with_smooth {
                match &r.smoothness {
                    Some(s) => rec.extend_from_slice(&[
                        s.max_eig.to_string(),
                        s.trace.to_string(),
                        s.grad_norm.to_string(),
                    ]),
                    None => rec.extend_from_slice(&[String::new(), String::new(), String::new()]),
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers().map_err(|e| Error::DataFormat(e.to_string()))?.clone();
        let base = [
            "epoch",
            "lambda",
            "train_loss",
            "train_adv_acc",
            "test_clean_acc",
            "test_adv_acc",
            "mean_delta_norm",
        ];
        for (i, name) in base.iter().enumerate() {
            if headers.get(i) != Some(name) {
                return Err(Error::DataFormat(format!("history header missing column {name}")));
            }
        }
        let with_smooth = headers.len() > base.len();
        let parse = |field: &str, what: &str| -> Result<f64> {
            field
                .parse::<f64>()
                .map_err(|_| Error::DataFormat(format!("bad {what} value {field:?}")))
        };
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::DataFormat(e.to_string()))?;
            let get = |i: usize| rec.get(i).unwrap_or("");
            let smoothness = if with_smooth && !get(7).is_empty() {
                Some(Smoothness {
                    max_eig: parse(get(7), "max_eig")?,
                    trace: parse(get(8), "trace")?,
                    grad_norm: parse(get(9), "grad_norm")?,
                })
            } else {
                None
            };
            rows.push(EpochRecord {
                epoch: get(0)
                    .parse::<usize>()
                    .map_err(|_| Error::DataFormat(format!("bad epoch value {:?}", get(0))))?,
                lambda: parse(get(1), "lambda")?,
                train_loss: parse(get(2), "train_loss")?,
                train_adv_acc: parse(get(3), "train_adv_acc")?,
                test_clean_acc: parse(get(4), "test_clean_acc")?,
                test_adv_acc: parse(get(5), "test_adv_acc")?,
                mean_delta_norm: parse(get(6), "mean_delta_norm")?,
                smoothness,
            });
        }
        Ok(Self { rows })
    }
}

/// Output of a full training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters from the epoch with the highest adversarial test accuracy.
    pub best_params: ParamVector,
    /// Parameters after the final epoch.
    pub final_params: ParamVector,
    pub history: TrainHistory,
    pub best_epoch: usize,
}

/// Robust evaluation summary; `sum` is the headline clean + adversarial
/// score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub sum: f64,
}

/// One SGD-with-momentum update:
/// `g' = grads + weight_decay * params`, `v' = momentum * v + g'`,
/// `params' = params - lr * v'`.
pub fn sgd_step(
    params: &mut ParamVector,
    grads: &ParamVector,
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "sgd_step on {} params with {} grads and {} velocity entries",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for i in 0..params.len() {
        let g = grads.values[i] + weight_decay * params.values[i];
        velocity[i] = momentum * velocity[i] + g;
        params.values[i] -= lr * velocity[i];
    }
    Ok(())
}

/// Clean and adversarial accuracy of `params` on a labeled dataset, with the
/// adversarial side attacked by multi-restart PGD under `attack_cfg`. The
/// seed fixes the attack randomness so evaluation is reproducible.
pub fn evaluate(
    params: &ParamVector,
    spec: &NetworkSpec,
    dataset: &Dataset,
    attack_cfg: &AttackConfig,
    seed: u64,
) -> Result<EvalReport> {
    dataset.validate()?;
    attack_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clean_correct = 0usize;
    let mut adv_correct = 0usize;
    for batch in data::batches(dataset, EVAL_BATCH, 0, false)? {
        let fr = network::forward(params, spec, &batch.inputs, &batch.labels)?;
        let adv = attack::pgd(params, spec, &batch, attack_cfg, &mut rng)?;
        let fr_adv = network::forward(params, spec, &adv.x_adv, &batch.labels)?;
        for (i, &y) in batch.labels.iter().enumerate() {
            clean_correct += usize::from(fr.predicted(i) == y);
            adv_correct += usize::from(fr_adv.predicted(i) == y);
        }
    }
    let n = dataset.len() as f64;
    let clean_acc = clean_correct as f64 / n;
    let adv_acc = adv_correct as f64 / n;
    Ok(EvalReport { clean_acc, adv_acc, sum: clean_acc + adv_acc })
}

/// Mean and normal-approximation 95% confidence interval of the
/// train-vs-test adversarial accuracy gap, in percentage points, over the
/// last `window` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub mean: f64,
    pub ci95: f64,
}

pub fn generalization_gap(history: &TrainHistory, window: usize) -> Result<GapReport> {
    if window < 2 {
        return Err(Error::InvalidConfig("gap window must be >= 2".into()));
    }
    if history.rows.len() < window {
        return Err(Error::InsufficientHistory(format!(
            "need {window} epochs for the gap window, have {}",
            history.rows.len()
        )));
    }
    let gaps: Vec<f64> = history.rows[history.rows.len() - window..]
        .iter()
        .map(|r| (r.train_adv_acc - r.test_adv_acc) * 100.0)
        .collect();
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(GapReport { mean, ci95: 1.96 * var.sqrt() / n.sqrt() })
}

fn loop_context(err: Error, epoch: usize, batch: usize) -> Error {
    Error::Numerical(format!("epoch {epoch}, batch {batch}: {err}"))
}

/// Runs the full training loop: per-epoch curriculum value, per-batch
/// adversarial example generation (plain or difficulty-masked PGD), SGD
/// updates on the mean adversarial loss, per-epoch robust evaluation, and
/// early stopping on adversarial test accuracy. Deterministic for a fixed
/// config and datasets.
pub fn train(config: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainResult> {
    config.validate()?;
    train_set.validate()?;
    test_set.validate()?;
    let spec = &config.spec;
    if train_set.dim != spec.input_dim() || test_set.dim != spec.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "network expects inputs of dim {}, datasets have {} / {}",
            spec.input_dim(),
            train_set.dim,
            test_set.dim
        )));
    }
    if train_set.classes > spec.classes() || test_set.classes > spec.classes() {
        return Err(Error::ShapeMismatch(format!(
            "network emits {} classes, datasets contain up to {}",
            spec.classes(),
            train_set.classes.max(test_set.classes)
        )));
    }

    let metric = config.curriculum.difficulty_metric();
    let mut params = init_network(spec)?;
    let mut velocity = vec![0.0; params.len()];
    let mut lr = config.lr;

    // Fixed probe subset for smoothness tracking, shared across epochs.
    let smooth_subset = match &config.smoothness {
        Some(s) => Some(train_set.seeded_subset(
            s.n_samples.min(train_set.len()),
            derive_seed(config.seed, "smoothness"),
        )?),
        None => None,
    };

    let mut history = TrainHistory::default();
    let mut best_epoch = 0usize;
    let mut best_adv = f64::NEG_INFINITY;
    let mut best_params = params.clone();

    for epoch in 0..config.epochs {
        for &(at, factor) in &config.lr_decay {
            if at == epoch {
                lr *= factor;
            }
        }
        let lambda = schedule_value(&config.curriculum.schedule, epoch);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut delta_sum = 0.0;
        let mut seen = 0usize;
        let shuffle_seed = derive_seed(config.seed, &format!("shuffle/{epoch}"));
        for (bi, batch) in data::batches(train_set, config.batch_size, shuffle_seed, true)?
            .iter()
            .enumerate()
        {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("attack/{epoch}/{bi}")));
            let adv = match &metric {
                None => attack::pgd(&params, spec, batch, &config.attack, &mut rng),
                Some(m) => attack::masked_pgd(&params, spec, batch, &config.attack, m, lambda, &mut rng),
            }
            .map_err(|e| loop_context(e, epoch, bi))?;
            let (grads, stats) =
                network::grad_params_with_stats(&params, spec, &adv.x_adv, &batch.labels)
                    .map_err(|e| loop_context(e, epoch, bi))?;
            sgd_step(&mut params, &grads, &mut velocity, lr, config.momentum, config.weight_decay)?;
            let b = batch.len();
            loss_sum += stats.mean_loss * b as f64;
            correct += stats.correct;
            delta_sum += adv.delta_norms.iter().sum::<f64>();
            seen += b;
        }

        let eval = evaluate(
            &params,
            spec,
            test_set,
            &config.eval_attack,
            derive_seed(config.seed, &format!("eval/{epoch}")),
        )?;

        let smoothness = match (&config.smoothness, &smooth_subset) {
            (Some(sc), Some(subset)) if epoch % sc.every == 0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    config.seed,
                    &format!("smooth/{epoch}"),
                ));
                let report = diagnostics::smoothness_report(
                    &params,
                    spec,
                    subset,
                    &config.eval_attack,
                    &sc.probe,
                    epoch,
                    &mut rng,
                )?;
                Some(Smoothness::from(&report))
            }
            _ => None,
        };

        let n = seen as f64;
        history.rows.push(EpochRecord {
            epoch,
            lambda,
            train_loss: loss_sum / n,
            train_adv_acc: correct as f64 / n,
            test_clean_acc: eval.clean_acc,
            test_adv_acc: eval.adv_acc,
            mean_delta_norm: delta_sum / n,
            smoothness,
        });

        if eval.adv_acc > best_adv {
            best_adv = eval.adv_acc;
            best_epoch = epoch;
            best_params = params.clone();
        }
    }

    Ok(TrainResult { best_params, final_params: params, history, best_epoch })
}
