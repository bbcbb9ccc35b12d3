//! Measurement utilities around trained models: curvature/smoothness
//! reports on adversarial batches, rank correlation for score validation,
//! filter-normalized loss-landscape slices, and the CSV formats all of them
//! are exported in.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AdvBatch, AttackConfig};
use crate::data::{Batch, Dataset};
use crate::derive_seed;
use crate::hessian::{self, LossSurface, ProbeConfig, TraceMode, PARAM_GUARD};
use crate::network::{self, ParamSegment, ParamVector, NetworkSpec};
use crate::{Error, Result};

/// Hutchinson probe count used when the model is too large for the exact
/// trace sweep.
const HUTCHINSON_PROBES: usize = 100;

/// Curvature and gradient statistics of the adversarial loss at one
/// parameter point, measured on a fixed sample subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessReport {
    /// Dominant Hessian eigenvalue magnitude (power method).
    pub max_eig: f64,
    /// Hessian trace — exact under the dense guard, Hutchinson above it.
    pub trace: f64,
    /// Norm of the parameter gradient of the batch-mean adversarial loss.
    pub grad_norm: f64,
    pub n_samples: usize,
    pub epoch: usize,
}

/// One line of the smoothness CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessRow {
    pub epoch: usize,
    pub max_eig: f64,
    pub trace: f64,
    pub grad_norm: f64,
}

impl From<&SmoothnessReport> for SmoothnessRow {
    fn from(r: &SmoothnessReport) -> Self {
        Self { epoch: r.epoch, max_eig: r.max_eig, trace: r.trace, grad_norm: r.grad_norm }
    }
}

/// Attacks the sample set with `eval_attack`, then measures the dominant
/// Hessian eigenvalue, the trace, and the gradient norm of the batch-mean
/// adversarial loss at `params`. The caller supplies the same subset every
/// epoch so the series is comparable over time.
pub fn smoothness_report(
    params: &ParamVector,
    spec: &NetworkSpec,
    sample: &Dataset,
    eval_attack: &AttackConfig,
    probe: &ProbeConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SmoothnessReport> {
    sample.validate()?;
    probe.validate()?;
    let batch = Batch {
        inputs: sample.inputs.clone(),
        labels: sample.labels.clone(),
        indices: (0..sample.len()).collect(),
        dim: sample.dim,
    };
    let adv = attack::pgd(params, spec, &batch, eval_attack, rng)?;
    let top = hessian::top_eigenvalue(params, spec, &adv.x_adv, &adv.labels, probe, rng)?;
    let mode = if params.len() <= PARAM_GUARD {
        TraceMode::Exact
    } else {
        TraceMode::Hutchinson { probes: HUTCHINSON_PROBES }
    };
    let trace = hessian::trace(params, spec, &adv.x_adv, &adv.labels, mode, probe, rng)?;
    let grad_norm = network::grad_params(params, spec, &adv.x_adv, &adv.labels)?.norm();
    let report = SmoothnessReport {
        max_eig: top.power_value,
        trace,
        grad_norm,
        n_samples: sample.len(),
        epoch,
    };
    if !(report.max_eig.is_finite() && report.trace.is_finite() && report.grad_norm.is_finite()) {
        return Err(Error::Numerical(format!("non-finite smoothness report: {report:?}")));
    }
    Ok(report)
}

/// Spearman rank correlation with its degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// Set when either input was constant; `rho` is then defined as 0.
    pub degenerate: bool,
}

/// Average ranks (1-based); tied values share the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) tie; their 1-based ranks average to
        // (i + j)/2 + 1.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation of two equal-length sequences with average-rank tie
/// handling. A constant input makes the correlation undefined; it is
/// reported as 0 with the flag set.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Spearman> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "spearman inputs of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidSpec("spearman needs at least two points".into()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - ma;
        let db = rb[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(Spearman { rho: 0.0, degenerate: true });
    }
    Ok(Spearman { rho: cov / (va * vb).sqrt(), degenerate: false })
}

/// Rectangular evaluation grid for landscape slices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub a_min: f64,
    pub a_max: f64,
    pub a_steps: usize,
    pub b_min: f64,
    pub b_max: f64,
    pub b_steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { a_min: -1.0, a_max: 1.0, a_steps: 21, b_min: -1.0, b_max: 1.0, b_steps: 21 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64, steps: usize| lo.is_finite() && hi.is_finite() && lo < hi && steps >= 2;
        if !ok(self.a_min, self.a_max, self.a_steps) || !ok(self.b_min, self.b_max, self.b_steps) {
            return Err(Error::InvalidConfig(format!(
                "grid needs finite min < max and at least 2 steps per axis: {self:?}"
            )));
        }
        Ok(())
    }

    fn alphas(&self) -> Vec<f64> {
        axis(self.a_min, self.a_max, self.a_steps)
    }

    fn betas(&self) -> Vec<f64> {
        axis(self.b_min, self.b_max, self.b_steps)
    }
}

fn axis(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect()
}

/// Loss values over a 2-D slice of parameter space. `losses` is row-major
/// over `(alphas, betas)`; cells whose evaluation failed hold `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub losses: Vec<f64>,
    /// Seed the slice directions and per-cell attacks were derived from.
    pub seed: u64,
}

impl LandscapeGrid {
    pub fn loss_at(&self, i: usize, j: usize) -> f64 {
        self.losses[i * self.betas.len() + j]
    }
}

/// Draws two random slice directions and applies filter normalization:
/// within every parameter segment (weight-matrix row or bias vector) the
/// second direction is first orthogonalized against the first, then both are
/// rescaled to the segment norm of `params`. Segment-wise scaling preserves
/// the orthogonality, so the returned directions are globally orthogonal
/// while matching the model's per-row scale.
pub fn landscape_directions(
    params: &[f64],
    segments: &[ParamSegment],
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let n = params.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "directions"));
    let mut d1: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut d2: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for seg in segments {
        let r = seg.offset..seg.offset + seg.len;
        let s1 = &mut d1[r.clone()];
        let dot11 = s1.iter().map(|x| x * x).sum::<f64>();
        if dot11 > 0.0 {
            let dot12 = s1
                .iter()
                .zip(&d2[r.clone()])
                .map(|(a, b)| a * b)
                .sum::<f64>();
            let coef = dot12 / dot11;
            for (i, x) in r.clone().enumerate() {
                d2[x] -= coef * s1[i];
            }
        }
        let target = params[r.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
        for dir in [&mut d1, &mut d2] {
            let seg_norm = dir[r.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = if seg_norm > 0.0 { target / seg_norm } else { 0.0 };
            for x in &mut dir[r.clone()] {
                *x *= scale;
            }
        }
    }
    (d1, d2)
}

fn fill_grid(
    grid: &GridSpec,
    seed: u64,
    mut cell_loss: impl FnMut(&[f64], u64) -> Result<f64>,
    d1: &[f64],
    d2: &[f64],
    theta: &[f64],
) -> Result<LandscapeGrid> {
    let alphas = grid.alphas();
    let betas = grid.betas();
    let mut losses = Vec::with_capacity(alphas.len() * betas.len());
    let mut shifted = vec![0.0; theta.len()];
    for (ai, &a) in alphas.iter().enumerate() {
        for (bi, &b) in betas.iter().enumerate() {
            for i in 0..theta.len() {
                shifted[i] = theta[i] + a * d1[i] + b * d2[i];
            }
            let cell_seed = derive_seed(seed, &format!("cell/{ai}/{bi}"));
            losses.push(cell_loss(&shifted, cell_seed).unwrap_or(f64::NAN));
        }
    }
    Ok(LandscapeGrid { alphas, betas, losses, seed })
}

/// Adversarial-loss slice for a network: at each grid point the shifted
/// parameters are attacked with PGD (seeded per cell, so the surface is a
/// deterministic function of the grid position) and the mean adversarial
/// loss is recorded.
pub fn landscape_slice(
    params: &ParamVector,
    spec: &NetworkSpec,
    sample: &Dataset,
    attack_cfg: &AttackConfig,
    grid: &GridSpec,
    seed: u64,
) -> Result<LandscapeGrid> {
    grid.validate()?;
    sample.validate()?;
    attack_cfg.validate()?;
    if params.len() != spec.param_count() {
        return Err(Error::ShapeMismatch("params do not match the network spec".into()));
    }
    let segments = network::filter_segments(spec);
    let (d1, d2) = landscape_directions(&params.values, &segments, seed);
    let batch = Batch {
        inputs: sample.inputs.clone(),
        labels: sample.labels.clone(),
        indices: (0..sample.len()).collect(),
        dim: sample.dim,
    };
    fill_grid(
        grid,
        seed,
        |theta, cell_seed| {
            let p = ParamVector::from_values(theta.to_vec());
            let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
            let adv = attack::pgd(&p, spec, &batch, attack_cfg, &mut rng)?;
            Ok(network::forward(&p, spec, &adv.x_adv, &adv.labels)?.mean_loss())
        },
        &d1,
        &d2,
        &params.values,
    )
}

/// Clean-loss slice of an arbitrary surface (no attack); the segments drive
/// the same filter normalization.
pub fn landscape_slice_surface(
    surface: &dyn LossSurface,
    theta: &[f64],
    segments: &[ParamSegment],
    grid: &GridSpec,
    seed: u64,
) -> Result<LandscapeGrid> {
    grid.validate()?;
    if theta.len() != surface.dim() {
        return Err(Error::ShapeMismatch("theta does not match the surface dim".into()));
    }
    let (d1, d2) = landscape_directions(theta, segments, seed);
    fill_grid(grid, seed, |shifted, _| surface.loss(shifted), &d1, &d2, theta)
}

/// Mean l-inf perturbation size of an attacked batch.
pub fn mean_perturbation_norm(adv: &AdvBatch) -> f64 {
    debug_assert!(!adv.is_empty());
    adv.delta_norms.iter().sum::<f64>() / adv.delta_norms.len() as f64
}

/// Writes a landscape as `a,b,loss` rows, row-major over the grid. `NaN`
/// losses (failed cells) become empty fields.
pub fn write_landscape_csv<W: Write>(out: W, grid: &LandscapeGrid) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["a", "b", "loss"])?;
    for (i, &a) in grid.alphas.iter().enumerate() {
        for (j, &b) in grid.betas.iter().enumerate() {
            let loss = grid.loss_at(i, j);
            let cell = if loss.is_nan() { String::new() } else { loss.to_string() };
            w.write_record([a.to_string(), b.to_string(), cell])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a landscape CSV back; the row order must be row-major as written.
pub fn read_landscape_csv<R: Read>(input: R) -> Result<LandscapeGrid> {
    let mut rdr = csv::Reader::from_reader(input);
    {
        let headers = rdr.headers().map_err(|e| Error::DataFormat(e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["a", "b", "loss"] {
            return Err(Error::DataFormat("landscape header must be a,b,loss".into()));
        }
    }
    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::DataFormat(e.to_string()))?;
        let num = |i: usize, what: &str| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|_| Error::DataFormat(format!("bad {what} value {:?}", rec.get(i))))
        };
        let loss = match rec.get(2) {
            Some("") | None => f64::NAN,
            Some(s) => s
                .parse::<f64>()
                .map_err(|_| Error::DataFormat(format!("bad loss value {s:?}")))?,
        };
        rows.push((num(0, "a")?, num(1, "b")?, loss));
    }
    if rows.is_empty() {
        return Err(Error::DataFormat("empty landscape CSV".into()));
    }
    let betas: Vec<f64> = {
        let a0 = rows[0].0;
        rows.iter().take_while(|r| r.0 == a0).map(|r| r.1).collect()
    };
    let nb = betas.len();
    if nb == 0 || rows.len() % nb != 0 {
        return Err(Error::DataFormat("landscape rows do not form a rectangle".into()));
    }
    let mut alphas = Vec::with_capacity(rows.len() / nb);
    let mut losses = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(nb) {
        alphas.push(chunk[0].0);
        for (k, row) in chunk.iter().enumerate() {
            if row.0 != chunk[0].0 || row.1 != betas[k] {
                return Err(Error::DataFormat("landscape rows are not row-major".into()));
            }
            losses.push(row.2);
        }
    }
    Ok(LandscapeGrid { alphas, betas, losses, seed: 0 })
}

/// Writes smoothness rows as `epoch,max_eig,trace,grad_norm`.
pub fn write_smoothness_csv<W: Write>(out: W, rows: &[SmoothnessRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "max_eig", "trace", "grad_norm"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.max_eig.to_string(),
            r.trace.to_string(),
            r.grad_norm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_smoothness_csv<R: Read>(input: R) -> Result<Vec<SmoothnessRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    {
        let headers = rdr.headers().map_err(|e| Error::DataFormat(e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["epoch", "max_eig", "trace", "grad_norm"] {
            return Err(Error::DataFormat(
                "smoothness header must be epoch,max_eig,trace,grad_norm".into(),
            ));
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::DataFormat(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|_| Error::DataFormat(format!("bad smoothness value {:?}", rec.get(i))))
        };
        rows.push(SmoothnessRow {
            epoch: rec
                .get(0)
                .unwrap_or("")
                .parse::<usize>()
                .map_err(|_| Error::DataFormat(format!("bad epoch value {:?}", rec.get(0))))?,
            max_eig: num(1)?,
            trace: num(2)?,
            grad_norm: num(3)?,
        });
    }
    Ok(rows)
}
