//! Parameter-vector MLP with manual reverse-mode differentiation.
//!
//! Networks are fully connected with ReLU hidden activations and a softmax
//! cross-entropy head. All parameters live in one flat `f64` vector, laid out
//! layer by layer as the weight matrix in row-major `(out, in)` order followed
//! by the bias vector; every routine in the crate (including the snapshot
//! format) shares that layout. Batches are dense row-major slices and all
//! arithmetic is sequential `f64`, so identical inputs reproduce bit-identical
//! outputs on any platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Architecture description: `layer_sizes = [input_dim, hidden.., classes]`
/// plus the seed used to initialize the weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Self {
        Self { layer_sizes, seed }
    }

    /// At least an input and an output layer, no zero-width layers, and a
    /// real classification head (two or more classes).
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least [input, classes] layer sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidSpec(format!(
                "zero-width layer in {:?}",
                self.layer_sizes
            )));
        }
        if self.classes() < 2 {
            return Err(Error::InvalidSpec(
                "softmax head needs at least 2 classes".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated layer_sizes")
    }

    /// Number of weight layers (affine maps), one less than `layer_sizes`.
    pub fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total length of the flat parameter vector.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Flat `f64` parameter vector in the layout described by [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

/// One contiguous slice of the parameter vector: a single weight row (the
/// fan-in of one unit) or one bias vector. This is the granularity used by
/// filter-wise direction normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSegment {
    pub offset: usize,
    pub len: usize,
}

/// Segments covering the whole parameter vector in layout order: every weight
/// row of every layer, then that layer's bias vector.
pub fn filter_segments(spec: &NetworkSpec) -> Vec<ParamSegment> {
    let mut segs = Vec::new();
    let mut off = 0;
    for w in spec.layer_sizes.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        for _ in 0..n_out {
            segs.push(ParamSegment { offset: off, len: n_in });
            off += n_in;
        }
        segs.push(ParamSegment { offset: off, len: n_out });
        off += n_out;
    }
    segs
}

/// Per-layer offsets into the flat vector: `(w_offset, b_offset, n_in, n_out)`.
fn layer_offsets(spec: &NetworkSpec) -> Vec<(usize, usize, usize, usize)> {
    let mut offs = Vec::with_capacity(spec.layer_count());
    let mut off = 0;
    for w in spec.layer_sizes.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        offs.push((off, off + n_in * n_out, n_in, n_out));
        off += n_in * n_out + n_out;
    }
    offs
}

/// He-uniform initialization: weights uniform in
/// `[-sqrt(6/fan_in), sqrt(6/fan_in)]` drawn in layout order from a ChaCha8
/// stream seeded with `spec.seed`, biases zero.
pub fn init_network(spec: &NetworkSpec) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for w in spec.layer_sizes.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        let limit = (6.0 / n_in as f64).sqrt();
        for _ in 0..n_in * n_out {
            values.push(rng.random_range(-limit..=limit));
        }
        values.extend(std::iter::repeat(0.0).take(n_out));
    }
    Ok(ParamVector { values })
}

/// Batched forward pass output. `logits` and `probs` are row-major
/// `batch x classes`; `losses` holds each sample's own cross-entropy.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub batch: usize,
    pub classes: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub losses: Vec<f64>,
}

impl ForwardResult {
    pub fn logit_row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.classes..(i + 1) * self.classes]
    }

    pub fn prob_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    /// Argmax over logits; ties resolve to the lowest class index.
    pub fn predicted(&self, i: usize) -> usize {
        let row = self.logit_row(i);
        let mut best = 0;
        for (j, &z) in row.iter().enumerate() {
            if z > row[best] {
                best = j;
            }
        }
        best
    }

    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.batch as f64
    }
}

/// Mean loss and correct-prediction count for one batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchStats {
    pub mean_loss: f64,
    pub correct: usize,
}

/// Softmax probabilities and cross-entropy losses for a batch.
pub fn forward(
    params: &ParamVector,
    spec: &NetworkSpec,
    inputs: &[f64],
    labels: &[usize],
) -> Result<ForwardResult> {
    let c = compute(params, spec, inputs, labels, false, false)?;
    Ok(c.fr)
}

/// Gradient of the mean batch loss with respect to the parameters.
pub fn grad_params(
    params: &ParamVector,
    spec: &NetworkSpec,
    inputs: &[f64],
    labels: &[usize],
) -> Result<ParamVector> {
    let c = compute(params, spec, inputs, labels, true, false)?;
    Ok(ParamVector { values: c.param_grad.expect("requested") })
}

/// [`grad_params`] plus the batch statistics from the same forward pass.
pub fn grad_params_with_stats(
    params: &ParamVector,
    spec: &NetworkSpec,
    inputs: &[f64],
    labels: &[usize],
) -> Result<(ParamVector, BatchStats)> {
    let c = compute(params, spec, inputs, labels, true, false)?;
    let stats = BatchStats { mean_loss: c.fr.mean_loss(), correct: c.correct };
    Ok((ParamVector { values: c.param_grad.expect("requested") }, stats))
}

/// Per-sample gradient of each sample's own loss with respect to its input
/// row; same `batch x dim` layout as `inputs`. Rows are independent: sample
/// `i`'s gradient never depends on any other row of the batch.
pub fn grad_inputs(
    params: &ParamVector,
    spec: &NetworkSpec,
    inputs: &[f64],
    labels: &[usize],
) -> Result<Vec<f64>> {
    let c = compute(params, spec, inputs, labels, false, true)?;
    Ok(c.input_grad.expect("requested"))
}

/// One combined pass returning the forward result and the per-sample input
/// gradients; the attack loop needs both at every iterate.
pub fn forward_with_input_grads(
    params: &ParamVector,
    spec: &NetworkSpec,
    inputs: &[f64],
    labels: &[usize],
) -> Result<(ForwardResult, Vec<f64>)> {
    let c = compute(params, spec, inputs, labels, false, true)?;
    Ok((c.fr, c.input_grad.expect("requested")))
}

struct Computed {
    fr: ForwardResult,
    param_grad: Option<Vec<f64>>,
    input_grad: Option<Vec<f64>>,
    correct: usize,
}

fn check_batch(spec: &NetworkSpec, params: &ParamVector, inputs: &[f64], labels: &[usize]) -> Result<usize> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(Error::ShapeMismatch(format!(
            "parameter vector has {} values, spec needs {}",
            params.len(),
            spec.param_count()
        )));
    }
    let d = spec.input_dim();
    if labels.is_empty() || inputs.len() != labels.len() * d {
        return Err(Error::ShapeMismatch(format!(
            "{} input values with {} labels do not form a batch of dim {}",
            inputs.len(),
            labels.len(),
            d
        )));
    }
    let c = spec.classes();
    for &y in labels {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
    }
    Ok(labels.len())
}

fn compute(
    params: &ParamVector,
    spec: &NetworkSpec,
    inputs: &[f64],
    labels: &[usize],
    want_params: bool,
    want_inputs: bool,
) -> Result<Computed> {
    let b = check_batch(spec, params, inputs, labels)?;
    let offs = layer_offsets(spec);
    let n_layers = offs.len();
    let p = &params.values;

    // Forward, keeping every post-activation for the backward sweep.
    // acts[l] is the output of affine layer l: ReLU-rectified for hidden
    // layers, raw logits for the last.
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    for (l, &(w_off, b_off, n_in, n_out)) in offs.iter().enumerate() {
        let prev: &[f64] = if l == 0 { inputs } else { &acts[l - 1] };
        let mut out = vec![0.0; b * n_out];
        for i in 0..b {
            let row_in = &prev[i * n_in..(i + 1) * n_in];
            let row_out = &mut out[i * n_out..(i + 1) * n_out];
            for o in 0..n_out {
                let w = &p[w_off + o * n_in..w_off + (o + 1) * n_in];
                let mut z = p[b_off + o] + dot(w, row_in);
                if l + 1 < n_layers && z < 0.0 {
                    z = 0.0;
                }
                row_out[o] = z;
            }
        }
        acts.push(out);
    }

    let classes = spec.classes();
    let logits = acts.last().expect("at least one layer").clone();
    let mut probs = vec![0.0; b * classes];
    let mut losses = vec![0.0; b];
    let mut correct = 0;
    for i in 0..b {
        let row = &logits[i * classes..(i + 1) * classes];
        let mut m = row[0];
        let mut arg = 0;
        for (j, &z) in row.iter().enumerate() {
            if z > m {
                m = z;
                arg = j;
            }
        }
        let mut sum = 0.0;
        for (j, &z) in row.iter().enumerate() {
            let e = (z - m).exp();
            probs[i * classes + j] = e;
            sum += e;
        }
        for j in 0..classes {
            probs[i * classes + j] /= sum;
        }
        // Cross-entropy through log-sum-exp with the max subtracted, not
        // -ln(prob), so the loss stays finite until probs underflow entirely.
        losses[i] = m + sum.ln() - row[labels[i]];
        if arg == labels[i] {
            correct += 1;
        }
        if !losses[i].is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {} for batch row {i}",
                losses[i]
            )));
        }
    }

    let fr = ForwardResult { batch: b, classes, logits, probs, losses };
    if !want_params && !want_inputs {
        return Ok(Computed { fr, param_grad: None, input_grad: None, correct });
    }

    // Backward sweep. delta holds d(sample loss)/d(layer pre-activation) per
    // sample, unscaled; the 1/batch factor for the mean-loss parameter
    // gradient is applied once at the end.
    let mut param_grad = if want_params { Some(vec![0.0; params.len()]) } else { None };
    let mut delta = vec![0.0; b * classes];
    for i in 0..b {
        for j in 0..classes {
            delta[i * classes + j] = fr.probs[i * classes + j];
        }
        delta[i * classes + labels[i]] -= 1.0;
    }

    let mut input_grad = None;
    for l in (0..n_layers).rev() {
        let (w_off, b_off, n_in, n_out) = offs[l];
        let prev: &[f64] = if l == 0 { inputs } else { &acts[l - 1] };
        if let Some(g) = param_grad.as_mut() {
            for i in 0..b {
                let d_row = &delta[i * n_out..(i + 1) * n_out];
                let a_row = &prev[i * n_in..(i + 1) * n_in];
                for o in 0..n_out {
                    let dv = d_row[o];
                    if dv != 0.0 {
                        axpy(dv, a_row, &mut g[w_off + o * n_in..w_off + (o + 1) * n_in]);
                        g[b_off + o] += dv;
                    }
                }
            }
        }
        if l == 0 && !want_inputs {
            break;
        }
        let mut prev_delta = vec![0.0; b * n_in];
        for i in 0..b {
            let d_row = &delta[i * n_out..(i + 1) * n_out];
            let out_row = &mut prev_delta[i * n_in..(i + 1) * n_in];
            for o in 0..n_out {
                let dv = d_row[o];
                if dv != 0.0 {
                    axpy(dv, &p[w_off + o * n_in..w_off + (o + 1) * n_in], out_row);
                }
            }
            if l > 0 {
                // ReLU gate: the stored activation is max(z, 0), so z <= 0
                // exactly where the activation is zero.
                let a_row = &prev[i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    if a_row[j] <= 0.0 {
                        out_row[j] = 0.0;
                    }
                }
            }
        }
        if l == 0 {
            input_grad = Some(prev_delta);
        } else {
            delta = prev_delta;
        }
    }

    if let Some(g) = param_grad.as_mut() {
        let inv = 1.0 / b as f64;
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    Ok(Computed { fr, param_grad, input_grad, correct })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

pub(crate) fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
