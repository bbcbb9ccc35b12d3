//! In-memory datasets: IDX file ingestion, synthetic generators, batching.
//!
//! Inputs are always dense row-major `f64` in `[0,1]`. The IDX reader/writer
//! covers the classic big-endian image/label pair so real digit data can be
//! dropped in, while the synthetic generators keep the whole test suite
//! self-contained: isotropic Gaussian blobs for small geometric tasks and a
//! high-dimensional block-template task that stays separable under large
//! l-inf perturbations.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Standard deviation of the Gaussian blobs around their class means.
pub const GAUSSIAN_SIGMA: f64 = 0.05;
/// In-block / out-of-block template intensities for [`synth_blocks`].
pub const BLOCK_HI: f64 = 0.9;
pub const BLOCK_LO: f64 = 0.1;
/// Noise added on top of the block template.
pub const BLOCK_SIGMA: f64 = 0.1;

/// Pinned seeds for [`digits_preset`], so the preset is identical on every
/// machine and across sessions.
pub const DIGITS_TRAIN_SEED: u64 = 7001;
pub const DIGITS_TEST_SEED: u64 = 7002;

/// A labeled classification dataset; `inputs` is `len x dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Non-empty, consistent shapes, labels valid, inputs within `[0,1]`.
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::InvalidSpec("empty dataset".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "dataset needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.dim == 0 || self.inputs.len() != self.labels.len() * self.dim {
            return Err(Error::ShapeMismatch(format!(
                "{} input values for {} labels of dim {}",
                self.inputs.len(),
                self.labels.len(),
                self.dim
            )));
        }
        for &y in &self.labels {
            if y >= self.classes {
                return Err(Error::LabelOutOfRange { label: y, classes: self.classes });
            }
        }
        if self.inputs.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidSpec("inputs outside [0,1]".into()));
        }
        Ok(())
    }

    /// Deterministic subset of `n` samples drawn by a seeded permutation;
    /// used for desk-scale presets on larger datasets.
    pub fn seeded_subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidConfig(format!(
                "subset of {n} from a dataset of {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        let mut inputs = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for &i in &idx {
            inputs.extend_from_slice(self.input_row(i));
            labels.push(self.labels[i]);
        }
        Ok(Dataset { inputs, labels, dim: self.dim, classes: self.classes })
    }
}

/// One minibatch; `indices` records where each row came from in the source
/// dataset.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
    pub dim: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(buf: &[u8], off: usize, what: &str) -> Result<u32> {
    let end = off + 4;
    if buf.len() < end {
        return Err(Error::DataFormat(format!("truncated IDX file reading {what}")));
    }
    Ok(u32::from_be_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]]))
}

/// Loads a big-endian IDX image/label file pair. Pixels are `u8` scaled to
/// `[0,1]` by division by 255; the `H x W` image grid flattens to one row.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = std::fs::read(images_path)?;
    let lab = std::fs::read(labels_path)?;

    let magic = read_u32_be(&img, 0, "images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::DataFormat(format!(
            "bad magic {magic:#010x} in {} (want {IDX_IMAGES_MAGIC:#010x})",
            images_path.display()
        )));
    }
    let n = read_u32_be(&img, 4, "image count")? as usize;
    let h = read_u32_be(&img, 8, "image height")? as usize;
    let w = read_u32_be(&img, 12, "image width")? as usize;
    let dim = h * w;
    if img.len() != 16 + n * dim {
        return Err(Error::DataFormat(format!(
            "truncated IDX images: {} bytes for {n} images of {h}x{w}",
            img.len()
        )));
    }

    let magic = read_u32_be(&lab, 0, "labels magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::DataFormat(format!(
            "bad magic {magic:#010x} in {} (want {IDX_LABELS_MAGIC:#010x})",
            labels_path.display()
        )));
    }
    let n_lab = read_u32_be(&lab, 4, "label count")? as usize;
    if n_lab != n {
        return Err(Error::DataFormat(format!(
            "count mismatch: {n} images but {n_lab} labels"
        )));
    }
    if lab.len() != 8 + n_lab {
        return Err(Error::DataFormat(format!(
            "truncated IDX labels: {} bytes for {n_lab} labels",
            lab.len()
        )));
    }

    let inputs: Vec<f64> = img[16..].iter().map(|&px| f64::from(px) / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&y| y as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let ds = Dataset { inputs, labels, dim, classes: classes.max(2) };
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset as an IDX image/label pair (images `dim x 1`, pixels
/// quantized to `u8` by `round(v * 255)`). Datasets whose values are exact
/// `k/255` multiples — anything read from IDX — round-trip identically.
pub fn write_idx(images_path: &Path, labels_path: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    if ds.classes > 256 {
        return Err(Error::DataFormat(format!(
            "{} classes do not fit u8 labels",
            ds.classes
        )));
    }
    let n = ds.len();
    let mut img = Vec::with_capacity(16 + n * ds.dim);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(ds.dim as u32).to_be_bytes());
    img.extend_from_slice(&1u32.to_be_bytes());
    img.extend(ds.inputs.iter().map(|&v| (v * 255.0).round() as u8));

    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&y| y as u8));

    std::fs::write(images_path, img)?;
    std::fs::write(labels_path, lab)?;
    Ok(())
}

/// `classes` isotropic Gaussian blobs (sigma [`GAUSSIAN_SIGMA`]) whose means
/// sit at the vertices of a regular simplex with pairwise distance
/// `separation`, centered on `(0.5, ..., 0.5)`; samples are clipped into
/// `[0,1]`. Requires `dim >= classes` so the simplex embeds coordinatewise.
pub fn synth_gaussians(
    n_per_class: usize,
    dim: usize,
    separation: f64,
    classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || classes < 2 || dim < classes {
        return Err(Error::InvalidConfig(format!(
            "gaussian task needs n_per_class >= 1 and 2 <= classes <= dim, got n={n_per_class} c={classes} d={dim}"
        )));
    }
    if !(separation > 0.0) {
        return Err(Error::InvalidConfig(format!("separation must be positive, got {separation}")));
    }
    // Mean of class k: 0.5 + s/sqrt(2) * (e_k - 1/c) on the first c
    // coordinates; pairwise distances are exactly `separation`.
    let shift = separation / 2.0f64.sqrt();
    let max_off = shift * (1.0 - 1.0 / classes as f64);
    if max_off > 0.5 {
        return Err(Error::InvalidConfig(format!(
            "separation {separation} pushes class means outside [0,1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_class * classes;
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..classes {
        for _ in 0..n_per_class {
            for j in 0..dim {
                let mean = if j < classes {
                    0.5 + shift * ((if j == k { 1.0 } else { 0.0 }) - 1.0 / classes as f64)
                } else {
                    0.5
                };
                let noise: f64 = rng.sample(StandardNormal);
                inputs.push((mean + GAUSSIAN_SIGMA * noise).clamp(0.0, 1.0));
            }
            labels.push(k);
        }
    }
    let ds = Dataset { inputs, labels, dim, classes };
    ds.validate()?;
    Ok(ds)
}

/// High-contrast block-template task: class `k`'s template is [`BLOCK_HI`] on
/// its own coordinate block and [`BLOCK_LO`] elsewhere, plus clipped Gaussian
/// noise ([`BLOCK_SIGMA`]). With the default intensities the templates stay
/// linearly separable under any l-inf perturbation below
/// `(BLOCK_HI - BLOCK_LO) / 2 = 0.4`, which makes the task a stand-in for
/// digit data in robust-training runs at eps = 0.3.
pub fn synth_blocks(n_per_class: usize, dim: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || classes < 2 || dim < classes {
        return Err(Error::InvalidConfig(format!(
            "block task needs n_per_class >= 1 and 2 <= classes <= dim, got n={n_per_class} c={classes} d={dim}"
        )));
    }
    let base = dim / classes;
    let rem = dim % classes;
    // Class k owns coordinates [k*base, (k+1)*base) plus, when k < dim %
    // classes, the round-robin leftover coordinate classes*base + k.
    let block_of = |j: usize| -> usize {
        if j < base * classes {
            j / base
        } else {
            j - base * classes
        }
    };
    debug_assert!(rem < classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_class * classes;
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..classes {
        for _ in 0..n_per_class {
            for j in 0..dim {
                let mean = if block_of(j) == k { BLOCK_HI } else { BLOCK_LO };
                let noise: f64 = rng.sample(StandardNormal);
                inputs.push((mean + BLOCK_SIGMA * noise).clamp(0.0, 1.0));
            }
            labels.push(k);
        }
    }
    let ds = Dataset { inputs, labels, dim, classes };
    ds.validate()?;
    Ok(ds)
}

/// Fixed desk-scale digit-task preset: the 784-dimensional, 10-class block
/// task with 2,000 training and 1,000 test samples drawn from the pinned
/// seeds [`DIGITS_TRAIN_SEED`] / [`DIGITS_TEST_SEED`]. Robust-training runs
/// quoted against this preset are comparable across machines.
pub fn digits_preset() -> Result<(Dataset, Dataset)> {
    let train = synth_blocks(200, 784, 10, DIGITS_TRAIN_SEED)?;
    let test = synth_blocks(100, 784, 10, DIGITS_TEST_SEED)?;
    Ok((train, test))
}

/// Splits the dataset into minibatches. With `shuffle` the order is a seeded
/// permutation; the final short batch is kept, and the union of all `indices`
/// covers the dataset exactly once.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Batch>> {
    ds.validate()?;
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut out = Vec::with_capacity(ds.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut inputs = Vec::with_capacity(chunk.len() * ds.dim);
        let mut labels = Vec::with_capacity(chunk.len());
        for &i in chunk {
            inputs.extend_from_slice(ds.input_row(i));
            labels.push(ds.labels[i]);
        }
        out.push(Batch { inputs, labels, indices: chunk.to_vec(), dim: ds.dim });
    }
    Ok(out)
}
