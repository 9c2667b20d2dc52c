//! Hyperspectral data handling: cubes and label maps, per-band
//! standardization, mirror-padded patch extraction, stratified splits, and a
//! synthetic block-mosaic generator for desk-scale experiments.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{
    stream_rng, STREAM_SPLIT, STREAM_SYNTH_NOISE, STREAM_SYNTH_SIGNATURES, STREAM_SYNTH_TILES,
};
use crate::{Error, Result};

/// A `height x width x bands` grid of spectra. Values are stored
/// pixel-interleaved (`((row * width) + col) * bands + band`) in `f32`, the
/// same layout and precision as the on-disk cube format; all downstream math
/// converts to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub values: Vec<f32>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::invalid("cube dimensions must all be at least 1"));
        }
        if values.len() != height * width * bands {
            return Err(Error::shape(format!(
                "cube payload has {} values, expected {}",
                values.len(),
                height * width * bands
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cube values"));
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            values,
        })
    }

    /// Spectrum of one pixel as a contiguous slice of length `bands`.
    #[inline]
    pub fn spectrum(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.bands;
        &self.values[start..start + self.bands]
    }

    #[inline]
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row < self.height && col < self.width
    }
}

/// Per-pixel class labels; 0 marks unlabeled pixels, classes are `1..=C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("label map dimensions must be at least 1"));
        }
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "label payload has {} values, expected {}",
                labels.len(),
                height * width
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    #[inline]
    pub fn label(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Number of classes, taken as the largest label present.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// All labeled pixels grouped by class (`result[c - 1]` holds class `c`),
    /// each group in row-major order.
    pub fn pixels_by_class(&self) -> Vec<Vec<(usize, usize)>> {
        let classes = self.num_classes();
        let mut groups = vec![Vec::new(); classes];
        for row in 0..self.height {
            for col in 0..self.width {
                let label = self.label(row, col);
                if label > 0 {
                    groups[label as usize - 1].push((row, col));
                }
            }
        }
        groups
    }
}

/// Per-band standardization statistics fitted on training pixels only.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    /// Identity statistics (mean 0, std 1), mostly for tests.
    pub fn identity(bands: usize) -> Self {
        NormStats {
            mean: vec![0.0; bands],
            std: vec![1.0; bands],
        }
    }
}

/// Per-band mean and population standard deviation over exactly the given
/// pixels. Standard deviations below `1e-8` are clamped to 1 so constant
/// bands pass through unscaled.
pub fn fit_normalizer(cube: &HsiCube, train_pixels: &[(usize, usize)]) -> Result<NormStats> {
    if train_pixels.is_empty() {
        return Err(Error::EmptyInput("train pixels for normalization"));
    }
    for &(r, c) in train_pixels {
        if !cube.contains(r, c) {
            return Err(Error::invalid(format!("pixel ({r}, {c}) outside the cube")));
        }
    }
    let n = train_pixels.len() as f64;
    let mut mean = vec![0.0; cube.bands];
    for &(r, c) in train_pixels {
        for (m, v) in mean.iter_mut().zip(cube.spectrum(r, c)) {
            *m += f64::from(*v);
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; cube.bands];
    for &(r, c) in train_pixels {
        for ((s, m), v) in var.iter_mut().zip(&mean).zip(cube.spectrum(r, c)) {
            let d = f64::from(*v) - m;
            *s += d * d;
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = libm::sqrt(s / n);
            if sd < 1e-8 {
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

/// A standardized `n x n x bands` window centered on one pixel.
/// `center_label` is 0 unless the patch was extracted with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub n: usize,
    pub bands: usize,
    pub values: Vec<f64>,
    pub center_label: u16,
}

impl Patch {
    #[inline]
    pub fn spectrum(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.n + col) * self.bands;
        &self.values[start..start + self.bands]
    }
}

/// Maps a possibly out-of-range index into `[0, len)` by mirror reflection
/// about the borders, excluding the edge sample from duplication at the
/// immediate fold: -1 -> 1, -2 -> 2, len -> len - 2.
#[inline]
fn reflect(idx: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = idx.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

/// Extracts the z-scored `n x n` window centered at `(row, col)`;
/// out-of-bounds coordinates are filled by mirror reflection.
pub fn extract_patch(
    cube: &HsiCube,
    stats: &NormStats,
    row: usize,
    col: usize,
    n: usize,
) -> Result<Patch> {
    if n == 0 || n % 2 == 0 {
        return Err(Error::invalid(format!(
            "patch side must be odd and positive, got {n}"
        )));
    }
    if !cube.contains(row, col) {
        return Err(Error::invalid(format!(
            "pixel ({row}, {col}) outside the cube"
        )));
    }
    if stats.bands() != cube.bands {
        return Err(Error::shape(format!(
            "normalizer has {} bands, cube has {}",
            stats.bands(),
            cube.bands
        )));
    }
    let half = (n as isize - 1) / 2;
    let mut values = Vec::with_capacity(n * n * cube.bands);
    for di in -half..=half {
        let r = reflect(row as isize + di, cube.height);
        for dj in -half..=half {
            let c = reflect(col as isize + dj, cube.width);
            for ((v, m), s) in cube.spectrum(r, c).iter().zip(&stats.mean).zip(&stats.std) {
                values.push((f64::from(*v) - m) / s);
            }
        }
    }
    Ok(Patch {
        n,
        bands: cube.bands,
        values,
        center_label: 0,
    })
}

/// [`extract_patch`] with the center label filled in from the label map.
pub fn extract_labeled_patch(
    cube: &HsiCube,
    labels: &LabelMap,
    stats: &NormStats,
    row: usize,
    col: usize,
    n: usize,
) -> Result<Patch> {
    if labels.height != cube.height || labels.width != cube.width {
        return Err(Error::shape(format!(
            "label map is {}x{}, cube is {}x{}",
            labels.height, labels.width, cube.height, cube.width
        )));
    }
    let mut patch = extract_patch(cube, stats, row, col, n)?;
    patch.center_label = labels.label(row, col);
    Ok(patch)
}

/// Per-class training budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainBudget {
    /// Exactly this many training pixels per class.
    Count(usize),
    /// This fraction of each class's labeled pixels, rounded to nearest
    /// (at least 1).
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub budget: TrainBudget,
    pub seed: u64,
}

/// Draws the per-class training pixels without replacement using the seeded
/// generator; the remaining labeled pixels become the test set. Both sides
/// are returned sorted by (row, col).
pub fn stratified_split(
    labels: &LabelMap,
    spec: &SplitSpec,
) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let groups = labels.pixels_by_class();
    if groups.iter().all(Vec::is_empty) {
        return Err(Error::EmptyInput("labeled pixels"));
    }
    if let TrainBudget::Fraction(f) = spec.budget {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::invalid(format!(
                "train fraction must be in (0, 1], got {f}"
            )));
        }
    }
    let mut rng = stream_rng(spec.seed, STREAM_SPLIT);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class_idx, group) in groups.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let class = (class_idx + 1) as u16;
        let requested = match spec.budget {
            TrainBudget::Count(k) => k,
            TrainBudget::Fraction(f) => {
                let k = libm::round(f * group.len() as f64) as usize;
                k.max(1)
            }
        };
        if requested > group.len() {
            return Err(Error::SplitDeficit {
                class,
                available: group.len(),
                requested,
            });
        }
        let mut shuffled = group.clone();
        shuffled.shuffle(&mut rng);
        train.extend_from_slice(&shuffled[..requested]);
        test.extend_from_slice(&shuffled[requested..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Generates a synthetic scene: labels form a random block mosaic (one class
/// per `block_size x block_size` tile), each class has a fixed random
/// spectral signature in `[0, 1)` per band, and pixel spectra are the class
/// signature plus independent zero-mean Gaussian noise. Deterministic per
/// seed.
pub fn synth_generate(
    classes: usize,
    bands: usize,
    height: usize,
    width: usize,
    noise_std: f64,
    block_size: usize,
    seed: u64,
) -> Result<(HsiCube, LabelMap)> {
    if classes == 0 || bands == 0 || height == 0 || width == 0 || block_size == 0 {
        return Err(Error::invalid("synthetic generator counts must be at least 1"));
    }
    if classes > usize::from(u16::MAX) {
        return Err(Error::invalid(format!("too many classes: {classes}")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!(
            "noise std must be finite and nonnegative, got {noise_std}"
        )));
    }

    let mut sig_rng = stream_rng(seed, STREAM_SYNTH_SIGNATURES);
    let signatures: Vec<f64> = (0..classes * bands)
        .map(|_| sig_rng.random::<f64>())
        .collect();

    let tiles_per_row = width.div_ceil(block_size);
    let tiles_per_col = height.div_ceil(block_size);
    let mut tile_rng = stream_rng(seed, STREAM_SYNTH_TILES);
    let tile_classes: Vec<u16> = (0..tiles_per_row * tiles_per_col)
        .map(|_| tile_rng.random_range(1..=classes as u16))
        .collect();

    let mut labels = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            let tile = (row / block_size) * tiles_per_row + col / block_size;
            labels.push(tile_classes[tile]);
        }
    }

    let mut noise_rng = stream_rng(seed, STREAM_SYNTH_NOISE);
    let mut values = Vec::with_capacity(height * width * bands);
    for &label in &labels {
        let sig = &signatures[(label as usize - 1) * bands..label as usize * bands];
        for &s in sig {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            values.push((s + noise_std * z) as f32);
        }
    }

    let cube = HsiCube::new(height, width, bands, values)?;
    let map = LabelMap::new(height, width, labels)?;
    Ok((cube, map))
}
