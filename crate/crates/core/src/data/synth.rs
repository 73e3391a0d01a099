//! Seeded synthetic classification sets.

use super::{DataError, Dataset};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

pub const IMAGE_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Gaussian clusters around points on a circle of radius 4.
    Blobs,
    /// Concentric annuli, class `c` at radius `c + 1`.
    Rings,
    /// 16×16×1 noise images; class 1 carries a bright rectangle.
    TinyImages,
}

impl std::str::FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blobs" => Ok(SynthKind::Blobs),
            "rings" => Ok(SynthKind::Rings),
            "tiny_images" | "tiny-images" => Ok(SynthKind::TinyImages),
            other => Err(format!("unknown dataset kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOptions {
    pub kind: SynthKind,
    pub samples: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub seed: u64,
    /// Class 0 is drawn `imbalance` times as often as each other class.
    #[serde(default = "default_imbalance")]
    pub imbalance: f64,
    /// Standard deviation of the additive Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Feature count for blobs (at least 2).
    #[serde(default = "default_features")]
    pub features: usize,
    /// Rectangle area as a fraction of the image, for tiny images.
    #[serde(default = "default_object_fraction")]
    pub object_fraction: f64,
    /// Rectangle intensity added on top of the noise, for tiny images.
    #[serde(default = "default_brightness")]
    pub brightness: f64,
}

fn default_classes() -> usize {
    2
}
fn default_imbalance() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.1
}
fn default_features() -> usize {
    2
}
fn default_object_fraction() -> f64 {
    0.1
}
fn default_brightness() -> f64 {
    1.0
}

impl SynthOptions {
    pub fn new(kind: SynthKind, samples: usize, seed: u64) -> Self {
        Self {
            kind,
            samples,
            classes: default_classes(),
            seed,
            imbalance: default_imbalance(),
            noise: default_noise(),
            features: default_features(),
            object_fraction: default_object_fraction(),
            brightness: default_brightness(),
        }
    }
}

/// Splits `samples` over the classes in proportion `[ratio, 1, 1, ...]`,
/// assigning leftovers by largest remainder.
fn class_counts(samples: usize, classes: usize, ratio: f64) -> Result<Vec<usize>, DataError> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(DataError::Invalid(format!("imbalance ratio must be finite and positive, got {ratio}")));
    }
    let total = ratio + (classes - 1) as f64;
    let ideal: Vec<f64> = (0..classes)
        .map(|c| samples as f64 * if c == 0 { ratio } else { 1.0 } / total)
        .collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| (ideal[b] - ideal[b].floor()).total_cmp(&(ideal[a] - ideal[a].floor())).then(a.cmp(&b)));
    let short = samples - counts.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        counts[c] += 1;
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(DataError::Invalid(format!(
            "imbalance ratio {ratio} leaves class {empty} without samples at {samples} samples"
        )));
    }
    Ok(counts)
}

pub fn synthesize(opts: &SynthOptions) -> Result<Dataset, DataError> {
    if opts.classes < 2 {
        return Err(DataError::Invalid("need at least two classes".into()));
    }
    if opts.samples < opts.classes {
        return Err(DataError::Invalid(format!(
            "{} samples cannot cover {} classes",
            opts.samples, opts.classes
        )));
    }
    if !(opts.noise.is_finite() && opts.noise >= 0.0) {
        return Err(DataError::Invalid(format!("noise must be finite and non-negative, got {}", opts.noise)));
    }
    let counts = class_counts(opts.samples, opts.classes, opts.imbalance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, opts.noise).expect("validated noise");
    let (shape, features) = match opts.kind {
        SynthKind::Blobs => {
            if opts.features < 2 {
                return Err(DataError::Invalid("blobs need at least two features".into()));
            }
            let mut f = Vec::with_capacity(labels.len() * opts.features);
            for &y in &labels {
                let angle = TAU * y as f64 / opts.classes as f64;
                for j in 0..opts.features {
                    let center = match j {
                        0 => 4.0 * angle.cos(),
                        1 => 4.0 * angle.sin(),
                        _ => 0.0,
                    };
                    f.push((center + noise.sample(&mut rng)) as f32);
                }
            }
            (vec![opts.features], f)
        }
        SynthKind::Rings => {
            let mut f = Vec::with_capacity(labels.len() * 2);
            for &y in &labels {
                let angle = rng.random_range(0.0..TAU);
                let radius = (y + 1) as f64 + noise.sample(&mut rng);
                f.push((radius * angle.cos()) as f32);
                f.push((radius * angle.sin()) as f32);
            }
            (vec![2], f)
        }
        SynthKind::TinyImages => {
            if opts.classes != 2 {
                return Err(DataError::Invalid("tiny images are a two-class task".into()));
            }
            if !(opts.object_fraction > 0.0 && opts.object_fraction <= 1.0) {
                return Err(DataError::Invalid(format!(
                    "object fraction must lie in (0, 1], got {}",
                    opts.object_fraction
                )));
            }
            let px = IMAGE_SIDE * IMAGE_SIDE;
            let mut f = Vec::with_capacity(labels.len() * px);
            for &y in &labels {
                let mut img: Vec<f64> = (0..px).map(|_| noise.sample(&mut rng)).collect();
                if y == 1 {
                    draw_rectangle(&mut img, opts.object_fraction, opts.brightness, &mut rng);
                }
                f.extend(img.into_iter().map(|v| v as f32));
            }
            (vec![IMAGE_SIDE, IMAGE_SIDE, 1], f)
        }
    };
    Dataset::new(shape, features, labels, opts.classes)
}

/// Adds `brightness` over a randomly placed rectangle covering roughly
/// `fraction` of the image, with a random aspect ratio in `[1/2, 2]`.
fn draw_rectangle(img: &mut [f64], fraction: f64, brightness: f64, rng: &mut impl Rng) {
    let area = (fraction * (IMAGE_SIDE * IMAGE_SIDE) as f64).max(1.0);
    let aspect: f64 = 2f64.powf(rng.random_range(-1.0..=1.0));
    let h = ((area * aspect).sqrt().round() as usize).clamp(1, IMAGE_SIDE);
    let w = ((area / h as f64).round() as usize).clamp(1, IMAGE_SIDE);
    let top = rng.random_range(0..=IMAGE_SIDE - h);
    let left = rng.random_range(0..=IMAGE_SIDE - w);
    for r in top..top + h {
        for c in left..left + w {
            img[r * IMAGE_SIDE + c] += brightness;
        }
    }
}
