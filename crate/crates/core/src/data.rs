//! Toy 2D Gaussian mixtures and latent noise.
//!
//! Randomness is seed-deterministic. Independent consumers of one run seed
//! draw from separate ChaCha streams: `stream_rng(seed, stream)` seeds
//! ChaCha8 with `seed` and selects word-stream `stream`, so parallel tasks
//! never share a generator.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;

/// Mode weights (in %) of the 12-mode density-graded spiral, innermost first.
pub const SPIRAL12_WEIGHTS_PERCENT: [f64; 12] = [2.0, 3.1, 4.3, 5.4, 6.6, 7.7, 8.9, 10.0, 11.0, 12.0, 13.0, 15.0];

pub const RING8_RADIUS: f64 = 2.0;
pub const RING8_STD: f64 = 0.02;
pub const SPIRAL_STD: f64 = 0.05;
/// Gaussian tail kept inside [-1, 1] when the data is normalized for training.
pub const NORMALIZE_MARGIN_STD: f64 = 4.0;
const SPIRAL_INNER_RADIUS: f64 = 0.25;
const SPIRAL_OUTER_RADIUS: f64 = 2.0;
const SPIRAL_REVOLUTIONS: f64 = 2.25;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub centers: Vec<[f64; 2]>,
    pub std: f64,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn new(centers: Vec<[f64; 2]>, std: f64, weights: Vec<f64>) -> Result<Self> {
        if centers.is_empty() || centers.len() != weights.len() {
            return Err(Error::Config(format!(
                "mixture needs one weight per center ({} centers, {} weights)",
                centers.len(),
                weights.len()
            )));
        }
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Config(format!("mixture std must be positive, got {std}")));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                if centers[i] == centers[j] {
                    return Err(Error::Config(format!("centers {i} and {j} coincide")));
                }
            }
        }
        Ok(Self { centers, std, weights })
    }

    pub fn n_modes(&self) -> usize {
        self.centers.len()
    }

    /// Half-width of the smallest origin-centred square holding every center
    /// plus `NORMALIZE_MARGIN_STD` standard deviations.
    pub fn extent(&self) -> f64 {
        let reach = self.centers.iter().map(|c| c[0].abs().max(c[1].abs())).fold(0.0, f64::max);
        reach + NORMALIZE_MARGIN_STD * self.std
    }

    /// Same mixture with every coordinate (and the std) multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            centers: self.centers.iter().map(|c| [c[0] * factor, c[1] * factor]).collect(),
            std: self.std * factor,
            weights: self.weights.clone(),
        }
    }

    /// Same geometry shifted by `offset`.
    pub fn translated(&self, offset: [f64; 2]) -> Self {
        Self {
            centers: self.centers.iter().map(|c| [c[0] + offset[0], c[1] + offset[1]]).collect(),
            ..self.clone()
        }
    }
}

/// `n_modes` equal-weight modes equally spaced on a circle, the first at `(radius, 0)`.
pub fn ring_mixture(n_modes: usize, radius: f64, std: f64) -> Result<MixtureSpec> {
    if n_modes < 2 {
        return Err(Error::Config(format!("ring needs at least 2 modes, got {n_modes}")));
    }
    if !(radius > 0.0) {
        return Err(Error::Config(format!("ring radius must be positive, got {radius}")));
    }
    let centers = (0..n_modes)
        .map(|k| {
            let angle = 2.0 * PI * k as f64 / n_modes as f64;
            [radius * angle.cos(), radius * angle.sin()]
        })
        .collect();
    MixtureSpec::new(centers, std, vec![1.0 / n_modes as f64; n_modes])
}

/// Modes along an expanding spiral (`r = r0 + k i`, angle `w i`) spanning
/// 2.25 revolutions, with weights growing outward. The 12-mode spiral uses
/// the tabulated weights in [`SPIRAL12_WEIGHTS_PERCENT`] (normalized); other
/// sizes use a linear ramp with the same outer/inner ratio of 7.5.
/// Adjacent modes stay more than 6 std apart for up to 12 modes.
pub fn spiral_mixture(n_modes: usize) -> Result<MixtureSpec> {
    spiral_mixture_with_std(n_modes, SPIRAL_STD)
}

pub fn spiral_mixture_with_std(n_modes: usize, std: f64) -> Result<MixtureSpec> {
    if n_modes < 2 {
        return Err(Error::Config(format!("spiral needs at least 2 modes, got {n_modes}")));
    }
    let last = (n_modes - 1) as f64;
    let step_angle = SPIRAL_REVOLUTIONS * 2.0 * PI / last;
    let step_radius = (SPIRAL_OUTER_RADIUS - SPIRAL_INNER_RADIUS) / last;
    let centers = (0..n_modes)
        .map(|i| {
            let r = SPIRAL_INNER_RADIUS + step_radius * i as f64;
            let angle = step_angle * i as f64;
            [r * angle.cos(), r * angle.sin()]
        })
        .collect();
    let raw: Vec<f64> = if n_modes == SPIRAL12_WEIGHTS_PERCENT.len() {
        SPIRAL12_WEIGHTS_PERCENT.to_vec()
    } else {
        (0..n_modes).map(|i| 1.0 + 6.5 * i as f64 / last).collect()
    };
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    // Push the rounding residue onto the largest mode so the sum is 1 to the last bit.
    let residue = 1.0 - weights.iter().sum::<f64>();
    *weights.last_mut().unwrap() += residue;
    MixtureSpec::new(centers, std, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetPreset {
    Ring8,
    Spiral12,
}

impl DatasetPreset {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetPreset::Ring8 => "ring8",
            DatasetPreset::Spiral12 => "spiral12",
        }
    }

    pub fn build(&self) -> Result<MixtureSpec> {
        match self {
            DatasetPreset::Ring8 => ring_mixture(8, RING8_RADIUS, RING8_STD),
            DatasetPreset::Spiral12 => spiral_mixture(12),
        }
    }
}

impl FromStr for DatasetPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring8" => Ok(DatasetPreset::Ring8),
            "spiral12" => Ok(DatasetPreset::Spiral12),
            other => Err(Error::Config(format!("unknown dataset preset `{other}`"))),
        }
    }
}

impl fmt::Display for DatasetPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Real samples together with the mode each was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSamples {
    pub points: Batch,
    pub modes: Vec<usize>,
}

pub fn sample_real(spec: &MixtureSpec, n: usize, seed: u64) -> Result<LabeledSamples> {
    sample_real_with(spec, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Mode by categorical draw on the weights, then an isotropic Gaussian
/// around its center.
pub fn sample_real_with<R: Rng + ?Sized>(spec: &MixtureSpec, n: usize, rng: &mut R) -> Result<LabeledSamples> {
    if n == 0 {
        return Err(Error::Empty("real sample count"));
    }
    let pick = WeightedIndex::new(&spec.weights)
        .map_err(|e| Error::InvalidDistribution(format!("mixture weights: {e}")))?;
    let mut points = Array2::zeros((n, 2));
    let mut modes = Vec::with_capacity(n);
    for mut row in points.rows_mut() {
        let k = pick.sample(rng);
        let c = spec.centers[k];
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        row[0] = c[0] + spec.std * dx;
        row[1] = c[1] + spec.std * dy;
        modes.push(k);
    }
    Ok(LabeledSamples {
        points: Batch::new(points)?,
        modes,
    })
}

/// Isotropic Gaussian mixture density at `x`.
pub fn mixture_density(spec: &MixtureSpec, x: [f64; 2]) -> f64 {
    let var = spec.std * spec.std;
    let norm = 1.0 / (2.0 * PI * var);
    spec.centers
        .iter()
        .zip(&spec.weights)
        .map(|(c, w)| {
            let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
            w * norm * (-0.5 * d2 / var).exp()
        })
        .sum()
}

/// Standard normal latent noise of dimension `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub dim: usize,
}

impl NoiseSpec {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("noise dim must be at least 1".into()));
        }
        Ok(Self { dim })
    }
}

pub fn sample_noise(spec: &NoiseSpec, n: usize, seed: u64) -> Result<Batch> {
    sample_noise_with(spec, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_noise_with<R: Rng + ?Sized>(spec: &NoiseSpec, n: usize, rng: &mut R) -> Result<Batch> {
    if n == 0 {
        return Err(Error::Empty("noise sample count"));
    }
    Batch::new(Array2::from_shape_simple_fn((n, spec.dim), || rng.sample(StandardNormal)))
}
