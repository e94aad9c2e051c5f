//! Mode assignment, class-distribution divergence and gradient diagnostics.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::data::{mixture_density, MixtureSpec};
use crate::error::{Error, Result};

/// Fraction of samples a mode needs to count as covered.
pub const COVERAGE_THRESHOLD: f64 = 0.02;
/// Samples farther than this many std from every center belong to no mode.
pub const ASSIGN_RADIUS_STD: f64 = 3.0;

const DISTRIBUTION_TOL: f64 = 1e-9;

/// Nearest center within 3 std, ties going to the lowest index.
pub fn assign_mode(spec: &MixtureSpec, x: [f64; 2]) -> Option<usize> {
    let limit = (ASSIGN_RADIUS_STD * spec.std).powi(2);
    let mut best: Option<(usize, f64)> = None;
    for (k, c) in spec.centers.iter().enumerate() {
        let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
        if d2 <= limit && best.map_or(true, |(_, b)| d2 < b) {
            best = Some((k, d2));
        }
    }
    best.map(|(k, _)| k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub per_mode_freq: Vec<f64>,
    pub none_freq: f64,
    pub n_covered: usize,
    pub js_to_data: f64,
}

impl ModeReport {
    pub fn n_modes(&self) -> usize {
        self.per_mode_freq.len()
    }
}

/// Tabulates assignments of `samples` (one 2D point per row).
///
/// `js_to_data` compares the renormalized per-mode frequencies (NONE
/// excluded) against the spec weights. If no sample lands on any mode the
/// divergence is reported as 1.
pub fn mode_frequencies(spec: &MixtureSpec, samples: ArrayView2<f64>) -> Result<ModeReport> {
    if samples.nrows() == 0 {
        return Err(Error::Empty("mode frequency samples"));
    }
    if samples.ncols() != 2 {
        return Err(Error::shape("mode_frequencies", "2 columns", samples.ncols()));
    }
    let k = spec.n_modes();
    let mut counts = vec![0usize; k];
    let mut none = 0usize;
    for row in samples.rows() {
        match assign_mode(spec, [row[0], row[1]]) {
            Some(m) => counts[m] += 1,
            None => none += 1,
        }
    }
    let n = samples.nrows() as f64;
    let per_mode_freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let none_freq = none as f64 / n;
    let n_covered = per_mode_freq.iter().filter(|&&f| f >= COVERAGE_THRESHOLD).count();
    let assigned = samples.nrows() - none;
    let js_to_data = if assigned == 0 {
        1.0
    } else {
        let model: Vec<f64> = counts.iter().map(|&c| c as f64 / assigned as f64).collect();
        js_divergence(&spec.weights, &model)?
    };
    Ok(ModeReport {
        per_mode_freq,
        none_freq,
        n_covered,
        js_to_data,
    })
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidDistribution(format!("{name} has a negative or non-finite entry")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::InvalidDistribution(format!("{name} sums to {total}")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in bits, so the result lies in `[0, 1]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("js_divergence", p.len(), q.len()));
    }
    if p.is_empty() {
        return Err(Error::Empty("distribution"));
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    let kl_to_mid = |a: f64, m: f64| if a > 0.0 { a * (a / m).log2() } else { 0.0 };
    let js: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * kl_to_mid(a, m) + 0.5 * kl_to_mid(b, m)
        })
        .sum();
    Ok(js.clamp(0.0, 1.0))
}

/// `r(x) / (r(x) + g(x))` for the real and fake mixtures.
pub fn optimal_disc(real: &MixtureSpec, fake: &MixtureSpec, x: [f64; 2]) -> Result<f64> {
    let r = mixture_density(real, x);
    let g = mixture_density(fake, x);
    if r + g < f64::MIN_POSITIVE {
        return Err(Error::UndefinedPoint { x: x[0], y: x[1] });
    }
    Ok(r / (r + g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradDiagnostics {
    pub cosine: f64,
    pub norm_ratio: f64,
}

/// Cosine and `|a| / |b|` of two flattened gradients. When exactly one side
/// is zero the cosine is 0 and the ratio is 0 or infinite.
pub fn grad_diagnostics(a: &[f64], b: &[f64]) -> Result<GradDiagnostics> {
    if a.len() != b.len() {
        return Err(Error::shape("grad_diagnostics", a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return Err(Error::Degenerate("both gradients are zero".into()));
    }
    let cosine = if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    };
    Ok(GradDiagnostics {
        cosine,
        norm_ratio: na / nb,
    })
}
