//! Generator and discriminator cost formulations.
//!
//! Everything here is expressed through the discriminator logit `l = D_l`
//! with `D_p = sigmoid(l)`. A generator cost contributes to the parameter
//! gradient only through its per-sample coefficient `dJ_G/dl`, so that
//!
//! ```text
//! grad_theta J_G^batch = R * sum_i coeff(l_i) * d l_i / d theta
//! ```
//!
//! where `R` is a batch-level rescaling factor treated as a constant (no
//! gradient flows through it).

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::{chain_forward, chain_generator_discriminator, Batch, DenseNet, ParamGradient};

pub const DEFAULT_EPS_R: f64 = 1e-8;

/// `1 / (1 + exp(-l))`, branching on sign so neither side overflows.
pub fn sigmoid(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(l))` without cancellation for large `|l|`.
pub fn log_sigmoid(logit: f64) -> f64 {
    if logit >= 0.0 {
        -(-logit).exp().ln_1p()
    } else {
        logit - logit.exp().ln_1p()
    }
}

/// `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    -log_sigmoid(-x)
}

/// `2 * asinh(exp(y))`, kept finite for large `y`.
fn two_asinh_exp(y: f64) -> f64 {
    if y > 20.0 {
        2.0 * (y + std::f64::consts::LN_2 + (-2.0 * y).exp() / 4.0)
    } else {
        2.0 * y.exp().asinh()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Mm,
    Ns,
    MmNsat,
    MmUnit,
    NsUnit,
    Hinge,
    Ls,
    /// `(1 - a) * NS + a * MM`.
    LincombNsMm(f64),
    /// `(1 - a) * NS + a * MM-nsat`.
    LincombNsMmNsat(f64),
    NsAdd(f64),
    MmNsatAdd(f64),
    NsExp2,
    MmNsatExp2,
    NsExpHalf,
    MmNsatExpHalf,
}

impl Variant {
    pub const TAGS: [&'static str; 15] = [
        "MM",
        "NS",
        "MM_NSAT",
        "MM_UNIT",
        "NS_UNIT",
        "HINGE",
        "LS",
        "LINCOMB_NS_MM",
        "LINCOMB_NS_MMNSAT",
        "NS_ADD",
        "MM_NSAT_ADD",
        "NS_EXP2",
        "MM_NSAT_EXP2",
        "NS_EXP_HALF",
        "MM_NSAT_EXP_HALF",
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Variant::Mm => "MM",
            Variant::Ns => "NS",
            Variant::MmNsat => "MM_NSAT",
            Variant::MmUnit => "MM_UNIT",
            Variant::NsUnit => "NS_UNIT",
            Variant::Hinge => "HINGE",
            Variant::Ls => "LS",
            Variant::LincombNsMm(_) => "LINCOMB_NS_MM",
            Variant::LincombNsMmNsat(_) => "LINCOMB_NS_MMNSAT",
            Variant::NsAdd(_) => "NS_ADD",
            Variant::MmNsatAdd(_) => "MM_NSAT_ADD",
            Variant::NsExp2 => "NS_EXP2",
            Variant::MmNsatExp2 => "MM_NSAT_EXP2",
            Variant::NsExpHalf => "NS_EXP_HALF",
            Variant::MmNsatExpHalf => "MM_NSAT_EXP_HALF",
        }
    }

    /// Weight (LINCOMB) or additive constant (ADD), where the variant has one.
    pub fn param(&self) -> Option<f64> {
        match *self {
            Variant::LincombNsMm(a) | Variant::LincombNsMmNsat(a) | Variant::NsAdd(a) | Variant::MmNsatAdd(a) => Some(a),
            _ => None,
        }
    }

    pub fn takes_param(tag: &str) -> bool {
        matches!(tag, "LINCOMB_NS_MM" | "LINCOMB_NS_MMNSAT" | "NS_ADD" | "MM_NSAT_ADD")
    }

    /// Builds a variant from its tag and optional parameter.
    pub fn from_tag(tag: &str, a: Option<f64>) -> Result<Self> {
        let need = |a: Option<f64>| {
            a.ok_or_else(|| Error::Config(format!("formulation {tag} requires a parameter `a`")))
        };
        let v = match tag {
            "MM" => Variant::Mm,
            "NS" => Variant::Ns,
            "MM_NSAT" => Variant::MmNsat,
            "MM_UNIT" => Variant::MmUnit,
            "NS_UNIT" => Variant::NsUnit,
            "HINGE" => Variant::Hinge,
            "LS" => Variant::Ls,
            "LINCOMB_NS_MM" => Variant::LincombNsMm(need(a)?),
            "LINCOMB_NS_MMNSAT" => Variant::LincombNsMmNsat(need(a)?),
            "NS_ADD" => Variant::NsAdd(need(a)?),
            "MM_NSAT_ADD" => Variant::MmNsatAdd(need(a)?),
            "NS_EXP2" => Variant::NsExp2,
            "MM_NSAT_EXP2" => Variant::MmNsatExp2,
            "NS_EXP_HALF" => Variant::NsExpHalf,
            "MM_NSAT_EXP_HALF" => Variant::MmNsatExpHalf,
            other => return Err(Error::UnknownFormulation(other.to_string())),
        };
        Ok(v)
    }

    fn discriminator_cost(&self) -> DiscCost {
        match self {
            Variant::Hinge => DiscCost::Hinge,
            Variant::Ls => DiscCost::LeastSquares,
            _ => DiscCost::CrossEntropy,
        }
    }
}

/// Accepts `TAG` or `TAG(a)`.
impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.split_once('(') {
            Some((tag, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::UnknownFormulation(s.to_string()))?;
                let a: f64 = inner
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad parameter in formulation `{s}`")))?;
                Variant::from_tag(tag.trim(), Some(a))
            }
            None => Variant::from_tag(s, None),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.param() {
            Some(a) => write!(f, "{}({})", self.tag(), a),
            None => f.write_str(self.tag()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscCost {
    CrossEntropy,
    Hinge,
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostFormulation {
    pub variant: Variant,
    pub eps_r: f64,
}

impl CostFormulation {
    pub fn new(variant: Variant, eps_r: f64) -> Result<Self> {
        if !(eps_r > 0.0) {
            return Err(Error::Config(format!("eps_R must be positive, got {eps_r}")));
        }
        match variant {
            Variant::LincombNsMm(a) | Variant::LincombNsMmNsat(a) if !(0.0..=1.0).contains(&a) => {
                return Err(Error::Config(format!("LINCOMB weight must lie in [0, 1], got {a}")));
            }
            Variant::NsAdd(a) | Variant::MmNsatAdd(a) if !(a >= 0.0) => {
                return Err(Error::Config(format!("ADD constant must be >= 0, got {a}")));
            }
            _ => {}
        }
        Ok(Self { variant, eps_r })
    }

    pub fn with_default_eps(variant: Variant) -> Result<Self> {
        Self::new(variant, DEFAULT_EPS_R)
    }

    /// Same formulation with an arbitrary `eps_r`, including zero. Only for
    /// probing the exact rescaling formulas.
    pub fn unchecked(variant: Variant, eps_r: f64) -> Self {
        Self { variant, eps_r }
    }

    pub fn tag(&self) -> &'static str {
        self.variant.tag()
    }

    pub fn disc_cost(&self) -> DiscCost {
        self.variant.discriminator_cost()
    }
}

/// Discriminator logits on a real and a generated batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscSignals {
    pub logits_real: Vec<f64>,
    pub logits_fake: Vec<f64>,
}

impl DiscSignals {
    pub fn new(logits_real: Vec<f64>, logits_fake: Vec<f64>) -> Result<Self> {
        if logits_real.is_empty() || logits_fake.is_empty() {
            return Err(Error::Empty("discriminator signals"));
        }
        Ok(Self { logits_real, logits_fake })
    }

    /// Signals for a generator step, which only sees generated samples.
    pub fn fake_only(logits_fake: Vec<f64>) -> Result<Self> {
        if logits_fake.is_empty() {
            return Err(Error::Empty("generated batch"));
        }
        Ok(Self {
            logits_real: Vec::new(),
            logits_fake,
        })
    }

    pub fn probs_real(&self) -> Vec<f64> {
        self.logits_real.iter().map(|&l| sigmoid(l)).collect()
    }

    pub fn probs_fake(&self) -> Vec<f64> {
        self.logits_fake.iter().map(|&l| sigmoid(l)).collect()
    }

    /// Arithmetic mean of `D_p(G(z_i))`.
    pub fn mean_fake_prob(&self) -> f64 {
        mean(self.logits_fake.iter().map(|&l| sigmoid(l)))
    }

    /// Mean of `1 - D_p(G(z_i))`, computed as `sigmoid(-l)` per sample.
    pub fn mean_fake_complement(&self) -> f64 {
        mean(self.logits_fake.iter().map(|&l| sigmoid(-l)))
    }
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    values.sum::<f64>() / n as f64
}

/// Per-sample `dJ_D/dl` on real and fake logits plus the batch-mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscCoeffs {
    pub real: Vec<f64>,
    pub fake: Vec<f64>,
    pub loss: f64,
}

/// Discriminator coefficients. The loss is the mean over each batch term;
/// the coefficients differentiate the per-sample loss, so a summed backward
/// pass yields the gradient of the summed loss.
pub fn d_logit_coeffs(formulation: &CostFormulation, signals: &DiscSignals) -> Result<DiscCoeffs> {
    if signals.logits_real.is_empty() || signals.logits_fake.is_empty() {
        return Err(Error::Empty("discriminator signals"));
    }
    let (real, fake, loss_real, loss_fake): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) = match formulation.disc_cost() {
        DiscCost::CrossEntropy => (
            signals.logits_real.iter().map(|&l| -sigmoid(-l)).collect(),
            signals.logits_fake.iter().map(|&l| sigmoid(l)).collect(),
            signals.logits_real.iter().map(|&l| softplus(-l)).collect(),
            signals.logits_fake.iter().map(|&l| softplus(l)).collect(),
        ),
        DiscCost::Hinge => (
            signals.logits_real.iter().map(|&l| if l < 1.0 { -1.0 } else { 0.0 }).collect(),
            signals.logits_fake.iter().map(|&l| if l > -1.0 { 1.0 } else { 0.0 }).collect(),
            signals.logits_real.iter().map(|&l| (1.0 - l).max(0.0)).collect(),
            signals.logits_fake.iter().map(|&l| (1.0 + l).max(0.0)).collect(),
        ),
        DiscCost::LeastSquares => (
            signals.logits_real.iter().map(|&l| l - 1.0).collect(),
            signals.logits_fake.iter().copied().collect(),
            signals.logits_real.iter().map(|&l| 0.5 * (l - 1.0) * (l - 1.0)).collect(),
            signals.logits_fake.iter().map(|&l| 0.5 * l * l).collect(),
        ),
    };
    let loss = mean(loss_real.into_iter()) + mean(loss_fake.into_iter());
    Ok(DiscCoeffs { real, fake, loss })
}

/// Per-sample discriminator loss, matching the coefficients of `d_logit_coeffs`.
pub fn d_sample_loss(cost: DiscCost, logit: f64, is_real: bool) -> f64 {
    match (cost, is_real) {
        (DiscCost::CrossEntropy, true) => softplus(-logit),
        (DiscCost::CrossEntropy, false) => softplus(logit),
        (DiscCost::Hinge, true) => (1.0 - logit).max(0.0),
        (DiscCost::Hinge, false) => (1.0 + logit).max(0.0),
        (DiscCost::LeastSquares, true) => 0.5 * (logit - 1.0) * (logit - 1.0),
        (DiscCost::LeastSquares, false) => 0.5 * logit * logit,
    }
}

/// `dJ_G/dl` for one generated sample. For LINCOMB variants this is the
/// weighted sum of the member coefficients before any batch rescaling.
pub fn g_sample_coeff(formulation: &CostFormulation, logit: f64) -> f64 {
    let mm = || -sigmoid(logit);
    let ns = || -sigmoid(-logit);
    match formulation.variant {
        Variant::Mm | Variant::MmNsat | Variant::MmUnit => mm(),
        Variant::Ns | Variant::NsUnit => ns(),
        Variant::NsAdd(a) => -(sigmoid(-logit) + a),
        Variant::MmNsatAdd(a) => -(sigmoid(logit) + a),
        Variant::NsExp2 => -sigmoid(-logit).powi(2),
        Variant::MmNsatExp2 => -sigmoid(logit).powi(2),
        Variant::NsExpHalf => -(0.5 * log_sigmoid(-logit)).exp(),
        Variant::MmNsatExpHalf => -(0.5 * log_sigmoid(logit)).exp(),
        Variant::Hinge => -1.0,
        Variant::Ls => logit - 1.0,
        Variant::LincombNsMm(a) | Variant::LincombNsMmNsat(a) => (1.0 - a) * ns() + a * mm(),
    }
}

/// Per-sample generator cost whose derivative in `l` is `g_sample_coeff`.
pub fn g_sample_loss(formulation: &CostFormulation, logit: f64) -> f64 {
    let mm = || -softplus(logit);
    let ns = || softplus(-logit);
    match formulation.variant {
        Variant::Mm | Variant::MmNsat | Variant::MmUnit => mm(),
        Variant::Ns | Variant::NsUnit => ns(),
        Variant::NsAdd(a) => ns() - a * logit,
        Variant::MmNsatAdd(a) => mm() - a * logit,
        Variant::NsExp2 => ns() + sigmoid(logit),
        Variant::MmNsatExp2 => mm() + sigmoid(logit),
        Variant::NsExpHalf => two_asinh_exp(-0.5 * logit),
        Variant::MmNsatExpHalf => -two_asinh_exp(0.5 * logit),
        Variant::Hinge => -logit,
        Variant::Ls => 0.5 * (logit - 1.0) * (logit - 1.0),
        Variant::LincombNsMm(a) | Variant::LincombNsMmNsat(a) => (1.0 - a) * ns() + a * mm(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RescaleRule {
    /// No rescaling, `R = 1`.
    Identity,
    /// `(1 - mean D_p) / (eps_R + mean D_p)`.
    MinimaxNsat,
    /// Minimax non-saturating factor applied to the MM-nsat term of a
    /// linear combination only.
    MinimaxNsatTerm,
    /// `N_theta / (eps_R + |grad|)`.
    Unit,
    NsAdd,
    MmNsatAdd,
    NsExp2,
    MmNsatExp2,
    NsExpHalf,
    MmNsatExpHalf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescaleFactor {
    pub value: f64,
    pub rule: RescaleRule,
}

/// Inputs to the unit-norm rule: the unscaled gradient norm and parameter count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitInputs {
    pub grad_norm: f64,
    pub n_params: usize,
}

/// Minimax non-saturating factor from the mean fake probability and its complement.
fn mm_nsat_factor(mean_dp: f64, mean_complement: f64, eps_r: f64) -> f64 {
    mean_complement / (eps_r + mean_dp)
}

/// Batch-level factor multiplying the summed generator gradient.
///
/// Every division carries `eps_R` in its denominator; for MM-nsat this gives
/// `R <= 1/eps_R` and for the unit rule `R <= N_theta/eps_R`.
pub fn batch_rescale(
    formulation: &CostFormulation,
    signals: &DiscSignals,
    unit: Option<UnitInputs>,
) -> Result<RescaleFactor> {
    if signals.logits_fake.is_empty() {
        return Err(Error::Empty("generated batch"));
    }
    let eps = formulation.eps_r;
    let dp = signals.mean_fake_prob();
    let one_minus = signals.mean_fake_complement();
    let (value, rule) = match formulation.variant {
        Variant::Mm | Variant::Ns | Variant::Hinge | Variant::Ls | Variant::LincombNsMm(_) => (1.0, RescaleRule::Identity),
        Variant::MmNsat => (mm_nsat_factor(dp, one_minus, eps), RescaleRule::MinimaxNsat),
        Variant::LincombNsMmNsat(_) => (mm_nsat_factor(dp, one_minus, eps), RescaleRule::MinimaxNsatTerm),
        Variant::MmUnit | Variant::NsUnit => {
            let unit = unit.ok_or_else(|| Error::Config("unit rescaling needs the raw gradient norm".into()))?;
            (unit.n_params as f64 / (eps + unit.grad_norm), RescaleRule::Unit)
        }
        Variant::NsAdd(a) => (one_minus / (eps + a + one_minus), RescaleRule::NsAdd),
        Variant::MmNsatAdd(a) => (one_minus / (eps + a + dp), RescaleRule::MmNsatAdd),
        Variant::NsExp2 => (1.0 / (eps + one_minus), RescaleRule::NsExp2),
        Variant::MmNsatExp2 => (one_minus / (eps + dp * dp), RescaleRule::MmNsatExp2),
        Variant::NsExpHalf => (one_minus.sqrt(), RescaleRule::NsExpHalf),
        Variant::MmNsatExpHalf => (one_minus / (eps + dp.sqrt()), RescaleRule::MmNsatExpHalf),
    };
    Ok(RescaleFactor { value, rule })
}

/// A generator batch gradient and the quantities it was built from.
#[derive(Debug, Clone)]
pub struct GBatchGradient {
    /// Gradient handed to the optimizer.
    pub gradient: ParamGradient,
    /// Summed per-sample gradient before batch rescaling.
    pub raw: ParamGradient,
    pub rescale: RescaleFactor,
    pub logits: Vec<f64>,
    /// Batch mean of the per-sample generator cost.
    pub loss: f64,
}

impl GBatchGradient {
    pub fn mean_fake_prob(&self) -> f64 {
        mean(self.logits.iter().map(|&l| sigmoid(l)))
    }
}

fn column(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape")
}

/// Generator gradient for one noise batch: per-sample coefficients are
/// backpropagated through D into G, summed, then multiplied by `R`.
pub fn g_batch_gradient(
    formulation: &CostFormulation,
    g_net: &DenseNet,
    d_net: &DenseNet,
    noise: &Batch,
) -> Result<GBatchGradient> {
    if d_net.output_dim() != 1 {
        return Err(Error::shape("discriminator output", 1, d_net.output_dim()));
    }
    let chained = chain_forward(g_net, d_net, noise)?;
    let logits = chained.logits();
    let signals = DiscSignals::fake_only(logits.clone())?;
    let loss = mean(logits.iter().map(|&l| g_sample_loss(formulation, l)));

    let backprop = |coeffs: Vec<f64>| chain_generator_discriminator(g_net, d_net, &chained, column(&coeffs).view());

    match formulation.variant {
        Variant::LincombNsMm(a) | Variant::LincombNsMmNsat(a) => {
            let ns = backprop(logits.iter().map(|&l| -sigmoid(-l)).collect())?;
            let mm = backprop(logits.iter().map(|&l| -sigmoid(l)).collect())?;
            let rescale = batch_rescale(formulation, &signals, None)?;
            let mm_factor = match formulation.variant {
                Variant::LincombNsMmNsat(_) => rescale.value,
                _ => 1.0,
            };
            let raw = ns.scaled(1.0 - a).add(&mm.scaled(a))?;
            let gradient = ns.scaled(1.0 - a).add(&mm.scaled(a * mm_factor))?;
            Ok(GBatchGradient {
                gradient,
                raw,
                rescale,
                logits,
                loss,
            })
        }
        _ => {
            let raw = backprop(logits.iter().map(|&l| g_sample_coeff(formulation, l)).collect())?;
            let unit = UnitInputs {
                grad_norm: raw.norm(),
                n_params: g_net.n_params(),
            };
            let rescale = batch_rescale(formulation, &signals, Some(unit))?;
            let gradient = if rescale.rule == RescaleRule::Identity {
                raw.clone()
            } else {
                raw.scaled(rescale.value)
            };
            Ok(GBatchGradient {
                gradient,
                raw,
                rescale,
                logits,
                loss,
            })
        }
    }
}

/// Unscaled per-sample generator gradients `coeff(l_i) * d l_i / d theta`,
/// one per noise row.
pub fn g_sample_gradients(
    formulation: &CostFormulation,
    g_net: &DenseNet,
    d_net: &DenseNet,
    noise: &Batch,
) -> Result<Vec<ParamGradient>> {
    (0..noise.n())
        .map(|i| {
            let row = noise.row(i);
            let chained = chain_forward(g_net, d_net, &row)?;
            let coeff = g_sample_coeff(formulation, chained.logits()[0]);
            chain_generator_discriminator(g_net, d_net, &chained, column(&[coeff]).view())
        })
        .collect()
}

/// Discriminator gradient on a real and a generated batch, plus the signals
/// and loss. The generated samples are taken as fixed inputs.
pub fn d_batch_gradient(
    formulation: &CostFormulation,
    d_net: &DenseNet,
    real: &Batch,
    fake: &Batch,
) -> Result<(ParamGradient, DiscSignals, f64)> {
    let real_fwd = d_net.forward(real)?;
    let fake_fwd = d_net.forward(fake)?;
    let signals = DiscSignals::new(
        real_fwd.output().column(0).to_vec(),
        fake_fwd.output().column(0).to_vec(),
    )?;
    let coeffs = d_logit_coeffs(formulation, &signals)?;
    let g_real = d_net.backward(&real_fwd, column(&coeffs.real).view())?;
    let g_fake = d_net.backward(&fake_fwd, column(&coeffs.fake).view())?;
    Ok((g_real.add(&g_fake)?, signals, coeffs.loss))
}

/// Importance weights `D_p / (1 - D_p)`, clamped at `1/eps_R`.
pub fn importance_weights(fake_probs: &[f64], eps_r: f64) -> Vec<f64> {
    let cap = 1.0 / eps_r;
    fake_probs
        .iter()
        .map(|&p| {
            let w = p / (1.0 - p);
            if w.is_finite() {
                w.min(cap)
            } else {
                cap
            }
        })
        .collect()
}
