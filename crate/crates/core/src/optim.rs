//! Adam with bias correction, plus a simulator and closed-form model for
//! update magnitudes under exponentially scaled gradients `g_t = exp(a t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Reset both moments and the step counter every this many steps.
    pub reinit_interval: Option<u64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            reinit_interval: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.reinit_interval == Some(0) {
            return Err(Error::Config("reinit_interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    reinit_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            reinit_count: 0,
        })
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// Number of resets performed by `reinit_interval`.
    pub fn reinit_count(&self) -> u64 {
        self.reinit_count
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Zeroes both moments and the step counter.
    pub fn reinit(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }

    /// Applies one update and returns `delta_theta` (to be added to the
    /// parameters). A scheduled reset happens before the moment update.
    pub fn step(&mut self, gradient: &[f64]) -> Result<Vec<f64>> {
        if gradient.len() != self.m.len() {
            return Err(Error::shape("AdamState::step", self.m.len(), gradient.len()));
        }
        if let Some(k) = self.config.reinit_interval {
            if self.t > 0 && self.t % k == 0 {
                self.reinit();
                self.reinit_count += 1;
            }
        }
        let AdamConfig {
            alpha,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut delta = Vec::with_capacity(gradient.len());
        for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(gradient) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            delta.push(-alpha * m_hat / (v_hat.sqrt() + eps));
        }
        Ok(delta)
    }
}

/// Constant-gradient limit of the Adam step: `-alpha sgn(g) / (1 + eps/|g|)`.
pub fn constant_gradient_step(alpha: f64, eps: f64, g: f64) -> f64 {
    if g == 0.0 {
        0.0
    } else {
        -alpha * g.signum() / (1.0 + eps / g.abs())
    }
}

/// An exponential gradient schedule `g_t = exp(a t)`, `t = 1..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub a: f64,
    pub steps: u64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl ScheduleSpec {
    /// Simulator constants: beta1 = 0.99, beta2 = 0.999, alpha = 1, eps = 1e-8.
    pub fn new(a: f64, steps: u64) -> Self {
        Self {
            a,
            steps,
            alpha: 1.0,
            beta1: 0.99,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            reinit_interval: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SchedulePoint {
    pub t: u64,
    pub gradient: f64,
    pub update: f64,
}

/// Runs Adam on a single scalar parameter with `g_t = exp(a t)` and returns
/// `|delta_theta_t|` for every step.
pub fn simulate_schedule(spec: &ScheduleSpec) -> Result<Vec<SchedulePoint>> {
    if spec.steps == 0 {
        return Err(Error::Config("schedule horizon must be at least one step".into()));
    }
    let mut state = AdamState::new(spec.adam(), 1)?;
    (1..=spec.steps)
        .map(|t| {
            let g = (spec.a * t as f64).exp();
            let delta = state.step(&[g])?;
            Ok(SchedulePoint {
                t,
                gradient: g,
                update: delta[0].abs(),
            })
        })
        .collect()
}

/// Which term dominates the large-`t` update magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AsymptoticCase {
    /// `a > log b1` and `a > log(b2)/2`: updates stay constant.
    Constant,
    /// `a < log b1` and `a < log(b2)/2`: updates scale as `(b1 / sqrt b2)^t`.
    MomentumRatio,
    /// `a > log b1` and `a < log(b2)/2`: updates scale as `exp((a - log(b2)/2) t)`.
    GradientOverMemory,
    /// `a < log b1` and `a > log(b2)/2`: updates scale as `exp((log b1 - a) t)`.
    MomentumOverGradient,
}

impl AsymptoticCase {
    pub fn number(&self) -> u8 {
        match self {
            AsymptoticCase::Constant => 1,
            AsymptoticCase::MomentumRatio => 2,
            AsymptoticCase::GradientOverMemory => 3,
            AsymptoticCase::MomentumOverGradient => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApproxUpdate {
    pub case: AsymptoticCase,
    /// Large-`t` exponential rate of `|delta_theta_t|` (natural log per step).
    pub log_slope: f64,
    /// Integral approximation of `|delta_theta_t|` without bias corrections
    /// and with `eps` neglected.
    pub magnitude: f64,
}

/// Closed-form approximation of the update magnitude at step `t`.
///
/// The moments are approximated by integrals,
/// `m_t ~ (1-b1)/(a - log b1) (e^{at} - b1^t)` and
/// `v_t ~ (1-b2)/(2a - log b2) (e^{2at} - b2^t)`,
/// which assumes large `t` (the fit window used elsewhere starts at 5000).
pub fn approx_update_magnitude(spec: &ScheduleSpec, t: f64) -> Result<ApproxUpdate> {
    let ScheduleSpec { a, alpha, beta1, beta2, .. } = *spec;
    let log_b1 = beta1.ln();
    let half_log_b2 = 0.5 * beta2.ln();
    if a == log_b1 {
        return Err(Error::Degenerate(format!("a = log(beta1) = {log_b1}: integral approximation undefined")));
    }
    let case = match (a > log_b1, a > half_log_b2) {
        (true, true) => AsymptoticCase::Constant,
        (false, false) => AsymptoticCase::MomentumRatio,
        (true, false) => AsymptoticCase::GradientOverMemory,
        (false, true) => AsymptoticCase::MomentumOverGradient,
    };
    let log_slope = match case {
        AsymptoticCase::Constant => 0.0,
        AsymptoticCase::MomentumRatio => log_b1 - half_log_b2,
        AsymptoticCase::GradientOverMemory => a - half_log_b2,
        AsymptoticCase::MomentumOverGradient => log_b1 - a,
    };

    let m = (1.0 - beta1) / (a - log_b1) * ((a * t).exp() - beta1.powf(t));
    let rate_v = 2.0 * a - beta2.ln();
    let v = if rate_v.abs() < 1e-12 {
        (1.0 - beta2) * t * (2.0 * a * t).exp()
    } else {
        (1.0 - beta2) / rate_v * ((2.0 * a * t).exp() - beta2.powf(t))
    };
    let magnitude = alpha * m.abs() / v.abs().sqrt();
    Ok(ApproxUpdate {
        case,
        log_slope,
        magnitude,
    })
}

/// Least-squares slope of `ln |update|` against `t` over `t_start..=t_end`.
pub fn fitted_log_slope(series: &[SchedulePoint], t_start: u64, t_end: u64) -> Result<f64> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|p| p.t >= t_start && p.t <= t_end && p.update > 0.0)
        .map(|p| (p.t as f64, p.update.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least two positive updates in [{t_start}, {t_end}]"
        )));
    }
    let n = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_y)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    Ok(cov / var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(beta1: f64, beta2: f64) -> AdamConfig {
        AdamConfig {
            alpha: 0.1,
            beta1,
            beta2,
            eps: 1e-8,
            reinit_interval: None,
        }
    }

    #[test]
    fn zero_gradient_gives_zero_step() {
        let mut s = AdamState::new(cfg(0.9, 0.999), 3).unwrap();
        assert_eq!(s.step(&[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert_eq!(s.t(), 1);
    }

    #[test]
    fn memoryless_step_is_sign_step() {
        for g in [3.0, -0.25, 1e-6] {
            let mut s = AdamState::new(cfg(0.0, 0.0), 1).unwrap();
            let d = s.step(&[g]).unwrap()[0];
            let expected = constant_gradient_step(0.1, 1e-8, g);
            assert!((d - expected).abs() <= 1e-15 * expected.abs(), "{d} vs {expected}");
        }
    }

    #[test]
    fn constant_gradient_converges_to_sign_step() {
        let mut s = AdamState::new(cfg(0.9, 0.999), 1).unwrap();
        let mut d = 0.0;
        for _ in 0..20_000 {
            d = s.step(&[-0.02]).unwrap()[0];
        }
        assert!((d - constant_gradient_step(0.1, 1e-8, -0.02)).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = AdamState::new(cfg(0.9, 0.999), 2).unwrap();
        assert!(matches!(s.step(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(AdamState::new(cfg(1.0, 0.999), 1).is_err());
        assert!(AdamState::new(
            AdamConfig {
                reinit_interval: Some(0),
                ..cfg(0.5, 0.9)
            },
            1
        )
        .is_err());
    }

    #[test]
    fn reinit_restores_fresh_state() {
        let config = AdamConfig {
            reinit_interval: Some(3),
            ..cfg(0.5, 0.99)
        };
        let mut s = AdamState::new(config, 2).unwrap();
        let fresh = AdamState::new(config, 2).unwrap();
        for k in 0..3 {
            s.step(&[1.0 + k as f64, -2.0]).unwrap();
        }
        assert_eq!(s.t(), 3);
        // Fourth step resets before updating, so it must equal a first step.
        let mut reference = fresh.clone();
        let expected = reference.step(&[0.7, 0.1]).unwrap();
        assert_eq!(s.step(&[0.7, 0.1]).unwrap(), expected);
        assert_eq!(s.t(), 1);
        assert_eq!(s.m(), reference.m());
        assert_eq!(s.v(), reference.v());
        assert_eq!(s.reinit_count(), 1);
    }

    #[test]
    fn constant_unit_gradient_schedule() {
        let series = simulate_schedule(&ScheduleSpec::new(0.0, 20_000)).unwrap();
        for p in &series[5000..] {
            assert!((p.update - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn case_classification() {
        let c = approx_update_magnitude(&ScheduleSpec::new(-0.001, 1), 10_000.0).unwrap();
        assert_eq!(c.case, AsymptoticCase::GradientOverMemory);
        assert!((c.log_slope - (-0.001 - 0.5 * 0.999f64.ln())).abs() < 1e-15);
        assert!((c.log_slope + 0.000_499_75).abs() < 1e-7);

        let c = approx_update_magnitude(&ScheduleSpec::new(0.0, 1), 10_000.0).unwrap();
        assert_eq!(c.case.number(), 1);
        assert_eq!(c.log_slope, 0.0);

        let c = approx_update_magnitude(&ScheduleSpec::new(-0.02, 1), 10_000.0).unwrap();
        assert_eq!(c.case, AsymptoticCase::MomentumRatio);
        assert!(((c.log_slope).exp() - 0.99 / 0.999f64.sqrt()).abs() < 1e-12);
        assert!((0.99 / 0.999f64.sqrt() - 0.990_495).abs() < 1e-6);

        let mut unusual = ScheduleSpec::new(-0.02, 1);
        unusual.beta1 = 0.999;
        unusual.beta2 = 0.9;
        let c = approx_update_magnitude(&unusual, 10_000.0).unwrap();
        assert_eq!(c.case, AsymptoticCase::MomentumOverGradient);
    }

    #[test]
    fn degenerate_rate_rejected() {
        let spec = ScheduleSpec::new(0.99f64.ln(), 1);
        assert!(matches!(approx_update_magnitude(&spec, 100.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn approximation_tracks_simulation_for_vanishing_gradients() {
        let spec = ScheduleSpec::new(-0.001, 20_000);
        let sim = simulate_schedule(&spec).unwrap();
        for t in [8000u64, 12_000, 20_000] {
            let predicted = approx_update_magnitude(&spec, t as f64).unwrap().magnitude;
            let simulated = sim[(t - 1) as usize].update;
            assert!((predicted / simulated - 1.0).abs() < 0.05, "t={t}: {predicted} vs {simulated}");
        }
    }
}
