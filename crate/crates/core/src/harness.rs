//! Training loop, run configuration, sweeps and on-disk outputs.
//!
//! A run is fully determined by its [`RunConfig`]. Randomness is split into
//! independent ChaCha streams of the run seed (see [`Stream`]), so adding an
//! evaluation or changing the sweep's thread count never shifts the samples
//! the trainer sees.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{
    batch_rescale, d_batch_gradient, g_batch_gradient, g_sample_coeff, CostFormulation, DiscSignals, Variant,
};
use crate::data::{
    ring_mixture, sample_noise_with, sample_real_with, spiral_mixture_with_std, stream_rng, DatasetPreset,
    MixtureSpec, NoiseSpec, RING8_RADIUS, RING8_STD, SPIRAL_STD,
};
use crate::error::{Error, Result};
use crate::metrics::{grad_diagnostics, mode_frequencies, GradDiagnostics, ModeReport};
use crate::nn::{Activation, Batch, DenseNet, ParamGradient};
use crate::optim::{simulate_schedule, AdamConfig, AdamState, ScheduleSpec};

/// Number of trailing steps averaged into the reported G update magnitude.
pub const UPDATE_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Stream {
    InitG = 0,
    InitD = 1,
    Real = 2,
    Noise = 3,
    Eval = 4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetPreset,
    /// Overrides for the preset geometry. `dataset_radius` applies to rings only.
    pub dataset_modes: Option<usize>,
    pub dataset_radius: Option<f64>,
    pub dataset_std: Option<f64>,

    pub g_layers: Vec<usize>,
    pub d_layers: Vec<usize>,
    pub noise_dim: usize,
    /// Factor on G's initial output-layer weights; small values start G as a
    /// compact blob near the origin.
    pub g_output_init_scale: f64,
    /// `tanh` or `identity`. Training always happens in coordinates where the
    /// data fits in [-1, 1]; samples are mapped back for evaluation.
    pub g_output_activation: Activation,

    /// Formulation tag, with its parameter in parentheses where it takes one,
    /// e.g. `MM_NSAT` or `NS_ADD(0.1)`.
    pub formulation: String,
    pub eps_r: f64,

    pub batch_size: usize,
    pub steps: u64,
    pub eval_interval: u64,
    pub eval_samples: usize,
    pub seed: u64,
    pub d_steps_per_g_step: usize,
    pub d_pretrain_steps: u64,
    pub d_pretrain_threshold: f64,

    pub g_alpha: f64,
    pub g_beta1: f64,
    pub g_beta2: f64,
    pub g_eps: f64,
    pub g_reinit_interval: Option<u64>,

    pub d_alpha: f64,
    pub d_beta1: f64,
    pub d_beta2: f64,
    pub d_eps: f64,
    pub d_reinit_interval: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            dataset: DatasetPreset::Ring8,
            dataset_modes: None,
            dataset_radius: None,
            dataset_std: None,
            g_layers: vec![8, 64, 64, 2],
            d_layers: vec![2, 64, 64, 1],
            noise_dim: 8,
            g_output_init_scale: 0.1,
            g_output_activation: Activation::Tanh,
            formulation: "MM_NSAT".into(),
            eps_r: crate::costs::DEFAULT_EPS_R,
            batch_size: 64,
            steps: 20_000,
            eval_interval: 200,
            eval_samples: 10_000,
            seed: 0,
            d_steps_per_g_step: 1,
            d_pretrain_steps: 0,
            d_pretrain_threshold: 1e-2,
            g_alpha: adam.alpha,
            g_beta1: adam.beta1,
            g_beta2: adam.beta2,
            g_eps: adam.eps,
            g_reinit_interval: None,
            d_alpha: adam.alpha,
            d_beta1: adam.beta1,
            d_beta2: adam.beta2,
            d_eps: adam.eps,
            d_reinit_interval: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn cost_formulation(&self) -> Result<CostFormulation> {
        CostFormulation::new(self.formulation.parse::<Variant>()?, self.eps_r)
    }

    pub fn mixture(&self) -> Result<MixtureSpec> {
        match self.dataset {
            DatasetPreset::Ring8 => ring_mixture(
                self.dataset_modes.unwrap_or(8),
                self.dataset_radius.unwrap_or(RING8_RADIUS),
                self.dataset_std.unwrap_or(RING8_STD),
            ),
            DatasetPreset::Spiral12 => {
                if self.dataset_radius.is_some() {
                    return Err(Error::Config("dataset_radius applies to ring datasets only".into()));
                }
                spiral_mixture_with_std(self.dataset_modes.unwrap_or(12), self.dataset_std.unwrap_or(SPIRAL_STD))
            }
        }
    }

    pub fn g_adam(&self) -> AdamConfig {
        AdamConfig {
            alpha: self.g_alpha,
            beta1: self.g_beta1,
            beta2: self.g_beta2,
            eps: self.g_eps,
            reinit_interval: self.g_reinit_interval,
        }
    }

    pub fn d_adam(&self) -> AdamConfig {
        AdamConfig {
            alpha: self.d_alpha,
            beta1: self.d_beta1,
            beta2: self.d_beta2,
            eps: self.d_eps,
            reinit_interval: self.d_reinit_interval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("noise_dim", self.noise_dim as u64),
            ("batch_size", self.batch_size as u64),
            ("eval_interval", self.eval_interval),
            ("eval_samples", self.eval_samples as u64),
            ("d_steps_per_g_step", self.d_steps_per_g_step as u64),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.steps % self.eval_interval != 0 {
            return Err(Error::Config(format!(
                "eval_interval {} does not divide steps {}",
                self.eval_interval, self.steps
            )));
        }
        if !(self.g_output_init_scale > 0.0) || !self.g_output_init_scale.is_finite() {
            return Err(Error::Config("g_output_init_scale must be positive".into()));
        }
        if self.g_output_activation == Activation::Relu {
            return Err(Error::Config("g_output_activation must be tanh or identity".into()));
        }
        if !(self.d_pretrain_threshold > 0.0 && self.d_pretrain_threshold < 1.0) {
            return Err(Error::Config("d_pretrain_threshold must lie in (0, 1)".into()));
        }
        check_layers("g_layers", &self.g_layers, self.noise_dim, 2)?;
        check_layers("d_layers", &self.d_layers, 2, 1)?;
        self.cost_formulation()?;
        self.mixture()?;
        self.g_adam().validate()?;
        self.d_adam().validate()?;
        Ok(())
    }
}

fn check_layers(name: &str, dims: &[usize], input: usize, output: usize) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Config(format!("{name} needs at least two positive sizes")));
    }
    if dims[0] != input || dims[dims.len() - 1] != output {
        return Err(Error::Config(format!(
            "{name} must map {input} inputs to {output} outputs, got {dims:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary3 {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary3 {
    fn of(values: &[f64]) -> Self {
        Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Diagnostics recorded at one evaluation point, computed on a fresh batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_grad_norm: f64,
    pub g_grad_norm: f64,
    pub dp_real: Summary3,
    pub dp_fake: Summary3,
    pub rescale: f64,
    /// Trailing mean of the per-step RMS generator update.
    pub g_update_rms: f64,
    pub modes: ModeReport,
    /// NS gradient against MM-nsat gradient on the same noise batch.
    pub ns_vs_mmnsat: Option<GradDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub steps_run: u64,
    pub reached: bool,
    pub final_mean_fake_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub step: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub config: RunConfig,
    pub pretrain: Option<PretrainOutcome>,
    pub rows: Vec<EvalRow>,
    /// RMS of the generator parameter update, one entry per G step.
    pub g_updates: Vec<f64>,
    pub abort: Option<Abort>,
}

impl TrainingRecord {
    pub fn final_row(&self) -> Option<&EvalRow> {
        self.rows.last()
    }

    pub fn smoothed_updates(&self) -> Vec<f64> {
        trailing_mean(&self.g_updates, UPDATE_WINDOW)
    }
}

/// Mean of the last `window` values (fewer at the start) at each position.
pub fn trailing_mean(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

fn ensure_finite(what: &str, grad: &ParamGradient, extra: &[f64]) -> Result<()> {
    if grad.is_finite() && extra.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// A generator/discriminator pair with optimizer state and sample streams.
pub struct Trainer {
    config: RunConfig,
    spec: MixtureSpec,
    /// `spec` shrunk by `scale` so the data fits in [-1, 1]; G and D live here.
    train_spec: MixtureSpec,
    scale: f64,
    formulation: CostFormulation,
    noise: NoiseSpec,
    g: DenseNet,
    d: DenseNet,
    g_opt: AdamState,
    d_opt: AdamState,
    real_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    g_updates: Vec<f64>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut g = DenseNet::init_with_rng(
            &config.g_layers,
            Activation::Relu,
            config.g_output_activation,
            &mut stream_rng(seed, Stream::InitG as u64),
        )?;
        g.scale_output_weights(config.g_output_init_scale);
        let d = DenseNet::init_with_rng(
            &config.d_layers,
            Activation::Relu,
            Activation::Identity,
            &mut stream_rng(seed, Stream::InitD as u64),
        )?;
        let spec = config.mixture()?;
        let scale = spec.extent();
        Ok(Self {
            train_spec: spec.scaled(1.0 / scale),
            scale,
            spec,
            formulation: config.cost_formulation()?,
            noise: NoiseSpec::new(config.noise_dim)?,
            g_opt: AdamState::new(config.g_adam(), g.n_params())?,
            d_opt: AdamState::new(config.d_adam(), d.n_params())?,
            g,
            d,
            real_rng: stream_rng(seed, Stream::Real as u64),
            noise_rng: stream_rng(seed, Stream::Noise as u64),
            eval_rng: stream_rng(seed, Stream::Eval as u64),
            g_updates: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// The data mixture in its own coordinates.
    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    /// Factor from training coordinates (G outputs, D inputs) to data coordinates.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn formulation(&self) -> &CostFormulation {
        &self.formulation
    }

    pub fn generator(&self) -> &DenseNet {
        &self.g
    }

    pub fn discriminator(&self) -> &DenseNet {
        &self.d
    }

    pub fn noise_batch(&mut self, n: usize) -> Result<Batch> {
        sample_noise_with(&self.noise, n, &mut self.noise_rng)
    }

    fn generate(&self, noise: &Batch) -> Result<Batch> {
        Batch::new(self.g.predict(noise.inputs().view())?)
    }

    /// One discriminator update; returns the signals seen before it.
    fn d_step(&mut self) -> Result<DiscSignals> {
        let n = self.config.batch_size;
        let real = sample_real_with(&self.train_spec, n, &mut self.real_rng)?.points;
        let noise = sample_noise_with(&self.noise, n, &mut self.noise_rng)?;
        let fake = self.generate(&noise)?;
        let (grad, signals, loss) = d_batch_gradient(&self.formulation, &self.d, &real, &fake)?;
        ensure_finite("discriminator gradient", &grad, &[loss])?;
        let delta = self.d_opt.step(&grad.to_flat())?;
        self.d.apply_delta(&delta)?;
        Ok(signals)
    }

    fn g_step(&mut self) -> Result<()> {
        let noise = sample_noise_with(&self.noise, self.config.batch_size, &mut self.noise_rng)?;
        let gb = g_batch_gradient(&self.formulation, &self.g, &self.d, &noise)?;
        ensure_finite("generator gradient", &gb.gradient, &[gb.rescale.value])?;
        let delta = self.g_opt.step(&gb.gradient.to_flat())?;
        self.g.apply_delta(&delta)?;
        self.g_updates.push(rms(&delta));
        Ok(())
    }

    /// D-only updates against the current (frozen) generator until the mean
    /// `D_p(G(z))` of a step's batch falls below the configured threshold or
    /// `d_pretrain_steps` is used up.
    pub fn pretrain_discriminator(&mut self) -> Result<PretrainOutcome> {
        let mut outcome = PretrainOutcome {
            steps_run: 0,
            reached: false,
            final_mean_fake_prob: f64::NAN,
        };
        while outcome.steps_run < self.config.d_pretrain_steps {
            let signals = self.d_step()?;
            outcome.steps_run += 1;
            outcome.final_mean_fake_prob = signals.mean_fake_prob();
            if outcome.final_mean_fake_prob < self.config.d_pretrain_threshold {
                outcome.reached = true;
                break;
            }
        }
        Ok(outcome)
    }

    /// `d_steps_per_g_step` discriminator updates followed by one generator update.
    pub fn step(&mut self) -> Result<()> {
        for _ in 0..self.config.d_steps_per_g_step {
            self.d_step()?;
        }
        self.g_step()
    }

    pub fn evaluate(&mut self, step: u64) -> Result<EvalRow> {
        let n = self.config.batch_size;
        let real = sample_real_with(&self.train_spec, n, &mut self.eval_rng)?.points;
        let noise = sample_noise_with(&self.noise, n, &mut self.eval_rng)?;
        let fake = self.generate(&noise)?;
        let (d_grad, signals, d_loss) = d_batch_gradient(&self.formulation, &self.d, &real, &fake)?;
        let gb = g_batch_gradient(&self.formulation, &self.g, &self.d, &noise)?;

        let eps = self.formulation.eps_r;
        let ns = g_batch_gradient(&CostFormulation::new(Variant::Ns, eps)?, &self.g, &self.d, &noise)?;
        let mm_nsat = g_batch_gradient(&CostFormulation::new(Variant::MmNsat, eps)?, &self.g, &self.d, &noise)?;
        let ns_vs_mmnsat = grad_diagnostics(&ns.gradient.to_flat(), &mm_nsat.gradient.to_flat()).ok();

        let eval_noise = sample_noise_with(&self.noise, self.config.eval_samples, &mut self.eval_rng)?;
        let samples = self.g.predict(eval_noise.inputs().view())? * self.scale;
        let modes = mode_frequencies(&self.spec, samples.view())?;

        let tail = &self.g_updates[self.g_updates.len().saturating_sub(UPDATE_WINDOW)..];
        let g_update_rms = if tail.is_empty() {
            0.0
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        };
        Ok(EvalRow {
            step,
            d_loss,
            g_loss: gb.loss,
            d_grad_norm: d_grad.norm(),
            g_grad_norm: gb.gradient.norm(),
            dp_real: Summary3::of(&signals.probs_real()),
            dp_fake: Summary3::of(&signals.probs_fake()),
            rescale: gb.rescale.value,
            g_update_rms,
            modes,
            ns_vs_mmnsat,
        })
    }

    /// Pretrains D if configured, then trains for `steps` with an evaluation
    /// every `eval_interval` steps (and at step 0). Numerical failure ends the
    /// run early with an [`Abort`] entry instead of an error.
    pub fn run(mut self) -> TrainingRecord {
        let mut record = TrainingRecord {
            config: self.config.clone(),
            pretrain: None,
            rows: Vec::new(),
            g_updates: Vec::new(),
            abort: None,
        };
        if self.config.d_pretrain_steps > 0 {
            match self.pretrain_discriminator() {
                Ok(outcome) => record.pretrain = Some(outcome),
                Err(e) => {
                    record.abort = Some(Abort {
                        step: 0,
                        reason: format!("pretraining: {e}"),
                    });
                    return record;
                }
            }
        }
        let mut step = 0;
        let outcome = (|| -> Result<()> {
            record.rows.push(self.evaluate(0)?);
            while step < self.config.steps {
                self.step()?;
                step += 1;
                if step % self.config.eval_interval == 0 {
                    record.rows.push(self.evaluate(step)?);
                }
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            record.abort = Some(Abort {
                step,
                reason: e.to_string(),
            });
        }
        record.g_updates = self.g_updates;
        record
    }
}

/// Builds and runs a trainer. Only configuration problems are errors;
/// divergence is reported in the record.
pub fn train(config: &RunConfig) -> Result<TrainingRecord> {
    Ok(Trainer::new(config.clone())?.run())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    /// Lower median for even counts. Empty input gives NaN throughout.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                median: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
            };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            median: sorted[(sorted.len() - 1) / 2],
            min: sorted[0],
            max: sorted[sorted.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRunSummary {
    pub formulation: String,
    pub seed: u64,
    pub js: Option<f64>,
    pub n_covered: Option<usize>,
    pub none_freq: Option<f64>,
    /// Configuration error or abort reason.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub formulation: String,
    pub completed: usize,
    pub failed: usize,
    pub js: Spread,
    pub n_covered: Spread,
    pub none_freq: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub runs: Vec<SweepRunSummary>,
    pub aggregates: Vec<SweepAggregate>,
}

impl SweepSummary {
    pub fn aggregate(&self, formulation: &str) -> Option<&SweepAggregate> {
        self.aggregates.iter().find(|a| a.formulation == formulation)
    }
}

pub struct Sweep {
    /// One entry per (formulation, seed), formulation-major.
    pub records: Vec<Result<TrainingRecord>>,
    pub summary: SweepSummary,
}

/// Every formulation crossed with every seed, run in parallel. Results come
/// back in formulation-major order regardless of scheduling; a failed run is
/// recorded and does not stop the others. Aggregates use only runs that
/// finished without aborting.
pub fn sweep(base: &RunConfig, formulations: &[String], seeds: &[u64]) -> Result<Sweep> {
    if formulations.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("sweep axis"));
    }
    let jobs: Vec<RunConfig> = formulations
        .iter()
        .flat_map(|f| {
            seeds.iter().map(move |&seed| RunConfig {
                formulation: f.clone(),
                seed,
                ..base.clone()
            })
        })
        .collect();
    let records: Vec<Result<TrainingRecord>> = jobs.par_iter().map(train).collect();

    let runs: Vec<SweepRunSummary> = jobs
        .iter()
        .zip(&records)
        .map(|(cfg, rec)| {
            let (row, failure) = match rec {
                Ok(r) => (
                    r.final_row().filter(|_| r.abort.is_none()),
                    r.abort.as_ref().map(|a| format!("aborted at step {}: {}", a.step, a.reason)),
                ),
                Err(e) => (None, Some(e.to_string())),
            };
            SweepRunSummary {
                formulation: cfg.formulation.clone(),
                seed: cfg.seed,
                js: row.map(|r| r.modes.js_to_data),
                n_covered: row.map(|r| r.modes.n_covered),
                none_freq: row.map(|r| r.modes.none_freq),
                failure,
            }
        })
        .collect();

    let aggregates = formulations
        .iter()
        .map(|f| {
            let mine: Vec<&SweepRunSummary> = runs.iter().filter(|r| &r.formulation == f).collect();
            let done: Vec<&SweepRunSummary> = mine.iter().copied().filter(|r| r.failure.is_none()).collect();
            let spread = |get: &dyn Fn(&SweepRunSummary) -> Option<f64>| {
                Spread::of(&done.iter().filter_map(|r| get(r)).collect::<Vec<_>>())
            };
            SweepAggregate {
                formulation: f.clone(),
                completed: done.len(),
                failed: mine.len() - done.len(),
                js: spread(&|r| r.js),
                n_covered: spread(&|r| r.n_covered.map(|c| c as f64)),
                none_freq: spread(&|r| r.none_freq),
            }
        })
        .collect();
    Ok(Sweep {
        records,
        summary: SweepSummary { runs, aggregates },
    })
}

/// The JSON document written next to a run's CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub pretrain: Option<PretrainOutcome>,
    pub steps_completed: u64,
    pub final_eval: Option<EvalRow>,
    pub abort: Option<Abort>,
}

impl RunSummary {
    pub fn of(record: &TrainingRecord) -> Self {
        Self {
            config: record.config.clone(),
            pretrain: record.pretrain.clone(),
            steps_completed: record.g_updates.len() as u64,
            final_eval: record.final_row().cloned(),
            abort: record.abort.clone(),
        }
    }
}

pub const RECORD_CSV: &str = "record.csv";
pub const MODES_CSV: &str = "modes.csv";
pub const UPDATES_CSV: &str = "updates.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))
}

fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let wrap = |e: csv::Error| Error::io(path, e.into());
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes `record.csv`, `modes.csv`, `updates.csv` and `summary.json` into
/// `dir`, creating it if needed. Returns the written paths.
pub fn emit_outputs(record: &TrainingRecord, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let record_path = dir.join(RECORD_CSV);
    let cols = header(&[
        "step",
        "d_loss",
        "g_loss",
        "d_grad_norm",
        "g_grad_norm",
        "dp_real_mean",
        "dp_real_min",
        "dp_real_max",
        "dp_fake_mean",
        "dp_fake_min",
        "dp_fake_max",
        "rescale",
        "g_update_rms",
        "none_freq",
        "n_covered",
        "js",
        "cosine_ns_mmnsat",
        "norm_ratio_ns_mmnsat",
    ]);
    write_rows(
        &record_path,
        &cols,
        record.rows.iter().map(|r| {
            vec![
                r.step.to_string(),
                r.d_loss.to_string(),
                r.g_loss.to_string(),
                r.d_grad_norm.to_string(),
                r.g_grad_norm.to_string(),
                r.dp_real.mean.to_string(),
                r.dp_real.min.to_string(),
                r.dp_real.max.to_string(),
                r.dp_fake.mean.to_string(),
                r.dp_fake.min.to_string(),
                r.dp_fake.max.to_string(),
                r.rescale.to_string(),
                r.g_update_rms.to_string(),
                r.modes.none_freq.to_string(),
                r.modes.n_covered.to_string(),
                r.modes.js_to_data.to_string(),
                fmt_opt(r.ns_vs_mmnsat.map(|d| d.cosine)),
                fmt_opt(r.ns_vs_mmnsat.map(|d| d.norm_ratio)),
            ]
        }),
    )?;

    let modes_path = dir.join(MODES_CSV);
    let k = record.rows.first().map_or(0, |r| r.modes.n_modes());
    let mut cols = header(&["step", "none_freq"]);
    cols.extend((1..=k).map(|i| format!("freq_{i}")));
    cols.extend(header(&["n_covered", "js"]));
    write_rows(
        &modes_path,
        &cols,
        record.rows.iter().map(|r| {
            let mut row = vec![r.step.to_string(), r.modes.none_freq.to_string()];
            row.extend(r.modes.per_mode_freq.iter().map(|f| f.to_string()));
            row.push(r.modes.n_covered.to_string());
            row.push(r.modes.js_to_data.to_string());
            row
        }),
    )?;

    let updates_path = dir.join(UPDATES_CSV);
    let smoothed = record.smoothed_updates();
    write_rows(
        &updates_path,
        &header(&["step", "g_update_rms", "g_update_rms_smoothed"]),
        record
            .g_updates
            .iter()
            .zip(&smoothed)
            .enumerate()
            .map(|(i, (u, s))| vec![(i + 1).to_string(), u.to_string(), s.to_string()]),
    )?;

    let summary_path = dir.join(SUMMARY_JSON);
    write_json(&summary_path, &RunSummary::of(record))?;
    Ok(vec![record_path, modes_path, updates_path, summary_path])
}

/// Per-run outputs under `dir/<formulation>_seed<seed>/` plus `sweep.csv`
/// (one row per run, then one aggregate row per formulation) and `sweep.json`.
pub fn emit_sweep_outputs(sweep: &Sweep, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (run, record) in sweep.summary.runs.iter().zip(&sweep.records) {
        if let Ok(record) = record {
            emit_outputs(record, dir.join(run_dir_name(&run.formulation, run.seed)))?;
        }
    }
    let cols = header(&[
        "kind",
        "formulation",
        "seed",
        "js",
        "n_covered",
        "none_freq",
        "js_min",
        "js_max",
        "n_covered_min",
        "n_covered_max",
        "none_freq_min",
        "none_freq_max",
        "failure",
    ]);
    let run_rows = sweep.summary.runs.iter().map(|r| {
        let mut row = vec![
            "run".to_string(),
            r.formulation.clone(),
            r.seed.to_string(),
            fmt_opt(r.js),
            r.n_covered.map_or_else(String::new, |c| c.to_string()),
            fmt_opt(r.none_freq),
        ];
        row.extend(std::iter::repeat(String::new()).take(6));
        row.push(r.failure.clone().unwrap_or_default());
        row
    });
    let agg_rows = sweep.summary.aggregates.iter().map(|a| {
        vec![
            "median".to_string(),
            a.formulation.clone(),
            String::new(),
            a.js.median.to_string(),
            a.n_covered.median.to_string(),
            a.none_freq.median.to_string(),
            a.js.min.to_string(),
            a.js.max.to_string(),
            a.n_covered.min.to_string(),
            a.n_covered.max.to_string(),
            a.none_freq.min.to_string(),
            a.none_freq.max.to_string(),
            if a.failed > 0 {
                format!("{} failed", a.failed)
            } else {
                String::new()
            },
        ]
    });
    write_rows(&dir.join(SWEEP_CSV), &cols, run_rows.chain(agg_rows))?;
    write_json(&dir.join(SWEEP_JSON), &sweep.summary)
}

/// Directory name for one sweep run; parentheses in parameterized tags are dropped.
pub fn run_dir_name(formulation: &str, seed: u64) -> String {
    let clean: String = formulation
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' })
        .collect();
    format!("{}_seed{seed}", clean.trim_end_matches('_'))
}

/// Variants plotted against `D_p`. Unit-norm rules depend on a network and are left out.
pub fn scaling_curve_variants() -> Vec<Variant> {
    vec![
        Variant::Mm,
        Variant::Ns,
        Variant::MmNsat,
        Variant::LincombNsMm(0.5),
        Variant::LincombNsMmNsat(0.5),
        Variant::NsAdd(0.1),
        Variant::MmNsatAdd(0.1),
        Variant::NsExp2,
        Variant::MmNsatExp2,
        Variant::NsExpHalf,
        Variant::MmNsatExpHalf,
    ]
}

/// Effective per-sample scaling factor `|coeff| * R` for a batch whose
/// samples all sit at probability `dp`.
pub fn effective_scaling(variant: Variant, dp: f64) -> Result<f64> {
    let form = CostFormulation::with_default_eps(variant)?;
    let logit = dp.ln() - (-dp).ln_1p();
    let signals = DiscSignals::fake_only(vec![logit])?;
    let rescale = batch_rescale(&form, &signals, None)?;
    let coeff = match variant {
        Variant::LincombNsMmNsat(a) => -(1.0 - a) * (1.0 - dp) - a * dp * rescale.value,
        _ => g_sample_coeff(&form, logit) * rescale.value,
    };
    Ok(coeff.abs())
}

/// Scaling factor curves on `D_p = i / points` for `i = 1..points`.
pub fn write_scaling_factors(path: impl AsRef<Path>, points: usize) -> Result<()> {
    let path = path.as_ref();
    if points < 2 {
        return Err(Error::Config("need at least 2 grid points".into()));
    }
    let variants = scaling_curve_variants();
    let mut cols = header(&["dp"]);
    cols.extend(variants.iter().map(|v| v.to_string()));
    let mut rows = Vec::with_capacity(points - 1);
    for i in 1..points {
        let dp = i as f64 / points as f64;
        let mut row = vec![dp.to_string()];
        for v in &variants {
            row.push(effective_scaling(*v, dp)?.to_string());
        }
        rows.push(row);
    }
    write_rows(path, &cols, rows)
}

/// Simulated and predicted Adam update magnitudes under `g_t = exp(a t)`,
/// one column pair per rate, every `stride` steps.
pub fn write_adam_curves(path: impl AsRef<Path>, rates: &[f64], steps: u64, stride: u64) -> Result<()> {
    let path = path.as_ref();
    let mut cols = header(&["t"]);
    let mut series = Vec::new();
    for &a in rates {
        cols.push(format!("update_a{a}"));
        cols.push(format!("predicted_a{a}"));
        let spec = ScheduleSpec::new(a, steps);
        let sim = simulate_schedule(&spec)?;
        let predicted: Vec<Option<f64>> = sim
            .iter()
            .map(|p| crate::optim::approx_update_magnitude(&spec, p.t as f64).ok().map(|u| u.magnitude))
            .collect();
        series.push((sim, predicted));
    }
    let stride = stride.max(1) as usize;
    let n = series.first().map_or(0, |(s, _)| s.len());
    let rows = (0..n).filter(|i| (i + 1) % stride == 0 || *i == 0).map(|i| {
        let mut row = vec![series[0].0[i].t.to_string()];
        for (sim, pred) in &series {
            row.push(sim[i].update.abs().to_string());
            row.push(fmt_opt(pred[i]));
        }
        row
    });
    write_rows(path, &cols, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(formulation: &str, steps: u64) -> RunConfig {
        RunConfig {
            g_layers: vec![4, 16, 2],
            d_layers: vec![2, 16, 1],
            noise_dim: 4,
            formulation: formulation.into(),
            batch_size: 16,
            steps,
            eval_interval: 10,
            eval_samples: 500,
            seed: 3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_validate_and_parse_from_empty_toml() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.g_layers, vec![8, 64, 64, 2]);
        assert_eq!(cfg.d_layers, vec![2, 64, 64, 1]);
    }

    #[test]
    fn toml_fields_are_addressable() {
        let cfg = RunConfig::from_toml_str(
            r#"
            dataset = "spiral12"
            formulation = "NS_ADD(0.1)"
            steps = 400
            eval_interval = 100
            g_beta2 = 0.99
            g_reinit_interval = 50
            dataset_std = 0.04
            "#,
        )
        .unwrap();
        assert_eq!(cfg.dataset, DatasetPreset::Spiral12);
        assert_eq!(cfg.cost_formulation().unwrap().variant, Variant::NsAdd(0.1));
        assert_eq!(cfg.g_adam().beta2, 0.99);
        assert_eq!(cfg.g_adam().reinit_interval, Some(50));
        assert_eq!(cfg.mixture().unwrap().std, 0.04);
        assert!(RunConfig::from_toml_str("bogus_key = 1").is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            RunConfig { steps: 250, ..RunConfig::default() },
            RunConfig { batch_size: 0, ..RunConfig::default() },
            RunConfig { formulation: "XX".into(), ..RunConfig::default() },
            RunConfig { g_layers: vec![4, 64, 2], ..RunConfig::default() },
            RunConfig { d_layers: vec![2, 64, 2], ..RunConfig::default() },
            RunConfig { g_beta2: 1.0, ..RunConfig::default() },
            RunConfig { dataset: DatasetPreset::Spiral12, dataset_radius: Some(1.0), ..RunConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn zero_steps_gives_initial_row_only() {
        let rec = train(&small("NS", 0)).unwrap();
        assert_eq!(rec.rows.len(), 1);
        assert_eq!(rec.rows[0].step, 0);
        assert!(rec.g_updates.is_empty());
        assert!(rec.abort.is_none());
    }

    #[test]
    fn runs_are_deterministic_and_rows_increase() {
        let cfg = small("MM_NSAT", 40);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 5);
        assert!(a.rows.windows(2).all(|w| w[0].step < w[1].step));
        assert_eq!(a.g_updates.len(), 40);
        for r in &a.rows {
            assert!(r.d_grad_norm >= 0.0 && r.g_grad_norm >= 0.0);
            let total = r.modes.none_freq + r.modes.per_mode_freq.iter().sum::<f64>();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let other = train(&RunConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a.rows, other.rows);
    }

    #[test]
    fn pretraining_zero_steps_is_noop() {
        let cfg = small("MM", 0);
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let before = t.discriminator().flat_params();
        let out = t.pretrain_discriminator().unwrap();
        assert_eq!(out.steps_run, 0);
        assert!(!out.reached);
        assert_eq!(t.discriminator().flat_params(), before);
    }

    fn pretrained(seed: u64) -> (Trainer, PretrainOutcome) {
        let cfg = RunConfig {
            d_pretrain_steps: 2000,
            seed,
            ..RunConfig::default()
        };
        let mut t = Trainer::new(cfg).unwrap();
        let out = t.pretrain_discriminator().unwrap();
        (t, out)
    }

    #[test]
    fn pretraining_reaches_threshold_on_ring8() {
        for seed in 0..3 {
            let (_, out) = pretrained(seed);
            assert!(out.reached && out.steps_run <= 2000, "{out:?}");
            assert!(out.final_mean_fake_prob < 1e-2);
        }
    }

    #[test]
    #[ignore = "does not hold: boundary samples carry larger logit gradients, ratio 0.013 to 0.084 over seeds 0..9"]
    fn pretrained_mm_gradient_is_a_hundredth_of_ns() {
        let (mut t, _) = pretrained(0);
        let noise = t.noise_batch(64).unwrap();
        let norm = |v| {
            let f = CostFormulation::new(v, 1e-8).unwrap();
            g_batch_gradient(&f, t.generator(), t.discriminator(), &noise).unwrap().gradient.norm()
        };
        assert!(norm(Variant::Mm) < 1e-2 * norm(Variant::Ns));
    }

    #[test]
    fn training_coordinates_fit_in_unit_box() {
        let t = Trainer::new(RunConfig::default()).unwrap();
        let train = t.spec().scaled(1.0 / t.scale());
        for c in &train.centers {
            assert!(c[0].abs().max(c[1].abs()) + 4.0 * train.std <= 1.0 + 1e-12);
        }
        let identity = RunConfig {
            g_output_activation: Activation::Identity,
            ..RunConfig::default()
        };
        assert!(Trainer::new(identity).is_ok());
        let relu = RunConfig {
            g_output_activation: Activation::Relu,
            ..RunConfig::default()
        };
        assert!(relu.validate().is_err());
    }

    #[test]
    fn divergence_is_recorded_not_raised() {
        let cfg = RunConfig {
            g_alpha: 1e300,
            d_alpha: 1e300,
            ..small("NS", 20)
        };
        let rec = train(&cfg).unwrap();
        let abort = rec.abort.expect("huge steps overflow");
        assert!(abort.step <= 20);
    }

    #[test]
    fn trailing_mean_windows() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(trailing_mean(&v, 2), vec![1.0, 1.5, 2.5, 3.5]);
        assert_eq!(trailing_mean(&v, 10), vec![1.0, 1.5, 2.0, 2.5]);
    }

    #[test]
    fn spread_uses_lower_median() {
        let s = Spread::of(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!((s.median, s.min, s.max), (2.0, 1.0, 4.0));
        assert_eq!(Spread::of(&[5.0, 1.0, 3.0]).median, 3.0);
    }

    #[test]
    fn sweep_cardinality_and_order() {
        let base = small("NS", 10);
        let forms = vec!["NS".to_string(), "MM_NSAT".to_string()];
        let sw = sweep(&base, &forms, &[0, 1, 2]).unwrap();
        assert_eq!(sw.summary.runs.len(), 6);
        assert_eq!(sw.summary.aggregates.len(), 2);
        assert_eq!(sw.summary.runs[4].formulation, "MM_NSAT");
        assert_eq!(sw.summary.runs[4].seed, 1);
        let direct = train(&RunConfig {
            formulation: "MM_NSAT".into(),
            seed: 1,
            ..base.clone()
        })
        .unwrap();
        assert_eq!(sw.records[4].as_ref().unwrap(), &direct);
        assert!(sweep(&base, &[], &[0]).is_err());

        let with_bad = sweep(&base, &["NOPE".to_string()], &[0]).unwrap();
        assert!(with_bad.summary.runs[0].failure.is_some());
        assert_eq!(with_bad.summary.aggregates[0].failed, 1);
    }

    #[test]
    fn scaling_curves_cross_at_half() {
        let mm = effective_scaling(Variant::Mm, 0.5).unwrap();
        let ns = effective_scaling(Variant::Ns, 0.5).unwrap();
        assert_eq!((mm, ns), (0.5, 0.5));
        let dp: f64 = 0.01;
        assert!((effective_scaling(Variant::MmNsat, dp).unwrap() - dp * (1.0 - dp) / (1e-8 + dp)).abs() < 1e-12);
    }

    #[test]
    fn run_dir_names() {
        assert_eq!(run_dir_name("MM_NSAT", 3), "MM_NSAT_seed3");
        assert_eq!(run_dir_name("NS_ADD(0.1)", 0), "NS_ADD_0.1_seed0");
    }
}
