//! End-to-end texture synthesis: condition the target, optimize a
//! log-spectrogram under the texture loss, invert it with Griffin-Lim.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{normalize_peak, resample, AudioClip, AudioError};
use crate::evaluation::{spectrogram_autocorr_score, spectrogram_diversity_score, EvaluationError, EvaluationReport};
use crate::features::{init_ensemble, FeatureError, FeatureModel, StackedNet, StackedNetSpec, DEFAULT_WIDTHS};
use crate::lbfgsb::{Bounds, LbfgsConfig, Lbfgsb, LbfgsbError, Status};
use crate::losses::{
    total_loss_and_grad, LagWindow, LossBreakdown, LossError, LossOptions, LossWeights, ShiftSchedule,
    TargetStatistics, DIVERSITY_EPSILON,
};
use crate::spectrogram::{griffin_lim, log_decompress, log_spectrogram, LogSpectrogram, SpectrogramError, StftConfig};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("target lasts {seconds:.3} s, at least {required:.1} s is needed")]
    TooShort { seconds: f64, required: f64 },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Spectrogram(#[from] SpectrogramError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error("non-finite loss at iteration {iteration}: gram {gram}, autocorr {autocorr}, diversity {diversity}")]
    NonFinite {
        iteration: usize,
        gram: f64,
        autocorr: f64,
        diversity: f64,
    },
    #[error("optimizer: {0}")]
    Optimizer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Uniform noise scaled by the target mean.
    Random,
    /// Start from the target itself (fixed-point checks).
    Target,
}

/// Shortest target accepted by [`synthesize`], in seconds.
pub const MIN_TARGET_SECONDS: f64 = 1.0;

/// Salt separating the Griffin-Lim phase draw from the network weights,
/// which use the plain seed.
const GRIFFIN_LIM_SALT: u64 = 0x6772_6966_6669_6e00;
/// Stream of the initialization draw; network streams count up from 0.
const INIT_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    /// Outer L-BFGS-B iterations (accepted steps).
    pub iterations: usize,
    /// The diversity term is part of the objective for this many iterations.
    pub diversity_iterations: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lag_window: LagWindow,
    pub griffin_lim_iterations: usize,
    /// Kernel widths of the single-layer ensemble.
    pub widths: Vec<usize>,
    pub n_filters: usize,
    /// Replaces the ensemble by the stacked net when set. Its seed is
    /// overridden by `seed`.
    pub stacked: Option<StackedNetSpec>,
    pub seed: u64,
    pub init_scale: f64,
    pub init: InitMode,
    /// Output length in frames; `None` matches the target.
    pub frames: Option<usize>,
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub lbfgs: LbfgsConfig,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            diversity_iterations: 100,
            alpha: LossWeights::default().alpha,
            beta: LossWeights::default().beta,
            lag_window: LagWindow::default(),
            griffin_lim_iterations: 500,
            widths: DEFAULT_WIDTHS.to_vec(),
            n_filters: 512,
            stacked: None,
            seed: 0,
            init_scale: 0.01,
            init: InitMode::Random,
            frames: None,
            sample_rate: 16000,
            stft: StftConfig::default(),
            lbfgs: LbfgsConfig::default(),
        }
    }
}

impl SynthesisConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<(), SynthesisError> {
        let bad = |msg: String| Err(SynthesisError::InvalidConfig(msg));
        if self.diversity_iterations > self.iterations {
            return bad(format!(
                "diversity_iterations ({}) exceeds iterations ({})",
                self.diversity_iterations, self.iterations
            ));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("init_scale", self.init_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if self.griffin_lim_iterations == 0 {
            return bad("griffin_lim_iterations must be at least 1".into());
        }
        if self.stacked.is_none() {
            if self.widths.is_empty() || self.widths.contains(&0) {
                return bad(format!(
                    "kernel widths must be positive and non-empty, got {:?}",
                    self.widths
                ));
            }
            if self.n_filters == 0 {
                return bad("n_filters must be at least 1".into());
            }
        }
        if self.frames == Some(0) {
            return bad("output length must be at least one frame".into());
        }
        if self.sample_rate == 0 {
            return bad("sample rate must be positive".into());
        }
        self.stft.validate()?;
        self.lbfgs
            .validate()
            .map_err(|e| SynthesisError::InvalidConfig(e.to_string()))?;
        LagWindow::new(self.lag_window.min_lag, self.lag_window.max_lag)?;
        Ok(())
    }

    fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "synthesis": self,
            "prng": crate::PRNG_ALGORITHM,
            "version": env!("CARGO_PKG_VERSION"),
        })
    }
}

/// Starting point: entries i.i.d. uniform on `[0, init_scale * mean(target)]`
/// with `frames` rows (target length when `None`).
pub fn init_spectrogram(target: &LogSpectrogram, seed: u64, init_scale: f64, frames: Option<usize>) -> LogSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let high = init_scale * target.mean();
    let shape = (frames.unwrap_or(target.frames()), target.bins());
    let values = Array2::from_shape_simple_fn(shape, || high * rng.gen::<f64>());
    LogSpectrogram {
        values,
        config: target.config,
        sample_rate: target.sample_rate,
    }
}

enum Model {
    Ensemble(crate::features::FeatureEnsemble),
    Stacked(StackedNet),
}

fn build_model(config: &SynthesisConfig, bins: usize) -> Result<Model, SynthesisError> {
    Ok(match config.stacked {
        Some(spec) => Model::Stacked(StackedNet::new(
            StackedNetSpec {
                seed: config.seed,
                ..spec
            },
            bins,
        )?),
        None => Model::Ensemble(init_ensemble(config.seed, &config.widths, config.n_filters, bins)?),
    })
}

/// Result of optimizing a spectrogram.
#[derive(Debug, Clone)]
pub struct SpectrogramRun {
    pub spectrogram: LogSpectrogram,
    pub report: EvaluationReport,
    pub status: Status,
    /// Loss terms at the returned spectrogram.
    pub final_loss: LossBreakdown,
}

/// Terms of one evaluation, kept so the accepted one can be traced.
struct Evaluated {
    x: Vec<f64>,
    breakdown: LossBreakdown,
}

/// Optimizes a log-spectrogram against `target`. Audio conditioning and
/// Griffin-Lim are left to [`synthesize`].
pub fn synthesize_spectrogram(
    target: &LogSpectrogram,
    config: &SynthesisConfig,
) -> Result<SpectrogramRun, SynthesisError> {
    config.validate()?;
    if target.config != config.stft {
        return Err(SynthesisError::InvalidConfig(format!(
            "target STFT {:?} differs from configured {:?}",
            target.config, config.stft
        )));
    }
    let started = Instant::now();
    let mut report = EvaluationReport::new();
    report.config = config.echo();

    let frames = config.frames.unwrap_or(target.frames());
    let bins = target.bins();
    let model = build_model(config, bins)?;
    let prepared;
    let model: &dyn FeatureModel = match &model {
        Model::Ensemble(ensemble) => {
            prepared = ensemble.prepare();
            &prepared
        }
        Model::Stacked(net) => net,
    };
    let targets = TargetStatistics::new(model, target.values.view())?;
    if targets.feature_norm_sq() <= 0.0 {
        return Err(LossError::DegenerateTarget("target features are all zero").into());
    }

    let window = config.lag_window.clamped(frames.min(target.frames()));
    match window {
        None => {
            let note = format!(
                "autocorrelation term disabled: lag window {:?} does not fit {} frames",
                config.lag_window,
                frames.min(target.frames())
            );
            log::warn!("{note}");
            report.notes.push(note);
        }
        Some(w) if w != config.lag_window => report.notes.push(format!("lag window clamped to {w:?}")),
        Some(_) => {}
    }
    let weights = config.weights();
    let init = match config.init {
        InitMode::Random => init_spectrogram(target, config.seed, config.init_scale, Some(frames)),
        InitMode::Target if frames == target.frames() => target.clone(),
        InitMode::Target => {
            return Err(SynthesisError::InvalidConfig(
                "init = target requires the output length to match the target".into(),
            ))
        }
    };
    report.set_timing("prepare", started.elapsed().as_secs_f64());

    let started = Instant::now();
    let diversity_on = |step: usize| weights.beta != 0.0 && step < config.diversity_iterations;
    let mut schedule = ShiftSchedule::new();
    let mut step = 0usize;
    let mut shifts: Option<BTreeSet<usize>> = diversity_on(0).then(|| schedule.next_shift_set(frames, 0));
    let mut evaluated: Vec<Evaluated> = Vec::new();
    let evaluations = Cell::new(0usize);

    let objective = |x: &[f64],
                     step: usize,
                     shifts: Option<&BTreeSet<usize>>,
                     evaluated: &mut Vec<Evaluated>|
     -> Result<(f64, Vec<f64>), SynthesisError> {
        evaluations.set(evaluations.get() + 1);
        let input = ArrayView2::from_shape((frames, bins), x).expect("iterate has the spectrogram shape");
        let options = LossOptions {
            window,
            shifts,
            relative_epsilon: DIVERSITY_EPSILON,
        };
        let mut breakdown = total_loss_and_grad(input, model, &targets, &weights, &options)?;
        if !breakdown.is_finite() {
            return Err(SynthesisError::NonFinite {
                iteration: step,
                gram: breakdown.gram,
                autocorr: breakdown.autocorr,
                diversity: breakdown.diversity,
            });
        }
        let grad: Vec<f64> = breakdown.grad.iter().copied().collect();
        let value = breakdown.total;
        breakdown.grad = Array2::zeros((0, 0));
        evaluated.push(Evaluated {
            x: x.to_vec(),
            breakdown,
        });
        Ok((value, grad))
    };
    let unwrap_err = |e: LbfgsbError<SynthesisError>| match e {
        LbfgsbError::Objective(inner) => inner,
        LbfgsbError::NonFiniteStart { value } => SynthesisError::NonFinite {
            iteration: 0,
            gram: f64::NAN,
            autocorr: f64::NAN,
            diversity: value,
        },
        other => SynthesisError::Optimizer(other.to_string()),
    };

    let x0: Vec<f64> = init.values.iter().copied().collect();
    let mut solver = Lbfgsb::new(
        |x: &[f64]| objective(x, 0, shifts.as_ref(), &mut evaluated),
        x0,
        Bounds::lower(vec![0.0; frames * bins]),
        config.lbfgs,
    )
    .map_err(unwrap_err)?;
    let accepted = |solver: &Lbfgsb, evaluated: &mut Vec<Evaluated>| -> LossBreakdown {
        let found = evaluated
            .iter()
            .rposition(|e| e.x == solver.x())
            .expect("accepted point was evaluated");
        let b = evaluated.swap_remove(found).breakdown;
        evaluated.clear();
        b
    };
    let mut current = accepted(&solver, &mut evaluated);
    report.record_trace(0, &current, &weights)?;
    if let Some(s) = current.best_shift {
        schedule.record(s);
    }

    let mut status = Status::Running;
    while step < config.iterations {
        let objective_changed = if diversity_on(step) {
            let next = schedule.next_shift_set(frames, step);
            let changed = shifts.as_ref() != Some(&next);
            shifts = Some(next);
            changed
        } else if shifts.is_some() {
            shifts = None;
            solver.clear_memory();
            true
        } else {
            false
        };
        if objective_changed {
            solver
                .refresh(|x: &[f64]| objective(x, step, shifts.as_ref(), &mut evaluated))
                .map_err(unwrap_err)?;
            current = accepted(&solver, &mut evaluated);
        }
        let outcome = solver
            .step(|x: &[f64]| objective(x, step, shifts.as_ref(), &mut evaluated))
            .map_err(unwrap_err)?;
        status = outcome.status;
        if status == Status::LineSearchFailed {
            report
                .notes
                .push(format!("line search failed at iteration {}", step + 1));
            evaluated.clear();
            break;
        }
        if outcome.evaluations > 0 {
            current = accepted(&solver, &mut evaluated);
            step += 1;
            report.record_trace(step, &current, &weights)?;
            if let Some(s) = current.best_shift {
                schedule.record(s);
            }
            if step.is_multiple_of(50) {
                log::info!(
                    "iteration {step}: total {:.6e} (gram {:.4e}, autocorr {:.4e}, diversity {:.4e})",
                    current.total,
                    current.gram,
                    current.autocorr,
                    current.diversity
                );
            }
        }
        // convergence only ends the run once the objective can no longer change
        if status.is_done() && !diversity_on(step) && shifts.is_none() {
            report
                .notes
                .push(format!("optimizer converged ({status:?}) at iteration {step}"));
            break;
        }
        if status.is_done() && outcome.evaluations == 0 {
            // converged inside the diversity phase: skip ahead to its end
            step = step.max(config.diversity_iterations.min(config.iterations));
        }
    }
    report.set_timing("optimize", started.elapsed().as_secs_f64());
    report.evaluations = evaluations.get();

    let values = Array2::from_shape_vec((frames, bins), solver.into_x()).expect("iterate has the spectrogram shape");
    let spectrogram = LogSpectrogram {
        values,
        config: target.config,
        sample_rate: target.sample_rate,
    };
    Ok(SpectrogramRun {
        spectrogram,
        report,
        status,
        final_loss: current,
    })
}

/// Output of [`synthesize`].
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub clip: AudioClip,
    pub spectrogram: LogSpectrogram,
    pub target: LogSpectrogram,
    pub report: EvaluationReport,
    pub status: Status,
}

/// Resamples and normalizes `target`, turns it into a log-spectrogram,
/// optimizes a new spectrogram with matching statistics and inverts it with
/// Griffin-Lim. Scores compare the optimized and target spectrograms.
pub fn synthesize(target: &AudioClip, config: &SynthesisConfig) -> Result<Synthesis, SynthesisError> {
    config.validate()?;
    let started = Instant::now();
    let conditioned = normalize_peak(&resample(target, config.sample_rate)?)?;
    let seconds = conditioned.duration_secs();
    if seconds < MIN_TARGET_SECONDS {
        return Err(SynthesisError::TooShort {
            seconds,
            required: MIN_TARGET_SECONDS,
        });
    }
    let target_spec = log_spectrogram(&conditioned, config.stft)?;
    let conditioning = started.elapsed().as_secs_f64();

    let SpectrogramRun {
        spectrogram,
        mut report,
        status,
        ..
    } = synthesize_spectrogram(&target_spec, config)?;
    if let Some(prepare) = report.timing.get_mut("prepare") {
        *prepare += conditioning;
    }

    let started = Instant::now();
    let magnitude = log_decompress(&spectrogram);
    let inverted = griffin_lim(
        &magnitude,
        config.griffin_lim_iterations,
        config.seed ^ GRIFFIN_LIM_SALT,
        config.stft,
        config.sample_rate,
    )?;
    if let Some(err) = inverted.errors.last() {
        report.notes.push(format!("griffin-lim spectral convergence {err:.6}"));
    }
    let clip = match normalize_peak(&inverted.clip) {
        Ok(clip) => clip,
        Err(AudioError::Silent) => {
            report.notes.push("synthesized audio is silent; not normalized".into());
            inverted.clip
        }
        Err(e) => return Err(e.into()),
    };
    report.set_timing("griffin_lim", started.elapsed().as_secs_f64());

    let started = Instant::now();
    score(&spectrogram, &target_spec, &config.lag_window, &mut report)?;
    report.set_timing("evaluate", started.elapsed().as_secs_f64());

    Ok(Synthesis {
        clip,
        spectrogram,
        target: target_spec,
        report,
        status,
    })
}

/// Fills both scores of `report`, truncating to the shorter length when the
/// spectrograms differ in frames.
pub fn score(
    synth: &LogSpectrogram,
    target: &LogSpectrogram,
    window: &LagWindow,
    report: &mut EvaluationReport,
) -> Result<(), SynthesisError> {
    let frames = synth.frames().min(target.frames());
    let (synth, target) = if synth.frames() != target.frames() {
        report.notes.push(format!(
            "scores use the first {frames} frames (lengths {} and {})",
            synth.frames(),
            target.frames()
        ));
        (synth.truncated(frames), target.truncated(frames))
    } else {
        (synth.clone(), target.clone())
    };
    match spectrogram_autocorr_score(&synth, &target, window) {
        Ok(v) => report.autocorr_score = Some(v),
        Err(EvaluationError::WindowTooLong { .. }) => {
            report.notes.push(format!(
                "autocorrelation score skipped: window does not fit {frames} frames"
            ));
        }
        Err(e) => return Err(e.into()),
    }
    report.diversity_score = Some(spectrogram_diversity_score(&synth, &target)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrogram::roll_rows;

    fn random_target(frames: usize, bins: usize, seed: u64) -> LogSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Array2::from_shape_simple_fn((frames, bins), || rng.gen_range(0.0..2.0));
        LogSpectrogram {
            values,
            config: StftConfig {
                window_size: 16,
                hop_size: 4,
            },
            sample_rate: 16000,
        }
    }

    fn small_config() -> SynthesisConfig {
        SynthesisConfig {
            iterations: 30,
            diversity_iterations: 10,
            alpha: 1.0,
            beta: 1e-3,
            lag_window: LagWindow::new(4, 30).unwrap(),
            widths: vec![2, 4, 8],
            n_filters: 16,
            seed: 3,
            stft: StftConfig {
                window_size: 16,
                hop_size: 4,
            },
            ..Default::default()
        }
    }

    #[test]
    fn init_examples() {
        let target = random_target(40, 9, 1).truncated(40);
        let zero = init_spectrogram(&target, 1, 0.0, None);
        assert!(zero.values.iter().all(|&v| v == 0.0));
        let two = LogSpectrogram {
            values: Array2::from_elem((40, 9), 2.0),
            ..target.clone()
        };
        let init = init_spectrogram(&two, 5, 0.01, None);
        assert!(init.values.iter().all(|&v| (0.0..=0.02).contains(&v)));
        assert!(init.values.iter().any(|&v| v > 0.01));
        assert_eq!(init, init_spectrogram(&two, 5, 0.01, None));
        assert_ne!(init, init_spectrogram(&two, 6, 0.01, None));
        assert_eq!(init_spectrogram(&two, 5, 0.01, Some(70)).values.dim(), (70, 9));
    }

    #[test]
    fn config_validation() {
        assert!(SynthesisConfig::default().validate().is_ok());
        let bad = [
            SynthesisConfig {
                diversity_iterations: 3,
                iterations: 2,
                ..Default::default()
            },
            SynthesisConfig {
                alpha: -1.0,
                ..Default::default()
            },
            SynthesisConfig {
                beta: f64::NAN,
                ..Default::default()
            },
            SynthesisConfig {
                widths: vec![],
                ..Default::default()
            },
            SynthesisConfig {
                n_filters: 0,
                ..Default::default()
            },
            SynthesisConfig {
                griffin_lim_iterations: 0,
                ..Default::default()
            },
            SynthesisConfig {
                frames: Some(0),
                ..Default::default()
            },
        ];
        for config in bad {
            assert!(
                matches!(config.validate(), Err(SynthesisError::InvalidConfig(_))),
                "{config:?}"
            );
        }
    }

    #[test]
    fn target_is_a_fixed_point() {
        let target = random_target(50, 9, 2);
        let config = SynthesisConfig {
            alpha: 0.0,
            beta: 0.0,
            init: InitMode::Target,
            ..small_config()
        };
        let run = synthesize_spectrogram(&target, &config).unwrap();
        assert!(run.report.trace[0].total.abs() < 1e-12);
        assert_eq!(run.spectrogram, target);
    }

    #[test]
    fn optimization_reduces_loss_and_respects_bound() {
        let target = random_target(60, 9, 3);
        let run = synthesize_spectrogram(&target, &small_config()).unwrap();
        let trace = &run.report.trace;
        assert!(trace.last().unwrap().gram < 0.2 * trace[0].gram);
        assert!(run.spectrogram.values.iter().all(|&v| v >= 0.0));
        for (i, r) in trace.iter().enumerate() {
            assert_eq!(r.iteration, i);
            assert_eq!(r.diversity_active, i <= 10, "iteration {i}");
        }
        for pair in trace.windows(2) {
            if !pair[0].diversity_active && !pair[1].diversity_active {
                assert!(pair[1].total <= pair[0].total);
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let target = random_target(48, 9, 4);
        let a = synthesize_spectrogram(&target, &small_config()).unwrap();
        let b = synthesize_spectrogram(&target, &small_config()).unwrap();
        assert_eq!(a.spectrogram, b.spectrogram);
        let c = synthesize_spectrogram(
            &target,
            &SynthesisConfig {
                seed: 4,
                ..small_config()
            },
        )
        .unwrap();
        assert_ne!(a.spectrogram, c.spectrogram);
    }

    #[test]
    fn longer_output_and_stacked_model() {
        let target = random_target(64, 9, 5);
        let config = SynthesisConfig {
            frames: Some(96),
            iterations: 10,
            ..small_config()
        };
        let run = synthesize_spectrogram(&target, &config).unwrap();
        assert_eq!(run.spectrogram.frames(), 96);
        assert!(run.report.trace.last().unwrap().total < run.report.trace[0].total);

        let config = SynthesisConfig {
            stacked: Some(StackedNetSpec {
                n_layers: 3,
                n_filters: 8,
                ..Default::default()
            }),
            iterations: 10,
            ..small_config()
        };
        let run = synthesize_spectrogram(&target, &config).unwrap();
        assert!(run.report.trace.last().unwrap().total < run.report.trace[0].total);
    }

    #[test]
    fn short_target_disables_autocorrelation_with_note() {
        let target = random_target(20, 9, 6);
        let config = SynthesisConfig {
            lag_window: LagWindow::new(25, 40).unwrap(),
            iterations: 3,
            diversity_iterations: 1,
            ..small_config()
        };
        let run = synthesize_spectrogram(&target, &config).unwrap();
        assert!(run
            .report
            .notes
            .iter()
            .any(|n| n.contains("autocorrelation term disabled")));
        assert!(run.report.trace.iter().all(|r| r.autocorr == 0.0));
    }

    #[test]
    fn zero_target_is_rejected() {
        let mut target = random_target(30, 9, 7);
        target.values.fill(0.0);
        assert!(matches!(
            synthesize_spectrogram(&target, &small_config()),
            Err(SynthesisError::Loss(LossError::DegenerateTarget(_)))
        ));
    }

    #[test]
    fn score_truncates_to_shorter() {
        let target = random_target(60, 9, 8);
        let synth = LogSpectrogram {
            values: roll_rows(&target.values, 5),
            ..target.clone()
        };
        let longer = LogSpectrogram {
            values: ndarray::concatenate(ndarray::Axis(0), &[synth.values.view(), synth.values.view()]).unwrap(),
            ..target.clone()
        };
        let mut report = EvaluationReport::new();
        score(&longer, &target, &LagWindow::new(2, 20).unwrap(), &mut report).unwrap();
        assert!(report.notes.iter().any(|n| n.contains("first 60 frames")));
        assert!(report.diversity_score.unwrap() > 1e7);
    }

    #[test]
    fn synthesize_rejects_short_audio() {
        let clip = AudioClip::new((0..8000).map(|i| (i as f64 * 0.1).sin()).collect(), 16000).unwrap();
        assert!(matches!(
            synthesize(&clip, &SynthesisConfig::default()),
            Err(SynthesisError::TooShort { .. })
        ));
    }

    #[test]
    fn synthesize_produces_audio_of_expected_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clip = AudioClip::new((0..17000).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16000).unwrap();
        let config = SynthesisConfig {
            iterations: 3,
            diversity_iterations: 2,
            widths: vec![2, 4],
            n_filters: 8,
            griffin_lim_iterations: 5,
            lag_window: LagWindow::new(10, 100).unwrap(),
            ..Default::default()
        };
        let out = synthesize(&clip, &config).unwrap();
        let frames = config.stft.frames(17000);
        assert_eq!(out.spectrogram.frames(), frames);
        assert_eq!(out.clip.len(), config.stft.signal_len(frames));
        assert!((out.clip.peak() - crate::audio::PEAK_LEVEL).abs() < 1e-12);
        assert!(out.report.autocorr_score.is_some() && out.report.diversity_score.is_some());
        for key in ["prepare", "optimize", "griffin_lim", "evaluate"] {
            assert!(out.report.timing.contains_key(key));
        }
        assert_eq!(out.report.config["prng"], crate::PRNG_ALGORITHM);
    }
}
