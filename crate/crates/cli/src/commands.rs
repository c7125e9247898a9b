use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use texturizer::audio::{load_wav, normalize_peak, resample, save_wav};
use texturizer::evaluation::EvaluationReport;
use texturizer::gradcheck::{gradient_check, GradCheckConfig, GradCheckError};
use texturizer::losses::{LagWindow, LossError};
use texturizer::spectrogram::{log_spectrogram, LogSpectrogram, SpectrogramError};
use texturizer::synthesis::score;
use texturizer::{synthesize, AudioClip, AudioError, SynthesisConfig, SynthesisError};

use crate::config::parse_list;
use crate::plot::render_spectrogram_png;
use crate::{CliError, EvalArgs, GradcheckArgs, PlotArgs, SweepArgs, SynthArgs};

pub const SWEEP_HELP: &str = "\
CSV columns, one row per run in grid order:
  index, seed, alpha, beta, max_width, widths (space separated), n_filters,
  iterations, diversity_iterations, griffin_lim_iterations, init_scale,
  min_lag, max_lag, autocorr_score, diversity_score, final_gram,
  final_autocorr, final_diversity, seconds
Run i uses a seed derived from the master seed and i, so rows are
reproducible one by one.";

fn audio_error(e: AudioError) -> CliError {
    CliError::usage(e.to_string())
}

fn synthesis_error(e: SynthesisError) -> CliError {
    let input_problem = match &e {
        SynthesisError::InvalidConfig(_) | SynthesisError::TooShort { .. } | SynthesisError::Audio(_) => true,
        SynthesisError::Spectrogram(s) => matches!(
            s,
            SpectrogramError::TooShort { .. } | SpectrogramError::InvalidConfig(_) | SpectrogramError::Io(_)
        ),
        SynthesisError::Loss(LossError::DegenerateTarget(_)) => true,
        _ => false,
    };
    if input_problem {
        CliError::usage(e.to_string())
    } else {
        CliError::numeric(e.to_string())
    }
}

fn load(path: &Path) -> Result<AudioClip, CliError> {
    load_wav(path).map_err(audio_error)
}

/// Resampled, peak-normalized log-spectrogram of a WAV file.
fn spectrogram_of(path: &Path, config: &SynthesisConfig) -> Result<LogSpectrogram, CliError> {
    let clip = resample(&load(path)?, config.sample_rate).map_err(audio_error)?;
    let clip = normalize_peak(&clip).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    log_spectrogram(&clip, config.stft).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn save_report(report: &EvaluationReport, path: &Path) -> Result<(), CliError> {
    report.save(path).map_err(|e| CliError::io(path, e))
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut extra = Vec::new();
    for (key, value) in [("output", &args.output), ("report", &args.report), ("plot", &args.plot)] {
        if let Some(v) = value {
            extra.push((key.to_string(), v.display().to_string()));
        }
    }
    let config = args.config.resolve(&extra)?;
    if args.dry_run {
        println!(
            "{}",
            serde_json::to_string_pretty(&config.to_json()).expect("json value serializes")
        );
        return Ok(());
    }
    let input = config
        .input
        .as_deref()
        .ok_or_else(|| CliError::usage("no input: pass --input or set input in the config file"))?;
    let output = config
        .output
        .as_deref()
        .ok_or_else(|| CliError::usage("no output: pass --output or set output in the config file"))?;
    let clip = load(input)?;
    let result = synthesize(&clip, &config.synthesis).map_err(synthesis_error)?;
    save_wav(&result.clip, output).map_err(audio_error)?;

    let mut report = result.report;
    report.config["run"] = config.to_json();
    let report_path = config.report.clone().unwrap_or_else(|| output.with_extension("json"));
    save_report(&report, &report_path)?;
    if let Some(plot) = &config.plot {
        render_spectrogram_png(&[&result.target.values, &result.spectrogram.values], plot)?;
    }
    let last = report.trace.last();
    println!(
        "wrote {} ({} iterations, final loss {:.6e}); autocorr score {:.6}, diversity score {:.6}; report {}",
        output.display(),
        last.map_or(0, |r| r.iteration),
        last.map_or(f64::NAN, |r| r.total),
        report.autocorr_score.unwrap_or(f64::NAN),
        report.diversity_score.unwrap_or(f64::NAN),
        report_path.display()
    );
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let config = args.config.resolve(&[])?;
    let synth = spectrogram_of(&args.synth, &config.synthesis)?;
    let target = spectrogram_of(&args.target, &config.synthesis)?;
    let mut report = EvaluationReport::new();
    report.config = json!({
        "synth": args.synth,
        "target": args.target,
        "run": config.to_json(),
        "prng": texturizer::PRNG_ALGORITHM,
    });
    score(&synth, &target, &config.synthesis.lag_window, &mut report).map_err(|e| match e {
        SynthesisError::Evaluation(inner) => CliError::usage(inner.to_string()),
        other => synthesis_error(other),
    })?;
    let summary = json!({
        "autocorr_score": report.autocorr_score,
        "diversity_score": report.diversity_score,
        "notes": report.notes,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("json value serializes")
    );
    if let Some(path) = &args.report {
        save_report(&report, path)?;
    }
    Ok(())
}

/// Seed of sweep run `index`: the first draw of stream `index` of a ChaCha8
/// generator seeded with the master seed.
pub fn derive_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64);
    rng.next_u64()
}

/// Powers of two from 2 up to `max`.
fn widths_up_to(max: usize) -> Vec<usize> {
    std::iter::successors(Some(2usize), |w| Some(w * 2))
        .take_while(|&w| w <= max)
        .collect()
}

fn grid_axis<T: std::str::FromStr + Clone>(
    name: &str,
    text: &Option<String>,
    base: T,
) -> Result<(Vec<T>, bool), CliError>
where
    T::Err: std::fmt::Display,
{
    match text {
        None => Ok((vec![base], false)),
        Some(text) => {
            let values = parse_list(name, text)?;
            if values.is_empty() {
                return Err(CliError::usage(format!("empty grid for {name}")));
            }
            Ok((values, true))
        }
    }
}

struct SweepRun {
    index: usize,
    max_width: usize,
    config: SynthesisConfig,
}

struct SweepRow {
    seconds: f64,
    report: EvaluationReport,
}

pub fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let base = args.config.resolve(&[])?;
    let s = &base.synthesis;
    let base_max = s.widths.iter().copied().max().unwrap_or(2);
    let (alphas, a) = grid_axis("alpha", &args.grid_alpha, s.alpha)?;
    let (betas, b) = grid_axis("beta", &args.grid_beta, s.beta)?;
    let (max_widths, w) = grid_axis("max_width", &args.grid_max_width, base_max)?;
    let (filters, f) = grid_axis("n_filters", &args.grid_n_filters, s.n_filters)?;
    if !(a || b || w || f) {
        return Err(CliError::usage(
            "empty grid: give at least one of --grid-alpha, --grid-beta, --grid-max-width, --grid-n-filters",
        ));
    }
    if args.repeats == 0 || args.jobs == 0 {
        return Err(CliError::usage("--repeats and --jobs must be at least 1"));
    }
    let input = base
        .input
        .as_deref()
        .ok_or_else(|| CliError::usage("no input: pass --input or set input in the config file"))?;

    let mut runs = Vec::new();
    for &alpha in &alphas {
        for &beta in &betas {
            for &max_width in &max_widths {
                for &n_filters in &filters {
                    for _ in 0..args.repeats {
                        let index = runs.len();
                        let widths = if w { widths_up_to(max_width) } else { s.widths.clone() };
                        if widths.is_empty() {
                            return Err(CliError::usage(format!("max width {max_width} is below 2")));
                        }
                        let config = SynthesisConfig {
                            alpha,
                            beta,
                            widths,
                            n_filters,
                            seed: derive_seed(s.seed, index),
                            ..s.clone()
                        };
                        config
                            .validate()
                            .map_err(|e| CliError::usage(format!("run {index}: {e}")))?;
                        runs.push(SweepRun {
                            index,
                            max_width,
                            config,
                        });
                    }
                }
            }
        }
    }
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let clip = load(input)?;
    log::info!("sweep: {} runs on {} jobs", runs.len(), args.jobs);

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRow, CliError>>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..args.jobs.min(runs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(run) = runs.get(i) else { break };
                let outcome = sweep_one(&clip, run, args.out_dir.as_deref());
                if let Err(e) = &outcome {
                    log::error!("run {}: {}", run.index, e.message);
                }
                results.lock().expect("no panics while holding the lock")[i] = Some(outcome);
            });
        }
    });
    let results = results.into_inner().expect("no panics while holding the lock");

    let mut table = csv::Writer::from_writer(Vec::new());
    let header = [
        "index",
        "seed",
        "alpha",
        "beta",
        "max_width",
        "widths",
        "n_filters",
        "iterations",
        "diversity_iterations",
        "griffin_lim_iterations",
        "init_scale",
        "min_lag",
        "max_lag",
        "autocorr_score",
        "diversity_score",
        "final_gram",
        "final_autocorr",
        "final_diversity",
        "seconds",
    ];
    let csv_err = |e: csv::Error| CliError::numeric(format!("csv: {e}"));
    table.write_record(header).map_err(csv_err)?;
    let mut failures = Vec::new();
    for (run, result) in runs.iter().zip(results) {
        let row = match result {
            Some(Ok(row)) => row,
            Some(Err(e)) => {
                failures.push(format!("run {}: {}", run.index, e.message));
                continue;
            }
            None => {
                failures.push(format!("run {} did not finish", run.index));
                continue;
            }
        };
        let c = &run.config;
        let last = row.report.trace.last();
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let record = [
            run.index.to_string(),
            c.seed.to_string(),
            c.alpha.to_string(),
            c.beta.to_string(),
            run.max_width.to_string(),
            c.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(" "),
            c.n_filters.to_string(),
            c.iterations.to_string(),
            c.diversity_iterations.to_string(),
            c.griffin_lim_iterations.to_string(),
            c.init_scale.to_string(),
            c.lag_window.min_lag.to_string(),
            c.lag_window.max_lag.to_string(),
            opt(row.report.autocorr_score),
            opt(row.report.diversity_score),
            opt(last.map(|r| r.gram)),
            opt(last.map(|r| r.autocorr)),
            opt(last.map(|r| r.diversity)),
            format!("{:.3}", row.seconds),
        ];
        table.write_record(&record).map_err(csv_err)?;
    }
    let bytes = table.into_inner().map_err(|e| CliError::numeric(format!("csv: {e}")))?;
    texturizer::write_atomic(&args.output, &bytes).map_err(|e| CliError::io(&args.output, e))?;
    println!(
        "wrote {} ({} of {} runs)",
        args.output.display(),
        runs.len() - failures.len(),
        runs.len()
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::numeric(failures.join("; ")))
    }
}

fn sweep_one(clip: &AudioClip, run: &SweepRun, out_dir: Option<&Path>) -> Result<SweepRow, CliError> {
    let started = Instant::now();
    let result = synthesize(clip, &run.config).map_err(synthesis_error)?;
    let seconds = started.elapsed().as_secs_f64();
    let mut report = result.report;
    report.config["sweep_index"] = json!(run.index);
    if let Some(dir) = out_dir {
        let stem: PathBuf = dir.join(format!("run{:04}", run.index));
        save_wav(&result.clip, stem.with_extension("wav")).map_err(audio_error)?;
        save_report(&report, &stem.with_extension("json"))?;
    }
    log::info!("run {} finished in {seconds:.1} s", run.index);
    Ok(SweepRow { seconds, report })
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let config = GradCheckConfig {
        instances: args.instances,
        frames: args.frames,
        bins: args.bins,
        widths: parse_list("widths", &args.widths)?,
        n_filters: args.n_filters,
        alpha: args.alpha,
        beta: args.beta,
        lag_window: LagWindow::new(args.min_lag, args.max_lag).map_err(|e| CliError::usage(e.to_string()))?,
        directions: args.directions,
        epsilon: args.epsilon,
        tolerance: args.tolerance,
        seed: args.seed,
        gradient_scale: args.corrupt_gradient,
        ..Default::default()
    };
    let report = gradient_check(&config).map_err(|e| match e {
        GradCheckError::InvalidConfig(_) | GradCheckError::Features(_) => CliError::usage(e.to_string()),
        other => CliError::numeric(other.to_string()),
    })?;
    println!(
        "max relative error {:.3e} over {} directions ({} redrawn at kinks), tolerance {:.1e}",
        report.max_relative_error, report.directions_checked, report.directions_skipped, config.tolerance
    );
    if report.passed {
        Ok(())
    } else {
        Err(CliError::numeric("gradient check failed"))
    }
}

pub fn plot(args: &PlotArgs) -> Result<(), CliError> {
    let config = args.config.resolve(&[])?;
    let spectrograms = args
        .inputs
        .iter()
        .map(|p| spectrogram_of(p, &config.synthesis))
        .collect::<Result<Vec<_>, _>>()?;
    let panels: Vec<_> = spectrograms.iter().map(|s| &s.values).collect();
    render_spectrogram_png(&panels, &args.output)?;
    println!("wrote {}", args.output.display());
    Ok(())
}
