//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! fails. The synthesis comparisons (criteria 7 and 8) run nine reduced-model
//! syntheses and take most of the time; progress goes to stderr.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use texturizer::audio::save_wav;
use texturizer::features::{init_ensemble, FeatureModel};
use texturizer::gradcheck::{gradient_check, GradCheckConfig};
use texturizer::lbfgsb::{lbfgsb_minimize, LbfgsConfig};
use texturizer::losses::{autocorr_loss, autocorr_map, diversity_loss, gram_loss, DIVERSITY_CAP, DIVERSITY_EPSILON};
use texturizer::spectrogram::{griffin_lim, stft_magnitude};
use texturizer::{synthesize, AudioClip, LagWindow, StftConfig, SynthesisConfig, TargetStatistics, TraceRecord};

const RATE: u32 = 16_000;
const SEEDS: [u64; 3] = [11, 12, 13];

/// Final-to-initial Gram ratio of the white-noise smoke run, measured on the
/// first run with seed 3 and padded by 25%.
const NOISE_GRAM_RATIO_PIN: f64 = 8e-4;
const _: () = assert!(NOISE_GRAM_RATIO_PIN < 0.05);

type Outcome = Result<String, String>;

fn main() -> ExitCode {
    let mut runs = Runs::default();
    let mut failed = 0;
    for n in 1..=10 {
        let started = Instant::now();
        let outcome = match n {
            1 => gradient_oracle(),
            2 => statistic_identities(),
            3 => shift_invariance(),
            4 => fft_autocorrelation(),
            5 => optimizer(&mut runs),
            6 => griffin_lim_convergence(),
            7 => rhythm_capture(&mut runs),
            8 => diversity_direction(&mut runs),
            9 => determinism(),
            _ => noise_smoke(),
        };
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} [PASS] {detail} ({secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} [FAIL] {detail} ({secs:.1} s)");
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, frames: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((frames, cols), || rng.gen_range(0.0..2.0))
}

/// Row `t` of the result is row `(t + shift) mod T`.
fn roll(x: &Array2<f64>, shift: usize) -> Array2<f64> {
    let t = x.nrows();
    Array2::from_shape_fn(x.dim(), |(r, c)| x[[(r + shift) % t, c]])
}

fn gradient_oracle() -> Outcome {
    let started = Instant::now();
    let config = GradCheckConfig {
        instances: 20,
        directions: 50,
        seed: 1,
        ..Default::default()
    };
    let report = gradient_check(&config).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    check(
        report.passed && report.directions_checked == 1000 && secs < 120.0,
        format!(
            "max relative error {:.2e} over {} directions ({} redrawn at kinks) in {secs:.1} s",
            report.max_relative_error, report.directions_checked, report.directions_skipped
        ),
    )
}

fn statistic_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let target = random_matrix(&mut rng, 128, 9);
    let model = init_ensemble(2, &[2, 4, 8], 16, 9).map_err(|e| e.to_string())?;
    let stats = TargetStatistics::new(&model, target.view()).map_err(|e| e.to_string())?;
    let maps = model.forward(target.view()).map_err(|e| e.to_string())?.maps;
    let window = LagWindow::new(5, 60).unwrap();
    let gram = gram_loss(&maps, &stats).map_err(|e| e.to_string())?;
    let autocorr = autocorr_loss(&maps, &stats, &window, 128).map_err(|e| e.to_string())?;
    let shifts: BTreeSet<usize> = (0..128).collect();
    let (diversity, shift) = diversity_loss(&maps, &stats, &shifts, DIVERSITY_EPSILON).map_err(|e| e.to_string())?;
    let cap_error = (diversity - DIVERSITY_CAP).abs() / DIVERSITY_CAP;
    check(
        gram <= 1e-10 && autocorr <= 1e-10 && cap_error <= 1e-12 && shift == 0,
        format!("gram {gram:.1e}, autocorr {autocorr:.1e}, diversity {diversity:.6e} (cap {DIVERSITY_CAP:.0e})"),
    )
}

fn shift_invariance() -> Outcome {
    let frames = 128;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random_matrix(&mut rng, frames, 9);
    let model = init_ensemble(3, &[2, 4, 8], 16, 9).map_err(|e| e.to_string())?;
    let stats = TargetStatistics::new(&model, s.view()).map_err(|e| e.to_string())?;
    let window = LagWindow::new(5, 60).unwrap();
    let all: BTreeSet<usize> = (0..frames).collect();
    let (mut worst_gram, mut worst_ac) = (0.0f64, 0.0f64);
    let mut misaligned = Vec::new();
    for shift in sample(&mut rng, frames - 1, 10).into_iter().map(|s| s + 1) {
        let shifted = roll(&s, shift);
        let maps = model.forward(shifted.view()).map_err(|e| e.to_string())?.maps;
        worst_gram = worst_gram.max(gram_loss(&maps, &stats).map_err(|e| e.to_string())?);
        worst_ac = worst_ac.max(autocorr_loss(&maps, &stats, &window, frames).map_err(|e| e.to_string())?);
        let (_, best) = diversity_loss(&maps, &stats, &all, DIVERSITY_EPSILON).map_err(|e| e.to_string())?;
        if (best + shift) % frames != 0 {
            misaligned.push((shift, best));
        }
    }
    check(
        worst_gram <= 1e-8 && worst_ac <= 1e-8 && misaligned.is_empty(),
        format!("worst gram {worst_gram:.1e}, worst autocorr {worst_ac:.1e}, misaligned {misaligned:?}"),
    )
}

fn fft_autocorrelation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for frames in [8, 64, 256] {
        let x = Array2::from_shape_simple_fn((frames, 5), || rng.gen_range(-1.0..1.0));
        let fast = autocorr_map(&x);
        let direct = Array2::from_shape_fn((frames, 5), |(tau, c)| {
            (0..frames).map(|t| x[[t, c]] * x[[(t + tau) % frames, c]]).sum::<f64>()
        });
        let scale = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = (&fast - &direct).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale;
        worst = worst.max(err);
    }
    check(
        worst <= 1e-9,
        format!("worst relative error {worst:.1e} for T in {{8, 64, 256}}"),
    )
}

fn optimizer(runs: &mut Runs) -> Outcome {
    let config = LbfgsConfig::default();
    let quadratic = |a: Vec<f64>| {
        move |x: &[f64]| -> Result<(f64, Vec<f64>), std::convert::Infallible> {
            let f = x.iter().zip(&a).map(|(xi, ai)| (xi - ai).powi(2)).sum();
            let g = x.iter().zip(&a).map(|(xi, ai)| 2.0 * (xi - ai)).collect();
            Ok((f, g))
        }
    };
    let interior = lbfgsb_minimize(quadratic(vec![1.0, 2.0, 3.0]), vec![0.0; 3], vec![0.0; 3], config, 10)
        .map_err(|e| e.to_string())?;
    let interior_err = max_dist(&interior.x, &[1.0, 2.0, 3.0]);
    let clamped = lbfgsb_minimize(quadratic(vec![-1.0, 2.0]), vec![1.0, 1.0], vec![0.0; 2], config, 100)
        .map_err(|e| e.to_string())?;
    let clamped_err = max_dist(&clamped.x, &[0.0, 2.0]);
    let rosenbrock = |x: &[f64]| -> Result<(f64, Vec<f64>), std::convert::Infallible> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    };
    let rosen = lbfgsb_minimize(rosenbrock, vec![0.5, 0.5], vec![0.0; 2], config, 500).map_err(|e| e.to_string())?;
    let rosen_err = max_dist(&rosen.x, &[1.0, 1.0]);
    let traces_ok = [&interior.trace, &clamped.trace, &rosen.trace]
        .iter()
        .all(|t| t.windows(2).all(|w| w[1] <= w[0]));

    let synth = runs.all()?;
    let mut violations = 0;
    let mut pairs = 0;
    for run in synth {
        for w in run.trace.windows(2) {
            if !w[0].diversity_active && !w[1].diversity_active {
                pairs += 1;
                if w[1].total > w[0].total {
                    violations += 1;
                }
            }
        }
    }
    check(
        interior_err <= 1e-6
            && interior.iterations <= 10
            && clamped_err <= 1e-6
            && rosen_err <= 1e-5
            && traces_ok
            && violations == 0
            && pairs > 0,
        format!(
            "quadratic error {interior_err:.1e} in {} iterations, clamped error {clamped_err:.1e}, \
             rosenbrock error {rosen_err:.1e}; {violations} increases over {pairs} fixed-objective steps \
             in {} synthesis runs",
            interior.iterations,
            synth.len()
        ),
    )
}

fn max_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Two seconds of material whose spectrum moves: a rising chirp, a vibrato
/// tone and bursts of amplitude-modulated noise.
fn nonstationary_clip() -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 2 * RATE as usize;
    let rate = RATE as f64;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let chirp = (2.0 * PI * (200.0 * t + 450.0 * t * t)).sin();
            let vibrato = 0.5 * (2.0 * PI * 660.0 * t + 3.0 * (2.0 * PI * 5.0 * t).sin()).sin();
            let gate = (2.0 * PI * 3.0 * t).sin().max(0.0);
            let noise = 0.3 * gate * rng.gen_range(-1.0..1.0);
            0.4 * (chirp + vibrato + noise)
        })
        .collect();
    AudioClip::new(samples, RATE).unwrap()
}

fn griffin_lim_convergence() -> Outcome {
    let config = StftConfig::default();
    let magnitude = stft_magnitude(&nonstationary_clip(), config).map_err(|e| e.to_string())?;
    let out = griffin_lim(&magnitude, 100, 6, config, RATE).map_err(|e| e.to_string())?;
    let e = &out.errors;
    let worst_rise = e.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let (first, last) = (e[0], e[e.len() - 1]);
    check(
        e.len() == 101 && worst_rise <= 1e-6 && last <= first / 2.0,
        format!("spectral convergence {first:.4} -> {last:.4}, largest rise {worst_rise:.1e}"),
    )
}

/// Four seconds of a 2 Hz click train over low-level noise.
fn click_train() -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 4 * RATE as usize;
    let mut samples: Vec<f64> = (0..n).map(|_| 0.01 * rng.gen_range(-1.0..1.0)).collect();
    let period = RATE as usize / 2;
    for start in (0..n).step_by(period) {
        for j in 0..40 {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            samples[start + j] += sign * (1.0 - j as f64 / 40.0);
        }
    }
    AudioClip::new(samples, RATE).unwrap()
}

fn reduced_config(alpha: f64, beta: f64, seed: u64) -> SynthesisConfig {
    SynthesisConfig {
        iterations: 300,
        diversity_iterations: 100,
        alpha,
        beta,
        n_filters: 128,
        seed,
        griffin_lim_iterations: 100,
        ..Default::default()
    }
}

struct RunResult {
    alpha: f64,
    beta: f64,
    autocorr_score: f64,
    diversity_score: f64,
    trace: Vec<TraceRecord>,
    seconds: f64,
}

/// Click-train syntheses shared by criteria 5, 7 and 8, run on first use.
#[derive(Default)]
struct Runs {
    done: Option<Result<Vec<RunResult>, String>>,
}

impl Runs {
    fn all(&mut self) -> Result<&[RunResult], String> {
        let done = self.done.get_or_insert_with(|| {
            let clip = click_train();
            let mut out = Vec::new();
            let grid = [(1e3, 0.0), (0.0, 0.0), (1e3, 1e-3)];
            for (alpha, beta) in grid {
                for seed in SEEDS {
                    let started = Instant::now();
                    let result = synthesize(&clip, &reduced_config(alpha, beta, seed)).map_err(|e| e.to_string())?;
                    let seconds = started.elapsed().as_secs_f64();
                    let report = result.report;
                    eprintln!(
                        "  click train alpha={alpha:e} beta={beta:e} seed={seed}: autocorr {:.4}, diversity {:.4}, {seconds:.0} s",
                        report.autocorr_score.unwrap_or(f64::NAN),
                        report.diversity_score.unwrap_or(f64::NAN),
                    );
                    out.push(RunResult {
                        alpha,
                        beta,
                        autocorr_score: report.autocorr_score.ok_or("no autocorr score")?,
                        diversity_score: report.diversity_score.ok_or("no diversity score")?,
                        trace: report.trace,
                        seconds,
                    });
                }
            }
            Ok(out)
        });
        done.as_deref().map_err(|e| e.clone())
    }

    fn select(&mut self, alpha: f64, beta: f64) -> Result<Vec<&RunResult>, String> {
        Ok(self
            .all()?
            .iter()
            .filter(|r| r.alpha == alpha && r.beta == beta)
            .collect())
    }
}

fn rhythm_capture(runs: &mut Runs) -> Outcome {
    let with: Vec<(f64, f64)> = runs
        .select(1e3, 0.0)?
        .iter()
        .map(|r| (r.autocorr_score, r.seconds))
        .collect();
    let without: Vec<(f64, f64)> = runs
        .select(0.0, 0.0)?
        .iter()
        .map(|r| (r.autocorr_score, r.seconds))
        .collect();
    let wins = with.iter().zip(&without).filter(|(a, b)| a.0 < b.0).count();
    let seconds: f64 = with.iter().chain(&without).map(|r| r.1).sum();
    let fmt = |v: &[(f64, f64)]| v.iter().map(|r| format!("{:.4}", r.0)).collect::<Vec<_>>().join(", ");
    check(
        wins == SEEDS.len() && seconds < 1200.0,
        format!(
            "autocorr score alpha=1e3 [{}] vs alpha=0 [{}], lower for {wins} of {} seeds, {:.1} min",
            fmt(&with),
            fmt(&without),
            SEEDS.len(),
            seconds / 60.0
        ),
    )
}

fn diversity_direction(runs: &mut Runs) -> Outcome {
    let mean = |v: Vec<&RunResult>| v.iter().map(|r| r.diversity_score).sum::<f64>() / v.len() as f64;
    let plain = mean(runs.select(1e3, 0.0)?);
    let diverse = mean(runs.select(1e3, 1e-3)?);
    check(
        diverse <= plain,
        format!("mean diversity score beta=1e-3 {diverse:.4} vs beta=0 {plain:.4}"),
    )
}

fn determinism() -> Outcome {
    let clip = click_train();
    let short = AudioClip::new(clip.samples[..2 * RATE as usize].to_vec(), RATE).unwrap();
    let config = SynthesisConfig {
        iterations: 20,
        diversity_iterations: 10,
        n_filters: 32,
        seed: 9,
        griffin_lim_iterations: 30,
        ..Default::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for k in 0..2 {
        let result = synthesize(&short, &config).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("run{k}.wav"));
        save_wav(&result.clip, &path).map_err(|e| e.to_string())?;
        let bits: Vec<u64> = result.spectrogram.values.iter().map(|v| v.to_bits()).collect();
        outputs.push((bits, std::fs::read(&path).map_err(|e| e.to_string())?));
    }
    let same_spec = outputs[0].0 == outputs[1].0;
    let same_wav = outputs[0].1 == outputs[1].1;
    check(
        same_spec && same_wav,
        format!("spectrograms identical: {same_spec}, WAV bytes identical: {same_wav}"),
    )
}

fn noise_smoke() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let samples = (0..4 * RATE as usize).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let clip = AudioClip::new(samples, RATE).unwrap();
    let config = SynthesisConfig {
        iterations: 200,
        n_filters: 128,
        seed: 3,
        griffin_lim_iterations: 50,
        ..Default::default()
    };
    let result = synthesize(&clip, &config).map_err(|e| e.to_string())?;
    let trace = &result.report.trace;
    let (first, last) = (trace[0].gram, trace[trace.len() - 1].gram);
    let ratio = last / first;
    check(
        ratio <= NOISE_GRAM_RATIO_PIN,
        format!("final gram {last:.4e} / initial {first:.4e} = {ratio:.2e} (pinned {NOISE_GRAM_RATIO_PIN:.0e})"),
    )
}
