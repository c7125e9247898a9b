//! Log-magnitude STFT and its Griffin-Lim inversion.
//!
//! Frames are taken without centering or padding: frame `t` covers samples
//! `[t * hop, t * hop + window)` and any trailing remainder shorter than a hop
//! is dropped, so `T = floor((N - window) / hop) + 1`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;

#[derive(Debug, Error)]
pub enum SpectrogramError {
    #[error("invalid STFT configuration: {0}")]
    InvalidConfig(String),
    #[error("signal of {len} samples is shorter than one {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("negative magnitude {value} at frame {frame}, bin {bin}")]
    Negative { frame: usize, bin: usize, value: f64 },
    #[error("expected {expected} frequency bins, got {actual}")]
    BinMismatch { expected: usize, actual: usize },
    #[error("spectrogram has no frames")]
    NoFrames,
    #[error("Griffin-Lim needs at least one iteration")]
    InvalidIterations,
    #[error("bad spectrogram dump: {0}")]
    BadDump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// STFT parameters. The window is always a periodic Hann window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_size: usize,
    pub hop_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_size: 512,
            hop_size: 64,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<(), SpectrogramError> {
        if self.window_size < 2 || !self.window_size.is_multiple_of(2) {
            return Err(SpectrogramError::InvalidConfig(format!(
                "window size {} must be even and at least 2",
                self.window_size
            )));
        }
        if self.hop_size == 0 || self.hop_size > self.window_size / 2 {
            return Err(SpectrogramError::InvalidConfig(format!(
                "hop size {} must be in 1..={}",
                self.hop_size,
                self.window_size / 2
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Number of frames produced from `samples` samples.
    pub fn frames(&self, samples: usize) -> usize {
        if samples < self.window_size {
            0
        } else {
            (samples - self.window_size) / self.hop_size + 1
        }
    }

    /// Length of the signal reconstructed from `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.hop_size + self.window_size
    }

    pub fn window(&self) -> Vec<f64> {
        hann(self.window_size)
    }
}

/// Periodic Hann window.
pub fn hann(size: usize) -> Vec<f64> {
    (0..size)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / size as f64).cos())
        .collect()
}

/// A `T x B` log-compressed magnitude spectrogram, `ln(1 + |STFT|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSpectrogram {
    pub values: Array2<f64>,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl LogSpectrogram {
    pub fn new(values: Array2<f64>, config: StftConfig, sample_rate: u32) -> Result<Self, SpectrogramError> {
        config.validate()?;
        if values.nrows() == 0 {
            return Err(SpectrogramError::NoFrames);
        }
        if values.ncols() != config.bins() {
            return Err(SpectrogramError::BinMismatch {
                expected: config.bins(),
                actual: values.ncols(),
            });
        }
        check_nonnegative(&values)?;
        Ok(Self {
            values,
            config,
            sample_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }

    /// Circular shift along time: row `t` of the result is row `(t + shift) mod T`.
    pub fn roll(&self, shift: usize) -> Self {
        Self {
            values: roll_rows(&self.values, shift),
            ..self.clone()
        }
    }

    /// Keeps the first `frames` frames.
    pub fn truncated(&self, frames: usize) -> Self {
        let frames = frames.min(self.frames()).max(1);
        Self {
            values: self.values.slice(ndarray::s![..frames, ..]).to_owned(),
            ..self.clone()
        }
    }

    /// Writes the `LSPC` debug dump: the ASCII magic, then `T`, `B` and the
    /// sample rate as little-endian u32, then the values as row-major
    /// little-endian f32.
    pub fn write_dump(&self, mut out: impl Write) -> Result<(), SpectrogramError> {
        out.write_all(b"LSPC")?;
        out.write_all(&(self.frames() as u32).to_le_bytes())?;
        out.write_all(&(self.bins() as u32).to_le_bytes())?;
        out.write_all(&self.sample_rate.to_le_bytes())?;
        for v in self.values.iter() {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save_dump(&self, path: impl AsRef<Path>) -> Result<(), SpectrogramError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_dump(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads an `LSPC` dump. The hop size is not stored; `hop_size` supplies it.
    pub fn read_dump(mut input: impl Read, hop_size: usize) -> Result<Self, SpectrogramError> {
        let mut header = [0u8; 16];
        input.read_exact(&mut header)?;
        if &header[..4] != b"LSPC" {
            return Err(SpectrogramError::BadDump("missing LSPC magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let (frames, bins, rate) = (word(4) as usize, word(8) as usize, word(12));
        if bins < 2 {
            return Err(SpectrogramError::BadDump(format!("{bins} bins")));
        }
        let mut raw = vec![0u8; frames * bins * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let values =
            Array2::from_shape_vec((frames, bins), data).map_err(|e| SpectrogramError::BadDump(e.to_string()))?;
        let config = StftConfig {
            window_size: 2 * (bins - 1),
            hop_size,
        };
        Self::new(values, config, rate)
    }
}

pub(crate) fn roll_rows(values: &Array2<f64>, shift: usize) -> Array2<f64> {
    let t = values.nrows();
    Array2::from_shape_fn(values.dim(), |(r, c)| values[[(r + shift) % t, c]])
}

fn check_nonnegative(values: &Array2<f64>) -> Result<(), SpectrogramError> {
    for ((frame, bin), &value) in values.indexed_iter() {
        if !(value >= 0.0) {
            return Err(SpectrogramError::Negative { frame, bin, value });
        }
    }
    Ok(())
}

/// Forward and inverse STFT machinery for one configuration.
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self, SpectrogramError> {
        config.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Self {
            window: config.window(),
            forward: planner.plan_fft_forward(config.window_size),
            inverse: planner.plan_fft_inverse(config.window_size),
            config,
        })
    }

    /// Complex `T x B` STFT of `signal`.
    pub fn analyze(&self, signal: &[f64]) -> Result<Array2<Complex64>, SpectrogramError> {
        let frames = self.config.frames(signal.len());
        if frames == 0 {
            return Err(SpectrogramError::TooShort {
                len: signal.len(),
                window: self.config.window_size,
            });
        }
        let (w, h) = (self.config.window_size, self.config.hop_size);
        let mut out = Array2::<Complex64>::zeros((frames, self.config.bins()));
        let mut buf = vec![0.0; w];
        let mut scratch = self.forward.make_scratch_vec();
        for (t, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let frame = &signal[t * h..t * h + w];
            for ((b, x), win) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = x * win;
            }
            self.forward
                .process_with_scratch(&mut buf, row.as_slice_mut().unwrap(), &mut scratch)
                .expect("fft length mismatch");
        }
        Ok(out)
    }

    /// Weighted least-squares overlap-add: the signal whose STFT is closest to
    /// `spectrum` in the Frobenius sense. Samples no window covers are zero.
    pub fn synthesize(&self, spectrum: &Array2<Complex64>) -> Vec<f64> {
        let (w, h) = (self.config.window_size, self.config.hop_size);
        let frames = spectrum.nrows();
        let len = self.config.signal_len(frames);
        let mut num = vec![0.0; len];
        let mut den = vec![0.0; len];
        let mut bins = vec![Complex64::new(0.0, 0.0); self.config.bins()];
        let mut frame = vec![0.0; w];
        let mut scratch = self.inverse.make_scratch_vec();
        let scale = 1.0 / w as f64;
        for (t, row) in spectrum.axis_iter(Axis(0)).enumerate() {
            bins.iter_mut().zip(row).for_each(|(b, v)| *b = *v);
            bins[0].im = 0.0;
            let last = bins.len() - 1;
            bins[last].im = 0.0;
            self.inverse
                .process_with_scratch(&mut bins, &mut frame, &mut scratch)
                .expect("fft length mismatch");
            let start = t * h;
            for (i, (&v, &win)) in frame.iter().zip(&self.window).enumerate() {
                num[start + i] += win * v * scale;
                den[start + i] += win * win;
            }
        }
        num.iter()
            .zip(&den)
            .map(|(n, d)| if *d > 1e-12 { n / d } else { 0.0 })
            .collect()
    }
}

/// `|STFT|` of the clip as a `T x B` matrix.
pub fn stft_magnitude(clip: &AudioClip, config: StftConfig) -> Result<Array2<f64>, SpectrogramError> {
    let stft = Stft::new(config)?;
    Ok(stft.analyze(&clip.samples)?.mapv(|c| c.norm()))
}

/// Entry-wise `ln(1 + m)`.
pub fn log_compress(
    magnitude: &Array2<f64>,
    config: StftConfig,
    sample_rate: u32,
) -> Result<LogSpectrogram, SpectrogramError> {
    check_nonnegative(magnitude)?;
    LogSpectrogram::new(magnitude.mapv(f64::ln_1p), config, sample_rate)
}

/// Entry-wise `exp(s) - 1`, clamped below at zero.
pub fn log_decompress(spectrogram: &LogSpectrogram) -> Array2<f64> {
    spectrogram.values.mapv(|s| s.exp_m1().max(0.0))
}

/// `ln(1 + |STFT(clip)|)`.
pub fn log_spectrogram(clip: &AudioClip, config: StftConfig) -> Result<LogSpectrogram, SpectrogramError> {
    log_compress(&stft_magnitude(clip, config)?, config, clip.sample_rate)
}

/// `|| |STFT(x)| - target ||_F / || target ||_F`, or 0 for an all-zero target.
pub fn spectral_convergence(estimate: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let den = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        return 0.0;
    }
    let num = estimate
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    num / den
}

/// Result of a Griffin-Lim run.
#[derive(Debug, Clone)]
pub struct GriffinLimOutput {
    pub clip: AudioClip,
    /// Spectral convergence of the signal after 0, 1, ..., `iterations`
    /// projections. Entry 0 is the random-phase starting point.
    pub errors: Vec<f64>,
}

/// Recovers a signal whose STFT magnitude approximates `magnitude`, starting
/// from phases drawn uniformly from `[-pi, pi)` with the given seed.
pub fn griffin_lim(
    magnitude: &Array2<f64>,
    iterations: usize,
    seed: u64,
    config: StftConfig,
    sample_rate: u32,
) -> Result<GriffinLimOutput, SpectrogramError> {
    if iterations == 0 {
        return Err(SpectrogramError::InvalidIterations);
    }
    if magnitude.nrows() == 0 {
        return Err(SpectrogramError::NoFrames);
    }
    if magnitude.ncols() != config.bins() {
        return Err(SpectrogramError::BinMismatch {
            expected: config.bins(),
            actual: magnitude.ncols(),
        });
    }
    check_nonnegative(magnitude)?;
    let stft = Stft::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spectrum = magnitude.mapv(|m| Complex64::from_polar(m, rng.gen_range(-PI..PI)));
    let mut signal = stft.synthesize(&spectrum);
    let mut errors = Vec::with_capacity(iterations + 1);
    for _ in 0..iterations {
        let estimate = stft.analyze(&signal)?;
        errors.push(spectral_convergence(&estimate.mapv(|c| c.norm()), magnitude));
        Zip::from(&mut spectrum)
            .and(&estimate)
            .and(magnitude)
            .for_each(|s, e, &m| {
                let norm = e.norm();
                *s = if norm > 0.0 {
                    e * (m / norm)
                } else {
                    Complex64::new(m, 0.0)
                };
            });
        signal = stft.synthesize(&spectrum);
    }
    let estimate = stft.analyze(&signal)?;
    errors.push(spectral_convergence(&estimate.mapv(|c| c.norm()), magnitude));
    Ok(GriffinLimOutput {
        clip: AudioClip {
            samples: signal,
            sample_rate,
        },
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn noise_clip(n: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16000).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(StftConfig::default().validate().is_ok());
        assert!(StftConfig {
            window_size: 511,
            hop_size: 64
        }
        .validate()
        .is_err());
        assert!(StftConfig {
            window_size: 512,
            hop_size: 257
        }
        .validate()
        .is_err());
        assert!(StftConfig {
            window_size: 512,
            hop_size: 256
        }
        .validate()
        .is_ok());
        assert!(StftConfig {
            window_size: 512,
            hop_size: 0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn frame_count_drops_remainder() {
        let clip = AudioClip::new(vec![0.0; 1088], 16000).unwrap();
        let mag = stft_magnitude(&clip, StftConfig::default()).unwrap();
        assert_eq!(mag.dim(), (10, 257));
        assert!(mag.iter().all(|&m| m == 0.0));

        let clip = AudioClip::new(vec![0.0; 1088 + 63], 16000).unwrap();
        assert_eq!(stft_magnitude(&clip, StftConfig::default()).unwrap().nrows(), 10);
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let clip = AudioClip::new(vec![0.0; 511], 16000).unwrap();
        assert!(matches!(
            stft_magnitude(&clip, StftConfig::default()),
            Err(SpectrogramError::TooShort { len: 511, window: 512 })
        ));
    }

    #[test]
    fn constant_signal_lands_in_dc_bin() {
        let clip = AudioClip::new(vec![1.0; 2048], 16000).unwrap();
        let mag = stft_magnitude(&clip, StftConfig::default()).unwrap();
        let window_sum: f64 = hann(512).iter().sum();
        assert!((window_sum - 256.0).abs() < 1e-9);
        for row in mag.rows() {
            assert!((row[0] - window_sum).abs() < 1e-9);
            // the periodic Hann window leaks exactly into bin 1 only
            assert!(row.iter().skip(2).all(|&m| m < 1e-9));
        }
    }

    #[test]
    fn bin_centered_sine_peaks_at_its_bin() {
        let freq = 31.0 * 16000.0 / 512.0;
        assert_eq!(freq, 968.75);
        let samples = (0..4096)
            .map(|n| (2.0 * PI * freq * n as f64 / 16000.0).sin())
            .collect();
        let clip = AudioClip::new(samples, 16000).unwrap();
        let mag = stft_magnitude(&clip, StftConfig::default()).unwrap();
        for row in mag.rows() {
            let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(peak, 31);
        }
    }

    #[test]
    fn magnitude_scales_linearly() {
        let clip = noise_clip(3000, 1);
        let half = AudioClip::new(clip.samples.iter().map(|s| 0.5 * s).collect(), 16000).unwrap();
        let a = stft_magnitude(&clip, StftConfig::default()).unwrap();
        let b = stft_magnitude(&half, StftConfig::default()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((0.5 * x - y).abs() <= 1e-9 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn log_compression_values() {
        let mag = Array2::from_shape_vec((1, 3), vec![0.0, E - 1.0, 1.0]).unwrap();
        let config = StftConfig {
            window_size: 4,
            hop_size: 2,
        };
        let s = log_compress(&mag, config, 16000).unwrap();
        assert_eq!(s.values[[0, 0]], 0.0);
        assert!((s.values[[0, 1]] - 1.0).abs() < 1e-15);
        assert!((s.values[[0, 2]] - 2f64.ln()).abs() < 1e-15);
        let back = log_decompress(&s);
        for (a, b) in mag.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 1e-9 * a.abs());
        }
        let neg = Array2::from_shape_vec((1, 3), vec![0.0, -1e-3, 1.0]).unwrap();
        assert!(matches!(
            log_compress(&neg, config, 16000),
            Err(SpectrogramError::Negative { frame: 0, bin: 1, .. })
        ));
    }

    #[test]
    fn decompress_clamps_at_zero() {
        let config = StftConfig {
            window_size: 4,
            hop_size: 2,
        };
        let s = LogSpectrogram {
            values: Array2::from_shape_vec((1, 3), vec![-1e-17, 1.0, 2f64.ln()]).unwrap(),
            config,
            sample_rate: 16000,
        };
        let m = log_decompress(&s);
        assert_eq!(m[[0, 0]], 0.0);
        assert!((m[[0, 1]] - (E - 1.0)).abs() < 1e-15);
        assert!((m[[0, 2]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn analysis_synthesis_is_identity_away_from_edges() {
        let clip = noise_clip(4096, 2);
        let stft = Stft::new(StftConfig::default()).unwrap();
        let spec = stft.analyze(&clip.samples).unwrap();
        let back = stft.synthesize(&spec);
        assert_eq!(back.len(), clip.samples.len());
        for n in 512..back.len() - 512 {
            assert!((back[n] - clip.samples[n]).abs() < 1e-12, "sample {n}");
        }
    }

    #[test]
    fn griffin_lim_of_zeros_is_silent() {
        let mag = Array2::zeros((8, 257));
        let out = griffin_lim(&mag, 3, 0, StftConfig::default(), 16000).unwrap();
        assert!(out.clip.samples.iter().all(|&s| s == 0.0));
        assert_eq!(out.clip.samples.len(), StftConfig::default().signal_len(8));
    }

    #[test]
    fn griffin_lim_is_deterministic_and_converges() {
        let clip = noise_clip(8000, 4);
        let mag = stft_magnitude(&clip, StftConfig::default()).unwrap();
        let a = griffin_lim(&mag, 30, 9, StftConfig::default(), 16000).unwrap();
        let b = griffin_lim(&mag, 30, 9, StftConfig::default(), 16000).unwrap();
        assert_eq!(a.clip.samples, b.clip.samples);
        assert_eq!(a.errors.len(), 31);
        for w in a.errors.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{} -> {}", w[0], w[1]);
        }
        assert!(a.errors[30] < a.errors[0]);
        let c = griffin_lim(&mag, 30, 10, StftConfig::default(), 16000).unwrap();
        assert_ne!(a.clip.samples, c.clip.samples);
    }

    #[test]
    fn griffin_lim_argument_errors() {
        let mag = Array2::zeros((4, 257));
        assert!(matches!(
            griffin_lim(&mag, 0, 0, StftConfig::default(), 16000),
            Err(SpectrogramError::InvalidIterations)
        ));
        let wrong = Array2::zeros((4, 100));
        assert!(griffin_lim(&wrong, 1, 0, StftConfig::default(), 16000).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let clip = noise_clip(2000, 5);
        let s = log_spectrogram(&clip, StftConfig::default()).unwrap();
        let mut bytes = Vec::new();
        s.write_dump(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"LSPC");
        assert_eq!(bytes.len(), 16 + 4 * s.values.len());
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), s.frames() as u32);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 257);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 16000);
        let back = LogSpectrogram::read_dump(bytes.as_slice(), 64).unwrap();
        assert_eq!(back.config, s.config);
        for (a, b) in s.values.iter().zip(back.values.iter()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        assert!(LogSpectrogram::read_dump(&b"XXXX0000000000000"[..], 64).is_err());
    }

    #[test]
    fn roll_and_truncate() {
        let config = StftConfig {
            window_size: 4,
            hop_size: 2,
        };
        let values = Array2::from_shape_fn((4, 3), |(t, b)| (t * 3 + b) as f64);
        let s = LogSpectrogram::new(values, config, 8000).unwrap();
        let r = s.roll(1);
        assert_eq!(r.values.row(0), s.values.row(1));
        assert_eq!(r.values.row(3), s.values.row(0));
        assert_eq!(s.truncated(2).frames(), 2);
    }
}
