//! Mono audio clips: WAV I/O, resampling and peak normalization.

mod resample;
mod wav;

use std::path::PathBuf;

use thiserror::Error;

pub use resample::resample;
pub use wav::{load_wav, save_wav};

/// Peak level used by [`normalize_peak`].
pub const PEAK_LEVEL: f64 = 0.95;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("audio file not found: {0}")]
    NotFound(PathBuf),
    #[error("unsupported WAV encoding in {path}: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("audio contains no samples")]
    Empty,
    #[error("audio is silent (all samples are zero)")]
    Silent,
    #[error("invalid sample rate {0} Hz")]
    InvalidRate(u32),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed WAV file {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

/// A mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}

/// Scales the clip by a single positive factor so that its peak magnitude is
/// [`PEAK_LEVEL`].
pub fn normalize_peak(clip: &AudioClip) -> Result<AudioClip, AudioError> {
    if clip.samples.is_empty() {
        return Err(AudioError::Empty);
    }
    let peak = clip.peak();
    if peak == 0.0 {
        return Err(AudioError::Silent);
    }
    let gain = PEAK_LEVEL / peak;
    Ok(AudioClip {
        samples: clip.samples.iter().map(|s| s * gain).collect(),
        sample_rate: clip.sample_rate,
    })
}
