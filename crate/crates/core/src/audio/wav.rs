use std::fs;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioClip, AudioError};
use crate::temp_sibling;

/// Reads a PCM-16 or float-32 WAV file, mixing all channels down to mono by
/// averaging. PCM-16 values are mapped to `[-1, 1)` by dividing by 32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(AudioError::NotFound(path.to_path_buf()));
    }
    let wav_err = |source| AudioError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(unsupported(path, "zero channels".into()));
    }
    if spec.sample_rate == 0 {
        return Err(AudioError::InvalidRate(0));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        (format, bits) => {
            return Err(unsupported(
                path,
                format!("{bits}-bit {format:?} (expected 16-bit PCM or 32-bit float)"),
            ))
        }
    };
    let frames = interleaved.len() / channels;
    if frames == 0 {
        return Err(AudioError::Empty);
    }
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

fn unsupported(path: &Path, detail: String) -> AudioError {
    AudioError::UnsupportedEncoding {
        path: path.to_path_buf(),
        detail,
    }
}

/// Quantizes one sample to PCM-16 after clamping it to `[-1, 1]`.
pub(crate) fn quantize_pcm16(sample: f64) -> i16 {
    let clamped = if sample.is_nan() { 0.0 } else { sample.clamp(-1.0, 1.0) };
    (clamped * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes a mono PCM-16 file. The data goes to a sibling temporary file first
/// and is renamed into place once complete.
pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let path = path.as_ref();
    let write_err = |source| AudioError::Write {
        path: path.to_path_buf(),
        source,
    };
    let tmp = temp_sibling(path);
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let result = (|| -> Result<(), hound::Error> {
        let mut writer = WavWriter::create(&tmp, spec)?;
        for &s in &clip.samples {
            writer.write_sample(quantize_pcm16(s))?;
        }
        writer.finalize()
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(match e {
            hound::Error::IoError(io) => write_err(io),
            other => AudioError::Wav {
                path: path.to_path_buf(),
                source: other,
            },
        });
    }
    fs::rename(&tmp, path).map_err(write_err)
}
