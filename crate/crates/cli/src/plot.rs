//! Grayscale spectrogram images.

use std::path::Path;

use ndarray::Array2;

use crate::CliError;

/// Columns of black between panels.
const GAP: usize = 4;

/// Pixel rows of one panel: one column per frame, bin 0 on the bottom row,
/// values mapped linearly from `[0, max]` to `[0, 255]`.
fn panel(values: &Array2<f64>) -> Vec<Vec<u8>> {
    let (frames, bins) = values.dim();
    let max = values.iter().fold(0.0f64, |m, &v| m.max(v));
    (0..bins)
        .rev()
        .map(|bin| {
            (0..frames)
                .map(|t| {
                    if max > 0.0 {
                        (255.0 * values[[t, bin]].max(0.0) / max).round() as u8
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect()
}

/// Encodes the panels side by side, each scaled to its own maximum.
pub fn encode_png(panels: &[&Array2<f64>]) -> Result<Vec<u8>, CliError> {
    let height = panels.iter().map(|p| p.ncols()).max().unwrap_or(0);
    let width = panels.iter().map(|p| p.nrows()).sum::<usize>() + GAP * panels.len().saturating_sub(1);
    if width == 0 || height == 0 {
        return Err(CliError::usage("cannot plot an empty spectrogram"));
    }
    let mut pixels = vec![0u8; width * height];
    let mut left = 0;
    for values in panels {
        let rows = panel(values);
        let offset = height - rows.len();
        for (r, row) in rows.iter().enumerate() {
            let start = (offset + r) * width + left;
            pixels[start..start + row.len()].copy_from_slice(row);
        }
        left += values.nrows() + GAP;
    }
    let mut bytes = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut bytes, width as u32, height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| CliError::numeric(format!("png encoding: {e}")))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| CliError::numeric(format!("png encoding: {e}")))?;
    }
    Ok(bytes)
}

pub fn render_spectrogram_png(panels: &[&Array2<f64>], path: &Path) -> Result<(), CliError> {
    let bytes = encode_png(panels)?;
    texturizer::write_atomic(path, &bytes).map_err(|e| CliError::io(path, e))
}
