//! Real FFTs along the time axis of `T x C` matrices.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

/// Forward/inverse real FFT of length `len` applied column by column.
///
/// Spectra are stored as `C x K` complex matrices (one row per column of the
/// input, `K = len / 2 + 1` bins) so each row is contiguous.
#[derive(Clone)]
pub(crate) struct TimeFft {
    len: usize,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl TimeFft {
    pub fn new(len: usize) -> Self {
        let mut planner = RealFftPlanner::<f64>::new();
        Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn bins(&self) -> usize {
        self.len / 2 + 1
    }

    pub fn forward_plan(&self) -> &dyn RealToComplex<f64> {
        self.forward.as_ref()
    }

    pub fn inverse_plan(&self) -> &dyn ComplexToReal<f64> {
        self.inverse.as_ref()
    }

    /// Unnormalized DFT of every column of `x` (`len x C`).
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<Complex64> {
        debug_assert_eq!(x.nrows(), self.len);
        let mut columns = transposed(x);
        let mut out = Array2::<Complex64>::zeros((x.ncols(), self.bins()));
        let mut scratch = self.forward.make_scratch_vec();
        for (mut col, mut row) in columns.axis_iter_mut(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            self.forward
                .process_with_scratch(col.as_slice_mut().unwrap(), row.as_slice_mut().unwrap(), &mut scratch)
                .expect("fft length mismatch");
        }
        out
    }

    /// Inverse DFT including the `1/len` factor, returning a `len x C` matrix.
    /// Imaginary parts of the DC and Nyquist bins are ignored.
    #[cfg(test)]
    pub fn inverse(&self, spectrum: &Array2<Complex64>) -> Array2<f64> {
        let mut columns = Array2::<f64>::zeros((spectrum.nrows(), self.len));
        let mut buf = vec![Complex64::new(0.0, 0.0); self.bins()];
        let mut scratch = self.inverse.make_scratch_vec();
        let scale = 1.0 / self.len as f64;
        for (row, mut col) in spectrum.axis_iter(Axis(0)).zip(columns.axis_iter_mut(Axis(0))) {
            buf.iter_mut().zip(row).for_each(|(b, v)| *b = *v * scale);
            buf[0].im = 0.0;
            if self.len.is_multiple_of(2) {
                let last = buf.len() - 1;
                buf[last].im = 0.0;
            }
            self.inverse
                .process_with_scratch(&mut buf, col.as_slice_mut().unwrap(), &mut scratch)
                .expect("fft length mismatch");
        }
        transposed(columns.view())
    }
}

/// Standard-layout copy of `x^T`, copied in tiles so that neither side is
/// walked with a large stride for long.
pub(crate) fn transposed(x: ArrayView2<f64>) -> Array2<f64> {
    const TILE: usize = 32;
    let (rows, cols) = x.dim();
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = vec![0.0; rows * cols];
    for r0 in (0..rows).step_by(TILE) {
        let r1 = (r0 + TILE).min(rows);
        for c0 in (0..cols).step_by(TILE) {
            let c1 = (c0 + TILE).min(cols);
            for r in r0..r1 {
                for (c, v) in (c0..c1).zip(&src[r * cols + c0..r * cols + c1]) {
                    out[c * rows + r] = *v;
                }
            }
        }
    }
    Array2::from_shape_vec((cols, rows), out).expect("shape matches")
}
