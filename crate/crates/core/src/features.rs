//! Random convolutional feature extractors over spectrogram frames.
//!
//! Each net is a single 1-D convolution over time (input channels are the
//! frequency bins) followed by a ReLU, with no bias. Padding is circular, so
//! every net commutes exactly with circular shifts of its input:
//!
//! ```text
//! F[t, mu] = max(0, sum_d sum_c W[d, c, mu] * S[(t + d) mod T, c])
//! ```
//!
//! Weights are drawn from the Glorot uniform distribution with
//! `fan_in = width * in_channels` and `fan_out = width * n_filters`.

use std::io::{Read, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fft::{transposed, TimeFft};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("an ensemble needs at least one kernel width")]
    EmptyWidths,
    #[error("invalid net specification: {0}")]
    InvalidSpec(String),
    #[error("net expects {expected} input channels, spectrogram has {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("gradient shape {actual:?} does not match feature map shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("input has {frames} frames, at least {required} are required")]
    TooShort { frames: usize, required: usize },
    #[error("bad weight dump: {0}")]
    BadDump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shape and seed of one random net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub kernel_width: usize,
    pub n_filters: usize,
    pub in_channels: usize,
    pub seed: u64,
}

/// Glorot uniform limit `sqrt(6 / (fan_in + fan_out))` for a conv kernel.
pub fn glorot_limit(kernel_width: usize, in_channels: usize, n_filters: usize) -> f64 {
    let fan_in = kernel_width * in_channels;
    let fan_out = kernel_width * n_filters;
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// One circular convolution layer with ReLU output.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    /// `kernel_width x in_channels x n_filters`
    weights: Array3<f64>,
}

impl ConvNet {
    pub fn from_weights(weights: Array3<f64>) -> Result<Self, FeatureError> {
        let (w, c, f) = weights.dim();
        if w == 0 || c == 0 || f == 0 {
            return Err(FeatureError::InvalidSpec(format!(
                "weight tensor {w}x{c}x{f} has an empty axis"
            )));
        }
        Ok(Self {
            weights: weights.as_standard_layout().into_owned(),
        })
    }

    /// Glorot-uniform weights drawn from `rng`, in `(tap, channel, filter)`
    /// row-major order.
    pub fn glorot(
        kernel_width: usize,
        in_channels: usize,
        n_filters: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, FeatureError> {
        if kernel_width == 0 || in_channels == 0 || n_filters == 0 {
            return Err(FeatureError::InvalidSpec(format!(
                "width {kernel_width}, channels {in_channels}, filters {n_filters} must all be positive"
            )));
        }
        let limit = glorot_limit(kernel_width, in_channels, n_filters);
        let dist = Uniform::new_inclusive(-limit, limit);
        let weights = Array3::from_shape_simple_fn((kernel_width, in_channels, n_filters), || dist.sample(rng));
        Ok(Self { weights })
    }

    pub fn from_spec(spec: &ConvNetSpec) -> Result<Self, FeatureError> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Self::glorot(spec.kernel_width, spec.in_channels, spec.n_filters, &mut rng)
    }

    pub fn weights(&self) -> &Array3<f64> {
        &self.weights
    }

    pub fn kernel_width(&self) -> usize {
        self.weights.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dim().1
    }

    pub fn n_filters(&self) -> usize {
        self.weights.dim().2
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<(), FeatureError> {
        if input.ncols() != self.in_channels() {
            return Err(FeatureError::ChannelMismatch {
                expected: self.in_channels(),
                actual: input.ncols(),
            });
        }
        if input.nrows() == 0 {
            return Err(FeatureError::TooShort { frames: 0, required: 1 });
        }
        Ok(())
    }

    /// Circular convolution before the ReLU, computed as one matrix product
    /// per kernel tap.
    pub fn pre_activation(&self, input: ArrayView2<f64>) -> Result<Array2<f64>, FeatureError> {
        self.check_input(&input)?;
        let t = input.nrows();
        let mut out = Array2::zeros((t, self.n_filters()));
        for (d, tap) in self.weights.axis_iter(Axis(0)).enumerate() {
            let d = d % t;
            // out[0..t-d] += S[d..t] W_d, out[t-d..t] += S[0..d] W_d
            general_mat_mul(
                1.0,
                &input.slice(s![d.., ..]),
                &tap,
                1.0,
                &mut out.slice_mut(s![..t - d, ..]),
            );
            if d > 0 {
                general_mat_mul(
                    1.0,
                    &input.slice(s![..d, ..]),
                    &tap,
                    1.0,
                    &mut out.slice_mut(s![t - d.., ..]),
                );
            }
        }
        Ok(out)
    }

    /// ReLU feature map, `T x n_filters`.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Array2<f64>, FeatureError> {
        Ok(self.pre_activation(input)?.mapv_into(relu))
    }

    /// Gradient of `<grad_output, forward(input)>` with respect to `input`.
    /// The ReLU derivative at zero is taken as zero.
    pub fn backward(&self, input: ArrayView2<f64>, grad_output: ArrayView2<f64>) -> Result<Array2<f64>, FeatureError> {
        let output = self.forward(input)?;
        check_shape(&output, &grad_output)?;
        Ok(self.transpose_conv(&gate(&output, grad_output)))
    }

    /// Adjoint of the circular convolution: maps a `T x n_filters` gradient
    /// to a `T x in_channels` one.
    fn transpose_conv(&self, grad: &Array2<f64>) -> Array2<f64> {
        let t = grad.nrows();
        let mut out = Array2::zeros((t, self.in_channels()));
        for (d, tap) in self.weights.axis_iter(Axis(0)).enumerate() {
            let d = d % t;
            let tap_t = tap.t();
            // out[(u + d) mod t] += G[u] W_d^T
            general_mat_mul(
                1.0,
                &grad.slice(s![..t - d, ..]),
                &tap_t,
                1.0,
                &mut out.slice_mut(s![d.., ..]),
            );
            if d > 0 {
                general_mat_mul(
                    1.0,
                    &grad.slice(s![t - d.., ..]),
                    &tap_t,
                    1.0,
                    &mut out.slice_mut(s![..d, ..]),
                );
            }
        }
        out
    }

    /// Writes the `WNET` dump: ASCII magic, then width, channels and filters
    /// as little-endian u32, then the weights as row-major little-endian f32.
    pub fn write_dump(&self, mut out: impl Write) -> Result<(), FeatureError> {
        let (w, c, f) = self.weights.dim();
        out.write_all(b"WNET")?;
        for v in [w, c, f] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in self.weights.iter() {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(mut input: impl Read) -> Result<Self, FeatureError> {
        let mut header = [0u8; 16];
        input.read_exact(&mut header)?;
        if &header[..4] != b"WNET" {
            return Err(FeatureError::BadDump("missing WNET magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (w, c, f) = (word(4), word(8), word(12));
        let mut raw = vec![0u8; w * c * f * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let weights = Array3::from_shape_vec((w, c, f), data).map_err(|e| FeatureError::BadDump(e.to_string()))?;
        Self::from_weights(weights)
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn check_shape(output: &Array2<f64>, grad: &ArrayView2<f64>) -> Result<(), FeatureError> {
    if output.dim() != grad.dim() {
        return Err(FeatureError::ShapeMismatch {
            expected: output.dim(),
            actual: grad.dim(),
        });
    }
    Ok(())
}

/// Masks a gradient with the ReLU derivative, read off the (post-ReLU)
/// output: positive outputs pass, zeros block.
fn gate(output: &Array2<f64>, grad: ArrayView2<f64>) -> Array2<f64> {
    let mut gated = grad.to_owned();
    Zip::from(&mut gated).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    gated
}

/// Feature maps produced from one input, one per net or layer.
#[derive(Debug, Clone)]
pub struct FeatureMaps {
    pub maps: Vec<Array2<f64>>,
}

/// A differentiable map from a `T x B` spectrogram to a list of feature maps.
pub trait FeatureModel {
    fn in_channels(&self) -> usize;

    /// Time stride of each output map relative to the input frames.
    fn strides(&self) -> Vec<usize>;

    fn forward(&self, input: ArrayView2<f64>) -> Result<FeatureMaps, FeatureError>;

    /// Gradient with respect to the input of `sum_k <grads[k], maps[k]>`,
    /// where `features` is this model's output for `input`.
    fn backward(
        &self,
        input: ArrayView2<f64>,
        features: &FeatureMaps,
        grads: &[Array2<f64>],
    ) -> Result<Array2<f64>, FeatureError>;
}

/// Widths used by default: powers of two from 2 to 64 frames.
pub const DEFAULT_WIDTHS: [usize; 6] = [2, 4, 8, 16, 32, 64];

/// Independent single-layer nets with different kernel widths.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEnsemble {
    nets: Vec<ConvNet>,
    seed: u64,
}

/// Builds `widths.len()` Glorot-initialized nets. Net `k` draws from stream
/// `k` of a ChaCha8 generator seeded with `seed`, so each net depends only on
/// `(seed, k, its own shape)`.
pub fn init_ensemble(
    seed: u64,
    widths: &[usize],
    n_filters: usize,
    in_channels: usize,
) -> Result<FeatureEnsemble, FeatureError> {
    if widths.is_empty() {
        return Err(FeatureError::EmptyWidths);
    }
    let nets = widths
        .iter()
        .enumerate()
        .map(|(k, &width)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            ConvNet::glorot(width, in_channels, n_filters, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    Ok(FeatureEnsemble { nets, seed })
}

/// Nets at least this wide run through [`BlockKernel`] once prepared;
/// narrower ones are cheaper to apply tap by tap.
pub const BLOCK_MIN_WIDTH: usize = 8;
const BLOCK_FACTOR: usize = 2;

impl FeatureEnsemble {
    pub fn from_nets(nets: Vec<ConvNet>) -> Result<Self, FeatureError> {
        let Some(first) = nets.first() else {
            return Err(FeatureError::EmptyWidths);
        };
        let channels = first.in_channels();
        if let Some(bad) = nets.iter().find(|n| n.in_channels() != channels) {
            return Err(FeatureError::ChannelMismatch {
                expected: channels,
                actual: bad.in_channels(),
            });
        }
        Ok(Self { nets, seed: 0 })
    }

    pub fn nets(&self) -> &[ConvNet] {
        &self.nets
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn widths(&self) -> Vec<usize> {
        self.nets.iter().map(ConvNet::kernel_width).collect()
    }

    /// Precomputes block frequency-domain kernels for every net of width at
    /// least [`BLOCK_MIN_WIDTH`]. The result accepts inputs of any length.
    pub fn prepare(&self) -> PreparedEnsemble<'_> {
        let blocks = self
            .nets
            .iter()
            .map(|net| (net.kernel_width() >= BLOCK_MIN_WIDTH).then(|| BlockKernel::new(net)))
            .collect();
        PreparedEnsemble { ensemble: self, blocks }
    }
}

impl FeatureModel for FeatureEnsemble {
    fn in_channels(&self) -> usize {
        self.nets[0].in_channels()
    }

    fn strides(&self) -> Vec<usize> {
        vec![1; self.nets.len()]
    }

    fn forward(&self, input: ArrayView2<f64>) -> Result<FeatureMaps, FeatureError> {
        let maps = self
            .nets
            .iter()
            .map(|net| net.forward(input))
            .collect::<Result<_, _>>()?;
        Ok(FeatureMaps { maps })
    }

    fn backward(
        &self,
        input: ArrayView2<f64>,
        features: &FeatureMaps,
        grads: &[Array2<f64>],
    ) -> Result<Array2<f64>, FeatureError> {
        let mut total = Array2::zeros(input.dim());
        for ((net, map), grad) in self.nets.iter().zip(&features.maps).zip(grads) {
            check_shape(map, &grad.view())?;
            total += &net.transpose_conv(&gate(map, grad.view()));
        }
        Ok(total)
    }
}

/// Overlap-save form of one net: the input is cut into blocks of `len`
/// frames that overlap by `width - 1`, each block is transformed with a short
/// FFT, and every frequency bin becomes one real matrix product over all
/// blocks at once.
#[derive(Clone)]
struct BlockKernel {
    fft: TimeFft,
    /// valid outputs per block, `len - width + 1`
    step: usize,
    /// `(bin, 2 * channels, filters)`: real parts stacked over imaginary parts
    /// of the kernel DFT at each bin
    stacked: Array3<f64>,
}

impl BlockKernel {
    fn new(net: &ConvNet) -> Self {
        let (w, c, f) = net.weights.dim();
        let fft = TimeFft::new((BLOCK_FACTOR * w).next_power_of_two());
        let mut stacked = Array3::zeros((fft.bins(), 2 * c, f));
        let mut padded = Array2::zeros((fft.len(), f));
        for ch in 0..c {
            padded.slice_mut(s![..w, ..]).assign(&net.weights.slice(s![.., ch, ..]));
            let spectrum = fft.forward(padded.view());
            for (filter, row) in spectrum.axis_iter(Axis(0)).enumerate() {
                for (k, z) in row.iter().enumerate() {
                    stacked[[k, ch, filter]] = z.re;
                    stacked[[k, c + ch, filter]] = z.im;
                }
            }
        }
        Self {
            step: fft.len() - w + 1,
            fft,
            stacked,
        }
    }

    fn channels(&self) -> usize {
        self.stacked.dim().1 / 2
    }

    fn filters(&self) -> usize {
        self.stacked.dim().2
    }

    fn blocks(&self, frames: usize) -> usize {
        frames.div_ceil(self.step)
    }

    /// Circular cross-correlation with the kernel, before the ReLU.
    fn correlate(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let t = input.nrows();
        let (step, c, f) = (self.step, self.channels(), self.filters());
        let (nb, bins) = (self.blocks(t), self.fft.bins());
        let mut work = FftWork::new(&self.fft);
        let columns = transposed(input);
        let columns = columns.as_slice().expect("standard layout");
        // per bin: rows [Sr, Si] then [Si, -Sr] for every block
        let mut lhs = Array3::<f64>::zeros((bins, 2 * nb, 2 * c));
        let mut spectra = Array2::<Complex64>::zeros((c, bins));
        for b in 0..nb {
            let start = b * step;
            for (ch, mut row) in spectra.outer_iter_mut().enumerate() {
                let column = &columns[ch * t..(ch + 1) * t];
                for (j, v) in work.time.iter_mut().enumerate() {
                    *v = column[(start + j) % t];
                }
                work.forward(row.as_slice_mut().unwrap());
            }
            for (k, mut plane) in lhs.outer_iter_mut().enumerate() {
                let zs = spectra.column(k);
                let mut top = plane.row_mut(b);
                let (re, im) = top.as_slice_mut().unwrap().split_at_mut(c);
                for ((r, i), z) in re.iter_mut().zip(im).zip(&zs) {
                    *r = z.re;
                    *i = z.im;
                }
                let mut bottom = plane.row_mut(nb + b);
                let (re, im) = bottom.as_slice_mut().unwrap().split_at_mut(c);
                for ((r, i), z) in re.iter_mut().zip(im).zip(&zs) {
                    *r = z.im;
                    *i = -z.re;
                }
            }
        }
        let mut products = Array3::<f64>::zeros((bins, 2 * nb, f));
        for k in 0..bins {
            general_mat_mul(
                1.0,
                &lhs.index_axis(Axis(0), k),
                &self.stacked.index_axis(Axis(0), k),
                0.0,
                &mut products.index_axis_mut(Axis(0), k),
            );
        }
        let mut out = vec![0.0; f * t];
        let mut spectra = Array2::<Complex64>::zeros((f, bins));
        for b in 0..nb {
            for (k, plane) in products.outer_iter().enumerate() {
                let (re, im) = (plane.row(b), plane.row(nb + b));
                for ((z, r), i) in spectra.column_mut(k).iter_mut().zip(&re).zip(&im) {
                    *z = Complex64::new(*r, *i);
                }
            }
            let start = b * step;
            let valid = step.min(t - start);
            for (m, mut row) in spectra.outer_iter_mut().enumerate() {
                work.inverse(row.as_slice_mut().unwrap());
                out[m * t + start..m * t + start + valid].copy_from_slice(&work.time[..valid]);
            }
        }
        transposed(ArrayView2::from_shape((f, t), &out).expect("shape matches"))
    }

    /// Adjoint of [`Self::correlate`].
    fn convolve(&self, grad: &Array2<f64>) -> Array2<f64> {
        let t = grad.nrows();
        let (step, c, f) = (self.step, self.channels(), self.filters());
        let (nb, bins) = (self.blocks(t), self.fft.bins());
        let mut work = FftWork::new(&self.fft);
        let columns = transposed(grad.view());
        let columns = columns.as_slice().expect("standard layout");
        // per bin: rows Gr then Gi for every block
        let mut lhs = Array3::<f64>::zeros((bins, 2 * nb, f));
        let mut spectra = Array2::<Complex64>::zeros((f, bins));
        for b in 0..nb {
            let start = b * step;
            let valid = step.min(t - start);
            for (m, mut row) in spectra.outer_iter_mut().enumerate() {
                work.time.fill(0.0);
                work.time[..valid].copy_from_slice(&columns[m * t + start..m * t + start + valid]);
                work.forward(row.as_slice_mut().unwrap());
            }
            for (k, mut plane) in lhs.outer_iter_mut().enumerate() {
                let zs = spectra.column(k);
                for (r, z) in plane.row_mut(b).iter_mut().zip(&zs) {
                    *r = z.re;
                }
                for (i, z) in plane.row_mut(nb + b).iter_mut().zip(&zs) {
                    *i = z.im;
                }
            }
        }
        // [[Gr Wr^T, Gr Wi^T], [Gi Wr^T, Gi Wi^T]]
        let mut products = Array3::<f64>::zeros((bins, 2 * nb, 2 * c));
        for k in 0..bins {
            general_mat_mul(
                1.0,
                &lhs.index_axis(Axis(0), k),
                &self.stacked.index_axis(Axis(0), k).t(),
                0.0,
                &mut products.index_axis_mut(Axis(0), k),
            );
        }
        let mut out = vec![0.0; c * t];
        let mut spectra = Array2::<Complex64>::zeros((c, bins));
        for b in 0..nb {
            for (k, plane) in products.outer_iter().enumerate() {
                let (gr, gi) = (plane.row(b), plane.row(nb + b));
                let (gr, gi) = (gr.as_slice().unwrap(), gi.as_slice().unwrap());
                for (ch, z) in spectra.column_mut(k).iter_mut().enumerate() {
                    *z = Complex64::new(gr[ch] - gi[c + ch], gr[c + ch] + gi[ch]);
                }
            }
            let start = b * step;
            for (ch, mut row) in spectra.outer_iter_mut().enumerate() {
                work.inverse(row.as_slice_mut().unwrap());
                let column = &mut out[ch * t..(ch + 1) * t];
                for (j, v) in work.time.iter().enumerate() {
                    column[(start + j) % t] += v;
                }
            }
        }
        transposed(ArrayView2::from_shape((c, t), &out).expect("shape matches"))
    }
}

/// Buffers for one-column transforms with a [`TimeFft`] plan.
struct FftWork<'a> {
    fft: &'a TimeFft,
    time: Vec<f64>,
    scratch: Vec<Complex64>,
}

impl<'a> FftWork<'a> {
    fn new(fft: &'a TimeFft) -> Self {
        let scratch_len = fft
            .forward_plan()
            .get_scratch_len()
            .max(fft.inverse_plan().get_scratch_len());
        Self {
            fft,
            time: vec![0.0; fft.len()],
            scratch: vec![Complex64::default(); scratch_len],
        }
    }

    /// DFT of `self.time` into `out`; `self.time` is clobbered.
    fn forward(&mut self, out: &mut [Complex64]) {
        self.fft
            .forward_plan()
            .process_with_scratch(&mut self.time, out, &mut self.scratch)
            .expect("fft length");
    }

    /// Inverse DFT with the `1/len` factor into `self.time`; `spectrum` is clobbered.
    fn inverse(&mut self, spectrum: &mut [Complex64]) {
        let scale = 1.0 / self.fft.len() as f64;
        spectrum[0].im = 0.0;
        if self.fft.len().is_multiple_of(2) {
            spectrum[spectrum.len() - 1].im = 0.0;
        }
        self.fft
            .inverse_plan()
            .process_with_scratch(spectrum, &mut self.time, &mut self.scratch)
            .expect("fft length");
        self.time.iter_mut().for_each(|v| *v *= scale);
    }
}

/// An ensemble with cached block kernels for its wide nets.
pub struct PreparedEnsemble<'a> {
    ensemble: &'a FeatureEnsemble,
    blocks: Vec<Option<BlockKernel>>,
}

impl PreparedEnsemble<'_> {
    pub fn ensemble(&self) -> &FeatureEnsemble {
        self.ensemble
    }

    /// Number of nets evaluated blockwise in the frequency domain.
    pub fn block_nets(&self) -> usize {
        self.blocks.iter().filter(|k| k.is_some()).count()
    }
}

impl FeatureModel for PreparedEnsemble<'_> {
    fn in_channels(&self) -> usize {
        self.ensemble.in_channels()
    }

    fn strides(&self) -> Vec<usize> {
        self.ensemble.strides()
    }

    fn forward(&self, input: ArrayView2<f64>) -> Result<FeatureMaps, FeatureError> {
        self.ensemble.nets[0].check_input(&input)?;
        let maps = self
            .ensemble
            .nets
            .iter()
            .zip(&self.blocks)
            .map(|(net, kernel)| match kernel {
                Some(kernel) => Ok(kernel.correlate(input).mapv_into(relu)),
                None => net.forward(input),
            })
            .collect::<Result<_, _>>()?;
        Ok(FeatureMaps { maps })
    }

    fn backward(
        &self,
        input: ArrayView2<f64>,
        features: &FeatureMaps,
        grads: &[Array2<f64>],
    ) -> Result<Array2<f64>, FeatureError> {
        let mut total = Array2::zeros(input.dim());
        for (((net, kernel), map), grad) in self
            .ensemble
            .nets
            .iter()
            .zip(&self.blocks)
            .zip(&features.maps)
            .zip(grads)
        {
            check_shape(map, &grad.view())?;
            let gated = gate(map, grad.view());
            match kernel {
                Some(kernel) => total += &kernel.convolve(&gated),
                None => total += &net.transpose_conv(&gated),
            }
        }
        Ok(total)
    }
}

/// Configuration of the stacked variant: `n_layers` width-2 circular
/// convolutions with ReLU, separated by average pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackedNetSpec {
    pub n_layers: usize,
    pub kernel_width: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub n_filters: usize,
    pub seed: u64,
}

impl Default for StackedNetSpec {
    fn default() -> Self {
        Self {
            n_layers: 6,
            kernel_width: 2,
            pool_size: 2,
            pool_stride: 2,
            n_filters: 512,
            seed: 0,
        }
    }
}

impl StackedNetSpec {
    /// Frames of input spanned by one output frame of `layer` (0-based).
    pub fn receptive_field(&self, layer: usize) -> usize {
        let mut field = 1;
        let mut jump = 1;
        for l in 0..=layer {
            if l > 0 {
                field += (self.pool_size - 1) * jump;
                jump *= self.pool_stride;
            }
            field += (self.kernel_width - 1) * jump;
        }
        field
    }

    /// Smallest input length accepted by [`StackedNet::forward`].
    pub fn min_frames(&self) -> usize {
        self.pool_stride.saturating_pow(self.n_layers as u32)
    }
}

/// Output length of average pooling: windows start every `stride` frames and
/// are truncated at the end of the input.
fn pooled_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

fn avg_pool(input: &Array2<f64>, size: usize, stride: usize) -> Array2<f64> {
    let len = input.nrows();
    let mut out = Array2::zeros((pooled_len(len, stride), input.ncols()));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let start = i * stride;
        let end = (start + size).min(len);
        for t in start..end {
            row += &input.row(t);
        }
        row /= (end - start) as f64;
    }
    out
}

fn avg_pool_backward(grad: &Array2<f64>, len: usize, size: usize, stride: usize) -> Array2<f64> {
    let mut out = Array2::zeros((len, grad.ncols()));
    for (i, row) in grad.axis_iter(Axis(0)).enumerate() {
        let start = i * stride;
        let end = (start + size).min(len);
        let scale = 1.0 / (end - start) as f64;
        for t in start..end {
            out.row_mut(t).scaled_add(scale, &row);
        }
    }
    out
}

/// Deep variant: one chain of conv/ReLU layers with average pooling between
/// them. Every layer's output is a feature map for the losses.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedNet {
    spec: StackedNetSpec,
    layers: Vec<ConvNet>,
}

impl StackedNet {
    pub fn new(spec: StackedNetSpec, in_channels: usize) -> Result<Self, FeatureError> {
        if spec.n_layers == 0 || spec.pool_size == 0 || spec.pool_stride == 0 {
            return Err(FeatureError::InvalidSpec(format!(
                "stacked net needs positive layers/pool size/stride, got {spec:?}"
            )));
        }
        let layers = (0..spec.n_layers)
            .map(|l| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(l as u64);
                let channels = if l == 0 { in_channels } else { spec.n_filters };
                ConvNet::glorot(spec.kernel_width, channels, spec.n_filters, &mut rng)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &StackedNetSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[ConvNet] {
        &self.layers
    }
}

/// Per-layer feature maps of the stacked net; layer `l` has
/// `ceil(T / stride^l)` frames.
pub fn forward_stacked(net: &StackedNet, input: ArrayView2<f64>) -> Result<Vec<Array2<f64>>, FeatureError> {
    let required = net.spec.min_frames();
    if input.nrows() < required {
        return Err(FeatureError::TooShort {
            frames: input.nrows(),
            required,
        });
    }
    let mut maps: Vec<Array2<f64>> = Vec::with_capacity(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate() {
        let map = match maps.last() {
            None => layer.forward(input)?,
            Some(prev) => {
                let pooled = avg_pool(prev, net.spec.pool_size, net.spec.pool_stride);
                layer.forward(pooled.view())?
            }
        };
        debug_assert_eq!(map.nrows(), input.nrows().div_ceil(net.spec.pool_stride.pow(l as u32)));
        maps.push(map);
    }
    Ok(maps)
}

impl FeatureModel for StackedNet {
    fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    fn strides(&self) -> Vec<usize> {
        (0..self.layers.len())
            .map(|l| self.spec.pool_stride.pow(l as u32))
            .collect()
    }

    fn forward(&self, input: ArrayView2<f64>) -> Result<FeatureMaps, FeatureError> {
        Ok(FeatureMaps {
            maps: forward_stacked(self, input)?,
        })
    }

    fn backward(
        &self,
        input: ArrayView2<f64>,
        features: &FeatureMaps,
        grads: &[Array2<f64>],
    ) -> Result<Array2<f64>, FeatureError> {
        let maps = &features.maps;
        let mut upstream: Option<Array2<f64>> = None;
        for l in (0..self.layers.len()).rev() {
            check_shape(&maps[l], &grads[l].view())?;
            let mut grad = grads[l].clone();
            if let Some(up) = upstream.take() {
                grad += &up;
            }
            let grad_in = self.layers[l].transpose_conv(&gate(&maps[l], grad.view()));
            if l == 0 {
                debug_assert_eq!(grad_in.dim(), input.dim());
                return Ok(grad_in);
            }
            upstream = Some(avg_pool_backward(
                &grad_in,
                maps[l - 1].nrows(),
                self.spec.pool_size,
                self.spec.pool_stride,
            ));
        }
        unreachable!("stacked net has at least one layer")
    }
}
