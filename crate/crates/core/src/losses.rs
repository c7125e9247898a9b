//! Texture statistics and the synthesis objective
//!
//! ```text
//! L = L_gram + alpha * L_autocorr + beta * L_div
//! ```
//!
//! over a list of feature maps `F_k` (one per net or layer) compared against
//! the maps `F~_k` of the target:
//!
//! * Gram: `G_k = F_k^T F_k / T_k`, loss `sum_k |G_k - G~_k|^2 / sum_k |G~_k|^2`.
//! * Autocorrelation: circular per-filter autocorrelation `A_k` computed
//!   through the DFT, compared only over lags in a [`LagWindow`] and
//!   normalized by the target's energy over the same lags.
//! * Diversity: `max_s Q / (eps + sum_k |roll(F_k, s) - F~_k|^2)` with
//!   `Q = sum_k |F~_k|^2`, over a set of candidate shifts.
//!
//! Maps may run at a coarser time resolution than the input (pooled layers).
//! A map with stride `r` sees lags and shifts divided by `r`.

use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureModel};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error("feature map is empty")]
    EmptyMap,
    #[error("{what}: expected {expected} maps, got {actual}")]
    MapCount {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("map {index} has shape {actual:?}, expected {expected:?}")]
    MapShape {
        index: usize,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("target statistic {0} is identically zero")]
    DegenerateTarget(&'static str),
    #[error("invalid lag window [{min_lag}, {max_lag}]")]
    InvalidWindow { min_lag: usize, max_lag: usize },
    #[error("lag window up to {max_lag} does not fit {frames} frames")]
    WindowTooLong { max_lag: usize, frames: usize },
    #[error("the diversity shift set is empty")]
    EmptyShifts,
    #[error("shift {shift} is outside 0..{frames}")]
    ShiftOutOfRange { shift: usize, frames: usize },
}

/// Weights of the autocorrelation and diversity terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1e3, beta: 1e-4 }
    }
}

/// Inclusive range of autocorrelation lags, in input frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagWindow {
    pub min_lag: usize,
    pub max_lag: usize,
}

impl Default for LagWindow {
    /// 200 ms to 2 s at a 4 ms frame period.
    fn default() -> Self {
        Self {
            min_lag: 50,
            max_lag: 500,
        }
    }
}

impl LagWindow {
    pub fn new(min_lag: usize, max_lag: usize) -> Result<Self, LossError> {
        if min_lag == 0 || min_lag > max_lag {
            return Err(LossError::InvalidWindow { min_lag, max_lag });
        }
        Ok(Self { min_lag, max_lag })
    }

    /// Converts lags given in seconds to frames of `hop / sample_rate` seconds.
    pub fn from_seconds(min_secs: f64, max_secs: f64, hop: usize, sample_rate: u32) -> Result<Self, LossError> {
        let period = hop as f64 / sample_rate as f64;
        Self::new(
            (min_secs / period).round() as usize,
            (max_secs / period).round() as usize,
        )
    }

    /// The window restricted to lags below `frames`, or `None` when no lag
    /// of the window fits.
    pub fn clamped(&self, frames: usize) -> Option<Self> {
        let max_lag = self.max_lag.min(frames.saturating_sub(1));
        (max_lag >= self.min_lag).then_some(Self {
            min_lag: self.min_lag,
            max_lag,
        })
    }

    fn check_fits(&self, frames: usize) -> Result<(), LossError> {
        if self.min_lag == 0 || self.min_lag > self.max_lag {
            return Err(LossError::InvalidWindow {
                min_lag: self.min_lag,
                max_lag: self.max_lag,
            });
        }
        if self.max_lag >= frames {
            return Err(LossError::WindowTooLong {
                max_lag: self.max_lag,
                frames,
            });
        }
        Ok(())
    }

    /// Lags of a map with the given stride, limited to `frames - 1`.
    fn lags_for(&self, stride: usize, frames: usize) -> std::ops::RangeInclusive<usize> {
        let lo = self.min_lag.div_ceil(stride).max(1);
        let hi = (self.max_lag / stride).min(frames.saturating_sub(1));
        lo..=hi
    }
}

/// `G = F^T F / T`.
pub fn gram_matrix(features: &Array2<f64>) -> Result<Array2<f64>, LossError> {
    if features.nrows() == 0 || features.ncols() == 0 {
        return Err(LossError::EmptyMap);
    }
    Ok(features.t().dot(features) / features.nrows() as f64)
}

/// Circular autocorrelation of every column, `A[tau, mu] = sum_t F[t, mu] F[(t + tau) mod T, mu]`.
pub fn autocorr_map(features: &Array2<f64>) -> Array2<f64> {
    CircularCorrelator::new(features.nrows()).autocorr(features)
}

/// Circular correlations of length `T` done with zero-padded power-of-two
/// FFTs, which stay fast when `T` has large prime factors. Works one column
/// at a time in small buffers.
struct CircularCorrelator {
    frames: usize,
    len: usize,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl CircularCorrelator {
    fn new(frames: usize) -> Self {
        let frames = frames.max(1);
        let len = (2 * frames - 1).next_power_of_two();
        let mut planner = RealFftPlanner::<f64>::new();
        Self {
            frames,
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }

    /// Circular autocorrelation from the linear one: `A[tau] = R[tau] + R[T - tau]`.
    fn autocorr(&self, x: &Array2<f64>) -> Array2<f64> {
        let t = self.frames;
        let mut out = Array2::zeros((t, x.ncols()));
        let mut time = vec![0.0; self.len];
        let mut spectrum = self.forward.make_output_vec();
        let mut scratch = vec![Complex64::default(); self.scratch_len()];
        let scale = 1.0 / self.len as f64;
        for (column, mut target) in x.columns().into_iter().zip(out.columns_mut()) {
            time.fill(0.0);
            time.iter_mut().zip(column).for_each(|(a, b)| *a = *b);
            self.forward
                .process_with_scratch(&mut time, &mut spectrum, &mut scratch)
                .expect("fft length");
            for z in spectrum.iter_mut() {
                *z = Complex64::new(z.norm_sqr() * scale, 0.0);
            }
            self.inverse
                .process_with_scratch(&mut spectrum, &mut time, &mut scratch)
                .expect("fft length");
            target[0] = time[0];
            for tau in 1..t {
                target[tau] = time[tau] + time[t - tau];
            }
        }
        out
    }

    /// `C[u, mu] = sum_tau E[tau, mu] X[(u + tau) mod T, mu]`.
    fn correlate(&self, x: &Array2<f64>, e: &Array2<f64>) -> Array2<f64> {
        let t = self.frames;
        let mut out = Array2::zeros((t, x.ncols()));
        let mut time = vec![0.0; self.len];
        let mut spectrum = self.forward.make_output_vec();
        let mut kernel = self.forward.make_output_vec();
        let mut scratch = vec![Complex64::default(); self.scratch_len()];
        let scale = 1.0 / self.len as f64;
        for ((xc, ec), mut target) in x.columns().into_iter().zip(e.columns()).zip(out.columns_mut()) {
            time.fill(0.0);
            time.iter_mut().zip(ec).for_each(|(a, b)| *a = *b);
            self.forward
                .process_with_scratch(&mut time, &mut kernel, &mut scratch)
                .expect("fft length");
            // x read periodically over 2T - 1 samples
            time.fill(0.0);
            time.iter_mut()
                .zip(xc.iter().chain(xc.iter().take(t - 1)))
                .for_each(|(a, b)| *a = *b);
            self.forward
                .process_with_scratch(&mut time, &mut spectrum, &mut scratch)
                .expect("fft length");
            for (z, k) in spectrum.iter_mut().zip(&kernel) {
                *z *= k.conj() * scale;
            }
            if let Some(last) = spectrum.last_mut() {
                last.im = 0.0;
            }
            spectrum[0].im = 0.0;
            self.inverse
                .process_with_scratch(&mut spectrum, &mut time, &mut scratch)
                .expect("fft length");
            target.iter_mut().zip(&time).for_each(|(a, b)| *a = *b);
        }
        out
    }

    fn scratch_len(&self) -> usize {
        self.forward.get_scratch_len().max(self.inverse.get_scratch_len())
    }
}

fn squared_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Everything about the target that the losses compare against, computed
/// once per synthesis run.
#[derive(Debug, Clone)]
pub struct TargetStatistics {
    maps: Vec<Array2<f64>>,
    grams: Vec<Array2<f64>>,
    autocorrs: Vec<Array2<f64>>,
    strides: Vec<usize>,
    input_frames: usize,
    gram_norm_sq: f64,
    feature_norm_sq: f64,
}

impl TargetStatistics {
    pub fn new(model: &dyn FeatureModel, target: ArrayView2<f64>) -> Result<Self, LossError> {
        let maps = model.forward(target)?.maps;
        Self::from_maps(maps, model.strides(), target.nrows())
    }

    /// Builds statistics from precomputed target maps.
    pub fn from_maps(maps: Vec<Array2<f64>>, strides: Vec<usize>, input_frames: usize) -> Result<Self, LossError> {
        if maps.len() != strides.len() {
            return Err(LossError::MapCount {
                what: "strides",
                expected: maps.len(),
                actual: strides.len(),
            });
        }
        let grams = maps.iter().map(gram_matrix).collect::<Result<Vec<_>, _>>()?;
        let autocorrs = maps.iter().map(autocorr_map).collect();
        let gram_norm_sq = grams.iter().map(squared_norm).sum();
        let feature_norm_sq = maps.iter().map(squared_norm).sum();
        Ok(Self {
            maps,
            grams,
            autocorrs,
            strides,
            input_frames,
            gram_norm_sq,
            feature_norm_sq,
        })
    }

    pub fn maps(&self) -> &[Array2<f64>] {
        &self.maps
    }

    pub fn grams(&self) -> &[Array2<f64>] {
        &self.grams
    }

    pub fn autocorrs(&self) -> &[Array2<f64>] {
        &self.autocorrs
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn input_frames(&self) -> usize {
        self.input_frames
    }

    /// `sum_k |G~_k|_F^2`
    pub fn gram_norm_sq(&self) -> f64 {
        self.gram_norm_sq
    }

    /// `sum_k |F~_k|_F^2`
    pub fn feature_norm_sq(&self) -> f64 {
        self.feature_norm_sq
    }

    fn check_maps(&self, maps: &[Array2<f64>]) -> Result<(), LossError> {
        if maps.len() != self.maps.len() {
            return Err(LossError::MapCount {
                what: "feature maps",
                expected: self.maps.len(),
                actual: maps.len(),
            });
        }
        for (index, (map, target)) in maps.iter().zip(&self.maps).enumerate() {
            if map.ncols() != target.ncols() || map.nrows() == 0 {
                return Err(LossError::MapShape {
                    index,
                    expected: target.dim(),
                    actual: map.dim(),
                });
            }
        }
        Ok(())
    }

    fn check_same_shape(&self, maps: &[Array2<f64>]) -> Result<(), LossError> {
        self.check_maps(maps)?;
        for (index, (map, target)) in maps.iter().zip(&self.maps).enumerate() {
            if map.dim() != target.dim() {
                return Err(LossError::MapShape {
                    index,
                    expected: target.dim(),
                    actual: map.dim(),
                });
            }
        }
        Ok(())
    }
}

fn zero_grads(maps: &[Array2<f64>]) -> Vec<Array2<f64>> {
    maps.iter().map(|m| Array2::zeros(m.dim())).collect()
}

fn gram_term(
    maps: &[Array2<f64>],
    targets: &TargetStatistics,
    grads: Option<&mut [Array2<f64>]>,
) -> Result<f64, LossError> {
    targets.check_maps(maps)?;
    if targets.gram_norm_sq == 0.0 {
        return Err(LossError::DegenerateTarget("Gram matrix"));
    }
    let mut diffs = Vec::with_capacity(maps.len());
    let mut num = 0.0;
    for (map, target) in maps.iter().zip(&targets.grams) {
        let diff = gram_matrix(map)? - target;
        num += squared_norm(&diff);
        diffs.push(diff);
    }
    if let Some(grads) = grads {
        for ((grad, map), diff) in grads.iter_mut().zip(maps).zip(&diffs) {
            let scale = 4.0 / (map.nrows() as f64 * targets.gram_norm_sq);
            grad.scaled_add(scale, &map.dot(diff));
        }
    }
    Ok(num / targets.gram_norm_sq)
}

/// Normalized squared distance between Gram matrices.
pub fn gram_loss(maps: &[Array2<f64>], targets: &TargetStatistics) -> Result<f64, LossError> {
    gram_term(maps, targets, None)
}

fn autocorr_term(
    maps: &[Array2<f64>],
    targets: &TargetStatistics,
    window: &LagWindow,
    grads: Option<&mut [Array2<f64>]>,
) -> Result<f64, LossError> {
    targets.check_maps(maps)?;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut errors = Vec::with_capacity(maps.len());
    for k in 0..maps.len() {
        let map = &maps[k];
        let target = &targets.autocorrs[k];
        let frames = map.nrows().min(target.nrows());
        let lags = window.lags_for(targets.strides[k], frames);
        if lags.is_empty() {
            errors.push(None);
            continue;
        }
        let correlator = CircularCorrelator::new(map.nrows());
        let auto = correlator.autocorr(map);
        // time-averaged comparison when the lengths differ
        let ratio = target.nrows() as f64 / map.nrows() as f64;
        let mut err = Array2::<f64>::zeros(map.dim());
        for tau in lags {
            for mu in 0..map.ncols() {
                let a = if map.nrows() == target.nrows() {
                    auto[[tau, mu]]
                } else {
                    ratio * auto[[tau, mu]]
                };
                let d = a - target[[tau, mu]];
                num += d * d;
                den += target[[tau, mu]] * target[[tau, mu]];
                err[[tau, mu]] = d;
            }
        }
        errors.push(Some((correlator, err, ratio)));
    }
    if errors.iter().all(Option::is_none) {
        log::warn!(
            "no autocorrelation lag in [{}, {}] fits the feature maps; term is zero",
            window.min_lag,
            window.max_lag
        );
        return Ok(0.0);
    }
    if den == 0.0 {
        return Err(LossError::DegenerateTarget("autocorrelation"));
    }
    if let Some(grads) = grads {
        for ((grad, entry), map) in grads.iter_mut().zip(errors).zip(maps) {
            let Some((correlator, err, ratio)) = entry else {
                continue;
            };
            // dL/dA = 2 r (r A - A~) / den on the window; dA[tau]/dF[u] = F[u+tau] + F[u-tau],
            // so the gradient correlates F with the error folded onto positive lags
            let t = err.nrows();
            let mut folded = err.clone();
            for tau in 1..t {
                let mut row = folded.row_mut(tau);
                row += &err.row(t - tau);
            }
            grad.scaled_add(2.0 * ratio / den, &correlator.correlate(map, &folded));
        }
    }
    Ok(num / den)
}

/// Normalized squared distance between autocorrelation maps over the lag
/// window. Fails if the window does not fit the input length.
pub fn autocorr_loss(
    maps: &[Array2<f64>],
    targets: &TargetStatistics,
    window: &LagWindow,
    input_frames: usize,
) -> Result<f64, LossError> {
    window.check_fits(input_frames.min(targets.input_frames))?;
    autocorr_term(maps, targets, window, None)
}

/// Diversity term in the form `-sum (F - F~)^2`. Non-positive; zero only for
/// an exact copy. Kept for comparison with [`diversity_loss`].
pub fn sendik_diversity_loss(maps: &[Array2<f64>], targets: &TargetStatistics) -> Result<f64, LossError> {
    targets.check_same_shape(maps)?;
    Ok(-maps
        .iter()
        .zip(&targets.maps)
        .map(|(f, t)| f.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>())
}

/// Guard added to the diversity denominator, relative to `sum |F~|^2`.
pub const DIVERSITY_EPSILON: f64 = 1e-8;

/// Largest value the diversity term can take: an exact (shifted) copy.
pub const DIVERSITY_CAP: f64 = 1.0 / DIVERSITY_EPSILON;

struct DiversityEval {
    value: f64,
    shift: usize,
    denominator: f64,
}

fn diversity_at(maps: &[Array2<f64>], targets: &TargetStatistics, shift: usize) -> f64 {
    let mut dist = 0.0;
    for (k, (map, target)) in maps.iter().zip(&targets.maps).enumerate() {
        let frames = map.nrows();
        let s = shift / targets.strides[k];
        for t in 0..frames.min(target.nrows()) {
            let row = map.row((t + s) % frames);
            dist += row
                .iter()
                .zip(target.row(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    dist
}

fn overlap_norm_sq(maps: &[Array2<f64>], targets: &TargetStatistics) -> f64 {
    if maps.iter().zip(&targets.maps).all(|(m, t)| m.nrows() >= t.nrows()) {
        return targets.feature_norm_sq;
    }
    maps.iter()
        .zip(&targets.maps)
        .map(|(m, t)| {
            let n = m.nrows().min(t.nrows());
            t.slice(ndarray::s![..n, ..]).iter().map(|v| v * v).sum::<f64>()
        })
        .sum()
}

fn diversity_term(
    maps: &[Array2<f64>],
    targets: &TargetStatistics,
    shifts: &BTreeSet<usize>,
    relative_epsilon: f64,
    input_frames: usize,
) -> Result<DiversityEval, LossError> {
    targets.check_maps(maps)?;
    if shifts.is_empty() {
        return Err(LossError::EmptyShifts);
    }
    if let Some(&shift) = shifts.iter().next_back().filter(|&&s| s >= input_frames) {
        return Err(LossError::ShiftOutOfRange {
            shift,
            frames: input_frames,
        });
    }
    let q = overlap_norm_sq(maps, targets);
    if q == 0.0 {
        return Err(LossError::DegenerateTarget("feature energy"));
    }
    let eps = relative_epsilon * q;
    let mut best: Option<DiversityEval> = None;
    // ascending order, strict comparison: ties go to the smallest shift
    for &shift in shifts {
        let denominator = eps + diversity_at(maps, targets, shift);
        let value = q / denominator;
        if best.as_ref().is_none_or(|b| value > b.value) {
            best = Some(DiversityEval {
                value,
                shift,
                denominator,
            });
        }
    }
    Ok(best.expect("shift set is non-empty"))
}

/// Shift-invariant diversity: the largest `Q / (eps + |roll(F, s) - F~|^2)`
/// over `shifts`, with `eps = relative_epsilon * Q`. Returns the value and the
/// maximizing shift (smallest on ties).
pub fn diversity_loss(
    maps: &[Array2<f64>],
    targets: &TargetStatistics,
    shifts: &BTreeSet<usize>,
    relative_epsilon: f64,
) -> Result<(f64, usize), LossError> {
    let frames = maps.first().map_or(0, |m| m.nrows() * targets.strides[0]);
    let eval = diversity_term(maps, targets, shifts, relative_epsilon, frames.max(1))?;
    Ok((eval.value, eval.shift))
}

fn add_diversity_grad(
    maps: &[Array2<f64>],
    targets: &TargetStatistics,
    eval: &DiversityEval,
    q: f64,
    scale: f64,
    grads: &mut [Array2<f64>],
) {
    // d/dF [q / (eps + D)] = -q / (eps + D)^2 * 2 (roll(F) - F~)
    let coef = -2.0 * scale * q / (eval.denominator * eval.denominator);
    for (k, ((map, target), grad)) in maps.iter().zip(&targets.maps).zip(grads).enumerate() {
        let frames = map.nrows();
        let s = eval.shift / targets.strides[k];
        for t in 0..frames.min(target.nrows()) {
            let u = (t + s) % frames;
            let mut row = grad.row_mut(u);
            for ((g, a), b) in row.iter_mut().zip(map.row(u)).zip(target.row(t)) {
                *g += coef * (a - b);
            }
        }
    }
}

/// Candidate shifts for the diversity term: an arithmetic progression with
/// stride 50 whose phase advances one frame per optimization step, plus the
/// maximizing shifts of the last 10 evaluations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSchedule {
    history: VecDeque<usize>,
}

impl ShiftSchedule {
    pub const STRIDE: usize = 50;
    pub const HISTORY: usize = 10;

    pub fn new() -> Self {
        Self::default()
    }

    /// Shifts to evaluate at optimization step `step` for `frames` input
    /// frames. Never empty: falls back to `{0}`.
    pub fn next_shift_set(&self, frames: usize, step: usize) -> BTreeSet<usize> {
        let mut set: BTreeSet<usize> = (step % Self::STRIDE..frames).step_by(Self::STRIDE).collect();
        set.extend(self.history.iter().copied().filter(|&s| s < frames));
        if set.is_empty() {
            set.insert(0);
        }
        set
    }

    /// Remembers the maximizing shift of an evaluation.
    pub fn record(&mut self, best_shift: usize) {
        if self.history.len() == Self::HISTORY {
            self.history.pop_front();
        }
        self.history.push_back(best_shift);
    }

    pub fn history(&self) -> impl Iterator<Item = usize> + '_ {
        self.history.iter().copied()
    }
}

/// Loss terms at one point, with the gradient of the weighted total.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub gram: f64,
    pub autocorr: f64,
    pub diversity: f64,
    pub total: f64,
    pub grad: Array2<f64>,
    pub best_shift: Option<usize>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.gram.is_finite() && self.autocorr.is_finite() && self.diversity.is_finite() && self.total.is_finite()
    }
}

/// Options for [`total_loss_and_grad`] besides the weights.
#[derive(Debug, Clone)]
pub struct LossOptions<'a> {
    /// `None` disables the autocorrelation term (input shorter than the
    /// window).
    pub window: Option<LagWindow>,
    /// `None` disables the diversity term.
    pub shifts: Option<&'a BTreeSet<usize>>,
    pub relative_epsilon: f64,
}

/// Evaluates `L = L_gram + alpha L_autocorr + beta L_div` at `input` and its
/// exact gradient. The diversity maximum is differentiated at the selected
/// shift and the ReLU derivative at zero is zero.
pub fn total_loss_and_grad(
    input: ArrayView2<f64>,
    model: &dyn FeatureModel,
    targets: &TargetStatistics,
    weights: &LossWeights,
    options: &LossOptions<'_>,
) -> Result<LossBreakdown, LossError> {
    let frames = input.nrows();
    let features = model.forward(input)?;
    let maps = &features.maps;
    let mut grads = zero_grads(maps);

    let gram = gram_term(maps, targets, Some(&mut grads))?;

    let autocorr = match &options.window {
        Some(window) => {
            window.check_fits(frames.min(targets.input_frames))?;
            if weights.alpha != 0.0 {
                let mut ac_grads = zero_grads(maps);
                let value = autocorr_term(maps, targets, window, Some(&mut ac_grads))?;
                for (g, a) in grads.iter_mut().zip(&ac_grads) {
                    g.scaled_add(weights.alpha, a);
                }
                value
            } else {
                autocorr_term(maps, targets, window, None)?
            }
        }
        None => 0.0,
    };

    let (diversity, best_shift) = match options.shifts {
        Some(shifts) => {
            let eval = diversity_term(maps, targets, shifts, options.relative_epsilon, frames)?;
            if weights.beta != 0.0 {
                let q = overlap_norm_sq(maps, targets);
                add_diversity_grad(maps, targets, &eval, q, weights.beta, &mut grads);
            }
            (eval.value, Some(eval.shift))
        }
        None => (0.0, None),
    };

    let grad = model.backward(input, &features, &grads)?;
    let total = gram + weights.alpha * autocorr + weights.beta * diversity;
    Ok(LossBreakdown {
        gram,
        autocorr,
        diversity,
        total,
        grad,
        best_shift,
    })
}
