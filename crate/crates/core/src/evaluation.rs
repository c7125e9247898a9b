//! Spectrogram-level quality scores and run reports.
//!
//! Both scores reuse the loss statistics with the log-spectrogram itself as
//! the only feature map (one channel per frequency bin).

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{
    autocorr_loss, diversity_loss, LagWindow, LossBreakdown, LossError, LossWeights, TargetStatistics,
    DIVERSITY_EPSILON,
};
use crate::spectrogram::LogSpectrogram;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("spectrogram shapes differ: {synth:?} vs target {target:?}")]
    ShapeMismatch {
        synth: (usize, usize),
        target: (usize, usize),
    },
    #[error("lag window [{min_lag}, {max_lag}] does not fit {frames} frames")]
    WindowTooLong {
        min_lag: usize,
        max_lag: usize,
        frames: usize,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("trace iteration {got} does not follow {last}")]
    OutOfOrder { last: usize, got: usize },
    #[error("cannot serialize report: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: io::Error },
}

fn check_shapes(synth: &LogSpectrogram, target: &LogSpectrogram) -> Result<(), EvaluationError> {
    if synth.values.dim() != target.values.dim() {
        return Err(EvaluationError::ShapeMismatch {
            synth: synth.values.dim(),
            target: target.values.dim(),
        });
    }
    Ok(())
}

fn spectrogram_statistics(target: &LogSpectrogram) -> Result<TargetStatistics, EvaluationError> {
    Ok(TargetStatistics::from_maps(
        vec![target.values.clone()],
        vec![1],
        target.frames(),
    )?)
}

/// Normalized squared distance between the autocorrelations of the two
/// spectrograms over the lag window. The window is cut at `T - 1`.
pub fn spectrogram_autocorr_score(
    synth: &LogSpectrogram,
    target: &LogSpectrogram,
    window: &LagWindow,
) -> Result<f64, EvaluationError> {
    check_shapes(synth, target)?;
    let frames = target.frames();
    let window = window.clamped(frames).ok_or(EvaluationError::WindowTooLong {
        min_lag: window.min_lag,
        max_lag: window.max_lag,
        frames,
    })?;
    let stats = spectrogram_statistics(target)?;
    Ok(autocorr_loss(
        std::slice::from_ref(&synth.values),
        &stats,
        &window,
        frames,
    )?)
}

/// Shift-invariant diversity loss of the spectrograms over every circular
/// shift, with the usual ε guard. Higher means closer to a shifted copy.
pub fn spectrogram_diversity_score(synth: &LogSpectrogram, target: &LogSpectrogram) -> Result<f64, EvaluationError> {
    check_shapes(synth, target)?;
    let shifts: BTreeSet<usize> = (0..target.frames()).collect();
    let stats = spectrogram_statistics(target)?;
    let (value, _) = diversity_loss(std::slice::from_ref(&synth.values), &stats, &shifts, DIVERSITY_EPSILON)?;
    Ok(value)
}

/// Loss terms at one accepted iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub gram: f64,
    /// Unweighted autocorrelation loss.
    pub autocorr: f64,
    /// Unweighted diversity loss; 0 when the term is off.
    pub diversity: f64,
    pub total: f64,
    pub gram_fraction: f64,
    pub autocorr_fraction: f64,
    pub diversity_fraction: f64,
    /// Whether the diversity term was part of the objective.
    pub diversity_active: bool,
}

impl TraceRecord {
    pub fn new(iteration: usize, breakdown: &LossBreakdown, weights: &LossWeights) -> Self {
        let diversity_active = weights.beta != 0.0 && breakdown.best_shift.is_some();
        let weighted_ac = weights.alpha * breakdown.autocorr;
        let weighted_div = if diversity_active {
            weights.beta * breakdown.diversity
        } else {
            0.0
        };
        let total = breakdown.total;
        let fraction = |v: f64| if total > 0.0 { v / total } else { 0.0 };
        Self {
            iteration,
            gram: breakdown.gram,
            autocorr: breakdown.autocorr,
            diversity: breakdown.diversity,
            total,
            gram_fraction: fraction(breakdown.gram),
            autocorr_fraction: fraction(weighted_ac),
            diversity_fraction: fraction(weighted_div),
            diversity_active,
        }
    }
}

/// Scores, loss trace, configuration echo and timings of a run. Serializes
/// to JSON with stable field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub autocorr_score: Option<f64>,
    pub diversity_score: Option<f64>,
    /// Always `null`: the pretrained classifier score is not computed.
    pub vggish_score: Option<f64>,
    pub vggish_note: String,
    pub trace: Vec<TraceRecord>,
    pub config: serde_json::Value,
    /// Wall-clock seconds per phase.
    pub timing: BTreeMap<String, f64>,
    /// Objective evaluations spent by the optimizer.
    pub evaluations: usize,
    pub notes: Vec<String>,
}

pub const VGGISH_NOTE: &str = "not computed: requires a pretrained audio classifier";

impl Default for EvaluationReport {
    fn default() -> Self {
        Self {
            autocorr_score: None,
            diversity_score: None,
            vggish_score: None,
            vggish_note: VGGISH_NOTE.to_string(),
            trace: Vec::new(),
            config: serde_json::Value::Null,
            timing: BTreeMap::new(),
            evaluations: 0,
            notes: Vec::new(),
        }
    }
}

impl EvaluationReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a trace record; iterations must strictly increase.
    pub fn record_trace(
        &mut self,
        iteration: usize,
        breakdown: &LossBreakdown,
        weights: &LossWeights,
    ) -> Result<(), EvaluationError> {
        if let Some(last) = self.trace.last() {
            if iteration <= last.iteration {
                return Err(EvaluationError::OutOfOrder {
                    last: last.iteration,
                    got: iteration,
                });
            }
        }
        self.trace.push(TraceRecord::new(iteration, breakdown, weights));
        Ok(())
    }

    pub fn set_timing(&mut self, phase: &str, seconds: f64) {
        self.timing.insert(phase.to_string(), seconds);
    }

    pub fn to_json(&self) -> Result<String, EvaluationError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the JSON document atomically (temp file and rename).
    pub fn save(&self, path: &Path) -> Result<(), EvaluationError> {
        let json = self.to_json()?;
        crate::write_atomic(path, json.as_bytes()).map_err(|source| EvaluationError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
