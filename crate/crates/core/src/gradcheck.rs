//! Finite-difference check of the total loss gradient on small random
//! instances.
//!
//! Directions whose central difference straddles a ReLU kink or a change of
//! the maximizing diversity shift are redrawn, since the loss is only
//! piecewise smooth there.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::features::{init_ensemble, FeatureEnsemble};
use crate::losses::{
    total_loss_and_grad, LagWindow, LossBreakdown, LossError, LossOptions, LossWeights, TargetStatistics,
    DIVERSITY_EPSILON,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub frames: usize,
    pub bins: usize,
    pub widths: Vec<usize>,
    pub n_filters: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lag_window: LagWindow,
    /// Candidate shifts drawn per instance for the diversity term.
    pub shifts: usize,
    pub directions: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Scales the analytic gradient before comparison. Anything but 1 makes
    /// the check fail; used to test the checker itself.
    pub gradient_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            frames: 64,
            bins: 9,
            widths: vec![2, 4],
            n_filters: 8,
            alpha: 1.0,
            beta: 1.0,
            lag_window: LagWindow {
                min_lag: 3,
                max_lag: 30,
            },
            shifts: 8,
            directions: 50,
            epsilon: 1e-4,
            tolerance: 1e-4,
            seed: 0,
            gradient_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub directions_checked: usize,
    /// Directions redrawn because they crossed a kink.
    pub directions_skipped: usize,
    pub passed: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Features(#[from] crate::features::FeatureError),
    #[error("invalid gradient check configuration: {0}")]
    InvalidConfig(String),
    #[error("instance {instance}: only {found} of {wanted} directions avoided kinks")]
    TooManyKinks {
        instance: usize,
        found: usize,
        wanted: usize,
    },
}

/// Kink-free draws allowed per requested direction before giving up.
const MAX_DRAWS_PER_DIRECTION: usize = 20;

pub fn gradient_check(config: &GradCheckConfig) -> Result<GradCheckReport, GradCheckError> {
    if config.instances == 0 || config.directions == 0 {
        return Err(GradCheckError::InvalidConfig(
            "need at least one instance and direction".into(),
        ));
    }
    if !(config.epsilon > 0.0) {
        return Err(GradCheckError::InvalidConfig(format!(
            "epsilon must be positive, got {}",
            config.epsilon
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        directions_checked: 0,
        directions_skipped: 0,
        passed: false,
    };
    let weights = LossWeights {
        alpha: config.alpha,
        beta: config.beta,
    };
    let window = (config.alpha != 0.0)
        .then(|| config.lag_window.clamped(config.frames))
        .flatten();
    for instance in 0..config.instances {
        let ensemble = init_ensemble(rng.gen(), &config.widths, config.n_filters, config.bins)?;
        let target = random_input(&mut rng, config.frames, config.bins);
        let input = random_input(&mut rng, config.frames, config.bins);
        let targets = TargetStatistics::new(&ensemble, target.view())?;
        let shifts: BTreeSet<usize> = sample(&mut rng, config.frames, config.shifts.clamp(1, config.frames))
            .into_iter()
            .collect();
        let options = LossOptions {
            window,
            shifts: (config.beta != 0.0).then_some(&shifts),
            relative_epsilon: DIVERSITY_EPSILON,
        };
        let eval = |x: ArrayView2<f64>| total_loss_and_grad(x, &ensemble, &targets, &weights, &options);
        let base = eval(input.view())?;
        let pattern = Pattern::at(&ensemble, input.view(), &base)?;

        let mut found = 0;
        let mut draws = 0;
        while found < config.directions {
            if draws == config.directions * MAX_DRAWS_PER_DIRECTION {
                return Err(GradCheckError::TooManyKinks {
                    instance,
                    found,
                    wanted: config.directions,
                });
            }
            draws += 1;
            let mut direction = Array2::from_shape_simple_fn(input.dim(), || rng.sample::<f64, _>(StandardNormal));
            let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            direction /= norm;
            let plus = &input + &(config.epsilon * &direction);
            let minus = &input - &(config.epsilon * &direction);
            let up = eval(plus.view())?;
            let down = eval(minus.view())?;
            if Pattern::at(&ensemble, plus.view(), &up)? != pattern
                || Pattern::at(&ensemble, minus.view(), &down)? != pattern
            {
                report.directions_skipped += 1;
                continue;
            }
            let numeric = (up.total - down.total) / (2.0 * config.epsilon);
            let analytic = config.gradient_scale * (&base.grad * &direction).sum();
            let scale = numeric.abs().max(analytic.abs()).max(f64::MIN_POSITIVE);
            let error = (numeric - analytic).abs() / scale;
            report.max_relative_error = report.max_relative_error.max(error);
            report.directions_checked += 1;
            found += 1;
        }
    }
    report.passed = report.max_relative_error <= config.tolerance;
    Ok(report)
}

fn random_input(rng: &mut ChaCha8Rng, frames: usize, bins: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((frames, bins), || rng.gen_range(0.0..2.0))
}

/// Which side of every kink a point sits on.
#[derive(PartialEq)]
struct Pattern {
    active: Vec<bool>,
    best_shift: Option<usize>,
}

impl Pattern {
    fn at(ensemble: &FeatureEnsemble, x: ArrayView2<f64>, loss: &LossBreakdown) -> Result<Self, GradCheckError> {
        let mut active = Vec::new();
        for net in ensemble.nets() {
            active.extend(net.pre_activation(x)?.iter().map(|&v| v > 0.0));
        }
        Ok(Self {
            active,
            best_shift: loss.best_shift,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradCheckConfig {
        GradCheckConfig {
            instances: 2,
            directions: 5,
            ..Default::default()
        }
    }

    #[test]
    fn exact_gradient_passes() {
        let report = gradient_check(&quick()).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.directions_checked, 10);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let report = gradient_check(&GradCheckConfig {
            gradient_scale: 1.01,
            ..quick()
        })
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_relative_error > 1e-3);
    }

    #[test]
    fn gram_only_passes() {
        let report = gradient_check(&GradCheckConfig {
            alpha: 0.0,
            beta: 0.0,
            ..quick()
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn zero_directions_rejected() {
        let err = gradient_check(&GradCheckConfig {
            directions: 0,
            ..quick()
        });
        assert!(matches!(err, Err(GradCheckError::InvalidConfig(_))));
    }
}
