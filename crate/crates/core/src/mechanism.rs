//! Logistic assignment mechanism `p(z = 1 | y0, x)` and its estimation from
//! control-group data plus known moments of the covariate and the untreated
//! outcome.
//!
//! The linear index is `k0 + beta0 x + beta1 y0 + beta2 y0²`. The estimating
//! equations reweight each control record by `1 / p(z = 0 | y0, x)`, which
//! equals `1 + exp(index)`, so the weighted control sample reproduces the
//! known population moments and the weights sum to the total sample size.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::AffineMap;
use crate::dgp::{KnownMoments, ObservedDataset};
use crate::error::{HteError, Result};
use crate::numerics::{newton_solve, sup_norm, NeumaierSum, NewtonOptions};

pub const PROPENSITY_CLAMP: f64 = 1e-12;
pub const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    #[default]
    Original,
    Transformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismParams {
    pub k0: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default)]
    pub frame: Frame,
}

impl MechanismParams {
    pub fn new(k0: f64, beta0: f64, beta1: f64, beta2: f64, frame: Frame) -> Self {
        Self {
            k0,
            beta0,
            beta1,
            beta2,
            frame,
        }
    }

    pub fn zero(frame: Frame) -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0, frame)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.k0, self.beta0, self.beta1, self.beta2]
    }

    pub fn from_slice(v: &[f64], frame: Frame) -> Self {
        Self::new(v[0], v[1], v[2], v[3], frame)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    /// `k0 + beta0 x + beta1 y0 + beta2 y0²`.
    pub fn index(&self, y0: f64, x: f64) -> f64 {
        self.k0 + self.beta0 * x + self.outcome_term(y0)
    }

    /// `k_{y0}(y0) = beta1 y0 + beta2 y0²`.
    pub fn outcome_term(&self, y0: f64) -> f64 {
        self.beta1 * y0 + self.beta2 * y0 * y0
    }

    /// `k0 + k_x(x)`.
    pub fn covariate_term(&self, x: f64) -> f64 {
        self.k0 + self.beta0 * x
    }
}

/// Logistic assignment probability, clamped to `[1e-12, 1 - 1e-12]`.
pub fn propensity(params: &MechanismParams, y0: f64, x: f64) -> f64 {
    logistic(params.index(y0, x)).clamp(PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP)
}

pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Exactly identified moment system. Components 1–3 are the inverse-probability
/// weighted control means of `(x - E[x], y0 - E[y0], y0² - E[y0²])`; component 4
/// is the weight total minus `N`.
pub fn moment_residual(
    params: &MechanismParams,
    dataset: &ObservedDataset,
    moments: &KnownMoments,
) -> Result<[f64; 4]> {
    let n0 = dataset.n0();
    if n0 == 0 {
        return Err(HteError::InsufficientData(
            "moment residual needs at least one control record".into(),
        ));
    }
    let mut acc = [NeumaierSum::default(); 4];
    for (record, (x, y0)) in dataset.controls_indexed() {
        let eta = params.index(y0, x);
        if eta > MAX_EXPONENT || !eta.is_finite() {
            return Err(HteError::Overflow {
                record,
                exponent: eta,
            });
        }
        let w = 1.0 + eta.exp();
        acc[0].add((x - moments.mean_x) * w);
        acc[1].add((y0 - moments.mean_y0) * w);
        acc[2].add((y0 * y0 - moments.second_moment_y0) * w);
        acc[3].add(w);
    }
    let n0 = n0 as f64;
    Ok([
        acc[0].value() / n0,
        acc[1].value() / n0,
        acc[2].value() / n0,
        acc[3].value() - dataset.n() as f64,
    ])
}

/// Analytic Jacobian of [`moment_residual`] with respect to `(k0, beta0, beta1, beta2)`.
pub fn moment_jacobian(
    params: &MechanismParams,
    dataset: &ObservedDataset,
    moments: &KnownMoments,
) -> Result<DMatrix<f64>> {
    let mut acc = [[NeumaierSum::default(); 4]; 4];
    for (record, (x, y0)) in dataset.controls_indexed() {
        let eta = params.index(y0, x);
        if eta > MAX_EXPONENT || !eta.is_finite() {
            return Err(HteError::Overflow {
                record,
                exponent: eta,
            });
        }
        let e = eta.exp();
        let grad = [1.0, x, y0, y0 * y0];
        let m = [
            x - moments.mean_x,
            y0 - moments.mean_y0,
            y0 * y0 - moments.second_moment_y0,
            1.0,
        ];
        for (row, mk) in acc.iter_mut().zip(m) {
            for (cell, g) in row.iter_mut().zip(grad) {
                cell.add(mk * e * g);
            }
        }
    }
    let n0 = dataset.n0().max(1) as f64;
    Ok(DMatrix::from_fn(4, 4, |i, j| {
        let v = acc[i][j].value();
        if i < 3 {
            v / n0
        } else {
            v
        }
    }))
}

/// Diagnostics for one failed start of [`fit_mechanism`].
#[derive(Debug, Clone, PartialEq)]
pub struct StartFailure {
    pub start: MechanismParams,
    pub error: HteError,
}

/// Starting points tried in order: `start`, all zeros, then `start ± 0.5`
/// along each coordinate.
pub fn default_starts(start: &MechanismParams) -> Vec<MechanismParams> {
    let mut starts = vec![*start, MechanismParams::zero(Frame::Original)];
    let base = start.to_vec();
    for i in 0..4 {
        for delta in [0.5, -0.5] {
            let mut v = base.clone();
            v[i] += delta;
            starts.push(MechanismParams::from_slice(&v, Frame::Original));
        }
    }
    starts
}

/// Solves the moment system by damped Newton iteration, falling back to the
/// [`default_starts`] list when a start fails.
pub fn fit_mechanism(
    dataset: &ObservedDataset,
    moments: &KnownMoments,
    start: &MechanismParams,
    tol: f64,
) -> Result<MechanismParams> {
    if dataset.n0() == 0 {
        return Err(HteError::InsufficientData(
            "no control records to fit the assignment mechanism".into(),
        ));
    }
    let residual = |theta: &[f64]| {
        let p = MechanismParams::from_slice(theta, Frame::Original);
        moment_residual(&p, dataset, moments).map(|r| r.to_vec())
    };
    let jacobian = |theta: &[f64]| {
        let p = MechanismParams::from_slice(theta, Frame::Original);
        moment_jacobian(&p, dataset, moments)
    };
    let opts = NewtonOptions {
        tol,
        max_iter: 200,
        max_halvings: 30,
    };
    let mut failures = Vec::new();
    for s in default_starts(start) {
        match newton_solve(residual, Some(&jacobian), &s.to_vec(), opts) {
            Ok(theta) => {
                let fitted = MechanismParams::from_slice(&theta, Frame::Original);
                let r = moment_residual(&fitted, dataset, moments)?;
                if sup_norm(&r) <= tol {
                    return Ok(fitted);
                }
            }
            Err(error) => failures.push(StartFailure { start: s, error }),
        }
    }
    let best = failures
        .iter()
        .filter_map(|f| match &f.error {
            HteError::NoConvergence {
                residual_norm,
                last_iterate,
                iterations,
            } => Some((*residual_norm, last_iterate.clone(), *iterations)),
            _ => None,
        })
        .min_by(|a, b| a.0.total_cmp(&b.0));
    Err(match best {
        Some((residual_norm, last_iterate, iterations)) => HteError::NoConvergence {
            iterations,
            residual_norm,
            last_iterate,
        },
        None => HteError::NoConvergence {
            iterations: 0,
            residual_norm: f64::INFINITY,
            last_iterate: start.to_vec(),
        },
    })
}

/// Rewrites original-frame coefficients in the coordinates
/// `u = map_y0(y0)`, `v = map_x(x)`, leaving the propensity unchanged.
pub fn reexpress(
    params: &MechanismParams,
    map_y0: &AffineMap,
    map_x: &AffineMap,
) -> Result<MechanismParams> {
    if params.frame != Frame::Original {
        return Err(HteError::InvalidArgument(
            "only original-frame parameters can be re-expressed".into(),
        ));
    }
    // y0 = a u + b, x = c v + d
    let a = 1.0 / map_y0.scale;
    let b = -map_y0.shift / map_y0.scale;
    let c = 1.0 / map_x.scale;
    let d = -map_x.shift / map_x.scale;
    Ok(MechanismParams {
        k0: params.k0 + params.beta0 * d + params.beta1 * b + params.beta2 * b * b,
        beta0: params.beta0 * c,
        beta1: params.beta1 * a + 2.0 * params.beta2 * a * b,
        beta2: params.beta2 * a * a,
        frame: Frame::Transformed,
    })
}
