//! Second stage: regression of treated outcomes on the kernel-smoothed
//! reduced form of the tensor basis, under an H¹ norm bound on the
//! coefficients.
//!
//! For a treated unit at transformed covariate `v`, the regressor for basis
//! pair `(j1, j2)` is `c(v) s_{j1}(v) q_{j2}(v)`, where `s_{j1}` integrates
//! `q_{j1}(u) exp(k_{y0}(u))` against the control joint density. With a
//! Gaussian kernel in `u` that inner integral reduces to a Gauss–Hermite sum
//! per control record (`t_hat`), which does not depend on `v` and is cached.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{fit_affine, legendre, sobolev_matrix, AffineMap, SobolevMatrix, TensorBasis, DEFAULT_MARGIN_FRACTION};
use crate::density::{c_hat, gaussian_kernel, Bandwidths, DensitySource, JointKde, KdeDensities, OracleDensities};
use crate::dgp::{DgpConfig, ObservedDataset};
use crate::error::{HteError, Result};
use crate::mechanism::{reexpress, Frame, MechanismParams};
use crate::numerics::{gauss_hermite, solve_spd, NeumaierSum, QuadratureRule, SpdMatrix};

pub const DEFAULT_HERMITE_NODES: usize = 32;
pub const LAMBDA_MIN: f64 = 1e-12;
pub const LAMBDA_MAX: f64 = 1e6;
const MAX_BISECTIONS: usize = 400;

fn check_integrable(mech: &MechanismParams, h_y0: f64) -> Result<()> {
    let guard = 2.0 * h_y0 * h_y0 * mech.beta2;
    if guard >= 1.0 {
        return Err(HteError::DivergentIntegral {
            beta2: mech.beta2,
            bandwidth: h_y0,
            guard,
        });
    }
    Ok(())
}

/// `∫ q_{j1}(u) exp(k_{y0}(u)) (1/h) K((u - center)/h) du` by Gauss–Hermite.
///
/// `mech` is in the transformed frame. Fails when `2 h² beta2 >= 1`, where
/// the Gaussian kernel no longer dominates `exp(beta2 u²)`.
pub fn t_hat(j1: usize, center: f64, mech: &MechanismParams, h_y0: f64, rule: &QuadratureRule) -> Result<f64> {
    check_integrable(mech, h_y0)?;
    Ok(t_hat_unchecked(j1, center, mech, h_y0, rule))
}

fn t_hat_unchecked(j1: usize, center: f64, mech: &MechanismParams, h_y0: f64, rule: &QuadratureRule) -> f64 {
    let scale = std::f64::consts::SQRT_2 * h_y0;
    rule.integrate(|t| {
        let u = center + scale * t;
        legendre(j1, u) * mech.outcome_term(u).exp()
    }) / PI.sqrt()
}

/// Uncached `s_{j1}(v) = (1/N0) Σ (1/h_x) K((v - v_i)/h_x) t_hat_{j1}(u_i)`.
pub fn s_hat(j1: usize, v: f64, joint: &JointKde, mech: &MechanismParams, n_hermite: usize) -> Result<f64> {
    let rule = gauss_hermite(n_hermite)?;
    check_integrable(mech, joint.h_y0())?;
    let mut acc = NeumaierSum::default();
    for &(ui, vi) in joint.points() {
        let k = gaussian_kernel((v - vi) / joint.h_x());
        acc.add(k * t_hat_unchecked(j1, ui, mech, joint.h_y0(), &rule));
    }
    Ok(acc.value() / (joint.h_x() * joint.points().len() as f64))
}

/// `t_hat_j(u_i)` for every control support point (in the joint estimate's
/// sorted order) and every `j <= order`.
#[derive(Debug, Clone, PartialEq)]
pub struct TCache {
    order: usize,
    /// row-major: point i, degree j
    values: Vec<f64>,
}

impl TCache {
    pub fn build(joint: &JointKde, mech: &MechanismParams, order: usize, n_hermite: usize) -> Result<Self> {
        let rule = gauss_hermite(n_hermite)?;
        check_integrable(mech, joint.h_y0())?;
        let side = order + 1;
        let mut values = Vec::with_capacity(joint.points().len() * side);
        for &(ui, _) in joint.points() {
            for j in 0..side {
                values.push(t_hat_unchecked(j, ui, mech, joint.h_y0(), &rule));
            }
        }
        Ok(Self { order, values })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn s_values(&self, joint: &JointKde, v: f64) -> Vec<f64> {
        let side = self.order + 1;
        let mut acc = vec![NeumaierSum::default(); side];
        for (i, &(_, vi)) in joint.points().iter().enumerate() {
            let k = gaussian_kernel((v - vi) / joint.h_x());
            let t = &self.values[i * side..(i + 1) * side];
            for (a, tj) in acc.iter_mut().zip(t) {
                a.add(k * tj);
            }
        }
        let norm = joint.h_x() * joint.points().len() as f64;
        acc.iter().map(|a| a.value() / norm).collect()
    }
}

/// Rows are usable treated units in dataset order; columns follow the
/// basis' row-major pair order.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    pub response: Vec<f64>,
    /// Dataset position of each row.
    pub source_rows: Vec<usize>,
    /// Treated units dropped because `p(x | z = 1)` fell below the floor.
    pub dropped: usize,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }
}

pub fn build_design(
    dataset: &ObservedDataset,
    basis: &TensorBasis,
    mech: &MechanismParams,
    densities: &dyn DensitySource,
) -> Result<DesignMatrix> {
    let side = basis.side();
    let treated: Vec<(usize, f64, f64)> = dataset
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.z == 1)
        .map(|(i, r)| (i, r.x, r.y_obs))
        .collect();
    let rows: Vec<Result<Option<(usize, Vec<f64>, f64)>>> = treated
        .par_iter()
        .map(|&(idx, x, y1)| {
            let v = basis.map_x.forward(x);
            let c = match c_hat(v, mech, densities) {
                Ok(c) => c,
                Err(HteError::LowDensity { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let s = densities.s_values(v)?;
            let mut row = vec![0.0; side * side];
            for j1 in 0..side {
                for j2 in 0..side {
                    row[j1 * side + j2] = c * s[j1] * legendre(j2, v);
                }
            }
            Ok(Some((idx, row, y1)))
        })
        .collect();

    let mut dropped = 0;
    let mut data = Vec::new();
    let mut response = Vec::new();
    let mut source_rows = Vec::new();
    for r in rows {
        match r? {
            Some((idx, row, y1)) => {
                data.extend(row);
                response.push(y1);
                source_rows.push(idx);
            }
            None => dropped += 1,
        }
    }
    if response.is_empty() {
        return Err(HteError::EmptyDesign);
    }
    Ok(DesignMatrix {
        matrix: DMatrix::from_row_slice(response.len(), side * side, &data),
        response,
        source_rows,
        dropped,
    })
}

/// Solution of the norm-bounded least-squares problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedFit {
    pub gamma: Vec<f64>,
    /// Active multiplier; zero when the bound is slack.
    pub lambda: f64,
    /// `γᵀ Λ γ`.
    pub norm: f64,
    /// `(1/n) ‖y - Aγ‖²`.
    pub objective: f64,
}

/// Normal-equation pieces `AᵀA/n` and `Aᵀy/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub gram: DMatrix<f64>,
    pub moment: DVector<f64>,
    pub response_ss: f64,
}

impl NormalEquations {
    pub fn new(design: &DMatrix<f64>, response: &[f64]) -> Self {
        let n = design.nrows() as f64;
        let y = DVector::from_column_slice(response);
        let g = design.tr_mul(design) / n;
        let gram = (&g + g.transpose()) * 0.5;
        let moment = design.tr_mul(&y) / n;
        Self {
            gram,
            moment,
            response_ss: y.norm_squared() / n,
        }
    }

    /// `(1/n)‖y - Aγ‖²` from the sufficient statistics.
    pub fn objective(&self, gamma: &[f64]) -> f64 {
        let g = DVector::from_column_slice(gamma);
        self.response_ss - 2.0 * g.dot(&self.moment) + g.dot(&(&self.gram * &g))
    }

    /// `γ(λ) = (AᵀA/n + λΛ)⁻¹ Aᵀy/n`.
    pub fn ridge_solution(&self, penalty: &DMatrix<f64>, lambda: f64) -> Result<Vec<f64>> {
        let m = &self.gram + penalty * lambda;
        let m = (&m + m.transpose()) * 0.5;
        let spd = SpdMatrix::new(m)?;
        solve_spd(&spd, self.moment.as_slice())
    }
}

/// Minimizes `(1/n)‖y - Aγ‖²` subject to `γᵀΛγ <= bound` along the
/// Lagrangian path `γ(λ)`.
///
/// If the near-unconstrained solution at `λ0 = 1e-10 tr(AᵀA/n) / tr(Λ)` is
/// feasible it is returned with a zero multiplier; otherwise `log λ` is
/// bisected until the norm matches the bound to `1e-6` relative.
pub fn constrained_ls(design: &DesignMatrix, penalty: &SobolevMatrix, bound: f64) -> Result<ConstrainedFit> {
    let eq = NormalEquations::new(&design.matrix, &design.response);
    constrained_ls_normal(&eq, penalty.matrix(), bound)
}

pub fn constrained_ls_normal(eq: &NormalEquations, penalty: &DMatrix<f64>, bound: f64) -> Result<ConstrainedFit> {
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(HteError::InvalidArgument(format!("norm bound must be positive, got {bound}")));
    }
    if penalty.nrows() != eq.gram.nrows() {
        return Err(HteError::InvalidArgument("penalty and design dimensions differ".into()));
    }
    let norm_of = |g: &[f64]| {
        let v = DVector::from_column_slice(g);
        v.dot(&(penalty * &v))
    };
    let finish = |gamma: Vec<f64>, lambda: f64| {
        let norm = norm_of(&gamma);
        let objective = eq.objective(&gamma);
        ConstrainedFit {
            gamma,
            lambda,
            norm,
            objective,
        }
    };

    let tr_pen = penalty.trace();
    let tr_gram = eq.gram.trace();
    let lambda0 = if tr_gram > 0.0 { 1e-10 * tr_gram / tr_pen } else { LAMBDA_MIN };
    let g0 = eq.ridge_solution(penalty, lambda0)?;
    if norm_of(&g0) <= bound {
        return Ok(finish(g0, 0.0));
    }

    let g_hi = eq.ridge_solution(penalty, LAMBDA_MAX)?;
    let n_hi = norm_of(&g_hi);
    if n_hi > bound {
        return Err(HteError::RegularizationFailure { norm: n_hi, bound });
    }
    let mut lo = lambda0.min(LAMBDA_MIN).ln();
    let mut hi = LAMBDA_MAX.ln();
    let mut best = (g_hi, LAMBDA_MAX);
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let lambda = mid.exp();
        let g = eq.ridge_solution(penalty, lambda)?;
        let n = norm_of(&g);
        let gap = (n - bound).abs();
        if gap <= 1e-6 * bound && lambda * gap <= 1e-5 * bound {
            return Ok(finish(g, lambda));
        }
        if n > bound {
            lo = mid;
        } else {
            hi = mid;
            best = (g, lambda);
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(finish(best.0, best.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeriesSettings {
    pub order: usize,
    pub n_hermite: usize,
    pub sobolev_quad: usize,
    pub margin_fraction: f64,
    /// Map treated outcomes into `[-1, 1]` before the regression and back after.
    pub scale_outcome: bool,
}

impl Default for SeriesSettings {
    fn default() -> Self {
        Self {
            order: 3,
            n_hermite: DEFAULT_HERMITE_NODES,
            sobolev_quad: 8,
            margin_fraction: DEFAULT_MARGIN_FRACTION,
            scale_outcome: true,
        }
    }
}

/// Where stage two takes its densities from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DensityMode {
    Kde,
    /// Closed-form densities of the given design (oracle checks only).
    Oracle(DgpConfig),
}

/// Everything in stage two that does not depend on the norm bound.
#[derive(Clone)]
pub struct PreparedStage {
    pub basis: TensorBasis,
    /// Outcome scale of the regression; identity unless outcomes are scaled.
    pub map_y1: AffineMap,
    pub mechanism: MechanismParams,
    pub densities: Arc<dyn DensitySource>,
    pub design: DesignMatrix,
    pub normal: NormalEquations,
    pub sobolev: SobolevMatrix,
    pub settings: SeriesSettings,
}

impl std::fmt::Debug for PreparedStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PreparedStage")
            .field("basis", &self.basis)
            .field("mechanism", &self.mechanism)
            .field("bandwidths", &self.densities.bandwidths())
            .field("rows", &self.design.rows())
            .field("dropped", &self.design.dropped)
            .finish()
    }
}

/// Fits the affine maps, re-expresses the mechanism, builds densities and the
/// design, and assembles the penalty matrix.
pub fn prepare_stage_two(
    dataset: &ObservedDataset,
    mech_original: &MechanismParams,
    settings: &SeriesSettings,
    mode: DensityMode,
) -> Result<PreparedStage> {
    if mech_original.frame != Frame::Original {
        return Err(HteError::InvalidArgument("mechanism must be in the original frame".into()));
    }
    let xs: Vec<f64> = dataset.records().iter().map(|r| r.x).collect();
    let control_y0: Vec<f64> = dataset.controls().map(|(_, y0)| y0).collect();
    let map_x = fit_affine(&xs, settings.margin_fraction)?;
    let map_y0 = fit_affine(&control_y0, settings.margin_fraction)?;
    let basis = TensorBasis::new(settings.order, map_y0, map_x);
    let mechanism = reexpress(mech_original, &map_y0, &map_x)?;

    let densities: Arc<dyn DensitySource> = match mode {
        DensityMode::Kde => {
            let controls: Vec<(f64, f64)> = dataset
                .controls()
                .map(|(x, y0)| (map_y0.forward(y0), map_x.forward(x)))
                .collect();
            let treated_x: Vec<f64> = dataset.treated().map(|(x, _)| map_x.forward(x)).collect();
            Arc::new(KdeDensities::fit(
                &controls,
                &treated_x,
                &mechanism,
                settings.order,
                settings.n_hermite,
            )?)
        }
        DensityMode::Oracle(config) => Arc::new(OracleDensities::new(&config, map_y0, map_x, settings.order)?),
    };
    let design = build_design(dataset, &basis, &mechanism, densities.as_ref())?;
    let map_y1 = if settings.scale_outcome {
        let y1: Vec<f64> = dataset.treated().map(|(_, y1)| y1).collect();
        fit_affine(&y1, settings.margin_fraction)?
    } else {
        AffineMap::IDENTITY
    };
    let scaled: Vec<f64> = design.response.iter().map(|&y| map_y1.forward(y)).collect();
    let normal = NormalEquations::new(&design.matrix, &scaled);
    let sobolev = sobolev_matrix(settings.order, settings.sobolev_quad)?;
    Ok(PreparedStage {
        basis,
        map_y1,
        mechanism,
        densities,
        design,
        normal,
        sobolev,
        settings: *settings,
    })
}

/// Fitted series approximation of `E[y1 | y0, x]` with its metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesModel {
    pub basis: TensorBasis,
    /// Outcome map; `gamma` describes `map_y1(E[y1 | y0, x])`.
    pub map_y1: AffineMap,
    /// Row-major in `(j1, j2)`.
    pub gamma: Vec<f64>,
    pub b_gamma: f64,
    pub lambda: f64,
    pub norm: f64,
    pub objective: f64,
    pub mechanism: MechanismParams,
    pub bandwidths: Option<Bandwidths>,
    pub rows_used: usize,
    pub dropped_rows: usize,
}

impl SeriesModel {
    /// `φ̂(y0, x)` on the original scale.
    pub fn phi(&self, y0: f64, x: f64) -> f64 {
        self.phi_transformed(self.basis.map_y0.forward(y0), self.basis.map_x.forward(x))
    }

    /// `φ̂` at transformed covariates `(u, v)`, on the original outcome scale.
    pub fn phi_transformed(&self, u: f64, v: f64) -> f64 {
        self.map_y1.inverse(self.basis.eval_transformed(&self.gamma, u, v))
    }
}

pub fn fit_series(prepared: &PreparedStage, b_gamma: f64) -> Result<SeriesModel> {
    let fit = constrained_ls_normal(&prepared.normal, prepared.sobolev.matrix(), b_gamma)?;
    Ok(SeriesModel {
        basis: prepared.basis,
        map_y1: prepared.map_y1,
        gamma: fit.gamma,
        b_gamma,
        lambda: fit.lambda,
        norm: fit.norm,
        objective: fit.objective,
        mechanism: prepared.mechanism,
        bandwidths: prepared.densities.bandwidths(),
        rows_used: prepared.design.rows(),
        dropped_rows: prepared.design.dropped,
    })
}
