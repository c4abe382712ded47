//! Integrating the fitted `φ̂(y0, x)` into `Ê[y1 | y0]`, the HTE curve and
//! two ATE functionals.
//!
//! Plug-in conditional densities are renormalized over the quadrature grid
//! before use, so a constant `φ̂` integrates back to itself exactly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::basis::{AffineMap, TensorBasis};
use crate::density::{p_x_given_y0, DensitySource};
use crate::dgp::KnownMarginal;
use crate::error::{HteError, Result};
use crate::mechanism::{propensity, MechanismParams};
use crate::numerics::{gauss_legendre, NeumaierSum};
use crate::series::SeriesModel;

pub const DEFAULT_QUAD: usize = 64;
pub const MIN_QUAD: usize = 16;
pub const DEFAULT_GRID_POINTS: usize = 101;
pub const DEFAULT_GRID_MASS: f64 = 0.98;
/// Unnormalized conditional mass below which a `y0` is out of support.
pub const MASS_FLOOR: f64 = 1e-8;
/// Minimum share of known-marginal mass that must survive in `ate_from_curve`.
pub const MIN_RETAINED_MASS: f64 = 0.99;

/// Evenly spaced `y0` grid on the original scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl GridSpec {
    /// Grid over the central `mass` of the known marginal.
    pub fn central(marginal: &KnownMarginal, mass: f64, count: usize) -> Result<Self> {
        let (lo, hi) = marginal.central_interval(mass)?;
        Ok(Self { lo, hi, count })
    }

    pub fn points(&self) -> Result<Vec<f64>> {
        if self.count < 2 || !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(HteError::InvalidArgument(format!(
                "grid needs lo < hi and at least two points, got {self:?}"
            )));
        }
        let step = (self.hi - self.lo) / (self.count - 1) as f64;
        Ok((0..self.count).map(|i| self.lo + step * i as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HteCurve {
    pub grid: Vec<f64>,
    pub e_y1: Vec<Option<f64>>,
    pub hte: Vec<Option<f64>>,
    pub truth: Option<Vec<f64>>,
}

impl HteCurve {
    pub fn from_values(grid: Vec<f64>, e_y1: Vec<Option<f64>>) -> Self {
        let hte = grid.iter().zip(&e_y1).map(|(y0, e)| e.map(|e| e - y0)).collect();
        Self {
            grid,
            e_y1,
            hte,
            truth: None,
        }
    }

    pub fn with_truth<F: Fn(f64) -> f64>(mut self, truth: F) -> Self {
        self.truth = Some(self.grid.iter().map(|&y| truth(y)).collect());
        self
    }

    pub fn missing(&self) -> usize {
        self.e_y1.iter().filter(|v| v.is_none()).count()
    }

    /// CSV with header `y0,e_y1,hte[,truth]`; missing points are empty fields.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        if self.truth.is_some() {
            w.write_record(["y0", "e_y1", "hte", "truth"])?;
        } else {
            w.write_record(["y0", "e_y1", "hte"])?;
        }
        for i in 0..self.grid.len() {
            let mut row = vec![self.grid[i].to_string(), fmt(self.e_y1[i]), fmt(self.hte[i])];
            if let Some(t) = &self.truth {
                row.push(t[i].to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Normalized `(v, weight)` pairs approximating `p̂(x | y0)` on the
/// Gauss–Legendre nodes of `[-1, 1]`.
pub fn conditional_x_weights(
    u: f64,
    nodes: &[(f64, f64)],
    densities: &dyn DensitySource,
    mech: &MechanismParams,
    marginal: &KnownMarginal,
    map_y0: &AffineMap,
) -> Result<Vec<(f64, f64)>> {
    let mut raw = Vec::with_capacity(nodes.len());
    let mut mass = NeumaierSum::default();
    for &(v, w) in nodes {
        let p = p_x_given_y0(v, u, densities, mech, marginal, map_y0)?;
        mass.add(w * p);
        raw.push((v, w * p));
    }
    let mass = mass.value();
    if !(mass >= MASS_FLOOR) {
        return Err(HteError::OutOfSupport(map_y0.inverse(u)));
    }
    Ok(raw.into_iter().map(|(v, w)| (v, w / mass)).collect())
}

fn integrate_phi(model: &SeriesModel, u: f64, weights: &[(f64, f64)]) -> f64 {
    let mut acc = NeumaierSum::default();
    for &(v, w) in weights {
        acc.add(w * model.phi_transformed(u, v));
    }
    acc.value()
}

/// Density-dependent quadrature weights shared by every model fitted on the
/// same replication (same maps, mechanism and densities).
#[derive(Debug, Clone)]
pub struct Integrator {
    basis: TensorBasis,
    grid: Vec<f64>,
    grid_weights: Vec<Option<Vec<(f64, f64)>>>,
    /// `(u, p(y0) weight, conditional weights)` on the known-marginal support.
    ate_nodes: Vec<(f64, f64, Option<Vec<(f64, f64)>>)>,
    direct: Option<Vec<(f64, f64, f64)>>,
    mean_y0: f64,
}

impl Integrator {
    pub fn new(
        basis: &TensorBasis,
        mech: &MechanismParams,
        densities: &dyn DensitySource,
        marginal: &KnownMarginal,
        grid: &[f64],
        n_quad: usize,
    ) -> Result<Self> {
        if n_quad < MIN_QUAD {
            return Err(HteError::InvalidArgument(format!(
                "quadrature needs at least {MIN_QUAD} nodes, got {n_quad}"
            )));
        }
        let rule = gauss_legendre(n_quad)?;
        let nodes: Vec<(f64, f64)> = rule.iter().collect();
        let map_y0 = basis.map_y0;
        let weights_at = |y0: f64| {
            conditional_x_weights(map_y0.forward(y0), &nodes, densities, mech, marginal, &map_y0)
        };

        let (lo, hi) = marginal.support();
        for &y in grid {
            if !(y >= lo && y <= hi) {
                return Err(HteError::OutOfSupport(y));
            }
        }
        let grid_weights = grid.iter().map(|&y| weights_at(y).ok()).collect();

        let ate_nodes = rule
            .mapped(lo, hi)
            .into_iter()
            .map(|(y0, w)| (map_y0.forward(y0), w * marginal.density(y0), weights_at(y0).ok()))
            .collect();

        let mut direct = Vec::with_capacity(n_quad * n_quad);
        let mut mass = NeumaierSum::default();
        let share0 = densities.control_share();
        for &(u, wu) in &nodes {
            for &(v, wv) in &nodes {
                let p = densities.joint_control(u, v) * share0 / (1.0 - propensity(mech, u, v));
                mass.add(wu * wv * p);
                direct.push((u, v, wu * wv * p));
            }
        }
        let mass = mass.value();
        let direct = (mass >= MASS_FLOOR).then(|| {
            direct
                .into_iter()
                .map(|(u, v, w)| (u, v, w / mass))
                .collect()
        });

        Ok(Self {
            basis: *basis,
            grid: grid.to_vec(),
            grid_weights,
            ate_nodes,
            direct,
            mean_y0: marginal.mean,
        })
    }

    fn check_model(&self, model: &SeriesModel) -> Result<()> {
        if model.basis.map_y0 != self.basis.map_y0 || model.basis.map_x != self.basis.map_x {
            return Err(HteError::InvalidArgument(
                "model was fitted on different coordinate maps".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn curve(&self, model: &SeriesModel) -> Result<HteCurve> {
        self.check_model(model)?;
        let e_y1 = self
            .grid
            .iter()
            .zip(&self.grid_weights)
            .map(|(&y0, w)| {
                w.as_ref()
                    .map(|w| integrate_phi(model, self.basis.map_y0.forward(y0), w))
            })
            .collect();
        Ok(HteCurve::from_values(self.grid.clone(), e_y1))
    }

    /// `∫ Ê[y1 | y0] p(y0) dy0 - E[y0]` with the known marginal; nodes whose
    /// conditional density is unsupported are dropped and the remaining
    /// marginal weights renormalized. Returns the estimate and the number of
    /// dropped nodes.
    pub fn ate_from_curve_detailed(&self, model: &SeriesModel) -> Result<(f64, usize)> {
        self.check_model(model)?;
        let mut total = NeumaierSum::default();
        let mut kept = NeumaierSum::default();
        let mut acc = NeumaierSum::default();
        let mut dropped = 0;
        for (u, w, cw) in &self.ate_nodes {
            total.add(*w);
            match cw {
                Some(cw) => {
                    kept.add(*w);
                    acc.add(w * integrate_phi(model, *u, cw));
                }
                None => dropped += 1,
            }
        }
        let kept = kept.value();
        if kept < MIN_RETAINED_MASS * total.value() {
            return Err(HteError::InsufficientData(format!(
                "only {:.4} of the y0 marginal mass has supported conditional densities",
                kept / total.value()
            )));
        }
        Ok((acc.value() / kept - self.mean_y0, dropped))
    }

    pub fn ate_from_curve(&self, model: &SeriesModel) -> Result<f64> {
        self.ate_from_curve_detailed(model).map(|(v, _)| v)
    }

    /// `∫∫ φ̂ p̂(y0, x) - E[y0]` over `[-1, 1]²` with the renormalized plug-in joint.
    pub fn ate_direct(&self, model: &SeriesModel) -> Result<f64> {
        self.check_model(model)?;
        let weights = self
            .direct
            .as_ref()
            .ok_or_else(|| HteError::InsufficientData("plug-in joint density has no mass".into()))?;
        let mut acc = NeumaierSum::default();
        for &(u, v, w) in weights {
            acc.add(w * model.phi_transformed(u, v));
        }
        Ok(acc.value() - self.mean_y0)
    }
}

/// `Ê[y1 | y0] = ∫ φ̂(y0, x) p̂(x | y0) dx` at one original-scale `y0`.
pub fn e_y1_given_y0(
    model: &SeriesModel,
    densities: &dyn DensitySource,
    marginal: &KnownMarginal,
    y0: f64,
    n_quad: usize,
) -> Result<f64> {
    if n_quad < MIN_QUAD {
        return Err(HteError::InvalidArgument(format!(
            "quadrature needs at least {MIN_QUAD} nodes, got {n_quad}"
        )));
    }
    let (lo, hi) = marginal.support();
    if !(y0 >= lo && y0 <= hi) {
        return Err(HteError::OutOfSupport(y0));
    }
    let rule = gauss_legendre(n_quad)?;
    let nodes: Vec<(f64, f64)> = rule.iter().collect();
    let u = model.basis.map_y0.forward(y0);
    let w = conditional_x_weights(u, &nodes, densities, &model.mechanism, marginal, &model.basis.map_y0)?;
    Ok(integrate_phi(model, u, &w))
}

pub fn hte_curve(
    model: &SeriesModel,
    densities: &dyn DensitySource,
    marginal: &KnownMarginal,
    grid: &GridSpec,
    n_quad: usize,
) -> Result<HteCurve> {
    let points = grid.points()?;
    Integrator::new(&model.basis, &model.mechanism, densities, marginal, &points, n_quad)?.curve(model)
}

pub fn ate_from_curve(
    model: &SeriesModel,
    densities: &dyn DensitySource,
    marginal: &KnownMarginal,
    n_quad: usize,
) -> Result<f64> {
    Integrator::new(&model.basis, &model.mechanism, densities, marginal, &[], n_quad)?.ate_from_curve(model)
}

pub fn ate_direct(
    model: &SeriesModel,
    densities: &dyn DensitySource,
    marginal: &KnownMarginal,
    n_quad: usize,
) -> Result<f64> {
    Integrator::new(&model.basis, &model.mechanism, densities, marginal, &[], n_quad)?.ate_direct(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::project;
    use crate::dgp::{known_marginal, simulate, true_ate, true_e_y1_given_y0, true_phi, DgpConfig};
    use crate::series::{fit_series, prepare_stage_two, DensityMode, SeriesSettings};
    use approx::assert_abs_diff_eq;

    fn prepared(mode_oracle: bool) -> (DgpConfig, crate::series::PreparedStage) {
        let cfg = DgpConfig::default();
        let ds = simulate(&cfg, 101).unwrap().observed;
        let mode = if mode_oracle { DensityMode::Oracle(cfg) } else { DensityMode::Kde };
        let settings = SeriesSettings {
            scale_outcome: false,
            ..SeriesSettings::default()
        };
        let prep = prepare_stage_two(&ds, &cfg.mechanism, &settings, mode).unwrap();
        (cfg, prep)
    }

    fn model_with(prep: &crate::series::PreparedStage, gamma: Vec<f64>) -> SeriesModel {
        let mut m = fit_series(prep, 25.0).unwrap();
        m.gamma = gamma;
        m
    }

    #[test]
    fn constant_phi_passes_through() {
        let (cfg, prep) = prepared(false);
        let marginal = known_marginal(&cfg);
        let mut g = vec![0.0; 16];
        g[0] = 0.73;
        let model = model_with(&prep, g);
        for y0 in [-1.0, -0.1, 0.5] {
            let e = e_y1_given_y0(&model, prep.densities.as_ref(), &marginal, y0, 64).unwrap();
            assert_abs_diff_eq!(e, 0.73, epsilon = 1e-10);
        }
        let direct = ate_direct(&model, prep.densities.as_ref(), &marginal, 64).unwrap();
        assert_abs_diff_eq!(direct, 0.73 - marginal.mean, epsilon = 1e-10);
        let curve_ate = ate_from_curve(&model, prep.densities.as_ref(), &marginal, 64).unwrap();
        assert_abs_diff_eq!(curve_ate, 0.73 - marginal.mean, epsilon = 1e-10);
    }

    #[test]
    fn oracle_point_value() {
        let (cfg, prep) = prepared(true);
        let marginal = known_marginal(&cfg);
        let g = project(&prep.basis, 8, |y0, x| true_phi(&cfg, y0, x)).unwrap();
        let model = model_with(&prep, g);
        let e = e_y1_given_y0(&model, prep.densities.as_ref(), &marginal, -0.1, 64).unwrap();
        assert!((e - 0.89).abs() < 0.02, "{e}");
        assert!((e - true_e_y1_given_y0(&cfg, -0.1)).abs() < 1e-6, "{e}");
        let e128 = e_y1_given_y0(&model, prep.densities.as_ref(), &marginal, -0.1, 128).unwrap();
        assert!((e - e128).abs() < 1e-6);

        let ate = ate_from_curve(&model, prep.densities.as_ref(), &marginal, 64).unwrap();
        assert!((ate - 0.9).abs() < 0.01, "{ate}");
        let direct = ate_direct(&model, prep.densities.as_ref(), &marginal, 64).unwrap();
        assert!((direct - true_ate(&cfg)).abs() < 0.01, "{direct}");
    }

    #[test]
    fn curve_identity_and_monotone_grid() {
        let (cfg, prep) = prepared(false);
        let marginal = known_marginal(&cfg);
        let model = fit_series(&prep, 25.0).unwrap();
        let spec = GridSpec::central(&marginal, 0.98, 21).unwrap();
        let curve = hte_curve(&model, prep.densities.as_ref(), &marginal, &spec, 64).unwrap();
        assert!(curve.grid.windows(2).all(|w| w[0] < w[1]));
        for i in 0..curve.grid.len() {
            if let (Some(e), Some(h)) = (curve.e_y1[i], curve.hte[i]) {
                assert_eq!(h, e - curve.grid[i]);
            }
        }
        let mut buf = Vec::new();
        curve.clone().with_truth(|y| true_e_y1_given_y0(&cfg, y)).write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("y0,e_y1,hte,truth\n"));
    }

    #[test]
    fn out_of_support_errors() {
        let (cfg, prep) = prepared(false);
        let marginal = known_marginal(&cfg);
        let model = fit_series(&prep, 25.0).unwrap();
        assert!(matches!(
            e_y1_given_y0(&model, prep.densities.as_ref(), &marginal, 50.0, 64),
            Err(HteError::OutOfSupport(_))
        ));
        assert!(e_y1_given_y0(&model, prep.densities.as_ref(), &marginal, 0.0, 8).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec { lo: 1.0, hi: 0.0, count: 5 }.points().is_err());
        assert!(GridSpec { lo: 0.0, hi: 1.0, count: 1 }.points().is_err());
        let p = GridSpec { lo: 0.0, hi: 1.0, count: 3 }.points().unwrap();
        assert_eq!(p, vec![0.0, 0.5, 1.0]);
    }
}
