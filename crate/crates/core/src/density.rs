//! Gaussian kernel density estimates on the transformed `[-1, 1]` scale and
//! the reweighting quantities built from them.
//!
//! Support points are sorted at construction and every evaluation sums them
//! in that order with compensated summation, so results do not depend on the
//! order in which records arrive.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::basis::{legendre, AffineMap};
use crate::dgp::{DgpConfig, KnownMarginal};
use crate::error::{HteError, Result};
use crate::mechanism::{logistic, propensity, reexpress, Frame, MechanismParams};
use crate::numerics::{gauss_hermite, NeumaierSum, QuadratureRule};
use crate::series::TCache;

/// Treated-marginal values below this are treated as unsupported.
pub const DENSITY_FLOOR: f64 = 1e-10;

/// Known-marginal values below this are out of support.
pub const MARGINAL_FLOOR: f64 = 1e-12;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gaussian_kernel(t: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * t * t).exp()
}

/// `h = sd * n^(-1 / (total_dims + 4))` with the `n - 1` sample standard deviation.
pub fn scott_bandwidth(samples: &[f64], total_dims: usize) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(HteError::DegenerateSample(format!(
            "bandwidth needs at least two samples, got {n}"
        )));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(HteError::DegenerateSample(
            "samples have zero variance".into(),
        ));
    }
    Ok(sd * (n as f64).powf(-1.0 / (total_dims as f64 + 4.0)))
}

/// `h_y0`, `h_x` for the control joint density; `w_x` for the treated marginal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    pub h_y0: f64,
    pub h_x: f64,
    pub w_x: f64,
}

/// Product-Gaussian estimate of `p(y0, x | z = 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointKde {
    /// `(u, v)` = transformed `(y0, x)`, sorted.
    points: Vec<(f64, f64)>,
    h_y0: f64,
    h_x: f64,
}

impl JointKde {
    pub fn with_bandwidths(points: &[(f64, f64)], h_y0: f64, h_x: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(HteError::DegenerateSample("no support points".into()));
        }
        if !(h_y0 > 0.0 && h_x > 0.0) {
            return Err(HteError::InvalidArgument("bandwidths must be positive".into()));
        }
        let mut points = points.to_vec();
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        Ok(Self { points, h_y0, h_x })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn h_y0(&self) -> f64 {
        self.h_y0
    }

    pub fn h_x(&self) -> f64 {
        self.h_x
    }

    pub fn eval(&self, u: f64, v: f64) -> f64 {
        let mut acc = NeumaierSum::default();
        for &(ui, vi) in &self.points {
            let a = (u - ui) / self.h_y0;
            let b = (v - vi) / self.h_x;
            acc.add((-0.5 * (a * a + b * b)).exp());
        }
        acc.value() / (2.0 * PI * self.h_y0 * self.h_x * self.points.len() as f64)
    }

    /// Marginal estimate of the control `x` density with bandwidth `h_x`.
    pub fn eval_x_marginal(&self, v: f64) -> f64 {
        let mut acc = NeumaierSum::default();
        for &(_, vi) in &self.points {
            acc.add(gaussian_kernel((v - vi) / self.h_x));
        }
        acc.value() / (self.h_x * self.points.len() as f64)
    }
}

/// Fits the control joint estimate with Scott bandwidths (`total_dims = 2`).
/// `controls` are `(u, v)` = transformed `(y0, x)`.
pub fn kde_joint_control(controls: &[(f64, f64)]) -> Result<JointKde> {
    if controls.len() < 2 {
        return Err(HteError::DegenerateSample(format!(
            "control density needs at least two records, got {}",
            controls.len()
        )));
    }
    let us: Vec<f64> = controls.iter().map(|p| p.0).collect();
    let vs: Vec<f64> = controls.iter().map(|p| p.1).collect();
    let h_y0 = scott_bandwidth(&us, 2)?;
    let h_x = scott_bandwidth(&vs, 2)?;
    JointKde::with_bandwidths(controls, h_y0, h_x)
}

/// One-dimensional Gaussian estimate, used for `p(x | z = 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalKde {
    points: Vec<f64>,
    bandwidth: f64,
}

impl MarginalKde {
    pub fn with_bandwidth(points: &[f64], bandwidth: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(HteError::DegenerateSample("no support points".into()));
        }
        if !(bandwidth > 0.0) {
            return Err(HteError::InvalidArgument("bandwidth must be positive".into()));
        }
        let mut points = points.to_vec();
        points.sort_by(f64::total_cmp);
        Ok(Self { points, bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn eval(&self, v: f64) -> f64 {
        let mut acc = NeumaierSum::default();
        for &vi in &self.points {
            acc.add(gaussian_kernel((v - vi) / self.bandwidth));
        }
        acc.value() / (self.bandwidth * self.points.len() as f64)
    }
}

/// Fits the treated `x` marginal with a Scott bandwidth (`total_dims = 1`).
pub fn kde_marginal_treated(treated_x: &[f64]) -> Result<MarginalKde> {
    if treated_x.len() < 2 {
        return Err(HteError::DegenerateSample(format!(
            "treated density needs at least two records, got {}",
            treated_x.len()
        )));
    }
    let w = scott_bandwidth(treated_x, 1)?;
    MarginalKde::with_bandwidth(treated_x, w)
}

/// Densities on the transformed scale consumed by the series and integration stages.
pub trait DensitySource: Send + Sync {
    /// `p(u, v | z = 0)`.
    fn joint_control(&self, u: f64, v: f64) -> f64;
    /// `p(v | z = 1)`.
    fn treated_x(&self, v: f64) -> f64;
    /// `p(z = 0)`.
    fn control_share(&self) -> f64;
    /// `s_{j}(v) = ∫ q_j(u) exp(k_{y0}(u)) p(u, v | z = 0) du` for `j = 0..=order`.
    fn s_values(&self, v: f64) -> Result<Vec<f64>>;
    /// Kernel bandwidths when the source is estimated.
    fn bandwidths(&self) -> Option<Bandwidths> {
        None
    }
}

/// Plug-in densities from the observed sample.
#[derive(Debug, Clone)]
pub struct KdeDensities {
    pub joint: JointKde,
    pub treated: MarginalKde,
    pub n0: usize,
    pub n1: usize,
    pub t_cache: TCache,
}

impl KdeDensities {
    /// `controls` are transformed `(u, v)`; `treated_x` transformed `v`.
    pub fn fit(
        controls: &[(f64, f64)],
        treated_x: &[f64],
        mech: &MechanismParams,
        order: usize,
        n_hermite: usize,
    ) -> Result<Self> {
        let joint = kde_joint_control(controls)?;
        let treated = kde_marginal_treated(treated_x)?;
        let t_cache = TCache::build(&joint, mech, order, n_hermite)?;
        Ok(Self {
            joint,
            treated,
            n0: controls.len(),
            n1: treated_x.len(),
            t_cache,
        })
    }
}

impl DensitySource for KdeDensities {
    fn joint_control(&self, u: f64, v: f64) -> f64 {
        self.joint.eval(u, v)
    }

    fn treated_x(&self, v: f64) -> f64 {
        self.treated.eval(v)
    }

    fn control_share(&self) -> f64 {
        self.n0 as f64 / (self.n0 + self.n1) as f64
    }

    fn s_values(&self, v: f64) -> Result<Vec<f64>> {
        Ok(self.t_cache.s_values(&self.joint, v))
    }

    fn bandwidths(&self) -> Option<Bandwidths> {
        Some(Bandwidths {
            h_y0: self.joint.h_y0(),
            h_x: self.joint.h_x(),
            w_x: self.treated.bandwidth(),
        })
    }
}

/// Closed-form densities of the Gaussian design, expressed on the
/// transformed scale of the supplied maps. Used for oracle checks.
#[derive(Debug, Clone)]
pub struct OracleDensities {
    config: DgpConfig,
    map_y0: AffineMap,
    map_x: AffineMap,
    mech_transformed: MechanismParams,
    order: usize,
    p_control: f64,
    rule: QuadratureRule,
}

impl OracleDensities {
    pub fn new(config: &DgpConfig, map_y0: AffineMap, map_x: AffineMap, order: usize) -> Result<Self> {
        let rule = gauss_hermite(64)?;
        let mech_transformed = reexpress(&config.mechanism, &map_y0, &map_x)?;
        let mut this = Self {
            config: *config,
            map_y0,
            map_x,
            mech_transformed,
            order,
            p_control: 0.0,
            rule,
        };
        let sqrt_pi = PI.sqrt();
        let p_control = this
            .rule
            .integrate(|s| this.control_prob_given_x(std::f64::consts::SQRT_2 * s))
            / sqrt_pi;
        this.p_control = p_control;
        Ok(this)
    }

    pub fn mechanism(&self) -> &MechanismParams {
        &self.mech_transformed
    }

    /// `E[f(y0) | x]` under the Gaussian `y0 | x`.
    fn cond_y0<F: Fn(f64) -> f64>(&self, x: f64, f: F) -> f64 {
        let mu = self.config.mu0(x);
        let scale = std::f64::consts::SQRT_2 * self.config.sigma0;
        self.rule.integrate(|t| f(mu + scale * t)) / PI.sqrt()
    }

    fn control_prob_given_x(&self, x: f64) -> f64 {
        let mech = self.config.mechanism;
        self.cond_y0(x, |y0| 1.0 - logistic(mech.index(y0, x)))
    }

    fn std_normal(x: f64) -> f64 {
        gaussian_kernel(x)
    }
}

impl DensitySource for OracleDensities {
    fn joint_control(&self, u: f64, v: f64) -> f64 {
        let y0 = self.map_y0.inverse(u);
        let x = self.map_x.inverse(v);
        let cfg = &self.config;
        let cond = gaussian_kernel((y0 - cfg.mu0(x)) / cfg.sigma0) / cfg.sigma0;
        let p0 = 1.0 - logistic(cfg.mechanism.index(y0, x));
        Self::std_normal(x) * cond * p0
            / self.p_control
            / (self.map_y0.scale * self.map_x.scale).abs()
    }

    fn treated_x(&self, v: f64) -> f64 {
        let x = self.map_x.inverse(v);
        let mech = self.config.mechanism;
        let p1 = self.cond_y0(x, |y0| logistic(mech.index(y0, x)));
        Self::std_normal(x) * p1 / (1.0 - self.p_control) / self.map_x.scale.abs()
    }

    fn control_share(&self) -> f64 {
        self.p_control
    }

    fn s_values(&self, v: f64) -> Result<Vec<f64>> {
        let x = self.map_x.inverse(v);
        let mech = self.config.mechanism;
        let mt = self.mech_transformed;
        let prefactor = Self::std_normal(x) / self.p_control / self.map_x.scale.abs();
        Ok((0..=self.order)
            .map(|j| {
                prefactor
                    * self.cond_y0(x, |y0| {
                        let u = self.map_y0.forward(y0);
                        legendre(j, u) * mt.outcome_term(u).exp() * (1.0 - logistic(mech.index(y0, x)))
                    })
            })
            .collect())
    }
}

/// `c(v) = exp(k0 + beta0 v) p(z = 0) / (p(v | z = 1) p(z = 1))`.
pub fn c_hat(v: f64, mech: &MechanismParams, densities: &dyn DensitySource) -> Result<f64> {
    debug_assert_eq!(mech.frame, Frame::Transformed);
    let treated = densities.treated_x(v);
    if !(treated >= DENSITY_FLOOR) {
        return Err(HteError::LowDensity { x: v, value: treated });
    }
    let share0 = densities.control_share();
    let share1 = 1.0 - share0;
    Ok(mech.covariate_term(v).exp() * share0 / (treated * share1))
}

/// Known marginal of `y0` on the transformed scale: `p(y0) / |scale|`.
pub fn transformed_marginal(marginal: &KnownMarginal, map_y0: &AffineMap, u: f64) -> f64 {
    marginal.density(map_y0.inverse(u)) / map_y0.scale.abs()
}

/// Unnormalized plug-in `p(v | u) = p(u, v | z = 0) p(z = 0) / (p(z = 0 | u, v) p(u))`.
pub fn p_x_given_y0(
    v: f64,
    u: f64,
    densities: &dyn DensitySource,
    mech: &MechanismParams,
    marginal: &KnownMarginal,
    map_y0: &AffineMap,
) -> Result<f64> {
    let p_y0 = transformed_marginal(marginal, map_y0, u);
    if !(p_y0 >= MARGINAL_FLOOR) {
        return Err(HteError::OutOfSupport(map_y0.inverse(u)));
    }
    let p_control = 1.0 - propensity(mech, u, v);
    Ok(densities.joint_control(u, v) * densities.control_share() / (p_control * p_y0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{known_marginal, simulate};
    use crate::numerics::gauss_legendre;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn scott_examples() {
        // samples with unit sd and n = 4096: ±c alternating, sd = c * sqrt(n/(n-1))
        let n = 4096usize;
        let c = ((n as f64 - 1.0) / n as f64).sqrt();
        let s: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { c } else { -c }).collect();
        assert_abs_diff_eq!(scott_bandwidth(&s, 2).unwrap(), 0.25, epsilon = 1e-12);
        let s2: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert_abs_diff_eq!(scott_bandwidth(&s2, 2).unwrap(), 0.5, epsilon = 1e-12);

        let n = 100_000usize;
        let c = ((n as f64 - 1.0) / n as f64).sqrt();
        let s: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { c } else { -c }).collect();
        assert_abs_diff_eq!(scott_bandwidth(&s, 1).unwrap(), 0.1, epsilon = 1e-12);

        assert!(matches!(scott_bandwidth(&[1.0, 1.0], 1), Err(HteError::DegenerateSample(_))));
        assert!(scott_bandwidth(&[1.0], 1).is_err());
    }

    #[test]
    fn joint_peak_and_decay() {
        let k = JointKde::with_bandwidths(&[(0.2, -0.1)], 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(k.eval(0.2, -0.1), 1.0 / (2.0 * PI), epsilon = 1e-15);
        assert!(k.eval(0.2, -0.1) > k.eval(3.0, 2.0));
    }

    #[test]
    fn marginal_peak_and_symmetry() {
        let k = MarginalKde::with_bandwidth(&[0.0], 1.0).unwrap();
        assert_abs_diff_eq!(k.eval(0.0), 1.0 / (2.0 * PI).sqrt(), epsilon = 1e-15);
        let k = kde_marginal_treated(&[-0.5, -0.2, 0.2, 0.5]).unwrap();
        for a in [0.1, 0.3, 0.77] {
            assert_abs_diff_eq!(k.eval(a), k.eval(-a), epsilon = 1e-12);
        }
    }

    fn sample_controls() -> Vec<(f64, f64)> {
        let ds = simulate(&DgpConfig { n: 400, ..DgpConfig::default() }, 2)
            .unwrap()
            .observed;
        ds.controls().map(|(x, y0)| (0.5 * y0, 0.3 * x)).collect()
    }

    #[test]
    fn unit_mass() {
        let controls = sample_controls();
        let joint = kde_joint_control(&controls).unwrap();
        let rule = gauss_legendre(200).unwrap();
        let mass = rule.integrate_interval(-3.0, 3.0, |u| {
            rule.integrate_interval(-3.0, 3.0, |v| joint.eval(u, v))
        });
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");

        let xs: Vec<f64> = controls.iter().map(|c| c.1).collect();
        let m = kde_marginal_treated(&xs).unwrap();
        let mass = rule.integrate_interval(-4.0, 4.0, |v| m.eval(v));
        assert!((mass - 1.0).abs() < 1e-3);
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let controls = sample_controls();
        let mut reversed = controls.clone();
        reversed.reverse();
        let a = kde_joint_control(&controls).unwrap();
        let b = JointKde::with_bandwidths(&reversed, a.h_y0(), a.h_x()).unwrap();
        for &(u, v) in &[(0.0, 0.0), (0.3, -0.2), (-0.7, 0.9)] {
            assert_eq!(a.eval(u, v).to_bits(), b.eval(u, v).to_bits());
        }
    }

    struct Flat {
        share: f64,
        treated: f64,
    }

    impl DensitySource for Flat {
        fn joint_control(&self, _: f64, _: f64) -> f64 {
            0.25
        }
        fn treated_x(&self, _: f64) -> f64 {
            self.treated
        }
        fn control_share(&self) -> f64 {
            self.share
        }
        fn s_values(&self, _: f64) -> Result<Vec<f64>> {
            Ok(vec![1.0])
        }
    }

    #[test]
    fn c_hat_cases() {
        let flat = Flat { share: 0.7, treated: 0.5 };
        let zero = MechanismParams::zero(Frame::Transformed);
        assert_abs_diff_eq!(c_hat(0.3, &zero, &flat).unwrap(), 0.7 / (0.5 * 0.3), epsilon = 1e-12);

        let m = MechanismParams::new(0.4, -1.0, 0.2, 0.1, Frame::Transformed);
        let mut doubled = m;
        doubled.k0 += 2f64.ln();
        for v in [-0.9, 0.0, 0.5] {
            let a = c_hat(v, &m, &flat).unwrap();
            let b = c_hat(v, &doubled, &flat).unwrap();
            assert!((b / a - 2.0).abs() < 1e-14);
        }
        let empty = Flat { share: 0.7, treated: 1e-12 };
        assert!(matches!(c_hat(0.0, &zero, &empty), Err(HteError::LowDensity { .. })));
    }

    #[test]
    fn p_x_given_y0_cancellation() {
        let flat = Flat { share: 0.5, treated: 0.5 };
        let zero = MechanismParams::zero(Frame::Transformed);
        let marginal = KnownMarginal { mean: 0.0, sd: 1.0 };
        let map = AffineMap::IDENTITY;
        let got = p_x_given_y0(0.1, 0.2, &flat, &zero, &marginal, &map).unwrap();
        assert_abs_diff_eq!(got, 0.25 / marginal.density(0.2), epsilon = 1e-14);
        assert!(matches!(
            p_x_given_y0(0.1, 40.0, &flat, &zero, &marginal, &map),
            Err(HteError::OutOfSupport(_))
        ));
    }

    #[test]
    fn oracle_densities_normalize() {
        let cfg = DgpConfig::default();
        let my = AffineMap::from_interval(-4.5, 4.5).unwrap();
        let mx = AffineMap::from_interval(-6.5, 6.5).unwrap();
        let o = OracleDensities::new(&cfg, my, mx, 3).unwrap();
        assert!((o.control_share() - 0.7).abs() < 0.03);
        let rule = gauss_legendre(160).unwrap();
        let mass = rule.integrate_interval(-1.0, 1.0, |u| {
            rule.integrate_interval(-1.0, 1.0, |v| o.joint_control(u, v))
        });
        assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
        let mass = rule.integrate_interval(-1.0, 1.0, |v| o.treated_x(v));
        assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");

        // s_j against direct quadrature of its definition
        let v = 0.1;
        let s = o.s_values(v).unwrap();
        for (j, sj) in s.iter().enumerate() {
            let direct = rule.integrate_interval(-1.0, 1.0, |u| {
                legendre(j, u) * o.mechanism().outcome_term(u).exp() * o.joint_control(u, v)
            });
            assert!((sj - direct).abs() < 1e-8 * (1.0 + direct.abs()), "j={j} {sj} {direct}");
        }
    }

    #[test]
    fn oracle_conditional_matches_gaussian() {
        let cfg = DgpConfig::default();
        let my = AffineMap::from_interval(-3.0, 3.0).unwrap();
        let mx = AffineMap::from_interval(-5.0, 5.0).unwrap();
        let o = OracleDensities::new(&cfg, my, mx, 3).unwrap();
        let marginal = known_marginal(&cfg);
        let y0 = 0.3;
        let u = my.forward(y0);
        let (m, var) = cfg.x_given_y0(y0);
        for x in [-1.0, -0.5, 0.0, 0.4] {
            let got = p_x_given_y0(mx.forward(x), u, &o, o.mechanism(), &marginal, &my).unwrap();
            let want = gaussian_kernel((x - m) / var.sqrt()) / var.sqrt() / mx.scale;
            assert!((got - want).abs() < 1e-8 * want.max(1.0), "{got} vs {want}");
        }
    }

    proptest! {
        #[test]
        fn kde_nonnegative(points in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..30),
                           u in -5.0f64..5.0, v in -5.0f64..5.0) {
            let k = JointKde::with_bandwidths(&points, 0.1, 0.2).unwrap();
            prop_assert!(k.eval(u, v) >= 0.0);
        }
    }
}
