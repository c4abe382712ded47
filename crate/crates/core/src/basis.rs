//! Legendre basis on `[-1, 1]`, affine variable maps, tensor products and the
//! H¹ penalty matrix used to bound the series coefficients.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{HteError, Result};
use crate::numerics::{gauss_legendre, SpdMatrix};

/// Default widening of the observed range before mapping onto `[-1, 1]`.
pub const DEFAULT_MARGIN_FRACTION: f64 = 0.01;

/// Transformed coordinates beyond this magnitude are flagged as extrapolation.
pub const EXTRAPOLATION_LIMIT: f64 = 1.5;

/// Legendre polynomial `q_j(v)` via the Bonnet recurrence.
pub fn legendre(j: usize, v: f64) -> f64 {
    match j {
        0 => 1.0,
        1 => v,
        2 => 0.5 * (3.0 * v * v - 1.0),
        3 => 0.5 * (5.0 * v * v * v - 3.0 * v),
        _ => {
            let mut prev = 0.5 * (3.0 * v * v - 1.0);
            let mut cur = 0.5 * (5.0 * v * v * v - 3.0 * v);
            for n in 3..j {
                let nf = n as f64;
                let next = ((2.0 * nf + 1.0) * v * cur - nf * prev) / (nf + 1.0);
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// `q_j'(v)` from `q'_{n+1} = q'_{n-1} + (2n + 1) q_n`, regular at `v = ±1`.
pub fn legendre_derivative(j: usize, v: f64) -> f64 {
    if j == 0 {
        return 0.0;
    }
    let mut d_prev = 0.0; // q'_0
    let mut d_cur = 1.0; // q'_1
    for n in 1..j {
        let next = d_prev + (2.0 * n as f64 + 1.0) * legendre(n, v);
        d_prev = d_cur;
        d_cur = next;
    }
    d_cur
}

/// `forward(v) = scale * v + shift`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub scale: f64,
    pub shift: f64,
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap {
        scale: 1.0,
        shift: 0.0,
    };

    pub fn new(scale: f64, shift: f64) -> Result<Self> {
        if scale == 0.0 || !scale.is_finite() || !shift.is_finite() {
            return Err(HteError::InvalidArgument(format!(
                "affine map needs a finite nonzero scale, got scale={scale} shift={shift}"
            )));
        }
        Ok(Self { scale, shift })
    }

    /// Map sending `[lo, hi]` onto `[-1, 1]`.
    pub fn from_interval(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) {
            return Err(HteError::DegenerateRange(lo));
        }
        Self::new(2.0 / (hi - lo), -(hi + lo) / (hi - lo))
    }

    pub fn forward(&self, v: f64) -> f64 {
        self.scale * v + self.shift
    }

    pub fn inverse(&self, t: f64) -> f64 {
        (t - self.shift) / self.scale
    }

    /// Original-scale interval mapped onto `[-1, 1]`.
    pub fn original_interval(&self) -> (f64, f64) {
        let a = self.inverse(-1.0);
        let b = self.inverse(1.0);
        (a.min(b), a.max(b))
    }
}

/// Fits the map taking `[min - m, max + m]` onto `[-1, 1]`, `m = margin_fraction * (max - min)`.
pub fn fit_affine(samples: &[f64], margin_fraction: f64) -> Result<AffineMap> {
    if samples.len() < 2 {
        return Err(HteError::InvalidArgument(
            "need at least two samples to fit an affine map".into(),
        ));
    }
    if !(margin_fraction >= 0.0) || !margin_fraction.is_finite() {
        return Err(HteError::InvalidArgument(format!(
            "margin fraction must be nonnegative, got {margin_fraction}"
        )));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &s in samples {
        if !s.is_finite() {
            return Err(HteError::InvalidArgument("non-finite sample".into()));
        }
        lo = lo.min(s);
        hi = hi.max(s);
    }
    if hi == lo {
        return Err(HteError::DegenerateRange(lo));
    }
    let m = margin_fraction * (hi - lo);
    AffineMap::from_interval(lo - m, hi + m)
}

/// Tensor product `q_{j1}(y0) q_{j2}(x)`, `0 <= j1, j2 <= order`, indexed
/// row-major: `index = j1 * (order + 1) + j2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorBasis {
    pub order: usize,
    pub map_y0: AffineMap,
    pub map_x: AffineMap,
}

/// Value of a tensor expansion; `extrapolated` is set when a transformed
/// coordinate falls outside `[-1.5, 1.5]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorValue {
    pub value: f64,
    pub extrapolated: bool,
}

impl TensorBasis {
    pub fn new(order: usize, map_y0: AffineMap, map_x: AffineMap) -> Self {
        Self {
            order,
            map_y0,
            map_x,
        }
    }

    pub fn side(&self) -> usize {
        self.order + 1
    }

    pub fn len(&self) -> usize {
        self.side() * self.side()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, j1: usize, j2: usize) -> usize {
        j1 * self.side() + j2
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> {
        let side = self.side();
        (0..side).flat_map(move |j1| (0..side).map(move |j2| (j1, j2)))
    }

    /// Evaluates the expansion at transformed coordinates `(u, v)`.
    pub fn eval_transformed(&self, coeffs: &[f64], u: f64, v: f64) -> f64 {
        let side = self.side();
        let qu: Vec<f64> = (0..side).map(|j| legendre(j, u)).collect();
        let qv: Vec<f64> = (0..side).map(|j| legendre(j, v)).collect();
        let mut acc = 0.0;
        for j1 in 0..side {
            let mut row = 0.0;
            for j2 in 0..side {
                row += coeffs[j1 * side + j2] * qv[j2];
            }
            acc += qu[j1] * row;
        }
        acc
    }

    pub fn eval(&self, coeffs: &[f64], y0_orig: f64, x_orig: f64) -> Result<TensorValue> {
        tensor_eval(self, coeffs, y0_orig, x_orig)
    }
}

pub fn tensor_eval(
    basis: &TensorBasis,
    coeffs: &[f64],
    y0_orig: f64,
    x_orig: f64,
) -> Result<TensorValue> {
    if coeffs.len() != basis.len() {
        return Err(HteError::InvalidArgument(format!(
            "expected {} coefficients, got {}",
            basis.len(),
            coeffs.len()
        )));
    }
    let u = basis.map_y0.forward(y0_orig);
    let v = basis.map_x.forward(x_orig);
    Ok(TensorValue {
        value: basis.eval_transformed(coeffs, u, v),
        extrapolated: u.abs() > EXTRAPOLATION_LIMIT || v.abs() > EXTRAPOLATION_LIMIT,
    })
}

/// Coefficients of the L² projection of `f(y0_orig, x_orig)` onto the basis,
/// using an `n`-point tensor Gauss–Legendre rule on `[-1, 1]²`.
pub fn project<F>(basis: &TensorBasis, n: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(f64, f64) -> f64,
{
    let rule = gauss_legendre(n)?;
    let side = basis.side();
    let mut coeffs = vec![0.0; basis.len()];
    for (u, wu) in rule.iter() {
        let y0 = basis.map_y0.inverse(u);
        for (v, wv) in rule.iter() {
            let fx = f(y0, basis.map_x.inverse(v)) * wu * wv;
            for j1 in 0..side {
                let a = legendre(j1, u);
                for j2 in 0..side {
                    coeffs[j1 * side + j2] += fx * a * legendre(j2, v);
                }
            }
        }
    }
    for (j1, j2) in basis.pairs() {
        let norm = (2.0 * j1 as f64 + 1.0) * (2.0 * j2 as f64 + 1.0) / 4.0;
        coeffs[basis.index(j1, j2)] *= norm;
    }
    Ok(coeffs)
}

/// H¹([-1,1]²) Gram matrix of the tensor basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SobolevMatrix {
    order: usize,
    matrix: SpdMatrix,
}

impl SobolevMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn spd(&self) -> &SpdMatrix {
        &self.matrix
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        self.matrix.matrix()
    }

    pub fn norm(&self, coeffs: &[f64]) -> f64 {
        self.matrix.quadratic_form(coeffs)
    }
}

/// Entry `((j1,j2),(l1,l2))` is `∫∫ f g + f_u g_u + f_v g_v` for
/// `f = q_{j1}(u) q_{j2}(v)` and `g = q_{l1}(u) q_{l2}(v)`.
pub fn sobolev_matrix(order: usize, quad_order: usize) -> Result<SobolevMatrix> {
    if quad_order < order + 1 {
        return Err(HteError::InvalidArgument(format!(
            "quadrature order {quad_order} too low for basis order {order}"
        )));
    }
    let rule = gauss_legendre(quad_order)?;
    let side = order + 1;
    let nodes: Vec<(f64, f64)> = rule.iter().collect();
    let values: Vec<Vec<f64>> = (0..side)
        .map(|j| nodes.iter().map(|&(t, _)| legendre(j, t)).collect())
        .collect();
    let derivs: Vec<Vec<f64>> = (0..side)
        .map(|j| nodes.iter().map(|&(t, _)| legendre_derivative(j, t)).collect())
        .collect();

    let dim = side * side;
    let mut m = DMatrix::zeros(dim, dim);
    for a in 0..dim {
        let (j1, j2) = (a / side, a % side);
        for b in a..dim {
            let (l1, l2) = (b / side, b % side);
            let mut acc = 0.0;
            for (iu, &(_, wu)) in nodes.iter().enumerate() {
                let f_u = values[j1][iu];
                let g_u = values[l1][iu];
                let df_u = derivs[j1][iu];
                let dg_u = derivs[l1][iu];
                for (iv, &(_, wv)) in nodes.iter().enumerate() {
                    let f_v = values[j2][iv];
                    let g_v = values[l2][iv];
                    let f = f_u * f_v;
                    let g = g_u * g_v;
                    let fu = df_u * f_v;
                    let gu = dg_u * g_v;
                    let fv = f_u * derivs[j2][iv];
                    let gv = g_u * derivs[l2][iv];
                    acc += wu * wv * (f * g + fu * gu + fv * gv);
                }
            }
            m[(a, b)] = acc;
            m[(b, a)] = acc;
        }
    }
    let matrix = SpdMatrix::new(m).map_err(|e| {
        HteError::Internal(format!("Sobolev matrix not positive definite: {e}"))
    })?;
    Ok(SobolevMatrix { order, matrix })
}

/// L² Gram matrix of the tensor basis (diagonal, entries `4 / ((2j1+1)(2j2+1))`).
pub fn l2_gram(order: usize) -> DMatrix<f64> {
    let side = order + 1;
    DMatrix::from_fn(side * side, side * side, |a, b| {
        if a == b {
            let (j1, j2) = (a / side, a % side);
            4.0 / ((2 * j1 + 1) as f64 * (2 * j2 + 1) as f64)
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn legendre_values() {
        assert_abs_diff_eq!(legendre(2, 0.5), -0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(legendre(3, 1.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(legendre(1, -0.3), -0.3, epsilon = 1e-15);
        for j in 0..12 {
            assert_abs_diff_eq!(legendre(j, 1.0), 1.0, epsilon = 1e-13);
        }
        // q_4(v) = (35v^4 - 30v^2 + 3)/8
        let v: f64 = 0.37;
        assert_abs_diff_eq!(
            legendre(4, v),
            (35.0 * v.powi(4) - 30.0 * v * v + 3.0) / 8.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn legendre_derivative_values() {
        assert_eq!(legendre_derivative(0, 0.3), 0.0);
        assert_abs_diff_eq!(legendre_derivative(2, 0.5), 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(legendre_derivative(3, 0.0), -1.5, epsilon = 1e-15);
    }

    #[test]
    fn derivative_matches_central_differences() {
        let h = 1e-6;
        for j in 0..8 {
            for k in 0..=20 {
                let v = -0.99 + 0.099 * k as f64;
                let fd = (legendre(j, v + h) - legendre(j, v - h)) / (2.0 * h);
                assert!((legendre_derivative(j, v) - fd).abs() < 1e-6, "j={j} v={v}");
            }
        }
    }

    #[test]
    fn orthogonality() {
        let rule = gauss_legendre(8).unwrap();
        for i in 0..=3 {
            for j in 0..=3 {
                let got = rule.integrate(|t| legendre(i, t) * legendre(j, t));
                let want = if i == j { 2.0 / (2 * i + 1) as f64 } else { 0.0 };
                assert_abs_diff_eq!(got, want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn affine_examples() {
        let m = fit_affine(&[-1.0, 1.0], 0.0).unwrap();
        assert_abs_diff_eq!(m.scale, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.shift, 0.0, epsilon = 1e-15);

        let m = fit_affine(&[0.0, 10.0], 0.0).unwrap();
        assert_abs_diff_eq!(m.forward(5.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.forward(10.0), 1.0, epsilon = 1e-15);

        let m = fit_affine(&[0.0, 10.0], 0.05).unwrap();
        assert_abs_diff_eq!(m.forward(-0.5), -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m.forward(10.5), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn affine_errors() {
        assert!(matches!(
            fit_affine(&[2.0, 2.0, 2.0], 0.01),
            Err(HteError::DegenerateRange(_))
        ));
        assert!(fit_affine(&[1.0], 0.01).is_err());
        assert!(fit_affine(&[0.0, 1.0], -0.1).is_err());
        assert!(AffineMap::new(0.0, 1.0).is_err());
    }

    #[test]
    fn sobolev_constant_basis() {
        let s = sobolev_matrix(0, 1).unwrap();
        assert_eq!(s.matrix().nrows(), 1);
        assert_abs_diff_eq!(s.matrix()[(0, 0)], 4.0, epsilon = 1e-14);
    }

    #[test]
    fn sobolev_structure() {
        let j = 3;
        let s = sobolev_matrix(j, 8).unwrap();
        let basis = TensorBasis::new(j, AffineMap::IDENTITY, AffineMap::IDENTITY);
        // off-diagonal between (0,0) and (1,0) vanishes by parity
        assert_abs_diff_eq!(
            s.matrix()[(basis.index(0, 0), basis.index(1, 0))],
            0.0,
            epsilon = 1e-14
        );
        // diagonal minus derivative terms equals L² normalization
        let rule = gauss_legendre(8).unwrap();
        let d = |a: usize| rule.integrate(|t| legendre_derivative(a, t).powi(2));
        for (j1, j2) in basis.pairs() {
            let l2 = (2.0 / (2 * j1 + 1) as f64) * (2.0 / (2 * j2 + 1) as f64);
            let deriv = d(j1) * 2.0 / (2 * j2 + 1) as f64 + d(j2) * 2.0 / (2 * j1 + 1) as f64;
            let k = basis.index(j1, j2);
            assert_abs_diff_eq!(s.matrix()[(k, k)] - deriv, l2, epsilon = 1e-12);
        }
        // Λ - G is positive semidefinite: adding a tiny ridge must factorize
        let diff = s.matrix() - l2_gram(j) + DMatrix::identity(16, 16) * 1e-10;
        assert!(diff.cholesky().is_some());
        // more nodes do not change an exact rule
        let s2 = sobolev_matrix(j, 20).unwrap();
        assert!((s.matrix() - s2.matrix()).amax() < 1e-11);
    }

    #[test]
    fn sobolev_low_quadrature_rejected() {
        assert!(sobolev_matrix(3, 3).is_err());
    }

    #[test]
    fn tensor_eval_examples() {
        let basis = TensorBasis::new(3, AffineMap::IDENTITY, AffineMap::IDENTITY);
        let mut e00 = vec![0.0; 16];
        e00[0] = 1.0;
        for &(a, b) in &[(0.1, 0.2), (-0.9, 0.7), (0.0, 0.0)] {
            assert_eq!(basis.eval(&e00, a, b).unwrap().value, 1.0);
        }
        let mut e10 = vec![0.0; 16];
        e10[basis.index(1, 0)] = 1.0;
        assert_abs_diff_eq!(basis.eval(&e10, 0.42, -0.3).unwrap().value, 0.42, epsilon = 1e-15);

        assert!(basis.eval(&e00, 1.6, 0.0).unwrap().extrapolated);
        assert!(!basis.eval(&e00, 1.4, -1.4).unwrap().extrapolated);
        assert!(basis.eval(&[1.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn tensor_eval_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map_y0 = AffineMap::new(0.5, 0.1).unwrap();
        let map_x = AffineMap::new(0.3, -0.2).unwrap();
        let basis = TensorBasis::new(3, map_y0, map_x);
        for _ in 0..100 {
            let g: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y0 = rng.gen_range(-2.0..2.0);
            let x = rng.gen_range(-3.0..3.0);
            let (u, v) = (0.5 * y0 + 0.1, 0.3 * x - 0.2);
            let mut want = 0.0;
            for j1 in 0..4 {
                for j2 in 0..4 {
                    want += g[j1 * 4 + j2] * legendre(j1, u) * legendre(j2, v);
                }
            }
            assert_abs_diff_eq!(basis.eval(&g, y0, x).unwrap().value, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_recovers_span_members() {
        let basis = TensorBasis::new(
            3,
            AffineMap::new(0.5, 0.05).unwrap(),
            AffineMap::new(0.25, 0.0).unwrap(),
        );
        let f = |y0: f64, x: f64| 1.0 + 2.0 * y0 - 0.3 * x * x + 0.1 * y0 * x;
        let g = project(&basis, 8, f).unwrap();
        for &(y0, x) in &[(0.0, 0.0), (1.0, -2.0), (-1.5, 3.0)] {
            assert_abs_diff_eq!(basis.eval(&g, y0, x).unwrap().value, f(y0, x), epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn affine_round_trip(lo in -1e3f64..1e3, width in 1e-3f64..1e3, margin in 0.0f64..0.5, t in -5.0f64..5.0) {
            let m = fit_affine(&[lo, lo + width], margin).unwrap();
            let back = m.forward(m.inverse(t));
            prop_assert!((back - t).abs() <= 1e-12 * (1.0 + t.abs()) * (1.0 + lo.abs() / width));
            prop_assert!(m.forward(lo) >= -1.0 - 1e-12);
            prop_assert!(m.forward(lo + width) <= 1.0 + 1e-12);
            if margin > 0.0 {
                prop_assert!(m.forward(lo) > -1.0);
                prop_assert!(m.forward(lo + width) < 1.0);
            }
        }
    }
}
