//! Deterministic numerical kernels: Gaussian quadrature rules, symmetric
//! positive-definite solves, a damped Newton root-finder and compensated
//! summation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HteError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureKind {
    GaussLegendre,
    GaussHermite,
}

/// Nodes in increasing order with matching positive weights.
///
/// Gauss–Legendre rules integrate over `[-1, 1]` with unit weight function;
/// Gauss–Hermite rules integrate against `exp(-t^2)` over the real line.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    kind: QuadratureKind,
}

impl QuadratureRule {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kind(&self) -> QuadratureKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }

    /// `Σ w_k f(t_k)`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        let mut acc = NeumaierSum::default();
        for (t, w) in self.iter() {
            acc.add(w * f(t));
        }
        acc.value()
    }

    /// Gauss–Legendre only: integral of `f` over `[lo, hi]`.
    pub fn integrate_interval<F: FnMut(f64) -> f64>(&self, lo: f64, hi: f64, mut f: F) -> f64 {
        debug_assert_eq!(self.kind, QuadratureKind::GaussLegendre);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        half * self.integrate(|t| f(mid + half * t))
    }

    /// Gauss–Legendre only: nodes and weights mapped onto `[lo, hi]`.
    pub fn mapped(&self, lo: f64, hi: f64) -> Vec<(f64, f64)> {
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        self.iter().map(|(t, w)| (mid + half * t, half * w)).collect()
    }
}

const NEWTON_NODE_ITERS: usize = 100;

/// Gauss–Legendre rule with `n` nodes, exact for polynomials of degree `2n - 1` on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Result<QuadratureRule> {
    if n == 0 {
        return Err(HteError::InvalidArgument(
            "Gauss-Legendre rule needs at least one node".into(),
        ));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut deriv = 0.0;
        for _ in 0..NEWTON_NODE_ITERS {
            let (p, pp) = legendre_with_derivative(n, z);
            deriv = pp;
            let step = p / pp;
            z -= step;
            if step.abs() <= 1e-16 {
                break;
            }
        }
        let (_, pp) = legendre_with_derivative(n, z);
        if pp.is_finite() {
            deriv = pp;
        }
        let w = 2.0 / ((1.0 - z * z) * deriv * deriv);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        kind: QuadratureKind::GaussLegendre,
    })
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p1 = 1.0;
    let mut p2 = 0.0;
    for j in 1..=n {
        let jf = j as f64;
        let p3 = p2;
        p2 = p1;
        p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
    }
    let pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
    (p1, pp)
}

/// Gauss–Hermite rule with `n` nodes for `∫ f(t) exp(-t²) dt`.
pub fn gauss_hermite(n: usize) -> Result<QuadratureRule> {
    if n == 0 {
        return Err(HteError::InvalidArgument(
            "Gauss-Hermite rule needs at least one node".into(),
        ));
    }
    // Orthonormal Hermite recurrence; roots found largest first.
    let pi_m4 = std::f64::consts::PI.powf(-0.25);
    let nf = n as f64;
    let m = n.div_ceil(2);
    let mut roots = vec![0.0; m];
    let mut ws = vec![0.0; m];
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * roots[0],
            3 => 1.91 * z - 0.91 * roots[1],
            _ => 2.0 * z - roots[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..NEWTON_NODE_ITERS {
            let (p, d) = hermite_orthonormal(n, z, pi_m4);
            pp = d;
            let step = p / d;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        let (_, d) = hermite_orthonormal(n, z, pi_m4);
        if d.is_finite() && d != 0.0 {
            pp = d;
        }
        roots[i] = z;
        ws[i] = 2.0 / (pp * pp);
    }
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
    for i in 0..m {
        pairs.push((roots[i], ws[i]));
        if !(n % 2 == 1 && i == m - 1) {
            pairs.push((-roots[i], ws[i]));
        }
    }
    if n % 2 == 1 {
        // middle root is exactly zero by symmetry
        if let Some(p) = pairs.iter_mut().min_by(|a, b| a.0.abs().total_cmp(&b.0.abs())) {
            p.0 = 0.0;
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nodes, weights) = pairs.into_iter().unzip();
    Ok(QuadratureRule {
        nodes,
        weights,
        kind: QuadratureKind::GaussHermite,
    })
}

fn hermite_orthonormal(n: usize, z: f64, pi_m4: f64) -> (f64, f64) {
    let mut p1 = pi_m4;
    let mut p2 = 0.0;
    for j in 1..=n {
        let jf = j as f64;
        let p3 = p2;
        p2 = p1;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, (2.0 * n as f64).sqrt() * p2)
}

/// Symmetric positive-definite matrix, validated at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    inner: DMatrix<f64>,
}

impl SpdMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.nrows() != matrix.ncols() {
            return Err(HteError::InvalidArgument(format!(
                "SPD matrix must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(HteError::SingularMatrix("non-finite entry".into()));
        }
        let scale = matrix.amax().max(1.0);
        let n = matrix.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-12 * scale {
                    return Err(HteError::InvalidArgument(format!(
                        "matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if matrix.clone().cholesky().is_none() {
            return Err(HteError::SingularMatrix(
                "Cholesky factorization failed".into(),
            ));
        }
        Ok(Self { inner: matrix })
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.inner
    }

    /// `vᵀ M v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let v = DVector::from_column_slice(v);
        v.dot(&(&self.inner * &v))
    }
}

/// Solves `M v = b` by Cholesky factorization. No ridge is added, so a
/// numerically indefinite `M` surfaces as [`HteError::SingularMatrix`].
pub fn solve_spd(m: &SpdMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != m.dim() {
        return Err(HteError::InvalidArgument(format!(
            "right-hand side has length {} but matrix is {}x{}",
            b.len(),
            m.dim(),
            m.dim()
        )));
    }
    let chol = m
        .inner
        .clone()
        .cholesky()
        .ok_or_else(|| HteError::SingularMatrix("Cholesky factorization failed".into()))?;
    let x = chol.solve(&DVector::from_column_slice(b));
    if x.iter().any(|v| !v.is_finite()) {
        return Err(HteError::SingularMatrix("non-finite solution".into()));
    }
    Ok(x.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 30,
        }
    }
}

pub type Jacobian<'a> = &'a dyn Fn(&[f64]) -> Result<DMatrix<f64>>;

/// Damped Newton iteration for `residual(θ) = 0` with sup-norm stopping rule.
///
/// Without an analytic `jacobian` the Jacobian is built by forward
/// differences with step `1e-6 (1 + |θ_j|)`. A step is halved (up to
/// `max_halvings` times) while it fails to decrease the residual norm.
pub fn newton_solve<R>(
    residual: R,
    jacobian: Option<Jacobian<'_>>,
    start: &[f64],
    opts: NewtonOptions,
) -> Result<Vec<f64>>
where
    R: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(opts.tol > 0.0) {
        return Err(HteError::InvalidArgument("tolerance must be positive".into()));
    }
    let p = start.len();
    let mut theta = start.to_vec();
    let mut r = residual(&theta)?;
    if r.len() != p {
        return Err(HteError::InvalidArgument(format!(
            "residual has {} components for {} unknowns",
            r.len(),
            p
        )));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(HteError::InvalidArgument(
            "residual not finite at the starting point".into(),
        ));
    }
    let mut norm = sup_norm(&r);

    for _ in 0..opts.max_iter {
        if norm <= opts.tol {
            return Ok(theta);
        }
        let jac = match jacobian {
            Some(j) => j(&theta)?,
            None => forward_difference_jacobian(&residual, &theta, &r)?,
        };
        let rhs = DVector::from_iterator(p, r.iter().map(|v| -v));
        let step = jac
            .lu()
            .solve(&rhs)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or_else(|| HteError::SingularMatrix("Newton Jacobian is singular".into()))?;

        let mut scale = 1.0;
        let mut accepted = None;
        let mut fallback = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = theta
                .iter()
                .zip(step.iter())
                .map(|(t, s)| t + scale * s)
                .collect();
            if let Ok(rt) = residual(&trial) {
                if rt.iter().all(|v| v.is_finite()) {
                    let nt = sup_norm(&rt);
                    if nt < norm {
                        accepted = Some((trial, rt, nt));
                        break;
                    }
                    fallback = Some((trial, rt, nt));
                }
            }
            scale *= 0.5;
        }
        match accepted.or(fallback) {
            Some((t, rt, nt)) => {
                theta = t;
                r = rt;
                norm = nt;
            }
            None => break,
        }
    }
    if norm <= opts.tol {
        return Ok(theta);
    }
    Err(HteError::NoConvergence {
        iterations: opts.max_iter,
        residual_norm: norm,
        last_iterate: theta,
    })
}

fn forward_difference_jacobian<R>(residual: &R, theta: &[f64], r0: &[f64]) -> Result<DMatrix<f64>>
where
    R: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let p = theta.len();
    let mut jac = DMatrix::zeros(r0.len(), p);
    let mut probe = theta.to_vec();
    for j in 0..p {
        let h = 1e-6 * (1.0 + theta[j].abs());
        probe[j] = theta[j] + h;
        let rj = residual(&probe)?;
        probe[j] = theta[j];
        for i in 0..r0.len() {
            jac[(i, j)] = (rj[i] - r0[i]) / h;
        }
    }
    Ok(jac)
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = NeumaierSum::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}
