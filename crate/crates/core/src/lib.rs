//! Semiparametric two-stage series estimation of heterogeneous treatment
//! effects `E[y1 - y0 | y0]` when treatment assignment depends on the
//! untreated outcome.
//!
//! Stage one fits a logistic assignment mechanism from the control group and
//! known moments of `(x, y0)`. Stage two approximates `E[y1 | y0, x]` by a
//! tensor Legendre series whose coefficients solve a least-squares problem
//! under an H¹ norm bound, with kernel density plug-ins standing in for the
//! unknown conditional expectations.

pub mod basis;
pub mod density;
pub mod dgp;
pub mod error;
pub mod harness;
pub mod hte;
pub mod mechanism;
pub mod numerics;
pub mod series;

pub use error::{HteError, Result};
