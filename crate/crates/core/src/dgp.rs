//! Gaussian data-generating process with logistic nonignorable assignment,
//! seeded sampling, dataset CSV I/O, and closed-form truths used as oracles.
//!
//! The model is `x ~ N(0, 1)`, `(y0, y1) | x` bivariate normal with means
//! `mu0(x) = a0 + a1 x`, `mu1(x) = c0 + c1 x + c2 x²`, standard deviations
//! `sigma0`, `sigma1` and correlation `rho`; `z ~ Bernoulli(g(k0 + beta0 x +
//! beta1 y0 + beta2 y0²))`. Only `y1` is kept for treated units and only `y0`
//! for controls.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{HteError, Result};
use crate::mechanism::{propensity, Frame, MechanismParams};

/// Identifies the sampler so run metadata can pin it.
pub const RNG_DESCRIPTION: &str =
    "ChaCha8Rng (rand_chacha 0.3) seeded via seed_from_u64; normals by rand_distr StandardNormal (ziggurat)";

/// Half-width of the known-marginal support, in standard deviations.
pub const SUPPORT_SDS: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpConfig {
    pub sigma0: f64,
    pub sigma1: f64,
    pub rho: f64,
    /// `[a0, a1]` in `mu0(x) = a0 + a1 x`.
    pub mu0: [f64; 2],
    /// `[c0, c1, c2]` in `mu1(x) = c0 + c1 x + c2 x²`.
    pub mu1: [f64; 3],
    pub mechanism: MechanismParams,
    pub n: usize,
}

impl Default for DgpConfig {
    /// The simulation design: `sigma0 = 1/5`, `sigma1 = 1/2`, `rho = 1/2`,
    /// `mu0(x) = -3x/5 - 1/10`, `mu1(x) = -(x - 1)²/10 + 1`,
    /// `(k0, beta0, beta1, beta2) = (-3/2, -2, -2, 1)`, `N = 3000`.
    fn default() -> Self {
        Self {
            sigma0: 0.2,
            sigma1: 0.5,
            rho: 0.5,
            mu0: [-0.1, -0.6],
            mu1: [0.9, 0.2, -0.1],
            mechanism: MechanismParams::new(-1.5, -2.0, -2.0, 1.0, Frame::Original),
            n: 3000,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0) || !(self.sigma1 > 0.0) {
            return Err(HteError::InvalidArgument(
                "outcome standard deviations must be positive".into(),
            ));
        }
        if !(self.rho * self.rho < 1.0) {
            return Err(HteError::InvalidArgument(format!(
                "correlation must lie in (-1, 1), got {}",
                self.rho
            )));
        }
        if self.n == 0 {
            return Err(HteError::InvalidArgument("sample size must be positive".into()));
        }
        if self.mechanism.frame != Frame::Original || !self.mechanism.is_finite() {
            return Err(HteError::InvalidArgument(
                "mechanism truth must be finite and in the original frame".into(),
            ));
        }
        let finite = self.mu0.iter().chain(self.mu1.iter()).all(|v| v.is_finite());
        if !finite || !self.sigma0.is_finite() || !self.sigma1.is_finite() {
            return Err(HteError::InvalidArgument("non-finite DGP coefficient".into()));
        }
        Ok(())
    }

    pub fn mu0(&self, x: f64) -> f64 {
        self.mu0[0] + self.mu0[1] * x
    }

    pub fn mu1(&self, x: f64) -> f64 {
        self.mu1[0] + self.mu1[1] * x + self.mu1[2] * x * x
    }

    /// Regression slope of `y1` on `y0` given `x`.
    fn slope(&self) -> f64 {
        self.rho * self.sigma1 / self.sigma0
    }

    pub fn var_y0(&self) -> f64 {
        self.mu0[1] * self.mu0[1] + self.sigma0 * self.sigma0
    }

    /// Mean and variance of the Gaussian `x | y0`.
    pub fn x_given_y0(&self, y0: f64) -> (f64, f64) {
        let var_y0 = self.var_y0();
        let a1 = self.mu0[1];
        (a1 * (y0 - self.mu0[0]) / var_y0, 1.0 - a1 * a1 / var_y0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub x: f64,
    pub z: u8,
    pub y_obs: f64,
}

/// Observed records. `y_obs` is `y1` when `z = 1` and `y0` when `z = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedDataset {
    records: Vec<Record>,
    n0: usize,
}

impl ObservedDataset {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.z > 1 {
                return Err(HteError::Parse(format!("record {i}: z must be 0 or 1, got {}", r.z)));
            }
            if !r.x.is_finite() || !r.y_obs.is_finite() {
                return Err(HteError::Parse(format!("record {i}: non-finite value")));
            }
        }
        let n0 = records.iter().filter(|r| r.z == 0).count();
        Ok(Self { records, n0 })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn n1(&self) -> usize {
        self.records.len() - self.n0
    }

    /// `(x, y0)` for control records, in dataset order.
    pub fn controls(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.records.iter().filter(|r| r.z == 0).map(|r| (r.x, r.y_obs))
    }

    /// Control `(x, y0)` paired with the record's position in the dataset.
    pub fn controls_indexed(&self) -> impl Iterator<Item = (usize, (f64, f64))> + '_ {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.z == 0)
            .map(|(i, r)| (i, (r.x, r.y_obs)))
    }

    /// `(x, y1)` for treated records, in dataset order.
    pub fn treated(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.records.iter().filter(|r| r.z == 1).map(|r| (r.x, r.y_obs))
    }

    pub fn treated_share(&self) -> f64 {
        self.n1() as f64 / self.n() as f64
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["x", "z", "y_obs"] {
            return Err(HteError::Parse(format!(
                "expected header x,z,y_obs, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut records = Vec::new();
        for row in rdr.deserialize() {
            let r: Record = row?;
            records.push(r);
        }
        Self::new(records)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(r)?;
        }
        if self.records.is_empty() {
            w.write_record(["x", "z", "y_obs"])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A unit before missingness is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompleteRecord {
    pub x: f64,
    pub y0: f64,
    pub y1: f64,
    pub z: u8,
    pub propensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub observed: ObservedDataset,
    pub complete: Vec<CompleteRecord>,
}

/// Draws one dataset. Identical `(config, seed)` gives a bit-identical result.
pub fn simulate(config: &DgpConfig, seed: u64) -> Result<Simulated> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slope_noise = (1.0 - config.rho * config.rho).sqrt();
    let mut complete = Vec::with_capacity(config.n);
    let mut records = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let x: f64 = rng.sample(StandardNormal);
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.gen();
        let y0 = config.mu0(x) + config.sigma0 * e0;
        let y1 = config.mu1(x) + config.sigma1 * (config.rho * e0 + slope_noise * e1);
        let p = propensity(&config.mechanism, y0, x);
        let z = u8::from(u < p);
        complete.push(CompleteRecord {
            x,
            y0,
            y1,
            z,
            propensity: p,
        });
        records.push(Record {
            x,
            z,
            y_obs: if z == 1 { y1 } else { y0 },
        });
    }
    Ok(Simulated {
        observed: ObservedDataset::new(records)?,
        complete,
    })
}

/// `E[y1 | y0, x]`.
pub fn true_phi(config: &DgpConfig, y0: f64, x: f64) -> f64 {
    config.mu1(x) + config.slope() * (y0 - config.mu0(x))
}

/// `E[y1 | y0]`, integrating the quadratic `mu1` exactly against the Gaussian `x | y0`.
pub fn true_e_y1_given_y0(config: &DgpConfig, y0: f64) -> f64 {
    let (m, v) = config.x_given_y0(y0);
    let e_mu1 = config.mu1[0] + config.mu1[1] * m + config.mu1[2] * (m * m + v);
    let e_mu0 = config.mu0[0] + config.mu0[1] * m;
    e_mu1 + config.slope() * (y0 - e_mu0)
}

/// `HTE(y0) = E[y1 - y0 | y0]`.
pub fn true_hte_curve(config: &DgpConfig, y0: f64) -> f64 {
    true_e_y1_given_y0(config, y0) - y0
}

/// `E[mu1(x)] - E[mu0(x)]` with `x ~ N(0, 1)`.
pub fn true_ate(config: &DgpConfig) -> f64 {
    config.mu1[0] + config.mu1[2] - config.mu0[0]
}

/// Known Gaussian marginal of `y0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnownMarginal {
    pub mean: f64,
    pub sd: f64,
}

impl KnownMarginal {
    pub fn density(&self, y0: f64) -> f64 {
        let t = (y0 - self.mean) / self.sd;
        (-0.5 * t * t).exp() / (self.sd * (2.0 * std::f64::consts::PI).sqrt())
    }

    pub fn second_moment(&self) -> f64 {
        self.sd * self.sd + self.mean * self.mean
    }

    /// `mean ± 6 sd`.
    pub fn support(&self) -> (f64, f64) {
        (self.mean - SUPPORT_SDS * self.sd, self.mean + SUPPORT_SDS * self.sd)
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(HteError::InvalidArgument(format!(
                "quantile level must lie in (0, 1), got {p}"
            )));
        }
        let n = Normal::new(self.mean, self.sd)
            .map_err(|e| HteError::InvalidArgument(e.to_string()))?;
        Ok(n.inverse_cdf(p))
    }

    /// Interval holding the central `mass` of the distribution.
    pub fn central_interval(&self, mass: f64) -> Result<(f64, f64)> {
        let tail = 0.5 * (1.0 - mass);
        Ok((self.quantile(tail)?, self.quantile(1.0 - tail)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnownMoments {
    pub mean_x: f64,
    pub mean_y0: f64,
    pub second_moment_y0: f64,
}

/// `y0 ~ N(a0, a1² + sigma0²)`.
pub fn known_marginal(config: &DgpConfig) -> KnownMarginal {
    KnownMarginal {
        mean: config.mu0[0],
        sd: config.var_y0().sqrt(),
    }
}

pub fn known_moments(config: &DgpConfig) -> KnownMoments {
    let m = known_marginal(config);
    KnownMoments {
        mean_x: 0.0,
        mean_y0: m.mean,
        second_moment_y0: m.second_moment(),
    }
}
