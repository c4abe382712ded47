//! Seeded Monte Carlo replication: configuration, one replication, the
//! parallel batch, aggregation into ATE summaries and pointwise bands, and
//! the on-disk report.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::Bandwidths;
use crate::dgp::{known_marginal, known_moments, simulate, true_e_y1_given_y0, DgpConfig, ObservedDataset, RNG_DESCRIPTION};
use crate::error::{HteError, Result};
use crate::hte::{GridSpec, HteCurve, Integrator, DEFAULT_GRID_MASS, DEFAULT_GRID_POINTS, DEFAULT_QUAD};
use crate::mechanism::{fit_mechanism, MechanismParams};
use crate::series::{fit_series, prepare_stage_two, DensityMode, SeriesModel, SeriesSettings, DEFAULT_HERMITE_NODES};

pub const DEFAULT_B_GAMMAS: [f64; 4] = [10.0, 15.0, 25.0, 50.0];
pub const DEFAULT_REPLICATIONS: usize = 200;
pub const DEFAULT_MECHANISM_TOL: f64 = 1e-8;
/// Bumped whenever the layout of `replications.json` changes.
pub const RESULTS_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismMode {
    /// Fit the assignment mechanism by GMM on each replication.
    #[default]
    Estimate,
    /// Use the configured true mechanism.
    Oracle,
}

impl std::str::FromStr for MechanismMode {
    type Err = HteError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "estimate" => Ok(Self::Estimate),
            "oracle" => Ok(Self::Oracle),
            other => Err(HteError::InvalidArgument(format!(
                "mechanism mode must be `estimate` or `oracle`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureConfig {
    /// Gauss–Legendre nodes for the `x` and `y0` integrals.
    pub n_quad: usize,
    /// Gauss–Hermite nodes for the kernel-smoothed basis integrals.
    pub n_hermite: usize,
    /// Gauss–Legendre nodes per axis for the H¹ penalty matrix.
    pub sobolev_quad: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            n_quad: DEFAULT_QUAD,
            n_hermite: DEFAULT_HERMITE_NODES,
            sobolev_quad: 8,
        }
    }
}

/// Reporting grid: `count` evenly spaced points over the central
/// `central_mass` of the known `y0` marginal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub central_mass: f64,
    pub count: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            central_mass: DEFAULT_GRID_MASS,
            count: DEFAULT_GRID_POINTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dgp: DgpConfig,
    /// Highest Legendre degree per axis.
    pub order: usize,
    pub b_gammas: Vec<f64>,
    pub replications: usize,
    pub seed_base: u64,
    pub quadrature: QuadratureConfig,
    pub grid: GridConfig,
    /// Fraction of the sample range added on each side before mapping to `[-1, 1]`.
    pub margin_fraction: f64,
    /// Regress on outcomes mapped into `[-1, 1]`.
    pub scale_outcome: bool,
    pub mechanism_tol: f64,
    pub output_dir: Option<PathBuf>,
    pub mechanism: MechanismMode,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let series = SeriesSettings::default();
        Self {
            dgp: DgpConfig::default(),
            order: series.order,
            b_gammas: DEFAULT_B_GAMMAS.to_vec(),
            replications: DEFAULT_REPLICATIONS,
            seed_base: 0,
            quadrature: QuadratureConfig::default(),
            grid: GridConfig::default(),
            margin_fraction: series.margin_fraction,
            scale_outcome: series.scale_outcome,
            mechanism_tol: DEFAULT_MECHANISM_TOL,
            output_dir: None,
            mechanism: MechanismMode::Estimate,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HteError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.replications == 0 {
            return Err(HteError::InvalidArgument("replications must be at least 1".into()));
        }
        if self.b_gammas.is_empty() {
            return Err(HteError::InvalidArgument("at least one norm bound is required".into()));
        }
        if let Some(b) = self.b_gammas.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(HteError::InvalidArgument(format!("norm bounds must be positive, got {b}")));
        }
        if !(self.grid.central_mass > 0.0 && self.grid.central_mass < 1.0) {
            return Err(HteError::InvalidArgument(format!(
                "grid mass must lie in (0, 1), got {}",
                self.grid.central_mass
            )));
        }
        if self.grid.count < 2 {
            return Err(HteError::InvalidArgument("grid needs at least two points".into()));
        }
        if !(self.margin_fraction >= 0.0 && self.margin_fraction.is_finite()) {
            return Err(HteError::InvalidArgument(format!(
                "margin fraction must be nonnegative, got {}",
                self.margin_fraction
            )));
        }
        if !(self.mechanism_tol > 0.0) {
            return Err(HteError::InvalidArgument("mechanism tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn series_settings(&self) -> SeriesSettings {
        SeriesSettings {
            order: self.order,
            n_hermite: self.quadrature.n_hermite,
            sobolev_quad: self.quadrature.sobolev_quad,
            margin_fraction: self.margin_fraction,
            scale_outcome: self.scale_outcome,
        }
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::central(&known_marginal(&self.dgp), self.grid.central_mass, self.grid.count)
    }

    pub fn seed(&self, index: usize) -> u64 {
        self.seed_base.wrapping_add(index as u64)
    }
}

/// Outcome for one norm bound within a replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub b_gamma: f64,
    pub converged: bool,
    pub error: Option<String>,
    pub ate_curve: Option<f64>,
    pub ate_direct: Option<f64>,
    /// `Ê[y1 | y0]` on the common grid; `None` where the point failed.
    pub curve: Vec<Option<f64>>,
    pub lambda: Option<f64>,
    pub norm: Option<f64>,
    /// Known-marginal nodes dropped inside `ate_from_curve`.
    pub ate_dropped_nodes: usize,
}

impl BoundResult {
    fn failed(b_gamma: f64, grid_len: usize, error: &HteError) -> Self {
        Self {
            b_gamma,
            converged: false,
            error: Some(error.to_string()),
            ate_curve: None,
            ate_direct: None,
            curve: vec![None; grid_len],
            lambda: None,
            norm: None,
            ate_dropped_nodes: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub index: usize,
    pub seed: u64,
    pub treated_share: Option<f64>,
    /// Original-frame mechanism used for stage two.
    pub mechanism: Option<MechanismParams>,
    pub mechanism_converged: bool,
    pub error: Option<String>,
    pub bandwidths: Option<Bandwidths>,
    /// Treated rows dropped from the design for lack of density support.
    pub dropped_rows: Option<usize>,
    pub bounds: Vec<BoundResult>,
}

/// Stage-two fits for every bound on one dataset, sharing the density work.
#[derive(Debug, Clone)]
pub struct DatasetFit {
    pub mechanism: MechanismParams,
    pub models: Vec<SeriesModel>,
    pub curves: Vec<HteCurve>,
    pub bounds: Vec<BoundResult>,
    pub bandwidths: Option<Bandwidths>,
    pub dropped_rows: usize,
}

pub fn fit_mechanism_for(dataset: &ObservedDataset, config: &RunConfig) -> Result<MechanismParams> {
    match config.mechanism {
        MechanismMode::Oracle => Ok(config.dgp.mechanism),
        MechanismMode::Estimate => fit_mechanism(
            dataset,
            &known_moments(&config.dgp),
            &config.dgp.mechanism,
            config.mechanism_tol,
        ),
    }
}

/// Runs stage two and integration for every configured bound. Failures for a
/// single bound are recorded in its [`BoundResult`]; only failures shared by
/// all bounds are returned as errors.
pub fn fit_dataset(dataset: &ObservedDataset, mechanism: &MechanismParams, config: &RunConfig) -> Result<DatasetFit> {
    let prepared = prepare_stage_two(dataset, mechanism, &config.series_settings(), DensityMode::Kde)?;
    let marginal = known_marginal(&config.dgp);
    let grid = config.grid_spec()?.points()?;
    let integrator = Integrator::new(
        &prepared.basis,
        &prepared.mechanism,
        prepared.densities.as_ref(),
        &marginal,
        &grid,
        config.quadrature.n_quad,
    )?;
    let truth = |y0| true_e_y1_given_y0(&config.dgp, y0);

    let mut models = Vec::new();
    let mut curves = Vec::new();
    let mut bounds = Vec::new();
    for &b in &config.b_gammas {
        let outcome = fit_series(&prepared, b).and_then(|model| {
            let curve = integrator.curve(&model)?;
            let (ate_curve, dropped) = integrator.ate_from_curve_detailed(&model)?;
            let ate_direct = integrator.ate_direct(&model).ok();
            Ok((model, curve, ate_curve, dropped, ate_direct))
        });
        match outcome {
            Ok((model, curve, ate_curve, dropped, ate_direct)) => {
                bounds.push(BoundResult {
                    b_gamma: b,
                    converged: true,
                    error: None,
                    ate_curve: Some(ate_curve),
                    ate_direct,
                    curve: curve.e_y1.clone(),
                    lambda: Some(model.lambda),
                    norm: Some(model.norm),
                    ate_dropped_nodes: dropped,
                });
                curves.push(curve.with_truth(truth));
                models.push(model);
            }
            Err(e) => bounds.push(BoundResult::failed(b, grid.len(), &e)),
        }
    }
    Ok(DatasetFit {
        mechanism: *mechanism,
        models,
        curves,
        bounds,
        bandwidths: prepared.densities.bandwidths(),
        dropped_rows: prepared.design.dropped,
    })
}

/// Simulates replication `index`, fits both stages and integrates. Never
/// fails: errors and panics are recorded as flags on the result.
pub fn run_replication(config: &RunConfig, index: usize) -> ReplicationResult {
    let seed = config.seed(index);
    let grid_len = config.grid.count;
    let mut result = ReplicationResult {
        index,
        seed,
        treated_share: None,
        mechanism: None,
        mechanism_converged: false,
        error: None,
        bandwidths: None,
        dropped_rows: None,
        bounds: Vec::new(),
    };
    let fail_all = |result: &mut ReplicationResult, e: HteError| {
        result.bounds = config
            .b_gammas
            .iter()
            .map(|&b| BoundResult::failed(b, grid_len, &e))
            .collect();
        result.error = Some(e.to_string());
    };

    let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<()> {
        let data = simulate(&config.dgp, seed)?.observed;
        result.treated_share = Some(data.treated_share());
        let mech = fit_mechanism_for(&data, config)?;
        result.mechanism = Some(mech);
        result.mechanism_converged = true;
        let fit = fit_dataset(&data, &mech, config)?;
        result.bandwidths = fit.bandwidths;
        result.dropped_rows = Some(fit.dropped_rows);
        result.bounds = fit.bounds;
        Ok(())
    }));
    match outcome {
        Ok(Ok(())) => {}
        Ok(Err(e)) => fail_all(&mut result, e),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail_all(&mut result, HteError::Internal(format!("replication panicked: {msg}")));
        }
    }
    result
}

/// Runs `config.replications` replications on a pool of `config.workers`
/// threads. Results are ordered by index regardless of scheduling.
pub fn run_batch(config: &RunConfig) -> Result<Vec<ReplicationResult>> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| HteError::Internal(format!("worker pool: {e}")))?;
    let mut results: Vec<ReplicationResult> = pool.install(|| {
        (0..config.replications)
            .into_par_iter()
            .map(|i| run_replication(config, i))
            .collect()
    });
    results.sort_by_key(|r| r.index);
    Ok(results)
}

/// Empirical quantile with linear interpolation between order statistics:
/// position `(n - 1) p` in the sorted sample (Hyndman–Fan type 7).
pub fn quantile_linear(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(HteError::InsufficientData("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(HteError::InvalidArgument(format!("quantile level must lie in [0, 1], got {p}")));
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Sample mean and standard deviation with the `n - 1` denominator.
pub fn mean_sd(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(HteError::InsufficientData(format!(
            "need at least two values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub y0: f64,
    pub mean: Option<f64>,
    pub q05: Option<f64>,
    pub q95: Option<f64>,
    pub truth: f64,
    /// Converged replications with a value at this point.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub b_gamma: f64,
    pub ate_mean: f64,
    pub ate_sd: f64,
    pub ate_direct_mean: Option<f64>,
    pub ate_direct_sd: Option<f64>,
    pub n_converged: usize,
    pub n_excluded: usize,
    pub mean_lambda: f64,
    pub band: Vec<BandPoint>,
}

impl BoundSummary {
    /// Share of band points with `lo <= y0 <= hi` whose interval contains the truth.
    pub fn coverage(&self, lo: f64, hi: f64) -> f64 {
        let pts: Vec<&BandPoint> = self.band.iter().filter(|p| p.y0 >= lo && p.y0 <= hi).collect();
        if pts.is_empty() {
            return 0.0;
        }
        let covered = pts
            .iter()
            .filter(|p| matches!((p.q05, p.q95), (Some(a), Some(b)) if a <= p.truth && p.truth <= b))
            .count();
        covered as f64 / pts.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub true_ate: f64,
    pub bounds: Vec<BoundSummary>,
}

/// Summarizes converged replications per bound. Flagged replications are
/// excluded and counted. Requires at least two converged replications for
/// every bound.
pub fn aggregate(results: &[ReplicationResult], config: &RunConfig) -> Result<Aggregate> {
    let grid = config.grid_spec()?.points()?;
    let mut sorted: Vec<&ReplicationResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.index);

    let mut bounds = Vec::new();
    for (k, &b) in config.b_gammas.iter().enumerate() {
        let fits: Vec<&BoundResult> = sorted
            .iter()
            .filter_map(|r| r.bounds.get(k))
            .filter(|f| f.b_gamma == b && f.converged && f.ate_curve.is_some())
            .collect();
        let ates: Vec<f64> = fits.iter().filter_map(|f| f.ate_curve).collect();
        let (ate_mean, ate_sd) = mean_sd(&ates).map_err(|_| {
            HteError::InsufficientData(format!(
                "B_gamma = {b}: {} converged replications, need at least 2",
                ates.len()
            ))
        })?;
        let directs: Vec<f64> = fits.iter().filter_map(|f| f.ate_direct).collect();
        let direct = mean_sd(&directs).ok();
        let lambdas: Vec<f64> = fits.iter().filter_map(|f| f.lambda).collect();

        let band = grid
            .iter()
            .enumerate()
            .map(|(g, &y0)| {
                let mut vals: Vec<f64> = fits
                    .iter()
                    .filter_map(|f| f.curve.get(g).copied().flatten())
                    .collect();
                vals.sort_by(f64::total_cmp);
                let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
                BandPoint {
                    y0,
                    mean,
                    q05: quantile_linear(&vals, 0.05).ok(),
                    q95: quantile_linear(&vals, 0.95).ok(),
                    truth: true_e_y1_given_y0(&config.dgp, y0),
                    count: vals.len(),
                }
            })
            .collect();

        bounds.push(BoundSummary {
            b_gamma: b,
            ate_mean,
            ate_sd,
            ate_direct_mean: direct.map(|d| d.0),
            ate_direct_sd: direct.map(|d| d.1),
            n_converged: ates.len(),
            n_excluded: sorted.len() - ates.len(),
            mean_lambda: lambdas.iter().sum::<f64>() / lambdas.len().max(1) as f64,
            band,
        });
    }
    Ok(Aggregate {
        true_ate: crate::dgp::true_ate(&config.dgp),
        bounds,
    })
}

/// Stored form of a batch, re-aggregated by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredResults {
    pub format: u32,
    pub config: RunConfig,
    pub results: Vec<ReplicationResult>,
}

impl StoredResults {
    pub fn from_json(text: &str) -> Result<Self> {
        let stored: Self = serde_json::from_str(text)?;
        if stored.format != RESULTS_FORMAT {
            return Err(HteError::Parse(format!(
                "unsupported results format {}, expected {RESULTS_FORMAT}",
                stored.format
            )));
        }
        stored.config.validate()?;
        Ok(stored)
    }
}

pub fn band_file_name(b_gamma: f64) -> String {
    format!("band_B{b_gamma}.csv")
}

pub fn write_table<W: Write>(agg: &Aggregate, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["b_gamma", "ate_mean", "ate_sd", "n_converged"])?;
    for s in &agg.bounds {
        w.write_record([
            s.b_gamma.to_string(),
            s.ate_mean.to_string(),
            s.ate_sd.to_string(),
            s.n_converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_band<W: Write>(summary: &BoundSummary, writer: W) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["y0", "mean", "q05", "q95", "truth"])?;
    for p in &summary.band {
        w.write_record([p.y0.to_string(), opt(p.mean), opt(p.q05), opt(p.q95), p.truth.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub package: String,
    pub version: String,
    pub results_format: u32,
    pub config: RunConfig,
    pub seeds: (u64, u64),
    pub rng: String,
    pub mechanism_fit: String,
    pub quantile_convention: String,
    pub replications: usize,
    pub replications_flagged: usize,
    pub dropped_rows: Option<Spread>,
    pub h_y0: Option<Spread>,
    pub h_x: Option<Spread>,
    pub w_x: Option<Spread>,
    pub elapsed_seconds: Option<f64>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub b_gamma: f64,
    pub ate_mean: f64,
    pub ate_sd: f64,
    pub ate_direct_mean: Option<f64>,
    pub ate_direct_sd: Option<f64>,
    pub n_converged: usize,
    pub n_excluded: usize,
    pub mean_lambda: f64,
}

pub fn metadata(config: &RunConfig, results: &[ReplicationResult], agg: &Aggregate, elapsed: Option<f64>) -> Metadata {
    let collect = |f: &dyn Fn(&ReplicationResult) -> Option<f64>| -> Vec<f64> { results.iter().filter_map(f).collect() };
    let last = config.seed(config.replications.saturating_sub(1));
    Metadata {
        package: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        results_format: RESULTS_FORMAT,
        config: config.clone(),
        seeds: (config.seed_base, last),
        rng: RNG_DESCRIPTION.into(),
        mechanism_fit: match config.mechanism {
            MechanismMode::Estimate => "GMM on the original scale, re-expressed in [-1, 1] coordinates".into(),
            MechanismMode::Oracle => "configured true mechanism, re-expressed in [-1, 1] coordinates".into(),
        },
        quantile_convention: "linear interpolation at (n - 1) p of the sorted sample".into(),
        replications: results.len(),
        replications_flagged: results.iter().filter(|r| r.bounds.iter().any(|b| !b.converged)).count(),
        dropped_rows: Spread::of(&collect(&|r| r.dropped_rows.map(|d| d as f64))),
        h_y0: Spread::of(&collect(&|r| r.bandwidths.map(|b| b.h_y0))),
        h_x: Spread::of(&collect(&|r| r.bandwidths.map(|b| b.h_x))),
        w_x: Spread::of(&collect(&|r| r.bandwidths.map(|b| b.w_x))),
        elapsed_seconds: elapsed,
        summary: agg
            .bounds
            .iter()
            .map(|s| SummaryRow {
                b_gamma: s.b_gamma,
                ate_mean: s.ate_mean,
                ate_sd: s.ate_sd,
                ate_direct_mean: s.ate_direct_mean,
                ate_direct_sd: s.ate_direct_sd,
                n_converged: s.n_converged,
                n_excluded: s.n_excluded,
                mean_lambda: s.mean_lambda,
            })
            .collect(),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| HteError::Io(format!("{}: {e}", path.display())))
}

/// Writes `table.csv`, one `band_B<b>.csv` per bound and `metadata.json`.
pub fn write_report(dir: &Path, config: &RunConfig, results: &[ReplicationResult], agg: &Aggregate, elapsed: Option<f64>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HteError::Io(format!("{}: {e}", dir.display())))?;
    write_table(agg, create(dir, "table.csv")?)?;
    for s in &agg.bounds {
        write_band(s, create(dir, &band_file_name(s.b_gamma))?)?;
    }
    let mut meta = create(dir, "metadata.json")?;
    serde_json::to_writer_pretty(&mut meta, &metadata(config, results, agg, elapsed))?;
    meta.flush()?;
    Ok(())
}

pub fn write_results(dir: &Path, config: &RunConfig, results: &[ReplicationResult]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HteError::Io(format!("{}: {e}", dir.display())))?;
    let stored = StoredResults {
        format: RESULTS_FORMAT,
        config: config.clone(),
        results: results.to_vec(),
    };
    let mut w = create(dir, "replications.json")?;
    serde_json::to_writer(&mut w, &stored)?;
    w.flush()?;
    Ok(())
}

/// Full study: batch, aggregate, report and stored results.
pub fn replicate(config: &RunConfig, dir: &Path) -> Result<Aggregate> {
    let start = Instant::now();
    let results = run_batch(config)?;
    let agg = aggregate(&results, config)?;
    let elapsed = start.elapsed().as_secs_f64();
    write_results(dir, config, &results)?;
    write_report(dir, config, &results, &agg, Some(elapsed))?;
    Ok(agg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        RunConfig {
            dgp: DgpConfig { n: 600, ..DgpConfig::default() },
            b_gammas: vec![10.0, 50.0],
            replications: 3,
            seed_base: 11,
            grid: GridConfig { central_mass: 0.9, count: 11 },
            quadrature: QuadratureConfig { n_quad: 24, ..QuadratureConfig::default() },
            workers: 1,
            ..RunConfig::default()
        }
    }

    fn synthetic(index: usize, ate: f64, converged: bool, grid: usize) -> ReplicationResult {
        ReplicationResult {
            index,
            seed: index as u64,
            treated_share: Some(0.3),
            mechanism: None,
            mechanism_converged: converged,
            error: None,
            bandwidths: None,
            dropped_rows: Some(0),
            bounds: vec![BoundResult {
                b_gamma: 10.0,
                converged,
                error: None,
                ate_curve: converged.then_some(ate),
                ate_direct: converged.then_some(ate),
                curve: vec![converged.then_some(ate); grid],
                lambda: Some(1.0),
                norm: Some(1.0),
                ate_dropped_nodes: 0,
            }],
        }
    }

    #[test]
    fn quantile_convention() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_linear(&s, 0.0).unwrap(), 1.0);
        assert_eq!(quantile_linear(&s, 1.0).unwrap(), 5.0);
        assert_eq!(quantile_linear(&s, 0.5).unwrap(), 3.0);
        assert!((quantile_linear(&s, 0.05).unwrap() - 1.2).abs() < 1e-12);
        assert!((quantile_linear(&s, 0.95).unwrap() - 4.8).abs() < 1e-12);
        assert_eq!(quantile_linear(&[7.0], 0.3).unwrap(), 7.0);
        assert!(quantile_linear(&[], 0.5).is_err());
    }

    #[test]
    fn mean_sd_arithmetic() {
        let (m, s) = mean_sd(&[0.8, 0.9, 1.0]).unwrap();
        assert!((m - 0.9).abs() < 1e-12);
        assert!((s - 0.1).abs() < 1e-12);
        assert!(mean_sd(&[1.0]).is_err());
    }

    #[test]
    fn aggregate_constant_and_exclusion() {
        let config = RunConfig {
            b_gammas: vec![10.0],
            grid: GridConfig { central_mass: 0.9, count: 5 },
            ..RunConfig::default()
        };
        let results: Vec<_> = (0..4).map(|i| synthetic(i, 0.7, true, 5)).collect();
        let agg = aggregate(&results, &config).unwrap();
        let s = &agg.bounds[0];
        assert_eq!(s.ate_sd, 0.0);
        assert!(s.band.iter().all(|p| p.q05 == p.q95));

        let mixed = vec![
            synthetic(0, 0.8, true, 5),
            synthetic(1, 5.0, false, 5),
            synthetic(2, 0.9, true, 5),
            synthetic(3, 1.0, true, 5),
        ];
        let agg = aggregate(&mixed, &config).unwrap();
        let only: Vec<_> = mixed.iter().filter(|r| r.mechanism_converged).cloned().collect();
        let alone = aggregate(&only, &config).unwrap();
        assert_eq!(agg.bounds[0].ate_mean, alone.bounds[0].ate_mean);
        assert_eq!(agg.bounds[0].band, alone.bounds[0].band);
        assert_eq!(agg.bounds[0].n_excluded, 1);
        assert!((agg.bounds[0].ate_mean - 0.9).abs() < 1e-12);
        assert!((agg.bounds[0].ate_sd - 0.1).abs() < 1e-12);

        let too_few = vec![synthetic(0, 0.8, true, 5), synthetic(1, 0.8, false, 5)];
        assert!(matches!(aggregate(&too_few, &config), Err(HteError::InsufficientData(_))));
    }

    #[test]
    fn config_validation_and_unknown_keys() {
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig::from_json("{}").is_ok());
        assert!(RunConfig::from_json(r#"{"replications": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"b_gammas": [10, -1]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"replicatons": 5}"#).is_err());
        assert!(RunConfig::from_json(r#"{"mechanism": "oracle"}"#).unwrap().mechanism == MechanismMode::Oracle);
        let round = serde_json::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_json(&round).unwrap(), RunConfig::default());
    }

    #[test]
    fn replication_is_deterministic() {
        let config = small_config();
        let a = run_replication(&config, 1);
        let b = run_replication(&config, 1);
        assert_eq!(a, b);
        assert_eq!(a.seed, 12);
    }

    #[test]
    fn oracle_mechanism_is_injected() {
        let config = RunConfig {
            mechanism: MechanismMode::Oracle,
            ..small_config()
        };
        let r = run_replication(&config, 0);
        assert_eq!(r.mechanism, Some(config.dgp.mechanism));
    }

    #[test]
    fn tiny_sample_is_flagged_not_fatal() {
        let config = RunConfig {
            dgp: DgpConfig { n: 7, ..DgpConfig::default() },
            replications: 2,
            ..small_config()
        };
        let results = run_batch(&config).unwrap();
        assert_eq!(results.len(), 2);
        for r in &results {
            assert_eq!(r.bounds.len(), config.b_gammas.len());
        }
        assert!(results.iter().any(|r| r.error.is_some()));
    }

    #[test]
    fn batch_order_independent_of_workers() {
        let one = run_batch(&small_config()).unwrap();
        let two = run_batch(&RunConfig { workers: 2, ..small_config() }).unwrap();
        assert_eq!(one, two);
        assert!(one.windows(2).all(|w| w[0].index < w[1].index));
    }

    #[test]
    fn stored_results_round_trip_bit_exact() {
        let config = small_config();
        let results = run_batch(&config).unwrap();
        let stored = StoredResults {
            format: RESULTS_FORMAT,
            config: config.clone(),
            results: results.clone(),
        };
        let text = serde_json::to_string(&stored).unwrap();
        let back = StoredResults::from_json(&text).unwrap();
        assert_eq!(back.results, results);
        assert_eq!(aggregate(&back.results, &config).unwrap(), aggregate(&results, &config).unwrap());
    }

    #[test]
    fn band_file_names() {
        assert_eq!(band_file_name(10.0), "band_B10.csv");
        assert_eq!(band_file_name(12.5), "band_B12.5.csv");
    }
}
