use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hte_sieve::dgp::{known_marginal, known_moments, simulate, true_ate, true_e_y1_given_y0, KnownMarginal, KnownMoments, ObservedDataset};
use hte_sieve::harness::{
    aggregate, band_file_name, fit_dataset, fit_mechanism_for, replicate, write_report, MechanismMode, RunConfig,
    StoredResults,
};
use hte_sieve::mechanism::MechanismParams;
use hte_sieve::{HteError, Result};

#[derive(Debug, Parser)]
#[command(name = "hte", version, about = "Two-stage series estimation of heterogeneous treatment effects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Simulation seed (seed base for `replicate`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of replications.
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Norm bounds, comma separated.
    #[arg(long = "b-gamma", global = true, value_delimiter = ',')]
    b_gamma: Vec<f64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Assignment mechanism: fitted by GMM or the configured truth.
    #[arg(long, global = true, value_parser = ["estimate", "oracle"])]
    mechanism: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one observed dataset and write it as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Print the closed-form truths of the configured design as JSON.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
    /// Fit one dataset and write fitted models and HTE curves.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Observed dataset (`x,z,y_obs`); simulated from `--seed` when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the Monte Carlo study and write the table, bands and metadata.
    Replicate {
        #[command(flatten)]
        common: Common,
    },
    /// Re-aggregate stored replication results.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory holding `replications.json`; defaults to `--out`.
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(HteError),
}

impl From<HteError> for Failure {
    fn from(e: HteError) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed_base = seed;
    }
    if let Some(reps) = common.reps {
        config.replications = reps;
    }
    if !common.b_gamma.is_empty() {
        config.b_gammas = common.b_gamma.clone();
    }
    if let Some(w) = common.workers {
        config.workers = w;
    }
    if let Some(m) = &common.mechanism {
        config.mechanism = m.parse::<MechanismMode>()?;
    }
    if let Some(out) = &common.out {
        config.output_dir = Some(out.clone());
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(config)
}

fn output_dir(config: &RunConfig) -> CliResult<PathBuf> {
    config
        .output_dir
        .clone()
        .ok_or_else(|| Failure::Usage("an output directory is required (--out or output_dir)".into()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| HteError::Io(format!("{}: {e}", parent.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HteError::Io(format!("{}: {e}", path.display())))
}

fn cmd_simulate(common: &Common) -> CliResult<()> {
    let config = load_config(common)?;
    let data = simulate(&config.dgp, config.seed_base)?.observed;
    match &common.out {
        Some(path) => data.write_csv(create(path)?)?,
        None => data.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

#[derive(Serialize)]
struct OraclePoint {
    y0: f64,
    e_y1: f64,
    hte: f64,
}

#[derive(Serialize)]
struct OracleReport {
    true_ate: f64,
    mechanism: MechanismParams,
    marginal: KnownMarginal,
    moments: KnownMoments,
    curve: Vec<OraclePoint>,
}

fn cmd_oracle(common: &Common) -> CliResult<()> {
    let config = load_config(common)?;
    let curve = config
        .grid_spec()?
        .points()?
        .into_iter()
        .map(|y0| {
            let e_y1 = true_e_y1_given_y0(&config.dgp, y0);
            OraclePoint { y0, e_y1, hte: e_y1 - y0 }
        })
        .collect();
    let report = OracleReport {
        true_ate: true_ate(&config.dgp),
        mechanism: config.dgp.mechanism,
        marginal: known_marginal(&config.dgp),
        moments: known_moments(&config.dgp),
        curve,
    };
    let write = |w: &mut dyn Write| -> Result<()> {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)?;
        Ok(())
    };
    match &common.out {
        Some(path) => write(&mut create(path)?)?,
        None => write(&mut io::stdout().lock())?,
    }
    Ok(())
}

#[derive(Serialize)]
struct EstimateSummary {
    mechanism: MechanismParams,
    n: usize,
    n_treated: usize,
    bounds: Vec<EstimateBound>,
}

#[derive(Serialize)]
struct EstimateBound {
    b_gamma: f64,
    ate_curve: Option<f64>,
    ate_direct: Option<f64>,
    error: Option<String>,
}

fn cmd_estimate(common: &Common, data: Option<&Path>) -> CliResult<()> {
    let config = load_config(common)?;
    let dir = output_dir(&config)?;
    let dataset = match data {
        Some(path) => {
            let f = File::open(path).map_err(|e| HteError::Io(format!("{}: {e}", path.display())))?;
            ObservedDataset::read_csv(f)?
        }
        None => simulate(&config.dgp, config.seed_base)?.observed,
    };
    let mech = fit_mechanism_for(&dataset, &config)?;
    let fit = fit_dataset(&dataset, &mech, &config)?;
    std::fs::create_dir_all(&dir).map_err(|e| HteError::Io(format!("{}: {e}", dir.display())))?;
    for (model, curve) in fit.models.iter().zip(&fit.curves) {
        let mut w = create(&dir.join(format!("model_B{}.json", model.b_gamma)))?;
        serde_json::to_writer_pretty(&mut w, model).map_err(HteError::from)?;
        w.flush().map_err(HteError::from)?;
        curve.write_csv(create(&dir.join(format!("curve_B{}.csv", model.b_gamma)))?)?;
    }
    let summary = EstimateSummary {
        mechanism: mech,
        n: dataset.n(),
        n_treated: dataset.n1(),
        bounds: fit
            .bounds
            .iter()
            .map(|b| EstimateBound {
                b_gamma: b.b_gamma,
                ate_curve: b.ate_curve,
                ate_direct: b.ate_direct,
                error: b.error.clone(),
            })
            .collect(),
    };
    let mut w = create(&dir.join("estimate.json"))?;
    serde_json::to_writer_pretty(&mut w, &summary).map_err(HteError::from)?;
    w.flush().map_err(HteError::from)?;
    Ok(())
}

fn print_table(agg: &hte_sieve::harness::Aggregate) {
    println!("b_gamma  ate_mean  ate_sd   n_converged");
    for s in &agg.bounds {
        println!("{:<8} {:.4}    {:.4}   {}", s.b_gamma, s.ate_mean, s.ate_sd, s.n_converged);
    }
    println!("true     {:.4}", agg.true_ate);
}

fn cmd_replicate(common: &Common) -> CliResult<()> {
    let config = load_config(common)?;
    let dir = output_dir(&config)?;
    let agg = replicate(&config, &dir)?;
    print_table(&agg);
    for s in &agg.bounds {
        eprintln!("wrote {}", dir.join(band_file_name(s.b_gamma)).display());
    }
    Ok(())
}

fn cmd_report(common: &Common, from: Option<&Path>) -> CliResult<()> {
    let out = common
        .out
        .clone()
        .or_else(|| from.map(Path::to_path_buf))
        .ok_or_else(|| Failure::Usage("report needs --out or --from".into()))?;
    let src = from.map(Path::to_path_buf).unwrap_or_else(|| out.clone());
    let path = src.join("replications.json");
    let text = std::fs::read_to_string(&path).map_err(|e| HteError::Io(format!("{}: {e}", path.display())))?;
    let stored = StoredResults::from_json(&text)?;
    let agg = aggregate(&stored.results, &stored.config)?;
    write_report(&out, &stored.config, &stored.results, &agg, None)?;
    print_table(&agg);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Simulate { common } => cmd_simulate(common),
        Command::Oracle { common } => cmd_oracle(common),
        Command::Estimate { common, data } => cmd_estimate(common, data.as_deref()),
        Command::Replicate { common } => cmd_replicate(common),
        Command::Report { common, from } => cmd_report(common, from.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
