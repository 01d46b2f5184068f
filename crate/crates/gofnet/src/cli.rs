//! Command-line front end: `fit`, `gof`, `residual` and `simulate`.
//!
//! `fit` produces a directory of JSON artifacts; `gof` and `residual`
//! read it back. Every artifact references the run manifest written next
//! to it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::graph::{CodingOptions, CovariateSource, Network, read_network};
use crate::graphon::{GraphonGrid, GraphonOptions, ResidualGraphon};
use crate::model_select::{fit_result, FitResult};
use crate::seeding::derive_seed;
use crate::simulate::{run_sweep, simulate_network, SimConfig, SweepConfig};
use crate::vbem::{fit_model, FitOptions, Hyperparameters, ModelFit, RestartRecord};

#[derive(Debug, Parser)]
#[command(
    name = "gofnet",
    version,
    about = "Logistic network regression with a blockwise residual term and a \
             goodness-of-fit probability for the constant-residual null"
)]
pub struct Cli {
    /// Worker threads for the (K, restart) and replicate pools; defaults
    /// to the number of cores. Results do not depend on this value.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit all block counts K = 1..kmax and write the model posterior.
    Fit(FitArgs),
    /// Print the goodness-of-fit report for a fit directory.
    Gof(GofArgs),
    /// Export the model-averaged residual surface of a fit directory.
    Residual(ResidualArgs),
    /// Generate synthetic networks, optionally fitting each replicate.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Whitespace-separated `i j` edge list ('#' comments allowed).
    pub edges: PathBuf,

    /// CSV of raw edge covariates: rows `i, j, v1, ..., vd`.
    #[arg(long, conflicts_with = "node_table")]
    pub edge_covariates: Option<PathBuf>,

    /// CSV of node descriptors with `name:kind[:levels]` headers
    /// (kinds: quant, ord, qual); coded into edge covariates.
    #[arg(long)]
    pub node_table: Option<PathBuf>,

    /// Largest number of residual blocks.
    #[arg(long, default_value_t = 10)]
    pub kmax: usize,

    /// Restarts per K with perturbed initializations.
    #[arg(long, default_value_t = 2)]
    pub restarts: usize,

    /// Relative bound-change convergence threshold.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,

    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Standardize covariate columns to zero mean and unit variance.
    #[arg(long)]
    pub standardize: bool,

    /// Impute missing quantitative node descriptors by the column mean.
    #[arg(long)]
    pub impute_mean: bool,

    /// Output directory.
    #[arg(long, short, default_value = "gofnet-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GofArgs {
    /// Directory written by `gofnet fit`.
    pub fit_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ResidualArgs {
    /// Directory written by `gofnet fit`.
    pub fit_dir: PathBuf,

    /// Grid resolution per axis.
    #[arg(long, default_value_t = 101)]
    pub grid: usize,

    /// Monte Carlo samples for the block-boundary distribution.
    #[arg(long, default_value_t = 100_000)]
    pub mc_samples: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Use the fitted states as-is (default).
    #[arg(long, overrides_with = "no_covariates")]
    pub with_covariates: bool,

    /// Refit without covariates before exporting, for comparison against
    /// the covariate-adjusted surface.
    #[arg(long, action = ArgAction::SetTrue)]
    pub no_covariates: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of nodes; repeat or comma-separate for a sweep.
    #[arg(long, required = true, value_delimiter = ',')]
    pub n: Vec<usize>,

    /// Target density under lambda = 1; repeatable for a sweep.
    #[arg(long, required = true, value_delimiter = ',')]
    pub rho: Vec<f64>,

    /// Residual heterogeneity (1 = none); repeatable for a sweep.
    #[arg(long, required = true, value_delimiter = ',')]
    pub lambda: Vec<f64>,

    /// Regression coefficients; one standard-normal node covariate per
    /// entry, paired as differences.
    #[arg(long, value_delimiter = ',')]
    pub beta: Vec<f64>,

    #[arg(long, default_value_t = 1)]
    pub replicates: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Also fit every replicate and write sweep.csv with the fit
    /// probabilities.
    #[arg(long)]
    pub fit: bool,

    /// kmax used when --fit is given.
    #[arg(long, default_value_t = 10)]
    pub kmax: usize,

    /// Restarts per K when --fit is given.
    #[arg(long, default_value_t = 2)]
    pub restarts: usize,

    /// Output directory.
    #[arg(long, short, default_value = "gofnet-sim")]
    pub out: PathBuf,
}

/// Run record written next to every artifact.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub master_seed: u64,
    pub version: String,
    /// Wall-clock seconds per (K, restart) task, when the command fits.
    pub runtimes: Vec<RestartRecord>,
}

/// fit.json: model-selection result plus the network summary columns of
/// the report.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitArtifact {
    pub manifest: String,
    pub n: usize,
    pub d: usize,
    pub density: f64,
    pub result: FitResult,
}

/// network.json: adjacency stored as an edge list for later refits.
#[derive(Debug, Serialize, Deserialize)]
pub struct NetworkArtifact {
    pub manifest: String,
    pub n: usize,
    pub node_names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StatesArtifact {
    manifest: String,
    fits: Vec<ModelFit>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GridArtifact {
    manifest: String,
    covariates_included: bool,
    grid: GraphonGrid,
}

pub fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    run_with(cli)
}

pub fn run_with(cli: Cli) -> anyhow::Result<()> {
    if let Some(threads) = cli.threads {
        // ignore the error when a pool already exists (e.g. in tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match cli.command {
        Command::Fit(args) => cmd_fit(&args),
        Command::Gof(args) => cmd_gof(&args),
        Command::Residual(args) => cmd_residual(&args),
        Command::Simulate(args) => cmd_simulate(&args),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_network(args: &FitArgs) -> anyhow::Result<Network> {
    let source = if let Some(path) = &args.edge_covariates {
        if !path.exists() {
            bail!("edge covariate file not found: {}", path.display());
        }
        CovariateSource::EdgeCsv(path.clone())
    } else if let Some(path) = &args.node_table {
        if !path.exists() {
            bail!("node descriptor file not found: {}", path.display());
        }
        CovariateSource::NodeTable(path.clone())
    } else {
        CovariateSource::None
    };
    let options = CodingOptions {
        impute_mean: args.impute_mean,
        standardize: args.standardize,
    };
    Ok(read_network(&args.edges, &source, options)?)
}

fn cmd_fit(args: &FitArgs) -> anyhow::Result<()> {
    if args.kmax < 1 {
        bail!("--kmax must be >= 1");
    }
    let net = load_network(args)?;
    let hyper = Hyperparameters::with_k_max(args.kmax);
    let opts = FitOptions {
        tol: args.tol,
        max_iter: args.max_iter,
        n_restarts: args.restarts,
        seed: args.seed,
    };
    let output = fit_model(&net, &hyper, &opts)?;
    let bounds: BTreeMap<usize, f64> = output.fits.iter().map(|f| (f.k, f.bound)).collect();
    let result = fit_result(&bounds, &hyper.model_prior)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let manifest = RunManifest {
        command: "fit".into(),
        config: serde_json::json!({
            "edges": args.edges.display().to_string(),
            "edge_covariates": args.edge_covariates.as_ref().map(|p| p.display().to_string()),
            "node_table": args.node_table.as_ref().map(|p| p.display().to_string()),
            "kmax": args.kmax,
            "restarts": args.restarts,
            "tol": args.tol,
            "max_iter": args.max_iter,
            "standardize": args.standardize,
            "impute_mean": args.impute_mean,
        }),
        master_seed: args.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        runtimes: output.records.clone(),
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    write_json(
        &args.out.join("fit.json"),
        &FitArtifact {
            manifest: "manifest.json".into(),
            n: net.n(),
            d: net.d(),
            density: net.density(),
            result: result.clone(),
        },
    )?;
    write_json(
        &args.out.join("states.json"),
        &StatesArtifact {
            manifest: "manifest.json".into(),
            fits: output.fits.clone(),
        },
    )?;
    let edges: Vec<(usize, usize)> = {
        let adj = net.adjacency();
        let mut e = Vec::new();
        for i in 0..net.n() {
            for j in (i + 1)..net.n() {
                if adj[(i, j)] == 1.0 {
                    e.push((i, j));
                }
            }
        }
        e
    };
    write_json(
        &args.out.join("network.json"),
        &NetworkArtifact {
            manifest: "manifest.json".into(),
            n: net.n(),
            node_names: net.node_names().to_vec(),
            edges,
        },
    )?;
    {
        let mut file = fs::File::create(args.out.join("nodes.csv"))?;
        writeln!(file, "index,name")?;
        for (i, name) in net.node_names().iter().enumerate() {
            writeln!(file, "{},{name}", i + 1)?;
        }
    }

    println!(
        "fitted K = 1..{} on n = {} nodes (d = {}, density {:.4})",
        args.kmax,
        net.n(),
        net.d(),
        net.density()
    );
    println!("p(H0 | Y) = {:.4}", result.p_h0);
    println!("artifacts written to {}", args.out.display());
    Ok(())
}

fn cmd_gof(args: &GofArgs) -> anyhow::Result<()> {
    let artifact: FitArtifact = read_json(&args.fit_dir.join("fit.json"))?;
    let r = &artifact.result;

    println!("network: size {}  d {}  density {:.4}", artifact.n, artifact.d, artifact.density);
    println!();
    println!("{:>4}  {:>16}  {:>10}", "K", "lower bound", "posterior");
    for (k, bound) in &r.bounds {
        let post = r.posterior.get(k).copied().unwrap_or(0.0);
        println!("{k:>4}  {bound:>16.4}  {post:>10.4}");
    }
    println!();
    println!("p(H0 | Y) = {:.4}", r.p_h0);
    match r.bayes_factor_01 {
        Some(bf) => println!("B01 = {bf:.4}"),
        None => println!("B01 = +inf"),
    }
    // the null is rejected when its posterior probability falls below 1/2
    if r.p_h0 < 0.5 {
        println!("H0 rejected: residual structure detected (p(H0 | Y) < 1/2)");
    } else {
        println!("no residual structure detected (p(H0 | Y) >= 1/2)");
    }
    Ok(())
}

fn cmd_residual(args: &ResidualArgs) -> anyhow::Result<()> {
    if args.grid < 1 {
        bail!("--grid must be >= 1");
    }
    let artifact: FitArtifact = read_json(&args.fit_dir.join("fit.json"))?;
    let states: StatesArtifact = read_json(&args.fit_dir.join("states.json"))?;

    let refit_without_covariates = args.no_covariates && artifact.d > 0;
    let (fits, posterior, suffix, covariates_included) = if refit_without_covariates {
        let manifest: RunManifest = read_json(&args.fit_dir.join("manifest.json"))?;
        let network: NetworkArtifact = read_json(&args.fit_dir.join("network.json"))?;
        let mut adjacency = nalgebra::DMatrix::zeros(network.n, network.n);
        for (i, j) in &network.edges {
            adjacency[(*i, *j)] = 1.0;
            adjacency[(*j, *i)] = 1.0;
        }
        let net = Network::new(adjacency, crate::graph::CovariateTensor::empty(network.n))?;
        let cfg = &manifest.config;
        let kmax = cfg["kmax"].as_u64().unwrap_or(10) as usize;
        let hyper = Hyperparameters::with_k_max(kmax);
        let opts = FitOptions {
            tol: cfg["tol"].as_f64().unwrap_or(1e-6),
            max_iter: cfg["max_iter"].as_u64().unwrap_or(500) as usize,
            n_restarts: cfg["restarts"].as_u64().unwrap_or(2) as usize,
            seed: manifest.master_seed,
        };
        let output = fit_model(&net, &hyper, &opts)?;
        let bounds: BTreeMap<usize, f64> =
            output.fits.iter().map(|f| (f.k, f.bound)).collect();
        let result = fit_result(&bounds, &hyper.model_prior)?;
        (output.fits, result.posterior, "_nocov", false)
    } else {
        (
            states.fits,
            artifact.result.posterior.clone(),
            "",
            artifact.d > 0,
        )
    };

    let options = GraphonOptions {
        n_samples: args.mc_samples,
        seed: args.seed,
        ..Default::default()
    };
    let surface = ResidualGraphon::new(&fits, &posterior, &options)?;
    let grid = surface.export_grid(args.grid);

    let csv_path = args.fit_dir.join(format!("residual{suffix}.csv"));
    let file = fs::File::create(&csv_path)
        .with_context(|| format!("writing {}", csv_path.display()))?;
    grid.write_csv(file, Some("manifest: manifest.json"))?;
    let json_path = args.fit_dir.join(format!("residual{suffix}.json"));
    write_json(
        &json_path,
        &GridArtifact {
            manifest: "manifest.json".into(),
            covariates_included,
            grid,
        },
    )?;
    println!("residual surface written to {}", csv_path.display());
    println!("residual surface written to {}", json_path.display());
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    if args.replicates < 1 {
        bail!("--replicates must be >= 1");
    }
    let sweep = SweepConfig {
        n_values: args.n.clone(),
        rho_values: args.rho.clone(),
        lambda_values: args.lambda.clone(),
        beta: args.beta.clone(),
        replicates: args.replicates,
        seed: args.seed,
    };

    let mut cells = Vec::new();
    for &n in &sweep.n_values {
        for &rho in &sweep.rho_values {
            for &lambda in &sweep.lambda_values {
                cells.push((n, rho, lambda));
            }
        }
    }
    // fail fast on invalid settings before writing anything
    for &(n, rho, lambda) in &cells {
        SimConfig {
            n,
            rho,
            lambda,
            beta: args.beta.clone(),
            seed: 0,
        }
        .validate()?;
    }

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut files = Vec::new();
    for (c, &(n, rho, lambda)) in cells.iter().enumerate() {
        for r in 0..args.replicates {
            let seed = derive_seed(args.seed, c as u64, r as u64);
            let sim = simulate_network(&SimConfig {
                n,
                rho,
                lambda,
                beta: args.beta.clone(),
                seed,
            })?;
            let stem = format!("sim_n{n}_rho{rho}_lambda{lambda}_rep{r}");
            let edge_path = args.out.join(format!("{stem}.edges"));
            let mut file = fs::File::create(&edge_path)?;
            writeln!(file, "# manifest: manifest.json")?;
            let adj = sim.network.adjacency();
            for i in 0..n {
                // isolated nodes appear as self-loop lines, which readers
                // drop after registering the node
                if (0..n).all(|j| adj[(i, j)] == 0.0) {
                    writeln!(file, "{} {}", i + 1, i + 1)?;
                }
                for j in (i + 1)..n {
                    if adj[(i, j)] == 1.0 {
                        writeln!(file, "{} {}", i + 1, j + 1)?;
                    }
                }
            }
            files.push(edge_path.display().to_string());
            if !args.beta.is_empty() {
                let cov_path = args.out.join(format!("{stem}.cov.csv"));
                let mut file = fs::File::create(&cov_path)?;
                writeln!(file, "# manifest: manifest.json")?;
                for i in 0..n {
                    for j in (i + 1)..n {
                        let vals: Vec<String> = sim
                            .network
                            .covariate(i, j)
                            .iter()
                            .map(|v| v.to_string())
                            .collect();
                        writeln!(file, "{},{},{}", i + 1, j + 1, vals.join(","))?;
                    }
                }
                files.push(cov_path.display().to_string());
            }
        }
    }

    if args.fit {
        let hyper = Hyperparameters::with_k_max(args.kmax);
        let opts = FitOptions {
            n_restarts: args.restarts,
            ..Default::default()
        };
        let records = run_sweep(&sweep, &hyper, &opts)?;
        let sweep_path = args.out.join("sweep.csv");
        let mut file = fs::File::create(&sweep_path)?;
        writeln!(file, "# manifest: manifest.json")?;
        writeln!(file, "n,rho,lambda,replicate,seed,p_h0,best_k,error")?;
        for rec in &records {
            writeln!(
                file,
                "{},{},{},{},{},{},{},{}",
                rec.n,
                rec.rho,
                rec.lambda,
                rec.replicate,
                rec.seed,
                rec.p_h0.map(|p| p.to_string()).unwrap_or_default(),
                rec.best_k.map(|k| k.to_string()).unwrap_or_default(),
                rec.error.clone().unwrap_or_default()
            )?;
        }
        files.push(sweep_path.display().to_string());
    }

    let manifest = RunManifest {
        command: "simulate".into(),
        config: serde_json::to_value(&sweep)?,
        master_seed: args.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        runtimes: vec![],
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    println!("wrote {} files to {}", files.len(), args.out.display());
    Ok(())
}
