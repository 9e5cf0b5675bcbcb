//! The `nbody-sciml` command-line tool.

use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, Resolved, SearchSpace};
use crate::datagen::{max_relative_energy_drift, DataBundle};
use crate::error::{Error, Result};
use crate::experiments::{
    breakdown_point, forecast_metrics, run_case, run_seed, select_best, BreakdownReport, CaseConfig, CaseResult,
    SeedScore, WindowMetrics,
};
use crate::integrators::Trajectory;
use crate::io::{component_labels, read_trajectory, write_json, write_loss_history, write_trajectory, Checkpoint};
use crate::models::{layer_sizes, Model, ModelKind};
use crate::neural::MlpSpec;
use crate::optimizers::{FirstOrder, Stage2, DEFAULT_WEIGHT_DECAY};

#[derive(Debug, Parser)]
#[command(name = "nbody-sciml", version, about = "Learn n-body dynamics with Neural ODEs and UDEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the reference system and write clean and noisy trajectories.
    Simulate(CommonArgs),
    /// Train the configured model and write a checkpoint.
    Train(DataArgs),
    /// Integrate a checkpoint over the full grid and score it.
    Forecast(ForecastArgs),
    /// Find the smallest plausible training fraction.
    Breakdown(DataArgs),
    /// Train every combination of a hyperparameter grid.
    Sweep(DataArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    pub model: Option<ModelKind>,
    /// Noise fraction of each component's range.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Training fraction of the grid.
    #[arg(long)]
    pub split: Option<f64>,
    /// Network initialization seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for independent training runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Generate the datasets instead of reading them from the output directory.
    #[arg(long)]
    pub generate: bool,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to evaluate; defaults to `model.json` in the output directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Forecast(a) => cmd_forecast(&a),
        Command::Breakdown(a) => cmd_breakdown(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

/// Loaded configuration with command-line overrides applied.
struct Session {
    resolved: Resolved,
    echo_json: Value,
    echo_line: String,
    pool: rayon::ThreadPool,
}

impl Session {
    fn open(a: &CommonArgs) -> Result<Self> {
        let mut cfg = ExperimentConfig::from_path(&a.config)?;
        if let Some(k) = a.model {
            cfg.model.kind = k;
        }
        if let Some(f) = a.noise {
            cfg.noise.fraction = f;
        }
        if let Some(f) = a.split {
            cfg.split.train_fraction = f;
        }
        if let Some(s) = a.seed {
            cfg.model.seed = s;
        }
        if let Some(o) = &a.out {
            cfg.output.directory = o.clone();
        }
        let resolved = cfg.resolve()?;
        let echo_json = serde_json::to_value(&resolved.echo).expect("config serializes");
        let echo_line = resolved.echo.to_json_line();
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(j) = a.jobs {
            if j == 0 {
                return Err(Error::Config("--jobs must be at least 1".into()));
            }
            builder = builder.num_threads(j);
        }
        let pool = builder.build().map_err(|e| Error::Io(e.to_string()))?;
        fs::create_dir_all(&resolved.output_dir)
            .map_err(|e| Error::Io(format!("{}: {e}", resolved.output_dir.display())))?;
        Ok(Session {
            resolved,
            echo_json,
            echo_line,
            pool,
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.resolved.output_dir.join(name)
    }

    fn dim(&self) -> usize {
        self.resolved.setup.bodies.spatial_dim
    }

    fn noisy_name(&self) -> String {
        format!("noisy_{}.csv", self.resolved.case.noise.fraction)
    }

    fn write_datasets(&self, bundle: &DataBundle) -> Result<()> {
        write_trajectory(&self.out("truth.csv"), &bundle.truth, self.dim(), Some(&self.echo_line))?;
        write_trajectory(&self.out(&self.noisy_name()), &bundle.noisy, self.dim(), Some(&self.echo_line))
    }

    fn generate(&self) -> Result<DataBundle> {
        DataBundle::generate(self.resolved.setup.clone(), self.resolved.case.noise)
    }

    /// Generates and writes the datasets, or reads them back from the
    /// output directory and checks them against the configuration.
    fn bundle(&self, generate: bool) -> Result<DataBundle> {
        if generate {
            let b = self.generate()?;
            self.write_datasets(&b)?;
            return Ok(b);
        }
        let truth = self.read_checked("truth.csv")?;
        let noisy = self.read_checked(&self.noisy_name())?;
        Ok(DataBundle {
            setup: self.resolved.setup.clone(),
            truth,
            noisy,
            noise: self.resolved.case.noise,
        })
    }

    fn read_checked(&self, name: &str) -> Result<Trajectory> {
        let path = self.out(name);
        if !path.exists() {
            return Err(Error::Config(format!(
                "dataset {} not found; run `simulate` first or pass --generate",
                path.display()
            )));
        }
        let (traj, dim) = read_trajectory(&path)?;
        let setup = &self.resolved.setup;
        let grid = setup.grid()?;
        if dim != setup.bodies.spatial_dim || traj.state_len() != setup.bodies.state_len() {
            return Err(Error::GridMismatch(format!(
                "{} holds {} components in {dim} dimensions, configuration expects {}",
                path.display(),
                traj.state_len(),
                setup.bodies.state_len()
            )));
        }
        if traj.times() != grid.times() {
            return Err(Error::GridMismatch(format!(
                "{} is sampled on a different grid than the configuration",
                path.display()
            )));
        }
        Ok(traj)
    }
}

pub fn cmd_simulate(a: &CommonArgs) -> Result<i32> {
    let s = Session::open(a)?;
    let bundle = s.generate()?;
    s.write_datasets(&bundle)?;
    let drift = max_relative_energy_drift(&bundle.truth, &bundle.setup.bodies)?;
    println!("wrote {} and {}", s.out("truth.csv").display(), s.out(&s.noisy_name()).display());
    println!("max relative energy drift: {drift:e}");
    Ok(0)
}

pub fn cmd_train(a: &DataArgs) -> Result<i32> {
    let s = Session::open(&a.common)?;
    let bundle = s.bundle(a.generate)?;
    let case = &s.resolved.case;
    let result = s.pool.install(|| run_case(case, &bundle))?;
    info!("trained {} seed(s) in {:.1}s", case.n_seeds, result.wall_time);
    let best = &result.best;
    let model = Model::new(
        case.model_kind,
        MlpSpec {
            seed: best.seed,
            ..case.mlp.clone()
        },
        bundle.setup.bodies.clone(),
    )?;
    let mut ck = Checkpoint::new(&model, best.params.clone(), best.final_loss, best.diverged.is_some())?;
    ck.config_echo = Some(s.echo_json.clone());
    ck.save(&s.out("model.json"))?;
    let stage1_len = case.train_config.stage1.epochs.min(best.loss_history.len());
    write_loss_history(&s.out("loss_history.csv"), &best.loss_history, stage1_len, Some(&s.echo_line))?;

    println!("best seed {}", best.seed);
    if let Some(l) = best.final_loss {
        println!("final loss {l:e}");
    }
    match &best.train_nrmse {
        Some(m) => println!("train nRMSE {:.6}", m.aggregate),
        None => println!("train nRMSE unavailable (prediction diverged)"),
    }
    if let Some(d) = &best.diverged {
        eprintln!("training diverged: {d}; best-so-far checkpoint written");
        return Ok(Error::Diverged { step: 0 }.exit_code());
    }
    Ok(0)
}

#[derive(Serialize)]
struct ComponentScore<'a> {
    component: &'a str,
    nrmse: Option<f64>,
}

#[derive(Serialize)]
struct WindowReport<'a> {
    start_time: f64,
    end_time: f64,
    points: usize,
    aggregate: f64,
    per_component: Vec<ComponentScore<'a>>,
}

fn window_report<'a>(traj: &Trajectory, m: &WindowMetrics, labels: &'a [String]) -> WindowReport<'a> {
    WindowReport {
        start_time: traj.grid().start(),
        end_time: traj.grid().end(),
        points: traj.len(),
        aggregate: m.aggregate,
        per_component: labels
            .iter()
            .zip(&m.per_component)
            .map(|(l, v)| ComponentScore {
                component: l,
                nrmse: *v,
            })
            .collect(),
    }
}

#[derive(Serialize)]
struct MetricsReport<'a> {
    config_echo: &'a Value,
    model_kind: ModelKind,
    seed: u64,
    threshold: f64,
    plausible: bool,
    train_window: WindowReport<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    forecast_window: Option<WindowReport<'a>>,
}

pub fn cmd_forecast(a: &ForecastArgs) -> Result<i32> {
    let s = Session::open(&a.data.common)?;
    let path = a.checkpoint.clone().unwrap_or_else(|| s.out("model.json"));
    let ck = Checkpoint::load(&path)?;
    let case = &s.resolved.case;
    ck.check_compatible(case.model_kind, &case.mlp, &s.resolved.setup.bodies)?;
    let model = ck.model()?;
    let truth = if a.data.generate {
        s.bundle(true)?.truth
    } else {
        s.read_checked("truth.csv")?
    };
    let pred = model.predict(&ck.params, &s.resolved.setup.initial_state, truth.grid(), case.train_config.loss.substeps)?;
    write_trajectory(&s.out("prediction.csv"), &pred, s.dim(), Some(&s.echo_line))?;

    let n = truth.len();
    let n_train = case.split.train_len(n);
    let ranges = truth.component_ranges();
    let labels = component_labels(s.resolved.setup.bodies.n_bodies(), s.dim());
    let (pt, tt) = (pred.slice(0, n_train)?, truth.slice(0, n_train)?);
    let train = forecast_metrics(&pt, &tt, &ranges)?;
    let forecast = if n_train < n {
        let (pf, tf) = (pred.slice(n_train, n)?, truth.slice(n_train, n)?);
        let m = forecast_metrics(&pf, &tf, &ranges)?;
        Some((tf, m))
    } else {
        None
    };
    let score = forecast.as_ref().map_or(train.aggregate, |(_, m)| m.aggregate);
    let report = MetricsReport {
        config_echo: &s.echo_json,
        model_kind: model.kind(),
        seed: ck.mlp.seed,
        threshold: case.plausibility_threshold,
        plausible: score < case.plausibility_threshold,
        train_window: window_report(&tt, &train, &labels),
        forecast_window: forecast.as_ref().map(|(t, m)| window_report(t, m, &labels)),
    };
    write_json(&s.out("metrics.json"), &report)?;
    println!("train nRMSE {:.6}", train.aggregate);
    if let Some((_, m)) = &forecast {
        println!("forecast nRMSE {:.6}", m.aggregate);
    }
    println!("plausible: {}", report.plausible);
    Ok(0)
}

#[derive(Serialize)]
struct CaseSummary {
    fraction: f64,
    plausible: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_nrmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    forecast_nrmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    diverged: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    seed_scores: Vec<SeedScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn summarize(fraction: f64, r: &std::result::Result<CaseResult, Error>) -> CaseSummary {
    match r {
        Ok(c) => CaseSummary {
            fraction,
            plausible: c.plausible,
            best_seed: Some(c.best.seed),
            final_loss: c.best.final_loss,
            train_nrmse: c.best.train_nrmse.as_ref().map(|m| m.aggregate),
            forecast_nrmse: c.best.forecast_nrmse.as_ref().map(|m| m.aggregate),
            diverged: c.best.diverged.clone(),
            seed_scores: c.seed_scores.clone(),
            error: None,
        },
        Err(e) => CaseSummary {
            fraction,
            plausible: false,
            best_seed: None,
            final_loss: None,
            train_nrmse: None,
            forecast_nrmse: None,
            diverged: None,
            seed_scores: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

#[derive(Serialize)]
struct BreakdownFile<'a> {
    config_echo: &'a Value,
    model_kind: ModelKind,
    noise: f64,
    threshold: f64,
    n_seeds: usize,
    fractions: Vec<f64>,
    plausible: Vec<bool>,
    breakdown_fraction: Option<f64>,
    anomalies: &'a [f64],
    cases: Vec<CaseSummary>,
}

fn breakdown_file<'a>(echo: &'a Value, n_seeds: usize, r: &'a BreakdownReport) -> BreakdownFile<'a> {
    BreakdownFile {
        config_echo: echo,
        model_kind: r.model_kind,
        noise: r.noise.fraction,
        threshold: r.threshold,
        n_seeds,
        fractions: r.entries.iter().map(|e| e.fraction).collect(),
        plausible: r.plausibility(),
        breakdown_fraction: r.breakdown_fraction,
        anomalies: &r.anomalies,
        cases: r.entries.iter().map(|e| summarize(e.fraction, &e.result)).collect(),
    }
}

pub fn cmd_breakdown(a: &DataArgs) -> Result<i32> {
    let s = Session::open(&a.common)?;
    crate::experiments::validate_grid(&s.resolved.breakdown_grid)?;
    let bundle = s.bundle(a.generate)?;
    let report = s
        .pool
        .install(|| breakdown_point(&s.resolved.case, &bundle, &s.resolved.breakdown_grid))?;
    write_json(&s.out("breakdown.json"), &breakdown_file(&s.echo_json, s.resolved.case.n_seeds, &report))?;
    for e in &report.entries {
        let score = e
            .result
            .as_ref()
            .ok()
            .and_then(|r| r.best.forecast_nrmse.as_ref().map(|m| m.aggregate));
        match score {
            Some(v) => println!("fraction {:<4} forecast nRMSE {v:.4} plausible {}", e.fraction, e.plausible()),
            None => println!("fraction {:<4} no forecast plausible false", e.fraction),
        }
    }
    match report.breakdown_fraction {
        Some(f) => println!("breakdown fraction: {f}"),
        None => println!("breakdown fraction: not found"),
    }
    if !report.anomalies.is_empty() {
        println!("non-monotone plausible fractions: {:?}", report.anomalies);
    }
    Ok(0)
}

/// One point of a hyperparameter grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Combination {
    pub optimizer: FirstOrder,
    pub activation: crate::neural::Activation,
    pub hidden_layers: usize,
    pub units: usize,
    pub lr: f64,
    pub epochs: usize,
    pub bfgs_iters: usize,
}

/// Every combination of `space`, in nested order of its fields.
pub fn combinations(space: &SearchSpace) -> Vec<Combination> {
    let mut out = Vec::with_capacity(space.combinations());
    for &optimizer in &space.optimizer {
        for &activation in &space.activation {
            for &hidden_layers in &space.hidden_layers {
                for &units in &space.units {
                    for &lr in &space.lr {
                        for &epochs in &space.epochs {
                            for &bfgs_iters in &space.bfgs_iters {
                                out.push(Combination {
                                    optimizer,
                                    activation,
                                    hidden_layers,
                                    units,
                                    lr,
                                    epochs,
                                    bfgs_iters,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn case_for(base: &CaseConfig, bodies: &crate::dynamics::BodySpec, c: &Combination) -> Result<CaseConfig> {
    let sizes = layer_sizes(base.model_kind, bodies, &vec![c.units; c.hidden_layers]);
    let mlp = MlpSpec::new(sizes, c.activation, base.mlp.seed)?;
    let mut train = base.train_config.clone();
    let decay = match (c.optimizer, base.train_config.stage1.optimizer) {
        (FirstOrder::Adam, _) => 0.0,
        (FirstOrder::AdamW, FirstOrder::AdamW) => base.train_config.stage1.weight_decay,
        (FirstOrder::AdamW, FirstOrder::Adam) => DEFAULT_WEIGHT_DECAY,
    };
    train.stage1.optimizer = c.optimizer;
    train.stage1.lr = c.lr;
    train.stage1.epochs = c.epochs;
    train.stage1.weight_decay = decay;
    train.stage2 = (c.bfgs_iters > 0).then_some(Stage2 { max_iters: c.bfgs_iters });
    Ok(CaseConfig {
        mlp,
        train_config: train,
        ..base.clone()
    })
}

pub fn cmd_sweep(a: &DataArgs) -> Result<i32> {
    let s = Session::open(&a.common)?;
    let space = &s.resolved.search_space;
    let combos = combinations(space);
    if combos.is_empty() {
        return Err(Error::Config("sweep search space is empty".into()));
    }
    let bundle = s.bundle(a.generate)?;
    let base = &s.resolved.case;
    let configs: Vec<CaseConfig> = combos
        .iter()
        .map(|c| case_for(base, &bundle.setup.bodies, c))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..base.n_seeds).map(move |k| (c, k)))
        .collect();
    let mut runs: Vec<_> = s.pool.install(|| {
        jobs.par_iter()
            .map(|&(c, k)| ((c, k), run_seed(&configs[c], &bundle, k)))
            .collect()
    });
    runs.sort_by_key(|(key, _)| *key);
    let mut grouped: Vec<Vec<Result<crate::experiments::SeedRun>>> = configs.iter().map(|_| Vec::new()).collect();
    for ((c, _), r) in runs {
        grouped[c].push(r);
    }
    let results: Vec<std::result::Result<CaseResult, Error>> = grouped
        .into_iter()
        .zip(&configs)
        .map(|(rs, cfg)| rs.into_iter().collect::<Result<Vec<_>>>().and_then(|rs| select_best(cfg, rs)))
        .collect();

    let score = |r: &std::result::Result<CaseResult, Error>| -> Option<f64> {
        let r = r.as_ref().ok()?;
        if r.best.diverged.is_some() {
            return None;
        }
        r.best
            .forecast_nrmse
            .as_ref()
            .or(r.best.train_nrmse.as_ref())
            .map(|m| m.aggregate)
    };
    let best = results
        .iter()
        .enumerate()
        .filter_map(|(i, r)| score(r).map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);

    let mut buf = Vec::new();
    for line in s.echo_line.lines() {
        buf.extend_from_slice(format!("# config_echo: {line}\n").as_bytes());
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record([
            "optimizer",
            "activation",
            "hidden_layers",
            "units",
            "lr",
            "epochs",
            "bfgs_iters",
            "best_seed",
            "final_loss",
            "train_nrmse",
            "forecast_nrmse",
            "plausible",
            "failed",
            "error",
            "best",
        ])?;
        let opt = |v: Option<f64>| v.map(crate::io::fmt_f64).unwrap_or_default();
        for (i, (c, r)) in combos.iter().zip(&results).enumerate() {
            let optimizer = match c.optimizer {
                FirstOrder::Adam => "adam",
                FirstOrder::AdamW => "adamw",
            };
            let (seed, loss, train, fc, plausible, error) = match r {
                Ok(cr) => (
                    cr.best.seed.to_string(),
                    opt(cr.best.final_loss),
                    opt(cr.best.train_nrmse.as_ref().map(|m| m.aggregate)),
                    opt(cr.best.forecast_nrmse.as_ref().map(|m| m.aggregate)),
                    cr.plausible,
                    cr.best.diverged.clone().unwrap_or_default(),
                ),
                Err(e) => (String::new(), String::new(), String::new(), String::new(), false, e.to_string()),
            };
            w.write_record([
                optimizer.to_string(),
                c.activation.to_string(),
                c.hidden_layers.to_string(),
                c.units.to_string(),
                crate::io::fmt_f64(c.lr),
                c.epochs.to_string(),
                c.bfgs_iters.to_string(),
                seed,
                loss,
                train,
                fc,
                plausible.to_string(),
                score(r).is_none().to_string(),
                error,
                (best == Some(i)).to_string(),
            ])?;
        }
        w.flush()?;
    }
    write_bytes(&s.out("sweep.csv"), &buf)?;
    println!("{} combinations written to {}", combos.len(), s.out("sweep.csv").display());
    if let Some(i) = best {
        println!("best: {:?}", combos[i]);
    }
    Ok(0)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}
