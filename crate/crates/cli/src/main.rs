use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use regmix::bayes::{self, DispersionScale, MCMCConfig, PriorSpec};
use regmix::em::{self, EMConfig, Init, MStep};
use regmix::experiments::{self, ExperimentSpec};
use regmix::identifiability::{self, GridSpec};
use regmix::measures::{self, MixingMeasure};
use regmix::model::{self, CovariateDistribution, Dataset, MixtureRegressionModel, ModelShape};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "regmix", version, about = "Mixtures of regression models: simulate, fit, compare, diagnose")]
struct Cli {
    /// Worker threads for restart and replicate fan-out (default: all cores).
    #[arg(long, global = true, env = "REGMIX_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from a mixture of regressions.
    Simulate(SimulateArgs),
    /// Fit a mixing measure by EM.
    FitEm(FitEmArgs),
    /// Sample the posterior with the Gibbs sampler.
    FitBayes(FitBayesArgs),
    /// Exact Wasserstein distance between two mixing measures.
    Wasserstein(WassersteinArgs),
    /// Expected distance between the conditional densities of two mixing measures.
    Distance(DistanceArgs),
    /// Strong identifiability verdict for a model and a set of atoms.
    CheckIdentifiability(IdentArgs),
    /// Run a simulation study.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Model shape JSON.
    #[arg(long)]
    model: PathBuf,
    /// Mixing measure JSON.
    #[arg(long)]
    truth: PathBuf,
    /// Covariate distribution JSON.
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV (x1..xp,y); metadata goes to <out>.meta.json.
    #[arg(long)]
    out: PathBuf,
    /// Also write the generating component of every row.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    ClosedForm,
    Em1,
    Gradient,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitKind {
    Random,
    Kmeans,
}

#[derive(Args)]
struct FitEmArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Full EM config JSON; the flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    /// Step size for the gradient strategy.
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    no_backtracking: bool,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long, value_enum)]
    init: Option<InitKind>,
    /// Mixing measure JSON used as the first start.
    #[arg(long)]
    init_measure: Option<PathBuf>,
    #[arg(long)]
    no_collapse_guard: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitBayesArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    k: usize,
    /// Full MCMC config JSON; the flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    /// Prior JSON; weak defaults when absent.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Truth JSON; adds the posterior W1 summary to the header.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON Lines: a meta record, then one record per kept sample.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WassersteinArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 1)]
    r: u32,
    /// Write distance and transport plan as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Tv,
    Hellinger2,
    Prediction,
}

#[derive(Args)]
struct DistanceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long, value_enum)]
    metric: Metric,
    /// Order of the transport distance for the prediction metric.
    #[arg(long, default_value_t = 1)]
    r: u32,
    #[arg(long)]
    mc_points: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IdentArgs {
    #[arg(long)]
    model: PathBuf,
    /// Atoms to test; a JSON mixing measure.
    #[arg(long)]
    atoms: PathBuf,
    #[arg(long)]
    order: u8,
    /// Covariate grid `lo:hi:points` (one covariate).
    #[arg(long, conflicts_with = "grid", allow_hyphen_values = true)]
    x_range: Option<String>,
    /// Full grid JSON.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Full dataset CSV for the subsample experiment; simulated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

/// Failures split by exit code.
enum Failure {
    Validation { code: String, message: String },
    Runtime { code: String, message: String },
}

impl Failure {
    fn validation(code: &str, message: impl Into<String>) -> Self {
        Failure::Validation {
            code: code.into(),
            message: message.into(),
        }
    }

    fn runtime(code: &str, message: impl Into<String>) -> Self {
        Failure::Runtime {
            code: code.into(),
            message: message.into(),
        }
    }
}

impl From<regmix::Error> for Failure {
    fn from(e: regmix::Error) -> Self {
        if e.is_validation() {
            Failure::validation(e.code(), e.to_string())
        } else {
            Failure::runtime(e.code(), e.to_string())
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return report(Failure::validation("usage", e.to_string().trim().to_string()));
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            return report(Failure::validation("invalid_threads", "thread count must be >= 1"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            return report(Failure::runtime("thread_pool", e.to_string()));
        }
    }
    let threads = rayon::current_num_threads();
    let started = Instant::now();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a, threads, started),
        Command::FitEm(a) => fit_em(a, threads, started),
        Command::FitBayes(a) => fit_bayes(a, threads, started),
        Command::Wasserstein(a) => wasserstein(a, started),
        Command::Distance(a) => distance(a, threads, started),
        Command::CheckIdentifiability(a) => check_identifiability(a, started),
        Command::Experiment(a) => experiment(a, threads, started),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let (code, message, exit) = match f {
        Failure::Validation { code, message } => (code, message, 1),
        Failure::Runtime { code, message } => (code, message, 2),
    };
    eprintln!("{}", json!({ "error": { "code": code, "message": message } }));
    ExitCode::from(exit)
}

fn meta(command: &str, config: Value, seed: Option<u64>, threads: Option<usize>, started: Instant) -> Value {
    json!({
        "tool": "regmix",
        "version": VERSION,
        "command": command,
        "config": config,
        "seed": seed,
        "threads": threads,
        "wall_time_s": started.elapsed().as_secs_f64(),
    })
}

fn require_seed(seed: Option<u64>, command: &str) -> Outcome<u64> {
    seed.ok_or_else(|| Failure::validation("seed_required", format!("{command} is stochastic and needs --seed")))
}

fn read_text(path: &Path) -> Outcome<String> {
    if !path.exists() {
        return Err(Failure::validation("file_not_found", format!("{} does not exist", path.display())));
    }
    fs::read_to_string(path).map_err(|e| Failure::runtime("io", format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Outcome<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::validation("schema", format!("{}: {e}", path.display())))
}

fn read_data(path: &Path) -> Outcome<Dataset> {
    read_text(path)?;
    Dataset::load(path).map_err(|e| match e {
        regmix::Error::Io(io) => Failure::runtime("io", format!("{}: {io}", path.display())),
        other => Failure::validation("schema", format!("{}: {other}", path.display())),
    })
}

fn read_shape(path: &Path) -> Outcome<ModelShape> {
    let shape: ModelShape = read_json(path)?;
    shape.validate()?;
    Ok(shape)
}

fn read_measure(path: &Path, shape: Option<&ModelShape>) -> Outcome<MixingMeasure> {
    let g: MixingMeasure = read_json(path)?;
    if let Some(s) = shape {
        s.check_measure(&g)?;
    }
    Ok(g)
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::runtime("io", format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime("json", e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn simulate(a: SimulateArgs, threads: usize, started: Instant) -> Outcome<()> {
    let seed = require_seed(a.seed, "simulate")?;
    let shape = read_shape(&a.model)?;
    let truth = read_measure(&a.truth, Some(&shape))?;
    let px: CovariateDistribution = read_json(&a.covariates)?;
    px.validate()?;
    if a.n == 0 {
        return Err(Failure::validation("invalid_parameter", "n must be >= 1"));
    }
    let m = MixtureRegressionModel::new(shape.clone(), truth.clone())?;
    let sim = m.simulate(&px, a.n, seed)?;
    sim.data.save(&a.out).map_err(|e| io_failure(&a.out, e))?;
    if let Some(path) = &a.labels {
        let text: String = sim.labels.iter().map(|l| format!("{l}\n")).collect();
        fs::write(path, format!("component\n{text}")).map_err(|e| io_failure(path, e))?;
    }
    let config = json!({ "model": shape, "truth": truth, "covariates": px, "n": a.n });
    write_json(
        &sidecar(&a.out),
        &json!({ "meta": meta("simulate", config, Some(seed), Some(threads), started) }),
    )
}

fn fit_em(a: FitEmArgs, threads: usize, started: Instant) -> Outcome<()> {
    let shape = read_shape(&a.model)?;
    let data = read_data(&a.data)?;
    let mut cfg = match &a.config {
        Some(p) => Some(read_json::<EMConfig>(p)?),
        None => None,
    };
    let seed = a.seed.or(cfg.as_ref().map(|c| c.seed));
    let seed = require_seed(seed, "fit-em")?;
    let k = a
        .k
        .or(cfg.as_ref().map(|c| c.k))
        .ok_or_else(|| Failure::validation("k_required", "fit-em needs --k or a config"))?;
    let backtracking = !a.no_backtracking;
    let m_step = match a.strategy {
        Some(Strategy::ClosedForm) => Some(MStep::ClosedForm),
        Some(Strategy::Em1) => Some(MStep::Em1Newton { backtracking }),
        Some(Strategy::Gradient) => Some(MStep::Gradient {
            nu: a.nu.ok_or_else(|| Failure::validation("nu_required", "the gradient strategy needs --nu"))?,
            backtracking,
        }),
        None => None,
    };
    let mut c = match cfg.take() {
        Some(c) => c,
        None => {
            let m = m_step
                .clone()
                .ok_or_else(|| Failure::validation("strategy_required", "fit-em needs --strategy or a config"))?;
            EMConfig::new(k, m, seed)
        }
    };
    c.k = k;
    c.seed = seed;
    if let Some(m) = m_step {
        c.m_step = m;
    }
    if let Some(e) = a.epsilon {
        c.epsilon = Some(e);
    }
    if let Some(m) = a.max_iter {
        c.max_iter = m;
    }
    if let Some(r) = a.restarts {
        c.restarts = r;
    }
    match a.init {
        Some(InitKind::Random) => c.init = Init::RandomFromBox,
        Some(InitKind::Kmeans) => c.init = Init::KmeansOnY,
        None => {}
    }
    if let Some(p) = &a.init_measure {
        c.init = Init::Supplied {
            measure: read_measure(p, Some(&shape))?,
        };
    }
    if a.no_collapse_guard {
        c.collapse_guard = false;
    }
    c.validate(&shape)?;
    let result = em::fit(&c, &data, &shape)?;
    let mut config = json!({ "model": shape, "em": c, "data": a.data, "n": data.len() });
    config["em"]["epsilon_resolved"] = json!(c.epsilon_for(data.len()));
    write_json(
        &a.out,
        &json!({ "meta": meta("fit-em", config, Some(seed), Some(threads), started), "result": result }),
    )
}

fn fit_bayes(a: FitBayesArgs, threads: usize, started: Instant) -> Outcome<()> {
    let shape = read_shape(&a.model)?;
    let data = read_data(&a.data)?;
    let base = match &a.config {
        Some(p) => Some(read_json::<MCMCConfig>(p)?),
        None => None,
    };
    let seed = require_seed(a.seed.or(base.as_ref().map(|c| c.seed)), "fit-bayes")?;
    let iters = a
        .iters
        .or(base.as_ref().map(|c| c.iterations))
        .ok_or_else(|| Failure::validation("iters_required", "fit-bayes needs --iters or a config"))?;
    let burnin = a
        .burnin
        .or(base.as_ref().map(|c| c.burn_in))
        .ok_or_else(|| Failure::validation("burnin_required", "fit-bayes needs --burnin or a config"))?;
    let mut c = base.unwrap_or_else(|| MCMCConfig::new(iters, burnin, seed));
    c.iterations = iters;
    c.burn_in = burnin;
    c.seed = seed;
    if let Some(t) = a.thin {
        c.thin = t;
    }
    c.validate()?;
    let prior: PriorSpec = match &a.prior {
        Some(p) => read_json(p)?,
        None => PriorSpec::default(),
    };
    let truth = match &a.truth {
        Some(p) => Some(read_measure(p, Some(&shape))?),
        None => None,
    };
    let chain = bayes::run_gibbs(&c, &prior, &data, &shape, a.k)?;
    let mut config = json!({ "model": shape, "mcmc": c, "prior": prior, "k": a.k, "data": a.data, "n": data.len() });
    if let Some(g0) = &truth {
        let scale = DispersionScale::Eta;
        config["posterior_w1"] = serde_json::to_value(bayes::posterior_w1(&chain, g0, scale)?)
            .map_err(|e| Failure::runtime("json", e.to_string()))?;
    }
    let m = meta("fit-bayes", config, Some(seed), Some(threads), started);
    let file = fs::File::create(&a.out).map_err(|e| io_failure(&a.out, e))?;
    chain.write_jsonl(std::io::BufWriter::new(file), &m)?;
    Ok(())
}

fn wasserstein(a: WassersteinArgs, started: Instant) -> Outcome<()> {
    let g = read_measure(&a.a, None)?;
    let h = read_measure(&a.b, None)?;
    if a.r == 0 {
        return Err(Failure::validation("invalid_parameter", "r must be >= 1"));
    }
    let (w, plan) = measures::wasserstein(&g, &h, a.r)?;
    println!("{w}");
    if let Some(out) = &a.out {
        let config = json!({ "a": g, "b": h, "r": a.r });
        write_json(
            out,
            &json!({ "meta": meta("wasserstein", config, None, None, started), "distance": w, "plan": plan }),
        )?;
    }
    Ok(())
}

fn distance(a: DistanceArgs, threads: usize, started: Instant) -> Outcome<()> {
    let seed = require_seed(a.seed, "distance")?;
    let shape = read_shape(&a.model)?;
    let g = read_measure(&a.a, Some(&shape))?;
    let h = read_measure(&a.b, Some(&shape))?;
    let px: CovariateDistribution = read_json(&a.covariates)?;
    px.validate()?;
    if a.mc_points == 0 {
        return Err(Failure::validation("invalid_parameter", "mc_points must be >= 1"));
    }
    let ma = || MixtureRegressionModel::new(shape.clone(), g.clone());
    let mb = || MixtureRegressionModel::new(shape.clone(), h.clone());
    let (name, est) = match a.metric {
        Metric::Tv => ("expected_total_variation", model::expected_total_variation(&ma()?, &mb()?, &px, a.mc_points, seed)?),
        Metric::Hellinger2 => ("expected_hellinger_sq", model::expected_hellinger_sq(&ma()?, &mb()?, &px, a.mc_points, seed)?),
        Metric::Prediction => ("prediction_error", model::prediction_error(&g, &h, &shape, &px, a.r, a.mc_points, seed)?),
    };
    println!("{}", est.value);
    if let Some(out) = &a.out {
        let config = json!({ "model": shape, "a": g, "b": h, "covariates": px, "metric": name, "r": a.r, "mc_points": a.mc_points });
        write_json(
            out,
            &json!({ "meta": meta("distance", config, Some(seed), Some(threads), started), "metric": name, "estimate": est }),
        )?;
    }
    Ok(())
}

fn parse_range(s: &str) -> Outcome<Vec<Vec<f64>>> {
    let bad = || Failure::validation("invalid_range", format!("expected lo:hi:points, got {s:?}"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let points: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) || points == 0 {
        return Err(bad());
    }
    Ok(identifiability::linear_grid(lo, hi, points))
}

fn check_identifiability(a: IdentArgs, started: Instant) -> Outcome<()> {
    let shape = read_shape(&a.model)?;
    let g = read_measure(&a.atoms, Some(&shape))?;
    let grid = match (&a.grid, &a.x_range) {
        (Some(p), _) => read_json::<GridSpec>(p)?,
        (None, Some(r)) => GridSpec::new(parse_range(r)?),
        (None, None) => return Err(Failure::validation("grid_required", "give --x-range or --grid")),
    };
    let report = identifiability::check(&shape, &g, a.order, &grid)?;
    let config = json!({ "model": shape, "atoms": g, "order": a.order, "grid": grid });
    write_json(
        &a.report,
        &json!({ "meta": meta("check-identifiability", config, None, None, started), "report": report }),
    )
}

fn experiment(a: ExperimentArgs, threads: usize, started: Instant) -> Outcome<()> {
    let text = read_text(&a.spec)?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| Failure::validation("schema", format!("{}: {e}", a.spec.display())))?;
    if raw.get("seed").is_none_or(Value::is_null) {
        return Err(Failure::validation("seed_required", "experiment specs must carry a seed"));
    }
    let spec: ExperimentSpec =
        serde_json::from_value(raw).map_err(|e| Failure::validation("schema", format!("{}: {e}", a.spec.display())))?;
    spec.validate()?;
    let data = match &a.data {
        Some(p) => Some(read_data(p)?),
        None => None,
    };
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let result = experiments::run(&spec, data.as_ref())?;
    let records = a.out.join("records.csv");
    let file = fs::File::create(&records).map_err(|e| io_failure(&records, e))?;
    result.write_records_csv(std::io::BufWriter::new(file))?;
    let config = json!({ "spec": spec, "data": a.data });
    let m = meta("experiment", config, Some(spec.seed), Some(threads), started);
    write_json(&a.out.join("summary.json"), &json!({ "meta": m, "summary": result.summary }))?;
    write_json(&a.out.join("meta.json"), &json!({ "meta": m, "streams": experiments::stream_tags() }))
}
