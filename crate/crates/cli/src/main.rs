use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use stgnn::baselines::{run_baseline, ArimaBaselineConfig, ArimaOrder, Method};
use stgnn::data_ingest::{
    compute_deltas, open, parse_cases, parse_populations, parse_trends, read_json, write_json,
    CaseTable, MobilityTrends, Warnings,
};
use stgnn::days::{parse_date, DayRange, DaySpan};
use stgnn::dp_mobility::{
    aggregate_weekly, parse_flows, parse_trips, privacy_report, privatize, write_flows, FlowTable,
    PrivacyParams,
};
use stgnn::evaluation::{evaluate, EvalScope, ModelMetrics, PredictionSet};
use stgnn::gnn_model::{forecast_days, train, ModelParams, TrainConfig};
use stgnn::st_graph::{build_graph, read_bundle, write_bundle, GraphConfig};
use stgnn::synth::{simulate, write_dataset, EpidemicParams};
use stgnn::{Error, Execution, Result};

/// Spatio-temporal graph forecasting of county case counts.
#[derive(Parser, Debug)]
#[command(name = "stgnn", version)]
struct Cli {
    /// Only print errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic dataset (cases, trips, trends, populations).
    Simulate(SimulateArgs),
    /// Parse CSV inputs into JSON tables.
    Ingest(IngestArgs),
    /// Aggregate trips into weekly flows and privatize them.
    DpAggregate(DpArgs),
    /// Build the daily graph layers and features.
    BuildGraph(GraphArgs),
    /// Train the graph model.
    Train(TrainArgs),
    /// Forecast next-day cases with a trained model.
    Forecast(ForecastArgs),
    /// Run a baseline forecaster.
    Baseline(BaselineArgs),
    /// Score prediction files against case truth.
    Evaluate(EvaluateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Ingest(_) => "ingest",
            Command::DpAggregate(_) => "dp-aggregate",
            Command::BuildGraph(_) => "build-graph",
            Command::Train(_) => "train",
            Command::Forecast(_) => "forecast",
            Command::Baseline(_) => "baseline",
            Command::Evaluate(_) => "evaluate",
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long, default_value_t = 50)]
    counties: usize,
    /// Last simulated day.
    #[arg(long, default_value_t = 150)]
    horizon: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct IngestArgs {
    #[arg(long)]
    cases: PathBuf,
    #[arg(long)]
    trends: Option<PathBuf>,
    /// Weekly flows CSV.
    #[arg(long)]
    flows: Option<PathBuf>,
    /// Flows CSV holds raw integral counts rather than privatized ones.
    #[arg(long)]
    raw: bool,
    /// `fips,population` CSV used to rank counties for evaluation.
    #[arg(long)]
    populations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct DpArgs {
    #[arg(long, default_value_t = 0.66)]
    epsilon: f64,
    #[arg(long, default_value_t = 100.0)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trips CSV.
    input: PathBuf,
    /// Privatized flows CSV.
    output: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GraphArgs {
    /// Case table JSON from `ingest`.
    #[arg(long)]
    cases: PathBuf,
    /// Trends JSON from `ingest`; missing trends read as baseline.
    #[arg(long)]
    trends: Option<PathBuf>,
    /// Flow table JSON from `ingest`, or a privatized flows CSV.
    #[arg(long)]
    flows: PathBuf,
    #[arg(long, default_value_t = 32)]
    k: usize,
    #[arg(long, default_value_t = 7)]
    window: usize,
    #[arg(long, default_value = "2020-02-22")]
    start: String,
    #[arg(long, default_value = "2020-05-31")]
    end: String,
    /// Normalization window `a:b` in day indices.
    #[arg(long, default_value = "59:120")]
    norm_days: DayRange,
    /// Bundle directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Training config JSON; absent fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    graph: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ForecastArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    /// Single forecast origin.
    #[arg(long, conflicts_with = "days")]
    day: Option<u32>,
    /// Forecast origins `a:b`.
    #[arg(long)]
    days: Option<DayRange>,
    #[arg(long, default_value = "gnn")]
    name: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BaselineArgs {
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long)]
    cases: PathBuf,
    #[arg(long, default_value = "120:150")]
    days: DayRange,
    /// ARIMA order `p,d,q`.
    #[arg(long, default_value = "7,1,3")]
    order: ArimaOrder,
    /// First day of each county's fitted ARIMA series.
    #[arg(long, default_value_t = 59)]
    fit_start: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    /// Prediction files; repeat for several models.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 20)]
    top: usize,
    #[arg(long, default_value = "120:150")]
    days: DayRange,
    #[arg(long)]
    out: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    match s {
        "prev-cases" => Ok(Method::PrevCases),
        "prev-delta" => Ok(Method::PrevDelta),
        "arima" => Ok(Method::Arima),
        _ => Err(format!(
            "unknown method {s:?} (prev-cases, prev-delta, arima)"
        )),
    }
}

fn warn_all(warnings: &Warnings) {
    for w in warnings {
        log::warn!("{w}");
    }
}

fn parent_dir(file: &Path) -> &Path {
    file.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}

#[derive(Serialize)]
struct Echo<'a, T: Serialize> {
    subcommand: &'a str,
    version: &'a str,
    args: &'a T,
    #[serde(skip_serializing_if = "Option::is_none")]
    resolved: Option<serde_json::Value>,
}

fn echo<T: Serialize>(
    dir: &Path,
    name: &str,
    args: &T,
    resolved: Option<serde_json::Value>,
) -> Result<()> {
    write_json(
        &dir.join(format!("config.{name}.json")),
        &Echo {
            subcommand: name,
            version: env!("CARGO_PKG_VERSION"),
            args,
            resolved,
        },
    )
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn load_flows(path: &Path, raw: bool) -> Result<FlowTable> {
    if path.extension().is_some_and(|e| e == "json") {
        return read_json(path);
    }
    let (table, warnings) = parse_flows(open(path)?, !raw)?;
    warn_all(&warnings);
    Ok(table)
}

fn run_simulate(a: &SimulateArgs) -> Result<()> {
    let defaults = EpidemicParams::default();
    let params = EpidemicParams {
        n_counties: a.counties,
        horizon: a.horizon,
        seed: a.seed,
        beta: a.beta.unwrap_or(defaults.beta),
        kappa: a.kappa.unwrap_or(defaults.kappa),
        ..defaults
    };
    let sim = simulate(&params)?;
    write_dataset(&a.out, &sim)?;
    log::info!(
        "simulated {} counties through day {} into {}",
        a.counties,
        a.horizon,
        a.out.display()
    );
    echo(&a.out, "simulate", a, None)
}

fn run_ingest(a: &IngestArgs) -> Result<()> {
    let (cases, warnings) = parse_cases(open(&a.cases)?)?;
    warn_all(&warnings);
    let mut cases = compute_deltas(cases);
    if let Some(p) = &a.populations {
        cases.populations = parse_populations(open(p)?)?;
    }
    write_json(&a.out.join("cases.json"), &cases)?;
    if let Some(p) = &a.trends {
        let (trends, warnings) = parse_trends(open(p)?)?;
        warn_all(&warnings);
        write_json(&a.out.join("trends.json"), &trends)?;
    }
    if let Some(p) = &a.flows {
        write_json(&a.out.join("flows.json"), &load_flows(p, a.raw)?)?;
    }
    log::info!("ingested {} counties into {}", cases.len(), a.out.display());
    echo(&a.out, "ingest", a, None)
}

fn run_dp(a: &DpArgs) -> Result<()> {
    let params = PrivacyParams::new(a.epsilon, a.threshold)?;
    let trips = parse_trips(open(&a.input)?)?;
    let raw = aggregate_weekly(&trips);
    let published = privatize(&raw, &params, a.seed)?;
    write_flows(create(&a.output)?, &published)?;
    let report = privacy_report(&params, raw.len());
    log::info!(
        "{} of {} weekly flows published at epsilon {}",
        published.len(),
        raw.len(),
        a.epsilon
    );
    echo(
        parent_dir(&a.output),
        "dp-aggregate",
        a,
        Some(serde_json::to_value(report)?),
    )
}

fn run_build_graph(a: &GraphArgs) -> Result<()> {
    let cases: CaseTable = read_json(&a.cases)?;
    let trends: MobilityTrends = match &a.trends {
        Some(p) => read_json(p)?,
        None => {
            log::warn!("no trends given; mobility features read as baseline");
            MobilityTrends::default()
        }
    };
    let flows = load_flows(&a.flows, false)?;
    let mut span = DaySpan::from_dates(parse_date(&a.start)?, parse_date(&a.end)?)?;
    let last = cases
        .last_day
        .ok_or_else(|| Error::Validation("case table is empty".into()))?;
    if span.end > last {
        log::warn!("span end {} clamped to the last case day {last}", span.end);
        span = DaySpan::new(span.start, last)?;
    }
    let config = GraphConfig {
        span,
        temporal_depth: a.window,
        k: a.k,
        normalization_window: a.norm_days,
    };
    let (graph, warnings) = build_graph(&cases, &trends, &flows, config)?;
    warn_all(&warnings);
    write_bundle(&a.out, &graph)?;
    log::info!(
        "{} layers over {} counties",
        graph.layers.len(),
        graph.n_nodes()
    );
    echo(
        &a.out,
        "build-graph",
        a,
        Some(serde_json::to_value(config)?),
    )
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let mut config: TrainConfig = match &a.config {
        Some(p) => read_json(p).map_err(|e| match e {
            Error::Json(e) => Error::Config(format!("{}: {e}", p.display())),
            other => other,
        })?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(s) = a.steps {
        config.max_steps = s;
    }
    let graph = read_bundle(&a.graph)?;
    if graph.config.k != config.k {
        log::warn!(
            "graph was built with k = {}, config says {}",
            graph.config.k,
            config.k
        );
    }
    let outcome = train(&graph, &config)?;
    write_json(&a.out, &outcome.params)?;
    let dir = parent_dir(&a.out);
    write_json(&dir.join("train_history.json"), &outcome.history)?;
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        log::info!(
            "loss {:.4} -> {:.4} over {} steps",
            first.loss,
            last.loss,
            config.max_steps
        );
    }
    echo(dir, "train", a, Some(serde_json::to_value(&config)?))
}

fn run_forecast(a: &ForecastArgs) -> Result<()> {
    let params: ModelParams = read_json(&a.model)?;
    let graph = read_bundle(&a.graph)?;
    let days = match (a.day, a.days) {
        (Some(d), None) => DayRange {
            start: d,
            end: d + 1,
        },
        (None, Some(r)) => r,
        _ => return Err(Error::Usage("give --day or --days".into())),
    };
    let predictions = forecast_days(&params, &graph, days, Execution::default())?;
    write_json(
        &a.out,
        &PredictionSet {
            model: a.name.clone(),
            predictions,
        },
    )?;
    echo(parent_dir(&a.out), "forecast", a, None)
}

fn run_baseline_cmd(a: &BaselineArgs) -> Result<()> {
    let cases: CaseTable = read_json(&a.cases)?;
    let arima = ArimaBaselineConfig {
        order: a.order,
        fit_start: a.fit_start,
        ..Default::default()
    };
    let (predictions, warnings) =
        run_baseline(a.method, &cases, a.days, arima, Execution::default())?;
    warn_all(&warnings);
    write_json(
        &a.out,
        &PredictionSet {
            model: a.method.name().into(),
            predictions,
        },
    )?;
    echo(
        parent_dir(&a.out),
        &format!("baseline.{}", a.method.name()),
        a,
        None,
    )
}

fn run_evaluate(a: &EvaluateArgs) -> Result<()> {
    let truth: CaseTable = read_json(&a.truth)?;
    let sets: Vec<PredictionSet> = a.pred.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let (report, warnings) = evaluate(
        &sets,
        &truth,
        EvalScope {
            top: a.top,
            days: a.days,
        },
    )?;
    warn_all(&warnings);
    write_json(&a.out, &report)?;
    let table: BTreeMap<&str, &ModelMetrics> = report
        .models
        .iter()
        .map(|m| (m.model.as_str(), m))
        .collect();
    for (name, m) in table {
        let (r, c, dr, dc) = (m.rmsle, m.corr, m.delta_rmsle, m.delta_corr);
        let fmt = |v: Option<f64>| v.map_or("NaN".to_string(), |v| format!("{v:.4}"));
        log::info!(
            "{name:12} rmsle {r:.4} corr {} delta_rmsle {dr:.4} delta_corr {}",
            fmt(c),
            fmt(dc)
        );
    }
    echo(parent_dir(&a.out), "evaluate", a, None)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Ingest(a) => run_ingest(a),
        Command::DpAggregate(a) => run_dp(a),
        Command::BuildGraph(a) => run_build_graph(a),
        Command::Train(a) => run_train(a),
        Command::Forecast(a) => run_forecast(a),
        Command::Baseline(a) => run_baseline_cmd(a),
        Command::Evaluate(a) => run_evaluate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Error
        } else {
            log::LevelFilter::Info
        })
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{} failed: {e}", cli.command.name());
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
