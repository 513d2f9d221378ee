//! `tewm` — simulate, fit propensities, learn policy rules, evaluate
//! welfare, and run replication tables from the command line.
//!
//! Every run prints a self-describing JSON report (schema 1) to stdout with
//! the resolved config, library version, and seed; errors go to stderr as
//! one structured JSON line. Exit status: 0 ok, 1 validation error, 2
//! numerical error.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use tewm_core::data::{build_lagged, load_csv, write_csv, ColumnSpec, LaggedRow, TimeSeries};
use tewm_core::error::{Error, Result};
use tewm_core::montecarlo::{format_table, run_table, McConfig};
use tewm_core::propensity::{
    check_overlap, fit_local_logit, fit_logit, silverman_bandwidth, KernelSpec, PropensityModel,
};
use tewm_core::search::{
    learn_discrete, learn_finite, learn_quadrant_2d, learn_quadrant_nd, ClassKind, Objective,
    SearchConfig, TieBreak,
};
use tewm_core::simulate::{simulate_stream, DgpSpec, DgpVariant};
use tewm_core::welfare::{
    kernel_welfare_bandwidth, welfare_discrete_conditional, welfare_kernel_conditional,
    welfare_unconditional, DiscreteMap, PolicyRule,
};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "tewm", version, about = "Time-series policy learning by empirical welfare maximization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic series and write it as CSV.
    Simulate(SimulateArgs),
    /// Fit a propensity model on a CSV series.
    FitPropensity(FitArgs),
    /// Learn a policy rule by empirical welfare maximization.
    Learn(LearnArgs),
    /// Evaluate the welfare of a given rule.
    Evaluate(EvaluateArgs),
    /// Run the replication table across sample sizes.
    Montecarlo(MontecarloArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// quadrant-ar | markov-switch
    #[arg(long, default_value = "quadrant-ar")]
    dgp: String,
    #[arg(long, default_value_t = 0.5)]
    phi: f64,
    #[arg(long, default_value_t = 2.5)]
    b1: f64,
    #[arg(long, default_value_t = 0.52)]
    b2: f64,
    #[arg(long, default_value_t = 0.5)]
    e: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_eps: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_z: f64,
    #[arg(long, default_value_t = 0.7)]
    p: f64,
    #[arg(long, default_value_t = 0.7)]
    q: f64,
    #[arg(long, default_value_t = 0.0)]
    beta0: f64,
    #[arg(long, default_value_t = 1.0)]
    beta1: f64,
    #[arg(long, default_value_t = 0.5)]
    beta2: f64,
    /// Series length T (the CSV gets T rows; learning uses T-1 lagged rows).
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Stream id within the seed (replications use one stream each).
    #[arg(long, default_value_t = 0)]
    stream: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// logit | local-logit:h=<h>
    #[arg(long)]
    propensity: String,
    /// Columns of X_{t-1} the model conditions on (default: all).
    #[arg(long)]
    prop_cols: Option<String>,
    #[arg(long, default_value_t = 0.05)]
    kappa: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// discrete | quadrant | two-period | finite
    #[arg(long)]
    class: String,
    /// Policy columns for the quadrant class, e.g. y_lag,z1_lag.
    #[arg(long)]
    cols: Option<String>,
    /// JSON file with an array of rules for the finite class.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// unconditional | discrete:<w> | kernel:x=<v1,v2,...>[:h=<h>][:kernel=<name>]
    #[arg(long, default_value = "unconditional")]
    objective: String,
    /// constant:<e> | logit | local-logit:h=<h>
    #[arg(long)]
    propensity: String,
    /// Columns of X_{t-1} the propensity and kernel smoothing condition on
    /// (default: all; local-logit needs exactly one).
    #[arg(long)]
    prop_cols: Option<String>,
    /// Starting state for the two-period class.
    #[arg(long)]
    state: Option<u8>,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    kappa: f64,
    /// Scale c of the default kernel bandwidth h = c * (T-1)^(-1/5).
    #[arg(long)]
    kernel_scale: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// JSON file with the rule to evaluate.
    #[arg(long)]
    rule: PathBuf,
    #[arg(long, default_value = "unconditional")]
    objective: String,
    #[arg(long)]
    propensity: String,
    #[arg(long)]
    prop_cols: Option<String>,
    #[arg(long, default_value_t = 0.05)]
    kappa: f64,
    #[arg(long)]
    kernel_scale: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MontecarloArgs {
    /// Flat key=value config file mirroring the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sample_sizes: Option<String>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    b1: Option<f64>,
    #[arg(long)]
    b2: Option<f64>,
    #[arg(long)]
    e: Option<f64>,
    #[arg(long)]
    sigma_eps: Option<f64>,
    #[arg(long)]
    sigma_z: Option<f64>,
    #[arg(long)]
    cols: Option<String>,
    #[arg(long)]
    keep_raw: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let err = Error::Usage(e.to_string());
                eprintln!("{}", json!({"error": err.code(), "detail": e.to_string()}));
                return ExitCode::from(1);
            }
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.code(), "detail": e.to_string()}));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::FitPropensity(args) => cmd_fit(args),
        Command::Learn(args) => cmd_learn(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Montecarlo(args) => cmd_montecarlo(args),
    }
}

fn report(command: &str, seed: Option<u64>, config: Value, result: Value, diagnostics: Option<Value>) -> Value {
    let mut map = serde_json::Map::new();
    map.insert("schema".into(), json!(SCHEMA_VERSION));
    map.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    map.insert("command".into(), json!(command));
    if let Some(seed) = seed {
        map.insert("seed".into(), json!(seed));
    }
    map.insert("config".into(), config);
    map.insert("result".into(), result);
    if let Some(d) = diagnostics {
        map.insert("diagnostics".into(), d);
    }
    Value::Object(map)
}

fn emit(report: &Value, out: Option<&PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    println!("{text}");
    if let Some(path) = out {
        fs::write(path, &text)?;
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let variant = match args.dgp.as_str() {
        "quadrant-ar" => DgpVariant::QuadrantAr {
            phi: args.phi,
            b1: args.b1,
            b2: args.b2,
            e: args.e,
            sigma_eps: args.sigma_eps,
            sigma_z: args.sigma_z,
        },
        "markov-switch" => DgpVariant::MarkovSwitch {
            p: args.p,
            q: args.q,
            beta0: args.beta0,
            beta1: args.beta1,
            beta2: args.beta2,
            sigma_eps: args.sigma_eps,
        },
        other => return Err(Error::Usage(format!("unknown dgp `{other}`"))),
    };
    let spec = DgpSpec { variant, seed: args.seed, length: args.n };
    let series = simulate_stream(&spec, args.stream)?;
    write_csv(&series, &args.out)?;
    let config = json!({
        "dgp": serde_json::to_value(&spec)?,
        "stream": args.stream,
        "out": args.out.display().to_string(),
    });
    let result = json!({
        "rows": series.len(),
        "covariates": series.k(),
        "treated_share": series.treatments().iter().map(|w| *w as f64).sum::<f64>() / series.len() as f64,
    });
    emit(&report("simulate", Some(args.seed), config, result, None), None)
}

/// Loads the series and builds lagged rows with the propensity conditioning
/// columns (default: every lagged column).
fn load_rows(input: &PathBuf, prop_cols: &Option<String>) -> Result<(TimeSeries, ColumnSpec, Vec<LaggedRow>)> {
    let series = load_csv(input)?;
    let spec = match prop_cols {
        Some(text) => ColumnSpec::parse(text)?,
        None => {
            let mut names = vec!["w_lag".to_string(), "y_lag".to_string()];
            for j in 0..series.k() {
                names.push(format!("z{}_lag", j + 1));
            }
            ColumnSpec::parse(&names.join(","))?
        }
    };
    let rows = build_lagged(&series, &spec)?;
    Ok((series, spec, rows))
}

/// Parses `constant:<e> | logit | local-logit:h=<h>[:kernel=<name>]`,
/// fitting on the rows when required.
fn resolve_propensity(spec_text: &str, rows: &[LaggedRow], prop_cols: &ColumnSpec) -> Result<PropensityModel> {
    let parts: Vec<&str> = spec_text.split(':').collect();
    match parts[0] {
        "constant" => {
            let e: f64 = parts
                .get(1)
                .ok_or_else(|| Error::Usage("constant propensity needs a value, e.g. constant:0.5".into()))?
                .parse()
                .map_err(|_| Error::Usage(format!("bad propensity value in `{spec_text}`")))?;
            PropensityModel::constant(e)
        }
        "logit" => fit_logit(rows),
        "local-logit" => {
            if prop_cols.len() != 1 {
                return Err(Error::Usage(format!(
                    "local-logit needs exactly one conditioning column via --prop-cols, got {}",
                    prop_cols.len()
                )));
            }
            let mut h = None;
            let mut kernel = KernelSpec::default();
            for part in &parts[1..] {
                match part.split_once('=') {
                    Some(("h", v)) => {
                        h = Some(v.parse::<f64>().map_err(|_| {
                            Error::Usage(format!("bad bandwidth in `{spec_text}`"))
                        })?)
                    }
                    Some(("kernel", v)) => kernel = KernelSpec::parse(v)?,
                    _ => return Err(Error::Usage(format!("bad local-logit option `{part}`"))),
                }
            }
            let h = h.unwrap_or_else(|| {
                let xs: Vec<f64> = rows.iter().map(|r| r.x_prev[0]).collect();
                silverman_bandwidth(&xs)
            });
            fit_local_logit(rows, 0, h, kernel)
        }
        other => Err(Error::Usage(format!("unknown propensity spec `{other}`"))),
    }
}

/// Parses `unconditional | discrete:<w> | kernel:x=..[:h=..][:kernel=..]`.
fn resolve_objective(
    text: &str,
    rows: &[LaggedRow],
    kernel_scale: Option<f64>,
) -> Result<Objective> {
    let parts: Vec<&str> = text.split(':').collect();
    match parts[0] {
        "unconditional" => Ok(Objective::Unconditional),
        "discrete" => {
            let w: u8 = parts
                .get(1)
                .ok_or_else(|| Error::Usage("discrete objective needs a state, e.g. discrete:1".into()))?
                .parse()
                .map_err(|_| Error::Usage(format!("bad state in `{text}`")))?;
            if w > 1 {
                return Err(Error::Usage("state must be 0 or 1".into()));
            }
            Ok(Objective::DiscreteConditional { w })
        }
        "kernel" => {
            let mut x = None;
            let mut h = None;
            let mut kernel = KernelSpec::default();
            for part in &parts[1..] {
                match part.split_once('=') {
                    Some(("x", v)) => {
                        x = Some(
                            v.split(',')
                                .map(|s| s.parse::<f64>())
                                .collect::<std::result::Result<Vec<f64>, _>>()
                                .map_err(|_| Error::Usage(format!("bad conditioning point in `{text}`")))?,
                        )
                    }
                    Some(("h", v)) => {
                        h = Some(v.parse::<f64>().map_err(|_| {
                            Error::Usage(format!("bad bandwidth in `{text}`"))
                        })?)
                    }
                    Some(("kernel", v)) => kernel = KernelSpec::parse(v)?,
                    _ => return Err(Error::Usage(format!("bad kernel objective option `{part}`"))),
                }
            }
            let x = x.ok_or_else(|| Error::Usage("kernel objective needs x=<v1,v2,...>".into()))?;
            let h = match h {
                Some(h) => h,
                None => {
                    let xs: Vec<f64> = rows.iter().filter_map(|r| r.x_prev.first().copied()).collect();
                    let c = kernel_scale.unwrap_or_else(|| tewm_core::util::sample_sd(&xs));
                    c * (rows.len() as f64).powf(-0.2)
                }
            };
            let _ = kernel_welfare_bandwidth; // same rule, inlined with the c override
            Ok(Objective::KernelConditional { x, h, kernel })
        }
        other => Err(Error::Usage(format!("unknown objective `{other}`"))),
    }
}

fn overlap_diagnostics(model: &PropensityModel, rows: &[LaggedRow], kappa: f64) -> Result<Value> {
    let report = check_overlap(model, rows, kappa)?;
    Ok(serde_json::to_value(&report)?)
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let (_series, prop_cols, rows) = load_rows(&args.input, &args.prop_cols)?;
    let model = resolve_propensity(&args.propensity, &rows, &prop_cols)?;
    let diagnostics = overlap_diagnostics(&model, &rows, args.kappa)?;
    let result = match &model {
        PropensityModel::Logit(m) => serde_json::to_value(m)?,
        other => serde_json::to_value(other)?,
    };
    let config = json!({
        "in": args.input.display().to_string(),
        "propensity": args.propensity,
        "prop_cols": prop_cols.names(),
        "kappa": args.kappa,
    });
    emit(
        &report("fit-propensity", None, config, result, Some(diagnostics)),
        args.out.as_ref(),
    )
}

fn cmd_learn(args: LearnArgs) -> Result<()> {
    let (_series, prop_cols, rows) = load_rows(&args.input, &args.prop_cols)?;
    let prop = resolve_propensity(&args.propensity, &rows, &prop_cols)?;
    let objective = resolve_objective(&args.objective, &rows, args.kernel_scale)?;
    let diagnostics = overlap_diagnostics(&prop, &rows, args.kappa)?;

    let (result_value, class_config) = match args.class.as_str() {
        "discrete" => {
            let result = learn_discrete(&rows, &prop)?;
            (serde_json::to_value(&result)?, json!({"class": "discrete"}))
        }
        "quadrant" => {
            let cols_text = args
                .cols
                .as_ref()
                .ok_or_else(|| Error::Usage("quadrant class needs --cols".into()))?;
            let cols = ColumnSpec::parse(cols_text)?;
            let result = if cols.len() == 2 {
                learn_quadrant_2d(&rows, &prop, &cols, &objective)?
            } else {
                learn_quadrant_nd(&rows, &prop, &cols, &objective, args.restarts, args.seed)?
            };
            (
                serde_json::to_value(&result)?,
                json!({"class": "quadrant", "cols": cols.names(), "restarts": args.restarts}),
            )
        }
        "two-period" => {
            let w = args.state.ok_or_else(|| Error::Usage("two-period class needs --state".into()))?;
            let result = tewm_core::multiperiod::learn_two_period(&rows, &prop, w)?;
            (serde_json::to_value(&result)?, json!({"class": "two-period", "state": w}))
        }
        "finite" => {
            let path = args.rules.as_ref().ok_or_else(|| Error::Usage("finite class needs --rules".into()))?;
            let rules: Vec<PolicyRule> = serde_json::from_str(&fs::read_to_string(path)?)?;
            let result = learn_finite(&rows, &prop, &rules, &objective)?;
            (serde_json::to_value(&result)?, json!({"class": "finite", "rules": rules.len()}))
        }
        other => return Err(Error::Usage(format!("unknown class `{other}`"))),
    };

    let mut config = json!({
        "in": args.input.display().to_string(),
        "objective": serde_json::to_value(&objective)?,
        "propensity": args.propensity,
        "prop_cols": prop_cols.names(),
        "kappa": args.kappa,
        "seed": args.seed,
    });
    config.as_object_mut().unwrap().extend(class_config.as_object().unwrap().clone());
    emit(
        &report("learn", Some(args.seed), config, result_value, Some(diagnostics)),
        args.out.as_ref(),
    )
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let (_series, prop_cols, rows) = load_rows(&args.input, &args.prop_cols)?;
    let prop = resolve_propensity(&args.propensity, &rows, &prop_cols)?;
    let objective = resolve_objective(&args.objective, &rows, args.kernel_scale)?;
    let rule: PolicyRule = serde_json::from_str(&fs::read_to_string(&args.rule)?)?;
    let diagnostics = overlap_diagnostics(&prop, &rows, args.kappa)?;

    let welfare_report = match &objective {
        Objective::Unconditional => welfare_unconditional(&rows, &rule, &prop)?,
        Objective::DiscreteConditional { w } => match &rule {
            PolicyRule::DiscreteMap(map) => welfare_discrete_conditional(&rows, map, &prop, *w)?,
            _ => {
                return Err(Error::Usage(
                    "the discrete-conditional objective evaluates discrete maps".into(),
                ))
            }
        },
        Objective::KernelConditional { x, h, kernel } => {
            welfare_kernel_conditional(&rows, &rule, &prop, x, *h, *kernel)?
        }
    };
    let config = json!({
        "in": args.input.display().to_string(),
        "rule": args.rule.display().to_string(),
        "objective": serde_json::to_value(&objective)?,
        "propensity": args.propensity,
        "prop_cols": prop_cols.names(),
        "kappa": args.kappa,
    });
    emit(
        &report("evaluate", None, config, serde_json::to_value(&welfare_report)?, Some(diagnostics)),
        args.out.as_ref(),
    )
}

/// Flat key=value config file: `#` comments and blank lines ignored.
fn parse_config_file(path: &PathBuf) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("config line {} is not key=value: `{line}`", i + 1)))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn cmd_montecarlo(args: MontecarloArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => BTreeMap::new(),
    };
    // flags override file values; defaults fill the rest
    let lookup_f64 = |flag: Option<f64>, key: &str, default: f64| -> Result<f64> {
        match flag {
            Some(v) => Ok(v),
            None => match file.get(key) {
                Some(text) => text
                    .parse()
                    .map_err(|_| Error::Usage(format!("bad `{key}` in config: `{text}`"))),
                None => Ok(default),
            },
        }
    };
    let phi = lookup_f64(args.phi, "phi", 0.5)?;
    let b1 = lookup_f64(args.b1, "b1", 2.5)?;
    let b2 = lookup_f64(args.b2, "b2", 0.52)?;
    let e = lookup_f64(args.e, "e", 0.5)?;
    let sigma_eps = lookup_f64(args.sigma_eps, "sigma-eps", 1.0)?;
    let sigma_z = lookup_f64(args.sigma_z, "sigma-z", 1.0)?;

    let seed = match (args.seed, file.get("seed")) {
        (Some(s), _) => s,
        (None, Some(text)) => text
            .parse()
            .map_err(|_| Error::Usage(format!("bad `seed` in config: `{text}`")))?,
        (None, None) => return Err(Error::Usage("montecarlo requires an explicit seed".into())),
    };
    let replications = match (args.replications, file.get("replications")) {
        (Some(r), _) => r,
        (None, Some(text)) => text
            .parse()
            .map_err(|_| Error::Usage(format!("bad `replications` in config: `{text}`")))?,
        (None, None) => 500,
    };
    let workers = match (args.workers, file.get("workers")) {
        (Some(w), _) => w,
        (None, Some(text)) => text
            .parse()
            .map_err(|_| Error::Usage(format!("bad `workers` in config: `{text}`")))?,
        (None, None) => 8,
    };
    let sizes_text = args
        .sample_sizes
        .or_else(|| file.get("sample-sizes").cloned())
        .unwrap_or_else(|| "500,1000,2000".into());
    let sample_sizes = sizes_text
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<usize>, _>>()
        .map_err(|_| Error::Usage(format!("bad sample sizes `{sizes_text}`")))?;
    let cols_text = args
        .cols
        .or_else(|| file.get("cols").cloned())
        .unwrap_or_else(|| "y_lag,z1_lag".into());
    let keep_raw = args.keep_raw || file.get("keep-raw").map(|v| v == "true").unwrap_or(false);

    let cfg = McConfig {
        spec: DgpSpec {
            variant: DgpVariant::QuadrantAr { phi, b1, b2, e, sigma_eps, sigma_z },
            seed,
            length: 2,
        },
        sample_sizes,
        replications,
        search: SearchConfig {
            class_kind: ClassKind::Quadrant { cols: ColumnSpec::parse(&cols_text)? },
            objective: Objective::Unconditional,
            tie_break: TieBreak::default(),
            restarts: 1,
            seed,
        },
        workers,
        keep_raw,
    };
    let summary = run_table(&cfg)?;
    print!("{}", format_table(&summary));

    let full = report(
        "montecarlo",
        Some(seed),
        serde_json::to_value(&cfg)?,
        serde_json::to_value(&summary)?,
        None,
    );
    fs::write(&args.out, serde_json::to_string_pretty(&full)?)?;
    Ok(())
}
