//! Replication harness: learns quadrant thresholds across many simulated
//! paths and aggregates threshold means, variances, and MSEs (plus the
//! n-scaled versions) per sample size, with a log-log rate diagnostic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::build_lagged;
use crate::error::{Error, Result};
use crate::propensity::PropensityModel;
use crate::search::{learn_quadrant_2d, ClassKind, SearchConfig};
use crate::simulate::{simulate_stream, DgpSpec, DgpVariant};
use crate::util::{pairwise_mean, pairwise_sum};
use crate::welfare::PolicyRule;

/// Monte Carlo configuration. The spec's `length` field is overridden by
/// each sample size (a path of n+1 periods yields n estimation rows);
/// replication r draws from stream r of the spec's seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub spec: DgpSpec,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub search: SearchConfig,
    pub workers: usize,
    /// Retain per-replication thresholds in the summary.
    #[serde(default)]
    pub keep_raw: bool,
}

impl McConfig {
    fn validate(&self) -> Result<(f64, f64)> {
        if self.replications < 2 {
            return Err(Error::InvalidSpec("replications must be >= 2".into()));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.iter().any(|n| *n < 10) {
            return Err(Error::InvalidSpec("sample sizes must all be >= 10".into()));
        }
        if self.workers < 1 {
            return Err(Error::InvalidSpec("workers must be >= 1".into()));
        }
        match &self.search.class_kind {
            ClassKind::Quadrant { cols } if cols.len() == 2 => {}
            other => {
                return Err(Error::UnsupportedSpec(format!(
                    "the replication table needs a 2-column quadrant class, got {other:?}"
                )))
            }
        }
        match &self.spec.variant {
            DgpVariant::QuadrantAr { b1, b2, .. } => Ok((*b1, *b2)),
            DgpVariant::MarkovSwitch { .. } => Err(Error::UnsupportedSpec(
                "the replication table tracks quadrant thresholds; use the quadrant process".into(),
            )),
        }
    }
}

/// Aggregates for one sample size. Variances and MSEs use the population
/// (1/R) divisor so that `mse = var + bias^2` holds exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub n: usize,
    pub mean_b1: f64,
    pub mean_b2: f64,
    pub var_b1: f64,
    pub var_b2: f64,
    pub mse_b1: f64,
    pub mse_b2: f64,
    pub n_var_b1: f64,
    pub n_var_b2: f64,
    pub n_mse_b1: f64,
    pub n_mse_b2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub truth_b1: f64,
    pub truth_b2: f64,
    pub replications: usize,
    pub rows: Vec<McRow>,
    /// Per-replication (b1, b2) draws, one vector per sample size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_thresholds: Option<Vec<Vec<(f64, f64)>>>,
}

fn moments(draws: &[f64], truth: f64) -> (f64, f64, f64) {
    let r = draws.len() as f64;
    let mean = pairwise_mean(draws);
    let dev: Vec<f64> = draws.iter().map(|b| (b - mean) * (b - mean)).collect();
    let var = pairwise_sum(&dev) / r;
    let err: Vec<f64> = draws.iter().map(|b| (b - truth) * (b - truth)).collect();
    let mse = pairwise_sum(&err) / r;
    (mean, var, mse)
}

/// Runs the replication table: for each sample size n and replication r,
/// simulate n+1 periods on stream r, learn the two thresholds, aggregate.
/// Deterministic for a given config regardless of the worker count; any
/// replication error aborts the run carrying its stream id.
pub fn run_table(cfg: &McConfig) -> Result<MonteCarloSummary> {
    let (truth_b1, truth_b2) = cfg.validate()?;
    let cols = match &cfg.search.class_kind {
        ClassKind::Quadrant { cols } => cols.clone(),
        _ => unreachable!("validated above"),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidSpec(format!("worker pool: {e}")))?;

    let mut rows = Vec::with_capacity(cfg.sample_sizes.len());
    let mut raw_all = Vec::new();
    for &n in &cfg.sample_sizes {
        let draws: Vec<(f64, f64)> = pool.install(|| {
            (0..cfg.replications as u64)
                .into_par_iter()
                .map(|r| {
                    let run = || -> Result<(f64, f64)> {
                        let spec = DgpSpec { length: n + 1, ..cfg.spec.clone() };
                        let path = simulate_stream(&spec, r)?;
                        let prop = match &cfg.spec.variant {
                            DgpVariant::QuadrantAr { e, .. } => PropensityModel::constant(*e)?,
                            _ => unreachable!("validated above"),
                        };
                        let lagged = build_lagged(&path, &cols)?;
                        let result =
                            learn_quadrant_2d(&lagged, &prop, &cols, &cfg.search.objective)?;
                        match &result.best_rule {
                            PolicyRule::Quadrant(q) => Ok((q.thresholds[0], q.thresholds[1])),
                            other => Err(Error::InvalidSpec(format!(
                                "quadrant search returned {other:?}"
                            ))),
                        }
                    };
                    run().map_err(|e| Error::Replication { stream: r, source: Box::new(e) })
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let b1s: Vec<f64> = draws.iter().map(|d| d.0).collect();
        let b2s: Vec<f64> = draws.iter().map(|d| d.1).collect();
        let (mean_b1, var_b1, mse_b1) = moments(&b1s, truth_b1);
        let (mean_b2, var_b2, mse_b2) = moments(&b2s, truth_b2);
        let nf = n as f64;
        rows.push(McRow {
            n,
            mean_b1,
            mean_b2,
            var_b1,
            var_b2,
            mse_b1,
            mse_b2,
            n_var_b1: nf * var_b1,
            n_var_b2: nf * var_b2,
            n_mse_b1: nf * mse_b1,
            n_mse_b2: nf * mse_b2,
        });
        if cfg.keep_raw {
            raw_all.push(draws);
        }
    }
    Ok(MonteCarloSummary {
        truth_b1,
        truth_b2,
        replications: cfg.replications,
        rows,
        raw_thresholds: cfg.keep_raw.then_some(raw_all),
    })
}

/// Log-log convergence diagnostic: OLS slope of log(MSE) on log(n) per
/// threshold, with residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateDiagnostic {
    pub slope_b1: f64,
    pub slope_b2: f64,
    pub residuals_b1: Vec<f64>,
    pub residuals_b2: Vec<f64>,
}

fn ols_log_slope(ns: &[f64], mses: &[f64]) -> (f64, Vec<f64>) {
    let xs: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = mses.iter().map(|m| m.ln()).collect();
    let x_bar = pairwise_mean(&xs);
    let y_bar = pairwise_mean(&ys);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - x_bar) * (y - y_bar)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - x_bar) * (x - x_bar)).sum();
    let slope = sxy / sxx;
    let intercept = y_bar - slope * x_bar;
    let residuals = xs.iter().zip(&ys).map(|(x, y)| y - (intercept + slope * x)).collect();
    (slope, residuals)
}

pub fn rate_diagnostic(summary: &MonteCarloSummary) -> Result<RateDiagnostic> {
    if summary.rows.len() < 3 {
        return Err(Error::InsufficientPoints(format!(
            "rate diagnostic needs >= 3 sample sizes, got {}",
            summary.rows.len()
        )));
    }
    let ns: Vec<f64> = summary.rows.iter().map(|r| r.n as f64).collect();
    let mse1: Vec<f64> = summary.rows.iter().map(|r| r.mse_b1).collect();
    let mse2: Vec<f64> = summary.rows.iter().map(|r| r.mse_b2).collect();
    let (slope_b1, residuals_b1) = ols_log_slope(&ns, &mse1);
    let (slope_b2, residuals_b2) = ols_log_slope(&ns, &mse2);
    Ok(RateDiagnostic { slope_b1, slope_b2, residuals_b1, residuals_b2 })
}

/// Aligned plain-text table: per sample size, the threshold means and the
/// n-scaled variances and MSEs.
pub fn format_table(summary: &MonteCarloSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>6} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
        "n", "mean_b1", "n*var_b1", "n*mse_b1", "mean_b2", "n*var_b2", "n*mse_b2"
    ));
    for row in &summary.rows {
        out.push_str(&format!(
            "{:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
            row.n, row.mean_b1, row.n_var_b1, row.n_mse_b1, row.mean_b2, row.n_var_b2, row.n_mse_b2
        ));
    }
    out
}
