//! Propensity-score models `e_t(x) = Pr(W_t = 1 | X_{t-1} = x)` and overlap
//! diagnostics.
//!
//! Four model variants are supported: a known constant, a known per-period
//! vector, a logit with a linear index fitted by Newton iterations, and a
//! kernel-weighted local logit for a scalar conditioning variable.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::LaggedRow;
use crate::error::{Error, Result};

/// Kernels with bounded support on [-1, 1]; nonnegative and symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelSpec {
    #[default]
    Epanechnikov,
    Uniform,
    Triangular,
}

impl KernelSpec {
    pub fn eval(self, u: f64) -> f64 {
        let a = u.abs();
        if a > 1.0 {
            return 0.0;
        }
        match self {
            KernelSpec::Epanechnikov => 0.75 * (1.0 - u * u),
            KernelSpec::Uniform => 0.5,
            KernelSpec::Triangular => 1.0 - a,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "epanechnikov" => Ok(KernelSpec::Epanechnikov),
            "uniform" => Ok(KernelSpec::Uniform),
            "triangular" => Ok(KernelSpec::Triangular),
            other => Err(Error::InvalidSpec(format!("unknown kernel `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelSpec::Epanechnikov => "epanechnikov",
            KernelSpec::Uniform => "uniform",
            KernelSpec::Triangular => "triangular",
        }
    }
}

/// Logistic regression with a linear index: logit Pr(w=1|x) = alpha + beta'x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitModel {
    pub alpha: f64,
    pub beta: Vec<f64>,
}

impl LogitModel {
    pub fn probability(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.beta.len() {
            return Err(Error::DimensionMismatch(format!(
                "logit model has {} coefficients, row has {} columns",
                self.beta.len(),
                x.len()
            )));
        }
        let eta = self.alpha + self.beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
        Ok(logistic(eta))
    }
}

/// Local likelihood logit over one conditioning column. Training data is
/// stored and each query point re-solves the kernel-weighted problem, so
/// evaluation is lazy rather than precomputed on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalLogitModel {
    pub bandwidth: f64,
    pub kernel: KernelSpec,
    /// Index of the conditioning column within `x_prev`.
    pub column: usize,
    x: Vec<f64>,
    w: Vec<u8>,
}

impl LocalLogitModel {
    /// Solves the kernel-weighted intercept-only logit at `x` and returns the
    /// fitted probability. With weights K((x_i - x)/h) the maximizer has the
    /// closed form logistic(alpha_x) = sum(K_i w_i) / sum(K_i).
    pub fn evaluate_at(&self, x: f64) -> Result<f64> {
        let mut total = 0.0;
        let mut treated = 0.0;
        for (xi, wi) in self.x.iter().zip(&self.w) {
            let k = self.kernel.eval((xi - x) / self.bandwidth);
            total += k;
            treated += k * (*wi as f64);
        }
        if total <= 0.0 {
            return Err(Error::EmptyWindow(vec![x]));
        }
        let p = treated / total;
        if p <= 0.0 || p >= 1.0 {
            return Err(Error::PerfectSeparation(format!(
                "all window observations at x={x} share treatment {}",
                (p >= 1.0) as u8
            )));
        }
        Ok(p)
    }
}

/// An evaluable propensity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityModel {
    Constant(f64),
    KnownVector(Vec<f64>),
    Logit(LogitModel),
    LocalLogit(LocalLogitModel),
}

impl PropensityModel {
    pub fn constant(e: f64) -> Result<Self> {
        if !(e > 0.0 && e < 1.0) {
            return Err(Error::InvalidSpec(format!("constant propensity must lie in (0,1), got {e}")));
        }
        Ok(PropensityModel::Constant(e))
    }

    /// `values[i]` is e_t for the row with `index == i + 1`.
    pub fn known_vector(values: Vec<f64>) -> Result<Self> {
        for (i, e) in values.iter().enumerate() {
            if !(*e > 0.0 && *e < 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "known propensity at position {i} must lie in (0,1), got {e}"
                )));
            }
        }
        Ok(PropensityModel::KnownVector(values))
    }

    /// Evaluates e_t at a row. Converged models return values strictly
    /// inside (0,1).
    pub fn evaluate(&self, row: &LaggedRow) -> Result<f64> {
        match self {
            PropensityModel::Constant(e) => Ok(*e),
            PropensityModel::KnownVector(values) => {
                values.get(row.index - 1).copied().ok_or_else(|| {
                    Error::DimensionMismatch(format!(
                        "known propensity vector has {} entries, row index is {}",
                        values.len(),
                        row.index
                    ))
                })
            }
            PropensityModel::Logit(model) => model.probability(&row.x_prev),
            PropensityModel::LocalLogit(model) => {
                let x = row.x_prev.get(model.column).copied().ok_or_else(|| {
                    Error::DimensionMismatch(format!(
                        "local logit conditions on column {} but row has {}",
                        model.column,
                        row.x_prev.len()
                    ))
                })?;
                model.evaluate_at(x)
            }
        }
    }
}

/// Strict-overlap diagnostic for a model over a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub min_e: f64,
    pub max_e: f64,
    pub kappa: f64,
    /// Row indices t with e_t outside [kappa, 1-kappa].
    pub violating_indices: Vec<usize>,
}

/// Evaluates the model at every row and reports violations of
/// `kappa <= e_t <= 1 - kappa`.
pub fn check_overlap(model: &PropensityModel, rows: &[LaggedRow], kappa: f64) -> Result<OverlapReport> {
    if !(kappa > 0.0 && kappa < 0.5) {
        return Err(Error::InvalidSpec(format!("kappa must lie in (0, 0.5), got {kappa}")));
    }
    let mut min_e = f64::INFINITY;
    let mut max_e = f64::NEG_INFINITY;
    let mut violating = Vec::new();
    for row in rows {
        let e = model.evaluate(row)?;
        min_e = min_e.min(e);
        max_e = max_e.max(e);
        if e < kappa || e > 1.0 - kappa {
            violating.push(row.index);
        }
    }
    Ok(OverlapReport { min_e, max_e, kappa, violating_indices: violating })
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

// log(1 + exp(eta)) without overflow
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Coefficient magnitude beyond which the logistic link is saturated past
/// machine-relevant precision; treated as perfect separation.
const SEPARATION_BOUND: f64 = 30.0;
const MAX_NEWTON_ITER: usize = 100;
const GRADIENT_TOL: f64 = 1e-8;

/// Fits `logit Pr(w=1|x_prev) = alpha + beta'x_prev` by maximum likelihood
/// (Newton iterations with step-halving).
pub fn fit_logit(rows: &[LaggedRow]) -> Result<PropensityModel> {
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "logit fit needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let n_treated = rows.iter().filter(|r| r.w == 1).count();
    if n_treated == 0 || n_treated == rows.len() {
        return Err(Error::PerfectSeparation(
            "all observations share the same treatment value".into(),
        ));
    }
    let dim = rows[0].x_prev.len();
    for row in rows {
        if row.x_prev.len() != dim {
            return Err(Error::DimensionMismatch("rows have inconsistent x_prev dimensions".into()));
        }
    }

    let n = rows.len();
    let p = dim + 1;
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { rows[i].x_prev[j - 1] });
    if design.clone().rank(1e-10) < p {
        return Err(Error::DegenerateDesign(
            "design matrix (intercept + x_prev) is rank-deficient".into(),
        ));
    }
    let response = DVector::from_fn(n, |i, _| rows[i].w as f64);

    let log_lik = |coef: &DVector<f64>| -> f64 {
        let eta = &design * coef;
        (0..n).map(|i| response[i] * eta[i] - softplus(eta[i])).sum()
    };

    let mut coef = DVector::zeros(p);
    let mut lik = log_lik(&coef);
    for _ in 0..MAX_NEWTON_ITER {
        let eta = &design * &coef;
        let probs = eta.map(logistic);
        let grad = design.transpose() * (&response - &probs);
        if grad.amax() < GRADIENT_TOL {
            break;
        }
        let weights = probs.map(|q| q * (1.0 - q));
        let mut weighted = design.clone();
        for i in 0..n {
            let s = weights[i].sqrt();
            for j in 0..p {
                weighted[(i, j)] *= s;
            }
        }
        let info = weighted.transpose() * &weighted;
        let step = info
            .cholesky()
            .map(|c| c.solve(&grad))
            .ok_or_else(|| Error::DegenerateDesign("information matrix is singular".into()))?;

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &coef + &step * scale;
            let cand_lik = log_lik(&candidate);
            if cand_lik > lik {
                coef = candidate;
                lik = cand_lik;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break; // at a numerical maximum
        }
        if coef.amax() > SEPARATION_BOUND {
            return Err(Error::PerfectSeparation(format!(
                "coefficient magnitude exceeded {SEPARATION_BOUND} during fitting"
            )));
        }
    }

    Ok(PropensityModel::Logit(LogitModel {
        alpha: coef[0],
        beta: coef.as_slice()[1..].to_vec(),
    }))
}

/// Fits a local likelihood logit over a single conditioning column of
/// `x_prev`. The fitted object stores the training pairs; queries re-solve
/// the kernel-weighted problem at the evaluation point.
pub fn fit_local_logit(
    rows: &[LaggedRow],
    column: usize,
    bandwidth: f64,
    kernel: KernelSpec,
) -> Result<PropensityModel> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidSpec(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData("local logit fit needs at least 1 row".into()));
    }
    let mut x = Vec::with_capacity(rows.len());
    let mut w = Vec::with_capacity(rows.len());
    for row in rows {
        let xi = row.x_prev.get(column).copied().ok_or_else(|| {
            Error::DimensionMismatch(format!(
                "local logit conditioning column {column} out of range for x_prev of length {}",
                row.x_prev.len()
            ))
        })?;
        x.push(xi);
        w.push(row.w);
    }
    Ok(PropensityModel::LocalLogit(LocalLogitModel { bandwidth, kernel, column, x, w }))
}

/// Rule-of-thumb bandwidth `1.06 * sd(x) * n^(-1/5)` for local-logit
/// propensity fitting. The choice of rule is an implementation default; no
/// bandwidth rule is prescribed for propensity smoothing.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let sd = crate::util::sample_sd(xs);
    1.06 * sd * (xs.len() as f64).powf(-0.2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_lagged, ColumnSpec, TimeSeries};
    use rand_core::{RngCore, SeedableRng};

    /// Rows with a given (w, x_prev) layout; y is irrelevant here.
    fn rows_from(pairs: &[(u8, Vec<f64>)]) -> Vec<LaggedRow> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, (w, x))| LaggedRow {
                index: i + 1,
                y: 0.0,
                w: *w,
                y_prev: 0.0,
                w_prev: 0,
                z_prev: vec![],
                x_prev: x.clone(),
            })
            .collect()
    }

    /// Independent grid-search MLE over (alpha, beta) by iterative zooming.
    fn grid_search_mle(rows: &[LaggedRow]) -> (f64, f64) {
        let ll = |a: f64, b: f64| -> f64 {
            rows.iter()
                .map(|r| {
                    let eta = a + b * r.x_prev[0];
                    r.w as f64 * eta - softplus(eta)
                })
                .sum()
        };
        let (mut lo_a, mut hi_a, mut lo_b, mut hi_b) = (-5.0, 5.0, -5.0, 5.0);
        let (mut best_a, mut best_b) = (0.0, 0.0);
        for _ in 0..7 {
            let mut best = f64::NEG_INFINITY;
            for i in 0..=100 {
                for j in 0..=100 {
                    let a = lo_a + (hi_a - lo_a) * i as f64 / 100.0;
                    let b = lo_b + (hi_b - lo_b) * j as f64 / 100.0;
                    let v = ll(a, b);
                    if v > best {
                        best = v;
                        best_a = a;
                        best_b = b;
                    }
                }
            }
            let (da, db) = ((hi_a - lo_a) / 100.0, (hi_b - lo_b) / 100.0);
            lo_a = best_a - 2.0 * da;
            hi_a = best_a + 2.0 * da;
            lo_b = best_b - 2.0 * db;
            hi_b = best_b + 2.0 * db;
        }
        (best_a, best_b)
    }

    #[test]
    fn intercept_only_matches_closed_form() {
        let pairs: Vec<(u8, Vec<f64>)> =
            (0..10).map(|i| ((i < 6) as u8, vec![])).collect();
        let rows = rows_from(&pairs);
        let model = fit_logit(&rows).unwrap();
        match &model {
            PropensityModel::Logit(m) => {
                assert!((m.alpha - (0.6f64 / 0.4).ln()).abs() < 1e-9);
                assert!(m.beta.is_empty());
            }
            _ => unreachable!(),
        }
        // logistic inverse of the fitted intercept
        let e = model.evaluate(&rows[0]).unwrap();
        assert!((e - 0.6).abs() < 1e-9);
    }

    #[test]
    fn one_covariate_matches_grid_search() {
        let pairs = vec![
            (1, vec![0.3]),
            (0, vec![-1.1]),
            (1, vec![0.9]),
            (0, vec![0.2]),
            (1, vec![1.4]),
            (0, vec![-0.4]),
            (1, vec![-0.2]),
            (0, vec![-0.9]),
        ];
        let rows = rows_from(&pairs);
        let (a, b) = grid_search_mle(&rows);
        match fit_logit(&rows).unwrap() {
            PropensityModel::Logit(m) => {
                assert!((m.alpha - a).abs() < 1e-4, "alpha {} vs grid {a}", m.alpha);
                assert!((m.beta[0] - b).abs() < 1e-4, "beta {} vs grid {b}", m.beta[0]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn separable_data_is_rejected() {
        let pairs: Vec<(u8, Vec<f64>)> = (-5..5)
            .map(|i| {
                let x = i as f64 + 0.5;
                ((x > 0.0) as u8, vec![x])
            })
            .collect();
        let rows = rows_from(&pairs);
        assert!(matches!(fit_logit(&rows), Err(Error::PerfectSeparation(_))));
    }

    #[test]
    fn single_class_is_rejected() {
        let rows = rows_from(&[(1, vec![0.1]), (1, vec![0.7]), (1, vec![-0.3])]);
        assert!(matches!(fit_logit(&rows), Err(Error::PerfectSeparation(_))));
    }

    #[test]
    fn duplicated_column_is_degenerate() {
        let pairs = vec![
            (1, vec![0.3, 0.3]),
            (0, vec![-1.1, -1.1]),
            (1, vec![0.9, 0.9]),
            (0, vec![0.2, 0.2]),
        ];
        assert!(matches!(
            fit_logit(&rows_from(&pairs)),
            Err(Error::DegenerateDesign(_))
        ));
    }

    #[test]
    fn score_vanishes_at_optimum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let pairs: Vec<(u8, Vec<f64>)> = (0..60)
                .map(|_| {
                    let x = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0;
                    let p = logistic(0.4 + 0.8 * x);
                    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                    ((u < p) as u8, vec![x])
                })
                .collect();
            let rows = rows_from(&pairs);
            let model = match fit_logit(&rows) {
                Ok(PropensityModel::Logit(m)) => m,
                Ok(_) => unreachable!(),
                Err(Error::PerfectSeparation(_)) => continue,
                Err(e) => panic!("{e}"),
            };
            let mut score = vec![0.0; 2];
            for row in &rows {
                let p = model.probability(&row.x_prev).unwrap();
                let r = row.w as f64 - p;
                score[0] += r;
                score[1] += r * row.x_prev[0];
            }
            assert!(score.iter().all(|s| s.abs() < 1e-6), "score {score:?}");
        }
    }

    #[test]
    fn shifting_column_and_compensating_intercept_is_invariant() {
        let pairs = vec![
            (1, vec![0.3]),
            (0, vec![-1.1]),
            (1, vec![0.9]),
            (0, vec![0.2]),
            (1, vec![1.4]),
            (0, vec![-0.4]),
        ];
        let rows = rows_from(&pairs);
        let model = match fit_logit(&rows).unwrap() {
            PropensityModel::Logit(m) => m,
            _ => unreachable!(),
        };
        let c = 3.75;
        let shifted = LogitModel { alpha: model.alpha - c * model.beta[0], beta: model.beta.clone() };
        for row in &rows {
            let base = model.probability(&row.x_prev).unwrap();
            let moved = shifted.probability(&[row.x_prev[0] + c]).unwrap();
            assert!((base - moved).abs() < 1e-10);
        }
    }

    #[test]
    fn logit_zero_index_is_half() {
        let model = LogitModel { alpha: 0.0, beta: vec![1.0] };
        assert_eq!(model.probability(&[0.0]).unwrap(), 0.5);
    }

    #[test]
    fn local_logit_with_huge_uniform_window_reduces_to_global_frequency() {
        let pairs: Vec<(u8, Vec<f64>)> =
            (0..10).map(|i| ((i % 3 == 0) as u8, vec![i as f64 * 0.1 - 0.5])).collect();
        let rows = rows_from(&pairs);
        let model = fit_local_logit(&rows, 0, f64::INFINITY, KernelSpec::Uniform).unwrap();
        let freq = 4.0 / 10.0;
        for x in [-2.0, -0.3, 0.0, 0.4, 9.0] {
            let row = LaggedRow { x_prev: vec![x], ..rows[0].clone() };
            assert!((model.evaluate(&row).unwrap() - freq).abs() < 1e-8);
        }
    }

    #[test]
    fn local_logit_tracks_piecewise_constant_truth() {
        // e(x) = 0.3 for x < 0, 0.7 for x >= 0; n = 500, h = 0.3.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let pairs: Vec<(u8, Vec<f64>)> = (0..500)
            .map(|_| {
                let x = unit() * 4.0 - 2.0;
                let p = if x < 0.0 { 0.3 } else { 0.7 };
                ((unit() < p) as u8, vec![x])
            })
            .collect();
        let rows = rows_from(&pairs);
        let model = match fit_local_logit(&rows, 0, 0.3, KernelSpec::Epanechnikov).unwrap() {
            PropensityModel::LocalLogit(m) => m,
            _ => unreachable!(),
        };
        assert!((model.evaluate_at(-1.0).unwrap() - 0.3).abs() < 0.1);
        assert!((model.evaluate_at(1.0).unwrap() - 0.7).abs() < 0.1);
    }

    #[test]
    fn local_logit_empty_window() {
        let rows = rows_from(&[(1, vec![0.0]), (0, vec![0.1])]);
        let model = fit_local_logit(&rows, 0, 0.05, KernelSpec::Epanechnikov).unwrap();
        let far = LaggedRow { x_prev: vec![50.0], ..rows[0].clone() };
        assert!(matches!(model.evaluate(&far), Err(Error::EmptyWindow(_))));
    }

    #[test]
    fn constant_and_known_vector_evaluate() {
        let rows = rows_from(&[(1, vec![]), (0, vec![])]);
        let c = PropensityModel::constant(0.5).unwrap();
        assert_eq!(c.evaluate(&rows[0]).unwrap(), 0.5);
        assert!(PropensityModel::constant(1.0).is_err());

        let v = PropensityModel::known_vector(vec![0.2, 0.8]).unwrap();
        assert_eq!(v.evaluate(&rows[0]).unwrap(), 0.2);
        assert_eq!(v.evaluate(&rows[1]).unwrap(), 0.8);
        assert!(PropensityModel::known_vector(vec![0.0]).is_err());
    }

    #[test]
    fn overlap_report_flags_violations() {
        let rows = rows_from(&[(1, vec![]), (0, vec![]), (1, vec![])]);
        let ok = check_overlap(&PropensityModel::constant(0.5).unwrap(), &rows, 0.05).unwrap();
        assert!(ok.violating_indices.is_empty());
        assert_eq!(ok.min_e, 0.5);
        assert_eq!(ok.max_e, 0.5);

        let v = PropensityModel::known_vector(vec![0.4, 0.02, 0.6]).unwrap();
        let report = check_overlap(&v, &rows, 0.05).unwrap();
        assert_eq!(report.violating_indices, vec![2]);
        assert_eq!(report.min_e, 0.02);
    }

    #[test]
    fn fitted_logit_on_well_behaved_series_has_clean_overlap() {
        // Simulated series whose true assignment is a mild logit in Y_{t-1};
        // the fitted scores should stay well inside (0.3, 0.9) style bounds.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let t_len = 300;
        let mut ys = vec![0.0f64; t_len];
        let mut ws = vec![0u8; t_len];
        for t in 0..t_len {
            let y_prev = if t == 0 { 0.0 } else { ys[t - 1] };
            let p = logistic(0.5 + 0.4 * y_prev);
            ws[t] = (unit() < p) as u8;
            ys[t] = 0.3 * y_prev + (unit() - 0.5);
        }
        let ts = TimeSeries::new(ys, ws, vec![], 0).unwrap();
        let rows = build_lagged(&ts, &ColumnSpec::parse("y_lag").unwrap()).unwrap();
        let model = fit_logit(&rows).unwrap();
        let report = check_overlap(&model, &rows, 0.1).unwrap();
        assert!(report.violating_indices.is_empty(), "{report:?}");
        assert!(report.min_e > 0.1 && report.max_e < 0.9);
    }

    #[test]
    fn logit_serializes_to_alpha_beta_object() {
        let m = PropensityModel::Logit(LogitModel { alpha: 0.25, beta: vec![1.5, -2.0] });
        if let PropensityModel::Logit(inner) = &m {
            let json = serde_json::to_string(inner).unwrap();
            assert_eq!(json, r#"{"alpha":0.25,"beta":[1.5,-2.0]}"#);
        }
    }
}
