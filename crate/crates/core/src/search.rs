//! Empirical-welfare maximization over a policy class.
//!
//! Quadrant rules in two dimensions are maximized exactly: welfare is a step
//! function of the thresholds, so the canonical candidate grid (midpoints
//! between consecutive distinct observed values plus -inf/+inf sentinels) is
//! lossless, and an incremental sweep visits all of it in O(4 n^2) term
//! updates. Higher dimensions use coordinate ascent with random restarts;
//! discrete maps and explicit finite classes are solved exhaustively.

use rayon::prelude::*;
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnSpec, LaggedRow};
use crate::error::{Error, Result};
use crate::propensity::{KernelSpec, PropensityModel};
use crate::util::{pairwise_mean, pairwise_sum, unit_f64};
use crate::welfare::{
    self, kernel_weight, DiscreteMap, PolicyRule, QuadrantRule,
};
use rand_core::{RngCore, SeedableRng};

/// Which welfare functional the search maximizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    Unconditional,
    DiscreteConditional { w: u8 },
    KernelConditional { x: Vec<f64>, h: f64, kernel: KernelSpec },
}

/// The policy class searched over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClassKind {
    Discrete,
    Quadrant { cols: ColumnSpec },
    Finite { rules: Vec<PolicyRule> },
}

/// Deterministic tie rule among welfare-equal optima: fewer treated
/// observations first, then lexicographically smallest (signs, thresholds).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    FewerTreatedThenLexicographic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub class_kind: ClassKind,
    pub objective: Objective,
    #[serde(default)]
    pub tie_break: TieBreak,
    pub restarts: usize,
    pub seed: u64,
}

/// Outcome of a policy search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best_rule: PolicyRule,
    pub best_value: f64,
    pub candidates_evaluated: usize,
    /// Candidate threshold grid per quadrant dimension (empty otherwise).
    pub per_dimension_thresholds: Vec<Vec<f64>>,
    /// Degenerate cases handled during the search (e.g. defaulted states).
    pub notes: Vec<String>,
}

fn thresholds_to_json(values: &[f64]) -> serde_json::Value {
    serde_json::Value::Array(
        values
            .iter()
            .map(|v| {
                if v.is_finite() {
                    serde_json::json!(v)
                } else if *v > 0.0 {
                    serde_json::json!("inf")
                } else {
                    serde_json::json!("-inf")
                }
            })
            .collect(),
    )
}

impl Serialize for SearchResult {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serde_json::Map::new();
        map.insert("value".into(), serde_json::json!(self.best_value));
        map.insert("evaluated".into(), serde_json::json!(self.candidates_evaluated));
        if let PolicyRule::Quadrant(q) = &self.best_rule {
            map.insert("signs".into(), serde_json::json!(q.signs));
            map.insert("thresholds".into(), thresholds_to_json(&q.thresholds));
            map.insert("columns".into(), serde_json::json!(q.columns.names()));
        }
        map.insert("rule".into(), serde_json::to_value(&self.best_rule).map_err(serde::ser::Error::custom)?);
        if !self.per_dimension_thresholds.is_empty() {
            map.insert(
                "per_dimension_thresholds".into(),
                serde_json::Value::Array(
                    self.per_dimension_thresholds.iter().map(|g| thresholds_to_json(g)).collect(),
                ),
            );
        }
        if !self.notes.is_empty() {
            map.insert("notes".into(), serde_json::json!(self.notes));
        }
        serde_json::Value::Object(map).serialize(s)
    }
}

/// Evaluates the objective value of an arbitrary rule.
pub fn evaluate_objective(
    rows: &[LaggedRow],
    rule: &PolicyRule,
    prop: &PropensityModel,
    objective: &Objective,
) -> Result<f64> {
    match objective {
        Objective::Unconditional => Ok(welfare::welfare_unconditional(rows, rule, prop)?.value),
        Objective::DiscreteConditional { w } => {
            let terms = welfare::per_period_terms(rows, rule, prop)?;
            let values: Vec<f64> = rows
                .iter()
                .zip(&terms)
                .filter(|(r, _)| r.w_prev == *w)
                .map(|(_, t)| t.value)
                .collect();
            if values.is_empty() {
                return Err(Error::EmptySubsample(*w));
            }
            Ok(pairwise_mean(&values))
        }
        Objective::KernelConditional { x, h, kernel } => {
            Ok(welfare::welfare_kernel_conditional(rows, rule, prop, x, *h, *kernel)?.value)
        }
    }
}

/// Per-row weighted gains `omega_t * (treated-arm term - control-arm term)`.
/// Every objective's welfare is an affine function of `sum_{t in G} gains[t]`
/// with a rule-independent offset and divisor, so maximizing the gain sum
/// maximizes welfare.
fn weighted_objective(
    rows: &[LaggedRow],
    prop: &PropensityModel,
    objective: &Objective,
) -> Result<Vec<f64>> {
    let mut weights = Vec::with_capacity(rows.len());
    for row in rows {
        let w = match objective {
            Objective::Unconditional => 1.0,
            Objective::DiscreteConditional { w } => (row.w_prev == *w) as u8 as f64,
            Objective::KernelConditional { x, h, kernel } => {
                if row.x_prev.len() != x.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "conditioning point has {} coordinates, rows have {}",
                        x.len(),
                        row.x_prev.len()
                    )));
                }
                kernel_weight(&row.x_prev, x, *h, *kernel)
            }
        };
        weights.push(w);
    }
    match objective {
        Objective::Unconditional => {}
        Objective::DiscreteConditional { w } => {
            if !weights.iter().any(|x| *x > 0.0) {
                return Err(Error::EmptySubsample(*w));
            }
        }
        Objective::KernelConditional { x, .. } => {
            if pairwise_sum(&weights) <= 0.0 {
                return Err(Error::EmptyWindow(x.clone()));
            }
        }
    }

    let mut gains = Vec::with_capacity(rows.len());
    for (row, wgt) in rows.iter().zip(&weights) {
        let e = prop.evaluate(row)?;
        if e < welfare::OVERLAP_BOUNDARY_TOL || e > 1.0 - welfare::OVERLAP_BOUNDARY_TOL {
            return Err(Error::OverlapViolation { t: row.index, e });
        }
        let treated_arm = if row.w == 1 { row.y / e } else { 0.0 };
        let control_arm = if row.w == 0 { row.y / (1.0 - e) } else { 0.0 };
        gains.push(wgt * (treated_arm - control_arm));
    }
    Ok(gains)
}

/// Midpoints between consecutive distinct sorted values, bracketed by the
/// -inf/+inf sentinels. Empirical welfare is a step function of thresholds,
/// so this grid is lossless.
pub fn threshold_grid(values: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut grid = Vec::with_capacity(sorted.len() + 1);
    grid.push(f64::NEG_INFINITY);
    for pair in sorted.windows(2) {
        grid.push((pair[0] + pair[1]) / 2.0);
    }
    grid.push(f64::INFINITY);
    grid
}

/// A candidate in tie-break order: larger value, then fewer treated, then
/// lexicographically smaller (signs, thresholds).
#[derive(Debug, Clone)]
struct Candidate {
    value: f64,
    treated: usize,
    signs: Vec<i8>,
    thresholds: Vec<f64>,
}

impl Candidate {
    fn better_than(&self, other: &Candidate) -> bool {
        if self.value != other.value {
            return self.value > other.value;
        }
        if self.treated != other.treated {
            return self.treated < other.treated;
        }
        if self.signs != other.signs {
            return self.signs < other.signs;
        }
        for (a, b) in self.thresholds.iter().zip(&other.thresholds) {
            if a != b {
                return a < b;
            }
        }
        false
    }
}

const SIGN_PAIRS: [(i8, i8); 4] = [(-1, -1), (-1, 1), (1, -1), (1, 1)];

/// Exact empirical-welfare maximizer over two-dimensional quadrant rules.
pub fn learn_quadrant_2d(
    rows: &[LaggedRow],
    prop: &PropensityModel,
    cols: &ColumnSpec,
    objective: &Objective,
) -> Result<SearchResult> {
    if cols.len() != 2 {
        return Err(Error::InvalidSpec(format!(
            "learn_quadrant_2d needs exactly 2 columns, got {}",
            cols.len()
        )));
    }
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "quadrant search needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let k = rows[0].z_prev.len();
    cols.validate_against(k)?;

    let gains = weighted_objective(rows, prop, objective)?;
    let x1: Vec<f64> = rows.iter().map(|r| r.lagged_value(cols.columns()[0])).collect();
    let x2: Vec<f64> = rows.iter().map(|r| r.lagged_value(cols.columns()[1])).collect();
    let grid1 = threshold_grid(&x1);
    let grid2 = threshold_grid(&x2);

    let best = SIGN_PAIRS
        .par_iter()
        .map(|(s1, s2)| sweep_sign_pair(*s1, *s2, &x1, &x2, &gains))
        .collect::<Vec<_>>()
        .into_iter()
        .reduce(|acc, cand| if cand.better_than(&acc) { cand } else { acc })
        .expect("four sign pairs");

    let rule = PolicyRule::Quadrant(QuadrantRule::new(best.signs, best.thresholds, cols.clone())?);
    let best_value = evaluate_objective(rows, &rule, prop, objective)?;
    Ok(SearchResult {
        best_rule: rule,
        best_value,
        candidates_evaluated: 4 * grid1.len() * grid2.len(),
        per_dimension_thresholds: vec![grid1, grid2],
        notes: Vec::new(),
    })
}

/// One sign pair of the 2-D sweep. Work in transformed coordinates
/// `u = s1 x1`, `v = s2 x2` so membership is always `u > c1 && v > c2`;
/// descending c1 admits points one group at a time while a profile over the
/// c2 grid is updated incrementally.
fn sweep_sign_pair(s1: i8, s2: i8, x1: &[f64], x2: &[f64], gains: &[f64]) -> Candidate {
    let n = x1.len();
    let us: Vec<f64> = x1.iter().map(|x| s1 as f64 * x).collect();
    let vs: Vec<f64> = x2.iter().map(|x| s2 as f64 * x).collect();
    let cuts1 = threshold_grid(&us);
    let cuts2 = threshold_grid(&vs);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| us[*b].total_cmp(&us[*a])); // descending u

    let m2 = cuts2.len();
    let mut profile = vec![0.0f64; m2];
    let mut counts = vec![0usize; m2];
    let mut entered = 0usize;

    let mut best: Option<Candidate> = None;
    for c1 in cuts1.iter().rev() {
        while entered < n && us[order[entered]] > *c1 {
            let idx = order[entered];
            let pos = cuts2.partition_point(|c| *c < vs[idx]);
            for j in 0..pos {
                profile[j] += gains[idx];
                counts[j] += 1;
            }
            entered += 1;
        }
        for (j, c2) in cuts2.iter().enumerate() {
            let cand = Candidate {
                value: profile[j],
                treated: counts[j],
                signs: vec![s1, s2],
                thresholds: vec![s1 as f64 * c1, s2 as f64 * c2],
            };
            if best.as_ref().is_none_or(|b| cand.better_than(b)) {
                best = Some(cand);
            }
        }
    }
    best.expect("grids are never empty")
}

/// Exact 1-D (sign, threshold) optimization used by coordinate ascent:
/// maximizes the gain sum over `active` rows that satisfy `s (x - b) > 0`.
fn sweep_one_dimension(xs: &[f64], gains: &[f64], active: &[usize], grid: &[f64]) -> (i8, f64, f64, usize, usize) {
    let mut best: Option<(Candidate, usize)> = None;
    let mut evaluated = 0;
    for s in [-1i8, 1] {
        let us: Vec<f64> = active.iter().map(|i| s as f64 * xs[*i]).collect();
        let mut order: Vec<usize> = (0..active.len()).collect();
        order.sort_by(|a, b| us[*b].total_cmp(&us[*a]));
        // cuts in u-space aligned with the shared x-space grid
        let mut cuts: Vec<f64> = grid.iter().map(|b| s as f64 * b).collect();
        if s < 0 {
            cuts.reverse();
        }
        let mut running = 0.0;
        let mut count = 0usize;
        let mut p = 0usize;
        for c in cuts.iter().rev() {
            while p < order.len() && us[order[p]] > *c {
                running += gains[active[order[p]]];
                count += 1;
                p += 1;
            }
            evaluated += 1;
            let cand = Candidate {
                value: running,
                treated: count,
                signs: vec![s],
                thresholds: vec![s as f64 * c],
            };
            if best.as_ref().is_none_or(|(b, _)| cand.better_than(b)) {
                best = Some((cand, count));
            }
        }
    }
    let (cand, count) = best.expect("grid is never empty");
    (cand.signs[0], cand.thresholds[0], cand.value, count, evaluated)
}

/// Coordinate-ascent quadrant search for three or more dimensions: each pass
/// exactly re-optimizes one dimension's sign and threshold holding the rest
/// fixed, until no strict improvement; best over seeded random restarts.
pub fn learn_quadrant_nd(
    rows: &[LaggedRow],
    prop: &PropensityModel,
    cols: &ColumnSpec,
    objective: &Objective,
    restarts: usize,
    seed: u64,
) -> Result<SearchResult> {
    let d = cols.len();
    if d < 3 {
        return Err(Error::InvalidSpec(format!(
            "learn_quadrant_nd needs at least 3 columns, got {d}; use learn_quadrant_2d"
        )));
    }
    if restarts < 1 {
        return Err(Error::InvalidSpec("restarts must be >= 1".into()));
    }
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "quadrant search needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    cols.validate_against(rows[0].z_prev.len())?;

    let gains = weighted_objective(rows, prop, objective)?;
    let n = rows.len();
    let xs: Vec<Vec<f64>> =
        cols.columns().iter().map(|c| rows.iter().map(|r| r.lagged_value(*c)).collect()).collect();
    let grids: Vec<Vec<f64>> = xs.iter().map(|v| threshold_grid(v)).collect();
    let ranges: Vec<(f64, f64)> = xs
        .iter()
        .map(|v| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        })
        .collect();

    let run_restart = |restart: u64| -> (Candidate, usize) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart);
        let mut signs: Vec<i8> = (0..d).map(|_| if rng.next_u64() & 1 == 0 { -1 } else { 1 }).collect();
        let mut thresholds: Vec<f64> = ranges
            .iter()
            .map(|(lo, hi)| lo + (hi - lo) * unit_f64(rng.next_u64()))
            .collect();
        let mut evaluated = 0usize;

        let member = |signs: &[i8], thresholds: &[f64], i: usize| -> bool {
            (0..d).all(|j| signs[j] as f64 * (xs[j][i] - thresholds[j]) > 0.0)
        };
        let total = |signs: &[i8], thresholds: &[f64]| -> (f64, usize) {
            let mut value = 0.0;
            let mut treated = 0;
            for i in 0..n {
                if member(signs, thresholds, i) {
                    value += gains[i];
                    treated += 1;
                }
            }
            (value, treated)
        };

        loop {
            let mut improved = false;
            for j in 0..d {
                let active: Vec<usize> = (0..n)
                    .filter(|i| {
                        (0..d).all(|l| {
                            l == j || signs[l] as f64 * (xs[l][*i] - thresholds[l]) > 0.0
                        })
                    })
                    .collect();
                let (s_new, b_new, _, _, evals) =
                    sweep_one_dimension(&xs[j], &gains, &active, &grids[j]);
                evaluated += evals;
                // Re-evaluate both configurations with the same row-order
                // summation; the sweep's incremental sums can differ by an
                // ulp for the same decision set, which must not register as
                // an improvement.
                let (value_cur, count_cur) = total(&signs, &thresholds);
                let mut signs_new = signs.clone();
                let mut thresholds_new = thresholds.clone();
                signs_new[j] = s_new;
                thresholds_new[j] = b_new;
                let (value_new, count_new) = total(&signs_new, &thresholds_new);
                let cand = Candidate {
                    value: value_new,
                    treated: count_new,
                    signs: vec![s_new],
                    thresholds: vec![b_new],
                };
                let cur = Candidate {
                    value: value_cur,
                    treated: count_cur,
                    signs: vec![signs[j]],
                    thresholds: vec![thresholds[j]],
                };
                if cand.better_than(&cur) {
                    signs = signs_new;
                    thresholds = thresholds_new;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
        let (value, treated) = total(&signs, &thresholds);
        (Candidate { value, treated, signs, thresholds }, evaluated)
    };

    let results: Vec<(Candidate, usize)> =
        (0..restarts as u64).into_par_iter().map(run_restart).collect();
    let evaluated: usize = results.iter().map(|(_, e)| e).sum();
    let best = results
        .into_iter()
        .map(|(c, _)| c)
        .reduce(|acc, cand| if cand.better_than(&acc) { cand } else { acc })
        .expect("at least one restart");

    let rule = PolicyRule::Quadrant(QuadrantRule::new(best.signs, best.thresholds, cols.clone())?);
    let best_value = evaluate_objective(rows, &rule, prop, objective)?;
    Ok(SearchResult {
        best_rule: rule,
        best_value,
        candidates_evaluated: evaluated,
        per_dimension_thresholds: grids,
        notes: Vec::new(),
    })
}

/// The discrete T-EWM rule: treat state w iff the conditional CATE estimate
/// is >= 0. Equals exhaustive search over the four maps on the conditional
/// objective; empty states get action 0 and are flagged in the notes.
pub fn learn_discrete(rows: &[LaggedRow], prop: &PropensityModel) -> Result<SearchResult> {
    let mut actions = [0u8; 2];
    let mut notes = Vec::new();
    for w in [0u8, 1] {
        match welfare::cate_estimate(rows, prop, Some(w)) {
            Ok(tau) => actions[w as usize] = (tau >= 0.0) as u8,
            Err(Error::EmptySubsample(_)) => {
                actions[w as usize] = 0;
                notes.push(format!("no observations with previous treatment {w}; action defaulted to 0"));
            }
            Err(e) => return Err(e),
        }
    }
    let map = DiscreteMap { actions };
    let mut value = 0.0;
    for w in [0u8, 1] {
        match welfare::welfare_discrete_conditional(rows, &map, prop, w) {
            Ok(report) => value += report.value,
            Err(Error::EmptySubsample(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(SearchResult {
        best_rule: PolicyRule::DiscreteMap(map),
        best_value: value,
        candidates_evaluated: 4,
        per_dimension_thresholds: Vec::new(),
        notes,
    })
}

/// Exhaustive search over an explicit finite rule list; ties go to the
/// lower list index.
pub fn learn_finite(
    rows: &[LaggedRow],
    prop: &PropensityModel,
    rules: &[PolicyRule],
    objective: &Objective,
) -> Result<SearchResult> {
    if rules.is_empty() {
        return Err(Error::InvalidSpec("finite class must contain at least one rule".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, rule) in rules.iter().enumerate() {
        let value = evaluate_objective(rows, rule, prop, objective)?;
        if best.is_none_or(|(_, v)| value > v) {
            best = Some((i, value));
        }
    }
    let (index, value) = best.expect("non-empty rule list");
    Ok(SearchResult {
        best_rule: PolicyRule::FiniteClass { index, rule: Box::new(rules[index].clone()) },
        best_value: value,
        candidates_evaluated: rules.len(),
        per_dimension_thresholds: Vec::new(),
        notes: Vec::new(),
    })
}
