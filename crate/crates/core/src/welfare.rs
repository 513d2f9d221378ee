//! Inverse-propensity-weighted empirical welfare of a policy rule:
//! unconditional, discrete-conditional, and kernel-conditional estimators,
//! plus per-period terms and the CATE estimate they are built from.
//!
//! The period-t term is
//! `Y_t W_t 1(X_{t-1} in G) / e_t + Y_t (1-W_t) 1(X_{t-1} not in G) / (1-e_t)`.

use serde::{Deserialize, Serialize};

use crate::data::{ColumnSpec, LaggedRow};
use crate::error::{Error, Result};
use crate::propensity::{KernelSpec, PropensityModel};
use crate::util::{pairwise_mean, pairwise_sum};

/// Propensities closer than this to 0 or 1 make IPW terms blow up; they are
/// reported as overlap violations instead of returning silent infinities.
pub const OVERLAP_BOUNDARY_TOL: f64 = 1e-12;

pub mod threshold_serde {
    //! Thresholds may be the -inf/+inf sentinels, which JSON numbers cannot
    //! carry; they serialize as the strings "-inf" and "inf".
    use serde::de::Error as _;
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum NumOrText {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(values.len()))?;
        for v in values {
            if v.is_finite() {
                seq.serialize_element(v)?;
            } else if *v > 0.0 {
                seq.serialize_element("inf")?;
            } else {
                seq.serialize_element("-inf")?;
            }
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<NumOrText>::deserialize(d)?;
        raw.into_iter()
            .map(|v| match v {
                NumOrText::Num(x) => Ok(x),
                NumOrText::Text(t) => match t.as_str() {
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    other => Err(D::Error::custom(format!("bad threshold `{other}`"))),
                },
            })
            .collect()
    }
}

/// Map from the previous treatment state to an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteMap {
    /// `actions[w]` is the action taken when `W_{t-1} = w`.
    pub actions: [u8; 2],
}

impl DiscreteMap {
    pub fn new(action_at_0: u8, action_at_1: u8) -> Result<Self> {
        if action_at_0 > 1 || action_at_1 > 1 {
            return Err(Error::InvalidSpec("discrete map actions must be 0 or 1".into()));
        }
        Ok(DiscreteMap { actions: [action_at_0, action_at_1] })
    }

    pub fn action(&self, w_prev: u8) -> u8 {
        self.actions[w_prev as usize]
    }

    /// All four maps on {0,1}, in lexicographic order.
    pub fn all() -> [DiscreteMap; 4] {
        [
            DiscreteMap { actions: [0, 0] },
            DiscreteMap { actions: [0, 1] },
            DiscreteMap { actions: [1, 0] },
            DiscreteMap { actions: [1, 1] },
        ]
    }
}

/// Axis-aligned orthant decision set: treat iff `s_j (x_j - b_j) > 0` for
/// every dimension j, with the coordinates drawn from the rule's own columns.
/// Thresholds at -inf/+inf act as all-pass / none-pass sentinels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantRule {
    pub signs: Vec<i8>,
    #[serde(with = "threshold_serde")]
    pub thresholds: Vec<f64>,
    pub columns: ColumnSpec,
}

impl QuadrantRule {
    pub fn new(signs: Vec<i8>, thresholds: Vec<f64>, columns: ColumnSpec) -> Result<Self> {
        if signs.len() != thresholds.len() || signs.len() != columns.len() {
            return Err(Error::DimensionMismatch(format!(
                "quadrant rule needs equal-length signs/thresholds/columns, got {}/{}/{}",
                signs.len(),
                thresholds.len(),
                columns.len()
            )));
        }
        if signs.is_empty() {
            return Err(Error::InvalidSpec("quadrant rule needs at least one dimension".into()));
        }
        if signs.iter().any(|s| *s != 1 && *s != -1) {
            return Err(Error::InvalidSpec("quadrant signs must be -1 or +1".into()));
        }
        if thresholds.iter().any(|b| b.is_nan()) {
            return Err(Error::InvalidSpec("quadrant thresholds must not be NaN".into()));
        }
        Ok(QuadrantRule { signs, thresholds, columns })
    }

    pub fn contains(&self, row: &LaggedRow) -> bool {
        self.signs
            .iter()
            .zip(&self.thresholds)
            .zip(self.columns.columns())
            .all(|((s, b), col)| *s as f64 * (row.lagged_value(*col) - b) > 0.0)
    }
}

/// A binary decision rule over the lagged observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyRule {
    DiscreteMap(DiscreteMap),
    Quadrant(QuadrantRule),
    /// A member of an explicit finite rule list, tagged with its index.
    FiniteClass { index: usize, rule: Box<PolicyRule> },
    /// Treats exactly where the inner rule does not.
    Complement(Box<PolicyRule>),
}

impl PolicyRule {
    /// Whether the rule assigns treatment given the lagged observables.
    pub fn treats(&self, row: &LaggedRow) -> bool {
        match self {
            PolicyRule::DiscreteMap(map) => map.action(row.w_prev) == 1,
            PolicyRule::Quadrant(q) => q.contains(row),
            PolicyRule::FiniteClass { rule, .. } => rule.treats(row),
            PolicyRule::Complement(rule) => !rule.treats(row),
        }
    }

    pub fn treat_all() -> Self {
        PolicyRule::DiscreteMap(DiscreteMap { actions: [1, 1] })
    }

    pub fn control_all() -> Self {
        PolicyRule::DiscreteMap(DiscreteMap { actions: [0, 0] })
    }

    pub fn complement(self) -> Self {
        PolicyRule::Complement(Box::new(self))
    }

    /// Validates the rule's column references against a sample.
    pub fn validate_columns(&self, rows: &[LaggedRow]) -> Result<()> {
        let k = rows.first().map(|r| r.z_prev.len()).unwrap_or(0);
        match self {
            PolicyRule::Quadrant(q) => q.columns.validate_against(k),
            PolicyRule::FiniteClass { rule, .. } => rule.validate_columns(rows),
            PolicyRule::Complement(rule) => rule.validate_columns(rows),
            PolicyRule::DiscreteMap(_) => Ok(()),
        }
    }
}

/// What a welfare value is conditioned on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Conditioning {
    None,
    Discrete { w: u8 },
    Kernel { x: Vec<f64>, h: f64 },
}

/// An estimated welfare value with its effective sample breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelfareReport {
    pub value: f64,
    pub n_effective_treated: usize,
    pub n_effective_control: usize,
    pub rule: PolicyRule,
    pub conditioning: Conditioning,
}

/// The period-t IPW summand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerPeriodTerm {
    pub t: usize,
    pub value: f64,
}

fn checked_propensity(prop: &PropensityModel, row: &LaggedRow) -> Result<f64> {
    let e = prop.evaluate(row)?;
    if e < OVERLAP_BOUNDARY_TOL || e > 1.0 - OVERLAP_BOUNDARY_TOL {
        return Err(Error::OverlapViolation { t: row.index, e });
    }
    Ok(e)
}

fn term_value(row: &LaggedRow, e: f64, treats: bool) -> f64 {
    if treats {
        if row.w == 1 {
            row.y / e
        } else {
            0.0
        }
    } else if row.w == 0 {
        row.y / (1.0 - e)
    } else {
        0.0
    }
}

/// Per-period IPW terms of a rule over a sample.
pub fn per_period_terms(
    rows: &[LaggedRow],
    rule: &PolicyRule,
    prop: &PropensityModel,
) -> Result<Vec<PerPeriodTerm>> {
    rule.validate_columns(rows)?;
    rows.iter()
        .map(|row| {
            let e = checked_propensity(prop, row)?;
            Ok(PerPeriodTerm { t: row.index, value: term_value(row, e, rule.treats(row)) })
        })
        .collect()
}

fn effective_counts(rows: &[LaggedRow], rule: &PolicyRule) -> (usize, usize) {
    let mut treated = 0;
    let mut control = 0;
    for row in rows {
        let treats = rule.treats(row);
        if treats && row.w == 1 {
            treated += 1;
        } else if !treats && row.w == 0 {
            control += 1;
        }
    }
    (treated, control)
}

/// Mean IPW welfare over all T-1 periods.
pub fn welfare_unconditional(
    rows: &[LaggedRow],
    rule: &PolicyRule,
    prop: &PropensityModel,
) -> Result<WelfareReport> {
    if rows.is_empty() {
        return Err(Error::InsufficientData("welfare needs at least one row".into()));
    }
    let terms = per_period_terms(rows, rule, prop)?;
    let values: Vec<f64> = terms.iter().map(|t| t.value).collect();
    let (treated, control) = effective_counts(rows, rule);
    Ok(WelfareReport {
        value: pairwise_mean(&values),
        n_effective_treated: treated,
        n_effective_control: control,
        rule: rule.clone(),
        conditioning: Conditioning::None,
    })
}

/// Welfare of a discrete map conditional on the previous treatment state:
/// the subsample average of IPW terms over `{t : W_{t-1} = w}` with action
/// `rule.action(w)`.
pub fn welfare_discrete_conditional(
    rows: &[LaggedRow],
    rule: &DiscreteMap,
    prop: &PropensityModel,
    w: u8,
) -> Result<WelfareReport> {
    let subsample: Vec<&LaggedRow> = rows.iter().filter(|r| r.w_prev == w).collect();
    if subsample.is_empty() {
        return Err(Error::EmptySubsample(w));
    }
    let treats = rule.action(w) == 1;
    let mut values = Vec::with_capacity(subsample.len());
    let mut treated = 0;
    let mut control = 0;
    for row in &subsample {
        let e = checked_propensity(prop, row)?;
        values.push(term_value(row, e, treats));
        if treats && row.w == 1 {
            treated += 1;
        } else if !treats && row.w == 0 {
            control += 1;
        }
    }
    Ok(WelfareReport {
        value: pairwise_mean(&values),
        n_effective_treated: treated,
        n_effective_control: control,
        rule: PolicyRule::DiscreteMap(*rule),
        conditioning: Conditioning::Discrete { w },
    })
}

/// Product kernel weight across the coordinates of the conditioning vector,
/// with one shared scalar bandwidth. The 1/h normalization cancels in the
/// welfare ratio and is omitted.
pub fn kernel_weight(x_prev: &[f64], x: &[f64], h: f64, kernel: KernelSpec) -> f64 {
    x_prev.iter().zip(x).map(|(xi, c)| kernel.eval((xi - c) / h)).product()
}

/// Kernel-smoothed conditional welfare at a conditioning point `x`:
/// the ratio of kernel-weighted term sums to kernel-weight sums.
pub fn welfare_kernel_conditional(
    rows: &[LaggedRow],
    rule: &PolicyRule,
    prop: &PropensityModel,
    x: &[f64],
    h: f64,
    kernel: KernelSpec,
) -> Result<WelfareReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidSpec(format!("bandwidth must be positive, got {h}")));
    }
    rule.validate_columns(rows)?;
    let mut weights = Vec::with_capacity(rows.len());
    for row in rows {
        if row.x_prev.len() != x.len() {
            return Err(Error::DimensionMismatch(format!(
                "conditioning point has {} coordinates, rows have {}",
                x.len(),
                row.x_prev.len()
            )));
        }
        weights.push(kernel_weight(&row.x_prev, x, h, kernel));
    }
    let total = pairwise_sum(&weights);
    if total <= 0.0 {
        return Err(Error::EmptyWindow(x.to_vec()));
    }
    let mut weighted_terms = Vec::with_capacity(rows.len());
    let mut treated = 0;
    let mut control = 0;
    for (row, wgt) in rows.iter().zip(&weights) {
        let e = checked_propensity(prop, row)?;
        let treats = rule.treats(row);
        weighted_terms.push(wgt * term_value(row, e, treats));
        if *wgt > 0.0 {
            if treats && row.w == 1 {
                treated += 1;
            } else if !treats && row.w == 0 {
                control += 1;
            }
        }
    }
    Ok(WelfareReport {
        value: pairwise_sum(&weighted_terms) / total,
        n_effective_treated: treated,
        n_effective_control: control,
        rule: rule.clone(),
        conditioning: Conditioning::Kernel { x: x.to_vec(), h },
    })
}

/// Mean of the per-period CATE estimates
/// `tau_t = Y_t W_t / e_t - Y_t (1-W_t) / (1-e_t)`, optionally over the
/// subsample with a given previous treatment state. The discrete rule treats
/// a state iff this is >= 0.
pub fn cate_estimate(rows: &[LaggedRow], prop: &PropensityModel, condition: Option<u8>) -> Result<f64> {
    let selected: Vec<&LaggedRow> = match condition {
        None => rows.iter().collect(),
        Some(w) => rows.iter().filter(|r| r.w_prev == w).collect(),
    };
    if selected.is_empty() {
        return Err(Error::EmptySubsample(condition.unwrap_or(0)));
    }
    let mut taus = Vec::with_capacity(selected.len());
    for row in selected {
        let e = checked_propensity(prop, row)?;
        let tau = if row.w == 1 { row.y / e } else { -row.y / (1.0 - e) };
        taus.push(tau);
    }
    Ok(pairwise_mean(&taus))
}

/// Rule-of-thumb welfare-kernel bandwidth `sd(x) * (T-1)^(-1/5)`.
pub fn kernel_welfare_bandwidth(xs: &[f64]) -> f64 {
    crate::util::sample_sd(xs) * (xs.len() as f64).powf(-0.2)
}
