//! Two-period discrete-state policy learning.
//!
//! The planner picks maps `g1, g2 : {0,1} -> {0,1}` before either period is
//! realized (offline: g2 is not re-estimated after observing period one).
//! Total welfare is the period-one conditional welfare at the starting state
//! plus the period-two conditional welfare at the state induced by g1. Both
//! period averages reuse the same sample; the two subsample index sets may
//! overlap, which the estimator follows literally.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::data::LaggedRow;
use crate::error::{Error, Result};
use crate::propensity::PropensityModel;
use crate::welfare::{welfare_discrete_conditional, DiscreteMap};

/// A pair of per-period decision maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoPeriodPolicy {
    pub g1: DiscreteMap,
    pub g2: DiscreteMap,
}

/// Two-period welfare decomposition for a policy at a starting state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPeriodReport {
    pub value_total: f64,
    pub value_period1: f64,
    pub value_period2: f64,
    pub policy: TwoPeriodPolicy,
    /// Subsample size per conditioning state: T(w) and T(g1(w)).
    pub subsample_sizes: BTreeMap<u8, usize>,
}

fn subsample_size(rows: &[LaggedRow], w: u8) -> usize {
    rows.iter().filter(|r| r.w_prev == w).count()
}

/// Evaluates the two-period welfare of a policy starting from state `w`.
pub fn welfare_two_period(
    rows: &[LaggedRow],
    policy: &TwoPeriodPolicy,
    prop: &PropensityModel,
    w: u8,
) -> Result<TwoPeriodReport> {
    if w > 1 {
        return Err(Error::InvalidSpec(format!("state must be 0 or 1, got {w}")));
    }
    let value_period1 = welfare_discrete_conditional(rows, &policy.g1, prop, w)?.value;
    let state2 = policy.g1.action(w);
    let value_period2 = welfare_discrete_conditional(rows, &policy.g2, prop, state2)?.value;
    let mut subsample_sizes = BTreeMap::new();
    subsample_sizes.insert(w, subsample_size(rows, w));
    subsample_sizes.insert(state2, subsample_size(rows, state2));
    Ok(TwoPeriodReport {
        value_total: value_period1 + value_period2,
        value_period1,
        value_period2,
        policy: *policy,
        subsample_sizes,
    })
}

/// Learns the optimal two-period policy from state `w` by backward
/// induction: the last period's best action per state first, then the first
/// period's action given the induced continuation. Ties go to action 0;
/// states never consulted keep action 0. The result equals exhaustive
/// search over all 16 policy pairs.
pub fn learn_two_period(rows: &[LaggedRow], prop: &PropensityModel, w: u8) -> Result<TwoPeriodReport> {
    if w > 1 {
        return Err(Error::InvalidSpec(format!("state must be 0 or 1, got {w}")));
    }
    // Period-2 value of taking `action` in state `s`.
    let period2_value = |s: u8, action: u8| -> Result<f64> {
        let map = if action == 1 {
            DiscreteMap { actions: [1, 1] }
        } else {
            DiscreteMap { actions: [0, 0] }
        };
        Ok(welfare_discrete_conditional(rows, &map, prop, s)?.value)
    };

    // g2: per state, the better action; both continuation states must be
    // estimable because period one can induce either.
    let mut g2_actions = [0u8; 2];
    let mut continuation = [0.0f64; 2];
    for s in [0u8, 1] {
        let v0 = period2_value(s, 0)?;
        let v1 = period2_value(s, 1)?;
        g2_actions[s as usize] = (v1 > v0) as u8;
        continuation[s as usize] = if v1 > v0 { v1 } else { v0 };
    }

    // g1 at the starting state: immediate value plus continuation.
    let period1_value = |action: u8| -> Result<f64> {
        let map = if action == 1 {
            DiscreteMap { actions: [1, 1] }
        } else {
            DiscreteMap { actions: [0, 0] }
        };
        Ok(welfare_discrete_conditional(rows, &map, prop, w)?.value)
    };
    let total0 = period1_value(0)? + continuation[0];
    let total1 = period1_value(1)? + continuation[1];
    let g1_action = (total1 > total0) as u8;

    let mut g1 = DiscreteMap { actions: [0, 0] };
    g1.actions[w as usize] = g1_action;
    let policy = TwoPeriodPolicy { g1, g2: DiscreteMap { actions: g2_actions } };
    welfare_two_period(rows, &policy, prop, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_core::{RngCore, SeedableRng};

    fn row(index: usize, y: f64, w: u8, w_prev: u8) -> LaggedRow {
        LaggedRow { index, y, w, y_prev: 0.0, w_prev, z_prev: vec![], x_prev: vec![] }
    }

    fn half() -> PropensityModel {
        PropensityModel::constant(0.5).unwrap()
    }

    /// Markov-switching rows: W follows a two-state chain, Y responds to the
    /// current and previous treatment.
    fn markov_rows(rng: &mut rand_chacha::ChaCha8Rng, n: usize, p: f64, q: f64) -> Vec<LaggedRow> {
        let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let mut w_prev = 1u8;
        (1..=n)
            .map(|t| {
                let pr = if w_prev == 1 { p } else { 1.0 - q };
                let w = (unit() < pr) as u8;
                let y = 0.8 * w as f64 - 0.4 * w_prev as f64 + unit() - 0.5;
                let r = row(t, y, w, w_prev);
                w_prev = w;
                r
            })
            .collect()
    }

    fn markov_prop(rows: &[LaggedRow], p: f64, q: f64) -> PropensityModel {
        let e: Vec<f64> =
            rows.iter().map(|r| if r.w_prev == 1 { p } else { 1.0 - q }).collect();
        PropensityModel::known_vector(e).unwrap()
    }

    #[test]
    fn flipping_g1_switches_the_period_two_subsample() {
        // Two-state toy: state 0 rows have large treated outcomes, state 1
        // rows have large control outcomes.
        let rows = vec![
            row(1, 10.0, 1, 0),
            row(2, -1.0, 0, 0),
            row(3, -1.0, 1, 1),
            row(4, 5.0, 0, 1),
        ];
        let g2 = DiscreteMap::new(1, 0).unwrap();
        let stay = TwoPeriodPolicy { g1: DiscreteMap::new(0, 0).unwrap(), g2 };
        let flip = TwoPeriodPolicy { g1: DiscreteMap::new(1, 0).unwrap(), g2 };
        let a = welfare_two_period(&rows, &stay, &half(), 0).unwrap();
        let b = welfare_two_period(&rows, &flip, &half(), 0).unwrap();
        // g1(0)=0 keeps period 2 in state 0 (g2 treats); g1(0)=1 moves it to
        // state 1 (g2 controls).
        assert!((a.value_period2 - 10.0).abs() < 1e-12); // 10/0.5 / 2 rows
        assert!((b.value_period2 - 5.0).abs() < 1e-12); // 5/0.5 / 2 rows
        assert_ne!(a.value_period2, b.value_period2);
    }

    #[test]
    fn hand_computed_ten_row_series() {
        let ys = [1.0, -2.0, 3.0, 0.5, -1.5, 2.5, -0.5, 1.5, -3.0, 2.0];
        let ws = [1u8, 0, 1, 1, 0, 0, 1, 0, 1, 0];
        let wps = [0u8, 1, 0, 1, 1, 0, 0, 1, 0, 1];
        let rows: Vec<LaggedRow> =
            (0..10).map(|i| row(i + 1, ys[i], ws[i], wps[i])).collect();
        let policy = TwoPeriodPolicy {
            g1: DiscreteMap::new(1, 0).unwrap(),
            g2: DiscreteMap::new(0, 1).unwrap(),
        };
        let report = welfare_two_period(&rows, &policy, &half(), 0).unwrap();

        // Hand enumeration with e = 0.5: period 1 over {w_prev = 0} with
        // action g1(0)=1: rows 1,3,6,7,9 -> treated terms 2y for w=1.
        let p1 = (2.0 * 1.0 + 2.0 * 3.0 + 0.0 + 2.0 * -0.5 + 2.0 * -3.0) / 5.0;
        // period 2 over {w_prev = g1(0) = 1} with action g2(1)=1: rows
        // 2,4,5,8,10 -> treated terms 2y for w=1.
        let p2 = (0.0 + 2.0 * 0.5 + 0.0 + 0.0 + 0.0) / 5.0;
        assert!((report.value_period1 - p1).abs() < 1e-12);
        assert!((report.value_period2 - p2).abs() < 1e-12);
        assert!((report.value_total - (p1 + p2)).abs() < 1e-12);
        assert_eq!(report.subsample_sizes[&0], 5);
        assert_eq!(report.subsample_sizes[&1], 5);
    }

    #[test]
    fn zero_outcomes_mean_zero_welfare_for_every_policy() {
        let rows: Vec<LaggedRow> =
            (1..=8).map(|t| row(t, 0.0, (t % 2) as u8, ((t / 2) % 2) as u8)).collect();
        for g1 in DiscreteMap::all() {
            for g2 in DiscreteMap::all() {
                let report =
                    welfare_two_period(&rows, &TwoPeriodPolicy { g1, g2 }, &half(), 1).unwrap();
                assert_eq!(report.value_total, 0.0);
            }
        }
    }

    #[test]
    fn backward_induction_equals_sixteen_way_enumeration() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        for trial in 0..30 {
            let rows = markov_rows(&mut rng, 200, 0.6, 0.7);
            let prop = markov_prop(&rows, 0.6, 0.7);
            let w = (trial % 2) as u8;
            let learned = learn_two_period(&rows, &prop, w).unwrap();

            let mut best = f64::NEG_INFINITY;
            for g1 in DiscreteMap::all() {
                for g2 in DiscreteMap::all() {
                    let report =
                        welfare_two_period(&rows, &TwoPeriodPolicy { g1, g2 }, &prop, w).unwrap();
                    if report.value_total > best {
                        best = report.value_total;
                    }
                }
            }
            assert_eq!(learned.value_total, best, "trial {trial}");
        }
    }

    #[test]
    fn ties_break_to_action_zero() {
        // Symmetric outcomes make both actions equal everywhere.
        let rows = vec![
            row(1, 1.0, 1, 0),
            row(2, 1.0, 0, 0),
            row(3, 1.0, 1, 1),
            row(4, 1.0, 0, 1),
        ];
        let report = learn_two_period(&rows, &half(), 0).unwrap();
        assert_eq!(report.policy.g1.actions, [0, 0]);
        assert_eq!(report.policy.g2.actions, [0, 0]);
    }

    #[test]
    fn dominated_treatment_never_chosen_in_period_two() {
        // Treated outcomes all negative, control outcomes all positive.
        let rows = vec![
            row(1, -1.0, 1, 0),
            row(2, 2.0, 0, 0),
            row(3, -2.0, 1, 1),
            row(4, 1.0, 0, 1),
            row(5, -1.5, 1, 0),
            row(6, 0.5, 0, 1),
        ];
        let report = learn_two_period(&rows, &half(), 0).unwrap();
        assert_eq!(report.policy.g2.actions, [0, 0]);
    }

    #[test]
    fn rows_outside_both_subsamples_are_irrelevant() {
        let rows_a = vec![
            row(1, 1.0, 1, 0),
            row(2, -1.0, 0, 0),
            row(3, 99.0, 1, 1), // state-1 row; starting state 0, g1(0)=0 keeps state 0
            row(4, 2.0, 0, 0),
        ];
        let mut rows_b = rows_a.clone();
        rows_b[2].y = -99.0;
        let policy = TwoPeriodPolicy {
            g1: DiscreteMap::new(0, 0).unwrap(),
            g2: DiscreteMap::new(1, 1).unwrap(),
        };
        let a = welfare_two_period(&rows_a, &policy, &half(), 0).unwrap();
        let b = welfare_two_period(&rows_b, &policy, &half(), 0).unwrap();
        assert_eq!(a.value_total, b.value_total);
    }

    #[test]
    fn empty_reachable_subsample_is_an_error() {
        let rows = vec![row(1, 1.0, 1, 0), row(2, -1.0, 0, 0)];
        // state 1 never observed: period 2 after g1(0)=1 cannot be estimated
        assert!(matches!(
            learn_two_period(&rows, &half(), 0),
            Err(Error::EmptySubsample(1))
        ));
    }
}
