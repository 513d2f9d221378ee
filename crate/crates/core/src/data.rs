//! Core data types: an observed time series, CSV ingestion, and the lagged
//! view that every estimator consumes.
//!
//! The observed path is `{(Y_t, W_t, Z_t)}` for `t = 0..T-1`: a real outcome,
//! a binary treatment, and `k >= 0` real covariates. Estimators work on
//! `LaggedRow`s pairing `(Y_t, W_t)` with the period `t-1` observables.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// An observed multivariate time series. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    outcomes: Vec<f64>,
    treatments: Vec<u8>,
    covariates: Vec<f64>, // row-major, len() == T * k
    k: usize,
}

impl TimeSeries {
    /// Builds a validated series. `covariates` is row-major with `k` columns.
    pub fn new(outcomes: Vec<f64>, treatments: Vec<u8>, covariates: Vec<f64>, k: usize) -> Result<Self> {
        let t_len = outcomes.len();
        if t_len < 2 {
            return Err(Error::InvalidSpec(format!("series length must be >= 2, got {t_len}")));
        }
        if treatments.len() != t_len {
            return Err(Error::DimensionMismatch(format!(
                "treatments length {} != outcomes length {}",
                treatments.len(),
                t_len
            )));
        }
        if covariates.len() != t_len * k {
            return Err(Error::DimensionMismatch(format!(
                "covariates length {} != T*k = {}",
                covariates.len(),
                t_len * k
            )));
        }
        for (t, w) in treatments.iter().enumerate() {
            if *w > 1 {
                return Err(Error::NonBinaryTreatment { t, value: w.to_string() });
            }
        }
        for (t, y) in outcomes.iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::NonFiniteValue { t, column: "y".into() });
            }
        }
        for (i, z) in covariates.iter().enumerate() {
            if !z.is_finite() {
                return Err(Error::NonFiniteValue {
                    t: i / k.max(1),
                    column: format!("z{}", i % k.max(1) + 1),
                });
            }
        }
        Ok(TimeSeries { outcomes, treatments, covariates, k })
    }

    /// Number of periods T.
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    /// Number of covariate columns k.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn treatments(&self) -> &[u8] {
        &self.treatments
    }

    pub fn outcome(&self, t: usize) -> f64 {
        self.outcomes[t]
    }

    pub fn treatment(&self, t: usize) -> u8 {
        self.treatments[t]
    }

    pub fn covariate_row(&self, t: usize) -> &[f64] {
        &self.covariates[t * self.k..(t + 1) * self.k]
    }
}

/// One coordinate of the period `t-1` conditioning vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Column {
    /// Y_{t-1}
    OutcomeLag,
    /// W_{t-1}
    TreatmentLag,
    /// Z_{t-1,j} (0-based j)
    CovariateLag(usize),
}

impl Column {
    /// Stable text name: `y_lag`, `w_lag`, `z1_lag`, `z2_lag`, ...
    pub fn name(&self) -> String {
        match self {
            Column::OutcomeLag => "y_lag".into(),
            Column::TreatmentLag => "w_lag".into(),
            Column::CovariateLag(j) => format!("z{}_lag", j + 1),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "y_lag" => Ok(Column::OutcomeLag),
            "w_lag" => Ok(Column::TreatmentLag),
            _ => {
                let inner = text
                    .strip_prefix('z')
                    .and_then(|s| s.strip_suffix("_lag"))
                    .ok_or_else(|| Error::SpecOutOfRange(format!("unknown column `{text}`")))?;
                let j: usize = inner
                    .parse()
                    .map_err(|_| Error::SpecOutOfRange(format!("unknown column `{text}`")))?;
                if j == 0 {
                    return Err(Error::SpecOutOfRange("covariate columns are numbered from z1".into()));
                }
                Ok(Column::CovariateLag(j - 1))
            }
        }
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

impl Serialize for Column {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Column {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Column::parse(&text).map_err(D::Error::custom)
    }
}

/// Ordered, duplicate-free selection of lagged columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColumnSpec(Vec<Column>);

impl ColumnSpec {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        for (i, a) in columns.iter().enumerate() {
            if columns[i + 1..].contains(a) {
                return Err(Error::SpecOutOfRange(format!("duplicate column `{a}`")));
            }
        }
        Ok(ColumnSpec(columns))
    }

    /// Parses a comma-separated list such as `y_lag,z1_lag`.
    pub fn parse(text: &str) -> Result<Self> {
        let cols = text
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| Column::parse(s.trim()))
            .collect::<Result<Vec<_>>>()?;
        ColumnSpec::new(cols)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn columns(&self) -> &[Column] {
        &self.0
    }

    /// Checks every covariate index against the number of covariates k.
    pub fn validate_against(&self, k: usize) -> Result<()> {
        for col in &self.0 {
            if let Column::CovariateLag(j) = col {
                if *j >= k {
                    return Err(Error::SpecOutOfRange(format!(
                        "column `{col}` refers to covariate {} but series has k={k}",
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.0.iter().map(Column::name).collect()
    }
}

impl fmt::Display for ColumnSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.names().join(","))
    }
}

/// One estimation row: `(Y_t, W_t)` paired with period `t-1` observables.
///
/// `x_prev` is the conditioning vector assembled by the `ColumnSpec` passed
/// to [`build_lagged`]; it is what propensity models and kernel smoothing
/// condition on. The raw lagged values are kept alongside so policy rules can
/// select their own coordinates independently of that spec.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedRow {
    /// t, in `[1, T-1]`.
    pub index: usize,
    /// Y_t
    pub y: f64,
    /// W_t
    pub w: u8,
    /// Y_{t-1}
    pub y_prev: f64,
    /// W_{t-1}
    pub w_prev: u8,
    /// Z_{t-1}
    pub z_prev: Vec<f64>,
    /// Conditioning vector selected from the lagged values.
    pub x_prev: Vec<f64>,
}

impl LaggedRow {
    /// Value of one lagged column. Panics only if the column was not
    /// validated against this series (covariate index out of range).
    pub fn lagged_value(&self, col: Column) -> f64 {
        match col {
            Column::OutcomeLag => self.y_prev,
            Column::TreatmentLag => self.w_prev as f64,
            Column::CovariateLag(j) => self.z_prev[j],
        }
    }
}

/// Assembles the T-1 lagged rows of a series; row t carries `(Y_t, W_t)` and
/// the spec-selected coordinates of the period `t-1` observables.
pub fn build_lagged(series: &TimeSeries, spec: &ColumnSpec) -> Result<Vec<LaggedRow>> {
    spec.validate_against(series.k())?;
    let mut rows = Vec::with_capacity(series.len() - 1);
    for t in 1..series.len() {
        let z_prev = series.covariate_row(t - 1).to_vec();
        let row = LaggedRow {
            index: t,
            y: series.outcome(t),
            w: series.treatment(t),
            y_prev: series.outcome(t - 1),
            w_prev: series.treatment(t - 1),
            x_prev: Vec::new(),
            z_prev,
        };
        let x_prev = spec.columns().iter().map(|c| row.lagged_value(*c)).collect();
        rows.push(LaggedRow { x_prev, ..row });
    }
    Ok(rows)
}

/// Loads a series from a CSV file with header exactly `t,y,w,z1,...,zk`.
///
/// UTF-8, `.` decimal separator, no missing values; `t` must be contiguous
/// integers from 0.
pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<TimeSeries> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<TimeSeries> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::MalformedHeader("empty file".into()))?;
    let fields: Vec<&str> = header.trim_end().split(',').collect();
    if fields.len() < 3 || fields[0] != "t" || fields[1] != "y" || fields[2] != "w" {
        return Err(Error::MalformedHeader(format!("expected `t,y,w,z1,...,zk`, got `{header}`")));
    }
    let k = fields.len() - 3;
    for (j, name) in fields[3..].iter().enumerate() {
        if *name != format!("z{}", j + 1) {
            return Err(Error::MalformedHeader(format!(
                "covariate column {} must be named z{}, got `{name}`",
                j + 4,
                j + 1
            )));
        }
    }

    let mut outcomes = Vec::new();
    let mut treatments = Vec::new();
    let mut covariates = Vec::new();
    for (row_idx, line) in lines.enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != k + 3 {
            return Err(Error::MalformedHeader(format!(
                "row {row_idx} has {} fields, expected {}",
                cells.len(),
                k + 3
            )));
        }
        let t: i64 = cells[0]
            .parse()
            .map_err(|_| Error::UnsortedTime { row: row_idx })?;
        if t != row_idx as i64 {
            return Err(Error::UnsortedTime { row: row_idx });
        }
        let y: f64 = cells[1]
            .parse()
            .map_err(|_| Error::NonFiniteValue { t: row_idx, column: "y".into() })?;
        if !y.is_finite() {
            return Err(Error::NonFiniteValue { t: row_idx, column: "y".into() });
        }
        let w: f64 = cells[2].parse().map_err(|_| Error::NonBinaryTreatment {
            t: row_idx,
            value: cells[2].to_string(),
        })?;
        if w != 0.0 && w != 1.0 {
            return Err(Error::NonBinaryTreatment { t: row_idx, value: cells[2].to_string() });
        }
        for (j, cell) in cells[3..].iter().enumerate() {
            let z: f64 = cell.parse().map_err(|_| Error::NonFiniteValue {
                t: row_idx,
                column: format!("z{}", j + 1),
            })?;
            if !z.is_finite() {
                return Err(Error::NonFiniteValue { t: row_idx, column: format!("z{}", j + 1) });
            }
            covariates.push(z);
        }
        outcomes.push(y);
        treatments.push(w as u8);
    }
    TimeSeries::new(outcomes, treatments, covariates, k)
}

/// Writes a series in the exact schema read by [`load_csv`], emitting 17
/// significant digits so numeric fields round-trip bit-for-bit.
pub fn write_csv<P: AsRef<Path>>(series: &TimeSeries, path: P) -> Result<()> {
    fs::write(path, format_csv(series))?;
    Ok(())
}

pub fn format_csv(series: &TimeSeries) -> String {
    let mut out = String::from("t,y,w");
    for j in 0..series.k() {
        out.push_str(&format!(",z{}", j + 1));
    }
    out.push('\n');
    for t in 0..series.len() {
        out.push_str(&format!("{t},{:.16e},{}", series.outcome(t), series.treatment(t)));
        for z in series.covariate_row(t) {
            out.push_str(&format!(",{z:.16e}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_series() -> TimeSeries {
        // T=4, k=2
        TimeSeries::new(
            vec![0.5, -1.25, 2.0, 3.5],
            vec![1, 0, 1, 1],
            vec![10.0, 20.0, 11.0, 21.0, 12.0, 22.0, 13.0, 23.0],
            2,
        )
        .unwrap()
    }

    #[test]
    fn parse_three_rows_no_covariates() {
        let ts = parse_csv("t,y,w\n0,1,1\n1,2,0\n2,3,1\n").unwrap();
        assert_eq!(ts.len(), 3);
        assert_eq!(ts.k(), 0);
        assert_eq!(ts.outcomes(), &[1.0, 2.0, 3.0]);
        assert_eq!(ts.treatments(), &[1, 0, 1]);
    }

    #[test]
    fn non_binary_treatment_reports_row() {
        let err = parse_csv("t,y,w\n0,1,1\n1,2,2\n").unwrap_err();
        match err {
            Error::NonBinaryTreatment { t, .. } => assert_eq!(t, 1),
            other => panic!("expected NonBinaryTreatment, got {other:?}"),
        }
    }

    #[test]
    fn header_must_match_exactly() {
        assert!(matches!(parse_csv("time,y,w\n0,1,1\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(parse_csv("t,y,w,zz\n0,1,1,0\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(parse_csv("t,y,w,z2\n0,1,1,0\n"), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn gap_or_disorder_in_time_is_rejected() {
        assert!(matches!(
            parse_csv("t,y,w\n0,1,1\n2,2,0\n"),
            Err(Error::UnsortedTime { row: 1 })
        ));
        assert!(matches!(
            parse_csv("t,y,w\n1,1,1\n0,2,0\n"),
            Err(Error::UnsortedTime { row: 0 })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            parse_csv("t,y,w\n0,nan,1\n1,2,0\n"),
            Err(Error::NonFiniteValue { t: 0, .. })
        ));
        assert!(matches!(
            parse_csv("t,y,w,z1\n0,1,1,inf\n"),
            Err(Error::NonFiniteValue { t: 0, .. })
        ));
    }

    #[test]
    fn weekly_layout_round_trips() {
        // 92 rows, k=7: the shape of a weekly panel-style export.
        let t_len = 92;
        let k = 7;
        let outcomes: Vec<f64> = (0..t_len).map(|t| (t as f64 * 0.37).sin() * 1e3).collect();
        let treatments: Vec<u8> = (0..t_len).map(|t| (t % 3 == 0) as u8).collect();
        let covariates: Vec<f64> = (0..t_len * k)
            .map(|i| ((i as f64) * 0.11).cos() / 7.0 + i as f64)
            .collect();
        let ts = TimeSeries::new(outcomes, treatments, covariates, k).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weekly.csv");
        write_csv(&ts, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.len(), 92);
        assert_eq!(back.k(), 7);
        assert_eq!(back, ts);
    }

    #[test]
    fn build_lagged_minimal() {
        let ts = TimeSeries::new(vec![1.0, 2.0], vec![1, 0], vec![], 0).unwrap();
        let spec = ColumnSpec::new(vec![Column::TreatmentLag]).unwrap();
        let rows = build_lagged(&ts, &spec).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].index, 1);
        assert_eq!(rows[0].x_prev, vec![1.0]);
        assert_eq!(rows[0].y, 2.0);
        assert_eq!(rows[0].w, 0);
    }

    #[test]
    fn build_lagged_matches_hand_shift() {
        let ts = small_series();
        let spec = ColumnSpec::parse("y_lag,z1_lag").unwrap();
        let rows = build_lagged(&ts, &spec).unwrap();
        assert_eq!(rows.len(), 3);
        // Hand-shifted: x_prev[t] = (y[t-1], z1[t-1]).
        let expected = [(0.5, 10.0), (-1.25, 11.0), (2.0, 12.0)];
        for (row, (y_lag, z_lag)) in rows.iter().zip(expected) {
            assert_eq!(row.x_prev, vec![y_lag, z_lag]);
        }
        assert_eq!(rows[1].y, 2.0);
        assert_eq!(rows[1].w_prev, 0);
    }

    #[test]
    fn covariate_out_of_range_rejected() {
        let ts = small_series();
        let spec = ColumnSpec::new(vec![Column::CovariateLag(5)]).unwrap();
        assert!(matches!(build_lagged(&ts, &spec), Err(Error::SpecOutOfRange(_))));
    }

    #[test]
    fn duplicate_columns_rejected() {
        assert!(ColumnSpec::parse("y_lag,y_lag").is_err());
    }

    #[test]
    fn column_names_round_trip() {
        for col in [Column::OutcomeLag, Column::TreatmentLag, Column::CovariateLag(6)] {
            assert_eq!(Column::parse(&col.name()).unwrap(), col);
        }
        assert!(Column::parse("z0_lag").is_err());
        assert!(Column::parse("q_lag").is_err());
    }

    #[test]
    fn permuted_covariates_with_compensated_spec_agree() {
        let ts = small_series();
        // Swap z1 and z2 in the data, swap them back in the spec.
        let mut swapped = Vec::new();
        for t in 0..ts.len() {
            let row = ts.covariate_row(t);
            swapped.extend_from_slice(&[row[1], row[0]]);
        }
        let ts_swapped =
            TimeSeries::new(ts.outcomes().to_vec(), ts.treatments().to_vec(), swapped, 2).unwrap();
        let spec = ColumnSpec::parse("z1_lag,z2_lag").unwrap();
        let spec_comp = ColumnSpec::parse("z2_lag,z1_lag").unwrap();
        let rows = build_lagged(&ts, &spec).unwrap();
        let rows_comp = build_lagged(&ts_swapped, &spec_comp).unwrap();
        for (a, b) in rows.iter().zip(&rows_comp) {
            assert_eq!(a.x_prev, b.x_prev);
            assert_eq!(a.y, b.y);
        }
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(
            ys in proptest::collection::vec(-1e12f64..1e12, 2..40),
            seed in any::<u64>(),
        ) {
            let t_len = ys.len();
            let ws: Vec<u8> = (0..t_len).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
            let zs: Vec<f64> = ys.iter().map(|y| y * 0.3141592653589793 + 1e-9).collect();
            let ts = TimeSeries::new(ys, ws, zs, 1).unwrap();
            let back = parse_csv(&format_csv(&ts)).unwrap();
            prop_assert_eq!(back, ts);
        }

        #[test]
        fn lagged_length_is_t_minus_one(t_len in 2usize..60) {
            let ys: Vec<f64> = (0..t_len).map(|i| i as f64).collect();
            let ws: Vec<u8> = (0..t_len).map(|i| (i % 2) as u8).collect();
            let ts = TimeSeries::new(ys, ws, vec![], 0).unwrap();
            let spec = ColumnSpec::new(vec![Column::OutcomeLag]).unwrap();
            prop_assert_eq!(build_lagged(&ts, &spec).unwrap().len(), t_len - 1);
        }
    }
}
