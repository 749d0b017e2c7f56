//! Clustered competing-risks data: records, validation, delimited-text I/O and
//! the time grid on which every counting-process integral is evaluated.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;

use ndarray::{Array1, Array2, Array3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Observed cause code: 0 means censored, `1..=K` a failure cause.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct CauseCode(pub u8);

impl CauseCode {
    pub const CENSORED: CauseCode = CauseCode(0);

    pub fn is_censored(self) -> bool {
        self.0 == 0
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl fmt::Display for CauseCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Time profile multiplying a base covariate value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub enum TimeBasis {
    #[default]
    Constant,
    /// `exp(-t)`
    ExpDecay,
}

impl TimeBasis {
    #[inline]
    pub fn eval<T: Scalar>(self, t: T) -> T {
        match self {
            TimeBasis::Constant => T::one(),
            TimeBasis::ExpDecay => (-t).exp(),
        }
    }

    pub fn is_constant(self) -> bool {
        self == TimeBasis::Constant
    }

    /// Suffix used in column headers to declare the basis.
    pub fn header_suffix(self) -> &'static str {
        match self {
            TimeBasis::Constant => "",
            TimeBasis::ExpDecay => "@exp",
        }
    }
}

/// Covariate path `X(t) = base ⊙ basis(t)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovariatePath<T> {
    pub base: Vec<T>,
    pub basis: Vec<TimeBasis>,
}

impl<T: Scalar> CovariatePath<T> {
    pub fn new(base: Vec<T>, basis: Vec<TimeBasis>) -> Result<Self> {
        if base.len() != basis.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.len(),
                found: base.len(),
            });
        }
        Ok(CovariatePath { base, basis })
    }

    pub fn constant(base: Vec<T>) -> Self {
        let basis = vec![TimeBasis::Constant; base.len()];
        CovariatePath { base, basis }
    }

    pub fn dim(&self) -> usize {
        self.base.len()
    }

    pub fn eval(&self, t: T) -> Array1<T> {
        self.base
            .iter()
            .zip(&self.basis)
            .map(|(&x, b)| x * b.eval(t))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectRecord<T> {
    /// Index into [`ClusteredDataset::cluster_ids`].
    pub cluster: usize,
    /// Observed time `Z = min(T, C)`.
    pub time: T,
    pub cause: CauseCode,
    /// Base covariate values; the dataset holds the shared time bases.
    pub covariates: Vec<T>,
    /// Potential censoring time, recorded only for censoring-complete data.
    pub censoring_time: Option<T>,
}

impl<T: Scalar> SubjectRecord<T> {
    /// `Δ = I(cause ≠ 0)`.
    pub fn is_uncensored(&self) -> bool {
        !self.cause.is_censored()
    }
}

/// Counting process `N^k(t)` and subdistribution risk indicator `Y^k(t) = 1 - N^k(t-)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountingState {
    pub n: u8,
    pub y: u8,
}

/// Evaluates `N^k(t)` and `Y^k(t)` for one subject. Subjects failing from a
/// different cause stay in the risk set after their failure.
pub fn counting_process<T: Scalar>(record: &SubjectRecord<T>, cause: u8, t: T) -> CountingState {
    let is_k = record.cause.0 == cause && cause != 0;
    let n = u8::from(is_k && record.time <= t);
    let y = 1 - u8::from(is_k && record.time < t);
    CountingState { n, y }
}

/// Validated clustered competing-risks data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusteredDataset<T> {
    subjects: Vec<SubjectRecord<T>>,
    cluster_ids: Vec<String>,
    cluster_starts: Vec<usize>,
    covariate_names: Vec<String>,
    bases: Vec<TimeBasis>,
    tau: T,
    n_causes: u8,
    censoring_observed: bool,
}

impl<T: Scalar> ClusteredDataset<T> {
    /// Assembles a dataset from per-cluster record lists. Cluster indices in
    /// the records are overwritten by the position of their cluster.
    pub fn from_clusters(
        clusters: Vec<(String, Vec<SubjectRecord<T>>)>,
        covariate_names: Vec<String>,
        bases: Vec<TimeBasis>,
        n_causes: Option<u8>,
        tau: Option<T>,
    ) -> Result<Self> {
        if covariate_names.len() != bases.len() {
            return Err(Error::DimensionMismatch {
                expected: covariate_names.len(),
                found: bases.len(),
            });
        }
        if covariate_names.is_empty() {
            return Err(Error::InvalidArgument("at least one covariate is required".into()));
        }
        if clusters.len() < 2 {
            return Err(Error::TooFewClusters {
                needed: 2,
                found: clusters.len(),
            });
        }
        let p = covariate_names.len();
        let mut subjects = Vec::new();
        let mut cluster_ids = Vec::with_capacity(clusters.len());
        let mut cluster_starts = vec![0];
        let mut max_cause = 0u8;
        let mut n_ctime = 0usize;
        for (ci, (id, records)) in clusters.into_iter().enumerate() {
            if records.is_empty() {
                return Err(Error::EmptyCluster(id));
            }
            for mut r in records {
                let row = subjects.len() + 1;
                validate_record(&r, p, row)?;
                if r.censoring_time.is_some() {
                    n_ctime += 1;
                }
                max_cause = max_cause.max(r.cause.0);
                r.cluster = ci;
                subjects.push(r);
            }
            cluster_ids.push(id);
            cluster_starts.push(subjects.len());
        }
        let censoring_observed = match n_ctime {
            0 => false,
            k if k == subjects.len() => true,
            _ => {
                let row = subjects
                    .iter()
                    .position(|r| r.censoring_time.is_none())
                    .unwrap_or(0);
                return Err(Error::MissingValue {
                    row: row + 1,
                    column: "ctime".into(),
                });
            }
        };
        let n_causes = match n_causes {
            Some(k) => {
                if k == 0 {
                    return Err(Error::InvalidArgument("number of causes must be >= 1".into()));
                }
                if let Some((row, r)) = subjects.iter().enumerate().find(|(_, r)| r.cause.0 > k) {
                    return Err(Error::UnknownCauseCode {
                        row: row + 1,
                        code: r.cause.0 as i64,
                        max: k,
                    });
                }
                k
            }
            None => max_cause.max(1),
        };
        let mut ds = ClusteredDataset {
            subjects,
            cluster_ids,
            cluster_starts,
            covariate_names,
            bases,
            tau: T::zero(),
            n_causes,
            censoring_observed,
        };
        ds.tau = ds.resolve_tau(tau)?;
        Ok(ds)
    }

    fn resolve_tau(&self, tau: Option<T>) -> Result<T> {
        let max_time = self.max_time();
        match tau {
            Some(t) => {
                if !(t > T::zero()) || !t.is_finite() {
                    return Err(Error::InvalidTau(t.to_f64_lossy()));
                }
                if t > max_time {
                    return Err(Error::TauBeyondFollowUp {
                        tau: t.to_f64_lossy(),
                        max_time: max_time.to_f64_lossy(),
                    });
                }
                Ok(t)
            }
            None => self
                .subjects
                .iter()
                .filter(|r| r.is_uncensored())
                .map(|r| r.time)
                .fold(None, |acc: Option<T>, t| Some(acc.map_or(t, |a| a.max(t))))
                .ok_or(Error::NoUncensoredTimes),
        }
    }

    /// Same data with a different analysis horizon (`None` restores the default).
    pub fn with_tau(&self, tau: Option<T>) -> Result<Self> {
        let mut ds = self.clone();
        ds.tau = ds.resolve_tau(tau)?;
        Ok(ds)
    }

    /// Right-censored view: drops the potential censoring times.
    pub fn without_censoring_times(&self) -> Self {
        let mut ds = self.clone();
        for r in &mut ds.subjects {
            r.censoring_time = None;
        }
        ds.censoring_observed = false;
        ds
    }

    /// Builds a dataset from the listed clusters (repeats allowed). Repeated
    /// clusters get distinct ids.
    pub fn resample_clusters(&self, indices: &[usize], tau: Option<T>) -> Result<Self> {
        let mut seen: HashMap<usize, usize> = HashMap::new();
        let clusters = indices
            .iter()
            .map(|&c| {
                let copy = seen.entry(c).or_insert(0);
                *copy += 1;
                let id = if *copy == 1 {
                    self.cluster_ids[c].clone()
                } else {
                    format!("{}#{}", self.cluster_ids[c], copy)
                };
                (id, self.cluster(c).to_vec())
            })
            .collect();
        ClusteredDataset::from_clusters(
            clusters,
            self.covariate_names.clone(),
            self.bases.clone(),
            Some(self.n_causes),
            tau,
        )
    }

    pub fn subjects(&self) -> &[SubjectRecord<T>] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Number of clusters `n`.
    pub fn n_clusters(&self) -> usize {
        self.cluster_ids.len()
    }

    pub fn cluster_ids(&self) -> &[String] {
        &self.cluster_ids
    }

    pub fn cluster_range(&self, c: usize) -> Range<usize> {
        self.cluster_starts[c]..self.cluster_starts[c + 1]
    }

    pub fn cluster(&self, c: usize) -> &[SubjectRecord<T>] {
        &self.subjects[self.cluster_range(c)]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.cluster_starts.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn n_covariates(&self) -> usize {
        self.bases.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn bases(&self) -> &[TimeBasis] {
        &self.bases
    }

    pub fn covariate_path(&self, s: usize) -> CovariatePath<T> {
        CovariatePath {
            base: self.subjects[s].covariates.clone(),
            basis: self.bases.clone(),
        }
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn n_causes(&self) -> u8 {
        self.n_causes
    }

    pub fn censoring_observed(&self) -> bool {
        self.censoring_observed
    }

    pub fn max_time(&self) -> T {
        self.subjects
            .iter()
            .map(|r| r.time)
            .fold(T::neg_infinity(), |a, b| a.max(b))
    }

    /// Number of cause-`k` events at or before `tau`.
    pub fn events_before_tau(&self, cause: u8) -> usize {
        self.subjects
            .iter()
            .filter(|r| r.cause.0 == cause && r.time <= self.tau)
            .count()
    }
}

fn validate_record<T: Scalar>(r: &SubjectRecord<T>, p: usize, row: usize) -> Result<()> {
    if !r.time.is_finite() {
        return Err(Error::NonFiniteValue {
            row,
            column: "time".into(),
        });
    }
    if r.time <= T::zero() {
        return Err(Error::NonPositiveTime {
            row,
            value: r.time.to_f64_lossy(),
        });
    }
    if r.covariates.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: r.covariates.len(),
        });
    }
    if r.covariates.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteValue {
            row,
            column: "covariate".into(),
        });
    }
    if let Some(c) = r.censoring_time {
        if !c.is_finite() {
            return Err(Error::NonFiniteValue {
                row,
                column: "ctime".into(),
            });
        }
        let consistent = if r.cause.is_censored() {
            c == r.time
        } else {
            c >= r.time
        };
        if !consistent {
            return Err(Error::InvalidArgument(format!(
                "row {row}: censoring time inconsistent with observed time and status"
            )));
        }
    }
    Ok(())
}

/// Accumulates rows in arbitrary order, grouping them by cluster id in order
/// of first appearance.
#[derive(Debug, Clone)]
pub struct DatasetBuilder<T> {
    covariate_names: Vec<String>,
    bases: Vec<TimeBasis>,
    n_causes: Option<u8>,
    index: HashMap<String, usize>,
    clusters: Vec<(String, Vec<SubjectRecord<T>>)>,
    rows: usize,
}

impl<T: Scalar> DatasetBuilder<T> {
    pub fn new(covariate_names: Vec<String>, bases: Vec<TimeBasis>, n_causes: Option<u8>) -> Self {
        DatasetBuilder {
            covariate_names,
            bases,
            n_causes,
            index: HashMap::new(),
            clusters: Vec::new(),
            rows: 0,
        }
    }

    pub fn push(
        &mut self,
        cluster_id: &str,
        time: T,
        status: i64,
        covariates: Vec<T>,
        censoring_time: Option<T>,
    ) -> Result<()> {
        self.rows += 1;
        let row = self.rows;
        let max = self.n_causes.unwrap_or(u8::MAX);
        if status < 0 || status > max as i64 {
            return Err(Error::UnknownCauseCode {
                row,
                code: status,
                max,
            });
        }
        let record = SubjectRecord {
            cluster: 0,
            time,
            cause: CauseCode(status as u8),
            covariates,
            censoring_time,
        };
        validate_record(&record, self.covariate_names.len(), row)?;
        let next = self.clusters.len();
        let ci = *self.index.entry(cluster_id.to_string()).or_insert(next);
        if ci == next {
            self.clusters.push((cluster_id.to_string(), Vec::new()));
        }
        self.clusters[ci].1.push(record);
        Ok(())
    }

    pub fn build(self, tau: Option<T>) -> Result<ClusteredDataset<T>> {
        ClusteredDataset::from_clusters(
            self.clusters,
            self.covariate_names,
            self.bases,
            self.n_causes,
            tau,
        )
    }
}

/// Column mapping for delimited input.
#[derive(Debug, Clone)]
pub struct Schema {
    pub cluster: String,
    pub time: String,
    pub status: String,
    /// Covariate columns; `None` takes every column that is not otherwise used.
    pub covariates: Option<Vec<String>>,
    /// Censoring-time column, used when present in the header.
    pub ctime: Option<String>,
    /// Declared number of causes `K`; defaults to the largest status observed.
    pub n_causes: Option<u8>,
    /// Covariates evaluated as `x * exp(-t)` in addition to `@exp` headers.
    pub time_varying: Vec<String>,
    pub delimiter: u8,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            cluster: "cluster".into(),
            time: "time".into(),
            status: "status".into(),
            covariates: None,
            ctime: Some("ctime".into()),
            n_causes: None,
            time_varying: Vec::new(),
            delimiter: b',',
        }
    }
}

/// Columns written alongside simulated data; never read as covariates.
pub const TRUTH_COLUMNS: [&str; 3] = ["true_time", "true_cause", "frailty"];

fn split_header(h: &str) -> (String, TimeBasis) {
    match h.strip_suffix("@exp") {
        Some(name) => (name.to_string(), TimeBasis::ExpDecay),
        None => (h.to_string(), TimeBasis::Constant),
    }
}

fn parse_field<T: Scalar>(field: &str, row: usize, column: &str) -> Result<T> {
    let trimmed = field.trim();
    if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("na") {
        return Err(Error::MissingValue {
            row,
            column: column.into(),
        });
    }
    let v: f64 = trimmed.parse().map_err(|_| Error::Parse {
        row,
        column: column.into(),
        value: trimmed.into(),
    })?;
    if !v.is_finite() {
        return Err(Error::NonFiniteValue {
            row,
            column: column.into(),
        });
    }
    Ok(T::lit(v))
}

/// Reads delimited text with a header row into a validated dataset.
pub fn load_dataset<T: Scalar, R: Read>(
    source: R,
    schema: &Schema,
    tau: Option<T>,
) -> Result<ClusteredDataset<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers: Vec<(String, TimeBasis)> = reader
        .headers()?
        .iter()
        .map(split_header)
        .collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|(h, _)| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let cluster_col = find(&schema.cluster)?;
    let time_col = find(&schema.time)?;
    let status_col = find(&schema.status)?;
    let ctime_col = schema
        .ctime
        .as_deref()
        .and_then(|c| headers.iter().position(|(h, _)| h == c));
    let cov_cols: Vec<usize> = match &schema.covariates {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|&i| {
                i != cluster_col
                    && i != time_col
                    && i != status_col
                    && Some(i) != ctime_col
                    && !TRUTH_COLUMNS.contains(&headers[i].0.as_str())
            })
            .collect(),
    };
    for name in &schema.time_varying {
        if !cov_cols.iter().any(|&i| &headers[i].0 == name) {
            return Err(Error::MissingColumn(name.clone()));
        }
    }
    let names: Vec<String> = cov_cols.iter().map(|&i| headers[i].0.clone()).collect();
    let bases: Vec<TimeBasis> = cov_cols
        .iter()
        .map(|&i| {
            if schema.time_varying.contains(&headers[i].0) {
                TimeBasis::ExpDecay
            } else {
                headers[i].1
            }
        })
        .collect();

    let mut builder = DatasetBuilder::new(names.clone(), bases, schema.n_causes);
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let cluster = get(cluster_col).trim();
        if cluster.is_empty() {
            return Err(Error::MissingValue {
                row,
                column: schema.cluster.clone(),
            });
        }
        let time: T = parse_field(get(time_col), row, &schema.time)?;
        let status_raw = get(status_col).trim();
        let status: i64 = status_raw.parse().map_err(|_| Error::Parse {
            row,
            column: schema.status.clone(),
            value: status_raw.into(),
        })?;
        let covariates = cov_cols
            .iter()
            .zip(&names)
            .map(|(&i, n)| parse_field(get(i), row, n))
            .collect::<Result<Vec<T>>>()?;
        let ctime = match ctime_col {
            Some(i) => Some(parse_field(get(i), row, "ctime")?),
            None => None,
        };
        builder.push(cluster, time, status, covariates, ctime)?;
    }
    builder.build(tau)
}

/// Writes the dataset in the format read by [`load_dataset`]; extra columns
/// (one value per subject, in subject order) are appended verbatim.
pub fn save_dataset_with<T: Scalar, W: Write>(
    ds: &ClusteredDataset<T>,
    sink: W,
    extra: &[(&str, Vec<String>)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header: Vec<String> = vec!["cluster".into(), "time".into(), "status".into()];
    if ds.censoring_observed {
        header.push("ctime".into());
    }
    for (name, basis) in ds.covariate_names.iter().zip(&ds.bases) {
        header.push(format!("{name}{}", basis.header_suffix()));
    }
    for (name, values) in extra {
        if values.len() != ds.n_subjects() {
            return Err(Error::DimensionMismatch {
                expected: ds.n_subjects(),
                found: values.len(),
            });
        }
        header.push((*name).to_string());
    }
    w.write_record(&header)?;
    for (s, r) in ds.subjects.iter().enumerate() {
        let mut row: Vec<String> = vec![
            ds.cluster_ids[r.cluster].clone(),
            r.time.to_string(),
            r.cause.to_string(),
        ];
        if let Some(c) = r.censoring_time {
            row.push(c.to_string());
        }
        row.extend(r.covariates.iter().map(|x| x.to_string()));
        row.extend(extra.iter().map(|(_, v)| v[s].clone()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset<T: Scalar, W: Write>(ds: &ClusteredDataset<T>, sink: W) -> Result<()> {
    save_dataset_with(ds, sink, &[])
}

/// Knots on `(0, tau]` plus per-interval quadrature moments of the covariate
/// time bases.
///
/// Interval `i` is `(knots[i-1], knots[i])` with `knots[-1] = 0`. Every
/// weight and risk indicator is constant on the open interval, so integrals
/// against `dt` reduce to the basis moments `∫ b_l` and `∫ b_l b_m`, computed
/// here by the trapezoid rule with `refinement` panels per interval.
#[derive(Debug, Clone, Serialize)]
pub struct TimeGrid<T> {
    knots: Vec<T>,
    refinement: usize,
    bases: Vec<TimeBasis>,
    basis_at_knots: Array2<T>,
    m1: Array2<T>,
    m2: Array3<T>,
}

/// Default trapezoid panels per knot interval for time-varying covariates.
pub const DEFAULT_REFINEMENT: usize = 16;

/// Builds the integration grid. The refinement collapses to 1 when every
/// covariate is constant in time (the trapezoid rule is then exact).
pub fn build_grid<T: Scalar>(ds: &ClusteredDataset<T>, refinement: usize) -> Result<TimeGrid<T>> {
    if refinement == 0 {
        return Err(Error::InvalidArgument("quadrature refinement must be >= 1".into()));
    }
    let tau = ds.tau();
    let mut knots: Vec<T> = ds
        .subjects()
        .iter()
        .flat_map(|r| std::iter::once(r.time).chain(r.censoring_time))
        .filter(|&t| t <= tau)
        .collect();
    knots.push(tau);
    TimeGrid::from_knots(knots, ds.bases().to_vec(), refinement)
}

impl<T: Scalar> TimeGrid<T> {
    /// Sorts and deduplicates `knots`, then precomputes the basis moments.
    pub fn from_knots(mut knots: Vec<T>, bases: Vec<TimeBasis>, refinement: usize) -> Result<Self> {
        if refinement == 0 {
            return Err(Error::InvalidArgument("quadrature refinement must be >= 1".into()));
        }
        if knots.iter().any(|t| !t.is_finite() || *t <= T::zero()) {
            return Err(Error::InvalidArgument("grid knots must be positive and finite".into()));
        }
        knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        knots.dedup();
        if knots.is_empty() {
            return Err(Error::InvalidArgument("empty time grid".into()));
        }
        let q = if bases.iter().all(|b| b.is_constant()) {
            1
        } else {
            refinement
        };
        let p = bases.len();
        let j = knots.len();
        let mut m1 = Array2::zeros((j, p));
        let mut m2 = Array3::zeros((j, p, p));
        let mut basis_at_knots = Array2::zeros((j, p));
        let mut lo = T::zero();
        for (i, &hi) in knots.iter().enumerate() {
            let (a, b) = trapezoid_moments(&bases, lo, hi, q);
            m1.row_mut(i).assign(&a);
            m2.index_axis_mut(ndarray::Axis(0), i).assign(&b);
            for (l, basis) in bases.iter().enumerate() {
                basis_at_knots[[i, l]] = basis.eval(hi);
            }
            lo = hi;
        }
        Ok(TimeGrid {
            knots,
            refinement: q,
            bases,
            basis_at_knots,
            m1,
            m2,
        })
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    pub fn tau(&self) -> T {
        *self.knots.last().expect("non-empty grid")
    }

    /// Effective number of trapezoid panels per interval.
    pub fn refinement(&self) -> usize {
        self.refinement
    }

    pub fn bases(&self) -> &[TimeBasis] {
        &self.bases
    }

    pub fn n_covariates(&self) -> usize {
        self.bases.len()
    }

    /// Left end of interval `i`.
    pub fn interval_start(&self, i: usize) -> T {
        if i == 0 {
            T::zero()
        } else {
            self.knots[i - 1]
        }
    }

    /// Basis values `b(t_i)` at knot `i`.
    pub fn basis_at_knot(&self, i: usize) -> ndarray::ArrayView1<'_, T> {
        self.basis_at_knots.row(i)
    }

    /// `∫ b(u) du` over interval `i`.
    pub fn m1(&self, i: usize) -> ndarray::ArrayView1<'_, T> {
        self.m1.row(i)
    }

    /// `∫ b(u) b(u)' du` over interval `i`.
    pub fn m2(&self, i: usize) -> ndarray::ArrayView2<'_, T> {
        self.m2.index_axis(ndarray::Axis(0), i)
    }

    /// Number of knots `<= t`.
    pub fn count_le(&self, t: T) -> usize {
        self.knots.partition_point(|&k| k <= t)
    }

    /// Number of knots `< t`.
    pub fn count_lt(&self, t: T) -> usize {
        self.knots.partition_point(|&k| k < t)
    }

    /// Index of a knot equal to `t`, if any.
    pub fn knot_index(&self, t: T) -> Option<usize> {
        let i = self.count_lt(t);
        (i < self.knots.len() && self.knots[i] == t).then_some(i)
    }

    /// Basis moments over `[lo, hi]` with the grid's refinement.
    pub fn partial_moments(&self, lo: T, hi: T) -> (Array1<T>, Array2<T>) {
        trapezoid_moments(&self.bases, lo, hi, self.refinement)
    }
}

fn trapezoid_moments<T: Scalar>(
    bases: &[TimeBasis],
    lo: T,
    hi: T,
    panels: usize,
) -> (Array1<T>, Array2<T>) {
    let p = bases.len();
    let mut m1 = Array1::zeros(p);
    let mut m2 = Array2::zeros((p, p));
    if hi <= lo {
        return (m1, m2);
    }
    let h = (hi - lo) / T::lit(panels as f64);
    let half = T::lit(0.5) * h;
    let eval = |u: T| -> Vec<T> { bases.iter().map(|b| b.eval(u)).collect() };
    let mut left = eval(lo);
    for k in 1..=panels {
        let u = if k == panels {
            hi
        } else {
            lo + h * T::lit(k as f64)
        };
        let right = eval(u);
        for l in 0..p {
            m1[l] += half * (left[l] + right[l]);
            for m in 0..p {
                m2[[l, m]] += half * (left[l] * left[m] + right[l] * right[m]);
            }
        }
        left = right;
    }
    (m1, m2)
}
