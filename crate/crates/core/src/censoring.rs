//! Kaplan–Meier estimate of the censoring survival function and the weights
//! derived from it.

use std::io::Write;

use serde::Serialize;

use crate::dataset::{ClusteredDataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default floor below which `G(t)` is treated as zero.
pub const DEFAULT_GHAT_FLOOR: f64 = 1e-10;

/// Pooled product-limit fit with censoring as the event.
///
/// At a tied time `u`, failures are kept in the censoring risk set, so the
/// risk set is `#{Z >= u}` and the jump uses the censored count at `u`.
#[derive(Debug, Clone, Serialize)]
pub struct CensoringModel<T> {
    km_times: Vec<T>,
    km_values: Vec<T>,
    cum_hazard: Vec<T>,
    events: Vec<usize>,
    at_risk: Vec<usize>,
    sorted_times: Vec<T>,
    n_clusters: usize,
    tau: T,
    floor: T,
}

pub fn fit_censoring_km<T: Scalar>(ds: &ClusteredDataset<T>) -> Result<CensoringModel<T>> {
    fit_censoring_km_with_floor(ds, T::lit(DEFAULT_GHAT_FLOOR))
}

pub fn fit_censoring_km_with_floor<T: Scalar>(
    ds: &ClusteredDataset<T>,
    floor: T,
) -> Result<CensoringModel<T>> {
    let mut sorted_times: Vec<T> = ds.subjects().iter().map(|r| r.time).collect();
    sorted_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut censored: Vec<T> = ds
        .subjects()
        .iter()
        .filter(|r| r.cause.is_censored())
        .map(|r| r.time)
        .collect();
    censored.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let total = sorted_times.len();
    let mut km_times = Vec::new();
    let mut km_values = Vec::new();
    let mut cum_hazard = Vec::new();
    let mut events = Vec::new();
    let mut at_risk = Vec::new();
    let mut g = T::one();
    let mut h = T::zero();
    let mut i = 0;
    while i < censored.len() {
        let u = censored[i];
        let mut d = 0;
        while i < censored.len() && censored[i] == u {
            d += 1;
            i += 1;
        }
        let y = total - sorted_times.partition_point(|&z| z < u);
        let ratio = T::lit(d as f64) / T::lit(y as f64);
        g *= T::one() - ratio;
        h += ratio;
        km_times.push(u);
        km_values.push(g);
        cum_hazard.push(h);
        events.push(d);
        at_risk.push(y);
    }
    let model = CensoringModel {
        km_times,
        km_values,
        cum_hazard,
        events,
        at_risk,
        sorted_times,
        n_clusters: ds.n_clusters(),
        tau: ds.tau(),
        floor,
    };
    if model.survival(ds.tau()) <= floor {
        return Err(Error::GhatZeroBeforeTau {
            tau: ds.tau().to_f64_lossy(),
        });
    }
    Ok(model)
}

impl<T: Scalar> CensoringModel<T> {
    /// Right-continuous `G(t)`.
    pub fn survival(&self, t: T) -> T {
        match self.km_times.partition_point(|&u| u <= t) {
            0 => T::one(),
            j => self.km_values[j - 1],
        }
    }

    /// Nelson–Aalen censoring cumulative hazard at `t`.
    pub fn cumulative_hazard(&self, t: T) -> T {
        match self.km_times.partition_point(|&u| u <= t) {
            0 => T::zero(),
            j => self.cum_hazard[j - 1],
        }
    }

    /// Censoring risk-set size `#{Z >= t}`.
    pub fn at_risk(&self, t: T) -> usize {
        self.sorted_times.len() - self.sorted_times.partition_point(|&z| z < t)
    }

    /// `pi(t) = n^{-1} #{Z >= t}` with `n` the number of clusters.
    pub fn pi_hat(&self, t: T) -> T {
        T::lit(self.at_risk(t) as f64) / T::lit(self.n_clusters as f64)
    }

    pub fn risk_totals(&self, knots: &[T]) -> Vec<T> {
        knots.iter().map(|&t| self.pi_hat(t)).collect()
    }

    pub fn km_times(&self) -> &[T] {
        &self.km_times
    }

    pub fn km_values(&self) -> &[T] {
        &self.km_values
    }

    /// Censored counts at each jump time.
    pub fn jump_counts(&self) -> &[usize] {
        &self.events
    }

    /// Risk-set sizes at each jump time.
    pub fn jump_risk_sets(&self) -> &[usize] {
        &self.at_risk
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn floor(&self) -> T {
        self.floor
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    /// `(t, G(t))` pairs starting at `(0, 1)`.
    pub fn km_table(&self) -> Vec<(T, T)> {
        std::iter::once((T::zero(), T::one()))
            .chain(self.km_times.iter().copied().zip(self.km_values.iter().copied()))
            .collect()
    }

    /// Writes the curve as a two-column `time,ghat` table.
    pub fn export_km<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["time", "ghat"])?;
        for (t, g) in self.km_table() {
            w.write_record([t.to_string(), g.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub(crate) fn checked_survival(&self, t: T) -> Result<T> {
        let g = self.survival(t);
        if g <= self.floor {
            return Err(Error::DivisionByZeroGhat { t: t.to_f64_lossy() });
        }
        Ok(g)
    }
}

/// `omega(t) = r(t) G(t) / G(min(Z, t))`, with `r(t) = 0` for a censored
/// subject after its censoring time.
pub fn ipcw_weight<T: Scalar>(model: &CensoringModel<T>, record: &SubjectRecord<T>, t: T) -> Result<T> {
    if record.cause.is_censored() && t > record.time {
        return Ok(T::zero());
    }
    let denom = model.checked_survival(record.time.min(t))?;
    Ok(model.survival(t) / denom)
}

/// `I(C > t)`, the censoring-complete counterpart of the IPCW weight.
pub fn cc_weight<T: Scalar>(record: &SubjectRecord<T>, t: T) -> Result<T> {
    let c = record.censoring_time.ok_or(Error::CensoringTimeUnavailable)?;
    Ok(if c > t { T::one() } else { T::zero() })
}
