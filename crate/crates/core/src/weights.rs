//! Sparse representation of the weighted risk indicators `omega(t) Y(t)` on a
//! [`TimeGrid`].
//!
//! Every subject's weighted risk indicator equals 1 up to an exit point and
//! then either vanishes or decays as `G(t) / G(Z)`, so a subject is fully
//! described by two cut indices and a tail scale.

use serde::Serialize;

use crate::censoring::CensoringModel;
use crate::dataset::{ClusteredDataset, TimeGrid};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How the weighted risk set is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    /// Right-censored data with inverse probability of censoring weights.
    Ipcw,
    /// Censoring-complete data with weights `I(C > t)`.
    Cc,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Ipcw => "ipcw",
            Mode::Cc => "cc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightProfile<T> {
    /// Intervals `0..interval_cut` carry weight 1.
    pub interval_cut: usize,
    /// Knots `0..knot_cut` carry weight 1.
    pub knot_cut: usize,
    /// Later intervals/knots carry `G(.) * tail_scale` (zero outside IPCW
    /// competing-cause subjects).
    pub tail_scale: T,
    /// Knot index of the subject's own cause-`k` event, if within the grid.
    pub event_knot: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightMatrix<T> {
    profiles: Vec<WeightProfile<T>>,
    /// `G` on the interior of each interval, i.e. `G(t_{i-1})`.
    g_interval: Vec<T>,
    /// `G(t_i)` at each knot.
    g_knot: Vec<T>,
    mode: Mode,
    cause: u8,
}

impl<T: Scalar> WeightMatrix<T> {
    pub fn build(
        ds: &ClusteredDataset<T>,
        grid: &TimeGrid<T>,
        cm: Option<&CensoringModel<T>>,
        cause: u8,
        mode: Mode,
    ) -> Result<Self> {
        let j = grid.len();
        let (g_interval, g_knot) = match (mode, cm) {
            (Mode::Ipcw, Some(cm)) => (
                (0..j).map(|i| cm.survival(grid.interval_start(i))).collect(),
                grid.knots().iter().map(|&t| cm.survival(t)).collect(),
            ),
            (Mode::Ipcw, None) => {
                return Err(Error::InvalidArgument(
                    "IPCW weights need a censoring model".into(),
                ))
            }
            (Mode::Cc, _) => {
                if !ds.censoring_observed() {
                    return Err(Error::CensoringTimeUnavailable);
                }
                (vec![T::zero(); j], vec![T::zero(); j])
            }
        };
        let tau = grid.tau();
        let mut profiles = Vec::with_capacity(ds.n_subjects());
        for r in ds.subjects() {
            let is_k = r.cause.0 == cause;
            let event_knot = if is_k && r.time <= tau {
                grid.knot_index(r.time)
            } else {
                None
            };
            let profile = match mode {
                Mode::Ipcw => {
                    let cut = grid.count_le(r.time);
                    let competing = !is_k && !r.cause.is_censored();
                    let tail_scale = if competing && cut < j {
                        let g = cm.expect("checked above").checked_survival(r.time)?;
                        T::one() / g
                    } else {
                        T::zero()
                    };
                    WeightProfile {
                        interval_cut: cut,
                        knot_cut: cut,
                        tail_scale,
                        event_knot,
                    }
                }
                Mode::Cc => {
                    let c = r.censoring_time.ok_or(Error::CensoringTimeUnavailable)?;
                    let (interval_cut, knot_cut) = if is_k {
                        (grid.count_le(r.time), grid.count_le(r.time).min(grid.count_lt(c)))
                    } else {
                        (grid.count_le(c), grid.count_lt(c))
                    };
                    WeightProfile {
                        interval_cut,
                        knot_cut,
                        tail_scale: T::zero(),
                        event_knot,
                    }
                }
            };
            profiles.push(profile);
        }
        Ok(WeightMatrix {
            profiles,
            g_interval,
            g_knot,
            mode,
            cause,
        })
    }

    pub fn profiles(&self) -> &[WeightProfile<T>] {
        &self.profiles
    }

    pub fn profile(&self, s: usize) -> &WeightProfile<T> {
        &self.profiles[s]
    }

    pub fn g_interval(&self) -> &[T] {
        &self.g_interval
    }

    pub fn g_knot(&self) -> &[T] {
        &self.g_knot
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn cause(&self) -> u8 {
        self.cause
    }

    /// `omega Y` on the interior of interval `i`.
    #[inline]
    pub fn interval_weight(&self, s: usize, i: usize) -> T {
        let p = &self.profiles[s];
        if i < p.interval_cut {
            T::one()
        } else {
            self.g_interval[i] * p.tail_scale
        }
    }

    /// `omega Y` at knot `i`.
    #[inline]
    pub fn knot_weight(&self, s: usize, i: usize) -> T {
        let p = &self.profiles[s];
        if i < p.knot_cut {
            T::one()
        } else {
            self.g_knot[i] * p.tail_scale
        }
    }

    /// Weight on the subject's own event, zero when there is none.
    pub fn event_weight(&self, s: usize) -> T {
        match self.profiles[s].event_knot {
            Some(e) => self.knot_weight(s, e),
            None => T::zero(),
        }
    }
}
