//! Weighted least-squares fit of the additive subdistribution hazards model.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use serde::Serialize;

use crate::censoring::{fit_censoring_km, CensoringModel};
use crate::dataset::{ClusteredDataset, TimeGrid};
use crate::error::{Error, Result};
use crate::linalg::checked_spd_inverse;
use crate::scalar::Scalar;
pub use crate::weights::Mode;
use crate::weights::WeightMatrix;

/// Fewer cause-`k` events than this before `tau` triggers a warning.
pub const FEW_EVENTS_WARNING: usize = 5;

/// Weighted risk-set sums on the grid.
///
/// Covariates are stored centred by their overall mean (`shift`); the
/// centring cancels in `X - Xhat` and is undone wherever absolute covariate
/// values matter.
#[derive(Debug, Clone, Serialize)]
pub struct RiskAggregates<T> {
    /// `S0` on each interval interior.
    pub s0_interval: Array1<T>,
    /// `S1` (base scale) on each interval interior, `J x p`.
    pub s1_interval: Array2<T>,
    /// `S2 - S1 S1' / S0` (base scale) on each interval interior, `J x p x p`.
    pub centred_s2_interval: Array3<T>,
    /// `S0` at each knot.
    pub s0_knot: Array1<T>,
    /// `S1` (base scale) at each knot.
    pub s1_knot: Array2<T>,
    /// `S1 / S0` on each interval interior (zero where `S0 = 0`).
    pub xbar_interval: Array2<T>,
    /// `S1 / S0` at each knot (zero where `S0 = 0`).
    pub xbar_knot: Array2<T>,
}

/// Everything computed before `beta` is known: weights, aggregates and the
/// cumulative score components `D(t)` and `A(t)`.
#[derive(Debug, Clone, Serialize)]
pub struct Design<T> {
    pub(crate) grid: TimeGrid<T>,
    pub(crate) weights: WeightMatrix<T>,
    pub(crate) agg: RiskAggregates<T>,
    /// Centred base covariates, `N x p`.
    pub(crate) xc: Array2<T>,
    pub(crate) shift: Array1<T>,
    pub(crate) cluster_of: Vec<usize>,
    pub(crate) n_clusters: usize,
    /// Weighted cause-`k` event count at each knot.
    pub(crate) event_weight: Array1<T>,
    /// Unnormalised `A(t_i)` (sum, not mean) at each knot.
    pub(crate) a_cum: Array3<T>,
    /// `sum_s omega (X - Xhat) dN` accumulated up to each knot.
    pub(crate) d_cum: Array2<T>,
    pub(crate) n_events: usize,
}

fn cumulate2<T: Scalar>(inc: &Array2<T>) -> Array2<T> {
    let mut out = inc.clone();
    for i in 1..out.nrows() {
        let prev = out.row(i - 1).to_owned();
        let mut row = out.row_mut(i);
        row += &prev;
    }
    out
}

impl<T: Scalar> Design<T> {
    pub fn new(
        ds: &ClusteredDataset<T>,
        grid: &TimeGrid<T>,
        cm: Option<&CensoringModel<T>>,
        cause: u8,
        mode: Mode,
    ) -> Result<Self> {
        if cause == 0 || cause > ds.n_causes() {
            return Err(Error::InvalidArgument(format!(
                "cause {cause} outside 1..={}",
                ds.n_causes()
            )));
        }
        if grid.n_covariates() != ds.n_covariates() {
            return Err(Error::DimensionMismatch {
                expected: ds.n_covariates(),
                found: grid.n_covariates(),
            });
        }
        let weights = WeightMatrix::build(ds, grid, cm, cause, mode)?;
        let n = ds.n_subjects();
        let p = ds.n_covariates();
        let j = grid.len();

        let mut xc = Array2::zeros((n, p));
        for (s, r) in ds.subjects().iter().enumerate() {
            for l in 0..p {
                xc[[s, l]] = r.covariates[l];
            }
        }
        let shift = xc.mean_axis(Axis(0)).expect("non-empty");
        xc -= &shift;

        // Bucket unit and tail contributions by cut index, then sweep.
        let mut unit0 = Array1::<T>::zeros(j + 1);
        let mut unit1 = Array2::<T>::zeros((j + 1, p));
        let mut unit2 = Array3::<T>::zeros((j + 1, p, p));
        let mut tail0 = Array1::<T>::zeros(j + 1);
        let mut tail1 = Array2::<T>::zeros((j + 1, p));
        let mut tail2 = Array3::<T>::zeros((j + 1, p, p));
        let mut kunit0 = Array1::<T>::zeros(j + 1);
        let mut kunit1 = Array2::<T>::zeros((j + 1, p));
        let mut ktail0 = Array1::<T>::zeros(j + 1);
        let mut ktail1 = Array2::<T>::zeros((j + 1, p));
        for (s, prof) in weights.profiles().iter().enumerate() {
            let x = xc.row(s);
            let (f, kf, sc) = (prof.interval_cut, prof.knot_cut, prof.tail_scale);
            unit0[f] += T::one();
            kunit0[kf] += T::one();
            for l in 0..p {
                unit1[[f, l]] += x[l];
                kunit1[[kf, l]] += x[l];
                for m in 0..p {
                    unit2[[f, l, m]] += x[l] * x[m];
                }
            }
            if sc != T::zero() {
                tail0[f] += sc;
                ktail0[kf] += sc;
                for l in 0..p {
                    tail1[[f, l]] += sc * x[l];
                    ktail1[[kf, l]] += sc * x[l];
                    for m in 0..p {
                        tail2[[f, l, m]] += sc * x[l] * x[m];
                    }
                }
            }
        }
        // unit: sum over cut > i (suffix); tail: sum over cut <= i (prefix)
        for f in (0..j).rev() {
            unit0[f] = unit0[f] + unit0[f + 1];
            kunit0[f] = kunit0[f] + kunit0[f + 1];
            for l in 0..p {
                unit1[[f, l]] = unit1[[f, l]] + unit1[[f + 1, l]];
                kunit1[[f, l]] = kunit1[[f, l]] + kunit1[[f + 1, l]];
                for m in 0..p {
                    unit2[[f, l, m]] = unit2[[f, l, m]] + unit2[[f + 1, l, m]];
                }
            }
        }
        for f in 1..=j {
            tail0[f] = tail0[f] + tail0[f - 1];
            ktail0[f] = ktail0[f] + ktail0[f - 1];
            for l in 0..p {
                tail1[[f, l]] = tail1[[f, l]] + tail1[[f - 1, l]];
                ktail1[[f, l]] = ktail1[[f, l]] + ktail1[[f - 1, l]];
                for m in 0..p {
                    tail2[[f, l, m]] = tail2[[f, l, m]] + tail2[[f - 1, l, m]];
                }
            }
        }
        let gi = weights.g_interval();
        let gk = weights.g_knot();
        let mut s0_interval = Array1::zeros(j);
        let mut s1_interval = Array2::zeros((j, p));
        let mut centred_s2_interval = Array3::zeros((j, p, p));
        let mut xbar_interval = Array2::zeros((j, p));
        let mut s0_knot = Array1::zeros(j);
        let mut s1_knot = Array2::zeros((j, p));
        let mut xbar_knot = Array2::zeros((j, p));
        for i in 0..j {
            // interval i: unit subjects have cut > i, i.e. suffix index i + 1
            s0_interval[i] = unit0[i + 1] + gi[i] * tail0[i];
            s0_knot[i] = kunit0[i + 1] + gk[i] * ktail0[i];
            for l in 0..p {
                s1_interval[[i, l]] = unit1[[i + 1, l]] + gi[i] * tail1[[i, l]];
                s1_knot[[i, l]] = kunit1[[i + 1, l]] + gk[i] * ktail1[[i, l]];
            }
            if s0_interval[i] > T::zero() {
                for l in 0..p {
                    xbar_interval[[i, l]] = s1_interval[[i, l]] / s0_interval[i];
                }
                for l in 0..p {
                    for m in 0..p {
                        let s2 = unit2[[i + 1, l, m]] + gi[i] * tail2[[i, l, m]];
                        centred_s2_interval[[i, l, m]] =
                            s2 - s1_interval[[i, l]] * s1_interval[[i, m]] / s0_interval[i];
                    }
                }
            }
            if s0_knot[i] > T::zero() {
                for l in 0..p {
                    xbar_knot[[i, l]] = s1_knot[[i, l]] / s0_knot[i];
                }
            }
        }

        let mut event_weight = Array1::zeros(j);
        let mut d_inc = Array2::zeros((j, p));
        let mut n_events = 0;
        for (s, prof) in weights.profiles().iter().enumerate() {
            if let Some(e) = prof.event_knot {
                let w = weights.knot_weight(s, e);
                if w > T::zero() {
                    n_events += 1;
                    event_weight[e] += w;
                    let b = grid.basis_at_knot(e);
                    for l in 0..p {
                        d_inc[[e, l]] += w * (xc[[s, l]] - xbar_knot[[e, l]]) * b[l];
                    }
                }
            }
        }
        if n_events == 0 {
            return Err(Error::NoEventsForCause { cause });
        }
        if n_events < FEW_EVENTS_WARNING {
            log::warn!("only {n_events} cause-{cause} events before tau; estimates are unstable");
        }
        let d_cum = cumulate2(&d_inc);

        let mut a_cum = Array3::zeros((j, p, p));
        let mut acc = Array2::<T>::zeros((p, p));
        for i in 0..j {
            let m2 = grid.m2(i);
            for l in 0..p {
                for m in 0..p {
                    acc[[l, m]] += centred_s2_interval[[i, l, m]] * m2[[l, m]];
                }
            }
            a_cum.index_axis_mut(Axis(0), i).assign(&acc);
        }

        Ok(Design {
            grid: grid.clone(),
            weights,
            agg: RiskAggregates {
                s0_interval,
                s1_interval,
                centred_s2_interval,
                s0_knot,
                s1_knot,
                xbar_interval,
                xbar_knot,
            },
            xc,
            shift,
            cluster_of: ds.subjects().iter().map(|r| r.cluster).collect(),
            n_clusters: ds.n_clusters(),
            event_weight,
            a_cum,
            d_cum,
            n_events,
        })
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn weights(&self) -> &WeightMatrix<T> {
        &self.weights
    }

    pub fn aggregates(&self) -> &RiskAggregates<T> {
        &self.agg
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn n_subjects(&self) -> usize {
        self.xc.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.xc.ncols()
    }

    /// Subjects' cluster indices.
    pub fn cluster_of(&self) -> &[usize] {
        &self.cluster_of
    }

    /// Overall covariate mean subtracted internally.
    pub fn shift(&self) -> ArrayView1<'_, T> {
        self.shift.view()
    }

    /// Number of cause-`k` events with positive weight in `(0, tau]`.
    pub fn n_events(&self) -> usize {
        self.n_events
    }

    /// `Xhat` at knot `i` on the original covariate scale (base values).
    pub fn xhat_knot(&self, i: usize) -> Array1<T> {
        &self.agg.xbar_knot.row(i) + &self.shift
    }

    /// Unnormalised `A(t)` and `D(t)`, returned as `(A, D)`.
    pub fn score_parts(&self, t: T) -> (Array2<T>, Array1<T>) {
        let p = self.n_covariates();
        let full = self.grid.count_le(t);
        let mut a = if full > 0 {
            self.a_cum.index_axis(Axis(0), full - 1).to_owned()
        } else {
            Array2::zeros((p, p))
        };
        let d = if full > 0 {
            self.d_cum.row(full - 1).to_owned()
        } else {
            Array1::zeros(p)
        };
        if full < self.grid.len() {
            let lo = self.grid.interval_start(full);
            if t > lo {
                let (_, pm2) = self.grid.partial_moments(lo, t);
                let c = self.agg.centred_s2_interval.index_axis(Axis(0), full);
                a += &(&c * &pm2);
            }
        }
        (a, d)
    }

    /// `U(beta, t) = D(t) - A(t) beta` (sums, not means).
    pub fn score(&self, beta: ArrayView1<'_, T>, t: T) -> Array1<T> {
        let (a, d) = self.score_parts(t);
        d - a.dot(&beta)
    }

    /// Unnormalised `A(t_i)` at every knot.
    pub fn a_cumulative(&self) -> &Array3<T> {
        &self.a_cum
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult<T> {
    pub cause: u8,
    pub mode: Mode,
    pub beta: Array1<T>,
    /// `A(tau)` normalised by the number of clusters.
    pub a_tau: Array2<T>,
    pub a_tau_inv: Array2<T>,
    /// Baseline jump `dN_w / S0` at each knot.
    pub jumps: Array1<T>,
    /// Baseline drift over each interval, in centred coordinates.
    pub drift: Array1<T>,
    /// `Lambda0(t_i)` at each knot on the original covariate scale.
    pub baseline_knots: Array1<T>,
    pub tau: T,
    pub(crate) design: Design<T>,
}

/// Fits cause `cause`; in IPCW mode the censoring model is estimated here.
pub fn fit<T: Scalar>(
    ds: &ClusteredDataset<T>,
    cause: u8,
    mode: Mode,
    grid: &TimeGrid<T>,
) -> Result<FitResult<T>> {
    match mode {
        Mode::Ipcw => {
            let cm = fit_censoring_km(ds)?;
            fit_with_censoring(ds, cause, mode, grid, Some(&cm))
        }
        Mode::Cc => fit_with_censoring(ds, cause, mode, grid, None),
    }
}

pub fn fit_with_censoring<T: Scalar>(
    ds: &ClusteredDataset<T>,
    cause: u8,
    mode: Mode,
    grid: &TimeGrid<T>,
    cm: Option<&CensoringModel<T>>,
) -> Result<FitResult<T>> {
    let design = Design::new(ds, grid, cm, cause, mode)?;
    FitResult::from_design(design, cause, mode)
}

impl<T: Scalar> FitResult<T> {
    fn from_design(design: Design<T>, cause: u8, mode: Mode) -> Result<Self> {
        let j = design.grid.len();
        let n = T::lit(design.n_clusters as f64);
        let a_tau = design.a_cum.index_axis(Axis(0), j - 1).mapv(|v| v / n);
        let a_tau_inv = checked_spd_inverse(a_tau.view())?;
        let d = design.d_cum.row(j - 1).mapv(|v| v / n);
        let beta = a_tau_inv.dot(&d);

        let agg = &design.agg;
        let mut jumps = Array1::zeros(j);
        let mut drift = Array1::zeros(j);
        let mut baseline_knots = Array1::zeros(j);
        let mut acc = T::zero();
        let mut m1_cum = Array1::<T>::zeros(design.n_covariates());
        for i in 0..j {
            if agg.s0_knot[i] > T::zero() {
                jumps[i] = design.event_weight[i] / agg.s0_knot[i];
            }
            let m1 = design.grid.m1(i);
            drift[i] = -(&m1 * &agg.xbar_interval.row(i)).dot(&beta);
            m1_cum += &m1;
            acc += jumps[i] + drift[i];
            baseline_knots[i] = acc - (&m1_cum * &design.shift).dot(&beta);
        }
        Ok(FitResult {
            cause,
            mode,
            beta,
            a_tau,
            a_tau_inv,
            jumps,
            drift,
            baseline_knots,
            tau: design.grid.tau(),
            design,
        })
    }

    pub fn design(&self) -> &Design<T> {
        &self.design
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.design.grid
    }

    pub fn n_clusters(&self) -> usize {
        self.design.n_clusters
    }

    /// `A(t_i)` at each knot, normalised by the number of clusters.
    pub fn a_path(&self) -> Array3<T> {
        let n = T::lit(self.design.n_clusters as f64);
        self.design.a_cum.mapv(|v| v / n)
    }

    /// Score process `U(beta, t)` from the stored design.
    pub fn score(&self, beta: ArrayView1<'_, T>, t: T) -> Array1<T> {
        self.design.score(beta, t)
    }

    /// `Lambda0(t)`: jumps at knots `<= t` plus the drift integrated to `t`.
    pub fn baseline_at(&self, t: T) -> T {
        let grid = &self.design.grid;
        if t <= T::zero() {
            return T::zero();
        }
        let full = grid.count_le(t);
        let mut value = if full > 0 {
            self.baseline_knots[full - 1]
        } else {
            T::zero()
        };
        if full < grid.len() {
            let lo = grid.interval_start(full);
            if t > lo {
                let (pm1, _) = grid.partial_moments(lo, t);
                let xbar = &self.design.agg.xbar_interval.row(full) + &self.design.shift;
                value -= (&pm1 * &xbar).dot(&self.beta);
            }
        }
        value
    }

    /// `(t, Lambda0(t))` at every knot.
    pub fn baseline_curve(&self) -> Vec<(T, T)> {
        self.design
            .grid
            .knots()
            .iter()
            .copied()
            .zip(self.baseline_knots.iter().copied())
            .collect()
    }

    /// `int_0^t X_s(u)' beta du` for covariate path base `x` (original scale).
    pub fn linear_predictor_integral(&self, x: ArrayView1<'_, T>, t: T) -> T {
        let grid = &self.design.grid;
        let full = grid.count_le(t);
        let mut m1 = Array1::<T>::zeros(x.len());
        for i in 0..full {
            m1 += &grid.m1(i);
        }
        if full < grid.len() {
            let lo = grid.interval_start(full);
            if t > lo {
                m1 += &grid.partial_moments(lo, t).0;
            }
        }
        (&m1 * &x).dot(&self.beta)
    }

    /// Martingale residual `M(t_i)` of subject `s` at every knot (unweighted).
    pub fn residual_path(&self, ds: &ClusteredDataset<T>, s: usize) -> Vec<T> {
        let d = &self.design;
        let grid = &d.grid;
        let r = &ds.subjects()[s];
        let is_k = r.cause.0 == self.cause;
        let at_risk_cut = if is_k { grid.count_le(r.time) } else { grid.len() };
        let x = d.xc.row(s);
        let mut m = T::zero();
        let mut out = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            if i < at_risk_cut {
                m -= self.drift[i] + (&grid.m1(i) * &x).dot(&self.beta) + self.jumps[i];
            }
            if is_k && grid.knots()[i] == r.time {
                m += T::one();
            }
            out.push(m);
        }
        out
    }

    /// `int omega dM` over `(0, tau]` for every subject.
    pub fn weighted_residuals(&self) -> Array1<T> {
        let d = &self.design;
        let grid = &d.grid;
        let w = &d.weights;
        let j = grid.len();
        // per-interval compensator pieces split into a subject-free part and
        // a part linear in the subject's covariates
        let mut c0 = Array1::<T>::zeros(j);
        let mut c1 = Array2::<T>::zeros((j, d.n_covariates()));
        for i in 0..j {
            c0[i] = self.drift[i];
            c1.row_mut(i).assign(&(&grid.m1(i) * &self.beta));
        }
        let (p0i, p1i, t0i, t1i) = split_sums(&c0, &c1, w.g_interval());
        let (p0k, _, t0k, _) = split_sums(&self.jumps, &Array2::zeros((j, 0)), w.g_knot());
        let mut out = Array1::zeros(d.n_subjects());
        for (s, prof) in w.profiles().iter().enumerate() {
            let x = d.xc.row(s);
            let (f, kf, sc) = (prof.interval_cut, prof.knot_cut, prof.tail_scale);
            let mut comp = p0i[f] + p1i.row(f).dot(&x) + p0k[kf];
            if sc != T::zero() {
                comp += sc * (t0i[f] + t1i.row(f).dot(&x) + t0k[kf]);
            }
            out[s] = w.event_weight(s) - comp;
        }
        out
    }
}

/// Prefix sums of `(a, b)` over `0..f` and `g`-weighted suffix sums over
/// `f..J`, each of length `J + 1`.
pub(crate) fn split_sums<T: Scalar>(
    a: &Array1<T>,
    b: &Array2<T>,
    g: &[T],
) -> (Array1<T>, Array2<T>, Array1<T>, Array2<T>) {
    let j = a.len();
    let q = b.ncols();
    let mut pa = Array1::zeros(j + 1);
    let mut pb = Array2::zeros((j + 1, q));
    for i in 0..j {
        pa[i + 1] = pa[i] + a[i];
        for l in 0..q {
            pb[[i + 1, l]] = pb[[i, l]] + b[[i, l]];
        }
    }
    let mut ta = Array1::zeros(j + 1);
    let mut tb = Array2::zeros((j + 1, q));
    for i in (0..j).rev() {
        ta[i] = ta[i + 1] + g[i] * a[i];
        for l in 0..q {
            tb[[i, l]] = tb[[i + 1, l]] + g[i] * b[[i, l]];
        }
    }
    (pa, pb, ta, tb)
}

/// Standalone score evaluation `U(beta, t)`.
pub fn score<T: Scalar>(
    ds: &ClusteredDataset<T>,
    cause: u8,
    beta: ArrayView1<'_, T>,
    t: T,
    mode: Mode,
    grid: &TimeGrid<T>,
) -> Result<Array1<T>> {
    let cm = match mode {
        Mode::Ipcw => Some(fit_censoring_km(ds)?),
        Mode::Cc => None,
    };
    let design = Design::new(ds, grid, cm.as_ref(), cause, mode)?;
    Ok(design.score(beta, t))
}

/// Free-function form of [`FitResult::baseline_at`].
pub fn baseline_at<T: Scalar>(fit: &FitResult<T>, t: T) -> T {
    fit.baseline_at(t)
}

/// Free-function form of [`FitResult::residual_path`].
pub fn residual_path<T: Scalar>(fit: &FitResult<T>, ds: &ClusteredDataset<T>, s: usize) -> Vec<T> {
    fit.residual_path(ds, s)
}
