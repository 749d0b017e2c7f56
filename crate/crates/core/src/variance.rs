//! Cluster-robust sandwich variance and cumulative incidence prediction.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::censoring::{fit_censoring_km, CensoringModel};
use crate::dataset::{build_grid, ClusteredDataset, CovariatePath};
use crate::error::{Error, Result};
use crate::fitter::{fit_with_censoring, split_sums, FitResult, Mode};
use crate::linalg::symmetrized;
use crate::scalar::Scalar;

/// Grouping used for the meat of the sandwich.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Clustering {
    ByCluster,
    /// Every subject is its own cluster (the unclustered comparator).
    ByIndividual,
}

#[derive(Debug, Clone, Serialize)]
pub struct SandwichParts<T> {
    pub clustering: Clustering,
    /// Number of groups the meat is averaged over.
    pub n_groups: usize,
    /// Per-group `eta`, `n_groups x p`.
    pub eta: Array2<T>,
    /// Per-group censoring correction `psi`, `n_groups x p`.
    pub psi: Array2<T>,
    /// `q(t_i)` at every knot, `J x p`.
    pub q_path: Array2<T>,
    /// `pi(t_i)` at every knot.
    pub pi_path: Array1<T>,
    pub omega: Array2<T>,
    pub sigma: Array2<T>,
    /// `sqrt(Sigma_ll / n_groups)`.
    pub se: Array1<T>,
}

/// Tables over knots/intervals shared by the `eta` and `q` computations.
struct Compensator<T> {
    /// knot part, `[b ΔΛ | xbar ⊙ b ΔΛ]` (prefix, suffix with `G` at knots)
    kp: Array2<T>,
    kt: Array2<T>,
    /// interval part, `[P0 | P1 | P1t | P2]` flattened `p x p` blocks
    ip: Array2<T>,
    it: Array2<T>,
    p: usize,
}

impl<T: Scalar> Compensator<T> {
    fn new(fit: &FitResult<T>) -> Self {
        let d = fit.design();
        let grid = d.grid();
        let agg = d.aggregates();
        let w = d.weights();
        let p = d.n_covariates();
        let j = grid.len();
        let mut knot = Array2::zeros((j, 2 * p));
        let mut int = Array2::zeros((j, 4 * p * p));
        for i in 0..j {
            let b = grid.basis_at_knot(i);
            let m2 = grid.m2(i);
            for l in 0..p {
                let ka = b[l] * fit.jumps[i];
                knot[[i, l]] = ka;
                knot[[i, p + l]] = agg.xbar_knot[[i, l]] * ka;
                for m in 0..p {
                    let v = m2[[l, m]];
                    let (xl, xm) = (agg.xbar_interval[[i, l]], agg.xbar_interval[[i, m]]);
                    let k = l * p + m;
                    int[[i, k]] = v;
                    int[[i, p * p + k]] = xm * v;
                    int[[i, 2 * p * p + k]] = xl * v;
                    int[[i, 3 * p * p + k]] = xl * xm * v;
                }
            }
        }
        let zero = Array1::zeros(j);
        let (_, kp, _, kt) = split_sums(&zero, &knot, w.g_knot());
        let (_, ip, _, it) = split_sums(&zero, &int, w.g_interval());
        Compensator { kp, kt, ip, it, p }
    }

    /// `x ⊙ K_A - K_B` from a packed knot row.
    fn knot_term(&self, x: ArrayView1<'_, T>, row: ArrayView1<'_, T>, out: &mut Array1<T>) {
        let p = self.p;
        for l in 0..p {
            out[l] += x[l] * row[l] - row[p + l];
        }
    }

    /// `(d d' ⊙ sum M2) beta` from a packed interval row, for first and
    /// second moments `(s0, s1, s2)` of the subjects' covariates.
    fn interval_term(
        &self,
        s0: T,
        s1: ArrayView1<'_, T>,
        s2: &dyn Fn(usize, usize) -> T,
        row: ArrayView1<'_, T>,
        beta: ArrayView1<'_, T>,
        out: &mut Array1<T>,
    ) {
        let p = self.p;
        let pp = p * p;
        for l in 0..p {
            let mut acc = T::zero();
            for m in 0..p {
                let k = l * p + m;
                acc += beta[m]
                    * (s2(l, m) * row[k] - s1[l] * row[pp + k] - s1[m] * row[2 * pp + k]
                        + s0 * row[3 * pp + k]);
            }
            out[l] += acc;
        }
    }
}

/// Per-subject `eta_s = int omega (X - Xhat) dM` over `(0, tau]`, `N x p`.
pub fn subject_eta<T: Scalar>(fit: &FitResult<T>) -> Array2<T> {
    let d = fit.design();
    let grid = d.grid();
    let agg = d.aggregates();
    let w = d.weights();
    let p = d.n_covariates();
    let comp = Compensator::new(fit);
    let beta = fit.beta.view();
    let mut eta = Array2::zeros((d.n_subjects(), p));
    for (s, prof) in w.profiles().iter().enumerate() {
        let x = d.xc.row(s);
        let mut comp_unit = Array1::zeros(p);
        let mut comp_tail = Array1::zeros(p);
        let (f, kf, sc) = (prof.interval_cut, prof.knot_cut, prof.tail_scale);
        let s2 = |l: usize, m: usize| x[l] * x[m];
        comp.knot_term(x, comp.kp.row(kf), &mut comp_unit);
        comp.interval_term(T::one(), x, &s2, comp.ip.row(f), beta, &mut comp_unit);
        if sc != T::zero() {
            comp.knot_term(x, comp.kt.row(kf), &mut comp_tail);
            comp.interval_term(T::one(), x, &s2, comp.it.row(f), beta, &mut comp_tail);
        }
        let mut row = eta.row_mut(s);
        if let Some(e) = prof.event_knot {
            let we = w.knot_weight(s, e);
            let b = grid.basis_at_knot(e);
            for l in 0..p {
                row[l] = we * (x[l] - agg.xbar_knot[[e, l]]) * b[l];
            }
        }
        for l in 0..p {
            row[l] -= comp_unit[l] + sc * comp_tail[l];
        }
    }
    eta
}

/// `q(t_i)` at every knot, `J x p`. Zero outside IPCW mode.
pub fn q_path<T: Scalar>(fit: &FitResult<T>) -> Array2<T> {
    let d = fit.design();
    let grid = d.grid();
    let w = d.weights();
    let p = d.n_covariates();
    let j = grid.len();
    let mut q = Array2::zeros((j, p));
    if fit.mode != Mode::Ipcw {
        return q;
    }
    // tail-weighted covariate moments of competing subjects, by knot cut
    let mut m0 = Array1::<T>::zeros(j + 1);
    let mut m1 = Array2::<T>::zeros((j + 1, p));
    let mut m2 = Array2::<T>::zeros((j + 1, p * p));
    for (s, prof) in w.profiles().iter().enumerate() {
        let sc = prof.tail_scale;
        if sc == T::zero() {
            continue;
        }
        let x = d.xc.row(s);
        let c = prof.knot_cut;
        m0[c] += sc;
        for l in 0..p {
            m1[[c, l]] += sc * x[l];
            for m in 0..p {
                m2[[c, l * p + m]] += sc * x[l] * x[m];
            }
        }
    }
    let comp = Compensator::new(fit);
    let beta = fit.beta.view();
    let n = T::lit(d.n_clusters() as f64);
    let mut r0 = T::zero();
    let mut r1 = Array1::<T>::zeros(p);
    let mut r2 = Array1::<T>::zeros(p * p);
    for c in 0..j {
        // subjects with Z < t_c have knot cut <= c
        r0 += m0[c];
        r1 += &m1.row(c);
        r2 += &m2.row(c);
        if r0 == T::zero() {
            continue;
        }
        let mut acc = Array1::zeros(p);
        let kt = comp.kt.row(c);
        for l in 0..p {
            acc[l] += r1[l] * kt[l] - r0 * kt[p + l];
        }
        let s2 = |l: usize, m: usize| r2[l * p + m];
        comp.interval_term(r0, r1.view(), &s2, comp.it.row(c + 1), beta, &mut acc);
        q.row_mut(c).assign(&acc.mapv(|v| v / n));
    }
    q
}

/// Per-subject `psi_s = int q / pi dM^c` over `(0, tau]`, `N x p`.
pub fn subject_psi<T: Scalar>(
    ds: &ClusteredDataset<T>,
    fit: &FitResult<T>,
    cm: &CensoringModel<T>,
    q: &Array2<T>,
) -> Array2<T> {
    let d = fit.design();
    let grid = d.grid();
    let p = d.n_covariates();
    let n = T::lit(d.n_clusters() as f64);
    let mut psi = Array2::zeros((ds.n_subjects(), p));
    if fit.mode != Mode::Ipcw {
        return psi;
    }
    let tau = grid.tau();
    // cumulative sum over censoring jumps of (n q / Y^c) dLambda^c
    let mut jump_times = Vec::new();
    let mut cum = Vec::new();
    let mut acc = Array1::<T>::zeros(p);
    for ((&u, &dc), &yc) in cm
        .km_times()
        .iter()
        .zip(cm.jump_counts())
        .zip(cm.jump_risk_sets())
    {
        if u > tau {
            break;
        }
        let c = grid.knot_index(u).expect("censoring times up to tau are knots");
        let yc = T::lit(yc as f64);
        let factor = n * T::lit(dc as f64) / (yc * yc);
        acc.scaled_add(factor, &q.row(c));
        jump_times.push(u);
        cum.push(acc.clone());
    }
    for (s, r) in ds.subjects().iter().enumerate() {
        let mut row = psi.row_mut(s);
        let upto = r.time.min(tau);
        let k = jump_times.partition_point(|&u| u <= upto);
        if k > 0 {
            row -= &cum[k - 1];
        }
        if r.cause.is_censored() && r.time <= tau {
            let c = grid.knot_index(r.time).expect("censored time up to tau is a knot");
            let yc = T::lit(cm.at_risk(r.time) as f64);
            row.scaled_add(n / yc, &q.row(c));
        }
    }
    psi
}

fn group_sums<T: Scalar>(per_subject: &Array2<T>, groups: &[usize], n_groups: usize) -> Array2<T> {
    let mut out = Array2::zeros((n_groups, per_subject.ncols()));
    for (s, &g) in groups.iter().enumerate() {
        let mut row = out.row_mut(g);
        row += &per_subject.row(s);
    }
    out
}

/// Sandwich `A^{-1} Omega A^{-1}`. `cm` is required in IPCW mode.
pub fn sandwich<T: Scalar>(
    ds: &ClusteredDataset<T>,
    fit: &FitResult<T>,
    cm: Option<&CensoringModel<T>>,
    clustering: Clustering,
) -> Result<SandwichParts<T>> {
    let d = fit.design();
    if d.n_subjects() != ds.n_subjects() {
        return Err(Error::DimensionMismatch {
            expected: d.n_subjects(),
            found: ds.n_subjects(),
        });
    }
    let eta_s = subject_eta(fit);
    let q = q_path(fit);
    let psi_s = match (fit.mode, cm) {
        (Mode::Ipcw, Some(cm)) => subject_psi(ds, fit, cm, &q),
        (Mode::Ipcw, None) => {
            return Err(Error::InvalidArgument(
                "IPCW sandwich needs the censoring model".into(),
            ))
        }
        (Mode::Cc, _) => Array2::zeros(eta_s.raw_dim()),
    };
    let (groups, n_groups): (Vec<usize>, usize) = match clustering {
        Clustering::ByCluster => (d.cluster_of().to_vec(), d.n_clusters()),
        Clustering::ByIndividual => ((0..d.n_subjects()).collect(), d.n_subjects()),
    };
    let eta = group_sums(&eta_s, &groups, n_groups);
    let psi = group_sums(&psi_s, &groups, n_groups);
    let total = &eta + &psi;
    let ng = T::lit(n_groups as f64);
    let omega = symmetrized(total.t().dot(&total).mapv(|v| v / ng).view());
    let a_inv = fit
        .a_tau_inv
        .mapv(|v| v * ng / T::lit(d.n_clusters() as f64));
    let sigma = symmetrized(a_inv.dot(&omega).dot(&a_inv).view());
    let se = sigma
        .diag()
        .mapv(|v| (v.max(T::zero()) / ng).sqrt());
    let pi_path = grid_pi(fit, cm);
    Ok(SandwichParts {
        clustering,
        n_groups,
        eta,
        psi,
        q_path: q,
        pi_path,
        omega,
        sigma,
        se,
    })
}

fn grid_pi<T: Scalar>(fit: &FitResult<T>, cm: Option<&CensoringModel<T>>) -> Array1<T> {
    match cm {
        Some(cm) => Array1::from(cm.risk_totals(fit.grid().knots())),
        None => Array1::zeros(fit.grid().len()),
    }
}

/// Predicted cumulative incidence for one covariate path.
#[derive(Debug, Clone, Serialize)]
pub struct CifPrediction<T> {
    pub times: Vec<T>,
    pub point: Vec<T>,
    pub lower: Option<Vec<T>>,
    pub upper: Option<Vec<T>>,
    pub covariates: CovariatePath<T>,
    pub level: Option<T>,
    pub b_boot: usize,
    pub failed_resamples: usize,
}

fn check_path<T: Scalar>(fit: &FitResult<T>, x: &CovariatePath<T>) -> Result<()> {
    if x.basis != fit.grid().bases() {
        return Err(Error::InvalidArgument(
            "covariate path bases differ from the fitted model".into(),
        ));
    }
    Ok(())
}

/// `F(t, X) = 1 - exp{-Lambda0(t) - int_0^t X'beta}` at the given times.
pub fn predict_cif_at<T: Scalar>(fit: &FitResult<T>, x: &CovariatePath<T>, times: &[T]) -> Result<Vec<T>> {
    check_path(fit, x)?;
    let base = Array1::from(x.base.clone());
    Ok(times
        .iter()
        .map(|&t| {
            if t <= T::zero() {
                T::zero()
            } else {
                let eta = fit.baseline_at(t) + fit.linear_predictor_integral(base.view(), t);
                T::one() - (-eta).exp()
            }
        })
        .collect())
}

/// Point prediction at `t = 0` and every grid knot. Values are reported as
/// computed, without monotone correction.
pub fn predict_cif<T: Scalar>(fit: &FitResult<T>, x: &CovariatePath<T>) -> Result<CifPrediction<T>> {
    let times: Vec<T> = std::iter::once(T::zero())
        .chain(fit.grid().knots().iter().copied())
        .collect();
    let point = predict_cif_at(fit, x, &times)?;
    Ok(CifPrediction {
        times,
        point,
        lower: None,
        upper: None,
        covariates: x.clone(),
        level: None,
        b_boot: 0,
        failed_resamples: 0,
    })
}

/// Options for [`bootstrap_cif_band`].
#[derive(Debug, Clone, Copy)]
pub struct BootstrapOptions<T> {
    pub cause: u8,
    pub mode: Mode,
    pub refinement: usize,
    pub resamples: usize,
    pub level: T,
    pub seed: u64,
}

/// Largest tolerated share of failed bootstrap refits.
pub const MAX_BOOTSTRAP_FAILURE_RATE: f64 = 0.10;

fn percentile<T: Scalar>(sorted: &[T], prob: T) -> T {
    let h = prob * T::lit((sorted.len() - 1) as f64);
    let lo = h.floor();
    let i = lo.to_usize().unwrap_or(0).min(sorted.len() - 1);
    let frac = h - lo;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Percentile band from refits on cluster resamples.
///
/// Each resample uses the horizon `min(tau, largest uncensored time in the
/// resample)`; a time point beyond a resample's horizon is left out of that
/// resample's contribution. The band is widened to contain the point
/// estimate where needed.
pub fn bootstrap_cif_band<T: Scalar>(
    ds: &ClusteredDataset<T>,
    x: &CovariatePath<T>,
    opts: &BootstrapOptions<T>,
) -> Result<CifPrediction<T>> {
    if opts.resamples < 100 {
        return Err(Error::InvalidArgument(format!(
            "bootstrap needs at least 100 resamples, got {}",
            opts.resamples
        )));
    }
    if !(opts.level > T::zero() && opts.level < T::one()) {
        return Err(Error::InvalidArgument("band level must lie in (0, 1)".into()));
    }
    let grid = build_grid(ds, opts.refinement)?;
    let fitted = match opts.mode {
        Mode::Ipcw => {
            let cm = fit_censoring_km(ds)?;
            fit_with_censoring(ds, opts.cause, opts.mode, &grid, Some(&cm))?
        }
        Mode::Cc => fit_with_censoring(ds, opts.cause, opts.mode, &grid, None)?,
    };
    let mut pred = predict_cif(&fitted, x)?;
    let times = pred.times.clone();
    let n = ds.n_clusters();

    let draws: Vec<Option<Vec<Option<T>>>> = (0..opts.resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            refit_curve(ds, &idx, x, opts, &times).ok()
        })
        .collect();
    let failed = draws.iter().filter(|d| d.is_none()).count();
    if failed as f64 > MAX_BOOTSTRAP_FAILURE_RATE * opts.resamples as f64 {
        return Err(Error::BootstrapFitFailure {
            failed,
            total: opts.resamples,
        });
    }
    if failed > 0 {
        log::warn!("{failed} of {} bootstrap refits failed", opts.resamples);
    }
    let alpha = (T::one() - opts.level) / T::lit(2.0);
    let mut lower = Vec::with_capacity(times.len());
    let mut upper = Vec::with_capacity(times.len());
    for (ti, &point) in pred.point.iter().enumerate() {
        let mut vals: Vec<T> = draws
            .iter()
            .flatten()
            .filter_map(|curve| curve[ti])
            .collect();
        if vals.is_empty() {
            lower.push(point);
            upper.push(point);
            continue;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lower.push(percentile(&vals, alpha).min(point));
        upper.push(percentile(&vals, T::one() - alpha).max(point));
    }
    pred.lower = Some(lower);
    pred.upper = Some(upper);
    pred.level = Some(opts.level);
    pred.b_boot = opts.resamples;
    pred.failed_resamples = failed;
    Ok(pred)
}

fn refit_curve<T: Scalar>(
    ds: &ClusteredDataset<T>,
    idx: &[usize],
    x: &CovariatePath<T>,
    opts: &BootstrapOptions<T>,
    times: &[T],
) -> Result<Vec<Option<T>>> {
    let boot = ds.resample_clusters(idx, None)?;
    let tau = boot.tau().min(ds.tau());
    let boot = boot.with_tau(Some(tau))?;
    let grid = build_grid(&boot, opts.refinement)?;
    let fitted = match opts.mode {
        Mode::Ipcw => {
            let cm = fit_censoring_km(&boot)?;
            fit_with_censoring(&boot, opts.cause, opts.mode, &grid, Some(&cm))?
        }
        Mode::Cc => fit_with_censoring(&boot, opts.cause, opts.mode, &grid, None)?,
    };
    let values = predict_cif_at(&fitted, x, times)?;
    Ok(times
        .iter()
        .zip(values)
        .map(|(&t, v)| (t <= tau).then_some(v))
        .collect())
}

/// Sum of per-group `eta` rows; zero at the fitted `beta`.
pub fn eta_total<T: Scalar>(parts: &SandwichParts<T>) -> Array1<T> {
    parts.eta.sum_axis(Axis(0))
}
