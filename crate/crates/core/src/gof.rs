//! Cumulative-residual goodness-of-fit tests with Gaussian multiplier
//! perturbation.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fitter::FitResult;
use crate::linalg::{inverse, rcond_symmetric};
use crate::scalar::Scalar;
use crate::variance::subject_eta;

/// Default number of perturbation draws.
pub const DEFAULT_DRAWS: usize = 1000;
/// Smallest draw count accepted when p-values are reported.
pub const MIN_DRAWS: usize = 100;
/// Cap on functional-form thresholds for continuous covariates.
pub const MAX_THRESHOLDS: usize = 512;
const CHUNK: usize = 64;

/// Integrand transform `f(X)` in the residual class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FChoice {
    /// `f(X) = X`, a `p`-vector.
    Identity,
    /// `f(X) = 1`, a scalar.
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TestKind {
    ScoreAdditivity,
    FunctionalForm,
}

/// Observed and perturbed paths of one test process.
#[derive(Debug, Clone, Serialize)]
pub struct TestProcess<T> {
    pub kind: TestKind,
    pub covariate: usize,
    pub name: String,
    /// Times (score kind) or thresholds (functional form); the first point
    /// is the origin where every path is zero.
    pub axis: Vec<T>,
    /// `n^{-1/2} U_l(t)` or `W_l(tau, x)`.
    pub observed: Vec<T>,
    /// Retained perturbed draws, one row per draw.
    pub perturbed: Array2<T>,
    /// `{Sigma^{-1}}_ll^{1/2}` for the score kind.
    pub sigma_ll: Option<T>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GofEntry<T> {
    pub name: String,
    pub statistic: T,
    pub p_value: T,
}

#[derive(Debug, Clone, Serialize)]
pub struct GofReport<T> {
    pub additivity: Vec<GofEntry<T>>,
    pub overall: Option<GofEntry<T>>,
    pub functional_form: Vec<GofEntry<T>>,
    pub draws: usize,
    pub seed: u64,
    pub add_one: bool,
    #[serde(skip)]
    pub processes: Vec<TestProcess<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct GofOptions {
    pub draws: usize,
    pub seed: u64,
    /// Report `(1 + exceedances) / (B + 1)` instead of the plain proportion.
    pub add_one: bool,
    /// Number of perturbed draws retained in each [`TestProcess`].
    pub keep_draws: usize,
}

impl Default for GofOptions {
    fn default() -> Self {
        GofOptions {
            draws: DEFAULT_DRAWS,
            seed: 0,
            add_one: false,
            keep_draws: 0,
        }
    }
}

impl GofOptions {
    fn validate(&self) -> Result<()> {
        if self.draws < MIN_DRAWS {
            return Err(Error::InvalidArgument(format!(
                "at least {MIN_DRAWS} perturbation draws are required, got {}",
                self.draws
            )));
        }
        Ok(())
    }

    fn p_value<T: Scalar>(&self, exceed: usize) -> T {
        if self.add_one {
            T::lit((exceed + 1) as f64 / (self.draws + 1) as f64)
        } else {
            T::lit(exceed as f64 / self.draws as f64)
        }
    }
}

/// Standard normal multipliers for draws `start..start + count`, one row per
/// draw. Draw `b` always uses stream `b` of the seeded generator.
pub fn multipliers<T: Scalar>(n: usize, start: usize, count: usize, seed: u64) -> Array2<T> {
    let mut xi = Array2::zeros((count, n));
    for (r, mut row) in xi.axis_iter_mut(Axis(0)).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((start + r) as u64);
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = T::lit(z);
        }
    }
    xi
}

/// `W_b = sum_i Q_i xi_ib` for explicit multipliers (`B x n`).
pub fn perturb_with<T: Scalar>(q: ArrayView2<'_, T>, xi: ArrayView2<'_, T>) -> Array2<T> {
    xi.dot(&q)
}

/// `B` perturbed draws of `sum_i Q_i xi_i`; `q` is clusters by axis points.
pub fn perturb<T: Scalar>(q: ArrayView2<'_, T>, draws: usize, seed: u64) -> Array2<T> {
    let xi = multipliers::<T>(q.nrows(), 0, draws, seed);
    perturb_with(q, xi.view())
}

/// Maps every perturbed draw through `f` without materialising all draws.
fn perturb_map<T, R, F>(q: &Array2<T>, draws: usize, seed: u64, f: F) -> Vec<R>
where
    T: Scalar,
    R: Send,
    F: Fn(usize, ArrayView1<'_, T>) -> R + Sync,
{
    let chunks: Vec<usize> = (0..draws).step_by(CHUNK).collect();
    chunks
        .into_par_iter()
        .map(|start| {
            let count = CHUNK.min(draws - start);
            let xi = multipliers::<T>(q.nrows(), start, count, seed);
            let w = xi.dot(q);
            w.axis_iter(Axis(0))
                .enumerate()
                .map(|(r, row)| f(start + r, row))
                .collect::<Vec<R>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

fn indicator<T: Scalar>(x: ArrayView1<'_, T>, thresholds: &[T]) -> bool {
    x.iter().zip(thresholds).all(|(a, b)| *a <= *b)
}

/// Per-cluster influence terms `Q_i(t, x)` evaluated by direct loops over
/// subjects, knots and intervals. Thresholds `x` apply to the base covariate
/// values. Returns `n x d` with `d = p` for [`FChoice::Identity`] and `d = 1`
/// for [`FChoice::One`].
pub fn cluster_influence<T: Scalar>(fit: &FitResult<T>, t: T, x: &[T], f: FChoice) -> Result<Array2<T>> {
    let d = fit.design();
    let grid = d.grid();
    let w = d.weights();
    let agg = d.aggregates();
    let p = d.n_covariates();
    if x.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: x.len(),
        });
    }
    let nsub = d.n_subjects();
    let dim = match f {
        FChoice::Identity => p,
        FChoice::One => 1,
    };
    let orig: Array2<T> = &d.xc + &d.shift;
    let ind: Vec<bool> = (0..nsub).map(|s| indicator(orig.row(s), x)).collect();
    let beta = &fit.beta;
    let j = grid.len();
    let full = grid.count_le(t);
    let partial = (full < j && t > grid.interval_start(full)).then(|| {
        let lo = grid.interval_start(full);
        grid.partial_moments(lo, t)
    });

    let mut first = Array2::<T>::zeros((nsub, dim));
    let mut h = Array2::<T>::zeros((dim, p));
    let last = if partial.is_some() { full + 1 } else { full };
    for i in 0..last {
        let (m1, m2) = match (&partial, i == full) {
            (Some((pm1, pm2)), true) => (pm1.clone(), pm2.clone()),
            _ => (grid.m1(i).to_owned(), grid.m2(i).to_owned()),
        };
        // g on the interval interior, base scale
        let s0 = agg.s0_interval[i];
        let mut gb = Array1::<T>::zeros(dim);
        if s0 > T::zero() {
            for s in 0..nsub {
                let ws = w.interval_weight(s, i);
                if ws == T::zero() || !ind[s] {
                    continue;
                }
                match f {
                    FChoice::Identity => gb.scaled_add(ws, &orig.row(s)),
                    FChoice::One => gb[0] += ws,
                }
            }
            gb.mapv_inplace(|v| v / s0);
        }
        let xbar = agg.xbar_interval.row(i);
        for s in 0..nsub {
            let ws = w.interval_weight(s, i);
            if ws == T::zero() {
                continue;
            }
            let dev = &d.xc.row(s) - &xbar;
            let iv = if ind[s] { T::one() } else { T::zero() };
            match f {
                FChoice::Identity => {
                    for l in 0..p {
                        let fl = orig[[s, l]] * iv - gb[l];
                        let mut acc = T::zero();
                        for m in 0..p {
                            acc += dev[m] * beta[m] * m2[[l, m]];
                            h[[l, m]] += ws * orig[[s, l]] * iv * dev[m] * m2[[l, m]];
                        }
                        first[[s, l]] -= ws * fl * acc;
                    }
                }
                FChoice::One => {
                    let mut acc = T::zero();
                    for m in 0..p {
                        acc += dev[m] * m1[m] * beta[m];
                        h[[0, m]] += ws * iv * dev[m] * m1[m];
                    }
                    first[[s, 0]] -= ws * (iv - gb[0]) * acc;
                }
            }
        }
    }
    for i in 0..full {
        let b = grid.basis_at_knot(i);
        let s0 = agg.s0_knot[i];
        let mut gk = Array1::<T>::zeros(dim);
        if s0 > T::zero() {
            for s in 0..nsub {
                let ws = w.knot_weight(s, i);
                if ws == T::zero() || !ind[s] {
                    continue;
                }
                match f {
                    FChoice::Identity => {
                        for l in 0..p {
                            gk[l] += ws * orig[[s, l]] * b[l];
                        }
                    }
                    FChoice::One => gk[0] += ws,
                }
            }
            gk.mapv_inplace(|v| v / s0);
        }
        for s in 0..nsub {
            let ws = w.knot_weight(s, i);
            if ws == T::zero() {
                continue;
            }
            let dn = if w.profile(s).event_knot == Some(i) {
                T::one()
            } else {
                T::zero()
            };
            let dm = dn - fit.jumps[i];
            let iv = if ind[s] { T::one() } else { T::zero() };
            match f {
                FChoice::Identity => {
                    for l in 0..p {
                        first[[s, l]] += ws * (orig[[s, l]] * b[l] * iv - gk[l]) * dm;
                    }
                }
                FChoice::One => first[[s, 0]] += ws * (iv - gk[0]) * dm,
            }
        }
    }
    let n = T::lit(d.n_clusters() as f64);
    let eta_s = subject_eta(fit);
    let mut q = Array2::<T>::zeros((d.n_clusters(), dim));
    let mut eta = Array2::<T>::zeros((d.n_clusters(), p));
    for s in 0..nsub {
        let c = d.cluster_of()[s];
        let mut row = q.row_mut(c);
        row += &first.row(s);
        let mut er = eta.row_mut(c);
        er += &eta_s.row(s);
    }
    let corr = h.mapv(|v| v / n).dot(&fit.a_tau_inv);
    q -= &eta.dot(&corr.t());
    Ok(q)
}

/// Score-process perturbation terms on the sampling points of the time axis.
#[derive(Debug, Clone)]
pub struct ScoreProcess<T> {
    /// Time of each sampling point; left limits precede the knot value.
    pub times: Vec<T>,
    pub left_limit: Vec<bool>,
    /// `Q_i(t)` flattened to `n x (points * p)`, point-major.
    pub q: Array2<T>,
    /// `Phi_i(t)` in the same layout; column sums give `U(beta, t)`.
    pub phi: Array2<T>,
    /// `Phi_i(tau)`, `n x p`.
    pub phi_tau: Array2<T>,
}

/// Builds `Phi_i` and `Q_i = Phi_i(t) - A(t) A^{-1}(tau) Phi_i(tau)` at the
/// origin, every knot and the left limit of every event knot.
pub fn score_process<T: Scalar>(fit: &FitResult<T>) -> ScoreProcess<T> {
    let d = fit.design();
    let grid = d.grid();
    let w = d.weights();
    let agg = d.aggregates();
    let p = d.n_covariates();
    let j = grid.len();
    let n = d.n_clusters();

    let mut times = vec![T::zero()];
    let mut left_limit = vec![false];
    let mut left_pos = vec![usize::MAX; j];
    let mut right_pos = vec![0; j];
    for i in 0..j {
        if d.event_weight[i] > T::zero() {
            left_pos[i] = times.len();
            times.push(grid.knots()[i]);
            left_limit.push(true);
        }
        right_pos[i] = times.len();
        times.push(grid.knots()[i]);
        left_limit.push(false);
    }
    let npts = times.len();

    // increments, later cumulated along the point axis
    let mut inc = Array2::<T>::zeros((n, npts * p));
    let beta = &fit.beta;
    let mut vbuf = vec![T::zero(); p];
    for (s, prof) in w.profiles().iter().enumerate() {
        let c = d.cluster_of()[s];
        let x = d.xc.row(s);
        let reach = if prof.tail_scale == T::zero() {
            prof.interval_cut.max(prof.knot_cut)
        } else {
            j
        };
        let mut row = inc.row_mut(c);
        for i in 0..reach.min(j) {
            let wi = w.interval_weight(s, i);
            let pos = if left_pos[i] != usize::MAX {
                left_pos[i]
            } else {
                right_pos[i]
            };
            if wi != T::zero() {
                let m2 = grid.m2(i);
                for l in 0..p {
                    vbuf[l] = x[l] - agg.xbar_interval[[i, l]];
                }
                for l in 0..p {
                    let mut acc = T::zero();
                    for m in 0..p {
                        acc += vbuf[m] * beta[m] * m2[[l, m]];
                    }
                    row[pos * p + l] -= wi * vbuf[l] * acc;
                }
            }
            let wk = w.knot_weight(s, i);
            if wk != T::zero() {
                let b = grid.basis_at_knot(i);
                let dn = if prof.event_knot == Some(i) {
                    T::one()
                } else {
                    T::zero()
                };
                let dm = dn - fit.jumps[i];
                let rp = right_pos[i];
                for l in 0..p {
                    row[rp * p + l] += wk * (x[l] - agg.xbar_knot[[i, l]]) * b[l] * dm;
                }
            }
        }
    }
    let mut phi = inc;
    for mut row in phi.axis_iter_mut(Axis(0)) {
        for k in 1..npts {
            for l in 0..p {
                let prev = row[(k - 1) * p + l];
                row[k * p + l] += prev;
            }
        }
    }
    let phi_tau = phi.slice(ndarray::s![.., (npts - 1) * p..]).to_owned();

    // A(t) at each point (continuous, so left limits share the knot value)
    let nn = T::lit(n as f64);
    let mut q = phi.clone();
    let ainv = &fit.a_tau_inv;
    let proj = phi_tau.dot(&ainv.t()); // rows: A^{-1} Phi_i(tau)
    for i in 0..j {
        let a = d.a_cum.index_axis(Axis(0), i).mapv(|v| v / nn);
        let corr = proj.dot(&a.t()); // n x p
        let mut pts = vec![right_pos[i]];
        if left_pos[i] != usize::MAX {
            pts.push(left_pos[i]);
        }
        for pt in pts {
            let mut block = q.slice_mut(ndarray::s![.., pt * p..(pt + 1) * p]);
            block -= &corr;
        }
    }
    ScoreProcess {
        times,
        left_limit,
        q,
        phi,
        phi_tau,
    }
}

fn sigma_weights<T: Scalar>(phi_tau: &Array2<T>) -> Result<Array1<T>> {
    let n = T::lit(phi_tau.nrows() as f64);
    let sigma = phi_tau.t().dot(phi_tau).mapv(|v| v / n);
    let rc = rcond_symmetric(sigma.view());
    if rc < T::lit(1e-8) {
        log::warn!("score covariance is ill-conditioned (rcond {rc})");
    }
    let inv = inverse(sigma.view()).ok_or(Error::SingularDesign {
        rcond: rc.to_f64_lossy(),
    })?;
    Ok(inv.diag().mapv(|v| v.max(T::zero()).sqrt()))
}

/// Supremum statistics `(S_1, ..., S_p, S_all)` of a flattened path.
fn score_sups<T: Scalar>(path: ArrayView1<'_, T>, sig: &Array1<T>, rootn: T) -> Vec<T> {
    let p = sig.len();
    let npts = path.len() / p;
    let mut out = vec![T::zero(); p + 1];
    for k in 0..npts {
        let mut total = T::zero();
        for l in 0..p {
            let v = sig[l] * path[k * p + l].abs() / rootn;
            if v > out[l] {
                out[l] = v;
            }
            total += v;
        }
        if total > out[p] {
            out[p] = total;
        }
    }
    out
}

/// Per-covariate and overall additivity tests, sharing one set of draws.
pub fn additivity_tests<T: Scalar>(
    fit: &FitResult<T>,
    names: &[String],
    opts: &GofOptions,
) -> Result<(Vec<GofEntry<T>>, GofEntry<T>, Vec<TestProcess<T>>)> {
    opts.validate()?;
    let sp = score_process(fit);
    let p = fit.beta.len();
    let n = sp.q.nrows();
    let rootn = T::lit(n as f64).sqrt();
    let sig = sigma_weights(&sp.phi_tau)?;
    let observed = sp.phi.sum_axis(Axis(0));
    let obs_stats = score_sups(observed.view(), &sig, rootn);
    let keep = opts.keep_draws.min(opts.draws);
    let results = perturb_map(&sp.q, opts.draws, opts.seed, |b, row| {
        let stats = score_sups(row, &sig, rootn);
        let kept = (b < keep).then(|| row.to_owned());
        (stats, kept)
    });
    let mut exceed = vec![0usize; p + 1];
    for (stats, _) in &results {
        for k in 0..=p {
            if stats[k] > obs_stats[k] {
                exceed[k] += 1;
            }
        }
    }
    // exported paths keep right-continuous values only so the axis is strictly increasing
    let right: Vec<usize> = (0..sp.times.len()).filter(|&k| !sp.left_limit[k]).collect();
    let axis: Vec<T> = right.iter().map(|&k| sp.times[k]).collect();
    let entries = (0..p)
        .map(|l| GofEntry {
            name: names.get(l).cloned().unwrap_or_else(|| format!("x{l}")),
            statistic: obs_stats[l],
            p_value: opts.p_value(exceed[l]),
        })
        .collect();
    let overall = GofEntry {
        name: "overall".into(),
        statistic: obs_stats[p],
        p_value: opts.p_value(exceed[p]),
    };
    let kept: Vec<&Array1<T>> = results.iter().filter_map(|(_, k)| k.as_ref()).collect();
    let processes = (0..p)
        .map(|l| {
            let mut perturbed = Array2::zeros((kept.len(), right.len()));
            for (r, row) in kept.iter().enumerate() {
                for (c, &k) in right.iter().enumerate() {
                    perturbed[[r, c]] = row[k * p + l] / rootn;
                }
            }
            TestProcess {
                kind: TestKind::ScoreAdditivity,
                covariate: l,
                name: names.get(l).cloned().unwrap_or_else(|| format!("x{l}")),
                axis: axis.clone(),
                observed: right.iter().map(|&k| observed[k * p + l] / rootn).collect(),
                perturbed,
                sigma_ll: Some(sig[l]),
            }
        })
        .collect();
    Ok((entries, overall, processes))
}

/// Which additivity statistic to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateSelector {
    Index(usize),
    All,
}

/// Single additivity test entry (`S_l` or `S_all`).
pub fn additivity_test<T: Scalar>(
    fit: &FitResult<T>,
    which: CovariateSelector,
    names: &[String],
    opts: &GofOptions,
) -> Result<GofEntry<T>> {
    let (entries, overall, _) = additivity_tests(fit, names, opts)?;
    match which {
        CovariateSelector::All => Ok(overall),
        CovariateSelector::Index(l) => entries.into_iter().nth(l).ok_or_else(|| {
            Error::InvalidArgument(format!("covariate index {l} out of range"))
        }),
    }
}

/// Functional-form process terms for covariate `l` at `t = tau`.
#[derive(Debug, Clone)]
pub struct FormProcess<T> {
    pub thresholds: Vec<T>,
    /// `W_l(tau, x_k)` for every threshold.
    pub observed: Array1<T>,
    /// `n x thresholds`.
    pub q: Array2<T>,
}

fn thresholds_for<T: Scalar>(values: &mut [T]) -> Vec<T> {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct: Vec<T> = values.to_vec();
    distinct.dedup();
    if distinct.len() <= MAX_THRESHOLDS {
        return distinct;
    }
    // quantiles of the observed values, always including the maximum
    let mut th: Vec<T> = (1..=MAX_THRESHOLDS)
        .map(|k| {
            let idx = (k * values.len()).div_ceil(MAX_THRESHOLDS) - 1;
            values[idx.min(values.len() - 1)]
        })
        .collect();
    th.dedup();
    th
}

pub fn form_process<T: Scalar>(fit: &FitResult<T>, l: usize) -> Result<FormProcess<T>> {
    let d = fit.design();
    let grid = d.grid();
    let w = d.weights();
    let agg = d.aggregates();
    let p = d.n_covariates();
    if l >= p {
        return Err(Error::InvalidArgument(format!("covariate index {l} out of range")));
    }
    let nsub = d.n_subjects();
    let j = grid.len();
    let n = d.n_clusters();
    let orig: Vec<T> = (0..nsub).map(|s| d.xc[[s, l]] + d.shift[l]).collect();
    let mut vals = orig.clone();
    let thresholds = thresholds_for(&mut vals);
    if thresholds.len() < 2 {
        return Err(Error::DegenerateCovariate { index: l });
    }
    let nt = thresholds.len();
    let bucket: Vec<usize> = orig
        .iter()
        .map(|&v| thresholds.partition_point(|&t| t < v))
        .collect();

    // H0 over thresholds: weighted risk totals restricted to x_l <= threshold
    let mut unit_i = Array2::<T>::zeros((nt, j + 1));
    let mut tail_i = Array2::<T>::zeros((nt, j + 1));
    let mut unit_k = Array2::<T>::zeros((nt, j + 1));
    let mut tail_k = Array2::<T>::zeros((nt, j + 1));
    for (s, prof) in w.profiles().iter().enumerate() {
        let b = bucket[s];
        unit_i[[b, prof.interval_cut]] += T::one();
        unit_k[[b, prof.knot_cut]] += T::one();
        tail_i[[b, prof.interval_cut]] += prof.tail_scale;
        tail_k[[b, prof.knot_cut]] += prof.tail_scale;
    }
    let cumulate_rows = |a: &mut Array2<T>| {
        for k in 1..nt {
            for c in 0..=j {
                let prev = a[[k - 1, c]];
                a[[k, c]] += prev;
            }
        }
    };
    cumulate_rows(&mut unit_i);
    cumulate_rows(&mut tail_i);
    cumulate_rows(&mut unit_k);
    cumulate_rows(&mut tail_k);
    let gi = w.g_interval();
    let gk = w.g_knot();
    let to_ghat = |unit: &Array2<T>, tail: &Array2<T>, g: &[T], s0: &Array1<T>| {
        let mut out = Array2::<T>::zeros((nt, j));
        for k in 0..nt {
            let mut suf = T::zero();
            let mut sufs = vec![T::zero(); j + 1];
            for c in (0..=j).rev() {
                suf += unit[[k, c]];
                sufs[c] = suf;
            }
            let mut pre = T::zero();
            for i in 0..j {
                pre += tail[[k, i]];
                let h0 = sufs[i + 1] + g[i] * pre;
                if s0[i] > T::zero() {
                    out[[k, i]] = h0 / s0[i];
                }
            }
        }
        out
    };
    let g_int = to_ghat(&unit_i, &tail_i, gi, &agg.s0_interval);
    let g_knot = to_ghat(&unit_k, &tail_k, gk, &agg.s0_knot);

    let resid = fit.weighted_residuals();
    let beta = &fit.beta;
    // subject-free interval pieces: m1 ⊙ beta and (xbar ⊙ m1)' beta
    let mut mb = Array2::<T>::zeros((j, p));
    let mut xmb = Array1::<T>::zeros(j);
    let mut m1x = Array2::<T>::zeros((j, p));
    for i in 0..j {
        let m1 = grid.m1(i);
        for m in 0..p {
            mb[[i, m]] = m1[m] * beta[m];
            xmb[i] += agg.xbar_interval[[i, m]] * m1[m] * beta[m];
            m1x[[i, m]] = agg.xbar_interval[[i, m]] * m1[m];
        }
    }
    let mut first = Array2::<T>::zeros((nsub, nt));
    let prefix_tail = |a: &[T], g: &[T]| -> (Vec<T>, Vec<T>) {
        let mut pre = vec![T::zero(); j + 1];
        let mut tail = vec![T::zero(); j + 1];
        for i in 0..j {
            pre[i + 1] = pre[i] + a[i];
        }
        for i in (0..j).rev() {
            tail[i] = tail[i + 1] + g[i] * a[i];
        }
        (pre, tail)
    };
    let mut buf = vec![T::zero(); j];
    for k in 0..nt {
        for i in 0..j {
            buf[i] = g_knot[[k, i]] * fit.jumps[i];
        }
        let (ka_pre, ka_tail) = prefix_tail(&buf, gk);
        for i in 0..j {
            buf[i] = g_int[[k, i]] * xmb[i];
        }
        let (xe_pre, xe_tail) = prefix_tail(&buf, gi);
        let mut c_pre = Vec::with_capacity(p);
        let mut c_tail = Vec::with_capacity(p);
        for m in 0..p {
            for i in 0..j {
                buf[i] = g_int[[k, i]] * mb[[i, m]];
            }
            let (a, b) = prefix_tail(&buf, gi);
            c_pre.push(a);
            c_tail.push(b);
        }
        for (s, prof) in w.profiles().iter().enumerate() {
            let (f, kf, sc) = (prof.interval_cut, prof.knot_cut, prof.tail_scale);
            let mut gs = T::zero();
            if let Some(e) = prof.event_knot {
                gs += w.knot_weight(s, e) * g_knot[[k, e]];
            }
            gs -= ka_pre[kf] + sc * ka_tail[kf];
            let mut lin = -(xe_pre[f] + sc * xe_tail[f]);
            for m in 0..p {
                lin += d.xc[[s, m]] * (c_pre[m][f] + sc * c_tail[m][f]);
            }
            gs -= lin;
            let iv = if bucket[s] <= k { resid[s] } else { T::zero() };
            first[[s, k]] = iv - gs;
        }
    }

    // h(tau, x_k) / n, a p-vector per threshold
    let zero = Array1::<T>::zeros(j);
    let mut m1all = Array2::<T>::zeros((j, p));
    for i in 0..j {
        m1all.row_mut(i).assign(&grid.m1(i));
    }
    let (_, m1_pre, _, m1_tail) = crate::fitter::split_sums(&zero, &m1all, gi);
    let (_, xm_pre, _, xm_tail) = crate::fitter::split_sums(&zero, &m1x, gi);
    let mut h = Array2::<T>::zeros((nt, p));
    for (s, prof) in w.profiles().iter().enumerate() {
        let (f, sc) = (prof.interval_cut, prof.tail_scale);
        for m in 0..p {
            let v = d.xc[[s, m]] * (m1_pre[[f, m]] + sc * m1_tail[[f, m]])
                - (xm_pre[[f, m]] + sc * xm_tail[[f, m]]);
            h[[bucket[s], m]] += v;
        }
    }
    for k in 1..nt {
        for m in 0..p {
            let prev = h[[k - 1, m]];
            h[[k, m]] += prev;
        }
    }
    let nn = T::lit(n as f64);
    h.mapv_inplace(|v| v / nn);

    let eta_s = subject_eta(fit);
    let mut q = Array2::<T>::zeros((n, nt));
    let mut eta = Array2::<T>::zeros((n, p));
    let mut observed = Array1::<T>::zeros(nt);
    for s in 0..nsub {
        let c = d.cluster_of()[s];
        let mut row = q.row_mut(c);
        row += &first.row(s);
        let mut er = eta.row_mut(c);
        er += &eta_s.row(s);
        observed[bucket[s]] += resid[s];
    }
    for k in 1..nt {
        let prev = observed[k - 1];
        observed[k] += prev;
    }
    // correction h A^{-1} eta_i
    let proj = eta.dot(&fit.a_tau_inv.t()); // n x p
    q -= &proj.dot(&h.t());
    Ok(FormProcess {
        thresholds,
        observed,
        q,
    })
}

fn sup_abs<T: Scalar>(v: ArrayView1<'_, T>) -> T {
    v.iter().fold(T::zero(), |a, b| a.max(b.abs()))
}

/// Supremum test of `W_l(tau, x)` over thresholds of covariate `l`.
pub fn functional_form_test<T: Scalar>(
    fit: &FitResult<T>,
    l: usize,
    name: &str,
    opts: &GofOptions,
) -> Result<(GofEntry<T>, TestProcess<T>)> {
    opts.validate()?;
    let fp = form_process(fit, l)?;
    let stat = sup_abs(fp.observed.view());
    let keep = opts.keep_draws.min(opts.draws);
    let results = perturb_map(&fp.q, opts.draws, opts.seed, |b, row| {
        (sup_abs(row), (b < keep).then(|| row.to_owned()))
    });
    let exceed = results.iter().filter(|(s, _)| *s > stat).count();
    let kept: Vec<&Array1<T>> = results.iter().filter_map(|(_, k)| k.as_ref()).collect();
    let nt = fp.thresholds.len();
    let mut perturbed = Array2::zeros((kept.len(), nt + 1));
    for (r, row) in kept.iter().enumerate() {
        for k in 0..nt {
            perturbed[[r, k + 1]] = row[k];
        }
    }
    let axis = std::iter::once(T::neg_infinity())
        .chain(fp.thresholds.iter().copied())
        .collect();
    let observed = std::iter::once(T::zero())
        .chain(fp.observed.iter().copied())
        .collect();
    Ok((
        GofEntry {
            name: name.to_string(),
            statistic: stat,
            p_value: opts.p_value(exceed),
        },
        TestProcess {
            kind: TestKind::FunctionalForm,
            covariate: l,
            name: name.to_string(),
            axis,
            observed,
            perturbed,
            sigma_ll: None,
        },
    ))
}

/// Tests requested from [`run_gof`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GofRequest {
    pub additivity: bool,
    pub functional_form: bool,
    pub covariate: CovariateSelector,
}

pub fn run_gof<T: Scalar>(
    fit: &FitResult<T>,
    names: &[String],
    request: GofRequest,
    opts: &GofOptions,
) -> Result<GofReport<T>> {
    opts.validate()?;
    let p = fit.beta.len();
    let selected: Vec<usize> = match request.covariate {
        CovariateSelector::All => (0..p).collect(),
        CovariateSelector::Index(l) if l < p => vec![l],
        CovariateSelector::Index(l) => {
            return Err(Error::InvalidArgument(format!("covariate index {l} out of range")))
        }
    };
    let mut report = GofReport {
        additivity: Vec::new(),
        overall: None,
        functional_form: Vec::new(),
        draws: opts.draws,
        seed: opts.seed,
        add_one: opts.add_one,
        processes: Vec::new(),
    };
    if request.additivity {
        let (entries, overall, procs) = additivity_tests(fit, names, opts)?;
        for l in &selected {
            report.additivity.push(entries[*l].clone());
            report.processes.push(procs[*l].clone());
        }
        if request.covariate == CovariateSelector::All {
            report.overall = Some(overall);
        }
    }
    if request.functional_form {
        for &l in &selected {
            let name = names.get(l).cloned().unwrap_or_else(|| format!("x{l}"));
            match functional_form_test(fit, l, &name, opts) {
                Ok((entry, proc_)) => {
                    report.functional_form.push(entry);
                    report.processes.push(proc_);
                }
                // a binary or constant covariate has no functional form to test
                Err(Error::DegenerateCovariate { .. }) if request.covariate == CovariateSelector::All => {
                    log::info!("skipping functional-form test for degenerate covariate `{name}`");
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(report)
}

/// Writes `axis,observed,draw_1,...` for plotting.
pub fn export_test_process<T: Scalar, W: Write>(
    tp: &TestProcess<T>,
    n_draws_to_plot: usize,
    sink: W,
) -> Result<()> {
    let m = n_draws_to_plot.min(tp.perturbed.nrows());
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["axis".to_string(), "observed".to_string()];
    header.extend((1..=m).map(|k| format!("draw_{k}")));
    w.write_record(&header)?;
    for (k, (&a, &o)) in tp.axis.iter().zip(&tp.observed).enumerate() {
        let mut row = vec![a.to_string(), o.to_string()];
        row.extend((0..m).map(|r| tp.perturbed[[r, k]].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
