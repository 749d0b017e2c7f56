//! Dense reference implementations computed straight from the counting
//! process definitions, independent of the library's prefix-sum machinery.
#![allow(dead_code)]

use addsub_core::{ClusteredDataset, SubjectRecord, TimeBasis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

/// Brute-force product-limit estimate of the censoring survival at `t`.
pub fn km_oracle(ds: &ClusteredDataset<f64>, t: f64) -> f64 {
    let subs = ds.subjects();
    let mut times: Vec<f64> = subs
        .iter()
        .filter(|r| r.cause.0 == 0 && r.time <= t)
        .map(|r| r.time)
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    let mut g = 1.0;
    for u in times {
        let d = subs.iter().filter(|r| r.cause.0 == 0 && r.time == u).count() as f64;
        let y = subs.iter().filter(|r| r.time >= u).count() as f64;
        g *= 1.0 - d / y;
    }
    g
}

fn censoring_hazard_jump(ds: &ClusteredDataset<f64>, u: f64) -> f64 {
    let subs = ds.subjects();
    let d = subs.iter().filter(|r| r.cause.0 == 0 && r.time == u).count() as f64;
    let y = subs.iter().filter(|r| r.time >= u).count() as f64;
    d / y
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum OMode {
    Ipcw,
    Cc,
}

/// Plain-loop evaluation of every estimator quantity on one dataset.
pub struct Dense<'a> {
    pub ds: &'a ClusteredDataset<f64>,
    pub cause: u8,
    pub mode: OMode,
    pub knots: Vec<f64>,
    pub panels: usize,
    pub bases: Vec<TimeBasis>,
    /// `(u, G(u))` at each censoring time, from [`km_oracle`].
    km_steps: Vec<(f64, f64)>,
}

fn basis(b: TimeBasis, t: f64) -> f64 {
    match b {
        TimeBasis::Constant => 1.0,
        TimeBasis::ExpDecay => (-t).exp(),
    }
}

impl<'a> Dense<'a> {
    pub fn new(ds: &'a ClusteredDataset<f64>, cause: u8, mode: OMode, refinement: usize) -> Self {
        let tau = ds.tau();
        let mut knots: Vec<f64> = ds
            .subjects()
            .iter()
            .flat_map(|r| {
                let mut v = vec![r.time];
                if let Some(c) = r.censoring_time {
                    v.push(c);
                }
                v
            })
            .filter(|&t| t <= tau)
            .collect();
        knots.push(tau);
        knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        knots.dedup();
        let bases = ds.bases().to_vec();
        let panels = if bases.iter().all(|b| *b == TimeBasis::Constant) {
            1
        } else {
            refinement
        };
        let mut cens: Vec<f64> = ds
            .subjects()
            .iter()
            .filter(|r| r.cause.0 == 0)
            .map(|r| r.time)
            .collect();
        cens.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cens.dedup();
        let km_steps = cens.into_iter().map(|u| (u, km_oracle(ds, u))).collect();
        Dense {
            ds,
            cause,
            mode,
            knots,
            panels,
            bases,
            km_steps,
        }
    }

    fn g(&self, t: f64) -> f64 {
        self.km_steps
            .iter()
            .rev()
            .find(|(u, _)| *u <= t)
            .map_or(1.0, |(_, g)| *g)
    }

    pub fn p(&self) -> usize {
        self.bases.len()
    }

    pub fn n(&self) -> f64 {
        self.ds.n_clusters() as f64
    }

    pub fn x_at(&self, r: &SubjectRecord<f64>, t: f64) -> Vec<f64> {
        r.covariates
            .iter()
            .zip(&self.bases)
            .map(|(&x, &b)| x * basis(b, t))
            .collect()
    }

    pub fn y(&self, r: &SubjectRecord<f64>, t: f64) -> f64 {
        if r.cause.0 == self.cause && r.time < t {
            0.0
        } else {
            1.0
        }
    }

    /// `omega(t) Y(t)`.
    pub fn w(&self, r: &SubjectRecord<f64>, t: f64) -> f64 {
        let omega = match self.mode {
            OMode::Ipcw => {
                if r.cause.0 == 0 && t > r.time {
                    0.0
                } else {
                    self.g(t) / self.g(r.time.min(t))
                }
            }
            OMode::Cc => {
                if r.censoring_time.unwrap() > t {
                    1.0
                } else {
                    0.0
                }
            }
        };
        omega * self.y(r, t)
    }

    /// Weighted mean covariate vector using the weights at `tw` and the
    /// covariate values at `tx` (they differ only on interval interiors).
    pub fn xhat(&self, tw: f64, tx: f64) -> Vec<f64> {
        let p = self.p();
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; p];
        for r in self.ds.subjects() {
            let w = self.w(r, tw);
            s0 += w;
            let x = self.x_at(r, tx);
            for l in 0..p {
                s1[l] += w * x[l];
            }
        }
        if s0 > 0.0 {
            s1.iter().map(|v| v / s0).collect()
        } else {
            vec![0.0; p]
        }
    }

    pub fn s0(&self, t: f64) -> f64 {
        self.ds.subjects().iter().map(|r| self.w(r, t)).sum()
    }

    fn interval(&self, i: usize) -> (f64, f64) {
        let lo = if i == 0 { 0.0 } else { self.knots[i - 1] };
        (lo, self.knots[i])
    }

    /// Trapezoid over the panels of `(lo, hi)` with weights frozen at the
    /// interval midpoint; `f(u)` is evaluated at the panel points.
    fn integrate<F: Fn(f64, f64) -> Vec<f64>>(&self, lo: f64, hi: f64, len: usize, f: F) -> Vec<f64> {
        let mid = 0.5 * (lo + hi);
        let h = (hi - lo) / self.panels as f64;
        let mut out = vec![0.0; len];
        for k in 0..self.panels {
            let a = lo + h * k as f64;
            let b = if k + 1 == self.panels { hi } else { lo + h * (k + 1) as f64 };
            let fa = f(mid, a);
            let fb = f(mid, b);
            for i in 0..len {
                out[i] += 0.5 * h * (fa[i] + fb[i]);
            }
        }
        out
    }

    /// Score `U(beta, t)` for `t` at a knot.
    pub fn score(&self, beta: &[f64], t: f64) -> Vec<f64> {
        let p = self.p();
        let mut u = vec![0.0; p];
        for (i, &hi) in self.knots.iter().enumerate() {
            if hi > t {
                break;
            }
            let (lo, _) = self.interval(i);
            for r in self.ds.subjects() {
                let integral = self.integrate(lo, hi, p, |tw, tx| {
                    let w = self.w(r, tw);
                    let x = self.x_at(r, tx);
                    let xh = self.xhat(tw, tx);
                    let lp: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
                    (0..p).map(|l| w * (x[l] - xh[l]) * lp).collect()
                });
                for l in 0..p {
                    u[l] -= integral[l];
                }
                if r.cause.0 == self.cause && r.time == hi {
                    let w = self.w(r, hi);
                    let x = self.x_at(r, hi);
                    let xh = self.xhat(hi, hi);
                    for l in 0..p {
                        u[l] += w * (x[l] - xh[l]);
                    }
                }
            }
        }
        u
    }

    /// `A(tau)` normalised by the number of clusters.
    pub fn a_tau(&self) -> Mat {
        let p = self.p();
        let mut a = vec![vec![0.0; p]; p];
        for i in 0..self.knots.len() {
            let (lo, hi) = self.interval(i);
            for r in self.ds.subjects() {
                let integral = self.integrate(lo, hi, p * p, |tw, tx| {
                    let w = self.w(r, tw);
                    let x = self.x_at(r, tx);
                    let xh = self.xhat(tw, tx);
                    let mut v = vec![0.0; p * p];
                    for l in 0..p {
                        for m in 0..p {
                            v[l * p + m] = w * (x[l] - xh[l]) * (x[m] - xh[m]);
                        }
                    }
                    v
                });
                for l in 0..p {
                    for m in 0..p {
                        a[l][m] += integral[l * p + m] / self.n();
                    }
                }
            }
        }
        a
    }

    /// Root of `U(beta, tau) = 0` by Newton steps with a finite-difference
    /// Jacobian. The score is affine in `beta`, so a few steps suffice.
    pub fn root(&self) -> Vec<f64> {
        let p = self.p();
        let tau = *self.knots.last().unwrap();
        let mut beta = vec![0.0; p];
        for _ in 0..4 {
            let u0 = self.score(&beta, tau);
            let mut jac = vec![vec![0.0; p]; p];
            for m in 0..p {
                let mut b = beta.clone();
                b[m] += 1.0;
                let u1 = self.score(&b, tau);
                for l in 0..p {
                    jac[l][m] = u1[l] - u0[l];
                }
            }
            let step = solve(&jac, &u0);
            for l in 0..p {
                beta[l] -= step[l];
            }
        }
        beta
    }

    pub fn jump(&self, t: f64) -> f64 {
        let mut num = 0.0;
        for r in self.ds.subjects() {
            if r.cause.0 == self.cause && r.time == t {
                num += self.w(r, t);
            }
        }
        let den = self.s0(t);
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    /// `Lambda0(t)` at a knot.
    pub fn baseline(&self, beta: &[f64], t: f64) -> f64 {
        let p = self.p();
        let mut v = 0.0;
        for (i, &hi) in self.knots.iter().enumerate() {
            if hi > t {
                break;
            }
            let (lo, _) = self.interval(i);
            let drift = self.integrate(lo, hi, 1, |tw, tx| {
                let xh = self.xhat(tw, tx);
                vec![(0..p).map(|l| xh[l] * beta[l]).sum::<f64>()]
            });
            v += self.jump(hi) - drift[0];
        }
        v
    }

    /// Per-subject `int omega (X - Xhat) dM` over `(0, tau]`.
    pub fn eta_subject(&self, beta: &[f64], s: usize) -> Vec<f64> {
        self.eta_from(beta, s, 0.0)
    }

    /// Contribution restricted to `t >= u` (knots `>= u`, intervals with
    /// interior `>= u`).
    fn eta_from(&self, beta: &[f64], s: usize, u: f64) -> Vec<f64> {
        let p = self.p();
        let r = &self.ds.subjects()[s];
        let mut eta = vec![0.0; p];
        for (i, &hi) in self.knots.iter().enumerate() {
            let (lo, _) = self.interval(i);
            if lo >= u {
                let integral = self.integrate(lo, hi, p, |tw, tx| {
                    let w = self.w(r, tw);
                    let x = self.x_at(r, tx);
                    let xh = self.xhat(tw, tx);
                    let d: Vec<f64> = (0..p).map(|l| x[l] - xh[l]).collect();
                    let lp: f64 = d.iter().zip(beta).map(|(a, b)| a * b).sum();
                    (0..p).map(|l| w * d[l] * lp).collect()
                });
                for l in 0..p {
                    eta[l] -= integral[l];
                }
            }
            if hi >= u {
                let w = self.w(r, hi);
                let x = self.x_at(r, hi);
                let xh = self.xhat(hi, hi);
                let dn = if r.cause.0 == self.cause && r.time == hi { 1.0 } else { 0.0 };
                let jump = self.jump(hi);
                for l in 0..p {
                    eta[l] += w * (x[l] - xh[l]) * (dn - jump);
                }
            }
        }
        eta
    }

    pub fn q(&self, beta: &[f64], u: f64) -> Vec<f64> {
        let p = self.p();
        let mut q = vec![0.0; p];
        for (s, r) in self.ds.subjects().iter().enumerate() {
            if r.time < u {
                let e = self.eta_from(beta, s, u);
                for l in 0..p {
                    q[l] -= e[l] / self.n();
                }
            }
        }
        q
    }

    pub fn psi_subject(&self, beta: &[f64], s: usize) -> Vec<f64> {
        let p = self.p();
        let mut psi = vec![0.0; p];
        if self.mode == OMode::Cc {
            return psi;
        }
        let r = &self.ds.subjects()[s];
        let tau = *self.knots.last().unwrap();
        for &u in &self.knots {
            let d = self.ds.subjects().iter().filter(|x| x.cause.0 == 0 && x.time == u).count();
            if d == 0 || u > tau {
                continue;
            }
            let yc_total = self.ds.subjects().iter().filter(|x| x.time >= u).count() as f64;
            let pi = yc_total / self.n();
            let q = self.q(beta, u);
            let dnc = if r.cause.0 == 0 && r.time == u { 1.0 } else { 0.0 };
            let yc = if r.time >= u { 1.0 } else { 0.0 };
            let dm = dnc - yc * censoring_hazard_jump(self.ds, u);
            for l in 0..p {
                psi[l] += q[l] / pi * dm;
            }
        }
        psi
    }

    /// Sandwich `(Sigma, Omega)` grouped by cluster or by subject.
    pub fn sandwich(&self, beta: &[f64], by_cluster: bool) -> (Mat, Mat) {
        let p = self.p();
        let subs = self.ds.subjects();
        let ng = if by_cluster { self.ds.n_clusters() } else { subs.len() };
        let mut groups = vec![vec![0.0; p]; ng];
        for s in 0..subs.len() {
            let g = if by_cluster { subs[s].cluster } else { s };
            let e = self.eta_subject(beta, s);
            let ps = self.psi_subject(beta, s);
            for l in 0..p {
                groups[g][l] += e[l] + ps[l];
            }
        }
        let mut omega = vec![vec![0.0; p]; p];
        for g in &groups {
            for l in 0..p {
                for m in 0..p {
                    omega[l][m] += g[l] * g[m] / ng as f64;
                }
            }
        }
        let a = self.a_tau();
        let scale = ng as f64 / self.n();
        let a_inv: Mat = invert(&a)
            .into_iter()
            .map(|row| row.into_iter().map(|v| v * scale).collect())
            .collect();
        let sigma = matmul(&matmul(&a_inv, &omega), &a_inv);
        (sigma, omega)
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let m = b[0].len();
    let k = b.len();
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                c[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    c
}

/// Cramer's rule for the 1x1 and 2x2 systems used here.
pub fn solve(a: &Mat, b: &[f64]) -> Vec<f64> {
    match a.len() {
        1 => vec![b[0] / a[0][0]],
        2 => {
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            vec![
                (b[0] * a[1][1] - a[0][1] * b[1]) / det,
                (a[0][0] * b[1] - a[1][0] * b[0]) / det,
            ]
        }
        _ => panic!("oracle solver handles p <= 2"),
    }
}

pub fn invert(a: &Mat) -> Mat {
    let p = a.len();
    let mut out = vec![vec![0.0; p]; p];
    for col in 0..p {
        let e: Vec<f64> = (0..p).map(|i| if i == col { 1.0 } else { 0.0 }).collect();
        let x = solve(a, &e);
        for i in 0..p {
            out[i][col] = x[i];
        }
    }
    out
}

/// Classical Lin–Ying additive hazards estimate with a cluster sandwich, for
/// data with a single cause, no censoring and constant covariates.
pub fn lin_ying(ds: &ClusteredDataset<f64>) -> (Vec<f64>, Mat) {
    let subs = ds.subjects();
    let p = ds.n_covariates();
    let tau = ds.tau();
    let mut times: Vec<f64> = subs.iter().map(|r| r.time).filter(|&t| t <= tau).collect();
    times.push(tau);
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    let at_risk = |t: f64| -> Vec<usize> { (0..subs.len()).filter(|&s| subs[s].time >= t).collect() };
    let mean = |idx: &[usize]| -> Vec<f64> {
        let mut m = vec![0.0; p];
        for &s in idx {
            for l in 0..p {
                m[l] += subs[s].covariates[l] / idx.len() as f64;
            }
        }
        m
    };
    let mut a = vec![vec![0.0; p]; p];
    let mut d = vec![0.0; p];
    let mut prev = 0.0;
    for &t in &times {
        // interval (prev, t): risk set = {Z >= t}
        let idx = at_risk(t);
        let xb = mean(&idx);
        for &s in &idx {
            for l in 0..p {
                for m in 0..p {
                    a[l][m] += (t - prev)
                        * (subs[s].covariates[l] - xb[l])
                        * (subs[s].covariates[m] - xb[m]);
                }
            }
        }
        for s in 0..subs.len() {
            if subs[s].time == t && subs[s].cause.0 == 1 {
                for l in 0..p {
                    d[l] += subs[s].covariates[l] - xb[l];
                }
            }
        }
        prev = t;
    }
    let beta = solve(&a, &d);
    // martingale residual contributions
    let n = ds.n_clusters();
    let mut groups = vec![vec![0.0; p]; n];
    let mut prev = 0.0;
    for &t in &times {
        let idx = at_risk(t);
        let xb = mean(&idx);
        let deaths = subs.iter().filter(|r| r.time == t && r.cause.0 == 1).count() as f64;
        let dlam_jump = deaths / idx.len() as f64;
        let lin_bar: f64 = (0..p).map(|l| xb[l] * beta[l]).sum();
        for &s in &idx {
            let x = &subs[s].covariates;
            let lin: f64 = (0..p).map(|l| x[l] * beta[l]).sum();
            let dn = if subs[s].time == t && subs[s].cause.0 == 1 { 1.0 } else { 0.0 };
            let dm = dn - dlam_jump - (t - prev) * (lin - lin_bar);
            for l in 0..p {
                groups[subs[s].cluster][l] += (x[l] - xb[l]) * dm;
            }
        }
        prev = t;
    }
    let mut omega = vec![vec![0.0; p]; p];
    for g in &groups {
        for l in 0..p {
            for m in 0..p {
                omega[l][m] += g[l] * g[m] / n as f64;
            }
        }
    }
    let a_mean: Mat = a
        .iter()
        .map(|row| row.iter().map(|v| v / n as f64).collect())
        .collect();
    let ai = invert(&a_mean);
    (beta, matmul(&matmul(&ai, &omega), &ai))
}

/// Options for random micro instances.
#[derive(Clone, Copy, Debug)]
pub struct MicroSpec {
    pub max_clusters: usize,
    pub max_size: usize,
    pub max_p: usize,
    pub censoring: bool,
    pub competing: bool,
    pub time_varying: bool,
    pub ctime: bool,
}

impl Default for MicroSpec {
    fn default() -> Self {
        MicroSpec {
            max_clusters: 10,
            max_size: 4,
            max_p: 2,
            censoring: true,
            competing: true,
            time_varying: true,
            ctime: false,
        }
    }
}

/// Random small dataset; times sit on a coarse lattice so ties occur.
pub fn micro_instance(seed: u64, spec: MicroSpec) -> Option<ClusteredDataset<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=spec.max_clusters);
    let p = rng.random_range(1..=spec.max_p);
    let bases: Vec<TimeBasis> = (0..p)
        .map(|_| {
            if spec.time_varying && rng.random_bool(0.4) {
                TimeBasis::ExpDecay
            } else {
                TimeBasis::Constant
            }
        })
        .collect();
    let mut clusters = Vec::new();
    for i in 0..n {
        let m = rng.random_range(1..=spec.max_size);
        let mut recs = Vec::new();
        for _ in 0..m {
            let t = (rng.random_range(1..=12) as f64) * 0.25;
            let c = if spec.ctime {
                (rng.random_range(1..=14) as f64) * 0.25
            } else {
                (rng.random_range(1..=16) as f64) * 0.25
            };
            let raw_cause = if spec.competing && rng.random_bool(0.35) { 2 } else { 1 };
            let (time, cause) = if spec.censoring && c < t { (c, 0) } else { (t, raw_cause) };
            let covariates: Vec<f64> = (0..p)
                .map(|l| {
                    if l == 0 {
                        rng.random_range(0..2) as f64
                    } else {
                        (rng.random::<f64>() * 4.0).round() / 2.0 - 1.0
                    }
                })
                .collect();
            let censoring_time = if spec.ctime {
                Some(if cause == 0 { time } else { c.max(time) })
            } else {
                None
            };
            recs.push(SubjectRecord {
                cluster: i,
                time,
                cause: addsub_core::CauseCode(cause),
                covariates,
                censoring_time,
            });
        }
        clusters.push((format!("c{i}"), recs));
    }
    let names = (0..p).map(|l| format!("x{l}")).collect();
    ClusteredDataset::from_clusters(clusters, names, bases, Some(2), None).ok()
}
