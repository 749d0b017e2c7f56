//! Clustered competing-risks data from frailty-coupled cumulative incidence
//! models, plus a replication harness for coverage and rejection studies.

pub mod harness;

use addsub_core::{CauseCode, ClusteredDataset, SubjectRecord, TimeBasis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Raw frailty draws allowed before giving up on the constraint band.
pub const REJECTION_BUDGET: usize = 1_000_000;
/// Upper end of the inversion bracket, in model time units.
pub const T_MAX: f64 = 50.0;
pub const BISECTION_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("frailty rejection budget of {REJECTION_BUDGET} draws exceeded")]
    RejectionBudgetExceeded,
    #[error("cause-1 probability {p} outside [0, 1]")]
    InvalidProbability { p: f64 },
    #[error("failure-time root not bracketed in [0, {T_MAX}] for u = {u}")]
    RootNotBracketed { u: f64 },
    #[error(transparent)]
    Core(#[from] addsub_core::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    /// Additive subdistribution hazards (the null model).
    M1,
    /// Proportional subdistribution hazards (the alternative).
    M2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateSpec {
    /// One covariate, `U(0, 1)`.
    Uniform01,
    /// `(N(0, 1), Bernoulli(0.5))`.
    NormalBernoulli,
}

impl CovariateSpec {
    pub fn dim(self) -> usize {
        match self {
            CovariateSpec::Uniform01 => 1,
            CovariateSpec::NormalBernoulli => 2,
        }
    }

    pub fn names(self) -> Vec<String> {
        match self {
            CovariateSpec::Uniform01 => vec!["x".into()],
            CovariateSpec::NormalBernoulli => vec!["x1".into(), "x2".into()],
        }
    }

    fn draw<R: Rng>(self, rng: &mut R) -> Vec<f64> {
        match self {
            CovariateSpec::Uniform01 => vec![rng.random::<f64>()],
            CovariateSpec::NormalBernoulli => {
                let z: f64 = StandardNormal.sample(rng);
                vec![z, if rng.random_bool(0.5) { 1.0 } else { 0.0 }]
            }
        }
    }
}

/// What to do when the cause-1 probability leaves `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProbabilityPolicy {
    /// Clamp to `[0, 1]`.
    #[default]
    Clamp,
    /// Fail with [`SimError::InvalidProbability`].
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_clusters: usize,
    pub cluster_size: usize,
    pub rho: f64,
    pub theta: f64,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    /// Exponential censoring rate.
    pub gamma: f64,
    pub model: Model,
    pub covariates: CovariateSpec,
    #[serde(default)]
    pub probability_policy: ProbabilityPolicy,
    pub seed: u64,
}

impl SimConfig {
    /// Single-covariate design with `X ~ U(0, 1)`.
    pub fn table1(n_clusters: usize, cluster_size: usize, theta: f64, gamma: f64, seed: u64) -> Self {
        SimConfig {
            n_clusters,
            cluster_size,
            rho: 0.5,
            theta,
            beta1: vec![1.0],
            beta2: vec![0.2],
            gamma,
            model: Model::M1,
            covariates: CovariateSpec::Uniform01,
            probability_policy: ProbabilityPolicy::Clamp,
            seed,
        }
    }

    /// Two-covariate design for the goodness-of-fit studies.
    pub fn table3(model: Model, n_clusters: usize, theta: f64, gamma: f64, seed: u64) -> Self {
        let beta1 = match model {
            Model::M1 => vec![0.6, 1.0],
            Model::M2 => vec![0.5, 1.0],
        };
        SimConfig {
            n_clusters,
            cluster_size: 10,
            rho: 0.66,
            theta,
            beta1,
            beta2: vec![0.5, 1.0],
            gamma,
            model,
            covariates: CovariateSpec::NormalBernoulli,
            probability_policy: ProbabilityPolicy::Clamp,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return bad(format!("theta must be positive, got {}", self.theta));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.n_clusters < 2 {
            return bad("at least 2 clusters are required".into());
        }
        if self.cluster_size < 1 {
            return bad("cluster size must be at least 1".into());
        }
        let p = self.covariates.dim();
        if self.beta1.len() != p || self.beta2.len() != p {
            return bad(format!(
                "beta vectors must have {p} entries for this covariate design (got {} and {})",
                self.beta1.len(),
                self.beta2.len()
            ));
        }
        if self.beta1.iter().chain(&self.beta2).any(|b| !b.is_finite()) {
            return bad("beta entries must be finite".into());
        }
        Ok(())
    }
}

/// Ground truth kept alongside each simulated subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Truth {
    pub true_time: f64,
    pub true_cause: u8,
    pub censoring_time: f64,
    pub frailty: f64,
}

/// Simulated data; `data` carries the censoring times, so it is the
/// censoring-complete version. [`SimDataset::right_censored`] drops them.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub data: ClusteredDataset<f64>,
    pub truth: Vec<Truth>,
}

impl SimDataset {
    pub fn right_censored(&self) -> ClusteredDataset<f64> {
        self.data.without_censoring_times()
    }

    /// Writes the dataset; with `truth` the censoring time and the true
    /// time, cause and frailty columns are included.
    pub fn save<W: std::io::Write>(&self, sink: W, truth: bool) -> Result<()> {
        if !truth {
            addsub_core::dataset::save_dataset(&self.right_censored(), sink)?;
            return Ok(());
        }
        let col = |f: &dyn Fn(&Truth) -> String| self.truth.iter().map(f).collect::<Vec<_>>();
        let extra = [
            ("true_time", col(&|t| t.true_time.to_string())),
            ("true_cause", col(&|t| t.true_cause.to_string())),
            ("frailty", col(&|t| t.frailty.to_string())),
        ];
        addsub_core::dataset::save_dataset_with(&self.data, sink, &extra)?;
        Ok(())
    }
}

/// `nu = E - 1/theta`, `E ~ Exp(theta)`, redrawn until `0 < rho + nu < 1`.
pub fn draw_frailty<R: Rng>(theta: f64, rho: f64, rng: &mut R) -> Result<f64> {
    draw_frailty_counted(theta, rho, rng).map(|(nu, _)| nu)
}

/// [`draw_frailty`] that also reports how many raw draws were used.
pub fn draw_frailty_counted<R: Rng>(theta: f64, rho: f64, rng: &mut R) -> Result<(f64, usize)> {
    let exp = Exp::new(theta).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    for k in 1..=REJECTION_BUDGET {
        let nu = exp.sample(rng) - 1.0 / theta;
        let a = rho + nu;
        if a > 0.0 && a < 1.0 {
            return Ok((nu, k));
        }
    }
    Err(SimError::RejectionBudgetExceeded)
}

fn dot(x: &[f64], b: &[f64]) -> f64 {
    x.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// Cause-1 probability `F_1(inf; X, nu)` given `X'beta1`.
pub fn cause1_probability(model: Model, xb: f64, nu: f64, rho: f64) -> f64 {
    let a = rho + nu;
    match model {
        Model::M1 => 1.0 - (1.0 - a) * (-xb).exp(),
        Model::M2 => 1.0 - (1.0 - a).powf((-xb).exp()),
    }
}

pub fn assign_cause<R: Rng>(
    x: &[f64],
    nu: f64,
    rho: f64,
    beta1: &[f64],
    model: Model,
    policy: ProbabilityPolicy,
    rng: &mut R,
) -> Result<u8> {
    let p = cause1_probability(model, dot(x, beta1), nu, rho);
    let p = if (0.0..=1.0).contains(&p) {
        p
    } else {
        match policy {
            ProbabilityPolicy::Clamp => p.clamp(0.0, 1.0),
            ProbabilityPolicy::Reject => return Err(SimError::InvalidProbability { p }),
        }
    };
    let u: f64 = rng.random();
    Ok(if u <= p { 1 } else { 2 })
}

/// Conditional distribution `F_k(t) / F_k(inf)` of the failure time given
/// cause `k`; `xb` is `X'beta_k` for that cause.
pub fn conditional_cdf(model: Model, cause: u8, xb: f64, nu: f64, rho: f64, t: f64) -> f64 {
    let a = rho + nu;
    let s = 1.0 - (-t).exp();
    match (model, cause) {
        (Model::M1, 1) => {
            let f = 1.0 - (1.0 - a * s) * (-xb * s).exp();
            f / cause1_probability(model, xb, nu, rho)
        }
        (Model::M1, _) => 1.0 - (-t - xb * s).exp(),
        (Model::M2, 1) => {
            let f = 1.0 - (1.0 - a * s).powf((-xb * s).exp());
            f / cause1_probability(model, xb, nu, rho)
        }
        (Model::M2, _) => {
            if xb > 0.0 {
                1.0 - (-t * xb * s).exp()
            } else {
                // the cause-2 law is defective when X'beta2 <= 0
                s
            }
        }
    }
}

/// Inverse-CDF draw of the failure time given cause `eps`.
pub fn draw_failure_time<R: Rng>(x: &[f64], nu: f64, eps: u8, config: &SimConfig, rng: &mut R) -> Result<f64> {
    let beta = if eps == 1 { &config.beta1 } else { &config.beta2 };
    let xb = dot(x, beta);
    let mut u: f64 = rng.random();
    while u == 0.0 {
        u = rng.random();
    }
    let f = |t: f64| conditional_cdf(config.model, eps, xb, nu, config.rho, t);
    invert(f, u, config.model == Model::M2 && eps == 2)
}

/// Bisection for `F(t) = u` on `[0, T_MAX]`. With `cap_tail`, an unbracketed
/// root returns `T_MAX` instead of failing.
fn invert(f: impl Fn(f64) -> f64, u: f64, cap_tail: bool) -> Result<f64> {
    let (mut lo, mut hi) = (0.0, T_MAX);
    if f(hi) < u {
        if cap_tail {
            return Ok(T_MAX);
        }
        return Err(SimError::RootNotBracketed { u });
    }
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if f(mid) < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Generator state for one replicate: keyed by `(seed, replicate)`, with one
/// stream per cluster.
pub fn cluster_rng(seed: u64, replicate: u64, cluster: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&replicate.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(cluster);
    rng
}

pub fn generate(config: &SimConfig) -> Result<SimDataset> {
    generate_replicate(config, 0)
}

/// Replicate `r` of the design; replicates are independent of each other and
/// of the order in which they are generated.
pub fn generate_replicate(config: &SimConfig, replicate: u64) -> Result<SimDataset> {
    config.validate()?;
    let cens = Exp::new(config.gamma).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let mut clusters = Vec::with_capacity(config.n_clusters);
    let mut truth = Vec::with_capacity(config.n_clusters * config.cluster_size);
    for i in 0..config.n_clusters {
        let mut rng = cluster_rng(config.seed, replicate, i as u64);
        let nu = draw_frailty(config.theta, config.rho, &mut rng)?;
        let mut recs = Vec::with_capacity(config.cluster_size);
        for _ in 0..config.cluster_size {
            let x = config.covariates.draw(&mut rng);
            let eps = assign_cause(
                &x,
                nu,
                config.rho,
                &config.beta1,
                config.model,
                config.probability_policy,
                &mut rng,
            )?;
            let t = draw_failure_time(&x, nu, eps, config, &mut rng)?;
            let c: f64 = cens.sample(&mut rng);
            let (time, cause) = if t <= c { (t, eps) } else { (c, 0) };
            recs.push(SubjectRecord {
                cluster: i,
                time,
                cause: CauseCode(cause),
                covariates: x,
                censoring_time: Some(c),
            });
            truth.push(Truth {
                true_time: t,
                true_cause: eps,
                censoring_time: c,
                frailty: nu,
            });
        }
        clusters.push(((i + 1).to_string(), recs));
    }
    let bases = vec![TimeBasis::ExpDecay; config.covariates.dim()];
    let data = ClusteredDataset::from_clusters(clusters, config.covariates.names(), bases, Some(2), None)?;
    Ok(SimDataset { data, truth })
}
