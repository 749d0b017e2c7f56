//! Monte Carlo replication of the coverage and rejection-rate studies.

use std::fmt;
use std::str::FromStr;

use addsub_core::dataset::DEFAULT_REFINEMENT;
use addsub_core::gof::{additivity_tests, GofOptions};
use addsub_core::variance::{sandwich, Clustering};
use addsub_core::{build_grid, fit_censoring_km, fit_with_censoring, Mode};
use rayon::prelude::*;
use serde::Serialize;

use crate::{generate_replicate, Model, Result, SimConfig, SimError};

/// Nominal level for the goodness-of-fit rejection studies.
pub const ALPHA: f64 = 0.05;
/// Normal quantile for 95% Wald intervals.
pub const Z975: f64 = 1.959963984540054;
/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    Table1,
    Table2,
    Table3,
}

impl FromStr for Study {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "table1" => Ok(Study::Table1),
            "table2" => Ok(Study::Table2),
            "table3" => Ok(Study::Table3),
            other => Err(format!("unknown study `{other}` (expected table1, table2 or table3)")),
        }
    }
}

/// Censoring rate giving roughly the given marginal censoring percentage.
pub fn censoring_rate(percent: u32) -> Option<f64> {
    match percent {
        20 => Some(0.35),
        40 => Some(0.95),
        60 => Some(1.65),
        _ => None,
    }
}

/// Optional restriction of a study to some of its cells.
#[derive(Debug, Clone, Default)]
pub struct CellFilter {
    pub n_clusters: Option<usize>,
    pub cluster_size: Option<usize>,
    pub theta: Option<f64>,
    pub censoring_percent: Option<u32>,
    pub model: Option<Model>,
}

/// Configurations of every cell of a study, in table order.
pub fn study_cells(study: Study, seed: u64, filter: &CellFilter) -> Vec<SimConfig> {
    let mut out = Vec::new();
    match study {
        Study::Table1 | Study::Table2 => {
            let (gamma, pct) = if study == Study::Table1 { (0.35, 20) } else { (0.95, 40) };
            for n in [100, 250] {
                for m in [10, 20] {
                    for theta in [0.7, 1.0] {
                        let keep = filter.n_clusters.is_none_or(|v| v == n)
                            && filter.cluster_size.is_none_or(|v| v == m)
                            && filter.theta.is_none_or(|v| v == theta)
                            && filter.censoring_percent.is_none_or(|v| v == pct)
                            && filter.model.is_none_or(|v| v == Model::M1);
                        if keep {
                            out.push(SimConfig::table1(n, m, theta, gamma, seed));
                        }
                    }
                }
            }
        }
        Study::Table3 => {
            for n in [100, 150] {
                for pct in [20, 40, 60] {
                    for theta in [0.7, 1.0] {
                        for model in [Model::M1, Model::M2] {
                            let keep = filter.n_clusters.is_none_or(|v| v == n)
                                && filter.cluster_size.is_none_or(|v| v == 10)
                                && filter.theta.is_none_or(|v| v == theta)
                                && filter.censoring_percent.is_none_or(|v| v == pct)
                                && filter.model.is_none_or(|v| v == model);
                            if keep {
                                let gamma = censoring_rate(pct).unwrap();
                                out.push(SimConfig::table3(model, n, theta, gamma, seed));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Data type and variance combination of one estimation arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Arm {
    /// Clustered variance, right-censored data (IPCW).
    Crc,
    /// Clustered variance, censoring-complete data.
    Ccc,
    /// Unclustered variance, right-censored data.
    Ucrc,
    /// Unclustered variance, censoring-complete data.
    Uccc,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Crc, Arm::Ccc, Arm::Ucrc, Arm::Uccc];
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Crc => "CRC",
            Arm::Ccc => "CCC",
            Arm::Ucrc => "UCRC",
            Arm::Uccc => "UCCC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArmEstimate {
    pub estimate: f64,
    pub se: f64,
}

fn refinement_for(q: Option<usize>) -> usize {
    q.unwrap_or(DEFAULT_REFINEMENT)
}

/// Fits replicate `r` four ways; the estimate is the first coefficient of
/// the cause-1 model.
pub fn estimation_replicate(cfg: &SimConfig, r: u64, refinement: Option<usize>) -> Result<[ArmEstimate; 4]> {
    let sim = generate_replicate(cfg, r)?;
    let q = refinement_for(refinement);
    let rc = sim.right_censored();
    let grid = build_grid(&rc, q)?;
    let cm = fit_censoring_km(&rc)?;
    let ipcw = fit_with_censoring(&rc, 1, Mode::Ipcw, &grid, Some(&cm))?;
    let crc = sandwich(&rc, &ipcw, Some(&cm), Clustering::ByCluster)?;
    let ucrc = sandwich(&rc, &ipcw, Some(&cm), Clustering::ByIndividual)?;
    let cc_grid = build_grid(&sim.data, q)?;
    let cc = fit_with_censoring(&sim.data, 1, Mode::Cc, &cc_grid, None)?;
    let ccc = sandwich(&sim.data, &cc, None, Clustering::ByCluster)?;
    let uccc = sandwich(&sim.data, &cc, None, Clustering::ByIndividual)?;
    let est = |b: f64, se: f64| ArmEstimate { estimate: b, se };
    Ok([
        est(ipcw.beta[0], crc.se[0]),
        est(cc.beta[0], ccc.se[0]),
        est(ipcw.beta[0], ucrc.se[0]),
        est(cc.beta[0], uccc.se[0]),
    ])
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmSummary {
    pub arm: Arm,
    /// Mean estimate over successful replicates.
    pub mean: f64,
    /// Monte Carlo standard deviation of the estimates; undefined for one replicate.
    pub mcse: Option<f64>,
    /// Mean of the estimated standard errors.
    pub aese: f64,
    /// Share of 95% intervals containing the true value.
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimationSummary {
    pub config: SimConfig,
    pub replicates: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub arms: Vec<ArmSummary>,
    /// Set when fewer than two replicates succeeded.
    pub degenerate: bool,
}

impl EstimationSummary {
    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / self.replicates.max(1) as f64
    }

    pub fn arm(&self, arm: Arm) -> &ArmSummary {
        self.arms.iter().find(|a| a.arm == arm).expect("all arms are summarised")
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

fn in_pool<R: Send>(threads: usize, job: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| SimError::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

const KEEP_MESSAGES: usize = 5;

/// Runs `reps` replicates of one estimation cell on `threads` workers. The
/// summary depends only on the configuration and seed.
pub fn run_estimation(cfg: &SimConfig, reps: usize, threads: usize, refinement: Option<usize>) -> Result<EstimationSummary> {
    cfg.validate()?;
    let results: Vec<Result<[ArmEstimate; 4]>> = in_pool(threads, || {
        (0..reps as u64)
            .into_par_iter()
            .map(|r| estimation_replicate(cfg, r, refinement))
            .collect()
    })?;
    let mut ok = Vec::new();
    let mut failure_messages = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(v) => ok.push(v),
            Err(e) => {
                log::warn!("replicate {r} failed: {e}");
                if failure_messages.len() < KEEP_MESSAGES {
                    failure_messages.push(format!("replicate {r}: {e}"));
                }
            }
        }
    }
    let truth = cfg.beta1[0];
    let arms = Arm::ALL
        .iter()
        .enumerate()
        .map(|(k, &arm)| {
            let est: Vec<f64> = ok.iter().map(|v| v[k].estimate).collect();
            let se: Vec<f64> = ok.iter().map(|v| v[k].se).collect();
            let covered = ok
                .iter()
                .filter(|v| (v[k].estimate - truth).abs() <= Z975 * v[k].se)
                .count();
            ArmSummary {
                arm,
                mean: if est.is_empty() { f64::NAN } else { mean(&est) },
                mcse: sd(&est),
                aese: if se.is_empty() { f64::NAN } else { mean(&se) },
                coverage: covered as f64 / ok.len().max(1) as f64,
            }
        })
        .collect();
    Ok(EstimationSummary {
        config: cfg.clone(),
        replicates: reps,
        failures: reps - ok.len(),
        failure_messages,
        arms,
        degenerate: ok.len() < 2,
    })
}

/// Perturbation seed of replicate `r`.
pub fn gof_seed(seed: u64, r: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ r.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Overall additivity p-value for replicate `r` (IPCW fit of cause 1).
pub fn gof_replicate(cfg: &SimConfig, r: u64, draws: usize, refinement: Option<usize>) -> Result<f64> {
    let sim = generate_replicate(cfg, r)?;
    let rc = sim.right_censored();
    let grid = build_grid(&rc, refinement_for(refinement))?;
    let cm = fit_censoring_km(&rc)?;
    let fit = fit_with_censoring(&rc, 1, Mode::Ipcw, &grid, Some(&cm))?;
    let opts = GofOptions {
        draws,
        seed: gof_seed(cfg.seed, r),
        add_one: false,
        keep_draws: 0,
    };
    let (_, overall, _) = additivity_tests(&fit, rc.covariate_names(), &opts)?;
    Ok(overall.p_value)
}

#[derive(Debug, Clone, Serialize)]
pub struct RejectionSummary {
    pub config: SimConfig,
    pub replicates: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub draws: usize,
    /// Share of successful replicates with overall p-value below [`ALPHA`].
    pub rejection_rate: f64,
    pub p_values: Vec<f64>,
}

impl RejectionSummary {
    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / self.replicates.max(1) as f64
    }
}

pub fn run_rejection(
    cfg: &SimConfig,
    reps: usize,
    draws: usize,
    threads: usize,
    refinement: Option<usize>,
) -> Result<RejectionSummary> {
    cfg.validate()?;
    let results: Vec<Result<f64>> = in_pool(threads, || {
        (0..reps as u64)
            .into_par_iter()
            .map(|r| gof_replicate(cfg, r, draws, refinement))
            .collect()
    })?;
    let mut p_values = Vec::new();
    let mut failure_messages = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(p) => p_values.push(p),
            Err(e) => {
                log::warn!("replicate {r} failed: {e}");
                if failure_messages.len() < KEEP_MESSAGES {
                    failure_messages.push(format!("replicate {r}: {e}"));
                }
            }
        }
    }
    let rejected = p_values.iter().filter(|&&p| p < ALPHA).count();
    Ok(RejectionSummary {
        config: cfg.clone(),
        replicates: reps,
        failures: reps - p_values.len(),
        failure_messages,
        draws,
        rejection_rate: rejected as f64 / p_values.len().max(1) as f64,
        p_values,
    })
}
