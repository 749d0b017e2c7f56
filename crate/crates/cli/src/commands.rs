use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use addsub_core::censoring::fit_censoring_km;
use addsub_core::dataset::{build_grid, load_dataset, Schema};
use addsub_core::fitter::{fit_with_censoring, Mode};
use addsub_core::gof::{
    export_test_process, run_gof, CovariateSelector, GofOptions, GofReport, GofRequest, TestKind,
};
use addsub_core::variance::{sandwich, Clustering, SandwichParts};
use addsub_core::{Dataset, Fit};
use addsub_sim::harness::{
    censoring_rate, run_estimation, run_rejection, study_cells, CellFilter, EstimationSummary,
    RejectionSummary, Study, MAX_FAILURE_RATE, Z975,
};
use addsub_sim::{generate, CovariateSpec, Model, ProbabilityPolicy, SimConfig, SimError};
use serde::Serialize;
use thiserror::Error;

use crate::args::*;
use crate::manifest::RunManifest;
use crate::report::{document, num, Table};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] addsub_core::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Replication(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) | CliError::Sim(SimError::Core(e)) if e.is_numerical() => 3,
            CliError::Sim(SimError::RejectionBudgetExceeded | SimError::RootNotBracketed { .. }) => 3,
            CliError::Replication(_) => 4,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text).map_err(|e| io_err(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(io_err(Path::new("<stdout>"), e)),
                _ => Ok(()),
            }
        }
    }
}

pub struct Timer {
    start: Option<Instant>,
}

impl Timer {
    pub fn new(enabled: bool) -> Self {
        Timer {
            start: enabled.then(Instant::now),
        }
    }

    fn stamp(&self, m: &mut RunManifest) {
        m.wall_clock = self.start.map(|s| s.elapsed().as_secs_f64());
    }
}

struct Loaded {
    ds: Dataset,
    fit: Fit,
    sandwich: SandwichParts<f64>,
}

fn load_and_fit(data: &DataArgs, clustering: Clustering, manifest: &mut RunManifest) -> Result<Loaded> {
    let bytes = fs::read(&data.input).map_err(|e| io_err(&data.input, e))?;
    manifest.add_input(&data.input, &bytes);
    if !data.delimiter.is_ascii() {
        return Err(CliError::Usage("delimiter must be a single ASCII character".into()));
    }
    let schema = Schema {
        cluster: data.cluster_var.clone(),
        time: data.time_var.clone(),
        status: data.status_var.clone(),
        covariates: data.covariates.clone(),
        ctime: Some(data.ctime_var.clone()),
        n_causes: data.n_causes,
        time_varying: data.time_varying.clone(),
        delimiter: data.delimiter as u8,
    };
    let ds: Dataset = load_dataset(&bytes[..], &schema, data.tau)?;
    let grid = build_grid(&ds, data.quadrature)?;
    let (fit, sw) = match data.mode {
        ModeArg::Ipcw => {
            let cm = fit_censoring_km(&ds)?;
            let fit = fit_with_censoring(&ds, data.cause, Mode::Ipcw, &grid, Some(&cm))?;
            let sw = sandwich(&ds, &fit, Some(&cm), clustering)?;
            (fit, sw)
        }
        ModeArg::Cc => {
            let fit = fit_with_censoring(&ds, data.cause, Mode::Cc, &grid, None)?;
            let sw = sandwich(&ds, &fit, None, clustering)?;
            (fit, sw)
        }
    };
    Ok(Loaded { ds, fit, sandwich: sw })
}

#[derive(Serialize)]
struct Coefficient {
    name: String,
    estimate: f64,
    robust_se: f64,
    z: f64,
    ci_lower: f64,
    ci_upper: f64,
}

#[derive(Serialize)]
struct DataSummary {
    clusters: usize,
    subjects: usize,
    cause: u8,
    mode: String,
    tau: f64,
    events: usize,
    variance: VarianceArg,
}

#[derive(Serialize)]
struct FitReport {
    data: DataSummary,
    coefficients: Vec<Coefficient>,
    sigma: Vec<Vec<f64>>,
    baseline: Vec<(f64, f64)>,
}

fn coefficients(l: &Loaded) -> Vec<Coefficient> {
    l.ds
        .covariate_names()
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let b = l.fit.beta[k];
            let se = l.sandwich.se[k];
            Coefficient {
                name: name.clone(),
                estimate: b,
                robust_se: se,
                z: b / se,
                ci_lower: b - Z975 * se,
                ci_upper: b + Z975 * se,
            }
        })
        .collect()
}

fn data_summary(l: &Loaded, data: &DataArgs, variance: VarianceArg) -> DataSummary {
    DataSummary {
        clusters: l.ds.n_clusters(),
        subjects: l.ds.n_subjects(),
        cause: data.cause,
        mode: l.fit.mode.to_string(),
        tau: l.fit.tau,
        events: l.ds.events_before_tau(data.cause),
        variance,
    }
}

fn summary_text(s: &DataSummary) -> String {
    format!(
        "clusters {}, subjects {}, cause {}, mode {}, tau {}, cause-{} events {}, variance {}\n",
        s.clusters,
        s.subjects,
        s.cause,
        s.mode,
        s.tau,
        s.cause,
        s.events,
        match s.variance {
            VarianceArg::Cluster => "clustered",
            VarianceArg::Individual => "individual",
        }
    )
}

fn clustering(v: VarianceArg) -> Clustering {
    match v {
        VarianceArg::Cluster => Clustering::ByCluster,
        VarianceArg::Individual => Clustering::ByIndividual,
    }
}

pub fn fit(args: &FitArgs, timer: &Timer) -> Result<()> {
    let mut manifest = RunManifest::new("fit", args, None);
    let l = load_and_fit(&args.data, clustering(args.variance), &mut manifest)?;
    let report = FitReport {
        data: data_summary(&l, &args.data, args.variance),
        coefficients: coefficients(&l),
        sigma: l.sandwich.sigma.outer_iter().map(|r| r.to_vec()).collect(),
        baseline: l.fit.baseline_curve(),
    };

    let mut coef = Table::new(&["covariate", "estimate", "robust_se", "z", "ci_lower", "ci_upper"]);
    for c in &report.coefficients {
        coef.row(vec![c.name.clone(), num(c.estimate), num(c.robust_se), num(c.z), num(c.ci_lower), num(c.ci_upper)]);
    }
    let names = l.ds.covariate_names();
    let mut header = vec![""];
    header.extend(names.iter().map(|s| s.as_str()));
    let mut sigma = Table::new(&header);
    for (name, row) in names.iter().zip(&report.sigma) {
        let mut cells = vec![name.clone()];
        cells.extend(row.iter().map(|v| num(*v)));
        sigma.row(cells);
    }
    let mut base = Table::new(&["time", "baseline"]);
    for (t, v) in &report.baseline {
        base.row(vec![format!("{t:.6}"), format!("{v:.6}")]);
    }
    timer.stamp(&mut manifest);
    let text = document(
        "fit",
        &[
            (String::new(), summary_text(&report.data)),
            ("coefficients".into(), coef.render()),
            ("sigma (var(beta) = sigma / clusters)".into(), sigma.render()),
            ("baseline cumulative hazard".into(), base.render()),
        ],
        &manifest,
        &report,
    );
    emit(args.output.as_deref(), &text)
}

fn select_covariate(spec: &str, names: &[String]) -> Result<CovariateSelector> {
    if spec.eq_ignore_ascii_case("all") {
        return Ok(CovariateSelector::All);
    }
    if let Some(k) = names.iter().position(|n| n == spec) {
        return Ok(CovariateSelector::Index(k));
    }
    match spec.parse::<usize>() {
        Ok(k) if (1..=names.len()).contains(&k) => Ok(CovariateSelector::Index(k - 1)),
        _ => Err(CliError::Usage(format!(
            "unknown covariate `{spec}` (expected a name, a position in 1..={}, or `all`)",
            names.len()
        ))),
    }
}

#[derive(Serialize)]
struct GofDocument {
    data: DataSummary,
    coefficients: Vec<Coefficient>,
    tests: GofReport<f64>,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn gof(args: &GofArgs, timer: &Timer) -> Result<()> {
    let mut manifest = RunManifest::new("gof", args, Some(args.seed));
    let l = load_and_fit(&args.data, Clustering::ByCluster, &mut manifest)?;
    let names = l.ds.covariate_names().to_vec();
    let request = GofRequest {
        additivity: matches!(args.test, TestArg::Additivity | TestArg::All),
        functional_form: matches!(args.test, TestArg::FunctionalForm | TestArg::All),
        covariate: select_covariate(&args.covariate, &names)?,
    };
    let opts = GofOptions {
        draws: args.draws,
        seed: args.seed,
        add_one: args.pvalue_add_one,
        keep_draws: if args.export_processes.is_some() { args.plot_draws } else { 0 },
    };
    let tests = run_gof(&l.fit, &names, request, &opts)?;
    let doc = GofDocument {
        data: data_summary(&l, &args.data, VarianceArg::Cluster),
        coefficients: coefficients(&l),
        tests,
    };
    timer.stamp(&mut manifest);

    if let Some(dir) = &args.export_processes {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let line = manifest.to_json_line();
        for tp in &doc.tests.processes {
            let kind = match tp.kind {
                TestKind::ScoreAdditivity => "additivity",
                TestKind::FunctionalForm => "functional_form",
            };
            let path = dir.join(format!("{kind}_{}.csv", file_stem(&tp.name)));
            let mut buf = format!("# manifest {line}\n").into_bytes();
            export_test_process(tp, args.plot_draws, &mut buf)?;
            fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
        }
    }

    let mut sections = vec![(String::new(), summary_text(&doc.data))];
    if request.additivity {
        let mut t = Table::new(&["covariate", "estimate", "robust_se", "statistic", "p_value"]);
        for e in &doc.tests.additivity {
            let c = doc.coefficients.iter().find(|c| c.name == e.name);
            t.row(vec![
                e.name.clone(),
                c.map_or("--".into(), |c| num(c.estimate)),
                c.map_or("--".into(), |c| num(c.robust_se)),
                num(e.statistic),
                format!("{:.3}", e.p_value),
            ]);
        }
        if let Some(o) = &doc.tests.overall {
            t.row(vec!["Overall".into(), "--".into(), "--".into(), num(o.statistic), format!("{:.3}", o.p_value)]);
        }
        sections.push(("model fitting and additivity checks".into(), t.render()));
    }
    if request.functional_form {
        let mut t = Table::new(&["covariate", "statistic", "p_value"]);
        for e in &doc.tests.functional_form {
            t.row(vec![e.name.clone(), num(e.statistic), format!("{:.3}", e.p_value)]);
        }
        sections.push(("functional form".into(), t.render()));
    }
    sections.push((
        String::new(),
        format!(
            "{} perturbation draws, seed {}{}\n",
            doc.tests.draws,
            doc.tests.seed,
            if doc.tests.add_one { ", p = (1 + exceedances) / (B + 1)" } else { "" }
        ),
    ));
    let text = document("goodness of fit", &sections, &manifest, &doc);
    emit(args.output.as_deref(), &text)
}

fn sim_config(args: &SimulateArgs, manifest: &mut RunManifest) -> Result<SimConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
            manifest.add_input(path, &bytes);
            serde_json::from_slice(&bytes).map_err(|e| io_err(path, e))?
        }
        None => SimConfig::table1(100, 10, 0.7, 0.35, 0),
    };
    if let Some(v) = args.model {
        cfg.model = match v {
            ModelArg::M1 => Model::M1,
            ModelArg::M2 => Model::M2,
        };
    }
    if let Some(v) = args.n {
        cfg.n_clusters = v;
    }
    if let Some(v) = args.m {
        cfg.cluster_size = v;
    }
    if let Some(v) = args.rho {
        cfg.rho = v;
    }
    if let Some(v) = args.theta {
        cfg.theta = v;
    }
    if let Some(v) = &args.beta1 {
        cfg.beta1 = v.clone();
    }
    if let Some(v) = &args.beta2 {
        cfg.beta2 = v.clone();
    }
    if let Some(v) = args.gamma {
        cfg.gamma = v;
    }
    match args.covariates {
        Some(CovariatesArg::Uniform) => cfg.covariates = CovariateSpec::Uniform01,
        Some(CovariatesArg::NormalBernoulli) => cfg.covariates = CovariateSpec::NormalBernoulli,
        // two coefficients imply the two-covariate design
        None if args.config.is_none() && cfg.beta1.len() == 2 => cfg.covariates = CovariateSpec::NormalBernoulli,
        None => {}
    }
    if let Some(v) = args.policy {
        cfg.probability_policy = match v {
            PolicyArg::Clamp => ProbabilityPolicy::Clamp,
            PolicyArg::Reject => ProbabilityPolicy::Reject,
        };
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn simulate(args: &SimulateArgs, timer: &Timer) -> Result<()> {
    let mut manifest = RunManifest::new("simulate", args, None);
    let cfg = sim_config(args, &mut manifest)?;
    manifest.seed = Some(cfg.seed);
    let sim = generate(&cfg)?;
    timer.stamp(&mut manifest);
    let mut buf = format!(
        "# manifest {}\n# config {}\n",
        manifest.to_json_line(),
        serde_json::to_string(&cfg).expect("config serialises")
    )
    .into_bytes();
    sim.save(&mut buf, args.truth)?;
    let text = String::from_utf8(buf).expect("csv output is utf-8");
    emit(args.output.as_deref(), &text)
}

#[derive(Serialize)]
#[serde(untagged)]
enum CellResult {
    Estimation(EstimationSummary),
    Rejection(RejectionSummary),
}

impl CellResult {
    fn failure_rate(&self) -> f64 {
        match self {
            CellResult::Estimation(s) => s.failure_rate(),
            CellResult::Rejection(s) => s.failure_rate(),
        }
    }

    fn config(&self) -> &SimConfig {
        match self {
            CellResult::Estimation(s) => &s.config,
            CellResult::Rejection(s) => &s.config,
        }
    }
}

#[derive(Serialize)]
struct ReplicateDocument {
    study: Study,
    reps: usize,
    cells: Vec<CellResult>,
}

fn censoring_percent(gamma: f64) -> String {
    [20, 40, 60]
        .into_iter()
        .find(|&p| censoring_rate(p) == Some(gamma))
        .map_or_else(|| format!("gamma={gamma}"), |p| format!("{p}%"))
}

fn model_name(m: Model) -> &'static str {
    match m {
        Model::M1 => "M1",
        Model::M2 => "M2",
    }
}

pub fn default_parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn replicate(args: &ReplicateArgs, timer: &Timer) -> Result<()> {
    let manifest_seed = Some(args.seed);
    let mut manifest = RunManifest::new("replicate", args, manifest_seed);
    if args.reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    let threads = args.parallel.unwrap_or_else(default_parallelism);
    if threads == 0 {
        return Err(CliError::Usage("--parallel must be at least 1".into()));
    }
    if let Some(p) = args.censoring {
        if censoring_rate(p).is_none() {
            return Err(CliError::Usage(format!("--censoring must be 20, 40 or 60, got {p}")));
        }
    }
    let study = match args.study {
        StudyArg::Table1 => Study::Table1,
        StudyArg::Table2 => Study::Table2,
        StudyArg::Table3 => Study::Table3,
    };
    let filter = CellFilter {
        n_clusters: args.n,
        cluster_size: args.m,
        theta: args.theta,
        censoring_percent: args.censoring,
        model: args.model.map(|m| match m {
            ModelArg::M1 => Model::M1,
            ModelArg::M2 => Model::M2,
        }),
    };
    let configs = study_cells(study, args.seed, &filter);
    if configs.is_empty() {
        return Err(CliError::Usage("no study cell matches the given filters".into()));
    }
    let mut cells = Vec::with_capacity(configs.len());
    for cfg in &configs {
        log::info!("cell n={} m={} theta={} gamma={}", cfg.n_clusters, cfg.cluster_size, cfg.theta, cfg.gamma);
        let cell = match study {
            Study::Table1 | Study::Table2 => {
                CellResult::Estimation(run_estimation(cfg, args.reps, threads, args.quadrature)?)
            }
            Study::Table3 => {
                CellResult::Rejection(run_rejection(cfg, args.reps, args.draws, threads, args.quadrature)?)
            }
        };
        cells.push(cell);
    }
    timer.stamp(&mut manifest);

    let mut sections = Vec::new();
    let mut notes = String::new();
    match study {
        Study::Table1 | Study::Table2 => {
            let mut t = Table::new(&["n", "m", "theta", "arm", "mean", "mcse", "aese", "coverage", "failures"]);
            for c in &cells {
                let CellResult::Estimation(s) = c else { unreachable!() };
                for a in &s.arms {
                    t.row(vec![
                        s.config.n_clusters.to_string(),
                        s.config.cluster_size.to_string(),
                        s.config.theta.to_string(),
                        a.arm.to_string(),
                        num(a.mean),
                        a.mcse.map_or("NA".into(), num),
                        num(a.aese),
                        format!("{:.1}%", 100.0 * a.coverage),
                        s.failures.to_string(),
                    ]);
                }
                if s.degenerate {
                    notes.push_str(&format!(
                        "n={} m={} theta={}: fewer than two successful replicates, MCSE undefined\n",
                        s.config.n_clusters, s.config.cluster_size, s.config.theta
                    ));
                }
            }
            sections.push((format!("{} replicates per cell, censoring {}", args.reps, censoring_percent(configs[0].gamma)), t.render()));
        }
        Study::Table3 => {
            let mut t = Table::new(&["n", "censoring", "theta", "model", "rejection_rate", "failures"]);
            for c in &cells {
                let CellResult::Rejection(s) = c else { unreachable!() };
                t.row(vec![
                    s.config.n_clusters.to_string(),
                    censoring_percent(s.config.gamma),
                    s.config.theta.to_string(),
                    model_name(s.config.model).into(),
                    format!("{:.3}", s.rejection_rate),
                    s.failures.to_string(),
                ]);
            }
            sections.push((
                format!("{} replicates per cell, {} draws, level 0.05", args.reps, args.draws),
                t.render(),
            ));
        }
    }
    let mut bad = 0;
    for c in cells.iter().filter(|c| c.failure_rate() > MAX_FAILURE_RATE) {
        bad += 1;
        let cfg = c.config();
        notes.push_str(&format!(
            "n={} m={} theta={} gamma={}: {:.1}% of replicates failed\n",
            cfg.n_clusters,
            cfg.cluster_size,
            cfg.theta,
            cfg.gamma,
            100.0 * c.failure_rate()
        ));
    }
    if !notes.is_empty() {
        sections.push(("notes".into(), notes));
    }
    let doc = ReplicateDocument {
        study,
        reps: args.reps,
        cells,
    };
    let text = document("replicate", &sections, &manifest, &doc);
    emit(args.output.as_deref(), &text)?;
    if bad > 0 {
        return Err(CliError::Replication(format!(
            "{bad} cell(s) exceeded the {:.0}% replicate failure limit",
            100.0 * MAX_FAILURE_RATE
        )));
    }
    Ok(())
}
