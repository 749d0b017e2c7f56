mod support;

use addsub_core::gof::{
    cluster_influence, form_process, functional_form_test, perturb, run_gof, score_process,
    CovariateSelector, FChoice, GofOptions, GofRequest,
};
use addsub_core::{build_grid, fit_censoring_km, fit_with_censoring, Error, FitResult, Mode};
use support::oracle::{micro_instance, MicroSpec};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn fitted(seed: u64, mode: Mode) -> Option<(addsub_core::Dataset, FitResult<f64>)> {
    let spec = MicroSpec {
        ctime: mode == Mode::Cc,
        ..MicroSpec::default()
    };
    let ds = micro_instance(seed, spec)?;
    let grid = build_grid(&ds, 4).ok()?;
    let cm = fit_censoring_km(&ds).ok();
    if mode == Mode::Ipcw && cm.is_none() {
        return None;
    }
    let fit = fit_with_censoring(&ds, 1, mode, &grid, cm.as_ref()).ok()?;
    Some((ds, fit))
}

#[test]
fn score_process_matches_dense_influence() {
    let mut used = 0;
    for mode in [Mode::Ipcw, Mode::Cc] {
        for seed in 0..120 {
            let Some((_, fit)) = fitted(seed, mode) else { continue };
            let sp = score_process(&fit);
            let p = fit.beta.len();
            let inf = vec![f64::INFINITY; p];
            for (k, (&t, &left)) in sp.times.iter().zip(&sp.left_limit).enumerate() {
                let probe = if left { t - 1e-9 } else { t };
                let dense = cluster_influence(&fit, probe, &inf, FChoice::Identity).unwrap();
                let tol = if left { 1e-6 } else { 1e-9 };
                for i in 0..dense.nrows() {
                    for l in 0..p {
                        let fast = sp.q[[i, k * p + l]];
                        assert!(
                            close(fast, dense[[i, l]], tol),
                            "{mode} seed {seed} point {k} cluster {i}: {fast} vs {}",
                            dense[[i, l]]
                        );
                    }
                }
                // column sums of Phi reproduce the estimating function
                if !left {
                    let u = fit.score(fit.beta.view(), t);
                    for l in 0..p {
                        let s: f64 = (0..sp.phi.nrows()).map(|i| sp.phi[[i, k * p + l]]).sum();
                        assert!((s - u[l]).abs() < 1e-9, "{mode} seed {seed} U at {t}");
                    }
                }
            }
            used += 1;
        }
    }
    assert!(used > 100, "only {used} usable instances");
}

#[test]
fn form_process_matches_dense_influence() {
    let mut used = 0;
    for mode in [Mode::Ipcw, Mode::Cc] {
        for seed in 0..120 {
            let Some((_, fit)) = fitted(seed, mode) else { continue };
            let p = fit.beta.len();
            for l in 0..p {
                let fp = match form_process(&fit, l) {
                    Ok(fp) => fp,
                    Err(Error::DegenerateCovariate { .. }) => continue,
                    Err(e) => panic!("{e}"),
                };
                let tau = fit.tau;
                for (k, &x) in fp.thresholds.iter().enumerate() {
                    let mut th = vec![f64::INFINITY; p];
                    th[l] = x;
                    let dense = cluster_influence(&fit, tau, &th, FChoice::One).unwrap();
                    for i in 0..dense.nrows() {
                        assert!(
                            close(fp.q[[i, k]], dense[[i, 0]], 1e-9),
                            "{mode} seed {seed} cov {l} threshold {x} cluster {i}: {} vs {}",
                            fp.q[[i, k]],
                            dense[[i, 0]]
                        );
                    }
                }
                // the residuals sum to zero over the whole sample
                let last = *fp.observed.last().unwrap();
                assert!(last.abs() < 1e-10, "{mode} seed {seed}: W(tau, inf) = {last}");
                let nt = fp.thresholds.len();
                assert!(fp.q.column(nt - 1).iter().all(|v| v.abs() < 1e-10));
                used += 1;
            }
        }
    }
    assert!(used > 60, "only {used} usable covariates");
}

#[test]
fn identity_influence_at_tau_is_sandwich_eta() {
    for seed in 0..40 {
        let Some((_, fit)) = fitted(seed, Mode::Ipcw) else { continue };
        let p = fit.beta.len();
        let sp = score_process(&fit);
        let q = cluster_influence(&fit, fit.tau, &vec![f64::INFINITY; p], FChoice::Identity).unwrap();
        // at tau the correction cancels Phi(tau) entirely
        assert!(q.iter().all(|v| v.abs() < 1e-10), "seed {seed}");
        let last = sp.times.len() - 1;
        for i in 0..q.nrows() {
            for l in 0..p {
                assert!(sp.q[[i, last * p + l]].abs() < 1e-10);
            }
        }
    }
}

#[test]
fn gof_is_deterministic_and_bounded() {
    let (_, fit) = (0..50).find_map(|s| fitted(s, Mode::Ipcw)).unwrap();
    let names: Vec<String> = (0..fit.beta.len()).map(|l| format!("x{l}")).collect();
    let opts = GofOptions {
        draws: 200,
        seed: 11,
        add_one: false,
        keep_draws: 5,
    };
    let req = GofRequest {
        additivity: true,
        functional_form: true,
        covariate: CovariateSelector::All,
    };
    let a = run_gof(&fit, &names, req, &opts).unwrap();
    let b = run_gof(&fit, &names, req, &opts).unwrap();
    for (x, y) in a.additivity.iter().zip(&b.additivity) {
        assert_eq!(x.p_value, y.p_value);
        assert_eq!(x.statistic, y.statistic);
        assert!((0.0..=1.0).contains(&x.p_value));
    }
    assert!(a.overall.is_some());
    assert!(a.processes.iter().all(|p| p.perturbed.nrows() == 5));
    let plus = run_gof(&fit, &names, req, &GofOptions { add_one: true, ..opts }).unwrap();
    for (x, y) in a.additivity.iter().zip(&plus.additivity) {
        let exceed = (x.p_value * 200.0).round();
        assert!(close(y.p_value, (exceed + 1.0) / 201.0, 1e-12));
    }
    let too_few = GofOptions { draws: 50, ..opts };
    assert!(matches!(run_gof(&fit, &names, req, &too_few), Err(Error::InvalidArgument(_))));
}

#[test]
fn perturbation_is_linear_in_q() {
    let (_, fit) = (0..50).find_map(|s| fitted(s, Mode::Ipcw)).unwrap();
    let sp = score_process(&fit);
    let w1 = perturb(sp.q.view(), 10, 3);
    let doubled = sp.q.mapv(|v| 2.0 * v);
    let w2 = perturb(doubled.view(), 10, 3);
    for (a, b) in w1.iter().zip(w2.iter()) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn binary_covariate_has_two_thresholds() {
    for seed in 0..30 {
        let Some((ds, fit)) = fitted(seed, Mode::Ipcw) else { continue };
        let distinct: std::collections::BTreeSet<u64> =
            ds.subjects().iter().map(|r| r.covariates[0].to_bits()).collect();
        match form_process(&fit, 0) {
            Ok(fp) => {
                assert_eq!(fp.thresholds.len(), distinct.len());
                assert!(fp.thresholds.windows(2).all(|w| w[0] < w[1]));
            }
            Err(Error::DegenerateCovariate { index }) => {
                assert_eq!(index, 0);
                assert!(distinct.len() < 2);
            }
            Err(e) => panic!("{e}"),
        }
        let r = functional_form_test(&fit, 0, "x0", &GofOptions::default());
        assert!(r.is_ok() || distinct.len() < 2);
    }
}
