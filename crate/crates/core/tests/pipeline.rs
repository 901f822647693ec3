//! Structured pipeline against the dense oracle on random instances.

use reinsqp::gen::{model_from_seed, GenParams};
use reinsqp::pipeline::{frontier, frontier_csv, solve, solve_dense, SolveOptions};
use reinsqp::portfolio::{evaluate_constraints, variance_b, Form};
use reinsqp::{Error, Model, Portfolio};

fn feasible_models(n: usize) -> Vec<Model> {
    (0..200u64)
        .map(|s| model_from_seed(9000 + s, &GenParams::default()))
        .filter(|m| solve_dense(m, &SolveOptions::default()).is_ok())
        .take(n)
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

#[test]
fn min_variance_and_fixed_mean_match_oracle() {
    for m in feasible_models(12) {
        for form in [Form::MinVariance, Form::FixedMean] {
            let opts = SolveOptions { form, ..SolveOptions::default() };
            let d = match solve_dense(&m, &opts) {
                Ok(d) => d,
                Err(Error::Infeasible) => continue,
                Err(e) => panic!("{}", e),
            };
            let s = solve(&m, &opts).unwrap();
            assert!(s.report.kkt.converged, "{:?}", s.report.kkt);
            assert!(rel(s.report.variance, d.report.variance) <= 1e-6);
            let mut diff = s.eta.clone();
            diff.axpy(-1.0, &d.eta);
            assert!(m.tree.norm(&diff) <= 1e-5 * m.tree.norm(&d.eta).max(1.0));
        }
    }
}

#[test]
fn max_mean_matches_oracle() {
    for mut m in feasible_models(6) {
        let base = solve_dense(&m, &SolveOptions::default()).unwrap();
        m.config.sigma2 = Some(1.5 * base.report.variance + 1e-3);
        let opts = SolveOptions {
            form: Form::MaxMean,
            ..SolveOptions::default()
        };
        let d = solve_dense(&m, &opts).unwrap();
        let s = solve(&m, &opts).unwrap();
        assert!(d.report.mean >= base.report.mean - 1e-9);
        assert!(rel(s.report.mean, d.report.mean) <= 1e-6, "{} vs {}", s.report.mean, d.report.mean);
        assert!(s.report.variance <= m.config.sigma2.unwrap() * (1.0 + 1e-8));
    }
}

/// No feasible point sampled around the optimum has a smaller variance.
#[test]
fn optimum_not_beaten_by_feasible_perturbations() {
    for m in feasible_models(6) {
        let opt = solve_dense(&m, &SolveOptions::default()).unwrap();
        let base = opt.eta.to_flat();
        let mut tried = 0;
        for j in 0..200 {
            let flat: Vec<f64> = base
                .iter()
                .enumerate()
                .map(|(i, x)| (x + 0.05 * (((i * 31 + j * 17) % 13) as f64 / 6.0 - 1.0)).max(0.0) * (1.0 + 0.01 * (j % 3) as f64))
                .collect();
            let eta = Portfolio::from_flat(&m.tree, &flat).unwrap();
            if !evaluate_constraints(&m.tree, &m.book, &eta, &m.config).feasible_min_variance {
                continue;
            }
            tried += 1;
            assert!(variance_b(&m.tree, &m.book, &eta) >= opt.report.variance - 1e-9);
        }
        assert!(tried > 0);
    }
}

#[test]
fn frontier_variance_is_nondecreasing() {
    let m = &feasible_models(1)[0];
    let top = solve_dense(m, &SolveOptions::default()).unwrap().report.mean;
    let floors: Vec<f64> = (1..=8).map(|i| top * i as f64 / 4.0).collect();
    let pts = frontier(m, &SolveOptions::default(), &floors);
    let vars: Vec<f64> = pts.iter().filter_map(|p| p.variance).collect();
    assert!(vars.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{:?}", vars);
    let csv = frontier_csv(&pts);
    assert_eq!(csv.lines().count(), floors.len() + 1);
    assert!(csv.starts_with("e,variance,mean,feasible,converged"));
}
