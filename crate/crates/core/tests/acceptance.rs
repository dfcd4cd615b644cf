//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Tolerances and thresholds are pinned in the assertions.
//!
//! Run with `cargo test --test acceptance -- --nocapture`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use sober::bench::{self, Policy};
use sober::domain::EmpiricalMeasure;
use sober::gp::{fit_posterior, Dataset, GpPosterior, Kernel};
use sober::lifting::{feasibility, lfi_log_pi, ConstraintModel};
use sober::nystrom::{build_basis, CovarianceFn, FnKernel, NystromBasis};
use sober::quadrature::{
    self, mmd_squared, moment_gap, recombination_with_objective, select_batch, solve_lp,
    AcquisitionConfig, EpsPolicy, LpSettings, QuadratureRule, RewardKind,
};
use sober::solver::{self, SolverConfig, SolverMode};

fn pass(name: &str, detail: String) {
    println!("PASS {name}: {detail}");
}

fn rand_points<R: Rng>(rows: usize, dim: usize, lo: f64, hi: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, dim, |_, _| rng.gen_range(lo..hi))
}

fn random_measure<R: Rng>(
    rows: usize,
    dim: usize,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> EmpiricalMeasure {
    let pts = rand_points(rows, dim, lo, hi, rng);
    let raw = DVector::from_fn(rows, |_, _| rng.gen_range(0.05..1.0));
    EmpiricalMeasure::new(pts, raw.clone() / raw.sum()).unwrap()
}

fn toy_gp<R: Rng>(dim: usize, train: usize, lo: f64, hi: f64, rng: &mut R) -> GpPosterior {
    let x = rand_points(train, dim, lo, hi, rng);
    let y = DVector::from_fn(train, |i, _| {
        (3.0 * x[(i, 0)]).sin() + 0.5 * x.row(i).iter().sum::<f64>()
    });
    let kernel = Kernel::rbf_iso(dim, 0.3 * (hi - lo), 1.0).unwrap();
    fit_posterior(Dataset::new(x, y, 0.01).unwrap(), kernel, 0.0).unwrap()
}

/// MMD^2 of an arbitrary weighted subset against the measure, evaluated
/// independently of `QuadratureRule`.
fn subset_mmd2(
    kernel: &dyn CovarianceFn,
    measure: &EmpiricalMeasure,
    idx: &[usize],
    w: &[f64],
    mm_term: f64,
) -> f64 {
    let k = idx.len();
    let mut sub = DMatrix::zeros(k, measure.dim());
    for (r, &i) in idx.iter().enumerate() {
        sub.row_mut(r).copy_from(&measure.points().row(i));
    }
    let gram = kernel.cross(&sub, &sub).unwrap();
    let mut rr = 0.0;
    for a in 0..k {
        for b in 0..k {
            rr += w[a] * w[b] * gram[(a, b)];
        }
    }
    let cross = kernel.cross(&sub, measure.points()).unwrap();
    let mut rm = 0.0;
    for a in 0..k {
        for j in 0..measure.len() {
            rm += w[a] * measure.weights()[j] * cross[(a, j)];
        }
    }
    rr - 2.0 * rm + mm_term
}

fn measure_self_term(kernel: &dyn CovarianceFn, measure: &EmpiricalMeasure) -> f64 {
    let mut total = 0.0;
    let block = 1024;
    let mut start = 0;
    while start < measure.len() {
        let len = block.min(measure.len() - start);
        let rows = measure.points().rows(start, len).into_owned();
        let band = kernel.cross(&rows, measure.points()).unwrap();
        for a in 0..len {
            for j in 0..measure.len() {
                total += measure.weights()[start + a] * measure.weights()[j] * band[(a, j)];
            }
        }
        start += len;
    }
    total
}

#[test]
fn criterion_01_recombination_exactness() {
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    for case in 0..1000 {
        let n_pts = rng.gen_range(100..=2000);
        let batch = rng.gen_range(4..=64usize);
        let measure = random_measure(n_pts, 2, -1.0, 1.0, &mut rng);
        let mut moments = DMatrix::zeros(n_pts, batch - 1);
        for c in 0..batch - 1 {
            for r in 0..n_pts {
                moments[(r, c)] = rng.gen_range(-2.0..2.0);
            }
        }
        let rule = quadrature::recombination(&measure, &moments, batch).unwrap();
        assert!(rule.len() <= batch, "case {case}: support {}", rule.len());
        let total: f64 = rule.weights().sum();
        assert!((total - 1.0).abs() < 1e-10, "case {case}: mass {total}");
        assert!(rule.weights().iter().all(|w| *w > 0.0), "case {case}");
        let gap = moment_gap(&measure, &moments, &rule);
        assert!(gap < 1e-8, "case {case}: moment gap {gap}");
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "took {elapsed:.1} s");
    pass(
        "criterion-01",
        format!("1000 recombination instances exact in {elapsed:.1} s"),
    );
}

#[test]
fn criterion_02_quantisation_beats_random_subsets() {
    let started = Instant::now();
    let mut wins = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(200 + seed);
        let gp = toy_gp(2, 8, -1.0, 1.0, &mut rng);
        let pts = rand_points(2000, 2, -1.5, 1.5, &mut rng);
        let measure = EmpiricalMeasure::uniform(pts).unwrap();
        let basis = build_basis(&gp, &measure, 100, 31, seed).unwrap();
        let phi = basis.test_functions(measure.points()).unwrap();
        let resid = basis.residual_sqrt_diagonal(measure.points()).unwrap();
        let rule = recombination_with_objective(&measure, &phi, 32, Some(&resid)).unwrap();
        let rule_mmd2 = mmd_squared(&rule, &measure, &gp).unwrap();

        let mm = measure_self_term(&gp, &measure);
        let k = rule.len();
        let w = vec![1.0 / k as f64; k];
        let mut randoms = Vec::with_capacity(100);
        for _ in 0..100 {
            let mut idx: Vec<usize> = (0..measure.len()).collect();
            for i in 0..k {
                let j = rng.gen_range(i..idx.len());
                idx.swap(i, j);
            }
            idx.truncate(k);
            randoms.push(subset_mmd2(&gp, &measure, &idx, &w, mm).max(0.0));
        }
        randoms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = 0.5 * (randoms[49] + randoms[50]);
        if rule_mmd2 <= median {
            wins += 1;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "took {elapsed:.1} s");
    assert!(
        wins >= 48,
        "recombination beat the random-subset median in only {wins}/50 seeds"
    );
    pass(
        "criterion-02",
        format!("recombination below random-subset median in {wins}/50 seeds ({elapsed:.1} s)"),
    );
}

#[test]
fn criterion_03_nystrom_error_bound() {
    for case in 0..100u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(300 + case);
        let n_pts = rng.gen_range(50..=150);
        let batch = rng.gen_range(4..=10usize);
        let gp = toy_gp(2, 6, -1.0, 1.0, &mut rng);
        // Fully enumerated candidates: the empirical measure is the target.
        let measure = random_measure(n_pts, 2, -1.2, 1.2, &mut rng);
        let m = 40.min(n_pts);
        let basis = build_basis(&gp, &measure, m, batch - 1, case).unwrap();
        let phi = basis.test_functions(measure.points()).unwrap();
        let resid = basis.residual_sqrt_diagonal(measure.points()).unwrap();
        let rule = recombination_with_objective(&measure, &phi, batch, Some(&resid)).unwrap();
        let wce = mmd_squared(&rule, &measure, &gp).unwrap().sqrt();
        let weighted_resid: f64 = measure
            .weights()
            .iter()
            .zip(resid.iter())
            .map(|(w, r)| w * r)
            .sum();
        assert!(
            wce <= 2.0 * weighted_resid + 1e-6,
            "case {case}: wce {wce} > bound {}",
            2.0 * weighted_resid + 1e-6
        );
    }
    pass(
        "criterion-03",
        "wce <= 2 * weighted Nystrom residual + 1e-6 on 100 enumerated instances".into(),
    );
}

#[test]
fn criterion_04_constrained_lp_guarantees() {
    let draws = 10_000;
    for case in 0..20u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(400 + case);
        let gp = toy_gp(2, 7, -1.0, 1.0, &mut rng);
        let measure = random_measure(300, 2, -1.2, 1.2, &mut rng);

        // Constraint model: a GP fitted to a smooth signed function.
        let cx = rand_points(6, 2, -1.2, 1.2, &mut rng);
        let cy = DVector::from_fn(6, |i, _| 0.8 * (2.0 * cx[(i, 0)]).cos() + 0.2);
        let cgp = fit_posterior(
            Dataset::new(cx, cy, 0.05).unwrap(),
            Kernel::rbf_iso(2, 0.6, 0.5).unwrap(),
            0.0,
        )
        .unwrap();
        let models = ConstraintModel::new(vec![cgp]).unwrap();
        let q = feasibility(&models, measure.points()).unwrap();

        let batch = 8usize;
        let basis = build_basis(&gp, &measure, 60, batch - 2, case).unwrap();
        let phi = basis.test_functions(measure.points()).unwrap();
        let lam = basis.eigenvalues();
        let alpha = quadrature::reward(
            &gp,
            &AcquisitionConfig {
                reward: RewardKind::Ucb,
                beta: 2.0,
            },
            measure.points(),
        )
        .unwrap();
        let eps_lp = 0.05;
        let outcome = solve_lp(
            &measure,
            &phi,
            &lam,
            &alpha,
            Some(&q),
            &LpSettings::tolerance(eps_lp, batch),
        )
        .unwrap();
        let rule = &outcome.rule;

        let eps_vio = (1.0 - measure.weights().dot(&q)).clamp(0.0, 1.0);
        let resid = basis.residual_sqrt_diagonal(measure.points()).unwrap();
        let eps_nys = resid.iter().cloned().fold(0.0f64, f64::max);
        let k_max = gp
            .var_diag(measure.points())
            .unwrap()
            .iter()
            .cloned()
            .fold(0.0f64, f64::max)
            .sqrt();

        let alpha_rule: Vec<f64> = rule.indices().iter().map(|&i| alpha[i]).collect();
        let q_rule: Vec<f64> = rule.indices().iter().map(|&i| q[i]).collect();

        // Survival masks shared by both estimates.
        let mut masks: Vec<Vec<bool>> = Vec::with_capacity(draws);
        for _ in 0..draws {
            masks.push(q_rule.iter().map(|p| rng.gen::<f64>() < *p).collect());
        }

        // Eq. (lp-1): E[w~^T alpha(X~)] equals w^T [alpha .* q] on the rule
        // and dominates the candidate-measure value.
        let samples: Vec<f64> = masks
            .iter()
            .map(|mask| {
                rule.weights()
                    .iter()
                    .zip(alpha_rule.iter())
                    .zip(mask.iter())
                    .map(|((w, a), keep)| if *keep { w * a } else { 0.0 })
                    .sum()
            })
            .collect();
        let mc_mean: f64 = samples.iter().sum::<f64>() / draws as f64;
        let mc_se = {
            let var =
                samples.iter().map(|v| (v - mc_mean).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
            (var / draws as f64).sqrt()
        };
        let expected: f64 = rule
            .weights()
            .iter()
            .zip(alpha_rule.iter())
            .zip(q_rule.iter())
            .map(|((w, a), p)| w * a * p)
            .sum();
        assert!(
            (mc_mean - expected).abs() <= 3.0 * mc_se,
            "case {case}: lp-1 equality violated: {mc_mean} vs {expected} (se {mc_se})"
        );
        let candidate_value: f64 = (0..measure.len())
            .map(|i| measure.weights()[i] * alpha[i] * q[i])
            .sum();
        assert!(
            mc_mean >= candidate_value - 3.0 * mc_se,
            "case {case}: lp-1 lower bound violated"
        );

        // Eq. (lp-2): quadrature error bound for RKHS functions with
        // oracle-computed norms.
        for fidx in 0..20 {
            let anchors_idx: Vec<usize> = (0..5).map(|_| rng.gen_range(0..measure.len())).collect();
            let mut anchors = DMatrix::zeros(5, 2);
            for (r, &i) in anchors_idx.iter().enumerate() {
                anchors.row_mut(r).copy_from(&measure.points().row(i));
            }
            let a = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
            let gram = gp.cov(&anchors, &anchors).unwrap();
            let norm = (a.dot(&(&gram * &a))).max(0.0).sqrt();
            let fvals = gp.cov(measure.points(), &anchors).unwrap() * &a;

            let full: f64 = (0..measure.len())
                .map(|i| measure.weights()[i] * fvals[i])
                .sum();
            let f_rule: Vec<f64> = rule.indices().iter().map(|&i| fvals[i]).collect();
            let errs: Vec<f64> = masks
                .iter()
                .map(|mask| {
                    let partial: f64 = rule
                        .weights()
                        .iter()
                        .zip(f_rule.iter())
                        .zip(mask.iter())
                        .map(|((w, f), keep)| if *keep { w * f } else { 0.0 })
                        .sum();
                    (partial - full).abs()
                })
                .collect();
            let mc = errs.iter().sum::<f64>() / draws as f64;
            let se = {
                let var = errs.iter().map(|v| (v - mc).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
                (var / draws as f64).sqrt()
            };
            let bound = (eps_vio * k_max + 2.0 * eps_nys + rule.eps_lp()) * norm;
            assert!(
                mc <= bound + 3.0 * se,
                "case {case} f{fidx}: {mc} > bound {bound} (se {se})"
            );
        }
    }
    pass(
        "criterion-04",
        "lp-1 equality within 3 SE and lp-2 bound for 20 functions on 20 instances".into(),
    );
}

#[test]
fn criterion_05_misspecified_rkhs_bound() {
    for case in 0..50u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(500 + case);
        let factor = (0.25f64).ln() + rng.gen::<f64>() * ((4.0f64).ln() - (0.25f64).ln());
        let ell_mis = 0.4 * factor.exp();
        let kernel = FnKernel(move |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
                let d2 = (a.row(i) - b.row(j)).norm_squared();
                (-0.5 * d2 / (ell_mis * ell_mis)).exp()
            })
        });
        let measure = random_measure(250, 2, -1.0, 1.0, &mut rng);
        let basis = build_basis(&kernel, &measure, 50, 9, case).unwrap();
        let phi = basis.test_functions(measure.points()).unwrap();
        let resid = basis.residual_sqrt_diagonal(measure.points()).unwrap();
        let rule = recombination_with_objective(&measure, &phi, 10, Some(&resid)).unwrap();
        let wce = mmd_squared(&rule, &measure, &kernel).unwrap().sqrt();

        // f~ lives in the misspecified RKHS with an oracle norm; f adds a
        // bounded perturbation outside it.
        let mut anchors = DMatrix::zeros(6, 2);
        for r in 0..6 {
            let i = rng.gen_range(0..measure.len());
            anchors.row_mut(r).copy_from(&measure.points().row(i));
        }
        let a = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let gram = kernel.cross(&anchors, &anchors).unwrap();
        let norm = (a.dot(&(&gram * &a))).max(0.0).sqrt();
        let ftilde = kernel.cross(measure.points(), &anchors).unwrap() * &a;
        let perturb = DVector::from_fn(measure.len(), |i, _| {
            0.05 * (5.0 * measure.points()[(i, 0)]).sin() * (3.0 * measure.points()[(i, 1)]).cos()
        });
        let f = &ftilde + &perturb;

        let full: f64 = (0..measure.len())
            .map(|i| measure.weights()[i] * f[i])
            .sum();
        let reduced: f64 = rule
            .indices()
            .iter()
            .zip(rule.weights().iter())
            .map(|(&i, &w)| w * f[i])
            .sum();
        let sup = perturb.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        let bound = 2.0 * sup + norm * wce;
        assert!(
            (reduced - full).abs() <= bound + 1e-9,
            "case {case}: error {} > bound {bound} (factor {})",
            (reduced - full).abs(),
            factor.exp()
        );
    }
    pass(
        "criterion-05",
        "robustness bound held for lengthscale factors in [0.25, 4] on 50 instances".into(),
    );
}

fn regret_config() -> SolverConfig {
    SolverConfig {
        candidates: 2000,
        nystrom_samples: 250,
        batch_size: 30,
        max_iterations: 3,
        mle_restarts: 2,
        mle_max_iters: 60,
        ts_candidates: 512,
        ..SolverConfig::default()
    }
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[test]
fn criterion_06_regret_beats_baselines_on_branin() {
    let started = Instant::now();
    let config = regret_config();
    let mut finals = std::collections::HashMap::new();
    for policy in [Policy::SoberLfi, Policy::Random, Policy::BatchTsBaseline] {
        let mut regrets = Vec::new();
        for seed in 0..10 {
            let h = bench::run_single("branin", policy, &config, seed, 1e-6).unwrap();
            assert!(h.aborted.is_none());
            regrets.push(h.records.last().unwrap().simple_regret);
        }
        finals.insert(policy.name(), median_of(regrets));
    }
    let elapsed = started.elapsed().as_secs_f64();
    let lfi = finals["sober-lfi"];
    let random = finals["random"];
    let ts = finals["batch-ts-baseline"];
    assert!(elapsed < 600.0, "took {elapsed:.0} s");
    assert!(
        lfi < random && lfi < ts,
        "median final regret: lfi {lfi:.4}, random {random:.4}, batch-ts {ts:.4}"
    );
    pass(
        "criterion-06",
        format!(
            "median final regret lfi {lfi:.4} < random {random:.4} and batch-ts {ts:.4} ({elapsed:.0} s)"
        ),
    );
}

#[test]
fn criterion_07_adaptive_batch_sizes() {
    let ladder = [1e-4, 1e-3, 1e-2, 1e-1, 1e2];
    let mut sizes: Vec<Vec<f64>> = vec![Vec::new(); ladder.len()];
    let objective = bench::lookup("hartmann6").unwrap();
    for seed in 0..20u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(700 + seed);
        let x = rand_points(30, 6, 0.0, 1.0, &mut rng);
        let y = objective.evaluate(&x).unwrap();
        let gp = fit_posterior(
            Dataset::new(x, y, 1e-6).unwrap(),
            Kernel::rbf_iso(6, 0.25, 1.0).unwrap(),
            0.0,
        )
        .unwrap();
        let candidates = rand_points(1000, 6, 0.0, 1.0, &mut rng);
        let target = lfi_log_pi(&gp, gp.mean(gp.data().x()).unwrap().max());
        let logw = target.evaluate(&candidates).unwrap();
        let measure = EmpiricalMeasure::from_log_weights(candidates, &logw).unwrap();
        let basis = build_basis(&gp, &measure, 200, 98, seed).unwrap();
        let acq = AcquisitionConfig {
            reward: RewardKind::Ucb,
            beta: 2.0,
        };
        for (k, eps) in ladder.iter().enumerate() {
            let sel = select_batch(
                &gp,
                &measure,
                &basis,
                &acq,
                None,
                &LpSettings::tolerance(*eps, 100),
            )
            .unwrap();
            sizes[k].push(sel.rule.len() as f64);
        }
    }
    let medians: Vec<f64> = sizes.iter().map(|v| median_of(v.clone())).collect();
    for w in medians[..4].windows(2) {
        assert!(
            w[1] <= w[0] + 1e-12,
            "median batch sizes not non-increasing: {medians:?}"
        );
    }
    assert!(
        medians[4] <= 1.0 + 1e-12,
        "batch size did not converge to 1 at eps = 1e2: {medians:?}"
    );
    pass(
        "criterion-07",
        format!("median batch sizes across the tolerance ladder: {medians:?}"),
    );
}

#[test]
fn criterion_08_adaptive_safe_exploration() {
    let function_name = "branin-constrained";
    let mut diffs = Vec::new();
    for seed in 0..10u64 {
        let problem = bench::lookup("branin-constrained")
            .unwrap()
            .into_problem(1e-6);
        let config = SolverConfig {
            candidates: 1000,
            nystrom_samples: 128,
            batch_size: 20,
            max_iterations: 9,
            eps: EpsPolicy::Adaptive,
            mle_restarts: 2,
            mle_max_iters: 40,
            fit_prior_mean: true,
            acquisition: AcquisitionConfig {
                reward: RewardKind::Ucb,
                beta: 2.0,
            },
            seed,
            ..SolverConfig::default()
        };
        let history = solver::run(&problem, &config).unwrap();
        assert!(history.aborted.is_none());
        // The run may stop early once the measure collapses on the optimum.
        let len = history.records.len();
        assert!(len >= 6, "only {len} iterations recorded");
        for r in &history.records {
            let vio = r
                .violation_fraction
                .expect("constrained run logs violations");
            assert!((0.0..=1.0).contains(&vio));
            assert!((0.0..=1.0).contains(&r.eps_vio));
            // The adaptive policy ties the tolerance to the violation rate,
            // floored by the numerical slack.
            let expect = r.eps_vio.max(quadrature::EPS_LP_FLOOR);
            assert!(
                (r.eps_lp - expect).abs() <= 1e-12,
                "eps_lp {} != max(eps_vio, floor) {expect}",
                r.eps_lp
            );
        }
        // Violation fraction of a block of iterations, pooled over the
        // queries made in that block (late batches can be a single point,
        // so per-iteration fractions alone are too coarse).
        let pooled = |rs: &[solver::IterationRecord]| {
            let queries: f64 = rs.iter().map(|r| r.batch_size as f64).sum();
            let violated: f64 = rs
                .iter()
                .map(|r| r.violation_fraction.unwrap() * r.batch_size as f64)
                .sum();
            violated / queries
        };
        let third = (len / 3).max(1);
        let first = pooled(&history.records[0..third]);
        let last = pooled(&history.records[len - third..]);
        diffs.push(last - first);
    }
    let median_diff = median_of(diffs.clone());
    assert!(
        median_diff <= 0.0 + 1e-12,
        "{function_name}: violation fractions rose: median diff {median_diff:.4} ({diffs:?})",
    );
    pass(
        "criterion-08",
        format!("median (last-third - first-third) violation change {median_diff:.4}"),
    );
}

#[test]
fn criterion_09_misspecification_robustness() {
    let base = SolverConfig {
        candidates: 600,
        nystrom_samples: 96,
        batch_size: 5,
        max_iterations: 5,
        mle_restarts: 1,
        mle_max_iters: 40,
        ts_candidates: 256,
        ..SolverConfig::default()
    };
    let mut medians = std::collections::HashMap::new();
    for policy in [Policy::SoberLfi, Policy::BatchTsBaseline] {
        for noise in [0.0, 1.0] {
            let mut finals = Vec::new();
            for seed in 0..10 {
                let config = SolverConfig {
                    hyperparameter_noise: noise,
                    ..base.clone()
                };
                let h = bench::run_single("ackley2", policy, &config, seed, 1e-6).unwrap();
                finals.push(h.records.last().unwrap().simple_regret);
            }
            medians.insert((policy.name(), noise as i64), median_of(finals));
        }
    }
    let lfi_deg = medians[&("sober-lfi", 1)] - medians[&("sober-lfi", 0)];
    let ts_deg = medians[&("batch-ts-baseline", 1)] - medians[&("batch-ts-baseline", 0)];
    assert!(
        lfi_deg <= ts_deg,
        "regret degradation: lfi {lfi_deg:.4} > batch-ts {ts_deg:.4}"
    );
    pass(
        "criterion-09",
        format!("regret degradation under hyper-noise: lfi {lfi_deg:.4} <= batch-ts {ts_deg:.4}"),
    );
}

#[test]
fn criterion_10_select_batch_performance_envelope() {
    let mut rng = ChaCha12Rng::seed_from_u64(1000);
    let gp = toy_gp(6, 50, 0.0, 1.0, &mut rng);
    let measure = EmpiricalMeasure::uniform(rand_points(20_000, 6, 0.0, 1.0, &mut rng)).unwrap();
    let started = Instant::now();
    let basis: NystromBasis<'_> = build_basis(&gp, &measure, 500, 99, 1).unwrap();
    let sel = select_batch(
        &gp,
        &measure,
        &basis,
        &AcquisitionConfig::default(),
        None,
        &LpSettings::exact(100),
    )
    .unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    assert!(sel.rule.len() <= 100);
    assert!(sel.rule.moment_residual() < 1e-8);
    assert!(
        elapsed < 60.0,
        "select_batch at N=20000, M=500, n=100 took {elapsed:.1} s"
    );
    pass(
        "criterion-10",
        format!(
            "select_batch at N=20000, M=500, n=100 took {elapsed:.1} s; batch {} points",
            sel.rule.len()
        ),
    );
}

#[test]
fn criterion_11_bq_mode_variance_monotonicity() {
    for seed in 0..10u64 {
        let prior = sober::domain::DomainPrior::ContinuousUniform {
            lower: vec![-1.0],
            upper: vec![1.0],
        };
        let pool = prior.sample(200, 9000 + seed).unwrap();
        let mut problem = solver::Problem::new(prior, |pts: &DMatrix<f64>| {
            Ok(DVector::from_fn(pts.nrows(), |i, _| {
                let x = pts[(i, 0)];
                (3.0 * x).sin() + x * x
            }))
        });
        problem.pool = Some(pool);
        problem.noise_variance = 1e-6;
        let config = SolverConfig {
            candidates: 200,
            nystrom_samples: 100,
            batch_size: 12,
            max_iterations: 10,
            mode: SolverMode::Bq,
            refit_hyperparameters: false,
            seed,
            ..SolverConfig::default()
        };
        let history = solver::run(&problem, &config).unwrap();
        assert!(history.aborted.is_none());
        let vars: Vec<f64> = history.records.iter().map(|r| r.z_var).collect();
        for (t, w) in vars.windows(2).enumerate() {
            assert!(
                w[1] <= w[0] + 1e-8,
                "seed {seed}: z_var rose at iteration {}: {} -> {} ({vars:?})",
                t + 1,
                w[0],
                w[1]
            );
        }
    }
    pass(
        "criterion-11",
        "integral variance non-increasing over 10 iterations for 10 seeds".into(),
    );
}

/// Prop. 1 check at the orchestration level: the constrained `select_batch`
/// satisfies the expected-reward identity under survival sampling.
#[test]
fn select_batch_survival_reward_identity() {
    let mut rng = ChaCha12Rng::seed_from_u64(4242);
    let gp = toy_gp(2, 8, -1.0, 1.0, &mut rng);
    let measure = random_measure(400, 2, -1.2, 1.2, &mut rng);
    let cx = rand_points(5, 2, -1.2, 1.2, &mut rng);
    let cy = DVector::from_fn(5, |i, _| (2.0 * cx[(i, 1)]).sin() + 0.3);
    let cgp = fit_posterior(
        Dataset::new(cx, cy, 0.02).unwrap(),
        Kernel::rbf_iso(2, 0.7, 0.4).unwrap(),
        0.0,
    )
    .unwrap();
    let models = ConstraintModel::new(vec![cgp]).unwrap();
    let basis = build_basis(&gp, &measure, 80, 10, 5).unwrap();
    let acq = AcquisitionConfig {
        reward: RewardKind::Ucb,
        beta: 2.0,
    };
    let sel = select_batch(
        &gp,
        &measure,
        &basis,
        &acq,
        Some(&models),
        &LpSettings::adaptive(12),
    )
    .unwrap();
    let alpha = quadrature::reward(&gp, &acq, measure.points()).unwrap();
    let q = feasibility(&models, measure.points()).unwrap();
    let expected: f64 = sel
        .rule
        .indices()
        .iter()
        .zip(sel.rule.weights().iter())
        .map(|(&i, &w)| w * alpha[i] * q[i])
        .sum();
    let draws = 10_000;
    let mut samples = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut v = 0.0;
        for (&i, &w) in sel.rule.indices().iter().zip(sel.rule.weights().iter()) {
            if rng.gen::<f64>() < q[i] {
                v += w * alpha[i];
            }
        }
        samples.push(v);
    }
    let mc = samples.iter().sum::<f64>() / draws as f64;
    let se = {
        let var = samples.iter().map(|v| (v - mc).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
        (var / draws as f64).sqrt()
    };
    assert!(
        (mc - expected).abs() <= 3.0 * se,
        "{mc} vs {expected} (se {se})"
    );
    let candidate_value: f64 = (0..measure.len())
        .map(|i| measure.weights()[i] * alpha[i] * q[i])
        .sum();
    assert!(mc >= candidate_value - 3.0 * se);
}
