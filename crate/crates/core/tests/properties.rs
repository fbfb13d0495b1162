use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use transpca::appkit::portfolio::min_variance_weights;
use transpca::appkit::rolling::{rolling_validation, FitMethod, FitPlan, PlanOptions};
use transpca::estimate::{default_r_max, er_num_factors, PanelDataset, PanelRole};
use transpca::linalg::{
    leading_eigenvectors, projection, subspace_distance, trace_overlap, OrthonormalBasis, SymmetricMatrix,
};
use transpca::select::{rectified_objective, select_with_bases, SelectionConfig};
use transpca::simgen::{generate_world, replication_rng, ScenarioConfig};
use transpca::transfer::{ed_from_eigenvalues, panel_basis, source_bases, trans_ed, weighted_projection, PanelBasis, TargetFit};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn random_basis(n: usize, m: usize, rng: &mut ChaCha8Rng) -> OrthonormalBasis {
    OrthonormalBasis::from_qr(gaussian(n, m, rng)).unwrap()
}

fn random_rotation(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian(m, m, rng).qr().q()
}

/// Smallest index (1-based) attaining the maximum of `score(j)` over `1..=jmax`.
fn brute_argmax(jmax: usize, score: impl Fn(usize) -> f64) -> usize {
    let scores: Vec<f64> = (1..=jmax).map(score).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    scores.iter().position(|&v| v == max).unwrap() + 1
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn qr_bases_are_orthonormal(seed in any::<u64>(), n in 2usize..30, frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 1 + ((n - 1) as f64 * frac) as usize;
        let q = random_basis(n, m, &mut rng);
        prop_assert!(q.orthonormality_error() <= 1e-10);
    }

    #[test]
    fn projections_are_idempotent(seed in any::<u64>(), n in 2usize..30, frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 1 + ((n - 1) as f64 * frac) as usize;
        let p = projection(&random_basis(n, m, &mut rng)).into_inner();
        prop_assert!((&p * &p - &p).amax() <= 1e-9);
        prop_assert!((p.trace() - m as f64).abs() <= 1e-9);
    }

    #[test]
    fn subspace_distance_is_bounded_and_rotation_invariant(
        seed in any::<u64>(),
        n in 3usize..25,
        m1 in 1usize..4,
        m2 in 1usize..4,
    ) {
        prop_assume!(m1 < n && m2 < n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_basis(n, m1, &mut rng);
        let b = random_basis(n, m2, &mut rng);
        let d = subspace_distance(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        let ra = OrthonormalBasis::new(a.matrix() * random_rotation(m1, &mut rng)).unwrap();
        let rb = OrthonormalBasis::new(b.matrix() * random_rotation(m2, &mut rng)).unwrap();
        prop_assert!((subspace_distance(&ra, &rb).unwrap() - d).abs() <= 1e-7);
        let back = subspace_distance(&b, &a).unwrap();
        prop_assert!((back * back - d * d).abs() <= 1e-12);
        prop_assert!(subspace_distance(&a, &ra).unwrap() <= 1e-6);
    }

    #[test]
    fn weighted_projection_spectrum_lies_in_unit_interval(
        seed in any::<u64>(),
        n in 3usize..20,
        k in 1usize..5,
        r in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let panels: Vec<PanelBasis> = (0..k)
            .map(|i| PanelBasis {
                id: format!("p{i}"),
                basis: random_basis(n, r.min(n - 1), &mut rng),
                periods: 10 + 7 * i,
            })
            .collect();
        let wp = weighted_projection(panels.iter()).unwrap();
        for v in &wp.eigen.values {
            prop_assert!(*v >= -1e-12 && *v <= 1.0 + 1e-12);
        }
        prop_assert!((wp.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn er_matches_brute_force(values in prop::collection::vec(1e-3f64..1e3, 2..=20), frac in 0.0f64..1.0) {
        let sorted = sorted_desc(values.clone());
        let r_max = 1 + ((sorted.len() - 2) as f64 * frac) as usize;
        let expected = brute_argmax(r_max, |j| sorted[j - 1] / sorted[j]);
        // unsorted diagonal: the eigen-solver has to find the order itself
        let s = SymmetricMatrix::from_diagonal(&values).unwrap();
        prop_assert_eq!(er_num_factors(&s, r_max).unwrap(), expected);
    }

    #[test]
    fn er_is_scale_invariant(values in prop::collection::vec(1e-2f64..1e2, 3..=12), c in 1e-3f64..1e3) {
        let s = SymmetricMatrix::from_diagonal(&values).unwrap();
        let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
        let t = SymmetricMatrix::from_diagonal(&scaled).unwrap();
        let r_max = values.len() - 1;
        prop_assert_eq!(er_num_factors(&s, r_max).unwrap(), er_num_factors(&t, r_max).unwrap());
    }

    #[test]
    fn ed_matches_brute_force(values in prop::collection::vec(0.0f64..1.0, 2..=20), frac in 0.0f64..1.0) {
        let sorted = sorted_desc(values);
        let s_max = 1 + ((sorted.len() - 2) as f64 * frac) as usize;
        let expected = brute_argmax(s_max, |j| sorted[j - 1] - sorted[j]);
        prop_assert_eq!(ed_from_eigenvalues(&sorted, s_max).unwrap(), expected);
    }

    #[test]
    fn trans_ed_matches_brute_force_on_projections(seed in any::<u64>(), n in 4usize..16, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let panels: Vec<PanelBasis> = (0..k)
            .map(|i| PanelBasis { id: format!("p{i}"), basis: random_basis(n, 2, &mut rng), periods: 5 + i })
            .collect();
        let wp = weighted_projection(panels.iter()).unwrap();
        let total: usize = panels.iter().map(|p| p.periods).sum();
        let mut p = DMatrix::zeros(n, n);
        for b in &panels {
            p += b.basis.matrix() * b.basis.matrix().transpose() * (b.periods as f64 / total as f64);
        }
        let ev = sorted_desc(SymmetricEigen::new(p).eigenvalues.iter().copied().collect());
        let s_max = n - 1;
        let expected = brute_argmax(s_max, |j| ev[j - 1] - ev[j]);
        // near-ties between the two routes are not meaningful
        let gaps: Vec<f64> = (1..=s_max).map(|j| ev[j - 1] - ev[j]).collect();
        let best = gaps[expected - 1];
        prop_assume!(gaps.iter().enumerate().all(|(i, g)| i + 1 == expected || best - g > 1e-9));
        prop_assert_eq!(trans_ed(&wp, s_max).unwrap(), expected);
    }

    #[test]
    fn min_variance_weights_beat_random_portfolios(seed in any::<u64>(), n in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(n, n + 3, &mut rng);
        let sigma = SymmetricMatrix::new(&a * a.transpose() / (n + 3) as f64 + DMatrix::identity(n, n) * 0.05).unwrap();
        let w = min_variance_weights(&sigma).unwrap();
        prop_assert!((w.sum() - 1.0).abs() <= 1e-10);
        let var = |v: &DVector<f64>| (v.transpose() * sigma.as_matrix() * v)[(0, 0)];
        let best = var(&w);
        for _ in 0..100 {
            let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let v = DVector::from_element(n, 1.0 / n as f64) + &z - DVector::from_element(n, z.mean());
            prop_assert!((v.sum() - 1.0).abs() <= 1e-10);
            prop_assert!(best <= var(&v) + 1e-12);
        }
    }

    #[test]
    fn rolling_validation_matches_a_naive_loop(seed in any::<u64>(), r0 in 1usize..3, bandwidth in 4usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(10, 5, &mut rng);
        let target = PanelDataset::new("t", PanelRole::Target, x.clone()).unwrap();
        let plan = FitPlan::new(&target, &[], &[], FitMethod::TargetOnly, r0, 0, &PlanOptions::default()).unwrap();
        let report = rolling_validation(&target, &plan, bandwidth).unwrap();

        let mut errors = Vec::new();
        for t in bandwidth..10 {
            let w = x.rows(t - bandwidth, bandwidth).into_owned();
            let eig = SymmetricEigen::new(w.transpose() * &w / bandwidth as f64);
            let mut order: Vec<usize> = (0..5).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
            let lam = DMatrix::from_fn(5, r0, |i, j| eig.eigenvectors[(i, order[j])]);
            let xt = x.row(t).transpose();
            let f = (lam.transpose() * &lam).try_inverse().unwrap() * lam.transpose() * &xt;
            errors.push((&xt - &lam * f).norm_squared() / 5.0);
        }
        let naive = errors.iter().sum::<f64>() / errors.len() as f64;
        prop_assert_eq!(report.errors.len(), errors.len());
        for (a, b) in report.errors.iter().zip(&errors) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        prop_assert!((report.mse - naive).abs() <= 1e-9 * (1.0 + naive));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn selection_objective_never_decreases(seed in any::<u64>(), tau in 0.0f64..2.0, random_start in any::<bool>()) {
        let mut cfg = ScenarioConfig::new(4, 20, 30, 60);
        cfg.scenario = transpca::simgen::Scenario::HalfInformative;
        let mut rng = replication_rng(seed, 0);
        let world = generate_world(&cfg, &mut rng).unwrap();
        let fit = TargetFit::new(&world.target).unwrap();
        let tb = PanelBasis { id: "target".into(), basis: fit.basis(3).unwrap(), periods: 30 };
        let sources = source_bases(&world.sources, &[4; 4]).unwrap();
        let fallback = fit.weak_block(3, 2).unwrap();
        let mut sc = SelectionConfig::new(tau, 2);
        if random_start {
            sc.init_basis = Some(random_basis(20, 2, &mut rng));
        }
        let res = select_with_bases(&tb, &sources, &fallback, &sc).unwrap();
        for w in res.objective_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-10 * w[0].abs().max(1.0));
        }
        if !res.empty_fallback {
            let at_end = rectified_objective(&res.weak_basis, &tb, &sources, tau).unwrap();
            prop_assert!((at_end - res.objective_trace.last().unwrap()).abs() <= 1e-9);
        }
    }
}

#[test]
fn leading_eigenvectors_span_the_planted_space() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = random_basis(12, 3, &mut rng);
    let s = SymmetricMatrix::new(q.matrix() * DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 3.0, 2.0])) * q.matrix().transpose()).unwrap();
    let lead = leading_eigenvectors(&s, 3).unwrap();
    assert!((trace_overlap(&lead.basis, &q).unwrap() - 3.0).abs() < 1e-10);
}

#[test]
fn eigenvalue_ratio_recovers_three_factors_when_strong_enough() {
    let mut cfg = ScenarioConfig::new(4, 100, 100, 200);
    cfg.alphas = vec![0.8, 0.75];
    let mut hits = 0;
    let runs = 200;
    for i in 0..runs {
        let world = generate_world(&cfg, &mut replication_rng(7, i)).unwrap();
        let r = er_num_factors(&world.target.covariance(), default_r_max(100, 100)).unwrap();
        hits += usize::from(r == 3);
    }
    assert!(hits as f64 >= 0.95 * runs as f64, "r0 recovered in {hits}/{runs} runs");
}

#[test]
fn exact_shared_space_gives_the_weak_count() {
    let mut cfg = ScenarioConfig::new(4, 60, 80, 200);
    cfg.epsilon = 0.0;
    let world = generate_world(&cfg, &mut replication_rng(3, 0)).unwrap();
    let tb = panel_basis(&world.target, 3).unwrap();
    let sources = source_bases(&world.sources, &[4; 4]).unwrap();
    let wp = weighted_projection(std::iter::once(&tb).chain(sources.iter())).unwrap();
    assert_eq!(trans_ed(&wp, 3).unwrap(), 2);
}
