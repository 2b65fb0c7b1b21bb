#![allow(clippy::needless_range_loop)]

mod common;

use common::{random_mdp, random_policy, rel_close, rng};
use fqe_core::approx::{random_params, Approximator, Family, FeatureMap, ParamVector};
use fqe_core::experiments::{canonical_a, canonical_b, default_model};
use fqe_core::fqe::{run_fqe, FqeConfig};
use fqe_core::inference::{
    average_leverage, bound_reward_free, bound_variance_aware, check_positivity, cross_covariance, empirical_c2,
    estimate_components, linear_sigma2, plug_in_sigma2, population_components, population_thetas,
    residual_epsilon, restricted_chi2, tabular_chi2, tabular_mis_variance, tabular_mis_variance_empirical,
    tabular_true_thetas, NuMode, VarianceComponents,
};
use fqe_core::mdp::{generate_dataset, occupancy_measures, Dataset, Policy, TabularMdp, Trajectory};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

struct Fit {
    mdp: TabularMdp<f64>,
    target: Policy<f64>,
    data: Dataset<f64>,
    fmap: FeatureMap<f64>,
    approx: Approximator,
    thetas: Vec<ParamVector<f64>>,
}

impl Fit {
    fn components(&self) -> VarianceComponents<f64> {
        estimate_components(&self.data, &self.approx, &self.fmap, &self.target, &self.thetas, NuMode::ExactMdp(&self.mdp))
            .unwrap()
    }
}

fn fit(seed: u64, k: usize, horizon: usize, fmap: FeatureMap<f64>, approx: Approximator) -> Fit {
    let (ns, na) = (fmap.n_states(), fmap.n_actions());
    let mdp = random_mdp(seed, ns, na, horizon);
    let behavior = Policy::uniform(ns, na);
    let target = random_policy(seed + 1, ns, na);
    let data = generate_dataset(&mdp, &behavior, k, seed + 2).unwrap();
    let est = run_fqe(&data, &target, mdp.initial_dist(), &approx, &fmap, &FqeConfig::default(), None).unwrap();
    Fit { mdp, target, data, fmap, approx, thetas: est.thetas }
}

fn linear_fit(seed: u64, k: usize, horizon: usize, d: usize) -> Fit {
    let fmap = FeatureMap::random_linear(4, 3, d, seed).unwrap();
    fit(seed, k, horizon, fmap, Approximator::linear(d))
}

fn tabular_fit(seed: u64, k: usize, horizon: usize) -> Fit {
    fit(seed, k, horizon, FeatureMap::one_hot(3, 2), Approximator::tabular(6))
}

fn to_na(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

fn feature_gram(f: &Fit) -> Array2<f64> {
    let d = f.fmap.dim();
    let mut g = Array2::zeros((d, d));
    for t in f.data.transitions() {
        let phi = f.fmap.phi(t.s, t.a);
        for i in 0..d {
            for j in 0..d {
                g[[i, j]] += phi[i] * phi[j];
            }
        }
    }
    g / f.data.n_transitions() as f64
}

fn target_feature_means(f: &Fit) -> Vec<DVector<f64>> {
    let occ = occupancy_measures(&f.mdp, &f.target).unwrap();
    occ.per_step
        .iter()
        .map(|mu| {
            let mut nu = DVector::zeros(f.fmap.dim());
            for s in 0..f.fmap.n_states() {
                for a in 0..f.fmap.n_actions() {
                    for i in 0..f.fmap.dim() {
                        nu[i] += mu[[s, a]] * f.fmap.phi(s, a)[i];
                    }
                }
            }
            nu
        })
        .collect()
}

#[test]
fn residuals_match_direct_recomputation() {
    let f = linear_fit(1, 30, 3, 4);
    let horizon = 3;
    for (n, t) in f.data.transitions().enumerate() {
        for j in 0..horizon {
            let here = f.fmap.phi(t.s, t.a).dot(&f.thetas[j].0);
            let next: f64 = if j + 1 < horizon {
                (0..3).map(|a| f.target.prob(t.s_next, a) * f.fmap.phi(t.s_next, a).dot(&f.thetas[j + 1].0)).sum()
            } else {
                0.0
            };
            let e = residual_epsilon(&f.data, &f.approx, &f.fmap, &f.target, &f.thetas, j, n).unwrap();
            assert!((e - (here - t.r - next)).abs() < 1e-13);
        }
    }
}

fn deterministic_chain() -> TabularMdp<f64> {
    let mut t = Array3::zeros((3, 2, 3));
    for s in 0..3 {
        for a in 0..2 {
            t[[s, a, (s + a + 1) % 3]] = 1.0;
        }
    }
    let r = Array2::from_shape_fn((3, 2), |(s, a)| 0.1 * (s as f64) + 0.3 * a as f64);
    TabularMdp::new(3, t, r, vec![0.5, 0.3, 0.2]).unwrap()
}

#[test]
fn deterministic_model_has_zero_residuals_and_variance() {
    let mdp = deterministic_chain();
    let target = random_policy(4, 3, 2);
    let data = generate_dataset(&mdp, &Policy::uniform(3, 2), 200, 5).unwrap();
    let thetas = tabular_true_thetas(&mdp, &target).unwrap();
    let (fmap, approx) = (FeatureMap::one_hot(3, 2), Approximator::tabular(6));
    for n in 0..data.n_transitions() {
        for j in 0..3 {
            let e = residual_epsilon(&data, &approx, &fmap, &target, &thetas, j, n).unwrap();
            assert!(e.abs() < 1e-14);
        }
    }
    let comps = estimate_components(&data, &approx, &fmap, &target, &thetas, NuMode::ExactMdp(&mdp)).unwrap();
    assert!(comps.sigma2.abs() < 1e-14);
}

#[test]
fn constant_rewards_give_zero_variance() {
    for seed in 0..4 {
        let mdp = random_mdp(seed, 3, 2, 3);
        let flat = TabularMdp::new(3, mdp.transition().clone(), Array2::from_elem((3, 2), 0.4), mdp.initial_dist().to_vec())
            .unwrap();
        let target = random_policy(seed + 10, 3, 2);
        let data = generate_dataset(&flat, &Policy::uniform(3, 2), 300, seed).unwrap();
        let (fmap, approx) = (FeatureMap::one_hot(3, 2), Approximator::tabular(6));
        let est = run_fqe(&data, &target, flat.initial_dist(), &approx, &fmap, &FqeConfig::default(), None).unwrap();
        let comps = estimate_components(&data, &approx, &fmap, &target, &est.thetas, NuMode::ExactMdp(&flat)).unwrap();
        assert!(comps.sigma2.abs() < 1e-12, "{}", comps.sigma2);
    }
}

#[test]
fn linear_stage_covariances_equal_feature_covariance() {
    let f = linear_fit(2, 100, 4, 5);
    let comps = f.components();
    let gram = feature_gram(&f);
    for h in 0..4 {
        for (a, b) in comps.sigma_h[h].iter().zip(gram.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// `σ² = (1/(HN)) Σ_n (Σ_h ν_hᵀ Σ_h⁻¹ ∇f_h(n) ε_h(n))²` computed per transition.
fn per_transition_sigma2(f: &Fit) -> f64 {
    let horizon = f.data.horizon();
    let d = f.approx.dim();
    let nus = target_feature_means(f);
    let dirs: Vec<DVector<f64>> = (0..horizon)
        .map(|h| {
            let mut s = DMatrix::zeros(d, d);
            for t in f.data.transitions() {
                let g = f.approx.grad(f.thetas[h].view(), f.fmap.phi(t.s, t.a)).unwrap();
                let g = DVector::from_iterator(d, g.iter().copied());
                s += &g * g.transpose();
            }
            s /= f.data.n_transitions() as f64;
            s.lu().solve(&nus[h]).unwrap()
        })
        .collect();
    let mut total = 0.0;
    for (n, t) in f.data.transitions().enumerate() {
        let mut score = 0.0;
        for h in 0..horizon {
            let g = f.approx.grad(f.thetas[h].view(), f.fmap.phi(t.s, t.a)).unwrap();
            let e = residual_epsilon(&f.data, &f.approx, &f.fmap, &f.target, &f.thetas, h, n).unwrap();
            score += dirs[h].iter().zip(g.iter()).map(|(x, y)| x * y).sum::<f64>() * e;
        }
        total += score * score;
    }
    total / (horizon * f.data.n_transitions()) as f64
}

#[test]
fn plug_in_variance_matches_per_transition_oracle() {
    for f in [linear_fit(3, 120, 3, 4), tabular_fit(4, 120, 3), linear_fit(5, 80, 5, 7)] {
        let comps = f.components();
        assert!(comps.jitter.iter().all(|&j| j == 0.0));
        let oracle = per_transition_sigma2(&f);
        assert!(rel_close(comps.sigma2, oracle, 1e-9), "{} vs {oracle}", comps.sigma2);
        assert_eq!(plug_in_sigma2(&comps).unwrap(), comps.sigma2);
    }
}

#[test]
fn population_variance_equals_tabular_mis_variance() {
    for inst in [canonical_a::<f64>(), canonical_b::<f64>()] {
        let (fmap, approx) = default_model(&inst, Family::Tabular).unwrap();
        let thetas = population_thetas(&inst.mdp, &inst.behavior, &inst.target, &approx, &fmap).unwrap();
        let truth = tabular_true_thetas(&inst.mdp, &inst.target).unwrap();
        for (a, b) in thetas.iter().zip(&truth) {
            for (x, y) in a.0.iter().zip(b.0.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let pop = population_components(&inst.mdp, &inst.behavior, &inst.target, &approx, &fmap, &thetas).unwrap();
        let mis = tabular_mis_variance(&inst.mdp, &inst.behavior, &inst.target).unwrap();
        assert!((pop.sigma2 - mis).abs() < 1e-8, "{}: {} vs {mis}", inst.name, pop.sigma2);
    }
}

#[test]
fn empirical_mis_variance_equals_plug_in_at_the_fit() {
    for seed in 0..3 {
        let f = tabular_fit(seed + 20, 400, 3);
        let comps = f.components();
        let mis = tabular_mis_variance_empirical(&f.data, &f.mdp, &f.target, &f.thetas).unwrap();
        assert!((comps.sigma2 - mis).abs() < 1e-8, "{} vs {mis}", comps.sigma2);
    }
}

#[test]
fn restricted_quadratic_form_is_a_supremum_over_directions() {
    let f = linear_fit(6, 200, 3, 4);
    let comps = f.components();
    let div = restricted_chi2(&comps).unwrap();
    let mut r = rng(7);
    for h in 0..3 {
        let sigma = to_na(&comps.sigma_h[h]);
        let nu = DVector::from_iterator(4, comps.nu_h[h].iter().copied());
        let ratio = |u: &DVector<f64>| nu.dot(u).powi(2) / (u.transpose() * &sigma * u)[(0, 0)];
        let mut best = 0.0_f64;
        for _ in 0..10_000 {
            let u = DVector::from_fn(4, |_, _| r.sample::<f64, _>(StandardNormal));
            best = best.max(ratio(&u));
        }
        let quad = div.per_h[h].quad;
        assert!(best <= quad * (1.0 + 1e-10));
        assert!(best >= 0.95 * quad);
        let star = sigma.clone().lu().solve(&nu).unwrap();
        assert!(rel_close(ratio(&star), quad, 1e-9));
    }
}

#[test]
fn one_hot_divergence_is_tabular_chi_square_against_empirical_frequencies() {
    let f = tabular_fit(8, 300, 3);
    let comps = f.components();
    let div = restricted_chi2(&comps).unwrap();
    let counts = f.data.pair_counts(3, 2);
    let n = f.data.n_transitions() as f64;
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let occ = occupancy_measures(&f.mdp, &f.target).unwrap();
    for h in 0..3 {
        let mu: Vec<f64> = occ.per_step[h].iter().copied().collect();
        assert!((div.per_h[h].chi2 - tabular_chi2(&mu, &freq).unwrap()).abs() < 1e-10);
    }
}

#[test]
fn tabular_chi_square_hand_values() {
    assert!((tabular_chi2(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-15);
    assert!(tabular_chi2(&[0.3, 0.7], &[0.3, 0.7]).unwrap().abs() < 1e-15);
    assert_eq!(tabular_chi2(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
}

#[test]
fn on_policy_single_stage_has_zero_divergence() {
    let mdp = random_mdp(9, 3, 2, 1);
    let pol = random_policy(10, 3, 2);
    let (fmap, approx) = (FeatureMap::one_hot(3, 2), Approximator::tabular(6));
    let thetas = tabular_true_thetas(&mdp, &pol).unwrap();
    let pop = population_components(&mdp, &pol, &pol, &approx, &fmap, &thetas).unwrap();
    let div = restricted_chi2(&pop).unwrap();
    assert!(div.per_h[0].chi2.abs() < 1e-12);
    assert!(div.tilde_chi2.abs() < 1e-12);
    assert!((div.bracket() - 1.0).abs() < 1e-12);
}

#[test]
fn average_leverage_equals_dimension() {
    for f in [linear_fit(11, 150, 3, 5), tabular_fit(12, 150, 3)] {
        let comps = f.components();
        for lev in average_leverage(&f.data, &comps, &f.approx, &f.fmap, &f.thetas).unwrap() {
            assert!((lev - f.approx.dim() as f64).abs() < 1e-9);
        }
    }
}

/// Every state-action pair visited equally often: state `s` at stage `h`
/// cycles through the episodes, with action chosen so pairs are balanced.
fn balanced_dataset(ns: usize, na: usize, horizon: usize) -> Dataset<f64> {
    let mut episodes = Vec::new();
    for k in 0..ns * na {
        let states: Vec<usize> = (0..=horizon).map(|h| (k + h) % ns).collect();
        let actions: Vec<usize> = (0..horizon).map(|h| (k / ns + h) % na).collect();
        let rewards = actions.iter().map(|&a| 0.5 * a as f64).collect();
        episodes.push(Trajectory { states, actions, rewards });
    }
    Dataset::new(episodes, 0).unwrap()
}

#[test]
fn uniform_one_hot_coverage_constant_is_one() {
    let data = balanced_dataset(3, 2, 2);
    let counts = data.pair_counts(3, 2);
    assert!(counts.iter().all(|&c| c == counts[[0, 0]]));
    let mdp = random_mdp(13, 3, 2, 2);
    let target = random_policy(14, 3, 2);
    let (fmap, approx) = (FeatureMap::one_hot(3, 2), Approximator::tabular(6));
    let est = run_fqe(&data, &target, mdp.initial_dist(), &approx, &fmap, &FqeConfig::default(), None).unwrap();
    let comps = estimate_components(&data, &approx, &fmap, &target, &est.thetas, NuMode::ExactMdp(&mdp)).unwrap();
    let c2 = empirical_c2(&data, &comps, &approx, &fmap, &est.thetas).unwrap();
    assert!((c2 - 1.0).abs() < 1e-12);
}

fn random_basis(seed: u64, d: usize) -> Array2<f64> {
    let mut r = rng(seed);
    let mut m = Array2::from_shape_fn((d, d), |_| r.sample::<f64, _>(StandardNormal));
    for i in 0..d {
        m[[i, i]] += 3.0;
    }
    m
}

#[test]
fn inference_quantities_are_invariant_to_feature_basis() {
    let base = linear_fit(15, 150, 3, 4);
    let moved_fmap = base.fmap.transformed(&random_basis(16, 4)).unwrap();
    let moved = fit(15, 150, 3, moved_fmap, Approximator::linear(4));
    let (a, b) = (base.components(), moved.components());
    assert!(rel_close(a.sigma2, b.sigma2, 1e-8));
    let (da, db) = (restricted_chi2(&a).unwrap(), restricted_chi2(&b).unwrap());
    for (x, y) in da.per_h.iter().zip(&db.per_h) {
        assert!((x.chi2 - y.chi2).abs() < 1e-8);
    }
    assert!((da.tilde_chi2 - db.tilde_chi2).abs() < 1e-8);
    let ca = empirical_c2(&base.data, &a, &base.approx, &base.fmap, &base.thetas).unwrap();
    let cb = empirical_c2(&moved.data, &b, &moved.approx, &moved.fmap, &moved.thetas).unwrap();
    assert!(rel_close(ca, cb, 1e-8));
}

#[test]
fn tabular_features_satisfy_positivity() {
    let f = tabular_fit(17, 200, 3);
    let comps = f.components();
    let rep = check_positivity(&f.data, &comps, &f.approx, &f.fmap, &f.thetas, 1_000, 1).unwrap();
    assert!(rep.holds);
    assert_eq!(rep.pairs_checked, 3 * 36);
}

#[test]
fn opposed_linear_features_violate_positivity() {
    let table = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0], [1.0, 1.0]]);
    let fmap = FeatureMap::custom(2, 2, table).unwrap();
    let f = fit(18, 200, 2, fmap, Approximator::linear(2));
    let comps = f.components();
    let rep = check_positivity(&f.data, &comps, &f.approx, &f.fmap, &f.thetas, 1_000, 1).unwrap();
    assert!(!rep.holds);
    assert!(rep.min_value < 0.0);
}

#[test]
fn sampled_positivity_never_beats_exhaustive_minimum() {
    let f = linear_fit(19, 200, 3, 5);
    let comps = f.components();
    let full = check_positivity(&f.data, &comps, &f.approx, &f.fmap, &f.thetas, 144, 0).unwrap();
    let mut lowest = f64::INFINITY;
    for seed in 0..40 {
        let s = check_positivity(&f.data, &comps, &f.approx, &f.fmap, &f.thetas, 100, seed).unwrap();
        assert!(s.min_value >= full.min_value - 1e-15);
        lowest = lowest.min(s.min_value);
    }
    assert_eq!(lowest, full.min_value);
}

#[test]
fn cross_covariance_norms_match_svd_and_are_bounded_by_one() {
    let mdp = random_mdp(60, 4, 3, 3);
    let target = random_policy(61, 4, 3);
    let data = generate_dataset(&mdp, &Policy::uniform(4, 3), 300, 62).unwrap();
    let fmap = FeatureMap::random_linear(4, 3, 2, 63).unwrap();
    let approx = Approximator::smooth_net(2, 2);
    let thetas: Vec<_> = (0..3).map(|h| random_params::<f64>(&approx, 0.7, 70 + h)).collect();
    let comps = estimate_components(&data, &approx, &fmap, &target, &thetas, NuMode::ExactMdp(&mdp)).unwrap();
    assert!(comps.jitter.iter().all(|&j| j == 0.0));
    let (data, approx, fmap, est_thetas) = (&data, &approx, &fmap, &thetas);
    for h1 in 0..3 {
        for h2 in 0..3 {
            let cc = cross_covariance(data, approx, fmap, est_thetas, &comps, h1, h2).unwrap();
            let l1 = to_na(&comps.sigma_h[h1]).cholesky().unwrap().l();
            let l2 = to_na(&comps.sigma_h[h2]).cholesky().unwrap().l();
            let w = l1.clone().try_inverse().unwrap() * to_na(&cc.sigma_h1h2) * l2.try_inverse().unwrap().transpose();
            let top = w.singular_values().max();
            if comps.jitter[h1] == 0.0 && comps.jitter[h2] == 0.0 {
                assert!((cc.sigma_norm - top).abs() < 1e-8 * top.max(1.0));
            }
            assert!(cc.sigma_norm <= 1.0 + 1e-8);
            if h1 == h2 && comps.jitter[h1] == 0.0 {
                assert!((cc.sigma_norm - 1.0).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn linear_variance_is_horizon_times_plug_in() {
    for seed in 0..3 {
        let f = linear_fit(seed + 30, 150, 4, 5);
        let comps = f.components();
        let lin = linear_sigma2(&f.data, &f.target, &f.fmap, &f.thetas, &f.mdp).unwrap();
        assert!(rel_close(lin, 4.0 * comps.sigma2, 1e-9));
    }
}

#[test]
fn bounds_shrink_with_data_and_grow_with_confidence() {
    let f = linear_fit(40, 200, 3, 4);
    let comps = f.components();
    let div = restricted_chi2(&comps).unwrap();
    let c2 = empirical_c2(&f.data, &comps, &f.approx, &f.fmap, &f.thetas).unwrap();
    let va = |k, delta| bound_variance_aware(comps.sigma2, c2, &comps, k, delta).unwrap();
    let rf = |k, delta| bound_reward_free(&div, c2, k, 3, 4, delta).unwrap();
    for delta in [0.01, 0.05, 0.1] {
        for k in [100usize, 400] {
            assert!(va(k, delta).leading_term > va(4 * k, delta).leading_term);
            assert!(rf(k, delta).leading_term > rf(4 * k, delta).leading_term);
            assert!(va(k, delta / 2.0).total() > va(k, delta).total());
            assert!(rf(k, delta / 2.0).total() > rf(k, delta).total());
        }
    }
    assert!(bound_variance_aware(comps.sigma2, c2, &comps, 100, 1.5).is_err());
    assert!(bound_reward_free(&div, c2, 0, 3, 4, 0.1).is_err());
}

#[test]
fn bracket_dominates_horizon_weighted_divergence() {
    for horizon in 1..=4 {
        let f = linear_fit(50 + horizon as u64, 200, horizon, 4);
        let div = restricted_chi2(&f.components()).unwrap();
        let total_w = (horizon * (horizon + 1) / 2) as f64;
        let tilde_root = total_w * (1.0 + div.tilde_chi2).sqrt();
        assert!(div.bracket() >= tilde_root * (1.0 - 1e-12));
        if horizon == 1 {
            assert!((div.bracket() - tilde_root).abs() < 1e-12);
        }
    }
}
