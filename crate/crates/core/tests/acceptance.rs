//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any failure.

use fqe_core::approx::{grad_check, Approximator, Family, FeatureMap};
use fqe_core::bootstrap::{bootstrap_distribution, Multiplier, WeightScheme};
use fqe_core::experiments::{
    canonical_instances, default_model, study_coverage, study_cramer_rao, study_normality, Instance, StudyConfig,
};
use fqe_core::fqe::{closed_form_linear_fqe, run_fqe, z_residual, FqeConfig, Regularizer};
use fqe_core::inference::{
    bound_reward_free, bound_variance_aware, empirical_c2, estimate_components, population_components,
    population_thetas, restricted_chi2, tabular_chi2, tabular_mis_variance, tabular_mis_variance_empirical, NuMode,
};
use fqe_core::mdp::{exact_policy_value, generate_dataset, Dataset, Policy, TabularMdp};
use fqe_core::Result;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| 0.2 + rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

fn random_instance(rng: &mut ChaCha8Rng, ns: usize, na: usize, horizon: usize) -> Instance<f64> {
    let mut t = Array3::zeros((ns, na, ns));
    for s in 0..ns {
        for a in 0..na {
            for (j, p) in simplex(rng, ns).into_iter().enumerate() {
                t[[s, a, j]] = p;
            }
        }
    }
    let r = Array2::from_shape_fn((ns, na), |_| rng.random::<f64>());
    let xi = simplex(rng, ns);
    let mdp = TabularMdp::new(horizon, t, r, xi).unwrap();
    let mut rows = Vec::new();
    for _ in 0..ns {
        rows.extend(simplex(rng, na));
    }
    let target = Policy::new(Array2::from_shape_vec((ns, na), rows).unwrap()).unwrap();
    Instance { name: "random".into(), mdp, behavior: Policy::uniform(ns, na), target }
}

fn oracle_linear() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0_f64;
    for i in 0..20 {
        let ns = rng.random_range(3..=6);
        let na = rng.random_range(2..=3);
        let horizon = rng.random_range(1..=5);
        let d = rng.random_range(1..=12.min(ns * na));
        let inst = random_instance(&mut rng, ns, na, horizon);
        let fmap = FeatureMap::random_linear(ns, na, d, 500 + i)?;
        let data = generate_dataset(&inst.mdp, &inst.behavior, 200, 900 + i)?;
        let xi = inst.mdp.initial_dist();
        let est = run_fqe(&data, &inst.target, xi, &Approximator::linear(d), &fmap, &FqeConfig::default(), None)?;
        let cf = closed_form_linear_fqe(&data, &inst.target, &fmap, 0.0, xi)?;
        worst = worst.max((est.value - cf.value).abs());
    }
    outcome(worst <= 1e-8, format!("max |v_fqe - v_closed| = {worst:.2e} over 20 instances"))
}

/// Backward DP on the empirical model of `data` (mean rewards, successor frequencies).
fn empirical_model_value(data: &Dataset<f64>, target: &Policy<f64>, xi: &[f64]) -> Option<(f64, Vec<Array2<f64>>)> {
    let (ns, na) = target.probs().dim();
    let mut n = Array2::<f64>::zeros((ns, na));
    let mut rsum = Array2::<f64>::zeros((ns, na));
    let mut succ = Array3::<f64>::zeros((ns, na, ns));
    for t in data.transitions() {
        n[[t.s, t.a]] += 1.0;
        rsum[[t.s, t.a]] += t.r;
        succ[[t.s, t.a, t.s_next]] += 1.0;
    }
    if n.iter().any(|&c| c == 0.0) {
        return None;
    }
    let mut v = vec![0.0; ns];
    let mut qs = Vec::new();
    for _ in 0..data.horizon() {
        let q = Array2::from_shape_fn((ns, na), |(s, a)| {
            let next: f64 = (0..ns).map(|s2| succ[[s, a, s2]] * v[s2]).sum();
            (rsum[[s, a]] + next) / n[[s, a]]
        });
        v = (0..ns).map(|s| (0..na).map(|a| target.prob(s, a) * q[[s, a]]).sum()).collect();
        qs.push(q);
    }
    qs.reverse();
    Some((xi.iter().zip(&v).map(|(p, x)| p * x).sum(), qs))
}

fn tabular_exactness() -> Result<Outcome> {
    let mut worst_dp = 0.0_f64;
    for inst in canonical_instances::<f64>() {
        let (fmap, approx) = default_model(&inst, Family::Tabular)?;
        for seed in 0..5 {
            let data = generate_dataset(&inst.mdp, &inst.behavior, 300, 40 + seed)?;
            let xi = inst.mdp.initial_dist();
            let Some((v, qs)) = empirical_model_value(&data, &inst.target, xi) else {
                return outcome(false, "dataset missed a state-action pair");
            };
            let est = run_fqe(&data, &inst.target, xi, &approx, &fmap, &FqeConfig::default(), None)?;
            worst_dp = worst_dp.max((est.value - v).abs());
            for (theta, q) in est.thetas.iter().zip(&qs) {
                for (a, b) in theta.0.iter().zip(q.iter()) {
                    worst_dp = worst_dp.max((a - b).abs());
                }
            }
        }
    }
    let mut worst_large = 0.0_f64;
    let mut parts = Vec::new();
    for inst in canonical_instances::<f64>() {
        let (fmap, approx) = default_model(&inst, Family::Tabular)?;
        let data = generate_dataset(&inst.mdp, &inst.behavior, 20_000, 77)?;
        let est = run_fqe(&data, &inst.target, inst.mdp.initial_dist(), &approx, &fmap, &FqeConfig::default(), None)?;
        let err = (est.value - exact_policy_value(&inst.mdp, &inst.target)?).abs();
        worst_large = worst_large.max(err);
        parts.push(format!("{} |err| = {err:.4}", inst.name));
    }
    outcome(
        worst_dp <= 1e-8 && worst_large <= 0.01,
        format!("empirical DP gap {worst_dp:.2e}; K=20000: {}", parts.join(", ")),
    )
}

fn gradient_correctness() -> Result<Outcome> {
    let mut worst = 0.0_f64;
    for (m, width) in [(4, 3), (6, 5), (12, 8)] {
        let rep = grad_check(&Approximator::smooth_net(m, width), 100, 7 + m as u64)?;
        worst = worst.max(rep.max_rel_error);
    }
    outcome(worst <= 1e-5, format!("max relative error {worst:.2e} over 100 probes per architecture"))
}

fn kkt_certificate() -> Result<Outcome> {
    let mut worst = 0.0_f64;
    let mut fits = 0;
    for inst in canonical_instances::<f64>() {
        let (ns, na) = (inst.mdp.n_states(), inst.mdp.n_actions());
        let models = [
            default_model(&inst, Family::Tabular)?,
            (FeatureMap::random_linear(ns, na, 3, 11)?, Approximator::linear(3)),
            default_model(&inst, Family::SmoothNet { width: 3 })?,
        ];
        for (fmap, approx) in &models {
            for seed in 0..3 {
                let data = generate_dataset(&inst.mdp, &inst.behavior, 500, 60 + seed)?;
                let est = run_fqe(&data, &inst.target, inst.mdp.initial_dist(), approx, fmap, &FqeConfig::default(), None)?;
                if !est.converged() {
                    return outcome(false, format!("{} {} fit did not converge", inst.name, approx.family.tag()));
                }
                let z = z_residual(&data, approx, fmap, &inst.target, &est.thetas, 0.0, Regularizer::None)?;
                worst = worst.max(z.scaled_norm);
                fits += 1;
            }
        }
    }
    outcome(worst <= 1e-6, format!("max scaled z-residual {worst:.2e} over {fits} fits"))
}

fn normality() -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for inst in canonical_instances::<f64>() {
        let name = inst.name.clone();
        let cfg = StudyConfig::new(inst, Family::Tabular, vec![800], 2_000, 5)?;
        let row = &study_normality(&cfg)?.rows[0];
        pass &= row.ks_statistic <= 0.05;
        parts.push(format!("{name} KS = {:.4} (plug-in KS {:.4})", row.ks_statistic, row.ks_statistic_plugin));
    }
    outcome(pass, parts.join(", "))
}

fn variance_match() -> Result<Outcome> {
    let inst = canonical_instances::<f64>().remove(0);
    let (fmap, approx) = default_model(&inst, Family::Tabular)?;
    let cfg = StudyConfig::new(inst.clone(), Family::Tabular, vec![800], 20_000, 6)?;
    let row = &study_cramer_rao(&cfg)?.rows[0];
    let plugin_truth = row.sigma2_plugin_truth.unwrap_or(f64::NAN);
    let ratio = row.mc_variance_scaled / plugin_truth;
    let thetas = population_thetas(&inst.mdp, &inst.behavior, &inst.target, &approx, &fmap)?;
    let pop = population_components(&inst.mdp, &inst.behavior, &inst.target, &approx, &fmap, &thetas)?;
    let mis_gap = (pop.sigma2 - tabular_mis_variance(&inst.mdp, &inst.behavior, &inst.target)?).abs();
    let data = generate_dataset(&inst.mdp, &inst.behavior, 800, 8)?;
    let est = run_fqe(&data, &inst.target, inst.mdp.initial_dist(), &approx, &fmap, &FqeConfig::default(), None)?;
    let comps = estimate_components(&data, &approx, &fmap, &inst.target, &est.thetas, NuMode::ExactMdp(&inst.mdp))?;
    let emp_gap = (comps.sigma2 - tabular_mis_variance_empirical(&data, &inst.mdp, &inst.target, &est.thetas)?).abs();
    outcome(
        (ratio - 1.0).abs() <= 0.1 && mis_gap <= 1e-8 && emp_gap <= 1e-8,
        format!(
            "K*Var_MC = {:.5}, plug-in at truth = {plugin_truth:.5} (ratio {ratio:.4}); MIS gap population {mis_gap:.1e}, empirical {emp_gap:.1e}",
            row.mc_variance_scaled
        ),
    )
}

fn bootstrap_consistency() -> Result<Outcome> {
    let inst = canonical_instances::<f64>().remove(0);
    let (fmap, approx) = default_model(&inst, Family::Tabular)?;
    let k = 500;
    let data = generate_dataset(&inst.mdp, &inst.behavior, k, 9)?;
    let xi = inst.mdp.initial_dist();
    let cfg = FqeConfig::default();
    let est = run_fqe(&data, &inst.target, xi, &approx, &fmap, &cfg, None)?;
    let sigma2 = estimate_components(&data, &approx, &fmap, &inst.target, &est.thetas, NuMode::ExactMdp(&inst.mdp))?.sigma2;
    let mut pass = true;
    let mut parts = Vec::new();
    for scheme in [WeightScheme::Vanilla, WeightScheme::Multiplier(Multiplier::Gamma { shape: 0.5, scale: 2.0 })] {
        let res = bootstrap_distribution(&data, &inst.target, xi, &approx, &fmap, &cfg, &scheme, 2_000, 10)?;
        let scaled: Vec<f64> = res.errors.iter().map(|e| e * (k as f64).sqrt()).collect();
        let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
        let var = scaled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (scaled.len() - 1) as f64;
        let ratio = var / (res.k0 * sigma2);
        pass &= (ratio - 1.0).abs() <= 0.2;
        parts.push(format!("{} ratio {ratio:.4}", scheme.tag()));
    }
    outcome(pass, parts.join(", "))
}

fn ci_coverage() -> Result<Outcome> {
    let inst = canonical_instances::<f64>().remove(0);
    let mut cfg = StudyConfig::new(inst, Family::Tabular, vec![500], 1_000, 13)?;
    cfg.bootstrap_reps = 200;
    cfg.deltas = vec![0.1];
    let row = &study_coverage(&cfg)?.rows[0];
    let coverage = row.coverage.unwrap_or(f64::NAN);
    outcome(
        (coverage - 0.9).abs() <= 0.03,
        format!(
            "coverage {coverage:.3} (binomial se {:.3}), mean width {:.4}",
            (coverage * (1.0 - coverage) / row.replications_used as f64).sqrt(),
            row.mean_ci_width.unwrap_or(f64::NAN)
        ),
    )
}

fn divergence_identity() -> Result<Outcome> {
    let inst = canonical_instances::<f64>().remove(1);
    let (ns, na) = (inst.mdp.n_states(), inst.mdp.n_actions());
    let fmap = FeatureMap::random_linear(ns, na, 5, 13)?;
    let approx = Approximator::linear(5);
    let data = generate_dataset(&inst.mdp, &inst.behavior, 300, 14)?;
    let est = run_fqe(&data, &inst.target, inst.mdp.initial_dist(), &approx, &fmap, &FqeConfig::default(), None)?;
    let comps = estimate_components(&data, &approx, &fmap, &inst.target, &est.thetas, NuMode::ExactMdp(&inst.mdp))?;
    let div = restricted_chi2(&comps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut dominated = true;
    let mut attained_gap = 0.0_f64;
    for h in 0..inst.mdp.horizon() {
        let sigma = &comps.sigma_h[h];
        let nu = &comps.nu_h[h];
        let rayleigh = |u: &Array1<f64>| nu.dot(u).powi(2) / u.dot(&sigma.dot(u));
        let quad = div.per_h[h].quad;
        for _ in 0..10_000 {
            let u = Array1::from_shape_fn(5, |_| rng.sample::<f64, _>(StandardNormal));
            dominated &= rayleigh(&u) <= quad * (1.0 + 1e-12);
        }
        let star = comps.factor(h).solve(nu.view());
        attained_gap = attained_gap.max((rayleigh(&star) - quad).abs());
    }
    let hand = [
        (tabular_chi2(&[1.0, 0.0], &[0.5, 0.5])?, 1.0),
        (tabular_chi2(&[0.5, 0.5], &[0.5, 0.5])?, 0.0),
        (tabular_chi2(&[0.25, 0.75], &[0.5, 0.5])?, 0.25),
    ];
    let hand_ok = hand.iter().all(|(got, want)| (got - want).abs() < 1e-15);
    outcome(
        dominated && attained_gap <= 1e-6 && hand_ok,
        format!("dominates 1e4 quotients per stage: {dominated}; attained gap {attained_gap:.1e}; hand values exact: {hand_ok}"),
    )
}

fn bound_sanity() -> Result<Outcome> {
    let delta = 0.1;
    let k = 500;
    let mut pass = true;
    let mut parts = Vec::new();
    for inst in canonical_instances::<f64>() {
        let (fmap, approx) = default_model(&inst, Family::Tabular)?;
        let truth = exact_policy_value(&inst.mdp, &inst.target)?;
        let horizon = inst.mdp.horizon();
        let mut hits = [0usize; 2];
        let m = 1_000;
        for rep in 0..m {
            let data = generate_dataset(&inst.mdp, &inst.behavior, k, 20_000 + rep as u64)?;
            let est = run_fqe(&data, &inst.target, inst.mdp.initial_dist(), &approx, &fmap, &FqeConfig::default(), None)?;
            let comps = estimate_components(&data, &approx, &fmap, &inst.target, &est.thetas, NuMode::ExactMdp(&inst.mdp))?;
            let c2 = empirical_c2(&data, &comps, &approx, &fmap, &est.thetas)?;
            let err = (est.value - truth).abs();
            let va = bound_variance_aware(comps.sigma2, c2, &comps, k, delta)?;
            let rf = bound_reward_free(&restricted_chi2(&comps)?, c2, k, horizon, approx.dim(), delta)?;
            hits[0] += usize::from(err <= va.leading_term);
            hits[1] += usize::from(err <= rf.leading_term);
        }
        let (fa, fb) = (hits[0] as f64 / m as f64, hits[1] as f64 / m as f64);
        pass &= fa >= 0.95 && fb >= 0.95;
        parts.push(format!("{} variance-aware {fa:.3}, reward-free {fb:.3}", inst.name));
    }
    outcome(pass, parts.join("; "))
}

type Criterion = (&'static str, fn() -> Result<Outcome>);

fn main() {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence (linear)", oracle_linear),
        ("tabular exactness", tabular_exactness),
        ("gradient correctness", gradient_correctness),
        ("KKT certificate", kkt_certificate),
        ("normality", normality),
        ("variance match", variance_match),
        ("bootstrap consistency", bootstrap_consistency),
        ("CI coverage", ci_coverage),
        ("divergence identity", divergence_identity),
        ("bound sanity", bound_sanity),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = run().unwrap_or_else(|e| Outcome { pass: false, detail: format!("error: {e}") });
        let secs = start.elapsed().as_secs_f64();
        let tag = if out.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} [{tag}] {name}: {} ({secs:.2} s)", i + 1, out.detail);
        failed += usize::from(!out.pass);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
