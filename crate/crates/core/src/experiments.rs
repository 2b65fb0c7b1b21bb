//! Monte-Carlo studies of the estimator's limit behavior: normality of the
//! scaled error, bootstrap interval coverage, and the variance match against
//! the efficiency bound.
//!
//! Replicate `m` at sample size `K` draws its dataset from
//! `derive_seed(derive_seed(seed, K), m)`, so rows are reproducible
//! regardless of thread count.

use ndarray::{array, Array2, Array3};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::approx::{Approximator, Family, FeatureMap, ParamVector};
use crate::bootstrap::{bootstrap_distribution, confidence_interval, WeightScheme};
use crate::error::{config, Error, Result};
use crate::fqe::{run_fqe, FqeConfig};
use crate::inference::{
    estimate_components, population_components, population_thetas, NuMode, VarianceComponents,
};
use crate::mdp::{exact_policy_value, generate_dataset, Dataset, Policy, TabularMdp};
use crate::rng::derive_seed;
use crate::scalar::{lit, to_f64, Real};

/// An MDP with the behavior policy that logs data and the target policy to evaluate.
#[derive(Debug, Clone)]
pub struct Instance<T> {
    pub name: String,
    pub mdp: TabularMdp<T>,
    pub behavior: Policy<T>,
    pub target: Policy<T>,
}

fn build<T: Real>(
    name: &str,
    horizon: usize,
    transition: Array3<f64>,
    reward: Array2<f64>,
    xi: Vec<f64>,
    behavior: Array2<f64>,
    target: Array2<f64>,
) -> Instance<T> {
    let cast2 = |m: Array2<f64>| m.mapv(lit::<T>);
    let mdp = TabularMdp::new(
        horizon,
        transition.mapv(lit::<T>),
        cast2(reward),
        xi.into_iter().map(lit::<T>).collect(),
    )
    .expect("canonical MDP is valid");
    Instance {
        name: name.into(),
        mdp,
        behavior: Policy::new(cast2(behavior)).expect("canonical behavior policy is valid"),
        target: Policy::new(cast2(target)).expect("canonical target policy is valid"),
    }
}

/// Two states, two actions, `H = 2`, uniform behavior.
pub fn canonical_a<T: Real>() -> Instance<T> {
    let t = Array3::from_shape_vec((2, 2, 2), vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5, 0.1, 0.9]).expect("shape");
    build(
        "canonical-a",
        2,
        t,
        array![[0.2, 0.9], [0.5, 0.1]],
        vec![0.6, 0.4],
        Array2::from_elem((2, 2), 0.5),
        array![[0.3, 0.7], [0.8, 0.2]],
    )
}

/// Four states, three actions, `H = 4`, uniform behavior and a target that
/// favors a state-dependent action.
pub fn canonical_b<T: Real>() -> Instance<T> {
    #[rustfmt::skip]
    let t = Array3::from_shape_vec((4, 3, 4), vec![
        0.6, 0.2, 0.1, 0.1,   0.1, 0.6, 0.2, 0.1,   0.1, 0.1, 0.2, 0.6,
        0.5, 0.3, 0.1, 0.1,   0.2, 0.2, 0.5, 0.1,   0.1, 0.3, 0.3, 0.3,
        0.3, 0.3, 0.3, 0.1,   0.1, 0.1, 0.1, 0.7,   0.4, 0.1, 0.4, 0.1,
        0.25, 0.25, 0.25, 0.25, 0.7, 0.1, 0.1, 0.1, 0.1, 0.2, 0.6, 0.1,
    ]).expect("shape");
    build(
        "canonical-b",
        4,
        t,
        array![[0.5, 0.3, 0.6], [0.4, 0.7, 0.5], [0.6, 0.4, 0.3], [0.7, 0.5, 0.4]],
        vec![0.4, 0.3, 0.2, 0.1],
        Array2::from_elem((4, 3), 1.0 / 3.0),
        array![[0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.2, 0.2, 0.6], [0.5, 0.25, 0.25]],
    )
}

pub fn canonical_instances<T: Real>() -> Vec<Instance<T>> {
    vec![canonical_a(), canonical_b()]
}

/// Feature map and approximator used for `family` on an instance: one-hot
/// features for every family, with hidden width `width` for the network.
pub fn default_model<T: Real>(instance: &Instance<T>, family: Family) -> Result<(FeatureMap<T>, Approximator)> {
    let fmap = FeatureMap::one_hot(instance.mdp.n_states(), instance.mdp.n_actions());
    let approx = Approximator::for_features(family, &fmap)?;
    Ok((fmap, approx))
}

#[derive(Debug, Clone)]
pub struct StudyConfig<T> {
    pub instance: Instance<T>,
    pub family: Family,
    pub fmap: FeatureMap<T>,
    pub fqe: FqeConfig,
    pub k_grid: Vec<usize>,
    pub replications: usize,
    /// Bootstrap replicates per dataset (coverage study).
    pub bootstrap_reps: usize,
    pub deltas: Vec<f64>,
    pub schemes: Vec<WeightScheme>,
    pub seed: u64,
    /// `None` integrates `ν_h` exactly; `Some(M)` uses `M` target rollouts.
    pub nu_rollouts: Option<usize>,
}

/// Smallest replication count accepted for a statistical study.
pub const MIN_REPLICATIONS: usize = 100;

impl<T: Real> StudyConfig<T> {
    pub fn new(instance: Instance<T>, family: Family, k_grid: Vec<usize>, replications: usize, seed: u64) -> Result<Self> {
        let (fmap, _) = default_model(&instance, family)?;
        Ok(StudyConfig {
            instance,
            family,
            fmap,
            fqe: FqeConfig::default(),
            k_grid,
            replications,
            bootstrap_reps: 200,
            deltas: vec![0.1],
            schemes: vec![WeightScheme::Vanilla],
            seed,
            nu_rollouts: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < MIN_REPLICATIONS {
            return config(format!("studies need at least {MIN_REPLICATIONS} replications"));
        }
        if self.k_grid.is_empty() || self.k_grid[0] == 0 || self.k_grid.windows(2).any(|w| w[0] >= w[1]) {
            return config("K grid must be nonempty, positive and strictly increasing");
        }
        if self.deltas.iter().any(|&d| !(d > 0.0 && d < 1.0)) {
            return config("every delta must lie in (0, 1)");
        }
        Ok(())
    }

    fn approx(&self) -> Result<Approximator> {
        Approximator::for_features(self.family, &self.fmap)
    }

    /// Echo of the configuration for provenance records.
    pub fn describe(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("instance".into(), self.instance.name.clone()),
            ("family".into(), self.family.tag().to_string()),
            ("feature_dim".into(), self.fmap.dim().to_string()),
            ("lambda".into(), self.fqe.lambda.to_string()),
            ("k_grid".into(), join(&self.k_grid)),
            ("replications".into(), self.replications.to_string()),
            ("bootstrap_reps".into(), self.bootstrap_reps.to_string()),
            ("deltas".into(), join(&self.deltas)),
            ("schemes".into(), self.schemes.iter().map(|s| s.tag()).collect::<Vec<_>>().join(";")),
            ("seed".into(), self.seed.to_string()),
            (
                "nu_mode".into(),
                self.nu_rollouts.map_or("exact_mdp".to_string(), |m| format!("rollout({m})")),
            ),
        ];
        out.push(("library_version".into(), env!("CARGO_PKG_VERSION").into()));
        out
    }
}

fn join<X: ToString>(xs: &[X]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Normality,
    Coverage,
    CramerRao,
}

impl StudyKind {
    pub fn tag(&self) -> &'static str {
        match self {
            StudyKind::Normality => "normality",
            StudyKind::Coverage => "coverage",
            StudyKind::CramerRao => "cramer_rao",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub k: usize,
    pub replications_used: usize,
    pub excluded: usize,
    pub mean_error: f64,
    /// `K · Var_MC(v̂ − v)`.
    pub mc_variance_scaled: f64,
    /// `σ²` from population components at `θ*` (linear families).
    pub sigma2_oracle: Option<f64>,
    /// Replicate mean of the plug-in `σ̂²` at `θ̂`.
    pub sigma2_plugin: f64,
    /// Replicate mean of the plug-in `σ̂²` at `θ*` (linear families).
    pub sigma2_plugin_truth: Option<f64>,
    /// KS distance of `√K (v̂ − v)/σ_ref` from `N(0, 1)`.
    pub ks_statistic: f64,
    /// KS distance when each replicate is standardized by its own `σ̂`.
    pub ks_statistic_plugin: f64,
    /// `mc_variance_scaled / σ_ref²`.
    pub variance_ratio: f64,
    pub scheme: Option<String>,
    pub delta: Option<f64>,
    pub coverage: Option<f64>,
    pub mean_ci_width: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub kind: StudyKind,
    pub rows: Vec<StudyRow>,
    pub provenance: Vec<(String, String)>,
    /// Wall time per K in seconds, kept apart so rows stay reproducible.
    pub runtime_secs: Vec<f64>,
}

/// `sup_x |F̂(x) − Φ(x)|` for the standard normal `Φ`.
pub fn ks_statistic(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return config("KS statistic needs at least two samples");
    }
    if samples.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("KS samples contain NaN".into()));
    }
    let normal = Normal::standard();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = normal.cdf(x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    Ok(d)
}

struct Replicate {
    error: f64,
    sigma2_plugin: f64,
    sigma2_truth: Option<f64>,
    intervals: Vec<(bool, f64)>,
}

struct Oracle<T> {
    value: f64,
    thetas: Option<Vec<ParamVector<T>>>,
    sigma2: Option<f64>,
}

fn oracle<T: Real>(cfg: &StudyConfig<T>, approx: &Approximator) -> Result<Oracle<T>> {
    let inst = &cfg.instance;
    let value = to_f64(exact_policy_value(&inst.mdp, &inst.target)?);
    if !approx.family.is_linear() {
        return Ok(Oracle { value, thetas: None, sigma2: None });
    }
    let thetas = population_thetas(&inst.mdp, &inst.behavior, &inst.target, approx, &cfg.fmap)?;
    let pop = population_components(&inst.mdp, &inst.behavior, &inst.target, approx, &cfg.fmap, &thetas)?;
    Ok(Oracle { value, sigma2: Some(to_f64(pop.sigma2)), thetas: Some(thetas) })
}

fn components<T: Real>(
    cfg: &StudyConfig<T>,
    data: &Dataset<T>,
    approx: &Approximator,
    thetas: &[ParamVector<T>],
    seed: u64,
) -> Result<VarianceComponents<T>> {
    let inst = &cfg.instance;
    let mode = match cfg.nu_rollouts {
        None => NuMode::ExactMdp(&inst.mdp),
        Some(episodes) => NuMode::Rollout { mdp: &inst.mdp, episodes, seed },
    };
    estimate_components(data, approx, &cfg.fmap, &inst.target, thetas, mode)
}

fn run_replicate<T: Real>(
    cfg: &StudyConfig<T>,
    approx: &Approximator,
    oracle: &Oracle<T>,
    k: usize,
    m: usize,
    with_intervals: bool,
) -> Result<Replicate> {
    let inst = &cfg.instance;
    let seed = derive_seed(derive_seed(cfg.seed, k as u64), m as u64);
    let data = generate_dataset(&inst.mdp, &inst.behavior, k, seed)?;
    let xi = inst.mdp.initial_dist();
    let est = run_fqe(&data, &inst.target, xi, approx, &cfg.fmap, &cfg.fqe, None)?;
    if !est.converged() {
        return Err(Error::Study("replicate did not converge".into()));
    }
    let value = to_f64(est.value);
    let sigma2_plugin = to_f64(components(cfg, &data, approx, &est.thetas, derive_seed(seed, 1))?.sigma2);
    let sigma2_truth = match &oracle.thetas {
        Some(t) => Some(to_f64(components(cfg, &data, approx, t, derive_seed(seed, 1))?.sigma2)),
        None => None,
    };
    let mut intervals = Vec::new();
    if with_intervals {
        for (i, scheme) in cfg.schemes.iter().enumerate() {
            let boot = bootstrap_distribution(
                &data,
                &inst.target,
                xi,
                approx,
                &cfg.fmap,
                &cfg.fqe,
                scheme,
                cfg.bootstrap_reps,
                derive_seed(seed, 2 + i as u64),
            )?;
            for &delta in &cfg.deltas {
                let ci = confidence_interval(&boot, delta, boot.k0)?;
                intervals.push((ci.contains(oracle.value), ci.width()));
            }
        }
    }
    Ok(Replicate { error: value - oracle.value, sigma2_plugin, sigma2_truth, intervals })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn run_study<T: Real>(cfg: &StudyConfig<T>, kind: StudyKind) -> Result<StudyResult> {
    cfg.validate()?;
    let approx = cfg.approx()?;
    let oracle = oracle(cfg, &approx)?;
    let with_intervals = kind == StudyKind::Coverage;
    if with_intervals && cfg.schemes.is_empty() {
        return config("coverage study needs at least one weight scheme");
    }
    let mut rows = Vec::new();
    let mut runtime = Vec::new();
    for &k in &cfg.k_grid {
        let start = std::time::Instant::now();
        let outcomes: Vec<Option<Replicate>> = (0..cfg.replications)
            .into_par_iter()
            .map(|m| run_replicate(cfg, &approx, &oracle, k, m, with_intervals).ok())
            .collect();
        let reps: Vec<Replicate> = outcomes.into_iter().flatten().collect();
        let excluded = cfg.replications - reps.len();
        if excluded as f64 > 0.1 * cfg.replications as f64 {
            return Err(Error::Study(format!("{excluded} of {} replications failed at K = {k}", cfg.replications)));
        }
        let n = reps.len() as f64;
        let kf = k as f64;
        let mean_error = mean(reps.iter().map(|r| r.error));
        let var = reps.iter().map(|r| (r.error - mean_error).powi(2)).sum::<f64>() / (n - 1.0);
        let mc_variance_scaled = kf * var;
        let sigma2_plugin = mean(reps.iter().map(|r| r.sigma2_plugin));
        let sigma2_plugin_truth = oracle.thetas.as_ref().map(|_| mean(reps.iter().filter_map(|r| r.sigma2_truth)));
        let sigma_ref2 = oracle.sigma2.unwrap_or(sigma2_plugin);
        let standardize = |e: f64, s2: f64| if s2 > 0.0 { kf.sqrt() * e / s2.sqrt() } else { 0.0 };
        let z: Vec<f64> = reps.iter().map(|r| standardize(r.error, sigma_ref2)).collect();
        let z_plugin: Vec<f64> = reps.iter().map(|r| standardize(r.error, r.sigma2_plugin)).collect();
        let base = StudyRow {
            k,
            replications_used: reps.len(),
            excluded,
            mean_error,
            mc_variance_scaled,
            sigma2_oracle: oracle.sigma2,
            sigma2_plugin,
            sigma2_plugin_truth,
            ks_statistic: ks_statistic(&z)?,
            ks_statistic_plugin: ks_statistic(&z_plugin)?,
            variance_ratio: if sigma_ref2 > 0.0 { mc_variance_scaled / sigma_ref2 } else { f64::NAN },
            scheme: None,
            delta: None,
            coverage: None,
            mean_ci_width: None,
        };
        if with_intervals {
            let mut idx = 0;
            for scheme in &cfg.schemes {
                for &delta in &cfg.deltas {
                    let coverage = mean(reps.iter().map(|r| f64::from(u8::from(r.intervals[idx].0))));
                    let width = mean(reps.iter().map(|r| r.intervals[idx].1));
                    rows.push(StudyRow {
                        scheme: Some(scheme.tag()),
                        delta: Some(delta),
                        coverage: Some(coverage),
                        mean_ci_width: Some(width),
                        ..base.clone()
                    });
                    idx += 1;
                }
            }
        } else {
            rows.push(base);
        }
        runtime.push(start.elapsed().as_secs_f64());
    }
    let mut provenance = cfg.describe();
    provenance.insert(0, ("study".into(), kind.tag().into()));
    provenance.push(("true_value".into(), oracle.value.to_string()));
    Ok(StudyResult { kind, rows, provenance, runtime_secs: runtime })
}

/// Standardized-error normality per K.
pub fn study_normality<T: Real>(cfg: &StudyConfig<T>) -> Result<StudyResult> {
    run_study(cfg, StudyKind::Normality)
}

/// Bootstrap interval coverage of the true value per K, scheme and δ.
pub fn study_coverage<T: Real>(cfg: &StudyConfig<T>) -> Result<StudyResult> {
    run_study(cfg, StudyKind::Coverage)
}

/// `K · Var_MC(v̂)` against `σ²` at the true parameters per K.
pub fn study_cramer_rao<T: Real>(cfg: &StudyConfig<T>) -> Result<StudyResult> {
    run_study(cfg, StudyKind::CramerRao)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_of_constant_and_two_point_samples() {
        assert!((ks_statistic(&[0.0; 10]).unwrap() - 0.5).abs() < 1e-15);
        let far = ks_statistic(&[-40.0, 40.0]).unwrap();
        assert!((far - 0.5).abs() < 1e-12);
        assert!(ks_statistic(&[1.0]).is_err());
    }

    #[test]
    fn canonical_instances_are_valid() {
        let a = canonical_a::<f64>();
        assert_eq!((a.mdp.n_states(), a.mdp.n_actions(), a.mdp.horizon()), (2, 2, 2));
        let b = canonical_b::<f32>();
        assert_eq!((b.mdp.n_states(), b.mdp.n_actions(), b.mdp.horizon()), (4, 3, 4));
    }

    #[test]
    fn config_validation() {
        let inst = canonical_a::<f64>();
        assert!(StudyConfig::new(inst.clone(), Family::Tabular, vec![10], 50, 0).unwrap().validate().is_err());
        assert!(StudyConfig::new(inst.clone(), Family::Tabular, vec![20, 10], 100, 0).unwrap().validate().is_err());
        assert!(StudyConfig::new(inst, Family::Tabular, vec![10, 20], 100, 0).unwrap().validate().is_ok());
    }
}
