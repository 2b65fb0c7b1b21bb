//! Plug-in asymptotic variance, restricted χ² divergences, data-coverage
//! constants and leading-order error-bound evaluators.
//!
//! With `N = KH` transitions and 0-based stages the components are
//!
//! ```text
//! Σ_h      = (1/N) Σ_n ∇f(θ_h, φ_n) ∇f(θ_h, φ_n)ᵀ
//! ν_h      = E^π[∇f(θ_h, φ(s_h, a_h))]
//! Ω_{i,j}  = (1/N) Σ_n ∇f(θ_i, φ_n) ∇f(θ_j, φ_n)ᵀ ε_{i,n} ε_{j,n}
//! σ²       = (1/H) Σ_{i,j} ν_iᵀ Σ_i⁻¹ Ω_{i,j} Σ_j⁻¹ ν_j
//! ```
//!
//! so that `√K (v̂ − v)` is approximately `N(0, σ²)`.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;

use crate::approx::{state_values, Approximator, FeatureMap, ParamVector};
use crate::error::{config, Error, Result};
use crate::linalg::{spectral_norm, Conditioning, SpdFactor};
use crate::mdp::{
    exact_q_values, occupancy_measures, sample_trajectory, Dataset, Policy, TabularMdp, Transition,
};
use crate::rng::substream;
use crate::scalar::{count, lit, to_f64, Real};

/// Episodes per block when accumulating over a dataset; blocks are reduced in
/// index order so sums do not depend on the thread count.
const EPISODE_BLOCK: usize = 128;

/// How the target-policy gradient expectations `ν_h` are obtained.
#[derive(Debug, Clone, Copy)]
pub enum NuMode<'a, T> {
    /// Exact sums against the target occupancy of the simulator.
    ExactMdp(&'a TabularMdp<T>),
    /// Averages over `episodes` fresh target-policy rollouts.
    Rollout { mdp: &'a TabularMdp<T>, episodes: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct VarianceComponents<T> {
    pub sigma_h: Vec<Array2<T>>,
    pub nu_h: Vec<Array1<T>>,
    /// `omega[i][j]` is `Ω_{i,j}`.
    pub omega: Vec<Vec<Array2<T>>>,
    pub sigma2: T,
    pub theta_ref: Vec<ParamVector<T>>,
    /// Diagonal ridge added to each `Σ_h` before factoring (zero if none).
    pub jitter: Vec<T>,
    factors: Vec<SpdFactor<T>>,
}

impl<T: Real> VarianceComponents<T> {
    /// Assembles components from blocks and evaluates `σ²`.
    pub fn new(
        sigma_h: Vec<Array2<T>>,
        nu_h: Vec<Array1<T>>,
        omega: Vec<Vec<Array2<T>>>,
        theta_ref: Vec<ParamVector<T>>,
        conditioning: Conditioning,
    ) -> Result<Self> {
        let horizon = sigma_h.len();
        if horizon == 0 || nu_h.len() != horizon || omega.len() != horizon || omega.iter().any(|r| r.len() != horizon)
        {
            return config("variance components must have one block per stage");
        }
        let d = sigma_h[0].nrows();
        let square = |m: &Array2<T>| m.nrows() == d && m.ncols() == d;
        if !sigma_h.iter().all(square) || !omega.iter().flatten().all(square) || nu_h.iter().any(|v| v.len() != d) {
            return config("variance component blocks disagree in dimension");
        }
        let factors = sigma_h
            .iter()
            .map(|s| SpdFactor::new(s.view(), conditioning))
            .collect::<Result<Vec<_>>>()?;
        let jitter = factors.iter().map(|f| f.jitter).collect();
        let mut out = VarianceComponents { sigma_h, nu_h, omega, sigma2: T::zero(), theta_ref, jitter, factors };
        out.sigma2 = plug_in_sigma2(&out)?;
        Ok(out)
    }

    pub fn horizon(&self) -> usize {
        self.sigma_h.len()
    }

    pub fn dim(&self) -> usize {
        self.sigma_h[0].nrows()
    }

    pub fn factor(&self, h: usize) -> &SpdFactor<T> {
        &self.factors[h]
    }

    /// `Σ_h⁻¹ ν_h`.
    pub fn influence_direction(&self, h: usize) -> Array1<T> {
        self.factors[h].solve(self.nu_h[h].view())
    }
}

fn check_thetas<T: Real>(thetas: &[ParamVector<T>], approx: &Approximator, horizon: usize) -> Result<()> {
    if thetas.len() != horizon {
        return config(format!("{} parameter vectors for horizon {horizon}", thetas.len()));
    }
    if thetas.iter().any(|t| t.dim() != approx.dim()) {
        return config("parameter vector has the wrong dimension");
    }
    Ok(())
}

fn check_inputs<T: Real>(
    dataset: &Dataset<T>,
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    policy: &Policy<T>,
    thetas: &[ParamVector<T>],
) -> Result<()> {
    check_thetas(thetas, approx, dataset.horizon())?;
    if fmap.dim() != approx.input_dim {
        return config("feature map and approximator dimensions differ");
    }
    if policy.n_states() != fmap.n_states() || policy.n_actions() != fmap.n_actions() {
        return config("policy and feature map disagree on the state/action sets");
    }
    for t in dataset.transitions() {
        if t.s >= fmap.n_states() || t.s_next >= fmap.n_states() || t.a >= fmap.n_actions() {
            return config(format!("episode {} stage {} indexes outside the feature map", t.episode, t.h));
        }
    }
    Ok(())
}

/// `V_{h}(s) = Σ_a π(a|s) f(θ_h, φ(s, a))` for every stage and state, with an
/// extra all-zero row for `θ_H = 0`.
fn stage_state_values<T: Real>(
    approx: &Approximator,
    thetas: &[ParamVector<T>],
    policy: &Policy<T>,
    fmap: &FeatureMap<T>,
) -> Vec<Vec<T>> {
    let mut v: Vec<Vec<T>> = thetas.iter().map(|t| state_values(approx, t.view(), policy, fmap)).collect();
    v.push(vec![T::zero(); fmap.n_states()]);
    v
}

/// Bellman residual `ε_{j,n} = f(θ_j, φ_n) − r_n − Σ_a π(a|s'_n) f(θ_{j+1}, φ(s'_n, a))`
/// for stage `j` at transition `n` (episode-major order), with `θ_H = 0`.
pub fn residual_epsilon<T: Real>(
    dataset: &Dataset<T>,
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    policy: &Policy<T>,
    thetas: &[ParamVector<T>],
    j: usize,
    n: usize,
) -> Result<T> {
    let horizon = dataset.horizon();
    check_thetas(thetas, approx, horizon)?;
    if j >= horizon {
        return config(format!("stage {j} out of range for horizon {horizon}"));
    }
    if n >= dataset.n_transitions() {
        return config(format!("transition {n} out of range"));
    }
    let ep = &dataset.episodes()[n / horizon];
    let h = n % horizon;
    let (s, a, r, s_next) = (ep.states[h], ep.actions[h], ep.rewards[h], ep.states[h + 1]);
    let next = if j + 1 < horizon {
        crate::approx::expected_next_value(approx, thetas[j + 1].view(), s_next, policy, fmap)?
    } else {
        T::zero()
    };
    Ok(approx.eval(thetas[j].view(), fmap.phi(s, a))? - r - next)
}

struct Accumulated<T> {
    sigma: Vec<Array2<T>>,
    omega: Vec<Vec<Array2<T>>>,
}

fn zero_acc<T: Real>(horizon: usize, d: usize) -> Accumulated<T> {
    Accumulated {
        sigma: vec![Array2::zeros((d, d)); horizon],
        omega: vec![vec![Array2::zeros((d, d)); horizon]; horizon],
    }
}

fn add_outer<T: Real>(m: &mut Array2<T>, a: ArrayView1<T>, b: ArrayView1<T>, c: T) {
    let d = a.len();
    for i in 0..d {
        let ai = a[i] * c;
        if ai == T::zero() {
            continue;
        }
        for j in 0..d {
            m[[i, j]] += ai * b[j];
        }
    }
}

/// Raw sums of `∇f∇fᵀ` and `∇f∇fᵀ ε ε` over one block of episodes.
fn accumulate_block<T: Real>(
    transitions: &[Transition<T>],
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    thetas: &[ParamVector<T>],
    values: &[Vec<T>],
) -> Accumulated<T> {
    let horizon = thetas.len();
    let d = approx.dim();
    let mut acc = zero_acc(horizon, d);
    let mut grads = Array2::<T>::zeros((horizon, d));
    let mut eps = vec![T::zero(); horizon];
    for t in transitions {
        let phi = fmap.phi(t.s, t.a);
        for h in 0..horizon {
            approx.gradient_into(thetas[h].view(), phi, grads.row_mut(h));
            eps[h] = approx.value(thetas[h].view(), phi) - t.r - values[h + 1][t.s_next];
        }
        for i in 0..horizon {
            add_outer(&mut acc.sigma[i], grads.row(i), grads.row(i), T::one());
            for j in 0..horizon {
                add_outer(&mut acc.omega[i][j], grads.row(i), grads.row(j), eps[i] * eps[j]);
            }
        }
    }
    acc
}

fn nu_from_occupancy<T: Real>(
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    thetas: &[ParamVector<T>],
    per_step: &[Array2<T>],
) -> Vec<Array1<T>> {
    let d = approx.dim();
    let mut g = Array1::zeros(d);
    thetas
        .iter()
        .zip(per_step)
        .map(|(theta, mu)| {
            let mut nu = Array1::zeros(d);
            for s in 0..fmap.n_states() {
                for a in 0..fmap.n_actions() {
                    if mu[[s, a]] != T::zero() {
                        approx.gradient_into(theta.view(), fmap.phi(s, a), g.view_mut());
                        nu.scaled_add(mu[[s, a]], &g);
                    }
                }
            }
            nu
        })
        .collect()
}

fn nu_by_rollout<T: Real>(
    mdp: &TabularMdp<T>,
    policy: &Policy<T>,
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    thetas: &[ParamVector<T>],
    episodes: usize,
    seed: u64,
) -> Result<Vec<Array1<T>>> {
    if episodes == 0 {
        return config("rollout mode needs at least one episode");
    }
    let horizon = thetas.len();
    if mdp.horizon() != horizon {
        return config("simulator horizon differs from the parameter sequence");
    }
    let trajectories = (0..episodes)
        .into_par_iter()
        .map(|k| sample_trajectory(mdp, policy, &mut substream(seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = vec![Array2::<T>::zeros((mdp.n_states(), mdp.n_actions())); horizon];
    for tr in &trajectories {
        for h in 0..horizon {
            counts[h][[tr.states[h], tr.actions[h]]] += T::one();
        }
    }
    let m = count::<T>(episodes);
    for c in &mut counts {
        c.mapv_inplace(|x| x / m);
    }
    Ok(nu_from_occupancy(approx, fmap, thetas, &counts))
}

/// Plug-in components from data at `thetas`.
pub fn estimate_components<T: Real>(
    dataset: &Dataset<T>,
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    policy: &Policy<T>,
    thetas: &[ParamVector<T>],
    nu_mode: NuMode<'_, T>,
) -> Result<VarianceComponents<T>> {
    estimate_components_with(dataset, approx, fmap, policy, thetas, nu_mode, Conditioning::default())
}

pub fn estimate_components_with<T: Real>(
    dataset: &Dataset<T>,
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    policy: &Policy<T>,
    thetas: &[ParamVector<T>],
    nu_mode: NuMode<'_, T>,
    conditioning: Conditioning,
) -> Result<VarianceComponents<T>> {
    check_inputs(dataset, approx, fmap, policy, thetas)?;
    let horizon = dataset.horizon();
    let d = approx.dim();
    let values = stage_state_values(approx, thetas, policy, fmap);
    let transitions: Vec<Transition<T>> = dataset.transitions().collect();
    let block = EPISODE_BLOCK * horizon;
    let partial: Vec<Accumulated<T>> = transitions
        .par_chunks(block)
        .map(|chunk| accumulate_block(chunk, approx, fmap, thetas, &values))
        .collect();
    let mut acc = zero_acc(horizon, d);
    for p in partial {
        for i in 0..horizon {
            acc.sigma[i] += &p.sigma[i];
            for j in 0..horizon {
                acc.omega[i][j] += &p.omega[i][j];
            }
        }
    }
    let nf = count::<T>(dataset.n_transitions());
    let sigma_h: Vec<Array2<T>> = acc.sigma.into_iter().map(|m| m / nf).collect();
    let omega: Vec<Vec<Array2<T>>> =
        acc.omega.into_iter().map(|row| row.into_iter().map(|m| m / nf).collect()).collect();
    let nu_h = match nu_mode {
        NuMode::ExactMdp(mdp) => {
            if mdp.horizon() != horizon {
                return config("simulator horizon differs from the dataset");
            }
            let occ = occupancy_measures(mdp, policy)?;
            nu_from_occupancy(approx, fmap, thetas, &occ.per_step)
        }
        NuMode::Rollout { mdp, episodes, seed } => nu_by_rollout(mdp, policy, approx, fmap, thetas, episodes, seed)?,
    };
    VarianceComponents::new(sigma_h, nu_h, omega, thetas.to_vec(), conditioning)
}

/// Components as exact expectations under the simulator: the data law is the
/// stage-averaged behavior occupancy and `ε` is integrated over `p(·|s, a)`.
pub fn population_components<T: Real>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    target: &Policy<T>,
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    thetas: &[ParamVector<T>],
) -> Result<VarianceComponents<T>> {
    let horizon = mdp.horizon();
    check_thetas(thetas, approx, horizon)?;
    if fmap.n_states() != mdp.n_states() || fmap.n_actions() != mdp.n_actions() || fmap.dim() != approx.input_dim {
        return config("feature map does not match the MDP and approximator");
    }
    let d = approx.dim();
    let mu_bar = occupancy_measures(mdp, behavior)?.averaged;
    let mu_target = occupancy_measures(mdp, target)?.per_step;
    let values = stage_state_values(approx, thetas, target, fmap);
    let mut acc = zero_acc::<T>(horizon, d);
    let mut grads = Array2::<T>::zeros((horizon, d));
    let mut eps = vec![T::zero(); horizon];
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let w = mu_bar[[s, a]];
            if w == T::zero() {
                continue;
            }
            let phi = fmap.phi(s, a);
            for h in 0..horizon {
                approx.gradient_into(thetas[h].view(), phi, grads.row_mut(h));
            }
            for i in 0..horizon {
                add_outer(&mut acc.sigma[i], grads.row(i), grads.row(i), w);
            }
            let r = mdp.reward()[[s, a]];
            for s2 in 0..mdp.n_states() {
                let p = mdp.transition()[[s, a, s2]];
                if p == T::zero() {
                    continue;
                }
                for h in 0..horizon {
                    eps[h] = approx.value(thetas[h].view(), phi) - r - values[h + 1][s2];
                }
                for i in 0..horizon {
                    for j in 0..horizon {
                        add_outer(&mut acc.omega[i][j], grads.row(i), grads.row(j), w * p * eps[i] * eps[j]);
                    }
                }
            }
        }
    }
    let nu_h = nu_from_occupancy(approx, fmap, thetas, &mu_target);
    VarianceComponents::new(acc.sigma, nu_h, acc.omega, thetas.to_vec(), Conditioning::default())
}

/// Population FQE fixed point for a linear family: `θ_h` solves
/// `E_μ̄[φφᵀ] θ_h = E_μ̄[φ (r + Σ_{s'} p(s'|s,a) V_{θ_{h+1}}(s'))]` with the
/// stage-averaged behavior occupancy `μ̄`. With one-hot features this is the
/// true `Q_h` on every covered pair.
pub fn population_thetas<T: Real>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    target: &Policy<T>,
    approx: &Approximator,
    fmap: &FeatureMap<T>,
) -> Result<Vec<ParamVector<T>>> {
    if !approx.family.is_linear() {
        return config("population parameters are available for linear families only");
    }
    if fmap.n_states() != mdp.n_states() || fmap.n_actions() != mdp.n_actions() || fmap.dim() != approx.input_dim {
        return config("feature map does not match the MDP and approximator");
    }
    let d = fmap.dim();
    let mu_bar = occupancy_measures(mdp, behavior)?.averaged;
    let mut gram = Array2::<T>::zeros((d, d));
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let phi = fmap.phi(s, a);
            add_outer(&mut gram, phi, phi, mu_bar[[s, a]]);
        }
    }
    let factor = SpdFactor::new(gram.view(), Conditioning::Fail { max_condition: 1e12 })
        .map_err(|_| Error::Singular { rank: crate::linalg::psd_rank(gram.view()), dim: d })?;
    let horizon = mdp.horizon();
    let mut thetas = vec![ParamVector::zeros(d); horizon];
    let mut next_v = vec![T::zero(); mdp.n_states()];
    for h in (0..horizon).rev() {
        let mut rhs = Array1::<T>::zeros(d);
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let w = mu_bar[[s, a]];
                if w == T::zero() {
                    continue;
                }
                let mut y = mdp.reward()[[s, a]];
                for s2 in 0..mdp.n_states() {
                    y += mdp.transition()[[s, a, s2]] * next_v[s2];
                }
                rhs.scaled_add(w * y, &fmap.phi(s, a));
            }
        }
        let theta = ParamVector(factor.solve(rhs.view()));
        next_v = state_values(approx, theta.view(), target, fmap);
        thetas[h] = theta;
    }
    Ok(thetas)
}

/// Tabular `θ*`: the exact `Q_h` table, flattened as `s·A + a`.
pub fn tabular_true_thetas<T: Real>(mdp: &TabularMdp<T>, target: &Policy<T>) -> Result<Vec<ParamVector<T>>> {
    let q = exact_q_values(mdp, target)?;
    Ok((0..q.horizon()).map(|h| ParamVector(Array1::from_iter(q.stage(h).iter().copied()))).collect())
}

/// `σ² = (1/H) Σ_{i,j} ν_iᵀ Σ_i⁻¹ Ω_{i,j} Σ_j⁻¹ ν_j`, clamped at zero when
/// within rounding of it.
pub fn plug_in_sigma2<T: Real>(components: &VarianceComponents<T>) -> Result<T> {
    let horizon = components.horizon();
    let dirs: Vec<Array1<T>> = (0..horizon).map(|h| components.influence_direction(h)).collect();
    let mut total = T::zero();
    for i in 0..horizon {
        for j in 0..horizon {
            total += dirs[i].dot(&components.omega[i][j].dot(&dirs[j]));
        }
    }
    let s2 = total / count(horizon);
    if !s2.is_finite() {
        return Err(Error::Numeric("variance is not finite".into()));
    }
    if s2 < T::zero() {
        if s2 >= lit(-1e-10) {
            return Ok(T::zero());
        }
        return Err(Error::Inference(format!("quadratic form is negative ({s2:e})")));
    }
    Ok(s2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageDivergence {
    /// `ν_hᵀ Σ_h⁻¹ ν_h`.
    pub quad: f64,
    pub chi2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub per_h: Vec<StageDivergence>,
    /// `(Σ_h w_h ν_h)ᵀ Σ⁻¹ (Σ_h w_h ν_h) / (Σ_h w_h)² − 1` with `w_h = H − h`
    /// (0-based), using `Σ_0`; the restricted analogue of `χ²(μ̃, μ̄)`.
    pub tilde_chi2: f64,
    /// Standard `χ²(μ̃, μ̄)` when occupancies are supplied.
    pub tabular_chi2: Option<f64>,
    /// `max_h ‖Σ_h⁻¹ ν_h‖`, reported only.
    pub b0: f64,
}

impl DivergenceReport {
    /// `Σ_h (H − h) √quad_h` (0-based `h`).
    pub fn bracket(&self) -> f64 {
        let horizon = self.per_h.len();
        self.per_h.iter().enumerate().map(|(h, s)| (horizon - h) as f64 * s.quad.max(0.0).sqrt()).sum()
    }

    /// Attaches `χ²(μ̃, μ̄)` for flattened occupancies.
    pub fn with_tabular(mut self, mu_tilde: &[f64], mu_bar: &[f64]) -> Result<Self> {
        self.tabular_chi2 = Some(tabular_chi2(mu_tilde, mu_bar)?);
        Ok(self)
    }
}

pub fn restricted_chi2<T: Real>(components: &VarianceComponents<T>) -> Result<DivergenceReport> {
    let horizon = components.horizon();
    let mut per_h = Vec::with_capacity(horizon);
    let mut b0 = 0.0_f64;
    for h in 0..horizon {
        let quad = to_f64(components.factor(h).quad(components.nu_h[h].view()));
        if !(quad >= 0.0) {
            return Err(Error::Numeric(format!("stage {h} quadratic form is {quad}")));
        }
        per_h.push(StageDivergence { quad, chi2: quad - 1.0 });
        let dir = components.influence_direction(h);
        b0 = b0.max(to_f64(dir.dot(&dir)).sqrt());
    }
    let mut weighted = Array1::<T>::zeros(components.dim());
    for h in 0..horizon {
        weighted.scaled_add(count::<T>(horizon - h), &components.nu_h[h]);
    }
    let total_w = (horizon * (horizon + 1) / 2) as f64;
    let tilde_chi2 = to_f64(components.factor(0).quad(weighted.view())) / (total_w * total_w) - 1.0;
    Ok(DivergenceReport { per_h, tilde_chi2, tabular_chi2: None, b0 })
}

/// `χ²(μ, μ̄) = Σ μ²/μ̄ − 1`; infinite when `μ` charges a pair `μ̄` does not.
pub fn tabular_chi2(mu: &[f64], mu_bar: &[f64]) -> Result<f64> {
    if mu.len() != mu_bar.len() {
        return config("distributions have different supports");
    }
    let mut s = 0.0;
    for (&p, &q) in mu.iter().zip(mu_bar) {
        if p == 0.0 {
            continue;
        }
        if q <= 0.0 {
            return Ok(f64::INFINITY);
        }
        s += p * p / q;
    }
    Ok(s - 1.0)
}

/// `Ĉ₂ = max_{h, observed (s,a)} ∇f Σ_h⁻¹ ∇fᵀ / d`.
pub fn empirical_c2<T: Real>(
    dataset: &Dataset<T>,
    components: &VarianceComponents<T>,
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    thetas: &[ParamVector<T>],
) -> Result<f64> {
    check_thetas(thetas, approx, components.horizon())?;
    let pairs = observed_pairs(dataset, fmap);
    let d = approx.dim();
    let mut g = Array1::zeros(d);
    let mut best = 0.0_f64;
    for (h, theta) in thetas.iter().enumerate() {
        for &(s, a) in &pairs {
            approx.gradient_into(theta.view(), fmap.phi(s, a), g.view_mut());
            best = best.max(to_f64(components.factor(h).quad(g.view())));
        }
    }
    Ok(best / d as f64)
}

/// Dataset average of `∇f Σ_h⁻¹ ∇fᵀ` per stage (equal to `d` without jitter).
pub fn average_leverage<T: Real>(
    dataset: &Dataset<T>,
    components: &VarianceComponents<T>,
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    thetas: &[ParamVector<T>],
) -> Result<Vec<f64>> {
    check_thetas(thetas, approx, components.horizon())?;
    let mut g = Array1::zeros(approx.dim());
    let n = dataset.n_transitions() as f64;
    Ok(thetas
        .iter()
        .enumerate()
        .map(|(h, theta)| {
            dataset
                .transitions()
                .map(|t| {
                    approx.gradient_into(theta.view(), fmap.phi(t.s, t.a), g.view_mut());
                    to_f64(components.factor(h).quad(g.view()))
                })
                .sum::<f64>()
                / n
        })
        .collect())
}

fn observed_pairs<T: Real>(dataset: &Dataset<T>, fmap: &FeatureMap<T>) -> Vec<(usize, usize)> {
    let counts = dataset.pair_counts(fmap.n_states(), fmap.n_actions());
    let mut pairs = Vec::new();
    for s in 0..fmap.n_states() {
        for a in 0..fmap.n_actions() {
            if counts[[s, a]] > 0 {
                pairs.push((s, a));
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositivityReport {
    pub min_value: f64,
    pub holds: bool,
    pub pairs_checked: usize,
}

/// Minimum of `∇f(θ_h, φ(s,a)) Σ_h⁻¹ ∇f(θ_h, φ(s',a'))ᵀ` over pairs of observed
/// state-action pairs and all stages. Every pair is checked when `n_pairs`
/// covers them all; otherwise `n_pairs` pairs are drawn with replacement.
pub fn check_positivity<T: Real>(
    dataset: &Dataset<T>,
    components: &VarianceComponents<T>,
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    thetas: &[ParamVector<T>],
    n_pairs: usize,
    seed: u64,
) -> Result<PositivityReport> {
    if n_pairs == 0 {
        return config("positivity check needs at least one pair");
    }
    check_thetas(thetas, approx, components.horizon())?;
    let pairs = observed_pairs(dataset, fmap);
    let p = pairs.len();
    let exhaustive = n_pairs >= p * p;
    let mut rng = substream(seed, 0);
    let mut min_value = f64::INFINITY;
    let mut checked = 0;
    for (h, theta) in thetas.iter().enumerate() {
        let whitened: Vec<Array1<T>> = pairs
            .iter()
            .map(|&(s, a)| {
                let mut g = Array1::zeros(approx.dim());
                approx.gradient_into(theta.view(), fmap.phi(s, a), g.view_mut());
                components.factor(h).whiten(g.view())
            })
            .collect();
        let mut eval = |i: usize, j: usize| {
            min_value = min_value.min(to_f64(whitened[i].dot(&whitened[j])));
            checked += 1;
        };
        if exhaustive {
            for i in 0..p {
                for j in 0..p {
                    eval(i, j);
                }
            }
        } else {
            for _ in 0..n_pairs {
                let (i, j) = (rng.random_range(0..p), rng.random_range(0..p));
                eval(i, j);
            }
        }
    }
    Ok(PositivityReport { min_value, holds: min_value >= -1e-10, pairs_checked: checked })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    VarianceAware,
    RewardFree,
    Positivity,
}

impl BoundKind {
    pub fn tag(&self) -> &'static str {
        match self {
            BoundKind::VarianceAware => "variance_aware",
            BoundKind::RewardFree => "reward_free",
            BoundKind::Positivity => "positivity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub k: usize,
    pub horizon: usize,
    pub d: usize,
    pub delta: f64,
    pub c2_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub kind: BoundKind,
    pub leading_term: f64,
    pub secondary_term: f64,
    pub omitted_constant_note: String,
    pub inputs: BoundInputs,
}

impl BoundReport {
    pub fn total(&self) -> f64 {
        self.leading_term + self.secondary_term
    }
}

pub const OMITTED_CONSTANT_NOTE: &str = "excludes the O(1/K) term C/K: C depends on B(delta), D and the derivative \
     bounds kappa_1..kappa_3, which are not computable from data";

fn check_bound_args(k: usize, delta: f64) -> Result<()> {
    if k == 0 {
        return config("K must be at least 1");
    }
    if !(delta > 0.0 && delta < 1.0) {
        return config("delta must lie in (0, 1)");
    }
    Ok(())
}

/// Variance-aware bound: leading `√(2 log(6/δ) σ² / K)` and secondary
/// `(2/3K) log(6/δ) √(Ĉ₂ d) Σ_h (H − h) √quad_h` (0-based `h`).
pub fn bound_variance_aware<T: Real>(
    sigma2: f64,
    c2: f64,
    components: &VarianceComponents<T>,
    k: usize,
    delta: f64,
) -> Result<BoundReport> {
    check_bound_args(k, delta)?;
    let divergences = restricted_chi2(components)?;
    let d = components.dim();
    let log_term = (6.0 / delta).ln();
    let kf = k as f64;
    let leading = (2.0 * log_term * sigma2.max(0.0) / kf).sqrt();
    let secondary = (2.0 / 3.0) * log_term * (c2 * d as f64).sqrt() * divergences.bracket() / kf;
    Ok(BoundReport {
        kind: BoundKind::VarianceAware,
        leading_term: leading,
        secondary_term: secondary,
        omitted_constant_note: OMITTED_CONSTANT_NOTE.to_string(),
        inputs: BoundInputs { k, horizon: components.horizon(), d, delta, c2_hat: c2 },
    })
}

/// Reward-free bound: `B = Σ_h (H − h) √(1 + χ²_h)`, leading `B √(log(12/δ)/(2KH))`,
/// secondary `B · 4 ln(12dH/δ)/(3K) · √(Ĉ₂ d H)`.
pub fn bound_reward_free(
    divergences: &DivergenceReport,
    c2: f64,
    k: usize,
    horizon: usize,
    d: usize,
    delta: f64,
) -> Result<BoundReport> {
    check_bound_args(k, delta)?;
    if divergences.per_h.len() != horizon {
        return config("divergence report does not match the horizon");
    }
    let horizon_f = horizon as f64;
    let kf = k as f64;
    let bracket: f64 = divergences
        .per_h
        .iter()
        .enumerate()
        .map(|(h, s)| (horizon - h) as f64 * (1.0 + s.chi2).max(0.0).sqrt())
        .sum();
    let leading = bracket * ((12.0 / delta).ln() / (2.0 * kf * horizon_f)).sqrt();
    let secondary =
        bracket * 4.0 * (12.0 * d as f64 * horizon_f / delta).ln() / (3.0 * kf) * (c2 * d as f64 * horizon_f).sqrt();
    Ok(BoundReport {
        kind: BoundKind::RewardFree,
        leading_term: leading,
        secondary_term: secondary,
        omitted_constant_note: OMITTED_CONSTANT_NOTE.to_string(),
        inputs: BoundInputs { k, horizon, d, delta, c2_hat: c2 },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossCovariance<T> {
    pub sigma_h1h2: Array2<T>,
    /// `‖Σ_{h1}^{-1/2} Σ_{h1,h2} Σ_{h2}^{-1/2}‖₂`.
    pub sigma_norm: f64,
}

/// Empirical `Σ_{h1,h2} = (1/N) Σ_n ∇f(θ_{h1}, φ_n) ∇f(θ_{h2}, φ_n)ᵀ` and its
/// whitened spectral norm, whitening with the factors held in `components`.
pub fn cross_covariance<T: Real>(
    dataset: &Dataset<T>,
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    thetas: &[ParamVector<T>],
    components: &VarianceComponents<T>,
    h1: usize,
    h2: usize,
) -> Result<CrossCovariance<T>> {
    let horizon = components.horizon();
    check_thetas(thetas, approx, horizon)?;
    if h1 >= horizon || h2 >= horizon {
        return config("stage index out of range");
    }
    let d = approx.dim();
    let mut m = Array2::<T>::zeros((d, d));
    let mut g1 = Array1::zeros(d);
    let mut g2 = Array1::zeros(d);
    for t in dataset.transitions() {
        let phi = fmap.phi(t.s, t.a);
        approx.gradient_into(thetas[h1].view(), phi, g1.view_mut());
        approx.gradient_into(thetas[h2].view(), phi, g2.view_mut());
        add_outer(&mut m, g1.view(), g2.view(), T::one());
    }
    m /= count::<T>(dataset.n_transitions());
    // L₁⁻¹ M L₂⁻ᵀ: whiten columns by L₁, then rows by L₂
    let mut left = Array2::<T>::zeros((d, d));
    for j in 0..d {
        left.column_mut(j).assign(&components.factor(h1).whiten(m.column(j)));
    }
    let mut whitened = Array2::<T>::zeros((d, d));
    for i in 0..d {
        whitened.row_mut(i).assign(&components.factor(h2).whiten(left.row(i)));
    }
    let sigma_norm = to_f64(spectral_norm(whitened.view()));
    Ok(CrossCovariance { sigma_h1h2: m, sigma_norm })
}

/// Positivity-case bound: leading
/// `[Σ_{h1,h2} (H − h1)(H − h2) √quad_{h1} √quad_{h2} σ_{h1,h2}]^{1/2} √(log(12/δ)/(2HK))`.
/// `sigma_norms[h1][h2]` are the whitened cross-covariance norms.
pub fn bound_positivity(
    divergences: &DivergenceReport,
    sigma_norms: &[Vec<f64>],
    c2: f64,
    k: usize,
    d: usize,
    delta: f64,
) -> Result<BoundReport> {
    check_bound_args(k, delta)?;
    let horizon = divergences.per_h.len();
    if sigma_norms.len() != horizon || sigma_norms.iter().any(|r| r.len() != horizon) {
        return config("cross-covariance norms must form an H×H grid");
    }
    let root: Vec<f64> = divergences
        .per_h
        .iter()
        .enumerate()
        .map(|(h, s)| (horizon - h) as f64 * s.quad.max(0.0).sqrt())
        .collect();
    let mut inner = 0.0;
    for i in 0..horizon {
        for j in 0..horizon {
            inner += root[i] * root[j] * sigma_norms[i][j];
        }
    }
    let leading = inner.max(0.0).sqrt() * ((12.0 / delta).ln() / (2.0 * horizon as f64 * k as f64)).sqrt();
    Ok(BoundReport {
        kind: BoundKind::Positivity,
        leading_term: leading,
        secondary_term: 0.0,
        omitted_constant_note: format!("{OMITTED_CONSTANT_NOTE}; the O(1/K) term has no displayed form here"),
        inputs: BoundInputs { k, horizon, d, delta, c2_hat: c2 },
    })
}

/// Variance of a linear-family FQE estimate assembled directly from the
/// feature covariance: `Σ_{i,j} ν_iᵀ Σ⁻¹ Ω_{i,j} Σ⁻¹ ν_j` with one shared
/// `Σ = (1/N) Σ_n φ_n φ_nᵀ` and `ν_h` from the simulator's target occupancy.
///
/// This normalization has no `1/H` and pairs with `√N (v̂ − v)`; it is `H`
/// times [`plug_in_sigma2`].
pub fn linear_sigma2<T: Real>(
    dataset: &Dataset<T>,
    policy: &Policy<T>,
    fmap: &FeatureMap<T>,
    thetas: &[ParamVector<T>],
    mdp: &TabularMdp<T>,
) -> Result<T> {
    let approx = Approximator::linear(fmap.dim());
    check_inputs(dataset, &approx, fmap, policy, thetas)?;
    let horizon = dataset.horizon();
    let d = fmap.dim();
    let mut gram = Array2::<T>::zeros((d, d));
    for t in dataset.transitions() {
        let phi = fmap.phi(t.s, t.a);
        add_outer(&mut gram, phi, phi, T::one());
    }
    let nf = count::<T>(dataset.n_transitions());
    gram /= nf;
    let factor = SpdFactor::new(gram.view(), Conditioning::default())?;
    let occ = occupancy_measures(mdp, policy)?;
    let dirs: Vec<Array1<T>> = occ
        .per_step
        .iter()
        .map(|mu| {
            let mut nu = Array1::zeros(d);
            for s in 0..fmap.n_states() {
                for a in 0..fmap.n_actions() {
                    nu.scaled_add(mu[[s, a]], &fmap.phi(s, a));
                }
            }
            factor.solve(nu.view())
        })
        .collect();
    // project each transition's score on the influence directions
    let proj: Vec<Array1<T>> = dirs.iter().map(|u| fmap.table().dot(u)).collect();
    let values: Vec<Vec<T>> = {
        let mut v: Vec<Vec<T>> = thetas.iter().map(|t| state_values(&approx, t.view(), policy, fmap)).collect();
        v.push(vec![T::zero(); fmap.n_states()]);
        v
    };
    let fitted: Vec<Array1<T>> = thetas.iter().map(|t| fmap.table().dot(&t.0)).collect();
    let na = fmap.n_actions();
    let mut total = T::zero();
    for t in dataset.transitions() {
        let x = t.s * na + t.a;
        let mut score = T::zero();
        for h in 0..horizon {
            let eps = fitted[h][x] - t.r - values[h + 1][t.s_next];
            score += proj[h][x] * eps;
        }
        total += score * score;
    }
    Ok(total / nf)
}

/// Tabular marginal-importance-sampling variance from the simulator:
/// `(1/H) Σ_x μ̄(x) Var_{s'∼p(·|x)}[Σ_h w_h(x) V_{h+1}(s')]` with density
/// ratios `w_h = μ_h / μ̄` and exact `V`.
pub fn tabular_mis_variance<T: Real>(mdp: &TabularMdp<T>, behavior: &Policy<T>, target: &Policy<T>) -> Result<f64> {
    let horizon = mdp.horizon();
    let mu_bar = occupancy_measures(mdp, behavior)?.averaged;
    let mu = occupancy_measures(mdp, target)?.per_step;
    let q = exact_q_values(mdp, target)?;
    let v = |h: usize, s: usize| if h >= horizon { 0.0 } else { to_f64(q.v(h, s, target)) };
    let mut total = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let base = to_f64(mu_bar[[s, a]]);
            let w: Vec<f64> = mu.iter().map(|m| to_f64(m[[s, a]])).collect();
            if base == 0.0 {
                if w.iter().any(|&x| x > 0.0) {
                    return Err(Error::Inference("target occupancy is not covered by the behavior policy".into()));
                }
                continue;
            }
            let g = |s2: usize| (0..horizon).map(|h| w[h] / base * v(h + 1, s2)).sum::<f64>();
            let mut mean = 0.0;
            let mut second = 0.0;
            for s2 in 0..mdp.n_states() {
                let p = to_f64(mdp.transition()[[s, a, s2]]);
                let gv = g(s2);
                mean += p * gv;
                second += p * gv * gv;
            }
            total += base * (second - mean * mean);
        }
    }
    Ok(total / horizon as f64)
}

/// Data version of [`tabular_mis_variance`]: counts `n_x`, empirical successor
/// laws and `V` from the supplied tables. For a tabular FQE fit (where each
/// `θ_h(x)` is the mean backup at `x`) this equals [`plug_in_sigma2`].
pub fn tabular_mis_variance_empirical<T: Real>(
    dataset: &Dataset<T>,
    mdp: &TabularMdp<T>,
    target: &Policy<T>,
    q_tables: &[ParamVector<T>],
) -> Result<f64> {
    let horizon = dataset.horizon();
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    if q_tables.len() != horizon || q_tables.iter().any(|t| t.dim() != ns * na) {
        return config("expected one Q table per stage");
    }
    let mu = occupancy_measures(mdp, target)?.per_step;
    let v = |h: usize, s: usize| -> f64 {
        if h >= horizon {
            return 0.0;
        }
        (0..na).map(|a| to_f64(target.prob(s, a)) * to_f64(q_tables[h].0[s * na + a])).sum()
    };
    let n = dataset.n_transitions() as f64;
    let mut counts = vec![0usize; ns * na];
    let mut succ = vec![vec![0usize; ns]; ns * na];
    let mut rew = vec![0.0_f64; ns * na];
    for t in dataset.transitions() {
        let x = t.s * na + t.a;
        counts[x] += 1;
        succ[x][t.s_next] += 1;
        rew[x] += to_f64(t.r);
    }
    let mut total = 0.0;
    for x in 0..ns * na {
        if counts[x] == 0 {
            continue;
        }
        let nx = counts[x] as f64;
        let freq = nx / n;
        let w: Vec<f64> = mu.iter().map(|m| to_f64(m[[x / na, x % na]]) / freq).collect();
        let r_bar = rew[x] / nx;
        // second moment of Σ_h w_h ε_h over the pair's transitions
        let mut second = 0.0;
        for s2 in 0..ns {
            if succ[x][s2] == 0 {
                continue;
            }
            let e: f64 =
                (0..horizon).map(|h| w[h] * (to_f64(q_tables[h].0[x]) - r_bar - v(h + 1, s2))).sum::<f64>();
            second += succ[x][s2] as f64 / nx * e * e;
        }
        total += freq * second;
    }
    Ok(total / horizon as f64)
}
