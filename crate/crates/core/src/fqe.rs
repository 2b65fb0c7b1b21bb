//! Fitted Q-evaluation: backward per-stage least-squares fits, optional
//! per-episode weights, KKT/Z-function diagnostics and the closed-form linear
//! recursion.
//!
//! Stage `h` minimizes
//!
//! ```text
//! (1/2N) Σ_n w(n) (f(θ, φ_n) − y_n)² + λ ρ(θ),   y_n = r_n + Σ_a π(a|s'_n) f(θ̂_{h+1}, φ(s'_n, a))
//! ```
//!
//! with `ρ(θ) = ½‖θ‖²` and `θ̂_{H+1} = 0`. Because features depend on the
//! state-action pair only, the loss is reduced to one weighted residual per
//! observed pair before solving.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::approx::{random_params, state_values, Approximator, Family, FeatureMap, ParamVector};
use crate::error::{config, Error, Result};
use crate::linalg::{cholesky, psd_rank, solve_lower, solve_lower_transpose};
use crate::mdp::{Dataset, Policy};
use crate::scalar::{count, lit, to_f64, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    HalfSquaredNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    NormalEquations,
    GaussNewton,
    GradientDescent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zeros,
    /// Start stage `h` from `θ̂_{h+1}`; the last stage, whose successor is the
    /// zero function, starts from a seeded random draw for nonlinear families.
    WarmStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// `None` picks normal equations for linear families and Gauss-Newton otherwise.
    pub method: Option<SolverMethod>,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub initial_damping: f64,
    /// Damping above this switches Gauss-Newton to gradient-descent steps.
    pub max_damping: f64,
    pub max_halvings: usize,
    /// Initial step for gradient descent.
    pub gd_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: None,
            max_iters: 5_000,
            grad_tol: 1e-9,
            initial_damping: 1e-3,
            max_damping: 1e10,
            max_halvings: 40,
            gd_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FqeConfig {
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub solver: SolverConfig,
    pub init: Init,
    pub init_scale: f64,
    pub init_seed: u64,
    /// Half-width of the parameter box Θ.
    pub theta_max: f64,
    /// Project iterates onto Θ instead of only reporting contact.
    pub project_to_box: bool,
}

impl Default for FqeConfig {
    fn default() -> Self {
        FqeConfig {
            lambda: 0.0,
            regularizer: Regularizer::HalfSquaredNorm,
            solver: SolverConfig::default(),
            init: Init::WarmStart,
            init_scale: 0.5,
            init_seed: 0,
            theta_max: 1e6,
            project_to_box: false,
        }
    }
}

impl FqeConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        FqeConfig { lambda, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return config("lambda must be non-negative");
        }
        if !(self.solver.grad_tol > 0.0) {
            return config("grad_tol must be positive");
        }
        if !(self.theta_max > 0.0) {
            return config("theta_max must be positive");
        }
        Ok(())
    }

    /// Effective `λ` multiplying `∇ρ(θ) = θ`.
    fn ridge(&self) -> f64 {
        match self.regularizer {
            Regularizer::None => 0.0,
            Regularizer::HalfSquaredNorm => self.lambda,
        }
    }

    fn method_for(&self, family: Family) -> SolverMethod {
        self.solver.method.unwrap_or(if family.is_linear() {
            SolverMethod::NormalEquations
        } else {
            SolverMethod::GaussNewton
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub method: SolverMethod,
    pub iters: usize,
    pub final_grad_norm: f64,
    pub loss: f64,
    pub converged: bool,
    /// Some coordinate of θ̂ reached the box Θ.
    pub touched_box: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FqeEstimate<T> {
    pub family: Family,
    /// `thetas[h]` is θ̂ for stage `h` (0-based).
    pub thetas: Vec<ParamVector<T>>,
    pub value: T,
    pub per_stage: Vec<SolverReport>,
}

impl<T: Real> FqeEstimate<T> {
    pub fn converged(&self) -> bool {
        self.per_stage.iter().all(|r| r.converged)
    }

    pub fn touched_box(&self) -> bool {
        self.per_stage.iter().any(|r| r.touched_box)
    }
}

/// Per-episode bootstrap weights, nonnegative and summing to `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector<T>(Vec<T>);

impl<T: Real> WeightVector<T> {
    pub fn new(weights: Vec<T>) -> Result<Self> {
        if weights.is_empty() {
            return config("weight vector must be nonempty");
        }
        if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(Error::Validation("weights must be finite and nonnegative".into()));
        }
        let k = weights.len() as f64;
        let sum: f64 = weights.iter().map(|&w| to_f64(w)).sum();
        let tol = if T::epsilon() < lit(1e-10) { 1e-9 } else { 1e-4 } * k.max(1.0);
        if (sum - k).abs() > tol {
            return Err(Error::Validation(format!("weights sum to {sum}, expected {k}")));
        }
        Ok(WeightVector(weights))
    }

    pub fn ones(k: usize) -> Self {
        WeightVector(vec![T::one(); k])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_shapes<T: Real>(
    dataset: &Dataset<T>,
    policy: &Policy<T>,
    approx: &Approximator,
    fmap: &FeatureMap<T>,
) -> Result<()> {
    if fmap.dim() != approx.input_dim {
        return config(format!("features have dimension {}, approximator expects {}", fmap.dim(), approx.input_dim));
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

/// Regression targets `y_n = r_n + Σ_a π(a|s'_n) f(θ_next, φ(s'_n, a))` in
/// episode-major, stage-minor order.
pub fn build_targets<T: Real>(
    dataset: &Dataset<T>,
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    theta_next: &ParamVector<T>,
    policy: &Policy<T>,
) -> Result<Vec<T>> {
    check_shapes(dataset, policy, approx, fmap)?;
    if theta_next.dim() != approx.dim() {
        return config("theta_next has the wrong dimension");
    }
    let v = state_values(approx, theta_next.view(), policy, fmap);
    Ok(dataset.transitions().map(|t| t.r + v[t.s_next]).collect())
}

/// Least squares over observed pairs: `½ Σ_x ω_x (f(θ, φ_x) − ȳ_x)² + ½ c + λ ρ(θ)`,
/// with `ω_x = W_x / N` and `c` the within-pair weighted spread of the targets.
struct PairProblem<'a, T> {
    approx: &'a Approximator,
    points: Vec<ndarray::ArrayView1<'a, T>>,
    omega: Vec<T>,
    mean: Vec<T>,
    spread: T,
    ridge: T,
}

impl<'a, T: Real> PairProblem<'a, T> {
    fn new(
        dataset: &Dataset<T>,
        targets: &[T],
        approx: &'a Approximator,
        fmap: &'a FeatureMap<T>,
        weights: Option<&WeightVector<T>>,
        ridge: T,
    ) -> Self {
        let n_pairs = fmap.n_states() * fmap.n_actions();
        let na = fmap.n_actions();
        let mut wsum = vec![T::zero(); n_pairs];
        let mut wy = vec![T::zero(); n_pairs];
        for (t, &y) in dataset.transitions().zip(targets) {
            let w = weights.map_or(T::one(), |w| w.as_slice()[t.episode]);
            let x = t.s * na + t.a;
            wsum[x] += w;
            wy[x] += w * y;
        }
        let mut spread = T::zero();
        let mean: Vec<T> = (0..n_pairs)
            .map(|x| if wsum[x] > T::zero() { wy[x] / wsum[x] } else { T::zero() })
            .collect();
        for (t, &y) in dataset.transitions().zip(targets) {
            let w = weights.map_or(T::one(), |w| w.as_slice()[t.episode]);
            let e = y - mean[t.s * na + t.a];
            spread += w * e * e;
        }
        let nf = count::<T>(dataset.n_transitions());
        let mut points = Vec::new();
        let mut omega = Vec::new();
        let mut means = Vec::new();
        for x in 0..n_pairs {
            if wsum[x] > T::zero() {
                points.push(fmap.phi(x / na, x % na));
                omega.push(wsum[x] / nf);
                means.push(mean[x]);
            }
        }
        PairProblem { approx, points, omega, mean: means, spread: spread / nf, ridge }
    }

    fn loss(&self, theta: &Array1<T>) -> T {
        let half = lit::<T>(0.5);
        let mut l = half * self.spread;
        for ((phi, &w), &m) in self.points.iter().zip(&self.omega).zip(&self.mean) {
            let e = self.approx.value(theta.view(), *phi) - m;
            l += half * w * e * e;
        }
        l + half * self.ridge * theta.dot(theta)
    }

    /// Gradient, and Gauss-Newton matrix if requested.
    fn derivatives(&self, theta: &Array1<T>, want_hessian: bool) -> (Array1<T>, Option<Array2<T>>) {
        let d = theta.len();
        let mut g = theta * self.ridge;
        let mut hess = want_hessian.then(|| Array2::<T>::eye(d) * self.ridge);
        let mut jac = Array1::zeros(d);
        for ((phi, &w), &m) in self.points.iter().zip(&self.omega).zip(&self.mean) {
            self.approx.gradient_into(theta.view(), *phi, jac.view_mut());
            let e = self.approx.value(theta.view(), *phi) - m;
            g.scaled_add(w * e, &jac);
            if let Some(h) = hess.as_mut() {
                for i in 0..d {
                    let wi = w * jac[i];
                    if wi == T::zero() {
                        continue;
                    }
                    for j in 0..d {
                        h[[i, j]] += wi * jac[j];
                    }
                }
            }
        }
        (g, hess)
    }
}

fn norm<T: Real>(v: &Array1<T>) -> f64 {
    to_f64(v.dot(v)).sqrt()
}

fn solve_spd<T: Real>(a: &Array2<T>, b: &Array1<T>) -> Result<Array1<T>> {
    match cholesky(a.view()) {
        Some(l) => {
            let y = solve_lower(l.view(), b.view());
            Ok(solve_lower_transpose(l.view(), y.view()))
        }
        None => Err(Error::Singular { rank: psd_rank(a.view()), dim: a.nrows() }),
    }
}

fn report<T: Real>(
    problem: &PairProblem<'_, T>,
    theta: &Array1<T>,
    method: SolverMethod,
    iters: usize,
    cfg: &FqeConfig,
) -> SolverReport {
    let (g, _) = problem.derivatives(theta, false);
    let grad_norm = norm(&g);
    SolverReport {
        method,
        iters,
        final_grad_norm: grad_norm,
        loss: to_f64(problem.loss(theta)),
        converged: grad_norm <= cfg.solver.grad_tol || method == SolverMethod::NormalEquations,
        touched_box: ParamVector(theta.clone()).touches_box(lit(cfg.theta_max)),
    }
}

fn solve_normal_equations<T: Real>(problem: &PairProblem<'_, T>, d: usize) -> Result<Array1<T>> {
    let zero = Array1::zeros(d);
    let (g0, h) = problem.derivatives(&zero, true);
    // linear in θ: gradient at 0 is −b and the Gauss-Newton matrix is exact
    solve_spd(&h.expect("hessian requested"), &(-g0))
}

fn project<T: Real>(theta: &mut Array1<T>, cfg: &FqeConfig) {
    if cfg.project_to_box {
        let m = lit::<T>(cfg.theta_max);
        theta.mapv_inplace(|x| x.max(-m).min(m));
    }
}

/// Backtracking along `dir` from `theta`. Accepts an Armijo decrease, or a
/// step that keeps the loss within rounding and reduces the gradient norm.
#[allow(clippy::too_many_arguments)]
fn line_search<T: Real>(
    problem: &PairProblem<'_, T>,
    theta: &Array1<T>,
    loss: T,
    grad: &Array1<T>,
    grad_norm: f64,
    dir: &Array1<T>,
    initial: T,
    cfg: &FqeConfig,
) -> Option<(Array1<T>, T)> {
    let slope = grad.dot(dir);
    if !(slope < T::zero()) {
        return None;
    }
    let mut t = initial;
    let c = lit::<T>(1e-4);
    let round = loss.abs() * lit::<T>(1e-13) + lit::<T>(1e-300_f64.max(to_f64(T::min_positive_value())));
    for _ in 0..=cfg.solver.max_halvings {
        let mut cand = theta + &(dir * t);
        project(&mut cand, cfg);
        let l = problem.loss(&cand);
        if l.is_finite() {
            if l <= loss + c * t * slope {
                return Some((cand, t));
            }
            if l <= loss + round {
                let (g, _) = problem.derivatives(&cand, false);
                if norm(&g) < grad_norm {
                    return Some((cand, t));
                }
            }
        }
        t *= lit(0.5);
    }
    None
}

fn solve_iterative<T: Real>(
    problem: &PairProblem<'_, T>,
    start: Array1<T>,
    method: SolverMethod,
    cfg: &FqeConfig,
) -> (Array1<T>, usize, SolverMethod) {
    let mut theta = start;
    let mut mu = cfg.solver.initial_damping;
    let mut gd_step = lit::<T>(cfg.solver.gd_step);
    let mut mode = method;
    let mut iters = 0;
    while iters < cfg.solver.max_iters {
        let want_h = mode == SolverMethod::GaussNewton;
        let (g, h) = problem.derivatives(&theta, want_h);
        let gn = norm(&g);
        if gn <= cfg.solver.grad_tol {
            break;
        }
        iters += 1;
        let loss = problem.loss(&theta);
        match (mode, h) {
            (SolverMethod::GaussNewton, Some(h)) => {
                let d = theta.len();
                let scale = (0..d).map(|i| to_f64(h[[i, i]])).sum::<f64>() / d as f64;
                let scale = if scale > 0.0 { scale } else { 1.0 };
                let mut accepted = false;
                while mu <= cfg.solver.max_damping {
                    let mut damped = h.clone();
                    for i in 0..d {
                        damped[[i, i]] += lit::<T>(mu * scale);
                    }
                    if let Ok(step) = solve_spd(&damped, &g.mapv(|x| -x)) {
                        if let Some((next, t)) = line_search(problem, &theta, loss, &g, gn, &step, T::one(), cfg) {
                            theta = next;
                            mu = if t == T::one() { (mu / 3.0).max(1e-15) } else { mu * 2.0 };
                            accepted = true;
                            break;
                        }
                    }
                    mu *= 10.0;
                }
                if !accepted {
                    mode = SolverMethod::GradientDescent;
                }
            }
            _ => {
                let dir = g.mapv(|x| -x);
                match line_search(problem, &theta, loss, &g, gn, &dir, gd_step, cfg) {
                    Some((next, t)) => {
                        theta = next;
                        gd_step = t * lit(2.0);
                    }
                    None => break,
                }
            }
        }
    }
    (theta, iters, mode)
}

/// Fits one stage. `warm` is the starting point for iterative solvers.
pub fn fit_stage<T: Real>(
    dataset: &Dataset<T>,
    targets: &[T],
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    cfg: &FqeConfig,
    weights: Option<&WeightVector<T>>,
    warm: Option<&ParamVector<T>>,
) -> Result<(ParamVector<T>, SolverReport)> {
    cfg.validate()?;
    if targets.len() != dataset.n_transitions() {
        return config(format!("{} targets for {} transitions", targets.len(), dataset.n_transitions()));
    }
    if let Some(w) = weights {
        if w.len() != dataset.n_episodes() {
            return config(format!("{} weights for {} episodes", w.len(), dataset.n_episodes()));
        }
    }
    if fmap.dim() != approx.input_dim {
        return config("feature map and approximator dimensions differ");
    }
    let d = approx.dim();
    let problem = PairProblem::new(dataset, targets, approx, fmap, weights, lit(cfg.ridge()));
    let method = cfg.method_for(approx.family);
    if method == SolverMethod::NormalEquations && !approx.family.is_linear() {
        return config("normal equations apply only to linear families");
    }
    let (theta, iters, used) = match method {
        SolverMethod::NormalEquations => {
            let mut theta = solve_normal_equations(&problem, d)?;
            project(&mut theta, cfg);
            (theta, 1, method)
        }
        _ => {
            let start = match (cfg.init, warm) {
                (Init::WarmStart, Some(w)) if w.dim() == d && w.0.iter().any(|x| *x != T::zero()) => w.0.clone(),
                (Init::WarmStart, _) if !approx.family.is_linear() => {
                    random_params::<T>(approx, cfg.init_scale, cfg.init_seed).0
                }
                _ => Array1::zeros(d),
            };
            solve_iterative(&problem, start, method, cfg)
        }
    };
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("stage fit produced non-finite parameters".into()));
    }
    let rep = report(&problem, &theta, used, iters, cfg);
    Ok((ParamVector(theta), rep))
}

/// `Σ_s ξ(s) Σ_a π(a|s) f(θ, φ(s, a))`.
pub fn estimate_value<T: Real>(
    approx: &Approximator,
    theta: &ParamVector<T>,
    policy: &Policy<T>,
    fmap: &FeatureMap<T>,
    xi: &[T],
) -> Result<T> {
    if xi.len() != fmap.n_states() {
        return config("initial distribution has the wrong length");
    }
    let v = state_values(approx, theta.view(), policy, fmap);
    Ok(xi.iter().zip(&v).map(|(&p, &v)| p * v).sum())
}

/// Runs the backward recursion `h = H−1, …, 0` and integrates `θ̂_0` against `ξ`.
pub fn run_fqe<T: Real>(
    dataset: &Dataset<T>,
    policy: &Policy<T>,
    xi: &[T],
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    cfg: &FqeConfig,
    weights: Option<&WeightVector<T>>,
) -> Result<FqeEstimate<T>> {
    check_shapes(dataset, policy, approx, fmap)?;
    let horizon = dataset.horizon();
    let d = approx.dim();
    let mut thetas = vec![ParamVector::zeros(d); horizon];
    let mut reports = Vec::with_capacity(horizon);
    let mut next = ParamVector::zeros(d);
    for h in (0..horizon).rev() {
        let targets = build_targets(dataset, approx, fmap, &next, policy)?;
        let (theta, rep) = fit_stage(dataset, &targets, approx, fmap, cfg, weights, Some(&next))?;
        reports.push(rep);
        thetas[h] = theta.clone();
        next = theta;
    }
    reports.reverse();
    let value = estimate_value(approx, &thetas[0], policy, fmap, xi)?;
    Ok(FqeEstimate { family: approx.family, thetas, value, per_stage: reports })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZResidual {
    /// `‖Σ_k z_(h)(θ, τ_k) + N λ ∇ρ(θ_h)‖` per stage.
    pub per_stage_norms: Vec<f64>,
    pub total_norm: f64,
    /// `total_norm / N`: the norm of the stacked per-stage loss gradients.
    pub scaled_norm: f64,
}

/// Stacked estimating equations evaluated transition by transition.
///
/// Stage `h` contributes `Σ_n (f(θ_h, φ_n) − r_n − Σ_a π(a|s'_n) f(θ_{h+1}, φ(s'_n, a))) ∇f(θ_h, φ_n)
/// + N λ θ_h`, which is `N` times the gradient of the stage loss.
pub fn z_residual<T: Real>(
    dataset: &Dataset<T>,
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    policy: &Policy<T>,
    thetas: &[ParamVector<T>],
    lambda: f64,
    regularizer: Regularizer,
) -> Result<ZResidual> {
    check_shapes(dataset, policy, approx, fmap)?;
    let horizon = dataset.horizon();
    if thetas.len() != horizon {
        return config(format!("{} parameter vectors for horizon {horizon}", thetas.len()));
    }
    let d = approx.dim();
    let nf = count::<T>(dataset.n_transitions());
    let ridge = match regularizer {
        Regularizer::None => T::zero(),
        Regularizer::HalfSquaredNorm => lit(lambda),
    };
    let zero = ParamVector::zeros(d);
    let mut per_stage = Vec::with_capacity(horizon);
    let mut grad = Array1::zeros(d);
    for h in 0..horizon {
        let theta = thetas[h].view();
        let next = if h + 1 < horizon { &thetas[h + 1] } else { &zero };
        let mut z = thetas[h].0.clone() * (nf * ridge);
        for t in dataset.transitions() {
            let phi = fmap.phi(t.s, t.a);
            let y = crate::approx::expected_next_value(approx, next.view(), t.s_next, policy, fmap)?;
            let e = approx.eval(theta, phi)? - t.r - y;
            approx.gradient_into(theta, phi, grad.view_mut());
            z.scaled_add(e, &grad);
        }
        per_stage.push(norm(&z));
    }
    let total = per_stage.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(ZResidual { scaled_norm: total / dataset.n_transitions() as f64, per_stage_norms: per_stage, total_norm: total })
}

/// Closed-form linear recursion `θ̂_h = M̂ θ̂_{h+1} + R̂` with
/// `Σ̂ = Σ_n φ_n φ_nᵀ + N λ I`, `M̂ = Σ̂⁻¹ Σ_n φ_n ψ_nᵀ`, `R̂ = Σ̂⁻¹ Σ_n r_n φ_n`
/// and `ψ_n = Σ_a π(a|s'_n) φ(s'_n, a)`.
pub fn closed_form_linear_fqe<T: Real>(
    dataset: &Dataset<T>,
    policy: &Policy<T>,
    fmap: &FeatureMap<T>,
    lambda: f64,
    xi: &[T],
) -> Result<FqeEstimate<T>> {
    let approx = Approximator::linear(fmap.dim());
    check_shapes(dataset, policy, &approx, fmap)?;
    if !(lambda >= 0.0) {
        return config("lambda must be non-negative");
    }
    let d = fmap.dim();
    let nf = count::<T>(dataset.n_transitions());
    let mut sigma = Array2::<T>::eye(d) * (nf * lit::<T>(lambda));
    let mut cross = Array2::<T>::zeros((d, d));
    let mut rew = Array1::<T>::zeros(d);
    for t in dataset.transitions() {
        let phi = fmap.phi(t.s, t.a);
        let mut psi = Array1::<T>::zeros(d);
        for a in 0..fmap.n_actions() {
            psi.scaled_add(policy.prob(t.s_next, a), &fmap.phi(t.s_next, a));
        }
        for i in 0..d {
            for j in 0..d {
                sigma[[i, j]] += phi[i] * phi[j];
                cross[[i, j]] += phi[i] * psi[j];
            }
        }
        rew.scaled_add(t.r, &phi);
    }
    let l = cholesky(sigma.view()).ok_or_else(|| Error::Singular { rank: psd_rank(sigma.view()), dim: d })?;
    let solve = |b: &Array1<T>| solve_lower_transpose(l.view(), solve_lower(l.view(), b.view()).view());
    let r_hat = solve(&rew);
    let mut m_hat = Array2::<T>::zeros((d, d));
    for j in 0..d {
        m_hat.column_mut(j).assign(&solve(&cross.column(j).to_owned()));
    }
    let horizon = dataset.horizon();
    let mut thetas = vec![ParamVector::zeros(d); horizon];
    let mut next = Array1::<T>::zeros(d);
    for h in (0..horizon).rev() {
        let theta = m_hat.dot(&next) + &r_hat;
        thetas[h] = ParamVector(theta.clone());
        next = theta;
    }
    let value = estimate_value(&approx, &thetas[0], policy, fmap, xi)?;
    let per_stage = vec![
        SolverReport {
            method: SolverMethod::NormalEquations,
            iters: 0,
            final_grad_norm: f64::NAN,
            loss: f64::NAN,
            converged: true,
            touched_box: false,
        };
        horizon
    ];
    Ok(FqeEstimate { family: Family::Linear, thetas, value, per_stage })
}
