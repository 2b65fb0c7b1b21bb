//! Finite episodic MDPs, stochastic policies, trajectory simulation and the
//! exact dynamic-programming quantities used as ground truth.
//!
//! Stages are indexed from 0 in code (`h = 0..H`), so stage `h` here is stage
//! `h + 1` in the usual 1-based notation. A trajectory holds `H + 1` states.

use ndarray::{Array2, Array3, ArrayView1};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{config, Error, Result};
use crate::rng::substream;
use crate::scalar::{count, lit, to_f64, Real};

fn check_distribution<T: Real>(row: ArrayView1<T>, what: impl Fn() -> String) -> Result<()> {
    let mut sum = T::zero();
    for &p in row.iter() {
        if !p.is_finite() || p < T::zero() {
            return Err(Error::Validation(format!("{}: entry {} is not a probability", what(), p)));
        }
        sum += p;
    }
    if (sum - T::one()).abs() > T::prob_tol() {
        return Err(Error::Validation(format!("{}: sums to {} instead of 1", what(), sum)));
    }
    Ok(())
}

/// Finite-horizon, time-homogeneous MDP with finite state and action sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp<T> {
    horizon: usize,
    /// `transition[[s, a, s']] = p(s' | s, a)`.
    transition: Array3<T>,
    /// `reward[[s, a]] = r(s, a)`, in `[0, 1]`.
    reward: Array2<T>,
    initial_dist: Vec<T>,
}

impl<T: Real> TabularMdp<T> {
    pub fn new(
        horizon: usize,
        transition: Array3<T>,
        reward: Array2<T>,
        initial_dist: Vec<T>,
    ) -> Result<Self> {
        let (ns, na, ns2) = transition.dim();
        if ns == 0 || na == 0 || horizon == 0 {
            return config("n_states, n_actions and horizon must be positive");
        }
        if ns2 != ns {
            return config(format!("transition tensor is {ns}x{na}x{ns2}, expected last axis {ns}"));
        }
        if reward.dim() != (ns, na) {
            return config(format!("reward table is {:?}, expected ({ns}, {na})", reward.dim()));
        }
        if initial_dist.len() != ns {
            return config(format!("initial_dist has {} entries, expected {ns}", initial_dist.len()));
        }
        for s in 0..ns {
            for a in 0..na {
                check_distribution(transition.slice(ndarray::s![s, a, ..]), || {
                    format!("transition[{s},{a},.]")
                })?;
                let r = reward[[s, a]];
                if !(r >= T::zero() && r <= T::one()) {
                    return Err(Error::Validation(format!("reward[{s},{a}] = {r} outside [0, 1]")));
                }
            }
        }
        check_distribution(ArrayView1::from(&initial_dist[..]), || "initial_dist".to_string())?;
        Ok(TabularMdp { horizon, transition, reward, initial_dist })
    }

    /// Builds an MDP from a row-major flattened transition tensor
    /// (index `(s * n_actions + a) * n_states + s'`) and reward table
    /// (index `s * n_actions + a`).
    pub fn from_flat(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        transition: Vec<T>,
        reward: Vec<T>,
        initial_dist: Vec<T>,
    ) -> Result<Self> {
        let t = Array3::from_shape_vec((n_states, n_actions, n_states), transition)
            .map_err(|e| Error::Config(format!("transition: {e}")))?;
        let r = Array2::from_shape_vec((n_states, n_actions), reward)
            .map_err(|e| Error::Config(format!("reward: {e}")))?;
        Self::new(horizon, t, r, initial_dist)
    }

    pub fn n_states(&self) -> usize {
        self.reward.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.reward.ncols()
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states() * self.n_actions()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn transition(&self) -> &Array3<T> {
        &self.transition
    }

    pub fn reward(&self) -> &Array2<T> {
        &self.reward
    }

    pub fn initial_dist(&self) -> &[T] {
        &self.initial_dist
    }

    /// Same dynamics with a different horizon.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return config("horizon must be positive");
        }
        Ok(TabularMdp { horizon, ..self.clone() })
    }

    fn check_policy(&self, policy: &Policy<T>) -> Result<()> {
        if policy.n_states() != self.n_states() || policy.n_actions() != self.n_actions() {
            return config(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states(),
                self.n_actions()
            ));
        }
        Ok(())
    }
}

/// Row-stochastic matrix `probs[[s, a]] = π(a | s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy<T> {
    probs: Array2<T>,
}

impl<T: Real> Policy<T> {
    pub fn new(probs: Array2<T>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return config("policy must have at least one state and one action");
        }
        for (s, row) in probs.rows().into_iter().enumerate() {
            check_distribution(row, || format!("policy row {s}"))?;
        }
        Ok(Policy { probs })
    }

    pub fn from_flat(n_states: usize, n_actions: usize, probs: Vec<T>) -> Result<Self> {
        let p = Array2::from_shape_vec((n_states, n_actions), probs)
            .map_err(|e| Error::Config(format!("policy probs: {e}")))?;
        Self::new(p)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy { probs: Array2::from_elem((n_states, n_actions), T::one() / count(n_actions)) }
    }

    /// Policy that plays `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return config(format!("action {a} out of range for state {s}"));
            }
            probs[[s, a]] = T::one();
        }
        Self::new(probs)
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, s: usize, a: usize) -> T {
        self.probs[[s, a]]
    }

    pub fn row(&self, s: usize) -> ArrayView1<'_, T> {
        self.probs.row(s)
    }

    pub fn probs(&self) -> &Array2<T> {
        &self.probs
    }
}

/// One episode `(s_0, a_0, s_1, …, s_{H-1}, a_{H-1}, s_H)` with its rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<T>,
}

impl<T> Trajectory<T> {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// A single logged transition, as seen by the estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition<T> {
    pub episode: usize,
    pub h: usize,
    pub s: usize,
    pub a: usize,
    pub r: T,
    pub s_next: usize,
}

/// `K` i.i.d. episodes sharing the horizon `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    episodes: Vec<Trajectory<T>>,
    horizon: usize,
    seed: u64,
}

impl<T: Real> Dataset<T> {
    pub fn new(episodes: Vec<Trajectory<T>>, seed: u64) -> Result<Self> {
        let Some(first) = episodes.first() else {
            return config("a dataset needs at least one episode");
        };
        let horizon = first.horizon();
        if horizon == 0 {
            return config("episodes must have at least one transition");
        }
        for (k, ep) in episodes.iter().enumerate() {
            if ep.actions.len() != horizon || ep.rewards.len() != horizon || ep.states.len() != horizon + 1 {
                return config(format!("episode {k} does not have horizon {horizon}"));
            }
        }
        Ok(Dataset { episodes, horizon, seed })
    }

    pub fn episodes(&self) -> &[Trajectory<T>] {
        &self.episodes
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `N = K H`.
    pub fn n_transitions(&self) -> usize {
        self.episodes.len() * self.horizon
    }

    /// Transitions in episode-major, stage-minor order (`n = k H + h`).
    pub fn transitions(&self) -> impl Iterator<Item = Transition<T>> + '_ {
        self.episodes.iter().enumerate().flat_map(|(k, ep)| {
            (0..ep.actions.len()).map(move |h| Transition {
                episode: k,
                h,
                s: ep.states[h],
                a: ep.actions[h],
                r: ep.rewards[h],
                s_next: ep.states[h + 1],
            })
        })
    }

    /// Checks indices and rewards against the generating MDP.
    pub fn validate_against(&self, mdp: &TabularMdp<T>) -> Result<()> {
        for t in self.transitions() {
            if t.s >= mdp.n_states() || t.s_next >= mdp.n_states() || t.a >= mdp.n_actions() {
                return Err(Error::Validation(format!(
                    "episode {} stage {}: index out of range for the MDP",
                    t.episode, t.h
                )));
            }
            if t.r != mdp.reward()[[t.s, t.a]] {
                return Err(Error::Validation(format!(
                    "episode {} stage {}: reward {} differs from r({}, {})",
                    t.episode, t.h, t.r, t.s, t.a
                )));
            }
        }
        Ok(())
    }

    /// Same dataset with every reward multiplied by `c`.
    pub fn scale_rewards(&self, c: T) -> Self {
        let mut out = self.clone();
        for ep in &mut out.episodes {
            for r in &mut ep.rewards {
                *r *= c;
            }
        }
        out
    }

    /// Number of visits to each `(s, a)` over all stages.
    pub fn pair_counts(&self, n_states: usize, n_actions: usize) -> Array2<usize> {
        let mut c = Array2::zeros((n_states, n_actions));
        for t in self.transitions() {
            c[[t.s, t.a]] += 1;
        }
        c
    }
}

fn sample_index<T: Real, R: Rng + ?Sized>(row: ArrayView1<T>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in row.iter().enumerate() {
        let p = to_f64(p);
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Simulates one episode of `policy` in `mdp`.
pub fn sample_trajectory<T: Real, R: Rng + ?Sized>(
    mdp: &TabularMdp<T>,
    policy: &Policy<T>,
    rng: &mut R,
) -> Result<Trajectory<T>> {
    mdp.check_policy(policy)?;
    let horizon = mdp.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut s = sample_index(ArrayView1::from(mdp.initial_dist()), rng);
    states.push(s);
    for _ in 0..horizon {
        let a = sample_index(policy.row(s), rng);
        rewards.push(mdp.reward()[[s, a]]);
        actions.push(a);
        s = sample_index(mdp.transition().slice(ndarray::s![s, a, ..]), rng);
        states.push(s);
    }
    Ok(Trajectory { states, actions, rewards })
}

/// `K` episodes; episode `k` is drawn from sub-stream `k` of `seed`.
pub fn generate_dataset<T: Real>(
    mdp: &TabularMdp<T>,
    policy: &Policy<T>,
    episodes: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    if episodes == 0 {
        return config("number of episodes must be at least 1");
    }
    mdp.check_policy(policy)?;
    let eps = (0..episodes)
        .into_par_iter()
        .with_min_len(64)
        .map(|k| sample_trajectory(mdp, policy, &mut substream(seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(eps, seed)
}

/// `Q_h(s, a)` for every stage; `values()[h]` is the table of stage `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct QValues<T> {
    tables: Vec<Array2<T>>,
}

impl<T: Real> QValues<T> {
    pub fn horizon(&self) -> usize {
        self.tables.len()
    }

    pub fn stage(&self, h: usize) -> &Array2<T> {
        &self.tables[h]
    }

    pub fn q(&self, h: usize, s: usize, a: usize) -> T {
        self.tables[h][[s, a]]
    }

    /// `V_h(s) = Σ_a π(a|s) Q_h(s, a)`, with `V_H ≡ 0`.
    pub fn v(&self, h: usize, s: usize, policy: &Policy<T>) -> T {
        if h >= self.tables.len() {
            return T::zero();
        }
        self.tables[h].row(s).dot(&policy.row(s))
    }
}

pub fn exact_q_values<T: Real>(mdp: &TabularMdp<T>, policy: &Policy<T>) -> Result<QValues<T>> {
    mdp.check_policy(policy)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let horizon = mdp.horizon();
    let mut tables = vec![Array2::zeros((ns, na)); horizon];
    let mut v_next = vec![T::zero(); ns];
    for h in (0..horizon).rev() {
        let mut q = mdp.reward().clone();
        for s in 0..ns {
            for a in 0..na {
                let mut e = T::zero();
                for (s2, &p) in mdp.transition().slice(ndarray::s![s, a, ..]).iter().enumerate() {
                    e += p * v_next[s2];
                }
                q[[s, a]] += e;
            }
        }
        for (s, v) in v_next.iter_mut().enumerate() {
            *v = q.row(s).dot(&policy.row(s));
        }
        tables[h] = q;
    }
    Ok(QValues { tables })
}

/// `v_π = Σ_s ξ(s) Σ_a π(a|s) Q_1(s, a)`.
pub fn exact_policy_value<T: Real>(mdp: &TabularMdp<T>, policy: &Policy<T>) -> Result<T> {
    let q = exact_q_values(mdp, policy)?;
    Ok(mdp
        .initial_dist()
        .iter()
        .enumerate()
        .map(|(s, &xi)| xi * q.v(0, s, policy))
        .sum())
}

/// State-action occupancy of a policy: per stage, averaged over stages, and the
/// horizon-weighted measure with weights `(H - h + 1)·2/(H(H+1))` (1-based `h`).
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasures<T> {
    pub per_step: Vec<Array2<T>>,
    pub averaged: Array2<T>,
    pub weighted_tilde: Array2<T>,
}

pub fn occupancy_measures<T: Real>(
    mdp: &TabularMdp<T>,
    policy: &Policy<T>,
) -> Result<OccupancyMeasures<T>> {
    mdp.check_policy(policy)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let horizon = mdp.horizon();
    let mut state_dist = mdp.initial_dist().to_vec();
    let mut per_step = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let mut d = Array2::zeros((ns, na));
        for s in 0..ns {
            for a in 0..na {
                d[[s, a]] = state_dist[s] * policy.prob(s, a);
            }
        }
        let mut next = vec![T::zero(); ns];
        for s in 0..ns {
            for a in 0..na {
                let w = d[[s, a]];
                if w == T::zero() {
                    continue;
                }
                for (s2, &p) in mdp.transition().slice(ndarray::s![s, a, ..]).iter().enumerate() {
                    next[s2] += w * p;
                }
            }
        }
        per_step.push(d);
        state_dist = next;
    }
    let hf = count::<T>(horizon);
    let mut averaged = Array2::zeros((ns, na));
    let mut weighted_tilde = Array2::zeros((ns, na));
    let norm = lit::<T>(2.0) / (hf * (hf + T::one()));
    for (h, d) in per_step.iter().enumerate() {
        averaged.scaled_add(T::one() / hf, d);
        weighted_tilde.scaled_add(norm * count::<T>(horizon - h), d);
    }
    Ok(OccupancyMeasures { per_step, averaged, weighted_tilde })
}
