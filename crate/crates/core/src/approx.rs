//! Differentiable parametric families `f(θ, φ(s, a))` with analytic gradients.
//!
//! Three families are provided: tabular (linear over one-hot features), linear
//! over an arbitrary feature table, and a single-hidden-layer tanh network.
//! All satisfy `f(0, φ) = 0`.
//!
//! Smooth-net parameter layout (layout version 1): first-layer weights `W₁`
//! (`width × m`, row-major), first-layer biases `b₁` (`width`), output weights
//! `w₂` (`width`), output bias `b₂`. So `d = width·m + 2·width + 1`.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::mdp::Policy;
use crate::rng::substream;
use crate::scalar::{lit, Real};

pub const PARAM_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    OneHot,
    CustomTable,
    RandomLinear,
}

/// `φ(s, a)` for every state-action pair, stored as rows indexed `s·|A| + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    kind: FeatureKind,
    n_actions: usize,
    table: Array2<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let n = n_states * n_actions;
        FeatureMap { kind: FeatureKind::OneHot, n_actions, table: Array2::eye(n) }
    }

    pub fn custom(n_states: usize, n_actions: usize, table: Array2<T>) -> Result<Self> {
        Self::checked(FeatureKind::CustomTable, n_states, n_actions, table)
    }

    /// Gaussian random features of dimension `dim`.
    pub fn random_linear(n_states: usize, n_actions: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return config("feature dimension must be positive");
        }
        let mut rng = substream(seed, 0);
        let table = Array2::from_shape_fn((n_states * n_actions, dim), |_| {
            lit::<T>(rng.sample::<f64, _>(StandardNormal))
        });
        Self::checked(FeatureKind::RandomLinear, n_states, n_actions, table)
    }

    fn checked(kind: FeatureKind, n_states: usize, n_actions: usize, table: Array2<T>) -> Result<Self> {
        if n_actions == 0 || n_states == 0 {
            return config("feature map needs at least one state and action");
        }
        if table.nrows() != n_states * n_actions || table.ncols() == 0 {
            return config(format!(
                "feature table is {}x{}, expected {} rows and a positive width",
                table.nrows(),
                table.ncols(),
                n_states * n_actions
            ));
        }
        if table.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("feature table has non-finite entries".into()));
        }
        Ok(FeatureMap { kind, n_actions, table })
    }

    /// Linear change of basis `φ ↦ T φ`.
    pub fn transformed(&self, t: &Array2<T>) -> Result<Self> {
        if t.ncols() != self.dim() {
            return config("basis change has the wrong width");
        }
        let table = self.table.dot(&t.t());
        Self::checked(FeatureKind::CustomTable, self.n_states(), self.n_actions, table)
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_states(&self) -> usize {
        self.table.nrows() / self.n_actions
    }

    pub fn table(&self) -> &Array2<T> {
        &self.table
    }

    #[inline]
    pub fn phi(&self, s: usize, a: usize) -> ArrayView1<'_, T> {
        self.table.row(s * self.n_actions + a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum Family {
    Tabular,
    Linear,
    SmoothNet { width: usize },
}

impl Family {
    pub fn tag(&self) -> &'static str {
        match self {
            Family::Tabular => "tabular",
            Family::Linear => "linear",
            Family::SmoothNet { .. } => "smooth_net",
        }
    }

    /// Linear in θ (tabular or linear).
    pub fn is_linear(&self) -> bool {
        !matches!(self, Family::SmoothNet { .. })
    }
}

/// Parameter vector θ ∈ ℝᵈ.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T>(pub Array1<T>);

impl<T: Real> ParamVector<T> {
    pub fn zeros(d: usize) -> Self {
        ParamVector(Array1::zeros(d))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn view(&self) -> ArrayView1<'_, T> {
        self.0.view()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// True when some coordinate reaches the box `[-θ_max, θ_max]`.
    pub fn touches_box(&self, theta_max: T) -> bool {
        self.0.iter().any(|x| x.abs() >= theta_max)
    }

    pub fn project_to_box(&mut self, theta_max: T) {
        self.0.mapv_inplace(|x| x.max(-theta_max).min(theta_max));
    }
}

/// A differentiable family with fixed input dimension `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approximator {
    pub family: Family,
    pub input_dim: usize,
}

impl Approximator {
    pub fn linear(input_dim: usize) -> Self {
        Approximator { family: Family::Linear, input_dim }
    }

    pub fn tabular(n_pairs: usize) -> Self {
        Approximator { family: Family::Tabular, input_dim: n_pairs }
    }

    pub fn smooth_net(input_dim: usize, width: usize) -> Self {
        Approximator { family: Family::SmoothNet { width }, input_dim }
    }

    /// Family over the given features; tabular requires one-hot features.
    pub fn for_features<T: Real>(family: Family, fmap: &FeatureMap<T>) -> Result<Self> {
        match family {
            Family::Tabular if fmap.kind() != FeatureKind::OneHot => {
                config("tabular family requires one-hot features")
            }
            Family::SmoothNet { width: 0 } => config("smooth_net width must be positive"),
            _ => Ok(Approximator { family, input_dim: fmap.dim() }),
        }
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        match self.family {
            Family::Tabular | Family::Linear => self.input_dim,
            Family::SmoothNet { width } => width * self.input_dim + 2 * width + 1,
        }
    }

    fn check<T: Real>(&self, theta: ArrayView1<T>, phi: ArrayView1<T>) -> Result<()> {
        if theta.len() != self.dim() || phi.len() != self.input_dim {
            return config(format!(
                "{} approximator expects θ of length {} and φ of length {}, got {} and {}",
                self.family.tag(),
                self.dim(),
                self.input_dim,
                theta.len(),
                phi.len()
            ));
        }
        Ok(())
    }

    /// `f(θ, φ)` with dimension and finiteness checks.
    pub fn eval<T: Real>(&self, theta: ArrayView1<T>, phi: ArrayView1<T>) -> Result<T> {
        self.check(theta, phi)?;
        let v = self.value(theta, phi);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{} output is not finite", self.family.tag())));
        }
        Ok(v)
    }

    /// `∇_θ f(θ, φ)` with dimension and finiteness checks.
    pub fn grad<T: Real>(&self, theta: ArrayView1<T>, phi: ArrayView1<T>) -> Result<Array1<T>> {
        self.check(theta, phi)?;
        let mut g = Array1::zeros(self.dim());
        self.gradient_into(theta, phi, g.view_mut());
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("{} gradient is not finite", self.family.tag())));
        }
        Ok(g)
    }

    /// Unchecked `f(θ, φ)`; callers guarantee dimensions.
    #[inline]
    pub fn value<T: Real>(&self, theta: ArrayView1<T>, phi: ArrayView1<T>) -> T {
        match self.family {
            Family::Tabular | Family::Linear => theta.dot(&phi),
            Family::SmoothNet { width } => {
                let m = self.input_dim;
                let (w1, rest) = theta.as_slice().map(|s| s.split_at(width * m)).unwrap_or_else(|| {
                    unreachable!("parameter vectors are contiguous")
                });
                let (b1, rest) = rest.split_at(width);
                let (w2, b2) = rest.split_at(width);
                let mut out = b2[0];
                for i in 0..width {
                    let row = &w1[i * m..(i + 1) * m];
                    let mut pre = b1[i];
                    for (w, &p) in row.iter().zip(phi.iter()) {
                        pre += *w * p;
                    }
                    out += w2[i] * pre.tanh();
                }
                out
            }
        }
    }

    /// Unchecked gradient written into `out`.
    #[inline]
    pub fn gradient_into<T: Real>(&self, theta: ArrayView1<T>, phi: ArrayView1<T>, mut out: ArrayViewMut1<T>) {
        match self.family {
            Family::Tabular | Family::Linear => out.assign(&phi),
            Family::SmoothNet { width } => {
                let m = self.input_dim;
                let th = theta.as_slice().expect("contiguous θ");
                let o = out.as_slice_mut().expect("contiguous gradient buffer");
                let (w1, rest) = th.split_at(width * m);
                let (b1, rest) = rest.split_at(width);
                let w2 = &rest[..width];
                for i in 0..width {
                    let row = &w1[i * m..(i + 1) * m];
                    let mut pre = b1[i];
                    for (w, &p) in row.iter().zip(phi.iter()) {
                        pre += *w * p;
                    }
                    let t = pre.tanh();
                    let back = w2[i] * (T::one() - t * t);
                    for (j, &p) in phi.iter().enumerate() {
                        o[i * m + j] = back * p;
                    }
                    o[width * m + i] = back;
                    o[width * m + width + i] = t;
                }
                o[width * m + 2 * width] = T::one();
            }
        }
    }
}

/// `Σ_a π(a | s') f(θ, φ(s', a))`.
pub fn expected_next_value<T: Real>(
    approx: &Approximator,
    theta: ArrayView1<T>,
    s_next: usize,
    policy: &Policy<T>,
    fmap: &FeatureMap<T>,
) -> Result<T> {
    if s_next >= fmap.n_states() || s_next >= policy.n_states() {
        return config(format!("state {s_next} out of range"));
    }
    if policy.n_actions() != fmap.n_actions() {
        return config("policy and feature map disagree on the number of actions");
    }
    let mut acc = T::zero();
    for a in 0..fmap.n_actions() {
        let p = policy.prob(s_next, a);
        if p != T::zero() {
            acc += p * approx.eval(theta, fmap.phi(s_next, a))?;
        }
    }
    Ok(acc)
}

/// Per-state `V(s) = Σ_a π(a|s) f(θ, φ(s, a))` for all states at once.
pub(crate) fn state_values<T: Real>(
    approx: &Approximator,
    theta: ArrayView1<T>,
    policy: &Policy<T>,
    fmap: &FeatureMap<T>,
) -> Vec<T> {
    (0..fmap.n_states())
        .map(|s| {
            let mut acc = T::zero();
            for a in 0..fmap.n_actions() {
                let p = policy.prob(s, a);
                if p != T::zero() {
                    acc += p * approx.value(theta, fmap.phi(s, a));
                }
            }
            acc
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub trials: usize,
}

/// Finite-difference step used by [`grad_check`] (2⁻¹⁷ ≈ 7.6e-6).
pub const FD_STEP: f64 = 1.0 / 131_072.0;

/// Compares analytic gradients with central differences at random probes.
/// The error of one probe is `‖g − g_fd‖∞ / max(‖g‖∞, ‖g_fd‖∞)`.
///
/// Probes lie on a dyadic grid.
pub fn grad_check(approx: &Approximator, n_trials: usize, seed: u64) -> Result<GradCheckReport> {
    if n_trials == 0 {
        return config("grad_check needs at least one trial");
    }
    let d = approx.dim();
    let m = approx.input_dim;
    let mut worst = 0.0_f64;
    for trial in 0..n_trials {
        let mut rng = substream(seed, trial as u64);
        let theta = Array1::from_shape_fn(d, |_| rng.random_range(-32i32..=32) as f64 / 16.0);
        let phi = match approx.family {
            Family::Tabular => {
                let mut p = Array1::zeros(m);
                p[rng.random_range(0..m)] = 1.0;
                p
            }
            _ => Array1::from_shape_fn(m, |_| rng.random_range(-16i32..=16) as f64 / 16.0),
        };
        let g = approx.grad(theta.view(), phi.view())?;
        let mut probe = theta.clone();
        let mut diff = 0.0_f64;
        let mut scale = 0.0_f64;
        for i in 0..d {
            probe[i] = theta[i] + FD_STEP;
            let up = approx.eval(probe.view(), phi.view())?;
            probe[i] = theta[i] - FD_STEP;
            let down = approx.eval(probe.view(), phi.view())?;
            probe[i] = theta[i];
            let fd = (up - down) / (2.0 * FD_STEP);
            diff = diff.max((g[i] - fd).abs());
            scale = scale.max(g[i].abs()).max(fd.abs());
        }
        worst = worst.max(if scale < 1e-8 { diff } else { diff / scale });
    }
    Ok(GradCheckReport { max_rel_error: worst, trials: n_trials })
}

/// Seeded random parameters of scale `scale` (used to break the symmetric
/// saddle of the network at θ = 0).
pub fn random_params<T: Real>(approx: &Approximator, scale: f64, seed: u64) -> ParamVector<T> {
    let mut rng = substream(seed, 0x5eed);
    ParamVector(Array1::from_shape_fn(approx.dim(), |_| {
        lit::<T>(scale * rng.sample::<f64, _>(StandardNormal))
    }))
}
