//! Episode-level bootstrap for FQE: weight schemes, weighted replicates and
//! quantile intervals with the `k₀` variance correction.

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{Approximator, FeatureMap};
use crate::error::{config, Error, Result};
use crate::fqe::{run_fqe, FqeConfig, WeightVector};
use crate::mdp::{Dataset, Policy};
use crate::rng::substream;
use crate::scalar::{count, to_f64, Real};

/// Distribution of the multiplier `u_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum Multiplier {
    Exponential { rate: f64 },
    Gamma { shape: f64, scale: f64 },
    Uniform { a: f64, b: f64 },
}

impl Multiplier {
    pub fn mean(&self) -> f64 {
        match *self {
            Multiplier::Exponential { rate } => 1.0 / rate,
            Multiplier::Gamma { shape, scale } => shape * scale,
            Multiplier::Uniform { a, b } => 0.5 * (a + b),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Multiplier::Exponential { rate } => 1.0 / (rate * rate),
            Multiplier::Gamma { shape, scale } => shape * scale * scale,
            Multiplier::Uniform { a, b } => (b - a) * (b - a) / 12.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Multiplier::Exponential { rate } => rate > 0.0 && rate.is_finite(),
            Multiplier::Gamma { shape, scale } => shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite(),
            Multiplier::Uniform { a, b } => a > 0.0 && b > a && b.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            config(format!("invalid multiplier distribution {self:?}"))
        }
    }

    fn draw<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<f64> {
        match *self {
            Multiplier::Exponential { rate } => {
                let d = Exp::new(rate).expect("validated rate");
                (0..k).map(|_| d.sample(rng)).collect()
            }
            Multiplier::Gamma { shape, scale } => {
                let d = Gamma::new(shape, scale).expect("validated gamma");
                (0..k).map(|_| d.sample(rng)).collect()
            }
            Multiplier::Uniform { a, b } => {
                let d = Uniform::new(a, b).expect("validated bounds");
                (0..k).map(|_| d.sample(rng)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightScheme {
    /// Resampling episodes with replacement (multinomial counts).
    Vanilla,
    /// Self-normalized i.i.d. multipliers `W_k = K u_k / Σ_j u_j`.
    Multiplier(Multiplier),
}

impl WeightScheme {
    pub fn validate(&self) -> Result<()> {
        match self {
            WeightScheme::Vanilla => Ok(()),
            WeightScheme::Multiplier(m) => m.validate(),
        }
    }

    pub fn tag(&self) -> String {
        match self {
            WeightScheme::Vanilla => "vanilla".into(),
            WeightScheme::Multiplier(Multiplier::Exponential { rate }) => format!("exponential({rate})"),
            WeightScheme::Multiplier(Multiplier::Gamma { shape, scale }) => format!("gamma({shape},{scale})"),
            WeightScheme::Multiplier(Multiplier::Uniform { a, b }) => format!("uniform({a},{b})"),
        }
    }
}

/// Variance inflation of the scheme: 1 for vanilla, `η²/m²` for multipliers.
pub fn k0(scheme: &WeightScheme) -> f64 {
    match scheme {
        WeightScheme::Vanilla => 1.0,
        WeightScheme::Multiplier(m) => {
            let mean = m.mean();
            m.variance() / (mean * mean)
        }
    }
}

/// One draw of episode weights summing to `K`.
pub fn sample_weights<T: Real, R: Rng + ?Sized>(scheme: &WeightScheme, k: usize, rng: &mut R) -> Result<WeightVector<T>> {
    if k == 0 {
        return config("K must be at least 1");
    }
    scheme.validate()?;
    match scheme {
        WeightScheme::Vanilla => {
            // K draws of an episode index, uniformly with replacement
            let mut counts = vec![0usize; k];
            for _ in 0..k {
                counts[rng.random_range(0..k)] += 1;
            }
            WeightVector::new(counts.into_iter().map(count::<T>).collect())
        }
        WeightScheme::Multiplier(m) => {
            for _ in 0..2 {
                let u = m.draw(k, rng);
                let sum: f64 = u.iter().sum();
                if sum > 0.0 && sum.is_finite() {
                    let kf = k as f64;
                    let w: Vec<T> = u.iter().map(|&x| T::from_f64(kf * x / sum).unwrap_or(T::nan())).collect();
                    return WeightVector::new(renormalize(w, k));
                }
            }
            Err(Error::Numeric("all multiplier draws were zero".into()))
        }
    }
}

/// Removes the rounding drift of the weight sum by adjusting the largest weight.
fn renormalize<T: Real>(mut w: Vec<T>, k: usize) -> Vec<T> {
    let sum: T = w.iter().copied().sum();
    let drift = count::<T>(k) - sum;
    if let Some((i, _)) = w.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal)) {
        w[i] += drift;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    pub delta: f64,
}

impl ConfidenceInterval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub replicate_values: Vec<f64>,
    /// `replicate_values[b] − base_value`.
    pub errors: Vec<f64>,
    pub k0: f64,
    pub base_value: f64,
    /// Replicates whose weighted fit failed or did not converge.
    pub excluded: usize,
    pub ci: Option<ConfidenceInterval>,
}

/// Largest share of replicates that may be excluded before the run fails.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.1;

/// `B` weighted-FQE replicates; replicate `b` draws its weights from
/// sub-stream `b` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_distribution<T: Real>(
    dataset: &Dataset<T>,
    policy: &Policy<T>,
    xi: &[T],
    approx: &Approximator,
    fmap: &FeatureMap<T>,
    cfg: &FqeConfig,
    scheme: &WeightScheme,
    reps: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if reps == 0 {
        return config("bootstrap needs at least one replicate");
    }
    scheme.validate()?;
    let base = run_fqe(dataset, policy, xi, approx, fmap, cfg, None)?;
    if !base.converged() {
        return Err(Error::Study("base FQE fit did not converge".into()));
    }
    let k = dataset.n_episodes();
    let outcomes: Vec<Option<f64>> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, b as u64);
            let w = sample_weights::<T, _>(scheme, k, &mut rng).ok()?;
            let est = run_fqe(dataset, policy, xi, approx, fmap, cfg, Some(&w)).ok()?;
            (est.converged() && est.value.is_finite()).then(|| to_f64(est.value))
        })
        .collect();
    from_outcomes(to_f64(base.value), outcomes, k0(scheme))
}

fn from_outcomes(base_value: f64, outcomes: Vec<Option<f64>>, k0: f64) -> Result<BootstrapResult> {
    let reps = outcomes.len();
    let replicate_values: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let excluded = reps - replicate_values.len();
    if excluded as f64 > MAX_EXCLUDED_FRACTION * reps as f64 {
        return Err(Error::Study(format!("{excluded} of {reps} bootstrap replicates failed")));
    }
    let errors = replicate_values.iter().map(|v| v - base_value).collect();
    Ok(BootstrapResult { replicate_values, errors, k0, base_value, excluded, ci: None })
}

/// Lower empirical quantile `inf{t : F̂(t) ≥ p}` of `sorted` (ascending).
pub fn lower_quantile(sorted: &[f64], p: f64) -> f64 {
    let b = sorted.len();
    // guard against p·B landing a rounding error above an integer
    let rank = ((p * b as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(b) - 1]
}

/// `[v̂ − q_{1−δ/2}/√k₀, v̂ − q_{δ/2}/√k₀]` from the replicate errors.
pub fn confidence_interval(result: &BootstrapResult, delta: f64, k0: f64) -> Result<ConfidenceInterval> {
    if !(delta > 0.0 && delta < 1.0) {
        return config("delta must lie in (0, 1)");
    }
    if !(k0 > 0.0) {
        return config("k0 must be positive");
    }
    if result.errors.len() < 2 {
        return config("confidence interval needs at least two replicates");
    }
    let mut sorted = result.errors.clone();
    sorted.sort_by(f64::total_cmp);
    let scale = k0.sqrt();
    let lo = result.base_value - lower_quantile(&sorted, 1.0 - delta / 2.0) / scale;
    let hi = result.base_value - lower_quantile(&sorted, delta / 2.0) / scale;
    Ok(ConfidenceInterval { lo, hi, delta })
}
