//! Small dense linear algebra: Cholesky factorization, symmetric solves and a
//! Jacobi eigensolver. Problem sizes here are tens of parameters at most.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::{count, lit, Real};

/// Lower-triangular Cholesky factor, or `None` if a pivot is not safely positive.
pub fn cholesky<T: Real>(a: ArrayView2<T>) -> Option<Array2<T>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let max_diag = (0..n).map(|i| a[[i, i]].abs()).fold(T::zero(), T::max);
    let floor = max_diag * T::epsilon() * lit(16.0);
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > floor) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Some(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower<T: Real>(l: ArrayView2<T>, b: ArrayView1<T>) -> Array1<T> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose<T: Real>(l: ArrayView2<T>, b: ArrayView1<T>) -> Array1<T> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// columns.
pub fn sym_eigen<T: Real>(a: ArrayView2<T>) -> (Array1<T>, Array2<T>) {
    let n = a.nrows();
    let mut m = a.to_owned();
    let mut v = Array2::<T>::eye(n);
    let two = lit::<T>(2.0);
    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut total = T::zero();
        for i in 0..n {
            for j in 0..n {
                let x = m[[i, j]] * m[[i, j]];
                total += x;
                if i != j {
                    off += x;
                }
            }
        }
        if off <= total * T::epsilon() * T::epsilon() || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).unwrap_or(std::cmp::Ordering::Equal));
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vectors = Array2::<T>::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        vectors.column_mut(col).assign(&v.column(i));
    }
    (values, vectors)
}

/// Numerical rank of a symmetric positive semidefinite matrix.
pub fn psd_rank<T: Real>(a: ArrayView2<T>) -> usize {
    let (vals, _) = sym_eigen(a);
    let max = vals.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    let tol = max * T::epsilon() * count::<T>(a.nrows().max(1)) * lit(8.0);
    vals.iter().filter(|&&x| x > tol).count()
}

/// Largest singular value of a general matrix.
pub fn spectral_norm<T: Real>(a: ArrayView2<T>) -> T {
    let ata = a.t().dot(&a);
    let (vals, _) = sym_eigen(ata.view());
    vals.iter().fold(T::zero(), |m, &x| m.max(x)).max(T::zero()).sqrt()
}

/// How to treat an ill-conditioned covariance block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Conditioning {
    /// Add `rel · tr(A)/d · I` when the condition number exceeds `max_condition`.
    Jitter { rel: f64, max_condition: f64 },
    /// Refuse to factor and return an inference error.
    Fail { max_condition: f64 },
}

impl Default for Conditioning {
    fn default() -> Self {
        Conditioning::Jitter { rel: 1e-8, max_condition: 1e12 }
    }
}

/// Cholesky factorization of a symmetric positive definite block, with the
/// conditioning diagnostics that were used to build it.
#[derive(Debug, Clone)]
pub struct SpdFactor<T> {
    lower: Array2<T>,
    /// Ridge added to the diagonal before factoring (zero when none was needed).
    pub jitter: T,
    /// Eigenvalue ratio of the block before any jitter.
    pub condition: T,
}

impl<T: Real> SpdFactor<T> {
    pub fn new(a: ArrayView2<T>, policy: Conditioning) -> Result<Self> {
        let d = a.nrows();
        let (vals, _) = sym_eigen(a);
        let lo = vals[0];
        let hi = vals[d - 1];
        let condition = if lo > T::zero() { hi / lo } else { T::infinity() };
        let (max_condition, rel) = match policy {
            Conditioning::Jitter { rel, max_condition } => (max_condition, Some(rel)),
            Conditioning::Fail { max_condition } => (max_condition, None),
        };
        let mut jitter = T::zero();
        let mut work = a.to_owned();
        if !(condition <= lit(max_condition)) {
            let Some(rel) = rel else {
                return Err(Error::Inference(format!(
                    "covariance block is numerically singular (condition {:.3e}); enable ridge jitter",
                    crate::scalar::to_f64(condition)
                )));
            };
            let trace = (0..d).map(|i| a[[i, i]]).fold(T::zero(), |s, x| s + x);
            jitter = lit::<T>(rel) * trace / count(d);
            if !(jitter > T::zero()) {
                return Err(Error::Inference("covariance block is identically zero".into()));
            }
            for i in 0..d {
                work[[i, i]] += jitter;
            }
        }
        let lower = cholesky(work.view()).ok_or_else(|| {
            Error::Inference(format!(
                "covariance block is not positive definite (condition {:.3e})",
                crate::scalar::to_f64(condition)
            ))
        })?;
        Ok(SpdFactor { lower, jitter, condition })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> ArrayView2<'_, T> {
        self.lower.view()
    }

    /// `A⁻¹ b`.
    pub fn solve(&self, b: ArrayView1<T>) -> Array1<T> {
        let y = solve_lower(self.lower.view(), b);
        solve_lower_transpose(self.lower.view(), y.view())
    }

    /// `L⁻¹ b`, so that `‖L⁻¹ b‖² = bᵀ A⁻¹ b`.
    pub fn whiten(&self, b: ArrayView1<T>) -> Array1<T> {
        solve_lower(self.lower.view(), b)
    }

    /// `bᵀ A⁻¹ c`.
    pub fn bilinear(&self, b: ArrayView1<T>, c: ArrayView1<T>) -> T {
        self.whiten(b).dot(&self.whiten(c))
    }

    pub fn quad(&self, b: ArrayView1<T>) -> T {
        let w = self.whiten(b);
        w.dot(&w)
    }
}
