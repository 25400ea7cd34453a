//! Spectral analysis of friction matrices: symmetric eigendecomposition
//! by cyclic Jacobi rotations, effective rank, cumulative spectral
//! retention, rank-revealing QR column selection and PCA.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const SYMMETRY_TOL: f64 = 1e-10;
const JACOBI_REL_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenpairs ordered by decreasing `|lambda|`; eigenvectors are the
/// columns of `vectors`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `U diag(values) Uᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.values.len();
        let mut out = Matrix::zeros(n, n);
        for (k, &lambda) in self.values.iter().enumerate() {
            for i in 0..n {
                let a = lambda * self.vectors[(i, k)];
                for j in 0..n {
                    out[(i, j)] += a * self.vectors[(j, k)];
                }
            }
        }
        out
    }

    /// Rank-`r` truncation `U_r diag(values_r) U_rᵀ`.
    pub fn truncate(&self, r: usize) -> Matrix {
        let truncated = Spectrum {
            values: self
                .values
                .iter()
                .enumerate()
                .map(|(k, &v)| if k < r { v } else { 0.0 })
                .collect(),
            vectors: self.vectors.clone(),
        };
        truncated.reconstruct()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.
///
/// Sweeps stop once the off-diagonal Frobenius norm falls below
/// `1e-12 · ‖F‖_F`. Eigenvectors are sign-normalized so that their
/// largest-magnitude component is positive.
pub fn eig_sym(f: &Matrix) -> Result<Spectrum> {
    if !f.is_square() {
        return Err(Error::domain(format!(
            "eig_sym needs a square matrix, got {}×{}",
            f.rows(),
            f.cols()
        )));
    }
    let scale = f.max_abs().max(1.0);
    if f.asymmetry() > SYMMETRY_TOL * scale {
        return Err(Error::domain(format!(
            "eig_sym needs a symmetric matrix (asymmetry {:e})",
            f.asymmetry()
        )));
    }
    let n = f.rows();
    let mut a = f.clone();
    let mut v = Matrix::identity(n);
    let norm = f.frobenius();
    let off = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };
    let mut converged = norm == 0.0;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged || off(&a) < JACOBI_REL_TOL * norm {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged && off(&a) >= JACOBI_REL_TOL * norm {
        return Err(Error::NotConverged(format!(
            "Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let (x, y) = (a[(i, i)], a[(j, j)]);
        y.abs()
            .total_cmp(&x.abs())
            .then(y.total_cmp(&x))
            .then(i.cmp(&j))
    });
    let values: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        let col = v.col(src);
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |best, (i, x)| {
                if x.abs() > best.1.abs() {
                    (i, *x)
                } else {
                    best
                }
            })
            .1;
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, k)] = sign * col[i];
        }
    }
    Ok(Spectrum { values, vectors })
}

/// Number of eigenvalues with `|lambda| >= tau_rel · |lambda_1|`. A zero
/// spectrum has rank 0.
pub fn effective_rank(spectrum: &Spectrum, tau_rel: f64) -> Result<usize> {
    if !(tau_rel > 0.0 && tau_rel < 1.0) {
        return Err(Error::domain(format!(
            "tau_rel must lie in (0, 1), got {tau_rel}"
        )));
    }
    let lead = spectrum.values.first().map_or(0.0, |v| v.abs());
    if lead == 0.0 {
        return Ok(0);
    }
    Ok(spectrum
        .values
        .iter()
        .filter(|v| v.abs() >= tau_rel * lead)
        .count())
}

/// How cumulative spectral retention is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetentionMode {
    /// Fraction of `Σ lambda²` (Frobenius energy).
    #[default]
    Energy,
    /// Fraction of `Σ |lambda|`.
    Magnitude,
}

/// Smallest `k` whose leading eigenvalues retain at least `retention` of
/// the spectrum.
pub fn retention_size(spectrum: &Spectrum, retention: f64, mode: RetentionMode) -> Result<usize> {
    if !(retention > 0.0 && retention <= 1.0) {
        return Err(Error::domain(format!(
            "retention must lie in (0, 1], got {retention}"
        )));
    }
    let weight = |v: f64| match mode {
        RetentionMode::Energy => v * v,
        RetentionMode::Magnitude => v.abs(),
    };
    let total: f64 = spectrum.values.iter().map(|&v| weight(v)).sum();
    if total == 0.0 {
        return Err(Error::domain("retention of a zero spectrum is undefined"));
    }
    let mut acc = 0.0;
    for (k, &v) in spectrum.values.iter().enumerate() {
        acc += weight(v);
        if acc >= retention * total {
            return Ok(k + 1);
        }
    }
    // rounding can leave the full sum a hair short of `total`
    Ok(spectrum.values.len())
}

/// How missing cells are filled before spectral work.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Imputation {
    /// Average of the observed row mean and column mean.
    Mean,
    /// Mean fill, then hard-impute at increasing rank `r = 1, 2, …`: the
    /// missing cells are repeatedly replaced by the rank-`r` truncation
    /// until they settle. Stops at the first `r` whose completed matrix
    /// leaves at most `residual_tol` of its energy outside the top `r`
    /// eigenvalues.
    LowRank { residual_tol: f64, max_iter: usize },
}

impl Default for Imputation {
    fn default() -> Self {
        Imputation::LowRank {
            residual_tol: 1e-3,
            max_iter: 500,
        }
    }
}

/// Fill unobserved cells of a square matrix.
pub fn impute(values: &Matrix, mask: &[bool], mode: Imputation) -> Result<Matrix> {
    let n = values.rows();
    if !values.is_square() || mask.len() != n * n {
        return Err(Error::shape(
            "impute",
            &[values.rows(), values.cols()],
            &[mask.len()],
        ));
    }
    let observed: Vec<f64> = (0..n * n)
        .filter(|&k| mask[k])
        .map(|k| values.data()[k])
        .collect();
    if observed.is_empty() {
        return Err(Error::domain(
            "cannot impute a matrix with no observed cells",
        ));
    }
    let global = observed.iter().sum::<f64>() / observed.len() as f64;
    let mean_of = |cells: &mut dyn Iterator<Item = usize>| -> f64 {
        let (s, c) = cells
            .filter(|&k| mask[k])
            .fold((0.0, 0usize), |(s, c), k| (s + values.data()[k], c + 1));
        if c == 0 {
            global
        } else {
            s / c as f64
        }
    };
    let row_mean: Vec<f64> = (0..n)
        .map(|i| mean_of(&mut (0..n).map(|j| i * n + j)))
        .collect();
    let col_mean: Vec<f64> = (0..n)
        .map(|j| mean_of(&mut (0..n).map(|i| i * n + j)))
        .collect();
    let mut out = values.clone();
    for i in 0..n {
        for j in 0..n {
            if !mask[i * n + j] {
                out[(i, j)] = 0.5 * (row_mean[i] + col_mean[j]);
            }
        }
    }
    let (residual_tol, max_iter) = match mode {
        Imputation::Mean => return Ok(out),
        Imputation::LowRank {
            residual_tol,
            max_iter,
        } => (residual_tol, max_iter),
    };
    if mask.iter().all(|&m| m) {
        return Ok(out);
    }
    let scale = values.max_abs().max(f64::MIN_POSITIVE);
    for r in 1..=n {
        for _ in 0..max_iter {
            let spectrum = eig_sym(&symmetric_part(&out))?;
            let low = spectrum.truncate(r);
            let mut change: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if !mask[i * n + j] {
                        change = change.max((low[(i, j)] - out[(i, j)]).abs());
                        out[(i, j)] = low[(i, j)];
                    }
                }
            }
            if change < 1e-12 * scale {
                break;
            }
        }
        let spectrum = eig_sym(&symmetric_part(&out))?;
        let total: f64 = spectrum.values.iter().map(|v| v * v).sum();
        let tail: f64 = spectrum.values.iter().skip(r).map(|v| v * v).sum();
        if total == 0.0 || tail <= residual_tol * total {
            break;
        }
    }
    Ok(out)
}

/// `(F + Fᵀ) / 2`.
pub fn symmetric_part(f: &Matrix) -> Matrix {
    let n = f.rows();
    let mut out = f.clone();
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = 0.5 * (f[(i, j)] + f[(j, i)]);
        }
    }
    out
}

/// Columns chosen by pivoted QR, with the residual norm of each pivot
/// column at the moment it was chosen (`|R_kk|`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrqrSelection {
    pub indices: Vec<usize>,
    pub residual_norms: Vec<f64>,
}

/// Businger–Golub QR with column pivoting. Returns the first `k` pivots.
///
/// Column norms are recomputed from the partially reduced matrix at every
/// step; ties go to the lowest original column index.
pub fn rrqr_select(f: &Matrix, k: usize) -> Result<RrqrSelection> {
    let (m, n) = (f.rows(), f.cols());
    if k == 0 || k > n || k > m {
        return Err(Error::domain(format!(
            "rrqr budget {k} outside [1, {}]",
            n.min(m)
        )));
    }
    let mut a = f.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut residual_norms = Vec::with_capacity(k);
    for step in 0..k {
        let mut best = step;
        let mut best_norm = -1.0;
        for j in step..n {
            let norm = (step..m).map(|i| a[(i, j)] * a[(i, j)]).sum::<f64>().sqrt();
            if norm > best_norm || (norm == best_norm && perm[j] < perm[best]) {
                best = j;
                best_norm = norm;
            }
        }
        residual_norms.push(best_norm);
        if best != step {
            perm.swap(step, best);
            for i in 0..m {
                let tmp = a[(i, step)];
                a[(i, step)] = a[(i, best)];
                a[(i, best)] = tmp;
            }
        }
        if best_norm == 0.0 {
            continue;
        }
        // Householder reflector zeroing a[step+1.., step]
        let alpha = if a[(step, step)] > 0.0 {
            -best_norm
        } else {
            best_norm
        };
        let mut v: Vec<f64> = (step..m).map(|i| a[(i, step)]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in step..n {
            let dot: f64 = (step..m).map(|i| v[i - step] * a[(i, j)]).sum();
            let coef = 2.0 * dot / vnorm2;
            for i in step..m {
                a[(i, j)] -= coef * v[i - step];
            }
        }
        a[(step, step)] = alpha;
        for i in step + 1..m {
            a[(i, step)] = 0.0;
        }
    }
    Ok(RrqrSelection {
        indices: perm[..k].to_vec(),
        residual_norms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// `m × dims` projected coordinates.
    pub coords: Matrix,
    /// Fraction of total variance per component, descending.
    pub explained: Vec<f64>,
    /// `d × dims` principal axes.
    pub components: Matrix,
}

/// Project rows of `z` onto the top `dims` principal axes.
pub fn pca_project(z: &Matrix, dims: usize) -> Result<Pca> {
    let (m, d) = (z.rows(), z.cols());
    if m < 2 {
        return Err(Error::domain(format!(
            "PCA needs at least 2 points, got {m}"
        )));
    }
    if dims == 0 || dims > d {
        return Err(Error::domain(format!("PCA dims {dims} outside [1, {d}]")));
    }
    let mut centered = z.clone();
    for j in 0..d {
        let mean = (0..m).map(|i| z[(i, j)]).sum::<f64>() / m as f64;
        for i in 0..m {
            centered[(i, j)] -= mean;
        }
    }
    let mut cov = centered.transpose().matmul(&centered)?;
    for x in 0..d {
        for y in 0..d {
            cov[(x, y)] /= (m - 1) as f64;
        }
    }
    let cov = symmetric_part(&cov);
    let spectrum = eig_sym(&cov)?;
    let variances: Vec<f64> = spectrum.values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = variances.iter().sum();
    let mut explained: Vec<f64> = variances
        .iter()
        .take(dims)
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    explained.sort_by(|a, b| b.total_cmp(a));
    let components = spectrum.vectors.select_cols(&(0..dims).collect::<Vec<_>>());
    let coords = centered.matmul(&components)?;
    Ok(Pca {
        coords,
        explained,
        components,
    })
}
