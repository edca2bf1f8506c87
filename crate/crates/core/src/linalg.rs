//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

/// Relative singular-value cutoff used for ranks and pseudo-inverses.
pub const PINV_RTOL: f64 = 1e-10;

/// `XᵀWX` and `XᵀWz` for a diagonal weight vector.
pub fn weighted_cross(x: &DMatrix<f64>, w: &[f64], z: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let (n, p) = x.shape();
    let mut xw = x.clone();
    for j in 0..p {
        let mut col = xw.column_mut(j);
        for i in 0..n {
            col[i] *= w[i];
        }
    }
    let xtwx = x.tr_mul(&xw);
    let zv = DVector::from_column_slice(z);
    let xtwz = xw.tr_mul(&zv);
    (xtwx, xtwz)
}

/// Solves a symmetric positive definite system, `None` if not numerically PD.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.clone().cholesky()?;
    let sol = chol.solve(b);
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

/// Symmetric eigen-decomposition based pseudo-inverse and numerical rank.
pub fn pinv_sym(a: &DMatrix<f64>, rtol: f64) -> (DMatrix<f64>, usize) {
    let n = a.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 0);
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = max_ev * rtol;
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > cutoff && ev > 0.0 {
            rank += 1;
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / ev;
        }
    }
    (out, rank)
}

/// Numerical column rank of `x`.
pub fn rank(x: &DMatrix<f64>, rtol: f64) -> usize {
    if x.ncols() == 0 || x.nrows() == 0 {
        return 0;
    }
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.iter().fold(0.0f64, |m, v| m.max(*v));
    sv.iter().filter(|&&s| s > max * rtol && s > 0.0).count()
}

/// Least-squares projection residual of `y` onto the columns of `x`, using a
/// pseudo-inverse of `XᵀX` so rank-deficient `x` is tolerated.
pub fn project_out(x: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, usize) {
    if x.ncols() == 0 {
        return (y.clone(), 0);
    }
    let xtx = x.tr_mul(x);
    let (pinv, rank) = pinv_sym(&xtx, PINV_RTOL);
    let coef = pinv * x.tr_mul(y);
    (y - x * coef, rank)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population variance (divisor n).
pub fn var_pop(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

pub fn norm_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn norm_sf(x: f64) -> f64 {
    std_normal().sf(x)
}

pub fn norm_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Median of a slice (NaNs sorted last); `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Kendall's tau-b rank correlation (pairwise, O(n²)).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (mut conc, mut disc, mut tie_a, mut tie_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = (a[i] - a[j]).signum() * ((a[i] != a[j]) as u8 as f64);
            let db = (b[i] - b[j]).signum() * ((b[i] != b[j]) as u8 as f64);
            match (da == 0.0, db == 0.0) {
                (true, true) => {}
                (true, false) => tie_a += 1,
                (false, true) => tie_b += 1,
                (false, false) if da == db => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let n1 = (conc + disc + tie_a) as f64;
    let n2 = (conc + disc + tie_b) as f64;
    if n1 == 0.0 || n2 == 0.0 {
        return f64::NAN;
    }
    (conc - disc) as f64 / (n1 * n2).sqrt()
}
