//! Dense linear-algebra kernel.
//!
//! Everything here is backed by a thin singular value decomposition. Numerical
//! rank uses the cutoff `scale * max(rows, cols) * eps * sigma_max`, where the
//! scale defaults to one and can be changed through [`RankPolicy`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

const SVD_MAX_ITER: usize = 100_000;
/// Convergence threshold handed to the implicit-shift iteration.
const SVD_EPS: f64 = 5.0 * f64::EPSILON;

/// Cutoff rule for deciding which singular values count as nonzero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPolicy {
    /// Multiplier applied to the standard `max(rows, cols) * eps * sigma_max` cutoff.
    pub scale: f64,
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy { scale: 1.0 }
    }
}

impl RankPolicy {
    pub fn tolerance(&self, rows: usize, cols: usize, sigma_max: f64) -> f64 {
        self.scale * rows.max(cols) as f64 * f64::EPSILON * sigma_max
    }
}

pub fn ensure_finite(a: &Matrix, what: &str) -> Result<()> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::InvalidInput(format!(
            "{what} must have at least one row and one column, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if let Some(pos) = a.iter().position(|v| !v.is_finite()) {
        // column-major storage
        let (i, j) = (pos % a.nrows(), pos / a.nrows());
        return Err(Error::InvalidInput(format!(
            "{what} has a non-finite entry at ({i}, {j})"
        )));
    }
    Ok(())
}

pub(crate) fn ensure_finite_vec(v: &Vector, what: &str) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{what} has a non-finite entry at index {i}"
        )));
    }
    Ok(())
}

/// SVD whose factors reproduce `a` and have orthonormal columns. faer is
/// tried first; nalgebra's implicit-shift iteration is the fallback, on `a` and
/// then on its transpose, since it can return inconsistent factors on matrices
/// with repeated rows.
fn verified_svd(a: &Matrix) -> Option<(Matrix, Vector, Matrix)> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Some((Matrix::zeros(rows, 0), Vector::zeros(0), Matrix::zeros(0, cols)));
    }
    let direct = || {
        let svd = a.clone().try_svd(true, true, SVD_EPS, SVD_MAX_ITER)?;
        check_factors(a, svd.u?, svd.singular_values, svd.v_t?)
    };
    let transposed = || {
        let t = a.transpose().try_svd(true, true, SVD_EPS, SVD_MAX_ITER)?;
        check_factors(a, t.v_t?.transpose(), t.singular_values, t.u?.transpose())
    };
    faer_svd(a).or_else(direct).or_else(transposed)
}

fn faer_svd(a: &Matrix) -> Option<(Matrix, Vector, Matrix)> {
    let (rows, cols) = a.shape();
    let m = faer::Mat::<f64>::from_fn(rows, cols, |i, j| a[(i, j)]);
    let svd = m.thin_svd().ok()?;
    let (fu, fs, fv) = (svd.U(), svd.S().column_vector(), svd.V());
    let k = fs.nrows();
    let u = Matrix::from_fn(rows, k, |i, j| fu[(i, j)]);
    let s = Vector::from_fn(k, |i, _| fs[i]);
    let v_t = Matrix::from_fn(k, cols, |i, j| fv[(j, i)]);
    check_factors(a, u, s, v_t)
}

fn check_factors(a: &Matrix, u: Matrix, s: Vector, v_t: Matrix) -> Option<(Matrix, Vector, Matrix)> {
    let (rows, cols) = a.shape();
    let k = s.len();
    let slack = 64.0 * f64::EPSILON * rows.max(cols) as f64;
    let mut us = u.clone();
    for (j, mut col) in us.column_iter_mut().enumerate() {
        col *= s[j];
    }
    let recon_ok = (us * &v_t - a).norm() <= slack * a.norm();
    let eye = Matrix::identity(k, k);
    let orth_ok = (u.transpose() * &u - &eye).norm() <= slack * k as f64
        && (&v_t * v_t.transpose() - &eye).norm() <= slack * k as f64;
    let sorted = s.as_slice().windows(2).all(|w| w[0] >= w[1]);
    (recon_ok && orth_ok && sorted && s.iter().all(|v| v.is_finite())).then_some((u, s, v_t))
}

/// Thin SVD `A = U diag(s) V^T` with singular values sorted non-increasing.
#[derive(Clone, Debug)]
pub struct Svd {
    u: Matrix,
    singular_values: Vector,
    v_t: Matrix,
    tolerance: f64,
    rank: usize,
}

impl Svd {
    pub fn new(a: &Matrix) -> Result<Self> {
        Self::with_policy(a, RankPolicy::default())
    }

    pub fn with_policy(a: &Matrix, policy: RankPolicy) -> Result<Self> {
        ensure_finite(a, "matrix")?;
        let (rows, cols) = a.shape();
        let (u, singular_values, v_t) = verified_svd(a).ok_or_else(|| Error::Numerical(format!("SVD of {rows}x{cols} matrix failed")))?;
        let sigma_max = singular_values.iter().copied().fold(0.0, f64::max);
        let tolerance = policy.tolerance(rows, cols, sigma_max);
        let rank = singular_values.iter().filter(|&&s| s > tolerance).count();
        Ok(Svd {
            u,
            singular_values,
            v_t,
            tolerance,
            rank,
        })
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn singular_values(&self) -> &Vector {
        &self.singular_values
    }

    pub fn v_t(&self) -> &Matrix {
        &self.v_t
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn sigma_max(&self) -> f64 {
        self.singular_values.get(0).copied().unwrap_or(0.0)
    }

    /// Smallest singular value among the leading `min(rows, cols)`.
    pub fn sigma_min(&self) -> f64 {
        self.singular_values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Moore-Penrose inverse, inverting only singular values above the rank tolerance.
    pub fn pinv(&self) -> Matrix {
        let k = self.rank;
        let rows = self.u.nrows();
        let cols = self.v_t.ncols();
        if k == 0 {
            return Matrix::zeros(cols, rows);
        }
        let mut v_scaled = self.v_t.rows(0, k).transpose();
        for (j, mut col) in v_scaled.column_iter_mut().enumerate() {
            col /= self.singular_values[j];
        }
        v_scaled * self.u.columns(0, k).transpose()
    }

    /// Orthonormal basis of the numerical range.
    pub fn range_basis(&self) -> Matrix {
        self.u.columns(0, self.rank).into_owned()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= self.singular_values[j];
        }
        us * &self.v_t
    }
}

pub fn pinv(a: &Matrix) -> Result<Matrix> {
    Ok(Svd::new(a)?.pinv())
}

pub fn numerical_rank(a: &Matrix) -> Result<usize> {
    Ok(Svd::new(a)?.rank())
}

/// Two-norm condition number; `f64::INFINITY` when numerically rank deficient.
pub fn cond2(a: &Matrix) -> Result<f64> {
    let svd = Svd::new(a)?;
    cond2_from(&svd, a.nrows().min(a.ncols()))
}

pub(crate) fn cond2_from(svd: &Svd, full_rank: usize) -> Result<f64> {
    if svd.sigma_max() == 0.0 {
        return Err(Error::InvalidInput(
            "condition number of the zero matrix is undefined".into(),
        ));
    }
    if svd.rank() < full_rank {
        return Ok(f64::INFINITY);
    }
    Ok(svd.sigma_max() / svd.singular_values()[svd.rank() - 1])
}

/// Row leverage scores of a full-column-rank matrix.
pub fn leverage_scores(x: &Matrix) -> Result<Vector> {
    let svd = Svd::new(x)?;
    leverage_from(&svd, x.ncols())
}

pub(crate) fn leverage_from(svd: &Svd, cols: usize) -> Result<Vector> {
    if svd.rank() < cols {
        return Err(Error::RankDeficientDesign {
            rank: svd.rank(),
            cols,
        });
    }
    let u = svd.range_basis();
    Ok(Vector::from_iterator(
        u.nrows(),
        u.row_iter().map(|row| row.norm_squared()),
    ))
}

/// Largest singular value, from the largest eigenvalue of the smaller Gram matrix.
pub fn spectral_norm(a: &Matrix) -> f64 {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let gram = if rows < cols {
        a * a.transpose()
    } else {
        a.transpose() * a
    };
    let top = SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .copied()
        .fold(0.0, f64::max);
    top.max(0.0).sqrt()
}

/// Smallest eigenvalue of the symmetric part of a square matrix.
pub fn min_eigenvalue(a: &Matrix) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_rows_decompose_consistently() {
        let a = [62.84687587896126, 80.51632699474418, 72.97636022082676, -4.076923650046525];
        let b = [-92.78427195147962, 16.30622485846993, -15.293338533165022, -129.52484111141504];
        let c = [-101.98189543170278, -43.78892351286011, 155.16921486782113, 125.74469550001496];
        let rows: Vec<f64> = [a, a, a, b, a, c].concat();
        let m = Matrix::from_row_slice(6, 4, &rows);
        let svd = Svd::new(&m).unwrap();
        assert_eq!(svd.rank(), 3);
        assert!((svd.reconstruct() - &m).norm() < 1e-10 * m.norm());
        let p0 = pinv(&m).unwrap() * &m;
        assert!((&m * &p0 - &m).norm() < 1e-10 * m.norm());

        let wide = Matrix::from_row_slice(3, 4, &[
            -0.35564456423322416, -0.797000660076252, -0.6038891715622284, 0.6738262239687681,
            -0.35564456423322416, -0.797000660076252, -0.6038891715622284, 0.6738262239687681,
            -1.172050743679304, -0.11173628577674016, 0.9980699425677839, 0.4620919979898927,
        ]);
        let svd = Svd::new(&wide).unwrap();
        assert_eq!(svd.rank(), 2);
        assert!((svd.reconstruct() - &wide).norm() < 1e-10 * wide.norm());
    }

    fn canonical() -> Matrix {
        Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    }

    fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.shape() == b.shape() && (a - b).amax() <= tol
    }

    fn penrose_ok(a: &Matrix, ap: &Matrix) -> bool {
        let tol = 1e-12;
        close(&(a * ap * a), a, tol)
            && close(&(ap * a * ap), ap, tol)
            && close(&(a * ap), &(a * ap).transpose(), tol)
            && close(&(ap * a), &(ap * a).transpose(), tol)
    }

    #[test]
    fn pinv_identity() {
        let i2 = Matrix::identity(2, 2);
        assert!(close(&pinv(&i2).unwrap(), &i2, 1e-15));
    }

    #[test]
    fn pinv_orthonormal_columns_is_transpose() {
        let x = canonical();
        let expected = Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(close(&pinv(&x).unwrap(), &expected, 1e-15));
    }

    #[test]
    fn pinv_rank_one_block() {
        // A = 2 u u^T with u = (1,1)/sqrt2, so A^+ = (1/2) u u^T = 0.25 * ones.
        let a = Matrix::from_element(2, 2, 1.0);
        let ap = pinv(&a).unwrap();
        assert!(close(&ap, &Matrix::from_element(2, 2, 0.25), 1e-14));
        assert!(penrose_ok(&a, &ap));
    }

    #[test]
    fn pinv_rejects_non_finite() {
        let mut a = Matrix::identity(2, 2);
        a[(1, 0)] = f64::NAN;
        assert!(matches!(pinv(&a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pinv_of_zero_matrix_is_zero() {
        let z = Matrix::zeros(1, 2);
        assert_eq!(pinv(&z).unwrap(), Matrix::zeros(2, 1));
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&Matrix::identity(3, 3)).unwrap(), 3);
        assert_eq!(numerical_rank(&canonical()).unwrap(), 2);
        let outer = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let svd = Svd::new(&outer).unwrap();
        assert_eq!(svd.rank(), 1);
        assert!(svd.singular_values()[1] < svd.tolerance());
    }

    #[test]
    fn cond_examples() {
        assert!((cond2(&Matrix::identity(5, 5)).unwrap() - 1.0).abs() < 1e-14);
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 2.0]));
        assert!((cond2(&d).unwrap() - 2.0).abs() < 1e-14);
        let tiny = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1e-16, 1e-16]);
        assert!((cond2(&tiny).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(cond2(&Matrix::from_element(2, 2, 1.0)).unwrap(), f64::INFINITY);
        assert!(matches!(cond2(&Matrix::zeros(2, 2)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn leverage_examples() {
        let l = leverage_scores(&canonical()).unwrap();
        assert!((l - Vector::from_vec(vec![1.0, 1.0, 0.0])).amax() < 1e-14);
        let l = leverage_scores(&Matrix::from_element(2, 1, 1.0)).unwrap();
        assert!((l - Vector::from_element(2, 0.5)).amax() < 1e-14);
        let (c, s) = (0.6, 0.8);
        let q = Matrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let l = leverage_scores(&q).unwrap();
        assert!((l - Vector::from_element(2, 1.0)).amax() < 1e-14);
    }

    #[test]
    fn leverage_rejects_rank_deficient() {
        let a = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(
            leverage_scores(&a),
            Err(Error::RankDeficientDesign { rank: 1, cols: 2 })
        ));
    }

    #[test]
    fn spectral_norm_agrees_across_paths() {
        let a = Matrix::from_fn(3, 40, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let direct = a.clone().singular_values()[0];
        assert!((spectral_norm(&a) - direct).abs() < 1e-10 * direct);
        assert!((spectral_norm(&a.transpose()) - direct).abs() < 1e-10 * direct);
    }

    #[test]
    fn reconstruction_within_tolerance() {
        let a = Matrix::from_fn(7, 4, |i, j| (i as f64 + 1.0).powi(j as i32));
        let svd = Svd::new(&a).unwrap();
        let err = spectral_norm(&(svd.reconstruct() - &a));
        assert!(err <= 10.0 * svd.tolerance().max(f64::EPSILON * svd.sigma_max()));
    }
}
