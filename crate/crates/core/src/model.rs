//! Gaussian linear model `y = X beta0 + eps`, `eps ~ N(0, sigma2 I)`, and its
//! exact least-squares fit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ensure_finite, ensure_finite_vec, Matrix, RankPolicy, Svd, Vector};
use crate::rng::{normal_vector, rng_from_seed};

/// Largest `n` for which `n x n` projectors are formed explicitly.
pub const DEFAULT_MATERIALIZE_CAP: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub rank_policy: RankPolicy,
    pub materialize_cap: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            rank_policy: RankPolicy::default(),
            materialize_cap: DEFAULT_MATERIALIZE_CAP,
        }
    }
}

/// True coefficients and noise variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    beta0: Vector,
    sigma2: f64,
}

impl ModelSpec {
    pub fn new(beta0: Vector, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "noise variance must be positive and finite, got {sigma2}"
            )));
        }
        if beta0.is_empty() {
            return Err(Error::InvalidInput("beta0 is empty".into()));
        }
        ensure_finite_vec(&beta0, "beta0")?;
        Ok(ModelSpec { beta0, sigma2 })
    }

    pub fn beta0(&self) -> &Vector {
        &self.beta0
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }
}

/// Observed design and response, with the SVD of `X` cached.
#[derive(Clone, Debug)]
pub struct DesignData {
    x: Matrix,
    y: Vector,
    svd: Svd,
    x_pinv: Matrix,
    settings: Settings,
}

impl DesignData {
    pub fn new(x: Matrix, y: Vector) -> Result<Self> {
        Self::with_settings(x, y, Settings::default())
    }

    pub fn with_settings(x: Matrix, y: Vector, settings: Settings) -> Result<Self> {
        ensure_finite(&x, "design matrix")?;
        ensure_finite_vec(&y, "response")?;
        let (n, p) = x.shape();
        if y.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "response has length {} but design has {n} rows",
                y.len()
            )));
        }
        if n < p {
            return Err(Error::RankDeficientDesign { rank: n, cols: p });
        }
        let svd = Svd::with_policy(&x, settings.rank_policy)?;
        if svd.rank() < p {
            return Err(Error::RankDeficientDesign {
                rank: svd.rank(),
                cols: p,
            });
        }
        let x_pinv = svd.pinv();
        Ok(DesignData {
            x,
            y,
            svd,
            x_pinv,
            settings,
        })
    }

    /// Same design, different response.
    pub fn with_response(&self, y: Vector) -> Result<Self> {
        ensure_finite_vec(&y, "response")?;
        if y.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "response has length {} but design has {} rows",
                y.len(),
                self.n()
            )));
        }
        Ok(DesignData { y, ..self.clone() })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &Vector {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn svd(&self) -> &Svd {
        &self.svd
    }

    pub fn x_pinv(&self) -> &Matrix {
        &self.x_pinv
    }

    /// Orthonormal basis `U` of `range(X)`.
    pub fn range_basis(&self) -> Matrix {
        self.svd.range_basis()
    }

    /// `diag(s) V^T`, so that `X = U * sigma_vt` and `||X Z||_2 = ||sigma_vt Z||_2`.
    pub fn sigma_vt(&self) -> Matrix {
        let mut m = self.svd.v_t().clone();
        for (i, mut row) in m.row_iter_mut().enumerate() {
            row *= self.svd.singular_values()[i];
        }
        m
    }

    /// `(X^T X)^{-1}`.
    pub fn gram_inverse(&self) -> Matrix {
        &self.x_pinv * self.x_pinv.transpose()
    }

    pub fn norm_x(&self) -> f64 {
        self.svd.sigma_max()
    }

    pub fn kappa_x(&self) -> f64 {
        self.svd.sigma_max() / self.svd.sigma_min()
    }

    pub fn leverage_scores(&self) -> Vector {
        linalg::leverage_from(&self.svd, self.p()).expect("full column rank checked on construction")
    }

    /// `P_x v` through the orthonormal basis.
    pub fn apply_hat(&self, v: &Vector) -> Vector {
        let u = self.svd.u();
        u * (u.transpose() * v)
    }

    /// `n x n` hat matrix.
    pub fn hat_matrix(&self) -> Matrix {
        let u = self.svd.u();
        u * u.transpose()
    }
}

/// Exact least-squares fit.
#[derive(Clone, Debug)]
pub struct ExactFit {
    pub beta_hat: Vector,
    pub y_hat: Vector,
    pub residual: Vector,
    /// Present when `n` does not exceed the materialization cap.
    pub hat_matrix: Option<Matrix>,
    pub cos_theta: f64,
    pub kappa_x: f64,
    pub norm_x: f64,
    pub norm_y: f64,
}

pub fn exact_solve(data: &DesignData) -> ExactFit {
    let beta_hat = data.x_pinv() * data.y();
    let y_hat = data.apply_hat(data.y());
    let residual = data.y() - &y_hat;
    let norm_y = data.y().norm();
    let cos_theta = if norm_y > 0.0 {
        (y_hat.norm() / norm_y).min(1.0)
    } else {
        1.0
    };
    let hat_matrix = (data.n() <= data.settings().materialize_cap).then(|| data.hat_matrix());
    ExactFit {
        beta_hat,
        y_hat,
        residual,
        hat_matrix,
        cos_theta,
        kappa_x: data.kappa_x(),
        norm_x: data.norm_x(),
        norm_y,
    }
}

/// `V_y[beta_hat] = sigma2 (X^T X)^{-1}`.
pub fn model_variance(data: &DesignData, spec: &ModelSpec) -> Result<Matrix> {
    check_spec(data, spec)?;
    Ok(data.gram_inverse() * spec.sigma2())
}

/// `X beta0 + eps` with `eps ~ N(0, sigma2 I)`, deterministic in `seed`.
pub fn simulate_response(x: &Matrix, spec: &ModelSpec, seed: u64) -> Result<Vector> {
    if x.ncols() != spec.beta0().len() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} columns but beta0 has length {}",
            x.ncols(),
            spec.beta0().len()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let noise = normal_vector(&mut rng, x.nrows(), spec.sigma2().sqrt());
    Ok(x * spec.beta0() + noise)
}

pub(crate) fn check_spec(data: &DesignData, spec: &ModelSpec) -> Result<()> {
    if spec.beta0().len() != data.p() {
        return Err(Error::DimensionMismatch(format!(
            "beta0 has length {} but design has {} columns",
            spec.beta0().len(),
            data.p()
        )));
    }
    Ok(())
}
