//! Projectors of a sketched least-squares problem.
//!
//! For a sketch `S` the oblique projector `P = X (SX)^+ S` plays the role of
//! the hat matrix, and `P0 = (SX)^+ (SX)` is an orthogonal projector that is the
//! identity exactly when sketching keeps `rank(SX) = p`. With `K = (SX)^+ S`
//! (`p x n`) we have `P = X K` and `X^+ P = K`, so nothing here needs an
//! `n x n` product unless the caller asks for `P` itself.
//!
//! Deviation norms are exact. Both `P - P_x` and `P P^T - P_x` have range inside
//! `range(X) = range(U)`, so with `W = U^T P = diag(s) V^T K`:
//!
//! ```text
//! ||P - P_x||_2     = ||W - U^T||_2          (p x n)
//! ||P P^T - P_x||_2 = ||W W^T - I_p||_2      (p x p)
//! ```

use crate::error::Result;
use crate::linalg::{spectral_norm, Matrix, Svd, Vector};
use crate::model::{exact_solve, DesignData};
use crate::sketch::SketchDraw;

/// `SX`, its SVD and pseudoinverse for one draw.
#[derive(Clone, Debug)]
pub struct SketchedSystem {
    pub sx: Matrix,
    pub svd: Svd,
    pub sx_pinv: Matrix,
}

impl SketchedSystem {
    pub fn new(data: &DesignData, draw: &SketchDraw) -> Result<Self> {
        let sx = draw.apply(data.x())?;
        let svd = Svd::with_policy(&sx, data.settings().rank_policy)?;
        let sx_pinv = svd.pinv();
        Ok(SketchedSystem { sx, svd, sx_pinv })
    }

    pub fn rank(&self) -> usize {
        self.svd.rank()
    }

    /// Minimum-norm solution `(SX)^+ S y`.
    pub fn solve(&self, draw: &SketchDraw, y: &Vector) -> Result<Vector> {
        Ok(&self.sx_pinv * draw.apply_vec(y)?)
    }

    pub fn bias_projector(&self) -> Matrix {
        &self.sx_pinv * &self.sx
    }

    /// `K = (SX)^+ S`.
    pub fn coefficient_map(&self, draw: &SketchDraw) -> Result<Matrix> {
        draw.right_apply(&self.sx_pinv)
    }
}

#[derive(Clone, Debug)]
pub struct ProjectorSet {
    /// `K = (SX)^+ S = X^+ P`, `p x n`.
    pub coefficient_map: Matrix,
    /// `P = X K`; only formed when `n` is within the materialization cap.
    pub oblique: Option<Matrix>,
    /// `P0 = (SX)^+ (SX)`.
    pub bias_projector: Matrix,
    pub rank_sx: usize,
    /// `||P - P_x||_2`.
    pub dev_p_px: f64,
    /// `||P P^T - P_x||_2`.
    pub dev_ppt_px: f64,
    /// `||I - P0||_2`.
    pub dev_p0: f64,
    /// `||P||_2`.
    pub norm_p: f64,
}

impl ProjectorSet {
    pub fn apply(&self, data: &DesignData, v: &Vector) -> Vector {
        data.x() * (&self.coefficient_map * v)
    }

    /// `P` formed explicitly regardless of the cap.
    pub fn oblique_matrix(&self, data: &DesignData) -> Matrix {
        self.oblique
            .clone()
            .unwrap_or_else(|| data.x() * &self.coefficient_map)
    }

    pub fn rank_preserved(&self, p: usize) -> bool {
        self.rank_sx == p
    }
}

pub fn build_projectors(data: &DesignData, draw: &SketchDraw) -> Result<ProjectorSet> {
    let system = SketchedSystem::new(data, draw)?;
    projectors_from(data, draw, &system)
}

pub(crate) fn projectors_from(
    data: &DesignData,
    draw: &SketchDraw,
    system: &SketchedSystem,
) -> Result<ProjectorSet> {
    let p = data.p();
    let k = system.coefficient_map(draw)?;
    let bias_projector = system.bias_projector();
    let w = data.sigma_vt() * &k;
    let u_t = data.svd().u().transpose();
    let dev_p_px = spectral_norm(&(&w - &u_t));
    let dev_ppt_px = spectral_norm(&(&w * w.transpose() - Matrix::identity(p, p)));
    let dev_p0 = spectral_norm(&(Matrix::identity(p, p) - &bias_projector));
    let norm_p = spectral_norm(&w);
    let oblique = (data.n() <= data.settings().materialize_cap).then(|| data.x() * &k);
    Ok(ProjectorSet {
        coefficient_map: k,
        oblique,
        bias_projector,
        rank_sx: system.rank(),
        dev_p_px,
        dev_ppt_px,
        dev_p0,
        norm_p,
    })
}

#[derive(Clone, Debug)]
pub struct SketchedFit {
    pub beta_tilde: Vector,
    /// `P y = X beta_tilde`.
    pub y_tilde: Vector,
    pub residual_tilde: Vector,
    pub rank_sx: usize,
    /// Largest relative gap between `(SX)^+ S y`, `X^+ P y` and
    /// `beta_hat + X^+ (P - P_x) y`.
    pub identity_gap: f64,
}

pub fn sketched_solve(data: &DesignData, draw: &SketchDraw) -> Result<SketchedFit> {
    let system = SketchedSystem::new(data, draw)?;
    sketched_solve_with(data, draw, &system)
}

pub(crate) fn sketched_solve_with(
    data: &DesignData,
    draw: &SketchDraw,
    system: &SketchedSystem,
) -> Result<SketchedFit> {
    let y = data.y();
    let beta_tilde = system.solve(draw, y)?;
    let y_tilde = data.x() * &beta_tilde;
    let residual_tilde = y - &y_tilde;

    // Route through P: P y = X (K y), then X^+ P y and the perturbation form.
    let k = system.coefficient_map(draw)?;
    let py = data.x() * (&k * y);
    let via_projector = data.x_pinv() * &py;
    let fit = exact_solve(data);
    let via_perturbation = &fit.beta_hat + data.x_pinv() * (&py - &fit.y_hat);
    let scale = beta_tilde
        .norm()
        .max(fit.beta_hat.norm())
        .max(f64::MIN_POSITIVE);
    let identity_gap = (&beta_tilde - &via_projector)
        .norm()
        .max((&beta_tilde - &via_perturbation).norm())
        / scale;

    Ok(SketchedFit {
        beta_tilde,
        y_tilde,
        residual_tilde,
        rank_sx: system.rank(),
        identity_gap,
    })
}

/// Relative tolerance used by [`null_space_check`].
pub const NULL_SPACE_TOL: f64 = 1e-8;

/// Checks `null(P) = null(X^T S^T S)` in both directions.
pub fn null_space_check(data: &DesignData, draw: &SketchDraw) -> Result<bool> {
    let system = SketchedSystem::new(data, draw)?;
    let k = system.coefficient_map(draw)?;
    // B = X^T S^T S = (SX)^T S, p x n.
    let b = draw.right_apply(&system.sx.transpose())?;
    let policy = data.settings().rank_policy;
    let sigma_vt = data.sigma_vt();

    // P annihilates null(B): || X K (I - Q_B Q_B^T) ||_2 with Q_B spanning range(B^T).
    let q_b = Svd::with_policy(&b.transpose(), policy)?.range_basis();
    let k_perp = &k - (&k * &q_b) * q_b.transpose();
    let norm_p = spectral_norm(&(&sigma_vt * &k));
    let first = spectral_norm(&(&sigma_vt * k_perp)) <= NULL_SPACE_TOL * norm_p.max(f64::MIN_POSITIVE);

    // B annihilates null(P) = null(K).
    let q_k = Svd::with_policy(&k.transpose(), policy)?.range_basis();
    let b_perp = &b - (&b * &q_k) * q_k.transpose();
    let norm_b = spectral_norm(&b);
    let second = spectral_norm(&b_perp) <= NULL_SPACE_TOL * norm_b.max(f64::MIN_POSITIVE);

    Ok(first && second)
}
