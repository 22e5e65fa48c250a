//! The rank-preservation diagnostic `kappa_2(P0) = 1`.
//!
//! `P0` is an orthogonal projector, so its nonzero singular values are all 1
//! and its condition number is either 1 (full rank, `P0 = I`) or infinite.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::linalg::{Svd, Vector};
use crate::model::{DesignData, ExactFit};
use crate::projector::SketchedSystem;
use crate::rng::{derive_seed, stream};
use crate::sketch::{draw_with, SketchDraw, SketchKind, SketchScheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum KappaP0 {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "inf")]
    Infinite,
}

impl KappaP0 {
    pub fn value(self) -> f64 {
        match self {
            KappaP0::One => 1.0,
            KappaP0::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for KappaP0 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KappaP0::One => "1",
            KappaP0::Infinite => "inf",
        })
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct DiagnosticRecord {
    pub scheme: SketchKind,
    pub r: usize,
    pub replicate_seed: u64,
    pub kappa_p0: KappaP0,
    pub rank_preserved: bool,
    pub rank_sx: usize,
    /// Smallest singular value of `P0` as computed, before rounding to 0/1.
    pub sigma_min_p0: f64,
    pub rel_err_beta: f64,
    pub rel_err_pred: f64,
    /// Set when `beta_hat = 0` (or `y_hat = 0`) and the errors are absolute.
    pub absolute_errors: bool,
    #[serde(with = "crate::io::vector_json")]
    pub beta_tilde: Vector,
}

fn rel_or_abs(diff: f64, base: f64) -> (f64, bool) {
    if base > 0.0 {
        (diff / base, false)
    } else {
        (diff, true)
    }
}

pub fn diagnose(data: &DesignData, draw: &SketchDraw, fit: &ExactFit) -> Result<DiagnosticRecord> {
    let system = SketchedSystem::new(data, draw)?;
    let beta_tilde = system.solve(draw, data.y())?;
    let p = data.p();
    let rank_sx = system.rank();
    let rank_preserved = rank_sx == p;
    let p0_svd = Svd::with_policy(&system.bias_projector(), data.settings().rank_policy)?;
    let (rel_err_beta, abs_b) = rel_or_abs(
        (&beta_tilde - &fit.beta_hat).norm(),
        fit.beta_hat.norm(),
    );
    let y_tilde = data.x() * &beta_tilde;
    let (rel_err_pred, abs_y) = rel_or_abs((&y_tilde - &fit.y_hat).norm(), fit.y_hat.norm());
    Ok(DiagnosticRecord {
        scheme: draw.scheme.kind,
        r: draw.r(),
        replicate_seed: draw.seed,
        kappa_p0: if rank_preserved { KappaP0::One } else { KappaP0::Infinite },
        rank_preserved,
        rank_sx,
        sigma_min_p0: p0_svd.singular_values().min(),
        rel_err_beta,
        rel_err_pred,
        absolute_errors: abs_b || abs_y,
        beta_tilde,
    })
}

/// `kappa_2(P0)` from the singular values of `P0` alone, without consulting `rank(SX)`.
pub fn kappa_p0_from_singular_values(data: &DesignData, draw: &SketchDraw) -> Result<KappaP0> {
    let system = SketchedSystem::new(data, draw)?;
    let svd = Svd::with_policy(&system.bias_projector(), data.settings().rank_policy)?;
    Ok(if svd.rank() == data.p() {
        KappaP0::One
    } else {
        KappaP0::Infinite
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RankPreservation {
    pub estimate: f64,
    pub std_err: f64,
    pub n_replicates: usize,
}

impl RankPreservation {
    pub fn from_counts(hits: usize, n: usize) -> Self {
        let estimate = hits as f64 / n as f64;
        RankPreservation {
            estimate,
            std_err: (estimate * (1.0 - estimate) / n as f64).sqrt(),
            n_replicates: n,
        }
    }
}

/// Fraction of `n_replicates` independent sketches with `rank(SX) = p`.
pub fn rank_preservation_probability(
    data: &DesignData,
    scheme: SketchScheme,
    n_replicates: usize,
    seed: u64,
) -> Result<RankPreservation> {
    if n_replicates == 0 {
        return Err(crate::Error::InsufficientDraws(0));
    }
    let leverage = (scheme.kind == SketchKind::Leverage).then(|| data.leverage_scores());
    let hits = (0..n_replicates)
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let draw = draw_with(
                scheme,
                data.n(),
                leverage.as_ref(),
                derive_seed(seed, &[stream::SKETCH, i as u64]),
            )?;
            Ok(usize::from(SketchedSystem::new(data, &draw)?.rank() == data.p()))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(RankPreservation::from_counts(hits, n_replicates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::model::exact_solve;

    fn canonical() -> DesignData {
        let x = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        DesignData::new(x, Vector::from_vec(vec![1.0, 2.0, 3.0])).unwrap()
    }

    #[test]
    fn selector_examples() {
        let data = canonical();
        let fit = exact_solve(&data);
        let two = diagnose(&data, &SketchDraw::from_rows(3, vec![0, 1]).unwrap(), &fit).unwrap();
        assert_eq!(two.kappa_p0, KappaP0::One);
        assert!(two.rank_preserved);
        assert!(two.rel_err_beta < 1e-15);

        let one = diagnose(&data, &SketchDraw::from_rows(3, vec![0]).unwrap(), &fit).unwrap();
        assert_eq!(one.kappa_p0, KappaP0::Infinite);
        assert!(!one.rank_preserved);
        assert!((one.rel_err_beta - 2.0 / 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(one.sigma_min_p0, 0.0);

        let id = diagnose(&data, &SketchDraw::from_rows(3, vec![0, 1, 2]).unwrap(), &fit).unwrap();
        assert!(id.rank_preserved && id.rel_err_beta < 1e-15 && id.rel_err_pred < 1e-15);
    }

    #[test]
    fn zero_solution_reports_absolute_error() {
        let data = canonical().with_response(Vector::from_vec(vec![0.0, 0.0, 1.0])).unwrap();
        let fit = exact_solve(&data);
        let d = diagnose(&data, &SketchDraw::from_rows(3, vec![0, 1]).unwrap(), &fit).unwrap();
        assert!(d.absolute_errors);
        assert_eq!(d.rel_err_beta, 0.0);
    }

    #[test]
    fn probability_below_p_is_zero() {
        let data = canonical();
        for kind in SketchKind::ALL_RANDOM {
            let pr = rank_preservation_probability(&data, SketchScheme::new(kind, 1), 200, 5).unwrap();
            assert_eq!(pr.estimate, 0.0);
            assert_eq!(pr.std_err, 0.0);
        }
    }

    #[test]
    fn uniform_two_rows_is_two_ninths() {
        let data = canonical();
        let n = 20_000;
        let pr = rank_preservation_probability(&data, SketchScheme::new(SketchKind::Uniform, 2), n, 9).unwrap();
        let exact = 2.0 / 9.0;
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((pr.estimate - exact).abs() < 3.0 * se, "{pr:?}");
    }

    #[test]
    fn gaussian_square_is_full_rank() {
        let data = canonical();
        let pr = rank_preservation_probability(&data, SketchScheme::new(SketchKind::Gaussian, 2), 500, 2).unwrap();
        assert_eq!(pr.estimate, 1.0);
    }
}
