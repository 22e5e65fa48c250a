//! Sketching schemes and realized sketch draws.
//!
//! Row-sampling draws are kept as index lists and applied by gathering rows;
//! Gaussian projections are kept as dense `r x n` matrices. Sampling is
//! unweighted: sampled rows are copied as is, without `1/sqrt(r p_i)` scaling.
//! Nothing downstream depends on a global scale of `S`, because
//! `(c S X)^+ (c S y) = (S X)^+ S y`.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::DesignData;
use crate::rng::{normal_matrix, rng_from_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SketchKind {
    /// `r` rows drawn uniformly with replacement (`unif`).
    #[serde(rename = "unif", alias = "uniform")]
    Uniform,
    /// `r` rows drawn with replacement with probability `l_i / p` (`lev`).
    #[serde(rename = "lev", alias = "leverage")]
    Leverage,
    /// `r x n` matrix of i.i.d. standard normals (`norm`).
    #[serde(rename = "norm", alias = "gaussian")]
    Gaussian,
    /// `S = I_n`; a degenerate scheme for checking that every excess term vanishes.
    #[serde(rename = "identity")]
    Identity,
}

impl SketchKind {
    pub const ALL_RANDOM: [SketchKind; 3] =
        [SketchKind::Uniform, SketchKind::Leverage, SketchKind::Gaussian];

    pub fn name(self) -> &'static str {
        match self {
            SketchKind::Uniform => "unif",
            SketchKind::Leverage => "lev",
            SketchKind::Gaussian => "norm",
            SketchKind::Identity => "identity",
        }
    }
}

impl fmt::Display for SketchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SketchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unif" | "uniform" => Ok(SketchKind::Uniform),
            "lev" | "leverage" => Ok(SketchKind::Leverage),
            "norm" | "gaussian" => Ok(SketchKind::Gaussian),
            "identity" | "id" => Ok(SketchKind::Identity),
            other => Err(Error::InvalidConfig(format!(
                "unknown sketch scheme '{other}' (expected unif, lev, norm or identity)"
            ))),
        }
    }
}

/// A scheme together with its sketch dimension. `r < p` is allowed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchScheme {
    pub kind: SketchKind,
    pub r: usize,
}

impl SketchScheme {
    pub fn new(kind: SketchKind, r: usize) -> Self {
        SketchScheme { kind, r }
    }

    /// `S = I_n` for data with `n` rows.
    pub fn identity(n: usize) -> Self {
        SketchScheme {
            kind: SketchKind::Identity,
            r: n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SketchRepr {
    /// Zero-based row indices; repetitions allowed.
    Rows(Vec<usize>),
    Dense(Matrix),
}

/// One realized sketching operator `S` (`r x n`).
#[derive(Clone, Debug, PartialEq)]
pub struct SketchDraw {
    pub scheme: SketchScheme,
    pub seed: u64,
    n: usize,
    repr: SketchRepr,
}

impl SketchDraw {
    /// Row selector for explicit (zero-based) indices.
    pub fn from_rows(n: usize, rows: Vec<usize>) -> Result<Self> {
        validate_rows(n, &rows)?;
        Ok(SketchDraw {
            scheme: SketchScheme::new(SketchKind::Uniform, rows.len()),
            seed: 0,
            n,
            repr: SketchRepr::Rows(rows),
        })
    }

    /// Wrap an explicit `r x n` matrix.
    pub fn from_dense(s: Matrix) -> Result<Self> {
        crate::linalg::ensure_finite(&s, "sketching matrix")?;
        Ok(SketchDraw {
            scheme: SketchScheme::new(SketchKind::Gaussian, s.nrows()),
            seed: 0,
            n: s.ncols(),
            repr: SketchRepr::Dense(s),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        match &self.repr {
            SketchRepr::Rows(rows) => rows.len(),
            SketchRepr::Dense(s) => s.nrows(),
        }
    }

    pub fn repr(&self) -> &SketchRepr {
        &self.repr
    }

    /// Same draw, scaled by `c`; sampling draws become dense.
    pub fn scaled(&self, c: f64) -> SketchDraw {
        SketchDraw {
            repr: SketchRepr::Dense(self.materialize() * c),
            ..self.clone()
        }
    }

    /// Explicit `r x n` matrix.
    pub fn materialize(&self) -> Matrix {
        match &self.repr {
            SketchRepr::Rows(rows) => {
                let mut s = Matrix::zeros(rows.len(), self.n);
                for (k, &i) in rows.iter().enumerate() {
                    s[(k, i)] = 1.0;
                }
                s
            }
            SketchRepr::Dense(s) => s.clone(),
        }
    }

    /// `S M` for `M` with `n` rows.
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.nrows() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "sketch expects {} rows, matrix has {}",
                self.n,
                m.nrows()
            )));
        }
        Ok(match &self.repr {
            SketchRepr::Rows(rows) => m.select_rows(rows.iter()),
            SketchRepr::Dense(s) => s * m,
        })
    }

    pub fn apply_vec(&self, v: &Vector) -> Result<Vector> {
        if v.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "sketch expects length {}, vector has {}",
                self.n,
                v.len()
            )));
        }
        Ok(match &self.repr {
            SketchRepr::Rows(rows) => Vector::from_iterator(rows.len(), rows.iter().map(|&i| v[i])),
            SketchRepr::Dense(s) => s * v,
        })
    }

    /// `M S` for `M` with `r` columns; the result has `n` columns.
    pub fn right_apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.ncols() != self.r() {
            return Err(Error::DimensionMismatch(format!(
                "sketch has {} rows, left factor has {} columns",
                self.r(),
                m.ncols()
            )));
        }
        Ok(match &self.repr {
            SketchRepr::Rows(rows) => {
                let mut out = Matrix::zeros(m.nrows(), self.n);
                for (k, &i) in rows.iter().enumerate() {
                    let mut col = out.column_mut(i);
                    col += m.column(k);
                }
                out
            }
            SketchRepr::Dense(s) => m * s,
        })
    }
}

fn validate_rows(n: usize, rows: &[usize]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidSketchDim { r: 0, n });
    }
    if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidInput(format!(
            "row index {bad} out of range for {n} rows"
        )));
    }
    Ok(())
}

/// Draw one sketch for `data`. Deterministic in `(scheme, seed)`.
pub fn draw_sketch(scheme: SketchScheme, data: &DesignData, seed: u64) -> Result<SketchDraw> {
    let n = data.n();
    let leverage = match scheme.kind {
        SketchKind::Leverage => Some(data.leverage_scores()),
        _ => None,
    };
    draw_with(scheme, n, leverage.as_ref(), seed)
}

/// Draw with precomputed leverage scores (required for [`SketchKind::Leverage`]).
pub fn draw_with(
    scheme: SketchScheme,
    n: usize,
    leverage: Option<&Vector>,
    seed: u64,
) -> Result<SketchDraw> {
    let r = scheme.r;
    if scheme.kind != SketchKind::Identity && (r == 0 || r > n) {
        return Err(Error::InvalidSketchDim { r, n });
    }
    let mut rng = rng_from_seed(seed);
    let repr = match scheme.kind {
        SketchKind::Identity => SketchRepr::Rows((0..n).collect()),
        SketchKind::Uniform => SketchRepr::Rows((0..r).map(|_| rng.random_range(0..n)).collect()),
        SketchKind::Leverage => {
            let scores = leverage.ok_or_else(|| {
                Error::InvalidInput("leverage sampling needs leverage scores".into())
            })?;
            if scores.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} leverage scores for {n} rows",
                    scores.len()
                )));
            }
            let weights = WeightedIndex::new(scores.iter().map(|&l| l.max(0.0)))
                .map_err(|e| Error::InvalidInput(format!("bad leverage weights: {e}")))?;
            SketchRepr::Rows((0..r).map(|_| weights.sample(&mut rng)).collect())
        }
        SketchKind::Gaussian => SketchRepr::Dense(normal_matrix(&mut rng, r, n)),
    };
    let scheme = match scheme.kind {
        SketchKind::Identity => SketchScheme::identity(n),
        _ => scheme,
    };
    Ok(SketchDraw {
        scheme,
        seed,
        n,
        repr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canonical() -> DesignData {
        let x = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        DesignData::new(x, Vector::from_vec(vec![1.0, 2.0, 3.0])).unwrap()
    }

    fn row_counts(draw: &SketchDraw, counts: &mut [usize]) {
        let SketchRepr::Rows(rows) = draw.repr() else {
            panic!("expected a row-sampling draw")
        };
        for &i in rows {
            counts[i] += 1;
        }
    }

    #[test]
    fn uniform_on_three_rows() {
        let n_draws = 100_000;
        let mut counts = [0usize; 3];
        // r <= n per draw, so pool many r = 3 draws into ~1e5 samples.
        for k in 0..n_draws / 3 {
            let d = draw_with(SketchScheme::new(SketchKind::Uniform, 3), 3, None, k as u64).unwrap();
            row_counts(&d, &mut counts);
        }
        let total: usize = counts.iter().sum();
        let q = 1.0 / 3.0;
        for c in counts {
            assert!((c as f64 / total as f64 - q).abs() < 3.0 * (q * (1.0 - q) / total as f64).sqrt());
        }
    }

    #[test]
    fn leverage_never_draws_zero_leverage_row() {
        let data = canonical();
        let mut counts = [0usize; 3];
        for k in 0..20_000u64 {
            let d = draw_sketch(SketchScheme::new(SketchKind::Leverage, 3), &data, k).unwrap();
            row_counts(&d, &mut counts);
        }
        assert_eq!(counts[2], 0);
        let total = (counts[0] + counts[1]) as f64;
        assert!((counts[0] as f64 / total - 0.5).abs() < 3.0 * (0.25 / total).sqrt());
    }

    #[test]
    fn gaussian_moments() {
        let d = draw_with(SketchScheme::new(SketchKind::Gaussian, 50), 100, None, 4).unwrap();
        let s = d.materialize();
        let m = s.len() as f64;
        let mean = s.sum() / m;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        assert!(mean.abs() < 4.0 / 5000f64.sqrt());
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn determinism() {
        let data = canonical();
        for kind in [SketchKind::Uniform, SketchKind::Leverage, SketchKind::Gaussian] {
            let s = SketchScheme::new(kind, 2);
            assert_eq!(draw_sketch(s, &data, 17).unwrap(), draw_sketch(s, &data, 17).unwrap());
        }
    }

    #[test]
    fn invalid_dimension() {
        let data = canonical();
        assert!(matches!(
            draw_sketch(SketchScheme::new(SketchKind::Uniform, 4), &data, 0),
            Err(Error::InvalidSketchDim { r: 4, n: 3 })
        ));
        assert!(matches!(
            draw_sketch(SketchScheme::new(SketchKind::Gaussian, 0), &data, 0),
            Err(Error::InvalidSketchDim { r: 0, n: 3 })
        ));
    }

    #[test]
    fn apply_examples() {
        let data = canonical();
        let sel = SketchDraw::from_rows(3, vec![0, 1]).unwrap();
        assert_eq!(sel.apply(data.x()).unwrap(), Matrix::identity(2, 2));
        let dup = SketchDraw::from_rows(3, vec![2, 2]).unwrap();
        assert_eq!(dup.apply(data.x()).unwrap(), Matrix::zeros(2, 2));
        let dense = SketchDraw::from_dense(Matrix::identity(3, 3) * 2.0).unwrap();
        assert_eq!(
            dense.apply_vec(data.y()).unwrap(),
            Vector::from_vec(vec![2.0, 4.0, 6.0])
        );
        assert!(matches!(
            sel.apply(&Matrix::zeros(2, 2)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn materialize_matches_identity_application() {
        let d = SketchDraw::from_rows(4, vec![3, 0, 3]).unwrap();
        assert_eq!(d.apply(&Matrix::identity(4, 4)).unwrap(), d.materialize());
        let m = Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(d.right_apply(&m).unwrap(), &m * d.materialize());
    }

    #[test]
    fn scheme_names_round_trip() {
        for kind in [
            SketchKind::Uniform,
            SketchKind::Leverage,
            SketchKind::Gaussian,
            SketchKind::Identity,
        ] {
            assert_eq!(kind.name().parse::<SketchKind>().unwrap(), kind);
        }
        assert!("srht".parse::<SketchKind>().is_err());
    }
}
