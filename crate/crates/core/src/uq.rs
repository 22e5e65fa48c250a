//! Conditional and total uncertainty of the sketched solution.
//!
//! Given a sketch `S`, the sketched solution has conditional mean `P0 beta0` and
//! conditional variance `sigma2 K K^T` with `K = X^+ P = (SX)^+ S`. Over random
//! sketches the total moments are
//!
//! ```text
//! E[beta~] = E_S[P0] beta0
//! V[beta~] = sigma2 (X^T X)^{-1}                          model
//!          + sigma2 X^+ (E_S[P P^T] - P_x) (X^+)^T        V_P
//!          + V_S[P0 beta0]                                V_P0
//! ```
//!
//! The expectations over `S` have no closed form for general schemes, so they
//! are Monte-Carlo averages over independent draws. `E_S[P P^T]` only ever
//! enters as `X^+ E_S[P P^T] (X^+)^T = E_S[K K^T]` (`p x p`) and through
//! `trace E_S[P P^T] = E_S ||P||_F^2`, so no `n x n` matrix is accumulated.
//! Monte-Carlo error bars are delete-one jackknife estimates over draws.
//!
//! The predictive risk `E ||X beta~ - X beta0||^2` splits into the model part
//! `sigma2 p`, the projector part `sigma2 trace(E_S[P P^T] - P_x)`, and the
//! prediction distortion `E_S ||X (I - P0) beta0||^2`
//! `= ||X B||^2 + trace(X^T X V_P0)`, where `B = (E_S[P0] - I) beta0`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, spectral_norm, Matrix, Vector};
use crate::model::{check_spec, DesignData, ExactFit, ModelSpec};
use crate::projector::{ProjectorSet, SketchedFit, SketchedSystem};
use crate::rng::{derive_seed, normal_vector, rng_from_seed, stream};
use crate::sketch::{draw_with, SketchDraw, SketchKind, SketchScheme};

/// Moments of the sketched solution for one fixed sketch.
#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ConditionalMoments {
    #[serde(with = "crate::io::vector_json")]
    pub cond_mean: Vector,
    #[serde(with = "crate::io::matrix_json")]
    pub cond_var: Matrix,
    #[serde(with = "crate::io::matrix_json")]
    pub cond_var_excess: Matrix,
}

pub fn conditional_moments(
    data: &DesignData,
    spec: &ModelSpec,
    draw: &SketchDraw,
) -> Result<ConditionalMoments> {
    check_spec(data, spec)?;
    let system = SketchedSystem::new(data, draw)?;
    let k = system.coefficient_map(draw)?;
    let cond_mean = system.bias_projector() * spec.beta0();
    let cond_var = (&k * k.transpose()) * spec.sigma2();
    let cond_var_excess = &cond_var - data.gram_inverse() * spec.sigma2();
    Ok(ConditionalMoments {
        cond_mean,
        cond_var,
        cond_var_excess,
    })
}

/// Monte-Carlo estimates of the total moments over sketches.
#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct TotalMoments {
    /// Estimate of `E_S[P0]`.
    #[serde(with = "crate::io::matrix_json")]
    pub mean_p0: Matrix,
    /// Estimate of `X^+ E_S[P P^T] (X^+)^T = E_S[K K^T]`.
    #[serde(with = "crate::io::matrix_json")]
    pub mean_ppt_reduced: Matrix,
    /// Estimate of `trace E_S[P P^T]`.
    pub mean_trace_ppt: f64,
    /// Unbiased (`1/(N-1)`) estimate of `V_S[P0 beta0]`.
    #[serde(with = "crate::io::matrix_json")]
    pub var_p0_beta: Matrix,
    #[serde(with = "crate::io::vector_json")]
    pub total_mean: Vector,
    #[serde(with = "crate::io::matrix_json")]
    pub total_var: Matrix,
    #[serde(with = "crate::io::matrix_json")]
    pub model_var: Matrix,
    /// Draws that entered the averages.
    pub n_draws: usize,
    pub n_requested: usize,
    pub rejection_rate: f64,
    /// Jackknife standard error of `total_var` in spectral norm.
    pub mc_std_err: f64,
}

/// Total bias, variance, MSE and predictive-risk decomposition.
#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct DecompositionReport {
    #[serde(with = "crate::io::vector_json")]
    pub excess_bias: Vector,
    #[serde(with = "crate::io::matrix_json")]
    pub excess_var_proj: Matrix,
    #[serde(with = "crate::io::matrix_json")]
    pub excess_var_rank: Matrix,
    pub mse_total: f64,
    pub mse_model: f64,
    pub mse_excess: f64,
    pub risk_total: f64,
    pub risk_model: f64,
    pub risk_excess_var: f64,
    pub risk_excess_bias: f64,
    pub rank_conditioned: bool,
}

/// Jackknife standard errors; matrices in spectral norm, vectors per coordinate.
#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct StdErrors {
    pub mean_p0: Option<f64>,
    #[serde(with = "crate::io::vector_json")]
    pub total_mean: Vector,
    pub total_var: f64,
    pub excess_var_proj: f64,
    pub excess_var_rank: f64,
    pub mse_total: f64,
    pub mse_model: f64,
    pub mse_excess: f64,
    pub risk_total: f64,
    pub risk_model: f64,
    pub risk_excess_var: f64,
    pub risk_excess_bias: f64,
    pub trace_excess_var_proj: f64,
}

/// Result of [`decompose`].
#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct UqAnalysis {
    pub scheme: SketchScheme,
    pub seed: u64,
    pub moments: TotalMoments,
    pub report: DecompositionReport,
    pub std_errors: StdErrors,
}

/// Scalar summaries shared by the closed-form and empirical routes.
#[derive(Clone, Copy, Debug, Default)]
struct Scalars {
    mse_total: f64,
    mse_model: f64,
    mse_excess: f64,
    risk_total: f64,
    risk_model: f64,
    risk_excess_var: f64,
    risk_excess_bias: f64,
    trace_excess_var_proj: f64,
}

impl Scalars {
    const LEN: usize = 8;

    fn to_array(self) -> [f64; Self::LEN] {
        [
            self.mse_total,
            self.mse_model,
            self.mse_excess,
            self.risk_total,
            self.risk_model,
            self.risk_excess_var,
            self.risk_excess_bias,
            self.trace_excess_var_proj,
        ]
    }
}

/// One point estimate of everything a report contains.
#[derive(Clone, Debug)]
struct Estimate {
    mean_p0: Option<Matrix>,
    total_mean: Vector,
    total_var: Matrix,
    excess_var_proj: Matrix,
    excess_var_rank: Matrix,
    scalars: Scalars,
}

impl Estimate {
    fn zeros_like(other: &Estimate) -> Estimate {
        let p = other.total_mean.len();
        Estimate {
            mean_p0: other.mean_p0.as_ref().map(|_| Matrix::zeros(p, p)),
            total_mean: Vector::zeros(p),
            total_var: Matrix::zeros(p, p),
            excess_var_proj: Matrix::zeros(p, p),
            excess_var_rank: Matrix::zeros(p, p),
            scalars: Scalars::default(),
        }
    }

    fn add_assign(&mut self, other: &Estimate) {
        if let (Some(a), Some(b)) = (self.mean_p0.as_mut(), other.mean_p0.as_ref()) {
            *a += b;
        }
        self.total_mean += &other.total_mean;
        self.total_var += &other.total_var;
        self.excess_var_proj += &other.excess_var_proj;
        self.excess_var_rank += &other.excess_var_rank;
        let mut s = self.scalars.to_array();
        for (a, b) in s.iter_mut().zip(other.scalars.to_array()) {
            *a += b;
        }
        self.scalars = scalars_from(s);
    }

    fn scale(&mut self, c: f64) {
        if let Some(a) = self.mean_p0.as_mut() {
            *a *= c;
        }
        self.total_mean *= c;
        self.total_var *= c;
        self.excess_var_proj *= c;
        self.excess_var_rank *= c;
        self.scalars = scalars_from(self.scalars.to_array().map(|v| v * c));
    }
}

fn scalars_from(s: [f64; Scalars::LEN]) -> Scalars {
    Scalars {
        mse_total: s[0],
        mse_model: s[1],
        mse_excess: s[2],
        risk_total: s[3],
        risk_model: s[4],
        risk_excess_var: s[5],
        risk_excess_bias: s[6],
        trace_excess_var_proj: s[7],
    }
}

/// Squared deviations of one estimate from a centre, per reported quantity.
#[derive(Clone, Debug)]
struct Spread {
    mean_p0: f64,
    total_mean: Vector,
    total_var: f64,
    excess_var_proj: f64,
    excess_var_rank: f64,
    scalars: [f64; Scalars::LEN],
}

impl Spread {
    fn zeros(p: usize) -> Spread {
        Spread {
            mean_p0: 0.0,
            total_mean: Vector::zeros(p),
            total_var: 0.0,
            excess_var_proj: 0.0,
            excess_var_rank: 0.0,
            scalars: [0.0; Scalars::LEN],
        }
    }

    fn between(e: &Estimate, centre: &Estimate) -> Spread {
        let sq = |a: &Matrix, b: &Matrix| spectral_norm(&(a - b)).powi(2);
        Spread {
            mean_p0: match (&e.mean_p0, &centre.mean_p0) {
                (Some(a), Some(b)) => sq(a, b),
                _ => 0.0,
            },
            total_mean: (&e.total_mean - &centre.total_mean).map(|v| v * v),
            total_var: sq(&e.total_var, &centre.total_var),
            excess_var_proj: sq(&e.excess_var_proj, &centre.excess_var_proj),
            excess_var_rank: sq(&e.excess_var_rank, &centre.excess_var_rank),
            scalars: {
                let a = e.scalars.to_array();
                let b = centre.scalars.to_array();
                std::array::from_fn(|i| (a[i] - b[i]).powi(2))
            },
        }
    }

    fn add_assign(&mut self, o: &Spread) {
        self.mean_p0 += o.mean_p0;
        self.total_mean += &o.total_mean;
        self.total_var += o.total_var;
        self.excess_var_proj += o.excess_var_proj;
        self.excess_var_rank += o.excess_var_rank;
        for (a, b) in self.scalars.iter_mut().zip(o.scalars) {
            *a += b;
        }
    }
}

const JACKKNIFE_CHUNK: usize = 128;

/// Delete-one jackknife over `n` units. `loo(i)` is the estimate without unit `i`.
/// Chunks are reduced in index order, so the result does not depend on the
/// number of worker threads.
fn jackknife<F>(n: usize, has_p0: bool, p: usize, loo: F) -> StdErrors
where
    F: Fn(usize) -> Estimate + Sync,
{
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(JACKKNIFE_CHUNK)
        .map(|s| (s, (s + JACKKNIFE_CHUNK).min(n)))
        .collect();
    let partial: Vec<Estimate> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let first = loo(s);
            let mut acc = first.clone();
            for i in s + 1..e {
                acc.add_assign(&loo(i));
            }
            acc
        })
        .collect();
    let mut centre = Estimate::zeros_like(&partial[0]);
    for part in &partial {
        centre.add_assign(part);
    }
    centre.scale(1.0 / n as f64);

    let spreads: Vec<Spread> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let mut acc = Spread::zeros(p);
            for i in s..e {
                acc.add_assign(&Spread::between(&loo(i), &centre));
            }
            acc
        })
        .collect();
    let mut total = Spread::zeros(p);
    for s in &spreads {
        total.add_assign(s);
    }
    let f = (n as f64 - 1.0) / n as f64;
    let se = |v: f64| (f * v).sqrt();
    let sc = total.scalars.map(se);
    StdErrors {
        mean_p0: has_p0.then(|| se(total.mean_p0)),
        total_mean: total.total_mean.map(se),
        total_var: se(total.total_var),
        excess_var_proj: se(total.excess_var_proj),
        excess_var_rank: se(total.excess_var_rank),
        mse_total: sc[0],
        mse_model: sc[1],
        mse_excess: sc[2],
        risk_total: sc[3],
        risk_model: sc[4],
        risk_excess_var: sc[5],
        risk_excess_bias: sc[6],
        trace_excess_var_proj: sc[7],
    }
}

/// Per-draw quantities whose averages determine every total moment.
#[derive(Clone, Debug)]
struct DrawTerms {
    rank: usize,
    p0: Matrix,
    p0_beta: Vector,
    kkt: Matrix,
    trace_ppt: f64,
}

fn draw_terms(data: &DesignData, spec: &ModelSpec, draw: &SketchDraw, sigma_vt: &Matrix) -> Result<DrawTerms> {
    let system = SketchedSystem::new(data, draw)?;
    let k = system.coefficient_map(draw)?;
    let p0 = system.bias_projector();
    let p0_beta = &p0 * spec.beta0();
    Ok(DrawTerms {
        rank: system.rank(),
        kkt: &k * k.transpose(),
        trace_ppt: (sigma_vt * &k).norm_squared(),
        p0,
        p0_beta,
    })
}

/// Linear sums over a set of draws.
#[derive(Clone, Debug)]
struct MomentSums {
    count: usize,
    p0: Matrix,
    p0_beta: Vector,
    p0_beta_outer: Matrix,
    kkt: Matrix,
    trace_ppt: f64,
}

impl MomentSums {
    fn new(p: usize) -> Self {
        MomentSums {
            count: 0,
            p0: Matrix::zeros(p, p),
            p0_beta: Vector::zeros(p),
            p0_beta_outer: Matrix::zeros(p, p),
            kkt: Matrix::zeros(p, p),
            trace_ppt: 0.0,
        }
    }

    fn add(&mut self, t: &DrawTerms) {
        self.count += 1;
        self.p0 += &t.p0;
        self.p0_beta += &t.p0_beta;
        self.p0_beta_outer += &t.p0_beta * t.p0_beta.transpose();
        self.kkt += &t.kkt;
        self.trace_ppt += t.trace_ppt;
    }

    fn without(&self, t: &DrawTerms) -> Self {
        MomentSums {
            count: self.count - 1,
            p0: &self.p0 - &t.p0,
            p0_beta: &self.p0_beta - &t.p0_beta,
            p0_beta_outer: &self.p0_beta_outer - &t.p0_beta * t.p0_beta.transpose(),
            kkt: &self.kkt - &t.kkt,
            trace_ppt: self.trace_ppt - t.trace_ppt,
        }
    }
}

/// Fixed per-problem quantities used when assembling moments.
struct Fixed {
    beta0: Vector,
    sigma2: f64,
    p: usize,
    gram: Matrix,
    model_var: Matrix,
}

impl Fixed {
    fn new(data: &DesignData, spec: &ModelSpec) -> Self {
        let sigma_vt = data.sigma_vt();
        Fixed {
            beta0: spec.beta0().clone(),
            sigma2: spec.sigma2(),
            p: data.p(),
            gram: sigma_vt.transpose() * &sigma_vt,
            model_var: data.gram_inverse() * spec.sigma2(),
        }
    }
}

struct Assembled {
    mean_p0: Matrix,
    mean_kkt: Matrix,
    mean_trace: f64,
    var_p0_beta: Matrix,
    estimate: Estimate,
    excess_bias: Vector,
}

fn assemble(s: &MomentSums, fx: &Fixed, rank_conditioned: bool) -> Assembled {
    let n = s.count as f64;
    let p = fx.p;
    let mean_p0 = &s.p0 / n;
    let mean_b = &s.p0_beta / n;
    let var_p0_beta = (&s.p0_beta_outer - &mean_b * mean_b.transpose() * n) / (n - 1.0);
    let mean_kkt = &s.kkt / n;
    let mean_trace = s.trace_ppt / n;

    let total_mean = &mean_p0 * &fx.beta0;
    let excess_bias = &total_mean - &fx.beta0;
    let excess_var_proj = (&mean_kkt * fx.sigma2) - &fx.model_var;
    let excess_var_rank = var_p0_beta.clone();
    let trace_vp = excess_var_proj.trace();

    let mse_model = fx.model_var.trace();
    let risk_model = fx.sigma2 * p as f64;
    let risk_excess_var = fx.sigma2 * (mean_trace - p as f64);
    let (total_var, mse_excess, risk_excess_bias) = if rank_conditioned {
        (&fx.model_var + &excess_var_proj, trace_vp, 0.0)
    } else {
        let bias_pred = (excess_bias.transpose() * &fx.gram * &excess_bias)[(0, 0)];
        (
            &fx.model_var + &excess_var_proj + &excess_var_rank,
            trace_vp + excess_var_rank.trace() + excess_bias.norm_squared(),
            bias_pred + (&fx.gram * &excess_var_rank).trace(),
        )
    };
    let scalars = Scalars {
        mse_total: mse_model + mse_excess,
        mse_model,
        mse_excess,
        risk_total: risk_model + risk_excess_var + risk_excess_bias,
        risk_model,
        risk_excess_var,
        risk_excess_bias,
        trace_excess_var_proj: trace_vp,
    };
    Assembled {
        estimate: Estimate {
            mean_p0: Some(mean_p0.clone()),
            total_mean,
            total_var,
            excess_var_proj,
            excess_var_rank,
            scalars,
        },
        mean_p0,
        mean_kkt,
        mean_trace,
        var_p0_beta,
        excess_bias,
    }
}

fn collect_draw_terms(
    data: &DesignData,
    spec: &ModelSpec,
    scheme: SketchScheme,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<DrawTerms>> {
    check_spec(data, spec)?;
    if n_draws < 2 {
        return Err(Error::InsufficientDraws(n_draws));
    }
    let leverage = (scheme.kind == SketchKind::Leverage).then(|| data.leverage_scores());
    let sigma_vt = data.sigma_vt();
    (0..n_draws)
        .into_par_iter()
        .map(|i| {
            let draw_seed = derive_seed(seed, &[stream::SKETCH, i as u64]);
            let draw = draw_with(scheme, data.n(), leverage.as_ref(), draw_seed)?;
            draw_terms(data, spec, &draw, &sigma_vt)
        })
        .collect()
}

fn analyse(
    data: &DesignData,
    spec: &ModelSpec,
    scheme: SketchScheme,
    n_draws: usize,
    seed: u64,
    rank_conditioned: bool,
) -> Result<UqAnalysis> {
    let mut terms = collect_draw_terms(data, spec, scheme, n_draws, seed)?;
    if rank_conditioned {
        terms.retain(|t| t.rank == data.p());
        if terms.is_empty() {
            return Err(Error::AllDrawsRankDeficient(n_draws));
        }
        if terms.len() < 2 {
            return Err(Error::InsufficientDraws(terms.len()));
        }
    }
    let fx = Fixed::new(data, spec);
    let mut sums = MomentSums::new(data.p());
    for t in &terms {
        sums.add(t);
    }
    let full = assemble(&sums, &fx, rank_conditioned);
    let std_errors = jackknife(terms.len(), true, data.p(), |i| {
        assemble(&sums.without(&terms[i]), &fx, rank_conditioned).estimate
    });

    let accepted = terms.len();
    let moments = TotalMoments {
        mean_p0: full.mean_p0,
        mean_ppt_reduced: full.mean_kkt,
        mean_trace_ppt: full.mean_trace,
        var_p0_beta: full.var_p0_beta,
        total_mean: full.estimate.total_mean.clone(),
        total_var: full.estimate.total_var.clone(),
        model_var: fx.model_var.clone(),
        n_draws: accepted,
        n_requested: n_draws,
        rejection_rate: (n_draws - accepted) as f64 / n_draws as f64,
        mc_std_err: std_errors.total_var,
    };
    let e = &full.estimate;
    let report = DecompositionReport {
        excess_bias: full.excess_bias,
        excess_var_proj: e.excess_var_proj.clone(),
        excess_var_rank: e.excess_var_rank.clone(),
        mse_total: e.scalars.mse_total,
        mse_model: e.scalars.mse_model,
        mse_excess: e.scalars.mse_excess,
        risk_total: e.scalars.risk_total,
        risk_model: e.scalars.risk_model,
        risk_excess_var: e.scalars.risk_excess_var,
        risk_excess_bias: e.scalars.risk_excess_bias,
        rank_conditioned,
    };
    Ok(UqAnalysis {
        scheme,
        seed,
        moments,
        report,
        std_errors,
    })
}

/// Monte-Carlo total moments over `n_draws` independent sketches.
pub fn total_moments(
    data: &DesignData,
    spec: &ModelSpec,
    scheme: SketchScheme,
    n_draws: usize,
    seed: u64,
) -> Result<TotalMoments> {
    Ok(analyse(data, spec, scheme, n_draws, seed, false)?.moments)
}

/// Full bias/variance/MSE/risk decomposition. With `rank_conditioned`, draws
/// with `rank(SX) < p` are rejected and the report uses the rank-preserved
/// forms (no excess bias, no `V_P0` term, no prediction distortion).
pub fn decompose(
    data: &DesignData,
    spec: &ModelSpec,
    scheme: SketchScheme,
    n_draws: usize,
    seed: u64,
    rank_conditioned: bool,
) -> Result<UqAnalysis> {
    analyse(data, spec, scheme, n_draws, seed, rank_conditioned)
}

/// Brute-force estimates from simulated noise and sketches.
#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct OracleEstimate {
    #[serde(with = "crate::io::vector_json")]
    pub total_mean: Vector,
    #[serde(with = "crate::io::matrix_json")]
    pub total_var: Matrix,
    /// Sample covariance of the exact solution over the same noise draws.
    #[serde(with = "crate::io::matrix_json")]
    pub model_var: Matrix,
    pub report: DecompositionReport,
    pub std_errors: StdErrors,
    pub n_noise: usize,
    pub n_draws: usize,
}

/// Sufficient statistics of one sketch draw's block of noise replicates.
#[derive(Clone, Debug)]
struct GroupStats {
    sum_t: Vector,
    outer_t: Matrix,
    sum_h: Vector,
    outer_h: Matrix,
    sq_err_t: f64,
    sq_err_h: f64,
    pred_err_t: f64,
    pred_err_h: f64,
    group_mean: Vector,
    group_mean_outer: Matrix,
    within: Matrix,
    pred_bias: f64,
}

impl GroupStats {
    fn zeros(p: usize) -> Self {
        GroupStats {
            sum_t: Vector::zeros(p),
            outer_t: Matrix::zeros(p, p),
            sum_h: Vector::zeros(p),
            outer_h: Matrix::zeros(p, p),
            sq_err_t: 0.0,
            sq_err_h: 0.0,
            pred_err_t: 0.0,
            pred_err_h: 0.0,
            group_mean: Vector::zeros(p),
            group_mean_outer: Matrix::zeros(p, p),
            within: Matrix::zeros(p, p),
            pred_bias: 0.0,
        }
    }

    fn combine(&mut self, o: &GroupStats, sign: f64) {
        self.sum_t += &o.sum_t * sign;
        self.outer_t += &o.outer_t * sign;
        self.sum_h += &o.sum_h * sign;
        self.outer_h += &o.outer_h * sign;
        self.sq_err_t += sign * o.sq_err_t;
        self.sq_err_h += sign * o.sq_err_h;
        self.pred_err_t += sign * o.pred_err_t;
        self.pred_err_h += sign * o.pred_err_h;
        self.group_mean += &o.group_mean * sign;
        self.group_mean_outer += &o.group_mean_outer * sign;
        self.within += &o.within * sign;
        self.pred_bias += sign * o.pred_bias;
    }
}

fn sample_cov(sum: &Vector, outer: &Matrix, n: f64) -> Matrix {
    let mean = sum / n;
    (outer - &mean * mean.transpose() * n) / (n - 1.0)
}

fn oracle_estimate(
    s: &GroupStats,
    groups: usize,
    n_noise: usize,
    beta0: &Vector,
    gram: &Matrix,
) -> (Estimate, Matrix) {
    let g = groups as f64;
    let m = n_noise as f64;
    let total = g * m;
    let total_mean = &s.sum_t / total;
    let total_var = sample_cov(&s.sum_t, &s.outer_t, total);
    let model_var = sample_cov(&s.sum_h, &s.outer_h, total);
    let within = &s.within / g;
    let between = sample_cov(&s.group_mean, &s.group_mean_outer, g) - &within / m;
    let excess_var_proj = &within - &model_var;

    let mse_total = s.sq_err_t / total;
    let mse_model = s.sq_err_h / total;
    let risk_total = s.pred_err_t / total;
    let risk_model = s.pred_err_h / total;
    let within_pred = (gram * &within).trace();
    let scalars = Scalars {
        mse_total,
        mse_model,
        mse_excess: mse_total - mse_model,
        risk_total,
        risk_model,
        risk_excess_var: within_pred - risk_model,
        risk_excess_bias: s.pred_bias / g - within_pred / m,
        trace_excess_var_proj: excess_var_proj.trace(),
    };
    let _ = beta0;
    (
        Estimate {
            mean_p0: None,
            total_mean,
            total_var,
            excess_var_proj,
            excess_var_rank: between,
            scalars,
        },
        model_var,
    )
}

/// Estimate every total quantity by simulation alone: for each of `n_draws`
/// sketches and `n_noise` noise vectors, solve `(SX)^+ S (X beta0 + eps)`
/// directly. The variance split follows the law of total variance on the
/// simulated solutions (within-sketch and between-sketch covariance).
/// Standard errors are jackknife over sketch draws.
pub fn empirical_oracle(
    data: &DesignData,
    spec: &ModelSpec,
    scheme: SketchScheme,
    n_noise: usize,
    n_draws: usize,
    seed: u64,
) -> Result<OracleEstimate> {
    check_spec(data, spec)?;
    if n_draws < 2 {
        return Err(Error::InsufficientDraws(n_draws));
    }
    if n_noise < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 noise draws per sketch, got {n_noise}"
        )));
    }
    let p = data.p();
    let beta0 = spec.beta0();
    let x = data.x();
    let mean_y = x * beta0;
    let sd = spec.sigma2().sqrt();
    let leverage = (scheme.kind == SketchKind::Leverage).then(|| data.leverage_scores());

    let groups: Vec<GroupStats> = (0..n_draws)
        .into_par_iter()
        .map(|g| -> Result<GroupStats> {
            let draw_seed = derive_seed(seed, &[stream::SKETCH, g as u64]);
            let draw = draw_with(scheme, data.n(), leverage.as_ref(), draw_seed)?;
            let system = SketchedSystem::new(data, &draw)?;
            let mut st = GroupStats::zeros(p);
            let mut rng = rng_from_seed(derive_seed(seed, &[stream::NOISE, g as u64]));
            for _ in 0..n_noise {
                let y = &mean_y + normal_vector(&mut rng, data.n(), sd);
                let bt = system.solve(&draw, &y)?;
                let bh = data.x_pinv() * &y;
                let dt = &bt - beta0;
                let dh = &bh - beta0;
                st.sq_err_t += dt.norm_squared();
                st.sq_err_h += dh.norm_squared();
                st.pred_err_t += (x * &dt).norm_squared();
                st.pred_err_h += (x * &dh).norm_squared();
                st.outer_t += &bt * bt.transpose();
                st.outer_h += &bh * bh.transpose();
                st.sum_t += bt;
                st.sum_h += bh;
            }
            let m = n_noise as f64;
            st.group_mean = &st.sum_t / m;
            st.group_mean_outer = &st.group_mean * st.group_mean.transpose();
            st.within = sample_cov(&st.sum_t, &st.outer_t, m);
            st.pred_bias = (x * (&st.group_mean - beta0)).norm_squared();
            Ok(st)
        })
        .collect::<Result<_>>()?;

    let mut sums = GroupStats::zeros(p);
    for gs in &groups {
        sums.combine(gs, 1.0);
    }
    let sigma_vt = data.sigma_vt();
    let gram = sigma_vt.transpose() * &sigma_vt;
    let (est, model_var) = oracle_estimate(&sums, n_draws, n_noise, beta0, &gram);
    let std_errors = jackknife(n_draws, false, p, |i| {
        let mut loo = sums.clone();
        loo.combine(&groups[i], -1.0);
        oracle_estimate(&loo, n_draws - 1, n_noise, beta0, &gram).0
    });
    let report = DecompositionReport {
        excess_bias: &est.total_mean - beta0,
        excess_var_proj: est.excess_var_proj.clone(),
        excess_var_rank: est.excess_var_rank.clone(),
        mse_total: est.scalars.mse_total,
        mse_model: est.scalars.mse_model,
        mse_excess: est.scalars.mse_excess,
        risk_total: est.scalars.risk_total,
        risk_model: est.scalars.risk_model,
        risk_excess_var: est.scalars.risk_excess_var,
        risk_excess_bias: est.scalars.risk_excess_bias,
        rank_conditioned: false,
    };
    Ok(OracleEstimate {
        total_mean: est.total_mean,
        total_var: est.total_var,
        model_var,
        report,
        std_errors,
        n_noise,
        n_draws,
    })
}

/// `lhs <= rhs` for one relative-error bound.
#[derive(Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// The looser `1 / cos(theta)` form, when `cos(theta) > 0`.
    pub rhs_cos: Option<f64>,
    pub holds: bool,
}

/// The earlier structural bound `kappa sqrt(gamma^-2 - 1) sqrt(eta)`, reported for comparison.
#[derive(Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ResidualBound {
    pub gamma: f64,
    pub eta: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct StructuralBounds {
    pub cos_theta: f64,
    /// `0 < theta < pi/2`.
    pub theta_interior: bool,
    pub solution: BoundCheck,
    pub prediction: Option<BoundCheck>,
    pub residual_based: Option<ResidualBound>,
}

const BOUND_REL_SLACK: f64 = 1e-10;

fn within(lhs: f64, rhs: f64, abs_slack: f64) -> bool {
    lhs <= rhs * (1.0 + BOUND_REL_SLACK) + abs_slack
}

/// Relative-error bounds for the sketched solution and prediction in terms of
/// `||P - P_x||_2`.
pub fn structural_bounds(
    fit: &ExactFit,
    sfit: &SketchedFit,
    proj: &ProjectorSet,
) -> Result<StructuralBounds> {
    let beta_norm = fit.beta_hat.norm();
    if beta_norm == 0.0 {
        return Err(Error::BoundUndefined(
            "exact solution is zero, relative error undefined".into(),
        ));
    }
    let cos = fit.cos_theta;
    let kappa = fit.kappa_x;
    let dev = proj.dev_p_px;
    // Rounding in lhs is of order kappa * eps relative.
    let abs_slack = 1e3 * f64::EPSILON * kappa / cos.max(f64::EPSILON);

    let lhs = (&sfit.beta_tilde - &fit.beta_hat).norm() / beta_norm;
    let rhs = kappa * fit.norm_y / (fit.norm_x * beta_norm) * dev;
    let rhs_cos = (cos > 0.0).then(|| kappa * dev / cos);
    let holds = within(lhs, rhs, abs_slack) && rhs_cos.is_none_or(|rc| within(rhs, rc, abs_slack));
    let solution = BoundCheck {
        lhs,
        rhs,
        rhs_cos,
        holds,
    };

    let y_hat_norm = fit.y_hat.norm();
    let prediction = (cos > 0.0 && y_hat_norm > 0.0).then(|| {
        let lhs = (&sfit.y_tilde - &fit.y_hat).norm() / y_hat_norm;
        let rhs = dev / cos;
        BoundCheck {
            lhs,
            rhs,
            rhs_cos: Some(rhs),
            holds: within(lhs, rhs, abs_slack),
        }
    });

    let res_norm = fit.residual.norm();
    let residual_based = if res_norm > 0.0 && cos > 0.0 {
        let eta = sfit.residual_tilde.norm() / res_norm - 1.0;
        (eta >= 0.0).then(|| {
            let rhs = kappa * (cos.powi(-2) - 1.0).max(0.0).sqrt() * eta.sqrt();
            ResidualBound {
                gamma: cos,
                eta,
                rhs,
                holds: within(lhs, rhs, abs_slack),
            }
        })
    } else {
        None
    };

    Ok(StructuralBounds {
        cos_theta: cos,
        theta_interior: cos > 0.0 && cos < 1.0,
        solution,
        prediction,
        residual_based,
    })
}

/// Distance between a closed-form quantity and its oracle estimate, in
/// combined standard errors.
#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Agreement {
    pub quantity: &'static str,
    /// `|formula - oracle|`, spectral norm for matrices and max-abs for vectors.
    pub difference: f64,
    pub combined_std_err: f64,
    pub ratio: f64,
}

impl Agreement {
    fn new(quantity: &'static str, difference: f64, se_a: f64, se_b: f64) -> Self {
        let combined_std_err = se_a.hypot(se_b);
        let ratio = if combined_std_err > 0.0 {
            difference / combined_std_err
        } else if difference == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        Agreement {
            quantity,
            difference,
            combined_std_err,
            ratio,
        }
    }
}

/// Compare every shared field of a decomposition with the empirical oracle.
pub fn agreement(analysis: &UqAnalysis, oracle: &OracleEstimate) -> Vec<Agreement> {
    let (r, o) = (&analysis.report, &oracle.report);
    let (sr, so) = (&analysis.std_errors, &oracle.std_errors);
    let mat = |a: &Matrix, b: &Matrix| spectral_norm(&(a - b));
    let mean_diff = (&analysis.moments.total_mean - &oracle.total_mean).amax();
    let mean_se = sr.total_mean.amax().hypot(so.total_mean.amax());
    vec![
        Agreement::new("totalMean", mean_diff, mean_se, 0.0),
        Agreement::new(
            "totalVar",
            mat(&analysis.moments.total_var, &oracle.total_var),
            sr.total_var,
            so.total_var,
        ),
        Agreement::new(
            "excessVarProj",
            mat(&r.excess_var_proj, &o.excess_var_proj),
            sr.excess_var_proj,
            so.excess_var_proj,
        ),
        Agreement::new(
            "excessVarRank",
            mat(&r.excess_var_rank, &o.excess_var_rank),
            sr.excess_var_rank,
            so.excess_var_rank,
        ),
        Agreement::new("mseTotal", (r.mse_total - o.mse_total).abs(), sr.mse_total, so.mse_total),
        Agreement::new("mseExcess", (r.mse_excess - o.mse_excess).abs(), sr.mse_excess, so.mse_excess),
        Agreement::new("riskTotal", (r.risk_total - o.risk_total).abs(), sr.risk_total, so.risk_total),
        Agreement::new(
            "riskExcessVar",
            (r.risk_excess_var - o.risk_excess_var).abs(),
            sr.risk_excess_var,
            so.risk_excess_var,
        ),
        Agreement::new(
            "riskExcessBias",
            (r.risk_excess_bias - o.risk_excess_bias).abs(),
            sr.risk_excess_bias,
            so.risk_excess_bias,
        ),
    ]
}

/// Loewner check helper: smallest eigenvalue of `total_var - model_var`.
pub fn excess_min_eigenvalue(m: &TotalMoments) -> f64 {
    min_eigenvalue(&(&m.total_var - &m.model_var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::exact_solve;
    use crate::projector::{build_projectors, sketched_solve};

    fn canonical() -> (DesignData, ModelSpec) {
        let x = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let data = DesignData::new(x, Vector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let spec = ModelSpec::new(Vector::from_vec(vec![1.0, 2.0]), 1.0).unwrap();
        (data, spec)
    }

    #[test]
    fn conditional_two_row_selector() {
        let (data, spec) = canonical();
        let cm = conditional_moments(&data, &spec, &SketchDraw::from_rows(3, vec![0, 1]).unwrap()).unwrap();
        assert!((&cm.cond_mean - spec.beta0()).amax() < 1e-15);
        assert!((&cm.cond_var - Matrix::identity(2, 2)).amax() < 1e-15);
        assert!(cm.cond_var_excess.amax() < 1e-15);
    }

    #[test]
    fn conditional_one_row_selector() {
        let (data, spec) = canonical();
        let cm = conditional_moments(&data, &spec, &SketchDraw::from_rows(3, vec![0]).unwrap()).unwrap();
        assert!((&cm.cond_mean - Vector::from_vec(vec![1.0, 0.0])).amax() < 1e-15);
    }

    #[test]
    fn identity_scheme_has_no_excess() {
        let (data, spec) = canonical();
        let a = decompose(&data, &spec, SketchScheme::identity(3), 10, 1, false).unwrap();
        assert!((&a.moments.total_mean - spec.beta0()).amax() < 1e-14);
        assert!((&a.moments.total_var - &a.moments.model_var).amax() < 1e-14);
        assert!(a.report.excess_bias.amax() < 1e-14);
        assert!(a.report.mse_excess.abs() < 1e-14);
        assert!(a.report.risk_excess_var.abs() < 1e-14);
        assert!(a.report.risk_excess_bias.abs() < 1e-14);
        assert!((a.report.mse_total - 2.0).abs() < 1e-14);
    }

    #[test]
    fn too_few_draws() {
        let (data, spec) = canonical();
        assert!(matches!(
            total_moments(&data, &spec, SketchScheme::identity(3), 1, 0),
            Err(Error::InsufficientDraws(1))
        ));
    }

    #[test]
    fn rank_conditioning_with_r_below_p_fails() {
        let (data, spec) = canonical();
        assert!(matches!(
            decompose(&data, &spec, SketchScheme::new(SketchKind::Uniform, 1), 50, 0, true),
            Err(Error::AllDrawsRankDeficient(50))
        ));
    }

    #[test]
    fn report_invariants() {
        let (data, spec) = canonical();
        let a = decompose(&data, &spec, SketchScheme::new(SketchKind::Uniform, 2), 400, 3, false).unwrap();
        let r = &a.report;
        let m = &a.moments;
        let mse_from_var = m.total_var.trace() + r.excess_bias.norm_squared();
        assert!((r.mse_total - mse_from_var).abs() <= 1e-8 * r.mse_total.abs());
        let risk_sum = r.risk_model + r.risk_excess_var + r.risk_excess_bias;
        assert!((r.risk_total - risk_sum).abs() <= 1e-8 * r.risk_total.abs());
        let mean_formula = spec.beta0() - (Matrix::identity(2, 2) - &m.mean_p0) * spec.beta0();
        assert!((&m.total_mean - mean_formula).amax() < 1e-14);
    }

    #[test]
    fn structural_bounds_examples() {
        let (data, _) = canonical();
        let fit = exact_solve(&data);
        let id = SketchDraw::from_rows(3, vec![0, 1, 2]).unwrap();
        let b = structural_bounds(&fit, &sketched_solve(&data, &id).unwrap(), &build_projectors(&data, &id).unwrap()).unwrap();
        assert!(b.solution.lhs < 1e-15 && b.solution.holds);

        let one = SketchDraw::from_rows(3, vec![0]).unwrap();
        let b = structural_bounds(&fit, &sketched_solve(&data, &one).unwrap(), &build_projectors(&data, &one).unwrap()).unwrap();
        assert!((b.solution.lhs - 2.0 / 5f64.sqrt()).abs() < 1e-14);
        assert!((b.cos_theta - (5.0f64 / 14.0).sqrt()).abs() < 1e-14);
        assert!(b.solution.holds);
        assert!(b.prediction.unwrap().holds);
    }

    #[test]
    fn structural_bounds_zero_solution() {
        let (data, _) = canonical();
        let data = data.with_response(Vector::from_vec(vec![0.0, 0.0, 1.0])).unwrap();
        let fit = exact_solve(&data);
        let id = SketchDraw::from_rows(3, vec![0, 1]).unwrap();
        let err = structural_bounds(&fit, &sketched_solve(&data, &id).unwrap(), &build_projectors(&data, &id).unwrap());
        assert!(matches!(err, Err(Error::BoundUndefined(_))));
    }
}
