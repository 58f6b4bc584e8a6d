//! Finite-n regularity quantities: eigenvalue growth of `H^indep`, sampled ball suprema of
//! the link and correlation constants, and Monte Carlo optimality matrices.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::correlation::{CorrelationModel, CorrelationPath};
use crate::error::{GeeError, Result};
use crate::estimator::{covariance_estimates, EstimatingContext, MethodSpec, SolverSettings};
use crate::linalg::{self, SymEigen};
use crate::model::{Link, LongitudinalDataset};
use crate::simulation::{par_reps, sandwich_sum, EntrywiseEstimate, Simulator};

pub use crate::estimator::h_indep;

/// Where the ball suprema are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BallSampling {
    pub r: f64,
    pub delta: f64,
    pub ball_samples: usize,
    pub seed: u64,
}

impl Default for BallSampling {
    fn default() -> Self {
        BallSampling { r: 0.1, delta: 0.1, ball_samples: 32, seed: 0 }
    }
}

/// The center, the `2p` points `center ± r e_l`, and `ball_samples` uniform points of the ball.
pub fn ball_points(center: &DVector<f64>, r: f64, ball_samples: usize, seed: u64) -> Vec<DVector<f64>> {
    let p = center.len();
    let mut pts = vec![center.clone()];
    for l in 0..p {
        for sign in [1.0, -1.0] {
            let mut b = center.clone();
            b[l] += sign * r;
            pts.push(b);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    for _ in 0..ball_samples {
        let dir = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        let norm: f64 = dir.norm();
        let u: f64 = unit.sample(&mut rng);
        let radius = r * u.powf(1.0 / p as f64);
        pts.push(center + dir * (radius / norm.max(f64::MIN_POSITIVE)));
    }
    pts
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularityConstants {
    pub n: usize,
    pub r: f64,
    pub delta: f64,
    pub points_evaluated: usize,
    pub seed: u64,
    pub lambda_min_h_indep: f64,
    pub lambda_max_h_indep: f64,
    pub gamma: f64,
    pub a_n: f64,
    pub k2: f64,
    pub k3: f64,
    pub eta: f64,
    pub pi: f64,
    pub rho: f64,
    pub q: f64,
    pub delta_n: f64,
    pub tau_star: f64,
    pub c_star: f64,
}

/// `γ = max x_ijᵀ H⁻¹ x_ij` and `a_n = λ_max(H)·γ` for `H = H^indep(β)`.
pub fn gamma_and_a_n(ds: &LongitudinalDataset, beta: &DVector<f64>, link: Link) -> Result<(f64, f64)> {
    let h = h_indep(ds, beta, link)?;
    let hinv = linalg::spd_inverse(&h)?;
    let mut gamma: f64 = 0.0;
    for ind in ds.individuals() {
        for row in ind.x.row_iter() {
            let x = row.transpose();
            gamma = gamma.max(x.dot(&(&hinv * &x)));
        }
    }
    Ok((gamma, linalg::lambda_max(&h) * gamma))
}

/// `(η, k2, k3)` over the sampled points.
fn link_suprema(ds: &LongitudinalDataset, link: Link, points: &[DVector<f64>]) -> Result<(f64, f64, f64)> {
    let cells = ds.n() * ds.m();
    let mut lo = vec![f64::INFINITY; cells];
    let mut hi = vec![0.0f64; cells];
    let (mut k2, mut k3) = (0.0f64, 0.0f64);
    for beta in points {
        let mut cell = 0;
        for ind in ds.individuals() {
            let eta: DVector<f64> = &ind.x * beta;
            for &u in eta.iter() {
                let v = link.values(u)?;
                k2 = k2.max((v.d2 / v.d1).abs());
                k3 = k3.max((v.d3 / v.d1).abs());
                lo[cell] = lo[cell].min(v.d1);
                hi[cell] = hi[cell].max(v.d1);
                cell += 1;
            }
        }
    }
    let eta = lo.iter().zip(&hi).map(|(l, h)| (h / l).sqrt() - 1.0).fold(0.0, f64::max);
    Ok((eta, k2, k3))
}

fn correlation_suprema(
    ds: &LongitudinalDataset,
    link: Link,
    model: &CorrelationModel,
    settings: &SolverSettings,
    center: &CorrelationPath,
    points: &[DVector<f64>],
) -> Result<(f64, f64)> {
    let half: Vec<DMatrix<f64>> =
        (0..ds.n()).map(|i| SymEigen::new(center.inverse(i)).map(|v| 1.0 / v.sqrt())).collect();
    let (mut pi, mut q) = (1.0f64, 0.0f64);
    for beta in points {
        let path = model.path(ds, beta, link, &settings.ridge, true)?;
        for (i, hf) in half.iter().enumerate() {
            pi = pi.max(linalg::lambda_max(&(hf * path.inverse(i) * hf)));
            for l in 0..ds.p() {
                if let Some(d) = path.derivative(i, l) {
                    q = q.max(linalg::lambda_max(d));
                }
            }
        }
    }
    Ok((pi, q))
}

/// Constants of the strong-consistency conditions at `center`, with suprema over the ball
/// `‖β − center‖ ≤ r` replaced by maxima over [`ball_points`] (so they are lower bounds).
pub fn regularity_constants(
    ds: &LongitudinalDataset,
    center: &DVector<f64>,
    link: Link,
    model: &CorrelationModel,
    sampling: BallSampling,
    settings: SolverSettings,
) -> Result<RegularityConstants> {
    if !(sampling.r > 0.0) || sampling.ball_samples == 0 {
        return Err(GeeError::InvalidParameter("need r > 0 and at least one ball sample".into()));
    }
    ds.check_beta(center)?;
    let h = h_indep(ds, center, link)?;
    let eig = SymEigen::new(&h);
    let (gamma, a_n) = gamma_and_a_n(ds, center, link)?;
    let points = ball_points(center, sampling.r, sampling.ball_samples, sampling.seed);
    let (eta, k2, k3) = if link == Link::Linear { (0.0, 0.0, 0.0) } else { link_suprema(ds, link, &points)? };
    let center_path = model.path(ds, center, link, &settings.ridge, false)?;
    let (pi, q) = if model.depends_on_beta() {
        correlation_suprema(ds, link, model, &settings, &center_path, &points)?
    } else {
        (1.0, 0.0)
    };
    let alpha_n = eig.max();
    let tau_star = ds.m() as f64 * (0..ds.n()).map(|i| linalg::lambda_max(center_path.inverse(i))).fold(0.0, f64::max);
    let ctx = EstimatingContext { dataset: ds, link, model, settings };
    let c_star = covariance_estimates(&ctx, center)
        .ok()
        .and_then(|cov| {
            let m_half = SymEigen::new(&cov.m);
            (m_half.min() > 0.0).then(|| {
                let w = m_half.map(|v| 1.0 / v.sqrt());
                linalg::lambda_max(&(&w * &cov.h * &w))
            })
        })
        .unwrap_or(f64::NAN);
    Ok(RegularityConstants {
        n: ds.n(),
        r: sampling.r,
        delta: sampling.delta,
        points_evaluated: points.len(),
        seed: sampling.seed,
        lambda_min_h_indep: eig.min(),
        lambda_max_h_indep: alpha_n,
        gamma,
        a_n,
        k2,
        k3,
        eta,
        pi,
        rho: pi - 1.0,
        q,
        delta_n: alpha_n.powf(-0.5 - sampling.delta) * alpha_n,
        tau_star,
        c_star,
    })
}

/// `η(r)` over a grid of radii and the least-squares slope `C` in `η(r) ≈ C·r·a_n^{1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaSlope {
    pub r_grid: Vec<f64>,
    pub eta: Vec<f64>,
    pub a_n: f64,
    pub slope: f64,
}

pub fn eta_slope(
    ds: &LongitudinalDataset,
    center: &DVector<f64>,
    link: Link,
    r_grid: &[f64],
    ball_samples: usize,
    seed: u64,
) -> Result<EtaSlope> {
    if r_grid.is_empty() || r_grid.iter().any(|r| !(*r > 0.0)) {
        return Err(GeeError::InvalidParameter("r grid must be non-empty and positive".into()));
    }
    let (_, a_n) = gamma_and_a_n(ds, center, link)?;
    let eta = r_grid
        .iter()
        .map(|&r| Ok(link_suprema(ds, link, &ball_points(center, r, ball_samples, seed))?.0))
        .collect::<Result<Vec<_>>>()?;
    let t: Vec<f64> = r_grid.iter().map(|r| r * a_n.sqrt()).collect();
    let slope = t.iter().zip(&eta).map(|(t, e)| t * e).sum::<f64>() / t.iter().map(|t| t * t).sum::<f64>();
    Ok(EtaSlope { r_grid: r_grid.to_vec(), eta, a_n, slope })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypothesisOptions {
    pub delta: f64,
    /// Defaults to the ratio at the first grid point.
    pub c0: Option<f64>,
    /// Bound `C` on `‖β‖` used by the link-specific covariate sums.
    pub param_bound: f64,
}

impl Default for HypothesisOptions {
    fn default() -> Self {
        HypothesisOptions { delta: 0.1, c0: None, param_bound: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisRow {
    pub n: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `λ_min / λ_max^{1/2+δ}`.
    pub ratio: f64,
    pub meets_c0: bool,
    pub rank_deficient: bool,
    /// `Σ w_ij λ_min(x_ij x_ijᵀ)` with the link's lower weight; zero whenever `p ≥ 2`.
    pub covariate_lower_sum: Option<f64>,
    /// `Σ v_ij λ_max(x_ij x_ijᵀ)` with the link's upper weight.
    pub covariate_upper_sum: Option<f64>,
    /// `λ_min` of the link's matrix lower bound on `H^indep`.
    pub lower_bound_lambda_min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    pub delta: f64,
    pub c0: f64,
    pub rows: Vec<HypothesisRow>,
    pub lambda_min_monotone: bool,
    pub ratio_increasing: bool,
}

/// `(lower weight, upper weight, matrix lower-bound coefficient)` for one covariate vector.
fn link_weights(link: Link, norm: f64, c: f64) -> Option<(f64, f64, f64)> {
    match link {
        Link::Linear => Some((1.0, 1.0, 1.0)),
        Link::Logistic => {
            let a = (-c * norm).exp() / (1.0 + (c * norm).exp());
            Some((a, 1.0, 0.5 * a))
        }
        Link::Log => {
            let b = (c * norm).exp();
            Some((1.0 / b, b, 1.0 / b))
        }
        Link::Probit => None,
    }
}

/// Growth of `H^indep(β)` along prefixes of `ds`.
pub fn hypothesis_check(
    ds: &LongitudinalDataset,
    beta: &DVector<f64>,
    link: Link,
    n_grid: &[usize],
    options: HypothesisOptions,
) -> Result<HypothesisReport> {
    ds.check_beta(beta)?;
    if n_grid.is_empty()
        || n_grid.windows(2).any(|w| w[0] >= w[1])
        || n_grid[0] == 0
        || *n_grid.last().unwrap() > ds.n()
    {
        return Err(GeeError::InvalidParameter("n grid must be increasing and within the dataset".into()));
    }
    let p = ds.p();
    let mut h = DMatrix::zeros(p, p);
    let mut lower_mat = DMatrix::zeros(p, p);
    let (mut low_sum, mut up_sum) = (0.0, 0.0);
    let weighted = link_weights(link, 0.0, options.param_bound).is_some();
    let mut raw = Vec::new();
    let mut next = 0;
    for (i, ind) in ds.individuals().iter().enumerate() {
        if next == n_grid.len() {
            break;
        }
        let ev = crate::model::SubjectEval::new(ind, beta, link)?;
        for (j, row) in ind.x.row_iter().enumerate() {
            let x = row.transpose();
            h.ger(ev.values[j].d1, &x, &x, 1.0);
            let norm = x.norm();
            if let Some((lw, uw, mc)) = link_weights(link, norm, options.param_bound) {
                // x xᵀ has eigenvalues ‖x‖² and zero (p − 1 times).
                let outer_min = if p == 1 { norm * norm } else { 0.0 };
                low_sum += lw * outer_min;
                up_sum += uw * norm * norm;
                lower_mat.ger(mc, &x, &x, 1.0);
            }
        }
        if i + 1 == n_grid[next] {
            let eig = SymEigen::new(&h);
            let (lmin, lmax) = (eig.min(), eig.max());
            raw.push((n_grid[next], lmin, lmax, low_sum, up_sum, linalg::lambda_min(&lower_mat)));
            next += 1;
        }
    }
    let ratio = |lmin: f64, lmax: f64| lmin / lmax.powf(0.5 + options.delta);
    let c0 = options.c0.unwrap_or_else(|| ratio(raw[0].1, raw[0].2));
    let rows: Vec<HypothesisRow> = raw
        .iter()
        .map(|&(n, lmin, lmax, lo, up, lb)| {
            let r = ratio(lmin, lmax);
            HypothesisRow {
                n,
                lambda_min: lmin,
                lambda_max: lmax,
                ratio: r,
                meets_c0: r >= c0 * (1.0 - 1e-12),
                rank_deficient: lmin <= 1e-10 * lmax.max(f64::MIN_POSITIVE),
                covariate_lower_sum: weighted.then_some(lo),
                covariate_upper_sum: weighted.then_some(up),
                lower_bound_lambda_min: weighted.then_some(lb),
            }
        })
        .collect();
    let lambda_min_monotone =
        rows.windows(2).all(|w| w[1].lambda_min >= w[0].lambda_min) && !rows.iter().any(|r| r.rank_deficient);
    let ratio_increasing = rows.windows(2).all(|w| w[1].ratio > w[0].ratio);
    Ok(HypothesisReport { delta: options.delta, c0, rows, lambda_min_monotone, ratio_increasing })
}

/// `max_i λ_max[diag²(X_i λ)] = max_ij (x_ijᵀλ)²`.
pub fn max_diag_square(ds: &LongitudinalDataset, lambda: &DVector<f64>) -> f64 {
    ds.individuals()
        .iter()
        .flat_map(|ind| (&ind.x * lambda).iter().map(|v| v * v).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

/// `ℰ = Hᵀ M⁻¹ H` and `𝓘 = ℰ⁻¹`.
pub fn information_matrix(h: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let minv = linalg::spd_inverse(m)?;
    let e = linalg::symmetrize(&(h.transpose() * minv * h));
    let i = linalg::spd_inverse(&e)?;
    Ok((e, i))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityMatrices {
    pub method: &'static str,
    pub n: usize,
    pub reps: usize,
    pub m_bar: DMatrix<f64>,
    pub m_star: EntrywiseEstimate,
    pub h_star: EntrywiseEstimate,
    pub h_indep: DMatrix<f64>,
    pub m_indep: DMatrix<f64>,
    /// `det H* / det M̄` with a jackknife standard error.
    pub det_ratio_h: (f64, f64),
    /// `det M* / det M̄` with a jackknife standard error.
    pub det_ratio_m: (f64, f64),
    /// `λ_min(M̄ − H^indep/m)`, non-negative up to rounding.
    pub mbar_minus_scaled_h_indep: f64,
    /// `λ_min(M̄ − H* M*⁻¹ H*)`, non-negative up to Monte Carlo error.
    pub information_gap: f64,
    pub reps_warning: bool,
    pub ridge_events: usize,
}

fn jackknife_ratio(samples_num: &[DMatrix<f64>], den_det: f64) -> (f64, f64) {
    let r = samples_num.len();
    let total = samples_num.iter().fold(DMatrix::zeros(samples_num[0].nrows(), samples_num[0].ncols()), |a, s| a + s);
    let full = (&total / r as f64).determinant() / den_det;
    if r < 2 {
        return (full, f64::NAN);
    }
    let loo: Vec<f64> = samples_num.iter().map(|s| ((&total - s) / (r - 1) as f64).determinant() / den_det).collect();
    let mean = loo.iter().sum::<f64>() / r as f64;
    let var = loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (r - 1) as f64 / r as f64;
    (full, var.sqrt())
}

/// Monte Carlo `M* = Cov g*(β₀)`, `H* = −E ∂g*/∂βᵀ(β₀)` and the exact `M̄`, on the
/// generator's fixed design.
pub fn optimality_matrices_mc(
    sim: &Simulator,
    method: &MethodSpec,
    reps: usize,
    settings: SolverSettings,
) -> Result<OptimalityMatrices> {
    if reps == 0 {
        return Err(GeeError::InvalidParameter("reps must be positive".into()));
    }
    let link = sim.link();
    let beta0 = sim.beta0();
    let rbar = sim.true_correlation();
    let design = sim.design();
    let m = sim.config().m;
    let scaled: Vec<DMatrix<f64>> = design
        .iter()
        .map(|x| {
            let mut sx = x.clone();
            for (j, mut row) in sx.row_iter_mut().enumerate() {
                row *= link.values((x.row(j) * beta0)[0]).expect("validated by the simulator").d1.sqrt();
            }
            sx
        })
        .collect();
    let per_rep = par_reps(reps, |rep| -> Result<(DMatrix<f64>, DMatrix<f64>, usize)> {
        let ds = sim.replicate(rep)?;
        let model = method.build_model(&ds, link, Some(rbar), settings)?;
        let path = model.path(&ds, beta0, link, &settings.ridge, false)?;
        let p = ds.p();
        let (mut h, mut mm) = (DMatrix::zeros(p, p), DMatrix::zeros(p, p));
        for (i, sx) in scaled.iter().enumerate() {
            let rinv = path.inverse(i);
            let left = rinv * sx;
            h += sx.tr_mul(&left);
            mm += left.tr_mul(&(rbar * &left));
        }
        Ok((linalg::symmetrize(&h), linalg::symmetrize(&mm), path.ridge_events))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let hs: Vec<DMatrix<f64>> = per_rep.iter().map(|t| t.0.clone()).collect();
    let ms: Vec<DMatrix<f64>> = per_rep.iter().map(|t| t.1.clone()).collect();
    let ridge_events = per_rep.iter().map(|t| t.2).sum();
    let rbar_inv = linalg::spd_inverse(rbar)?;
    let m_bar = sandwich_sum(design, beta0, link, &rbar_inv)?;
    let h_indep = sandwich_sum(design, beta0, link, &DMatrix::identity(m, m))?;
    let m_indep = sandwich_sum(design, beta0, link, rbar)?;
    let det_bar = m_bar.determinant();
    let h_star = EntrywiseEstimate::from_samples(&hs);
    let m_star = EntrywiseEstimate::from_samples(&ms);
    let info_gap = information_matrix(&h_star.mean, &m_star.mean)
        .map(|(e, _)| linalg::lambda_min(&(&m_bar - e)))
        .unwrap_or(f64::NAN);
    Ok(OptimalityMatrices {
        method: method.name(),
        n: design.len(),
        reps,
        det_ratio_h: jackknife_ratio(&hs, det_bar),
        det_ratio_m: jackknife_ratio(&ms, det_bar),
        mbar_minus_scaled_h_indep: linalg::lambda_min(&(&m_bar - &h_indep / m as f64)),
        information_gap: info_gap,
        reps_warning: reps < 100,
        m_bar,
        m_star,
        h_star,
        h_indep,
        m_indep,
        ridge_events,
    })
}
