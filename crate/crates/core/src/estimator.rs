//! Estimating function `g*(β) = Σ X_iᵀ A_i^{1/2} R*_i(β)⁻¹ A_i^{-1/2}(y_i − μ_i(β))`,
//! its exact Jacobian, Newton root finding and covariance estimates.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::correlation::{default_burn_in, CorrelationModel, CorrelationPath, CorrelationSpec, RidgePolicy};
use crate::error::{GeeError, Result};
use crate::linalg::{self, sup_norm, SymEigen};
use crate::model::{Link, LongitudinalDataset, SubjectEval};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Relative tolerance on `‖g*‖∞`.
    pub tol_g: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Use `H` instead of the full Jacobian as the iteration matrix.
    pub frozen: bool,
    /// Extra perturbed starting points; `0` disables multistart.
    pub multistart: usize,
    pub multistart_scale: f64,
    pub seed: u64,
    pub ridge: RidgePolicy,
    pub ci_level: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol_g: 1e-10,
            max_iter: 100,
            max_halvings: 30,
            frozen: false,
            multistart: 0,
            multistart_scale: 0.5,
            seed: 0,
            ridge: RidgePolicy::default(),
            ci_level: 0.95,
        }
    }
}

/// Everything an estimating equation needs; immutable during a solve.
#[derive(Debug, Clone, Copy)]
pub struct EstimatingContext<'a> {
    pub dataset: &'a LongitudinalDataset,
    pub link: Link,
    pub model: &'a CorrelationModel,
    pub settings: SolverSettings,
}

impl<'a> EstimatingContext<'a> {
    pub fn new(dataset: &'a LongitudinalDataset, link: Link, model: &'a CorrelationModel) -> Self {
        EstimatingContext { dataset, link, model, settings: SolverSettings::default() }
    }

    pub fn with_settings(mut self, settings: SolverSettings) -> Self {
        self.settings = settings;
        self
    }
}

/// Correlation path plus per-individual link evaluations at one β.
pub(crate) struct Evaluation {
    pub path: CorrelationPath,
    pub subjects: Vec<SubjectEval>,
}

pub(crate) fn evaluate(ctx: &EstimatingContext, beta: &DVector<f64>, derivatives: bool) -> Result<Evaluation> {
    let ds = ctx.dataset;
    let path = ctx.model.path(ds, beta, ctx.link, &ctx.settings.ridge, derivatives)?;
    let subjects =
        ds.individuals().iter().map(|ind| SubjectEval::new(ind, beta, ctx.link)).collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { path, subjects })
}

fn scaled_design(x: &DMatrix<f64>, sd: &DVector<f64>) -> DMatrix<f64> {
    let mut sx = x.clone();
    for (j, mut row) in sx.row_iter_mut().enumerate() {
        row *= sd[j];
    }
    sx
}

impl Evaluation {
    fn g(&self, ds: &LongitudinalDataset) -> DVector<f64> {
        let mut g = DVector::zeros(ds.p());
        for (i, (ind, ev)) in ds.individuals().iter().zip(&self.subjects).enumerate() {
            let u = self.path.inverse(i) * &ev.std_resid;
            g += scaled_design(&ind.x, &ev.sd).tr_mul(&u);
        }
        g
    }

    fn h(&self, ds: &LongitudinalDataset) -> DMatrix<f64> {
        let p = ds.p();
        let mut h = DMatrix::zeros(p, p);
        for (i, (ind, ev)) in ds.individuals().iter().zip(&self.subjects).enumerate() {
            let sx = scaled_design(&ind.x, &ev.sd);
            h += sx.tr_mul(&(self.path.inverse(i) * &sx));
        }
        linalg::symmetrize(&h)
    }
}

/// `g*(β)`.
pub fn estimating_function(ctx: &EstimatingContext, beta: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(evaluate(ctx, beta, false)?.g(ctx.dataset))
}

/// The three residual-weighted terms of `∂g*/∂βᵀ` for a given residual vector per individual,
/// plus `H`.
///
/// For residuals `r_i`, with `w_i = A_i^{-1/2} r_i`, `u_i = R⁻¹ w_i`:
/// `T1 = Xᵀ diag(u_i ∘ μ″/(2σ)) X`, `T2 = (SX)ᵀ R⁻¹ diag(r_i ∘ (−μ″/(2σ³))) X`,
/// `T3[:, l] = −(SX)ᵀ R⁻¹ ∂_l R R⁻¹ w_i`, so `∂g*/∂βᵀ = T1 + T2 + T3 − H`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianDecomposition {
    pub h: DMatrix<f64>,
    /// Terms driven by `μ_i(β₀) − μ_i(β)`.
    pub b: [DMatrix<f64>; 3],
    /// Terms driven by the errors `y_i − μ_i(β₀)`.
    pub e: [DMatrix<f64>; 3],
}

impl JacobianDecomposition {
    /// `D* = −∂g*/∂βᵀ = H − B − 𝓔`.
    pub fn d_star(&self) -> DMatrix<f64> {
        let mut d = self.h.clone();
        for t in self.b.iter().chain(&self.e) {
            d -= t;
        }
        d
    }

    pub fn b_total(&self) -> DMatrix<f64> {
        &self.b[0] + &self.b[1] + &self.b[2]
    }

    pub fn e_total(&self) -> DMatrix<f64> {
        &self.e[0] + &self.e[1] + &self.e[2]
    }
}

fn residual_terms(
    x: &DMatrix<f64>,
    sx: &DMatrix<f64>,
    ev: &SubjectEval,
    rinv: &DMatrix<f64>,
    drs: Option<Vec<&DMatrix<f64>>>,
    resid: &DVector<f64>,
    out: &mut [DMatrix<f64>; 3],
) {
    let (m, p) = x.shape();
    let w = resid.component_div(&ev.sd);
    let u = rinv * &w;
    let mut t1 = DMatrix::zeros(p, p);
    for j in 0..m {
        let g1 = ev.values[j].d2 / (2.0 * ev.sd[j]);
        let xj = x.row(j).transpose();
        t1.ger(u[j] * g1, &xj, &xj, 1.0);
    }
    out[0] += t1;

    let mut scaled = x.clone();
    for (j, mut row) in scaled.row_iter_mut().enumerate() {
        let s = ev.sd[j];
        row *= -resid[j] * ev.values[j].d2 / (2.0 * s * s * s);
    }
    out[1] += sx.tr_mul(&(rinv * scaled));

    if let Some(drs) = drs {
        let left = rinv * sx;
        for (l, dr) in drs.into_iter().enumerate() {
            let col = -left.tr_mul(&(dr * &u));
            let mut c = out[2].column_mut(l);
            c += col;
        }
    }
}

/// Jacobian at `β` with the residual split taken at a reference point `β₀`.
///
/// `B` collects terms in `μ_i(β₀) − μ_i(β)`, `𝓔` terms in `y_i − μ_i(β₀)`.
pub fn estimating_jacobian_split(
    ctx: &EstimatingContext,
    beta: &DVector<f64>,
    beta0: &DVector<f64>,
) -> Result<JacobianDecomposition> {
    let ds = ctx.dataset;
    ds.check_beta(beta0)?;
    let ev = evaluate(ctx, beta, ctx.model.depends_on_beta())?;
    let p = ds.p();
    let zero = || DMatrix::zeros(p, p);
    let mut b = [zero(), zero(), zero()];
    let mut e = [zero(), zero(), zero()];
    let same = beta == beta0;
    for (i, (ind, se)) in ds.individuals().iter().zip(&ev.subjects).enumerate() {
        let sx = scaled_design(&ind.x, &se.sd);
        let rinv = ev.path.inverse(i);
        let drs = || -> Option<Vec<&DMatrix<f64>>> { (0..p).map(|l| ev.path.derivative(i, l)).collect() };
        if same {
            residual_terms(&ind.x, &sx, se, rinv, drs(), &se.resid, &mut e);
        } else {
            let mu0 = SubjectEval::new(ind, beta0, ctx.link)?.mu;
            residual_terms(&ind.x, &sx, se, rinv, drs(), &(&mu0 - &se.mu), &mut b);
            residual_terms(&ind.x, &sx, se, rinv, drs(), &(&ind.y - &mu0), &mut e);
        }
    }
    Ok(JacobianDecomposition { h: ev.h(ds), b, e })
}

/// Jacobian at `β` with reference point `β` itself, so `B = 0` and `𝓔` carries the residuals.
pub fn estimating_jacobian(ctx: &EstimatingContext, beta: &DVector<f64>) -> Result<JacobianDecomposition> {
    estimating_jacobian_split(ctx, beta, beta)
}

/// `H_n^indep(β) = Σ X_iᵀ A_i(β) X_i`.
pub fn h_indep(ds: &LongitudinalDataset, beta: &DVector<f64>, link: Link) -> Result<DMatrix<f64>> {
    ds.check_beta(beta)?;
    let p = ds.p();
    let mut h = DMatrix::zeros(p, p);
    for ind in ds.individuals() {
        let sx = scaled_design(&ind.x, &SubjectEval::new(ind, beta, link)?.sd);
        h += sx.tr_mul(&sx);
    }
    Ok(linalg::symmetrize(&h))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub g_norm: f64,
    pub step_norm: f64,
    pub halvings: usize,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimates {
    /// `Ĥ = Σ X_iᵀ A_i^{1/2} R*⁻¹ A_i^{1/2} X_i`.
    pub h: DMatrix<f64>,
    /// `M̂ = Σ X_iᵀ A_i^{1/2} R*⁻¹ ê_i ê_iᵀ R*⁻¹ A_i^{1/2} X_i`.
    pub m: DMatrix<f64>,
    pub cov_model: DMatrix<f64>,
    pub cov_sandwich: DMatrix<f64>,
    pub se_model: DVector<f64>,
    pub se_sandwich: DVector<f64>,
    pub ci_level: f64,
    /// Intervals `β̂_k ± z·se_model_k`.
    pub ci_model: Vec<(f64, f64)>,
    pub ci_sandwich: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub method: &'static str,
    pub beta: DVector<f64>,
    pub beta_init: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub g_norm: f64,
    pub g_norm_init: f64,
    pub fallbacks: usize,
    pub ridge_events: usize,
    pub starts_converged: usize,
    pub trace: Vec<IterationRecord>,
    /// `None` only when the fit failed to converge and the covariance could not be formed.
    pub covariance: Option<CovarianceEstimates>,
}

fn z_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(GeeError::InvalidParameter(format!("confidence level {level} not in (0, 1)")));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// Model-based and sandwich covariance at `β̂`.
pub fn covariance_estimates(ctx: &EstimatingContext, beta: &DVector<f64>) -> Result<CovarianceEstimates> {
    let ds = ctx.dataset;
    let ev = evaluate(ctx, beta, false)?;
    let p = ds.p();
    let mut m = DMatrix::zeros(p, p);
    for (i, (ind, se)) in ds.individuals().iter().zip(&ev.subjects).enumerate() {
        let q = scaled_design(&ind.x, &se.sd).tr_mul(&(ev.path.inverse(i) * &se.std_resid));
        m.ger(1.0, &q, &q, 1.0);
    }
    let h = ev.h(ds);
    let hinv = linalg::spd_inverse(&h).map_err(|_| {
        GeeError::Singular(format!("H is singular at the estimate (lambda_min = {:.3e})", linalg::lambda_min(&h)))
    })?;
    let cov_sandwich = linalg::symmetrize(&(&hinv * &m * &hinv));
    let se_model = hinv.diagonal().map(|v| v.max(0.0).sqrt());
    let se_sandwich = cov_sandwich.diagonal().map(|v| v.max(0.0).sqrt());
    let z = z_quantile(ctx.settings.ci_level)?;
    let ci = |se: &DVector<f64>| (0..p).map(|k| (beta[k] - z * se[k], beta[k] + z * se[k])).collect();
    Ok(CovarianceEstimates {
        ci_model: ci(&se_model),
        ci_sandwich: ci(&se_sandwich),
        h,
        m,
        cov_model: hinv,
        cov_sandwich,
        se_model,
        se_sandwich,
        ci_level: ctx.settings.ci_level,
    })
}

/// Closed-form weighted least squares for the linear link and β-free correlations.
pub fn closed_form_linear(ctx: &EstimatingContext) -> Result<FitResult> {
    if ctx.link != Link::Linear {
        return Err(GeeError::Unsupported("closed form requires the linear link".into()));
    }
    if ctx.model.depends_on_beta() {
        return Err(GeeError::Unsupported("the AQS equation has no closed-form root".into()));
    }
    let ds = ctx.dataset;
    let p = ds.p();
    let path = ctx.model.path(ds, &DVector::zeros(p), ctx.link, &ctx.settings.ridge, false)?;
    let mut lhs = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for (i, ind) in ds.individuals().iter().enumerate() {
        let wx = path.inverse(i) * &ind.x;
        lhs += ind.x.tr_mul(&wx);
        rhs += wx.tr_mul(&ind.y);
    }
    let lhs = linalg::symmetrize(&lhs);
    check_rank(&h_indep(ds, &DVector::zeros(p), ctx.link)?)?;
    let beta = linalg::spd_inverse(&lhs)? * rhs;
    let g_norm = sup_norm(&estimating_function(ctx, &beta)?);
    Ok(FitResult {
        method: ctx.model.tag(),
        beta_init: beta.clone(),
        covariance: Some(covariance_estimates(ctx, &beta)?),
        beta,
        converged: true,
        iterations: 0,
        g_norm,
        g_norm_init: g_norm,
        fallbacks: 0,
        ridge_events: path.ridge_events,
        starts_converged: 1,
        trace: Vec::new(),
    })
}

fn check_rank(h: &DMatrix<f64>) -> Result<()> {
    let eig = SymEigen::new(h);
    if !(eig.min() > 1e-12 * eig.max().abs().max(1e-300)) {
        return Err(GeeError::RankDeficient { lambda_min: eig.min() });
    }
    Ok(())
}

struct RunOutcome {
    beta: DVector<f64>,
    converged: bool,
    iterations: usize,
    g_norm: f64,
    g_norm_init: f64,
    fallbacks: usize,
    trace: Vec<IterationRecord>,
}

fn try_g(ctx: &EstimatingContext, beta: &DVector<f64>) -> Option<DVector<f64>> {
    estimating_function(ctx, beta).ok().filter(|g| g.iter().all(|v| v.is_finite()))
}

/// Backtracking along `δ`; returns the accepted point, its `g` and the number of halvings.
fn line_search(
    ctx: &EstimatingContext,
    beta: &DVector<f64>,
    delta: &DVector<f64>,
    g_norm: f64,
) -> Option<(DVector<f64>, DVector<f64>, usize)> {
    let mut t = 1.0;
    for halvings in 0..=ctx.settings.max_halvings {
        let cand = beta + delta * t;
        if let Some(g) = try_g(ctx, &cand) {
            if sup_norm(&g) < g_norm {
                return Some((cand, g, halvings));
            }
        }
        t *= 0.5;
    }
    None
}

fn newton_from(ctx: &EstimatingContext, start: &DVector<f64>) -> Result<RunOutcome> {
    let s = ctx.settings;
    let mut beta = start.clone();
    let mut g = estimating_function(ctx, &beta)?;
    let g_norm_init = sup_norm(&g);
    let target = s.tol_g * (1.0 + g_norm_init);
    let mut trace =
        vec![IterationRecord { iteration: 0, g_norm: g_norm_init, step_norm: 0.0, halvings: 0, fallback: false }];
    let mut fallbacks = 0;
    let mut iterations = 0;
    let mut converged = g_norm_init <= target;
    while !converged && iterations < s.max_iter {
        iterations += 1;
        let g_norm = sup_norm(&g);
        let jac = estimating_jacobian(ctx, &beta)?;
        let primary = if s.frozen { jac.h.clone() } else { jac.d_star() };
        let mut fallback = false;
        let mut step = linalg::solve(&primary, &g).ok().and_then(|d| line_search(ctx, &beta, &d, g_norm));
        if step.is_none() && !s.frozen {
            fallback = true;
            fallbacks += 1;
            step = linalg::solve(&jac.h, &g).ok().and_then(|d| line_search(ctx, &beta, &d, g_norm));
        }
        let Some((next, g_next, halvings)) = step else {
            break;
        };
        let step_norm = sup_norm(&(&next - &beta));
        beta = next;
        g = g_next;
        let g_norm = sup_norm(&g);
        trace.push(IterationRecord { iteration: iterations, g_norm, step_norm, halvings, fallback });
        converged = g_norm <= target;
    }
    Ok(RunOutcome { g_norm: sup_norm(&g), beta, converged, iterations, g_norm_init, fallbacks, trace })
}

/// Working-independence fit, used as the default starting point and as the PLE pilot.
pub fn independence_fit(ds: &LongitudinalDataset, link: Link, settings: SolverSettings) -> Result<FitResult> {
    let model = CorrelationModel::Identity;
    let ctx =
        EstimatingContext { dataset: ds, link, model: &model, settings: SolverSettings { multistart: 0, ..settings } };
    if link == Link::Linear {
        closed_form_linear(&ctx)
    } else {
        newton_solve(&ctx, Some(&DVector::zeros(ds.p())))
    }
}

/// Damped Newton on `g*(β) = 0` starting from `β_init` (default: the independence fit).
///
/// With multistart, the converged root closest to the independence estimate is returned.
pub fn newton_solve(ctx: &EstimatingContext, beta_init: Option<&DVector<f64>>) -> Result<FitResult> {
    let ds = ctx.dataset;
    let indep = match (beta_init, ctx.settings.multistart) {
        (Some(_), 0) => None,
        _ => Some(independence_fit(ds, ctx.link, ctx.settings)?),
    };
    let start = match (beta_init, &indep) {
        (Some(b), _) => b.clone(),
        (None, Some(fit)) => fit.beta.clone(),
        (None, None) => unreachable!("independence fit computed when no start is given"),
    };
    ds.check_beta(&start)?;
    check_rank(&h_indep(ds, &start, ctx.link)?)?;

    let mut best = newton_from(ctx, &start)?;
    let mut starts_converged = usize::from(best.converged);
    if let Some(anchor) = indep.as_ref().map(|f| f.beta.clone()).filter(|_| ctx.settings.multistart > 0) {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.settings.seed);
        let dist = |b: &DVector<f64>| (b - &anchor).norm();
        for _ in 0..ctx.settings.multistart {
            let perturbed = DVector::from_fn(anchor.len(), |k, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                anchor[k] + ctx.settings.multistart_scale * (1.0 + anchor[k].abs()) * z
            });
            let Ok(run) = newton_from(ctx, &perturbed) else { continue };
            if run.converged {
                starts_converged += 1;
                if !best.converged || dist(&run.beta) < dist(&best.beta) {
                    best = run;
                }
            }
        }
    }

    let ridge_events =
        ctx.model.path(ds, &best.beta, ctx.link, &ctx.settings.ridge, false).map_or(0, |p| p.ridge_events);
    let covariance = if best.converged {
        Some(covariance_estimates(ctx, &best.beta)?)
    } else {
        covariance_estimates(ctx, &best.beta).ok()
    };
    Ok(FitResult {
        method: ctx.model.tag(),
        beta: best.beta,
        beta_init: start,
        converged: best.converged,
        iterations: best.iterations,
        g_norm: best.g_norm,
        g_norm_init: best.g_norm_init,
        fallbacks: best.fallbacks,
        ridge_events,
        starts_converged,
        trace: best.trace,
        covariance,
    })
}

/// Builds the PLE correlation from a working-independence pilot, refusing a pilot that
/// did not converge.
pub fn build_ple(
    ds: &LongitudinalDataset,
    link: Link,
    settings: SolverSettings,
    burn_in: usize,
) -> Result<CorrelationModel> {
    let pilot = independence_fit(ds, link, settings)?;
    if !pilot.converged {
        return Err(GeeError::Experiment("independence pilot for PLE did not converge".into()));
    }
    CorrelationModel::ple(ds, pilot.beta, link, burn_in)
}

/// Fits with the closed form where one exists, otherwise by Newton from the independence fit.
pub fn fit(ctx: &EstimatingContext) -> Result<FitResult> {
    if ctx.link == Link::Linear && !ctx.model.depends_on_beta() && ctx.settings.multistart == 0 {
        closed_form_linear(ctx)
    } else {
        newton_solve(ctx, None)
    }
}

/// Which estimating equation to solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase", deny_unknown_fields)]
pub enum MethodSpec {
    Indep,
    Gee {
        correlation: CorrelationSpec,
    },
    Ple {
        #[serde(default)]
        burn_in: Option<usize>,
    },
    Aqs {
        #[serde(default)]
        burn_in: Option<usize>,
    },
    /// GEE with the true correlation; simulation only.
    Oracle,
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::Indep => "indep",
            MethodSpec::Gee { .. } => "gee",
            MethodSpec::Ple { .. } => "ple",
            MethodSpec::Aqs { .. } => "aqs",
            MethodSpec::Oracle => "oracle",
        }
    }

    /// Builds the correlation model for `ds`; PLE runs its pilot fit here.
    pub fn build_model(
        &self,
        ds: &LongitudinalDataset,
        link: Link,
        truth: Option<&DMatrix<f64>>,
        settings: SolverSettings,
    ) -> Result<CorrelationModel> {
        let m = ds.m();
        match self {
            MethodSpec::Indep => Ok(CorrelationModel::Identity),
            MethodSpec::Gee { correlation } => CorrelationModel::fixed(correlation.matrix(m)?),
            MethodSpec::Ple { burn_in } => build_ple(ds, link, settings, burn_in.unwrap_or(default_burn_in(m))),
            MethodSpec::Aqs { burn_in } => Ok(CorrelationModel::Aqs { burn_in: burn_in.unwrap_or(default_burn_in(m)) }),
            MethodSpec::Oracle => {
                let r = truth
                    .ok_or_else(|| GeeError::InvalidParameter("oracle method needs the true correlation".into()))?;
                CorrelationModel::fixed(r.clone())
            }
        }
    }
}

/// Builds the model for `spec` and fits it.
pub fn fit_method(
    ds: &LongitudinalDataset,
    link: Link,
    spec: &MethodSpec,
    truth: Option<&DMatrix<f64>>,
    settings: SolverSettings,
) -> Result<FitResult> {
    let model = spec.build_model(ds, link, truth, settings)?;
    let mut result = fit(&EstimatingContext { dataset: ds, link, model: &model, settings })?;
    if matches!(spec, MethodSpec::Oracle) {
        result.method = "oracle";
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::{structured_correlation, Structure};
    use crate::linalg::max_abs;
    use crate::model::Individual;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_ds(n: usize, m: usize, p: usize, link: Link, seed: u64) -> LongitudinalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inds = (0..n)
            .map(|i| {
                let x = DMatrix::from_fn(m, p, |_, _| rng.random_range(-1.0..1.0));
                let y = DVector::from_fn(m, |_, _| match link {
                    Link::Linear => rng.random_range(-2.0..2.0),
                    Link::Log => rng.random_range(0.2..3.0),
                    _ => rng.random_range(0.05..0.95),
                });
                Individual::new(i as i64, x, y)
            })
            .collect();
        LongitudinalDataset::new(inds).unwrap()
    }

    fn models(ds: &LongitudinalDataset, link: Link) -> Vec<CorrelationModel> {
        let m = ds.m();
        vec![
            CorrelationModel::Identity,
            CorrelationModel::fixed(structured_correlation(Structure::Exchangeable, 0.4, m).unwrap()).unwrap(),
            CorrelationModel::ple(ds, DVector::from_element(ds.p(), 0.1), link, 0).unwrap(),
            CorrelationModel::Aqs { burn_in: m + 1 },
        ]
    }

    fn fd_jacobian(ctx: &EstimatingContext, beta: &DVector<f64>) -> DMatrix<f64> {
        let p = beta.len();
        let mut out = DMatrix::zeros(p, p);
        for l in 0..p {
            let h = 1e-6 * (1.0 + beta[l].abs());
            let mut bp = beta.clone();
            bp[l] += h;
            let mut bm = beta.clone();
            bm[l] -= h;
            let col = -(estimating_function(ctx, &bp).unwrap() - estimating_function(ctx, &bm).unwrap()) / (2.0 * h);
            out.set_column(l, &col);
        }
        out
    }

    #[test]
    fn identity_linear_at_ols_is_zero() {
        let ds = random_ds(10, 3, 2, Link::Linear, 1);
        let model = CorrelationModel::Identity;
        let ctx = EstimatingContext::new(&ds, Link::Linear, &model);
        let fit = closed_form_linear(&ctx).unwrap();
        assert!(sup_norm(&estimating_function(&ctx, &fit.beta).unwrap()) < 1e-12);
    }

    #[test]
    fn identity_matches_direct_formula() {
        for link in Link::ALL {
            let ds = random_ds(6, 3, 2, link, 2);
            let model = CorrelationModel::Identity;
            let ctx = EstimatingContext::new(&ds, link, &model);
            let beta = DVector::from_vec(vec![0.2, -0.3]);
            let direct = ds.individuals().iter().fold(DVector::zeros(2), |acc, ind| {
                let mu = crate::model::SubjectEval::new(ind, &beta, link).unwrap().mu;
                acc + ind.x.tr_mul(&(&ind.y - mu))
            });
            let g = estimating_function(&ctx, &beta).unwrap();
            assert!((g - direct).amax() < 1e-14);
        }
    }

    #[test]
    fn zero_residuals_give_zero_g_and_d_equals_h() {
        let link = Link::Logistic;
        let base = random_ds(6, 3, 2, link, 3);
        let beta = DVector::from_vec(vec![0.4, -0.2]);
        let inds = base
            .individuals()
            .iter()
            .map(|ind| {
                let mu = crate::model::SubjectEval::new(ind, &beta, link).unwrap().mu;
                Individual::new(ind.id, ind.x.clone(), mu)
            })
            .collect();
        let ds = LongitudinalDataset::new(inds).unwrap();
        for model in models(&ds, link) {
            let ctx = EstimatingContext::new(&ds, link, &model);
            assert!(sup_norm(&estimating_function(&ctx, &beta).unwrap()) < 1e-15);
            let jac = estimating_jacobian(&ctx, &beta).unwrap();
            assert!(max_abs(&(jac.d_star() - &jac.h)) < 1e-15, "{}", model.tag());
        }
    }

    #[test]
    fn linear_identity_jacobian_is_gram() {
        let ds = random_ds(5, 3, 2, Link::Linear, 4);
        let model = CorrelationModel::Identity;
        let ctx = EstimatingContext::new(&ds, Link::Linear, &model);
        let jac = estimating_jacobian(&ctx, &DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let gram = ds.individuals().iter().fold(DMatrix::zeros(2, 2), |acc, ind| acc + ind.x.tr_mul(&ind.x));
        assert!(max_abs(&(jac.d_star() - gram)) < 1e-13);
    }

    #[test]
    fn split_recombines_to_total() {
        let link = Link::Probit;
        let ds = random_ds(8, 3, 2, link, 5);
        let beta = DVector::from_vec(vec![0.1, 0.2]);
        let beta0 = DVector::from_vec(vec![-0.2, 0.3]);
        for model in models(&ds, link) {
            let ctx = EstimatingContext::new(&ds, link, &model);
            let split = estimating_jacobian_split(&ctx, &beta, &beta0).unwrap();
            let total = estimating_jacobian(&ctx, &beta).unwrap();
            let diff = max_abs(&(split.d_star() - total.d_star()));
            assert!(diff < 1e-12 * (1.0 + max_abs(&total.d_star())), "{} {diff}", model.tag());
            if !model.depends_on_beta() {
                assert_eq!(split.b[2], DMatrix::zeros(2, 2));
                assert_eq!(split.e[2], DMatrix::zeros(2, 2));
            }
        }
    }

    #[test]
    fn newton_matches_closed_forms() {
        let ds = random_ds(30, 3, 2, Link::Linear, 6);
        for model in models(&ds, Link::Linear).into_iter().take(3) {
            let ctx = EstimatingContext::new(&ds, Link::Linear, &model);
            let closed = closed_form_linear(&ctx).unwrap();
            let newton = newton_solve(&ctx, Some(&DVector::zeros(2))).unwrap();
            assert!(newton.converged);
            assert!((closed.beta - newton.beta).amax() < 1e-10, "{}", model.tag());
        }
        let aqs = CorrelationModel::aqs(3);
        assert!(matches!(
            closed_form_linear(&EstimatingContext::new(&ds, Link::Linear, &aqs)),
            Err(GeeError::Unsupported(_))
        ));
    }

    #[test]
    fn single_individual_h_is_gram() {
        let ds = random_ds(1, 3, 2, Link::Linear, 7);
        let model = CorrelationModel::Identity;
        let ctx = EstimatingContext::new(&ds, Link::Linear, &model);
        let cov = covariance_estimates(&ctx, &DVector::zeros(2)).unwrap();
        let x = &ds.individuals()[0].x;
        assert!(max_abs(&(cov.h - x.tr_mul(x))) < 1e-14);
    }

    #[test]
    fn rank_deficient_design_is_reported() {
        let mut ds = random_ds(10, 3, 2, Link::Linear, 8);
        let inds = ds
            .individuals()
            .iter()
            .map(|ind| {
                let mut x = ind.x.clone();
                let c0 = x.column(0).into_owned();
                x.set_column(1, &c0);
                Individual::new(ind.id, x, ind.y.clone())
            })
            .collect();
        ds = LongitudinalDataset::new(inds).unwrap();
        let model = CorrelationModel::Identity;
        let ctx = EstimatingContext::new(&ds, Link::Logistic, &model);
        assert!(matches!(newton_solve(&ctx, Some(&DVector::zeros(2))), Err(GeeError::RankDeficient { .. })));
    }

    #[test]
    fn aqs_logistic_converges_to_root() {
        let link = Link::Logistic;
        let ds = random_ds(60, 3, 2, link, 9);
        let model = CorrelationModel::Aqs { burn_in: 8 };
        let settings = SolverSettings { multistart: 3, seed: 4, ..SolverSettings::default() };
        let ctx = EstimatingContext::new(&ds, link, &model).with_settings(settings);
        let fit = newton_solve(&ctx, None).unwrap();
        assert!(fit.converged);
        assert!(fit.g_norm <= 1e-8 * (1.0 + fit.g_norm_init));
        let frozen = SolverSettings { frozen: true, ..SolverSettings::default() };
        let fit2 = newton_solve(&ctx.with_settings(frozen), None).unwrap();
        assert!(fit2.converged);
        assert!((fit.beta - fit2.beta).amax() < 1e-6);
    }

    #[test]
    fn ci_brackets_estimate() {
        let ds = random_ds(40, 3, 2, Link::Linear, 10);
        let model = CorrelationModel::Identity;
        let fit = fit(&EstimatingContext::new(&ds, Link::Linear, &model)).unwrap();
        let cov = fit.covariance.unwrap();
        for k in 0..2 {
            let (lo, hi) = cov.ci_model[k];
            assert!((hi - lo - 2.0 * 1.959_963_984_540_054 * cov.se_model[k]).abs() < 1e-9);
            assert!(lo < fit.beta[k] && fit.beta[k] < hi);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn jacobian_matches_finite_differences(seed in 0u64..10_000, which in 0usize..4, n in 2usize..9, m in 1usize..5, p in 1usize..4) {
            let link = Link::ALL[which];
            let ds = random_ds(n, m, p, link, seed);
            let beta = DVector::from_fn(p, |k, _| 0.1 * (k as f64 + 1.0) * if seed % 2 == 0 { 1.0 } else { -1.0 });
            for model in models(&ds, link) {
                let ctx = EstimatingContext::new(&ds, link, &model);
                let d = estimating_jacobian(&ctx, &beta).unwrap().d_star();
                let fd = fd_jacobian(&ctx, &beta);
                let err = max_abs(&(&d - &fd)) / (1.0 + max_abs(&d));
                prop_assert!(err <= 1e-6, "{} {:?}: {}", model.tag(), link, err);
            }
        }

        #[test]
        fn h_dominates_scaled_h_indep(seed in 0u64..10_000, which in 0usize..4) {
            let link = Link::ALL[which];
            let ds = random_ds(12, 3, 2, link, seed);
            let beta = DVector::from_vec(vec![0.2, -0.1]);
            let hind = h_indep(&ds, &beta, link).unwrap();
            for model in models(&ds, link) {
                let ctx = EstimatingContext::new(&ds, link, &model);
                let ev = evaluate(&ctx, &beta, false).unwrap();
                let c = (0..ds.n()).map(|i| linalg::lambda_min(ev.path.inverse(i))).fold(f64::INFINITY, f64::min);
                let h = ev.h(&ds);
                prop_assert!(linalg::lambda_min(&h) >= c * linalg::lambda_min(&hind) - 1e-10);
            }
        }

        #[test]
        fn quadratic_form_inequality(entries in proptest::collection::vec(-2.0f64..2.0, 9), dir in proptest::collection::vec(-1.0f64..1.0, 3)) {
            let c = DMatrix::from_row_slice(3, 3, &entries);
            let lam = DVector::from_vec(dir);
            prop_assume!(lam.norm() > 1e-3);
            let lam = &lam / lam.norm();
            let lhs = (&c * &lam).norm_squared();
            let rhs = lam.dot(&(&c * &lam)).powi(2);
            prop_assert!(lhs >= rhs - 1e-12 * (1.0 + lhs));
        }

        #[test]
        fn column_rescaling_equivariance(seed in 0u64..10_000, s1 in 0.2f64..5.0, s2 in -5.0f64..-0.2) {
            let ds = random_ds(15, 3, 2, Link::Linear, seed);
            let scale = DVector::from_vec(vec![s1, s2]);
            let scaled = LongitudinalDataset::new(ds.individuals().iter().map(|ind| {
                let mut x = ind.x.clone();
                for (k, mut col) in x.column_iter_mut().enumerate() { col *= scale[k]; }
                Individual::new(ind.id, x, ind.y.clone())
            }).collect()).unwrap();
            let model = CorrelationModel::fixed(structured_correlation(Structure::Ar1, 0.3, 3).unwrap()).unwrap();
            let a = closed_form_linear(&EstimatingContext::new(&ds, Link::Linear, &model)).unwrap().beta;
            let b = closed_form_linear(&EstimatingContext::new(&scaled, Link::Linear, &model)).unwrap().beta;
            prop_assert!((a.component_div(&scale) - b).amax() < 1e-9 * (1.0 + a.amax()));
        }
    }
}
