//! Data generation with known `β₀` and common true correlation `R̄`, and the Monte Carlo
//! experiments built on it.
//!
//! Randomness comes from ChaCha8 streams of one seed: stream 0 draws the (fixed) design,
//! stream `r + 1` draws the responses of replication `r`. Replications run in parallel and
//! are collected in order, so results do not depend on the number of worker threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{CorrelationModel, CorrelationSpec};
use crate::error::{GeeError, Result};
use crate::estimator::{
    estimating_function, estimating_jacobian, fit_method, EstimatingContext, MethodSpec, SolverSettings,
};
use crate::linalg::{self, lambda_max};
use crate::model::{Individual, Link, LongitudinalDataset, SubjectEval};

/// Largest fraction of failed fits an experiment tolerates before it errors.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CovariateSpec {
    /// i.i.d. uniform on `[low, high]^p`.
    Uniform { low: f64, high: f64 },
    /// Explicit rows, individual-major: rows `i·m .. (i+1)·m` belong to individual `i`.
    Design { rows: Vec<Vec<f64>> },
}

impl Default for CovariateSpec {
    fn default() -> Self {
        CovariateSpec::Uniform { low: -1.0, high: 1.0 }
    }
}

/// Multiplies individual `i`'s error by `V_i^{1/2}` with `V_i = 1 + a·ξ_i·s_{i−1}`, where
/// `ξ_i = ±1` is a fair coin and `s` is an AR(1) latent clamped to `[−1, 1]`.
///
/// `E[V_i | past] = 1`, so conditional means and covariances are unchanged while errors
/// of different individuals become dependent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingSpec {
    pub amplitude: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub link: Link,
    pub beta0: Vec<f64>,
    #[serde(default)]
    pub covariates: CovariateSpec,
    #[serde(default)]
    pub correlation: CorrelationSpec,
    #[serde(default)]
    pub mixing: Option<MixingSpec>,
    #[serde(default)]
    pub seed: u64,
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A validated generator with its fixed design.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: GeneratorConfig,
    design: Vec<DMatrix<f64>>,
    beta0: DVector<f64>,
    rbar: DMatrix<f64>,
    rbar_sqrt: DMatrix<f64>,
}

impl Simulator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        let GeneratorConfig { n, m, p, .. } = config;
        if n == 0 || m == 0 || p == 0 {
            return Err(GeeError::InvalidParameter("n, m and p must be positive".into()));
        }
        if config.beta0.len() != p {
            return Err(GeeError::Dimension(format!("beta0 has length {}, p = {p}", config.beta0.len())));
        }
        let rbar = config.correlation.matrix(m)?;
        let rbar_sqrt = linalg::psd_sqrt(&rbar)?;
        if let Some(mix) = config.mixing {
            if !(mix.amplitude.abs() <= 1.0 && mix.phi.abs() < 1.0) {
                return Err(GeeError::InvalidParameter("mixing needs |amplitude| <= 1 and |phi| < 1".into()));
            }
        }
        let design = match &config.covariates {
            CovariateSpec::Uniform { low, high } => {
                if !(low < high) || !low.is_finite() || !high.is_finite() {
                    return Err(GeeError::InvalidParameter(format!(
                        "uniform covariate range [{low}, {high}] is empty"
                    )));
                }
                let mut rng = stream(config.seed, 0);
                (0..n).map(|_| DMatrix::from_fn(m, p, |_, _| rng.random_range(*low..*high))).collect()
            }
            CovariateSpec::Design { rows } => {
                if rows.len() < n * m || rows.iter().any(|r| r.len() != p || r.iter().any(|v| !v.is_finite())) {
                    return Err(GeeError::Dimension(format!(
                        "design needs at least {} finite rows of length {p}, got {}",
                        n * m,
                        rows.len()
                    )));
                }
                (0..n).map(|i| DMatrix::from_fn(m, p, |j, k| rows[i * m + j][k])).collect()
            }
        };
        let beta0 = DVector::from_vec(config.beta0.clone());
        for x in &design {
            let eta: DVector<f64> = x * &beta0;
            for u in eta.iter() {
                config.link.values(*u)?;
            }
        }
        Ok(Simulator { config, design, beta0, rbar, rbar_sqrt })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn design(&self) -> &[DMatrix<f64>] {
        &self.design
    }

    pub fn beta0(&self) -> &DVector<f64> {
        &self.beta0
    }

    pub fn link(&self) -> Link {
        self.config.link
    }

    pub fn true_correlation(&self) -> &DMatrix<f64> {
        &self.rbar
    }

    /// Replication `rep` with all `n` individuals.
    pub fn replicate(&self, rep: u64) -> Result<LongitudinalDataset> {
        self.replicate_prefix(rep, self.config.n)
    }

    /// The first `n` individuals of replication `rep`.
    pub fn replicate_prefix(&self, rep: u64, n: usize) -> Result<LongitudinalDataset> {
        if n == 0 || n > self.config.n {
            return Err(GeeError::IndexOutOfRange { index: n, n: self.config.n });
        }
        let mut rng = stream(self.config.seed, rep + 1);
        let m = self.config.m;
        let mut latent = 0.0f64;
        let mut inds = Vec::with_capacity(n);
        for (i, x) in self.design[..n].iter().enumerate() {
            let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut e = &self.rbar_sqrt * z;
            if let Some(mix) = self.config.mixing {
                let coin = if rng.random::<bool>() { 1.0 } else { -1.0 };
                e *= (1.0 + mix.amplitude * coin * latent).sqrt();
                let nu: f64 = rng.sample(StandardNormal);
                latent = (mix.phi * latent + (1.0 - mix.phi * mix.phi).sqrt() * nu).clamp(-1.0, 1.0);
            }
            let probe = Individual::new(i as i64 + 1, x.clone(), DVector::zeros(m));
            let ev = SubjectEval::new(&probe, &self.beta0, self.config.link)?;
            let y = &ev.mu + ev.sd.component_mul(&e);
            inds.push(Individual::new(i as i64 + 1, x.clone(), y));
        }
        LongitudinalDataset::new(inds)
    }
}

pub fn generate_dataset(config: &GeneratorConfig) -> Result<LongitudinalDataset> {
    Simulator::new(config.clone())?.replicate(0)
}

pub(crate) fn par_reps<T: Send>(reps: usize, f: impl Fn(u64) -> T + Sync + Send) -> Vec<T> {
    (0..reps as u64).into_par_iter().map(f).collect()
}

/// Mean and standard error of a scalar sample; the SE is `NaN` for fewer than two values.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Entrywise Monte Carlo mean and standard error of a matrix-valued sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EntrywiseEstimate {
    pub mean: DMatrix<f64>,
    pub se: DMatrix<f64>,
}

impl EntrywiseEstimate {
    pub fn from_samples(samples: &[DMatrix<f64>]) -> Self {
        let (r, c) = samples[0].shape();
        let mut mean = DMatrix::zeros(r, c);
        let mut se = DMatrix::zeros(r, c);
        let mut buf = vec![0.0; samples.len()];
        for a in 0..r {
            for b in 0..c {
                for (slot, s) in buf.iter_mut().zip(samples) {
                    *slot = s[(a, b)];
                }
                let (mu, sd) = mean_se(&buf);
                mean[(a, b)] = mu;
                se[(a, b)] = sd;
            }
        }
        EntrywiseEstimate { mean, se }
    }

    /// `max |mean − target| / SE`, with the SE floored at `1e-9·(1 + |target|)` so that
    /// exactly reproduced constants count as agreement.
    pub fn max_z(&self, target: &DMatrix<f64>) -> f64 {
        let mut z: f64 = 0.0;
        for ((m, s), t) in self.mean.iter().zip(self.se.iter()).zip(target.iter()) {
            let floor = 1e-9 * (1.0 + t.abs());
            z = z.max((m - t).abs() / s.max(floor));
        }
        z
    }

    pub fn se_defined(&self) -> bool {
        self.se.iter().all(|s| s.is_finite())
    }
}

/// Mean of `ε_iᵀ A_i⁻¹ ε_i` over individuals at `β₀`, expected to be `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceCheck {
    pub mean: f64,
    pub se: f64,
    pub target: f64,
    pub z: f64,
}

pub fn residual_trace_check(sim: &Simulator, rep: u64) -> Result<TraceCheck> {
    let ds = sim.replicate(rep)?;
    let values = ds
        .individuals()
        .iter()
        .map(|ind| Ok(SubjectEval::new(ind, sim.beta0(), sim.link())?.std_resid.norm_squared()))
        .collect::<Result<Vec<_>>>()?;
    let (mean, se) = mean_se(&values);
    let target = sim.config.m as f64;
    Ok(TraceCheck { mean, se, target, z: (mean - target).abs() / se })
}

/// Estimating function whose quasi-score identity is checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum QFamily {
    Indep,
    Gee {
        correlation: CorrelationSpec,
    },
    /// `ḡ`, built with the true correlation.
    Optimal,
}

impl QFamily {
    pub fn name(&self) -> &'static str {
        match self {
            QFamily::Indep => "indep",
            QFamily::Gee { .. } => "gee",
            QFamily::Optimal => "optimal",
        }
    }
}

/// Extra comparisons available when `q = ḡ`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalCheck {
    /// `z` of `E[ḡḡᵀ]` against the exact `M̄`.
    pub max_z_cov: f64,
    /// `z` of `E[−∂ḡ/∂βᵀ]` against the exact `M̄`.
    pub max_z_jacobian: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuasiScoreCheck {
    pub family: &'static str,
    pub reps: usize,
    /// `E[q ḡᵀ]`.
    pub lhs: EntrywiseEstimate,
    /// `−E[∂q/∂βᵀ]`.
    pub rhs: EntrywiseEstimate,
    /// Paired difference `q ḡᵀ + ∂q/∂βᵀ`.
    pub diff: EntrywiseEstimate,
    pub max_z: f64,
    pub se_defined: bool,
    pub pass: bool,
    /// `M̄ = Σ X_iᵀ A_i^{1/2} R̄⁻¹ A_i^{1/2} X_i` at `β₀`.
    pub m_bar: DMatrix<f64>,
    pub optimal: Option<OptimalCheck>,
}

/// `Σ X_iᵀ A_i^{1/2} W A_i^{1/2} X_i` over the design at `β`.
pub fn sandwich_sum(
    design: &[DMatrix<f64>],
    beta: &DVector<f64>,
    link: Link,
    w: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p = beta.len();
    let mut out = DMatrix::zeros(p, p);
    for x in design {
        let probe = Individual::new(0, x.clone(), DVector::zeros(x.nrows()));
        let sd = SubjectEval::new(&probe, beta, link)?.sd;
        let mut sx = x.clone();
        for (j, mut row) in sx.row_iter_mut().enumerate() {
            row *= sd[j];
        }
        out += sx.tr_mul(&(w * &sx));
    }
    Ok(linalg::symmetrize(&out))
}

/// Monte Carlo check of `E[q ḡᵀ] = −E[∂q/∂βᵀ]` at `β₀`; for `q = ḡ` also against `M̄`.
pub fn quasi_score_identity_check(sim: &Simulator, family: &QFamily, reps: usize) -> Result<QuasiScoreCheck> {
    if reps == 0 {
        return Err(GeeError::InvalidParameter("reps must be positive".into()));
    }
    let m = sim.config.m;
    let link = sim.link();
    let optimal_model = CorrelationModel::fixed(sim.true_correlation().clone())?;
    let q_model = match family {
        QFamily::Indep => CorrelationModel::Identity,
        QFamily::Gee { correlation } => CorrelationModel::fixed(correlation.matrix(m)?)?,
        QFamily::Optimal => optimal_model.clone(),
    };
    let beta0 = sim.beta0();
    let per_rep = par_reps(reps, |rep| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let ds = sim.replicate(rep)?;
        let q = estimating_function(&EstimatingContext::new(&ds, link, &q_model), beta0)?;
        let gbar = estimating_function(&EstimatingContext::new(&ds, link, &optimal_model), beta0)?;
        let d = estimating_jacobian(&EstimatingContext::new(&ds, link, &q_model), beta0)?.d_star();
        Ok((&q * gbar.transpose(), d))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let lhs_s: Vec<_> = per_rep.iter().map(|(a, _)| a.clone()).collect();
    let rhs_s: Vec<_> = per_rep.iter().map(|(_, b)| b.clone()).collect();
    let diff_s: Vec<_> = per_rep.iter().map(|(a, b)| a - b).collect();
    let lhs = EntrywiseEstimate::from_samples(&lhs_s);
    let rhs = EntrywiseEstimate::from_samples(&rhs_s);
    let diff = EntrywiseEstimate::from_samples(&diff_s);
    let p = sim.config.p;
    let max_z = diff.max_z(&DMatrix::zeros(p, p));
    let se_defined = diff.se_defined();
    let rbar_inv = linalg::spd_inverse(sim.true_correlation())?;
    let m_bar = sandwich_sum(&sim.design, beta0, link, &rbar_inv)?;
    let optimal = matches!(family, QFamily::Optimal).then(|| {
        let max_z_cov = lhs.max_z(&m_bar);
        let max_z_jacobian = rhs.max_z(&m_bar);
        OptimalCheck { max_z_cov, max_z_jacobian, pass: se_defined && max_z_cov <= 4.0 && max_z_jacobian <= 4.0 }
    });
    let pass = se_defined && max_z <= 4.0 && optimal.as_ref().is_none_or(|o| o.pass);
    Ok(QuasiScoreCheck { family: family.name(), reps, lhs, rhs, diff, max_z, se_defined, pass, m_bar, optimal })
}

/// Monte Carlo mean of `g*(β₀)` for one method.
pub fn estimating_function_mean(
    sim: &Simulator,
    method: &MethodSpec,
    reps: usize,
    settings: SolverSettings,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let samples = par_reps(reps, |rep| -> Result<DMatrix<f64>> {
        let ds = sim.replicate(rep)?;
        let model = method.build_model(&ds, sim.link(), Some(sim.true_correlation()), settings)?;
        let ctx = EstimatingContext::new(&ds, sim.link(), &model).with_settings(settings);
        let g = estimating_function(&ctx, sim.beta0())?;
        Ok(DMatrix::from_column_slice(g.len(), 1, g.as_slice()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let est = EntrywiseEstimate::from_samples(&samples);
    Ok((est.mean.column(0).into_owned(), est.se.column(0).into_owned()))
}

/// One fit inside a Monte Carlo run; `beta = None` marks a failed or non-converged fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitRecord {
    pub beta: Option<DVector<f64>>,
    pub covered_model: Vec<bool>,
    pub covered_sandwich: Vec<bool>,
}

/// `‖g^indep(β₀)‖ / λ_max(M)^{1/2+δ}` for a plug-in and the exact `M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SllnRecord {
    pub plug_in: f64,
    pub exact: f64,
}

/// Raw per-replication output of [`run_monte_carlo`].
#[derive(Debug, Clone)]
pub struct McRun {
    pub methods: Vec<MethodSpec>,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub beta0: DVector<f64>,
    /// `records[rep][grid index][method index]`.
    pub records: Vec<Vec<Vec<FitRecord>>>,
    /// `slln[rep][grid index]`.
    pub slln: Vec<Vec<SllnRecord>>,
}

fn check_grid(sim: &Simulator, n_grid: &[usize]) -> Result<()> {
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) || n_grid[0] == 0 {
        return Err(GeeError::InvalidParameter("n grid must be non-empty and strictly increasing".into()));
    }
    if *n_grid.last().expect("non-empty") > sim.config.n {
        return Err(GeeError::InvalidParameter(format!("n grid exceeds the generator's n = {}", sim.config.n)));
    }
    Ok(())
}

fn slln_path(
    sim: &Simulator,
    ds: &LongitudinalDataset,
    n_grid: &[usize],
    delta: f64,
    exact: &[DMatrix<f64>],
) -> Result<Vec<SllnRecord>> {
    let p = ds.p();
    let mut g = DVector::zeros(p);
    let mut m_hat = DMatrix::zeros(p, p);
    let mut out = Vec::with_capacity(n_grid.len());
    let mut next = 0;
    for (i, ind) in ds.individuals().iter().enumerate() {
        if next == n_grid.len() {
            break;
        }
        let ev = SubjectEval::new(ind, sim.beta0(), sim.link())?;
        let xe = ind.x.tr_mul(&ev.resid);
        g += &xe;
        m_hat.ger(1.0, &xe, &xe, 1.0);
        if i + 1 == n_grid[next] {
            let norm = g.norm();
            out.push(SllnRecord {
                plug_in: norm / lambda_max(&m_hat).powf(0.5 + delta),
                exact: norm / lambda_max(&exact[next]).powf(0.5 + delta),
            });
            next += 1;
        }
    }
    Ok(out)
}

/// Fits every method on prefixes `n ∈ n_grid` of `reps` replications.
pub fn run_monte_carlo(
    sim: &Simulator,
    methods: &[MethodSpec],
    n_grid: &[usize],
    reps: usize,
    settings: SolverSettings,
    delta: f64,
) -> Result<McRun> {
    check_grid(sim, n_grid)?;
    if reps == 0 || methods.is_empty() {
        return Err(GeeError::InvalidParameter("need at least one replication and one method".into()));
    }
    let link = sim.link();
    let beta0 = sim.beta0();
    let exact: Vec<DMatrix<f64>> = n_grid
        .iter()
        .map(|&n| sandwich_sum(&sim.design[..n], beta0, link, sim.true_correlation()))
        .collect::<Result<_>>()?;
    let n_max = *n_grid.last().expect("non-empty");
    let per_rep = par_reps(reps, |rep| -> Result<(Vec<Vec<FitRecord>>, Vec<SllnRecord>)> {
        let full = sim.replicate_prefix(rep, n_max)?;
        let slln = slln_path(sim, &full, n_grid, delta, &exact)?;
        let mut rows = Vec::with_capacity(n_grid.len());
        for &n in n_grid {
            let ds = full.prefix(n)?;
            let row = methods
                .iter()
                .map(|spec| match fit_method(&ds, link, spec, Some(sim.true_correlation()), settings) {
                    Ok(fit) if fit.converged => {
                        let cov = fit.covariance.as_ref();
                        let covers = |ci: Option<&Vec<(f64, f64)>>| -> Vec<bool> {
                            ci.map(|ci| ci.iter().zip(beta0.iter()).map(|(&(lo, hi), &b)| lo <= b && b <= hi).collect())
                                .unwrap_or_default()
                        };
                        FitRecord {
                            covered_model: covers(cov.map(|c| &c.ci_model)),
                            covered_sandwich: covers(cov.map(|c| &c.ci_sandwich)),
                            beta: Some(fit.beta),
                        }
                    }
                    _ => FitRecord { beta: None, covered_model: vec![], covered_sandwich: vec![] },
                })
                .collect();
            rows.push(row);
        }
        Ok((rows, slln))
    });
    let mut records = Vec::with_capacity(reps);
    let mut slln = Vec::with_capacity(reps);
    for r in per_rep {
        let (rows, s) = r?;
        records.push(rows);
        slln.push(s);
    }
    Ok(McRun { methods: methods.to_vec(), n_grid: n_grid.to_vec(), reps, beta0: beta0.clone(), records, slln })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: &'static str,
    pub n: usize,
    pub reps: usize,
    pub converged: usize,
    pub mean: DVector<f64>,
    pub bias: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub variance: DVector<f64>,
    /// Monte Carlo standard error of each variance entry.
    pub variance_se: DVector<f64>,
    pub coverage_model: DVector<f64>,
    pub coverage_sandwich: DVector<f64>,
    pub mean_error: f64,
    pub median_error: f64,
    pub p90_error: f64,
}

/// Paired Monte Carlo comparison `var(a) − var(b)` for one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedDifference {
    pub diff: f64,
    pub se: f64,
    pub pairs: usize,
}

impl McRun {
    fn betas(&self, grid: usize, method: usize) -> Vec<&DVector<f64>> {
        self.records.iter().filter_map(|r| r[grid][method].beta.as_ref()).collect()
    }

    pub fn failures(&self, grid: usize, method: usize) -> usize {
        self.records.iter().filter(|r| r[grid][method].beta.is_none()).count()
    }

    /// Errors when any (method, n) cell lost more than 5% of its fits.
    pub fn check_failures(&self) -> Result<()> {
        for g in 0..self.n_grid.len() {
            for (k, spec) in self.methods.iter().enumerate() {
                let failed = self.failures(g, k);
                if failed as f64 > MAX_FAILURE_RATE * self.reps as f64 {
                    return Err(GeeError::Experiment(format!(
                        "{} at n = {}: {failed} of {} fits failed to converge",
                        spec.name(),
                        self.n_grid[g],
                        self.reps
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn summary(&self, grid: usize, method: usize) -> MethodSummary {
        let p = self.beta0.len();
        let betas = self.betas(grid, method);
        let k = betas.len();
        let kf = k as f64;
        let mean = betas.iter().fold(DVector::zeros(p), |acc, b| acc + *b) / kf.max(1.0);
        let mut covariance = DMatrix::zeros(p, p);
        for b in &betas {
            let d = *b - &mean;
            covariance.ger(1.0, &d, &d, 1.0);
        }
        covariance /= (kf - 1.0).max(1.0);
        let variance = covariance.diagonal();
        let variance_se = DVector::from_fn(p, |c, _| {
            let sq: Vec<f64> = betas.iter().map(|b| (b[c] - mean[c]).powi(2)).collect();
            mean_se(&sq).1
        });
        let coverage = |pick: fn(&FitRecord) -> &Vec<bool>| {
            DVector::from_fn(p, |c, _| {
                let hits = self
                    .records
                    .iter()
                    .map(|r| &r[grid][method])
                    .filter(|rec| rec.beta.is_some())
                    .filter(|rec| pick(rec).get(c).copied().unwrap_or(false))
                    .count();
                hits as f64 / kf
            })
        };
        let errors: Vec<f64> = betas.iter().map(|b| (*b - &self.beta0).norm()).collect();
        MethodSummary {
            method: self.methods[method].name(),
            n: self.n_grid[grid],
            reps: self.reps,
            converged: k,
            bias: &mean - &self.beta0,
            mean,
            covariance,
            variance,
            variance_se,
            coverage_model: coverage(|r| &r.covered_model),
            coverage_sandwich: coverage(|r| &r.covered_sandwich),
            mean_error: errors.iter().sum::<f64>() / kf,
            median_error: quantile(&errors, 0.5),
            p90_error: quantile(&errors, 0.9),
        }
    }

    pub fn summaries(&self) -> Vec<MethodSummary> {
        (0..self.n_grid.len())
            .flat_map(|g| (0..self.methods.len()).map(move |k| (g, k)))
            .map(|(g, k)| self.summary(g, k))
            .collect()
    }

    /// `var(a) − var(b)` on replications where both fits converged, with a paired SE.
    pub fn variance_difference(&self, grid: usize, a: usize, b: usize, coord: usize) -> PairedDifference {
        let pairs: Vec<(f64, f64)> = self
            .records
            .iter()
            .filter_map(|r| Some((r[grid][a].beta.as_ref()?[coord], r[grid][b].beta.as_ref()?[coord])))
            .collect();
        let k = pairs.len() as f64;
        let ma = pairs.iter().map(|p| p.0).sum::<f64>() / k;
        let mb = pairs.iter().map(|p| p.1).sum::<f64>() / k;
        let d: Vec<f64> = pairs.iter().map(|(x, y)| (x - ma).powi(2) - (y - mb).powi(2)).collect();
        let (mean, se) = mean_se(&d);
        PairedDifference { diff: mean * k / (k - 1.0), se, pairs: pairs.len() }
    }

    pub fn method_index(&self, name: &str) -> Option<usize> {
        self.methods.iter().position(|m| m.name() == name)
    }
}

#[derive(Debug, Clone)]
pub struct EfficiencyComparison {
    pub run: McRun,
    pub summaries: Vec<MethodSummary>,
}

/// Empirical covariance of every method's estimator at the generator's `n`.
pub fn efficiency_comparison(
    sim: &Simulator,
    methods: &[MethodSpec],
    reps: usize,
    settings: SolverSettings,
) -> Result<EfficiencyComparison> {
    let run = run_monte_carlo(sim, methods, &[sim.config.n], reps, settings, 0.1)?;
    run.check_failures()?;
    let summaries = run.summaries();
    Ok(EfficiencyComparison { run, summaries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub n: usize,
    pub converged: usize,
    pub failures: usize,
    pub median_error: f64,
    pub p90_error: f64,
    pub slln_median: f64,
    pub slln_exact_median: f64,
}

/// Error quantiles of one method along an increasing `n` grid, plus the martingale SLLN
/// statistic of the independence score.
pub fn consistency_trace(
    sim: &Simulator,
    n_grid: &[usize],
    method: &MethodSpec,
    reps: usize,
    settings: SolverSettings,
    delta: f64,
) -> Result<Vec<TraceRow>> {
    let run = run_monte_carlo(sim, std::slice::from_ref(method), n_grid, reps, settings, delta)?;
    run.check_failures()?;
    Ok((0..n_grid.len())
        .map(|g| {
            let s = run.summary(g, 0);
            let plug: Vec<f64> = run.slln.iter().map(|r| r[g].plug_in).collect();
            let exact: Vec<f64> = run.slln.iter().map(|r| r[g].exact).collect();
            TraceRow {
                n: n_grid[g],
                converged: s.converged,
                failures: run.failures(g, 0),
                median_error: s.median_error,
                p90_error: s.p90_error,
                slln_median: quantile(&plug, 0.5),
                slln_exact_median: quantile(&exact, 0.5),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::aqs_correlation;
    use crate::linalg::max_abs;

    fn config(link: Link, correlation: CorrelationSpec, n: usize) -> GeneratorConfig {
        GeneratorConfig {
            n,
            m: 3,
            p: 2,
            link,
            beta0: vec![0.5, -0.3],
            covariates: CovariateSpec::default(),
            correlation,
            mixing: None,
            seed: 11,
        }
    }

    #[test]
    fn deterministic_and_prefix_consistent() {
        let sim = Simulator::new(config(Link::Logistic, CorrelationSpec::Exchangeable { alpha: 0.3 }, 50)).unwrap();
        let a = sim.replicate(3).unwrap();
        assert_eq!(a, sim.replicate(3).unwrap());
        assert_ne!(a, sim.replicate(4).unwrap());
        assert_eq!(sim.replicate_prefix(3, 20).unwrap(), a.prefix(20).unwrap());
        assert_eq!(a.individuals()[0].x, sim.replicate(9).unwrap().individuals()[0].x);
    }

    #[test]
    fn uncorrelated_truth_gives_small_cross_correlation() {
        let sim = Simulator::new(config(Link::Linear, CorrelationSpec::Independence, 5000)).unwrap();
        let ds = sim.replicate(0).unwrap();
        let r = aqs_correlation(&ds, 5000, sim.beta0(), Link::Linear).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                if j != k {
                    assert!(r[(j, k)].abs() < 0.05, "{}", r[(j, k)]);
                }
            }
        }
    }

    #[test]
    fn residual_covariance_converges_to_truth() {
        for link in Link::ALL {
            let sim = Simulator::new(config(link, CorrelationSpec::Ar1 { alpha: 0.6 }, 5000)).unwrap();
            let ds = sim.replicate(1).unwrap();
            let r = aqs_correlation(&ds, 5000, sim.beta0(), link).unwrap();
            assert!(max_abs(&(r - sim.true_correlation())) < 0.05, "{link:?}");
        }
    }

    #[test]
    fn trace_identity_within_three_se() {
        let sim = Simulator::new(config(Link::Probit, CorrelationSpec::Exchangeable { alpha: 0.5 }, 4000)).unwrap();
        let t = residual_trace_check(&sim, 0).unwrap();
        assert!(t.z < 3.0, "{t:?}");
    }

    #[test]
    fn mixing_keeps_moments() {
        let mut cfg = config(Link::Linear, CorrelationSpec::Exchangeable { alpha: 0.4 }, 20000);
        cfg.mixing = Some(MixingSpec { amplitude: 0.9, phi: 0.8 });
        let sim = Simulator::new(cfg).unwrap();
        let ds = sim.replicate(0).unwrap();
        let r = aqs_correlation(&ds, 20000, sim.beta0(), Link::Linear).unwrap();
        assert!(max_abs(&(r - sim.true_correlation())) < 0.05);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = config(Link::Linear, CorrelationSpec::Exchangeable { alpha: 1.5 }, 10);
        assert!(Simulator::new(cfg.clone()).is_err());
        cfg.correlation = CorrelationSpec::Independence;
        cfg.beta0 = vec![1.0];
        assert!(Simulator::new(cfg.clone()).is_err());
        cfg.beta0 = vec![1.0, 1.0];
        cfg.covariates = CovariateSpec::Design { rows: vec![vec![1.0, 0.0]; 5] };
        assert!(Simulator::new(cfg).is_err());
    }

    #[test]
    fn single_rep_identity_check_flags_missing_se() {
        let sim = Simulator::new(config(Link::Linear, CorrelationSpec::Exchangeable { alpha: 0.5 }, 5)).unwrap();
        let check = quasi_score_identity_check(&sim, &QFamily::Indep, 1).unwrap();
        assert!(!check.se_defined);
        assert!(!check.pass);
    }

    #[test]
    fn indep_identity_with_identity_truth() {
        let sim = Simulator::new(config(Link::Linear, CorrelationSpec::Independence, 5)).unwrap();
        let check = quasi_score_identity_check(&sim, &QFamily::Indep, 4000).unwrap();
        let gram = sim.design().iter().fold(DMatrix::zeros(2, 2), |acc, x| acc + x.tr_mul(x));
        assert!(check.lhs.max_z(&gram) <= 4.0);
        assert!(max_abs(&(check.rhs.mean - gram)) < 1e-12);
        assert!(check.pass);
    }

    #[test]
    fn estimating_function_mean_zero() {
        let sim = Simulator::new(config(Link::Logistic, CorrelationSpec::Exchangeable { alpha: 0.4 }, 60)).unwrap();
        let methods = [
            MethodSpec::Indep,
            MethodSpec::Gee { correlation: CorrelationSpec::Ar1 { alpha: 0.3 } },
            MethodSpec::Ple { burn_in: Some(4) },
            MethodSpec::Aqs { burn_in: Some(4) },
        ];
        for method in &methods {
            let (mean, se) = estimating_function_mean(&sim, method, 800, SolverSettings::default()).unwrap();
            for k in 0..2 {
                assert!(mean[k].abs() <= 4.0 * se[k], "{} {mean} {se}", method.name());
            }
        }
    }

    #[test]
    fn identity_truth_methods_indistinguishable() {
        let sim = Simulator::new(config(Link::Linear, CorrelationSpec::Independence, 200)).unwrap();
        let methods = [
            MethodSpec::Indep,
            MethodSpec::Gee { correlation: CorrelationSpec::Exchangeable { alpha: 0.0 } },
            MethodSpec::Aqs { burn_in: None },
            MethodSpec::Oracle,
        ];
        let cmp = efficiency_comparison(&sim, &methods, 300, SolverSettings::default()).unwrap();
        let base = &cmp.summaries[0].variance;
        for s in &cmp.summaries {
            for k in 0..2 {
                let ratio = s.variance[k] / base[k];
                assert!((0.9..=1.1).contains(&ratio), "{} {ratio}", s.method);
            }
        }
    }

    #[test]
    fn results_independent_of_thread_count() {
        let sim = Simulator::new(config(Link::Logistic, CorrelationSpec::Exchangeable { alpha: 0.5 }, 80)).unwrap();
        let methods = [MethodSpec::Indep, MethodSpec::Aqs { burn_in: Some(10) }];
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| efficiency_comparison(&sim, &methods, 40, SolverSettings::default()).unwrap().summaries)
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn closed_form_and_newton_traces_agree() {
        let sim = Simulator::new(config(Link::Linear, CorrelationSpec::Independence, 400)).unwrap();
        let closed =
            consistency_trace(&sim, &[50, 400], &MethodSpec::Indep, 30, SolverSettings::default(), 0.1).unwrap();
        let newton_settings = SolverSettings { multistart: 1, ..SolverSettings::default() };
        let newton = consistency_trace(&sim, &[50, 400], &MethodSpec::Indep, 30, newton_settings, 0.1).unwrap();
        for (a, b) in closed.iter().zip(&newton) {
            assert!((a.median_error - b.median_error).abs() < 1e-9);
        }
    }
}
