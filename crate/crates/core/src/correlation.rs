//! Working correlations `R*` indexed by the number of preceding individuals.
//!
//! `working_correlation(.., i, ..)` for zero-based individual `i` is the matrix built
//! from individuals `0..i`, so the estimating function stays a martingale.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GeeError, Result};
use crate::linalg::{symmetrize, SymEigen};
use crate::model::{Link, LongitudinalDataset, SubjectEval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Exchangeable,
    Ar1,
}

pub fn structured_correlation(structure: Structure, alpha: f64, m: usize) -> Result<DMatrix<f64>> {
    if m == 0 {
        return Err(GeeError::InvalidParameter("correlation dimension must be positive".into()));
    }
    let bad = |range: &str| GeeError::InvalidParameter(format!("{structure:?} parameter {alpha} outside {range}"));
    match structure {
        Structure::Exchangeable => {
            let lower = if m > 1 { -1.0 / (m as f64 - 1.0) } else { f64::NEG_INFINITY };
            if !(alpha > lower && alpha < 1.0) {
                return Err(bad("(-1/(m-1), 1)"));
            }
            Ok(DMatrix::from_fn(m, m, |j, k| if j == k { 1.0 } else { alpha }))
        }
        Structure::Ar1 => {
            if !(alpha.abs() < 1.0) {
                return Err(bad("(-1, 1)"));
            }
            Ok(DMatrix::from_fn(m, m, |j, k| alpha.powi(j.abs_diff(k) as i32)))
        }
    }
}

/// Serializable description of a correlation matrix.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "structure", rename_all = "lowercase", deny_unknown_fields)]
pub enum CorrelationSpec {
    #[default]
    Independence,
    Exchangeable {
        alpha: f64,
    },
    Ar1 {
        alpha: f64,
    },
    Custom {
        matrix: Vec<Vec<f64>>,
    },
}

impl CorrelationSpec {
    /// The `m × m` matrix, validated as a correlation matrix.
    pub fn matrix(&self, m: usize) -> Result<DMatrix<f64>> {
        let r = match self {
            CorrelationSpec::Independence => DMatrix::identity(m, m),
            CorrelationSpec::Exchangeable { alpha } => structured_correlation(Structure::Exchangeable, *alpha, m)?,
            CorrelationSpec::Ar1 { alpha } => structured_correlation(Structure::Ar1, *alpha, m)?,
            CorrelationSpec::Custom { matrix } => {
                if matrix.len() != m || matrix.iter().any(|row| row.len() != m) {
                    return Err(GeeError::Dimension(format!("custom correlation must be {m}x{m}")));
                }
                DMatrix::from_fn(m, m, |j, k| matrix[j][k])
            }
        };
        validate_correlation(&r)?;
        Ok(r)
    }
}

/// Checks that `r` is a symmetric positive-definite matrix with unit diagonal.
pub fn validate_correlation(r: &DMatrix<f64>) -> Result<()> {
    if !r.is_square() || r.nrows() == 0 {
        return Err(GeeError::Dimension(format!("correlation must be square, got {:?}", r.shape())));
    }
    let m = r.nrows();
    for j in 0..m {
        if (r[(j, j)] - 1.0).abs() > 1e-12 {
            return Err(GeeError::InvalidParameter(format!("correlation diagonal entry {j} is {}", r[(j, j)])));
        }
        for k in 0..m {
            if (r[(j, k)] - r[(k, j)]).abs() > 1e-12 || !r[(j, k)].is_finite() {
                return Err(GeeError::InvalidParameter("correlation matrix is not symmetric".into()));
            }
        }
    }
    let lmin = SymEigen::new(r).min();
    if lmin <= 1e-12 {
        return Err(GeeError::InvalidParameter(format!(
            "correlation matrix is not positive definite (lambda_min = {lmin:.3e})"
        )));
    }
    Ok(())
}

fn check_prefix(ds: &LongitudinalDataset, k: usize) -> Result<()> {
    if k > ds.n() {
        return Err(GeeError::IndexOutOfRange { index: k, n: ds.n() });
    }
    Ok(())
}

/// `(1/k) Σ_{i<k} ê_i(β) ê_i(β)ᵀ`, or `I` for `k < 2`.
pub fn aqs_correlation(ds: &LongitudinalDataset, k: usize, beta: &DVector<f64>, link: Link) -> Result<DMatrix<f64>> {
    check_prefix(ds, k)?;
    let m = ds.m();
    if k < 2 {
        return Ok(DMatrix::identity(m, m));
    }
    let mut s = DMatrix::zeros(m, m);
    for ind in &ds.individuals()[..k] {
        let e = SubjectEval::new(ind, beta, link)?.std_resid;
        s.ger(1.0, &e, &e, 1.0);
    }
    Ok(s / k as f64)
}

/// `∂ê_i/∂β_l = −x_{i·l} ∘ (σ_i + ê_i μ″/(2μ′))` for every `l`, as an `m × p` matrix.
pub(crate) fn std_resid_gradient(x: &DMatrix<f64>, ev: &SubjectEval) -> DMatrix<f64> {
    let (m, p) = x.shape();
    DMatrix::from_fn(m, p, |j, l| {
        let v = ev.values[j];
        -x[(j, l)] * (ev.sd[j] + ev.std_resid[j] * v.d2 / (2.0 * v.d1))
    })
}

/// `∂R*_k/∂β_l`; zero for `k < 2`.
pub fn aqs_correlation_derivative(
    ds: &LongitudinalDataset,
    k: usize,
    beta: &DVector<f64>,
    link: Link,
    l: usize,
) -> Result<DMatrix<f64>> {
    check_prefix(ds, k)?;
    if l >= ds.p() {
        return Err(GeeError::IndexOutOfRange { index: l, n: ds.p() });
    }
    let m = ds.m();
    let mut d = DMatrix::zeros(m, m);
    if k < 2 {
        return Ok(d);
    }
    for ind in &ds.individuals()[..k] {
        let ev = SubjectEval::new(ind, beta, link)?;
        let de = std_resid_gradient(&ind.x, &ev).column(l).into_owned();
        d.ger(1.0, &de, &ev.std_resid, 1.0);
        d.ger(1.0, &ev.std_resid, &de, 1.0);
    }
    Ok(d / k as f64)
}

/// `R̃_0, …, R̃_{n−1}` built from the pilot `β̃`, with `R̃_0 = R̃_1 = I`.
pub fn ple_correlation_sequence(
    ds: &LongitudinalDataset,
    beta_tilde: &DVector<f64>,
    link: Link,
) -> Result<Vec<DMatrix<f64>>> {
    ds.check_beta(beta_tilde)?;
    let m = ds.m();
    let mut out = Vec::with_capacity(ds.n());
    let mut s = DMatrix::zeros(m, m);
    for (k, ind) in ds.individuals().iter().enumerate() {
        out.push(if k < 2 { DMatrix::identity(m, m) } else { &s / k as f64 });
        let e = SubjectEval::new(ind, beta_tilde, link)?.std_resid;
        s.ger(1.0, &e, &e, 1.0);
    }
    Ok(out)
}

/// `∂(R⁻¹) = −R⁻¹ ∂R R⁻¹`.
pub fn inverse_derivative(rinv: &DMatrix<f64>, dr: &DMatrix<f64>) -> DMatrix<f64> {
    -(rinv * dr * rinv)
}

/// Number of leading prefixes for which the sample correlation is replaced by `I`.
///
/// With `k` prefix terms the inverse of a sample covariance is biased upwards by a
/// factor near `k/(k−m−1)`; at `k = 11(m+1)` the bias is 10%.
pub fn default_burn_in(m: usize) -> usize {
    11 * (m + 1)
}

/// Strategy for `R*`.
#[derive(Debug, Clone, PartialEq)]
pub enum CorrelationModel {
    /// Working independence.
    Identity,
    /// A fixed correlation matrix (GEE).
    Fixed(DMatrix<f64>),
    /// Sample correlation from a pilot fit, precomputed for every prefix.
    Ple { pilot: DVector<f64>, sequence: Vec<DMatrix<f64>>, burn_in: usize },
    /// Sample correlation at the current β.
    Aqs { burn_in: usize },
}

impl CorrelationModel {
    pub fn fixed(r: DMatrix<f64>) -> Result<Self> {
        validate_correlation(&r)?;
        Ok(CorrelationModel::Fixed(r))
    }

    pub fn ple(ds: &LongitudinalDataset, pilot: DVector<f64>, link: Link, burn_in: usize) -> Result<Self> {
        let sequence = ple_correlation_sequence(ds, &pilot, link)?;
        Ok(CorrelationModel::Ple { pilot, sequence, burn_in })
    }

    pub fn aqs(m: usize) -> Self {
        CorrelationModel::Aqs { burn_in: default_burn_in(m) }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            CorrelationModel::Identity => "indep",
            CorrelationModel::Fixed(_) => "gee",
            CorrelationModel::Ple { .. } => "ple",
            CorrelationModel::Aqs { .. } => "aqs",
        }
    }

    pub fn depends_on_beta(&self) -> bool {
        matches!(self, CorrelationModel::Aqs { .. })
    }

    fn uses_sample(&self, k: usize) -> bool {
        match self {
            CorrelationModel::Ple { burn_in, .. } | CorrelationModel::Aqs { burn_in } => k >= 2 && k >= *burn_in,
            _ => false,
        }
    }

    fn check_dims(&self, ds: &LongitudinalDataset) -> Result<()> {
        match self {
            CorrelationModel::Fixed(r) if r.nrows() != ds.m() => Err(GeeError::Dimension(format!(
                "fixed correlation is {}x{}, data have m = {}",
                r.nrows(),
                r.ncols(),
                ds.m()
            ))),
            CorrelationModel::Ple { sequence, pilot, .. } if sequence.len() != ds.n() || pilot.len() != ds.p() => {
                Err(GeeError::Dimension(format!(
                    "PLE sequence built for {} individuals, data have {}",
                    sequence.len(),
                    ds.n()
                )))
            }
            _ => Ok(()),
        }
    }

    /// Evaluates `R*` for every individual at `β`, with inverses and, optionally, the
    /// β-derivatives of the AQS matrices.
    pub fn path(
        &self,
        ds: &LongitudinalDataset,
        beta: &DVector<f64>,
        link: Link,
        ridge: &RidgePolicy,
        with_derivatives: bool,
    ) -> Result<CorrelationPath> {
        ds.check_beta(beta)?;
        self.check_dims(ds)?;
        let (n, m, p) = (ds.n(), ds.m(), ds.p());
        let mut path = CorrelationPath::default();
        match self {
            CorrelationModel::Identity | CorrelationModel::Fixed(_) => {
                let r = match self {
                    CorrelationModel::Fixed(r) => r.clone(),
                    _ => DMatrix::identity(m, m),
                };
                let slot = path.push_distinct(&r, None, ridge)?;
                path.slots = vec![slot; n];
            }
            CorrelationModel::Ple { sequence, .. } => {
                let eye = DMatrix::identity(m, m);
                let id_slot = path.push_distinct(&eye, None, ridge)?;
                for (k, r) in sequence.iter().enumerate() {
                    let slot = if self.uses_sample(k) { path.push_distinct(r, Some(k), ridge)? } else { id_slot };
                    path.slots.push(slot);
                }
            }
            CorrelationModel::Aqs { .. } => {
                let eye = DMatrix::identity(m, m);
                let id_slot = path.push_distinct(&eye, None, ridge)?;
                let zero = DMatrix::zeros(m, m);
                let mut s = DMatrix::zeros(m, m);
                let mut ds_sum: Vec<DMatrix<f64>> = vec![zero.clone(); if with_derivatives { p } else { 0 }];
                let mut derivs = Vec::new();
                for (k, ind) in ds.individuals().iter().enumerate() {
                    if self.uses_sample(k) {
                        let slot = path.push_distinct(&(&s / k as f64), Some(k), ridge)?;
                        path.slots.push(slot);
                        if with_derivatives {
                            derivs.push(ds_sum.iter().map(|t| t / k as f64).collect::<Vec<_>>());
                        }
                    } else {
                        path.slots.push(id_slot);
                        if with_derivatives {
                            derivs.push(Vec::new());
                        }
                    }
                    let ev = SubjectEval::new(ind, beta, link)?;
                    s.ger(1.0, &ev.std_resid, &ev.std_resid, 1.0);
                    if with_derivatives {
                        let grad = std_resid_gradient(&ind.x, &ev);
                        for (l, t) in ds_sum.iter_mut().enumerate() {
                            let de = grad.column(l);
                            t.ger(1.0, &de, &ev.std_resid, 1.0);
                            t.ger(1.0, &ev.std_resid, &de, 1.0);
                        }
                    }
                }
                if with_derivatives {
                    path.derivatives = Some(derivs);
                }
            }
        }
        Ok(path)
    }
}

/// Handling of near-singular sample correlations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RidgePolicy {
    pub enabled: bool,
    pub epsilon: f64,
    /// Matrices with `λ_min` below this are ridged, or rejected when ridging is off.
    pub tolerance: f64,
}

impl Default for RidgePolicy {
    fn default() -> Self {
        RidgePolicy { enabled: true, epsilon: 1e-6, tolerance: 1e-8 }
    }
}

/// Inverse of one working correlation with its conditioning.
#[derive(Debug, Clone)]
pub struct InverseInfo {
    pub inverse: DMatrix<f64>,
    /// Smallest eigenvalue before any ridge.
    pub lambda_min: f64,
    /// `log` of the condition number of the matrix actually inverted.
    pub log_condition: f64,
    pub ridged: bool,
}

fn invert(r: &DMatrix<f64>, index: Option<usize>, ridge: &RidgePolicy) -> Result<InverseInfo> {
    let eig = SymEigen::new(r);
    let lambda_min = eig.min();
    let mut shift = 0.0;
    if lambda_min < ridge.tolerance {
        match index {
            Some(_) if ridge.enabled => shift = ridge.epsilon,
            Some(index) => return Err(GeeError::SingularCorrelation { index, lambda_min }),
            None => return Err(GeeError::Singular(format!("working correlation has lambda_min {lambda_min:.3e}"))),
        }
        if lambda_min + shift <= 0.0 {
            return Err(GeeError::SingularCorrelation { index: index.unwrap_or(0), lambda_min });
        }
    }
    let inverse = eig.map(|v| 1.0 / (v + shift));
    let log_condition = ((eig.max() + shift) / (lambda_min + shift)).ln();
    Ok(InverseInfo { inverse, lambda_min, log_condition, ridged: shift > 0.0 })
}

/// `R*` for every individual at one β.
#[derive(Debug, Clone, Default)]
pub struct CorrelationPath {
    matrices: Vec<DMatrix<f64>>,
    infos: Vec<InverseInfo>,
    slots: Vec<usize>,
    derivatives: Option<Vec<Vec<DMatrix<f64>>>>,
    pub ridge_events: usize,
}

impl CorrelationPath {
    fn push_distinct(&mut self, r: &DMatrix<f64>, index: Option<usize>, ridge: &RidgePolicy) -> Result<usize> {
        let info = invert(r, index, ridge)?;
        if info.ridged {
            self.ridge_events += 1;
        }
        self.matrices.push(symmetrize(r));
        self.infos.push(info);
        Ok(self.matrices.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// `R*` used for individual `i` (before any ridge).
    pub fn matrix(&self, i: usize) -> &DMatrix<f64> {
        &self.matrices[self.slots[i]]
    }

    pub fn info(&self, i: usize) -> &InverseInfo {
        &self.infos[self.slots[i]]
    }

    pub fn inverse(&self, i: usize) -> &DMatrix<f64> {
        &self.info(i).inverse
    }

    /// `∂R*/∂β_l` for individual `i`, `None` where `R*` does not depend on β.
    pub fn derivative(&self, i: usize, l: usize) -> Option<&DMatrix<f64>> {
        self.derivatives.as_ref()?.get(i)?.get(l)
    }

    pub fn has_derivatives(&self) -> bool {
        self.derivatives.is_some()
    }
}

/// `R*` for zero-based individual `i`, built from individuals `0..i`.
pub fn working_correlation(
    model: &CorrelationModel,
    ds: &LongitudinalDataset,
    i: usize,
    beta: &DVector<f64>,
    link: Link,
) -> Result<DMatrix<f64>> {
    ds.individual(i)?;
    ds.check_beta(beta)?;
    model.check_dims(ds)?;
    let m = ds.m();
    Ok(match model {
        CorrelationModel::Identity => DMatrix::identity(m, m),
        CorrelationModel::Fixed(r) => r.clone(),
        CorrelationModel::Ple { sequence, .. } => {
            if model.uses_sample(i) {
                sequence[i].clone()
            } else {
                DMatrix::identity(m, m)
            }
        }
        CorrelationModel::Aqs { .. } => {
            if model.uses_sample(i) {
                aqs_correlation(ds, i, beta, link)?
            } else {
                DMatrix::identity(m, m)
            }
        }
    })
}

pub fn working_correlation_inverse(
    model: &CorrelationModel,
    ds: &LongitudinalDataset,
    i: usize,
    beta: &DVector<f64>,
    link: Link,
    ridge: &RidgePolicy,
) -> Result<InverseInfo> {
    let r = working_correlation(model, ds, i, beta, link)?;
    invert(&r, Some(i), ridge)
}
