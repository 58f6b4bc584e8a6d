//! Marginal model: links, data, and per-individual moments.
//!
//! Individuals are indexed from zero throughout the crate.

mod dataset;
mod io;
mod link;

pub use dataset::{Individual, LongitudinalDataset};
pub use io::{read_dataset, read_dataset_file, read_matrix, write_dataset};
pub use link::{Link, LinkValues, LOG_LINK_BOUND};

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

/// Link values, square-root variances and residuals of one individual at one β.
#[derive(Debug, Clone)]
pub struct SubjectEval {
    pub values: Vec<LinkValues>,
    pub mu: DVector<f64>,
    /// `σ_ij = μ′(x_ijᵀβ)^{1/2}`.
    pub sd: DVector<f64>,
    /// `y_i − μ_i(β)`.
    pub resid: DVector<f64>,
    /// `A_i^{-1/2}(y_i − μ_i(β))`.
    pub std_resid: DVector<f64>,
}

impl SubjectEval {
    pub fn new(ind: &Individual, beta: &DVector<f64>, link: Link) -> Result<Self> {
        let eta = &ind.x * beta;
        let values = eta.iter().map(|&u| link.values(u)).collect::<Result<Vec<_>>>()?;
        let m = values.len();
        let mu = DVector::from_fn(m, |j, _| values[j].mu);
        let sd = DVector::from_fn(m, |j, _| values[j].d1.sqrt());
        let resid = &ind.y - &mu;
        let std_resid = resid.component_div(&sd);
        Ok(SubjectEval { values, mu, sd, resid, std_resid })
    }
}

/// `μ_i(β)`.
pub fn marginal_mean(ds: &LongitudinalDataset, i: usize, beta: &DVector<f64>, link: Link) -> Result<DVector<f64>> {
    ds.check_beta(beta)?;
    Ok(SubjectEval::new(ds.individual(i)?, beta, link)?.mu)
}

/// `A_i(β) = diag(μ′(x_ijᵀβ))`.
pub fn variance_matrix(ds: &LongitudinalDataset, i: usize, beta: &DVector<f64>, link: Link) -> Result<DMatrix<f64>> {
    ds.check_beta(beta)?;
    let ev = SubjectEval::new(ds.individual(i)?, beta, link)?;
    Ok(DMatrix::from_diagonal(&DVector::from_fn(ev.values.len(), |j, _| ev.values[j].d1)))
}

/// `A_i(β)^{-1/2}(y_i − μ_i(β))`.
pub fn standardized_residual(
    ds: &LongitudinalDataset,
    i: usize,
    beta: &DVector<f64>,
    link: Link,
) -> Result<DVector<f64>> {
    ds.check_beta(beta)?;
    Ok(SubjectEval::new(ds.individual(i)?, beta, link)?.std_resid)
}

/// `D_i(β) = A_i(β) X_i`.
pub fn mean_jacobian(ds: &LongitudinalDataset, i: usize, beta: &DVector<f64>, link: Link) -> Result<DMatrix<f64>> {
    ds.check_beta(beta)?;
    let ind = ds.individual(i)?;
    let ev = SubjectEval::new(ind, beta, link)?;
    let mut d = ind.x.clone();
    for (j, mut row) in d.row_iter_mut().enumerate() {
        row *= ev.values[j].d1;
    }
    Ok(d)
}
