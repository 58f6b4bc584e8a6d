use nalgebra::{DMatrix, DVector};

use crate::error::{GeeError, Result};

/// One individual's block: an `m × p` design and `m` responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub id: i64,
    pub times: Vec<f64>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Individual {
    /// Builds an individual with times `1..=m`.
    pub fn new(id: i64, x: DMatrix<f64>, y: DVector<f64>) -> Self {
        let times = (1..=y.len()).map(|t| t as f64).collect();
        Individual { id, times, x, y }
    }
}

/// Balanced longitudinal data: `n` individuals observed at the same `m` occasions.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    m: usize,
    p: usize,
    individuals: Vec<Individual>,
}

impl LongitudinalDataset {
    pub fn new(individuals: Vec<Individual>) -> Result<Self> {
        let first =
            individuals.first().ok_or_else(|| GeeError::Dimension("dataset needs at least one individual".into()))?;
        let (m, p) = first.x.shape();
        if m == 0 || p == 0 {
            return Err(GeeError::Dimension(format!("design must be non-empty, got {m}x{p}")));
        }
        for (i, ind) in individuals.iter().enumerate() {
            if ind.x.shape() != (m, p) || ind.y.len() != m || ind.times.len() != m {
                return Err(GeeError::Dimension(format!(
                    "individual {i} has design {:?}, {} responses and {} times; expected {m}x{p}",
                    ind.x.shape(),
                    ind.y.len(),
                    ind.times.len()
                )));
            }
            if ind.x.iter().chain(ind.y.iter()).any(|v| !v.is_finite()) {
                return Err(GeeError::Dimension(format!("individual {i} has non-finite values")));
            }
        }
        Ok(LongitudinalDataset { m, p, individuals })
    }

    pub fn n(&self) -> usize {
        self.individuals.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn individuals(&self) -> &[Individual] {
        &self.individuals
    }

    /// Zero-based access.
    pub fn individual(&self, i: usize) -> Result<&Individual> {
        self.individuals.get(i).ok_or(GeeError::IndexOutOfRange { index: i, n: self.n() })
    }

    /// The first `n` individuals.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n() {
            return Err(GeeError::IndexOutOfRange { index: n, n: self.n() });
        }
        Ok(LongitudinalDataset { m: self.m, p: self.p, individuals: self.individuals[..n].to_vec() })
    }

    /// Copy with the responses of individual `i` replaced.
    pub fn with_response(&self, i: usize, y: DVector<f64>) -> Result<Self> {
        self.individual(i)?;
        if y.len() != self.m {
            return Err(GeeError::Dimension(format!("response length {} != m = {}", y.len(), self.m)));
        }
        let mut out = self.clone();
        out.individuals[i].y = y;
        Ok(out)
    }

    pub(crate) fn check_beta(&self, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != self.p {
            return Err(GeeError::Dimension(format!("beta has length {}, dataset has p = {}", beta.len(), self.p)));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(GeeError::InvalidParameter("beta must be finite".into()));
        }
        Ok(())
    }
}
