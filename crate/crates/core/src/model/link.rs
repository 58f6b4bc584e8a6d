use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{GeeError, Result};

/// Largest |u| accepted by the log link before `exp` is considered saturated.
pub const LOG_LINK_BOUND: f64 = 700.0;

/// Mean function `μ` of the marginal model.
///
/// The conditional variance of a response is `μ′(xᵀβ)` (unit dispersion), so every
/// link also fixes the variance function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Linear,
    Log,
    Logistic,
    Probit,
}

/// `μ` and its first three derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkValues {
    pub mu: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl Link {
    pub const ALL: [Link; 4] = [Link::Linear, Link::Log, Link::Logistic, Link::Probit];

    pub fn name(self) -> &'static str {
        match self {
            Link::Linear => "linear",
            Link::Log => "log",
            Link::Logistic => "logistic",
            Link::Probit => "probit",
        }
    }

    /// Evaluates `μ, μ′, μ″, μ‴` at `u`.
    ///
    /// Fails with [`GeeError::LinkSaturated`] when `μ′(u)` is not a positive finite
    /// number in floating point, or when the log link is asked for `|u| > 700`.
    pub fn values(self, u: f64) -> Result<LinkValues> {
        let saturated = || GeeError::LinkSaturated { link: self.name(), u };
        if !u.is_finite() {
            return Err(saturated());
        }
        let v = match self {
            Link::Linear => LinkValues { mu: u, d1: 1.0, d2: 0.0, d3: 0.0 },
            Link::Log => {
                if u.abs() > LOG_LINK_BOUND {
                    return Err(saturated());
                }
                let e = u.exp();
                LinkValues { mu: e, d1: e, d2: e, d3: e }
            }
            Link::Logistic => {
                // exp(-|u|) keeps both tails accurate.
                let t = (-u.abs()).exp();
                let mu = if u >= 0.0 { 1.0 / (1.0 + t) } else { t / (1.0 + t) };
                let d1 = t / ((1.0 + t) * (1.0 + t));
                // 1 - 2μ = -tanh(u/2), and 1 - 6μ + 6μ² = 1 - 6μ′.
                let d2 = -d1 * (0.5 * u).tanh();
                let d3 = d1 * (1.0 - 6.0 * d1);
                LinkValues { mu, d1, d2, d3 }
            }
            Link::Probit => {
                let mu = 0.5 * libm::erfc(-u * FRAC_1_SQRT_2);
                let d1 = (-0.5 * u * u).exp() / (2.0 * PI).sqrt();
                LinkValues { mu, d1, d2: -u * d1, d3: (u * u - 1.0) * d1 }
            }
        };
        if !(v.d1 > 0.0 && v.d1.is_finite()) {
            return Err(saturated());
        }
        Ok(v)
    }

    /// `μ^{(order)}(u)` for `order ∈ {0, 1, 2, 3}`.
    pub fn eval(self, order: u8, u: f64) -> Result<f64> {
        let v = self.values(u)?;
        match order {
            0 => Ok(v.mu),
            1 => Ok(v.d1),
            2 => Ok(v.d2),
            3 => Ok(v.d3),
            _ => Err(GeeError::InvalidParameter(format!("link derivative order {order} is not in 0..=3"))),
        }
    }
}

impl std::str::FromStr for Link {
    type Err = GeeError;

    fn from_str(s: &str) -> Result<Self> {
        Link::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| GeeError::InvalidParameter(format!("unknown link '{s}'")))
    }
}
