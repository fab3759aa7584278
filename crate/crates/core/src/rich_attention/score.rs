//! Scalar order and distance penalties.

use crate::error::{Error, Result};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(z)` without overflow for large `|z|`.
pub fn log_sigmoid(z: f64) -> f64 {
    -((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

/// `o·ln p + (1−o)·ln(1−p)`; never positive.
pub fn order_score(o: f64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("order probability {p} outside (0, 1)")));
    }
    Ok(o * p.ln() + (1.0 - o) * (1.0 - p).ln())
}

/// [`order_score`] with `p = σ(z)`, evaluated in log space.
pub fn order_score_logit(o: f64, z: f64) -> f64 {
    o * log_sigmoid(z) + (1.0 - o) * log_sigmoid(-z)
}

/// `−θ²(d − μ)²/2`; never positive.
pub fn distance_score(d: f64, mu: f64, theta: f64) -> f64 {
    -0.5 * theta * theta * (d - mu) * (d - mu)
}
