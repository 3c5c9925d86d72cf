//! Triplet, regression, and combined losses with exact gradients.
//!
//! The triplet loss is the hinge max(d(A,P) - d(A,N) + m, 0) over plain
//! Euclidean distances between unit-norm embeddings. The margin m is either
//! a fixed constant or read per-quadruplet; it never receives a gradient.

use serde::{Deserialize, Serialize};

use crate::embed_net::{embedding_distance, DenseVector};
use crate::error::{Error, Result};

/// Two embeddings closer than this under an active hinge are treated as
/// coincident: the gradient direction is undefined.
pub const DEGENERATE_DIST: f64 = 1e-12;

/// How the margin of each triplet is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum MarginMode {
    /// One constant margin for every triplet.
    Fixed { margin: f64 },
    /// Margin read from each quadruplet record.
    Adaptive,
}

impl MarginMode {
    pub fn validate(&self) -> Result<()> {
        if let MarginMode::Fixed { margin } = self {
            if !margin.is_finite() || *margin < 0.0 || *margin > 2.0 {
                return Err(Error::InvalidConfig(format!(
                    "fixed margin must be finite in [0, 2], got {margin}"
                )));
            }
        }
        Ok(())
    }
}

/// Weights of the combined loss alpha * triplet + beta * regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !self.beta.is_finite() || self.alpha < 0.0 || self.beta < 0.0
        {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::InvalidConfig("alpha + beta must be positive".into()));
        }
        Ok(())
    }
}

/// Regression objective for the MOS head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionKind {
    Mae,
    Mse,
}

/// Hinge triplet loss max(dAP - dAN + m, 0) over precomputed distances.
pub fn triplet_loss(d_ap: f64, d_an: f64, m: f64) -> Result<f64> {
    for (name, v) in [("dAP", d_ap), ("dAN", d_an), ("m", m)] {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("{name} is not finite")));
        }
    }
    if d_ap < 0.0 || d_an < 0.0 {
        return Err(Error::InvalidInput(format!(
            "distances must be nonnegative, got dAP={d_ap}, dAN={d_an}"
        )));
    }
    if m < 0.0 {
        return Err(Error::InvalidInput(format!("margin must be nonnegative, got {m}")));
    }
    Ok((d_ap - d_an + m).max(0.0))
}

/// Triplet loss over three embeddings, with exact subgradients with respect
/// to each embedding. Gradients are zero whenever the hinge is inactive
/// (including exactly at the kink); the margin gets no gradient.
pub fn triplet_loss_grads(
    e_a: &[f64],
    e_p: &[f64],
    e_n: &[f64],
    m: f64,
) -> Result<(f64, DenseVector, DenseVector, DenseVector)> {
    let d_ap = embedding_distance(e_a, e_p)?;
    let d_an = embedding_distance(e_a, e_n)?;
    let loss = triplet_loss(d_ap, d_an, m)?;
    let dim = e_a.len();
    if loss <= 0.0 {
        return Ok((loss, vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]));
    }
    if d_ap < DEGENERATE_DIST || d_an < DEGENERATE_DIST {
        return Err(Error::DegeneratePair(format!(
            "coincident embeddings under an active hinge (dAP={d_ap:e}, dAN={d_an:e})"
        )));
    }
    // d||a-b|| / da = (a-b)/||a-b||
    let mut g_a = vec![0.0; dim];
    let mut g_p = vec![0.0; dim];
    let mut g_n = vec![0.0; dim];
    for i in 0..dim {
        let ap = (e_a[i] - e_p[i]) / d_ap;
        let an = (e_a[i] - e_n[i]) / d_an;
        g_a[i] = ap - an;
        g_p[i] = -ap;
        g_n[i] = an;
    }
    Ok((loss, g_a, g_p, g_n))
}

/// Regression loss and its derivative with respect to the prediction.
pub fn regression_loss(pred: f64, mos: f64, kind: RegressionKind) -> Result<(f64, f64)> {
    if !pred.is_finite() || !mos.is_finite() {
        return Err(Error::InvalidInput("regression inputs must be finite".into()));
    }
    let r = pred - mos;
    Ok(match kind {
        RegressionKind::Mae => {
            let dpred = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
            (r.abs(), dpred)
        }
        RegressionKind::Mse => (r * r, 2.0 * r),
    })
}

/// alpha * triplet + beta * regression.
pub fn combined_loss(triplet: f64, regression: f64, w: &LossWeights) -> f64 {
    w.alpha * triplet + w.beta * regression
}
