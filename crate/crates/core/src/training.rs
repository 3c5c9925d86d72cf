//! Mini-batch gradient training with fixed or adaptive margins.
//!
//! Each quadruplet contributes three shared-weight embeddings to the hinge
//! loss, plus an optional MOS regression term on the anchor. Margins are
//! inputs, never parameters: they receive no gradient and no update. Runs are
//! deterministic given the seed, and a variance-based collapse detector stops
//! runs whose embeddings have degenerated to a point.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::embed_net::{DenseVector, EmbeddingNet, GradientBundle};
use crate::error::{Error, Result};
use crate::losses::{
    regression_loss, triplet_loss_grads, LossWeights, MarginMode, RegressionKind,
};
use crate::sampling::{normalize_mos, Quadruplet, RatedItem};

/// Linear regression head g(.) mapping an embedding to a predicted rating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionHead {
    pub w: Vec<f64>,
    pub b: f64,
}

impl RegressionHead {
    pub fn zeros(embed_dim: usize) -> Self {
        RegressionHead {
            w: vec![0.0; embed_dim],
            b: 0.0,
        }
    }

    /// Seeded uniform init in [-s, s] with s = sqrt(6 / (embed_dim + 1)).
    pub fn seeded(embed_dim: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s = (6.0 / (embed_dim + 1) as f64).sqrt();
        RegressionHead {
            w: (0..embed_dim).map(|_| rng.gen_range(-s..=s)).collect(),
            b: 0.0,
        }
    }

    pub fn predict(&self, embedding: &[f64]) -> f64 {
        self.w.iter().zip(embedding).map(|(w, e)| w * e).sum::<f64>() + self.b
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.iter().any(|v| !v.is_finite()) || !self.b.is_finite() {
            return Err(Error::InvalidInput(
                "regression head has non-finite parameters".into(),
            ));
        }
        Ok(())
    }
}

/// First-order optimizer choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerSpec {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        let lr = match self {
            OptimizerSpec::Sgd { lr } => *lr,
            OptimizerSpec::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if !(0.0..1.0).contains(beta1) || !(0.0..1.0).contains(beta2) || *eps <= 0.0 {
                    return Err(Error::InvalidConfig(
                        "adam betas must lie in [0, 1) and eps must be positive".into(),
                    ));
                }
                *lr
            }
        };
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")));
        }
        Ok(())
    }
}

/// Moment buffers for [`optimizer_step`]. SGD leaves them untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }
}

/// Apply one optimizer update in place.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    spec: &OptimizerSpec,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: {} params, {} grads, {} state entries",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    match *spec {
        OptimizerSpec::Sgd { lr } => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= lr * g;
            }
        }
        OptimizerSpec::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } => {
            let t = state.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            for i in 0..params.len() {
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Full training configuration; JSON mirrors the field list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin_mode: MarginMode,
    pub loss_weights: LossWeights,
    pub regression: Option<RegressionKind>,
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub collapse_variance_eps: f64,
    pub collapse_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin_mode: MarginMode::Adaptive,
            loss_weights: LossWeights {
                alpha: 1.0,
                beta: 0.0,
            },
            regression: None,
            optimizer: OptimizerSpec::default(),
            batch_size: 64,
            epochs: 30,
            seed: 0,
            shuffle: true,
            collapse_variance_eps: 1e-6,
            collapse_patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.margin_mode.validate()?;
        self.loss_weights.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.loss_weights.beta > 0.0 && self.regression.is_none() {
            return Err(Error::InvalidConfig(
                "beta > 0 requires a regression kind".into(),
            ));
        }
        if !self.collapse_variance_eps.is_finite() || self.collapse_variance_eps <= 0.0 {
            return Err(Error::InvalidConfig(
                "collapse_variance_eps must be positive".into(),
            ));
        }
        if self.collapse_patience == 0 {
            return Err(Error::InvalidConfig(
                "collapse_patience must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch training history plus collapse diagnostics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub mean_triplet_loss: Vec<f64>,
    pub mean_regression_loss: Vec<f64>,
    pub active_hinge_fraction: Vec<f64>,
    pub embedding_variance: Vec<f64>,
    pub collapsed: bool,
    pub collapse_epoch: Option<usize>,
    pub skipped_degenerate: u64,
}

/// Number of items in the fixed probe subset used for collapse detection.
const PROBE_SIZE: usize = 256;

/// True iff the mean per-coordinate variance across the embeddings is
/// below `eps` — all inputs map to (nearly) the same point.
pub fn detect_collapse(embeddings: &[DenseVector], eps: f64) -> Result<bool> {
    Ok(mean_coordinate_variance(embeddings)? < eps)
}

fn mean_coordinate_variance(embeddings: &[DenseVector]) -> Result<f64> {
    let Some(first) = embeddings.first() else {
        return Err(Error::InvalidInput("need at least one embedding".into()));
    };
    let dim = first.len();
    if dim == 0 || embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::InvalidInput(
            "embeddings must share one nonzero dimension".into(),
        ));
    }
    let n = embeddings.len() as f64;
    let mut total = 0.0;
    for j in 0..dim {
        let mean = embeddings.iter().map(|e| e[j]).sum::<f64>() / n;
        let var = embeddings.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / n;
        total += var;
    }
    Ok(total / dim as f64)
}

struct FlatModel {
    net_params: usize,
    embed_dim: usize,
    train_head: bool,
}

impl FlatModel {
    fn pack(&self, net: &EmbeddingNet, head: Option<&RegressionHead>) -> Vec<f64> {
        let mut flat = net.flatten_params();
        if self.train_head {
            let head = head.expect("head packed only when trained");
            flat.extend_from_slice(&head.w);
            flat.push(head.b);
        }
        flat
    }

    fn unpack(&self, flat: &[f64], net: &mut EmbeddingNet, head: Option<&mut RegressionHead>) {
        net.assign_params(&flat[..self.net_params]).expect("congruent shapes");
        if self.train_head {
            let head = head.expect("head unpacked only when trained");
            let tail = &flat[self.net_params..];
            head.w.copy_from_slice(&tail[..self.embed_dim]);
            head.b = tail[self.embed_dim];
        }
    }
}

/// Train the network (and optional regression head) on a quadruplet set.
///
/// `items` supplies features and MOS values for both single-image and
/// pairwise datasets; every quadruplet id must resolve into it. Returns the
/// trained parameters and the per-epoch report; inputs are not mutated.
pub fn train(
    net: &EmbeddingNet,
    head: Option<&RegressionHead>,
    items: &[RatedItem],
    scale_n: u32,
    quads: &[Quadruplet],
    cfg: &TrainConfig,
) -> Result<(EmbeddingNet, Option<RegressionHead>, TrainReport)> {
    cfg.validate()?;
    if scale_n < 2 {
        return Err(Error::InvalidInput(format!(
            "rating scale must be at least 2, got {scale_n}"
        )));
    }
    let index: std::collections::HashMap<&str, usize> = items
        .iter()
        .enumerate()
        .map(|(i, it)| (it.id.as_str(), i))
        .collect();

    let mut net = net.clone();
    let mut head = head.cloned();
    if let Some(h) = &head {
        h.validate()?;
        if h.w.len() != net.embed_dim {
            return Err(Error::InvalidInput(format!(
                "head dim {} does not match embed_dim {}",
                h.w.len(),
                net.embed_dim
            )));
        }
    }
    let beta = cfg.loss_weights.beta;
    let alpha = cfg.loss_weights.alpha;
    if beta > 0.0 && head.is_none() {
        return Err(Error::InvalidConfig(
            "beta > 0 requires a regression head".into(),
        ));
    }

    let mut resolved = Vec::with_capacity(quads.len());
    for (qi, quad) in quads.iter().enumerate() {
        quad.validate()?;
        let lookup = |id: &str| {
            index.get(id).copied().ok_or_else(|| {
                Error::InvalidInput(format!("quadruplet {qi} references unknown id {id:?}"))
            })
        };
        resolved.push((
            lookup(&quad.anchor_id)?,
            lookup(&quad.positive_id)?,
            lookup(&quad.negative_id)?,
            quad.margin,
        ));
    }
    if !items.is_empty() && items[0].features.len() != net.in_dim() {
        return Err(Error::InvalidInput(format!(
            "feature dim {} does not match network input dim {}",
            items[0].features.len(),
            net.in_dim()
        )));
    }

    let layout = FlatModel {
        net_params: net.param_count(),
        embed_dim: net.embed_dim,
        train_head: beta > 0.0,
    };
    let n_params = layout.net_params + if layout.train_head { net.embed_dim + 1 } else { 0 };
    let mut opt_state = OptimizerState::new(n_params);

    let probe_count = items.len().min(PROBE_SIZE);
    let mut report = TrainReport::default();
    let mut consecutive_collapsed = 0usize;

    let numeric_failure = |message: String, report: &TrainReport| Error::NumericFailure {
        message,
        report: Box::new(report.clone()),
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..resolved.len()).collect();
        if cfg.shuffle {
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15));
            order.shuffle(&mut rng);
        }

        let mut sum_triplet = 0.0;
        let mut sum_regression = 0.0;
        let mut active = 0u64;
        let mut processed = 0u64;

        for batch in order.chunks(cfg.batch_size) {
            let mut batch_net_grads = GradientBundle::zeros_like(&net);
            let mut batch_head_w = vec![0.0; net.embed_dim];
            let mut batch_head_b = 0.0;
            let mut batch_count = 0u64;

            for &qi in batch {
                let (a_idx, p_idx, n_idx, stored_margin) = resolved[qi];
                let margin = match cfg.margin_mode {
                    MarginMode::Fixed { margin } => margin,
                    MarginMode::Adaptive => stored_margin,
                };
                let cache_a = net.forward_cached(&items[a_idx].features)?;
                let cache_p = net.forward_cached(&items[p_idx].features)?;
                let cache_n = net.forward_cached(&items[n_idx].features)?;
                let e_a = cache_a.embedding();
                let e_p = cache_p.embedding();
                let e_n = cache_n.embedding();
                if [&e_a, &e_p, &e_n]
                    .iter()
                    .any(|e| e.iter().any(|v| !v.is_finite()))
                {
                    return Err(numeric_failure(
                        format!("non-finite embedding at epoch {epoch}, quadruplet {qi}"),
                        &report,
                    ));
                }

                let (t_loss, g_a, g_p, g_n) =
                    match triplet_loss_grads(&e_a, &e_p, &e_n, margin) {
                        Ok(out) => out,
                        Err(Error::DegeneratePair(_)) => {
                            report.skipped_degenerate += 1;
                            continue;
                        }
                        Err(e) => return Err(e),
                    };

                let mut upstream_a: Vec<f64> = g_a.iter().map(|g| alpha * g).collect();
                let mut r_loss = 0.0;
                if layout.train_head {
                    let h = head.as_ref().unwrap();
                    let pred = h.predict(&e_a);
                    let target = normalize_mos(items[a_idx].mos, scale_n);
                    let (rl, dpred) =
                        regression_loss(pred, target, cfg.regression.unwrap())?;
                    r_loss = rl;
                    for (u, w) in upstream_a.iter_mut().zip(&h.w) {
                        *u += beta * dpred * w;
                    }
                    for (gw, e) in batch_head_w.iter_mut().zip(&e_a) {
                        *gw += beta * dpred * e;
                    }
                    batch_head_b += beta * dpred;
                }

                let total = alpha * t_loss + beta * r_loss;
                if !total.is_finite() {
                    return Err(numeric_failure(
                        format!("non-finite loss at epoch {epoch}, quadruplet {qi}"),
                        &report,
                    ));
                }

                if upstream_a.iter().any(|&g| g != 0.0) {
                    let (gb, _) = net.backward_from_cache(&cache_a, &upstream_a)?;
                    batch_net_grads.accumulate(&gb);
                }
                if t_loss > 0.0 && alpha != 0.0 {
                    let upstream_p: Vec<f64> = g_p.iter().map(|g| alpha * g).collect();
                    let (gb, _) = net.backward_from_cache(&cache_p, &upstream_p)?;
                    batch_net_grads.accumulate(&gb);
                    let upstream_n: Vec<f64> = g_n.iter().map(|g| alpha * g).collect();
                    let (gb, _) = net.backward_from_cache(&cache_n, &upstream_n)?;
                    batch_net_grads.accumulate(&gb);
                }

                sum_triplet += t_loss;
                sum_regression += r_loss;
                if t_loss > 0.0 {
                    active += 1;
                }
                processed += 1;
                batch_count += 1;
            }

            if batch_count == 0 {
                continue;
            }
            let inv = 1.0 / batch_count as f64;
            batch_net_grads.scale(inv);
            let mut grads = batch_net_grads.flatten();
            if layout.train_head {
                grads.extend(batch_head_w.iter().map(|g| g * inv));
                grads.push(batch_head_b * inv);
            }
            let mut params = layout.pack(&net, head.as_ref());
            optimizer_step(&mut params, &grads, &mut opt_state, &cfg.optimizer)?;
            layout.unpack(&params, &mut net, head.as_mut());
        }

        report.mean_triplet_loss.push(if processed > 0 {
            sum_triplet / processed as f64
        } else {
            0.0
        });
        report.mean_regression_loss.push(if processed > 0 {
            sum_regression / processed as f64
        } else {
            0.0
        });
        report.active_hinge_fraction.push(if processed > 0 {
            active as f64 / processed as f64
        } else {
            0.0
        });

        let variance = if probe_count > 0 {
            let mut probe = Vec::with_capacity(probe_count);
            for item in &items[..probe_count] {
                probe.push(net.embed(&item.features)?);
            }
            mean_coordinate_variance(&probe)?
        } else {
            0.0
        };
        report.embedding_variance.push(variance);

        if variance < cfg.collapse_variance_eps {
            consecutive_collapsed += 1;
        } else {
            consecutive_collapsed = 0;
        }
        if probe_count > 0 && consecutive_collapsed >= cfg.collapse_patience {
            report.collapsed = true;
            report.collapse_epoch = Some(epoch);
            break;
        }
    }

    Ok((net, head, report))
}
