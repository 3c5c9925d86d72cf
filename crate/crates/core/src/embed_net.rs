//! Small feed-forward embedding network with L2-normalized output.
//!
//! The network maps a feature vector to a point on the unit hypersphere.
//! Forward, normalization, and backward passes are all written out by hand
//! so that gradients are exact and checkable against finite differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense real vector. All operations reject non-finite entries.
pub type DenseVector = Vec<f64>;

/// Epsilon guarding L2 normalization of near-zero vectors.
pub const NORM_EPS: f64 = 1e-12;

/// Hidden-layer activation. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative as a function of the pre-activation value.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// One dense layer: `w` has shape out_dim x in_dim, `b` has length out_dim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.b.len()
    }

    pub fn in_dim(&self) -> usize {
        self.w.first().map_or(0, |row| row.len())
    }
}

/// Feed-forward embedding network `f(.)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingNet {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub embed_dim: usize,
}

/// Per-layer parameter gradients, shape-congruent with an [`EmbeddingNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl GradientBundle {
    /// All-zero gradients matching the shape of `net`.
    pub fn zeros_like(net: &EmbeddingNet) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|layer| LayerGrad {
                w: vec![vec![0.0; layer.in_dim()]; layer.out_dim()],
                b: vec![0.0; layer.out_dim()],
            })
            .collect();
        GradientBundle { layers }
    }

    /// `self += other`. Shapes must agree.
    pub fn accumulate(&mut self, other: &GradientBundle) {
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            for (dw, sw) in dst.w.iter_mut().zip(&src.w) {
                for (d, s) in dw.iter_mut().zip(sw) {
                    *d += *s;
                }
            }
            for (d, s) in dst.b.iter_mut().zip(&src.b) {
                *d += *s;
            }
        }
    }

    /// Multiply every entry by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            for row in &mut layer.w {
                for g in row {
                    *g *= factor;
                }
            }
            for g in &mut layer.b {
                *g *= factor;
            }
        }
    }

    /// Flatten in the same order as [`EmbeddingNet::flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for row in &layer.w {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(&layer.b);
        }
        out
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} contains NaN/Inf")));
    }
    Ok(())
}

impl EmbeddingNet {
    /// Build a network from explicit layers, validating the dimension chain.
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("network needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.w.len() != layer.b.len() {
                return Err(Error::InvalidInput(format!(
                    "layer {k}: {} weight rows but {} biases",
                    layer.w.len(),
                    layer.b.len()
                )));
            }
            let in_dim = layer.in_dim();
            if in_dim == 0 || layer.out_dim() == 0 {
                return Err(Error::InvalidInput(format!("layer {k} has a zero dimension")));
            }
            for (i, row) in layer.w.iter().enumerate() {
                if row.len() != in_dim {
                    return Err(Error::InvalidInput(format!(
                        "layer {k} row {i}: ragged weight matrix"
                    )));
                }
                check_finite(row, "weights")?;
            }
            check_finite(&layer.b, "biases")?;
            if k > 0 && layers[k - 1].out_dim() != in_dim {
                return Err(Error::InvalidInput(format!(
                    "layer {} output dim {} does not match layer {k} input dim {in_dim}",
                    k - 1,
                    layers[k - 1].out_dim()
                )));
            }
        }
        let embed_dim = layers.last().unwrap().out_dim();
        Ok(EmbeddingNet {
            layers,
            activation,
            embed_dim,
        })
    }

    /// Seeded Glorot-uniform initialization: weights uniform in [-s, s]
    /// with s = sqrt(6 / (in_dim + out_dim)), biases zero.
    ///
    /// `dims` lists layer widths input-first, e.g. `[8, 32, 16]` builds one
    /// hidden layer of 32 and a 16-dimensional embedding.
    pub fn seeded(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        if dims.len() < 2 {
            return Err(Error::InvalidInput(
                "need at least input and output dims".into(),
            ));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidInput("zero layer width".into()));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (in_dim, out_dim) = (pair[0], pair[1]);
            let s = (6.0 / (in_dim + out_dim) as f64).sqrt();
            let w = (0..out_dim)
                .map(|_| (0..in_dim).map(|_| rng.gen_range(-s..=s)).collect())
                .collect();
            layers.push(Layer {
                w,
                b: vec![0.0; out_dim],
            });
        }
        EmbeddingNet::new(layers, activation)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Re-check all structural invariants, for nets built by deserialization.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = EmbeddingNet::new(self.layers.clone(), self.activation)?;
        if rebuilt.embed_dim != self.embed_dim {
            return Err(Error::InvalidInput(format!(
                "embed_dim {} does not match last layer width {}",
                self.embed_dim, rebuilt.embed_dim
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::InvalidInput(format!(
                "input dim {} does not match network input dim {}",
                x.len(),
                self.in_dim()
            )));
        }
        check_finite(x, "input")
    }

    /// Raw (pre-normalization) embedding of `x`.
    pub fn forward(&self, x: &[f64]) -> Result<DenseVector> {
        Ok(self.forward_cached(x)?.raw().to_vec())
    }

    /// L2-normalized embedding: the `f(.)` used by all losses and evaluations.
    pub fn embed(&self, x: &[f64]) -> Result<DenseVector> {
        let raw = self.forward(x)?;
        Ok(l2_normalize(&raw, NORM_EPS))
    }

    pub(crate) fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let n_layers = self.layers.len();
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut preacts: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut a = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let z: Vec<f64> = layer
                .w
                .iter()
                .zip(&layer.b)
                .map(|(row, &b)| row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>() + b)
                .collect();
            let out = if k + 1 == n_layers {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            inputs.push(a);
            preacts.push(z);
            a = out;
        }
        Ok(ForwardCache {
            inputs,
            preacts,
            raw: a,
        })
    }

    /// Exact gradients of a scalar loss with respect to all parameters and
    /// the input, given the loss gradient `upstream` with respect to the
    /// normalized embedding `embed(net, x)`.
    ///
    /// Chains through the normalization Jacobian (I - uu^T)/||v|| and every
    /// layer. Returns (parameter gradients, input gradient).
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(GradientBundle, DenseVector)> {
        let cache = self.forward_cached(x)?;
        self.backward_from_cache(&cache, upstream)
    }

    pub(crate) fn backward_from_cache(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
    ) -> Result<(GradientBundle, DenseVector)> {
        if upstream.len() != self.embed_dim {
            return Err(Error::InvalidInput(format!(
                "upstream dim {} does not match embed_dim {}",
                upstream.len(),
                self.embed_dim
            )));
        }
        check_finite(upstream, "upstream")?;

        let raw = cache.raw();
        let norm = l2_norm(raw);
        // d(v / max(||v||, eps)) / dv
        let mut g: Vec<f64> = if norm >= NORM_EPS {
            let unit: Vec<f64> = raw.iter().map(|v| v / norm).collect();
            let proj: f64 = unit.iter().zip(upstream).map(|(u, g)| u * g).sum();
            unit.iter()
                .zip(upstream)
                .map(|(u, g)| (g - proj * u) / norm)
                .collect()
        } else {
            upstream.iter().map(|g| g / NORM_EPS).collect()
        };

        let n_layers = self.layers.len();
        let mut grads = GradientBundle::zeros_like(self);
        for k in (0..n_layers).rev() {
            let layer = &self.layers[k];
            let dz: Vec<f64> = if k + 1 == n_layers {
                g
            } else {
                g.iter()
                    .zip(&cache.preacts[k])
                    .map(|(gi, &z)| gi * self.activation.derivative(z))
                    .collect()
            };
            let a_in = &cache.inputs[k];
            let lg = &mut grads.layers[k];
            for (i, &d) in dz.iter().enumerate() {
                for (j, &a) in a_in.iter().enumerate() {
                    lg.w[i][j] = d * a;
                }
                lg.b[i] = d;
            }
            let mut g_prev = vec![0.0; layer.in_dim()];
            for (i, &d) in dz.iter().enumerate() {
                for (j, w) in layer.w[i].iter().enumerate() {
                    g_prev[j] += w * d;
                }
            }
            g = g_prev;
        }
        Ok((grads, g))
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.out_dim() * l.in_dim() + l.out_dim())
            .sum()
    }

    /// Parameters flattened layer by layer, weights row-major then biases.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            for row in &layer.w {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(&layer.b);
        }
        out
    }

    /// Inverse of [`flatten_params`](Self::flatten_params).
    pub fn assign_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter();
        for layer in &mut self.layers {
            for row in &mut layer.w {
                for v in row {
                    *v = *it.next().unwrap();
                }
            }
            for v in &mut layer.b {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }
}

/// Forward-pass caches needed by the backward pass.
pub(crate) struct ForwardCache {
    /// Input to each layer (inputs[0] is the network input).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    preacts: Vec<Vec<f64>>,
    /// Output of the last layer, before normalization.
    raw: Vec<f64>,
}

impl ForwardCache {
    pub(crate) fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub(crate) fn embedding(&self) -> DenseVector {
        l2_normalize(&self.raw, NORM_EPS)
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `v / max(||v||_2, eps)`. Zero vectors map to zero.
pub fn l2_normalize(v: &[f64], eps: f64) -> DenseVector {
    let norm = l2_norm(v).max(eps);
    v.iter().map(|x| x / norm).collect()
}

/// Plain Euclidean distance `||e1 - e2||_2` (not squared).
pub fn embedding_distance(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: {} vs {}",
            e1.len(),
            e2.len()
        )));
    }
    check_finite(e1, "embedding")?;
    check_finite(e2, "embedding")?;
    Ok(e1
        .iter()
        .zip(e2)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}
