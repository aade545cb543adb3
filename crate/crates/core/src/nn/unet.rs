//! Configurable miniature U-Net.
//!
//! Encoder level `i` holds two 3×3 conv + ReLU layers with
//! `base_channels · 2^i` filters followed by 2×2 max-pooling. The bottleneck
//! doubles the width once more. Each decoder level upsamples by nearest
//! neighbour, applies a 3×3 conv + ReLU to halve the width, concatenates the
//! matching encoder output and runs another double conv. A 1×1 conv and a
//! sigmoid produce per-pixel probabilities. There are no normalisation
//! layers, so samples in a batch never interact.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::{ModelWeights, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    /// Square input extent (H = W).
    pub input_size: usize,
    /// Number of pooling stages.
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            input_size: 64,
            levels: 2,
            base_channels: 12,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

/// Name and dims of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::config("levels must be at least 1"));
        }
        if self.base_channels < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.input_size == 0 || self.input_size % (1 << self.levels) != 0 {
            return Err(Error::config(format!(
                "input_size {} must be a positive multiple of 2^{}",
                self.input_size, self.levels
            )));
        }
        Ok(())
    }

    /// Feature width at encoder level `level` (the bottleneck is `levels`).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Every parameter tensor, in canonical (lexicographic) order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut conv = |name: String, out_c: usize, in_c: usize, k: usize| {
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                dims: vec![out_c],
            });
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                dims: vec![out_c, in_c, k, k],
            });
        };
        let mut in_c = self.in_channels;
        for level in 0..self.levels {
            let c = self.width(level);
            conv(format!("enc{level}.conv1"), c, in_c, 3);
            conv(format!("enc{level}.conv2"), c, c, 3);
            in_c = c;
        }
        let cb = self.width(self.levels);
        conv("bottleneck.conv1".into(), cb, in_c, 3);
        conv("bottleneck.conv2".into(), cb, cb, 3);
        for level in (0..self.levels).rev() {
            let c = self.width(level);
            conv(format!("dec{level}.up"), c, 2 * c, 3);
            conv(format!("dec{level}.conv1"), c, 2 * c, 3);
            conv(format!("dec{level}.conv2"), c, c, 3);
        }
        conv("head".into(), self.out_channels, self.width(0), 1);
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        specs
    }

    pub fn zero_weights<T: Scalar>(&self) -> ModelWeights<T> {
        let mut w = ModelWeights::new();
        for spec in self.param_specs() {
            w.insert(spec.name, Tensor::zeros(&spec.dims))
                .expect("unique parameter names");
        }
        w
    }

    /// Kaiming-uniform kernels (bound `sqrt(6 / fan_in)`) and zero biases,
    /// drawn in canonical parameter order.
    pub fn init_weights(&self, rng: &mut Rng) -> ModelWeights<f32> {
        let mut w = ModelWeights::new();
        for spec in self.param_specs() {
            let tensor = if spec.dims.len() == 1 {
                Tensor::zeros(&spec.dims)
            } else {
                let fan_in: usize = spec.dims[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                let len: usize = spec.dims.iter().product();
                let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::from_vec(&spec.dims, data).expect("param dims")
            };
            w.insert(spec.name, tensor).expect("unique parameter names");
        }
        w
    }

    /// Errors unless `weights` has exactly this configuration's layout.
    pub fn check_weights<T: Scalar>(&self, weights: &ModelWeights<T>) -> Result<()> {
        self.zero_weights::<T>()
            .check_same_layout(weights)
            .map_err(|e| Error::config(format!("weights do not match U-Net config: {e}")))
    }
}

/// Records a full forward pass on `graph`; returns the probability node.
pub fn build_forward<T: Scalar>(
    graph: &mut Graph<T>,
    config: &UNetConfig,
    weights: &ModelWeights<T>,
    batch: Tensor<T>,
) -> Result<NodeId> {
    config.validate()?;
    let (_, c, h, w) = batch.nchw()?;
    if h != config.input_size || w != config.input_size {
        return Err(Error::shape(format!(
            "batch is {h}×{w}, network expects {0}×{0}",
            config.input_size
        )));
    }
    if c != config.in_channels {
        return Err(Error::shape(format!(
            "batch has {c} channels, network expects {}",
            config.in_channels
        )));
    }
    config.check_weights(weights)?;

    let conv = |g: &mut Graph<T>, x: NodeId, name: &str, relu: bool| -> Result<NodeId> {
        let k = g.param(&format!("{name}.weight"), weights.require(&format!("{name}.weight"))?.clone());
        let b = g.param(&format!("{name}.bias"), weights.require(&format!("{name}.bias"))?.clone());
        let y = g.conv2d(x, k, b)?;
        Ok(if relu { g.relu(y) } else { y })
    };

    let mut x = graph.input(batch);
    let mut skips = Vec::with_capacity(config.levels);
    for level in 0..config.levels {
        x = conv(graph, x, &format!("enc{level}.conv1"), true)?;
        x = conv(graph, x, &format!("enc{level}.conv2"), true)?;
        skips.push(x);
        x = graph.maxpool2(x)?;
    }
    x = conv(graph, x, "bottleneck.conv1", true)?;
    x = conv(graph, x, "bottleneck.conv2", true)?;
    for level in (0..config.levels).rev() {
        let up = graph.upsample2(x)?;
        let up = conv(graph, up, &format!("dec{level}.up"), true)?;
        let merged = graph.concat(skips[level], up)?;
        x = conv(graph, merged, &format!("dec{level}.conv1"), true)?;
        x = conv(graph, x, &format!("dec{level}.conv2"), true)?;
    }
    let logits = conv(graph, x, "head", false)?;
    Ok(graph.sigmoid(logits))
}

/// Per-pixel probabilities for an NCHW batch.
pub fn unet_forward<T: Scalar>(
    config: &UNetConfig,
    weights: &ModelWeights<T>,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut graph = Graph::new();
    let out = build_forward(&mut graph, config, weights, batch.clone())?;
    let probs = graph.value(out).clone();
    probs.ensure_finite("unet forward")?;
    Ok(probs)
}
