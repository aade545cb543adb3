//! Mini-batch epoch loop with flip augmentation.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::adam::AdamState;
use crate::nn::graph::Graph;
use crate::nn::loss::bce_loss;
use crate::nn::unet::{build_forward, UNetConfig};
use crate::rng::Rng;
use crate::tensor::{ModelWeights, Tensor};

/// One single-channel training pair, both `size × size` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: Vec<f32>,
    /// Per-pixel target in {0, 1}.
    pub target: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Independent horizontal and vertical flips, each with probability 0.5.
    pub augment: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 16,
            augment: true,
        }
    }
}

pub fn flip_horizontal(buf: &mut [f32], size: usize) {
    for row in buf.chunks_exact_mut(size) {
        row.reverse();
    }
}

pub fn flip_vertical(buf: &mut [f32], size: usize) {
    for y in 0..size / 2 {
        let (top, bottom) = buf.split_at_mut((size - 1 - y) * size);
        top[y * size..(y + 1) * size].swap_with_slice(&mut bottom[..size]);
    }
}

fn check_samples(config: &UNetConfig, samples: &[TrainSample]) -> Result<usize> {
    if samples.is_empty() {
        return Err(Error::Training("empty training partition".into()));
    }
    let px = config.input_size * config.input_size;
    if config.in_channels != 1 || config.out_channels != 1 {
        return Err(Error::config("training loop supports single-channel networks"));
    }
    for s in samples {
        if s.input.len() != px || s.target.len() != px {
            return Err(Error::shape(format!(
                "sample has {}/{} pixels, network expects {px}",
                s.input.len(),
                s.target.len()
            )));
        }
    }
    Ok(px)
}

fn stack(size: usize, rows: Vec<Vec<f32>>) -> Result<Tensor<f32>> {
    let n = rows.len();
    Tensor::from_vec(&[n, 1, size, size], rows.concat())
}

/// Runs one pass over `samples` in a freshly shuffled order, one Adam step
/// per mini-batch (the final short batch is kept). Returns the
/// sample-weighted mean training loss.
pub fn train_epoch(
    config: &UNetConfig,
    weights: &mut ModelWeights<f32>,
    adam: &mut AdamState<f32>,
    samples: &[TrainSample],
    options: &TrainOptions,
    rng: &mut Rng,
) -> Result<f64> {
    check_samples(config, samples)?;
    if options.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let size = config.input_size;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);

    let mut total = 0.0;
    for chunk in order.chunks(options.batch_size) {
        let mut inputs = Vec::with_capacity(chunk.len());
        let mut targets = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let mut x = samples[i].input.clone();
            let mut t = samples[i].target.clone();
            if options.augment {
                if rng.random_bool(0.5) {
                    flip_horizontal(&mut x, size);
                    flip_horizontal(&mut t, size);
                }
                if rng.random_bool(0.5) {
                    flip_vertical(&mut x, size);
                    flip_vertical(&mut t, size);
                }
            }
            inputs.push(x);
            targets.push(t);
        }
        let batch = stack(size, inputs)?;
        let target = stack(size, targets)?;

        let mut graph = Graph::new();
        let out = build_forward(&mut graph, config, weights, batch)?;
        let (loss, seed) = bce_loss(graph.value(out), &target)?;
        let grads = graph.backward(out, seed)?;
        adam.step(weights, &grads)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Sample-weighted mean loss without augmentation or updates.
pub fn evaluate_loss(
    config: &UNetConfig,
    weights: &ModelWeights<f32>,
    samples: &[TrainSample],
    batch_size: usize,
) -> Result<f64> {
    check_samples(config, samples)?;
    let size = config.input_size;
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = stack(size, chunk.iter().map(|s| s.input.clone()).collect())?;
        let target = stack(size, chunk.iter().map(|s| s.target.clone()).collect())?;
        let mut graph = Graph::new();
        let out = build_forward(&mut graph, config, weights, batch)?;
        let (loss, _) = bce_loss(graph.value(out), &target)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}
