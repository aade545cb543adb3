//! Two-network percent-density pipeline: a breast segmenter followed by a
//! dense-tissue segmenter that sees only the breast region.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::nn::adam::{AdamConfig, AdamState};
use crate::nn::train::{evaluate_loss, train_epoch, TrainOptions, TrainSample};
use crate::nn::unet::{unet_forward, UNetConfig};
use crate::phantom::PhantomSample;
use crate::preprocess::{apply_breast_mask, preprocess, resample_mask, PreprocessConfig, DEFAULT_TAG_THRESHOLD};
use crate::rng::{self, Rng};
use crate::serialize;
use crate::tensor::{ModelWeights, Tensor};

pub const DEFAULT_THRESHOLD: f32 = 0.5;
/// Images per forward pass at inference.
pub const INFER_BATCH: usize = 16;

/// Anything that maps preprocessed `size × size` images to per-pixel
/// probabilities.
pub trait Segmenter {
    fn input_size(&self) -> usize;
    fn predict(&self, inputs: &[Image]) -> Result<Vec<Vec<f32>>>;
}

/// A U-Net configuration with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: UNetConfig,
    pub weights: ModelWeights<f32>,
}

impl Network {
    pub fn new(config: UNetConfig, weights: ModelWeights<f32>) -> Result<Self> {
        config.validate()?;
        config.check_weights(&weights)?;
        Ok(Network { config, weights })
    }
}

impl Segmenter for Network {
    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn predict(&self, inputs: &[Image]) -> Result<Vec<Vec<f32>>> {
        let n = self.config.input_size;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(INFER_BATCH) {
            let mut data = Vec::with_capacity(chunk.len() * n * n);
            for img in chunk {
                if img.size() != (n, n) {
                    return Err(Error::shape(format!("network expects {n}×{n}, got {:?}", img.size())));
                }
                data.extend_from_slice(img.pixels());
            }
            let batch = Tensor::from_vec(&[chunk.len(), 1, n, n], data)?;
            let probs = unet_forward(&self.config, &self.weights, &batch)?;
            out.extend(probs.data().chunks_exact(n * n).map(<[f32]>::to_vec));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub breast_net: Network,
    pub dense_net: Network,
    pub threshold: f32,
    pub tag_threshold: f32,
}

/// Masks at the raw image's original size and the resulting density.
#[derive(Debug, Clone, PartialEq)]
pub struct PDResult {
    pub breast_mask: BinaryMask,
    pub dense_mask: BinaryMask,
    pub breast_area_px: usize,
    pub dense_area_px: usize,
    /// `None` when the predicted breast is empty.
    pub pd_percent: Option<f64>,
}

/// `100 · |dense ∩ breast| / |breast|`, or `None` for an empty breast.
pub fn percent_density(breast: &BinaryMask, dense: &BinaryMask) -> Result<Option<f64>> {
    let inside = dense.intersection_count(breast)?;
    let area = breast.count();
    Ok((area > 0).then(|| 100.0 * inside as f64 / area as f64))
}

fn check_threshold(t: f32, what: &str) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{what} {t} must lie in (0, 1)")))
    }
}

/// Runs the full pipeline over a batch of raw images with arbitrary
/// segmenters.
pub fn infer_with(
    breast_net: &dyn Segmenter,
    dense_net: &dyn Segmenter,
    threshold: f32,
    tag_threshold: f32,
    raws: &[Image],
) -> Result<Vec<PDResult>> {
    check_threshold(threshold, "threshold")?;
    let n = breast_net.input_size();
    if dense_net.input_size() != n {
        return Err(Error::config("breast and dense networks must share input_size"));
    }
    let prep = PreprocessConfig {
        tag_threshold,
        target_size: n,
    };
    let inputs: Vec<Image> = raws.iter().map(|r| preprocess(r, &prep)).collect();
    let breast_probs = breast_net.predict(&inputs)?;
    let breast_small: Vec<BinaryMask> = breast_probs
        .iter()
        .map(|p| BinaryMask::from_probabilities(n, n, p, threshold))
        .collect::<Result<_>>()?;
    let dense_inputs: Vec<Image> = inputs
        .iter()
        .zip(&breast_small)
        .map(|(img, m)| apply_breast_mask(img, m))
        .collect();
    let dense_probs = dense_net.predict(&dense_inputs)?;

    let mut out = Vec::with_capacity(raws.len());
    for ((raw, breast), probs) in raws.iter().zip(&breast_small).zip(&dense_probs) {
        let dense = BinaryMask::from_probabilities(n, n, probs, threshold)?.intersect(breast)?;
        let (w, h) = raw.original_size();
        let breast_mask = resample_mask(breast, w, h);
        let dense_mask = resample_mask(&dense, w, h).intersect(&breast_mask)?;
        let pd_percent = percent_density(&breast_mask, &dense_mask)?;
        out.push(PDResult {
            breast_area_px: breast_mask.count(),
            dense_area_px: dense_mask.count(),
            breast_mask,
            dense_mask,
            pd_percent,
        });
    }
    Ok(out)
}

impl CascadeModel {
    pub fn new(breast_net: Network, dense_net: Network, threshold: f32) -> Result<Self> {
        check_threshold(threshold, "threshold")?;
        if breast_net.config.input_size != dense_net.config.input_size {
            return Err(Error::config("breast and dense networks must share input_size"));
        }
        Ok(CascadeModel {
            breast_net,
            dense_net,
            threshold,
            tag_threshold: DEFAULT_TAG_THRESHOLD,
        })
    }

    pub fn infer(&self, raw: &Image) -> Result<PDResult> {
        Ok(self.infer_batch(std::slice::from_ref(raw))?.remove(0))
    }

    pub fn infer_batch(&self, raws: &[Image]) -> Result<Vec<PDResult>> {
        infer_with(&self.breast_net, &self.dense_net, self.threshold, self.tag_threshold, raws)
    }

    /// Writes `cascade.txt`, `breast.mflw` and `dense.mflw` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut desc = String::new();
        for (key, value) in self.descriptor() {
            writeln!(desc, "{key}={value}").expect("write to string");
        }
        fs::write(dir.join(DESCRIPTOR_FILE), desc)?;
        serialize::write_weights(dir.join(BREAST_FILE), &self.breast_net.weights)?;
        serialize::write_weights(dir.join(DENSE_FILE), &self.dense_net.weights)?;
        Ok(())
    }

    fn descriptor(&self) -> Vec<(&'static str, String)> {
        let c = self.breast_net.config;
        vec![
            ("input_size", c.input_size.to_string()),
            ("levels", c.levels.to_string()),
            ("base_channels", c.base_channels.to_string()),
            ("threshold", self.threshold.to_string()),
            ("tag_threshold", self.tag_threshold.to_string()),
        ]
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(DESCRIPTOR_FILE))?;
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("descriptor line {line:?} is not key=value")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            kv.get(key)
                .ok_or_else(|| Error::config(format!("descriptor missing {key}")))?
                .parse()
                .map_err(|_| Error::config(format!("descriptor value for {key} is invalid")))
        }
        let config = UNetConfig {
            input_size: get(&kv, "input_size")?,
            levels: get(&kv, "levels")?,
            base_channels: get(&kv, "base_channels")?,
            ..UNetConfig::default()
        };
        let breast = Network::new(config, serialize::read_weights(dir.join(BREAST_FILE))?)?;
        let dense = Network::new(config, serialize::read_weights(dir.join(DENSE_FILE))?)?;
        let mut model = CascadeModel::new(breast, dense, get(&kv, "threshold")?)?;
        model.tag_threshold = get(&kv, "tag_threshold")?;
        Ok(model)
    }
}

pub const DESCRIPTOR_FILE: &str = "cascade.txt";
pub const BREAST_FILE: &str = "breast.mflw";
pub const DENSE_FILE: &str = "dense.mflw";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Checkpoint {
    /// Weights after the last epoch.
    Final,
    /// Per network, the weights after the epoch with the lowest validation loss.
    BestValidation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub unet: UNetConfig,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: bool,
    /// Fraction of subjects held out for validation.
    pub validation_fraction: f64,
    pub checkpoint: Checkpoint,
    pub threshold: f32,
    pub tag_threshold: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            unet: UNetConfig::default(),
            adam: AdamConfig::default(),
            epochs: 30,
            batch_size: 16,
            augment: true,
            validation_fraction: 0.2,
            checkpoint: Checkpoint::BestValidation,
            threshold: DEFAULT_THRESHOLD,
            tag_threshold: DEFAULT_TAG_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0, 1)"));
        }
        check_threshold(self.threshold, "threshold")?;
        check_threshold(self.tag_threshold, "tag_threshold")
    }

    fn options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            augment: self.augment,
        }
    }
}

/// Subject-level split. Subjects are shuffled from sorted order and the
/// first `round(fraction · subjects)` go to validation, clamped so that both
/// partitions are non-empty when there are at least two subjects. Returns
/// sample indices `(train, validation)`.
pub fn split_by_subject(subject_ids: &[&str], fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut subjects: Vec<&str> = subject_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    subjects.shuffle(rng);
    let s = subjects.len();
    let mut n_val = (fraction * s as f64).round() as usize;
    if fraction > 0.0 && s >= 2 {
        n_val = n_val.clamp(1, s - 1);
    } else if s < 2 {
        n_val = 0;
    }
    let val: BTreeSet<&str> = subjects[..n_val].iter().copied().collect();
    (0..subject_ids.len()).partition(|&i| !val.contains(subject_ids[i]))
}

/// Network-ready training pairs for one labelled image. The dense input is
/// masked with the ground-truth breast, as at training time the true mask
/// is available.
pub fn training_pairs(sample: &PhantomSample, size: usize, tag_threshold: f32) -> Result<(TrainSample, TrainSample)> {
    if sample.breast_truth.size() != sample.image.size() || sample.dense_truth.size() != sample.image.size() {
        return Err(Error::shape(format!("masks of {} do not match its image", sample.subject_id)));
    }
    let input = preprocess(
        &sample.image,
        &PreprocessConfig {
            tag_threshold,
            target_size: size,
        },
    );
    let breast = resample_mask(&sample.breast_truth, size, size);
    let dense = resample_mask(&sample.dense_truth, size, size).intersect(&breast)?;
    let dense_input = apply_breast_mask(&input, &breast);
    Ok((
        TrainSample {
            input: input.pixels().to_vec(),
            target: breast.to_f32(),
        },
        TrainSample {
            input: dense_input.pixels().to_vec(),
            target: dense.to_f32(),
        },
    ))
}

/// Kaiming initialisation of both networks from the run seed.
pub fn initial_weights(config: &UNetConfig, seed: u64) -> (ModelWeights<f32>, ModelWeights<f32>) {
    (
        config.init_weights(&mut rng::stream(seed, "init/breast")),
        config.init_weights(&mut rng::stream(seed, "init/dense")),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub breast_train_loss: f64,
    pub dense_train_loss: f64,
    pub breast_val_loss: Option<f64>,
    pub dense_val_loss: Option<f64>,
}

struct NetState {
    adam: AdamState<f32>,
    rng: Rng,
    train: Vec<TrainSample>,
    val: Vec<TrainSample>,
}

/// Local training state for both networks: data partitions, Adam moments and
/// shuffling streams. Weights are passed in per epoch so that the same state
/// serves centralised training and federated rounds, where the weights are
/// replaced by the global model before every epoch.
pub struct CascadeTrainer {
    config: TrainConfig,
    breast: NetState,
    dense: NetState,
    epochs_done: usize,
}

impl CascadeTrainer {
    pub fn new(config: TrainConfig, samples: &[PhantomSample], seed: u64) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::Training("no training images".into()));
        }
        let ids: Vec<&str> = samples.iter().map(|s| s.subject_id.as_str()).collect();
        let (train_idx, val_idx) = split_by_subject(&ids, config.validation_fraction, &mut rng::stream(seed, "split"));
        let size = config.unet.input_size;
        let pairs: Vec<(TrainSample, TrainSample)> = samples
            .iter()
            .map(|s| training_pairs(s, size, config.tag_threshold))
            .collect::<Result<_>>()?;
        let pick = |idx: &[usize], dense: bool| -> Vec<TrainSample> {
            idx.iter()
                .map(|&i| if dense { pairs[i].1.clone() } else { pairs[i].0.clone() })
                .collect()
        };
        let zero = config.unet.zero_weights();
        let state = |label: &str, dense: bool| NetState {
            adam: AdamState::new(config.adam, &zero),
            rng: rng::stream(seed, label),
            train: pick(&train_idx, dense),
            val: pick(&val_idx, dense),
        };
        log::debug!("split: {} train / {} validation images", train_idx.len(), val_idx.len());
        Ok(CascadeTrainer {
            config,
            breast: state("train/breast", false),
            dense: state("train/dense", true),
            epochs_done: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Images in the training partition.
    pub fn train_images(&self) -> usize {
        self.breast.train.len()
    }

    pub fn validation_images(&self) -> usize {
        self.breast.val.len()
    }

    /// One epoch of the breast network, then one of the dense network.
    pub fn run_epoch(&mut self, breast: &mut ModelWeights<f32>, dense: &mut ModelWeights<f32>) -> Result<EpochStats> {
        let cfg = self.config;
        let opts = cfg.options();
        let run = |s: &mut NetState, w: &mut ModelWeights<f32>| -> Result<(f64, Option<f64>)> {
            let train = train_epoch(&cfg.unet, w, &mut s.adam, &s.train, &opts, &mut s.rng)?;
            let val = if s.val.is_empty() {
                None
            } else {
                Some(evaluate_loss(&cfg.unet, w, &s.val, cfg.batch_size)?)
            };
            Ok((train, val))
        };
        let (bt, bv) = run(&mut self.breast, breast)?;
        let (dt, dv) = run(&mut self.dense, dense)?;
        self.epochs_done += 1;
        let stats = EpochStats {
            epoch: self.epochs_done,
            breast_train_loss: bt,
            dense_train_loss: dt,
            breast_val_loss: bv,
            dense_val_loss: dv,
        };
        log::info!(
            "epoch {}: breast {:.4} (val {}), dense {:.4} (val {})",
            stats.epoch,
            bt,
            bv.map_or("-".into(), |v| format!("{v:.4}")),
            dt,
            dv.map_or("-".into(), |v| format!("{v:.4}")),
        );
        Ok(stats)
    }
}

/// Trains both networks from the seed's initial weights for
/// `config.epochs` epochs. `epochs = 0` returns the initial weights.
pub fn train_cascade(samples: &[PhantomSample], config: &TrainConfig, seed: u64) -> Result<(CascadeModel, Vec<EpochStats>)> {
    let mut trainer = CascadeTrainer::new(*config, samples, seed)?;
    let (mut breast, mut dense) = initial_weights(&config.unet, seed);
    let mut best = (f64::INFINITY, breast.clone(), f64::INFINITY, dense.clone());
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let stats = trainer.run_epoch(&mut breast, &mut dense)?;
        if config.checkpoint == Checkpoint::BestValidation {
            if let Some(v) = stats.breast_val_loss.filter(|&v| v < best.0) {
                best.0 = v;
                best.1 = breast.clone();
            }
            if let Some(v) = stats.dense_val_loss.filter(|&v| v < best.2) {
                best.2 = v;
                best.3 = dense.clone();
            }
        }
        history.push(stats);
    }
    if config.checkpoint == Checkpoint::BestValidation && config.epochs > 0 {
        if best.0.is_finite() {
            breast = best.1;
        }
        if best.2.is_finite() {
            dense = best.3;
        }
    }
    let mut model = CascadeModel::new(
        Network::new(config.unet, breast)?,
        Network::new(config.unet, dense)?,
        config.threshold,
    )?;
    model.tag_threshold = config.tag_threshold;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<Vec<f32>>, usize);

    impl Segmenter for Fixed {
        fn input_size(&self) -> usize {
            self.1
        }
        fn predict(&self, inputs: &[Image]) -> Result<Vec<Vec<f32>>> {
            Ok(inputs.iter().enumerate().map(|(i, _)| self.0[i % self.0.len()].clone()).collect())
        }
    }

    fn constant(v: f32, n: usize) -> Fixed {
        Fixed(vec![vec![v; n * n]], n)
    }

    fn raw(n: usize) -> Image {
        Image::new(n, n, (0..n * n).map(|i| (i % 13) as f32).collect()).unwrap()
    }

    #[test]
    fn all_ones_gives_full_density() {
        let r = infer_with(&constant(0.9, 8), &constant(0.9, 8), 0.5, 0.85, &[raw(16)]).unwrap();
        assert_eq!(r[0].pd_percent, Some(100.0));
        assert_eq!(r[0].breast_area_px, 256);
    }

    #[test]
    fn all_zero_dense_gives_zero() {
        let r = infer_with(&constant(0.9, 8), &constant(0.1, 8), 0.5, 0.85, &[raw(8)]).unwrap();
        assert_eq!(r[0].pd_percent, Some(0.0));
    }

    #[test]
    fn empty_breast_is_undefined() {
        let r = infer_with(&constant(0.2, 8), &constant(0.9, 8), 0.5, 0.85, &[raw(8)]).unwrap();
        assert_eq!(r[0].pd_percent, None);
        assert_eq!(r[0].dense_area_px, 0);
    }

    #[test]
    fn oracle_masks_reproduce_known_density() {
        // 44 × 33 breast with an 11 × 33 dense band: 1452 and 363 pixels
        let n = 64;
        let breast = BinaryMask::from_fn(n, n, |x, y| x < 44 && (10..43).contains(&y));
        let dense = BinaryMask::from_fn(n, n, |x, y| (5..16).contains(&x) && (10..43).contains(&y));
        assert_eq!((breast.count(), dense.count()), (1452, 363));
        let r = infer_with(
            &Fixed(vec![breast.to_f32()], n),
            &Fixed(vec![dense.to_f32()], n),
            0.5,
            0.85,
            &[raw(n)],
        )
        .unwrap();
        assert_eq!(r[0].pd_percent, Some(25.0));
        assert_eq!(r[0].breast_mask, breast);
    }

    #[test]
    fn percent_density_uses_intersection() {
        let breast = BinaryMask::from_fn(10, 10, |x, _| x < 4);
        let dense = BinaryMask::from_fn(10, 10, |x, y| y == 0 && x < 10 || y == 1 && x < 5);
        // 4 + 4 inside, 7 outside; breast 40
        assert_eq!(dense.intersection_count(&breast).unwrap(), 8);
        assert_eq!(percent_density(&breast, &dense).unwrap(), Some(20.0));
        assert_eq!(percent_density(&breast, &breast).unwrap(), Some(100.0));
        assert_eq!(percent_density(&BinaryMask::empty(10, 10), &dense).unwrap(), None);
    }

    #[test]
    fn dense_outside_breast_is_ignored() {
        // 10 pixels inside a 40-pixel breast, 5 outside
        let breast = BinaryMask::from_fn(10, 10, |x, _| x < 4);
        let dense = BinaryMask::from_fn(10, 10, |x, y| (y < 2 && x < 4 || y == 2 && x < 2) || (y == 9 && x >= 5));
        assert_eq!(dense.intersection_count(&breast).unwrap(), 10);
        assert_eq!(dense.count() - 10, 5);
        assert_eq!(percent_density(&breast, &dense).unwrap(), Some(25.0));
    }

    #[test]
    fn subject_split_keeps_subjects_whole() {
        let ids = ["s1", "s1", "s2", "s2", "s2"];
        let (train, val) = split_by_subject(&ids, 0.2, &mut rng::stream(4, "split"));
        assert_eq!(train.len() + val.len(), 5);
        assert!(!train.is_empty() && !val.is_empty());
        for &t in &train {
            assert!(val.iter().all(|&v| ids[v] != ids[t]));
        }
        let (train, val) = split_by_subject(&["only"; 3], 0.2, &mut rng::stream(4, "split"));
        assert_eq!((train.len(), val.len()), (3, 0));
    }

    #[test]
    fn bad_thresholds_rejected() {
        assert!(infer_with(&constant(0.9, 8), &constant(0.9, 8), 1.0, 0.85, &[raw(8)]).is_err());
        let cfg = UNetConfig {
            input_size: 8,
            levels: 1,
            base_channels: 2,
            ..UNetConfig::default()
        };
        let net = Network::new(cfg, cfg.zero_weights()).unwrap();
        assert!(CascadeModel::new(net.clone(), net, 0.0).is_err());
    }
}
