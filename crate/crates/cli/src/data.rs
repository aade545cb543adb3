//! Dataset generation, loading and optional label corruption.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fedpd::image::BinaryMask;
use fedpd::phantom::{self, ManifestEntry, PhantomSample};
use fedpd::rng;

use crate::config::ExperimentConfig;

/// Per-institution sample counts written by [`generate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateSummary {
    pub institutions: Vec<(String, usize, usize)>,
}

fn is_non_empty_dir(path: &Path) -> Result<bool> {
    match fs::read_dir(path) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

/// Writes training and held-out cohorts for every institution under
/// `<out>/data/{train,test}` and the resolved config to `<out>/config.txt`.
/// Refuses a non-empty `out` unless `force`, which replaces `<out>/data`.
pub fn generate(config: &ExperimentConfig, force: bool) -> Result<GenerateSummary> {
    let out = &config.out;
    if is_non_empty_dir(out)? {
        if !force {
            bail!("output directory {} is not empty; pass --force to overwrite", out.display());
        }
        let data = out.join("data");
        if data.exists() {
            fs::remove_dir_all(&data).with_context(|| format!("removing {}", data.display()))?;
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut train = Vec::new();
    let mut test = Vec::new();
    for inst in &config.institutions {
        log::info!("generating {}", inst.name());
        train.push(phantom::generate_dataset(&inst.profile, config.seed)?);
        test.push(phantom::generate_dataset(&inst.test_profile(), config.seed)?);
    }
    let pack = |sets: &[Vec<PhantomSample>]| -> Vec<(String, Vec<PhantomSample>)> {
        config
            .institutions
            .iter()
            .zip(sets)
            .map(|(i, s)| (i.name().to_string(), s.clone()))
            .collect()
    };
    for (dir, sets) in [(config.train_dir(), pack(&train)), (config.test_dir(), pack(&test))] {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let refs: Vec<(&str, &[PhantomSample])> = sets.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
        phantom::write_dataset(&dir, &refs).with_context(|| format!("writing {}", dir.display()))?;
    }
    fs::write(out.join("config.txt"), config.to_text())?;
    Ok(GenerateSummary {
        institutions: config
            .institutions
            .iter()
            .zip(train.iter().zip(&test))
            .map(|(i, (a, b))| (i.name().to_string(), a.len(), b.len()))
            .collect(),
    })
}

pub fn manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    phantom::read_manifest(dir).with_context(|| format!("dataset {} is missing or unreadable; run generate first", dir.display()))
}

/// Loads one split and checks that every configured institution is present.
pub fn load_split(config: &ExperimentConfig, dir: &Path) -> Result<BTreeMap<String, Vec<PhantomSample>>> {
    let sets = phantom::read_dataset(dir).with_context(|| format!("dataset {} is missing or unreadable; run generate first", dir.display()))?;
    for inst in &config.institutions {
        match sets.get(inst.name()) {
            Some(s) if !s.is_empty() => {}
            _ => bail!("dataset {} has no images for {}", dir.display(), inst.name()),
        }
    }
    Ok(sets)
}

/// Training samples of one institution with label noise applied.
pub fn training_samples(config: &ExperimentConfig, sets: &BTreeMap<String, Vec<PhantomSample>>, institution: &str) -> Result<Vec<PhantomSample>> {
    let samples = sets
        .get(institution)
        .with_context(|| format!("no training data for {institution}"))?;
    Ok(samples
        .iter()
        .map(|s| corrupt_label(s, config.label_noise, config.seed))
        .collect())
}

fn unit_draw(seed: u64, label: &str) -> (f64, bool) {
    let bits = rng::derive_seed(seed, label);
    ((bits >> 11) as f64 / (1u64 << 53) as f64, bits & 1 == 1)
}

/// With probability `p`, grows or shrinks the dense label by one pixel
/// (4-neighbourhood), clipped to the breast. The decision depends only on
/// the seed and the sample's identity.
pub fn corrupt_label(sample: &PhantomSample, p: f64, seed: u64) -> PhantomSample {
    let mut out = sample.clone();
    if p <= 0.0 {
        return out;
    }
    let (u, grow) = unit_draw(seed, &format!("label-noise/{}/{}", sample.subject_id, sample.image_index));
    if u >= p {
        return out;
    }
    let m = &sample.dense_truth;
    let (w, h) = m.size();
    let neighbours = |x: usize, y: usize| {
        [
            (x > 0).then(|| m.get(x - 1, y)),
            (x + 1 < w).then(|| m.get(x + 1, y)),
            (y > 0).then(|| m.get(x, y - 1)),
            (y + 1 < h).then(|| m.get(x, y + 1)),
        ]
    };
    let changed = BinaryMask::from_fn(w, h, |x, y| {
        let n = neighbours(x, y);
        if grow {
            m.get(x, y) || n.iter().any(|v| *v == Some(true))
        } else {
            m.get(x, y) && n.iter().all(|v| *v != Some(false))
        }
    });
    out.dense_truth = changed.intersect(&sample.breast_truth).expect("same dims");
    out
}
