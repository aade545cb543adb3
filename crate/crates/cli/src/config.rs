//! Experiment configuration as flat `key=value` text.
//!
//! Global keys set the seed, regime, output root, U-Net shape and training
//! hyperparameters. Institution keys are prefixed by the institution name,
//! e.g. `inst-b.noise_sigma=0.02`; ranges are written `lo,hi`. The names
//! `inst-a` and `inst-b` start from the built-in CC-like and MLO-like
//! profiles, any other name from the CC-like one.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use fedpd::cascade::{Checkpoint, TrainConfig};
use fedpd::phantom::{InstitutionProfile, ViewStyle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    /// Trained on the first institution only.
    CentralizedA,
    /// Trained on the second institution only.
    CentralizedB,
    CentralizedPooled,
    Federated,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::CentralizedA,
        Regime::CentralizedB,
        Regime::CentralizedPooled,
        Regime::Federated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::CentralizedA => "centralized-A",
            Regime::CentralizedB => "centralized-B",
            Regime::CentralizedPooled => "centralized-pooled",
            Regime::Federated => "federated",
        }
    }

    /// Indices into the institution list whose training data the regime uses.
    pub fn institutions(self, n_institutions: usize) -> Result<Vec<usize>> {
        match self {
            Regime::CentralizedA => Ok(vec![0]),
            Regime::CentralizedB if n_institutions < 2 => bail!("centralized-B needs a second institution"),
            Regime::CentralizedB => Ok(vec![1]),
            Regime::CentralizedPooled | Regime::Federated => Ok((0..n_institutions).collect()),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| anyhow!("unknown regime {s:?}; expected one of centralized-A, centralized-B, centralized-pooled, federated"))
    }
}

/// One institution: its training cohort profile and held-out cohort size.
/// Test subjects follow the training subjects, so ids never overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct Institution {
    pub profile: InstitutionProfile,
    pub test_subjects: usize,
}

impl Institution {
    pub fn named(name: &str) -> Self {
        match name {
            "inst-a" => Institution {
                profile: InstitutionProfile::default_a(),
                test_subjects: 10,
            },
            "inst-b" => Institution {
                profile: InstitutionProfile::default_b(),
                test_subjects: 25,
            },
            _ => Institution {
                profile: InstitutionProfile {
                    name: name.to_string(),
                    ..InstitutionProfile::default_a()
                },
                test_subjects: 10,
            },
        }
    }

    pub fn name(&self) -> &str {
        &self.profile.name
    }

    pub fn test_profile(&self) -> InstitutionProfile {
        InstitutionProfile {
            first_subject: self.profile.first_subject + self.profile.n_subjects,
            n_subjects: self.test_subjects,
            ..self.profile.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub regime: Regime,
    pub out: PathBuf,
    pub institutions: Vec<Institution>,
    /// U-Net shape and hyperparameters; `epochs` doubles as the number of
    /// federated rounds.
    pub train: TrainConfig,
    pub local_epochs: usize,
    /// Probability that a training image's dense label is grown or shrunk
    /// by one pixel.
    pub label_noise: f64,
    /// Aggregator listen address for federated runs.
    pub listen: String,
    pub timeout_secs: u64,
    /// Regimes `evaluate` reports on.
    pub evaluate: Vec<Regime>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            regime: Regime::CentralizedPooled,
            out: PathBuf::from("fedpd-out"),
            institutions: vec![Institution::named("inst-a"), Institution::named("inst-b")],
            train: TrainConfig::default(),
            local_epochs: 1,
            label_noise: 0.0,
            listen: "127.0.0.1:0".into(),
            timeout_secs: 600,
            evaluate: Regime::ALL.to_vec(),
        }
    }
}

const GLOBAL_KEYS: &[&str] = &[
    "seed",
    "regime",
    "out",
    "institutions",
    "input_size",
    "levels",
    "base_channels",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "epochs",
    "local_epochs",
    "augment",
    "validation_fraction",
    "checkpoint",
    "threshold",
    "tag_threshold",
    "label_noise",
    "listen",
    "timeout_secs",
    "evaluate",
];

const INSTITUTION_KEYS: &[&str] = &[
    "view_style",
    "image_size",
    "intensity_gain",
    "noise_sigma",
    "response_gamma",
    "breast_depth",
    "breast_half_height",
    "blob_count",
    "blob_sigma",
    "tag_probability",
    "n_subjects",
    "images_per_subject",
    "first_subject",
    "test_subjects",
];

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow!("invalid value {v:?} for {key}"))
}

fn parse_pair<T: FromStr>(key: &str, v: &str) -> Result<(T, T)> {
    let (lo, hi) = v.split_once(',').ok_or_else(|| anyhow!("{key} expects lo,hi, got {v:?}"))?;
    Ok((parse_value(key, lo.trim())?, parse_value(key, hi.trim())?))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("invalid boolean {v:?} for {key}"),
    }
}

fn checkpoint_str(c: Checkpoint) -> &'static str {
    match c {
        Checkpoint::Final => "final",
        Checkpoint::BestValidation => "best-validation",
    }
}

fn apply_institution_key(inst: &mut Institution, field: &str, key: &str, v: &str) -> Result<()> {
    let p = &mut inst.profile;
    match field {
        "view_style" => p.view_style = ViewStyle::parse(v).ok_or_else(|| anyhow!("{key}: expected cc or mlo"))?,
        "image_size" => p.image_size = parse_value(key, v)?,
        "intensity_gain" => p.intensity_gain = parse_value(key, v)?,
        "noise_sigma" => p.noise_sigma = parse_value(key, v)?,
        "response_gamma" => p.response_gamma = parse_value(key, v)?,
        "breast_depth" => p.breast_depth = parse_pair(key, v)?,
        "breast_half_height" => p.breast_half_height = parse_pair(key, v)?,
        "blob_count" => p.blob_count = parse_pair(key, v)?,
        "blob_sigma" => p.blob_sigma = parse_pair(key, v)?,
        "tag_probability" => p.tag_probability = parse_value(key, v)?,
        "n_subjects" => p.n_subjects = parse_value(key, v)?,
        "images_per_subject" => p.images_per_subject = parse_value(key, v)?,
        "first_subject" => p.first_subject = parse_value(key, v)?,
        "test_subjects" => inst.test_subjects = parse_value(key, v)?,
        _ => bail!("unknown institution key {key:?}"),
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value, got {line:?}", i + 1))?;
            let k = k.trim().to_string();
            if let Some((prev, _)) = kv.insert(k.clone(), (i + 1, v.trim().to_string())) {
                bail!("line {}: {k} already set on line {prev}", i + 1);
            }
        }

        let mut c = ExperimentConfig::default();
        if let Some((_, v)) = kv.get("institutions") {
            let names: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            c.institutions = names.iter().map(|n| Institution::named(n)).collect();
        }
        for (key, (line, v)) in &kv {
            let ctx = || format!("config line {line}");
            if let Some((prefix, field)) = key.rsplit_once('.') {
                if !INSTITUTION_KEYS.contains(&field) {
                    bail!("{}: unknown institution key {key:?}", ctx());
                }
                let inst = c
                    .institutions
                    .iter_mut()
                    .find(|i| i.name() == prefix)
                    .ok_or_else(|| anyhow!("{}: {prefix:?} is not listed in institutions", ctx()))?;
                apply_institution_key(inst, field, key, v).with_context(ctx)?;
                continue;
            }
            let r: Result<()> = (|| {
                let t = &mut c.train;
                match key.as_str() {
                    "seed" => c.seed = parse_value(key, v)?,
                    "regime" => c.regime = v.parse()?,
                    "out" => c.out = PathBuf::from(v),
                    "institutions" => {}
                    "input_size" => t.unet.input_size = parse_value(key, v)?,
                    "levels" => t.unet.levels = parse_value(key, v)?,
                    "base_channels" => t.unet.base_channels = parse_value(key, v)?,
                    "lr" => t.adam.learning_rate = parse_value(key, v)?,
                    "weight_decay" => t.adam.weight_decay = parse_value(key, v)?,
                    "beta1" => t.adam.beta1 = parse_value(key, v)?,
                    "beta2" => t.adam.beta2 = parse_value(key, v)?,
                    "eps" => t.adam.eps = parse_value(key, v)?,
                    "batch_size" => t.batch_size = parse_value(key, v)?,
                    "epochs" => t.epochs = parse_value(key, v)?,
                    "local_epochs" => c.local_epochs = parse_value(key, v)?,
                    "augment" => t.augment = parse_bool(key, v)?,
                    "validation_fraction" => t.validation_fraction = parse_value(key, v)?,
                    "checkpoint" => {
                        t.checkpoint = match v.as_str() {
                            "final" => Checkpoint::Final,
                            "best-validation" => Checkpoint::BestValidation,
                            _ => bail!("checkpoint must be final or best-validation"),
                        }
                    }
                    "threshold" => t.threshold = parse_value(key, v)?,
                    "tag_threshold" => t.tag_threshold = parse_value(key, v)?,
                    "label_noise" => c.label_noise = parse_value(key, v)?,
                    "listen" => c.listen = v.clone(),
                    "timeout_secs" => c.timeout_secs = parse_value(key, v)?,
                    "evaluate" => {
                        c.evaluate = v
                            .split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(str::parse)
                            .collect::<Result<_>>()?
                    }
                    _ => {
                        debug_assert!(!GLOBAL_KEYS.contains(&key.as_str()));
                        bail!("unknown key {key:?}")
                    }
                }
                Ok(())
            })();
            r.with_context(ctx)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.institutions.is_empty() {
            bail!("at least one institution is required");
        }
        for (i, inst) in self.institutions.iter().enumerate() {
            if self.institutions[..i].iter().any(|o| o.name() == inst.name()) {
                bail!("institution {} is listed twice", inst.name());
            }
            inst.profile.validate()?;
            if inst.test_subjects == 0 {
                bail!("{}: test_subjects must be positive", inst.name());
            }
        }
        self.train.validate()?;
        if self.local_epochs == 0 {
            bail!("local_epochs must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            bail!("label_noise must lie in [0, 1]");
        }
        if self.train.epochs > u32::MAX as usize {
            bail!("epochs out of range");
        }
        if self.evaluate.is_empty() {
            bail!("evaluate needs at least one regime");
        }
        Ok(())
    }

    /// Every setting, in a form [`ExperimentConfig::parse`] reads back to an
    /// equal value.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k}={v}").expect("write to string");
        put("seed", self.seed.to_string());
        put("regime", self.regime.to_string());
        put("out", self.out.display().to_string());
        put(
            "institutions",
            self.institutions.iter().map(|i| i.name()).collect::<Vec<_>>().join(","),
        );
        put("input_size", t.unet.input_size.to_string());
        put("levels", t.unet.levels.to_string());
        put("base_channels", t.unet.base_channels.to_string());
        put("lr", t.adam.learning_rate.to_string());
        put("weight_decay", t.adam.weight_decay.to_string());
        put("beta1", t.adam.beta1.to_string());
        put("beta2", t.adam.beta2.to_string());
        put("eps", t.adam.eps.to_string());
        put("batch_size", t.batch_size.to_string());
        put("epochs", t.epochs.to_string());
        put("local_epochs", self.local_epochs.to_string());
        put("augment", t.augment.to_string());
        put("validation_fraction", t.validation_fraction.to_string());
        put("checkpoint", checkpoint_str(t.checkpoint).into());
        put("threshold", t.threshold.to_string());
        put("tag_threshold", t.tag_threshold.to_string());
        put("label_noise", self.label_noise.to_string());
        put("listen", self.listen.clone());
        put("timeout_secs", self.timeout_secs.to_string());
        put(
            "evaluate",
            self.evaluate.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(","),
        );
        for inst in &self.institutions {
            let p = &inst.profile;
            let n = inst.name();
            put(&format!("{n}.view_style"), p.view_style.as_str().into());
            put(&format!("{n}.image_size"), p.image_size.to_string());
            put(&format!("{n}.intensity_gain"), p.intensity_gain.to_string());
            put(&format!("{n}.noise_sigma"), p.noise_sigma.to_string());
            put(&format!("{n}.response_gamma"), p.response_gamma.to_string());
            put(&format!("{n}.breast_depth"), format!("{},{}", p.breast_depth.0, p.breast_depth.1));
            put(
                &format!("{n}.breast_half_height"),
                format!("{},{}", p.breast_half_height.0, p.breast_half_height.1),
            );
            put(&format!("{n}.blob_count"), format!("{},{}", p.blob_count.0, p.blob_count.1));
            put(&format!("{n}.blob_sigma"), format!("{},{}", p.blob_sigma.0, p.blob_sigma.1));
            put(&format!("{n}.tag_probability"), p.tag_probability.to_string());
            put(&format!("{n}.n_subjects"), p.n_subjects.to_string());
            put(&format!("{n}.images_per_subject"), p.images_per_subject.to_string());
            put(&format!("{n}.first_subject"), p.first_subject.to_string());
            put(&format!("{n}.test_subjects"), inst.test_subjects.to_string());
        }
        s
    }

    pub fn institution(&self, name: &str) -> Result<&Institution> {
        self.institutions
            .iter()
            .find(|i| i.name() == name)
            .ok_or_else(|| anyhow!("no institution named {name:?} in the config"))
    }

    pub fn train_dir(&self) -> PathBuf {
        self.out.join("data").join("train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.out.join("data").join("test")
    }

    pub fn model_dir(&self, regime: Regime) -> PathBuf {
        self.out.join("models").join(regime.as_str())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out.join("reports")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(ExperimentConfig::parse("").unwrap(), c);
    }

    #[test]
    fn documented_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.train.adam.learning_rate, 1e-4);
        assert_eq!(c.train.adam.weight_decay, 1e-4);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.epochs, 30);
        assert_eq!(c.local_epochs, 1);
        for inst in &c.institutions {
            assert_eq!(inst.profile.image_count(), 200);
            assert_eq!(inst.test_profile().image_count(), 50);
        }
    }

    #[test]
    fn overrides_apply() {
        let c = ExperimentConfig::parse(
            "# comment\nseed = 9\nregime=federated\ninstitutions=inst-b,site-x\n\
             site-x.view_style=mlo\nsite-x.blob_count=2,3\ninst-b.test_subjects=4\nlr=0.001\ncheckpoint=best-validation\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.regime, Regime::Federated);
        assert_eq!(c.institutions[0].test_subjects, 4);
        assert_eq!(c.institutions[1].profile.view_style, ViewStyle::Mlo);
        assert_eq!(c.institutions[1].profile.blob_count, (2, 3));
        assert_eq!(c.train.adam.learning_rate, 0.001);
        assert_eq!(c.train.checkpoint, Checkpoint::BestValidation);
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "seed",
            "seed=x",
            "seed=1\nseed=2",
            "colour=red",
            "inst-c.noise_sigma=0.1",
            "inst-a.shade=3",
            "regime=solo",
            "institutions=",
            "institutions=inst-a,inst-a",
            "label_noise=2",
            "inst-a.breast_depth=0.5",
        ] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text:?} accepted");
        }
    }

    #[test]
    fn regime_names() {
        for r in Regime::ALL {
            assert_eq!(r.as_str().parse::<Regime>().unwrap(), r);
        }
        assert_eq!("Centralized-a".parse::<Regime>().unwrap(), Regime::CentralizedA);
        assert!(Regime::CentralizedB.institutions(1).is_err());
        assert_eq!(Regime::Federated.institutions(2).unwrap(), vec![0, 1]);
    }
}
