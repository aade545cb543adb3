//! Training regimes. Centralised regimes train in-process; the federated
//! regime runs one aggregator and one collaborator per institution as child
//! processes talking over TCP.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use fedpd::cascade::{self, CascadeModel, CascadeTrainer, Checkpoint, EpochStats, Network};
use fedpd::federation::{run_collaborator, Aggregator, AggregatorConfig, CollaboratorConfig};
use fedpd::phantom::PhantomSample;

use crate::config::{ExperimentConfig, Regime};
use crate::data;

pub const SESSION_FILE: &str = "session.mfls";
pub const COLLABORATORS_FILE: &str = "collaborators.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "config.txt";
/// First line an aggregator child prints once it is accepting connections.
const LISTENING: &str = "listening ";

fn pooled_samples(config: &ExperimentConfig, regime: Regime) -> Result<Vec<PhantomSample>> {
    let sets = data::load_split(config, &config.train_dir())?;
    let mut out = Vec::new();
    for i in regime.institutions(config.institutions.len())? {
        out.extend(data::training_samples(config, &sets, config.institutions[i].name())?);
    }
    Ok(out)
}

fn write_history(dir: &Path, history: &[EpochStats]) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| v.to_string());
    let mut s = String::from("epoch,breast_train_loss,dense_train_loss,breast_val_loss,dense_val_loss\n");
    for h in history {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            h.epoch,
            h.breast_train_loss,
            h.dense_train_loss,
            opt(h.breast_val_loss),
            opt(h.dense_val_loss)
        ));
    }
    fs::write(dir.join(HISTORY_FILE), s)?;
    Ok(())
}

fn prepare_model_dir(config: &ExperimentConfig, regime: Regime) -> Result<PathBuf> {
    let dir = config.model_dir(regime);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut used = config.clone();
    used.regime = regime;
    fs::write(dir.join(CONFIG_FILE), used.to_text())?;
    Ok(dir)
}

/// Trains `config.regime` and persists the model under
/// `<out>/models/<regime>`. `exe` is the harness binary, spawned for the
/// federated regime's child processes.
pub fn train(config: &ExperimentConfig, exe: &Path) -> Result<PathBuf> {
    match config.regime {
        Regime::Federated => train_federated(config, exe),
        regime => train_centralized(config, regime),
    }
}

pub fn train_centralized(config: &ExperimentConfig, regime: Regime) -> Result<PathBuf> {
    let samples = pooled_samples(config, regime)?;
    let dir = prepare_model_dir(config, regime)?;
    log::info!("{regime}: training on {} images", samples.len());
    let (model, history) = cascade::train_cascade(&samples, &config.train, config.seed)?;
    model.save(&dir)?;
    write_history(&dir, &history)?;
    Ok(dir)
}

struct Children(Vec<(String, Child)>);

impl Children {
    fn kill_all(&mut self) {
        for (_, c) in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }

    /// Waits for every child; reports each one that failed.
    fn wait_all(mut self) -> Result<()> {
        let mut failures = Vec::new();
        for (name, c) in &mut self.0 {
            let status = c.wait().with_context(|| format!("waiting for {name}"))?;
            if !status.success() {
                failures.push(format!("{name} exited with {status}"));
            }
        }
        self.0.clear();
        if failures.is_empty() {
            Ok(())
        } else {
            bail!("federated run failed: {}", failures.join("; "))
        }
    }
}

impl Drop for Children {
    fn drop(&mut self) {
        self.kill_all();
    }
}

pub fn train_federated(config: &ExperimentConfig, exe: &Path) -> Result<PathBuf> {
    // fail here rather than in a child when the data is missing
    data::load_split(config, &config.train_dir())?;
    let dir = prepare_model_dir(config, Regime::Federated)?;
    if config.train.checkpoint == Checkpoint::BestValidation {
        log::info!("federated run keeps the final round; the aggregator has no validation data");
    }
    let child_config = dir.join(CONFIG_FILE);

    let mut aggregator = Command::new(exe)
        .arg("aggregator")
        .arg("--config")
        .arg(&child_config)
        .arg("--model-dir")
        .arg(&dir)
        .stdout(Stdio::piped())
        .spawn()
        .with_context(|| format!("spawning aggregator {}", exe.display()))?;
    let stdout = aggregator.stdout.take().expect("piped stdout");
    let mut children = Children(vec![("aggregator".into(), aggregator)]);

    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line)?;
    let addr = line
        .trim()
        .strip_prefix(LISTENING)
        .ok_or_else(|| anyhow!("aggregator did not start (is {} in use?)", config.listen))?
        .to_string();
    log::info!("aggregator listening on {addr}");

    for inst in &config.institutions {
        let child = Command::new(exe)
            .arg("collaborator")
            .arg("--config")
            .arg(&child_config)
            .arg("--institution")
            .arg(inst.name())
            .arg("--connect")
            .arg(&addr)
            .spawn()
            .with_context(|| format!("spawning collaborator {}", inst.name()))?;
        children.0.push((format!("collaborator {}", inst.name()), child));
    }
    children.wait_all()?;
    Ok(dir)
}

/// Aggregator child: binds `config.listen`, announces the bound address on
/// `announce`, runs every round and saves the final model into `model_dir`
/// along with the session recording.
pub fn run_aggregator(config: &ExperimentConfig, model_dir: &Path, announce: &mut dyn Write) -> Result<()> {
    let agg_config = AggregatorConfig {
        expected_collaborators: config.institutions.len(),
        rounds: config.train.epochs as u32,
        timeout: Duration::from_secs(config.timeout_secs),
        record: Some(model_dir.join(SESSION_FILE)),
    };
    let aggregator = Aggregator::bind(config.listen.as_str(), agg_config).with_context(|| format!("binding {}", config.listen))?;
    writeln!(announce, "{LISTENING}{}", aggregator.local_addr()?)?;
    announce.flush()?;

    let (breast, dense) = cascade::initial_weights(&config.train.unet, config.seed);
    let outcome = aggregator.run(vec![breast, dense])?;
    let [breast, dense]: [_; 2] = outcome
        .models
        .try_into()
        .map_err(|_| anyhow!("federation returned the wrong number of models"))?;
    let unet = config.train.unet;
    let mut model = CascadeModel::new(Network::new(unet, breast)?, Network::new(unet, dense)?, config.train.threshold)?;
    model.tag_threshold = config.train.tag_threshold;
    model.save(model_dir)?;
    let mut s = String::from("# id n_i\n");
    for (id, n) in &outcome.collaborators {
        s.push_str(&format!("{id} {n}\n"));
    }
    fs::write(model_dir.join(COLLABORATORS_FILE), s)?;
    log::info!("federation finished after {} rounds", outcome.rounds);
    Ok(())
}

/// Collaborator child for one institution.
pub fn run_institution(config: &ExperimentConfig, institution: &str, connect: &str) -> Result<()> {
    config.institution(institution)?;
    let sets = data::load_split(config, &config.train_dir())?;
    let samples = data::training_samples(config, &sets, institution)?;
    let mut trainer = CascadeTrainer::new(config.train, &samples, config.seed)?;
    let mut c = CollaboratorConfig::new(institution);
    c.local_epochs = config.local_epochs;
    run_collaborator(connect, &c, &mut trainer)?;
    Ok(())
}
