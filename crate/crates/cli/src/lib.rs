//! Experiment harness: phantom generation, the four training regimes,
//! held-out evaluation with comparison reports, and offline replay of
//! recorded federated sessions.

pub mod config;
pub mod data;
pub mod report;
pub mod train;

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fedpd::cascade::CascadeModel;
use fedpd::federation::{read_session, replay, ReplayOutcome};

pub use config::{ExperimentConfig, Institution, Regime};
pub use report::ComparisonReport;

/// Outcome of replaying a recorded federated session.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayCheck {
    pub outcome: ReplayOutcome,
    /// Whether the persisted federated model matched the replayed weights
    /// bit for bit; `None` when no model was found next to the session.
    pub matches_saved_model: Option<bool>,
}

/// Recomputes every aggregation in `session` and, when a federated model is
/// stored in the same directory, compares it with the replayed weights.
pub fn replay_session(session: &Path) -> Result<ReplayCheck> {
    let bytes = fs::read(session).with_context(|| format!("reading {}", session.display()))?;
    let outcome = replay(&read_session(&bytes)?)?;
    let dir = session.parent().unwrap_or(Path::new("."));
    let matches_saved_model = if dir.join(fedpd::cascade::DESCRIPTOR_FILE).exists() {
        let model = CascadeModel::load(dir)?;
        let saved = [&model.breast_net.weights, &model.dense_net.weights];
        if outcome.models.len() != saved.len() {
            bail!("session carries {} models, the saved cascade has 2", outcome.models.len());
        }
        Some(saved.iter().zip(&outcome.models).all(|(a, b)| same_bits(a, b)))
    } else {
        None
    };
    Ok(ReplayCheck {
        outcome,
        matches_saved_model,
    })
}

/// Bitwise equality of two weight sets, names and shapes included.
pub fn same_bits(a: &fedpd::ModelWeights<f32>, b: &fedpd::ModelWeights<f32>) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((n1, t1), (n2, t2))| {
            n1 == n2
                && t1.dims() == t2.dims()
                && t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}
