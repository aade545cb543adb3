use super::ProtocolError;
use crate::error::Result;
use crate::tensor::{ModelWeights, Tensor};

/// One collaborator's weights and its training-image count.
#[derive(Debug, Clone, Copy)]
pub struct Contribution<'a> {
    pub id: &'a str,
    pub sample_count: u64,
    pub weights: &'a ModelWeights<f32>,
}

/// Count-weighted mean `Σ nᵢ·wᵢ / Σ nᵢ` per element. Terms are accumulated
/// in `f64` in ascending id order and the result is rounded once to `f32`,
/// so the output does not depend on the order of `updates`.
pub fn aggregate(updates: &[Contribution<'_>]) -> Result<ModelWeights<f32>> {
    let mut sorted: Vec<&Contribution<'_>> = updates.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(b.id));
    let Some(first) = sorted.first() else {
        return Err(ProtocolError::Unexpected("aggregation with no updates".into()).into());
    };
    for pair in sorted.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(ProtocolError::DuplicateId(pair[0].id.to_string()).into());
        }
    }
    for c in &sorted {
        if c.sample_count == 0 {
            return Err(ProtocolError::Malformed(format!("{} reports zero samples", c.id)).into());
        }
        first
            .weights
            .check_same_layout(c.weights)
            .map_err(|e| ProtocolError::ShapeMismatch(format!("{}: {e}", c.id)))?;
    }
    let total: f64 = sorted.iter().map(|c| c.sample_count as f64).sum();

    let mut out = ModelWeights::new();
    for (name, t0) in first.weights.iter() {
        let mut acc = vec![0f64; t0.len()];
        for c in &sorted {
            let n = c.sample_count as f64;
            let w = c.weights.get(name).expect("layout checked").data();
            for (a, &v) in acc.iter_mut().zip(w) {
                *a += n * v as f64;
            }
        }
        let data = acc.iter().map(|&a| (a / total) as f32).collect();
        out.insert(name, Tensor::from_vec(t0.dims(), data)?)?;
    }
    Ok(out)
}
