//! Recorded sessions and the offline replay oracle.
//!
//! ```text
//! "MFLS" | version u16
//! per record: direction u8 (0 received, 1 sent) | peer len u16 | UTF-8 peer | frame len u32 | frame
//! ```
//!
//! Frames are stored exactly as they crossed the wire, tagged with the
//! aggregator-side peer they were exchanged with (LOCAL_UPDATE itself does
//! not name its sender).

use std::collections::BTreeMap;
use std::io::Write;

use super::frame::Message;
use super::{decode_models, ProtocolError};
use crate::error::{Error, Result};
use crate::tensor::{ModelWeights, Tensor};

pub const SESSION_MAGIC: &[u8; 4] = b"MFLS";
pub const SESSION_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Received = 0,
    Sent = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecord {
    pub direction: Direction,
    pub peer: String,
    pub frame: Vec<u8>,
}

pub struct SessionWriter<W: Write> {
    out: W,
}

impl<W: Write> SessionWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        out.write_all(SESSION_MAGIC)?;
        out.write_all(&SESSION_VERSION.to_le_bytes())?;
        Ok(SessionWriter { out })
    }

    pub fn record(&mut self, direction: Direction, peer: &str, msg: &Message) -> Result<()> {
        let frame = msg.encode();
        self.out.write_all(&[direction as u8])?;
        self.out.write_all(&(peer.len() as u16).to_le_bytes())?;
        self.out.write_all(peer.as_bytes())?;
        self.out.write_all(&(frame.len() as u32).to_le_bytes())?;
        self.out.write_all(&frame)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Replay(msg.into())
}

pub fn read_session(bytes: &[u8]) -> Result<Vec<SessionRecord>> {
    if bytes.len() < 6 || &bytes[..4] != SESSION_MAGIC {
        return Err(bad("not a session recording"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SESSION_VERSION {
        return Err(bad(format!("unsupported session version {version}")));
    }
    let mut pos = 6;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(bad("truncated session record"));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    let mut out = Vec::new();
    loop {
        let Ok(dir) = take(1) else { break };
        let direction = match dir[0] {
            0 => Direction::Received,
            1 => Direction::Sent,
            d => return Err(bad(format!("bad direction byte {d}"))),
        };
        let plen = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let peer = String::from_utf8(take(plen)?.to_vec()).map_err(|_| bad("peer is not UTF-8"))?;
        let flen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        out.push(SessionRecord {
            direction,
            peer,
            frame: take(flen)?.to_vec(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub rounds: u32,
    /// Final weights recomputed from the recorded updates.
    pub models: Vec<ModelWeights<f32>>,
}

/// Weighted mean recomputed element by element over ids in sorted order.
fn replay_mean(updates: &BTreeMap<String, (u64, Vec<ModelWeights<f32>>)>, model: usize) -> Result<ModelWeights<f32>> {
    let (_, (_, first)) = updates.iter().next().ok_or_else(|| bad("round without updates"))?;
    let total: f64 = updates.values().map(|(n, _)| *n as f64).sum();
    let mut out = ModelWeights::new();
    for (name, t) in first[model].iter() {
        let mut data = Vec::with_capacity(t.len());
        for k in 0..t.len() {
            let mut acc = 0f64;
            for (n, models) in updates.values() {
                let w = models[model]
                    .get(name)
                    .filter(|w| w.dims() == t.dims())
                    .ok_or_else(|| bad(format!("update layout differs at {name}")))?;
                acc += *n as f64 * w.data()[k] as f64;
            }
            data.push((acc / total) as f32);
        }
        out.insert(name, Tensor::from_vec(t.dims(), data)?)?;
    }
    Ok(out)
}

fn same_bits(a: &[ModelWeights<f32>], b: &[ModelWeights<f32>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.len() == y.len()
                && x.iter().zip(y.iter()).all(|((n1, t1), (n2, t2))| {
                    n1 == n2
                        && t1.dims() == t2.dims()
                        && t1.data().iter().zip(t2.data()).all(|(p, q)| p.to_bits() == q.to_bits())
                })
        })
}

/// Recomputes every aggregation of a recorded session from the received
/// LOCAL_UPDATE frames and checks each against the next broadcast. Returns
/// the recomputed final weights; fails if the session aborted or any
/// broadcast disagrees with the recomputation.
pub fn replay(records: &[SessionRecord]) -> Result<ReplayOutcome> {
    let mut members: BTreeMap<String, u64> = BTreeMap::new();
    let mut current: Option<(u32, Vec<ModelWeights<f32>>)> = None;
    let mut updates: BTreeMap<String, (u64, Vec<ModelWeights<f32>>)> = BTreeMap::new();
    let mut aggregated: Option<Vec<ModelWeights<f32>>> = None;
    let mut rounds = 0;

    for rec in records {
        let msg = Message::decode(&rec.frame).map_err(|e| bad(format!("recorded frame: {e}")))?;
        match (rec.direction, msg) {
            (Direction::Received, Message::Hello { id, sample_count }) => {
                if id == rec.peer {
                    members.insert(id, sample_count);
                }
            }
            (Direction::Received, Message::LocalUpdate { round, sample_count, models }) => {
                let Some((r, _)) = &current else {
                    return Err(bad("update before any round started"));
                };
                if round != *r {
                    return Err(bad(format!("recorded update for round {round} during round {r}")));
                }
                updates.insert(rec.peer.clone(), (sample_count, decode_models(&models)?));
            }
            (Direction::Sent, Message::RoundStart { round, models }) => {
                let broadcast = decode_models(&models)?;
                if let Some((r, prev)) = &current {
                    if *r == round {
                        if !same_bits(prev, &broadcast) {
                            return Err(bad(format!("round {round} broadcast differs between peers")));
                        }
                        continue;
                    }
                }
                let expected_round = current.as_ref().map_or(1, |(r, _)| r + 1);
                if round != expected_round {
                    return Err(bad(format!("round {round} started after round {}", expected_round - 1)));
                }
                if round > 1 {
                    let agg = aggregated.take().ok_or_else(|| bad(format!("round {round} started before aggregation")))?;
                    if !same_bits(&agg, &broadcast) {
                        return Err(bad(format!("round {round} broadcast differs from the replayed aggregate")));
                    }
                }
                current = Some((round, broadcast));
            }
            (Direction::Sent, Message::Shutdown { models }) => {
                let final_models = decode_models(&models)?;
                let expected = match aggregated.take() {
                    Some(a) => a,
                    None if current.is_none() => final_models.clone(),
                    None => return Err(bad("SHUTDOWN before the last aggregation")),
                };
                if !same_bits(&expected, &final_models) {
                    return Err(bad("SHUTDOWN weights differ from the replayed aggregate"));
                }
                return Ok(ReplayOutcome {
                    rounds,
                    models: expected,
                });
            }
            // errors exchanged with rejected connections do not end the session
            (_, Message::Error { code, detail }) if members.contains_key(&rec.peer) => {
                return Err(ProtocolError::Remote { code, detail }.into());
            }
            _ => {}
        }
        // aggregate as soon as every member has reported
        if let Some((r, prev)) = &current {
            if aggregated.is_none() && !updates.is_empty() && updates.len() == members.len() && updates.keys().eq(members.keys()) {
                let models = (0..prev.len()).map(|m| replay_mean(&updates, m)).collect::<Result<Vec<_>>>()?;
                aggregated = Some(models);
                updates.clear();
                rounds = *r;
            }
        }
    }
    Err(bad("session ended without SHUTDOWN"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_roundtrip() {
        let mut w = SessionWriter::new(Vec::new()).unwrap();
        let m = Message::Hello {
            id: "a".into(),
            sample_count: 2,
        };
        w.record(Direction::Received, "a", &m).unwrap();
        w.record(Direction::Sent, "a", &Message::Shutdown { models: vec![] }).unwrap();
        let bytes = w.finish().unwrap();
        let recs = read_session(&bytes).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].frame, m.encode());
        assert_eq!(recs[1].direction, Direction::Sent);
        assert!(read_session(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_session(b"MFLW\x01\x00").is_err());
    }

    #[test]
    fn zero_round_session_replays_initial_weights() {
        let mut w = ModelWeights::new();
        w.insert("p", Tensor::from_vec(&[2], vec![1.5, -2.0]).unwrap()).unwrap();
        let blobs = super::super::encode_models(std::slice::from_ref(&w));
        let mut s = SessionWriter::new(Vec::new()).unwrap();
        s.record(
            Direction::Received,
            "a",
            &Message::Hello {
                id: "a".into(),
                sample_count: 1,
            },
        )
        .unwrap();
        s.record(Direction::Sent, "a", &Message::Shutdown { models: blobs }).unwrap();
        let out = replay(&read_session(&s.finish().unwrap()).unwrap()).unwrap();
        assert_eq!(out.rounds, 0);
        assert_eq!(out.models, vec![w]);
    }
}
