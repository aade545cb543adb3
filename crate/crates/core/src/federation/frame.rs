//! Frame codec.
//!
//! ```text
//! frame        = length u32 LE | type u8 | payload (length bytes)
//! HELLO        = id len u16 | UTF-8 id | n_i u64
//! ROUND_START  = round u32 | blobs
//! LOCAL_UPDATE = round u32 | n_i u64 | blobs
//! SHUTDOWN     = blobs
//! ERROR        = code u16 | UTF-8 detail (rest of payload)
//! blobs        = count u8 | (blob len u32 | MFLW bytes) × count
//! ```

use std::io::{self, Read, Write};

use super::{kind, ProtocolError};
use crate::error::{Error, Result};

pub const FRAME_HEADER_LEN: usize = 5;
/// Upper bound on a declared payload length.
pub const MAX_FRAME_LEN: u32 = 256 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Hello { id: String, sample_count: u64 },
    RoundStart { round: u32, models: Vec<Vec<u8>> },
    LocalUpdate { round: u32, sample_count: u64, models: Vec<Vec<u8>> },
    Shutdown { models: Vec<Vec<u8>> },
    Error { code: u16, detail: String },
}

fn put_blobs(out: &mut Vec<u8>, blobs: &[Vec<u8>]) {
    assert!(blobs.len() <= u8::MAX as usize, "too many model blobs");
    out.push(blobs.len() as u8);
    for b in blobs {
        out.extend_from_slice(&(b.len() as u32).to_le_bytes());
        out.extend_from_slice(b);
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() - self.pos < n {
            return Err(ProtocolError::Malformed(format!(
                "payload of {} bytes ends at offset {} (need {n} more)",
                self.buf.len(),
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize) -> Result<String, ProtocolError> {
        std::str::from_utf8(self.take(n)?)
            .map(str::to_string)
            .map_err(|_| ProtocolError::Malformed("string is not UTF-8".into()))
    }

    fn blobs(&mut self) -> Result<Vec<Vec<u8>>, ProtocolError> {
        let count = self.take(1)?[0];
        (0..count)
            .map(|_| {
                let len = self.u32()? as usize;
                Ok(self.take(len)?.to_vec())
            })
            .collect()
    }

    fn finish(self) -> Result<(), ProtocolError> {
        if self.pos != self.buf.len() {
            return Err(ProtocolError::Malformed(format!(
                "declared length {} but message ends at {}",
                self.buf.len(),
                self.pos
            )));
        }
        Ok(())
    }
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Message::Hello { .. } => kind::HELLO,
            Message::RoundStart { .. } => kind::ROUND_START,
            Message::LocalUpdate { .. } => kind::LOCAL_UPDATE,
            Message::Shutdown { .. } => kind::SHUTDOWN,
            Message::Error { .. } => kind::ERROR,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::RoundStart { .. } => "ROUND_START",
            Message::LocalUpdate { .. } => "LOCAL_UPDATE",
            Message::Shutdown { .. } => "SHUTDOWN",
            Message::Error { .. } => "ERROR",
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut p = Vec::new();
        match self {
            Message::Hello { id, sample_count } => {
                assert!(id.len() <= u16::MAX as usize, "collaborator id too long");
                p.extend_from_slice(&(id.len() as u16).to_le_bytes());
                p.extend_from_slice(id.as_bytes());
                p.extend_from_slice(&sample_count.to_le_bytes());
            }
            Message::RoundStart { round, models } => {
                p.extend_from_slice(&round.to_le_bytes());
                put_blobs(&mut p, models);
            }
            Message::LocalUpdate {
                round,
                sample_count,
                models,
            } => {
                p.extend_from_slice(&round.to_le_bytes());
                p.extend_from_slice(&sample_count.to_le_bytes());
                put_blobs(&mut p, models);
            }
            Message::Shutdown { models } => put_blobs(&mut p, models),
            Message::Error { code, detail } => {
                p.extend_from_slice(&code.to_le_bytes());
                p.extend_from_slice(detail.as_bytes());
            }
        }
        p
    }

    /// The complete frame, header included.
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.push(self.kind());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode_payload(kind_byte: u8, payload: &[u8]) -> Result<Message, ProtocolError> {
        let mut c = Cursor { buf: payload, pos: 0 };
        let msg = match kind_byte {
            kind::HELLO => {
                let len = c.u16()? as usize;
                let id = c.utf8(len)?;
                Message::Hello {
                    id,
                    sample_count: c.u64()?,
                }
            }
            kind::ROUND_START => Message::RoundStart {
                round: c.u32()?,
                models: c.blobs()?,
            },
            kind::LOCAL_UPDATE => Message::LocalUpdate {
                round: c.u32()?,
                sample_count: c.u64()?,
                models: c.blobs()?,
            },
            kind::SHUTDOWN => Message::Shutdown { models: c.blobs()? },
            kind::ERROR => {
                let code = c.u16()?;
                let rest = payload.len() - c.pos;
                Message::Error {
                    code,
                    detail: c.utf8(rest)?,
                }
            }
            other => return Err(ProtocolError::UnknownType(other)),
        };
        c.finish()?;
        Ok(msg)
    }

    /// Decodes exactly one complete frame.
    pub fn decode(frame: &[u8]) -> Result<Message, ProtocolError> {
        if frame.len() < FRAME_HEADER_LEN {
            return Err(ProtocolError::Malformed(format!("{} bytes is shorter than a frame header", frame.len())));
        }
        let len = u32::from_le_bytes(frame[..4].try_into().unwrap());
        let body = &frame[FRAME_HEADER_LEN..];
        if len as usize != body.len() {
            return Err(ProtocolError::Malformed(format!(
                "declared length {len} but {} payload bytes present",
                body.len()
            )));
        }
        Message::decode_payload(frame[4], body)
    }
}

/// Reads until `buf` is full. Returns the number of bytes read before EOF.
fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Reads one frame. A clean EOF before the header is a peer failure; EOF
/// inside a frame, an oversized length or an undecodable payload is a
/// malformed frame.
pub fn read_message(r: &mut impl Read) -> Result<Message> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    match read_full(r, &mut header)? {
        0 => return Err(ProtocolError::PeerFailed("connection closed".into()).into()),
        FRAME_HEADER_LEN => {}
        n => return Err(ProtocolError::Malformed(format!("truncated frame header ({n} bytes)")).into()),
    }
    let len = u32::from_le_bytes(header[..4].try_into().unwrap());
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::Malformed(format!("declared length {len} exceeds {MAX_FRAME_LEN}")).into());
    }
    let mut payload = vec![0u8; len as usize];
    let got = read_full(r, &mut payload)?;
    if got != payload.len() {
        return Err(ProtocolError::Malformed(format!("declared length {len} but stream ended after {got} bytes")).into());
    }
    Message::decode_payload(header[4], &payload).map_err(Error::from)
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_kinds() -> Vec<Message> {
        vec![
            Message::Hello {
                id: "inst-a".into(),
                sample_count: 160,
            },
            Message::RoundStart {
                round: 3,
                models: vec![vec![1, 2, 3], vec![]],
            },
            Message::LocalUpdate {
                round: 7,
                sample_count: u64::MAX,
                models: vec![vec![9; 17]],
            },
            Message::Shutdown { models: vec![] },
            Message::Error {
                code: 3,
                detail: "wrong round ü".into(),
            },
        ]
    }

    #[test]
    fn pinned_hello_layout() {
        let m = Message::Hello {
            id: "ab".into(),
            sample_count: 5,
        };
        assert_eq!(m.encode(), [12, 0, 0, 0, 0x01, 2, 0, b'a', b'b', 5, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn every_kind_roundtrips() {
        for m in all_kinds() {
            let bytes = m.encode();
            assert_eq!(Message::decode(&bytes).unwrap(), m);
            assert_eq!(read_message(&mut bytes.as_slice()).unwrap(), m);
        }
    }

    #[test]
    fn unknown_type_and_bad_lengths() {
        let mut bytes = Message::Shutdown { models: vec![] }.encode();
        bytes[4] = 0x55;
        assert_eq!(Message::decode(&bytes), Err(ProtocolError::UnknownType(0x55)));

        let mut long = Message::Hello {
            id: "x".into(),
            sample_count: 1,
        }
        .encode();
        long[0] += 1;
        long.push(0);
        assert!(matches!(Message::decode(&long), Err(ProtocolError::Malformed(_))));

        let mut short = Message::Hello {
            id: "x".into(),
            sample_count: 1,
        }
        .encode();
        short[0] -= 1;
        short.pop();
        assert!(matches!(Message::decode(&short), Err(ProtocolError::Malformed(_))));

        let huge = [0xFF, 0xFF, 0xFF, 0xFF, 0x01];
        assert!(matches!(
            read_message(&mut huge.as_slice()),
            Err(Error::Protocol(ProtocolError::Malformed(_)))
        ));
    }

    #[test]
    fn stream_truncation_is_classified() {
        assert!(matches!(
            read_message(&mut [].as_slice()),
            Err(Error::Protocol(ProtocolError::PeerFailed(_)))
        ));
        let bytes = Message::Shutdown { models: vec![vec![1; 8]] }.encode();
        for cut in 1..bytes.len() {
            assert!(matches!(
                read_message(&mut &bytes[..cut]),
                Err(Error::Protocol(ProtocolError::Malformed(_)))
            ));
        }
    }
}
