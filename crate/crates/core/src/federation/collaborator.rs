use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::thread;
use std::time::Duration;

use super::frame::{read_message, write_message, Message};
use super::{decode_models, encode_models, ProtocolError};
use crate::cascade::CascadeTrainer;
use crate::error::{Error, Result};
use crate::tensor::ModelWeights;

/// Local training delegated to by a collaborator.
pub trait LocalTrainer {
    /// `n_i`, the number of local training images.
    fn sample_count(&self) -> u64;
    /// One pass over the local data, updating `models` in place.
    fn local_epoch(&mut self, models: &mut [ModelWeights<f32>]) -> Result<()>;
}

impl LocalTrainer for CascadeTrainer {
    fn sample_count(&self) -> u64 {
        self.train_images() as u64
    }

    fn local_epoch(&mut self, models: &mut [ModelWeights<f32>]) -> Result<()> {
        match models {
            [breast, dense] => self.run_epoch(breast, dense).map(|_| ()),
            _ => Err(ProtocolError::ShapeMismatch(format!("cascade expects 2 models, got {}", models.len())).into()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CollaboratorConfig {
    pub id: String,
    pub local_epochs: usize,
    pub connect_attempts: u32,
    /// Delay before the second attempt; doubled after each failure.
    pub backoff: Duration,
}

impl CollaboratorConfig {
    pub fn new(id: impl Into<String>) -> Self {
        CollaboratorConfig {
            id: id.into(),
            local_epochs: 1,
            connect_attempts: 3,
            backoff: Duration::from_millis(250),
        }
    }
}

fn connect(addr: &str, config: &CollaboratorConfig) -> Result<TcpStream> {
    let mut delay = config.backoff;
    let attempts = config.connect_attempts.max(1);
    let mut last = None;
    for attempt in 1..=attempts {
        let result = addr.to_socket_addrs().and_then(|mut addrs| {
            let a = addrs
                .next()
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "address resolved to nothing"))?;
            TcpStream::connect(a)
        });
        match result {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => {
                log::warn!("{}: connection attempt {attempt}/{attempts} to {addr} failed: {e}", config.id);
                last = Some(e);
                if attempt < attempts {
                    thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
    Err(Error::Io(last.expect("at least one attempt")))
}

/// Joins the federation at `addr`, trains on every ROUND_START and returns
/// the final weights from SHUTDOWN. Adam moments live inside `trainer` and
/// never leave this process.
pub fn run_collaborator(addr: &str, config: &CollaboratorConfig, trainer: &mut dyn LocalTrainer) -> Result<Vec<ModelWeights<f32>>> {
    if config.local_epochs == 0 {
        return Err(Error::config("local_epochs must be at least 1"));
    }
    let mut stream = connect(addr, config)?;
    let n_i = trainer.sample_count();
    write_message(
        &mut stream,
        &Message::Hello {
            id: config.id.clone(),
            sample_count: n_i,
        },
    )?;
    let mut expected = 1u32;
    loop {
        let msg = match read_message(&mut stream) {
            Ok(m) => m,
            Err(Error::Protocol(p)) => {
                let _ = write_message(&mut stream, &p.to_message());
                return Err(p.into());
            }
            Err(e) => return Err(e),
        };
        match msg {
            Message::RoundStart { round, models } => {
                if round != expected {
                    let err = ProtocolError::WrongRound { expected, got: round };
                    let _ = write_message(&mut stream, &err.to_message());
                    return Err(err.into());
                }
                let mut weights = match decode_models(&models) {
                    Ok(w) => w,
                    Err(p) => {
                        let _ = write_message(&mut stream, &p.to_message());
                        return Err(p.into());
                    }
                };
                for _ in 0..config.local_epochs {
                    if let Err(e) = trainer.local_epoch(&mut weights) {
                        let p = ProtocolError::LocalFailure(format!("{}: {e}", config.id));
                        let _ = write_message(&mut stream, &p.to_message());
                        return Err(e);
                    }
                }
                write_message(
                    &mut stream,
                    &Message::LocalUpdate {
                        round,
                        sample_count: n_i,
                        models: encode_models(&weights),
                    },
                )?;
                log::info!("{}: round {round} update sent", config.id);
                expected += 1;
            }
            Message::Shutdown { models } => return decode_models(&models).map_err(Error::from),
            Message::Error { code, detail } => return Err(ProtocolError::Remote { code, detail }.into()),
            other => {
                let err = ProtocolError::Unexpected(format!("{} sent to a collaborator", other.name()));
                let _ = write_message(&mut stream, &err.to_message());
                return Err(err.into());
            }
        }
    }
}
