use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::aggregate::{aggregate, Contribution};
use super::frame::{read_message, write_message, Message};
use super::session::{Direction, SessionWriter};
use super::{decode_models, encode_models, ProtocolError};
use crate::error::{Error, Result};
use crate::tensor::ModelWeights;

#[derive(Debug, Clone)]
pub struct AggregatorConfig {
    pub expected_collaborators: usize,
    pub rounds: u32,
    /// Longest wait for the next event while registering or inside a round.
    pub timeout: Duration,
    /// Optional session recording for offline replay.
    pub record: Option<PathBuf>,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            expected_collaborators: 2,
            rounds: 30,
            timeout: Duration::from_secs(600),
            record: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationOutcome {
    /// Final global weights, one entry per federated model.
    pub models: Vec<ModelWeights<f32>>,
    /// `(id, n_i)` in registration order.
    pub collaborators: Vec<(String, u64)>,
    pub rounds: u32,
}

enum Event {
    Connected(usize, TcpStream),
    Frame(usize, Message),
    Failed(usize, Error),
}

struct Conn {
    stream: TcpStream,
    id: Option<String>,
}

pub struct Aggregator {
    listener: TcpListener,
    config: AggregatorConfig,
}

impl Aggregator {
    pub fn bind(addr: impl ToSocketAddrs, config: AggregatorConfig) -> Result<Self> {
        if config.expected_collaborators == 0 {
            return Err(Error::config("a federation needs at least one collaborator"));
        }
        Ok(Aggregator {
            listener: TcpListener::bind(addr)?,
            config,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Runs registration, `rounds` synchronous rounds and the final
    /// SHUTDOWN broadcast. Any protocol violation sends an ERROR frame to
    /// every connected peer and aborts without aggregating.
    pub fn run(self, initial: Vec<ModelWeights<f32>>) -> Result<FederationOutcome> {
        let recorder = match &self.config.record {
            Some(path) => Some(SessionWriter::new(BufWriter::new(File::create(path)?))?),
            None => None,
        };
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        self.listener.set_nonblocking(true)?;
        let acceptor = {
            let listener = self.listener.try_clone()?;
            let stop = stop.clone();
            let tx = tx.clone();
            thread::spawn(move || accept_loop(listener, tx, stop))
        };
        drop(tx);
        let mut coord = Coordinator {
            config: self.config,
            rx,
            conns: BTreeMap::new(),
            members: Vec::new(),
            recorder,
        };
        let result = coord.run(initial, &stop);
        stop.store(true, Ordering::SeqCst);
        for conn in coord.conns.values() {
            let _ = conn.stream.shutdown(Shutdown::Both);
        }
        let _ = acceptor.join();
        if let Some(rec) = coord.recorder.take() {
            rec.finish()?;
        }
        result
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Event>, stop: Arc<AtomicBool>) {
    let mut next = 0;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let idx = next;
                next += 1;
                let reader = stream.set_nonblocking(false).and_then(|_| {
                    stream.set_nodelay(true)?;
                    stream.try_clone()
                });
                let reader = match reader {
                    Ok(r) => r,
                    Err(e) => {
                        let _ = tx.send(Event::Failed(idx, e.into()));
                        continue;
                    }
                };
                if tx.send(Event::Connected(idx, stream)).is_err() {
                    return;
                }
                let tx = tx.clone();
                thread::spawn(move || read_loop(idx, reader, tx));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn read_loop(idx: usize, mut stream: TcpStream, tx: Sender<Event>) {
    loop {
        match read_message(&mut stream) {
            Ok(m) => {
                if tx.send(Event::Frame(idx, m)).is_err() {
                    return;
                }
            }
            Err(e) => {
                let _ = tx.send(Event::Failed(idx, e));
                return;
            }
        }
    }
}

struct Coordinator {
    config: AggregatorConfig,
    rx: Receiver<Event>,
    conns: BTreeMap<usize, Conn>,
    /// Registered connections in HELLO order, with their sample counts.
    members: Vec<(usize, u64)>,
    recorder: Option<SessionWriter<BufWriter<File>>>,
}

impl Coordinator {
    fn peer_name(&self, idx: usize) -> String {
        self.conns
            .get(&idx)
            .and_then(|c| c.id.clone())
            .unwrap_or_else(|| format!("connection {idx}"))
    }

    fn record(&mut self, dir: Direction, idx: usize, msg: &Message) -> Result<()> {
        // a HELLO is filed under the id it announces
        let peer = match msg {
            Message::Hello { id, .. } => id.clone(),
            _ => self.peer_name(idx),
        };
        if let Some(rec) = self.recorder.as_mut() {
            rec.record(dir, &peer, msg)?;
        }
        Ok(())
    }

    fn send(&mut self, idx: usize, msg: &Message) -> Result<()> {
        self.record(Direction::Sent, idx, msg)?;
        let conn = self.conns.get_mut(&idx).expect("known connection");
        write_message(&mut conn.stream, msg)
    }

    /// Sends `err` to every connection, best-effort, and returns it.
    fn abort(&mut self, err: ProtocolError) -> Error {
        log::error!("aborting federation: {err}");
        let msg = err.to_message();
        let idxs: Vec<usize> = self.conns.keys().copied().collect();
        for idx in idxs {
            if let Err(e) = self.send(idx, &msg) {
                log::debug!("could not notify {}: {e}", self.peer_name(idx));
            }
        }
        err.into()
    }

    fn next_event(&mut self, what: &str) -> Result<Event> {
        match self.rx.recv_timeout(self.config.timeout) {
            Ok(ev) => Ok(ev),
            Err(RecvTimeoutError::Timeout) => Err(self.abort(ProtocolError::Timeout(what.to_string()))),
            Err(RecvTimeoutError::Disconnected) => Err(self.abort(ProtocolError::PeerFailed("listener stopped".into()))),
        }
    }

    /// Maps a connection failure to the error broadcast on abort.
    fn failure(&self, idx: usize, err: Error) -> ProtocolError {
        match err {
            Error::Protocol(ProtocolError::PeerFailed(m)) => ProtocolError::PeerFailed(format!("{}: {m}", self.peer_name(idx))),
            Error::Protocol(p) => p,
            other => ProtocolError::PeerFailed(format!("{}: {other}", self.peer_name(idx))),
        }
    }

    fn register(&mut self) -> Result<()> {
        let deadline = Instant::now() + self.config.timeout;
        while self.members.len() < self.config.expected_collaborators {
            if Instant::now() > deadline {
                return Err(self.abort(ProtocolError::Timeout("waiting for collaborators".into())));
            }
            match self.next_event("waiting for collaborators")? {
                Event::Connected(idx, stream) => {
                    self.conns.insert(idx, Conn { stream, id: None });
                }
                Event::Frame(idx, msg) => {
                    if !self.conns.contains_key(&idx) {
                        continue;
                    }
                    self.record(Direction::Received, idx, &msg)?;
                    match msg {
                        Message::Hello { id, sample_count } if self.conns[&idx].id.is_none() => {
                            if self.conns.values().any(|c| c.id.as_deref() == Some(id.as_str())) {
                                let err = ProtocolError::DuplicateId(id);
                                log::warn!("rejecting connection {idx}: {err}");
                                let _ = self.send(idx, &err.to_message());
                                if let Some(c) = self.conns.remove(&idx) {
                                    let _ = c.stream.shutdown(Shutdown::Both);
                                }
                                continue;
                            }
                            if sample_count == 0 {
                                return Err(self.abort(ProtocolError::Malformed(format!("{id} reports zero samples"))));
                            }
                            log::info!("collaborator {id} registered with {sample_count} images");
                            self.conns.get_mut(&idx).expect("present").id = Some(id);
                            self.members.push((idx, sample_count));
                        }
                        other => {
                            let err = ProtocolError::Unexpected(format!("{} before registration completed", other.name()));
                            return Err(self.abort(err));
                        }
                    }
                }
                Event::Failed(idx, err) => {
                    if !self.conns.contains_key(&idx) {
                        continue;
                    }
                    let p = self.failure(idx, err);
                    if self.conns[&idx].id.is_none() && matches!(p, ProtocolError::PeerFailed(_)) {
                        // never said HELLO; forget it
                        self.conns.remove(&idx);
                        continue;
                    }
                    return Err(self.abort(p));
                }
            }
        }
        Ok(())
    }

    fn run(&mut self, initial: Vec<ModelWeights<f32>>, stop: &AtomicBool) -> Result<FederationOutcome> {
        self.register()?;
        stop.store(true, Ordering::SeqCst);
        // drop anything that connected after the last HELLO
        let member_idx: Vec<usize> = self.members.iter().map(|m| m.0).collect();
        self.conns.retain(|idx, c| {
            let keep = member_idx.contains(idx);
            if !keep {
                let _ = c.stream.shutdown(Shutdown::Both);
            }
            keep
        });

        let mut global = initial;
        for round in 1..=self.config.rounds {
            let blobs = encode_models(&global);
            let start = Message::RoundStart { round, models: blobs };
            for idx in member_idx.clone() {
                if let Err(e) = self.send(idx, &start) {
                    let p = self.failure(idx, e);
                    return Err(self.abort(p));
                }
            }
            let updates = self.collect_round(round, &global)?;
            let mut next = Vec::with_capacity(global.len());
            for m in 0..global.len() {
                let contributions: Vec<Contribution<'_>> = updates
                    .iter()
                    .map(|(id, (n, models))| Contribution {
                        id,
                        sample_count: *n,
                        weights: &models[m],
                    })
                    .collect();
                match aggregate(&contributions) {
                    Ok(w) => next.push(w),
                    Err(Error::Protocol(p)) => return Err(self.abort(p)),
                    Err(e) => return Err(e),
                }
            }
            global = next;
            log::info!("round {round}/{} aggregated", self.config.rounds);
        }

        let shutdown = Message::Shutdown {
            models: encode_models(&global),
        };
        for idx in member_idx {
            if let Err(e) = self.send(idx, &shutdown) {
                log::warn!("SHUTDOWN to {} failed: {e}", self.peer_name(idx));
            }
        }
        Ok(FederationOutcome {
            models: global,
            collaborators: self
                .members
                .iter()
                .map(|&(idx, n)| (self.peer_name(idx), n))
                .collect(),
            rounds: self.config.rounds,
        })
    }

    /// Barrier: waits for exactly one valid LOCAL_UPDATE per member.
    fn collect_round(&mut self, round: u32, global: &[ModelWeights<f32>]) -> Result<BTreeMap<String, (u64, Vec<ModelWeights<f32>>)>> {
        let mut updates = BTreeMap::new();
        let deadline = Instant::now() + self.config.timeout;
        while updates.len() < self.members.len() {
            if Instant::now() > deadline {
                return Err(self.abort(ProtocolError::Timeout(format!("round {round}"))));
            }
            match self.next_event(&format!("round {round}"))? {
                Event::Connected(_, stream) => {
                    let _ = stream.shutdown(Shutdown::Both);
                }
                Event::Frame(idx, msg) => {
                    if !self.conns.contains_key(&idx) {
                        continue;
                    }
                    self.record(Direction::Received, idx, &msg)?;
                    let id = self.peer_name(idx);
                    let result = match msg {
                        Message::LocalUpdate {
                            round: got,
                            sample_count,
                            models,
                        } => self.check_update(round, got, sample_count, &models, global, &id, &updates),
                        Message::Error { code, detail } => Err(ProtocolError::PeerFailed(format!(
                            "{id} reported error {code}: {detail}"
                        ))),
                        other => Err(ProtocolError::Unexpected(format!("{} from {id} during round {round}", other.name()))),
                    };
                    match result {
                        Ok(entry) => {
                            updates.insert(id, entry);
                        }
                        Err(p) => return Err(self.abort(p)),
                    }
                }
                Event::Failed(idx, err) => {
                    if !self.conns.contains_key(&idx) {
                        continue;
                    }
                    let p = self.failure(idx, err);
                    return Err(self.abort(p));
                }
            }
        }
        Ok(updates)
    }

    #[allow(clippy::too_many_arguments)]
    fn check_update(
        &self,
        round: u32,
        got: u32,
        sample_count: u64,
        blobs: &[Vec<u8>],
        global: &[ModelWeights<f32>],
        id: &str,
        seen: &BTreeMap<String, (u64, Vec<ModelWeights<f32>>)>,
    ) -> Result<(u64, Vec<ModelWeights<f32>>), ProtocolError> {
        if got != round {
            return Err(ProtocolError::WrongRound { expected: round, got });
        }
        if seen.contains_key(id) {
            return Err(ProtocolError::Unexpected(format!("second update from {id} in round {round}")));
        }
        if sample_count == 0 {
            return Err(ProtocolError::Malformed(format!("{id} reports zero samples")));
        }
        let models = decode_models(blobs)?;
        if models.len() != global.len() {
            return Err(ProtocolError::ShapeMismatch(format!(
                "{id} sent {} models, expected {}",
                models.len(),
                global.len()
            )));
        }
        for (m, g) in models.iter().zip(global) {
            g.check_same_layout(m)
                .map_err(|e| ProtocolError::ShapeMismatch(format!("{id}: {e}")))?;
        }
        Ok((sample_count, models))
    }
}
