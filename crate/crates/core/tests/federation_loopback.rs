use std::io::Write;
use std::net::TcpStream;
use std::thread;
use std::time::Duration;

use fedpd::cascade::{initial_weights, train_cascade, CascadeTrainer, Checkpoint, TrainConfig};
use fedpd::federation::{
    code, read_message, read_session, replay, run_collaborator, Aggregator, AggregatorConfig, CollaboratorConfig,
    LocalTrainer, Message, ProtocolError,
};
use fedpd::nn::UNetConfig;
use fedpd::phantom::{generate_dataset, InstitutionProfile, PhantomSample};
use fedpd::{Error, ModelWeights, Tensor};

fn toy_weights(v: f32) -> ModelWeights<f32> {
    let mut w = ModelWeights::new();
    w.insert("a", Tensor::from_vec(&[2, 2], vec![v, v + 1.0, v * 0.5, -v]).unwrap()).unwrap();
    w.insert("b", Tensor::from_vec(&[3], vec![0.1, 0.2, v]).unwrap()).unwrap();
    w
}

/// Adds a fixed offset times the epoch count to every parameter.
struct Shift {
    n: u64,
    delta: f32,
    epochs: u32,
}

impl LocalTrainer for Shift {
    fn sample_count(&self) -> u64 {
        self.n
    }
    fn local_epoch(&mut self, models: &mut [ModelWeights<f32>]) -> fedpd::Result<()> {
        self.epochs += 1;
        for m in models.iter_mut() {
            for (_, t) in m.iter_mut() {
                for v in t.data_mut() {
                    *v += self.delta * self.epochs as f32;
                }
            }
        }
        Ok(())
    }
}

fn config(n: usize, rounds: u32, record: Option<std::path::PathBuf>) -> AggregatorConfig {
    AggregatorConfig {
        expected_collaborators: n,
        rounds,
        timeout: Duration::from_secs(60),
        record,
    }
}

#[test]
fn three_rounds_two_collaborators_replay_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("session.mfls");
    let agg = Aggregator::bind("127.0.0.1:0", config(2, 3, Some(session.clone()))).unwrap();
    let addr = agg.local_addr().unwrap().to_string();
    let initial = vec![toy_weights(1.0), toy_weights(-3.0)];
    let server = thread::spawn(move || agg.run(initial));
    let clients: Vec<_> = [("alpha", 7u64, 0.25f32), ("beta", 3, -0.125)]
        .into_iter()
        .map(|(id, n, delta)| {
            let addr = addr.clone();
            thread::spawn(move || {
                let mut t = Shift { n, delta, epochs: 0 };
                run_collaborator(&addr, &CollaboratorConfig::new(id), &mut t).unwrap()
            })
        })
        .collect();
    let outcome = server.join().unwrap().unwrap();
    for c in clients {
        assert_eq!(c.join().unwrap(), outcome.models);
    }
    assert_eq!(outcome.rounds, 3);
    let replayed = replay(&read_session(&std::fs::read(&session).unwrap()).unwrap()).unwrap();
    assert_eq!(replayed.rounds, 3);
    assert_eq!(replayed.models, outcome.models);
}

#[test]
fn single_round_single_collaborator_returns_its_update() {
    let agg = Aggregator::bind("127.0.0.1:0", config(1, 1, None)).unwrap();
    let addr = agg.local_addr().unwrap().to_string();
    let server = thread::spawn(move || agg.run(vec![toy_weights(2.0)]));
    let mut t = Shift {
        n: 13,
        delta: 0.375,
        epochs: 0,
    };
    let got = run_collaborator(&addr, &CollaboratorConfig::new("solo"), &mut t).unwrap();
    let out = server.join().unwrap().unwrap();
    let mut expected = vec![toy_weights(2.0)];
    Shift {
        n: 13,
        delta: 0.375,
        epochs: 0,
    }
    .local_epoch(&mut expected)
    .unwrap();
    assert_eq!(out.models, expected);
    assert_eq!(got, expected);
}

#[test]
fn zero_rounds_returns_initial_weights() {
    let agg = Aggregator::bind("127.0.0.1:0", config(1, 0, None)).unwrap();
    let addr = agg.local_addr().unwrap().to_string();
    let server = thread::spawn(move || agg.run(vec![toy_weights(5.0)]));
    let mut t = Shift {
        n: 1,
        delta: 1.0,
        epochs: 0,
    };
    run_collaborator(&addr, &CollaboratorConfig::new("x"), &mut t).unwrap();
    assert_eq!(server.join().unwrap().unwrap().models, vec![toy_weights(5.0)]);
    assert_eq!(t.epochs, 0);
}

fn tiny_data(name: &str, seed: u64) -> (Vec<PhantomSample>, TrainConfig) {
    let p = InstitutionProfile {
        name: name.into(),
        image_size: 16,
        n_subjects: 3,
        images_per_subject: 2,
        ..InstitutionProfile::default_a()
    };
    let cfg = TrainConfig {
        unet: UNetConfig {
            input_size: 16,
            levels: 1,
            base_channels: 2,
            ..UNetConfig::default()
        },
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    (generate_dataset(&p, seed).unwrap(), cfg)
}

#[test]
fn single_collaborator_matches_centralized_training() {
    let (data, mut cfg) = tiny_data("site", 4);
    cfg.checkpoint = Checkpoint::Final;
    let seed = 99;
    let (central, _) = train_cascade(&data, &cfg, seed).unwrap();

    let (b, d) = initial_weights(&cfg.unet, seed);
    let agg = Aggregator::bind("127.0.0.1:0", config(1, cfg.epochs as u32, None)).unwrap();
    let addr = agg.local_addr().unwrap().to_string();
    let server = thread::spawn(move || agg.run(vec![b, d]));
    let mut trainer = CascadeTrainer::new(cfg, &data, seed).unwrap();
    run_collaborator(&addr, &CollaboratorConfig::new("site"), &mut trainer).unwrap();
    let fed = server.join().unwrap().unwrap();
    assert_eq!(fed.models[0], central.breast_net.weights);
    assert_eq!(fed.models[1], central.dense_net.weights);
}

#[test]
fn zero_learning_rate_echoes_round_start_payload() {
    let (data, mut cfg) = tiny_data("site", 5);
    cfg.adam.learning_rate = 0.0;
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("s.mfls");
    let (b, d) = initial_weights(&cfg.unet, 1);
    let agg = Aggregator::bind("127.0.0.1:0", config(1, 2, Some(session.clone()))).unwrap();
    let addr = agg.local_addr().unwrap().to_string();
    let server = thread::spawn(move || agg.run(vec![b, d]));
    let mut trainer = CascadeTrainer::new(cfg, &data, 1).unwrap();
    run_collaborator(&addr, &CollaboratorConfig::new("site"), &mut trainer).unwrap();
    server.join().unwrap().unwrap();
    let recs = read_session(&std::fs::read(session).unwrap()).unwrap();
    let mut starts = Vec::new();
    let mut updates = Vec::new();
    for r in recs {
        match Message::decode(&r.frame).unwrap() {
            Message::RoundStart { models, .. } => starts.push(models),
            Message::LocalUpdate { models, .. } => updates.push(models),
            _ => {}
        }
    }
    assert_eq!(starts.len(), 2);
    assert_eq!(starts, updates);
}

#[test]
fn identical_collaborators_send_identical_updates() {
    let (data, cfg) = tiny_data("site", 6);
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("s.mfls");
    let (b, d) = initial_weights(&cfg.unet, 3);
    let agg = Aggregator::bind("127.0.0.1:0", config(2, 1, Some(session.clone()))).unwrap();
    let addr = agg.local_addr().unwrap().to_string();
    let server = thread::spawn(move || agg.run(vec![b, d]));
    let clients: Vec<_> = ["left", "right"]
        .into_iter()
        .map(|id| {
            let (addr, data) = (addr.clone(), data.clone());
            thread::spawn(move || {
                let mut t = CascadeTrainer::new(cfg, &data, 3).unwrap();
                run_collaborator(&addr, &CollaboratorConfig::new(id), &mut t).unwrap()
            })
        })
        .collect();
    let out = server.join().unwrap().unwrap();
    for c in clients {
        c.join().unwrap();
    }
    let updates: Vec<Vec<Vec<u8>>> = read_session(&std::fs::read(session).unwrap())
        .unwrap()
        .into_iter()
        .filter_map(|r| match Message::decode(&r.frame).unwrap() {
            Message::LocalUpdate { models, .. } => Some(models),
            _ => None,
        })
        .collect();
    assert_eq!(updates.len(), 2);
    assert_eq!(updates[0], updates[1]);
    assert_eq!(fedpd::federation::encode_models(&out.models), updates[0]);
}

/// Connects a hand-driven client, registers it, and returns the stream
/// positioned after ROUND_START 1.
fn raw_client(addr: &str, id: &str) -> TcpStream {
    let mut s = TcpStream::connect(addr).unwrap();
    s.write_all(
        &Message::Hello {
            id: id.into(),
            sample_count: 4,
        }
        .encode(),
    )
    .unwrap();
    s
}

fn expect_abort(send: impl FnOnce(&mut TcpStream, Vec<Vec<u8>>), expected_code: u16) {
    let agg = Aggregator::bind("127.0.0.1:0", config(1, 3, None)).unwrap();
    let addr = agg.local_addr().unwrap().to_string();
    let server = thread::spawn(move || agg.run(vec![toy_weights(0.0)]));
    let mut s = raw_client(&addr, "rogue");
    let models = match read_message(&mut s).unwrap() {
        Message::RoundStart { round: 1, models } => models,
        other => panic!("expected ROUND_START 1, got {other:?}"),
    };
    send(&mut s, models);
    match read_message(&mut s).unwrap() {
        Message::Error { code, .. } => assert_eq!(code, expected_code),
        other => panic!("expected ERROR, got {other:?}"),
    }
    let err = server.join().unwrap().unwrap_err();
    match err {
        Error::Protocol(p) => assert_eq!(p.code(), expected_code),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn wrong_round_aborts() {
    expect_abort(
        |s, models| {
            let m = Message::LocalUpdate {
                round: 2,
                sample_count: 4,
                models,
            };
            s.write_all(&m.encode()).unwrap();
        },
        code::WRONG_ROUND,
    );
}

#[test]
fn unknown_type_aborts() {
    expect_abort(|s, _| s.write_all(&[0, 0, 0, 0, 0x42]).unwrap(), code::UNKNOWN_TYPE);
}

#[test]
fn bad_length_aborts() {
    expect_abort(
        |s, models| {
            let mut frame = Message::LocalUpdate {
                round: 1,
                sample_count: 4,
                models,
            }
            .encode();
            // declare three bytes fewer than the body actually holds
            let len = u32::from_le_bytes(frame[..4].try_into().unwrap()) - 3;
            frame[..4].copy_from_slice(&len.to_le_bytes());
            s.write_all(&frame).unwrap();
        },
        code::MALFORMED,
    );
}

#[test]
fn oversized_length_aborts() {
    expect_abort(|s, _| s.write_all(&[0xFF, 0xFF, 0xFF, 0x7F, 0x03]).unwrap(), code::MALFORMED);
}

#[test]
fn wrong_shape_aborts() {
    expect_abort(
        |s, _| {
            let m = Message::LocalUpdate {
                round: 1,
                sample_count: 4,
                models: fedpd::federation::encode_models(&[{
                    let mut w = ModelWeights::new();
                    w.insert("a", Tensor::from_vec(&[1], vec![0.0]).unwrap()).unwrap();
                    w
                }]),
            };
            s.write_all(&m.encode()).unwrap();
        },
        code::SHAPE_MISMATCH,
    );
}

#[test]
fn corrupted_blob_aborts() {
    expect_abort(
        |s, mut models| {
            let last = models[0].len() - 1;
            models[0][last] ^= 0x01;
            let m = Message::LocalUpdate {
                round: 1,
                sample_count: 4,
                models,
            };
            s.write_all(&m.encode()).unwrap();
        },
        code::MALFORMED,
    );
}

#[test]
fn disconnect_mid_round_notifies_survivors() {
    let agg = Aggregator::bind("127.0.0.1:0", config(2, 2, None)).unwrap();
    let addr = agg.local_addr().unwrap().to_string();
    let server = thread::spawn(move || agg.run(vec![toy_weights(0.0)]));
    let mut survivor = raw_client(&addr, "survivor");
    let quitter = raw_client(&addr, "quitter");
    assert!(matches!(read_message(&mut survivor).unwrap(), Message::RoundStart { round: 1, .. }));
    drop(quitter);
    // the survivor's pending ERROR arrives after its ROUND_START
    let err = server.join().unwrap().unwrap_err();
    assert!(matches!(err, Error::Protocol(ProtocolError::PeerFailed(_))));
    match read_message(&mut survivor).unwrap() {
        Message::Error { code, .. } => assert_eq!(code, code::PEER_FAILED),
        other => panic!("expected ERROR, got {other:?}"),
    }
}

#[test]
fn duplicate_id_is_rejected_but_federation_continues() {
    let agg = Aggregator::bind("127.0.0.1:0", config(2, 0, None)).unwrap();
    let addr = agg.local_addr().unwrap().to_string();
    let server = thread::spawn(move || agg.run(vec![toy_weights(1.0)]));
    let mut first = raw_client(&addr, "same");
    thread::sleep(Duration::from_millis(100));
    let mut dup = raw_client(&addr, "same");
    match read_message(&mut dup).unwrap() {
        Message::Error { code, .. } => assert_eq!(code, code::DUPLICATE_ID),
        other => panic!("expected ERROR, got {other:?}"),
    }
    let mut second = raw_client(&addr, "other");
    let out = server.join().unwrap().unwrap();
    assert_eq!(out.collaborators, vec![("same".to_string(), 4), ("other".to_string(), 4)]);
    assert!(matches!(read_message(&mut first).unwrap(), Message::Shutdown { .. }));
    assert!(matches!(read_message(&mut second).unwrap(), Message::Shutdown { .. }));
}

#[test]
fn connection_failure_gives_up_after_retries() {
    // bind then drop to get a port with no listener
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = CollaboratorConfig {
        backoff: Duration::from_millis(10),
        ..CollaboratorConfig::new("late")
    };
    let mut t = Shift {
        n: 1,
        delta: 0.0,
        epochs: 0,
    };
    let start = std::time::Instant::now();
    let err = run_collaborator(&format!("127.0.0.1:{port}"), &cfg, &mut t).unwrap_err();
    assert!(matches!(err, Error::Io(_)));
    assert!(start.elapsed() >= Duration::from_millis(30));
}
