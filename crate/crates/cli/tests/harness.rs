//! End-to-end harness runs on tiny phantoms and networks.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::Command;

use fedpd::cascade::{initial_weights, CascadeModel};
use fedpd_harness::report::{self, PAIRED_METRICS};
use fedpd_harness::train::{self, SESSION_FILE};
use fedpd_harness::{data, replay_session, same_bits, ExperimentConfig, Regime};

const EXE: &str = env!("CARGO_BIN_EXE_fedpd");

fn tiny(out: &Path, extra: &str) -> ExperimentConfig {
    let base = format!(
        "out={}\ninput_size=16\nlevels=1\nbase_channels=2\nepochs=2\nbatch_size=4\nlr=0.001\n\
         inst-a.image_size=32\ninst-a.n_subjects=4\ninst-a.images_per_subject=2\ninst-a.test_subjects=2\n\
         inst-b.image_size=32\ninst-b.n_subjects=5\ninst-b.images_per_subject=1\ninst-b.test_subjects=3",
        out.display()
    );
    // keys in `extra` replace the base values
    let key = |l: &str| l.split('=').next().unwrap_or("").to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: Vec<&str> = base.lines().filter(|l| !overridden.contains(&key(l))).collect();
    text.extend(extra.lines());
    ExperimentConfig::parse(&text.join("\n")).unwrap()
}

fn single(out: &Path, extra: &str) -> ExperimentConfig {
    let mut c = tiny(out, extra);
    c.institutions.truncate(1);
    c.evaluate = vec![Regime::CentralizedA, Regime::Federated];
    c
}

fn with_regime(c: &ExperimentConfig, r: Regime) -> ExperimentConfig {
    ExperimentConfig { regime: r, ..c.clone() }
}

fn load(c: &ExperimentConfig, r: Regime) -> CascadeModel {
    CascadeModel::load(&c.model_dir(r)).unwrap()
}

fn same_model(a: &CascadeModel, b: &CascadeModel) -> bool {
    same_bits(&a.breast_net.weights, &b.breast_net.weights) && same_bits(&a.dense_net.weights, &b.dense_net.weights)
}

fn read_all(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_deterministic_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2) = (tmp.path().join("one"), tmp.path().join("two"));
    let s = data::generate(&tiny(&d1, ""), false).unwrap();
    assert_eq!(s.institutions, vec![("inst-a".to_string(), 8, 4), ("inst-b".to_string(), 5, 3)]);
    data::generate(&tiny(&d2, ""), false).unwrap();
    for split in ["train", "test"] {
        let m = |d: &Path| fs::read_to_string(d.join("data").join(split).join("manifest.txt")).unwrap();
        assert_eq!(m(&d1), m(&d2));
    }
    let err = data::generate(&tiny(&d1, ""), false).unwrap_err();
    assert!(format!("{err:#}").contains("--force"), "{err:#}");
    data::generate(&tiny(&d1, "seed=2"), true).unwrap();
    let test_ids: Vec<_> = data::manifest(&d1.join("data/test")).unwrap().into_iter().map(|e| e.subject_id).collect();
    let train_ids: Vec<_> = data::manifest(&d1.join("data/train")).unwrap().into_iter().map(|e| e.subject_id).collect();
    assert!(test_ids.iter().all(|t| !train_ids.contains(t)), "held-out subjects are new");
}

#[test]
fn cli_reports_unusable_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain-file");
    fs::write(&file, "x").unwrap();
    let out = Command::new(EXE)
        .args(["generate", "--out"])
        .arg(file.join("sub"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn cli_rejects_unknown_regime() {
    let out = Command::new(EXE).args(["train", "--regime", "solo"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn training_without_data_fails_clearly() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tiny(tmp.path(), "");
    let err = train::train(&with_regime(&c, Regime::CentralizedA), Path::new(EXE)).unwrap_err();
    assert!(format!("{err:#}").contains("run generate first"), "{err:#}");
    let err = train::train(&with_regime(&c, Regime::Federated), Path::new(EXE)).unwrap_err();
    assert!(format!("{err:#}").contains("run generate first"), "{err:#}");
}

#[test]
fn single_institution_federation_equals_centralized() {
    let tmp = tempfile::tempdir().unwrap();
    let c = single(tmp.path(), "label_noise=0.5");
    data::generate(&c, false).unwrap();
    train::train(&with_regime(&c, Regime::CentralizedA), Path::new(EXE)).unwrap();
    train::train(&with_regime(&c, Regime::Federated), Path::new(EXE)).unwrap();
    let (central, fed) = (load(&c, Regime::CentralizedA), load(&c, Regime::Federated));
    assert!(same_model(&central, &fed));
    let (b0, _) = initial_weights(&c.train.unet, c.seed);
    assert!(!same_bits(&fed.breast_net.weights, &b0), "training moved the weights");
    let check = replay_session(&c.model_dir(Regime::Federated).join(SESSION_FILE)).unwrap();
    assert_eq!(check.outcome.rounds, 2);
    assert_eq!(check.matches_saved_model, Some(true));
}

#[test]
fn zero_rounds_persist_initial_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tiny(tmp.path(), "epochs=0\nregime=federated");
    data::generate(&c, false).unwrap();
    train::train(&c, Path::new(EXE)).unwrap();
    let m = load(&c, Regime::Federated);
    let (b, d) = initial_weights(&c.train.unet, c.seed);
    assert!(same_bits(&m.breast_net.weights, &b) && same_bits(&m.dense_net.weights, &d));
}

#[test]
fn occupied_port_fails_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let holder = TcpListener::bind("127.0.0.1:0").unwrap();
    let c = tiny(tmp.path(), &format!("regime=federated\nlisten={}", holder.local_addr().unwrap()));
    data::generate(&c, false).unwrap();
    let err = train::train(&c, Path::new(EXE)).unwrap_err();
    assert!(format!("{err:#}").contains("in use"), "{err:#}");
}

#[test]
fn full_experiment_reports_every_cell_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tiny(tmp.path(), "");
    data::generate(&c, false).unwrap();
    for r in Regime::ALL {
        train::train(&with_regime(&c, r), Path::new(EXE)).unwrap();
    }

    // replaying the config reproduces the model exactly
    let before = load(&c, Regime::CentralizedPooled);
    train::train(&with_regime(&c, Regime::CentralizedPooled), Path::new(EXE)).unwrap();
    assert!(same_model(&before, &load(&c, Regime::CentralizedPooled)));

    let r = report::evaluate(&c).unwrap();
    let insts = ["inst-a", "inst-b"];
    assert_eq!(r.metrics.len(), 8);
    assert_eq!(r.correlation.len(), 8);
    assert_eq!(r.wilcoxon.len(), 3 * 2 * PAIRED_METRICS.len());
    for regime in Regime::ALL {
        for inst in insts {
            let m = r.metrics(regime, inst).unwrap_or_else(|| panic!("missing {regime} on {inst}"));
            assert_eq!(m.n_images, if inst == "inst-a" { 4 } else { 3 });
            assert!(r.correlation.iter().any(|x| x.regime == regime && x.institution == inst));
            if regime != Regime::Federated {
                for metric in PAIRED_METRICS {
                    assert!(r
                        .wilcoxon
                        .iter()
                        .any(|w| w.baseline == regime && w.institution == inst && w.metric == metric));
                }
            }
        }
    }
    let reports = c.report_dir();
    let metrics = fs::read_to_string(reports.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some(report::METRICS_HEADER));
    assert_eq!(metrics.lines().count(), 9);
    assert!(reports.join("scatter/federated__inst-b.csv").exists());
    assert!(fs::read_to_string(reports.join("report.txt")).unwrap().contains("centralized-pooled"));

    let first = read_all(&reports);
    report::evaluate(&c).unwrap();
    assert_eq!(first, read_all(&reports), "evaluation output is byte-identical");

    let out = Command::new(EXE).arg("replay").arg("--out").arg(&c.out).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("bit for bit"));
}

#[test]
fn cli_end_to_end_uses_stored_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("exp.txt");
    let out = tmp.path().join("run");
    let mut c = single(&out, "epochs=1");
    c.evaluate = vec![Regime::CentralizedA];
    fs::write(&cfg_path, c.to_text()).unwrap();
    let run = |args: &[&str]| {
        let o = Command::new(EXE).args(args).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let cfg = cfg_path.to_str().unwrap();
    let out_s = out.to_str().unwrap();
    run(&["generate", "--config", cfg]);
    // later commands find <out>/config.txt on their own
    run(&["train", "--out", out_s, "--regime", "centralized-A"]);
    let table = run(&["evaluate", "--out", out_s]);
    assert!(table.contains("centralized-A"), "{table}");
    assert!(out.join("reports/eval/centralized-A__inst-a.csv").exists());
}
