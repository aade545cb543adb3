//! Held-out evaluation and the comparison tables.
//!
//! Files under `<out>/reports`:
//! - `eval/<regime>__<institution>.csv`: per-image records
//! - `scatter/<regime>__<institution>.csv`: `pd_true,pd_pred` points
//! - `metrics.csv`: MAE, DSC per regime and test institution
//! - `wilcoxon.csv`: federated against each baseline, paired by subject
//! - `correlation.csv`: Spearman rho of predicted against true PD
//! - `report.txt`: the three tables aligned for reading

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::thread;

use anyhow::{bail, Context, Result};
use fedpd::cascade::{CascadeModel, PDResult, INFER_BATCH};
use fedpd::phantom::PhantomSample;
use fedpd::stats::{self, CorrelationResult, EvalRecord, Summary, WilcoxonResult};

use crate::config::{ExperimentConfig, Regime};
use crate::data;

pub const METRICS_HEADER: &str = "regime,test_institution,n_images,n_undefined,mae_mean,mae_std,breast_dsc,dense_dsc";
pub const WILCOXON_HEADER: &str = "model,baseline,test_institution,metric,n_pairs,w_plus,p_value,method";
pub const CORRELATION_HEADER: &str = "regime,test_institution,n,rho,p_value,ci_low,ci_high";
pub const SCATTER_HEADER: &str = "pd_true,pd_pred";

/// Subject-paired quantities compared in the Wilcoxon table.
pub const PAIRED_METRICS: [&str; 3] = ["pd_abs_error", "breast_dsc", "dense_dsc"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub regime: Regime,
    pub institution: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonRow {
    pub baseline: Regime,
    pub institution: String,
    pub metric: &'static str,
    /// `None` when no subject has the metric defined under both models.
    pub result: Option<WilcoxonResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRow {
    pub regime: Regime,
    pub institution: String,
    /// `None` with fewer than four defined predictions.
    pub result: Option<CorrelationResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub records: Vec<(Regime, String, Vec<EvalRecord>)>,
    pub metrics: Vec<MetricsRow>,
    pub wilcoxon: Vec<WilcoxonRow>,
    pub correlation: Vec<CorrelationRow>,
}

impl ComparisonReport {
    pub fn metrics(&self, regime: Regime, institution: &str) -> Option<&Summary> {
        self.metrics
            .iter()
            .find(|m| m.regime == regime && m.institution == institution)
            .map(|m| &m.summary)
    }
}

/// Runs the cascade over `samples` and scores each image against its
/// ground truth. The output is sorted by `(subject_id, image_id)`.
pub fn evaluate_model(model: &CascadeModel, samples: &[PhantomSample]) -> Result<Vec<EvalRecord>> {
    evaluate_with(samples, |chunk| {
        let images: Vec<_> = chunk.iter().map(|s| s.image.clone()).collect();
        Ok(model.infer_batch(&images)?)
    })
}

/// Scores any predictor. `predict` sees batches of at most
/// [`INFER_BATCH`] samples; batches are spread across threads.
pub fn evaluate_with<F>(samples: &[PhantomSample], predict: F) -> Result<Vec<EvalRecord>>
where
    F: Fn(&[PhantomSample]) -> Result<Vec<PDResult>> + Sync,
{
    for s in samples {
        if s.breast_truth.size() != s.image.size() || s.dense_truth.size() != s.image.size() {
            bail!("{} image {}: masks do not match the image size", s.subject_id, s.image_index);
        }
    }
    let threads = thread::available_parallelism().map_or(1, |n| n.get());
    let per_thread = samples.len().div_ceil(threads).max(1).next_multiple_of(INFER_BATCH);
    let predict = &predict;
    let results: Vec<Result<Vec<EvalRecord>>> = thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(per_thread)
            .map(|part| scope.spawn(move || score(part, predict)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut records = Vec::with_capacity(samples.len());
    for r in results {
        records.extend(r?);
    }
    records.sort_by(|a, b| (&a.subject_id, a.image_id).cmp(&(&b.subject_id, b.image_id)));
    Ok(records)
}

fn score<F>(samples: &[PhantomSample], predict: &F) -> Result<Vec<EvalRecord>>
where
    F: Fn(&[PhantomSample]) -> Result<Vec<PDResult>>,
{
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFER_BATCH) {
        let results = predict(chunk)?;
        if results.len() != chunk.len() {
            bail!("predictor returned {} results for {} images", results.len(), chunk.len());
        }
        for (s, r) in chunk.iter().zip(results) {
            if r.breast_mask.size() != s.image.size() {
                bail!("{} image {}: prediction is {:?}, image is {:?}", s.subject_id, s.image_index, r.breast_mask.size(), s.image.size());
            }
            out.push(EvalRecord {
                subject_id: s.subject_id.clone(),
                image_id: s.image_index,
                pd_true: s.pd_truth,
                pd_pred: r.pd_percent,
                breast_dsc: stats::dice(&r.breast_mask, &s.breast_truth)?,
                dense_dsc: stats::dice(&r.dense_mask, &s.dense_truth)?,
            });
        }
    }
    Ok(out)
}

fn load_model(config: &ExperimentConfig, regime: Regime) -> Result<CascadeModel> {
    let dir = config.model_dir(regime);
    let model = CascadeModel::load(&dir).with_context(|| format!("no usable {regime} model in {}; run train --regime {regime} first", dir.display()))?;
    if model.breast_net.config != config.train.unet {
        bail!(
            "{regime} model has U-Net {:?}, the config expects {:?}",
            model.breast_net.config,
            config.train.unet
        );
    }
    Ok(model)
}

fn paired(fed: &[EvalRecord], base: &[EvalRecord], metric: &str) -> Vec<f64> {
    let f = stats::collapse_by_subject(fed);
    let b = stats::collapse_by_subject(base);
    let value = |s: &stats::SubjectSummary| match metric {
        "pd_abs_error" => s.abs_error,
        "breast_dsc" => Some(s.breast_dsc),
        "dense_dsc" => Some(s.dense_dsc),
        _ => unreachable!("unknown metric {metric}"),
    };
    let mut diffs = Vec::new();
    for fs in &f {
        if let Some(bs) = b.iter().find(|bs| bs.subject_id == fs.subject_id) {
            if let (Some(x), Some(y)) = (value(fs), value(bs)) {
                diffs.push(x - y);
            }
        }
    }
    diffs
}

/// Evaluates every regime in `config.evaluate` on every institution's
/// held-out cohort and writes the report files.
pub fn evaluate(config: &ExperimentConfig) -> Result<ComparisonReport> {
    let n_inst = config.institutions.len();
    for r in &config.evaluate {
        r.institutions(n_inst)?;
    }
    let tests = data::load_split(config, &config.test_dir())?;

    let mut records = Vec::new();
    for &regime in &config.evaluate {
        let model = load_model(config, regime)?;
        for inst in &config.institutions {
            log::info!("evaluating {regime} on {}", inst.name());
            let recs = evaluate_model(&model, &tests[inst.name()])?;
            records.push((regime, inst.name().to_string(), recs));
        }
    }

    let mut metrics = Vec::new();
    let mut correlation = Vec::new();
    for (regime, inst, recs) in &records {
        metrics.push(MetricsRow {
            regime: *regime,
            institution: inst.clone(),
            summary: stats::summarize(recs)?,
        });
        let (t, p): (Vec<f64>, Vec<f64>) = recs.iter().filter_map(|r| r.pd_pred.map(|p| (r.pd_true, p))).unzip();
        correlation.push(CorrelationRow {
            regime: *regime,
            institution: inst.clone(),
            result: stats::spearman(&p, &t).ok(),
        });
    }

    let mut wilcoxon = Vec::new();
    let find = |r: Regime, inst: &str| records.iter().find(|(rr, i, _)| *rr == r && i == inst).map(|x| &x.2);
    if config.evaluate.contains(&Regime::Federated) {
        for &baseline in config.evaluate.iter().filter(|&&r| r != Regime::Federated) {
            for inst in &config.institutions {
                let fed = find(Regime::Federated, inst.name()).expect("evaluated");
                let base = find(baseline, inst.name()).expect("evaluated");
                for metric in PAIRED_METRICS {
                    let diffs = paired(fed, base, metric);
                    wilcoxon.push(WilcoxonRow {
                        baseline,
                        institution: inst.name().to_string(),
                        metric,
                        result: if diffs.is_empty() { None } else { Some(stats::wilcoxon_signed_rank(&diffs)?) },
                    });
                }
            }
        }
    }

    let report = ComparisonReport {
        records,
        metrics,
        wilcoxon,
        correlation,
    };
    write_report(&config.report_dir(), &report)?;
    Ok(report)
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "NA".into()
    }
}

fn fixed(v: f64, digits: usize) -> String {
    if v.is_finite() {
        format!("{v:.digits$}")
    } else {
        "NA".into()
    }
}

fn file_stem(regime: Regime, inst: &str) -> String {
    format!("{}__{inst}.csv", regime.as_str())
}

pub fn metrics_csv(report: &ComparisonReport) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in &report.metrics {
        let x = &m.summary;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            m.regime,
            m.institution,
            x.n_images,
            x.n_undefined,
            num(x.mae_mean),
            num(x.mae_std),
            num(x.breast_dsc),
            num(x.dense_dsc)
        )
        .expect("write to string");
    }
    s
}

pub fn wilcoxon_csv(report: &ComparisonReport) -> String {
    let mut s = format!("{WILCOXON_HEADER}\n");
    for w in &report.wilcoxon {
        let (n, wp, p, method) = match &w.result {
            Some(r) => (
                r.n.to_string(),
                num(r.w_plus),
                num(r.p_value),
                if r.exact { "exact" } else { "normal" },
            ),
            None => ("0".into(), "NA".into(), "NA".into(), "NA"),
        };
        writeln!(
            s,
            "{},{},{},{},{n},{wp},{p},{method}",
            Regime::Federated,
            w.baseline,
            w.institution,
            w.metric
        )
        .expect("write to string");
    }
    s
}

pub fn correlation_csv(report: &ComparisonReport) -> String {
    let mut s = format!("{CORRELATION_HEADER}\n");
    for c in &report.correlation {
        match &c.result {
            Some(r) => writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.regime,
                c.institution,
                r.n,
                num(r.rho),
                num(r.p_value),
                num(r.ci_low),
                num(r.ci_high)
            ),
            None => writeln!(s, "{},{},0,NA,NA,NA,NA", c.regime, c.institution),
        }
        .expect("write to string");
    }
    s
}

pub fn scatter_csv(records: &[EvalRecord]) -> String {
    let mut s = format!("{SCATTER_HEADER}\n");
    for r in records {
        if let Some(p) = r.pd_pred {
            writeln!(s, "{},{}", r.pd_true, p).expect("write to string");
        }
    }
    s
}

fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut l = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                l.push_str("  ");
            }
            if i < 2 {
                write!(l, "{c:<w$}").expect("write to string");
            } else {
                write!(l, "{c:>w$}").expect("write to string");
            }
        }
        l.trim_end().to_string() + "\n"
    };
    let mut s = line(header.to_vec());
    s.push_str(&line(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for r in rows {
        s.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    s
}

pub fn text_report(report: &ComparisonReport) -> String {
    let mut s = String::from("Held-out performance\n\n");
    let rows: Vec<Vec<String>> = report
        .metrics
        .iter()
        .map(|m| {
            let x = &m.summary;
            vec![
                m.regime.to_string(),
                m.institution.clone(),
                format!("{} ± {}", fixed(x.mae_mean, 2), fixed(x.mae_std, 2)),
                fixed(x.breast_dsc, 4),
                fixed(x.dense_dsc, 4),
                format!("{}/{}", x.n_undefined, x.n_images),
            ]
        })
        .collect();
    s.push_str(&aligned(&["regime", "test set", "PD MAE", "breast DSC", "dense DSC", "undefined"], &rows));

    s.push_str("\nWilcoxon signed-rank, federated vs baseline, paired by subject\n\n");
    let rows: Vec<Vec<String>> = report
        .wilcoxon
        .iter()
        .map(|w| {
            let (n, p) = w
                .result
                .as_ref()
                .map_or(("0".into(), "NA".into()), |r| (r.n.to_string(), format!("{:.4}", r.p_value)));
            vec![w.baseline.to_string(), w.institution.clone(), w.metric.to_string(), n, p]
        })
        .collect();
    if rows.is_empty() {
        s.push_str("(federated model not evaluated)\n");
    } else {
        s.push_str(&aligned(&["baseline", "test set", "metric", "pairs", "p"], &rows));
    }

    s.push_str("\nSpearman correlation of predicted with true PD\n\n");
    let rows: Vec<Vec<String>> = report
        .correlation
        .iter()
        .map(|c| match &c.result {
            Some(r) => vec![
                c.regime.to_string(),
                c.institution.clone(),
                format!("{:.4}", r.rho),
                format!("[{:.4}, {:.4}]", r.ci_low, r.ci_high),
                format!("{:.2e}", r.p_value),
                r.n.to_string(),
            ],
            None => vec![
                c.regime.to_string(),
                c.institution.clone(),
                "NA".into(),
                "NA".into(),
                "NA".into(),
                "0".into(),
            ],
        })
        .collect();
    s.push_str(&aligned(&["regime", "test set", "rho", "95% CI", "p", "n"], &rows));
    s
}

pub fn write_report(dir: &Path, report: &ComparisonReport) -> Result<()> {
    fs::create_dir_all(dir.join("eval"))?;
    fs::create_dir_all(dir.join("scatter"))?;
    for (regime, inst, recs) in &report.records {
        fs::write(dir.join("eval").join(file_stem(*regime, inst)), stats::records_to_csv(recs))?;
        fs::write(dir.join("scatter").join(file_stem(*regime, inst)), scatter_csv(recs))?;
    }
    fs::write(dir.join("metrics.csv"), metrics_csv(report))?;
    fs::write(dir.join("wilcoxon.csv"), wilcoxon_csv(report))?;
    fs::write(dir.join("correlation.csv"), correlation_csv(report))?;
    fs::write(dir.join("report.txt"), text_report(report))?;
    Ok(())
}
