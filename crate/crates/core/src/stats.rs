//! Evaluation statistics: Dice, MAE, Spearman correlation and the Wilcoxon
//! signed-rank test, plus per-image evaluation records.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::image::BinaryMask;

fn stats_err(msg: impl Into<String>) -> Error {
    Error::Stats(msg.into())
}

fn std_normal_sf(z: f64) -> f64 {
    Normal::standard().sf(z)
}

/// `2|X∩Y| / (|X| + |Y|)`; two empty masks agree perfectly (1.0).
pub fn dice(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    let inter = x.intersection_count(y)?;
    let total = x.count() + y.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Mean and sample standard deviation (`n − 1` denominator) of
/// `|true − pred|`. A single pair has standard deviation 0.
pub fn mae(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(stats_err("MAE of an empty set"));
    }
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(stats_err("MAE input contains non-finite values"));
    }
    let errs: Vec<f64> = pairs.iter().map(|(t, p)| (t - p).abs()).collect();
    Ok(mean_std(&errs))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ alone (Pearson correlation of average ranks); needs n ≥ 3.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(stats_err(format!("length mismatch {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(stats_err("Spearman needs at least 3 pairs"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(stats_err("Spearman input contains non-finite values"));
    }
    pearson(&average_ranks(xs), &average_ranks(ys)).ok_or_else(|| stats_err("constant input: ρ undefined"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationResult {
    pub rho: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

/// Samples at or above this size use the normal reference for the t
/// statistic.
pub const NORMAL_APPROX_MIN_N: usize = 30;
const Z_975: f64 = 1.959_963_984_540_054;

/// Spearman's ρ with a two-sided p-value from `t = ρ·√((n−2)/(1−ρ²))` and a
/// 95% Fisher-z interval with Bonett–Wright standard error
/// `√((1 + ρ²/2)/(n − 3))`. Needs n ≥ 4.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    let rho = spearman_rho(xs, ys)?;
    let n = xs.len();
    if n < 4 {
        return Err(stats_err("Spearman confidence interval needs at least 4 pairs"));
    }
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = (rho * (df / (1.0 - rho * rho)).sqrt()).abs();
        let sf = if n >= NORMAL_APPROX_MIN_N {
            std_normal_sf(t)
        } else {
            StudentsT::new(0.0, 1.0, df).expect("df > 0").sf(t)
        };
        (2.0 * sf).min(1.0)
    };
    let z = rho.atanh();
    let se = ((1.0 + rho * rho / 2.0) / (n - 3) as f64).sqrt();
    let ci_low = (z - Z_975 * se).tanh().min(rho);
    let ci_high = (z + Z_975 * se).tanh().max(rho);
    Ok(CorrelationResult {
        rho,
        p_value,
        ci_low,
        ci_high,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    pub p_value: f64,
    /// Differences left after dropping zeros.
    pub n: usize,
    pub exact: bool,
}

/// Largest tie-free sample for which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 50;

/// Two-sided Wilcoxon signed-rank test on paired differences.
///
/// Zero differences are dropped and |d| is ranked with average ranks. With
/// no ties and `n ≤ EXACT_MAX_N` the p-value comes from the exact null
/// distribution of W+; otherwise from the normal approximation with
/// tie-corrected variance `n(n+1)(2n+1)/24 − Σ(t³−t)/48` and continuity
/// correction 0.5. All-zero input gives W+ = 0 and p = 1.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.is_empty() {
        return Err(stats_err("Wilcoxon test of an empty sample"));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(stats_err("Wilcoxon input contains non-finite values"));
    }
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            p_value: 1.0,
            n: 0,
            exact: true,
        });
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }

    if tie_term == 0.0 && n <= EXACT_MAX_N {
        return Ok(WilcoxonResult {
            w_plus,
            p_value: exact_p(n, w_plus as u64),
            n,
            exact: true,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        (2.0 * std_normal_sf(z)).min(1.0)
    };
    Ok(WilcoxonResult {
        w_plus,
        p_value,
        n,
        exact: false,
    })
}

/// Two-sided exact p for W+ = `w` with ranks 1..=n and no ties: counts of
/// sign assignments per rank sum by dynamic programming.
fn exact_p(n: usize, w: u64) -> f64 {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for r in 1..=n {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let total = 2f64.powi(n as i32);
    let w = w as usize;
    let lower: u64 = counts[..=w].iter().sum();
    let upper: u64 = counts[w..].iter().sum();
    (2.0 * lower.min(upper) as f64 / total).min(1.0)
}

/// Per-image evaluation outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub subject_id: String,
    pub image_id: usize,
    pub pd_true: f64,
    /// `None` when the predicted breast was empty.
    pub pd_pred: Option<f64>,
    pub breast_dsc: f64,
    pub dense_dsc: f64,
}

impl EvalRecord {
    pub fn abs_error(&self) -> Option<f64> {
        self.pd_pred.map(|p| (p - self.pd_true).abs())
    }
}

pub const EVAL_CSV_HEADER: &str = "subject_id,image_id,pd_true,pd_pred,breast_dsc,dense_dsc";

/// CSV with [`EVAL_CSV_HEADER`]; an undefined prediction is written `NA`.
/// Floats use the shortest representation that parses back exactly.
pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in records {
        let pred = r.pd_pred.map_or("NA".to_string(), |p| p.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.subject_id, r.image_id, r.pd_true, pred, r.breast_dsc, r.dense_dsc
        )
        .expect("write to string");
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(EVAL_CSV_HEADER) {
        return Err(stats_err("evaluation CSV header mismatch"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || stats_err(format!("evaluation CSV row {} is malformed", i + 2));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(EvalRecord {
            subject_id: f[0].to_string(),
            image_id: f[1].parse().map_err(|_| bad())?,
            pd_true: num(f[2])?,
            pd_pred: if f[3] == "NA" { None } else { Some(num(f[3])?) },
            breast_dsc: num(f[4])?,
            dense_dsc: num(f[5])?,
        });
    }
    Ok(out)
}

/// Per-subject means of image-level metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSummary {
    pub subject_id: String,
    pub n_images: usize,
    pub pd_true: f64,
    /// Mean over images with a defined prediction; `None` if there are none.
    pub pd_pred: Option<f64>,
    pub abs_error: Option<f64>,
    pub breast_dsc: f64,
    pub dense_dsc: f64,
}

/// Groups records by subject (sorted by id) and averages each metric.
pub fn collapse_by_subject(records: &[EvalRecord]) -> Vec<SubjectSummary> {
    let mut groups: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.subject_id).or_default().push(r);
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    groups
        .into_iter()
        .map(|(id, rs)| {
            let all = |f: fn(&EvalRecord) -> f64| mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>()).expect("non-empty group");
            let preds: Vec<f64> = rs.iter().filter_map(|r| r.pd_pred).collect();
            let errs: Vec<f64> = rs.iter().filter_map(|r| r.abs_error()).collect();
            SubjectSummary {
                subject_id: id.to_string(),
                n_images: rs.len(),
                pd_true: all(|r| r.pd_true),
                pd_pred: mean(&preds),
                abs_error: mean(&errs),
                breast_dsc: all(|r| r.breast_dsc),
                dense_dsc: all(|r| r.dense_dsc),
            }
        })
        .collect()
}

/// Image-level summary of one model on one test set. DSCs are means of
/// per-image values; MAE covers images with a defined prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n_images: usize,
    pub n_undefined: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub breast_dsc: f64,
    pub dense_dsc: f64,
}

pub fn summarize(records: &[EvalRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(stats_err("no evaluation records"));
    }
    let pairs: Vec<(f64, f64)> = records.iter().filter_map(|r| r.pd_pred.map(|p| (r.pd_true, p))).collect();
    let (mae_mean, mae_std) = if pairs.is_empty() { (f64::NAN, f64::NAN) } else { mae(&pairs)? };
    let n = records.len() as f64;
    Ok(Summary {
        n_images: records.len(),
        n_undefined: records.len() - pairs.len(),
        mae_mean,
        mae_std,
        breast_dsc: records.iter().map(|r| r.breast_dsc).sum::<f64>() / n,
        dense_dsc: records.iter().map(|r| r.dense_dsc).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, bits: &[usize]) -> BinaryMask {
        BinaryMask::from_fn(w, 1, |x, _| bits.contains(&x))
    }

    #[test]
    fn dice_examples() {
        let x = mask(10, &[0, 1, 2, 3]);
        let y = mask(10, &[1, 2, 3, 4, 5, 6]);
        assert!((dice(&x, &y).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(dice(&x, &x).unwrap(), 1.0);
        assert_eq!(dice(&x, &mask(10, &[7, 8])).unwrap(), 0.0);
        assert_eq!(dice(&mask(10, &[]), &mask(10, &[])).unwrap(), 1.0);
        assert!(dice(&x, &mask(9, &[])).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[(5.0, 5.0), (7.0, 7.0)]).unwrap(), (0.0, 0.0));
        let (m, s) = mae(&[(10.0, 11.0), (10.0, 7.0)]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert!(mae(&[]).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman_rho(&[1., 2., 3.], &[10., 20., 30.]).unwrap(), 1.0);
        assert_eq!(spearman_rho(&[1., 2., 3.], &[30., 20., 10.]).unwrap(), -1.0);
        let r = spearman(&[1., 2., 2., 3.], &[1., 3., 2., 4.]).unwrap();
        assert!((r.rho - 4.5 / 22.5f64.sqrt()).abs() < 1e-12);
        assert!(r.ci_low <= r.rho && r.rho <= r.ci_high);
        assert!(spearman(&[1., 2., 3.], &[1., 2., 3.]).is_err());
        assert!(spearman_rho(&[1., 1., 1., 1.], &[1., 2., 3., 4.]).is_err());
    }

    #[test]
    fn spearman_p_value_references() {
        // n = 10, ρ = 0.6: t = 0.6·√(8/0.64) = 2.1213…; two-sided t(8) p ≈ 0.0667
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y = [1., 0., 3., 2., 6., 4., 9., 5., 8., 7.];
        let r = spearman(&x, &y).unwrap();
        let d2: f64 = average_ranks(&x).iter().zip(average_ranks(&y)).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((r.rho - (1.0 - 6.0 * d2 / 990.0)).abs() < 1e-12);
        let t = r.rho * (8.0 / (1.0 - r.rho * r.rho)).sqrt();
        let p = 2.0 * StudentsT::new(0.0, 1.0, 8.0).unwrap().sf(t);
        assert!((r.p_value - p).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_examples() {
        let r = wilcoxon_signed_rank(&[1., -2., 3., -4., 5.]).unwrap();
        assert_eq!(r.w_plus, 9.0);
        // 13 of the 32 sign patterns reach W+ ≥ 9
        assert_eq!(r.p_value, 2.0 * 13.0 / 32.0);
        assert!(r.exact);
        assert_eq!(wilcoxon_signed_rank(&[1., 2., 3., 4., 5.]).unwrap().w_plus, 15.0);
        let sym = wilcoxon_signed_rank(&[1.0, -1.0]).unwrap();
        assert_eq!((sym.w_plus, sym.p_value), (1.5, 1.0));
        let zeros = wilcoxon_signed_rank(&[0.0, 0.0]).unwrap();
        assert_eq!((zeros.w_plus, zeros.p_value), (0.0, 1.0));
    }

    #[test]
    fn exact_distribution_small_cases() {
        // n = 3: rank sums 0,1,2,3,3,4,5,6 → W+ = 6 has two-sided p 2/8
        assert_eq!(exact_p(3, 6), 0.25);
        assert_eq!(exact_p(3, 3), 1.0);
        assert_eq!(exact_p(1, 1), 1.0);
    }

    #[test]
    fn csv_roundtrip() {
        let recs = vec![
            EvalRecord {
                subject_id: "a-0001".into(),
                image_id: 2,
                pd_true: 12.345678901234567,
                pd_pred: Some(0.1 + 0.2),
                breast_dsc: 0.987,
                dense_dsc: 1.0 / 3.0,
            },
            EvalRecord {
                subject_id: "a-0002".into(),
                image_id: 0,
                pd_true: 5.0,
                pd_pred: None,
                breast_dsc: 0.0,
                dense_dsc: 1.0,
            },
        ];
        let csv = records_to_csv(&recs);
        assert!(csv.starts_with(EVAL_CSV_HEADER));
        assert_eq!(records_from_csv(&csv).unwrap(), recs);
        assert!(records_from_csv("x,y\n").is_err());
    }

    #[test]
    fn collapse_means() {
        let rec = |s: &str, i, d| EvalRecord {
            subject_id: s.into(),
            image_id: i,
            pd_true: 10.0,
            pd_pred: Some(12.0),
            breast_dsc: d,
            dense_dsc: d,
        };
        let out = collapse_by_subject(&[rec("s1", 0, 0.8), rec("s2", 0, 0.5), rec("s1", 1, 1.0)]);
        assert_eq!(out.len(), 2);
        assert!((out[0].breast_dsc - 0.9).abs() < 1e-15);
        assert_eq!(out[0].n_images, 2);
        assert_eq!(out[1].abs_error, Some(2.0));
    }

    #[test]
    fn report_dsc_is_image_mean() {
        // pooled-pixel DSC would be 2·10/(10+10+2) = 0.909…; image mean is 0.5
        let big = mask(20, &(0..10).collect::<Vec<_>>());
        let a = mask(20, &[0]);
        let b = mask(20, &[1]);
        let recs = vec![
            EvalRecord {
                subject_id: "s".into(),
                image_id: 0,
                pd_true: 0.0,
                pd_pred: Some(0.0),
                breast_dsc: dice(&big, &big).unwrap(),
                dense_dsc: 0.0,
            },
            EvalRecord {
                subject_id: "s".into(),
                image_id: 1,
                pd_true: 0.0,
                pd_pred: Some(0.0),
                breast_dsc: dice(&a, &b).unwrap(),
                dense_dsc: 0.0,
            },
        ];
        assert_eq!(summarize(&recs).unwrap().breast_dsc, 0.5);
    }
}
