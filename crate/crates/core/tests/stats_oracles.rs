use fedpd::stats::{dice, mae, spearman, spearman_rho, wilcoxon_signed_rank};
use fedpd::BinaryMask;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Average rank by counting: #(less) + (#(equal) + 1) / 2.
fn count_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Pearson via the raw-moment formula.
fn raw_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

#[test]
fn spearman_matches_rank_then_pearson_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(4..60);
        // small integer support forces ties
        let levels = rng.random_range(3..12);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5).collect();
        let Ok(rho) = spearman_rho(&x, &y) else {
            continue;
        };
        let oracle = raw_pearson(&count_ranks(&x), &count_ranks(&y));
        assert!((rho - oracle).abs() < 1e-12, "n={n}: {rho} vs {oracle}");
        checked += 1;
    }
}

/// Exact two-sided p from all 2^n sign assignments of ranks 1..=n.
fn enumerate_p(n: usize, w_plus: f64) -> f64 {
    let mean = (n * (n + 1)) as f64 / 4.0;
    let dev = (w_plus - mean).abs();
    let total = 1u64 << n;
    let extreme = (0..total)
        .filter(|mask| {
            let w: usize = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).sum();
            (w as f64 - mean).abs() >= dev - 1e-9
        })
        .count();
    extreme as f64 / total as f64
}

#[test]
fn wilcoxon_matches_exact_enumeration_up_to_eight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for n in 1..=8usize {
        for _ in 0..200 {
            let mut mags: Vec<f64> = Vec::new();
            while mags.len() < n {
                let m = rng.random_range(1..1000) as f64 / 10.0;
                if !mags.contains(&m) {
                    mags.push(m);
                }
            }
            let diffs: Vec<f64> = mags.iter().map(|&m| if rng.random_bool(0.5) { m } else { -m }).collect();
            let r = wilcoxon_signed_rank(&diffs).unwrap();
            assert!(r.w_plus >= 0.0 && r.w_plus <= (n * (n + 1) / 2) as f64);
            let gap = (r.p_value - enumerate_p(n, r.w_plus)).abs();
            worst = worst.max(gap);
        }
    }
    assert!(worst <= 0.02, "worst gap {worst}");
}

#[test]
fn wilcoxon_tied_example_against_enumeration() {
    // ranks 1.5, 1.5: sign patterns give W+ ∈ {0, 1.5, 1.5, 3}
    let r = wilcoxon_signed_rank(&[1.0, -1.0]).unwrap();
    assert_eq!(r.w_plus, 1.5);
    assert_eq!(r.p_value, 1.0);
}

#[test]
fn dice_and_mae_match_naive_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
        let px: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.3)).collect();
        let py: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.6)).collect();
        let (x, y) = (BinaryMask::new(w, h, px.clone()).unwrap(), BinaryMask::new(w, h, py.clone()).unwrap());
        let (mut a, mut b, mut both) = (0.0, 0.0, 0.0);
        for i in 0..w * h {
            a += px[i] as u8 as f64;
            b += py[i] as u8 as f64;
            both += (px[i] && py[i]) as u8 as f64;
        }
        let naive = if a + b == 0.0 { 1.0 } else { 2.0 * both / (a + b) };
        assert!((dice(&x, &y).unwrap() - naive).abs() < 1e-12);
    }
    for _ in 0..100 {
        let n = rng.random_range(2..100);
        let pairs: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
        let (m, s) = mae(&pairs).unwrap();
        let mut sum = 0.0;
        for &(t, p) in &pairs {
            sum += if t > p { t - p } else { p - t };
        }
        let mean = sum / n as f64;
        let mut sq = 0.0;
        for &(t, p) in pairs.iter().rev() {
            let e = (t - p).abs() - mean;
            sq += e * e;
        }
        assert!((m - mean).abs() < 1e-12);
        assert!((s - (sq / (n - 1) as f64).sqrt()).abs() < 1e-12);
    }
}

fn distinct(v: &[f64]) -> bool {
    v.iter().any(|&a| a != v[0])
}

proptest! {
    #[test]
    fn dice_is_symmetric(bits in proptest::collection::vec(any::<(bool, bool)>(), 1..200)) {
        let n = bits.len();
        let x = BinaryMask::new(n, 1, bits.iter().map(|b| b.0).collect()).unwrap();
        let y = BinaryMask::new(n, 1, bits.iter().map(|b| b.1).collect()).unwrap();
        prop_assert_eq!(dice(&x, &y).unwrap(), dice(&y, &x).unwrap());
        if !x.is_empty() {
            prop_assert_eq!(dice(&x, &x).unwrap(), 1.0);
        }
    }

    #[test]
    fn spearman_invariant_under_monotone_transform(
        pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 4..50)
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(distinct(&x) && distinct(&y));
        let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        prop_assert_eq!(spearman_rho(&x, &y).unwrap(), spearman_rho(&ex, &y).unwrap());
        prop_assert!((spearman_rho(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let r = spearman(&x, &y).unwrap();
        prop_assert!(r.ci_low <= r.rho && r.rho <= r.ci_high);
        prop_assert!((-1.0..=1.0).contains(&r.rho));
        prop_assert!((0.0..=1.0).contains(&r.p_value));
    }

    #[test]
    fn wilcoxon_statistic_bounds(d in proptest::collection::vec(-3i32..4, 1..60)) {
        let diffs: Vec<f64> = d.iter().map(|&v| v as f64).collect();
        let r = wilcoxon_signed_rank(&diffs).unwrap();
        let n = r.n as f64;
        prop_assert!(r.w_plus >= 0.0 && r.w_plus <= n * (n + 1.0) / 2.0);
        prop_assert!((0.0..=1.0).contains(&r.p_value));
        let neg: Vec<f64> = diffs.iter().map(|v| -v).collect();
        prop_assert_eq!(wilcoxon_signed_rank(&neg).unwrap().p_value, r.p_value);
    }
}
