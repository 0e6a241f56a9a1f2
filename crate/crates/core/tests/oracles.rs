//! Independent reference implementations checked against the library.

use xres_core::analytics::{srcc, wilcoxon_signed_rank, TestMethod};
use xres_core::imaging::{lanczos_resample, Raster};
use rand::Rng;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn kernel(x: f64) -> f64 {
    if x.abs() < 3.0 {
        sinc(x) * sinc(x / 3.0)
    } else {
        0.0
    }
}

/// Direct (non-separable) 2-D weighted sum over every source pixel in the
/// kernel footprint, border-clamped, normalized by the total weight.
fn direct_lanczos(img: &Raster<f64>, ow: usize, oh: usize) -> Vec<f64> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let rx = w as f64 / ow as f64;
    let ry = h as f64 / oh as f64;
    let (sx, sy) = (rx.max(1.0), ry.max(1.0));
    let mut out = vec![0.0; ow * oh * c];
    for oy in 0..oh {
        let cy = (oy as f64 + 0.5) * ry - 0.5;
        for ox in 0..ow {
            let cx = (ox as f64 + 0.5) * rx - 0.5;
            for ch in 0..c {
                let (mut acc, mut total) = (0.0, 0.0);
                let ylo = (cy - 3.0 * sy).floor() as i64;
                let yhi = (cy + 3.0 * sy).ceil() as i64;
                let xlo = (cx - 3.0 * sx).floor() as i64;
                let xhi = (cx + 3.0 * sx).ceil() as i64;
                for y in ylo..=yhi {
                    let wy = kernel((y as f64 - cy) / sy);
                    for x in xlo..=xhi {
                        let wt = wy * kernel((x as f64 - cx) / sx);
                        let px = x.clamp(0, w as i64 - 1) as usize;
                        let py = y.clamp(0, h as i64 - 1) as usize;
                        acc += wt * img.get(px, py, ch);
                        total += wt;
                    }
                }
                out[(oy * ow + ox) * c + ch] = (acc / total).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn impulse(w: usize, h: usize, at: (usize, usize), base: f64, amp: f64) -> Raster<f64> {
    Raster::from_fn(w, h, 1, |x, y, _| if (x, y) == at { base + amp } else { base }).unwrap()
}

#[test]
fn lanczos_impulse_matches_direct_convolution() {
    let cases = [
        (impulse(64, 48, (30, 20), 0.5, 0.4), 16, 12),
        (impulse(64, 48, (0, 0), 0.5, 0.4), 16, 12),
        (impulse(64, 48, (31, 23), 0.0, 1.0), 32, 24),
        (impulse(40, 30, (7, 29), 0.2, 0.7), 12, 9),
        (impulse(12, 9, (5, 4), 0.5, 0.4), 48, 36),
    ];
    for (img, ow, oh) in cases {
        let lib = lanczos_resample(&img, ow, oh).unwrap();
        let oracle = direct_lanczos(&img, ow, oh);
        for (a, b) in lib.samples().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn lanczos_random_rgb_matches_direct_convolution() {
    let mut rng = xres_core::rng::seeded(17);
    let img = Raster::from_fn(27, 19, 3, |_, _, _| rng.random_range(0.0..1.0)).unwrap();
    for (ow, oh) in [(9, 7), (13, 5), (40, 30)] {
        let lib = lanczos_resample(&img, ow, oh).unwrap();
        let oracle = direct_lanczos(&img, ow, oh);
        for (a, b) in lib.samples().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

/// Two-sided p-value by enumerating all 2^n sign assignments of the
/// average ranks of |d|.
fn brute_force_wilcoxon(x: &[f64], y: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - a).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return (0.0, 1.0);
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&a| {
            let below = abs.iter().filter(|&&b| b < a).count() as f64;
            let equal = abs.iter().filter(|&&b| b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w = w_plus.min(total - w_plus);
    let mut le = 0u64;
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s <= w + 1e-9 {
            le += 1;
        }
    }
    (w, (2.0 * le as f64 / (1u64 << n) as f64).min(1.0))
}

#[test]
fn wilcoxon_exact_matches_enumeration() {
    let mut rng = xres_core::rng::seeded(99);
    for n in 1..=12 {
        for trial in 0..25 {
            // integer-valued data on a narrow range produces ties and zeros
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(1..8) as f64).collect();
            let y: Vec<f64> = x
                .iter()
                .map(|v| v + (rng.random_range(-3..4) + if trial % 3 == 0 { 1 } else { 0 }) as f64)
                .collect();
            let (w, p) = brute_force_wilcoxon(&x, &y);
            let r = wilcoxon_signed_rank(&x, &y).unwrap();
            assert_eq!(r.method, TestMethod::Exact);
            assert_eq!(r.statistic, w, "n={n} trial={trial}");
            assert!((r.p_value - p).abs() < 1e-15, "n={n} trial={trial}: {} vs {p}", r.p_value);
        }
    }
}

#[test]
fn srcc_matches_textbook_formula_without_ties() {
    let mut rng = xres_core::rng::seeded(4);
    for n in [3usize, 10, 57] {
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let rank = |v: &[f64], i: usize| v.iter().filter(|&&b| b < v[i]).count() as f64 + 1.0;
        let d2: f64 = (0..n).map(|i| (rank(&x, i) - rank(&y, i)).powi(2)).sum();
        let nf = n as f64;
        let expected = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        assert!((srcc(&x, &y).unwrap() - expected).abs() < 1e-12);
    }
}
