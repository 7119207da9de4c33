//! Brute-force reference implementations used to check the library. They are
//! written from the definitions, without reusing any library internals.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tofalign::{FlowField, ImageBuffer, Mask};

pub fn clamp(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, 1, |_, _, _| rng.random_range(lo..hi))
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> Mask {
    Mask::from_fn(w, h, |_, _| rng.random_bool(p))
}

/// Replicate-padded 3x3 correlation with the Sobel taps.
pub fn sobel_oracle(img: &ImageBuffer) -> (Vec<f64>, Vec<f64>) {
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let (w, h) = img.size();
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let v = img.get(clamp(x as i64 + dx, w), clamp(y as i64 + dy, h));
                    gx[y * w + x] += kx[(dy + 1) as usize][(dx + 1) as usize] * v;
                    gy[y * w + x] += kx[(dx + 1) as usize][(dy + 1) as usize] * v;
                }
            }
        }
    }
    (gx, gy)
}

/// `(data, grad, total)` of the masked L1 depth + Sobel-gradient loss.
pub fn depth_loss_oracle(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    mask: &Mask,
    lambda: f64,
) -> (f64, f64, f64) {
    let (px, py) = sobel_oracle(pred);
    let (gx, gy) = sobel_oracle(gt);
    let w = pred.width();
    let (mut data, mut grad, mut n) = (0.0, 0.0, 0.0);
    for y in 0..pred.height() {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let i = y * w + x;
            n += 1.0;
            data += (pred.get(x, y) - gt.get(x, y)).abs();
            grad += (px[i] - gx[i]).abs() + (py[i] - gy[i]).abs();
        }
    }
    (data / n, grad / n, data / n + lambda * grad / n)
}

pub fn aepe_oracle(pred: &FlowField, gt: &FlowField, mask: &Mask) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if mask.get(x, y) {
                let (a, b) = pred.get(x, y);
                let (c, d) = gt.get(x, y);
                s += ((a - c).powi(2) + (b - d).powi(2)).sqrt();
                n += 1.0;
            }
        }
    }
    s / n
}

/// `[low, mid, high, all]` quantile MAEs by explicit rank counting.
pub fn quantile_oracle(
    input: &ImageBuffer,
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    mask: &Mask,
    limit: f64,
) -> ([f64; 4], [usize; 4]) {
    let w = gt.width();
    let mut px = Vec::new();
    for y in 0..gt.height() {
        for x in 0..w {
            if mask.get(x, y) && gt.get(x, y) < limit {
                px.push((
                    (input.get(x, y) - gt.get(x, y)).abs(),
                    y * w + x,
                    (pred.get(x, y) - gt.get(x, y)).abs(),
                ));
            }
        }
    }
    let n = px.len();
    let mut sums = [0.0; 4];
    let mut counts = [0usize; 4];
    let mut all = 0.0;
    for p in &px {
        let rank = px
            .iter()
            .filter(|q| q.0 < p.0 || (q.0 == p.0 && q.1 < p.1))
            .count();
        let class = (0..4)
            .find(|&c| rank >= c * n / 4 && rank < (c + 1) * n / 4)
            .unwrap();
        sums[class] += p.2;
        counts[class] += 1;
        all += p.2;
    }
    (
        [
            sums[0] / counts[0] as f64,
            sums[1] / counts[1] as f64,
            sums[2] / counts[2] as f64,
            all / n as f64,
        ],
        counts,
    )
}

/// Least-squares line `target ≈ slope / depth + intercept` by Cramer's rule.
pub fn line_fit_oracle(targets: &[f64], depths: &[f64]) -> (f64, f64) {
    let (mut saa, mut sa, mut sab, mut sb) = (0.0, 0.0, 0.0, 0.0);
    for (&b, &d) in targets.iter().zip(depths) {
        let a = 1.0 / d;
        saa += a * a;
        sa += a;
        sab += a * b;
        sb += b;
    }
    let n = targets.len() as f64;
    let det = saa * n - sa * sa;
    ((sab * n - sa * sb) / det, (saa * sb - sa * sab) / det)
}

/// How each filter variant treats normalisation and bias, spelled out
/// independently of the library: `(normalise, bias: 0 none / 1 first / 2 after)`.
pub fn variant_table(name: &str) -> (bool, u8) {
    match name {
        "tof-kpn" => (true, 1),
        "vanilla" => (false, 2),
        "aft-bias" => (true, 2),
        "no-norm" => (false, 1),
        "no-norm-no-bias" => (false, 0),
        "no-bias" => (true, 0),
        other => panic!("unknown variant {other}"),
    }
}

/// Per-pixel kernel filter with replicate padding.
pub fn kpn_oracle(
    depth: &ImageBuffer,
    weights: &[f64],
    bias: &ImageBuffer,
    k: usize,
    variant: &str,
) -> Vec<f64> {
    let (normalise, placement) = variant_table(variant);
    let (w, h) = depth.size();
    let r = (k / 2) as i64;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let kern = &weights[(y * w + x) * k * k..(y * w + x + 1) * k * k];
            let norm = if normalise {
                kern.iter().map(|v| v.abs()).sum::<f64>().max(1e-12)
            } else {
                1.0
            };
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sx, sy) = (clamp(x as i64 + dx, w), clamp(y as i64 + dy, h));
                    let mut v = depth.get(sx, sy);
                    if placement == 1 {
                        v += bias.get(sx, sy);
                    }
                    acc += kern[((dy + r) * k as i64 + dx + r) as usize] * v;
                }
            }
            acc /= norm;
            if placement == 2 {
                acc += bias.get(x, y);
            }
            out[y * w + x] = acc;
        }
    }
    out
}
