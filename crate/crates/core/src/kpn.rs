//! Per-pixel kernel filtering of depth maps, in all normalisation / bias variants.
//!
//! A [`KernelField`] holds one `k x k` kernel and one bias per pixel. Patches
//! are read row-major over the window with replicate padding at the borders.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imaging::{Boundary, ImageBuffer, Mask};
use crate::metrics;

/// Floor on the L1 norm when normalising, so all-zero kernels stay finite.
pub const NORM_EPS: f64 = 1e-12;
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelField {
    width: usize,
    height: usize,
    k: usize,
    weights: Vec<f64>,
    bias: ImageBuffer,
}

impl KernelField {
    pub fn new(
        width: usize,
        height: usize,
        k: usize,
        weights: Vec<f64>,
        bias: ImageBuffer,
    ) -> Result<Self> {
        check_k(k)?;
        if weights.len() != width * height * k * k {
            return Err(Error::Dimension(format!(
                "{}x{} field with k={} needs {} weights, got {}",
                width,
                height,
                k,
                width * height * k * k,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Domain("kernel weights must be finite".into()));
        }
        bias.require_single_channel("kernel bias")?;
        if bias.size() != (width, height) {
            return Err(Error::Dimension(
                "bias size differs from kernel field".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            k,
            weights,
            bias,
        })
    }

    /// Delta kernels and zero bias: the identity filter.
    pub fn identity(width: usize, height: usize, k: usize) -> Result<Self> {
        check_k(k)?;
        let kk = k * k;
        let mut weights = vec![0.0; width * height * kk];
        for p in 0..width * height {
            weights[p * kk + kk / 2] = 1.0;
        }
        Self::new(
            width,
            height,
            k,
            weights,
            ImageBuffer::zeros(width, height, 1),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn taps(&self) -> usize {
        self.k * self.k
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &ImageBuffer {
        &self.bias
    }

    pub fn kernel(&self, x: usize, y: usize) -> &[f64] {
        let kk = self.taps();
        let i = (y * self.width + x) * kk;
        &self.weights[i..i + kk]
    }

    fn kernel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let kk = self.taps();
        let i = (y * self.width + x) * kk;
        &mut self.weights[i..i + kk]
    }

    /// Splits into `(weights, bias)`.
    pub fn into_parts(self) -> (Vec<f64>, ImageBuffer) {
        (self.weights, self.bias)
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Contract(format!("kernel size must be odd, got {k}")));
    }
    Ok(())
}

/// Where the per-pixel bias enters the filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasPlacement {
    /// Added to the depth before filtering.
    First,
    /// Added to the filtered value.
    After,
    /// Ignored.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KpnVariant {
    /// Normalised kernel applied to `depth + bias`.
    TofKpn,
    /// Raw kernel, bias added afterwards.
    Vanilla,
    /// Normalised kernel, bias added afterwards.
    AftBias,
    /// Raw kernel applied to `depth + bias`.
    NoNorm,
    /// Raw kernel, no bias.
    NoNormNoBias,
    /// Normalised kernel, no bias.
    NoBias,
}

impl KpnVariant {
    pub const ALL: [KpnVariant; 6] = [
        KpnVariant::TofKpn,
        KpnVariant::Vanilla,
        KpnVariant::AftBias,
        KpnVariant::NoNorm,
        KpnVariant::NoNormNoBias,
        KpnVariant::NoBias,
    ];

    pub fn normalizes(self) -> bool {
        matches!(self, Self::TofKpn | Self::AftBias | Self::NoBias)
    }

    pub fn bias(self) -> BiasPlacement {
        match self {
            Self::TofKpn | Self::NoNorm => BiasPlacement::First,
            Self::Vanilla | Self::AftBias => BiasPlacement::After,
            Self::NoNormNoBias | Self::NoBias => BiasPlacement::None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TofKpn => "tof-kpn",
            Self::Vanilla => "vanilla",
            Self::AftBias => "aft-bias",
            Self::NoNorm => "no-norm",
            Self::NoNormNoBias => "no-norm-no-bias",
            Self::NoBias => "no-bias",
        }
    }
}

impl fmt::Display for KpnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KpnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        if norm == "no-norm-aft-bias" {
            return Ok(Self::Vanilla);
        }
        Self::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Contract(format!("unknown KPN variant `{s}`")))
    }
}

/// Patch volume of shape `height x width x k²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub width: usize,
    pub height: usize,
    pub k: usize,
    pub data: Vec<f64>,
}

impl Patches {
    pub fn patch(&self, x: usize, y: usize) -> &[f64] {
        let kk = self.k * self.k;
        let i = (y * self.width + x) * kk;
        &self.data[i..i + kk]
    }
}

/// Source pixel of window tap `i` around `(x, y)`, replicate-clamped.
#[inline]
fn tap_source(w: usize, h: usize, k: usize, x: usize, y: usize, i: usize) -> (usize, usize) {
    let r = (k / 2) as i64;
    let dx = (i % k) as i64 - r;
    let dy = (i / k) as i64 - r;
    (
        (x as i64 + dx).clamp(0, w as i64 - 1) as usize,
        (y as i64 + dy).clamp(0, h as i64 - 1) as usize,
    )
}

/// Rearranges every `k x k` neighbourhood into a vector ("im2col").
pub fn extract_patches(img: &ImageBuffer, k: usize, boundary: Boundary) -> Result<Patches> {
    img.require_single_channel("extract_patches")?;
    check_k(k)?;
    let (w, h) = img.size();
    let kk = k * k;
    let r = (k / 2) as i64;
    let mut data = Vec::with_capacity(w * h * kk);
    for y in 0..h {
        for x in 0..w {
            for i in 0..kk {
                let sx = x as i64 + (i % k) as i64 - r;
                let sy = y as i64 + (i / k) as i64 - r;
                let inside = sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64;
                data.push(match (boundary, inside) {
                    (_, true) => img.get(sx as usize, sy as usize),
                    (Boundary::Zero, false) => 0.0,
                    (Boundary::Replicate, false) => {
                        let (cx, cy) = tap_source(w, h, k, x, y, i);
                        img.get(cx, cy)
                    }
                });
            }
        }
    }
    Ok(Patches {
        width: w,
        height: h,
        k,
        data,
    })
}

#[inline]
fn l1_norm(w: &[f64]) -> f64 {
    w.iter().map(|v| v.abs()).sum::<f64>().max(NORM_EPS)
}

/// Divides every kernel by its L1 norm (floored at [`NORM_EPS`]); bias is untouched.
pub fn normalize_kernels(kf: &KernelField) -> KernelField {
    let mut out = kf.clone();
    for y in 0..kf.height {
        for x in 0..kf.width {
            let s = l1_norm(kf.kernel(x, y));
            for w in out.kernel_mut(x, y) {
                *w /= s;
            }
        }
    }
    out
}

fn check_inputs(depth: &ImageBuffer, kf: &KernelField) -> Result<()> {
    depth.require_single_channel("kpn apply")?;
    if depth.size() != kf.size() {
        return Err(Error::Dimension(format!(
            "depth is {}x{}, kernels are {}x{}",
            depth.width(),
            depth.height(),
            kf.width,
            kf.height
        )));
    }
    Ok(())
}

/// The raster the kernels read from: `depth + bias` for bias-first variants.
fn filter_source(
    depth: &ImageBuffer,
    kf: &KernelField,
    variant: KpnVariant,
) -> Result<ImageBuffer> {
    match variant.bias() {
        BiasPlacement::First => depth.zip_map(&kf.bias, |d, b| d + b),
        _ => Ok(depth.clone()),
    }
}

/// Filters `depth` with per-pixel kernels according to `variant`.
pub fn apply(depth: &ImageBuffer, kf: &KernelField, variant: KpnVariant) -> Result<ImageBuffer> {
    check_inputs(depth, kf)?;
    let src = filter_source(depth, kf, variant)?;
    let (w, h) = depth.size();
    let k = kf.k;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let kern = kf.kernel(x, y);
            let scale = if variant.normalizes() {
                l1_norm(kern)
            } else {
                1.0
            };
            let mut acc = 0.0;
            for (i, &wt) in kern.iter().enumerate() {
                let (sx, sy) = tap_source(w, h, k, x, y, i);
                acc += wt * src.get(sx, sy);
            }
            acc /= scale;
            if variant.bias() == BiasPlacement::After {
                acc += kf.bias.get(x, y);
            }
            out.push(acc);
        }
    }
    ImageBuffer::new(w, h, 1, out).map_err(|_| Error::Domain("kpn output is not finite".into()))
}

/// Local derivatives of [`apply`], stored per output pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct KpnJacobian {
    width: usize,
    height: usize,
    k: usize,
    variant: KpnVariant,
    /// `d out(p) / d w_p(i)`
    d_weights: Vec<f64>,
    /// `d out(p) / d src(tap i of p)` where `src` is the filtered raster.
    d_taps: Vec<f64>,
}

/// Gradients of a scalar objective with respect to the filter inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct KpnGrads {
    pub weights: Vec<f64>,
    pub bias: ImageBuffer,
    pub depth: ImageBuffer,
}

impl KpnJacobian {
    /// `d out(p) / d w_p(i)` for the kernel of pixel `(x, y)`.
    pub fn d_weights(&self, x: usize, y: usize) -> &[f64] {
        let kk = self.k * self.k;
        let i = (y * self.width + x) * kk;
        &self.d_weights[i..i + kk]
    }

    /// Pulls `upstream = dL/d out` back to the weights, bias and depth.
    pub fn backward(&self, upstream: &ImageBuffer) -> Result<KpnGrads> {
        upstream.require_single_channel("kpn backward")?;
        if upstream.size() != (self.width, self.height) {
            return Err(Error::Dimension("upstream gradient size mismatch".into()));
        }
        let (w, h, k) = (self.width, self.height, self.k);
        let kk = k * k;
        let mut d_weights = vec![0.0; w * h * kk];
        let mut d_src = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let g = upstream.get(x, y);
                let base = (y * w + x) * kk;
                for i in 0..kk {
                    d_weights[base + i] = g * self.d_weights[base + i];
                    let (sx, sy) = tap_source(w, h, k, x, y, i);
                    d_src[sy * w + sx] += g * self.d_taps[base + i];
                }
            }
        }
        let depth = ImageBuffer::new(w, h, 1, d_src)?;
        let bias = match self.variant.bias() {
            BiasPlacement::First => depth.clone(),
            BiasPlacement::After => upstream.clone(),
            BiasPlacement::None => ImageBuffer::zeros(w, h, 1),
        };
        Ok(KpnGrads {
            weights: d_weights,
            bias,
            depth,
        })
    }
}

/// Analytic Jacobian of [`apply`], including the quotient rule of the L1
/// normalisation. `sign(0)` is taken as 0.
pub fn apply_gradient(
    depth: &ImageBuffer,
    kf: &KernelField,
    variant: KpnVariant,
) -> Result<KpnJacobian> {
    check_inputs(depth, kf)?;
    let src = filter_source(depth, kf, variant)?;
    let (w, h, k) = (kf.width, kf.height, kf.k);
    let kk = k * k;
    let mut d_weights = vec![0.0; w * h * kk];
    let mut d_taps = vec![0.0; w * h * kk];
    let mut patch = vec![0.0; kk];
    for y in 0..h {
        for x in 0..w {
            let kern = kf.kernel(x, y);
            let base = (y * w + x) * kk;
            for (i, v) in patch.iter_mut().enumerate() {
                let (sx, sy) = tap_source(w, h, k, x, y, i);
                *v = src.get(sx, sy);
            }
            if variant.normalizes() {
                let s = l1_norm(kern);
                let raw: f64 = kern.iter().zip(&patch).map(|(a, b)| a * b).sum();
                // Below the floor the norm is constant in the weights.
                let floored = s <= NORM_EPS;
                for j in 0..kk {
                    let sign = if floored {
                        0.0
                    } else if kern[j] > 0.0 {
                        1.0
                    } else if kern[j] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    d_weights[base + j] = patch[j] / s - sign * raw / (s * s);
                    d_taps[base + j] = kern[j] / s;
                }
            } else {
                d_weights[base..base + kk].copy_from_slice(&patch);
                d_taps[base..base + kk].copy_from_slice(kern);
            }
        }
    }
    Ok(KpnJacobian {
        width: w,
        height: h,
        k,
        variant,
        d_weights,
        d_taps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub k: usize,
    /// Initial step, applied to the gradient of the per-pixel-summed loss.
    pub step: f64,
    pub iterations: usize,
    pub lambda: f64,
    /// Stop once the loss is at or below this.
    pub tolerance: f64,
    /// Stop when step halving falls below this.
    pub min_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            step: 0.05,
            iterations: 500,
            lambda: metrics::DEFAULT_LAMBDA,
            tolerance: 1e-12,
            min_step: 1e-14,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub kernels: KernelField,
    /// Loss after initialisation and after every accepted step.
    pub trace: Vec<f64>,
}

/// Fits a kernel field to one image by gradient descent on the masked
/// depth-plus-gradient loss, starting from the identity filter.
///
/// A step that would raise the loss is rejected and the step size halved, so
/// the recorded trace never increases.
pub fn direct_fit(
    depth: &ImageBuffer,
    target: &ImageBuffer,
    mask: &Mask,
    variant: KpnVariant,
    opts: &FitOptions,
) -> Result<FitResult> {
    depth.require_single_channel("direct_fit")?;
    depth.check_shape(target)?;
    if mask.size() != depth.size() {
        return Err(Error::Dimension("mask size differs from depth".into()));
    }
    if mask.is_empty() {
        return Err(Error::DegenerateInput("direct_fit: empty mask".into()));
    }
    let (w, h) = depth.size();
    let scale = mask.count() as f64;
    let mut kf = KernelField::identity(w, h, opts.k)?;
    let loss_of = |kf: &KernelField| -> Result<(ImageBuffer, f64)> {
        let out = apply(depth, kf, variant)?;
        let l = metrics::depth_loss(&out, target, mask, opts.lambda)?.total;
        Ok((out, l))
    };
    let (mut out, mut loss) = loss_of(&kf)?;
    let mut trace = vec![loss];
    if !loss.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            trace,
        });
    }
    let mut step = opts.step;
    for iteration in 1..=opts.iterations {
        if loss <= opts.tolerance {
            break;
        }
        let upstream = metrics::depth_loss_gradient(&out, target, mask, opts.lambda)?;
        let grads = apply_gradient(depth, &kf, variant)?.backward(&upstream)?;
        let accepted = loop {
            let lr = step * scale;
            let mut best = None;
            let mut last_bad = None;
            // Joint step first, then each block alone: the L1 subgradient is
            // frequently not a descent direction for all parameters at once.
            for (move_w, move_b) in [(true, true), (false, true), (true, false)] {
                let weights: Vec<f64> = if move_w {
                    kf.weights
                        .iter()
                        .zip(&grads.weights)
                        .map(|(w, g)| w - lr * g)
                        .collect()
                } else {
                    kf.weights.clone()
                };
                let bias = if move_b {
                    match kf.bias.zip_map(&grads.bias, |b, g| b - lr * g) {
                        Ok(b) => b,
                        Err(_) => continue,
                    }
                } else {
                    kf.bias.clone()
                };
                let Ok(c) = KernelField::new(w, h, opts.k, weights, bias) else {
                    continue;
                };
                let Ok(o) = apply(depth, &c, variant) else {
                    continue;
                };
                let Ok(l) = metrics::depth_loss(&o, target, mask, opts.lambda) else {
                    continue;
                };
                let l = l.total;
                if l.is_finite() && l <= loss {
                    best = Some((c, o, l));
                    break;
                }
                last_bad = Some(l);
            }
            if best.is_some() {
                break best;
            }
            step *= 0.5;
            if step < opts.min_step {
                if let Some(l) = last_bad.filter(|l| !l.is_finite()) {
                    trace.push(l);
                    return Err(Error::Divergence { iteration, trace });
                }
                break None;
            }
        };
        let Some((c, o, l)) = accepted else { break };
        kf = c;
        out = o;
        loss = l;
        trace.push(loss);
    }
    Ok(FitResult { kernels: kf, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(w: usize, h: usize, k: usize, rng: &mut ChaCha8Rng) -> KernelField {
        let weights = (0..w * h * k * k)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let bias = ImageBuffer::from_fn(w, h, 1, |_, _, _| rng.random_range(-0.5..0.5));
        KernelField::new(w, h, k, weights, bias).unwrap()
    }

    fn random_depth(w: usize, h: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, 1, |_, _, _| rng.random_range(0.5..3.0))
    }

    #[test]
    fn patches_unit_window_and_ramp() {
        let img = ImageBuffer::from_fn(4, 3, 1, |x, y, _| (x + 10 * y) as f64);
        let p = extract_patches(&img, 1, Boundary::Replicate).unwrap();
        assert_eq!(p.data, img.data());

        let img = ImageBuffer::from_fn(3, 3, 1, |x, y, _| (3 * y + x) as f64);
        let p = extract_patches(&img, 3, Boundary::Replicate).unwrap();
        assert_eq!(p.patch(1, 1), &[0., 1., 2., 3., 4., 5., 6., 7., 8.]);
        // Corner uses replicated borders.
        assert_eq!(p.patch(0, 0), &[0., 0., 1., 0., 0., 1., 3., 3., 4.]);
        let z = extract_patches(&img, 3, Boundary::Zero).unwrap();
        assert_eq!(z.patch(0, 0), &[0., 0., 0., 0., 0., 1., 0., 3., 4.]);

        let c =
            extract_patches(&ImageBuffer::filled(5, 4, 1, 2.5), 5, Boundary::Replicate).unwrap();
        assert!(c.data.iter().all(|&v| v == 2.5));
        assert!(matches!(
            extract_patches(&img, 2, Boundary::Replicate),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn normalization_examples() {
        let bias = ImageBuffer::zeros(1, 1, 1);
        let delta = KernelField::identity(1, 1, 3).unwrap();
        let n = normalize_kernels(&delta);
        assert!((n.kernel(0, 0)[4] - 1.0).abs() < 1e-12);

        let ones = KernelField::new(1, 1, 3, vec![1.0; 9], bias.clone()).unwrap();
        for &v in normalize_kernels(&ones).kernel(0, 0) {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }

        let mut w = vec![0.0; 9];
        w[0] = -2.0;
        w[1] = 2.0;
        let signed = KernelField::new(1, 1, 3, w, bias.clone()).unwrap();
        let n = normalize_kernels(&signed);
        assert!((n.kernel(0, 0)[0] + 0.5).abs() < 1e-12);
        assert!((n.kernel(0, 0)[1] - 0.5).abs() < 1e-12);

        let zero = KernelField::new(1, 1, 3, vec![0.0; 9], bias).unwrap();
        assert!(normalize_kernels(&zero)
            .kernel(0, 0)
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn delta_kernels_are_identity_for_every_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_depth(6, 5, &mut rng);
        let kf = KernelField::identity(6, 5, 3).unwrap();
        for v in KpnVariant::ALL {
            let out = apply(&d, &kf, v).unwrap();
            for (a, b) in out.data().iter().zip(d.data()) {
                assert!((a - b).abs() < 1e-11, "{v}");
            }
        }
    }

    #[test]
    fn delta_kernels_with_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_depth(5, 5, &mut rng);
        let (weights, _) = KernelField::identity(5, 5, 3).unwrap().into_parts();
        let kf = KernelField::new(5, 5, 3, weights, ImageBuffer::filled(5, 5, 1, 0.7)).unwrap();
        for v in [KpnVariant::TofKpn, KpnVariant::Vanilla] {
            let out = apply(&d, &kf, v).unwrap();
            for (a, b) in out.data().iter().zip(d.data()) {
                assert!((a - (b + 0.7)).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn apply_size_mismatch() {
        let kf = KernelField::identity(4, 4, 3).unwrap();
        assert!(matches!(
            apply(&ImageBuffer::zeros(4, 5, 1), &kf, KpnVariant::TofKpn),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in KpnVariant::ALL {
            assert_eq!(v.name().parse::<KpnVariant>().unwrap(), v);
        }
        assert_eq!("NoNormAftBias".parse::<KpnVariant>().ok(), None);
        assert_eq!(
            "no_norm_aft_bias".parse::<KpnVariant>().unwrap(),
            KpnVariant::Vanilla
        );
    }

    #[test]
    fn vanilla_bias_derivative_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_depth(5, 5, &mut rng);
        let kf = random_field(5, 5, 3, &mut rng);
        let jac = apply_gradient(&d, &kf, KpnVariant::Vanilla).unwrap();
        let mut e = ImageBuffer::zeros(5, 5, 1);
        e.set(2, 3, 0, 1.0);
        let g = jac.backward(&e).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let want = if (x, y) == (2, 3) { 1.0 } else { 0.0 };
                assert_eq!(g.bias.get(x, y), want);
            }
        }
    }

    #[test]
    fn tof_kpn_bias_derivative_is_normalized_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = random_depth(6, 6, &mut rng);
        let kf = random_field(6, 6, 3, &mut rng);
        let norm = normalize_kernels(&kf);
        let jac = apply_gradient(&d, &kf, KpnVariant::TofKpn).unwrap();
        let (px, py) = (3, 2);
        let mut e = ImageBuffer::zeros(6, 6, 1);
        e.set(px, py, 0, 1.0);
        let g = jac.backward(&e).unwrap();
        for i in 0..9 {
            let (qx, qy) = (px + i % 3 - 1, py + i / 3 - 1);
            assert!((g.bias.get(qx, qy) - norm.kernel(px, py)[i]).abs() < 1e-15);
        }
        assert_eq!(g.bias.get(0, 0), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (5, 4);
        let d = random_depth(w, h, &mut rng);
        let kf = random_field(w, h, 3, &mut rng);
        let up = ImageBuffer::from_fn(w, h, 1, |_, _, _| rng.random_range(-1.0..1.0));
        let eps = 1e-6;
        let objective = |d: &ImageBuffer, kf: &KernelField, v: KpnVariant| -> f64 {
            let o = apply(d, kf, v).unwrap();
            o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        for v in KpnVariant::ALL {
            let g = apply_gradient(&d, &kf, v).unwrap().backward(&up).unwrap();
            for j in 0..kf.weights.len() {
                let mut p = kf.clone();
                p.weights[j] += eps;
                let mut m = kf.clone();
                m.weights[j] -= eps;
                let fd = (objective(&d, &p, v) - objective(&d, &m, v)) / (2.0 * eps);
                assert!(rel(g.weights[j], fd) < 1e-5, "{v} weight {j}");
            }
            for y in 0..h {
                for x in 0..w {
                    let mut p = kf.clone();
                    p.bias.set(x, y, 0, kf.bias.get(x, y) + eps);
                    let mut m = kf.clone();
                    m.bias.set(x, y, 0, kf.bias.get(x, y) - eps);
                    let fd = (objective(&d, &p, v) - objective(&d, &m, v)) / (2.0 * eps);
                    assert!(rel(g.bias.get(x, y), fd) < 1e-5, "{v} bias");

                    let mut dp = d.clone();
                    dp.set(x, y, 0, d.get(x, y) + eps);
                    let mut dm = d.clone();
                    dm.set(x, y, 0, d.get(x, y) - eps);
                    let fd = (objective(&dp, &kf, v) - objective(&dm, &kf, v)) / (2.0 * eps);
                    assert!(rel(g.depth.get(x, y), fd) < 1e-5, "{v} depth");
                }
            }
        }
    }

    #[test]
    fn fit_already_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = random_depth(8, 8, &mut rng);
        let r = direct_fit(
            &d,
            &d,
            &Mask::all(8, 8),
            KpnVariant::TofKpn,
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(r.trace.len(), 1);
        assert!(r.trace[0] < 1e-12);
    }

    #[test]
    fn fit_constant_offset() {
        let d = ImageBuffer::from_fn(16, 12, 1, |x, y, _| 1.0 + 0.05 * x as f64 + 0.02 * y as f64);
        let target = d.map(|v| v + 0.3);
        let mask = Mask::all(16, 12);
        let r = direct_fit(
            &d,
            &target,
            &mask,
            KpnVariant::TofKpn,
            &FitOptions::default(),
        )
        .unwrap();
        assert!(*r.trace.last().unwrap() < 1e-6, "{:?}", r.trace.last());
        assert!(r.trace.len() <= 501);
        for b in r.kernels.bias().data() {
            assert!((b - 0.3).abs() < 1e-3);
        }
        assert!(r.trace.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn fit_rejects_empty_mask() {
        let d = ImageBuffer::filled(4, 4, 1, 1.0);
        assert!(matches!(
            direct_fit(
                &d,
                &d,
                &Mask::none(4, 4),
                KpnVariant::TofKpn,
                &FitOptions::default()
            ),
            Err(Error::DegenerateInput(_))
        ));
    }
}
