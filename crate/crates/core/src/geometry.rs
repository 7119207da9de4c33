//! Weak-calibration camera model and multi-view augmentation.
//!
//! Two pinhole cameras share focal lengths and orientation. The second one is
//! translated by `(t_x, t_y, 0)` and has its principal point offset by
//! `(c_x, c_y)` pixels, so a point at depth `z` seen at pixel `p` in the first
//! view appears at `p + (f_x t_x / z + c_x, f_y t_y / z + c_y)` in the second.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{sample_into, support_in_bounds, Boundary, FlowField, ImageBuffer, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakCalibParams {
    pub f_x: f64,
    pub f_y: f64,
    pub t_x: f64,
    pub t_y: f64,
    pub c_x: f64,
    pub c_y: f64,
}

impl WeakCalibParams {
    /// Identity relation between the two views (zero translation and offset).
    pub fn new(f_x: f64, f_y: f64) -> Result<Self> {
        Self {
            f_x,
            f_y,
            t_x: 0.0,
            t_y: 0.0,
            c_x: 0.0,
            c_y: 0.0,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        let all = [self.f_x, self.f_y, self.t_x, self.t_y, self.c_x, self.c_y];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("camera parameters must be finite".into()));
        }
        if self.f_x <= 0.0 || self.f_y <= 0.0 {
            return Err(Error::Domain(format!(
                "focal lengths must be positive, got ({}, {})",
                self.f_x, self.f_y
            )));
        }
        Ok(self)
    }

    pub fn with_offsets(self, delta: CalibDelta) -> Self {
        Self {
            t_x: self.t_x + delta.t_x,
            t_y: self.t_y + delta.t_y,
            c_x: self.c_x + delta.c_x,
            c_y: self.c_y + delta.c_y,
            ..self
        }
    }

    /// Flow at a pixel of depth `z`.
    #[inline]
    pub fn flow_at(&self, z: f64) -> (f64, f64) {
        (
            self.f_x * self.t_x / z + self.c_x,
            self.f_y * self.t_y / z + self.c_y,
        )
    }
}

/// The four perturbable parameters of the second view.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibDelta {
    pub t_x: f64,
    pub t_y: f64,
    pub c_x: f64,
    pub c_y: f64,
}

impl CalibDelta {
    pub fn is_zero(&self) -> bool {
        self.t_x == 0.0 && self.t_y == 0.0 && self.c_x == 0.0 && self.c_y == 0.0
    }
}

/// Flow from the first view to the second given first-view depth.
///
/// With a mask, pixels outside it get zero flow and their depth is ignored;
/// without one every pixel must have positive depth.
pub fn flow_from_depth(
    depth: &ImageBuffer,
    params: &WeakCalibParams,
    mask: Option<&Mask>,
) -> Result<FlowField> {
    depth.require_single_channel("flow_from_depth")?;
    if let Some(m) = mask {
        if m.size() != depth.size() {
            return Err(Error::Dimension("mask and depth sizes differ".into()));
        }
    }
    let (w, h) = depth.size();
    let mut flow = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            if mask.is_some_and(|m| !m.get(x, y)) {
                continue;
            }
            let z = depth.get(x, y);
            if z <= 0.0 {
                return Err(Error::Domain(format!(
                    "non-positive depth {z} at valid pixel ({x}, {y})"
                )));
            }
            let (u, v) = params.flow_at(z);
            flow.set(x, y, u, v);
        }
    }
    Ok(flow)
}

#[inline]
fn ray_stretch(params: &WeakCalibParams, principal: (f64, f64), x: usize, y: usize) -> f64 {
    let a = (x as f64 - principal.0) / params.f_x;
    let b = (y as f64 - principal.1) / params.f_y;
    (1.0 + a * a + b * b).sqrt()
}

/// Converts distance along each pixel ray into depth along the optical axis.
///
/// Zero entries mark missing measurements and stay zero.
pub fn plane_correct(
    radial: &ImageBuffer,
    params: &WeakCalibParams,
    principal: (f64, f64),
) -> Result<ImageBuffer> {
    radial.require_single_channel("plane_correct")?;
    if let Some(r) = radial.data().iter().find(|&&r| r < 0.0) {
        return Err(Error::Domain(format!("negative radial distance {r}")));
    }
    let (w, h) = radial.size();
    Ok(ImageBuffer::from_fn(w, h, 1, |x, y, _| {
        radial.get(x, y) / ray_stretch(params, principal, x, y)
    }))
}

/// Inverse of [`plane_correct`].
pub fn plane_to_radial(
    depth: &ImageBuffer,
    params: &WeakCalibParams,
    principal: (f64, f64),
) -> Result<ImageBuffer> {
    depth.require_single_channel("plane_to_radial")?;
    let (w, h) = depth.size();
    Ok(ImageBuffer::from_fn(w, h, 1, |x, y, _| {
        depth.get(x, y) * ray_stretch(params, principal, x, y)
    }))
}

/// Ranges for random camera perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Half-width of the `c_x`, `c_y` range as a fraction of image width / height.
    pub principal_frac: f64,
    /// Half-width of the `t_x`, `t_y` range as a fraction of the reference translations.
    pub translation_frac: f64,
    /// Largest-magnitude translation among the devices being modelled.
    pub t_ref_x: f64,
    pub t_ref_y: f64,
    pub seed: u64,
}

impl PerturbationConfig {
    pub const DEFAULT_PRINCIPAL_FRAC: f64 = 0.025;
    pub const DEFAULT_TRANSLATION_FRAC: f64 = 0.30;

    pub fn new(t_ref_x: f64, t_ref_y: f64, seed: u64) -> Self {
        Self {
            principal_frac: Self::DEFAULT_PRINCIPAL_FRAC,
            translation_frac: Self::DEFAULT_TRANSLATION_FRAC,
            t_ref_x,
            t_ref_y,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let vals = [
            self.principal_frac,
            self.translation_frac,
            self.t_ref_x,
            self.t_ref_y,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("perturbation config must be finite".into()));
        }
        if self.principal_frac < 0.0 || self.translation_frac < 0.0 {
            return Err(Error::Domain("perturbation fractions must be >= 0".into()));
        }
        Ok(())
    }
}

/// Draws one perturbation with an RNG seeded from `cfg.seed`.
pub fn sample_perturbation(
    cfg: &PerturbationConfig,
    image_size: (usize, usize),
) -> Result<CalibDelta> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_perturbation_with(cfg, image_size, &mut rng)
}

/// Draws one perturbation from a caller-owned RNG (`cfg.seed` is ignored).
pub fn sample_perturbation_with<R: Rng + ?Sized>(
    cfg: &PerturbationConfig,
    image_size: (usize, usize),
    rng: &mut R,
) -> Result<CalibDelta> {
    cfg.validate()?;
    let mut symmetric = |half: f64| half * (2.0 * rng.random::<f64>() - 1.0);
    let c_x = symmetric(cfg.principal_frac * image_size.0 as f64);
    let c_y = symmetric(cfg.principal_frac * image_size.1 as f64);
    let t_x = symmetric(cfg.translation_frac * cfg.t_ref_x.abs());
    let t_y = symmetric(cfg.translation_frac * cfg.t_ref_y.abs());
    Ok(CalibDelta { t_x, t_y, c_x, c_y })
}

/// One RGB-D record: ToF amplitude and depth, RGB, ground-truth depth and a
/// validity mask. Depths are in metres.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSample {
    pub rgb: ImageBuffer,
    pub amplitude: ImageBuffer,
    pub tof_depth: ImageBuffer,
    pub gt_depth: ImageBuffer,
    pub mask: Mask,
    pub calib: WeakCalibParams,
    pub aligned: bool,
    /// Flow from the RGB view back to the ToF view, present on augmented samples.
    pub gt_flow: Option<FlowField>,
    pub seed: u64,
}

impl DataSample {
    pub fn size(&self) -> (usize, usize) {
        self.gt_depth.size()
    }

    pub fn validate(&self) -> Result<()> {
        let size = self.size();
        let rasters = [
            ("rgb", self.rgb.size()),
            ("amplitude", self.amplitude.size()),
            ("tof_depth", self.tof_depth.size()),
            ("mask", self.mask.size()),
        ];
        for (name, s) in rasters {
            if s != size {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, gt_depth is {}x{}",
                    s.0, s.1, size.0, size.1
                )));
            }
        }
        if let Some(f) = &self.gt_flow {
            if f.size() != size {
                return Err(Error::Dimension(
                    "gt_flow size differs from gt_depth".into(),
                ));
            }
        }
        for (name, img) in [
            ("amplitude", &self.amplitude),
            ("tof_depth", &self.tof_depth),
            ("gt_depth", &self.gt_depth),
        ] {
            if img.channels() != 1 {
                return Err(Error::Contract(format!("{name} must have one channel")));
            }
        }
        if self.rgb.channels() != 3 {
            return Err(Error::Contract("rgb must have three channels".into()));
        }
        for (x, y) in self.mask.iter_valid() {
            if self.gt_depth.get(x, y) <= 0.0 {
                return Err(Error::Domain(format!(
                    "gt_depth is not positive at valid pixel ({x}, {y})"
                )));
            }
        }
        self.calib.validated()?;
        Ok(())
    }
}

const NEWTON_MAX_ITERS: usize = 60;
const NEWTON_TOL: f64 = 1e-13;
/// Relative depth spread tolerated inside a bilinear support before the
/// target pixel is treated as straddling a depth edge.
const EDGE_SPREAD: f64 = 0.05;

/// Depth, validity and nonzero-weight support of a bilinear lookup in the source view.
fn source_lookup(
    depth: &ImageBuffer,
    valid: &Mask,
    sx: f64,
    sy: f64,
    out: &mut [f64],
    grad: (&mut [f64], &mut [f64]),
) -> Option<(f64, f64)> {
    let (w, h) = depth.size();
    if !support_in_bounds(w, h, sx, sy) {
        return None;
    }
    let (x0, y0) = (sx.floor(), sy.floor());
    let (tx, ty) = (sx - x0, sy - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        if (dx == 1 && tx == 0.0) || (dy == 1 && ty == 0.0) {
            continue;
        }
        let (x, y) = (x0 + dx, y0 + dy);
        if !valid.get(x, y) {
            return None;
        }
        let z = depth.get(x, y);
        lo = lo.min(z);
        hi = hi.max(z);
    }
    sample_into(depth, sx, sy, Boundary::Replicate, out, Some(grad));
    Some((lo, hi))
}

/// Renders a sample as seen by a virtual second camera displaced by `delta`.
///
/// Ground-truth depth and RGB move to the new view; ToF amplitude and depth
/// stay where they are. Visibility comes from nearest-pixel z-buffered
/// splatting of the first-view depth. Each splatted pixel is then refined to
/// the exact sub-pixel correspondence: its depth `z` solves
/// `z = D(q - flow(z))`, so the stored inverse flow `-flow(z)` and the warped
/// depth agree exactly. Pixels that receive no splat, whose refinement fails,
/// or whose lookup straddles a depth edge are masked out.
///
/// A zero `delta` returns the sample unchanged, with a zero `gt_flow`.
pub fn augment_sample(s: &DataSample, delta: CalibDelta) -> Result<DataSample> {
    if !s.aligned {
        return Err(Error::Contract(
            "augment_sample needs an aligned sample".into(),
        ));
    }
    s.validate()?;
    let valid = Mask::from_fn(s.mask.width(), s.mask.height(), |x, y| {
        s.mask.get(x, y) && s.gt_depth.get(x, y) > 0.0
    });
    if valid.is_empty() {
        return Err(Error::DegenerateInput(
            "augment_sample: sample has no valid pixels".into(),
        ));
    }
    let (w, h) = s.size();
    if delta.is_zero() {
        let mut out = s.clone();
        out.gt_flow = Some(FlowField::zeros(w, h));
        return Ok(out);
    }

    let params = s.calib.with_offsets(delta).validated()?;
    let relative = WeakCalibParams {
        t_x: delta.t_x,
        t_y: delta.t_y,
        c_x: delta.c_x,
        c_y: delta.c_y,
        ..s.calib
    };

    // Z-buffered splat: nearest depth wins each target pixel.
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut source = vec![usize::MAX; w * h];
    for (x, y) in valid.iter_valid() {
        let z = s.gt_depth.get(x, y);
        let (u, v) = relative.flow_at(z);
        let (tx, ty) = ((x as f64 + u).round(), (y as f64 + v).round());
        if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
            continue;
        }
        let t = ty as usize * w + tx as usize;
        if z < zbuf[t] {
            zbuf[t] = z;
            source[t] = y * w + x;
        }
    }

    let mut depth_out = ImageBuffer::zeros(w, h, 1);
    let mut rgb_out = ImageBuffer::zeros(w, h, 3);
    let mut flow_out = FlowField::zeros(w, h);
    let mut mask_out = Mask::none(w, h);
    let mut zval = [0.0];
    let (mut gx, mut gy) = ([0.0], [0.0]);
    let mut rgb_px = [0.0; 3];
    for t in 0..w * h {
        if source[t] == usize::MAX {
            continue;
        }
        let (qx, qy) = ((t % w) as f64, (t / w) as f64);
        let (px, py) = ((source[t] % w) as f64, (source[t] / w) as f64);
        let mut z = zbuf[t];
        let mut solved = None;
        for _ in 0..NEWTON_MAX_ITERS {
            let (u, v) = relative.flow_at(z);
            let (sx, sy) = (qx - u, qy - v);
            let Some((lo, hi)) =
                source_lookup(&s.gt_depth, &valid, sx, sy, &mut zval, (&mut gx, &mut gy))
            else {
                break;
            };
            let residual = z - zval[0];
            if residual.abs() <= NEWTON_TOL * z {
                if (sx - px).abs() <= 1.0 && (sy - py).abs() <= 1.0 && hi - lo <= EDGE_SPREAD * lo {
                    solved = Some((zval[0], sx, sy));
                }
                break;
            }
            let slope = 1.0
                - (gx[0] * relative.f_x * relative.t_x + gy[0] * relative.f_y * relative.t_y)
                    / (z * z);
            if slope.abs() < 1e-6 {
                break;
            }
            z -= residual / slope;
            if !(z.is_finite() && z > 0.0) {
                break;
            }
        }
        let Some((z, sx, sy)) = solved else { continue };
        let (qx, qy) = (qx as usize, qy as usize);
        let (u, v) = relative.flow_at(z);
        depth_out.set(qx, qy, 0, z);
        flow_out.set(qx, qy, -u, -v);
        sample_into(&s.rgb, sx, sy, Boundary::Replicate, &mut rgb_px, None);
        for (c, &val) in rgb_px.iter().enumerate() {
            rgb_out.set(qx, qy, c, val);
        }
        mask_out.set(qx, qy, true);
    }

    Ok(DataSample {
        rgb: rgb_out,
        amplitude: s.amplitude.clone(),
        tof_depth: s.tof_depth.clone(),
        gt_depth: depth_out,
        mask: mask_out,
        calib: params,
        aligned: false,
        gt_flow: Some(flow_out),
        seed: s.seed,
    })
}
