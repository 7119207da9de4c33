//! Dense float rasters, bilinear lookup, flow warping and the Sobel operator.
//!
//! Pixel `(x, y)` addresses column `x` and row `y`. Storage is row-major with
//! channels interleaved. A flow vector `(u, v)` at pixel `p` points to the
//! location `p + (u, v)` that `p` reads from when an image is warped.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    /// Wraps `data`, rejecting wrong lengths and non-finite values.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Contract("image needs at least one channel".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value {} at index {}",
                data[i], i
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(channels > 0 && value.is_finite());
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    /// Builds an image from a per-(x, y, channel) closure.
    ///
    /// Panics if the closure yields a non-finite value; use [`ImageBuffer::new`]
    /// for data that has not been validated.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(channels > 0);
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = f(x, y, c);
                    assert!(v.is_finite(), "non-finite value at ({x}, {y}, {c})");
                    data.push(v);
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y) + c]
    }

    /// Channel-0 value; the common case for depth and amplitude rasters.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[self.index(x, y)]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels]
    }

    /// Panics on non-finite values.
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        assert!(value.is_finite(), "non-finite value at ({x}, {y}, {c})");
        let i = self.index(x, y) + c;
        self.data[i] = value;
    }

    /// Applies `f` to every stored value. Panics on non-finite results.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| {
                let r = f(v);
                assert!(r.is_finite(), "map produced a non-finite value");
                r
            })
            .collect();
        Self { data, ..*self }
    }

    /// Element-wise combination of two equally shaped images.
    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        self.check_shape(other)?;
        let mut data = Vec::with_capacity(self.data.len());
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let r = f(a, b);
            if !r.is_finite() {
                return Err(Error::Domain("zip_map produced a non-finite value".into()));
            }
            data.push(r);
        }
        Ok(Self { data, ..*self })
    }

    pub fn channel(&self, c: usize) -> Self {
        assert!(c < self.channels);
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        Self {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Interleaves single-channel planes into one image.
    pub fn from_channels(planes: &[&ImageBuffer]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Contract("from_channels needs at least one plane".into()))?;
        for p in planes {
            if p.channels != 1 {
                return Err(Error::Contract(
                    "from_channels expects 1-channel planes".into(),
                ));
            }
            first.check_size(p)?;
        }
        let channels = planes.len();
        let mut data = Vec::with_capacity(first.pixel_count() * channels);
        for i in 0..first.pixel_count() {
            for p in planes {
                data.push(p.data[i]);
            }
        }
        Ok(Self {
            width: first.width,
            height: first.height,
            channels,
            data,
        })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn check_size(&self, other: &Self) -> Result<()> {
        if self.size() != other.size() {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn check_shape(&self, other: &Self) -> Result<()> {
        self.check_size(other)?;
        if self.channels != other.channels {
            return Err(Error::Dimension(format!(
                "{} vs {} channels",
                self.channels, other.channels
            )));
        }
        Ok(())
    }

    pub(crate) fn require_single_channel(&self, what: &str) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::Contract(format!(
                "{what} expects a single-channel image, got {} channels",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Two-channel displacement field; channel 0 is `u` (x), channel 1 is `v` (y).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField(ImageBuffer);

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self(ImageBuffer::zeros(width, height, 2))
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        Self::from_fn(width, height, |_, _| (u, v))
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Self {
        let mut cache = (0.0, 0.0);
        Self(ImageBuffer::from_fn(width, height, 2, |x, y, c| {
            if c == 0 {
                cache = f(x, y);
                cache.0
            } else {
                cache.1
            }
        }))
    }

    pub fn from_components(u: &ImageBuffer, v: &ImageBuffer) -> Result<Self> {
        Ok(Self(ImageBuffer::from_channels(&[u, v])?))
    }

    /// Accepts a 2-channel image, or a 3-channel one whose third channel is padding.
    pub fn from_image(img: ImageBuffer) -> Result<Self> {
        match img.channels() {
            2 => Ok(Self(img)),
            3 => {
                let (u, v) = (img.channel(0), img.channel(1));
                Self::from_components(&u, &v)
            }
            c => Err(Error::Contract(format!(
                "flow field needs 2 channels, got {c}"
            ))),
        }
    }

    pub fn as_image(&self) -> &ImageBuffer {
        &self.0
    }

    pub fn into_image(self) -> ImageBuffer {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn size(&self) -> (usize, usize) {
        self.0.size()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = self.0.index(x, y);
        (self.0.data[i], self.0.data[i + 1])
    }

    pub fn set(&mut self, x: usize, y: usize, u: f64, v: f64) {
        self.0.set(x, y, 0, u);
        self.0.set(x, y, 1, v);
    }

    pub fn u(&self) -> ImageBuffer {
        self.0.channel(0)
    }

    pub fn v(&self) -> ImageBuffer {
        self.0.channel(1)
    }
}

/// Binary validity raster: `true` marks a valid / confident pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn all(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn none(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{}x{} mask needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Reads a single-channel image whose values are exactly 0 or 1.
    pub fn from_image(img: &ImageBuffer) -> Result<Self> {
        img.require_single_channel("mask conversion")?;
        let mut data = Vec::with_capacity(img.pixel_count());
        for (i, &v) in img.data().iter().enumerate() {
            if v == 1.0 {
                data.push(true);
            } else if v == 0.0 {
                data.push(false);
            } else {
                return Err(Error::Domain(format!(
                    "mask value {v} at pixel {i} is not 0 or 1"
                )));
            }
        }
        Self::from_vec(img.width(), img.height(), data)
    }

    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::from_fn(self.width, self.height, 1, |x, y, _| {
            if self.get(x, y) {
                1.0
            } else {
                0.0
            }
        })
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

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.size() != other.size() {
            return Err(Error::Dimension("mask sizes differ".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a && *b)
            .collect();
        Ok(Mask { data, ..*self })
    }

    /// Row-major `(x, y)` coordinates of valid pixels.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }
}

/// How lookups outside the raster are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Clamp to the nearest edge pixel.
    #[default]
    Replicate,
    /// Treat everything outside the raster as zero.
    Zero,
}

#[inline]
fn fetch(img: &ImageBuffer, ix: i64, iy: i64, c: usize, boundary: Boundary) -> f64 {
    let (w, h) = (img.width as i64, img.height as i64);
    match boundary {
        Boundary::Replicate => {
            let x = ix.clamp(0, w - 1) as usize;
            let y = iy.clamp(0, h - 1) as usize;
            img.at(x, y, c)
        }
        Boundary::Zero => {
            if ix < 0 || iy < 0 || ix >= w || iy >= h {
                0.0
            } else {
                img.at(ix as usize, iy as usize, c)
            }
        }
    }
}

/// True when the bilinear support of `(x, y)` stays inside the raster.
///
/// Neighbours that receive zero weight do not count, so every grid point,
/// including the last row and column, is in bounds.
#[inline]
pub fn support_in_bounds(width: usize, height: usize, x: f64, y: f64) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (width as f64 - 1.0) && y <= (height as f64 - 1.0)
}

/// Result of one bilinear lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub values: Vec<f64>,
    pub in_bounds: bool,
}

pub fn sample_bilinear(img: &ImageBuffer, x: f64, y: f64, boundary: Boundary) -> Sample {
    let mut values = vec![0.0; img.channels];
    let in_bounds = sample_into(img, x, y, boundary, &mut values, None);
    Sample { values, in_bounds }
}

/// Bilinear lookup writing one value per channel into `out`, and optionally
/// the partial derivatives with respect to `x` and `y` into `grad`
/// (`grad.0[c] = d/dx`, `grad.1[c] = d/dy`).
///
/// A coordinate with zero fractional part belongs to the cell on its
/// right / below, so derivatives at grid points are right-sided.
pub(crate) fn sample_into(
    img: &ImageBuffer,
    x: f64,
    y: f64,
    boundary: Boundary,
    out: &mut [f64],
    grad: Option<(&mut [f64], &mut [f64])>,
) -> bool {
    let x0 = x.floor();
    let y0 = y.floor();
    let tx = x - x0;
    let ty = y - y0;
    let (ix, iy) = (x0 as i64, y0 as i64);
    let mut grad = grad;
    for c in 0..img.channels {
        let i00 = fetch(img, ix, iy, c, boundary);
        let i10 = fetch(img, ix + 1, iy, c, boundary);
        let i01 = fetch(img, ix, iy + 1, c, boundary);
        let i11 = fetch(img, ix + 1, iy + 1, c, boundary);
        let top = i00 + tx * (i10 - i00);
        let bottom = i01 + tx * (i11 - i01);
        out[c] = top + ty * (bottom - top);
        if let Some((gx, gy)) = grad.as_mut() {
            gx[c] = (1.0 - ty) * (i10 - i00) + ty * (i11 - i01);
            gy[c] = (1.0 - tx) * (i01 - i00) + tx * (i11 - i10);
        }
    }
    support_in_bounds(img.width, img.height, x, y)
}

fn check_flow_size(img: &ImageBuffer, flow: &FlowField) -> Result<()> {
    if img.size() != flow.size() {
        return Err(Error::Dimension(format!(
            "image is {}x{}, flow is {}x{}",
            img.width(),
            img.height(),
            flow.width(),
            flow.height()
        )));
    }
    Ok(())
}

/// Backward warp: `warped(p) = img(p + flow(p))`.
///
/// The returned mask clears every pixel whose lookup left the raster; the value
/// stored there follows `boundary`.
pub fn warp_image(
    img: &ImageBuffer,
    flow: &FlowField,
    boundary: Boundary,
) -> Result<(ImageBuffer, Mask)> {
    check_flow_size(img, flow)?;
    let (w, h, ch) = (img.width, img.height, img.channels);
    let mut data = vec![0.0; w * h * ch];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.get(x, y);
            let i = y * w + x;
            valid[i] = sample_into(
                img,
                x as f64 + u,
                y as f64 + v,
                boundary,
                &mut data[i * ch..(i + 1) * ch],
                None,
            );
        }
    }
    Ok((
        ImageBuffer::new(w, h, ch, data)?,
        Mask::from_vec(w, h, valid)?,
    ))
}

/// Per-pixel partial derivatives of [`warp_image`] with respect to the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpGradient {
    /// d warped(p) / d u(p), one value per image channel.
    pub d_u: ImageBuffer,
    /// d warped(p) / d v(p), one value per image channel.
    pub d_v: ImageBuffer,
}

/// Analytic flow derivatives of the replicate-boundary warp.
///
/// Outside the raster the clamped image is constant, so the derivative there is
/// zero. Derivatives are right-sided at integer sample coordinates.
pub fn warp_gradient(img: &ImageBuffer, flow: &FlowField) -> Result<WarpGradient> {
    check_flow_size(img, flow)?;
    let (w, h, ch) = (img.width, img.height, img.channels);
    let mut du = vec![0.0; w * h * ch];
    let mut dv = vec![0.0; w * h * ch];
    let mut scratch = vec![0.0; ch];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.get(x, y);
            let i = (y * w + x) * ch;
            sample_into(
                img,
                x as f64 + u,
                y as f64 + v,
                Boundary::Replicate,
                &mut scratch,
                Some((&mut du[i..i + ch], &mut dv[i..i + ch])),
            );
        }
    }
    Ok(WarpGradient {
        d_u: ImageBuffer::new(w, h, ch, du)?,
        d_v: ImageBuffer::new(w, h, ch, dv)?,
    })
}

/// Horizontal Sobel taps, indexed `[dy + 1][dx + 1]`; the vertical kernel is its transpose.
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Unnormalised 3x3 Sobel gradients with replicate padding, applied as a
/// correlation: `g_x(x, y) = sum K[dy][dx] * I(x + dx, y + dy)`.
pub fn sobel(img: &ImageBuffer) -> Result<(ImageBuffer, ImageBuffer)> {
    img.require_single_channel("sobel")?;
    let (w, h) = img.size();
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let v = fetch(img, x as i64 + dx, y as i64 + dy, 0, Boundary::Replicate);
                    let (r, c) = ((dy + 1) as usize, (dx + 1) as usize);
                    sx += SOBEL_X[r][c] * v;
                    sy += SOBEL_Y[r][c] * v;
                }
            }
            gx[y * w + x] = sx;
            gy[y * w + x] = sy;
        }
    }
    Ok((
        ImageBuffer::new(w, h, 1, gx)?,
        ImageBuffer::new(w, h, 1, gy)?,
    ))
}

/// Adjoint of [`sobel`]: maps output-space sensitivities back onto the input raster.
pub fn sobel_adjoint(d_gx: &ImageBuffer, d_gy: &ImageBuffer) -> Result<ImageBuffer> {
    d_gx.require_single_channel("sobel_adjoint")?;
    d_gx.check_shape(d_gy)?;
    let (w, h) = d_gx.size();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (ax, ay) = (d_gx.get(x, y), d_gy.get(x, y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let (r, c) = ((dy + 1) as usize, (dx + 1) as usize);
                    out[sy * w + sx] += SOBEL_X[r][c] * ax + SOBEL_Y[r][c] * ay;
                }
            }
        }
    }
    ImageBuffer::new(w, h, 1, out)
}
