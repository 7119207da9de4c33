//! On-disk formats: PFM rasters, sample directories with JSON metadata,
//! kernel fields, and train/test splitting.
//!
//! A PFM file is a text header followed by raw `f32` samples:
//!
//! ```text
//! Pf|PF \n  <width> <height> \n  <scale> \n  <data>
//! ```
//!
//! `Pf` holds one channel and `PF` three. A negative scale means little-endian
//! data, a positive one big-endian. Rows run bottom to top, channels are
//! interleaved. Only little-endian files are written.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DataSample, WeakCalibParams};
use crate::imaging::{FlowField, ImageBuffer, Mask};
use crate::kpn::KernelField;

pub const FORMAT_VERSION: u32 = 1;

/// Serialises a 1-, 2- or 3-channel image. Two-channel images get a zero
/// third channel.
pub fn encode_pfm(img: &ImageBuffer) -> Result<Vec<u8>> {
    encode_pfm_scaled(img, -1.0)
}

/// Like [`encode_pfm`] with an explicit scale field. The scale must be
/// negative (little-endian); big-endian output is not supported.
pub fn encode_pfm_scaled(img: &ImageBuffer, scale: f64) -> Result<Vec<u8>> {
    if !(scale < 0.0 && scale.is_finite()) {
        return Err(Error::Contract(format!(
            "PFM scale must be negative (little-endian), got {scale}"
        )));
    }
    let (tag, stored) = match img.channels() {
        1 => ("Pf", 1),
        2 | 3 => ("PF", 3),
        c => return Err(Error::Contract(format!("PFM holds 1-3 channels, got {c}"))),
    };
    let (w, h) = img.size();
    let header = format!("{tag}\n{w} {h}\n{scale:?}\n");
    let mut out = Vec::with_capacity(header.len() + 4 * w * h * stored);
    out.extend_from_slice(header.as_bytes());
    for y in (0..h).rev() {
        for x in 0..w {
            let px = img.pixel(x, y);
            for c in 0..stored {
                let v = px.get(c).copied().unwrap_or(0.0) as f32;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return self.fail(format!("missing {what}"));
        }
        match std::str::from_utf8(&self.bytes[start..self.pos]) {
            Ok(s) => Ok(s),
            Err(_) => {
                self.pos = start;
                self.fail(format!("{what} is not text"))
            }
        }
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<(T, usize)> {
        let tok = self.token(what)?;
        let start = self.pos - tok.len();
        match tok.parse() {
            Ok(v) => Ok((v, start)),
            Err(_) => Err(Error::Parse {
                offset: start,
                message: format!("bad {what} `{tok}`"),
            }),
        }
    }
}

/// Parses PFM bytes into an image with 1 or 3 channels.
pub fn decode_pfm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match cur.token("PFM tag")? {
        "Pf" => 1,
        "PF" => 3,
        other => {
            return Err(Error::Parse {
                offset: cur.pos - other.len(),
                message: format!("unknown PFM tag `{other}`"),
            })
        }
    };
    let (w, _): (usize, _) = cur.number("width")?;
    let (h, _): (usize, _) = cur.number("height")?;
    let (scale, at): (f64, _) = cur.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Parse {
            offset: at,
            message: "scale must be non-zero and finite".into(),
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return cur.fail("missing separator after scale");
    }
    cur.pos += 1;
    let little = scale < 0.0;
    let count = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Parse {
            offset: cur.pos,
            message: "image dimensions overflow".into(),
        })?;
    let payload = &bytes[cur.pos..];
    if payload.len() < 4 * count {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!(
                "truncated payload: expected {} bytes, found {}",
                4 * count,
                payload.len()
            ),
        });
    }
    if payload.len() > 4 * count {
        return Err(Error::Parse {
            offset: cur.pos + 4 * count,
            message: "trailing bytes after payload".into(),
        });
    }
    let mut data = vec![0.0f64; count];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        if !v.is_finite() {
            return Err(Error::Parse {
                offset: cur.pos + 4 * i,
                message: format!("non-finite sample {v}"),
            });
        }
        let file_row = i / (w * channels);
        let rest = i % (w * channels);
        let y = h - 1 - file_row;
        data[y * w * channels + rest] = v as f64;
    }
    ImageBuffer::new(w, h, channels, data)
}

pub fn write_pfm(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pfm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes)
}

pub fn write_flow(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    write_pfm(path, flow.as_image())
}

/// Reads a 3-channel PFM as a flow field; the third channel must be zero.
pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let img = read_pfm(path)?;
    if img.channels() != 3 {
        return Err(Error::Contract("flow files must be 3-channel PFM".into()));
    }
    if img.data().chunks_exact(3).any(|p| p[2] != 0.0) {
        return Err(Error::Contract("flow padding channel must be zero".into()));
    }
    FlowField::from_image(img)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    write_pfm(path, &mask.to_image())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Mask::from_image(&read_pfm(path)?)
}

/// File names of one sample, relative to its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub rgb: String,
    pub amplitude: String,
    pub tof_depth: String,
    pub gt_depth: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_flow: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernels: Option<String>,
}

impl Default for SampleFiles {
    fn default() -> Self {
        Self {
            rgb: "rgb.pfm".into(),
            amplitude: "amplitude.pfm".into(),
            tof_depth: "tof_depth.pfm".into(),
            gt_depth: "gt_depth.pfm".into(),
            mask: "mask.pfm".into(),
            gt_flow: None,
            kernels: None,
        }
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub format: u32,
    pub id: String,
    pub f_x: f64,
    pub f_y: f64,
    pub t_x: f64,
    pub t_y: f64,
    pub c_x: f64,
    pub c_y: f64,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub aligned: bool,
    pub files: SampleFiles,
}

impl SampleManifest {
    pub fn calib(&self) -> WeakCalibParams {
        WeakCalibParams {
            f_x: self.f_x,
            f_y: self.f_y,
            t_x: self.t_x,
            t_y: self.t_y,
            c_x: self.c_x,
            c_y: self.c_y,
        }
    }
}

pub const META_FILE: &str = "meta.json";

fn manifest_err(field: &str, message: impl Into<String>) -> Error {
    Error::Manifest {
        field: field.into(),
        message: message.into(),
    }
}

/// Writes `sample` into `dir` (created if needed) and returns its manifest.
pub fn write_sample(
    dir: impl AsRef<Path>,
    id: &str,
    sample: &DataSample,
) -> Result<SampleManifest> {
    sample.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = SampleFiles::default();
    write_pfm(dir.join(&files.rgb), &sample.rgb)?;
    write_pfm(dir.join(&files.amplitude), &sample.amplitude)?;
    write_pfm(dir.join(&files.tof_depth), &sample.tof_depth)?;
    write_pfm(dir.join(&files.gt_depth), &sample.gt_depth)?;
    write_mask(dir.join(&files.mask), &sample.mask)?;
    if let Some(flow) = &sample.gt_flow {
        let name = "gt_flow.pfm".to_string();
        write_flow(dir.join(&name), flow)?;
        files.gt_flow = Some(name);
    }
    let (width, height) = sample.size();
    let c = sample.calib;
    let manifest = SampleManifest {
        format: FORMAT_VERSION,
        id: id.to_string(),
        f_x: c.f_x,
        f_y: c.f_y,
        t_x: c.t_x,
        t_y: c.t_y,
        c_x: c.c_x,
        c_y: c.c_y,
        width,
        height,
        seed: sample.seed,
        aligned: sample.aligned,
        files,
    };
    write_json(dir.join(META_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<SampleManifest> {
    let path = dir.as_ref().join(META_FILE);
    if !path.is_file() {
        return Err(manifest_err(
            "meta",
            format!("{} not found", path.display()),
        ));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: SampleManifest =
        serde_json::from_str(&text).map_err(|e| manifest_err("meta", e.to_string()))?;
    if m.format != FORMAT_VERSION {
        return Err(manifest_err(
            "format",
            format!("unsupported version {}", m.format),
        ));
    }
    Ok(m)
}

fn load_field<T>(
    dir: &Path,
    field: &str,
    name: &str,
    size: (usize, usize),
    read: impl FnOnce(PathBuf) -> Result<T>,
    size_of: impl FnOnce(&T) -> (usize, usize),
) -> Result<T> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(manifest_err(field, format!("{} not found", path.display())));
    }
    let value = read(path).map_err(|e| manifest_err(field, e.to_string()))?;
    let got = size_of(&value);
    if got != size {
        return Err(manifest_err(
            field,
            format!(
                "size {}x{} differs from {}x{}",
                got.0, got.1, size.0, size.1
            ),
        ));
    }
    Ok(value)
}

/// Reads a sample directory written by [`write_sample`], checking that every
/// file exists and agrees with the manifest size.
pub fn read_sample(dir: impl AsRef<Path>) -> Result<(SampleManifest, DataSample)> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let size = (m.width, m.height);
    let f = &m.files;
    let img = |field: &str, name: &str| load_field(dir, field, name, size, read_pfm, |i| i.size());
    let rgb = img("rgb", &f.rgb)?;
    let amplitude = img("amplitude", &f.amplitude)?;
    let tof_depth = img("tof_depth", &f.tof_depth)?;
    let gt_depth = img("gt_depth", &f.gt_depth)?;
    let mask = load_field(dir, "mask", &f.mask, size, read_mask, |m| m.size())?;
    let gt_flow = match &f.gt_flow {
        Some(name) => Some(load_field(dir, "gt_flow", name, size, read_flow, |f| {
            f.size()
        })?),
        None => None,
    };
    for (field, im, ch) in [
        ("rgb", &rgb, 3),
        ("amplitude", &amplitude, 1),
        ("tof_depth", &tof_depth, 1),
        ("gt_depth", &gt_depth, 1),
    ] {
        if im.channels() != ch {
            return Err(manifest_err(
                field,
                format!("expected {ch} channels, got {}", im.channels()),
            ));
        }
    }
    let calib = m
        .calib()
        .validated()
        .map_err(|e| manifest_err("calib", e.to_string()))?;
    let sample = DataSample {
        rgb,
        amplitude,
        tof_depth,
        gt_depth,
        mask,
        calib,
        aligned: m.aligned,
        gt_flow,
        seed: m.seed,
    };
    Ok((m, sample))
}

/// Side-car metadata for a stored kernel field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelMeta {
    pub format: u32,
    pub width: usize,
    pub height: usize,
    pub k: usize,
}

fn kernel_meta_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Stores a kernel field as one single-channel PFM of `k² + 1` stacked
/// planes (one per tap, then the bias), each `width x height`, plus a JSON
/// side-car with the same stem.
pub fn write_kernels(path: impl AsRef<Path>, kf: &KernelField) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = kf.size();
    let kk = kf.taps();
    let planes = kk + 1;
    let stacked = ImageBuffer::from_fn(w, h * planes, 1, |x, y, _| {
        let (plane, row) = (y / h, y % h);
        if plane < kk {
            kf.kernel(x, row)[plane]
        } else {
            kf.bias().get(x, row)
        }
    });
    write_pfm(path, &stacked)?;
    let meta = KernelMeta {
        format: FORMAT_VERSION,
        width: w,
        height: h,
        k: kf.k(),
    };
    write_json(kernel_meta_path(path), &meta)
}

pub fn read_kernels(path: impl AsRef<Path>) -> Result<KernelField> {
    let path = path.as_ref();
    let meta_path = kernel_meta_path(path);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: KernelMeta =
        serde_json::from_str(&text).map_err(|e| manifest_err("kernels", e.to_string()))?;
    if meta.format != FORMAT_VERSION {
        return Err(manifest_err(
            "format",
            format!("unsupported version {}", meta.format),
        ));
    }
    let stacked = read_pfm(path)?;
    let kk = meta.k * meta.k;
    let (w, h) = (meta.width, meta.height);
    if stacked.channels() != 1 || stacked.size() != (w, h * (kk + 1)) {
        return Err(manifest_err(
            "kernels",
            "raster shape does not match side-car",
        ));
    }
    let mut weights = vec![0.0; w * h * kk];
    for y in 0..h {
        for x in 0..w {
            for j in 0..kk {
                weights[(y * w + x) * kk + j] = stacked.get(x, j * h + y);
            }
        }
    }
    let bias = ImageBuffer::from_fn(w, h, 1, |x, y, _| stacked.get(x, kk * h + y));
    KernelField::new(w, h, meta.k, weights, bias)
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Seeded shuffle-and-cut into `(train, test)` with
/// `|test| = round(test_fraction · N)`. Both halves keep the input order.
pub fn split_dataset<T: Clone>(
    items: &[T],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::DegenerateInput(
            "cannot split an empty dataset".into(),
        ));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Domain(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = items.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (item, t) in items.iter().zip(is_test) {
        if t {
            test.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, test))
}
