//! Ray casting of the scene into per-pixel transient responses.
//!
//! The direct return of a pixel whose ray hits `x` at distance `r` carries
//! energy `ρ_x cosθ / r²`. With multipath enabled, each pixel also receives
//! one-bounce light `l → s → x → camera` estimated by uniform area sampling of
//! all surfaces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::scene::{Material, Object, Scene};
use super::signal::SPEED_OF_LIGHT;
use crate::error::{Error, Result};
use crate::geometry::WeakCalibParams;
use crate::imaging::{ImageBuffer, Mask};

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add_scaled(a: Vec3, b: Vec3, s: f64) -> Vec3 {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Squared distance below which a bounce sample is discarded; keeps the
/// `1/r²` term of neighbouring surfels from producing fireflies in corners.
const MIN_BOUNCE_DIST2: f64 = 1e-4;
const RAY_EPS: f64 = 1e-7;

/// One return: round-trip delay in seconds and unitless energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Impulse {
    pub delay: f64,
    pub energy: f64,
}

/// Per-pixel impulse lists. The first impulse of a lit pixel is the direct
/// return; pixels whose ray escapes have an empty list.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientRaster {
    width: usize,
    height: usize,
    pixels: Vec<Vec<Impulse>>,
}

impl TransientRaster {
    pub fn new(width: usize, height: usize, pixels: Vec<Vec<Impulse>>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{}x{} transient raster needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        let bad = pixels.iter().flatten().any(|i| {
            !(i.delay > 0.0 && i.delay.is_finite() && i.energy >= 0.0 && i.energy.is_finite())
        });
        if bad {
            return Err(Error::Domain(
                "impulses need positive delay and non-negative energy".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
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

    pub fn get(&self, x: usize, y: usize) -> &[Impulse] {
        &self.pixels[y * self.width + x]
    }

    pub fn pixels(&self) -> &[Vec<Impulse>] {
        &self.pixels
    }

    /// Histogram form: each impulse is moved to the centre of its bin of
    /// width `dt` and impulses sharing a bin are merged. Delays move by at
    /// most `dt / 2`, i.e. path lengths by at most `c·dt/2`.
    pub fn binned(&self, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Domain(format!(
                "bin width must be positive, got {dt}"
            )));
        }
        let pixels = self
            .pixels
            .iter()
            .map(|list| {
                let mut bins: Vec<(u64, f64)> = Vec::new();
                for imp in list {
                    let b = (imp.delay / dt).floor() as u64;
                    match bins.iter_mut().find(|(k, _)| *k == b) {
                        Some((_, e)) => *e += imp.energy,
                        None => bins.push((b, imp.energy)),
                    }
                }
                bins.into_iter()
                    .map(|(b, energy)| Impulse {
                        delay: (b as f64 + 0.5) * dt,
                        energy,
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            width: self.width,
            height: self.height,
            pixels,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Axis-aligned rectangle at `p[axis] = coord`, spanning `lo..hi` on the
    /// other two axes (in `(axis + 1) % 3`, `(axis + 2) % 3` order).
    Rect {
        axis: usize,
        coord: f64,
        lo: [f64; 2],
        hi: [f64; 2],
    },
    Sphere {
        center: Vec3,
        radius: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct Primitive {
    shape: Shape,
    material: Material,
    area: f64,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    point: Vec3,
    /// Geometric normal, not yet oriented.
    normal: Vec3,
    material: Material,
}

fn rect(axis: usize, coord: f64, lo: [f64; 2], hi: [f64; 2], material: Material) -> Primitive {
    Primitive {
        shape: Shape::Rect {
            axis,
            coord,
            lo,
            hi,
        },
        material,
        area: (hi[0] - lo[0]) * (hi[1] - lo[1]),
    }
}

fn build_primitives(scene: &Scene) -> Vec<Primitive> {
    let mut prims = Vec::new();
    if let Some(room) = &scene.room {
        let (a, b) = (room.min, room.max);
        // left, right, floor, ceiling, back
        prims.push(rect(0, a[0], [a[1], a[2]], [b[1], b[2]], room.walls[0]));
        prims.push(rect(0, b[0], [a[1], a[2]], [b[1], b[2]], room.walls[1]));
        prims.push(rect(1, b[1], [a[2], a[0]], [b[2], b[0]], room.walls[2]));
        prims.push(rect(1, a[1], [a[2], a[0]], [b[2], b[0]], room.walls[3]));
        prims.push(rect(2, b[2], [a[0], a[1]], [b[0], b[1]], room.walls[4]));
    }
    for o in &scene.objects {
        match *o {
            Object::Sphere {
                center,
                radius,
                material,
            } => prims.push(Primitive {
                shape: Shape::Sphere { center, radius },
                material,
                area: 4.0 * std::f64::consts::PI * radius * radius,
            }),
            Object::Box {
                center,
                size,
                material,
            } => {
                for axis in 0..3 {
                    let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
                    let lo = [center[i] - size[i] / 2.0, center[j] - size[j] / 2.0];
                    let hi = [center[i] + size[i] / 2.0, center[j] + size[j] / 2.0];
                    for side in [-0.5, 0.5] {
                        prims.push(rect(
                            axis,
                            center[axis] + side * size[axis],
                            lo,
                            hi,
                            material,
                        ));
                    }
                }
            }
        }
    }
    prims
}

impl Primitive {
    fn intersect(&self, o: Vec3, d: Vec3, t_min: f64, t_max: f64) -> Option<Hit> {
        match self.shape {
            Shape::Rect {
                axis,
                coord,
                lo,
                hi,
            } => {
                if d[axis] == 0.0 {
                    return None;
                }
                let t = (coord - o[axis]) / d[axis];
                if !(t > t_min && t < t_max) {
                    return None;
                }
                let p = add_scaled(o, d, t);
                let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
                if p[i] < lo[0] || p[i] > hi[0] || p[j] < lo[1] || p[j] > hi[1] {
                    return None;
                }
                let mut normal = [0.0; 3];
                normal[axis] = 1.0;
                Some(Hit {
                    t,
                    point: p,
                    normal,
                    material: self.material,
                })
            }
            Shape::Sphere { center, radius } => {
                let oc = sub(o, center);
                let a = dot(d, d);
                let b = dot(oc, d);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a]
                    .into_iter()
                    .find(|&t| t > t_min && t < t_max)?;
                let p = add_scaled(o, d, t);
                Some(Hit {
                    t,
                    point: p,
                    normal: scale(sub(p, center), 1.0 / radius),
                    material: self.material,
                })
            }
        }
    }

    /// Uniform point on the surface with its geometric normal.
    fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
        match self.shape {
            Shape::Rect {
                axis,
                coord,
                lo,
                hi,
            } => {
                let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
                let mut p = [0.0; 3];
                p[axis] = coord;
                p[i] = lo[0] + (hi[0] - lo[0]) * rng.random::<f64>();
                p[j] = lo[1] + (hi[1] - lo[1]) * rng.random::<f64>();
                let mut n = [0.0; 3];
                n[axis] = 1.0;
                (p, n)
            }
            Shape::Sphere { center, radius } => {
                let z = 2.0 * rng.random::<f64>() - 1.0;
                let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                let s = (1.0 - z * z).max(0.0).sqrt();
                let n = [s * phi.cos(), s * phi.sin(), z];
                (add_scaled(center, n, radius), n)
            }
        }
    }
}

struct Tracer {
    prims: Vec<Primitive>,
    /// Running sum of areas, for area-proportional primitive choice.
    cumulative: Vec<f64>,
    total_area: f64,
}

impl Tracer {
    fn new(scene: &Scene) -> Self {
        let prims = build_primitives(scene);
        let mut acc = 0.0;
        let cumulative = prims
            .iter()
            .map(|p| {
                acc += p.area;
                acc
            })
            .collect();
        Self {
            prims,
            cumulative,
            total_area: acc,
        }
    }

    fn cast(&self, o: Vec3, d: Vec3, t_max: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for p in &self.prims {
            let limit = best.map_or(t_max, |h| h.t);
            if let Some(h) = p.intersect(o, d, RAY_EPS, limit) {
                best = Some(h);
            }
        }
        best
    }

    /// True if nothing blocks the open segment between `a` and `b`.
    fn visible(&self, a: Vec3, b: Vec3) -> bool {
        let d = sub(b, a);
        let len = norm(d);
        let dir = scale(d, 1.0 / len);
        let t_max = len * (1.0 - 1e-9) - RAY_EPS;
        self.prims
            .iter()
            .all(|p| p.intersect(a, dir, RAY_EPS, t_max).is_none())
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> (Vec3, Vec3, Material) {
        let r = rng.random::<f64>() * self.total_area;
        let i = self
            .cumulative
            .partition_point(|&c| c <= r)
            .min(self.prims.len() - 1);
        let (p, n) = self.prims[i].sample(rng);
        (p, n, self.prims[i].material)
    }
}

/// Everything the renderer produces for one view.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub transients: TransientRaster,
    /// Distance from the camera centre to the first hit along each ray.
    pub radial_depth: ImageBuffer,
    /// Unit normals facing the camera (3 channels).
    pub normals: ImageBuffer,
    /// IR albedo of the first hit.
    pub albedo: ImageBuffer,
    /// Shaded RGB image: colour albedo times `0.2 + 0.8 cosθ`.
    pub rgb: ImageBuffer,
    /// Pixels whose ray hit something.
    pub hit: Mask,
}

/// Default principal point: the image centre.
pub fn centre_principal(size: (usize, usize)) -> (f64, f64) {
    ((size.0 as f64 - 1.0) / 2.0, (size.1 as f64 - 1.0) / 2.0)
}

/// Unit ray through pixel `(x, y)`.
pub fn pixel_ray(params: &WeakCalibParams, principal: (f64, f64), x: usize, y: usize) -> Vec3 {
    let d = [
        (x as f64 - principal.0) / params.f_x,
        (y as f64 - principal.1) / params.f_y,
        1.0,
    ];
    scale(d, 1.0 / norm(d))
}

struct PixelResult {
    impulses: Vec<Impulse>,
    radial: f64,
    normal: Vec3,
    albedo: f64,
    rgb: [f64; 3],
    hit: bool,
}

fn render_pixel(
    tracer: &Tracer,
    dir: Vec3,
    mpi: bool,
    bounce_samples: usize,
    rng: &mut ChaCha8Rng,
) -> PixelResult {
    let origin = [0.0; 3];
    let Some(hit) = tracer.cast(origin, dir, f64::INFINITY) else {
        return PixelResult {
            impulses: Vec::new(),
            radial: 0.0,
            normal: [0.0; 3],
            albedo: 0.0,
            rgb: [0.0; 3],
            hit: false,
        };
    };
    let x = hit.point;
    let r = hit.t;
    let mut n_x = hit.normal;
    if dot(n_x, dir) > 0.0 {
        n_x = scale(n_x, -1.0);
    }
    let cos_x = -dot(n_x, dir);
    let rho_x = hit.material.ir;
    let mut impulses = vec![Impulse {
        delay: 2.0 * r / SPEED_OF_LIGHT,
        energy: rho_x * cos_x / (r * r),
    }];
    if mpi && bounce_samples > 0 && tracer.total_area > 0.0 {
        let measure = tracer.total_area / bounce_samples as f64;
        for _ in 0..bounce_samples {
            let (s, n, mat) = tracer.sample_surface(rng);
            let to_light = sub(origin, s);
            let d_ls = norm(to_light);
            // Orient the surfel towards the light; its back side is never lit.
            let n_s = if dot(n, to_light) < 0.0 {
                scale(n, -1.0)
            } else {
                n
            };
            let cos_sl = dot(n_s, to_light) / d_ls;
            let sx = sub(x, s);
            let d2_sx = dot(sx, sx);
            if d2_sx < MIN_BOUNCE_DIST2 {
                continue;
            }
            let d_sx = d2_sx.sqrt();
            let cos_sx = dot(n_s, sx) / d_sx;
            let cos_xs = -dot(n_x, sx) / d_sx;
            if cos_sl <= 0.0 || cos_sx <= 0.0 || cos_xs <= 0.0 {
                continue;
            }
            if !tracer.visible(origin, s) || !tracer.visible(s, x) {
                continue;
            }
            let g_ls = cos_sl / (d_ls * d_ls);
            let g_sx = cos_sx * cos_xs / d2_sx;
            let energy = mat.ir * rho_x * g_ls * g_sx / std::f64::consts::PI * measure;
            impulses.push(Impulse {
                delay: (d_ls + d_sx + r) / SPEED_OF_LIGHT,
                energy,
            });
        }
    }
    let shade = 0.2 + 0.8 * cos_x;
    PixelResult {
        impulses,
        radial: r,
        normal: n_x,
        albedo: rho_x,
        rgb: hit.material.rgb.map(|c| c * shade),
        hit: true,
    }
}

/// Renders the ToF view. `bounce_samples` is the number of one-bounce
/// samples per pixel when `mpi` is on. Randomness comes from a per-pixel
/// stream of `scene.seed`, so results do not depend on thread scheduling.
pub fn render_transients(
    scene: &Scene,
    params: &WeakCalibParams,
    size: (usize, usize),
    mpi: bool,
    bounce_samples: usize,
) -> Result<RenderOutput> {
    scene.validate()?;
    let params = params.validated()?;
    let (w, h) = size;
    if w == 0 || h == 0 {
        return Err(Error::Contract("render size must be non-zero".into()));
    }
    let tracer = Tracer::new(scene);
    let principal = centre_principal(size);
    let pixels: Vec<PixelResult> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
            rng.set_stream(i as u64);
            let dir = pixel_ray(&params, principal, i % w, i / w);
            render_pixel(&tracer, dir, mpi, bounce_samples, &mut rng)
        })
        .collect();

    let mut radial = Vec::with_capacity(w * h);
    let mut normals = Vec::with_capacity(3 * w * h);
    let mut albedo = Vec::with_capacity(w * h);
    let mut rgb = Vec::with_capacity(3 * w * h);
    let mut hit = Vec::with_capacity(w * h);
    let mut transients = Vec::with_capacity(w * h);
    for p in pixels {
        radial.push(p.radial);
        normals.extend_from_slice(&p.normal);
        albedo.push(p.albedo);
        rgb.extend_from_slice(&p.rgb);
        hit.push(p.hit);
        transients.push(p.impulses);
    }
    Ok(RenderOutput {
        transients: TransientRaster::new(w, h, transients)?,
        radial_depth: ImageBuffer::new(w, h, 1, radial)?,
        normals: ImageBuffer::new(w, h, 3, normals)?,
        albedo: ImageBuffer::new(w, h, 1, albedo)?,
        rgb: ImageBuffer::new(w, h, 3, rgb)?,
        hit: Mask::from_vec(w, h, hit)?,
    })
}
