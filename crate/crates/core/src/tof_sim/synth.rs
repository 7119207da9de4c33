//! End-to-end synthesis of one aligned RGB-D sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{centre_principal, render_transients};
use super::scene::Scene;
use super::signal::{
    add_noise, angular_frequency, correlate, normalize_amplitude, phase_to_depth,
    unambiguous_range, DEFAULT_AMPLITUDE_THRESHOLD, DEFAULT_MODULATION_HZ,
};
use crate::error::{Error, Result};
use crate::geometry::{plane_correct, DataSample, WeakCalibParams};
use crate::imaging::{ImageBuffer, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub mpi: bool,
    /// One-bounce samples per pixel when `mpi` is on.
    pub bounce_samples: usize,
    /// Standard deviation of the Gaussian noise added to each correlation image.
    pub sigma: f64,
    pub modulation_hz: f64,
    /// Relative amplitude below which a measurement is rejected.
    pub amplitude_threshold: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            mpi: true,
            bounce_samples: 16,
            sigma: 0.0,
            modulation_hz: DEFAULT_MODULATION_HZ,
            amplitude_threshold: DEFAULT_AMPLITUDE_THRESHOLD,
        }
    }
}

/// Stream id of the sensor-noise RNG; render streams use pixel indices.
const NOISE_STREAM: u64 = u64::MAX;

/// Renders `scene` and runs the sensor model, producing an aligned sample.
///
/// Depths are plane depths in metres. `tof_depth` and `gt_depth` are 0 where
/// nothing was hit or the measurement was rejected; the mask further drops
/// pixels beyond the unambiguous range. The amplitude image is the
/// distance-compensated amplitude scaled to a maximum of 1.
pub fn synthesize_sample(
    scene: &Scene,
    params: &WeakCalibParams,
    cfg: &SynthConfig,
) -> Result<DataSample> {
    if !(cfg.modulation_hz > 0.0 && cfg.modulation_hz.is_finite()) {
        return Err(Error::Domain(
            "modulation frequency must be positive".into(),
        ));
    }
    let size = (cfg.width, cfg.height);
    let out = render_transients(scene, params, size, cfg.mpi, cfg.bounce_samples)?;
    let omega = angular_frequency(cfg.modulation_hz);
    let clean = correlate(&out.transients, omega)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(NOISE_STREAM);
    let noisy = add_noise(&clean, cfg.sigma, &mut rng)?;
    let measured = phase_to_depth(&noisy, cfg.amplitude_threshold)?;

    let range = unambiguous_range(omega);
    let (w, h) = size;
    let mask = Mask::from_fn(w, h, |x, y| {
        out.hit.get(x, y) && measured.mask.get(x, y) && out.radial_depth.get(x, y) < range
    });
    let principal = centre_principal(size);
    let zero_outside = |img: &ImageBuffer, keep: &Mask| {
        ImageBuffer::from_fn(
            w,
            h,
            1,
            |x, y, _| if keep.get(x, y) { img.get(x, y) } else { 0.0 },
        )
    };
    let tof_depth = zero_outside(&plane_correct(&measured.depth, params, principal)?, &mask);
    let gt_depth = zero_outside(
        &plane_correct(&out.radial_depth, params, principal)?,
        &out.hit,
    );
    let amplitude =
        normalize_amplitude(&zero_outside(&measured.amplitude, &mask), &measured.depth)?;

    let sample = DataSample {
        rgb: out.rgb,
        amplitude,
        tof_depth,
        gt_depth,
        mask,
        calib: *params,
        aligned: true,
        gt_flow: None,
        seed: scene.seed,
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tof_sim::scene::Material;

    fn cfg(w: usize, h: usize, mpi: bool) -> SynthConfig {
        SynthConfig {
            width: w,
            height: h,
            mpi,
            bounce_samples: 16,
            ..SynthConfig::default()
        }
    }

    fn masked_mean(a: &ImageBuffer, b: &ImageBuffer, m: &Mask) -> (f64, f64) {
        let n = m.count() as f64;
        let (mut signed, mut abs) = (0.0, 0.0);
        for (x, y) in m.iter_valid() {
            let e = a.get(x, y) - b.get(x, y);
            signed += e;
            abs += e.abs();
        }
        (signed / n, abs / n)
    }

    #[test]
    fn noise_free_direct_only_is_exact() {
        let params = WeakCalibParams::new(40.0, 40.0).unwrap();
        let s = synthesize_sample(&Scene::random(2), &params, &cfg(40, 30, false)).unwrap();
        assert!(s.mask.count() > 1000);
        let (_, mae) = masked_mean(&s.tof_depth, &s.gt_depth, &s.mask);
        let (lo, hi) = s.gt_depth.min_max();
        assert!(mae < 1e-6 * (hi - lo), "{mae}");
        assert!(s.aligned && s.gt_flow.is_none());
    }

    #[test]
    fn multipath_reads_long() {
        let params = WeakCalibParams::new(40.0, 40.0).unwrap();
        let scene = Scene::empty_room([-1.5, -1.0, -0.5], [1.5, 1.0, 3.0], Material::gray(0.8), 1);
        let s = synthesize_sample(&scene, &params, &cfg(32, 24, true)).unwrap();
        let (signed, _) = masked_mean(&s.tof_depth, &s.gt_depth, &s.mask);
        assert!(signed > 0.0, "{signed}");
    }

    #[test]
    fn deterministic_sample() {
        let params = WeakCalibParams::new(40.0, 40.0).unwrap();
        let mut c = cfg(20, 15, true);
        c.sigma = 0.01;
        let a = synthesize_sample(&Scene::random(5), &params, &c).unwrap();
        let b = synthesize_sample(&Scene::random(5), &params, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wall_amplitude_is_distance_independent() {
        let params = WeakCalibParams::new(50.0, 50.0).unwrap();
        let mut on_axis = Vec::new();
        for d in [0.5, 1.0, 2.0, 3.0] {
            let s = synthesize_sample(
                &Scene::wall(d, Material::gray(0.6)),
                &params,
                &cfg(9, 9, false),
            )
            .unwrap();
            on_axis.push(s.amplitude.get(4, 4));
        }
        let (lo, hi) = on_axis
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!((hi - lo) / hi < 0.01, "{on_axis:?}");
    }
}
