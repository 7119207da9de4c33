//! Continuous-wave correlation, phase unwrapping into depth, sensor noise and
//! amplitude preprocessing.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::render::TransientRaster;
use crate::error::{Error, Result};
use crate::imaging::{ImageBuffer, Mask};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const DEFAULT_MODULATION_HZ: f64 = 20e6;
/// Pixels with amplitude at or below this fraction of the image maximum are invalid.
pub const DEFAULT_AMPLITUDE_THRESHOLD: f64 = 1e-9;

pub fn angular_frequency(hz: f64) -> f64 {
    2.0 * PI * hz
}

/// Largest radial distance measurable without phase wrapping, `πc/ω`.
pub fn unambiguous_range(omega: f64) -> f64 {
    PI * SPEED_OF_LIGHT / omega
}

/// Sine and cosine correlation images at angular frequency `omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPair {
    pub c_sin: ImageBuffer,
    pub c_cos: ImageBuffer,
    pub omega: f64,
}

impl CorrelationPair {
    pub fn amplitude(&self) -> ImageBuffer {
        self.c_sin
            .zip_map(&self.c_cos, f64::hypot)
            .expect("correlation images share a shape")
    }
}

fn check_omega(omega: f64) -> Result<()> {
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::Domain(format!(
            "modulation frequency must be positive, got {omega}"
        )));
    }
    Ok(())
}

/// `C_sin = Σ e·sin(ωτ)`, `C_cos = Σ e·cos(ωτ)` over each pixel's impulses.
pub fn correlate(tr: &TransientRaster, omega: f64) -> Result<CorrelationPair> {
    check_omega(omega)?;
    let (w, h) = tr.size();
    let mut s = Vec::with_capacity(w * h);
    let mut c = Vec::with_capacity(w * h);
    for list in tr.pixels() {
        let (mut ss, mut cc) = (0.0, 0.0);
        for imp in list {
            let (sin, cos) = (omega * imp.delay).sin_cos();
            ss += imp.energy * sin;
            cc += imp.energy * cos;
        }
        s.push(ss);
        c.push(cc);
    }
    Ok(CorrelationPair {
        c_sin: ImageBuffer::new(w, h, 1, s)?,
        c_cos: ImageBuffer::new(w, h, 1, c)?,
        omega,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDepth {
    /// Radial distance; 0 where invalid.
    pub depth: ImageBuffer,
    pub amplitude: ImageBuffer,
    pub mask: Mask,
}

/// Wrapped phase `φ ∈ [0, 2π)` of each pixel's phasor, converted to radial
/// distance `cφ/(2ω)`. Pixels whose amplitude does not exceed
/// `threshold · max amplitude` are masked out.
pub fn phase_to_depth(cp: &CorrelationPair, threshold: f64) -> Result<PhaseDepth> {
    check_omega(cp.omega)?;
    cp.c_sin.require_single_channel("phase_to_depth")?;
    cp.c_sin.check_shape(&cp.c_cos)?;
    if !(threshold >= 0.0) {
        return Err(Error::Domain("amplitude threshold must be >= 0".into()));
    }
    let amplitude = cp.amplitude();
    let floor = threshold * amplitude.min_max().1.max(0.0);
    let (w, h) = amplitude.size();
    let mask = Mask::from_fn(w, h, |x, y| {
        let a = amplitude.get(x, y);
        a > 0.0 && a > floor
    });
    let depth = ImageBuffer::from_fn(w, h, 1, |x, y, _| {
        if !mask.get(x, y) {
            return 0.0;
        }
        let mut phi = cp.c_sin.get(x, y).atan2(cp.c_cos.get(x, y));
        if phi < 0.0 {
            phi += 2.0 * PI;
        }
        // atan2 of a tiny negative angle can round up to exactly 2π.
        if phi >= 2.0 * PI {
            phi = 0.0;
        }
        SPEED_OF_LIGHT * phi / (2.0 * cp.omega)
    });
    Ok(PhaseDepth {
        depth,
        amplitude,
        mask,
    })
}

/// Adds i.i.d. `N(0, σ²)` noise to both correlation images.
pub fn add_noise<R: Rng + ?Sized>(
    cp: &CorrelationPair,
    sigma: f64,
    rng: &mut R,
) -> Result<CorrelationPair> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!(
            "noise scale must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(cp.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let c_sin = cp.c_sin.map(|v| v + normal.sample(rng));
    let c_cos = cp.c_cos.map(|v| v + normal.sample(rng));
    Ok(CorrelationPair {
        c_sin,
        c_cos,
        omega: cp.omega,
    })
}

/// Undoes the inverse-square falloff (`raw · depth²`) and rescales so the
/// largest value is 1. An all-zero product stays zero.
pub fn normalize_amplitude(raw: &ImageBuffer, depth: &ImageBuffer) -> Result<ImageBuffer> {
    raw.require_single_channel("normalize_amplitude")?;
    raw.check_shape(depth)?;
    if depth.data().iter().any(|&d| d < 0.0) {
        return Err(Error::Domain("depth must be non-negative".into()));
    }
    let flat = raw.zip_map(depth, |a, d| a * d * d)?;
    let (lo, hi) = flat.min_max();
    if lo < 0.0 {
        return Err(Error::Domain("amplitude must be non-negative".into()));
    }
    if hi <= 0.0 {
        return Ok(flat);
    }
    Ok(flat.map(|v| v / hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tof_sim::render::Impulse;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raster(list: Vec<Impulse>) -> TransientRaster {
        TransientRaster::new(1, 1, vec![list]).unwrap()
    }

    #[test]
    fn single_and_empty_impulse() {
        let omega = angular_frequency(DEFAULT_MODULATION_HZ);
        let tau = 1.7e-8;
        let cp = correlate(
            &raster(vec![Impulse {
                delay: tau,
                energy: 0.4,
            }]),
            omega,
        )
        .unwrap();
        assert_eq!(cp.c_sin.get(0, 0), 0.4 * (omega * tau).sin());
        assert_eq!(cp.c_cos.get(0, 0), 0.4 * (omega * tau).cos());

        let cp = correlate(&raster(vec![]), omega).unwrap();
        assert_eq!((cp.c_sin.get(0, 0), cp.c_cos.get(0, 0)), (0.0, 0.0));
        let pd = phase_to_depth(&cp, DEFAULT_AMPLITUDE_THRESHOLD).unwrap();
        assert!(!pd.mask.get(0, 0));
        assert!(correlate(&raster(vec![]), 0.0).is_err());
    }

    #[test]
    fn two_phasors_quarter_turn() {
        let omega = 1e8;
        let tau2 = (PI / 2.0) / omega;
        // ωτ₁ = 0 is not a valid delay, so use a full period instead.
        let tau1 = 2.0 * PI / omega;
        let cp = correlate(
            &raster(vec![
                Impulse {
                    delay: tau1,
                    energy: 1.0,
                },
                Impulse {
                    delay: tau2,
                    energy: 1.0,
                },
            ]),
            omega,
        )
        .unwrap();
        let phi = cp.c_sin.get(0, 0).atan2(cp.c_cos.get(0, 0));
        assert!((phi - PI / 4.0).abs() < 1e-12);
    }

    #[test]
    fn exact_inversion_within_range() {
        let omega = angular_frequency(DEFAULT_MODULATION_HZ);
        let range = unambiguous_range(omega);
        assert!((range - SPEED_OF_LIGHT / (2.0 * DEFAULT_MODULATION_HZ)).abs() < 1e-9);
        for d in [0.1, 0.5, 1.0, 2.5, 4.0, 7.0, 7.4] {
            let cp = correlate(
                &raster(vec![Impulse {
                    delay: 2.0 * d / SPEED_OF_LIGHT,
                    energy: 0.3,
                }]),
                omega,
            )
            .unwrap();
            let pd = phase_to_depth(&cp, DEFAULT_AMPLITUDE_THRESHOLD).unwrap();
            assert!(pd.mask.get(0, 0));
            assert!(((pd.depth.get(0, 0) - d) / d).abs() < 1e-9, "{d}");
            assert!((pd.amplitude.get(0, 0) - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_identity_and_determinism() {
        let omega = 1e8;
        let cp = correlate(
            &TransientRaster::new(
                2,
                1,
                vec![
                    vec![Impulse {
                        delay: 1e-8,
                        energy: 1.0,
                    }],
                    vec![Impulse {
                        delay: 2e-8,
                        energy: 0.5,
                    }],
                ],
            )
            .unwrap(),
            omega,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(add_noise(&cp, 0.0, &mut rng).unwrap(), cp);
        let a = add_noise(&cp, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = add_noise(&cp, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, cp);
        assert!(add_noise(&cp, -1.0, &mut rng).is_err());
    }

    #[test]
    fn amplitude_normalization() {
        let depth = ImageBuffer::from_fn(4, 3, 1, |x, y, _| 0.5 + 0.3 * x as f64 + 0.1 * y as f64);
        let raw = depth.map(|d| 0.7 / (d * d));
        let n = normalize_amplitude(&raw, &depth).unwrap();
        assert!(n.data().iter().all(|&v| (v - 1.0).abs() < 1e-14));
        let zero = ImageBuffer::zeros(4, 3, 1);
        assert_eq!(normalize_amplitude(&zero, &depth).unwrap(), zero);
        assert!(normalize_amplitude(&raw, &depth.map(|d| -d)).is_err());
    }
}
