//! Central finite-difference checks of the analytic derivatives of the warp,
//! the calibration solver and the kernel filter.
//!
//! Each check draws seeded random instances that keep every perturbed input
//! away from the non-differentiable points of its operator (integer sample
//! coordinates, zero kernel weights).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{estimate_params, estimate_params_jacobian};
use crate::error::{Error, Result};
use crate::geometry::WeakCalibParams;
use crate::imaging::{warp_gradient, warp_image, Boundary, FlowField, ImageBuffer, Mask};
use crate::kpn::{apply, apply_gradient, KernelField, KpnVariant};

pub const DEFAULT_EPS: f64 = 1e-6;

/// `|a − n| / max(1, |a|, |n|)`: relative for large values, absolute near 0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub op: String,
    pub instances: usize,
    /// Number of partial derivatives compared.
    pub partials: usize,
    pub eps: f64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Warp,
    Calib,
    Kpn,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Warp, Op::Calib, Op::Kpn];

    pub fn name(self) -> &'static str {
        match self {
            Op::Warp => "warp",
            Op::Calib => "calib",
            Op::Kpn => "kpn",
        }
    }
}

impl std::str::FromStr for Op {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Op::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown gradient check `{s}`")))
    }
}

pub fn run(op: Op, instances: usize, eps: f64, seed: u64) -> Result<GradReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    let mut report = GradReport {
        op: op.name().into(),
        instances,
        partials: 0,
        eps,
        max_rel_err: 0.0,
    };
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (n, err) = match op {
            Op::Warp => warp_instance(&mut rng, eps)?,
            Op::Calib => calib_instance(&mut rng, eps)?,
            Op::Kpn => kpn_instance(&mut rng, eps)?,
        };
        report.partials += n;
        report.max_rel_err = report.max_rel_err.max(err);
    }
    Ok(report)
}

fn random_image(
    rng: &mut ChaCha8Rng,
    w: usize,
    h: usize,
    c: usize,
    lo: f64,
    hi: f64,
) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, c, |_, _, _| rng.random_range(lo..hi))
}

/// A displacement whose target coordinate has fractional part in
/// `[0.1, 0.9]`, staying inside `[0, limit − 1]`.
fn safe_offset(rng: &mut ChaCha8Rng, at: usize, limit: usize) -> f64 {
    let cell = rng.random_range(0..limit - 1) as f64;
    cell + rng.random_range(0.1..0.9) - at as f64
}

fn warp_instance(rng: &mut ChaCha8Rng, eps: f64) -> Result<(usize, f64)> {
    let (w, h) = (rng.random_range(4..10), rng.random_range(4..10));
    let c = rng.random_range(1..=3);
    let img = random_image(rng, w, h, c, -1.0, 1.0);
    let flow = FlowField::from_fn(w, h, |x, y| {
        (safe_offset(rng, x, w), safe_offset(rng, y, h))
    });
    let g = warp_gradient(&img, &flow)?;
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            for axis in 0..2 {
                let shifted = |s: f64| -> Result<ImageBuffer> {
                    let mut f = flow.clone();
                    let (u, v) = f.get(x, y);
                    if axis == 0 {
                        f.set(x, y, u + s, v);
                    } else {
                        f.set(x, y, u, v + s);
                    }
                    Ok(warp_image(&img, &f, Boundary::Replicate)?.0)
                };
                let (plus, minus) = (shifted(eps)?, shifted(-eps)?);
                let analytic = if axis == 0 { &g.d_u } else { &g.d_v };
                for ch in 0..c {
                    let numeric = (plus.at(x, y, ch) - minus.at(x, y, ch)) / (2.0 * eps);
                    worst = worst.max(relative_error(analytic.at(x, y, ch), numeric));
                    n += 1;
                }
            }
        }
    }
    Ok((n, worst))
}

fn calib_instance(rng: &mut ChaCha8Rng, eps: f64) -> Result<(usize, f64)> {
    let (w, h) = (rng.random_range(5..10), rng.random_range(4..8));
    let depth = random_image(rng, w, h, 1, 0.5, 4.0);
    let params = WeakCalibParams {
        f_x: rng.random_range(200.0..600.0),
        f_y: rng.random_range(200.0..600.0),
        t_x: rng.random_range(-0.05..0.05),
        t_y: rng.random_range(-0.05..0.05),
        c_x: rng.random_range(-10.0..10.0),
        c_y: rng.random_range(-10.0..10.0),
    };
    let flow = FlowField::from_fn(w, h, |x, y| {
        let (u, v) = params.flow_at(depth.get(x, y));
        (
            u + rng.random_range(-0.5..0.5),
            v + rng.random_range(-0.5..0.5),
        )
    });
    let mask = Mask::from_fn(w, h, |_, _| rng.random_bool(0.85));
    let jac = estimate_params_jacobian(&flow, &depth, &mask)?;
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            // 0: u, 1: v, 2: depth
            for input in 0..3 {
                let perturbed = |s: f64| -> Result<[f64; 4]> {
                    let mut f = flow.clone();
                    let mut d = depth.clone();
                    let (u, v) = f.get(x, y);
                    match input {
                        0 => f.set(x, y, u + s, v),
                        1 => f.set(x, y, u, v + s),
                        _ => d.set(x, y, 0, d.get(x, y) + s),
                    }
                    Ok(estimate_params(&f, &d, &mask)?.params())
                };
                let (plus, minus) = (perturbed(eps)?, perturbed(-eps)?);
                for (p, pj) in jac.params().into_iter().enumerate() {
                    let analytic = match input {
                        0 => pj.wrt_flow.get(x, y).0,
                        1 => pj.wrt_flow.get(x, y).1,
                        _ => pj.wrt_depth.get(x, y),
                    };
                    let numeric = (plus[p] - minus[p]) / (2.0 * eps);
                    worst = worst.max(relative_error(analytic, numeric));
                    n += 1;
                }
            }
        }
    }
    Ok((n, worst))
}

fn kpn_instance(rng: &mut ChaCha8Rng, eps: f64) -> Result<(usize, f64)> {
    let (w, h) = (rng.random_range(3..7), rng.random_range(3..7));
    let k = [1, 3, 5][rng.random_range(0..3)];
    let depth = random_image(rng, w, h, 1, 0.5, 3.0);
    // Weights bounded away from zero keep the L1 norm differentiable.
    let weights: Vec<f64> = (0..w * h * k * k)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let bias = random_image(rng, w, h, 1, -0.5, 0.5);
    let kf = KernelField::new(w, h, k, weights, bias)?;
    let upstream = random_image(rng, w, h, 1, -1.0, 1.0);
    let objective = |d: &ImageBuffer, f: &KernelField, v: KpnVariant| -> Result<f64> {
        let out = apply(d, f, v)?;
        Ok(out
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(a, b)| a * b)
            .sum())
    };
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for variant in KpnVariant::ALL {
        let grads = apply_gradient(&depth, &kf, variant)?.backward(&upstream)?;
        let (weights, bias) = kf.clone().into_parts();
        for i in 0..weights.len() {
            let eval = |s: f64| -> Result<f64> {
                let mut wt = weights.clone();
                wt[i] += s;
                objective(
                    &depth,
                    &KernelField::new(w, h, k, wt, bias.clone())?,
                    variant,
                )
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            worst = worst.max(relative_error(grads.weights[i], numeric));
            n += 1;
        }
        for y in 0..h {
            for x in 0..w {
                let eval_bias = |s: f64| -> Result<f64> {
                    let mut b = bias.clone();
                    b.set(x, y, 0, b.get(x, y) + s);
                    objective(
                        &depth,
                        &KernelField::new(w, h, k, weights.clone(), b)?,
                        variant,
                    )
                };
                let numeric = (eval_bias(eps)? - eval_bias(-eps)?) / (2.0 * eps);
                worst = worst.max(relative_error(grads.bias.get(x, y), numeric));
                let eval_depth = |s: f64| -> Result<f64> {
                    let mut d = depth.clone();
                    d.set(x, y, 0, d.get(x, y) + s);
                    objective(&d, &kf, variant)
                };
                let numeric = (eval_depth(eps)? - eval_depth(-eps)?) / (2.0 * eps);
                worst = worst.max(relative_error(grads.depth.get(x, y), numeric));
                n += 2;
            }
        }
    }
    Ok((n, worst))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_scales() {
        assert_eq!(relative_error(0.0, 1e-7), 1e-7);
        assert!((relative_error(100.0, 101.0) - 1.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn all_ops_pass_small_runs() {
        for op in Op::ALL {
            let r = run(op, 3, DEFAULT_EPS, 1).unwrap();
            assert!(r.partials > 0);
            assert!(r.max_rel_err < 1e-5, "{}: {}", r.op, r.max_rel_err);
        }
        assert!(run(Op::Warp, 1, 0.0, 1).is_err());
        assert!("nope".parse::<Op>().is_err());
    }
}
