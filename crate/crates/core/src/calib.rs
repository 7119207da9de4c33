//! Closed-form online calibration from a flow field and a depth map.
//!
//! For every participating pixel the model is
//! `flow(p) = (t_x / D(p) + c_x, t_y / D(p) + c_y)`, with the focal lengths
//! absorbed into `t_x` and `t_y`. The x and y components decouple into two
//! independent straight-line fits against the regressor `1 / D`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{FlowField, ImageBuffer, Mask};

/// Normal equations with a condition number above this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibEstimate {
    pub t_x_star: f64,
    pub t_y_star: f64,
    pub c_x_star: f64,
    pub c_y_star: f64,
    /// RMS of the 2-D flow residual over participating pixels, in pixels.
    pub residual_rms: f64,
    pub pixel_count: usize,
    /// Condition number of the 2x2 normal matrix.
    pub condition: f64,
}

impl CalibEstimate {
    pub fn zero() -> Self {
        Self {
            t_x_star: 0.0,
            t_y_star: 0.0,
            c_x_star: 0.0,
            c_y_star: 0.0,
            residual_rms: 0.0,
            pixel_count: 0,
            condition: 1.0,
        }
    }

    /// `[t_x, t_y, c_x, c_y]`
    pub fn params(&self) -> [f64; 4] {
        [self.t_x_star, self.t_y_star, self.c_x_star, self.c_y_star]
    }

    #[inline]
    pub fn flow_at(&self, depth: f64) -> (f64, f64) {
        (
            self.t_x_star / depth + self.c_x_star,
            self.t_y_star / depth + self.c_y_star,
        )
    }
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    fn add(&mut self, v: f64) {
        let t = self.s + v;
        if self.s.abs() >= v.abs() {
            self.c += (self.s - t) + v;
        } else {
            self.c += (v - t) + self.s;
        }
        self.s = t;
    }

    fn value(self) -> f64 {
        self.s + self.c
    }
}

/// Participating pixels: `(row-major index, 1/D, u, v)`.
fn participants(
    flow: &FlowField,
    depth: &ImageBuffer,
    mask: &Mask,
) -> Result<Vec<(usize, f64, f64, f64)>> {
    depth.require_single_channel("estimate_params")?;
    if flow.size() != depth.size() || mask.size() != depth.size() {
        return Err(Error::Dimension(
            "flow, depth and mask must share one size".into(),
        ));
    }
    let w = depth.width();
    Ok(mask
        .iter_valid()
        .filter_map(|(x, y)| {
            let d = depth.get(x, y);
            let (u, v) = flow.get(x, y);
            (d > 0.0 && u.is_finite() && v.is_finite()).then(|| (y * w + x, 1.0 / d, u, v))
        })
        .collect())
}

/// Moments of the regressor `a = 1/D` and the normal-matrix inverse.
struct Design {
    n: f64,
    mean_a: f64,
    /// Centred sum of squares of `a`; equals `det(AᵀA) / n`.
    saa: f64,
    /// `(AᵀA)⁻¹` entries: `[[i00, i01], [i01, i11]]`.
    inv: [f64; 3],
    condition: f64,
}

impl Design {
    fn new(pts: &[(usize, f64, f64, f64)]) -> Result<Self> {
        if pts.len() < 2 {
            return Err(Error::DegenerateInput(format!(
                "need at least 2 valid pixels, got {}",
                pts.len()
            )));
        }
        let n = pts.len() as f64;
        let mut sa = Sum::default();
        let mut saa_raw = Sum::default();
        for p in pts {
            sa.add(p.1);
            saa_raw.add(p.1 * p.1);
        }
        let mean_a = sa.value() / n;
        let mut saa = Sum::default();
        for p in pts {
            let d = p.1 - mean_a;
            saa.add(d * d);
        }
        let saa = saa.value();
        // AᵀA = [[Σa², Σa], [Σa, n]]
        let (m00, m01, m11) = (saa_raw.value(), sa.value(), n);
        let det = n * saa;
        let half_tr = 0.5 * (m00 + m11);
        let disc = (0.25 * (m00 - m11) * (m00 - m11) + m01 * m01).sqrt();
        let lmax = half_tr + disc;
        let lmin = det / lmax;
        let condition = if lmin > 0.0 {
            lmax / lmin
        } else {
            f64::INFINITY
        };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::Degenerate {
                condition,
                reason: "1/depth is (nearly) constant over the valid pixels".into(),
            });
        }
        Ok(Self {
            n,
            mean_a,
            saa,
            inv: [m11 / det, -m01 / det, m00 / det],
            condition,
        })
    }

    /// Slope and intercept of `target ≈ slope * a + intercept`.
    fn fit(
        &self,
        pts: &[(usize, f64, f64, f64)],
        target: impl Fn(&(usize, f64, f64, f64)) -> f64,
    ) -> (f64, f64) {
        let mut sb = Sum::default();
        for p in pts {
            sb.add(target(p));
        }
        let mean_b = sb.value() / self.n;
        let mut sab = Sum::default();
        for p in pts {
            sab.add((p.1 - self.mean_a) * (target(p) - mean_b));
        }
        let slope = sab.value() / self.saa;
        (slope, mean_b - slope * self.mean_a)
    }
}

/// Least-squares `t*, c*` over pixels that are masked valid, have positive
/// depth, and finite flow.
pub fn estimate_params(
    flow: &FlowField,
    depth: &ImageBuffer,
    mask: &Mask,
) -> Result<CalibEstimate> {
    let pts = participants(flow, depth, mask)?;
    let design = Design::new(&pts)?;
    let (t_x, c_x) = design.fit(&pts, |p| p.2);
    let (t_y, c_y) = design.fit(&pts, |p| p.3);
    let mut ss = Sum::default();
    for p in &pts {
        let ru = p.2 - (t_x * p.1 + c_x);
        let rv = p.3 - (t_y * p.1 + c_y);
        ss.add(ru * ru + rv * rv);
    }
    Ok(CalibEstimate {
        t_x_star: t_x,
        t_y_star: t_y,
        c_x_star: c_x,
        c_y_star: c_y,
        residual_rms: (ss.value() / design.n).sqrt(),
        pixel_count: pts.len(),
        condition: design.condition,
    })
}

/// Converts a depth map into flow using estimated parameters.
///
/// With a mask, masked-out pixels get zero flow; otherwise all depths must be positive.
pub fn convt_flow(
    depth: &ImageBuffer,
    est: &CalibEstimate,
    mask: Option<&Mask>,
) -> Result<FlowField> {
    depth.require_single_channel("convt_flow")?;
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
            let d = depth.get(x, y);
            if d <= 0.0 {
                return Err(Error::Domain(format!(
                    "non-positive depth {d} at ({x}, {y})"
                )));
            }
            let (u, v) = est.flow_at(d);
            flow.set(x, y, u, v);
        }
    }
    Ok(flow)
}

/// Sensitivities of one estimated parameter to every input pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamJacobian {
    /// `(d/du(p), d/dv(p))` per pixel.
    pub wrt_flow: FlowField,
    pub wrt_depth: ImageBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibJacobian {
    pub t_x: ParamJacobian,
    pub t_y: ParamJacobian,
    pub c_x: ParamJacobian,
    pub c_y: ParamJacobian,
}

impl CalibJacobian {
    /// Jacobians in `[t_x, t_y, c_x, c_y]` order.
    pub fn params(&self) -> [&ParamJacobian; 4] {
        [&self.t_x, &self.t_y, &self.c_x, &self.c_y]
    }
}

/// Closed-form derivatives of [`estimate_params`].
///
/// For one axis with design rows `[a_i, 1]`, `θ = (AᵀA)⁻¹Aᵀb`, so
/// `dθ/db_i = (AᵀA)⁻¹ [a_i, 1]ᵀ` and, with residual `r_i = b_i − a_iθ_0 − θ_1`,
/// `dθ/da_i = (AᵀA)⁻¹ ([r_i, 0]ᵀ − θ_0 [a_i, 1]ᵀ)`. Depth enters through
/// `da_i/dD_i = −1/D_i²`, shared by both axes.
pub fn estimate_params_jacobian(
    flow: &FlowField,
    depth: &ImageBuffer,
    mask: &Mask,
) -> Result<CalibJacobian> {
    let est = estimate_params(flow, depth, mask)?;
    let pts = participants(flow, depth, mask)?;
    let design = Design::new(&pts)?;
    let [i00, i01, i11] = design.inv;
    let (w, h) = depth.size();

    let mut jac = [(); 4].map(|_| (FlowField::zeros(w, h), ImageBuffer::zeros(w, h, 1)));
    for &(idx, a, u, v) in &pts {
        let (x, y) = (idx % w, idx / w);
        // d(slope, intercept)/d(target_i)
        let db = (i00 * a + i01, i01 * a + i11);
        let dd = -a * a;
        let axis = |slope: f64, intercept: f64, target: f64| {
            let r = target - slope * a - intercept;
            let g0 = r - slope * a;
            let g1 = -slope;
            ((i00 * g0 + i01 * g1) * dd, (i01 * g0 + i11 * g1) * dd)
        };
        let (dtx_dd, dcx_dd) = axis(est.t_x_star, est.c_x_star, u);
        let (dty_dd, dcy_dd) = axis(est.t_y_star, est.c_y_star, v);

        jac[0].0.set(x, y, db.0, 0.0);
        jac[1].0.set(x, y, 0.0, db.0);
        jac[2].0.set(x, y, db.1, 0.0);
        jac[3].0.set(x, y, 0.0, db.1);
        jac[0].1.set(x, y, 0, dtx_dd);
        jac[1].1.set(x, y, 0, dty_dd);
        jac[2].1.set(x, y, 0, dcx_dd);
        jac[3].1.set(x, y, 0, dcy_dd);
    }
    let [t_x, t_y, c_x, c_y] = jac.map(|(wrt_flow, wrt_depth)| ParamJacobian {
        wrt_flow,
        wrt_depth,
    });
    Ok(CalibJacobian { t_x, t_y, c_x, c_y })
}
