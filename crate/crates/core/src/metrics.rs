//! Mask-aware losses and evaluation metrics for flow and depth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{sobel, sobel_adjoint, FlowField, ImageBuffer, Mask};

/// Weight of the gradient term in [`depth_loss`].
pub const DEFAULT_LAMBDA: f64 = 10.0;
/// Ground-truth depth cut-off for [`quantile_mae`], in metres.
pub const DEFAULT_RANGE_LIMIT: f64 = 4.0;

fn check_mask(mask: &Mask, size: (usize, usize)) -> Result<usize> {
    if mask.size() != size {
        return Err(Error::Dimension("mask size differs from inputs".into()));
    }
    match mask.count() {
        0 => Err(Error::DegenerateInput("mask has no valid pixels".into())),
        n => Ok(n),
    }
}

/// Mean end-point error over valid pixels.
pub fn aepe(pred: &FlowField, gt: &FlowField, mask: &Mask) -> Result<f64> {
    if pred.size() != gt.size() {
        return Err(Error::Dimension("flow sizes differ".into()));
    }
    let n = check_mask(mask, pred.size())?;
    let total: f64 = mask
        .iter_valid()
        .map(|(x, y)| {
            let (a, b) = (pred.get(x, y), gt.get(x, y));
            (a.0 - b.0).hypot(a.1 - b.1)
        })
        .sum();
    Ok(total / n as f64)
}

/// `Σ_s α_s / N_s · Σ_p ‖pred_s(p) − gt_s(p)‖₁` over each scale's valid pixels.
pub fn flow_loss_multiscale(
    preds: &[FlowField],
    gts: &[FlowField],
    alphas: &[f64],
    masks: &[Mask],
) -> Result<f64> {
    if preds.len() != gts.len() || preds.len() != alphas.len() || preds.len() != masks.len() {
        return Err(Error::Contract(format!(
            "scale counts differ: {} preds, {} gts, {} weights, {} masks",
            preds.len(),
            gts.len(),
            alphas.len(),
            masks.len()
        )));
    }
    let mut loss = 0.0;
    for (((pred, gt), &alpha), mask) in preds.iter().zip(gts).zip(alphas).zip(masks) {
        if pred.size() != gt.size() {
            return Err(Error::Dimension("flow sizes differ within a scale".into()));
        }
        let n = check_mask(mask, pred.size())?;
        let sum: f64 = mask
            .iter_valid()
            .map(|(x, y)| {
                let (a, b) = (pred.get(x, y), gt.get(x, y));
                (a.0 - b.0).abs() + (a.1 - b.1).abs()
            })
            .sum();
        loss += alpha * sum / n as f64;
    }
    Ok(loss)
}

/// Halves resolution by averaging valid pixels in 2x2 blocks; vectors are
/// scaled by 0.5 to stay in pixel units of the coarser grid.
pub fn downsample_flow(flow: &FlowField, mask: &Mask) -> Result<(FlowField, Mask)> {
    if flow.size() != mask.size() {
        return Err(Error::Dimension("flow and mask sizes differ".into()));
    }
    let (w, h) = ((flow.width() / 2).max(1), (flow.height() / 2).max(1));
    let mut out = FlowField::zeros(w, h);
    let mut valid = Mask::none(w, h);
    for y in 0..h {
        for x in 0..w {
            let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (sx, sy) = (2 * x + dx, 2 * y + dy);
                if sx < flow.width() && sy < flow.height() && mask.get(sx, sy) {
                    let (u, v) = flow.get(sx, sy);
                    su += u;
                    sv += v;
                    n += 1;
                }
            }
            if n > 0 {
                out.set(x, y, 0.5 * su / n as f64, 0.5 * sv / n as f64);
                valid.set(x, y, true);
            }
        }
    }
    Ok((out, valid))
}

/// Uniform per-scale weights.
pub fn uniform_scale_weights(scales: usize) -> Vec<f64> {
    vec![1.0; scales]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthLoss {
    /// `data_term + λ · grad_term`
    pub total: f64,
    /// Mean absolute depth error over valid pixels.
    pub data_term: f64,
    /// Mean of `|Δg_x| + |Δg_y|` over valid pixels, before weighting by λ.
    pub grad_term: f64,
}

/// L1 depth loss plus λ times the L1 difference of Sobel gradients,
/// both averaged over the valid pixels.
pub fn depth_loss(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    mask: &Mask,
    lambda: f64,
) -> Result<DepthLoss> {
    pred.require_single_channel("depth_loss")?;
    pred.check_shape(gt)?;
    let n = check_mask(mask, pred.size())? as f64;
    let (px, py) = sobel(pred)?;
    let (gx, gy) = sobel(gt)?;
    let (mut data, mut grad) = (0.0, 0.0);
    for (x, y) in mask.iter_valid() {
        data += (pred.get(x, y) - gt.get(x, y)).abs();
        grad += (px.get(x, y) - gx.get(x, y)).abs() + (py.get(x, y) - gy.get(x, y)).abs();
    }
    let (data_term, grad_term) = (data / n, grad / n);
    Ok(DepthLoss {
        total: data_term + lambda * grad_term,
        data_term,
        grad_term,
    })
}

#[inline]

/// Subgradient of `depth_loss(..).total` with respect to `pred`, using `sign(0) = 0`.
/// `sign(a − b)`, but 0 when the difference is at rounding level. Otherwise
/// values that agree up to round-off would push the optimiser around.
fn residual_sign(a: f64, b: f64) -> f64 {
    let d = a - b;
    if d.abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0) {
        0.0
    } else {
        d.signum()
    }
}

pub fn depth_loss_gradient(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    mask: &Mask,
    lambda: f64,
) -> Result<ImageBuffer> {
    pred.require_single_channel("depth_loss_gradient")?;
    pred.check_shape(gt)?;
    let n = check_mask(mask, pred.size())? as f64;
    let (w, h) = pred.size();
    let (px, py) = sobel(pred)?;
    let (gx, gy) = sobel(gt)?;
    let mut sx = ImageBuffer::zeros(w, h, 1);
    let mut sy = ImageBuffer::zeros(w, h, 1);
    let mut direct = ImageBuffer::zeros(w, h, 1);
    for (x, y) in mask.iter_valid() {
        direct.set(x, y, 0, residual_sign(pred.get(x, y), gt.get(x, y)) / n);
        sx.set(
            x,
            y,
            0,
            lambda * residual_sign(px.get(x, y), gx.get(x, y)) / n,
        );
        sy.set(
            x,
            y,
            0,
            lambda * residual_sign(py.get(x, y), gy.get(x, y)) / n,
        );
    }
    let through_sobel = sobel_adjoint(&sx, &sy)?;
    direct.zip_map(&through_sobel, |a, b| a + b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileReport {
    pub mae_low: f64,
    pub mae_mid: f64,
    pub mae_high: f64,
    pub mae_all: f64,
    /// Share of evaluated pixels that fall in the outlier class.
    pub outlier_fraction: f64,
    pub range_limit: f64,
}

/// MAE of `pred` within classes defined by the error of `input`.
///
/// Valid pixels with `gt < range_limit` are ranked by `|input − gt|`
/// (ties by row-major index). Ranks `[0, ⌊N/4⌋)` form the low-error class,
/// `[⌊N/4⌋, ⌊N/2⌋)` the mid, `[⌊N/2⌋, ⌊3N/4⌋)` the high, and the rest are
/// outliers. `mae_all` covers every ranked pixel.
pub fn quantile_mae(
    input: &ImageBuffer,
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    mask: &Mask,
    range_limit: f64,
) -> Result<QuantileReport> {
    input.require_single_channel("quantile_mae")?;
    input.check_shape(pred)?;
    input.check_shape(gt)?;
    if mask.size() != gt.size() {
        return Err(Error::Dimension("mask size differs from inputs".into()));
    }
    let w = gt.width();
    let mut ranked: Vec<(f64, usize, f64)> = mask
        .iter_valid()
        .filter(|&(x, y)| gt.get(x, y) < range_limit)
        .map(|(x, y)| {
            let g = gt.get(x, y);
            (
                (input.get(x, y) - g).abs(),
                y * w + x,
                (pred.get(x, y) - g).abs(),
            )
        })
        .collect();
    let n = ranked.len();
    if n < 4 {
        return Err(Error::DegenerateInput(format!(
            "quantile_mae needs at least 4 valid in-range pixels, got {n}"
        )));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let bounds = [0, n / 4, n / 2, 3 * n / 4, n];
    let class_mae = |c: usize| {
        let slice = &ranked[bounds[c]..bounds[c + 1]];
        slice.iter().map(|r| r.2).sum::<f64>() / slice.len() as f64
    };
    Ok(QuantileReport {
        mae_low: class_mae(0),
        mae_mid: class_mae(1),
        mae_high: class_mae(2),
        mae_all: ranked.iter().map(|r| r.2).sum::<f64>() / n as f64,
        outlier_fraction: (n - bounds[3]) as f64 / n as f64,
        range_limit,
    })
}

/// JSON report emitted by the `eval` command. Absent metrics are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aepe: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae_low: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae_mid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae_high: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae_all: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outlier_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range_limit: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_term: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_term: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl MetricReport {
    pub fn with_quantiles(mut self, q: &QuantileReport) -> Self {
        self.mae_low = Some(q.mae_low);
        self.mae_mid = Some(q.mae_mid);
        self.mae_high = Some(q.mae_high);
        self.mae_all = Some(q.mae_all);
        self.outlier_fraction = Some(q.outlier_fraction);
        self.range_limit = Some(q.range_limit);
        self
    }

    pub fn with_depth_loss(mut self, l: &DepthLoss, lambda: f64) -> Self {
        self.data_term = Some(l.data_term);
        self.grad_term = Some(l.grad_term);
        self.total = Some(l.total);
        self.lambda = Some(lambda);
        self
    }
}
