//! Per-element loss values and derivatives shared by the tape ops and
//! the plain-`f64` loss functions.

use serde::{Deserialize, Serialize};

use crate::bbox::AREA_FLOOR;
use crate::error::{Error, Result};
use crate::tensor::Float;

pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const PROB_CLAMP: f64 = 1e-7;
pub const IOU_FLOOR: f64 = 1e-7;

/// Which per-sample IoU term the loss scheduler applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionKind {
    /// `-ω^(1-U) ln U - U(1-U)`.
    #[default]
    Adb,
    /// `-(1-U)² ln U`.
    Focal,
    /// `-ω ln U`.
    Wce,
}

/// Per-sample value and `d/dU`. `U` is clamped to `[1e-7, 1]`; the
/// derivative is zero where the clamp is active.
pub fn regression_term<T: Float>(u: T, omega: T, kind: RegressionKind) -> (T, T) {
    let lo = T::lit(IOU_FLOOR);
    let clamped = u < lo || u > T::one();
    let u = u.max(lo).min(T::one());
    let one = T::one();
    let ln_u = u.ln();
    let (value, grad) = match kind {
        RegressionKind::Adb => {
            let m = omega.powf(one - u);
            let value = -m * ln_u - u * (one - u);
            let grad = m * omega.ln() * ln_u - m / u - one + T::lit(2.0) * u;
            (value, grad)
        }
        RegressionKind::Focal => {
            let q = one - u;
            (-q * q * ln_u, T::lit(2.0) * q * ln_u - q * q / u)
        }
        RegressionKind::Wce => (-omega * ln_u, -omega / u),
    };
    (value, if clamped { T::zero() } else { grad })
}

fn focal_cell<T: Float>(p: T, gt: T) -> (T, T) {
    let eps = T::lit(PROB_CLAMP);
    let clamped = p < eps || p > T::one() - eps;
    let p = p.max(eps).min(T::one() - eps);
    let one = T::one();
    let alpha = T::lit(FOCAL_ALPHA as f64);
    let (value, grad) = if gt == one {
        let q = one - p;
        let value = q.powi(FOCAL_ALPHA) * p.ln();
        let grad = -alpha * q.powi(FOCAL_ALPHA - 1) * p.ln() + q.powi(FOCAL_ALPHA) / p;
        (value, grad)
    } else {
        let w = (one - gt).powi(FOCAL_BETA);
        let value = w * p.powi(FOCAL_ALPHA) * (one - p).ln();
        let grad = w * (alpha * p.powi(FOCAL_ALPHA - 1) * (one - p).ln() - p.powi(FOCAL_ALPHA) / (one - p));
        (value, grad)
    };
    (value, if clamped { T::zero() } else { grad })
}

/// Returns the loss and the number of positive (`gt == 1`) cells.
pub fn focal_forward<T: Float>(pred: &[T], gt: &[T]) -> Result<(T, usize)> {
    let num_pos = gt.iter().filter(|&&g| g == T::one()).count();
    if num_pos == 0 {
        return Err(Error::invalid("focal_loss", "target map has no positive cell"));
    }
    let total: T = pred.iter().zip(gt).map(|(&p, &g)| focal_cell(p, g).0).sum();
    Ok((-total / T::from_usize(num_pos).unwrap(), num_pos))
}

pub fn focal_backward<T: Float>(pred: &[T], gt: &[T], num_pos: usize, gout: T, gp: &mut [T]) {
    let scale = -gout / T::from_usize(num_pos).unwrap();
    for i in 0..pred.len() {
        gp[i] = gp[i] + scale * focal_cell(pred[i], gt[i]).1;
    }
}

struct BoxGeom<T> {
    iou: T,
    loss: T,
    d_iou: [T; 4],
    d_loss: [T; 4],
}

/// IoU and `1 - GIoU` with derivatives w.r.t. the predicted `(cx, cy, w, h)`.
fn box_geometry<T: Float>(p: &[T], g: &[T]) -> BoxGeom<T> {
    let half = T::lit(0.5);
    let floor = T::lit(AREA_FLOOR);
    let (zero, one) = (T::zero(), T::one());
    let ind = |c: bool| if c { one } else { zero };

    let (x1, x2) = (p[0] - half * p[2], p[0] + half * p[2]);
    let (y1, y2) = (p[1] - half * p[3], p[1] + half * p[3]);
    let (gx1, gx2) = (g[0] - half * g[2], g[0] + half * g[2]);
    let (gy1, gy2) = (g[1] - half * g[3], g[1] + half * g[3]);

    let iw_raw = x2.min(gx2) - x1.max(gx1);
    let ih_raw = y2.min(gy2) - y1.max(gy1);
    let (iw, ih) = (iw_raw.max(zero), ih_raw.max(zero));
    let inter = iw * ih;
    // d(iw)/d(x1, x2), d(ih)/d(y1, y2)
    let diw = if iw_raw > zero { [-ind(x1 >= gx1), ind(x2 <= gx2)] } else { [zero, zero] };
    let dih = if ih_raw > zero { [-ind(y1 >= gy1), ind(y2 <= gy2)] } else { [zero, zero] };
    // order: x1, x2, y1, y2
    let d_inter = [ih * diw[0], ih * diw[1], iw * dih[0], iw * dih[1]];

    let (pw, ph) = (x2 - x1, y2 - y1);
    let ap_raw = pw * ph;
    let ap = ap_raw.max(floor);
    let d_ap = if ap_raw > floor { [-ph, ph, -pw, pw] } else { [zero; 4] };
    let ag = ((gx2 - gx1) * (gy2 - gy1)).max(floor);

    let union_raw = ap + ag - inter;
    let union = union_raw.max(floor);
    let d_union: [T; 4] = if union_raw > floor {
        std::array::from_fn(|i| d_ap[i] - d_inter[i])
    } else {
        [zero; 4]
    };
    let iou = inter / union;
    let d_iou_c: [T; 4] = std::array::from_fn(|i| (d_inter[i] * union - inter * d_union[i]) / (union * union));

    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let c_raw = cw * ch;
    let carea = c_raw.max(floor);
    let d_c = if c_raw > floor {
        [-ch * ind(x1 <= gx1), ch * ind(x2 >= gx2), -cw * ind(y1 <= gy1), cw * ind(y2 >= gy2)]
    } else {
        [zero; 4]
    };
    // loss = 1 - (iou - (carea - union) / carea) = 2 - iou - union / carea
    let loss = T::lit(2.0) - iou - union / carea;
    let d_loss_c: [T; 4] =
        std::array::from_fn(|i| -d_iou_c[i] - (d_union[i] * carea - union * d_c[i]) / (carea * carea));

    let to_center = |d: [T; 4]| [d[0] + d[1], d[2] + d[3], half * (d[1] - d[0]), half * (d[3] - d[2])];
    BoxGeom { iou, loss, d_iou: to_center(d_iou_c), d_loss: to_center(d_loss_c) }
}

pub fn giou_loss_grad<T: Float>(p: &[T], g: &[T]) -> (T, [T; 4]) {
    let geo = box_geometry(p, g);
    (geo.loss, geo.d_loss)
}

pub fn iou_grad<T: Float>(p: &[T], g: &[T]) -> (T, [T; 4]) {
    let geo = box_geometry(p, g);
    (geo.iou, geo.d_iou)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, p: [f64; 4]) -> [f64; 4] {
        let h = 1e-6;
        std::array::from_fn(|i| {
            let mut up = p;
            let mut dn = p;
            up[i] += h;
            dn[i] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
    }

    #[test]
    fn box_derivatives_match_finite_differences() {
        let gt = [0.52, 0.47, 0.25, 0.3];
        for p in [[0.5, 0.5, 0.2, 0.22], [0.6, 0.4, 0.31, 0.18], [0.9, 0.1, 0.1, 0.1], [0.5, 0.45, 0.5, 0.5]] {
            let (_, d) = giou_loss_grad(&p, &gt);
            let num = fd(|q| giou_loss_grad(q, &gt).0, p);
            for i in 0..4 {
                assert!((d[i] - num[i]).abs() < 1e-6, "giou d{i}: {} vs {}", d[i], num[i]);
            }
            let (_, d) = iou_grad(&p, &gt);
            let num = fd(|q| iou_grad(q, &gt).0, p);
            for i in 0..4 {
                assert!((d[i] - num[i]).abs() < 1e-6, "iou d{i}: {} vs {}", d[i], num[i]);
            }
        }
    }

    #[test]
    fn regression_derivatives_match_finite_differences() {
        for kind in [RegressionKind::Adb, RegressionKind::Focal, RegressionKind::Wce] {
            for &omega in &[0.5, 1.0, 2.0, 3.5] {
                for &u in &[0.05f64, 0.3, 0.77, 0.95] {
                    let h = 1e-7;
                    let num = (regression_term(u + h, omega, kind).0 - regression_term(u - h, omega, kind).0) / (2.0 * h);
                    let ana = regression_term(u, omega, kind).1;
                    assert!((num - ana).abs() < 1e-5 * num.abs().max(1.0), "{kind:?} {omega} {u}");
                }
            }
        }
    }
}
