//! Training losses: weighted focal classification loss on a Gaussian
//! target, L1 and GIoU box regression, the adaptive data-balance (ADB)
//! loss with dataset-frequency weights, and their weighted total.

pub mod kernels;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Var};

pub use kernels::RegressionKind;

/// Trade-off weights of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_iou: 2.0, lambda_l1: 5.0, gamma: 1e-5 }
    }
}

impl LossWeights {
    pub fn validate(&self, path: &str) -> Result<()> {
        for (name, v) in [("lambda_iou", self.lambda_iou), ("lambda_l1", self.lambda_l1), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{path}.{name}"), format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    E,
    #[serde(rename = "10")]
    Ten,
}

/// Dataset frequency weight `ω = log(N_max / N_j) + 0.5`.
pub fn omega_weight(n_max: u64, n_j: u64, base: LogBase) -> Result<f64> {
    if n_j == 0 {
        return Err(Error::invalid("omega_weight", "dataset size N_j must be at least 1"));
    }
    if n_max < n_j {
        return Err(Error::invalid("omega_weight", format!("N_max ({n_max}) < N_j ({n_j})")));
    }
    let ratio = n_max as f64 / n_j as f64;
    let log = match base {
        LogBase::E => ratio.ln(),
        LogBase::Ten => ratio.log10(),
    };
    Ok(log + 0.5)
}

/// Per-sample IoU values and their dataset weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdbInputs {
    u: Vec<f64>,
    omega: Vec<f64>,
}

pub const ADB_U_FLOOR: f64 = kernels::IOU_FLOOR;

impl AdbInputs {
    pub fn new(u: Vec<f64>, omega: Vec<f64>) -> Result<Self> {
        if u.len() != omega.len() {
            return Err(Error::invalid("adb_loss", format!("{} IoUs vs {} weights", u.len(), omega.len())));
        }
        if u.is_empty() {
            return Err(Error::invalid("adb_loss", "empty batch"));
        }
        if omega.iter().any(|&w| !(w >= 0.5 - 1e-12) || !w.is_finite()) {
            return Err(Error::invalid("adb_loss", "weights must be finite and >= 0.5"));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("adb_loss", "IoU values must be finite"));
        }
        let u = u.into_iter().map(|v| v.clamp(ADB_U_FLOOR, 1.0)).collect();
        Ok(AdbInputs { u, omega })
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// `(1/n) Σ [-ω_i^(1-U_i) ln U_i - U_i (1 - U_i)]`.
pub fn adb_loss(inputs: &AdbInputs) -> f64 {
    regression_balance_loss(inputs, RegressionKind::Adb)
}

/// Mean of the chosen per-sample IoU term.
pub fn regression_balance_loss(inputs: &AdbInputs, kind: RegressionKind) -> f64 {
    let total: f64 = inputs.u.iter().zip(&inputs.omega).map(|(&u, &w)| kernels::regression_term(u, w, kind).0).sum();
    total / inputs.len() as f64
}

/// Gaussian heatmap target on an `S×S` grid: exactly 1 at the cell that
/// contains the box center, `exp(-(di² + dj²) / 2σ²)` elsewhere with
/// `σ = max(1, diameter_in_cells / 6)`.
pub fn gaussian_target(b: &BBox, s: usize) -> Vec<f64> {
    let (ci, cj) = center_cell(b, s);
    let sf = s as f64;
    let diameter = ((b.w * sf).powi(2) + (b.h * sf).powi(2)).sqrt();
    let sigma = (diameter / 6.0).max(1.0);
    let mut out = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            let di = i as f64 - ci as f64;
            let dj = j as f64 - cj as f64;
            out[i * s + j] = if i == ci && j == cj {
                1.0
            } else {
                (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
            };
        }
    }
    out
}

/// `(row, col)` of the grid cell containing the box center.
pub fn center_cell(b: &BBox, s: usize) -> (usize, usize) {
    let clamp = |v: f64| ((v * s as f64).floor().max(0.0) as usize).min(s - 1);
    (clamp(b.cy), clamp(b.cx))
}

/// Focal loss of a predicted map in `(0, 1)` against a target map.
pub fn focal_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("focal_loss", "prediction and target sizes differ"));
    }
    Ok(kernels::focal_forward(pred, gt)?.0)
}

pub fn giou_loss(pred: &BBox, gt: &BBox) -> f64 {
    kernels::giou_loss_grad(&pred.to_array(), &gt.to_array()).0
}

/// Mean absolute difference over `(cx, cy, w, h)`.
pub fn l1_loss(pred: &BBox, gt: &BBox) -> f64 {
    pred.to_array().iter().zip(gt.to_array()).map(|(p, g)| (p - g).abs()).sum::<f64>() / 4.0
}

/// The four constituent losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub adb: f64,
}

/// `L_cls + λ_iou·L_iou + λ_L1·L_L1 + γ·L_ADB`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("L_cls", c.cls), ("L_iou", c.iou), ("L_L1", c.l1), ("L_ADB", c.adb)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "loss term", name: name.into() });
        }
    }
    Ok(c.cls + w.lambda_iou * c.iou + w.lambda_l1 * c.l1 + w.gamma * c.adb)
}

/// Tape handles of the constituent losses.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub cls: Var,
    pub iou: Var,
    pub l1: Var,
    pub adb: Var,
    pub total: Var,
}

/// Records the weighted total on the tape.
pub fn total_loss_on_tape<T: Float>(tape: &mut Tape<T>, cls: Var, iou: Var, l1: Var, adb: Var, w: &LossWeights) -> Result<LossVars> {
    let a = tape.scale(iou, T::lit(w.lambda_iou));
    let b = tape.scale(l1, T::lit(w.lambda_l1));
    let c = tape.scale(adb, T::lit(w.gamma));
    let s = tape.add(cls, a)?;
    let s = tape.add(s, b)?;
    let total = tape.add(s, c)?;
    Ok(LossVars { cls, iou, l1, adb, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omega_examples() {
        assert_eq!(omega_weight(500, 500, LogBase::E).unwrap(), 0.5);
        assert!((omega_weight(60000, 6000, LogBase::E).unwrap() - 2.802585).abs() < 1e-6);
        assert!((omega_weight(60000, 6000, LogBase::Ten).unwrap() - 1.5).abs() < 1e-12);
        assert!(omega_weight(100, 0, LogBase::E).is_err());
        assert!(omega_weight(10, 20, LogBase::E).is_err());
        let mut prev = 0.0;
        for n in (1..=100).rev() {
            let w = omega_weight(100, n, LogBase::E).unwrap();
            assert!(w >= prev);
            prev = w;
        }
    }

    #[test]
    fn adb_examples() {
        let all_one = AdbInputs::new(vec![1.0; 4], vec![0.5, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(adb_loss(&all_one), 0.0);
        let one = AdbInputs::new(vec![0.5], vec![0.5]).unwrap();
        assert!((adb_loss(&one) - 0.240129).abs() < 1e-6);
        assert!(AdbInputs::new(vec![], vec![]).is_err());
        assert!(AdbInputs::new(vec![0.5], vec![0.5, 1.0]).is_err());
    }

    #[test]
    fn gaussian_target_shape() {
        let b = BBox::new(0.4375, 0.3125, 0.125, 0.125);
        let m = gaussian_target(&b, 8);
        assert_eq!(m[2 * 8 + 3], 1.0);
        assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 1);
        assert!(m[7 * 8 + 7] < 1e-3);
        assert!(m.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn focal_examples() {
        assert!((focal_loss(&[0.5], &[1.0]).unwrap() - 0.173287).abs() < 1e-6);
        let gt = [1.0, 0.2, 0.0];
        assert!(focal_loss(&[1.0, 0.0, 0.0], &gt).unwrap().abs() < 1e-12);
        assert!(focal_loss(&[0.3, 0.2], &[0.9, 0.1]).is_err());
    }

    #[test]
    fn giou_and_l1_examples() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        let b = BBox::new(1.0, 0.5, 1.0, 1.0);
        assert!((giou_loss(&a, &b) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(giou_loss(&a, &a), 0.0);
        let far = BBox::new(1000.0, 1000.0, 0.01, 0.01);
        let g = giou_loss(&BBox::new(0.0, 0.0, 0.01, 0.01), &far);
        assert!(g < 2.0 && g > 1.999);
        let shifted = BBox::new(0.6, 0.5, 1.0, 1.0);
        assert!((l1_loss(&shifted, &a) - 0.025).abs() < 1e-12);
        assert_eq!(l1_loss(&a, &shifted), l1_loss(&shifted, &a));
    }

    #[test]
    fn total_loss_coefficients() {
        let w = LossWeights::default();
        let ones = LossComponents { cls: 1.0, iou: 1.0, l1: 1.0, adb: 1.0 };
        assert_eq!(total_loss(&ones, &w).unwrap(), 8.00001);
        assert_eq!(total_loss(&LossComponents::default(), &w).unwrap(), 0.0);
        let no_ls = LossWeights { gamma: 0.0, ..w };
        assert_eq!(total_loss(&LossComponents { adb: 123.0, ..ones }, &no_ls).unwrap(), 8.0);
        let err = total_loss(&LossComponents { iou: f64::NAN, ..ones }, &w).unwrap_err();
        assert!(err.to_string().contains("L_iou"));
    }
}
