//! Center-based prediction head: a classification score map, an
//! intra-cell offset map and a normalized size map, plus box decoding
//! and the inference-time Hanning penalty.

use std::f64::consts::PI;

use rand::Rng;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::losses::center_cell;
use crate::tensor::{BatchNormMode, Float, ParamId, ParamStore, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
/// Classification bias so the initial score is about 0.1.
pub const CLS_BIAS_INIT: f64 = -2.19;
pub const HEAD_KERNEL: usize = 3;

/// Decoded head outputs for one image. Maps are row-major `S×S`; the
/// two-channel maps are channel-first (`[x-plane, y-plane]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMaps {
    pub s: usize,
    pub cls: Vec<f64>,
    pub offset: Vec<f64>,
    pub size: Vec<f64>,
}

impl ResponseMaps {
    pub fn new(s: usize, cls: Vec<f64>, offset: Vec<f64>, size: Vec<f64>) -> Result<Self> {
        if s == 0 || cls.len() != s * s || offset.len() != 2 * s * s || size.len() != 2 * s * s {
            return Err(Error::shape("ResponseMaps", format!("maps do not match S = {s}")));
        }
        Ok(ResponseMaps { s, cls, offset, size })
    }

    /// Builds maps whose decode is `b`: a single peak at the center cell,
    /// the intra-cell offset there and the box size everywhere.
    pub fn encode(b: &BBox, s: usize) -> Self {
        let (i, j) = center_cell(b, s);
        let sf = s as f64;
        let mut cls = vec![0.0; s * s];
        cls[i * s + j] = 1.0;
        let mut offset = vec![0.0; 2 * s * s];
        offset[i * s + j] = b.cx * sf - j as f64;
        offset[s * s + i * s + j] = b.cy * sf - i as f64;
        let mut size = vec![b.w; 2 * s * s];
        size[s * s..].iter_mut().for_each(|v| *v = b.h);
        ResponseMaps { s, cls, offset, size }
    }

    /// Extracts item `b` of a batched head output (`cls: [B,S,S,1]`,
    /// `offset, size: [B,S,S,2]`, channel-last).
    pub fn from_batch<T: Float>(cls: &[T], offset: &[T], size: &[T], s: usize, b: usize) -> Self {
        let n = s * s;
        let f = |v: T| v.to_f64().unwrap();
        let cls_v = cls[b * n..(b + 1) * n].iter().map(|&v| f(v)).collect();
        let planes = |m: &[T]| {
            let m = &m[b * n * 2..(b + 1) * n * 2];
            (0..2).flat_map(|c| (0..n).map(move |i| f(m[i * 2 + c]))).collect()
        };
        ResponseMaps { s, cls: cls_v, offset: planes(offset), size: planes(size) }
    }
}

/// Row-major index of the maximum; first occurrence wins ties.
pub fn argmax_first<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Box at the arg-max cell of the classification map.
pub fn decode_bbox(maps: &ResponseMaps) -> BBox {
    decode_at(maps, argmax_first(&maps.cls))
}

pub fn decode_at(maps: &ResponseMaps, cell: usize) -> BBox {
    let s = maps.s;
    let n = s * s;
    let (i, j) = (cell / s, cell % s);
    let sf = s as f64;
    BBox {
        cx: (j as f64 + maps.offset[cell]) / sf,
        cy: (i as f64 + maps.offset[n + cell]) / sf,
        w: maps.size[cell],
        h: maps.size[n + cell],
    }
}

/// `w[k] = 0.5 (1 - cos(2πk / (S-1)))`; all ones for `S = 1`.
pub fn hanning_window(s: usize) -> Vec<f64> {
    if s <= 1 {
        return vec![1.0; s];
    }
    (0..s).map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / (s - 1) as f64).cos())).collect()
}

/// `cls ⊙ (w ⊗ w)`.
pub fn hanning_penalty(cls: &[f64], s: usize) -> Result<Vec<f64>> {
    if cls.len() != s * s {
        return Err(Error::shape("hanning_penalty", format!("{} scores for S = {s}", cls.len())));
    }
    let w = hanning_window(s);
    Ok(cls.iter().enumerate().map(|(idx, &v)| v * w[idx / s] * w[idx % s]).collect())
}

/// One conv layer followed by batch normalization and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub weight: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Three conv layers tapering `E -> E/2 -> E/4 -> out`, sigmoid output.
#[derive(Debug, Clone)]
pub struct HeadBranch {
    pub hidden: [ConvBn; 2],
    pub out_weight: ParamId,
    pub out_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub cls: HeadBranch,
    pub offset: HeadBranch,
    pub size: HeadBranch,
    pub channels: usize,
}

fn conv_init<T: Float>(store: &mut ParamStore<T>, name: String, cin: usize, cout: usize, rng: &mut impl Rng) -> ParamId {
    let fan_in = HEAD_KERNEL * HEAD_KERNEL * cin;
    store.add_uniform(name, &[fan_in, cout], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl HeadBranch {
    fn init<T: Float>(store: &mut ParamStore<T>, prefix: &str, e: usize, out: usize, rng: &mut impl Rng) -> Self {
        let widths = [e, (e / 2).max(1), (e / 4).max(1)];
        let hidden = std::array::from_fn(|l| {
            let p = format!("{prefix}.{l}");
            let cout = widths[l + 1];
            ConvBn {
                weight: conv_init(store, format!("{p}.conv.weight"), widths[l], cout, rng),
                gain: store.add(format!("{p}.bn.weight"), Tensor::full(vec![cout], T::one())),
                bias: store.add(format!("{p}.bn.bias"), Tensor::zeros(vec![cout])),
                running_mean: store.add_buffer(format!("{p}.bn.running_mean"), Tensor::zeros(vec![cout])),
                running_var: store.add_buffer(format!("{p}.bn.running_var"), Tensor::full(vec![cout], T::one())),
            }
        });
        let out_weight = conv_init(store, format!("{prefix}.2.conv.weight"), widths[2], out, rng);
        let bound = 1.0 / ((HEAD_KERNEL * HEAD_KERNEL * widths[2]) as f64).sqrt();
        let out_bias = store.add_uniform(format!("{prefix}.2.conv.bias"), &[out], bound, rng);
        HeadBranch { hidden, out_weight, out_bias }
    }
}

impl HeadParams {
    pub fn init<T: Float>(store: &mut ParamStore<T>, prefix: &str, e: usize, rng: &mut impl Rng) -> Self {
        let cls = HeadBranch::init(store, &format!("{prefix}.cls"), e, 1, rng);
        *store.get_mut(cls.out_bias) = Tensor::full(vec![1], T::lit(CLS_BIAS_INIT));
        let offset = HeadBranch::init(store, &format!("{prefix}.offset"), e, 2, rng);
        let size = HeadBranch::init(store, &format!("{prefix}.size"), e, 2, rng);
        HeadParams { cls, offset, size, channels: e }
    }

    fn branches(&self) -> [&HeadBranch; 3] {
        [&self.cls, &self.offset, &self.size]
    }
}

/// Whether normalization uses batch statistics or running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// A batch-statistics normalization node and the buffers it feeds.
#[derive(Debug, Clone, Copy)]
pub struct BnRecord {
    pub node: Var,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Tape outputs of the head, channel-last.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    /// `[B, S, S, 1]`.
    pub cls: Var,
    /// `[B, S, S, 2]`.
    pub offset: Var,
    /// `[B, S, S, 2]`.
    pub size: Var,
    pub bn: Vec<BnRecord>,
}

/// Runs the three branches over `feat: [B, S, S, E]`.
pub fn head_forward<T: Float>(tape: &mut Tape<T>, feat: Var, p: &HeadParams, vars: &[Var], mode: NormMode) -> Result<HeadOutputs> {
    let sf = tape.shape(feat);
    if sf.len() != 4 || sf[1] != sf[2] || sf[3] != p.channels {
        return Err(Error::shape("head_forward", format!("feature map {sf:?} must be [B, S, S, {}]", p.channels)));
    }
    let mut bn = Vec::new();
    let mut outs = Vec::with_capacity(3);
    for branch in p.branches() {
        let mut h = feat;
        for layer in &branch.hidden {
            let conv = tape.conv2d(h, layer.weight.var(vars), HEAD_KERNEL)?;
            let norm_mode = match mode {
                NormMode::Train => BatchNormMode::Batch,
                NormMode::Eval => BatchNormMode::Fixed {
                    mean: tape.value(layer.running_mean.var(vars)).to_vec(),
                    var: tape.value(layer.running_var.var(vars)).to_vec(),
                },
            };
            let normed = tape.batch_norm(conv, layer.gain.var(vars), layer.bias.var(vars), norm_mode)?;
            if mode == NormMode::Train {
                bn.push(BnRecord { node: normed, running_mean: layer.running_mean, running_var: layer.running_var });
            }
            h = tape.relu(normed);
        }
        let out = tape.conv2d(h, branch.out_weight.var(vars), HEAD_KERNEL)?;
        let out = tape.add_bias(out, branch.out_bias.var(vars))?;
        outs.push(tape.sigmoid(out));
    }
    Ok(HeadOutputs { cls: outs[0], offset: outs[1], size: outs[2], bn })
}

/// Folds the batch statistics of a training forward pass into the
/// running buffers (`momentum = 0.1`, unbiased variance).
pub fn update_running_stats<T: Float>(store: &mut ParamStore<T>, tape: &Tape<T>, records: &[BnRecord]) {
    let m = T::lit(BN_MOMENTUM);
    for r in records {
        let Some((mean, var, count)) = tape.batch_norm_stats(r.node) else { continue };
        let correction = if count > 1 { T::lit(count as f64 / (count - 1) as f64) } else { T::one() };
        let (mean, var) = (mean.to_vec(), var.to_vec());
        for (dst, src) in store.get_mut(r.running_mean).data_mut().iter_mut().zip(&mean) {
            *dst = (T::one() - m) * *dst + m * *src;
        }
        for (dst, src) in store.get_mut(r.running_var).data_mut().iter_mut().zip(&var) {
            *dst = (T::one() - m) * *dst + m * *src * correction;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_single_peak() {
        let s = 8;
        let mut cls = vec![0.1; 64];
        cls[2 * 8 + 3] = 0.9;
        let maps = ResponseMaps::new(s, cls, vec![0.5; 128], vec![0.25; 128]).unwrap();
        assert_eq!(decode_bbox(&maps), BBox::new(0.4375, 0.3125, 0.25, 0.25));
    }

    #[test]
    fn ties_pick_first_cell() {
        let maps = ResponseMaps::new(4, vec![0.3; 16], vec![0.0; 32], vec![0.5; 32]).unwrap();
        let b = decode_bbox(&maps);
        assert_eq!((b.cx, b.cy), (0.0, 0.0));
    }

    #[test]
    fn hanning_examples() {
        let w = hanning_window(5);
        let want = [0.0, 0.5, 1.0, 0.5, 0.0];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(hanning_window(1), vec![1.0]);
        let pen = hanning_penalty(&[0.7; 25], 5).unwrap();
        assert_eq!(pen[12], 0.7);
        assert_eq!(argmax_first(&pen), 12);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let b = BBox::new(0.41, 0.66, 0.2, 0.3);
        let d = decode_bbox(&ResponseMaps::encode(&b, 16));
        assert!((d.cx - b.cx).abs() < 1e-12 && (d.cy - b.cy).abs() < 1e-12);
        assert_eq!((d.w, d.h), (b.w, b.h));
    }
}
