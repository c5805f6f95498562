//! One-pass tracking and the precision / normalized precision / success
//! metrics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::curriculum::Domain;
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::frame::{patch_batch, Frame};
use crate::head::{argmax_first, decode_at, hanning_penalty, NormMode, ResponseMaps};
use crate::synth::{crop_square, from_region, generate_sequence, CropConfig, DatasetSpec};
use crate::tensor::{ParamStore, Tape};

/// Center-error thresholds in pixels, `0..=50`.
pub const PRECISION_THRESHOLDS: usize = 51;
pub const PRECISION_AT: usize = 20;
/// Normalized-error thresholds `0, 0.01, …, 0.5`.
pub const NORM_THRESHOLDS: usize = 51;
pub const NORM_STEP: f64 = 0.01;
/// Overlap thresholds `0, 0.01, …, 1`.
pub const SUCCESS_THRESHOLDS: usize = 101;
pub const SUCCESS_STEP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub precision: Vec<f64>,
    pub norm_precision: Vec<f64>,
    pub success: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Fraction of frames with center error ≤ 20 px.
    pub precision: f64,
    /// Area under the normalized-precision curve over `[0, 0.5]`.
    pub norm_precision: f64,
    /// Area under the overlap-precision curve over `[0, 1]`.
    pub success: f64,
    pub mean_iou: f64,
}

/// Trapezoid area under a curve sampled on a uniform grid, divided by the
/// grid span so a constant curve of 1 scores 1.
pub fn normalized_auc(curve: &[f64]) -> f64 {
    match curve.len() {
        0 => 0.0,
        1 => curve[0],
        n => {
            let inner: f64 = curve[1..n - 1].iter().sum();
            (inner + 0.5 * (curve[0] + curve[n - 1])) / (n - 1) as f64
        }
    }
}

fn fraction(n: usize, total: usize) -> f64 {
    if total == 0 { 0.0 } else { n as f64 / total as f64 }
}

/// Per-threshold curves for one trajectory. Boxes are normalized to a
/// frame of `extent = (width, height)` pixels.
pub fn compute_curves(pred: &[BBox], gt: &[BBox], extent: (f64, f64)) -> Result<Curves> {
    if pred.len() != gt.len() {
        return Err(Error::invalid("compute_metrics", format!("{} predictions for {} ground-truth boxes", pred.len(), gt.len())));
    }
    let (fw, fh) = extent;
    let n = pred.len();
    let mut cle = Vec::with_capacity(n);
    let mut ncle = Vec::with_capacity(n);
    let mut ious = Vec::with_capacity(n);
    for (p, g) in pred.iter().zip(gt) {
        let (dx, dy) = ((p.cx - g.cx) * fw, (p.cy - g.cy) * fh);
        cle.push(dx.hypot(dy));
        let (nx, ny) = ((p.cx - g.cx) / g.w.max(f64::MIN_POSITIVE), (p.cy - g.cy) / g.h.max(f64::MIN_POSITIVE));
        ncle.push(nx.hypot(ny));
        ious.push(p.iou(g));
    }
    let precision = (0..PRECISION_THRESHOLDS).map(|t| fraction(cle.iter().filter(|&&e| e <= t as f64).count(), n)).collect();
    let norm_precision =
        (0..NORM_THRESHOLDS).map(|t| fraction(ncle.iter().filter(|&&e| e <= t as f64 * NORM_STEP).count(), n)).collect();
    let success =
        (0..SUCCESS_THRESHOLDS).map(|t| fraction(ious.iter().filter(|&&o| o >= t as f64 * SUCCESS_STEP).count(), n)).collect();
    Ok(Curves { precision, norm_precision, success })
}

pub fn metrics_from_curves(c: &Curves, mean_iou: f64) -> Metrics {
    Metrics {
        precision: c.precision[PRECISION_AT],
        norm_precision: normalized_auc(&c.norm_precision),
        success: normalized_auc(&c.success),
        mean_iou,
    }
}

pub fn compute_metrics(pred: &[BBox], gt: &[BBox], extent: (f64, f64)) -> Result<Metrics> {
    let curves = compute_curves(pred, gt, extent)?;
    let mean_iou = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).sum::<f64>() / pred.len().max(1) as f64;
    Ok(metrics_from_curves(&curves, mean_iou))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub name: String,
    pub domain: Domain,
    pub frames: usize,
    pub metrics: Metrics,
    pub curves: Curves,
}

impl SequenceResult {
    pub fn new(name: impl Into<String>, domain: Domain, pred: &[BBox], gt: &[BBox], extent: (f64, f64)) -> Result<Self> {
        let curves = compute_curves(pred, gt, extent)?;
        let mean_iou = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).sum::<f64>() / pred.len().max(1) as f64;
        Ok(SequenceResult { name: name.into(), domain, frames: pred.len(), metrics: metrics_from_curves(&curves, mean_iou), curves })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Option<Metrics>,
    pub day: Option<Metrics>,
    pub night: Option<Metrics>,
    pub sequences: Vec<SequenceResult>,
}

/// Sequence-averaged curves; the scalar metrics follow from them.
fn aggregate<'a>(seqs: impl Iterator<Item = &'a SequenceResult>) -> Option<Metrics> {
    let seqs: Vec<&SequenceResult> = seqs.collect();
    let n = seqs.len();
    if n == 0 {
        return None;
    }
    let mean_curve = |f: fn(&Curves) -> &Vec<f64>| {
        let len = f(&seqs[0].curves).len();
        (0..len).map(|i| seqs.iter().map(|s| f(&s.curves)[i]).sum::<f64>() / n as f64).collect::<Vec<f64>>()
    };
    let curves = Curves { precision: mean_curve(|c| &c.precision), norm_precision: mean_curve(|c| &c.norm_precision), success: mean_curve(|c| &c.success) };
    let mean_iou = seqs.iter().map(|s| s.metrics.mean_iou).sum::<f64>() / n as f64;
    Some(metrics_from_curves(&curves, mean_iou))
}

impl EvalReport {
    pub fn from_sequences(sequences: Vec<SequenceResult>) -> Self {
        EvalReport {
            overall: aggregate(sequences.iter()),
            day: aggregate(sequences.iter().filter(|s| s.domain == Domain::Day)),
            night: aggregate(sequences.iter().filter(|s| s.domain == Domain::Night)),
            sequences,
        }
    }

    /// `report.json` (aggregate and per-sequence scalars), `sequences.csv`
    /// and `curves.csv` (one row per sequence, curve and threshold).
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        #[derive(Serialize)]
        struct Summary<'a> {
            overall: Option<Metrics>,
            day: Option<Metrics>,
            night: Option<Metrics>,
            sequences: Vec<(&'a str, Domain, Metrics)>,
        }
        let summary = Summary {
            overall: self.overall,
            day: self.day,
            night: self.night,
            sequences: self.sequences.iter().map(|s| (s.name.as_str(), s.domain, s.metrics)).collect(),
        };
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&json, e))?;
        let mut per_seq = String::from("sequence,domain,frames,precision,norm_precision,success,mean_iou\n");
        let mut curves = String::from("sequence,domain,curve,threshold,value\n");
        for s in &self.sequences {
            let m = s.metrics;
            per_seq.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.name,
                s.domain.as_str(),
                s.frames,
                m.precision,
                m.norm_precision,
                m.success,
                m.mean_iou
            ));
            let series: [(&str, &Vec<f64>, f64); 3] =
                [("precision", &s.curves.precision, 1.0), ("norm_precision", &s.curves.norm_precision, NORM_STEP), ("success", &s.curves.success, SUCCESS_STEP)];
            for (name, values, step) in series {
                for (i, v) in values.iter().enumerate() {
                    curves.push_str(&format!("{},{},{name},{},{v}\n", s.name, s.domain.as_str(), i as f64 * step));
                }
            }
        }
        for (file, text) in [("sequences.csv", per_seq), ("curves.csv", curves)] {
            let path = dir.join(file);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// A trained model ready for inference.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub crop: CropConfig,
}

/// Per-sequence tracking state.
#[derive(Debug, Clone)]
pub struct TrackState {
    template: Frame,
    /// Last estimate, in frame pixels.
    pub current: BBox,
}

impl Tracker {
    pub fn new(model: Model, store: ParamStore<f32>, crop: CropConfig) -> Self {
        Tracker { model, store, crop }
    }

    /// Crops the template around `init` (pixels) from the first frame.
    pub fn start(&self, frame: &Frame, init: BBox) -> Result<TrackState> {
        if !(init.w > 0.0 && init.h > 0.0 && init.cx.is_finite() && init.cy.is_finite()) {
            return Err(Error::invalid("track", format!("initial box {init:?} is degenerate")));
        }
        let side = init.side() * self.crop.template_factor;
        let template = crop_square(frame, init.cx, init.cy, side, self.crop.template_size);
        Ok(TrackState { template, current: init })
    }

    /// Search-region response maps for the next frame, before any penalty.
    pub fn respond(&self, state: &TrackState, frame: &Frame) -> Result<(ResponseMaps, (f64, f64, f64))> {
        let region = (state.current.cx, state.current.cy, state.current.side() * self.crop.search_factor);
        let search = crop_square(frame, region.0, region.1, region.2, self.crop.search_size);
        let p = self.model.cfg.patch.patch;
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let z = tape.constant(patch_batch::<f32>(&[&state.template], p)?);
        let x = tape.constant(patch_batch::<f32>(&[&search], p)?);
        let out = self.model.forward(&mut tape, &vars, z, x, NormMode::Eval)?;
        let s = self.model.cfg.patch.grid();
        let maps = ResponseMaps::from_batch(tape.value(out.cls), tape.value(out.offset), tape.value(out.size), s, 0);
        Ok((maps, region))
    }

    /// Advances one frame: Hanning-penalized argmax, decode, map back.
    pub fn update(&self, state: &mut TrackState, frame: &Frame) -> Result<BBox> {
        let (maps, region) = self.respond(state, frame)?;
        let penalized = hanning_penalty(&maps.cls, maps.s)?;
        let local = decode_at(&maps, argmax_first(&penalized));
        let mut b = from_region(&local, region);
        // keep the estimate usable: centre on the frame, size at least a pixel
        b.cx = b.cx.clamp(0.0, frame.width() as f64);
        b.cy = b.cy.clamp(0.0, frame.height() as f64);
        b.w = b.w.clamp(1.0, frame.width() as f64);
        b.h = b.h.clamp(1.0, frame.height() as f64);
        state.current = b;
        Ok(b)
    }

    /// One-pass evaluation: frame 0 is initialized from `init` and reported
    /// as-is; every later frame is predicted. Boxes are in pixels.
    pub fn track_sequence(&self, frames: &[Frame], init: BBox) -> Result<Vec<BBox>> {
        let first = frames.first().ok_or_else(|| Error::invalid("track_sequence", "no frames"))?;
        let mut state = self.start(first, init)?;
        let mut out = Vec::with_capacity(frames.len());
        out.push(init);
        for f in &frames[1..] {
            out.push(self.update(&mut state, f)?);
        }
        Ok(out)
    }
}

/// Normalizes pixel boxes to a frame of `width × height`.
pub fn normalize_boxes(boxes: &[BBox], width: usize, height: usize) -> Vec<BBox> {
    let (w, h) = (width as f64, height as f64);
    boxes.iter().map(|b| BBox::new(b.cx / w, b.cy / h, b.w / w, b.h / h)).collect()
}

/// One-pass evaluation over every sequence of `datasets`. Sequences are
/// independent, so `threads` only changes wall time.
pub fn evaluate(tracker: &Tracker, datasets: &[DatasetSpec], threads: usize) -> Result<EvalReport> {
    let jobs: Vec<(usize, usize)> =
        datasets.iter().enumerate().flat_map(|(d, spec)| (0..spec.num_sequences()).map(move |q| (d, q))).collect();
    let run = |&(d, q): &(usize, usize)| -> Result<SequenceResult> {
        let spec = &datasets[d];
        let seq = generate_sequence(&spec.sequence_spec(q))?;
        let pred = tracker.track_sequence(&seq.frames, seq.boxes[0])?;
        let (w, h) = (seq.frames[0].width(), seq.frames[0].height());
        let name = format!("{}/{q:04}", spec.name);
        SequenceResult::new(name, spec.domain, &normalize_boxes(&pred, w, h), &normalize_boxes(&seq.boxes, w, h), (w as f64, h as f64))
    };
    let results: Vec<Result<SequenceResult>> = if threads <= 1 || jobs.len() < 2 {
        jobs.iter().map(run).collect()
    } else {
        let chunk = jobs.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs.chunks(chunk).map(|part| s.spawn(|| part.iter().map(&run).collect::<Vec<_>>())).collect();
            handles.into_iter().flat_map(|h| h.join().expect("eval worker panicked")).collect()
        })
    };
    Ok(EvalReport::from_sequences(results.into_iter().collect::<Result<_>>()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let gt: Vec<BBox> = (0..10).map(|i| BBox::new(0.3 + 0.01 * i as f64, 0.5, 0.1, 0.2)).collect();
        let m = compute_metrics(&gt, &gt, (100.0, 100.0)).unwrap();
        assert_eq!((m.precision, m.norm_precision, m.success), (1.0, 1.0, 1.0));
    }

    #[test]
    fn displaced_by_25_pixels() {
        let gt = vec![BBox::new(0.5, 0.5, 0.1, 0.1); 100];
        let pred = vec![BBox::new(0.75, 0.5, 0.1, 0.1); 100];
        let m = compute_metrics(&pred, &gt, (100.0, 100.0)).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(compute_metrics(&pred[..3], &gt, (100.0, 100.0)).is_err());
    }

    #[test]
    fn auc_of_constant() {
        assert_eq!(normalized_auc(&[1.0; 11]), 1.0);
        assert!((normalized_auc(&[1.0, 0.0]) - 0.5).abs() < 1e-15);
    }
}
