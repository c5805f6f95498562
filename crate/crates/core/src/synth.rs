//! Procedural day/night tracking sequences. Everything is a pure function
//! of a seed, so a dataset can be regenerated sample by sample instead of
//! being read back from disk.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::curriculum::{DatasetMeta, Domain};
use crate::error::{Error, Result};
use crate::frame::{to_u8, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NightParams {
    pub gamma: f64,
    pub beta: f64,
    pub sigma: f64,
}

impl Default for NightParams {
    fn default() -> Self {
        NightParams { gamma: 2.2, beta: 0.35, sigma: 0.03 }
    }
}

impl NightParams {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.gamma >= 1.0) {
            return Err(Error::config(format!("{path}.gamma"), format!("must be >= 1, got {}", self.gamma)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config(format!("{path}.beta"), format!("must be in (0, 1], got {}", self.beta)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::config(format!("{path}.sigma"), format!("must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Ellipse,
    Diamond,
}

const SHAPES: [ShapeKind; 3] = [ShapeKind::Rect, ShapeKind::Ellipse, ShapeKind::Diamond];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSpec {
    /// `None` picks a shape per sequence.
    pub shape: Option<ShapeKind>,
    /// Range of `sqrt(w·h)` in pixels.
    pub size_min: f64,
    pub size_max: f64,
    /// Aspect ratio `w/h` is drawn from `[1/aspect_max, aspect_max]`.
    pub aspect_max: f64,
    /// Initial speed in pixels per frame.
    pub speed: f64,
    /// Standard deviation of the per-frame velocity perturbation.
    pub jitter: f64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec { shape: None, size_min: 12.0, size_max: 24.0, aspect_max: 1.6, speed: 1.5, jitter: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub seed: u64,
    pub length: usize,
    pub height: usize,
    pub width: usize,
    pub target: TargetSpec,
    /// Coarse grid resolution of the background texture.
    pub background_cells: usize,
    pub distractors: usize,
    pub domain: Domain,
    pub night: NightParams,
}

impl SequenceSpec {
    pub fn new(seed: u64, domain: Domain) -> Self {
        SequenceSpec {
            seed,
            length: 50,
            height: 128,
            width: 128,
            target: TargetSpec::default(),
            background_cells: 4,
            distractors: 1,
            domain,
            night: NightParams::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        let t = &self.target;
        if self.length == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("generate_sequence", "empty sequence or canvas"));
        }
        if !(t.size_min > 0.0 && t.size_min <= t.size_max && t.aspect_max >= 1.0) {
            return Err(Error::invalid("generate_sequence", format!("bad target size range {}..{}", t.size_min, t.size_max)));
        }
        let largest = t.size_max * t.aspect_max.sqrt();
        if largest >= self.height.min(self.width) as f64 {
            return Err(Error::invalid(
                "generate_sequence",
                format!("target side up to {largest:.1}px does not fit a {}x{} canvas", self.height, self.width),
            ));
        }
        if self.background_cells == 0 {
            return Err(Error::invalid("generate_sequence", "background needs at least one cell"));
        }
        self.night.validate("night")
    }
}

/// Deterministic 64-bit mix of two words (SplitMix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
struct Sprite {
    shape: ShapeKind,
    w: f64,
    h: f64,
    colors: [[f32; 3]; 2],
    /// Stripe period in pixels; stripes run along the longer side.
    stripe: f64,
    path: Vec<(f64, f64)>,
}

impl Sprite {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        let (u, v) = (dx / (self.w / 2.0), dy / (self.h / 2.0));
        match self.shape {
            ShapeKind::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }

    fn color(&self, dx: f64, dy: f64) -> [f32; 3] {
        let along = if self.w >= self.h { dx } else { dy };
        let band = ((along + 64.0 * self.stripe) / self.stripe).floor() as i64;
        self.colors[(band & 1) as usize]
    }

    fn bbox(&self, t: usize) -> BBox {
        let (cx, cy) = self.path[t];
        BBox::new(cx, cy, self.w, self.h)
    }
}

/// Everything needed to render any frame of a sequence.
#[derive(Debug, Clone)]
pub struct Scene {
    spec: SequenceSpec,
    grid: Vec<[f32; 3]>,
    /// Target first, then distractors.
    sprites: Vec<Sprite>,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    // saturated: one channel high, one low, one anywhere
    let mut c = [rng.random_range(0.75..1.0f32), rng.random_range(0.0..0.25f32), rng.random_range(0.0..1.0f32)];
    let k = rng.random_range(0..3);
    c.rotate_left(k);
    if rng.random_bool(0.5) {
        c.swap(0, 1);
    }
    c
}

fn random_walk(spec: &SequenceSpec, w: f64, h: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let (cw, ch) = (spec.width as f64, spec.height as f64);
    let t = &spec.target;
    let mut p = (rng.random_range(w / 2.0..cw - w / 2.0), rng.random_range(h / 2.0..ch - h / 2.0));
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let mut v = (t.speed * heading.cos(), t.speed * heading.sin());
    let noise = Normal::new(0.0, t.jitter.max(0.0)).expect("finite jitter");
    let mut path = Vec::with_capacity(spec.length);
    path.push(p);
    for _ in 1..spec.length {
        v.0 += noise.sample(rng);
        v.1 += noise.sample(rng);
        p.0 += v.0;
        p.1 += v.1;
        reflect(&mut p.0, &mut v.0, w / 2.0, cw - w / 2.0);
        reflect(&mut p.1, &mut v.1, h / 2.0, ch - h / 2.0);
        path.push(p);
    }
    path
}

/// Mirrors `x` back into `[lo, hi]`, flipping the velocity on each bounce.
fn reflect(x: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    if hi <= lo {
        *x = lo;
        *v = 0.0;
        return;
    }
    for _ in 0..8 {
        if *x < lo {
            *x = 2.0 * lo - *x;
            *v = -*v;
        } else if *x > hi {
            *x = 2.0 * hi - *x;
            *v = -*v;
        } else {
            return;
        }
    }
    *x = x.clamp(lo, hi);
}

impl Scene {
    pub fn plan(spec: &SequenceSpec) -> Result<Scene> {
        spec.validate()?;
        let mut rng = rng_for(spec.seed, 0);
        let g = spec.background_cells + 1;
        let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7f32));
        let grid = (0..g * g).map(|_| std::array::from_fn(|c| (base[c] + rng.random_range(-0.18..0.18f32)).clamp(0.0, 1.0))).collect();
        let t = spec.target;
        let mut sprites = Vec::with_capacity(1 + spec.distractors);
        for _ in 0..=spec.distractors {
            let side = rng.random_range(t.size_min..=t.size_max);
            let aspect = rng.random_range(-t.aspect_max.ln()..=t.aspect_max.ln()).exp();
            let (w, h) = (side * aspect.sqrt(), side / aspect.sqrt());
            let shape = t.shape.unwrap_or_else(|| SHAPES[rng.random_range(0..SHAPES.len())]);
            let colors = [random_color(&mut rng), random_color(&mut rng)];
            let stripe = rng.random_range(3.0..6.0);
            let path = random_walk(spec, w, h, &mut rng);
            sprites.push(Sprite { shape, w, h, colors, stripe, path });
        }
        Ok(Scene { spec: spec.clone(), grid, sprites })
    }

    pub fn spec(&self) -> &SequenceSpec {
        &self.spec
    }

    /// Target box in pixels at frame `t`.
    pub fn target_box(&self, t: usize) -> BBox {
        self.sprites[0].bbox(t)
    }

    /// Renders frame `t`, degraded if the sequence is a night one, and
    /// quantized to 8 bits so it matches a PNG round trip.
    pub fn render(&self, t: usize) -> Frame {
        let (h, w) = (self.spec.height, self.spec.width);
        let cells = self.spec.background_cells;
        let g = cells + 1;
        let axis = |i: usize, n: usize| {
            let f = i as f64 / n as f64 * cells as f64;
            let k = (f.floor() as usize).min(cells - 1);
            (k, (f - k as f64) as f32)
        };
        let cols: Vec<(usize, f32)> = (0..w).map(|x| axis(x, w)).collect();
        let mut frame = Frame::filled(h, w, [0.0; 3]);
        let data = frame.data_mut();
        let mut band = vec![0.0f32; g];
        for y in 0..h {
            let (iy, ty) = axis(y, h);
            for c in 0..3 {
                for (k, b) in band.iter_mut().enumerate() {
                    *b = self.grid[iy * g + k][c] * (1.0 - ty) + self.grid[(iy + 1) * g + k][c] * ty;
                }
                let row = &mut data[(c * h + y) * w..][..w];
                for (px, &(ix, tx)) in row.iter_mut().zip(&cols) {
                    *px = band[ix] * (1.0 - tx) + band[ix + 1] * tx;
                }
            }
        }
        // distractors first so the target is always on top
        for s in self.sprites.iter().rev() {
            let (cx, cy) = s.path[t];
            let y0 = (cy - s.h / 2.0 - 1.0).floor().max(0.0) as usize;
            let y1 = ((cy + s.h / 2.0 + 1.0).ceil().max(0.0) as usize).min(h);
            let x0 = (cx - s.w / 2.0 - 1.0).floor().max(0.0) as usize;
            let x1 = ((cx + s.w / 2.0 + 1.0).ceil().max(0.0) as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if s.contains(dx, dy) {
                        for (c, v) in s.color(dx, dy).into_iter().enumerate() {
                            data[(c * h + y) * w + x] = v;
                        }
                    }
                }
            }
        }
        frame.quantize();
        if self.spec.domain == Domain::Night {
            let p = self.spec.night;
            frame = night_degrade(&frame, p.gamma, p.beta, p.sigma, mix_seed(self.spec.seed, 1 + t as u64));
            frame.quantize();
        }
        frame
    }
}

/// A fully materialized sequence; boxes are in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub boxes: Vec<BBox>,
}

pub fn generate_sequence(spec: &SequenceSpec) -> Result<Sequence> {
    let scene = Scene::plan(spec)?;
    let frames = (0..spec.length).map(|t| scene.render(t)).collect();
    let boxes = (0..spec.length).map(|t| scene.target_box(t)).collect();
    Ok(Sequence { frames, boxes })
}

/// `clamp(β · x^γ + N(0, σ), 0, 1)` per value.
pub fn night_degrade(frame: &Frame, gamma: f64, beta: f64, sigma: f64, seed: u64) -> Frame {
    let mut out = frame.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let curve = |v: f32| beta * (v as f64).powf(gamma);
    // 8-bit inputs are the common case; their curve values are tabulated
    let table: Vec<f64> = (0..=255u8).map(|i| curve(i as f32 / 255.0)).collect();
    for v in out.data_mut() {
        let level = to_u8(*v);
        let dark = if level as f32 / 255.0 == *v { table[level as usize] } else { curve(*v) };
        let n = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        *v = (dark + n).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Peak signal-to-noise ratio in dB for values in `[0, 1]`.
pub fn psnr(a: &Frame, b: &Frame) -> f64 {
    let mse: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.data().len().max(1) as f64;
    if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub template_size: usize,
    pub search_size: usize,
    pub template_factor: f64,
    pub search_factor: f64,
    /// Max search-center shift per axis, as a fraction of the box side.
    pub center_jitter: f64,
    /// Search crop side is scaled by a factor in `[1 - s, 1 + s]`.
    pub scale_jitter: f64,
    /// Largest frame gap between template and search.
    pub max_gap: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            template_size: 32,
            search_size: 64,
            template_factor: 2.0,
            search_factor: 4.0,
            center_jitter: 0.5,
            scale_jitter: 0.15,
            max_gap: 10,
        }
    }
}

impl CropConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.template_size == 0 || self.search_size == 0 {
            return Err(Error::config(format!("{path}.template_size"), "crop sizes must be positive"));
        }
        if !(self.template_factor > 0.0 && self.search_factor > 0.0) {
            return Err(Error::config(format!("{path}.search_factor"), "crop factors must be positive"));
        }
        if !(0.0..=0.75).contains(&self.center_jitter) {
            return Err(Error::config(format!("{path}.center_jitter"), format!("must be in [0, 0.75], got {}", self.center_jitter)));
        }
        if !(0.0..0.5).contains(&self.scale_jitter) {
            return Err(Error::config(format!("{path}.scale_jitter"), format!("must be in [0, 0.5), got {}", self.scale_jitter)));
        }
        Ok(())
    }
}

/// Template/search pair with the ground truth normalized to the search crop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSample {
    pub template: Frame,
    pub search: Frame,
    pub gt: BBox,
    pub domain: Domain,
    pub dataset: usize,
}

/// Square region of `frame` with side `side` centred at `(cx, cy)`,
/// bilinearly resampled to `out × out`. Outside the frame the per-channel
/// frame mean is used.
pub fn crop_square(frame: &Frame, cx: f64, cy: f64, side: f64, out: usize) -> Frame {
    let mean = frame.channel_means();
    let (h, w) = (frame.height() as isize, frame.width() as isize);
    let scale = side / out as f64;
    let (x0, y0) = (cx - side / 2.0, cy - side / 2.0);
    let mut res = Frame::filled(out, out, mean);
    let fetch = |c: usize, y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h || x >= w { mean[c] } else { frame.get(c, y as usize, x as usize) }
    };
    for oy in 0..out {
        let sy = y0 + (oy as f64 + 0.5) * scale - 0.5;
        let (iy, fy) = (sy.floor() as isize, (sy - sy.floor()) as f32);
        for ox in 0..out {
            let sx = x0 + (ox as f64 + 0.5) * scale - 0.5;
            let (ix, fx) = (sx.floor() as isize, (sx - sx.floor()) as f32);
            for c in 0..3 {
                let top = fetch(c, iy, ix) * (1.0 - fx) + fetch(c, iy, ix + 1) * fx;
                let bottom = fetch(c, iy + 1, ix) * (1.0 - fx) + fetch(c, iy + 1, ix + 1) * fx;
                res.set(c, oy, ox, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    res
}

/// Search region geometry: `(cx, cy, side)` in frame pixels.
pub fn search_region(center: (f64, f64), b: &BBox, factor: f64) -> (f64, f64, f64) {
    (center.0, center.1, b.side() * factor)
}

/// Re-expresses a pixel box in the coordinates of a square region.
pub fn to_region(b: &BBox, region: (f64, f64, f64)) -> BBox {
    let (cx, cy, side) = region;
    BBox::new((b.cx - (cx - side / 2.0)) / side, (b.cy - (cy - side / 2.0)) / side, b.w / side, b.h / side)
}

/// Inverse of [`to_region`].
pub fn from_region(b: &BBox, region: (f64, f64, f64)) -> BBox {
    let (cx, cy, side) = region;
    BBox::new(cx - side / 2.0 + b.cx * side, cy - side / 2.0 + b.cy * side, b.w * side, b.h * side)
}

/// Crops a training pair. Jitter is drawn from `rng`; pass a zero-jitter
/// config for a centred search region.
pub fn crop_resize_pair(
    template_frame: &Frame,
    template_box: &BBox,
    search_frame: &Frame,
    search_box: &BBox,
    cfg: &CropConfig,
    rng: &mut impl Rng,
) -> Result<(Frame, Frame, BBox)> {
    for b in [template_box, search_box] {
        if !(b.w > 0.0 && b.h > 0.0 && b.cx.is_finite() && b.cy.is_finite()) {
            return Err(Error::invalid("crop_resize_pair", format!("degenerate box {b:?}")));
        }
    }
    let tside = template_box.side() * cfg.template_factor;
    let template = crop_square(template_frame, template_box.cx, template_box.cy, tside, cfg.template_size);
    let side = search_box.side();
    let mut jitter = |range: f64| if range > 0.0 { rng.random_range(-range..=range) } else { 0.0 };
    let (jx, jy) = (jitter(cfg.center_jitter * side), jitter(cfg.center_jitter * side));
    let scale = 1.0 + jitter(cfg.scale_jitter);
    let region = (search_box.cx + jx, search_box.cy + jy, side * cfg.search_factor * scale);
    let search = crop_square(search_frame, region.0, region.1, region.2, cfg.search_size);
    Ok((template, search, to_region(search_box, region)))
}

/// One synthetic dataset: `n` frames split into sequences of `seq_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub domain: Domain,
    /// Sample count `N_j` (frames).
    pub n: usize,
    pub id: usize,
    pub seed: u64,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_canvas")]
    pub canvas: usize,
    #[serde(default)]
    pub target: TargetSpec,
    #[serde(default = "default_distractors")]
    pub distractors: usize,
    #[serde(default)]
    pub night: NightParams,
}

fn default_seq_len() -> usize {
    50
}

fn default_canvas() -> usize {
    128
}

fn default_distractors() -> usize {
    1
}

impl DatasetSpec {
    pub fn new(name: impl Into<String>, domain: Domain, n: usize, id: usize, seed: u64) -> Self {
        DatasetSpec {
            name: name.into(),
            domain,
            n,
            id,
            seed,
            seq_len: default_seq_len(),
            canvas: default_canvas(),
            target: TargetSpec::default(),
            distractors: default_distractors(),
            night: NightParams::default(),
        }
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta::new(self.name.clone(), self.domain, self.n, self.id)
    }

    pub fn num_sequences(&self) -> usize {
        self.n.div_ceil(self.seq_len.max(1))
    }

    /// Frames in sequence `seq` (the last one may be short).
    pub fn sequence_len(&self, seq: usize) -> usize {
        (self.n - seq * self.seq_len).min(self.seq_len)
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config(format!("{path}.n"), "dataset needs at least one sample"));
        }
        if self.seq_len < 2 {
            return Err(Error::config(format!("{path}.seq_len"), "sequences need at least two frames"));
        }
        self.night.validate(&format!("{path}.night"))?;
        self.sequence_spec(0).validate().map_err(|e| Error::config(path.to_string(), e.to_string()))
    }

    pub fn sequence_spec(&self, seq: usize) -> SequenceSpec {
        SequenceSpec {
            seed: mix_seed(self.seed, seq as u64),
            length: self.sequence_len(seq).max(1),
            height: self.canvas,
            width: self.canvas,
            target: self.target,
            background_cells: 4,
            distractors: self.distractors,
            domain: self.domain,
            night: self.night,
        }
    }

    /// Training pair for sample `index`: its frame is the search frame and
    /// the template comes from a nearby frame of the same sequence.
    /// `aug_seed` drives frame pairing and crop jitter.
    pub fn sample(&self, index: usize, aug_seed: u64, crop: &CropConfig) -> Result<TrackSample> {
        if index >= self.n {
            return Err(Error::invalid("sample", format!("index {index} out of range for '{}' (N = {})", self.name, self.n)));
        }
        let (seq, s) = (index / self.seq_len, index % self.seq_len);
        let scene = Scene::plan(&self.sequence_spec(seq))?;
        let len = scene.spec().length;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(aug_seed, index as u64));
        let lo = s.saturating_sub(crop.max_gap);
        let hi = (s + crop.max_gap).min(len - 1);
        let t = rng.random_range(lo..=hi);
        let (tf, sf) = (scene.render(t), scene.render(s));
        let (template, search, gt) = crop_resize_pair(&tf, &scene.target_box(t), &sf, &scene.target_box(s), crop, &mut rng)?;
        Ok(TrackSample { template, search, gt, domain: self.domain, dataset: self.id })
    }
}

/// Four day and three night datasets with a sharp size imbalance.
pub fn default_registry(seed: u64) -> Vec<DatasetSpec> {
    let day = [("day-a", 20_000), ("day-b", 15_000), ("day-c", 10_000), ("day-d", 8_000)];
    let night = [("night-a", 2_000), ("night-b", 1_500), ("night-c", 1_000)];
    let mut specs: Vec<DatasetSpec> = day
        .iter()
        .map(|&(n, c)| (n, Domain::Day, c))
        .chain(night.iter().map(|&(n, c)| (n, Domain::Night, c)))
        .enumerate()
        .map(|(id, (name, domain, n))| DatasetSpec::new(name, domain, n, id, mix_seed(seed, id as u64)))
        .collect();
    // a little variety between the sources
    for (i, s) in specs.iter_mut().enumerate() {
        s.target.size_min += (i % 3) as f64 * 2.0;
        s.target.speed += (i % 2) as f64 * 0.5;
    }
    specs
}

/// Held-out sequences for tracking evaluation, disjoint seeds from training.
pub fn eval_registry(seed: u64, sequences: usize, length: usize) -> Vec<DatasetSpec> {
    [("eval-day", Domain::Day), ("eval-night", Domain::Night)]
        .iter()
        .enumerate()
        .map(|(id, &(name, domain))| {
            let mut s = DatasetSpec::new(name, domain, sequences * length, 100 + id, mix_seed(seed ^ 0xE7A1, id as u64));
            s.seq_len = length;
            s
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub domain: Domain,
    #[serde(rename = "N_j")]
    pub n_j: usize,
    pub spec: DatasetSpec,
    pub sequences_written: usize,
}

/// Writes `<root>/<name>/<seq>/frame_%05d.png`, `gt.csv`, and
/// `<root>/<name>/dataset.json`. At most `max_sequences` are rendered to
/// disk; the manifest keeps the full `N_j`.
pub fn export_dataset(spec: &DatasetSpec, root: &Path, max_sequences: Option<usize>) -> Result<usize> {
    let dir = root.join(&spec.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let count = max_sequences.map_or(spec.num_sequences(), |m| m.min(spec.num_sequences()));
    for seq in 0..count {
        let sdir = dir.join(format!("{seq:04}"));
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let sequence = generate_sequence(&spec.sequence_spec(seq))?;
        write_sequence(&sequence, &sdir)?;
    }
    let manifest = DatasetManifest { name: spec.name.clone(), domain: spec.domain, n_j: spec.n, spec: spec.clone(), sequences_written: count };
    let path = dir.join("dataset.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(count)
}

pub fn write_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    let mut csv = String::from("frame,cx,cy,w,h\n");
    for (i, (f, b)) in seq.frames.iter().zip(&seq.boxes).enumerate() {
        f.save_png(&dir.join(format!("frame_{i:05}.png")))?;
        let (fw, fh) = (f.width() as f64, f.height() as f64);
        csv.push_str(&format!("{i},{},{},{},{}\n", b.cx / fw, b.cy / fh, b.w / fw, b.h / fh));
    }
    let path = dir.join("gt.csv");
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(csv.as_bytes()).map_err(|e| Error::io(&path, e))
}

/// Reads a sequence directory written by [`write_sequence`]; boxes come
/// back in pixels.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let path = dir.join("gt.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut frames = Vec::new();
    let mut boxes = Vec::new();
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parsed: Vec<f64> = fields.iter().map(|f| f.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), line_no + 1))
        })?;
        if parsed.len() != 5 {
            return Err(Error::Data(format!("{}:{}: expected 5 columns", path.display(), line_no + 1)));
        }
        let frame = Frame::load_png(&dir.join(format!("frame_{:05}.png", parsed[0] as usize)))?;
        let (fw, fh) = (frame.width() as f64, frame.height() as f64);
        boxes.push(BBox::new(parsed[1] * fw, parsed[2] * fh, parsed[3] * fw, parsed[4] * fh));
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(Error::Data(format!("{} lists no frames", path.display())));
    }
    Ok(Sequence { frames, boxes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_velocity_keeps_box() {
        let mut spec = SequenceSpec::new(3, Domain::Day);
        spec.target.speed = 0.0;
        spec.target.jitter = 0.0;
        spec.length = 10;
        let seq = generate_sequence(&spec).unwrap();
        assert!(seq.boxes.iter().all(|b| *b == seq.boxes[0]));
    }

    #[test]
    fn oversized_target_is_rejected() {
        let mut spec = SequenceSpec::new(3, Domain::Day);
        spec.target.size_min = 200.0;
        spec.target.size_max = 200.0;
        assert!(generate_sequence(&spec).is_err());
    }

    #[test]
    fn degrade_identity() {
        let spec = SequenceSpec { length: 1, ..SequenceSpec::new(4, Domain::Day) };
        let f = generate_sequence(&spec).unwrap().frames.remove(0);
        assert_eq!(night_degrade(&f, 1.0, 1.0, 0.0, 1), f);
    }

    #[test]
    fn centred_pair_geometry() {
        let spec = SequenceSpec { length: 1, ..SequenceSpec::new(5, Domain::Day) };
        let scene = Scene::plan(&spec).unwrap();
        let f = scene.render(0);
        let b = scene.target_box(0);
        let cfg = CropConfig { center_jitter: 0.0, scale_jitter: 0.0, ..CropConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, _, gt) = crop_resize_pair(&f, &b, &f, &b, &cfg, &mut rng).unwrap();
        assert!((gt.cx - 0.5).abs() < 1e-12 && (gt.cy - 0.5).abs() < 1e-12);
        assert!((gt.side() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn region_roundtrip() {
        let b = BBox::new(40.0, 52.0, 10.0, 14.0);
        let r = (45.0, 50.0, 48.0);
        let back = from_region(&to_region(&b, r), r);
        assert!((back.cx - b.cx).abs() < 1e-12 && (back.h - b.h).abs() < 1e-12);
    }
}
