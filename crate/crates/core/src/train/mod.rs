//! The training loop: curriculum-scheduled batches, the weighted total
//! loss, AdamW, and the files a run leaves behind.

pub mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::curriculum::{draw_epoch_schedule, Draw, SamplerState};
use crate::encoder::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::Tracker;
use crate::frame::patch_batch;
use crate::head::{argmax_first, update_running_stats, NormMode};
use crate::losses::{gaussian_target, omega_weight, total_loss_on_tape, LossWeights};
use crate::synth::{mix_seed, CropConfig, DatasetSpec, TrackSample};
use crate::tensor::{Checkpoint, ParamStore, Tape};

use optim::{lr_at_epoch, AdamW};

/// Per-step loss record, one CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub adb: f64,
    pub total: f64,
}

/// Architecture and crop geometry stored beside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub model: ModelConfig,
    pub crop: CropConfig,
}

pub const MODEL_CARD: &str = "model.json";

pub fn save_model(dir: &Path, model: &Model, store: &ParamStore<f32>, crop: &CropConfig) -> Result<()> {
    Checkpoint::save(store, dir)?;
    let card = ModelCard { model: model.cfg, crop: *crop };
    let path = dir.join(MODEL_CARD);
    fs::write(&path, serde_json::to_string_pretty(&card)?).map_err(|e| Error::io(&path, e))
}

/// Rebuilds a tracker from a directory written by [`save_model`].
pub fn load_tracker(dir: &Path) -> Result<Tracker> {
    let path = dir.join(MODEL_CARD);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let card: ModelCard = serde_json::from_str(&text)?;
    let (model, mut store) = Model::init::<f32>(&card.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    store.load_values(&Checkpoint::load::<f32>(dir)?)?;
    Ok(Tracker::new(model, store, card.crop))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub tracker: Tracker,
    pub losses: Vec<StepLoss>,
    pub checkpoint: PathBuf,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    version: &'static str,
    config_hash: String,
    config: &'a RunConfig,
    seeds: Seeds,
    threads: usize,
    architecture: Architecture,
    datasets: Vec<(String, usize, f64)>,
    steps: usize,
    final_loss: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Seeds {
    run: u64,
    data: u64,
    init: u64,
    sampler: u64,
    augment: u64,
}

#[derive(Debug, Serialize)]
struct Architecture {
    layers: usize,
    embed: usize,
    d_state: usize,
    patch: usize,
    template: (usize, usize),
    search: (usize, usize),
    gate_source: crate::encoder::GateSource,
    use_ss: bool,
    use_ls: bool,
}

fn derived_seeds(seed: u64, data: u64) -> Seeds {
    Seeds { run: seed, data, init: mix_seed(seed, 0x11), sampler: mix_seed(seed, 0x22), augment: mix_seed(seed, 0x33) }
}

/// Renders every pair of a batch; samples are independent, so splitting
/// the work over threads does not change the result.
fn render_batch(datasets: &[DatasetSpec], draws: &[Draw], aug_seeds: &[u64], crop: &CropConfig, threads: usize) -> Result<Vec<TrackSample>> {
    let one = |k: usize| datasets[draws[k].dataset].sample(draws[k].index, aug_seeds[k], crop);
    if threads <= 1 || draws.len() < 2 {
        return (0..draws.len()).map(one).collect();
    }
    let chunk = draws.len().div_ceil(threads);
    let parts: Vec<Result<Vec<TrackSample>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..draws.len())
            .step_by(chunk)
            .map(|start| {
                let one = &one;
                s.spawn(move || (start..(start + chunk).min(draws.len())).map(one).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sample worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(draws.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// One optimization step on a rendered batch; returns the loss terms.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &Model,
    store: &mut ParamStore<f32>,
    opt: &mut AdamW<f32>,
    samples: &[TrackSample],
    omega: &[f32],
    weights: &LossWeights,
    kind: crate::losses::RegressionKind,
    lr: f64,
    step: usize,
) -> Result<StepLoss> {
    let p = model.cfg.patch.patch;
    let s = model.cfg.patch.grid();
    let templates: Vec<_> = samples.iter().map(|x| &x.template).collect();
    let searches: Vec<_> = samples.iter().map(|x| &x.search).collect();
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let z = tape.constant(patch_batch::<f32>(&templates, p)?);
    let x = tape.constant(patch_batch::<f32>(&searches, p)?);
    let out = model.forward(&mut tape, &vars, z, x, NormMode::Train)?;

    let heat: Vec<f32> = samples.iter().flat_map(|x| gaussian_target(&x.gt, s)).map(|v| v as f32).collect();
    let cls = tape.focal_loss(out.cls, &heat)?;
    let n = s * s;
    let cells: Vec<usize> = tape.value(out.cls).chunks_exact(n).map(argmax_first).collect();
    let boxes = tape.decode_boxes(out.offset, out.size, &cells)?;
    let gt: Vec<f32> = samples.iter().flat_map(|x| x.gt.to_array()).map(|v| v as f32).collect();
    let giou = tape.giou_loss(boxes, &gt)?;
    let l1 = tape.l1_loss(boxes, &gt)?;
    let u = tape.iou(boxes, &gt)?;
    let adb = tape.regression_balance(u, omega, kind)?;
    let lv = total_loss_on_tape(&mut tape, cls, giou, l1, adb, weights)?;

    let value = |v| tape.scalar(v) as f64;
    let rec = StepLoss { step, cls: value(lv.cls), iou: value(lv.iou), l1: value(lv.l1), adb: value(lv.adb), total: value(lv.total) };
    if !rec.total.is_finite() {
        return Err(Error::NonFinite { what: "loss", name: format!("step {step}") });
    }
    tape.backward(lv.total)?;
    let grads: Vec<Option<&[f32]>> = vars.iter().map(|&v| tape.grad_slice(v)).collect();
    opt.step(store, &grads, lr).map_err(|e| match e {
        Error::NonFinite { what, name } => Error::NonFinite { what, name: format!("{name} at step {step}") },
        other => other,
    })?;
    update_running_stats(store, &tape, &out.bn);
    Ok(rec)
}

/// Trains from scratch and writes `loss.csv`, `manifest.json` and
/// `checkpoint/` under `out`.
pub fn train_run(cfg: &RunConfig, datasets: &[DatasetSpec], out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::invalid("train_run", "no training datasets"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let seeds = derived_seeds(cfg.seed, cfg.data.seed);
    let metas: Vec<_> = datasets.iter().map(DatasetSpec::meta).collect();
    let n_max = metas.iter().map(|m| m.n).max().unwrap_or(1) as u64;
    let omegas: Vec<f64> =
        metas.iter().map(|m| omega_weight(n_max, m.n as u64, cfg.loss.log_base)).collect::<Result<_>>()?;
    let mut weights = cfg.loss.weights;
    if !cfg.ablation.use_ls {
        weights.gamma = 0.0;
    }

    let (model, mut store) = Model::init::<f32>(&cfg.model, &mut ChaCha8Rng::seed_from_u64(seeds.init))?;
    let mut opt = AdamW::new(&store, cfg.train.adamw);
    let mut sampler = SamplerState::new(metas, cfg.sampler.theta, seeds.sampler);
    sampler.cap_at_one = cfg.sampler.cap_at_one;
    sampler.mode = cfg.sampler.mode;
    sampler.scheduled = cfg.ablation.use_ss;
    sampler.unscheduled = cfg.sampler.unscheduled;

    let ckpt = out.join("checkpoint");
    let mut losses = Vec::new();
    let mut csv = String::from("step,L_cls,L_iou,L_L1,L_ADB,L_total\n");
    let mut step = 0;
    for epoch in 1..=cfg.train.epochs {
        sampler.epoch = epoch;
        let draws = draw_epoch_schedule(&sampler, cfg.train.pairs_per_epoch)?;
        let epoch_seed = mix_seed(seeds.augment, epoch as u64);
        let lr = lr_at_epoch(epoch, cfg.train.lr, cfg.train.epochs);
        for (b, batch) in draws.chunks(cfg.train.batch).enumerate() {
            let aug: Vec<u64> = (0..batch.len()).map(|k| mix_seed(epoch_seed, (b * cfg.train.batch + k) as u64)).collect();
            let samples = render_batch(datasets, batch, &aug, &cfg.crop, cfg.threads)?;
            let omega: Vec<f32> = batch.iter().map(|d| omegas[d.dataset] as f32).collect();
            let rec = train_step(&model, &mut store, &mut opt, &samples, &omega, &weights, cfg.loss.kind, lr, step)?;
            let _ = writeln!(csv, "{},{},{},{},{},{}", rec.step, rec.cls, rec.iou, rec.l1, rec.adb, rec.total);
            losses.push(rec);
            step += 1;
        }
        if cfg.train.checkpoint_every > 0 && epoch % cfg.train.checkpoint_every == 0 && epoch < cfg.train.epochs {
            save_model(&out.join(format!("checkpoint-epoch{epoch:04}")), &model, &store, &cfg.crop)?;
        }
    }
    save_model(&ckpt, &model, &store, &cfg.crop)?;
    let loss_path = out.join("loss.csv");
    fs::write(&loss_path, csv).map_err(|e| Error::io(&loss_path, e))?;

    let pc = cfg.model.patch;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.content_hash(),
        config: cfg,
        seeds,
        threads: cfg.threads,
        architecture: Architecture {
            layers: cfg.model.layers,
            embed: pc.embed,
            d_state: cfg.model.ssm.d_state,
            patch: pc.patch,
            template: (pc.template_h, pc.template_w),
            search: (pc.search_h, pc.search_w),
            gate_source: cfg.model.gate_source,
            use_ss: cfg.ablation.use_ss,
            use_ls: cfg.ablation.use_ls,
        },
        datasets: datasets.iter().zip(&omegas).map(|(d, &w)| (d.name.clone(), d.n, w)).collect(),
        steps: step,
        final_loss: losses.last().map(|l| l.total),
    };
    let man_path = out.join("manifest.json");
    fs::write(&man_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&man_path, e))?;
    Ok(TrainOutcome { tracker: Tracker::new(model, store, cfg.crop), losses, checkpoint: ckpt })
}
