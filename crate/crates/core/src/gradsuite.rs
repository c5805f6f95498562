//! The registered finite-difference gradient checks, shared by the
//! `gradcheck` subcommand and the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::BBox;
use crate::encoder::{vim_block, GateSource, Model, ModelConfig, PatchConfig, VimLayer};
use crate::error::Result;
use crate::head::{head_forward, HeadParams, NormMode};
use crate::losses::{gaussian_target, total_loss_on_tape, LossWeights, RegressionKind};
use crate::ssm::{Discretization, SsmConfig};
use crate::tensor::{gradcheck, BatchNormMode, GradcheckReport, ParamStore, ScanOptions, Tape, Tensor, Var, DEFAULT_STEP};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

type Objective = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// A gradient check instance: inputs plus the scalar function of them.
pub struct Problem {
    pub inputs: Vec<Tensor<f64>>,
    pub objective: Objective,
}

pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub build: fn(u64) -> Problem,
}

#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub seed: u64,
    pub tolerance: f64,
    pub report: std::result::Result<GradcheckReport, String>,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        matches!(&self.report, Ok(r) if r.max_rel_err < self.tolerance)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x6AD5)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

/// Away from zero on both sides, for ops with a kink there.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.random_range(0.1..1.0);
        if r.random_bool(0.5) { m } else { -m }
    })
}

/// `Σ w ⊙ y` with fixed random `w`, so every output coordinate matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37);
    let w = tape.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn unary(seed: u64, f: fn(&mut Tape<f64>, Var) -> Var, positive: bool) -> Problem {
    let mut r = rng(seed);
    let x = if positive { uniform(&mut r, &[3, 5], 0.2, 2.0) } else { off_zero(&mut r, &[3, 5]) };
    Problem { inputs: vec![x], objective: Box::new(move |t, v| { let y = f(t, v[0]); project(t, y, seed) }) }
}

fn random_box(r: &mut ChaCha8Rng) -> [f64; 4] {
    [r.random_range(0.3..0.7), r.random_range(0.3..0.7), r.random_range(0.15..0.4), r.random_range(0.15..0.4)]
}

/// Predicted boxes near their targets so IoU stays well inside (0, 1).
fn box_pairs(seed: u64, n: usize) -> (Tensor<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for _ in 0..n {
        let g = random_box(&mut r);
        let p = [g[0] + r.random_range(-0.05..0.05), g[1] + r.random_range(-0.05..0.05), g[2] * r.random_range(0.8..1.25), g[3] * r.random_range(0.8..1.25)];
        gt.extend(g);
        pred.extend(p);
    }
    (Tensor::new(vec![n, 4], pred).expect("shape"), gt)
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        patch: PatchConfig { template_h: 8, template_w: 8, search_h: 16, search_w: 16, patch: 4, embed: 8 },
        layers: 1,
        expand: 2,
        ssm: SsmConfig { d_state: 3, conv_kernel: 3, ..SsmConfig::default() },
        ..ModelConfig::default()
    }
}

fn store_inputs(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.ids().map(|id| store.get(id).clone()).collect()
}

fn scan_case(seed: u64, disc: Discretization, reverse: bool) -> Problem {
    let mut r = rng(seed);
    let (b, l, d, n) = (2, 5, 3, 2);
    let inputs = vec![
        uniform(&mut r, &[b, l, d], -1.0, 1.0),
        uniform(&mut r, &[b, l, d], 0.05, 0.5),
        uniform(&mut r, &[b, l, n], -1.0, 1.0),
        uniform(&mut r, &[b, l, n], -1.0, 1.0),
        uniform(&mut r, &[d, n], -0.5, 1.0),
    ];
    Problem {
        inputs,
        objective: Box::new(move |t, v| {
            let y = t.selective_scan(v[0], v[1], v[2], v[3], v[4], ScanOptions { reverse, discretization: disc })?;
            project(t, y, seed)
        }),
    }
}

fn regression_case(seed: u64, kind: RegressionKind) -> Problem {
    let mut r = rng(seed);
    let n = 6;
    let u = uniform(&mut r, &[n], 0.05, 0.95);
    let omega: Vec<f64> = (0..n).map(|i| [0.5, 1.0, 2.0, 4.0][i % 4]).collect();
    Problem { inputs: vec![u], objective: Box::new(move |t, v| t.regression_balance(v[0], &omega, kind)) }
}

/// Every registered check.
pub fn registry() -> Vec<GradCase> {
    let op = OP_TOLERANCE;
    vec![
        GradCase { name: "matmul", tolerance: op, build: |s| {
            let mut r = rng(s);
            Problem {
                inputs: vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0), uniform(&mut r, &[4, 5], -1.0, 1.0)],
                objective: Box::new(move |t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, s) }),
            }
        }},
        GradCase { name: "elementwise", tolerance: op, build: |s| {
            let mut r = rng(s);
            Problem {
                inputs: vec![uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[4], -1.0, 1.0)],
                objective: Box::new(move |t, v| {
                    let a = t.mul(v[0], v[1])?;
                    let b = t.sub(a, v[1])?;
                    let c = t.add_bias(b, v[2])?;
                    let d = t.mul_bias(c, v[2])?;
                    let e = t.scale(d, 0.7);
                    let f = t.add(e, v[0])?;
                    let g = t.square(f);
                    let m = t.mean(g);
                    let y = project(t, f, s)?;
                    t.add(y, m)
                }),
            }
        }},
        GradCase { name: "conv1d", tolerance: op, build: |s| {
            let mut r = rng(s);
            let reverse = s % 2 == 1;
            Problem {
                inputs: vec![uniform(&mut r, &[2, 6, 3], -1.0, 1.0), uniform(&mut r, &[3, 3], -1.0, 1.0)],
                objective: Box::new(move |t, v| { let y = t.conv1d_depthwise(v[0], v[1], reverse)?; project(t, y, s) }),
            }
        }},
        GradCase { name: "conv2d", tolerance: op, build: |s| {
            let mut r = rng(s);
            Problem {
                inputs: vec![uniform(&mut r, &[2, 4, 4, 2], -1.0, 1.0), uniform(&mut r, &[18, 3], -1.0, 1.0)],
                objective: Box::new(move |t, v| { let y = t.conv2d(v[0], v[1], 3)?; project(t, y, s) }),
            }
        }},
        GradCase { name: "layer_norm", tolerance: op, build: |s| {
            let mut r = rng(s);
            Problem {
                inputs: vec![uniform(&mut r, &[3, 5], -2.0, 2.0), uniform(&mut r, &[5], 0.5, 1.5), uniform(&mut r, &[5], -0.5, 0.5)],
                objective: Box::new(move |t, v| { let y = t.layer_norm(v[0], v[1], v[2])?; project(t, y, s) }),
            }
        }},
        GradCase { name: "batch_norm", tolerance: op, build: |s| {
            let mut r = rng(s);
            Problem {
                inputs: vec![uniform(&mut r, &[2, 3, 3, 2], -2.0, 2.0), uniform(&mut r, &[2], 0.5, 1.5), uniform(&mut r, &[2], -0.5, 0.5)],
                objective: Box::new(move |t, v| { let y = t.batch_norm(v[0], v[1], v[2], BatchNormMode::Batch)?; project(t, y, s) }),
            }
        }},
        GradCase { name: "silu", tolerance: op, build: |s| unary(s, |t, x| t.silu(x), false) },
        GradCase { name: "softplus", tolerance: op, build: |s| unary(s, |t, x| t.softplus(x), false) },
        GradCase { name: "sigmoid", tolerance: op, build: |s| unary(s, |t, x| t.sigmoid(x), false) },
        GradCase { name: "relu", tolerance: op, build: |s| unary(s, |t, x| t.relu(x), false) },
        GradCase { name: "exp", tolerance: op, build: |s| unary(s, |t, x| t.exp(x), false) },
        GradCase { name: "ln", tolerance: op, build: |s| unary(s, |t, x| t.ln(x), true) },
        GradCase { name: "neg", tolerance: op, build: |s| unary(s, |t, x| t.neg(x), false) },
        GradCase { name: "reshape_slice_concat_reverse", tolerance: op, build: |s| {
            let mut r = rng(s);
            Problem {
                inputs: vec![uniform(&mut r, &[2, 4, 3], -1.0, 1.0), uniform(&mut r, &[2, 2, 3], -1.0, 1.0)],
                objective: Box::new(move |t, v| {
                    let c = t.concat(v[0], v[1], 1)?;
                    let rv = t.reverse(c, 1)?;
                    let sl = t.slice(rv, 1, 1, 4)?;
                    let y = t.reshape(sl, vec![2, 12])?;
                    project(t, y, s)
                }),
            }
        }},
        GradCase { name: "selective_scan_zoh", tolerance: op, build: |s| scan_case(s, Discretization::Zoh, false) },
        GradCase { name: "selective_scan_zoh_reverse", tolerance: op, build: |s| scan_case(s, Discretization::Zoh, true) },
        GradCase { name: "selective_scan_euler", tolerance: op, build: |s| scan_case(s, Discretization::Euler, false) },
        GradCase { name: "vim_block", tolerance: op, build: |s| {
            let mut r = rng(s);
            let cfg = tiny_model_config();
            let mut store = ParamStore::<f64>::new();
            let layer = VimLayer::init(&mut store, "layer", &cfg, &mut r);
            let gate = if s % 2 == 0 { GateSource::Q } else { GateSource::V };
            let np = store.len();
            let mut inputs = store_inputs(&store);
            inputs.push(uniform(&mut r, &[2, 5, cfg.patch.embed], -1.0, 1.0));
            Problem {
                inputs,
                objective: Box::new(move |t, v| { let y = vim_block(t, v[np], &layer, &v[..np], gate)?; project(t, y, s) }),
            }
        }},
        GradCase { name: "head", tolerance: op, build: |s| {
            let mut r = rng(s);
            let mut store = ParamStore::<f64>::new();
            let e = 8;
            let head = HeadParams::init(&mut store, "head", e, &mut r);
            let np = store.len();
            let mut inputs = store_inputs(&store);
            inputs.push(uniform(&mut r, &[2, 3, 3, e], -1.0, 1.0));
            Problem {
                inputs,
                objective: Box::new(move |t, v| {
                    let out = head_forward(t, v[np], &head, &v[..np], NormMode::Train)?;
                    let a = project(t, out.cls, s)?;
                    let b = project(t, out.offset, s + 1)?;
                    let c = project(t, out.size, s + 2)?;
                    let ab = t.add(a, b)?;
                    t.add(ab, c)
                }),
            }
        }},
        GradCase { name: "focal", tolerance: op, build: |s| {
            let mut r = rng(s);
            let grid = 5;
            let b = BBox::from_slice(&random_box(&mut r));
            let gt = gaussian_target(&b, grid);
            Problem { inputs: vec![uniform(&mut r, &[grid * grid], 0.05, 0.95)], objective: Box::new(move |t, v| t.focal_loss(v[0], &gt)) }
        }},
        GradCase { name: "giou", tolerance: op, build: |s| {
            let (pred, gt) = box_pairs(s, 4);
            Problem { inputs: vec![pred], objective: Box::new(move |t, v| t.giou_loss(v[0], &gt)) }
        }},
        GradCase { name: "iou", tolerance: op, build: |s| {
            let (pred, gt) = box_pairs(s, 4);
            Problem { inputs: vec![pred], objective: Box::new(move |t, v| { let y = t.iou(v[0], &gt)?; project(t, y, s) }) }
        }},
        GradCase { name: "l1", tolerance: op, build: |s| {
            let (pred, gt) = box_pairs(s, 4);
            Problem { inputs: vec![pred], objective: Box::new(move |t, v| t.l1_loss(v[0], &gt)) }
        }},
        GradCase { name: "adb", tolerance: op, build: |s| regression_case(s, RegressionKind::Adb) },
        GradCase { name: "focal_regression", tolerance: op, build: |s| regression_case(s, RegressionKind::Focal) },
        GradCase { name: "wce", tolerance: op, build: |s| regression_case(s, RegressionKind::Wce) },
        GradCase { name: "decode_boxes", tolerance: op, build: |s| {
            let mut r = rng(s);
            let grid = 3;
            Problem {
                inputs: vec![uniform(&mut r, &[2, grid, grid, 2], 0.1, 0.9), uniform(&mut r, &[2, grid, grid, 2], 0.1, 0.9)],
                objective: Box::new(move |t, v| { let y = t.decode_boxes(v[0], v[1], &[4, 7])?; project(t, y, s) }),
            }
        }},
        GradCase { name: "full_model", tolerance: COMPOSITE_TOLERANCE, build: |s| {
            let mut r = rng(s);
            let cfg = tiny_model_config();
            let (model, store) = Model::init::<f64>(&cfg, &mut r).expect("tiny config is valid");
            let np = store.len();
            let pc = cfg.patch;
            let batch = 2;
            let mut inputs = store_inputs(&store);
            inputs.push(uniform(&mut r, &[batch, pc.template_tokens(), pc.patch_dim()], 0.0, 1.0));
            inputs.push(uniform(&mut r, &[batch, pc.search_tokens(), pc.patch_dim()], 0.0, 1.0));
            let grid = pc.grid();
            let boxes: Vec<BBox> = (0..batch).map(|_| BBox::from_slice(&random_box(&mut r))).collect();
            let heat: Vec<f64> = boxes.iter().flat_map(|b| gaussian_target(b, grid)).collect();
            let gt: Vec<f64> = boxes.iter().flat_map(|b| b.to_array()).collect();
            let cells: Vec<usize> = (0..batch).map(|k| (k * 5 + 3) % (grid * grid)).collect();
            let omega = vec![0.5, 2.0];
            Problem {
                inputs,
                objective: Box::new(move |t, v| {
                    let out = model.forward(t, &v[..np], v[np], v[np + 1], NormMode::Train)?;
                    let cls = t.focal_loss(out.cls, &heat)?;
                    let pred = t.decode_boxes(out.offset, out.size, &cells)?;
                    let giou = t.giou_loss(pred, &gt)?;
                    let l1 = t.l1_loss(pred, &gt)?;
                    let u = t.iou(pred, &gt)?;
                    let adb = t.regression_balance(u, &omega, RegressionKind::Adb)?;
                    // a visible ADB weight so its gradient path is exercised
                    let w = LossWeights { gamma: 0.5, ..LossWeights::default() };
                    Ok(total_loss_on_tape(t, cls, giou, l1, adb, &w)?.total)
                }),
            }
        }},
    ]
}

/// Runs `case` for one seed.
pub fn run_case(case: &GradCase, seed: u64) -> CaseOutcome {
    let p = (case.build)(seed);
    let report = gradcheck(|t, v| (p.objective)(t, v), &p.inputs, DEFAULT_STEP).map_err(|e| e.to_string());
    CaseOutcome { name: case.name, seed, tolerance: case.tolerance, report }
}

/// Every registered case over `seeds`.
pub fn run_all(seeds: &[u64]) -> Vec<CaseOutcome> {
    registry().iter().flat_map(|c| seeds.iter().map(move |&s| run_case(c, s))).collect()
}
