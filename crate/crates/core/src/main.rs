use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nighttrack::config::RunConfig;
use nighttrack::curriculum::{draw_epoch_schedule, DatasetMeta, SamplerState};
use nighttrack::eval::{compute_metrics, evaluate, normalize_boxes, EvalReport};
use nighttrack::gradsuite;
use nighttrack::losses::RegressionKind;
use nighttrack::ssm::bench;
use nighttrack::synth::{export_dataset, load_sequence};
use nighttrack::train::{load_tracker, train_run};
use nighttrack::{Error, Result};

#[derive(Parser)]
#[command(name = "nighttrack", version, about = "Day/night single-object tracking with a bidirectional selective-scan backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic training and evaluation datasets to PNG.
    GenData(GenData),
    /// Simulate the curriculum sampler and compare empirical ratios to the schedule.
    SimSampler(SimSampler),
    /// Train a tracker.
    Train(Train),
    /// Track one sequence directory with a trained checkpoint.
    Track(Track),
    /// Evaluate a checkpoint on the held-out day and night sequences.
    Eval(Eval),
    /// Time the forward scan at several sequence lengths.
    BenchScan(BenchScan),
    /// Run the finite-difference gradient checks.
    Gradcheck(Gradcheck),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Adb,
    Focal,
    Wce,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    /// Sequences written per dataset (overrides the config).
    #[arg(long)]
    max_sequences: Option<usize>,
}

#[derive(Args)]
struct SimSampler {
    /// JSON array of {name, domain, n, id}; the built-in registry when omitted.
    #[arg(long)]
    metas: Option<PathBuf>,
    #[arg(long, default_value_t = 150.0)]
    theta: f64,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    /// Draws per epoch.
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clip night weights at 1.
    #[arg(long)]
    cap_at_one: bool,
    /// Directory for sim_sampler.csv; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    /// Disable the sampling scheduler.
    #[arg(long)]
    no_ss: bool,
    /// Disable the loss scheduler (γ = 0).
    #[arg(long)]
    no_ls: bool,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    theta: Option<f64>,
    /// Evaluate the trained model into <out>/eval.
    #[arg(long)]
    eval: bool,
}

#[derive(Args)]
struct Track {
    /// Directory written by `train` (checkpoint/).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sequence directory with frame_%05d.png and gt.csv.
    #[arg(long)]
    sequence: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct BenchScan {
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192,16384")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    /// Directory for bench_scan.csv; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    /// Run every registered check.
    #[arg(long)]
    all: bool,
    /// Run only the named check.
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.out.clone().ok_or_else(|| Error::Config { path: "$.out".into(), msg: "no output directory (use --out)".into() })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(m) = a.max_sequences {
        cfg.data.export_sequences = Some(m);
    }
    if let Some(s) = a.common.seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    let out = out_dir(&cfg)?;
    let train = cfg.training_datasets()?;
    for spec in &train {
        let n = export_dataset(spec, &out.join("train"), cfg.data.export_sequences)?;
        eprintln!("{}: {n} sequences, N = {}", spec.name, spec.n);
    }
    for spec in &cfg.eval_datasets() {
        export_dataset(spec, &out.join("eval"), None)?;
    }
    write(&out.join("registry.json"), &serde_json::to_string_pretty(&train)?)
}

fn sim_sampler(a: SimSampler) -> Result<()> {
    let metas: Vec<DatasetMeta> = match &a.metas {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            serde_json::from_str(&text)?
        }
        None => RunConfig::default().training_datasets()?.iter().map(|d| d.meta()).collect(),
    };
    let mut state = SamplerState::new(metas, a.theta, a.seed);
    state.cap_at_one = a.cap_at_one;
    let mut csv = String::from("epoch,dataset,ratio_theoretical,ratio_empirical\n");
    for epoch in 1..=a.epochs {
        state.epoch = epoch;
        let ratios = state.ratios()?;
        let draws = draw_epoch_schedule(&state, a.draws)?;
        let mut counts = vec![0usize; ratios.len()];
        for d in &draws {
            counts[d.dataset] += 1;
        }
        for (i, m) in state.metas.iter().enumerate() {
            csv.push_str(&format!("{epoch},{},{},{}\n", m.name, ratios[i], counts[i] as f64 / a.draws as f64));
        }
    }
    match &a.out {
        Some(dir) => write(&dir.join("sim_sampler.csv"), &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn train(a: Train) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if a.no_ss {
        cfg.ablation.use_ss = false;
    }
    if a.no_ls {
        cfg.ablation.use_ls = false;
    }
    if let Some(l) = a.loss {
        cfg.loss.kind = match l {
            LossArg::Adb => RegressionKind::Adb,
            LossArg::Focal => RegressionKind::Focal,
            LossArg::Wce => RegressionKind::Wce,
        };
    }
    if let Some(t) = a.theta {
        cfg.sampler.theta = t;
    }
    cfg.validate()?;
    let out = out_dir(&cfg)?;
    let datasets = cfg.training_datasets()?;
    let outcome = train_run(&cfg, &datasets, &out)?;
    if let Some(last) = outcome.losses.last() {
        eprintln!("{} steps, final loss {:.5}", outcome.losses.len(), last.total);
    }
    if a.eval {
        let report = evaluate(&outcome.tracker, &cfg.eval_datasets(), cfg.threads)?;
        report.write(&out.join("eval"))?;
        print_report(&report);
    }
    Ok(())
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    if p.join("checkpoint").is_dir() { p.join("checkpoint") } else { p.to_path_buf() }
}

fn track(a: Track) -> Result<()> {
    let tracker = load_tracker(&checkpoint_dir(&a.checkpoint))?;
    let seq = load_sequence(&a.sequence)?;
    let pred = tracker.track_sequence(&seq.frames, seq.boxes[0])?;
    let (w, h) = (seq.frames[0].width(), seq.frames[0].height());
    let (pn, gn) = (normalize_boxes(&pred, w, h), normalize_boxes(&seq.boxes, w, h));
    let mut csv = String::from("frame,cx,cy,w,h\n");
    for (i, b) in pn.iter().enumerate() {
        csv.push_str(&format!("{i},{},{},{},{}\n", b.cx, b.cy, b.w, b.h));
    }
    write(&a.out.join("boxes.csv"), &csv)?;
    let m = compute_metrics(&pn, &gn, (w as f64, h as f64))?;
    write(&a.out.join("metrics.json"), &serde_json::to_string_pretty(&m)?)?;
    println!("precision {:.4} norm_precision {:.4} success {:.4}", m.precision, m.norm_precision, m.success);
    Ok(())
}

fn print_report(r: &EvalReport) {
    for (name, m) in [("overall", r.overall), ("day", r.day), ("night", r.night)] {
        if let Some(m) = m {
            println!("{name:8} precision {:.4} norm_precision {:.4} success {:.4}", m.precision, m.norm_precision, m.success);
        }
    }
}

fn eval(a: Eval) -> Result<()> {
    let cfg = load_config(&a.common)?;
    cfg.validate()?;
    let out = out_dir(&cfg)?;
    let tracker = load_tracker(&checkpoint_dir(&a.checkpoint))?;
    let report = evaluate(&tracker, &cfg.eval_datasets(), cfg.threads)?;
    report.write(&out)?;
    print_report(&report);
    Ok(())
}

fn bench_scan(a: BenchScan) -> Result<()> {
    if a.reps == 0 || a.lengths.contains(&0) {
        return Err(Error::Config { path: "bench-scan".into(), msg: "lengths and reps must be positive".into() });
    }
    let rows = a.lengths.iter().map(|&l| bench::time_scan(l, a.reps, 0)).collect::<Result<Vec<_>>>()?;
    let csv = bench::to_csv(&rows);
    match &a.out {
        Some(dir) => write(&dir.join("bench_scan.csv"), &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

/// Exit status: 0 when everything passes, 2 otherwise.
fn gradcheck(a: Gradcheck) -> Result<bool> {
    let cases: Vec<_> = gradsuite::registry().into_iter().filter(|c| a.all || a.op.as_deref() == Some(c.name)).collect();
    if cases.is_empty() {
        let msg = match &a.op {
            Some(op) => format!("unknown op '{op}'"),
            None => "pass --all or --op NAME".into(),
        };
        return Err(Error::Config { path: "gradcheck".into(), msg });
    }
    let mut ok = true;
    for case in &cases {
        for seed in 0..a.seeds {
            let out = gradsuite::run_case(case, seed);
            let pass = out.passed();
            ok &= pass;
            match &out.report {
                Ok(r) => println!("{} {} seed={} max_rel_err={:.3e} tol={:.0e}", if pass { "PASS" } else { "FAIL" }, out.name, seed, r.max_rel_err, out.tolerance),
                Err(e) => println!("FAIL {} seed={} error: {e}", out.name, seed),
            }
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::SimSampler(a) => sim_sampler(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Track(a) => track(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::BenchScan(a) => bench_scan(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
