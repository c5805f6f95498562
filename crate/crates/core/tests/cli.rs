use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nighttrack")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, json: serde_json::Value) -> String {
    let p = dir.join("cfg.json");
    std::fs::write(&p, json.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

fn find_sequence(dir: &Path) -> Option<std::path::PathBuf> {
    if dir.join("gt.csv").exists() {
        return Some(dir.to_path_buf());
    }
    let mut entries: Vec<_> = std::fs::read_dir(dir).ok()?.map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    entries.sort();
    entries.iter().find_map(|p| find_sequence(p))
}

#[test]
fn exit_codes() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["train", "--bogus"])), 1);
    assert_eq!(code(&run(&["gradcheck"])), 1);
    assert_eq!(code(&run(&["gradcheck", "--op", "not_an_op"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), serde_json::json!({"train": {"batch": 0}}));
    let o = run(&["train", "--config", &bad, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("$.train.batch"));

    let typo = write_config(dir.path(), serde_json::json!({"trian": {}}));
    let o = run(&["train", "--config", &typo, "--out", dir.path().join("t").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("$.trian"));
    assert_eq!(code(&run(&["train", "--seed", "1"])), 1, "missing --out is a validation error");

    let missing = run(&["eval", "--checkpoint", dir.path().join("absent").to_str().unwrap(), "--out", dir.path().join("e").to_str().unwrap()]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn gradcheck_single_op() {
    let o = run(&["gradcheck", "--op", "softplus", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sim_sampler_csv_tracks_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sim-sampler", "--epochs", "20", "--draws", "4000", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(dir.path().join("sim_sampler.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,dataset,ratio_theoretical,ratio_empirical");
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let (theory, seen): (f64, f64) = (f[2].parse().unwrap(), f[3].parse().unwrap());
        assert!((theory - seen).abs() < 0.03, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 20 * 7);
}

#[test]
fn training_is_quick_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({
        "train": {"epochs": 1, "pairs_per_epoch": 64, "batch": 32},
        "eval": {"sequences": 2, "length": 12}
    }));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let start = Instant::now();
    for (out, threads) in [(&a, "1"), (&b, "2")] {
        let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", threads]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(start.elapsed().as_secs() < 120, "two smoke runs took {:?}", start.elapsed());

    let loss = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next().unwrap(), "step,L_cls,L_iou,L_L1,L_ADB,L_total");
    assert_eq!(loss.lines().count(), 3);
    assert_eq!(loss, std::fs::read_to_string(b.join("loss.csv")).unwrap());
    let ma: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let mb: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["config_hash"], mb["config_hash"]);

    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    for e in [&e1, &e2] {
        let o = run(&["eval", "--config", &cfg, "--checkpoint", a.to_str().unwrap(), "--out", e.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        std::fs::read_to_string(e1.join("report.json")).unwrap(),
        std::fs::read_to_string(e2.join("report.json")).unwrap()
    );

    let data = dir.path().join("data");
    let o = run(&["gen-data", "--config", &cfg, "--out", data.to_str().unwrap(), "--max-sequences", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let seq = find_sequence(&data).expect("an exported sequence");
    let tracked = dir.path().join("track");
    let o = run(&["track", "--checkpoint", a.to_str().unwrap(), "--sequence", seq.to_str().unwrap(), "--out", tracked.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_dir(&tracked).unwrap().count() > 0);
}
