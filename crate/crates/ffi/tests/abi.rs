use std::ffi::CString;
use std::process::Command;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nighttrack::curriculum::Domain;
use nighttrack::encoder::{Model, ModelConfig};
use nighttrack::synth::{generate_sequence, CropConfig, SequenceSpec};
use nighttrack::train::save_model;
use nighttrack_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { nt_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn pure_helpers_match_the_library() {
    let sizes = [20_000u64, 15_000, 2_000];
    let night = [0u8, 0, 1];
    let mut out = [0.0; 3];
    let st = unsafe { nt_sampling_ratios(sizes.as_ptr(), night.as_ptr(), 3, 75, 150.0, out.as_mut_ptr()) };
    assert_eq!(st, NtStatus::Ok);
    assert!((out[2] - 0.5 / 2.5).abs() < 1e-12);

    let mut w = 0.0;
    assert_eq!(unsafe { nt_omega_weight(500, 500, &mut w) }, NtStatus::Ok);
    assert_eq!(w, 0.5);
    assert_eq!(unsafe { nt_omega_weight(10, 0, &mut w) }, NtStatus::InvalidArgument);
    assert!(last_error().contains("N_j"));

    let (u, om) = ([0.5], [0.5]);
    let mut adb = 0.0;
    assert_eq!(unsafe { nt_adb_loss(u.as_ptr(), om.as_ptr(), 1, &mut adb) }, NtStatus::Ok);
    assert!((adb - 0.240129).abs() < 1e-6);

    let b = NtBox { cx: 0.5, cy: 0.5, w: 0.2, h: 0.2 };
    let mut m = NtMetrics::default();
    assert_eq!(unsafe { nt_compute_metrics(&b, &b, 1, 100.0, 100.0, &mut m) }, NtStatus::Ok);
    assert_eq!((m.precision, m.success), (1.0, 1.0));

    let cls = [1.0; 9];
    let mut pen = [0.0; 9];
    assert_eq!(unsafe { nt_hanning_penalty(cls.as_ptr(), 3, pen.as_mut_ptr()) }, NtStatus::Ok);
    assert_eq!(pen[4], 1.0);
    assert_eq!(pen[0], 0.0);
}

#[test]
fn null_pointers_are_reported() {
    assert_eq!(unsafe { nt_omega_weight(1, 1, ptr::null_mut()) }, NtStatus::NullPointer);
    assert!(last_error().contains("out"));
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { nt_tracker_load(ptr::null(), &mut t) }, NtStatus::NullPointer);
    let missing = CString::new("/nonexistent/nighttrack").unwrap();
    assert_eq!(unsafe { nt_tracker_load(missing.as_ptr(), &mut t) }, NtStatus::Io);
    unsafe { nt_tracker_free(ptr::null_mut()) };
}

#[test]
fn tracker_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::default();
    let (model, store) = Model::init::<f32>(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    save_model(dir.path(), &model, &store, &CropConfig::default()).unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { nt_tracker_load(path.as_ptr(), &mut t) }, NtStatus::Ok);

    let seq = generate_sequence(&SequenceSpec { length: 5, ..SequenceSpec::new(3, Domain::Night) }).unwrap();
    let (h, w) = (seq.frames[0].height(), seq.frames[0].width());
    let mut out = NtBox::default();
    let early = unsafe { nt_tracker_update(t, seq.frames[1].data().as_ptr(), h, w, &mut out) };
    assert_eq!(early, NtStatus::InvalidArgument);
    let b0 = seq.boxes[0];
    let init = NtBox { cx: b0.cx, cy: b0.cy, w: b0.w, h: b0.h };
    assert_eq!(unsafe { nt_tracker_start(t, seq.frames[0].data().as_ptr(), h, w, init) }, NtStatus::Ok);
    for f in &seq.frames[1..] {
        assert_eq!(unsafe { nt_tracker_update(t, f.data().as_ptr(), h, w, &mut out) }, NtStatus::Ok);
        assert!(out.cx.is_finite() && out.w >= 1.0 && out.h >= 1.0);
    }
    assert_eq!(unsafe { nt_tracker_start(t, ptr::null(), h, w, init) }, NtStatus::NullPointer);
    unsafe { nt_tracker_free(t) };
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/nighttrack.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in ["nt_tracker_load", "nt_tracker_update", "nt_last_error_message", "NT_STATUS_OK"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(&src, "#include \"nighttrack.h\"\nint main(void) { NtBox b = {0}; (void)b; return NT_STATUS_OK; }\n").unwrap();
    match Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg("-I").arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include")).arg(&src).status() {
        Ok(s) => assert!(s.success(), "header does not compile"),
        Err(_) => eprintln!("no C compiler on PATH; skipped the compile check"),
    }
}
