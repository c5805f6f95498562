use nighttrack::curriculum::Domain;
use nighttrack::frame::Frame;
use nighttrack::synth::{default_registry, generate_sequence, psnr, CropConfig, SequenceSpec};

fn luminance(f: &Frame) -> f64 {
    let [r, g, b] = f.channel_means();
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

#[test]
fn night_frames_are_dark_and_degraded() {
    for seed in 0..8 {
        let day = generate_sequence(&SequenceSpec { length: 3, ..SequenceSpec::new(seed, Domain::Day) }).unwrap();
        let night = generate_sequence(&SequenceSpec { length: 3, ..SequenceSpec::new(seed, Domain::Night) }).unwrap();
        assert_eq!(day.boxes, night.boxes, "domain must not change the trajectory");
        for (d, n) in day.frames.iter().zip(&night.frames) {
            let (ld, ln) = (luminance(d), luminance(n));
            assert!(ln < 0.5 * ld, "seed {seed}: night luminance {ln:.3} vs day {ld:.3}");
            let p = psnr(d, n);
            assert!(p < 25.0, "seed {seed}: PSNR {p:.1} dB");
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = SequenceSpec { length: 4, ..SequenceSpec::new(42, Domain::Night) };
    assert_eq!(generate_sequence(&spec).unwrap(), generate_sequence(&spec).unwrap());
    let crop = CropConfig::default();
    let ds = &default_registry(3)[5];
    let a = ds.sample(17, 99, &crop).unwrap();
    let b = ds.sample(17, 99, &crop).unwrap();
    assert_eq!(a, b);
    let c = ds.sample(17, 100, &crop).unwrap();
    assert_ne!(a.search, c.search);
}

#[test]
fn out_of_range_sample_is_rejected() {
    let ds = &default_registry(0)[0];
    let err = ds.sample(ds.n, 0, &CropConfig::default()).unwrap_err();
    assert!(err.to_string().contains("out of range"));
}
