use nighttrack::gradsuite::{registry, run_case};

#[test]
fn every_registered_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in registry() {
        for seed in 0..5 {
            let out = run_case(&case, seed);
            if !out.passed() {
                failures.push(format!("{} seed {}: {:?}", out.name, seed, out.report));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
