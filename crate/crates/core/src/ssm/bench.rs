//! Wall-clock timing of the forward scan at increasing sequence lengths.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::kernel::{scan_forward, ScanDims, ScanOptions};
use crate::error::Result;

/// Channel and state widths used for the timing runs.
pub const BENCH_D: usize = 16;
pub const BENCH_N: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub len: usize,
    pub samples_ns: Vec<u64>,
}

impl BenchRow {
    pub fn mean_ns(&self) -> f64 {
        self.samples_ns.iter().map(|&v| v as f64).sum::<f64>() / self.samples_ns.len().max(1) as f64
    }

    /// Sample standard deviation.
    pub fn std_ns(&self) -> f64 {
        let n = self.samples_ns.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean_ns();
        (self.samples_ns.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    pub fn median_ns(&self) -> f64 {
        let mut v = self.samples_ns.clone();
        v.sort_unstable();
        match v.len() {
            0 => 0.0,
            n if n % 2 == 1 => v[n / 2] as f64,
            n => (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0,
        }
    }
}

/// Times `reps` forward scans of a `[1, len, D]` sequence after one
/// warm-up pass.
pub fn time_scan(len: usize, reps: usize, seed: u64) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, n) = (BENCH_D, BENCH_N);
    let x: Vec<f32> = (0..len * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let delta: Vec<f32> = (0..len * d).map(|_| rng.random_range(0.001..0.1)).collect();
    let b: Vec<f32> = (0..len * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c: Vec<f32> = (0..len * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a_log: Vec<f32> = (0..d * n).map(|i| ((i % n) as f32 + 1.0).ln()).collect();
    let dims = ScanDims { batch: 1, len, d, n };
    let opts = ScanOptions::default();
    black_box(scan_forward(&x, &delta, &b, &c, &a_log, dims, opts)?);
    let mut samples_ns = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        black_box(scan_forward(black_box(&x), &delta, &b, &c, &a_log, dims, opts)?);
        samples_ns.push(t.elapsed().as_nanos() as u64);
    }
    Ok(BenchRow { len, samples_ns })
}

/// CSV with columns `L, wall_ns_mean, wall_ns_std, reps`.
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("L,wall_ns_mean,wall_ns_std,reps\n");
    for r in rows {
        s.push_str(&format!("{},{:.0},{:.0},{}\n", r.len, r.mean_ns(), r.std_ns(), r.samples_ns.len()));
    }
    s
}
