//! Epoch-dependent dataset sampling: night datasets start under-weighted
//! and reach parity with day datasets at epoch `θ`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THETA: f64 = 150.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Day,
    Night,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Day => "day",
            Domain::Night => "night",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub domain: Domain,
    /// Sample count `N_j`.
    pub n: usize,
    pub id: usize,
}

impl DatasetMeta {
    pub fn new(name: impl Into<String>, domain: Domain, n: usize, id: usize) -> Self {
        DatasetMeta { name: name.into(), domain, n, id }
    }
}

/// Checks `N_j ≥ 1` and id uniqueness.
pub fn validate_metas(metas: &[DatasetMeta]) -> Result<()> {
    if metas.is_empty() {
        return Err(Error::invalid("datasets", "registry is empty"));
    }
    for (i, m) in metas.iter().enumerate() {
        if m.n == 0 {
            return Err(Error::invalid("datasets", format!("dataset '{}' has no samples", m.name)));
        }
        if metas[..i].iter().any(|o| o.id == m.id) {
            return Err(Error::invalid("datasets", format!("duplicate dataset id {}", m.id)));
        }
    }
    Ok(())
}

/// `w_d = e/θ` for night datasets, 1 otherwise. Uncapped unless asked.
pub fn dataset_weight(meta: &DatasetMeta, epoch: usize, theta: f64, cap_at_one: bool) -> f64 {
    match meta.domain {
        Domain::Day => 1.0,
        Domain::Night => {
            let w = epoch as f64 / theta;
            if cap_at_one { w.min(1.0) } else { w }
        }
    }
}

fn normalize(weights: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::invalid("sampling_ratios", "all dataset weights are zero"));
    }
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// `r_i = w_i / Σ w`.
pub fn sampling_ratios(metas: &[DatasetMeta], epoch: usize, theta: f64, cap_at_one: bool) -> Result<Vec<f64>> {
    if metas.is_empty() {
        return Err(Error::invalid("sampling_ratios", "no datasets"));
    }
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::invalid("sampling_ratios", format!("theta must be positive, got {theta}")));
    }
    normalize(metas.iter().map(|m| dataset_weight(m, epoch, theta, cap_at_one)).collect())
}

/// Ratios proportional to `N_j`: every pooled sample equally likely.
pub fn pooled_ratios(metas: &[DatasetMeta]) -> Result<Vec<f64>> {
    if metas.is_empty() {
        return Err(Error::invalid("sampling_ratios", "no datasets"));
    }
    normalize(metas.iter().map(|m| m.n as f64).collect())
}

/// Equal ratio per dataset.
pub fn uniform_ratios(metas: &[DatasetMeta]) -> Result<Vec<f64>> {
    if metas.is_empty() {
        return Err(Error::invalid("sampling_ratios", "no datasets"));
    }
    normalize(vec![1.0; metas.len()])
}

/// Summed ratio of the night datasets.
pub fn night_fraction(metas: &[DatasetMeta], ratios: &[f64]) -> f64 {
    metas.iter().zip(ratios).filter(|(m, _)| m.domain == Domain::Night).map(|(_, r)| r).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrawMode {
    /// Independent categorical draw per pair.
    #[default]
    Replacement,
    /// Per-dataset counts fixed by largest remainder, then shuffled.
    Quota,
}

/// Dataset ratios used when the scheduler is off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unscheduled {
    /// Proportional to dataset size (plain concatenation).
    #[default]
    Pooled,
    /// The same ratio for every dataset.
    PerDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub theta: f64,
    /// 1-based.
    pub epoch: usize,
    pub seed: u64,
    pub metas: Vec<DatasetMeta>,
    pub cap_at_one: bool,
    pub mode: DrawMode,
    pub scheduled: bool,
    pub unscheduled: Unscheduled,
}

impl SamplerState {
    pub fn new(metas: Vec<DatasetMeta>, theta: f64, seed: u64) -> Self {
        SamplerState { theta, epoch: 1, seed, metas, cap_at_one: false, mode: DrawMode::Replacement, scheduled: true, unscheduled: Unscheduled::Pooled }
    }

    pub fn ratios(&self) -> Result<Vec<f64>> {
        if self.scheduled {
            sampling_ratios(&self.metas, self.epoch, self.theta, self.cap_at_one)
        } else {
            match self.unscheduled {
                Unscheduled::Pooled => pooled_ratios(&self.metas),
                Unscheduled::PerDataset => uniform_ratios(&self.metas),
            }
        }
    }
}

/// One scheduled training pair: which dataset, which sample inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Draw {
    /// Position in `SamplerState::metas`.
    pub dataset: usize,
    pub index: usize,
}

/// Seeded RNG for one epoch; every epoch gets its own ChaCha stream.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// The epoch's pair list. Depends only on `(seed, epoch, metas, flags)`.
pub fn draw_epoch_schedule(state: &SamplerState, pairs: usize) -> Result<Vec<Draw>> {
    validate_metas(&state.metas)?;
    if pairs == 0 {
        return Err(Error::invalid("draw_epoch_schedule", "pairs per epoch must be at least 1"));
    }
    if state.epoch == 0 {
        return Err(Error::invalid("draw_epoch_schedule", "epochs are 1-based"));
    }
    let ratios = state.ratios()?;
    let mut rng = epoch_rng(state.seed, state.epoch);
    let datasets: Vec<usize> = match state.mode {
        DrawMode::Replacement => {
            let dist = WeightedIndex::new(&ratios).map_err(|e| Error::invalid("draw_epoch_schedule", e.to_string()))?;
            (0..pairs).map(|_| dist.sample(&mut rng)).collect()
        }
        DrawMode::Quota => {
            let mut order: Vec<usize> = quota_counts(&ratios, pairs)
                .into_iter()
                .enumerate()
                .flat_map(|(i, c)| std::iter::repeat_n(i, c))
                .collect();
            order.shuffle(&mut rng);
            order
        }
    };
    Ok(datasets
        .into_iter()
        .map(|dataset| Draw { dataset, index: rng.random_range(0..state.metas[dataset].n) })
        .collect())
}

/// Largest-remainder apportionment of `pairs` over `ratios`.
pub fn quota_counts(ratios: &[f64], pairs: usize) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * pairs as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = pairs.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for i in order.into_iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> Vec<DatasetMeta> {
        let mut m: Vec<DatasetMeta> =
            [20_000, 15_000, 10_000, 8_000].iter().enumerate().map(|(i, &n)| DatasetMeta::new(format!("day{i}"), Domain::Day, n, i)).collect();
        m.extend([2_000, 1_500, 1_000].iter().enumerate().map(|(i, &n)| DatasetMeta::new(format!("night{i}"), Domain::Night, n, 4 + i)));
        m
    }

    #[test]
    fn weights_follow_epoch_over_theta() {
        let m = registry();
        assert_eq!(dataset_weight(&m[0], 77, 150.0, false), 1.0);
        assert_eq!(dataset_weight(&m[5], 150, 150.0, false), 1.0);
        assert!((dataset_weight(&m[5], 30, 150.0, false) - 0.2).abs() < 1e-15);
        assert_eq!(dataset_weight(&m[5], 300, 150.0, false), 2.0);
        assert_eq!(dataset_weight(&m[5], 300, 150.0, true), 1.0);
    }

    #[test]
    fn ratio_examples() {
        let m = registry();
        let r = sampling_ratios(&m, 30, 150.0, false).unwrap();
        for &day in &r[..4] {
            assert!((day - 1.0 / 4.6).abs() < 1e-12);
        }
        for &night in &r[4..] {
            assert!((night - 0.2 / 4.6).abs() < 1e-12);
        }
        let r = sampling_ratios(&m, 150, 150.0, false).unwrap();
        assert!(r.iter().all(|&x| (x - 1.0 / 7.0).abs() < 1e-12));
        assert_eq!(sampling_ratios(&m[..1], 3, 150.0, false).unwrap(), vec![1.0]);
        assert!(sampling_ratios(&m[4..], 0, 150.0, false).is_err());
    }

    #[test]
    fn schedule_is_reproducible() {
        let s = SamplerState::new(registry(), 150.0, 9);
        assert_eq!(draw_epoch_schedule(&s, 500).unwrap(), draw_epoch_schedule(&s, 500).unwrap());
        let other = SamplerState { epoch: 2, ..s.clone() };
        assert_ne!(draw_epoch_schedule(&s, 500).unwrap(), draw_epoch_schedule(&other, 500).unwrap());
    }

    #[test]
    fn quota_mode_hits_counts() {
        let s = SamplerState { mode: DrawMode::Quota, epoch: 30, ..SamplerState::new(registry(), 150.0, 1) };
        let draws = draw_epoch_schedule(&s, 460).unwrap();
        let night = draws.iter().filter(|d| d.dataset >= 4).count();
        assert_eq!(night, 60);
        assert_eq!(quota_counts(&[0.5, 0.25, 0.25], 3).iter().sum::<usize>(), 3);
    }

    #[test]
    fn unscheduled_ratios() {
        let s = SamplerState { scheduled: false, ..SamplerState::new(registry(), 150.0, 1) };
        let pooled = s.ratios().unwrap();
        assert!((pooled[0] - 20_000.0 / 57_500.0).abs() < 1e-12);
        assert!((night_fraction(&s.metas, &pooled) - 4_500.0 / 57_500.0).abs() < 1e-12);
        let even = SamplerState { unscheduled: Unscheduled::PerDataset, ..s }.ratios().unwrap();
        assert!(even.iter().all(|&r| (r - 1.0 / 7.0).abs() < 1e-12));
    }
}
