//! Dataset metadata, score normalization, train/test splits, the mixed
//! training stream, score CSV files and the synthetic biased suite.

mod csv_io;
mod synth;

pub use csv_io::{load_scores_csv, write_scores_csv, ScoreRecord, ScoreTable};
pub use synth::{
    generic_corpus, oracle_features, GenericCorpus, render_image, synthesize_biased_suite, Attributes, BiasProfile, Curve, RenderConfig,
    SuiteConfig, SuiteManifest, SyntheticDataset, ATTRIBUTE_NAMES,
};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{GammaError, Result};
use crate::prompts::Scene;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Higher raw score means better.
    Mos,
    /// Higher raw score means worse.
    Dmos,
}

impl Polarity {
    pub fn name(self) -> &'static str {
        match self {
            Polarity::Mos => "mos",
            Polarity::Dmos => "dmos",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Polarity {
    type Err = GammaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mos" => Ok(Polarity::Mos),
            "dmos" => Ok(Polarity::Dmos),
            _ => Err(GammaError::Input(format!("unknown polarity `{s}` (expected mos or dmos)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub scene: Scene,
    pub mos_range: (f64, f64),
    pub polarity: Polarity,
    pub size: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.mos_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(GammaError::Config(format!(
                "dataset {}: score range [{lo}, {hi}] is empty",
                self.name
            )));
        }
        Ok(())
    }
}

/// Min-max scales `raw` to [0, 1]; for DMOS the result is flipped so that
/// higher always means better.
pub fn normalize_mos(spec: &DatasetSpec, raw: f64) -> Result<f64> {
    let (lo, hi) = spec.mos_range;
    if !(raw >= lo && raw <= hi) {
        return Err(GammaError::Input(format!(
            "score {raw} of dataset {} outside its range [{lo}, {hi}]",
            spec.name
        )));
    }
    let scaled = (raw - lo) / (hi - lo);
    Ok(match spec.polarity {
        Polarity::Mos => scaled,
        Polarity::Dmos => 1.0 - scaled,
    })
}

/// Inverse of [`normalize_mos`].
pub fn denormalize_mos(spec: &DatasetSpec, norm: f64) -> f64 {
    let (lo, hi) = spec.mos_range;
    match spec.polarity {
        Polarity::Mos => lo + norm * (hi - lo),
        Polarity::Dmos => hi - norm * (hi - lo),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub raw_mos: f64,
    pub norm_mos: f64,
    pub dataset: String,
    pub scene: Scene,
    /// Latent quality the image was rendered from, when known.
    pub latent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

/// One 80/20 partition of every dataset, as sample indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub repeat: usize,
    /// `(train, test)` per dataset, in dataset order.
    pub parts: Vec<(Vec<usize>, Vec<usize>)>,
}

pub const MIN_DATASET_SIZE: usize = 5;

/// `repeats` independent 80/20 partitions per dataset.
pub fn make_splits(specs: &[DatasetSpec], seed: u64, repeats: usize) -> Result<Vec<SplitPlan>> {
    if repeats == 0 {
        return Err(GammaError::Config("need at least one split repeat".into()));
    }
    if let Some(s) = specs.iter().find(|s| s.size < MIN_DATASET_SIZE) {
        return Err(GammaError::Config(format!(
            "dataset {} has {} samples; splitting needs at least {MIN_DATASET_SIZE}",
            s.name, s.size
        )));
    }
    Ok((0..repeats)
        .map(|r| {
            let parts = specs
                .iter()
                .map(|s| {
                    let mut idx: Vec<usize> = (0..s.size).collect();
                    idx.shuffle(&mut seed::rng_indexed(seed, &["split", &s.name], r as u64));
                    let n_test = (s.size + 2) / 5;
                    let mut test = idx.split_off(s.size - n_test);
                    idx.sort_unstable();
                    test.sort_unstable();
                    (idx, test)
                })
                .collect();
            SplitPlan { seed, repeat: r, parts }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Balancing {
    /// Every training sample once per epoch.
    #[default]
    Proportional,
    /// Each dataset contributes the same count per epoch (the mean train
    /// size); larger sets are subsampled and smaller ones cycled.
    Uniform,
}

/// Reference to `datasets[dataset].samples[index]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub dataset: usize,
    pub index: usize,
}

/// Concatenated training partitions; each epoch is a seeded shuffle.
#[derive(Clone, Debug)]
pub struct TrainingStream {
    per_dataset: Vec<Vec<SampleRef>>,
    seed: u64,
    balancing: Balancing,
}

pub fn mix_training_sets(plan: &SplitPlan, seed: u64, balancing: Balancing) -> TrainingStream {
    let per_dataset = plan
        .parts
        .iter()
        .enumerate()
        .map(|(d, (train, _))| train.iter().map(|&index| SampleRef { dataset: d, index }).collect())
        .collect();
    TrainingStream {
        per_dataset,
        seed,
        balancing,
    }
}

impl TrainingStream {
    /// Stream over a single dataset's training partition.
    pub fn single(dataset: usize, train: &[usize], seed: u64) -> Self {
        Self {
            per_dataset: vec![train.iter().map(|&index| SampleRef { dataset, index }).collect()],
            seed,
            balancing: Balancing::Proportional,
        }
    }

    pub fn epoch_len(&self) -> usize {
        match self.balancing {
            Balancing::Proportional => self.per_dataset.iter().map(Vec::len).sum(),
            Balancing::Uniform => self.uniform_quota() * self.per_dataset.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.epoch_len() == 0
    }

    fn uniform_quota(&self) -> usize {
        let n = self.per_dataset.len().max(1);
        self.per_dataset.iter().map(Vec::len).sum::<usize>() / n
    }

    /// The shuffled sample order of `epoch`.
    pub fn epoch(&self, epoch: usize) -> Vec<SampleRef> {
        let mut rng = seed::rng_indexed(self.seed, &["stream"], epoch as u64);
        let mut items: Vec<SampleRef> = match self.balancing {
            Balancing::Proportional => self.per_dataset.concat(),
            Balancing::Uniform => {
                let quota = self.uniform_quota();
                self.per_dataset
                    .iter()
                    .filter(|d| !d.is_empty())
                    .flat_map(|d| {
                        let mut d = d.clone();
                        d.shuffle(&mut rng);
                        d.into_iter().cycle().take(quota).collect::<Vec<_>>()
                    })
                    .collect()
            }
        };
        items.shuffle(&mut rng);
        items
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(range: (f64, f64), polarity: Polarity, size: usize) -> DatasetSpec {
        DatasetSpec {
            name: "d".into(),
            scene: Scene::NaturalQuality,
            mos_range: range,
            polarity,
            size,
        }
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(normalize_mos(&spec((0.0, 9.0), Polarity::Mos, 5), 4.5).unwrap(), 0.5);
        assert_eq!(normalize_mos(&spec((1.0, 100.0), Polarity::Dmos, 5), 1.0).unwrap(), 1.0);
        assert_eq!(normalize_mos(&spec((1.0, 5.0), Polarity::Mos, 5), 4.0).unwrap(), 0.75);
        let e = normalize_mos(&spec((1.0, 5.0), Polarity::Mos, 5), 5.5).unwrap_err();
        assert!(matches!(e, GammaError::Input(ref m) if m.contains("[1, 5]") && m.contains("dataset d")));
        assert!(normalize_mos(&spec((1.0, 5.0), Polarity::Mos, 5), f64::NAN).is_err());
    }

    #[test]
    fn normalization_is_monotone_in_quality() {
        // DMOS: quality rises as the raw score falls
        let raws: Vec<f64> = (0..=20).map(|i| 1.0 + 99.0 * i as f64 / 20.0).collect();
        let m = spec((1.0, 100.0), Polarity::Mos, 5);
        let d = spec((1.0, 100.0), Polarity::Dmos, 5);
        let up: Vec<f64> = raws.iter().map(|&r| normalize_mos(&m, r).unwrap()).collect();
        let down: Vec<f64> = raws.iter().rev().map(|&r| normalize_mos(&d, r).unwrap()).collect();
        assert!(up.windows(2).all(|w| w[0] < w[1]));
        assert!(down.windows(2).all(|w| w[0] < w[1]));
        for &r in &raws {
            let n = normalize_mos(&d, r).unwrap();
            assert!((denormalize_mos(&d, n) - r).abs() < 1e-12);
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let specs = vec![spec((0.0, 1.0), Polarity::Mos, 10)];
        let plans = make_splits(&specs, 3, 1).unwrap();
        assert_eq!(plans[0].parts[0].0.len(), 8);
        assert_eq!(plans[0].parts[0].1.len(), 2);
        assert_eq!(plans, make_splits(&specs, 3, 1).unwrap());
        let specs = vec![spec((0.0, 1.0), Polarity::Mos, 4)];
        assert!(matches!(make_splits(&specs, 3, 1), Err(GammaError::Config(_))));
        assert!(make_splits(&[], 3, 0).is_err());
    }

    #[test]
    fn repeats_are_distinct_partitions() {
        let mut a = spec((0.0, 1.0), Polarity::Mos, 500);
        a.name = "a".into();
        let mut b = spec((0.0, 1.0), Polarity::Mos, 37);
        b.name = "b".into();
        let plans = make_splits(&[a, b], 11, 10).unwrap();
        for (i, p) in plans.iter().enumerate() {
            for (d, n) in [(0, 500), (1, 37)] {
                let (train, test) = &p.parts[d];
                let mut all: Vec<usize> = train.iter().chain(test).copied().collect();
                all.sort_unstable();
                assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
            for q in &plans[i + 1..] {
                assert_ne!(p.parts, q.parts);
            }
        }
    }

    #[test]
    fn stream_mixes_and_replays() {
        let plan = SplitPlan {
            seed: 0,
            repeat: 0,
            parts: vec![((0..8).collect(), vec![8, 9]), ((0..8).collect(), vec![8, 9])],
        };
        let s = mix_training_sets(&plan, 5, Balancing::Proportional);
        assert_eq!(s.epoch_len(), 16);
        let e0 = s.epoch(0);
        assert_eq!(e0.len(), 16);
        assert_eq!(e0, s.epoch(0));
        assert_ne!(e0, s.epoch(1));
        let mut sorted = e0.clone();
        sorted.sort();
        assert_eq!(sorted.iter().filter(|r| r.dataset == 1).count(), 8);

        let uneven = SplitPlan {
            seed: 0,
            repeat: 0,
            parts: vec![((0..12).collect(), vec![]), ((0..4).collect(), vec![])],
        };
        let u = mix_training_sets(&uneven, 5, Balancing::Uniform);
        let e = u.epoch(0);
        assert_eq!(e.len(), 16);
        assert_eq!(e.iter().filter(|r| r.dataset == 1).count(), 8);
    }
}
