//! Correlation metrics, the multi-view evaluation protocol and router
//! activation profiles.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, SplitPlan};
use crate::error::{GammaError, Result};
use crate::model::{GammaModel, ImageInput};
use crate::moae::ForwardCtx;
use crate::prompts::{PromptStrategy, Scene};
use crate::seed;
use crate::tensor::Tape;

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(GammaError::Input(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.len() < 2 {
        return Err(GammaError::Input("correlation needs at least two points".into()));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(GammaError::NumericDomain("correlation input is not finite".into()));
    }
    Ok(())
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(GammaError::UndefinedCorrelation("one side is constant".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn srcc(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    pearson(&average_ranks(pred), &average_ranks(target))
}

/// Pearson correlation of the raw values.
pub fn plcc(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    pearson(pred, target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Patch-subset views averaged per image.
    pub views: usize,
    /// Patches kept per view; the full grid keeps every view identical.
    pub view_patches: usize,
    /// Samples per work unit. Fixed so the split of work never depends on
    /// the worker count.
    pub chunk: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            views: 10,
            view_patches: 12,
            chunk: 16,
            workers: 1,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, patches: usize) -> Result<()> {
        if self.views == 0 || self.chunk == 0 || self.workers == 0 {
            return Err(GammaError::Config("views, chunk and workers must be at least 1".into()));
        }
        if self.view_patches == 0 || self.view_patches > patches {
            return Err(GammaError::Config(format!(
                "view_patches {} must be in 1..={patches}",
                self.view_patches
            )));
        }
        Ok(())
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| GammaError::Config(format!("cannot start {workers} workers: {e}")))
}

/// Patch indices of view `v` of a sample, seeded by the sample id alone.
fn view_indices(cfg: &EvalConfig, patches: usize, sample: &Sample, v: usize) -> Vec<usize> {
    if cfg.view_patches == patches {
        return (0..patches).collect();
    }
    let mut rng = seed::rng_indexed(cfg.seed, &["view", &sample.dataset, &sample.id], v as u64);
    let mut idx = index::sample(&mut rng, patches, cfg.view_patches).into_vec();
    idx.sort_unstable();
    idx
}

/// View-averaged scores of `samples`, in order.
pub fn predict(
    model: &GammaModel,
    samples: &[&Sample],
    strategy: PromptStrategy,
    cfg: &EvalConfig,
    ctx: &ForwardCtx,
) -> Result<Vec<f64>> {
    let patches = model.config.patches();
    cfg.validate(patches)?;
    let mut scenes: Vec<Scene> = samples.iter().map(|s| s.scene).collect();
    scenes.sort();
    scenes.dedup();
    let text: Vec<f64> = {
        let mut tape = Tape::new();
        let seqs: Vec<Vec<usize>> = scenes.iter().flat_map(|&s| model.tokenize_set(&strategy.prompts(s))).collect();
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let t = model.encode_texts(&mut tape, &seqs, ctx)?.features;
        tape.value(t).to_vec()
    };
    let scene_row: HashMap<Scene, usize> = scenes.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let d = model.config.d;
    let chunks: Vec<&[&Sample]> = samples.chunks(cfg.chunk).collect();
    let run = |chunk: &&[&Sample]| -> Result<Vec<f64>> {
        let views: Vec<Vec<usize>> = chunk
            .iter()
            .flat_map(|s| (0..cfg.views).map(move |v| view_indices(cfg, patches, s, v)))
            .collect();
        let inputs: Vec<ImageInput> = chunk
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                views[i * cfg.views..(i + 1) * cfg.views]
                    .iter()
                    .map(move |v| ImageInput { image: &s.image, patches: Some(v) })
            })
            .collect();
        let mut tape = Tape::new();
        let images = model.encode_images(&mut tape, &inputs, ctx)?.features;
        let texts = tape.constant(5 * scenes.len(), d, text.clone())?;
        let pick: Vec<usize> = chunk
            .iter()
            .flat_map(|s| {
                let k = scene_row[&s.scene];
                (0..cfg.views).flat_map(move |_| 5 * k..5 * k + 5)
            })
            .collect();
        let q = model.head.score(&model.store, &mut tape, images, texts, &pick)?;
        Ok(tape
            .value(q)
            .chunks(cfg.views)
            .map(|v| v.iter().sum::<f64>() / cfg.views as f64)
            .collect())
    };
    let parts: Vec<Vec<f64>> = if cfg.workers == 1 {
        chunks.iter().map(run).collect::<Result<_>>()?
    } else {
        pool(cfg.workers)?.install(|| chunks.par_iter().map(run).collect::<Result<_>>())?
    };
    Ok(parts.concat())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset: String,
    pub srcc: f64,
    pub plcc: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub repeat: usize,
    pub datasets: Vec<DatasetMetrics>,
}

impl RunMetrics {
    pub fn mean_srcc(&self) -> f64 {
        self.datasets.iter().map(|d| d.srcc).sum::<f64>() / self.datasets.len() as f64
    }
}

/// Per-dataset SRCC and PLCC on the test partition of `plan`.
pub fn evaluate(
    model: &GammaModel,
    datasets: &[Dataset],
    plan: &SplitPlan,
    strategy: PromptStrategy,
    cfg: &EvalConfig,
    ctx: &ForwardCtx,
) -> Result<RunMetrics> {
    if plan.parts.len() != datasets.len() {
        return Err(GammaError::Contract(format!(
            "split plan covers {} datasets, {} given",
            plan.parts.len(),
            datasets.len()
        )));
    }
    let mut out = Vec::with_capacity(datasets.len());
    for (d, (_, test)) in datasets.iter().zip(&plan.parts) {
        if test.is_empty() {
            return Err(GammaError::Input(format!("dataset {} has an empty test split", d.spec.name)));
        }
        let samples: Vec<&Sample> = test.iter().map(|&i| &d.samples[i]).collect();
        let pred = predict(model, &samples, strategy, cfg, ctx)?;
        let target: Vec<f64> = samples.iter().map(|s| s.norm_mos).collect();
        let tag = |e: GammaError| match e {
            GammaError::UndefinedCorrelation(m) => GammaError::UndefinedCorrelation(format!("{}: {m}", d.spec.name)),
            other => other,
        };
        out.push(DatasetMetrics {
            dataset: d.spec.name.clone(),
            srcc: srcc(&pred, &target).map_err(tag)?,
            plcc: plcc(&pred, &target).map_err(tag)?,
            n: samples.len(),
        });
    }
    Ok(RunMetrics {
        seed: plan.seed,
        repeat: plan.repeat,
        datasets: out,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: Vec<RunMetrics>,
    /// Per-dataset median over runs.
    pub median: Vec<DatasetMetrics>,
    /// Mean over datasets of the median SRCC.
    pub mean_srcc: f64,
    pub mean_plcc: f64,
}

impl MetricsReport {
    pub fn from_runs(runs: Vec<RunMetrics>) -> Result<Self> {
        let first = runs.first().ok_or_else(|| GammaError::Input("no runs to aggregate".into()))?;
        let mut median_rows = Vec::new();
        for (k, d) in first.datasets.iter().enumerate() {
            let col = |f: fn(&DatasetMetrics) -> f64| -> Result<Vec<f64>> {
                runs.iter()
                    .map(|r| {
                        r.datasets
                            .get(k)
                            .filter(|x| x.dataset == d.dataset)
                            .map(f)
                            .ok_or_else(|| GammaError::Contract("runs cover different datasets".into()))
                    })
                    .collect()
            };
            median_rows.push(DatasetMetrics {
                dataset: d.dataset.clone(),
                srcc: median(&col(|x| x.srcc)?),
                plcc: median(&col(|x| x.plcc)?),
                n: d.n,
            });
        }
        let n = median_rows.len() as f64;
        Ok(Self {
            mean_srcc: median_rows.iter().map(|d| d.srcc).sum::<f64>() / n,
            mean_plcc: median_rows.iter().map(|d| d.plcc).sum::<f64>() / n,
            median: median_rows,
            runs,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub dataset: String,
    pub layer: usize,
    /// Mean router weight of each expert over every test token.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    pub rows: Vec<ProfileRow>,
}

impl ActivationProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,layer,expert_index,mean_weight\n");
        for r in &self.rows {
            for (e, w) in r.weights.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{}", r.dataset, r.layer, e, w);
            }
        }
        s
    }

    pub fn get(&self, dataset: &str, layer: usize) -> Option<&[f64]> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.layer == layer)
            .map(|r| r.weights.as_slice())
    }

    pub fn last_layer(&self) -> Option<usize> {
        self.rows.iter().map(|r| r.layer).max()
    }

    /// Largest L1 distance between two datasets' profiles at `layer`.
    pub fn max_l1(&self, layer: usize) -> f64 {
        let rows: Vec<&ProfileRow> = self.rows.iter().filter(|r| r.layer == layer).collect();
        let mut best: f64 = 0.0;
        for (i, a) in rows.iter().enumerate() {
            for b in &rows[i + 1..] {
                best = best.max(a.weights.iter().zip(&b.weights).map(|(x, y)| (x - y).abs()).sum());
            }
        }
        best
    }
}

/// Mean visual-router weights per dataset and MoAE layer over the test
/// partition, full images.
pub fn activation_profile(model: &GammaModel, datasets: &[Dataset], plan: &SplitPlan, chunk: usize) -> Result<ActivationProfile> {
    if model.config.experts == 0 {
        return Err(GammaError::Config("activation profile needs at least one expert".into()));
    }
    let layers: Vec<usize> = model.visual.moae_layers().map(|(i, _)| i).collect();
    if layers.is_empty() {
        return Err(GammaError::Config("model has no visual MoAE layer".into()));
    }
    let n = model.config.experts;
    let mut rows = Vec::new();
    for (d, (_, test)) in datasets.iter().zip(&plan.parts) {
        let mut sums = vec![vec![0.0; n]; layers.len()];
        let mut tokens = 0usize;
        for part in test.chunks(chunk.max(1)) {
            let inputs: Vec<ImageInput> = part.iter().map(|&i| ImageInput::full(&d.samples[i].image)).collect();
            let mut tape = Tape::new();
            let enc = model.encode_images(&mut tape, &inputs, &ForwardCtx::default())?;
            for (l, &r) in enc.routes.iter().enumerate() {
                for row in tape.value(r).chunks(n) {
                    for (s, w) in sums[l].iter_mut().zip(row) {
                        *s += w;
                    }
                }
            }
            tokens += tape.shape(enc.routes[0]).0;
        }
        for (l, s) in layers.iter().zip(sums) {
            rows.push(ProfileRow {
                dataset: d.spec.name.clone(),
                layer: *l,
                weights: s.into_iter().map(|v| v / tokens.max(1) as f64).collect(),
            });
        }
    }
    Ok(ActivationProfile { rows })
}
