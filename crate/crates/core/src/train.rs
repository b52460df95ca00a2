//! Adam, the mixed and task-specific training loops, and σ logging.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;

use crate::data::{
    generic_corpus, mix_training_sets, Balancing, Dataset, GenericCorpus, SampleRef, SplitPlan, SuiteConfig, TrainingStream, ATTRIBUTE_NAMES,
};
use crate::error::{GammaError, Result};
use crate::model::{build_model, EncoderConfig, GammaModel, ImageInput};
use crate::moae::ForwardCtx;
use crate::nn::{Affine, ParamGroup, ParamId, ParamStore};
use crate::prompts::{PromptSet, PromptStrategy, Scene};
use crate::seed;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    #[default]
    Mixed,
    TaskSpecific,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub prompt_strategy: PromptStrategy,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub balancing: Balancing,
    /// Steps between σ records.
    pub log_interval: usize,
    /// Lower bound kept on the temperature after every update.
    pub tau_floor: f64,
    /// Learning-rate multipliers by parameter group name.
    pub group_lr_scale: BTreeMap<String, f64>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            mode: TrainMode::Mixed,
            prompt_strategy: PromptStrategy::Sdp,
            clip_norm: Some(5.0),
            balancing: Balancing::Proportional,
            log_interval: 10,
            tau_floor: 1e-2,
            // full-rate expert updates mostly add noise on top of the adapter
            group_lr_scale: BTreeMap::from([(ParamGroup::AdaptiveExperts.name().to_string(), 0.3)]),
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GammaError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(GammaError::Config("batch size must be at least 1".into()));
        }
        if self.log_interval == 0 {
            return Err(GammaError::Config("log interval must be at least 1".into()));
        }
        for (g, &f) in &self.group_lr_scale {
            ParamGroup::from_name(g)?;
            if !(f >= 0.0 && f.is_finite()) {
                return Err(GammaError::Config(format!("learning-rate scale {f} for {g} must be finite and non-negative")));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(GammaError::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Adam moments for the trainable parameters of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    lr_scale: Vec<f64>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: store
                .params()
                .iter()
                .map(|p| p.tensor.requires_grad().then(|| (vec![0.0; p.tensor.numel()], vec![0.0; p.tensor.numel()])))
                .collect(),
            lr_scale: vec![1.0; store.len()],
        }
    }

    /// Multiplies the step size of every parameter in a named group.
    pub fn with_group_scales(mut self, store: &ParamStore, scales: &BTreeMap<String, f64>) -> Self {
        for (p, s) in store.params().iter().zip(&mut self.lr_scale) {
            if let Some(&f) = scales.get(p.group.name()) {
                *s = f;
            }
        }
        self
    }

    pub fn has_moments(&self, index: usize) -> bool {
        matches!(self.moments.get(index), Some(Some(_)))
    }
}

/// One bias-corrected Adam update from the gradients held by the trainable
/// tensors of `store`.
pub fn adam_step(state: &mut AdamState, store: &mut ParamStore, lr: f64) -> Result<()> {
    if state.moments.len() != store.len() {
        return Err(GammaError::Contract(format!(
            "optimizer tracks {} parameters, store has {}",
            state.moments.len(),
            store.len()
        )));
    }
    for (p, m) in store.params().iter().zip(&state.moments) {
        match (p.tensor.grad(), m) {
            (Some(g), Some(_)) => {
                if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                    return Err(GammaError::NumericDomain(format!(
                        "non-finite gradient in parameter group {} ({}[{bad}])",
                        p.group, p.name
                    )));
                }
            }
            (None, Some(_)) => {
                return Err(GammaError::Contract(format!("trainable parameter {} has no gradient", p.name)));
            }
            (Some(_), None) => {
                return Err(GammaError::Contract(format!("parameter {} has a gradient but is frozen", p.name)));
            }
            (None, None) => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let Some((m, v)) = state.moments[id.index()].as_mut() else {
            continue;
        };
        let g = store.get(id).grad().expect("checked above").to_vec();
        let lr = lr * state.lr_scale[id.index()];
        let w = store.get_mut(id).data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their joint norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .params()
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if let Some(g) = store.get(id).grad() {
                let scaled = g.iter().map(|v| v * f).collect();
                store.get_mut(id).set_grad(Some(scaled)).expect("same length");
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaRecord {
    pub step: usize,
    pub encoder: String,
    pub layer: usize,
    pub sigma: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SigmaLog {
    pub records: Vec<SigmaRecord>,
}

impl SigmaLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,encoder,layer,sigma\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.encoder, r.layer, r.sigma);
        }
        s
    }

    /// `(step, σ)` of one layer, in logging order.
    pub fn trajectory(&self, encoder: &str, layer: usize) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.encoder == encoder && r.layer == layer)
            .map(|r| (r.step, r.sigma))
            .collect()
    }
}

/// Appends every MoAE merge factor of `model` at `step`.
pub fn log_sigma(model: &GammaModel, step: usize, log: &mut SigmaLog) {
    for (encoder, layer, sigma) in model.sigma_values() {
        log.records.push(SigmaRecord {
            step,
            encoder: encoder.into(),
            layer,
            sigma,
        });
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: Vec<EpochStats>,
    pub step_losses: Vec<f64>,
    pub sigma: SigmaLog,
    /// Indices of the datasets whose samples were read.
    pub datasets_read: BTreeSet<usize>,
}

/// Encoder outputs that cannot change during a run because the encoder has
/// no trainable parameters.
#[derive(Default)]
struct FeatureCache {
    images: HashMap<SampleRef, Vec<f64>>,
    prompts: HashMap<Scene, Vec<f64>>,
}

/// Runs batches through the model and applies Adam.
pub struct Trainer<'d> {
    datasets: &'d [Dataset],
    config: TrainConfig,
    adam: AdamState,
    cache: FeatureCache,
    cache_images: bool,
    cache_prompts: bool,
    step: usize,
    read: BTreeSet<usize>,
}

impl<'d> Trainer<'d> {
    pub fn new(model: &GammaModel, datasets: &'d [Dataset], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            datasets,
            config: config.clone(),
            adam: AdamState::new(&model.store).with_group_scales(&model.store, &config.group_lr_scale),
            cache: FeatureCache::default(),
            cache_images: !model.visual_has_trainable(),
            cache_prompts: !model.text_has_trainable(),
            step: 0,
            read: BTreeSet::new(),
        })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    fn sample(&mut self, r: SampleRef) -> Result<&'d crate::data::Sample> {
        let d = self
            .datasets
            .get(r.dataset)
            .ok_or_else(|| GammaError::Input(format!("dataset index {} out of range", r.dataset)))?;
        self.read.insert(r.dataset);
        d.samples
            .get(r.index)
            .ok_or_else(|| GammaError::Input(format!("sample {} out of range for {}", r.index, d.spec.name)))
    }

    fn prompt_set(&self, scene: Scene) -> PromptSet {
        self.config.prompt_strategy.prompts(scene)
    }

    fn fill_caches(&mut self, model: &GammaModel, batch: &[SampleRef]) -> Result<()> {
        for &r in batch {
            let s = self.sample(r)?;
            if self.cache_images && !self.cache.images.contains_key(&r) {
                let mut tape = Tape::new();
                let f = model.encode_image(&mut tape, &s.image)?;
                self.cache.images.insert(r, tape.value(f).to_vec());
            }
            if self.cache_prompts && !self.cache.prompts.contains_key(&s.scene) {
                let mut tape = Tape::new();
                let t = model.encode_prompt_set(&mut tape, &self.prompt_set(s.scene))?;
                self.cache.prompts.insert(s.scene, tape.value(t).to_vec());
            }
        }
        Ok(())
    }

    /// Forward, backward and one optimizer update on `batch`; returns the
    /// batch loss before the update.
    pub fn step(&mut self, model: &mut GammaModel, batch: &[SampleRef]) -> Result<f64> {
        if batch.is_empty() {
            return Err(GammaError::Input("empty batch".into()));
        }
        self.fill_caches(model, batch)?;
        let samples: Vec<_> = batch.iter().map(|&r| self.sample(r)).collect::<Result<_>>()?;
        let mut scenes: Vec<Scene> = samples.iter().map(|s| s.scene).collect();
        scenes.sort();
        scenes.dedup();
        let d = model.config.d;
        let (loss, mut grads) = {
            let m: &GammaModel = model;
            let mut tape = Tape::new();
            let images = if self.cache_images {
                let rows = batch.iter().flat_map(|r| self.cache.images[r].iter().copied()).collect();
                tape.constant(batch.len(), d, rows)?
            } else {
                let inputs: Vec<ImageInput> = samples.iter().map(|s| ImageInput::full(&s.image)).collect();
                m.encode_images(&mut tape, &inputs, &ForwardCtx::default())?.features
            };
            let texts = if self.cache_prompts {
                let rows = scenes.iter().flat_map(|s| self.cache.prompts[s].iter().copied()).collect();
                tape.constant(5 * scenes.len(), d, rows)?
            } else {
                let seqs: Vec<Vec<usize>> = scenes.iter().flat_map(|&s| m.tokenize_set(&self.prompt_set(s))).collect();
                m.encode_texts(&mut tape, &seqs, &ForwardCtx::default())?.features
            };
            let pick: Vec<usize> = samples
                .iter()
                .flat_map(|s| {
                    let k = scenes.binary_search(&s.scene).expect("scene collected above");
                    5 * k..5 * k + 5
                })
                .collect();
            let q = m.head.score(&m.store, &mut tape, images, texts, &pick)?;
            let target = tape.constant(batch.len(), 1, samples.iter().map(|s| s.norm_mos).collect())?;
            let loss = tape.mse(q, target)?;
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(GammaError::NumericDomain(format!("loss is {value} at step {}", self.step)));
            }
            (value, tape.backward(loss)?)
        };
        model.store.assign_grads(&mut grads);
        if let Some(c) = self.config.clip_norm {
            clip_gradients(&mut model.store, c);
        }
        adam_step(&mut self.adam, &mut model.store, self.config.learning_rate)
            .map_err(|e| annotate(e, self.step))?;
        model.store.clear_grads();
        model.clamp_tau(self.config.tau_floor);
        self.step += 1;
        Ok(loss)
    }
}

fn annotate(e: GammaError, step: usize) -> GammaError {
    match e {
        GammaError::NumericDomain(m) => GammaError::NumericDomain(format!("step {step}: {m}")),
        other => other,
    }
}

/// Trains over `stream` for `config.epochs` epochs.
pub fn train_stream(
    model: &mut GammaModel,
    datasets: &[Dataset],
    stream: &TrainingStream,
    config: &TrainConfig,
) -> Result<TrainReport> {
    if stream.is_empty() {
        return Err(GammaError::Input("training stream is empty".into()));
    }
    let mut trainer = Trainer::new(model, datasets, config)?;
    let mut report = TrainReport::default();
    let has_sigma = !model.sigma_values().is_empty();
    if has_sigma {
        log_sigma(model, 0, &mut report.sigma);
    }
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let order = stream.epoch(epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size) {
            let loss = trainer.step(model, batch)?;
            report.step_losses.push(loss);
            total += loss;
            batches += 1;
            if has_sigma && trainer.steps() % config.log_interval == 0 {
                log_sigma(model, trainer.steps(), &mut report.sigma);
            }
        }
        let stats = EpochStats {
            epoch,
            mean_loss: total / batches as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        if config.verbose {
            eprintln!("epoch {} loss {:.5} time {:.1}s", stats.epoch, stats.mean_loss, stats.seconds);
        }
        report.epochs.push(stats);
    }
    report.steps = trainer.steps();
    if has_sigma && report.steps % config.log_interval != 0 {
        log_sigma(model, report.steps, &mut report.sigma);
    }
    report.datasets_read = trainer.read;
    Ok(report)
}

fn stream_seed(config: &TrainConfig) -> u64 {
    seed::derive(config.seed, &["train", "stream"])
}

/// Joint training on the union of every dataset's training partition.
pub fn train_mixed(model: &mut GammaModel, datasets: &[Dataset], plan: &SplitPlan, config: &TrainConfig) -> Result<TrainReport> {
    if plan.parts.len() != datasets.len() {
        return Err(GammaError::Contract(format!(
            "split plan covers {} datasets, {} given",
            plan.parts.len(),
            datasets.len()
        )));
    }
    let stream = mix_training_sets(plan, stream_seed(config), config.balancing);
    train_stream(model, datasets, &stream, config)
}

/// Training restricted to `datasets[index]`'s training partition.
pub fn train_task_specific(
    model: &mut GammaModel,
    datasets: &[Dataset],
    plan: &SplitPlan,
    index: usize,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let (train, _) = plan
        .parts
        .get(index)
        .ok_or_else(|| GammaError::Input(format!("no split for dataset index {index}")))?;
    let stream = TrainingStream::single(index, train, stream_seed(config));
    train_stream(model, datasets, &stream, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// 0 skips pretraining and keeps the random backbone.
    pub epochs: usize,
    pub size: usize,
    pub noise: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub verbose: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            size: 2000,
            noise: 0.02,
            learning_rate: 1e-3,
            batch_size: 8,
            verbose: false,
        }
    }
}

/// Regression targets of one generic image: its attributes, then its
/// quality label.
fn pretrain_targets(corpus: &GenericCorpus, i: usize) -> impl Iterator<Item = f64> + '_ {
    corpus.attributes[i].iter().copied().chain([corpus.dataset.samples[i].norm_mos])
}

/// Trains the visual encoder of a MoAE-free model on the generic corpus,
/// regressing every attribute and the quality label through a linear
/// readout of the pooled features. The text encoder keeps its random
/// weights. The result serves as the frozen backbone of later runs.
pub fn pretrain_backbone(model: &EncoderConfig, suite: &SuiteConfig, config: &PretrainConfig, seed: u64) -> Result<GammaModel> {
    let plain = EncoderConfig {
        experts: 0,
        moae_layers: 0,
        ..model.clone()
    };
    let mut m = build_model(&plain, seed::derive(seed, &["pretrain", "model"]))?;
    if config.epochs == 0 {
        return Ok(m);
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(GammaError::Config("pretraining needs a positive batch size and learning rate".into()));
    }
    let n_out = ATTRIBUTE_NAMES.len() + 1;
    let readout = Affine::new(&mut m.store, "pretrain.readout", ParamGroup::Adapter, plain.d, n_out, seed::derive(seed, &["pretrain", "readout"]));
    let ids: Vec<ParamId> = m.store.ids().collect();
    for id in ids {
        let name = &m.store.param(id).name;
        let train = name.starts_with("visual.") || name.starts_with("pretrain.");
        m.store.get_mut(id).set_requires_grad(train);
    }
    let corpus = generic_corpus(suite, config.size, config.noise, seed::derive(seed, &["pretrain", "corpus"]))?;
    let samples = &corpus.dataset.samples;
    let mut adam = AdamState::new(&m.store);
    let mut rng = seed::rng(seed, &["pretrain", "order"]);
    let ctx = ForwardCtx::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size) {
            let target: Vec<f64> = batch.iter().flat_map(|&i| pretrain_targets(&corpus, i)).collect();
            let mut grads = {
                let mut tape = Tape::new();
                let inputs: Vec<ImageInput> = batch.iter().map(|&i| ImageInput::full(&samples[i].image)).collect();
                let f = m.encode_images(&mut tape, &inputs, &ctx)?.features;
                let y = readout.forward(&m.store, &mut tape, f)?;
                let t = tape.constant(batch.len(), n_out, target)?;
                let loss = tape.mse(y, t)?;
                total += tape.scalar_value(loss);
                tape.backward(loss)?
            };
            batches += 1;
            m.store.assign_grads(&mut grads);
            clip_gradients(&mut m.store, 5.0);
            adam_step(&mut adam, &mut m.store, config.learning_rate)?;
            m.store.clear_grads();
        }
        if config.verbose {
            eprintln!("pretrain epoch {epoch} loss {:.5}", total / batches as f64);
        }
    }
    Ok(m)
}

/// Plain tensor copy of every parameter, for before/after comparisons.
pub fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.params().iter().map(|p| p.tensor.clone()).collect()
}
