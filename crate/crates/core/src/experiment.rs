//! End-to-end runs on a synthetic suite and the ablation driver.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use std::collections::HashMap;

use crate::data::{make_splits, synthesize_biased_suite, Dataset, DatasetSpec, SplitPlan, SuiteConfig};
use crate::error::{GammaError, Result};
use crate::eval::{activation_profile, evaluate, ActivationProfile, EvalConfig, MetricsReport, RunMetrics};
use crate::model::{build_model, EncoderConfig, GammaModel};
use crate::moae::ForwardCtx;
use crate::nn::{FreezePolicy, ParamGroup, ParamStore};
use crate::prompts::PromptStrategy;
use crate::seed;
use crate::train::{pretrain_backbone, train_mixed, PretrainConfig, SigmaLog, TrainConfig, TrainReport};

/// Changes to the default model and training setup.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub experts: Option<usize>,
    pub moae_layers: Option<usize>,
    pub prompt_strategy: Option<PromptStrategy>,
    /// Fix every merge factor at this value and freeze it.
    pub fixed_sigma: Option<f64>,
    pub unfreeze_shared: bool,
}

impl Variant {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn model_config(&self, base: &EncoderConfig) -> EncoderConfig {
        let mut c = base.clone();
        if let Some(n) = self.experts {
            c.experts = n;
            if n == 0 {
                c.moae_layers = 0;
            }
        }
        if let Some(k) = self.moae_layers {
            c.moae_layers = k;
        }
        if c.moae_layers == 0 {
            c.experts = 0;
        }
        c
    }

    pub fn strategy(&self, base: &TrainConfig) -> PromptStrategy {
        self.prompt_strategy.unwrap_or(base.prompt_strategy)
    }

    pub fn policy(&self) -> FreezePolicy {
        let mut p = FreezePolicy::default();
        if self.unfreeze_shared {
            p = p.with(ParamGroup::SharedExperts);
        }
        if self.fixed_sigma.is_some() {
            p = p.without(ParamGroup::Sigma);
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: EncoderConfig,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
    pub suite: SuiteConfig,
    pub pretrain: PretrainConfig,
    /// Independent training runs; metrics are medians over them.
    pub runs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: EncoderConfig::default(),
            training: TrainConfig::default(),
            evaluation: EvalConfig::default(),
            suite: SuiteConfig::default(),
            pretrain: PretrainConfig::default(),
            runs: 3,
        }
    }
}

/// Seed of run `index` under the experiment seed.
pub fn run_seed(seed: u64, index: usize) -> u64 {
    seed::derive_indexed(seed, &["run"], index as u64)
}

pub fn specs(datasets: &[Dataset]) -> Vec<DatasetSpec> {
    datasets.iter().map(|d| d.spec.clone()).collect()
}

pub struct RunOutcome {
    pub model: GammaModel,
    pub plan: SplitPlan,
    pub train: TrainReport,
    pub metrics: RunMetrics,
    pub profile: Option<ActivationProfile>,
}

/// Pretrained backbones keyed by run seed, shared by every variant of an
/// experiment.
#[derive(Default)]
pub struct Backbones {
    stores: HashMap<u64, ParamStore>,
}

impl Backbones {
    pub fn get(&mut self, cfg: &ExperimentConfig, seed: u64) -> Result<&ParamStore> {
        if !self.stores.contains_key(&seed) {
            let m = pretrain_backbone(&cfg.model, &cfg.suite, &cfg.pretrain, seed)?;
            self.stores.insert(seed, m.store);
        }
        Ok(&self.stores[&seed])
    }
}

/// Model for `variant` with run seed `seed`: pretrained backbone loaded when
/// pretraining is enabled, fixed σ applied, freezing policy set.
pub fn prepare_model(cfg: &ExperimentConfig, variant: &Variant, seed: u64, backbones: &mut Backbones) -> Result<GammaModel> {
    let model_cfg = variant.model_config(&cfg.model);
    let mut model = build_model(&model_cfg, seed)?;
    if cfg.pretrain.epochs > 0 {
        model.load_backbone(backbones.get(cfg, seed)?)?;
    }
    if let Some(s) = variant.fixed_sigma {
        model.set_sigma(s);
    }
    model.set_trainable(&variant.policy());
    Ok(model)
}

/// The split used by every run with this seed.
pub fn run_plan(datasets: &[Dataset], seed: u64) -> Result<SplitPlan> {
    Ok(make_splits(&specs(datasets), seed, 1)?.remove(0))
}

pub fn run_train_config(cfg: &ExperimentConfig, variant: &Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        prompt_strategy: variant.strategy(&cfg.training),
        ..cfg.training.clone()
    }
}

/// Build and train one variant with one run seed.
pub fn train_once(
    datasets: &[Dataset],
    cfg: &ExperimentConfig,
    variant: &Variant,
    seed: u64,
    backbones: &mut Backbones,
) -> Result<(GammaModel, SplitPlan, TrainReport)> {
    let mut model = prepare_model(cfg, variant, seed, backbones)?;
    let plan = run_plan(datasets, seed)?;
    let report = train_mixed(&mut model, datasets, &plan, &run_train_config(cfg, variant, seed))?;
    Ok((model, plan, report))
}

/// Test-split metrics and, for MoAE models, the router profile.
pub fn assess(
    model: &GammaModel,
    datasets: &[Dataset],
    plan: &SplitPlan,
    strategy: PromptStrategy,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(RunMetrics, Option<ActivationProfile>)> {
    let eval_cfg = EvalConfig {
        seed,
        ..cfg.evaluation.clone()
    };
    let metrics = evaluate(model, datasets, plan, strategy, &eval_cfg, &ForwardCtx::default())?;
    let profile = if model.config.has_moae() {
        Some(activation_profile(model, datasets, plan, eval_cfg.chunk)?)
    } else {
        None
    };
    Ok((metrics, profile))
}

/// Build, train and evaluate one variant with one run seed.
pub fn run_once(
    datasets: &[Dataset],
    cfg: &ExperimentConfig,
    variant: &Variant,
    seed: u64,
    backbones: &mut Backbones,
) -> Result<RunOutcome> {
    let (model, plan, train) = train_once(datasets, cfg, variant, seed, backbones)?;
    let (metrics, profile) = assess(&model, datasets, &plan, variant.strategy(&cfg.training), cfg, seed)?;
    Ok(RunOutcome {
        model,
        plan,
        train,
        metrics,
        profile,
    })
}

pub struct VariantOutcome {
    pub variant: Variant,
    pub report: MetricsReport,
    pub sigma: Vec<SigmaLog>,
    pub profiles: Vec<Option<ActivationProfile>>,
    /// Per run: metrics with every MoAE layer forced onto one expert, one
    /// entry per expert.
    pub single_expert: Vec<Vec<RunMetrics>>,
}

/// All runs of one variant. `single_expert` adds the forced-expert
/// evaluations.
pub fn run_variant(
    datasets: &[Dataset],
    cfg: &ExperimentConfig,
    variant: &Variant,
    seed: u64,
    single_expert: bool,
    backbones: &mut Backbones,
) -> Result<VariantOutcome> {
    if cfg.runs == 0 {
        return Err(GammaError::Config("need at least one run".into()));
    }
    let mut runs = Vec::new();
    let mut sigma = Vec::new();
    let mut profiles = Vec::new();
    let mut singles = Vec::new();
    for r in 0..cfg.runs {
        let s = run_seed(seed, r);
        let out = run_once(datasets, cfg, variant, s, backbones)?;
        if single_expert {
            let n = out.model.config.experts;
            if n == 0 || !out.model.config.has_moae() {
                return Err(GammaError::Config(format!("variant {} has no experts to force", variant.name)));
            }
            let eval_cfg = EvalConfig { seed: s, ..cfg.evaluation.clone() };
            let strategy = variant.strategy(&cfg.training);
            singles.push(
                (0..n)
                    .map(|i| evaluate(&out.model, datasets, &out.plan, strategy, &eval_cfg, &ForwardCtx::forcing(i, n)?))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        runs.push(out.metrics);
        sigma.push(out.train.sigma);
        profiles.push(out.profile);
    }
    Ok(VariantOutcome {
        variant: variant.clone(),
        report: MetricsReport::from_runs(runs)?,
        sigma,
        profiles,
        single_expert: singles,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "axis", content = "values")]
pub enum AblationAxis {
    Experts(Vec<usize>),
    MoaeLayers(Vec<usize>),
    /// SDP and MoAE switched on and off together: the four-way table.
    SdpMoae,
    Prompts(Vec<PromptStrategy>),
    /// Default merge factor against σ fixed at 1.
    Sigma,
    /// Default freezing against a trainable shared expert.
    UnfreezeShared,
    /// Each adaptive expert alone on the default model.
    SingleExpert,
}

impl AblationAxis {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "experts" => AblationAxis::Experts(vec![0, 1, 3, 5]),
            "moae-layers" => AblationAxis::MoaeLayers(vec![2, 4, 6]),
            "sdp-moae" => AblationAxis::SdpMoae,
            "prompts" => AblationAxis::Prompts(vec![
                PromptStrategy::Sdp,
                PromptStrategy::General,
                PromptStrategy::Quality,
                PromptStrategy::Naive,
            ]),
            "sigma" => AblationAxis::Sigma,
            "unfreeze-shared" => AblationAxis::UnfreezeShared,
            "single-expert" => AblationAxis::SingleExpert,
            other => {
                return Err(GammaError::Config(format!(
                    "unknown ablation axis `{other}` (experts, moae-layers, sdp-moae, prompts, sigma, unfreeze-shared, single-expert)"
                )))
            }
        })
    }

    pub fn variants(&self, layers: usize) -> Result<Vec<Variant>> {
        let v = match self {
            AblationAxis::Experts(ns) => ns
                .iter()
                .map(|&n| Variant {
                    experts: Some(n),
                    ..Variant::named(format!("experts={n}"))
                })
                .collect(),
            AblationAxis::MoaeLayers(ks) => {
                if let Some(k) = ks.iter().find(|&&k| k > layers) {
                    return Err(GammaError::Config(format!("moae layer count {k} exceeds {layers} layers")));
                }
                ks.iter()
                    .map(|&k| Variant {
                        moae_layers: Some(k),
                        ..Variant::named(format!("moae-layers={k}"))
                    })
                    .collect()
            }
            AblationAxis::SdpMoae => [(false, false), (true, false), (false, true), (true, true)]
                .into_iter()
                .map(|(sdp, moae)| Variant {
                    experts: (!moae).then_some(0),
                    prompt_strategy: Some(if sdp { PromptStrategy::Sdp } else { PromptStrategy::Naive }),
                    ..Variant::named(format!("sdp={}/moae={}", on(sdp), on(moae)))
                })
                .collect(),
            AblationAxis::Prompts(ps) => ps
                .iter()
                .map(|&p| Variant {
                    prompt_strategy: Some(p),
                    ..Variant::named(format!("prompt={p}"))
                })
                .collect(),
            AblationAxis::Sigma => vec![
                Variant::named("sigma=learned"),
                Variant {
                    fixed_sigma: Some(1.0),
                    ..Variant::named("sigma=fixed-1")
                },
            ],
            AblationAxis::UnfreezeShared => vec![
                Variant::named("shared=frozen"),
                Variant {
                    unfreeze_shared: true,
                    ..Variant::named("shared=trainable")
                },
            ],
            AblationAxis::SingleExpert => vec![Variant::named("default")],
        };
        Ok(v)
    }
}

fn on(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub report: MetricsReport,
}

/// Runs every axis on one suite and collects one row per configuration;
/// single-expert axes add one row per forced expert.
pub fn ablation_suite(cfg: &ExperimentConfig, axes: &[AblationAxis], seed: u64) -> Result<(Vec<AblationRow>, Vec<VariantOutcome>)> {
    let datasets = synthesize_biased_suite(&cfg.suite, seed)?;
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    let mut backbones = Backbones::default();
    for axis in axes {
        let single = matches!(axis, AblationAxis::SingleExpert);
        for v in axis.variants(cfg.model.layers)? {
            let out = run_variant(&datasets, cfg, &v, seed, single, &mut backbones)?;
            rows.push(AblationRow {
                config: v.name.clone(),
                report: out.report.clone(),
            });
            if single {
                let n = out.single_expert.first().map_or(0, Vec::len);
                for e in 0..n {
                    let runs = out.single_expert.iter().map(|per_run| per_run[e].clone()).collect();
                    rows.push(AblationRow {
                        config: format!("{}/expert{e}", v.name),
                        report: MetricsReport::from_runs(runs)?,
                    });
                }
            }
            outcomes.push(out);
        }
    }
    Ok((rows, outcomes))
}

/// Tab-separated comparison: one line per configuration, median SRCC and
/// PLCC per dataset, then their means.
pub fn comparison_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("config");
    if let Some(first) = rows.first() {
        for d in &first.report.median {
            let _ = write!(s, "\t{0}.srcc\t{0}.plcc", d.dataset);
        }
    }
    s.push_str("\tmean.srcc\tmean.plcc\n");
    for r in rows {
        s.push_str(&r.config);
        for d in &r.report.median {
            let _ = write!(s, "\t{:.4}\t{:.4}", d.srcc, d.plcc);
        }
        let _ = writeln!(s, "\t{:.4}\t{:.4}", r.report.mean_srcc, r.report.mean_plcc);
    }
    s
}
