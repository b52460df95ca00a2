//! Command-line front end. Every command reads one TOML run configuration,
//! applies flag overrides and writes its artifacts under the output
//! directory with fixed file names.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{synthesize_biased_suite, write_scores_csv, Dataset, ScoreRecord, ScoreTable, SuiteConfig, SuiteManifest};
use crate::diagnostics::gradcheck_battery;
use crate::error::{GammaError, Result};
use crate::eval::{EvalConfig, MetricsReport};
use crate::experiment::{
    ablation_suite, assess, comparison_table, run_plan, run_train_config, train_once, AblationAxis,
    AblationRow, Backbones, ExperimentConfig, Variant,
};
use crate::model::{build_model, EncoderConfig};
use crate::nn::{read_checkpoint, write_checkpoint};
use crate::prompts::{prompt_table, PromptStrategy};
use crate::train::{PretrainConfig, TrainConfig};

pub const METRICS_FILE: &str = "metrics.json";
pub const SIGMA_FILE: &str = "sigma.csv";
pub const ACTIVATIONS_FILE: &str = "activations.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_LOG_FILE: &str = "train.csv";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TSV: &str = "ablation.tsv";

/// Where the datasets come from: a suite synthesized from the run seed, or
/// the suite recorded in an earlier `synth` manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub suite: SuiteConfig,
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub axes: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            axes: vec!["sdp-moae".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Training runs per ablation configuration.
    pub runs: usize,
    pub model: EncoderConfig,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            runs: e.runs,
            model: e.model,
            training: e.training,
            evaluation: e.evaluation,
            pretrain: e.pretrain,
            data: DataConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GammaError::io(format!("reading {}", path.display()), e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| GammaError::Config(format!("{}: {}", path.display(), e.message())))?;
        if let Some(m) = &cfg.data.manifest {
            // relative to the config file
            let resolved = path.parent().map_or_else(|| m.clone(), |dir| dir.join(m));
            if !resolved.exists() {
                return Err(GammaError::Config(format!("manifest {} does not exist", resolved.display())));
            }
            return Ok(RunConfig {
                data: DataConfig {
                    manifest: Some(resolved),
                    ..cfg.data
                },
                ..cfg
            });
        }
        Ok(cfg)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            training: self.training.clone(),
            evaluation: self.evaluation.clone(),
            suite: self.data.suite.clone(),
            pretrain: self.pretrain.clone(),
            runs: self.runs,
        }
    }

    /// Suite manifest of this run, read from disk when one is configured.
    pub fn manifest(&self) -> Result<SuiteManifest> {
        match &self.data.manifest {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| GammaError::io(format!("reading {}", p.display()), e))?;
                SuiteManifest::from_json(&text)
            }
            None => Ok(SuiteManifest {
                seed: self.seed,
                suite: self.data.suite.clone(),
            }),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gamma", version, about = "Mixed-dataset image assessment with expert mixtures and scene prompts")]
pub struct Cli {
    #[command(flatten)]
    pub flags: Flags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Flags {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Evaluation worker threads.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,
    #[arg(long, global = true, value_parser = ["sdp", "naive", "general", "quality"])]
    pub prompt_strategy: Option<String>,
    /// Adaptive experts per MoAE layer; 0 trains the plain baseline.
    #[arg(long, global = true)]
    pub experts: Option<usize>,
    #[arg(long, global = true)]
    pub moae_layers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the biased suite: score files and manifest.json.
    Synth,
    /// Mixed training: checkpoint.bin, sigma.csv, train.csv, manifest.json.
    Train,
    /// Evaluate checkpoint.bin: metrics.json, activations.csv.
    Eval {
        /// Checkpoint to load instead of <out>/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run ablation axes: ablation.json, ablation.tsv.
    Ablate {
        /// Axis names; overrides `ablation.axes` in the config.
        #[arg(long = "axis")]
        axes: Vec<String>,
    },
    /// Finite-difference check of every layer type and the full pipeline.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        inputs: usize,
    },
    /// Print the scene prompt table.
    Prompts,
    /// Comparison table from metrics.json or ablation.json files.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

impl Flags {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out.clone_from(o);
        }
        if let Some(w) = self.workers {
            cfg.evaluation.workers = w as usize;
        }
        if let Some(p) = &self.prompt_strategy {
            cfg.training.prompt_strategy = p.parse::<PromptStrategy>()?;
        }
        cfg.model = Variant {
            experts: self.experts,
            moae_layers: self.moae_layers,
            ..Variant::default()
        }
        .model_config(&cfg.model);
        cfg.model.validate()?;
        cfg.training.validate()?;
        cfg.evaluation.validate(cfg.model.patches())?;
        Ok(cfg)
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prompts => {
            print!("{}", prompt_table());
            Ok(())
        }
        Command::Gradcheck { inputs } => gradcheck(*inputs, cli.flags.seed.unwrap_or(0)),
        Command::Report { files } => report(files),
        Command::Synth => synth(&cli.flags.resolve()?),
        Command::Train => train(&cli.flags.resolve()?),
        Command::Eval { checkpoint } => eval(&cli.flags.resolve()?, checkpoint.as_deref()),
        Command::Ablate { axes } => ablate(&cli.flags.resolve()?, axes),
    }
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GammaError::io(format!("creating {}", dir.display()), e))?;
    let p = dir.join(name);
    fs::write(&p, contents).map_err(|e| GammaError::io(format!("writing {}", p.display()), e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| GammaError::io(format!("reading {}", path.display()), e))
}

fn datasets(cfg: &RunConfig) -> Result<(SuiteManifest, Vec<Dataset>)> {
    let m = cfg.manifest()?;
    let ds = synthesize_biased_suite(&m.suite, m.seed)?;
    Ok((m, ds))
}

fn gradcheck(inputs: usize, seed: u64) -> Result<()> {
    let checks = gradcheck_battery(inputs, seed)?;
    let mut ok = true;
    for c in &checks {
        println!(
            "{:<18} max_rel_error {:.3e}  tol {:.0e}  coords {}  {}",
            c.name,
            c.report.max_rel_error,
            c.report.tol,
            c.report.coordinates,
            if c.passed() { "ok" } else { "FAILED" }
        );
        ok &= c.passed();
    }
    if ok {
        Ok(())
    } else {
        Err(GammaError::NumericDomain("gradient check failed".into()))
    }
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let (m, ds) = datasets(cfg)?;
    for d in &ds {
        let table = ScoreTable {
            spec: d.spec.clone(),
            records: d
                .samples
                .iter()
                .map(|s| ScoreRecord {
                    sample_id: s.id.clone(),
                    raw_mos: s.raw_mos,
                    norm_mos: s.norm_mos,
                })
                .collect(),
        };
        fs::create_dir_all(&cfg.out).map_err(|e| GammaError::io(format!("creating {}", cfg.out.display()), e))?;
        write_scores_csv(cfg.out.join(format!("{}.csv", d.spec.name)), &table)?;
    }
    write(&cfg.out, MANIFEST_FILE, m.to_json())?;
    println!("{} datasets written to {}", ds.len(), cfg.out.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let (m, ds) = datasets(cfg)?;
    let exp = cfg.experiment();
    let variant = Variant::default();
    let (model, _, report) = train_once(&ds, &exp, &variant, cfg.seed, &mut Backbones::default())?;
    let mut log = String::from("epoch,mean_loss\n");
    for e in &report.epochs {
        log.push_str(&format!("{},{}\n", e.epoch, e.mean_loss));
    }
    write(&cfg.out, CHECKPOINT_FILE, write_checkpoint(&model.store))?;
    write(&cfg.out, SIGMA_FILE, report.sigma.to_csv())?;
    write(&cfg.out, TRAIN_LOG_FILE, log)?;
    write(&cfg.out, MANIFEST_FILE, m.to_json())?;
    println!("{} steps, final epoch loss {:.6}", report.steps, report.epochs.last().map_or(f64::NAN, |e| e.mean_loss));
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let (_, ds) = datasets(cfg)?;
    let exp = cfg.experiment();
    let path = checkpoint.map_or_else(|| cfg.out.join(CHECKPOINT_FILE), Path::to_path_buf);
    let mut model = build_model(&exp.model, cfg.seed)?;
    model.store.load_records(&read_checkpoint(&read(&path)?)?)?;
    let plan = run_plan(&ds, cfg.seed)?;
    let strategy = run_train_config(&exp, &Variant::default(), cfg.seed).prompt_strategy;
    let (metrics, profile) = assess(&model, &ds, &plan, strategy, &exp, cfg.seed)?;
    let report = MetricsReport::from_runs(vec![metrics])?;
    write(&cfg.out, METRICS_FILE, report.to_json())?;
    if let Some(p) = profile {
        write(&cfg.out, ACTIVATIONS_FILE, p.to_csv())?;
    }
    for d in &report.median {
        println!("{:<16} srcc {:.4}  plcc {:.4}  n {}", d.dataset, d.srcc, d.plcc, d.n);
    }
    println!("mean srcc {:.4}  plcc {:.4}", report.mean_srcc, report.mean_plcc);
    Ok(())
}

fn ablate(cfg: &RunConfig, axes: &[String]) -> Result<()> {
    let names = if axes.is_empty() { &cfg.ablation.axes } else { axes };
    let axes = names.iter().map(|a| AblationAxis::parse(a)).collect::<Result<Vec<_>>>()?;
    let exp = cfg.experiment();
    let (rows, _) = ablation_suite(&exp, &axes, cfg.seed)?;
    let table = comparison_table(&rows);
    write(&cfg.out, ABLATION_JSON, serde_json::to_string_pretty(&rows).expect("rows serialize"))?;
    write(&cfg.out, ABLATION_TSV, &table)?;
    print!("{table}");
    Ok(())
}

fn report(files: &[PathBuf]) -> Result<()> {
    let mut rows = Vec::new();
    for f in files {
        let text = String::from_utf8(read(f)?).map_err(|_| GammaError::Input(format!("{} is not utf-8", f.display())))?;
        if let Ok(mut r) = serde_json::from_str::<Vec<AblationRow>>(&text) {
            rows.append(&mut r);
            continue;
        }
        let report: MetricsReport = serde_json::from_str(&text)
            .map_err(|e| GammaError::Input(format!("{}: neither a metrics report nor an ablation table: {e}", f.display())))?;
        let label = f
            .parent()
            .and_then(Path::file_name)
            .map_or_else(|| f.display().to_string(), |n| n.to_string_lossy().into_owned());
        rows.push(AblationRow { config: label, report });
    }
    print!("{}", comparison_table(&rows));
    Ok(())
}
