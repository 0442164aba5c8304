//! `bioz` command line: run configuration, subcommands and the run manifest.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::afua::{load_model, save_model, IntegrationConfig, NetworkParams, MODEL_HEADER};
use crate::analog::{hardware_budget, BudgetReport, HardwareBudget};
use crate::datapipe::{
    assemble_split, load_dataset, make_splits, normalize, read_manifest, save_dataset, write_manifest, DatasetSplit,
    InputSequence, SplitKind,
};
use crate::error::Error;
use crate::fem::{load_frames, reference_frame, save_frames, simulate_frame, ForwardConfig, Frame, DEFAULT_SALINE_SIGMA};
use crate::geometry::{Geometry, GeometryConfig};
use crate::phantom::{generate_phantom_set, save_conductivity, write_metadata_csv, Label, RbfNoiseConfig, TissueModel};
use crate::quantizer::{
    evaluate_quantized, load_qmodel, quantize, save_qmodel, sweep, write_sweep_csv, QuantizedParams, SweepRow,
    QMODEL_HEADER,
};
use crate::rng::derive_seed;
use crate::trainer::{evaluate, train, write_confusion_csv, write_curve_csv, Evaluation, TrainConfig, TrainReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "MANIFEST.sha256";
pub const GEOMETRY_FILE: &str = "geometry.txt";
pub const PHANTOMS_FILE: &str = "phantoms.csv";
pub const CONDUCTIVITY_DIR: &str = "conductivity";
pub const REFERENCE_FILE: &str = "reference.frame";
pub const FRAMES_FILE: &str = "frames.bin";
pub const DATASET_FILE: &str = "dataset.bzds";
pub const SPLITS_FILE: &str = "splits.csv";
pub const MODEL_FILE: &str = "model.afua";
pub const CURVE_FILE: &str = "training_curve.csv";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const FP_CONFUSION_FILE: &str = "confusion_fp.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const EVAL_CONFUSION_FILE: &str = "confusion_eval.csv";
pub const EVAL_REPORT_FILE: &str = "eval.json";

pub fn qmodel_file(bits: u32) -> String {
    format!("model_{bits}bit.afuaq")
}

/// A failed stage with the exit code its error class maps to.
#[derive(Debug)]
pub struct CliError {
    pub stage: &'static str,
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) | Error::Geometry(_) => EXIT_USAGE,
        Error::Mesh(_) | Error::Singular(_) | Error::Numerical(_) | Error::Shape { .. } => EXIT_NUMERICAL,
        Error::Format { .. } | Error::Io { .. } => EXIT_IO,
        Error::Phantom { source, .. } => exit_code(source),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T> Stage<T> for crate::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| CliError {
            stage,
            code: exit_code(&e),
            message: e.to_string(),
        })
    }
}

fn usage(stage: &'static str, message: impl Into<String>) -> CliError {
    CliError {
        stage,
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn io_err(stage: &'static str, path: &Path, e: std::io::Error) -> CliError {
    CliError {
        stage,
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshSection {
    /// Target edge length, mm.
    pub edge_length: f64,
    /// Prebuilt geometry file; overrides `geometry` and `edge_length`.
    pub file: Option<PathBuf>,
}

impl Default for MeshSection {
    fn default() -> Self {
        Self {
            edge_length: 0.3,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub model: String,
    pub count: usize,
    pub noise: RbfNoiseConfig,
    pub save_conductivity: bool,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            model: "prostate".into(),
            count: 1500,
            noise: RbfNoiseConfig::default(),
            save_conductivity: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Per-mV scale inside the tanh squashing.
    pub gain: f64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            gain: 0.02,
            split: [0.56, 0.19, 0.25],
        }
    }
}

/// Trainer settings; the shuffle and init seed come from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub hidden_units: usize,
    pub logit_bias_offset: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_epsilon: t.adam_epsilon,
            hidden_units: t.hidden_units,
            logit_bias_offset: t.logit_bias_offset,
        }
    }
}

impl TrainingSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_epsilon: self.adam_epsilon,
            hidden_units: self.hidden_units,
            logit_bias_offset: self.logit_bias_offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub bits: Vec<u32>,
    /// Width of the exported quantized model.
    pub deploy_bits: u32,
    /// `test` or `validation`.
    pub eval_split: String,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            bits: vec![3, 4, 5, 6, 7, 8],
            deploy_bits: 5,
            eval_split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Command-line `--out` wins; never written back to a run's config file.
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
    /// Worker cap; 0 uses every core.
    pub threads: usize,
    pub geometry: GeometryConfig,
    pub mesh: MeshSection,
    pub forward: ForwardConfig,
    /// Saline reference conductivity, mS/m.
    pub saline_sigma: Complex64,
    pub phantoms: PhantomSection,
    pub dataset: DatasetSection,
    /// Hold time per current pattern is `substeps × dt`.
    pub integration: IntegrationConfig,
    pub training: TrainingSection,
    pub quantization: QuantSection,
    pub hardware: HardwareBudget,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("run"),
            threads: 0,
            geometry: GeometryConfig::default(),
            mesh: MeshSection::default(),
            forward: ForwardConfig::default(),
            saline_sigma: Complex64::new(DEFAULT_SALINE_SIGMA, 0.0),
            phantoms: PhantomSection::default(),
            dataset: DatasetSection::default(),
            integration: IntegrationConfig {
                substeps: 10,
                dt: 0.01,
                ..IntegrationConfig::default()
            },
            training: TrainingSection::default(),
            quantization: QuantSection::default(),
            hardware: HardwareBudget::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> crate::Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }

    pub fn train_config(&self) -> TrainConfig {
        self.training.to_config(derive_seed(self.seed, 2))
    }

    pub fn eval_split(&self) -> crate::Result<SplitKind> {
        match SplitKind::parse(&self.quantization.eval_split) {
            Some(k @ (SplitKind::Test | SplitKind::Validation)) => Ok(k),
            _ => Err(Error::invalid(format!(
                "quantization.eval_split must be test or validation, got `{}`",
                self.quantization.eval_split
            ))),
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.phantoms.count == 0 {
            return Err(Error::invalid("phantoms.count must be at least 1"));
        }
        TissueModel::by_name(&self.phantoms.model)?.validate()?;
        self.phantoms.noise.validate()?;
        if !(self.mesh.edge_length > 0.0 && self.mesh.edge_length.is_finite()) {
            return Err(Error::invalid("mesh.edge_length must be positive"));
        }
        if let Some(f) = &self.mesh.file {
            if !f.is_file() {
                return Err(Error::invalid(format!("mesh.file {} does not exist", f.display())));
            }
        }
        if !(self.saline_sigma.re > 0.0) {
            return Err(Error::invalid("saline_sigma must have a positive real part"));
        }
        if !(self.dataset.gain > 0.0 && self.dataset.gain.is_finite()) {
            return Err(Error::invalid("dataset.gain must be positive"));
        }
        crate::datapipe::split_counts(self.phantoms.count, self.dataset.split)?;
        self.integration.validate(crate::afua::DEFAULT_TAU_H)?;
        self.train_config().validate()?;
        if self.quantization.bits.is_empty() {
            return Err(Error::invalid("quantization.bits must not be empty"));
        }
        for &b in self.quantization.bits.iter().chain([&self.quantization.deploy_bits]) {
            quantize(&NetworkParams::zeros(1, 1), b)?;
        }
        self.eval_split()?;
        self.hardware.validate()
    }
}

#[derive(Debug, Parser)]
#[command(name = "bioz", version, about = "Bioimpedance phantom simulation and AFUA tissue classification")]
pub struct Cli {
    /// Run configuration (TOML); defaults to `<out>/config.toml` when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Prebuilt geometry file.
    #[arg(long, global = true)]
    pub geometry: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Phantoms, frames, reference frame and the normalized dataset.
    Generate {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Full-precision training on the generated dataset.
    Train,
    /// Bit-width sweep and the deployable quantized model.
    Quantize {
        #[arg(long, value_delimiter = ',')]
        bits: Option<Vec<u32>>,
    },
    /// Accuracy and confusion matrix of a model on a dataset split or a frames file.
    Eval {
        /// Full-precision or quantized model file.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Frames file to classify instead of the run's evaluation split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Label table for `--data`: CSV with `label` and `id` or `index` columns.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Reference frame for `--data`; defaults to the run's reference.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
    /// Chip area and power estimate.
    Budget {
        #[arg(long)]
        json: bool,
    },
    /// generate, train, quantize and eval in one go.
    Pipeline {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Dataset preprocessing.
    Datapipe {
        #[command(subcommand)]
        command: DatapipeCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatapipeCommand {
    /// Frames file to normalized dataset file.
    Normalize {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        gain: f64,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let explicit = cli.config.clone();
    let implicit = cli.out.as_ref().map(|o| o.join(CONFIG_FILE)).filter(|p| p.is_file());
    let mut cfg = match explicit.or(implicit) {
        Some(path) => RunConfig::load(&path).stage("config")?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(g) = &cli.geometry {
        cfg.mesh.file = Some(g.clone());
    }
    Ok(cfg)
}

fn set_threads(n: usize) {
    if n > 0 {
        // A second call in one process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}


fn apply_overrides(cfg: &mut RunConfig, model: Option<String>, n: Option<usize>) {
    if let Some(m) = model {
        cfg.phantoms.model = m;
    }
    if let Some(n) = n {
        cfg.phantoms.count = n;
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let mut cfg = resolve_config(&cli)?;
    set_threads(cfg.threads);
    match cli.command {
        Command::Generate { model, n } => {
            apply_overrides(&mut cfg, model, n);
            cfg.validate().stage("config")?;
            cmd_generate(&cfg)?;
        }
        Command::Train => {
            cfg.validate().stage("config")?;
            cmd_train(&cfg)?;
        }
        Command::Quantize { bits } => {
            if let Some(b) = bits {
                cfg.quantization.bits = b;
            }
            cfg.validate().stage("config")?;
            cmd_quantize(&cfg)?;
        }
        Command::Eval {
            model,
            data,
            labels,
            reference,
        } => {
            cfg.validate().stage("config")?;
            let external = match (data, labels) {
                (Some(frames), Some(labels)) => Some(ExternalData {
                    frames,
                    labels,
                    reference,
                }),
                (None, None) if reference.is_none() => None,
                _ => return Err(usage("eval", "--data and --labels go together, and --ref needs --data")),
            };
            cmd_eval(&cfg, model.as_deref(), external.as_ref())?;
        }
        Command::Budget { json } => {
            let report = hardware_budget(&cfg.hardware).stage("budget")?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("budget serializes"));
            } else {
                print!("{}", report.table());
            }
        }
        Command::Pipeline { model, n } => {
            apply_overrides(&mut cfg, model, n);
            cfg.validate().stage("config")?;
            cmd_pipeline(&cfg)?;
        }
        Command::Datapipe {
            command:
                DatapipeCommand::Normalize {
                    frames,
                    reference,
                    gain,
                    labels,
                    output,
                },
        } => {
            if !(gain > 0.0 && gain.is_finite()) {
                return Err(usage("datapipe", format!("--gain must be positive, got {gain}")));
            }
            let labels = labels.ok_or_else(|| usage("datapipe", "--labels is required"))?;
            let seqs = normalize_external(&frames, &reference, &labels, gain, "datapipe")?;
            save_dataset(&output, &seqs).stage("datapipe")?;
            println!("normalized {} sequences into {}", seqs.len(), output.display());
        }
    }
    Ok(())
}

fn create_dir(stage: &'static str, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(stage, dir, e))
}

fn write_text(stage: &'static str, path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(stage, path, e))
}

fn write_json<T: Serialize>(stage: &'static str, path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(stage, path, &text)
}

fn build_geometry(cfg: &RunConfig) -> crate::Result<Geometry> {
    match &cfg.mesh.file {
        Some(path) => Geometry::load(path),
        None => Geometry::build(&cfg.geometry, cfg.mesh.edge_length),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub model: String,
    pub phantoms: usize,
    pub positives: usize,
    pub triangles: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Writes config, geometry, phantom table, conductivities, frames, the saline
/// reference, the normalized dataset and its split manifest.
pub fn cmd_generate(cfg: &RunConfig) -> CliResult<GenerateSummary> {
    let out = &cfg.out_dir;
    create_dir("generate", out)?;
    write_text("generate", &out.join(CONFIG_FILE), &cfg.to_toml())?;
    let geometry = build_geometry(cfg).stage("geometry")?;
    geometry.save(&out.join(GEOMETRY_FILE)).stage("geometry")?;
    let Geometry { layout, mesh } = &geometry;

    let model = TissueModel::by_name(&cfg.phantoms.model).stage("phantom")?;
    let phantoms =
        generate_phantom_set(mesh, layout, &model, &cfg.phantoms.noise, cfg.phantoms.count, cfg.seed).stage("phantom")?;
    write_metadata_csv(&out.join(PHANTOMS_FILE), &phantoms).stage("phantom")?;
    if cfg.phantoms.save_conductivity {
        let dir = out.join(CONDUCTIVITY_DIR);
        create_dir("phantom", &dir)?;
        phantoms
            .par_iter()
            .try_for_each(|p| save_conductivity(&dir.join(format!("{}.sigma", p.id())), &p.element_sigma))
            .stage("phantom")?;
    }

    let frames: Vec<Frame> = phantoms
        .par_iter()
        .map(|p| simulate_frame(p, mesh, layout, &cfg.forward))
        .collect::<crate::Result<_>>()
        .stage("forward")?;
    save_frames(&out.join(FRAMES_FILE), &frames).stage("forward")?;
    let reference = reference_frame(mesh, layout, cfg.saline_sigma, &cfg.forward, Some(&out.join(REFERENCE_FILE)))
        .stage("forward")?;

    let sequences: Vec<InputSequence> = frames
        .iter()
        .zip(&phantoms)
        .map(|(f, p)| normalize(f, &reference, cfg.dataset.gain, p.label))
        .collect::<crate::Result<_>>()
        .stage("datapipe")?;
    save_dataset(&out.join(DATASET_FILE), &sequences).stage("datapipe")?;
    let split = make_splits(sequences, cfg.dataset.split, cfg.split_seed()).stage("datapipe")?;
    write_manifest(&out.join(SPLITS_FILE), &split).stage("datapipe")?;

    let (train, validation, test) = split.counts();
    let positives = phantoms.iter().filter(|p| p.label == Label::Positive).count();
    let summary = GenerateSummary {
        model: model.name,
        phantoms: phantoms.len(),
        positives,
        triangles: mesh.n_triangles(),
        train,
        validation,
        test,
    };
    println!(
        "generated {} {} phantoms on {} triangles: {} positive ({:.1}%), {} negative",
        summary.phantoms,
        summary.model,
        summary.triangles,
        positives,
        100.0 * positives as f64 / summary.phantoms as f64,
        summary.phantoms - positives
    );
    println!("split train {train} / validation {validation} / test {test}");
    write_run_manifest(out).map_err(|e| io_err("generate", out, e))?;
    Ok(summary)
}

pub fn load_split(cfg: &RunConfig) -> crate::Result<DatasetSplit> {
    let out = &cfg.out_dir;
    let sequences = load_dataset(&out.join(DATASET_FILE))?;
    let manifest = read_manifest(&out.join(SPLITS_FILE))?;
    assemble_split(sequences, &manifest, cfg.split_seed())
}

fn eval_part<'a>(cfg: &RunConfig, split: &'a DatasetSplit) -> crate::Result<&'a [InputSequence]> {
    let kind = cfg.eval_split()?;
    let part = match kind {
        SplitKind::Validation => &split.validation,
        _ => &split.test,
    };
    if part.is_empty() {
        return Err(Error::invalid(format!("the {} split is empty", kind.as_str())));
    }
    Ok(part)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub final_train_acc: f64,
    pub eval_split: String,
    pub eval: Evaluation,
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<(TrainSummary, TrainReport)> {
    let out = &cfg.out_dir;
    let split = load_split(cfg).stage("train")?;
    let (params, report) = train(&split, &cfg.train_config(), &cfg.integration).stage("train")?;
    save_model(&out.join(MODEL_FILE), &params, &cfg.integration).stage("train")?;
    write_curve_csv(&out.join(CURVE_FILE), &report).stage("train")?;
    let part = eval_part(cfg, &split).stage("train")?;
    let eval = evaluate(&params, part, &cfg.integration).stage("train")?;
    write_confusion_csv(&out.join(FP_CONFUSION_FILE), &eval).stage("train")?;
    let summary = TrainSummary {
        config: report.config,
        best_epoch: report.best_epoch,
        best_val_acc: report.best().val_acc,
        final_train_acc: report.epochs.last().map_or(0.0, |m| m.train_acc),
        eval_split: cfg.quantization.eval_split.clone(),
        eval,
    };
    write_json("train", &out.join(TRAIN_REPORT_FILE), &summary)?;
    println!(
        "trained {} epochs in {:.1} s; best epoch {} (validation accuracy {:.4}); {} accuracy {:.4}",
        report.epochs.len(),
        report.wall_clock_secs,
        summary.best_epoch,
        summary.best_val_acc,
        summary.eval_split,
        eval.accuracy
    );
    write_run_manifest(out).map_err(|e| io_err("train", out, e))?;
    Ok((summary, report))
}

pub fn cmd_quantize(cfg: &RunConfig) -> CliResult<Vec<SweepRow>> {
    let out = &cfg.out_dir;
    let (params, icfg) = load_model(&out.join(MODEL_FILE)).stage("quantize")?;
    let split = load_split(cfg).stage("quantize")?;
    let part = eval_part(cfg, &split).stage("quantize")?;
    let rows = sweep(&params, part, &cfg.quantization.bits, &icfg).stage("quantize")?;
    write_sweep_csv(&out.join(SWEEP_FILE), &rows).stage("quantize")?;
    let q = quantize(&params, cfg.quantization.deploy_bits).stage("quantize")?;
    save_qmodel(&out.join(qmodel_file(q.bits)), &q, &icfg).stage("quantize")?;
    for r in &rows {
        println!("bits {:>2}  accuracy {:.4}", r.precision.to_string(), r.evaluation.accuracy);
    }
    write_run_manifest(out).map_err(|e| io_err("quantize", out, e))?;
    Ok(rows)
}

/// A frames file with its label table and optional reference frame.
#[derive(Debug, Clone)]
pub struct ExternalData {
    pub frames: PathBuf,
    pub labels: PathBuf,
    pub reference: Option<PathBuf>,
}

/// Either model format, detected from its first line.
pub enum LoadedModel {
    Full(NetworkParams),
    Quantized(QuantizedParams),
}

pub fn load_any_model(path: &Path) -> crate::Result<(LoadedModel, IntegrationConfig)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match text.lines().next() {
        Some(QMODEL_HEADER) => load_qmodel(path).map(|(q, c)| (LoadedModel::Quantized(q), c)),
        Some(MODEL_HEADER) => load_model(path).map(|(p, c)| (LoadedModel::Full(p), c)),
        _ => Err(Error::format(path, "not a model file")),
    }
}

/// Label table with a `label` column and either an `id` or an `index` column.
pub fn read_labels(path: &Path) -> crate::Result<Vec<(String, Label)>> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let headers = r.headers().map_err(err)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let label_col = col("label").ok_or_else(|| Error::format(path, "missing label column"))?;
    let (key_col, by_index) = match (col("id"), col("index")) {
        (Some(c), _) => (c, false),
        (None, Some(c)) => (c, true),
        _ => return Err(Error::format(path, "missing id or index column")),
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(err)?;
        let key = &rec[key_col];
        let id = if by_index {
            let i: usize = key.parse().map_err(|_| Error::format(path, format!("bad index `{key}`")))?;
            crate::phantom::phantom_id(i)
        } else {
            key.to_string()
        };
        let l: usize = rec[label_col].parse().map_err(|_| Error::format(path, format!("bad label for {id}")))?;
        out.push((id, Label::from_index(l).map_err(|e| Error::format(path, e.to_string()))?));
    }
    Ok(out)
}

fn normalize_external(
    frames: &Path,
    reference: &Path,
    labels: &Path,
    gain: f64,
    stage: &'static str,
) -> CliResult<Vec<InputSequence>> {
    let frames = load_frames(frames).stage(stage)?;
    let mut refs = load_frames(reference).stage(stage)?;
    if refs.len() != 1 {
        return Err(CliError {
            stage,
            code: EXIT_IO,
            message: format!("{} must hold exactly one frame", reference.display()),
        });
    }
    let reference = refs.remove(0);
    let labels: std::collections::HashMap<String, Label> = read_labels(labels).stage(stage)?.into_iter().collect();
    frames
        .iter()
        .map(|f| {
            let label = *labels
                .get(&f.phantom_id)
                .ok_or_else(|| Error::invalid(format!("no label for {}", f.phantom_id)))?;
            normalize(f, &reference, gain, label)
        })
        .collect::<crate::Result<_>>()
        .stage(stage)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub model: String,
    pub precision: String,
    pub data: String,
    pub n: usize,
    pub accuracy: f64,
    /// Rows are the true class, columns the prediction.
    pub confusion: [[usize; 2]; 2],
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn cmd_eval(cfg: &RunConfig, model: Option<&Path>, data: Option<&ExternalData>) -> CliResult<EvalSummary> {
    let out = &cfg.out_dir;
    let model_path = match model {
        Some(p) => p.to_path_buf(),
        None => {
            let q = out.join(qmodel_file(cfg.quantization.deploy_bits));
            if q.is_file() {
                q
            } else {
                out.join(MODEL_FILE)
            }
        }
    };
    let (loaded, icfg) = load_any_model(&model_path).stage("eval")?;
    let (sequences, data_name) = match data {
        Some(d) => {
            let reference = d.reference.clone().unwrap_or_else(|| out.join(REFERENCE_FILE));
            (normalize_external(&d.frames, &reference, &d.labels, cfg.dataset.gain, "eval")?, file_name(&d.frames))
        }
        None => {
            let split = load_split(cfg).stage("eval")?;
            let part = eval_part(cfg, &split).stage("eval")?.to_vec();
            (part, format!("{} split", cfg.quantization.eval_split))
        }
    };
    if sequences.is_empty() {
        return Err(usage("eval", "no sequences to evaluate"));
    }
    let (eval, precision) = match &loaded {
        LoadedModel::Full(p) => (evaluate(p, &sequences, &icfg).stage("eval")?, "FP".to_string()),
        LoadedModel::Quantized(q) => (evaluate_quantized(q, &sequences, &icfg).stage("eval")?, q.bits.to_string()),
    };
    create_dir("eval", out)?;
    write_confusion_csv(&out.join(EVAL_CONFUSION_FILE), &eval).stage("eval")?;
    let summary = EvalSummary {
        model: file_name(&model_path),
        precision,
        data: data_name,
        n: eval.n(),
        accuracy: eval.accuracy,
        confusion: eval.confusion,
    };
    write_json("eval", &out.join(EVAL_REPORT_FILE), &summary)?;
    println!(
        "{} ({} bits) on {}: accuracy {:.4} over {} sequences",
        summary.model, summary.precision, summary.data, summary.accuracy, summary.n
    );
    println!("confusion [true][predicted]: {:?}", summary.confusion);
    write_run_manifest(out).map_err(|e| io_err("eval", out, e))?;
    Ok(summary)
}

pub const BUDGET_FILE: &str = "budget.json";

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub generate: GenerateSummary,
    pub train: TrainSummary,
    pub report: TrainReport,
    pub sweep: Vec<SweepRow>,
    pub eval: EvalSummary,
    pub budget: BudgetReport,
}

pub fn cmd_pipeline(cfg: &RunConfig) -> CliResult<PipelineSummary> {
    let generate = cmd_generate(cfg)?;
    let (train, report) = cmd_train(cfg)?;
    let sweep = cmd_quantize(cfg)?;
    let eval = cmd_eval(cfg, None, None)?;
    let budget = hardware_budget(&cfg.hardware).stage("budget")?;
    write_json("budget", &cfg.out_dir.join(BUDGET_FILE), &budget)?;
    print!("{}", budget.table());
    write_run_manifest(&cfg.out_dir).map_err(|e| io_err("pipeline", &cfg.out_dir, e))?;
    Ok(PipelineSummary {
        generate,
        train,
        report,
        sweep,
        eval,
        budget,
    })
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if key != MANIFEST_FILE {
                out.push((key, path));
            }
        }
    }
    Ok(())
}

/// `sha256  relative/path` per file, sorted by path.
pub fn manifest_text(dir: &Path) -> std::io::Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let hashes: Vec<String> = files
        .par_iter()
        .map(|(_, p)| fs::read(p).map(|b| hex::encode(Sha256::digest(&b))))
        .collect::<std::io::Result<_>>()?;
    Ok(files
        .iter()
        .zip(hashes)
        .map(|((k, _), h)| format!("{h}  {k}\n"))
        .collect())
}

pub fn write_run_manifest(dir: &Path) -> std::io::Result<String> {
    let text = manifest_text(dir)?;
    fs::write(dir.join(MANIFEST_FILE), &text)?;
    Ok(text)
}
