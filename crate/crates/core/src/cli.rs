//! Command-line surface: experiment configs, subcommands and exit codes.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{concentration_curve, gte_alignment, SpectrumReport};
use crate::datagen::{
    import_raw_images, load_tds, sample_task_supports, sample_world, save_tds, Dataset, RawLayout, SyntheticWorld,
    WorldConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, eval_probe, knn_classify, train_probe, Metric, ProbeConfig};
use crate::exec::Exec;
use crate::models::{read_checkpoint, write_checkpoint, ModelState};
use crate::trainer::{train, TrainConfig, TrainData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSupportConfig {
    pub count: usize,
    pub min_size: usize,
    pub max_size: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub world: WorldConfig,
    #[serde(default)]
    pub world_seed: u64,
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_sample_seed")]
    pub sample_seed: u64,
    /// Per-batch shared supports; views otherwise share the subject set.
    #[serde(default)]
    pub tasks: Option<TaskSupportConfig>,
}

fn default_n_test() -> usize {
    1000
}
fn default_sample_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Tds { path: PathBuf },
    RawImages { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub data: DataSource,
    pub train: TrainConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        match &self.data {
            DataSource::Tds { path } | DataSource::RawImages { path } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("dataset {} does not exist", path.display())));
                }
            }
            DataSource::Synthetic(s) => {
                if s.n_train < self.train.batch_size {
                    return Err(Error::Config("n_train must be ≥ batch_size".into()));
                }
            }
        }
        Ok(())
    }

    pub fn synthetic(&self) -> Result<&SyntheticSource> {
        match &self.data {
            DataSource::Synthetic(s) => Ok(s),
            _ => Err(Error::Config("this command needs a synthetic data source".into())),
        }
    }
}

/// A materialized synthetic source: world, training latents and supports.
pub struct SyntheticSetup {
    pub world: SyntheticWorld,
    pub train: Dataset,
    pub supports: Option<Vec<Vec<usize>>>,
}

impl SyntheticSource {
    pub fn build(&self) -> Result<SyntheticSetup> {
        let world = sample_world(&self.world, self.world_seed)?;
        let train = world.sample_dataset(self.n_train, self.sample_seed)?;
        let supports = match &self.tasks {
            Some(t) => Some(sample_task_supports(world.latent_dim(), t.count, t.min_size, t.max_size, t.seed)?),
            None => None,
        };
        Ok(SyntheticSetup { world, train, supports })
    }

    /// Held-out samples from a stream disjoint from the training draw.
    pub fn test_set(&self, world: &SyntheticWorld) -> Result<Dataset> {
        world.sample_dataset(self.n_test, self.sample_seed.wrapping_add(0x5eed_0000))
    }
}

#[derive(Parser, Debug)]
#[command(name = "sparsehead", version, about = "Contrastive learning with sparse projection heads")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes model.sphd, metrics.jsonl and spectrum.csv.
    Train,
    /// Covariance spectra of a checkpoint on a TDS dataset.
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV path; defaults to <out>/spectrum.csv.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Linear-probe and kNN accuracy of a checkpoint's representations.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, value_enum, default_value_t = MetricArg::Cosine)]
        metric: MetricArg,
        #[arg(long)]
        standardize: bool,
    },
    /// MCC between a checkpoint's representations and the world's latents.
    Align {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Mean min-max distance ratio of Gaussian points per dimension.
    Concentration {
        #[arg(long, value_delimiter = ',', default_values_t = vec![16, 64, 256, 1024])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Sample a synthetic world's train/test sets to TDS files.
    Synth,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum MetricArg {
    Cosine,
    Euclidean,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::Euclidean => Metric::Euclidean,
        }
    }
}

/// Exit code for an error: 2 for usage, config and input-file problems, 3 for
/// failures during computation.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Spec(_)
        | Error::Parameter(_)
        | Error::Format(_)
        | Error::Json(_)
        | Error::Io(_)
        | Error::Dimension(_)
        | Error::Kind(_)
        | Error::Unsupported(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

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
    let mut stdout = std::io::stdout().lock();
    match dispatch(&cli, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch<W: Write>(cli: &Cli, out: &mut W) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train => cmd_train(g),
        Command::Spectrum { checkpoint, data, csv } => {
            let csv = match (csv, &g.out) {
                (Some(p), _) => p.clone(),
                (None, Some(dir)) => dir.join("spectrum.csv"),
                (None, None) => return Err(Error::Config("spectrum needs --csv or --out".into())),
            };
            cmd_spectrum(checkpoint, data, &csv)
        }
        Command::Eval { checkpoint, train, test, k, metric, standardize } => {
            let probe = ProbeConfig { standardize: *standardize, seed: g.seed.unwrap_or(0), ..ProbeConfig::default() };
            let res = cmd_eval(checkpoint, train, test, *k, (*metric).into(), &probe)?;
            writeln!(out, "{}", serde_json::to_string(&res)?)?;
            Ok(())
        }
        Command::Align { checkpoint } => {
            let cfg = require_config(g)?;
            let res = cmd_align(checkpoint, &cfg, g.seed)?;
            writeln!(out, "{}", serde_json::to_string(&res)?)?;
            Ok(())
        }
        Command::Concentration { dims, n, trials } => {
            let csv = cmd_concentration(dims, *n, *trials, g.seed.unwrap_or(0))?;
            match &g.out {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    fs::write(dir.join("concentration.csv"), &csv)?;
                }
                None => out.write_all(csv.as_bytes())?,
            }
            Ok(())
        }
        Command::Synth => {
            let cfg = require_config(g)?;
            let dir = g.out.clone().or_else(|| cfg.out_dir.clone()).ok_or_else(|| Error::Config("synth needs --out".into()))?;
            cmd_synth(&cfg, g.seed, &dir)
        }
    }
}

fn require_config(g: &Global) -> Result<ExperimentConfig> {
    let path = g.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    ExperimentConfig::load(path)
}

fn load_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Tds { path } => load_tds(path),
        DataSource::RawImages { path } => import_raw_images(path, RawLayout::default()),
        DataSource::Synthetic(_) => unreachable!("synthetic sources are built, not loaded"),
    }
}

pub fn cmd_train(g: &Global) -> Result<()> {
    let mut cfg = require_config(g)?;
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let dir = g
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("train needs --out or out_dir".into()))?;
    fs::create_dir_all(&dir)?;

    let anchors = 2 * cfg.train.batch_size;
    let result = match &cfg.data {
        DataSource::Synthetic(s) => {
            let setup = s.build()?;
            let latents = setup.train.latents.as_ref().expect("synthetic data has latents");
            let data = TrainData::Synthetic { world: &setup.world, latents, supports: setup.supports.as_deref() };
            train(&cfg.train, data).map(|(m, r)| (m, r, data.observations(cfg.train.diag_samples)))
        }
        other => {
            let ds = load_dataset(other)?;
            let data = TrainData::Features { x: &ds.features, layout: ds.layout };
            train(&cfg.train, data).map(|(m, r)| (m, r, data.observations(cfg.train.diag_samples)))
        }
    };
    let (model, record, diag_x) = match result {
        Ok(v) => v,
        Err(Error::Divergence { step, reason, record }) => {
            record.write_jsonl(BufWriter::new(File::create(dir.join("metrics.jsonl"))?), anchors)?;
            return Err(Error::Divergence { step, reason, record });
        }
        Err(e) => return Err(e),
    };
    write_checkpoint(&model, BufWriter::new(File::create(dir.join("model.sphd"))?))?;
    record.write_jsonl(BufWriter::new(File::create(dir.join("metrics.jsonl"))?), anchors)?;
    let diag_x = diag_x?;
    let r = model.encode(&diag_x)?;
    let z = model.project(&r)?;
    SpectrumReport::compute(&r, &z)?.write_csv(BufWriter::new(File::create(dir.join("spectrum.csv"))?))?;
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelState> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn check_input_dim(model: &ModelState, ds: &Dataset) -> Result<()> {
    if ds.dim() != model.encoder_spec.input_dim {
        return Err(Error::Dimension(format!(
            "checkpoint expects {}-dim inputs, dataset has {}",
            model.encoder_spec.input_dim,
            ds.dim()
        )));
    }
    Ok(())
}

pub fn cmd_spectrum(checkpoint: &Path, data: &Path, csv: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let ds = load_tds(data)?;
    check_input_dim(&model, &ds)?;
    let r = model.encode(&ds.features)?;
    let z = model.project(&r)?;
    let report = SpectrumReport::compute(&r, &z)?;
    if let Some(parent) = csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    report.write_csv(BufWriter::new(File::create(csv)?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub linear_acc: f64,
    pub knn_acc: f64,
}

pub fn cmd_eval(
    checkpoint: &Path,
    train_path: &Path,
    test_path: &Path,
    k: usize,
    metric: Metric,
    probe: &ProbeConfig,
) -> Result<EvalResult> {
    let model = load_model(checkpoint)?;
    let tr = load_tds(train_path)?;
    let te = load_tds(test_path)?;
    check_input_dim(&model, &tr)?;
    check_input_dim(&model, &te)?;
    let (Some(ytr), Some(yte)) = (&tr.labels, &te.labels) else {
        return Err(Error::Config("eval needs labeled train and test sets".into()));
    };
    let classes = tr.n_classes.max(te.n_classes);
    let rtr = model.encode(&tr.features)?;
    let rte = model.encode(&te.features)?;
    let p = train_probe(&rtr, ytr, classes, probe)?;
    let linear_acc = eval_probe(&p, &rte, yte)?;
    let pred = knn_classify(&rtr, ytr, &rte, k, metric, Exec::default())?;
    Ok(EvalResult { linear_acc, knn_acc: accuracy(&pred, yte) })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignResult {
    pub mcc: f64,
    pub assignment: Vec<(usize, usize)>,
    pub matched: Vec<f64>,
    pub scale: Vec<f64>,
    pub zero_variance_learned: Vec<usize>,
    pub samples: usize,
}

/// Representations of fresh world samples against their latents. `seed`
/// overrides the sample seed of the held-out draw.
pub fn cmd_align(checkpoint: &Path, cfg: &ExperimentConfig, seed: Option<u64>) -> Result<AlignResult> {
    let model = load_model(checkpoint)?;
    let mut src = cfg.synthetic()?.clone();
    if let Some(s) = seed {
        src.sample_seed = s;
    }
    let world = sample_world(&src.world, src.world_seed)?;
    if world.obs_dim() != model.encoder_spec.input_dim {
        return Err(Error::Dimension("checkpoint input dim does not match the world".into()));
    }
    let test = src.test_set(&world)?;
    let r = model.encode(&test.features)?;
    let rep = gte_alignment(&r, test.latents.as_ref().expect("synthetic latents"))?;
    Ok(AlignResult {
        mcc: rep.mcc,
        assignment: rep.assignment,
        matched: rep.matched,
        scale: rep.scale,
        zero_variance_learned: rep.zero_variance_learned,
        samples: test.len(),
    })
}

/// `d,mean_M` rows.
pub fn cmd_concentration(dims: &[usize], n: usize, trials: usize, seed: u64) -> Result<String> {
    let curve = concentration_curve(dims, n, trials, seed, Exec::default())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["d", "mean_M"]).map_err(csv_err)?;
    for p in &curve {
        w.write_record([p.dim.to_string(), p.mean.to_string()]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Writes `train.tds` and `test.tds` (observations, plus labels when the
/// world has classes). `seed` overrides the sample seed.
pub fn cmd_synth(cfg: &ExperimentConfig, seed: Option<u64>, dir: &Path) -> Result<()> {
    let mut src = cfg.synthetic()?.clone();
    if let Some(s) = seed {
        src.sample_seed = s;
    }
    let setup = src.build()?;
    let test = src.test_set(&setup.world)?;
    fs::create_dir_all(dir)?;
    let strip = |mut d: Dataset| {
        d.latents = None;
        d
    };
    save_tds(&strip(setup.train), &dir.join("train.tds"))?;
    save_tds(&strip(test), &dir.join("test.tds"))
}
