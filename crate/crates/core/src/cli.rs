//! Command-line front end: JSON experiment configs, the `run`, `sweep`,
//! `accountant`, `calibrate` and `select-topk` subcommands, and output files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::compression;
use crate::data::{self, synth, Dataset, PartitionMode};
use crate::error::{Error, Result};
use crate::federation::{self, FederatedData, Federation, FederationConfig, Sensitivity, Summary};
use crate::nn::{Activation, ArchSpec, Loss};
use crate::privacy::accountant;
use crate::seed;

/// Runs above this many estimated floating-point operations need `--full-scale`.
pub const DESK_SCALE_FLOPS: f64 = 2e11;

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const SWEEP_FILE: &str = "sweep.csv";

fn default_test_fraction() -> f64 {
    0.2
}
fn default_public_size() -> usize {
    10
}
fn default_separation() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Binary, sparse, imbalanced records.
    SyntheticImbalanced {
        samples: usize,
        features: usize,
        positive_rate: f64,
        #[serde(default = "default_separation")]
        separation: f64,
        /// Downsample the training split to a 1:1 class ratio.
        #[serde(default)]
        balance: bool,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default = "default_public_size")]
        public_size: usize,
    },
    SyntheticClusters {
        samples: usize,
        features: usize,
        classes: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default = "default_public_size")]
        public_size: usize,
    },
    /// IDX files such as Fashion-MNIST. The public batch comes from the
    /// `public_*` pair when given, otherwise from the test set.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        public_images: Option<PathBuf>,
        #[serde(default)]
        public_labels: Option<PathBuf>,
        #[serde(default = "default_public_size")]
        public_size: usize,
    },
}

fn default_hidden() -> Vec<usize> {
    vec![200, 200]
}
fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            activation: default_activation(),
        }
    }
}

/// The JSON file read by `run`, `sweep`, `calibrate` and `select-topk`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionMode,
    #[serde(default)]
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        if self.model.hidden.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        if let DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            public_images,
            public_labels,
            ..
        } = &self.dataset
        {
            if public_images.is_some() != public_labels.is_some() {
                return Err(Error::config("public_images and public_labels go together"));
            }
            let files = [train_images, train_labels, test_images, test_labels]
                .into_iter()
                .chain(public_images)
                .chain(public_labels);
            for f in files {
                if !f.is_file() {
                    return Err(Error::config(format!("no such file: {}", f.display())));
                }
            }
        }
        Ok(())
    }

    /// Sub-seeds for data preparation, kept apart from the per-round streams
    /// that also hang off the sampling seed.
    fn data_seed(&self, step: u64) -> u64 {
        seed::derive(self.federation.seeds.sampling, &[u64::MAX, step])
    }

    /// Loads or generates the data, splits and partitions it.
    pub fn build_data(&self) -> Result<FederatedData> {
        let (train, test, public_source, public_size) = match &self.dataset {
            DatasetConfig::SyntheticImbalanced {
                samples,
                features,
                positive_rate,
                separation,
                balance,
                test_fraction,
                public_size,
            } => {
                let d = synth::synth_imbalanced(*samples, *features, *positive_rate, *separation, self.data_seed(0))?;
                let (mut train, rest) = data::train_test_split(&d, 1.0 - test_fraction, self.data_seed(1))?;
                if *balance {
                    train = data::downsample(&train, self.data_seed(2))?;
                }
                let (test, public) = split_public(&rest, *public_size, self.data_seed(5))?;
                (train, test, public, *public_size)
            }
            DatasetConfig::SyntheticClusters {
                samples,
                features,
                classes,
                separation,
                test_fraction,
                public_size,
            } => {
                let d = synth::synth_clusters(*samples, *features, *classes, *separation, self.data_seed(0))?;
                let (train, rest) = data::train_test_split(&d, 1.0 - test_fraction, self.data_seed(1))?;
                // carve the public rows out of the held-out part so they are
                // disjoint from every client
                let (test, public) = split_public(&rest, *public_size, self.data_seed(2))?;
                (train, test, public, *public_size)
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                public_images,
                public_labels,
                public_size,
            } => {
                let train = data::load_idx(train_images, train_labels)?;
                let test = data::load_idx(test_images, test_labels)?;
                let public = match (public_images, public_labels) {
                    (Some(i), Some(l)) => data::load_idx(i, l)?,
                    _ => test.clone(),
                };
                (train, test, public, *public_size)
            }
        };
        let out_width = output_width(train.num_classes());
        let public = data::public_batch(&public_source, public_size, out_width, self.data_seed(3))?;
        let partition = data::partition(&train, self.federation.num_clients, self.partition, self.data_seed(4))?;
        Ok(FederatedData {
            train,
            partition,
            test,
            public,
        })
    }

    pub fn arch(&self, data: &FederatedData) -> Result<ArchSpec> {
        let classes = data.train.num_classes();
        let mut widths = vec![data.train.num_features()];
        widths.extend(&self.model.hidden);
        widths.push(output_width(classes));
        let loss = if classes == 2 {
            Loss::BinaryCrossEntropy
        } else {
            Loss::CrossEntropy
        };
        ArchSpec::mlp(&widths, self.model.activation, loss)
    }

    /// Rough cost of the training loop, used to gate full-scale runs.
    pub fn estimated_flops(&self, arch: &ArchSpec) -> f64 {
        let f = &self.federation;
        6.0 * arch.param_count() as f64
            * f.local.batch_size as f64
            * f.local.iterations as f64
            * f.cohort_size() as f64
            * f.rounds as f64
    }
}

fn output_width(classes: usize) -> usize {
    if classes == 2 {
        1
    } else {
        classes
    }
}

fn split_public(d: &Dataset, size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if size == 0 || size >= d.len() {
        return Err(Error::config(format!(
            "public batch of {size} does not fit in {} held-out rows",
            d.len()
        )));
    }
    let frac = 1.0 - size as f64 / d.len() as f64;
    data::train_test_split(d, frac, seed)
}

#[derive(Debug, Parser)]
#[command(name = "fltop", version, about = "Federated learning with Top-K compression and client-level DP")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write trace.csv, summary.json and resolved_config.json.
    Run(RunArgs),
    /// Run one experiment per compression ratio and write sweep.csv.
    Sweep(SweepArgs),
    /// Privacy bound of the subsampled Gaussian mechanism after some rounds.
    Accountant(AccountantArgs),
    /// Estimate the clipping bound S on the public batch.
    Calibrate(ConfigArgs),
    /// Write the Top-K index set selected on the public batch.
    SelectTopk(SelectArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment configuration (JSON).
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub config: PathBuf,
    /// Write outputs here instead of the config's output_dir.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Allow runs beyond desk scale.
    #[arg(long)]
    pub full_scale: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub config: PathBuf,
    /// Comma-separated compression ratios, e.g. 0.005,0.05,0.1.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub ratios: Vec<f64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub full_scale: bool,
}

#[derive(Debug, Args)]
pub struct AccountantArgs {
    #[arg(long)]
    pub sigma: f64,
    /// Client sampling fraction C.
    #[arg(long)]
    pub sampling: f64,
    #[arg(long)]
    pub rounds: u64,
    #[arg(long, default_value_t = accountant::DEFAULT_DELTA)]
    pub delta: f64,
    #[arg(long, default_value_t = accountant::DEFAULT_LAMBDA_MAX)]
    pub lambda_max: u32,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    pub config: PathBuf,
    /// Index file to write (one index per line).
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error: 2 for usage and configuration problems,
/// 1 for everything that went wrong while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => cmd_run(&a.config, a.output_dir.as_deref(), a.full_scale).map(|s| {
            if let Some(s) = s {
                println!("{}", summary_line(&s));
            }
        }),
        Command::Sweep(a) => cmd_sweep(&a.config, &a.ratios, a.output_dir.as_deref(), a.full_scale),
        Command::Accountant(a) => {
            let (eps, lambda) = cmd_accountant(&a)?;
            println!("epsilon = {eps:.6}");
            println!("lambda = {lambda}");
            Ok(())
        }
        Command::Calibrate(a) => {
            let s = cmd_calibrate(&a.config)?;
            println!("sensitivity = {s}");
            Ok(())
        }
        Command::SelectTopk(a) => {
            let set = cmd_select_topk(&a.config, &a.out)?;
            println!("selected {} of {} coordinates", set.len(), set.dim());
            Ok(())
        }
    }
}

fn summary_line(s: &Summary) -> String {
    let eps = s.epsilon.map(|e| format!(" epsilon={e:.4}")).unwrap_or_default();
    format!(
        "{} r={} best {}={:.4} at round {} down={:.2}KB up={:.2}KB{eps}",
        s.scheme, s.ratio, s.metric, s.best, s.round, s.down_kb, s.up_kb
    )
}

fn check_scale(config: &ExperimentConfig, arch: &ArchSpec, full_scale: bool) -> Result<()> {
    let flops = config.estimated_flops(arch);
    if flops > DESK_SCALE_FLOPS && !full_scale {
        return Err(Error::config(format!(
            "run needs about {flops:.2e} flops; pass --full-scale to allow it"
        )));
    }
    Ok(())
}

/// Runs the experiment in `config_path` and writes its outputs. Returns the
/// summary (`None` for zero rounds).
pub fn cmd_run(config_path: &Path, output_dir: Option<&Path>, full_scale: bool) -> Result<Option<Summary>> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(dir) = output_dir {
        config.output_dir = dir.to_path_buf();
    }
    run_config(&config, full_scale)
}

pub fn run_config(config: &ExperimentConfig, full_scale: bool) -> Result<Option<Summary>> {
    let data = config.build_data()?;
    let arch = config.arch(&data)?;
    check_scale(config, &arch, full_scale)?;
    let fed = Federation::new(config.federation.clone(), arch, &data)?;
    let mut resolved = config.clone();
    if let Some(s) = fed.sensitivity() {
        // pin the calibrated value so a rerun does not depend on calibration
        resolved.federation.sensitivity = Sensitivity::Fixed(s);
    }
    let result = fed.run()?;

    fs::create_dir_all(&config.output_dir)?;
    federation::write_trace_csv(&result.trace, fs::File::create(config.output_dir.join(TRACE_FILE))?)?;
    fs::write(config.output_dir.join(RESOLVED_CONFIG_FILE), resolved.to_json() + "\n")?;
    let summary = serde_json::to_string_pretty(&result.summary).expect("summary serializes");
    fs::write(config.output_dir.join(SUMMARY_FILE), summary + "\n")?;
    Ok(result.summary)
}

/// Distinct ratios in first-seen order; duplicates are reported on stderr.
pub fn dedupe_ratios(ratios: &[f64]) -> Vec<f64> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &r in ratios {
        if seen.insert(r.to_bits()) {
            out.push(r);
        } else {
            eprintln!("warning: ratio {r} listed more than once, running it once");
        }
    }
    out
}

pub const SWEEP_HEADER: [&str; 9] = [
    "ratio",
    "scheme",
    "metric",
    "best_metric",
    "round",
    "down_kb",
    "up_kb",
    "epsilon",
    "auroc",
];

pub fn cmd_sweep(config_path: &Path, ratios: &[f64], output_dir: Option<&Path>, full_scale: bool) -> Result<()> {
    if ratios.is_empty() {
        return Err(Error::config("--ratios needs at least one value"));
    }
    let ratios = dedupe_ratios(ratios);
    let base = ExperimentConfig::load(config_path)?;
    let root = output_dir.map(Path::to_path_buf).unwrap_or_else(|| base.output_dir.clone());
    let mut configs = Vec::new();
    for &r in &ratios {
        let mut c = base.clone();
        c.federation.ratio = r;
        c.output_dir = root.join(format!("ratio_{r}"));
        c.validate()?;
        configs.push(c);
    }
    fs::create_dir_all(&root)?;
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(root.join(SWEEP_FILE)).map_err(csv_err)?;
    w.write_record(SWEEP_HEADER).map_err(csv_err)?;
    for (r, c) in ratios.iter().zip(&configs) {
        let Some(s) = run_config(c, full_scale)? else {
            continue;
        };
        println!("{}", summary_line(&s));
        w.write_record([
            r.to_string(),
            s.scheme.to_string(),
            s.metric.clone(),
            s.best.to_string(),
            s.round.to_string(),
            s.down_kb.to_string(),
            s.up_kb.to_string(),
            s.epsilon.map(|e| e.to_string()).unwrap_or_default(),
            s.auroc.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `(epsilon, lambda)`; argument range problems are configuration errors.
pub fn cmd_accountant(a: &AccountantArgs) -> Result<(f64, u32)> {
    let q = accountant::AccountantQuery {
        sigma: a.sigma,
        sampling: a.sampling,
        rounds: a.rounds,
        delta: a.delta,
        lambda_max: a.lambda_max,
    };
    if a.rounds == 0 {
        return Err(Error::config("rounds must be at least 1"));
    }
    if !(a.sigma > 0.0 && a.sigma.is_finite()) {
        return Err(Error::config("sigma must be positive"));
    }
    if !(a.sampling > 0.0 && a.sampling <= 1.0) {
        return Err(Error::config("sampling must be in (0, 1]"));
    }
    if !(a.delta > 0.0 && a.delta < 1.0) {
        return Err(Error::config("delta must be in (0, 1)"));
    }
    if a.lambda_max == 0 {
        return Err(Error::config("lambda-max must be at least 1"));
    }
    let b = accountant::epsilon(&q)?;
    Ok((b.epsilon, b.lambda))
}

pub fn cmd_calibrate(config_path: &Path) -> Result<f64> {
    let mut config = ExperimentConfig::load(config_path)?;
    let data = config.build_data()?;
    let arch = config.arch(&data)?;
    // calibration is only defined for the private variant of the scheme
    config.federation.scheme.dp = true;
    config.federation.sensitivity = Sensitivity::Calibrate;
    let fed = Federation::new(config.federation, arch, &data)?;
    Ok(fed.sensitivity().expect("dp federation has a sensitivity"))
}

pub fn cmd_select_topk(config_path: &Path, out: &Path) -> Result<compression::IndexSet> {
    let config = ExperimentConfig::load(config_path)?;
    let data = config.build_data()?;
    let arch = config.arch(&data)?;
    let w0 = crate::nn::init_model(&arch, config.federation.seeds.model);
    let k = config.federation.retained(arch.param_count());
    let set = compression::select_topk(
        &arch,
        &w0,
        &data.public,
        config.federation.t_init,
        k,
        config.federation.local.learning_rate,
    )?;
    set.save(out)?;
    Ok(set)
}
