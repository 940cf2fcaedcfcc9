//! Command-line front end: `generate`, `train`, `eval`, `verify`.
//!
//! Configuration precedence, lowest first: built-in defaults (or the
//! checkpoint's embedded config for `eval`), `--config` file, `PDL_SEED`,
//! individual flags. Exit codes: 0 ok, 1 validation or I/O error, 2 numerical
//! failure (non-finite training values or a failed verification property).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate, split_leave_one_domain_out, Dataset};
use crate::eval::{self, EvalResult, RunMetadata};
use crate::model::Networks;
use crate::train::{self, TrainError};
use crate::verify::{self, Suite, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pdl", version, about = "Pseudo-domain meta-learning for face anti-spoofing on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic multi-domain dataset to disk.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// One file per sample instead of a single blob.
        #[arg(long)]
        per_sample_files: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train on every domain except the held-out one.
    Train {
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a domain with a checkpoint; writes eval.json and projection.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Permit evaluating a domain the checkpoint was trained on.
        #[arg(long)]
        allow_train_eval: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the property suites and report each measured residual.
    Verify {
        /// gradients | mldg-taylor | clustering | all
        #[arg(default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = verify::DEFAULT_SEEDS)]
        seeds: usize,
        /// Perturb analytic gradients before comparison (negative control).
        #[arg(long)]
        corrupt_gradients: bool,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

/// Flags that override individual configuration keys.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long = "config", value_name = "FILE")]
    pub file: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub n_domains: Option<String>,
    #[arg(long)]
    pub per_domain_batch: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub steps_per_epoch: Option<String>,
    /// sgd | adam
    #[arg(long)]
    pub optimizer: Option<String>,
    /// first | second
    #[arg(long)]
    pub gradient_order: Option<String>,
    /// pseudo | generator-truth | single
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub held_out_domain: Option<String>,
    /// kmeans | gmm
    #[arg(long)]
    pub cluster_method: Option<String>,
    #[arg(long)]
    pub pca_dim: Option<String>,
    #[arg(long)]
    pub image_size: Option<String>,
    #[arg(long)]
    pub depth_size: Option<String>,
    #[arg(long)]
    pub conv_layers: Option<String>,
    #[arg(long)]
    pub base_width: Option<String>,
    /// Comma-separated conv layer indices, e.g. `5,9`.
    #[arg(long)]
    pub taps: Option<String>,
    #[arg(long)]
    pub head_hidden: Option<String>,
    #[arg(long)]
    pub depth_width: Option<String>,
    #[arg(long)]
    pub per_domain: Option<String>,
    #[arg(long)]
    pub live_fraction: Option<String>,
    #[arg(long)]
    pub generator_domains: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<String>,
    /// Worker threads for generation and style statistics.
    #[arg(long)]
    pub threads: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> [(&'static str, &Option<String>); 25] {
        [
            ("seed", &self.seed),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("n_domains", &self.n_domains),
            ("per_domain_batch", &self.per_domain_batch),
            ("epochs", &self.epochs),
            ("steps_per_epoch", &self.steps_per_epoch),
            ("optimizer", &self.optimizer),
            ("gradient_order", &self.gradient_order),
            ("mode", &self.mode),
            ("held_out_domain", &self.held_out_domain),
            ("cluster_method", &self.cluster_method),
            ("pca_dim", &self.pca_dim),
            ("image_size", &self.image_size),
            ("depth_size", &self.depth_size),
            ("conv_layers", &self.conv_layers),
            ("base_width", &self.base_width),
            ("taps", &self.taps),
            ("head_hidden", &self.head_hidden),
            ("depth_width", &self.depth_width),
            ("per_domain", &self.per_domain),
            ("live_fraction", &self.live_fraction),
            ("generator_domains", &self.generator_domains),
            ("checkpoint_every", &self.checkpoint_every),
            ("threads", &self.threads),
        ]
    }

    /// Applies file, environment and flags on top of `base`, then validates.
    pub fn resolve(&self, base: RunConfig) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.file {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RunConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => base,
        };
        cfg.apply_seed_env()?;
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// An error tagged with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self {
            code: EXIT_VALIDATION,
            error: e.into(),
        }
    }
}

fn numerical(error: anyhow::Error) -> Failure {
    Failure {
        code: EXIT_NUMERICAL,
        error,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

#[derive(Serialize)]
struct EvalReport<'a> {
    #[serde(flatten)]
    result: &'a EvalResult,
    evaluated_domain: usize,
    trained_held_out_domain: usize,
    config: String,
    projection_file: &'a str,
    projection_sha256: String,
}

fn cmd_generate(out: &Path, per_sample: bool, args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = args.resolve(RunConfig::default())?;
    let dataset = generate(&cfg.generator(), cfg.threads)?;
    create_dir(out)?;
    let manifest = dataset.save(out, per_sample)?;
    write(&out.join("config.txt"), cfg.to_text())?;
    let manifest_bytes = fs::read(out.join("manifest.json")).context("re-reading manifest")?;
    println!(
        "wrote {} samples ({} domains) to {}; manifest sha256 {}; config {} seed {}",
        manifest.n_samples,
        manifest.counts_per_domain.len(),
        out.display(),
        sha256_hex(&manifest_bytes),
        cfg.hash(),
        cfg.seed
    );
    Ok(())
}

fn cmd_train(data: &Path, out: &Path, args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = args.resolve(RunConfig::default())?;
    let dataset = Dataset::load(data)?;
    create_dir(out)?;
    let outcome = match train::train(&cfg, &dataset, Some(out)) {
        Ok(o) => o,
        Err(e @ TrainError::NonFinite { .. }) => {
            return Err(numerical(anyhow!(e).context(format!("diagnostics in {}", out.join("failure.json").display()))))
        }
        Err(e) => return Err(e.into()),
    };
    for log in &outcome.epochs {
        let ari = log.ari_vs_generator.map_or("n/a".to_string(), |a| format!("{a:.3}"));
        println!(
            "epoch {} labels {:?} ari {ari} retries {} mean train cls {:.4}",
            log.epoch, log.label_counts, log.retries, log.mean_train_cls
        );
    }
    println!(
        "trained {} epochs ({} steps); config {} seed {}; checkpoints in {}",
        cfg.epochs,
        outcome.steps.len(),
        cfg.hash(),
        cfg.seed,
        out.display()
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path, allow_train_eval: bool, args: &ConfigArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(checkpoint)?;
    let trained = RunConfig::parse(&ck.manifest.config).context("checkpoint config")?;
    let cfg = args.resolve(trained.clone())?;
    let arch = cfg.architecture();
    ck.check_architecture(&arch)?;
    let dataset = Dataset::load(data)?;
    if dataset.config.image_size != cfg.image_size {
        return Err(anyhow!(
            "dataset images are {}px but the model expects {}px",
            dataset.config.image_size,
            cfg.image_size
        )
        .into());
    }
    let domain = cfg.held_out_domain;
    if domain != trained.held_out_domain && !allow_train_eval {
        return Err(anyhow!(
            "domain {domain} was a training domain for this checkpoint (held out: {}); pass --allow-train-eval to score it anyway",
            trained.held_out_domain
        )
        .into());
    }
    let split = split_leave_one_domain_out(&dataset, domain)?;
    let nets = Networks::new(&arch)?;
    let metadata = RunMetadata {
        seed: ck.manifest.seed,
        epoch: ck.manifest.epoch,
        config_hash: ck.manifest.config_hash.clone(),
        architecture_hash: ck.manifest.architecture_hash.clone(),
        held_out_domain: Some(domain),
    };
    let result = eval::evaluate(&nets, &ck.params, &split.test, metadata)?;
    let images: Vec<_> = split.test.iter().map(|s| &s.image).collect();
    let feats = eval::features(&nets, &ck.params, &images)?;
    let ids: Vec<usize> = result.samples.iter().map(|s| s.sample_id).collect();
    let labels: Vec<f64> = result.samples.iter().map(|s| s.label).collect();
    let scores: Vec<f64> = result.samples.iter().map(|s| s.score).collect();
    let rows = eval::project_2d(&feats, &ids, &labels, &scores)?;
    let csv = eval::projection_csv(&rows);

    create_dir(out)?;
    let projection_file = "projection.csv";
    write(&out.join(projection_file), &csv)?;
    let report = EvalReport {
        result: &result,
        evaluated_domain: domain,
        trained_held_out_domain: trained.held_out_domain,
        config: ck.manifest.config.clone(),
        projection_file,
        projection_sha256: sha256_hex(csv.as_bytes()),
    };
    write(&out.join("eval.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "domain {domain}: AUC {:.4} on {} samples (epoch {}, config {} seed {}); wrote {}",
        result.auc,
        result.n_samples,
        result.metadata.epoch,
        result.metadata.config_hash,
        result.metadata.seed,
        out.display()
    );
    Ok(())
}

fn cmd_verify(suite: Suite, seeds: usize, corrupt: bool, json: Option<&Path>) -> Result<(), Failure> {
    let opts = VerifyOptions {
        seeds,
        corrupt_gradients: corrupt,
    };
    let report = verify::run(suite, &opts);
    for p in &report.properties {
        println!("{p}");
    }
    let failed = report.properties.iter().filter(|p| !p.passed).count();
    println!(
        "{} properties, {failed} failed, {:.1}s",
        report.properties.len(),
        report.seconds
    );
    if let Some(path) = json {
        write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    if failed > 0 {
        return Err(numerical(anyhow!("{failed} verification properties failed")));
    }
    Ok(())
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate {
            out,
            per_sample_files,
            config,
        } => cmd_generate(&out, per_sample_files, &config),
        Command::Train { data, out, config } => cmd_train(&data, &out, &config),
        Command::Eval {
            checkpoint,
            data,
            out,
            allow_train_eval,
            config,
        } => cmd_eval(&checkpoint, &data, &out, allow_train_eval, &config),
        Command::Verify {
            suite,
            seeds,
            corrupt_gradients,
            json,
        } => cmd_verify(suite, seeds, corrupt_gradients, json.as_deref()),
    }
}

/// Parses `args`, runs the command, prints errors to stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

