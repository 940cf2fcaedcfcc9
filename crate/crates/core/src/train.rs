//! Epoch loop: relabel, sample episodes, meta-step, log, checkpoint.
//!
//! Output directory layout:
//!
//! ```text
//! config.txt                resolved configuration
//! run.json                  config text, config hash, seed, architecture hash
//! epochs.jsonl              one line per epoch (labels, ARI, retries)
//! steps.jsonl               one line per optimizer step
//! checkpoints/epoch-NNN.ckpt
//! final.ckpt
//! failure.json              only after a non-finite loss or gradient
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, LabelMode, RunConfig};
use crate::data::{mix_seed, split_leave_one_domain_out, DataError, Dataset, Split, TrainRecord};
use crate::domains::{self, DomainError, EpisodeSampler, PseudoDomainAssignment};
use crate::meta::{self, Batch, EpisodeBatch, MetaError, MetaStepReport, Optimizer};
use crate::model::{ModelError, ModelParams, Networks};
use crate::style::adjusted_rand_index;
use crate::tensor::TensorError;

const RELABEL_STREAM: u64 = 1;
const SAMPLER_STREAM: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("dataset does not match configuration: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Meta(MetaError),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { what: String, epoch: usize, step: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, Self::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub label_counts: Vec<usize>,
    /// Agreement of this epoch's labels with the generator domains.
    pub ari_vs_generator: Option<f64>,
    pub retries: usize,
    pub fallback: bool,
    pub steps: usize,
    pub mean_train_cls: f64,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub report: MetaStepReport,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
struct RunHeader<'a> {
    config: &'a str,
    config_hash: &'a str,
    seed: u64,
    architecture_hash: &'a str,
    held_out_domain: usize,
    n_train: usize,
    n_test: usize,
}

/// Diagnostic dump written when a step produces a non-finite value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FailureDump {
    pub epoch: usize,
    pub step: usize,
    pub what: String,
    pub report: MetaStepReport,
    pub episode_seed: Option<u64>,
    /// Sample ids per batch, meta-train batches first.
    pub batches: Vec<Vec<usize>>,
    pub batch_domains: Vec<usize>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
}

/// Optimizer steps per epoch: the configured value, or one pass over the
/// training set when it is 0.
pub fn steps_per_epoch(cfg: &RunConfig, n_train: usize) -> usize {
    if cfg.steps_per_epoch > 0 {
        return cfg.steps_per_epoch;
    }
    let per_step = cfg.per_domain_batch * cfg.n_domains.max(1);
    (n_train / per_step).max(1)
}

/// Checks the dataset against the configuration and splits off the held-out domain.
pub fn prepare_split(cfg: &RunConfig, dataset: &Dataset) -> Result<Split> {
    let g = &dataset.config;
    if g.image_size != cfg.image_size || g.depth_size != cfg.depth_size {
        return Err(TrainError::Mismatch(format!(
            "dataset is {}px / depth {}, config wants {}px / depth {}",
            g.image_size, g.depth_size, cfg.image_size, cfg.depth_size
        )));
    }
    Ok(split_leave_one_domain_out(dataset, cfg.held_out_domain)?)
}

struct Sink {
    epochs: BufWriter<File>,
    steps: BufWriter<File>,
    dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).expect("serializable");
    writeln!(w, "{line}").map_err(io_err(path))
}

impl Sink {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints")).map_err(io_err(dir))?;
        Ok(Self {
            epochs: create(&dir.join("epochs.jsonl"))?,
            steps: create(&dir.join("steps.jsonl"))?,
            dir: dir.to_path_buf(),
        })
    }

    fn flush(&mut self) -> Result<()> {
        let dir = self.dir.clone();
        self.epochs.flush().map_err(io_err(&dir))?;
        self.steps.flush().map_err(io_err(&dir))
    }
}

struct Run<'a> {
    cfg: &'a RunConfig,
    nets: Networks,
    config_text: String,
    config_hash: String,
    sink: Option<Sink>,
}

impl Run<'_> {
    fn checkpoint(&self, params: &ModelParams, epoch: usize, name: &str) -> Result<()> {
        if let Some(sink) = &self.sink {
            let ck = Checkpoint::new(
                &self.nets.arch,
                &self.config_text,
                &self.config_hash,
                self.cfg.seed,
                epoch,
                params.clone(),
            );
            ck.save(&sink.dir.join(name))?;
        }
        Ok(())
    }

    fn assign(&self, params: &ModelParams, split: &Split, epoch: usize) -> Result<PseudoDomainAssignment> {
        let records = &split.train;
        let seed = mix_seed(mix_seed(self.cfg.seed, RELABEL_STREAM), epoch as u64);
        Ok(match self.cfg.mode {
            LabelMode::Pseudo => {
                domains::assign_pseudo_domains(&self.nets, params, records, &self.cfg.style_settings(), seed, epoch)?
            }
            LabelMode::GeneratorTruth => domains::assignment_from_domains(records, &split.train_domains, epoch),
            LabelMode::Single => domains::balanced_partition(records, 1, seed, epoch),
        })
    }

    fn fail(&mut self, err: MetaError, epoch: usize, step: usize, batches: &[&Batch], episode_seed: Option<u64>) -> TrainError {
        let (what, report) = match err {
            MetaError::NonFinite { what, report } => (what, *report),
            MetaError::Tensor(TensorError::NonFinite { op }) | MetaError::Model(ModelError::Tensor(TensorError::NonFinite { op })) => {
                (format!("value in {op}"), MetaStepReport::default())
            }
            other => return TrainError::Meta(other),
        };
        if let Some(sink) = &mut self.sink {
            let dump = FailureDump {
                epoch,
                step,
                what: what.clone(),
                report,
                episode_seed,
                batches: batches.iter().map(|b| b.sample_ids.clone()).collect(),
                batch_domains: batches.iter().map(|b| b.domain).collect(),
                config_hash: self.config_hash.clone(),
                seed: self.cfg.seed,
            };
            let path = sink.dir.join("failure.json");
            let text = serde_json::to_string_pretty(&dump).expect("serializable");
            if let Err(e) = sink.flush().and_then(|_| fs::write(&path, text).map_err(io_err(&path))) {
                return e;
            }
        }
        TrainError::NonFinite { what, epoch, step }
    }
}

fn episode_batches(ep: &EpisodeBatch) -> Vec<&Batch> {
    ep.meta_train.iter().chain(std::iter::once(&ep.meta_test)).collect()
}

/// Trains on every generator domain except `cfg.held_out_domain`. With
/// `out_dir` set, writes logs and checkpoints there; otherwise runs in memory.
pub fn train(cfg: &RunConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = prepare_split(cfg, dataset)?;
    train_split(cfg, &split, out_dir)
}

pub fn train_split(cfg: &RunConfig, split: &Split, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let nets = Networks::new(&cfg.architecture())?;
    let config_text = cfg.to_text();
    let config_hash = cfg.hash();
    let sink = out_dir.map(Sink::open).transpose()?;
    if let Some(dir) = out_dir {
        let path = dir.join("config.txt");
        fs::write(&path, &config_text).map_err(io_err(&path))?;
        let header = RunHeader {
            config: &config_text,
            config_hash: &config_hash,
            seed: cfg.seed,
            architecture_hash: &nets.arch.hash(),
            held_out_domain: cfg.held_out_domain,
            n_train: split.train.len(),
            n_test: split.test.len(),
        };
        let path = dir.join("run.json");
        fs::write(&path, serde_json::to_string_pretty(&header).expect("serializable")).map_err(io_err(&path))?;
    }
    let mut run = Run {
        cfg,
        nets,
        config_text,
        config_hash,
        sink,
    };

    let mut params = run.nets.init(cfg.seed)?;
    run.checkpoint(&params, 0, "checkpoints/epoch-000.ckpt")?;
    let hp = cfg.hyperparams();
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let records: &[TrainRecord] = &split.train;
    let mut epoch_logs = Vec::with_capacity(cfg.epochs);
    let mut step_logs = Vec::new();

    for epoch in 0..cfg.epochs {
        let assignment = run.assign(&params, split, epoch)?;
        let n = assignment.n_domains;
        let steps = steps_per_epoch(cfg, records.len());
        let single = cfg.mode == LabelMode::Single;
        let batch_size = if single {
            cfg.per_domain_batch * cfg.n_domains.max(1)
        } else {
            cfg.per_domain_batch
        };
        let sampler_seed = mix_seed(mix_seed(cfg.seed, SAMPLER_STREAM), epoch as u64);
        let mut sampler = EpisodeSampler::new(&assignment, records, batch_size, sampler_seed)?;
        let mut cls_sum = 0.0;
        let mut cls_count = 0usize;

        for step in 0..steps {
            let report = if single {
                let batch = sampler.batch(0, records);
                let (grads, report) =
                    meta::erm_gradients(&run.nets, &params, &batch).map_err(|e| run.fail(e, epoch, step, &[&batch], None))?;
                optimizer.step(&mut params, &grads, hp.beta).map_err(TrainError::Meta)?;
                report
            } else {
                let episode = sampler.sample_episode(records);
                let (next, report) = meta::meta_step(&run.nets, &params, &episode, &hp, cfg.gradient_order, &mut optimizer)
                    .map_err(|e| run.fail(e, epoch, step, &episode_batches(&episode), Some(episode.seed)))?;
                params = next;
                report
            };
            cls_sum += report.train_cls.iter().sum::<f64>();
            cls_count += report.train_cls.len();
            let log = StepLog {
                epoch,
                step,
                report,
                config_hash: run.config_hash.clone(),
                seed: cfg.seed,
            };
            if let Some(sink) = &mut run.sink {
                let path = sink.dir.join("steps.jsonl");
                write_line(&mut sink.steps, &path, &log)?;
            }
            step_logs.push(log);
        }

        let ari = (n > 1).then(|| adjusted_rand_index(&assignment.labels, &split.train_domains));
        let log = EpochLog {
            epoch,
            label_counts: assignment.counts.clone(),
            ari_vs_generator: ari,
            retries: assignment.retries,
            fallback: assignment.fallback,
            steps,
            mean_train_cls: cls_sum / cls_count.max(1) as f64,
            config_hash: run.config_hash.clone(),
            seed: cfg.seed,
        };
        if let Some(sink) = &mut run.sink {
            let path = sink.dir.join("epochs.jsonl");
            write_line(&mut sink.epochs, &path, &log)?;
            sink.flush()?;
        }
        epoch_logs.push(log);

        let done = epoch + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            run.checkpoint(&params, done, &format!("checkpoints/epoch-{done:03}.ckpt"))?;
        }
    }

    if let Some(sink) = &mut run.sink {
        sink.flush()?;
    }
    if cfg.epochs > 0 {
        run.checkpoint(&params, cfg.epochs, "final.ckpt")?;
    }
    Ok(TrainOutcome {
        params,
        epochs: epoch_logs,
        steps: step_logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    fn small_config() -> RunConfig {
        RunConfig {
            image_size: 8,
            depth_size: 2,
            base_width: 2,
            head_hidden: 3,
            depth_width: 2,
            per_domain: 12,
            per_domain_batch: 3,
            n_domains: 2,
            generator_domains: 3,
            epochs: 2,
            steps_per_epoch: 2,
            pca_dim: 8,
            ..RunConfig::default()
        }
    }

    fn read(path: &Path) -> Vec<u8> {
        fs::read(path).unwrap()
    }

    #[test]
    fn runs_are_bit_identical() {
        let cfg = small_config();
        let ds = generate(&cfg.generator(), 1).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = train(&cfg, &ds, Some(a.path())).unwrap();
        let rb = train(&cfg, &ds, Some(b.path())).unwrap();
        assert_eq!(ra.params, rb.params);
        for f in ["steps.jsonl", "epochs.jsonl", "final.ckpt", "checkpoints/epoch-001.ckpt", "config.txt"] {
            assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
        }
        let steps = fs::read_to_string(a.path().join("steps.jsonl")).unwrap();
        assert_eq!(steps.lines().count(), 4);
        let first: StepLog = serde_json::from_str(steps.lines().next().unwrap()).unwrap();
        assert_eq!(first.config_hash, cfg.hash());
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint_only() {
        let cfg = RunConfig {
            epochs: 0,
            ..small_config()
        };
        let ds = generate(&cfg.generator(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &ds, Some(dir.path())).unwrap();
        let ckpts: Vec<_> = fs::read_dir(dir.path().join("checkpoints")).unwrap().collect();
        assert_eq!(ckpts.len(), 1);
        assert!(!dir.path().join("final.ckpt").exists());
        let ck = Checkpoint::load(&dir.path().join("checkpoints/epoch-000.ckpt")).unwrap();
        assert_eq!(ck.params, out.params);
        assert_eq!(ck.params, Networks::new(&cfg.architecture()).unwrap().init(cfg.seed).unwrap());
        assert!(out.steps.is_empty());
    }

    #[test]
    fn all_modes_share_the_log_schema() {
        let ds = generate(&small_config().generator(), 1).unwrap();
        for mode in [LabelMode::Pseudo, LabelMode::GeneratorTruth, LabelMode::Single] {
            let cfg = RunConfig {
                mode,
                epochs: 1,
                ..small_config()
            };
            let out = train(&cfg, &ds, None).unwrap();
            assert_eq!(out.epochs.len(), 1);
            assert_eq!(out.steps.len(), 2);
            let log = &out.epochs[0];
            assert_eq!(log.label_counts.iter().sum::<usize>(), 24);
            match mode {
                LabelMode::Single => assert_eq!(log.ari_vs_generator, None),
                LabelMode::GeneratorTruth => assert_eq!(log.ari_vs_generator, Some(1.0)),
                LabelMode::Pseudo => assert!(log.ari_vs_generator.is_some()),
            }
            assert!(out.params.f.all_finite());
        }
    }

    #[test]
    fn non_finite_loss_dumps_the_episode() {
        let cfg = RunConfig {
            beta: 1e300,
            optimizer: crate::meta::OptimizerKind::Sgd,
            steps_per_epoch: 5,
            ..small_config()
        };
        let ds = generate(&cfg.generator(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = train(&cfg, &ds, Some(dir.path())).unwrap_err();
        assert!(err.is_numerical(), "{err}");
        let dump: FailureDump = serde_json::from_str(&fs::read_to_string(dir.path().join("failure.json")).unwrap()).unwrap();
        assert_eq!(dump.batches.len(), cfg.n_domains);
        assert!(dump.batches.iter().all(|b| b.len() == cfg.per_domain_batch));
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let cfg = small_config();
        let ds = generate(&cfg.generator(), 1).unwrap();
        let other = RunConfig {
            image_size: 16,
            ..cfg
        };
        assert!(matches!(train(&other, &ds, None), Err(TrainError::Mismatch(_))));
    }
}
