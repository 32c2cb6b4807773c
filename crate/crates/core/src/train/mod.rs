//! Training loop, checkpoints and evaluation.

mod adam;
mod eval;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use eval::{
    ablation_matrix, evaluate, evaluate_with, format_ablation, run_ablation, AblationEntry, AblationRow,
    Evaluation,
};

use crate::backbone::{BackboneConfig, FeatureExtractor};
use crate::checkpoint::{read_archive, write_archive};
use crate::data::{augment, collate, derive_seed, write_image, write_mask, Batch, LoaderConfig, Mask, PairDataset};
use crate::error::{Error, Result};
use crate::losses::{compute_losses, LossBreakdown, LossOutput, LossWeights};
use crate::metrics::PlanarImage;
use crate::model::{Psstrnet, PsstrConfig};
use crate::params::NamedParameterSet;

const FORMAT: &str = "psstrnet-checkpoint-1";
const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: PsstrConfig,
    pub backbone: BackboneConfig,
    /// Defaults to the standard weights with one dice weight per iteration.
    pub loss: Option<LossWeights>,
    /// The sample size is taken from `model.input_size`.
    pub data: LoaderConfig,
    pub lr: f64,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; the last epoch is always saved.
    pub checkpoint_interval: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: PsstrConfig::default(),
            backbone: BackboneConfig::default(),
            loss: None,
            data: LoaderConfig::default(),
            lr: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 10,
            adam: AdamConfig::default(),
            batch_size: 6,
            epochs: 100,
            seed: 0,
            checkpoint_interval: 10,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss_weights().validate(self.model.iterations)?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return Err(Error::Config("lr decay must be > 0 and its period >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be >= 1".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.loss
            .clone()
            .unwrap_or_else(|| LossWeights::for_iterations(self.model.iterations))
    }

    pub fn loader(&self) -> LoaderConfig {
        LoaderConfig {
            image_size: Some(self.model.input_size),
            ..self.data.clone()
        }
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self)
    }
}

/// `lr * decay^floor(epoch / period)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        batch: usize,
        loss: LossBreakdown,
    },
    Epoch {
        epoch: usize,
        steps: usize,
        mean_total: f64,
        skipped: usize,
    },
    Checkpoint {
        epoch: usize,
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    /// 0-based epoch that was run.
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    /// Samples that failed to load.
    pub skipped: usize,
}

/// Model, frozen loss backbone and optimizer state.
pub struct Trainer {
    cfg: TrainConfig,
    weights: LossWeights,
    net: Psstrnet,
    params: NamedParameterSet,
    backbone: FeatureExtractor,
    adam: Adam,
    /// Completed epochs.
    epoch: usize,
    /// Completed optimizer steps.
    step: usize,
    dump_root: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = FeatureExtractor::from_config(&cfg.backbone, &Device::Cpu)?;
        let (net, params) = Psstrnet::init(&cfg.model, cfg.seed)?;
        let adam = Adam::new(params.learnable(), cfg.adam)?;
        Ok(Self {
            weights: cfg.loss_weights(),
            cfg,
            net,
            params,
            backbone,
            adam,
            epoch: 0,
            step: 0,
            dump_root: None,
        })
    }

    /// Restores model, optimizer and progress from a checkpoint.
    pub fn resume(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let mut trainer = Self::new(ckpt.config.clone())?;
        trainer.params.load_tensors(&ckpt.model)?;
        trainer.adam.load_state(&ckpt.optimizer, ckpt.adam_steps)?;
        trainer.epoch = ckpt.epoch;
        trainer.step = ckpt.step;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Changes the final epoch, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.cfg.epochs = epochs;
    }

    pub fn net(&self) -> &Psstrnet {
        &self.net
    }

    pub fn params(&self) -> &NamedParameterSet {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Directory that receives batches whose loss is not finite.
    pub fn set_dump_root(&mut self, dir: impl Into<PathBuf>) {
        self.dump_root = Some(dir.into());
    }

    /// Loss of the network in training mode on `batch`, without an update.
    pub fn loss(&self, batch: &Batch) -> Result<LossOutput> {
        let out = self
            .net
            .forward_with(&batch.input, self.cfg.model.iterations, false, true)?;
        let outs: Vec<Tensor> = out.states.iter().map(|s| s.removed.clone()).collect();
        let masks: Vec<Tensor> = out.states.iter().map(|s| s.mask.clone()).collect();
        compute_losses(&outs, &masks, &batch.gt, &batch.mask, &self.backbone, &self.weights)
    }

    /// Forward, backward and one optimizer step at learning rate `lr`.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
        let loss = self.loss(batch)?;
        if !loss.breakdown.total.is_finite() {
            let dump = self.dump_batch(batch, &loss.breakdown)?;
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: self.step,
                dump,
            });
        }
        let grads = loss.total.backward()?;
        self.adam.step(&grads, lr)?;
        self.step += 1;
        Ok(loss.breakdown)
    }

    fn dump_batch(&self, batch: &Batch, loss: &LossBreakdown) -> Result<PathBuf> {
        let root = self.dump_root.clone().unwrap_or_else(std::env::temp_dir);
        let dir = root.join(format!("nonfinite-e{:04}-s{:06}", self.epoch, self.step));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, name) in batch.names.iter().enumerate() {
            let input = PlanarImage::from_tensor(&batch.input.get(i)?)?;
            let gt = PlanarImage::from_tensor(&batch.gt.get(i)?)?;
            write_image(&dir.join(format!("{name}_input.png")), &input)?;
            write_image(&dir.join(format!("{name}_gt.png")), &gt)?;
            write_mask(&dir.join(format!("{name}_mask.png")), &Mask::from_tensor(&batch.mask.get(i)?)?)?;
        }
        let info = serde_json::json!({
            "epoch": self.epoch,
            "step": self.step,
            "names": batch.names,
            "loss": loss,
        });
        let path = dir.join("loss.json");
        std::fs::write(&path, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&path, e))?;
        Ok(dir)
    }

    /// Sample order of a 0-based epoch.
    pub fn epoch_order(&self, epoch: usize, len: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        order.shuffle(&mut rng);
        order
    }

    /// Runs the next epoch, passing every record to `log`.
    pub fn run_epoch(
        &mut self,
        data: &PairDataset,
        log: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<EpochSummary> {
        if data.is_empty() {
            return Err(Error::Empty("training set is empty".into()));
        }
        let epoch = self.epoch;
        let lr = lr_at(epoch, &self.cfg);
        let order = self.epoch_order(epoch, data.len());
        let (mut steps, mut total, mut skipped) = (0usize, 0f64, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let mut samples = Vec::with_capacity(chunk.len());
            for &i in chunk {
                match data.get(i) {
                    Ok(s) if self.cfg.augment => {
                        samples.push(augment(&s, derive_seed(self.cfg.seed, &[AUGMENT_STREAM, epoch as u64, i as u64])))
                    }
                    Ok(s) => samples.push(s),
                    Err(e) => {
                        log::warn!("skipping sample {i}: {e}");
                        skipped += 1;
                    }
                }
            }
            if samples.is_empty() {
                continue;
            }
            let batch = collate(&samples, &Device::Cpu)?;
            let loss = self.train_step(&batch, lr)?;
            steps += 1;
            total += loss.total;
            log(&LogRecord::Step {
                epoch,
                step: self.step,
                lr,
                batch: samples.len(),
                loss,
            })?;
        }
        self.epoch += 1;
        let summary = EpochSummary {
            epoch,
            steps,
            mean_total: if steps == 0 { f64::NAN } else { total / steps as f64 },
            skipped,
        };
        log(&LogRecord::Epoch {
            epoch,
            steps,
            mean_total: summary.mean_total,
            skipped,
        })?;
        Ok(summary)
    }

    /// Trains until `config().epochs` epochs are complete. Writes
    /// `config.json`, appends to `train_log.jsonl` and saves checkpoints
    /// under `run_dir/checkpoints`.
    pub fn fit(&mut self, data: &PairDataset, run_dir: &Path) -> Result<Vec<EpochSummary>> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let cfg_path = run_dir.join("config.json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&self.cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
        if self.dump_root.is_none() {
            self.dump_root = Some(run_dir.to_path_buf());
        }
        let log_path = run_dir.join("train_log.jsonl");
        let mut log_file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut write = |r: &LogRecord| -> Result<()> {
            let line = serde_json::to_string(r)?;
            writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))
        };
        let mut summaries = Vec::new();
        while self.epoch < self.cfg.epochs {
            let summary = self.run_epoch(data, &mut write)?;
            log::info!(
                "epoch {} done: {} steps, mean loss {:.4}",
                summary.epoch + 1,
                summary.steps,
                summary.mean_total
            );
            summaries.push(summary);
            if self.epoch % self.cfg.checkpoint_interval == 0 || self.epoch == self.cfg.epochs {
                let path = checkpoint_path(run_dir, self.epoch);
                self.save(&path)?;
                write(&LogRecord::Checkpoint {
                    epoch: self.epoch,
                    path,
                })?;
            }
        }
        Ok(summaries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint {
            config: self.cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            adam_steps: self.adam.steps(),
            model: self.params.to_tensors(),
            optimizer: self.adam.state(),
        }
        .write(path)
    }
}

/// `run_dir/checkpoints/epoch-NNNN.safetensors`.
pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch-{epoch:04}.safetensors"))
}

/// Contents of a training checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub adam_steps: u64,
    pub model: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (k, v) in &self.model {
            tensors.insert(format!("model.{k}"), v.clone());
        }
        for (k, v) in &self.optimizer {
            tensors.insert(format!("adam.{k}"), v.clone());
        }
        let mut meta = BTreeMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("adam_steps".to_string(), self.adam_steps.to_string());
        write_archive(path, &tensors, &meta)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let archive = read_archive(path)?;
        let meta = |key: &str| {
            archive
                .metadata
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing {key}", path.display())))
        };
        if meta("format")? != FORMAT {
            return Err(Error::Checkpoint(format!("{}: unknown format", path.display())));
        }
        let number = |key: &str| -> Result<u64> {
            meta(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("{}: bad {key}", path.display())))
        };
        let config: TrainConfig = serde_json::from_str(meta("config")?)?;
        let (mut model, mut optimizer) = (BTreeMap::new(), BTreeMap::new());
        for (name, t) in archive.tensors {
            if let Some(rest) = name.strip_prefix("model.") {
                model.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix("adam.") {
                optimizer.insert(rest.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("{}: unexpected tensor {name}", path.display())));
            }
        }
        Ok(Self {
            config,
            epoch: number("epoch")? as usize,
            step: number("step")? as usize,
            adam_steps: number("adam_steps")?,
            model,
            optimizer,
        })
    }
}

/// Network and configuration from a checkpoint, for inference.
pub fn load_model(path: &Path) -> Result<(Psstrnet, NamedParameterSet, TrainConfig)> {
    let ckpt = Checkpoint::read(path)?;
    let params = NamedParameterSet::new(ckpt.config.seed, DType::F32, &Device::Cpu);
    let net = Psstrnet::new(&ckpt.config.model, &params)?;
    params.load_tensors(&ckpt.model)?;
    Ok((net, params, ckpt.config))
}
