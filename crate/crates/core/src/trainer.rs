//! Alternating adversarial training.
//!
//! Each iteration draws one batch and runs:
//!
//! 1. `fake = G(L, S)` in train mode (`S` is zeroed when `ablate_text` is set).
//! 2. Discriminator update on `bce(D(L, T), 1) + bce(D(L, fake), 0)` with
//!    `fake` detached, so no gradient reaches `G`.
//! 3. Generator update on `l1 * adv + l2 * perceptual + l3 * L1` through the
//!    freshly updated `D`; only generator parameters are stepped.
//!
//! Run directories hold `ckpt-<iteration>.safetensors` (last `keep_last`
//! retained), `best.safetensors` (lowest validation L1), an append-only
//! `metrics.tsv` and a `train.lock` guard while a run is active.

use std::collections::{BTreeMap, VecDeque};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchStream};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::models::{Checkpoint, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::nn::Mode;
use crate::optim::{Adam, OptimizerConfig};
use crate::perceptual::PerceptualExtractor;

const HISTORY_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub batch_size: usize,
    /// Total iterations; a resumed run continues up to this count.
    pub iterations: u64,
    pub checkpoint_every: u64,
    pub keep_last: usize,
    /// Parameter initialisation seed.
    pub seed: u64,
    /// Shuffling seed.
    pub data_seed: u64,
    pub ablate_text: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            batch_size: 16,
            iterations: 350_000,
            checkpoint_every: 1000,
            keep_last: 5,
            seed: 0,
            data_seed: 0,
            ablate_text: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.checkpoint_every == 0 || self.keep_last == 0 {
            return Err(Error::Config("batch_size, checkpoint_every and keep_last must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based index of the completed iteration.
    pub iteration: u64,
    pub d_gan: f64,
    pub g_gan: f64,
    pub g_perceptual: f64,
    pub g_l1: f64,
    pub g_total: f64,
}

impl StepMetrics {
    pub const TSV_HEADER: &'static str = "iteration\td_gan\tg_gan\tg_perceptual\tg_l1\tg_total";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.8}",
            self.iteration, self.d_gan, self.g_gan, self.g_perceptual, self.g_l1, self.g_total
        )
    }
}

/// Generator objective terms, all scalar tensors.
pub struct GeneratorLosses {
    pub adv: Tensor,
    pub perceptual: Tensor,
    pub l1: Tensor,
    pub total: Tensor,
}

pub fn generator_objective(
    d: &Discriminator,
    extractor: &dyn PerceptualExtractor,
    w: &LossWeights,
    l: &Tensor,
    target_ab: &Tensor,
    fake_ab: &Tensor,
) -> Result<GeneratorLosses> {
    let adv = losses::adv_generator_loss(&d.forward(l, fake_ab, Mode::Train)?.logits)?;
    let perceptual = losses::perceptual_loss_lab(l, fake_ab, target_ab, extractor, w.rho)?;
    let l1 = losses::l1_loss(fake_ab, target_ab)?;
    let total = losses::total_generator_loss(&adv, &perceptual, &l1, w)?;
    Ok(GeneratorLosses {
        adv,
        perceptual,
        l1,
        total,
    })
}

pub fn discriminator_objective(d: &Discriminator, l: &Tensor, real_ab: &Tensor, fake_ab: &Tensor) -> Result<Tensor> {
    let real = d.forward(l, real_ab, Mode::Train)?.logits;
    let fake = d.forward(l, &fake_ab.detach(), Mode::Train)?.logits;
    losses::adv_discriminator_loss(&real, &fake)
}

pub struct Trainer {
    generator: Generator,
    discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    config: TrainConfig,
    extractor: Arc<dyn PerceptualExtractor>,
    iteration: u64,
    history: VecDeque<StepMetrics>,
    run_metadata: BTreeMap<String, String>,
}

const META_ITERATION: &str = "iteration";
const META_TRAIN: &str = "train_config";
const META_HISTORY: &str = "loss_history";
const META_STEP_G: &str = "optim.generator.step";
const META_STEP_D: &str = "optim.discriminator.step";
pub const META_VAL_L1: &str = "validation_l1";
/// Prefix of caller-supplied metadata carried through checkpoints and resumes.
pub const RUN_PREFIX: &str = "run.";
/// JSON [`TextEncoderSpec`](crate::text::TextEncoderSpec) used for training.
pub const META_TEXT_ENCODER: &str = "run.text_encoder";

impl Trainer {
    pub fn new(
        gcfg: &GeneratorConfig,
        dcfg: &DiscriminatorConfig,
        config: TrainConfig,
        extractor: Arc<dyn PerceptualExtractor>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        extractor.check_layer(config.weights.rho)?;
        if gcfg.image_size != dcfg.image_size {
            return Err(Error::Config(format!(
                "generator image size {} differs from discriminator image size {}",
                gcfg.image_size, dcfg.image_size
            )));
        }
        let generator = Generator::new(gcfg, config.seed, dtype, device)?;
        let discriminator = Discriminator::new(dcfg, config.seed, dtype, device)?;
        Self::from_parts(generator, discriminator, config, extractor)
    }

    fn from_parts(
        generator: Generator,
        discriminator: Discriminator,
        config: TrainConfig,
        extractor: Arc<dyn PerceptualExtractor>,
    ) -> Result<Self> {
        Ok(Self {
            opt_g: Adam::new(config.optimizer, generator.params())?,
            opt_d: Adam::new(config.optimizer, discriminator.params())?,
            generator,
            discriminator,
            config,
            extractor,
            iteration: 0,
            history: VecDeque::new(),
            run_metadata: BTreeMap::new(),
        })
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut TrainConfig {
        &mut self.config
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn history(&self) -> impl Iterator<Item = &StepMetrics> {
        self.history.iter()
    }

    /// Stores `value` under `key` (which must start with `run.`) in every checkpoint.
    pub fn set_run_metadata(&mut self, key: &str, value: String) {
        assert!(key.starts_with(RUN_PREFIX), "run metadata keys start with `{RUN_PREFIX}`");
        self.run_metadata.insert(key.to_string(), value);
    }

    pub fn run_metadata(&self, key: &str) -> Option<&str> {
        self.run_metadata.get(key).map(String::as_str)
    }

    fn embedding(&self, batch: &Batch) -> Result<Tensor> {
        if self.config.ablate_text {
            Ok(batch.s.zeros_like()?)
        } else {
            Ok(batch.s.clone())
        }
    }

    fn finite(&self, what: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                what: what.into(),
                iteration: self.iteration + 1,
            })
        }
    }

    /// Generator output for a batch in train mode, with graph attached.
    pub fn generate(&self, batch: &Batch) -> Result<Tensor> {
        self.generator.forward(&batch.l, &self.embedding(batch)?, Mode::Train)
    }

    /// Updates only the discriminator. Returns its loss.
    pub fn discriminator_step(&mut self, batch: &Batch, fake: &Tensor) -> Result<f64> {
        let loss = discriminator_objective(&self.discriminator, &batch.l, &batch.ab, fake)?;
        let value = self.finite("discriminator loss", losses::scalar(&loss)?)?;
        let grads = loss.backward()?;
        self.opt_d.apply(self.discriminator.params(), &grads)?;
        Ok(value)
    }

    /// Updates only the generator. Returns `(adv, perceptual, l1, total)`.
    pub fn generator_step(&mut self, batch: &Batch, fake: &Tensor) -> Result<[f64; 4]> {
        let ls = generator_objective(
            &self.discriminator,
            self.extractor.as_ref(),
            &self.config.weights,
            &batch.l,
            &batch.ab,
            fake,
        )?;
        let values = [
            self.finite("generator adversarial loss", losses::scalar(&ls.adv)?)?,
            self.finite("perceptual loss", losses::scalar(&ls.perceptual)?)?,
            self.finite("L1 loss", losses::scalar(&ls.l1)?)?,
            self.finite("generator loss", losses::scalar(&ls.total)?)?,
        ];
        let grads = ls.total.backward()?;
        self.opt_g.apply(self.generator.params(), &grads)?;
        Ok(values)
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let fake = self.generate(batch)?;
        let d_gan = self.discriminator_step(batch, &fake)?;
        let [g_gan, g_perceptual, g_l1, g_total] = self.generator_step(batch, &fake)?;
        self.iteration += 1;
        let m = StepMetrics {
            iteration: self.iteration,
            d_gan,
            g_gan,
            g_perceptual,
            g_l1,
            g_total,
        };
        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(m);
        Ok(m)
    }

    /// Eval-mode mean absolute chroma error over every sample of `data`.
    pub fn validation_l1(&self, data: &BatchStream) -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for batch in data.sequential() {
            let batch = batch?;
            let ab = self.generator.forward(&batch.l, &self.embedding(&batch)?, Mode::Eval)?;
            sum += losses::scalar(&losses::l1_loss(&ab, &batch.ab)?)? * batch.len() as f64;
            n += batch.len();
        }
        Ok(sum / n.max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.put_generator(&self.generator);
        ck.put_discriminator(&self.discriminator);
        ck.insert_prefixed("optim.generator", self.opt_g.named_tensors());
        ck.insert_prefixed("optim.discriminator", self.opt_d.named_tensors());
        ck.metadata.insert(META_ITERATION.into(), self.iteration.to_string());
        ck.metadata.insert(META_STEP_G.into(), self.opt_g.step.to_string());
        ck.metadata.insert(META_STEP_D.into(), self.opt_d.step.to_string());
        ck.set_metadata_json(META_TRAIN, &self.config);
        ck.set_metadata_json(META_HISTORY, &self.history);
        ck.metadata.extend(self.run_metadata.clone());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, extractor: Arc<dyn PerceptualExtractor>, device: &Device) -> Result<Self> {
        let config: TrainConfig = ck
            .metadata_json(META_TRAIN)?
            .ok_or_else(|| Error::CorruptCheckpoint("not a training checkpoint (no train config)".into()))?;
        let number = |key: &str| -> Result<u64> {
            ck.metadata
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing `{key}`")))
        };
        extractor.check_layer(config.weights.rho)?;
        let mut t = Self::from_parts(ck.generator(device)?, ck.discriminator(device)?, config, extractor)?;
        t.iteration = number(META_ITERATION)?;
        t.opt_g.restore(number(META_STEP_G)?, |k| ck.get(&format!("optim.generator.{k}")).cloned())?;
        t.opt_d.restore(number(META_STEP_D)?, |k| ck.get(&format!("optim.discriminator.{k}")).cloned())?;
        t.history = ck.metadata_json(META_HISTORY)?.unwrap_or_default();
        t.run_metadata = ck
            .metadata
            .iter()
            .filter(|(k, _)| k.starts_with(RUN_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path, extractor: Arc<dyn PerceptualExtractor>, device: &Device) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, device)?, extractor, device)
    }

    /// Loads the highest-numbered `ckpt-*.safetensors` in `run_dir`, if any.
    pub fn resume_latest(run_dir: &Path, extractor: Arc<dyn PerceptualExtractor>, device: &Device) -> Result<Option<Self>> {
        match checkpoints_in(run_dir)?.pop() {
            Some((_, path)) => Ok(Some(Self::load(&path, extractor, device)?)),
            None => Ok(None),
        }
    }
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt-{iteration:08}.safetensors")
}

/// `(iteration, path)` of every periodic checkpoint, ascending.
pub fn checkpoints_in(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(n) = name.strip_prefix("ckpt-").and_then(|r| r.strip_suffix(".safetensors")) {
            if let Ok(it) = n.parse() {
                out.push((it, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("train.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory {} is in use (remove {} if no run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub final_checkpoint: PathBuf,
    pub last: Option<StepMetrics>,
    pub best_validation_l1: Option<f64>,
}

struct RunDir<'a> {
    dir: &'a Path,
    keep_last: usize,
    last_durable: Option<PathBuf>,
    best: Option<f64>,
}

impl RunDir<'_> {
    fn persist(&mut self, ck: &Checkpoint, path: &Path) -> Result<()> {
        ck.save(path).map_err(|e| Error::Persist {
            path: path.to_path_buf(),
            last_durable: self.last_durable.clone(),
            msg: e.to_string(),
        })
    }

    fn checkpoint(&mut self, trainer: &Trainer, val: Option<&BatchStream>) -> Result<PathBuf> {
        let mut ck = trainer.to_checkpoint()?;
        let val_l1 = val.map(|v| trainer.validation_l1(v)).transpose()?;
        if let Some(v) = val_l1 {
            ck.metadata.insert(META_VAL_L1.into(), format!("{v}"));
        }
        let path = self.dir.join(checkpoint_name(trainer.iteration()));
        self.persist(&ck, &path)?;
        self.last_durable = Some(path.clone());
        if let Some(v) = val_l1 {
            if self.best.is_none_or(|b| v < b) {
                self.persist(&ck, &self.dir.join("best.safetensors"))?;
                self.best = Some(v);
                log::info!("iteration {}: new best validation L1 {v:.5}", trainer.iteration());
            }
        }
        let all = checkpoints_in(self.dir)?;
        for (_, old) in all.iter().take(all.len().saturating_sub(self.keep_last)) {
            std::fs::remove_file(old)?;
        }
        Ok(path)
    }
}

/// Runs `trainer` up to `config.iterations`, checkpointing into `run_dir`.
///
/// The batch for iteration `k` is `data.batch_at(k)`, so a resumed trainer
/// sees the same sequence as an uninterrupted one.
pub fn train(trainer: &mut Trainer, data: &BatchStream, val: Option<&BatchStream>, run_dir: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(run_dir)?;
    let _lock = RunLock::acquire(run_dir)?;
    let log_path = run_dir.join("metrics.tsv");
    let fresh = std::fs::metadata(&log_path).map_or(true, |m| m.len() == 0);
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
    if fresh {
        writeln!(log, "{}", StepMetrics::TSV_HEADER)?;
    }
    let best = Checkpoint::load(&run_dir.join("best.safetensors"), &Device::Cpu)
        .ok()
        .and_then(|ck| ck.metadata.get(META_VAL_L1).and_then(|v| v.parse().ok()));
    let mut dir = RunDir {
        dir: run_dir,
        keep_last: trainer.config.keep_last,
        last_durable: checkpoints_in(run_dir)?.pop().map(|(_, p)| p),
        best,
    };
    let mut last = None;
    let mut saved_at = None;
    let every = trainer.config.checkpoint_every;
    while trainer.iteration < trainer.config.iterations {
        let batch = data.batch_at(trainer.iteration)?;
        let m = match trainer.train_step(&batch) {
            Ok(m) => m,
            Err(e @ Error::NonFinite { .. }) => {
                let snap = run_dir.join(format!("nonfinite-{:08}.safetensors", trainer.iteration + 1));
                log::error!("{e}; writing diagnostic snapshot {}", snap.display());
                dir.persist(&trainer.to_checkpoint()?, &snap)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(log, "{}", m.tsv_row())?;
        if m.iteration % 100 == 0 {
            log::info!(
                "iteration {}: d_gan {:.4} g_gan {:.4} g_l1 {:.4}",
                m.iteration,
                m.d_gan,
                m.g_gan,
                m.g_l1
            );
        }
        last = Some(m);
        if m.iteration % every == 0 {
            log.flush()?;
            saved_at = Some(dir.checkpoint(trainer, val)?);
        }
    }
    log.flush()?;
    let final_checkpoint = match saved_at {
        Some(p) if p == run_dir.join(checkpoint_name(trainer.iteration)) => p,
        _ => dir.checkpoint(trainer, val)?,
    };
    Ok(TrainSummary {
        iterations: trainer.iteration,
        final_checkpoint,
        last,
        best_validation_l1: dir.best,
    })
}
