//! Alternating adversarial training with resumable checkpoints and a
//! JSON-lines metrics log, plus contrastive training of the embedder.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{augment, load_manifest, load_tile, AugmentConfig, Split};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, GeneratorOutput};
use crate::imageops::resize;
use crate::interpretability::{SiameseConfig, SiameseEmbedder};
use crate::losses::{
    bce_with_logits, contrastive_loss_batch, feature_loss, focal_frequency_loss, perceptual_loss, pixel_loss,
    scalar, style_loss, FeatureExtractor, IdentityExtractor, LossTerms, LossWeights, Vgg16Features,
};
use crate::nn::{self, Adam, AdamConfig, Ctx};
use crate::preprocess::{assemble_triplet, edge_map, ensure_rgb, to_grayscale, PreprocessConfig, SampleTriplet};
use crate::tile::{ImageTile, ValueRange};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub toy_mode: bool,
    /// Real label used for the discriminator's real batch (1 = none).
    pub real_label: f64,
    pub ffl_alpha: f64,
    /// Random resize/crop/flip of every served pair.
    pub augment: bool,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub preprocess: PreprocessConfig,
    /// VGG-16 safetensors for the perceptual and style losses.
    pub perceptual_weights: Option<PathBuf>,
}

impl TrainConfig {
    pub fn reference() -> Self {
        Self {
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 4,
            steps: 1000,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 100,
            toy_mode: false,
            real_label: 1.0,
            ffl_alpha: 1.0,
            augment: true,
            generator: GeneratorConfig::reference(),
            discriminator: DiscriminatorConfig::default(),
            preprocess: PreprocessConfig::default(),
            perceptual_weights: None,
        }
    }

    /// 64x64 inputs, five encoder levels, batch 16, networks at 1/16 width.
    pub fn toy() -> Self {
        Self {
            batch_size: 16,
            toy_mode: true,
            generator: GeneratorConfig::toy().with_width_divisor(16),
            discriminator: DiscriminatorConfig { width_divisor: 16 },
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        for (n, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{n} = {b} outside [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint_every must be positive"));
        }
        if !(0.0..=1.0).contains(&self.real_label) {
            return Err(Error::invalid(format!("real label {} outside [0, 1]", self.real_label)));
        }
        self.weights.validate()?;
        self.generator.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::reference()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_pix: f64,
    pub g_ffl: f64,
    pub g_perc: f64,
    pub g_style: f64,
    pub g_feat: f64,
    pub total: f64,
}

/// Outcome of one discriminator update.
pub struct DiscriminatorUpdate {
    pub loss: f64,
    /// Edge view of the translation, reused by the generator update.
    pub fake_edge: Tensor,
    /// Detached logits on the real and the translated batch.
    pub logits: Vec<Tensor>,
}

/// Metrics plus the extreme discriminator probabilities seen in the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub metrics: StepMetrics,
    pub prob_min: f64,
    pub prob_max: f64,
}

/// Stacked network inputs and targets for one step.
pub struct Batch {
    pub structure: Tensor,
    pub texture: Tensor,
    pub target: Tensor,
    pub target_edge: Tensor,
    pub target_gray: Tensor,
    /// Dataset indices, reported when a step fails.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn new(triplets: &[SampleTriplet], indices: Vec<usize>, pre: &PreprocessConfig, dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        let mut targets = Vec::with_capacity(triplets.len());
        let mut edges = Vec::with_capacity(triplets.len());
        let mut grays = Vec::with_capacity(triplets.len());
        for t in triplets {
            let eo = t
                .target
                .as_ref()
                .ok_or_else(|| Error::invalid("training triplets need an optical target"))?;
            let gray = to_grayscale(eo, pre.gray_weights)?;
            edges.push(edge_map(&gray, pre)?);
            grays.push(gray);
            targets.push(eo);
        }
        Ok(Self {
            structure: ImageTile::batch_to_tensor(&triplets.iter().map(|t| &t.structure).collect::<Vec<_>>(), dtype, &dev)?,
            texture: ImageTile::batch_to_tensor(&triplets.iter().map(|t| &t.texture).collect::<Vec<_>>(), dtype, &dev)?,
            target: ImageTile::batch_to_tensor(&targets, dtype, &dev)?,
            target_edge: ImageTile::batch_to_tensor(&edges.iter().collect::<Vec<_>>(), dtype, &dev)?,
            target_gray: ImageTile::batch_to_tensor(&grays.iter().collect::<Vec<_>>(), dtype, &dev)?,
            indices,
        })
    }
}

fn gray_tensor(rgb: &Tensor, weights: [f64; 3]) -> Result<Tensor> {
    let mut g = (rgb.narrow(1, 0, 1)? * weights[0])?;
    for (c, w) in weights.iter().enumerate().skip(1) {
        g = (g + (rgb.narrow(1, c, 1)? * *w)?)?;
    }
    Ok(g)
}

fn edges_of(images: &Tensor, pre: &PreprocessConfig) -> Result<Tensor> {
    let tiles = ImageTile::unbatch(&images.detach(), ValueRange::SIGNED_UNIT)?;
    let mut edges = Vec::with_capacity(tiles.len());
    for t in &tiles {
        edges.push(edge_map(&to_grayscale(&t.clamped(), pre.gray_weights)?, pre)?);
    }
    ImageTile::batch_to_tensor(&edges.iter().collect::<Vec<_>>(), images.dtype(), &Device::Cpu)
}

/// Extreme sigmoid values of raw discriminator logits, evaluated in f64
/// without clamping.
fn prob_range(logits: &[Tensor]) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for l in logits {
        for v in l.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            let p = 1.0 / (1.0 + (-v).exp());
            lo = lo.min(p);
            hi = hi.max(p);
        }
    }
    Ok((lo, hi))
}

/// Random stream for one step: the run seed on a step-specific stream.
pub fn step_rng(seed: u64, step: u64, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ salt);
    r.set_stream(step);
    r
}

const DROPOUT_SALT: u64 = 0x5eed_d0d0;
const DATA_SALT: u64 = 0xda7a_5eed;

pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    g_opt: Adam,
    d_opt: Adam,
    extractor: Option<Box<dyn FeatureExtractor>>,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(mut config: TrainConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let extractor: Option<Box<dyn FeatureExtractor>> = match &config.perceptual_weights {
            Some(p) => Some(Box::new(Vgg16Features::load(p, dtype)?)),
            None => {
                if config.weights.w_perc != 0.0 {
                    log::warn!("no perceptual extractor configured; w_perc forced to 0");
                    config.weights.w_perc = 0.0;
                }
                None
            }
        };
        let generator = Generator::new(config.generator.clone(), dtype, config.seed)?;
        let discriminator = Discriminator::new(config.discriminator.clone(), dtype, config.seed.wrapping_add(1))?;
        let g_opt = Adam::new(generator.store(), config.adam())?;
        let d_opt = Adam::new(discriminator.store(), config.adam())?;
        Ok(Self {
            config,
            generator,
            discriminator,
            g_opt,
            d_opt,
            extractor,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Generator forward pass for the next step, in training mode.
    pub fn generate_batch(&self, batch: &Batch) -> Result<GeneratorOutput> {
        let mut ctx = Ctx::train(step_rng(self.config.seed, self.step + 1, DROPOUT_SALT));
        self.generator.forward(&batch.structure, &batch.texture, &mut ctx)
    }

    fn non_finite(&self, term: &str, batch: &Batch) -> Error {
        Error::NonFinite {
            term: term.to_string(),
            step: self.step + 1,
            batch: batch.indices.clone(),
        }
    }

    /// Real-vs-fake update of the discriminator on a detached translation.
    /// Only discriminator parameters move.
    pub fn update_discriminator(&mut self, batch: &Batch, out: &GeneratorOutput) -> Result<DiscriminatorUpdate> {
        let cfg = &self.config;
        let pre = &cfg.preprocess;
        let fake = out.image.detach();
        let fake_edge = edges_of(&fake, pre)?;
        let ctx = Ctx::train(step_rng(cfg.seed, self.step + 1, DROPOUT_SALT + 1));
        let real_logits = self
            .discriminator
            .logits(&batch.target, &batch.target_edge, &batch.target_gray, &ctx)?;
        let fake_logits = self
            .discriminator
            .logits(&fake, &fake_edge, &gray_tensor(&fake, pre.gray_weights)?, &ctx)?;
        let loss = ((bce_with_logits(&real_logits, cfg.real_label)? + bce_with_logits(&fake_logits, 0.0)?)? * 0.5)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(self.non_finite("d_loss", batch));
        }
        let grads = loss.backward()?;
        self.d_opt.step(&grads)?;
        Ok(DiscriminatorUpdate {
            loss: value,
            fake_edge,
            logits: vec![real_logits.detach(), fake_logits.detach()],
        })
    }

    /// Weighted-loss update of the generator with the discriminator frozen.
    /// Only generator parameters move.
    pub fn update_generator(
        &mut self,
        batch: &Batch,
        out: &GeneratorOutput,
        fake_edge: &Tensor,
    ) -> Result<(LossTerms, f64, Tensor)> {
        let cfg = &self.config;
        let frozen = Ctx::frozen_train(step_rng(cfg.seed, self.step + 1, DROPOUT_SALT + 2));
        let gen_gray = gray_tensor(&out.image, cfg.preprocess.gray_weights)?;
        let adv_logits = self.discriminator.logits(&out.image, fake_edge, &gen_gray, &frozen)?;
        let w = cfg.weights;
        let adv = bce_with_logits(&adv_logits, 1.0)?;
        let pix = pixel_loss(&out.image, &batch.target)?;
        let ffl = focal_frequency_loss(&out.image, &batch.target, cfg.ffl_alpha)?;
        let perc = match (&self.extractor, w.w_perc > 0.0) {
            (Some(ex), true) => Some(perceptual_loss(&out.image, &batch.target, Some(ex.as_ref()))?),
            _ => None,
        };
        let style = if w.w_style > 0.0 {
            let ex: &dyn FeatureExtractor = match &self.extractor {
                Some(e) => e.as_ref(),
                None => &IdentityExtractor,
            };
            Some(style_loss(&ex.features(&out.image)?, &ex.features(&batch.target)?)?)
        } else {
            None
        };
        let feat = feature_loss(
            self.generator.heads(),
            &out.texture_feature,
            &out.structure_feature,
            Some(&batch.target),
            Some(&batch.target_edge),
        )?;
        let opt = |t: &Option<Tensor>| -> Result<f64> { t.as_ref().map(scalar).unwrap_or(Ok(0.0)) };
        let terms = LossTerms {
            adv: scalar(&adv)?,
            pix: scalar(&pix)?,
            ffl: scalar(&ffl)?,
            perc: opt(&perc)?,
            style: opt(&style)?,
            feat: scalar(&feat)?,
        };
        if let Some(t) = terms.first_non_finite() {
            return Err(self.non_finite(t, batch));
        }
        let mut total = ((adv * w.w_adv)? + (pix * w.w_pix)?)?;
        total = (total + (ffl * w.w_ffl)?)?;
        if let Some(p) = perc {
            total = (total + (p * w.w_perc)?)?;
        }
        if let Some(s) = style {
            total = (total + (s * w.w_style)?)?;
        }
        total = (total + (feat * w.w_feat)?)?;
        let total_value = scalar(&total)?;
        if !total_value.is_finite() {
            return Err(self.non_finite("total", batch));
        }
        let grads = total.backward()?;
        self.g_opt.step(&grads)?;
        Ok((terms, total_value, adv_logits.detach()))
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepOutcome> {
        let out = self.generate_batch(batch)?;
        let d = self.update_discriminator(batch, &out)?;
        let (terms, total, adv_logits) = self.update_generator(batch, &out, &d.fake_edge)?;
        let mut logits = d.logits;
        logits.push(adv_logits);
        let (prob_min, prob_max) = prob_range(&logits)?;
        self.step += 1;
        Ok(StepOutcome {
            metrics: StepMetrics {
                step: self.step,
                d_loss: d.loss,
                g_adv: terms.adv,
                g_pix: terms.pix,
                g_ffl: terms.ffl,
                g_perc: terms.perc,
                g_style: terms.style,
                g_feat: terms.feat,
                total,
            },
            prob_min,
            prob_max,
        })
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.generator.save(&dir.join(GENERATOR_FILE))?;
        self.discriminator.save(&dir.join(DISCRIMINATOR_FILE))?;
        let mut tensors = self.g_opt.state_tensors("generator");
        tensors.extend(self.d_opt.state_tensors("discriminator"));
        let opt_path = dir.join(OPTIMIZER_FILE);
        safetensors::serialize_to_file(tensors, None, &opt_path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", opt_path.display())))?;
        let state = CheckpointState {
            step: self.step,
            g_updates: self.g_opt.steps_taken(),
            d_updates: self.d_opt.steps_taken(),
            config: self.config.clone(),
        };
        let sp = dir.join(STATE_FILE);
        fs::write(&sp, serde_json::to_string_pretty(&state)?).map_err(|e| Error::io(&sp, e))
    }

    /// Restores networks, optimizer moments and the step counter.
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let sp = dir.join(STATE_FILE);
        let state: CheckpointState =
            serde_json::from_str(&fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?)?;
        let g = Generator::load_expecting(&dir.join(GENERATOR_FILE), &self.config.generator)?;
        let d = Discriminator::load(&dir.join(DISCRIMINATOR_FILE))?;
        if d.config() != self.discriminator.config() {
            return Err(Error::Checkpoint(format!(
                "{} holds a discriminator for {:?}",
                dir.display(),
                d.config()
            )));
        }
        let tensors = nn::read_checkpoint(&dir.join(OPTIMIZER_FILE))?.0;
        drop((g, d));
        self.generator
            .store()
            .load_from(&nn::read_checkpoint(&dir.join(GENERATOR_FILE))?.0)?;
        self.discriminator
            .store()
            .load_from(&nn::read_checkpoint(&dir.join(DISCRIMINATOR_FILE))?.0)?;
        self.g_opt.restore("generator", state.g_updates, &tensors)?;
        self.d_opt.restore("discriminator", state.d_updates, &tensors)?;
        self.step = state.step;
        Ok(())
    }
}

pub const GENERATOR_FILE: &str = "generator.safetensors";
pub const DISCRIMINATOR_FILE: &str = "discriminator.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const STATE_FILE: &str = "state.json";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointState {
    step: u64,
    g_updates: u64,
    d_updates: u64,
    config: TrainConfig,
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:06}"))
}

/// Latest complete checkpoint (one whose state file was written).
pub fn latest_checkpoint(out: &Path) -> Option<(u64, PathBuf)> {
    let dir = out.join("checkpoints");
    let mut best: Option<(u64, PathBuf)> = None;
    for e in fs::read_dir(&dir).ok()?.flatten() {
        let name = e.file_name().to_string_lossy().to_string();
        let Some(n) = name.strip_prefix("step_").and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if e.path().join(STATE_FILE).exists() && best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, e.path()));
        }
    }
    best
}

/// Step numbers at which `train` writes checkpoints.
pub fn checkpoint_schedule(steps: u64, every: u64) -> Vec<u64> {
    if steps == 0 {
        return vec![0];
    }
    let mut v: Vec<u64> = (1..=steps / every).map(|k| k * every).collect();
    if v.last() != Some(&steps) {
        v.push(steps);
    }
    v
}

/// Loaded training pairs with the seeded batch schedule.
pub struct PairDataset {
    pub pairs: Vec<(ImageTile, ImageTile)>,
}

impl PairDataset {
    pub fn from_manifest(path: &Path, split: Split) -> Result<Self> {
        let m = load_manifest(path)?;
        let mut pairs = Vec::new();
        for e in m.split(split) {
            let sar = ensure_rgb(&load_tile(&e.sar_path, ValueRange::SIGNED_UNIT)?)?;
            let eo = ensure_rgb(&load_tile(&e.eo_path, ValueRange::SIGNED_UNIT)?)?;
            pairs.push((sar, eo));
        }
        if pairs.is_empty() {
            return Err(Error::invalid(format!(
                "manifest {} has no usable {split:?} entries",
                path.display()
            )));
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Indices served at `step`: consecutive slices of per-epoch shuffles.
    pub fn indices(&self, seed: u64, step: u64, batch: usize) -> Vec<usize> {
        let n = self.pairs.len();
        let start = (step - 1) as usize * batch;
        let mut out = Vec::with_capacity(batch);
        let mut epoch = usize::MAX;
        let mut perm: Vec<usize> = Vec::new();
        for p in start..start + batch {
            let e = p / n;
            if e != epoch {
                epoch = e;
                perm = (0..n).collect();
                perm.shuffle(&mut step_rng(seed, e as u64, DATA_SALT));
            }
            out.push(perm[p % n]);
        }
        out
    }

    pub fn batch(&self, cfg: &TrainConfig, step: u64) -> Result<Batch> {
        let size = cfg.generator.input_size;
        let idx = self.indices(cfg.seed, step, cfg.batch_size);
        let mut rng = step_rng(cfg.seed, step, DATA_SALT + 1);
        let aug = AugmentConfig::for_crop(size);
        let mut triplets = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (sar, eo) = &self.pairs[i];
            let (s, e) = if cfg.augment {
                augment(sar, eo, rng.random(), &aug)?
            } else if (sar.height(), sar.width()) != (size, size) {
                (resize(sar, size, size)?, resize(eo, size, size)?)
            } else {
                (sar.clone(), eo.clone())
            };
            triplets.push(assemble_triplet(&s, Some(&e), &cfg.preprocess)?);
        }
        Batch::new(&triplets, idx, &cfg.preprocess, DType::F32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub resumed_from: Option<u64>,
    pub steps_run: u64,
}

/// Runs (or resumes) training, writing checkpoints and the metrics log
/// under `out`.
pub fn train(manifest: &Path, config: &TrainConfig, out: &Path) -> Result<TrainSummary> {
    let data = PairDataset::from_manifest(manifest, Split::Train)?;
    let mut trainer = Trainer::new(config.clone())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resumed_from = match latest_checkpoint(out) {
        Some((k, dir)) => {
            trainer.load_checkpoint(&dir)?;
            trainer.config.steps = config.steps;
            Some(k)
        }
        None => None,
    };
    let start = trainer.step();
    let log_path = out.join(LOG_FILE);
    truncate_log(&log_path, start)?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let schedule = checkpoint_schedule(config.steps, config.checkpoint_every);
    let mut last = latest_checkpoint(out).map(|(_, p)| p);
    if config.steps == 0 && last.is_none() {
        let dir = checkpoint_dir(out, 0);
        trainer.save_checkpoint(&dir)?;
        last = Some(dir);
    }
    for step in start + 1..=config.steps {
        let batch = data.batch(&trainer.config, step)?;
        let outcome = trainer.train_step(&batch)?;
        let line = serde_json::to_string(&outcome.metrics)?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        if schedule.contains(&step) {
            let dir = checkpoint_dir(out, step);
            trainer.save_checkpoint(&dir)?;
            last = Some(dir);
        }
    }
    let final_checkpoint = last.ok_or_else(|| Error::Checkpoint("no checkpoint written".into()))?;
    Ok(TrainSummary {
        final_checkpoint,
        resumed_from,
        steps_run: config.steps.saturating_sub(start),
    })
}

/// Drops log lines past `step` (left by an interrupted run).
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let m: StepMetrics = serde_json::from_str(line)?;
        if m.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiameseTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub margin: f64,
    pub seed: u64,
    pub embedder: SiameseConfig,
}

impl Default for SiameseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            margin: 1.0,
            seed: 0,
            embedder: SiameseConfig::default(),
        }
    }
}

/// Contrastive training on matched pairs. Each batch pairs every SAR tile
/// with its own EO tile (positive) and with the next tile's EO (negative).
pub fn train_siamese_on(pairs: &[(ImageTile, ImageTile)], cfg: &SiameseTrainConfig) -> Result<(SiameseEmbedder, Vec<f64>)> {
    if pairs.len() < 2 {
        return Err(Error::invalid("contrastive training needs at least 2 pairs to form negatives"));
    }
    if cfg.batch_size < 2 {
        return Err(Error::invalid("contrastive batches need at least 2 pairs"));
    }
    let emb = SiameseEmbedder::new(cfg.embedder.clone(), DType::F32, cfg.seed)?;
    let mut opt = Adam::new(
        emb.store(),
        AdamConfig {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: 1e-8,
        },
    )?;
    let prepared: Vec<(Tensor, Tensor)> = pairs
        .iter()
        .map(|(s, e)| Ok((emb.prepare(s)?, emb.prepare(e)?)))
        .collect::<Result<_>>()?;
    let b = cfg.batch_size.min(pairs.len());
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let n = pairs.len();
    for step in 1..=cfg.steps {
        let mut rng = step_rng(cfg.seed, step, DATA_SALT + 7);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let idx = &order[..b];
        let sar = Tensor::cat(&idx.iter().map(|&i| &prepared[i].0).collect::<Vec<_>>(), 0)?;
        let eo = Tensor::cat(&idx.iter().map(|&i| &prepared[i].1).collect::<Vec<_>>(), 0)?;
        let es = emb.embed_tensor(&sar)?;
        let ee = emb.embed_tensor(&eo)?;
        let rolled = Tensor::cat(&[&ee.narrow(0, 1, b - 1)?, &ee.narrow(0, 0, 1)?], 0)?;
        let dist = |a: &Tensor, c: &Tensor| -> Result<Tensor> {
            Ok(((a - c)?.sqr()?.sum(1)? + 1e-12)?.sqrt()?)
        };
        let d = Tensor::cat(&[&dist(&es, &ee)?, &dist(&es, &rolled)?], 0)?;
        let labels: Vec<f32> = (0..2 * b).map(|i| if i < b { 1.0 } else { 0.0 }).collect();
        let same = Tensor::from_vec(labels, 2 * b, &Device::Cpu)?;
        let loss = contrastive_loss_batch(&d, &same, cfg.margin)?;
        let lv = scalar(&loss)?;
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                term: "contrastive".into(),
                step,
                batch: idx.to_vec(),
            });
        }
        opt.step(&loss.backward()?)?;
        losses.push(lv);
    }
    Ok((emb, losses))
}

/// Trains the embedder on the manifest's training pairs and saves it.
pub fn train_siamese(manifest: &Path, cfg: &SiameseTrainConfig, out: &Path) -> Result<PathBuf> {
    let data = PairDataset::from_manifest(manifest, Split::Train)?;
    let (emb, losses) = train_siamese_on(&data.pairs, cfg)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    emb.save(out)?;
    log::info!(
        "embedder trained for {} steps, final loss {:?}",
        cfg.steps,
        losses.last()
    );
    Ok(out.to_path_buf())
}
