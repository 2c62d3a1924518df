//! Self-supervised pretraining and supervised fine-tuning loops.
//!
//! Pretraining runs the joint de-folding + de-mixing objective without ever
//! reading a label: each step (a) folds the paired batches, reconstructs them
//! through `G(D(·))`, and updates G and D on reconstruction + generator-side
//! adversarial loss; (b) updates the critic F on the Wasserstein loss against
//! the cached reconstructions, then clips its weights; (c) mixes the pairs
//! with fresh per-pair coefficients and updates D on the topological loss.
//! Fine-tuning initializes the detector H from the pretrained extractor and
//! minimizes cross-entropy on labeled data.
//!
//! Determinism: every epoch draws all of its randomness (shuffle, pairing,
//! fold/mix coefficients, collapse-guard noise) from a dedicated stream
//! derived from `(seed, epoch)`, so resuming from an epoch checkpoint
//! replays the remaining epochs bit-identically.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::{ImageSample, Label, Modality};
use crate::losses::{
    adversarial_from_scores, combined_pretrain_loss, loss_crossentropy, loss_reconstruction_raw,
    loss_topological, NoiseSpec,
};
use crate::models::{
    init_detector_from_extractor, BackboneConfig, Checkpoint, Detector, EmbeddingVector,
    EncoderCache, Extractor, ModelBundle, ParamNet,
};
use crate::nn::Feat;
use crate::optim::{Optimizer, OptimizerKind};
use crate::seeds;

// ── Datasets ─────────────────────────────────────────────────────────────────

/// Indexed image source. `image` must return samples with the label cleared
/// (pretraining consumes images only); `label` is the single point of label
/// access, so a counting wrapper can certify that pretraining never reads one.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The sample's pixels and metadata with `Label::Unlabeled` set.
    fn image(&self, idx: usize) -> Result<ImageSample>;

    /// The sample's ground-truth label.
    fn label(&self, idx: usize) -> Result<Label>;
}

/// In-memory dataset over owned samples.
pub struct VecDataset {
    samples: Vec<ImageSample>,
}

impl VecDataset {
    pub fn new(samples: Vec<ImageSample>) -> VecDataset {
        VecDataset { samples }
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }
}

impl Dataset for VecDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn image(&self, idx: usize) -> Result<ImageSample> {
        let sample = self
            .samples
            .get(idx)
            .ok_or_else(|| CoreError::InvalidInput(format!("index {idx} out of range")))?;
        let mut img = sample.clone();
        img.set_label(Label::Unlabeled);
        Ok(img)
    }

    fn label(&self, idx: usize) -> Result<Label> {
        self.samples
            .get(idx)
            .map(|s| s.label())
            .ok_or_else(|| CoreError::InvalidInput(format!("index {idx} out of range")))
    }
}

/// Wrapper that counts label reads; pretraining over it must leave the
/// counter at zero.
pub struct LabelCounting<'a> {
    inner: &'a dyn Dataset,
    reads: Cell<usize>,
}

impl<'a> LabelCounting<'a> {
    pub fn new(inner: &'a dyn Dataset) -> LabelCounting<'a> {
        LabelCounting {
            inner,
            reads: Cell::new(0),
        }
    }

    pub fn label_reads(&self) -> usize {
        self.reads.get()
    }
}

impl Dataset for LabelCounting<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn image(&self, idx: usize) -> Result<ImageSample> {
        self.inner.image(idx)
    }

    fn label(&self, idx: usize) -> Result<Label> {
        self.reads.set(self.reads.get() + 1);
        self.inner.label(idx)
    }
}

// ── Configs ──────────────────────────────────────────────────────────────────

/// Pretraining hyperparameters. Constructors carry the published per-modality
/// settings; epoch budgets are ours (the convergence criterion is a fixed
/// budget for reproducibility).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub critic_clip: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub modality: Modality,
}

impl PretrainConfig {
    pub fn paper_fingerprint(seed: u64) -> PretrainConfig {
        PretrainConfig {
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            learning_rate: 1e-6,
            weight_decay: 5e-4,
            batch_size: 12,
            epochs: 100,
            critic_clip: 0.01,
            noise: NoiseSpec::default(),
            seed,
            modality: Modality::Fingerprint,
        }
    }

    pub fn paper_face(seed: u64) -> PretrainConfig {
        PretrainConfig {
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 100,
            critic_clip: 0.01,
            noise: NoiseSpec::default(),
            seed,
            modality: Modality::Face,
        }
    }

    /// Desk-scale settings for the 32×32 architecture.
    pub fn tiny(seed: u64) -> PretrainConfig {
        PretrainConfig {
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            batch_size: 4,
            epochs: 10,
            critic_clip: 0.01,
            noise: NoiseSpec::default(),
            seed,
            modality: Modality::Fingerprint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // learning_rate = 0 is allowed as a diagnostic no-op mode.
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::InvalidSpec(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v.is_finite() && (0.0..1.0).contains(&v)) {
                return Err(CoreError::InvalidSpec(format!(
                    "{name} must lie in [0,1), got {v}"
                )));
            }
        }
        if self.batch_size < 2 {
            return Err(CoreError::InvalidSpec(format!(
                "batch_size must be at least 2 (mixing needs pairs), got {}",
                self.batch_size
            )));
        }
        if !(self.critic_clip.is_finite() && self.critic_clip > 0.0) {
            return Err(CoreError::InvalidSpec(format!(
                "critic_clip must be positive, got {}",
                self.critic_clip
            )));
        }
        self.noise.validate()
    }
}

/// Fine-tuning hyperparameters. `momentum` is SGD momentum, or Adam's first
/// moment decay (second moment decay pinned at 0.999).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn paper_fingerprint(seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 128,
            epochs: 50,
            seed,
        }
    }

    pub fn paper_face(seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 50,
            seed,
        }
    }

    pub fn tiny(seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 8,
            epochs: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(CoreError::InvalidSpec(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(CoreError::InvalidSpec(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(CoreError::InvalidSpec(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidSpec(
                "batch_size must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

fn build_optimizer(
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    wd: f64,
    n: usize,
) -> Optimizer {
    match kind {
        OptimizerKind::Adam => Optimizer::adam(lr, beta1, beta2, wd, n),
        OptimizerKind::Sgd => Optimizer::sgd(lr, beta1, wd, n),
    }
}

// ── History ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// One training step's losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub losses: BTreeMap<String, f64>,
}

/// One line of the newline-delimited training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HistoryLine {
    phase: Phase,
    epoch: usize,
    step: usize,
    loss: String,
    value: f64,
}

/// Per-step loss trace of a run. Step indices are global and strictly
/// increasing; recorded values are finite by construction (a non-finite loss
/// aborts the run instead).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub seed: u64,
    pub records: Vec<HistoryRecord>,
    pub wall_clock_seconds: f64,
}

impl TrainingHistory {
    pub fn new(seed: u64) -> TrainingHistory {
        TrainingHistory {
            seed,
            records: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    fn push(&mut self, record: HistoryRecord) -> Result<()> {
        for (name, v) in &record.losses {
            if !v.is_finite() {
                return Err(CoreError::InvalidInput(format!(
                    "loss {name:?} became non-finite ({v}) at step {}",
                    record.step
                )));
            }
        }
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(CoreError::InvalidInput(format!(
                    "step indices must increase: {} after {}",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// All recorded values of one loss, in step order.
    pub fn series(&self, loss: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.losses.get(loss).map(|v| (r.step, *v)))
            .collect()
    }

    /// Write the newline-delimited log: one JSON object per (step, loss) with
    /// fields phase/epoch/step/loss/value, floats in full precision.
    pub fn write_ndjson(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for record in &self.records {
            for (loss, value) in &record.losses {
                let line = HistoryLine {
                    phase: record.phase,
                    epoch: record.epoch,
                    step: record.step,
                    loss: loss.clone(),
                    value: *value,
                };
                writeln!(out, "{}", serde_json::to_string(&line)?)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Read a log written by `write_ndjson`, regrouping lines into per-step
    /// records. The seed and wall clock are not part of the log.
    pub fn read_ndjson(path: &Path) -> Result<TrainingHistory> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut history = TrainingHistory::new(0);
        for line in file.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: HistoryLine = serde_json::from_str(&line)?;
            match history.records.last_mut() {
                Some(last)
                    if last.step == parsed.step
                        && last.epoch == parsed.epoch
                        && last.phase == parsed.phase =>
                {
                    last.losses.insert(parsed.loss, parsed.value);
                }
                _ => {
                    let mut losses = BTreeMap::new();
                    losses.insert(parsed.loss, parsed.value);
                    history.records.push(HistoryRecord {
                        phase: parsed.phase,
                        epoch: parsed.epoch,
                        step: parsed.step,
                        losses,
                    });
                }
            }
        }
        Ok(history)
    }
}

// ── Pretraining ──────────────────────────────────────────────────────────────

/// Pretraining state: the model bundle plus one optimizer per network.
pub struct Pretrainer {
    bundle: ModelBundle,
    cfg: PretrainConfig,
    opt_extractor: Optimizer,
    opt_generator: Optimizer,
    opt_critic: Optimizer,
    epochs_done: usize,
}

impl Pretrainer {
    pub fn new(backbone: &BackboneConfig, cfg: &PretrainConfig) -> Result<Pretrainer> {
        cfg.validate()?;
        let bundle = ModelBundle::seeded(backbone, cfg.modality, cfg.seed)?;
        let build = |n| {
            build_optimizer(
                cfg.optimizer,
                cfg.learning_rate,
                cfg.beta1,
                cfg.beta2,
                cfg.weight_decay,
                n,
            )
        };
        Ok(Pretrainer {
            opt_extractor: build(bundle.extractor.param_count()),
            opt_generator: build(bundle.generator.param_count()),
            opt_critic: build(bundle.critic.param_count()),
            bundle,
            cfg: cfg.clone(),
            epochs_done: 0,
        })
    }

    /// Continue from an epoch checkpoint. The config must carry the same seed
    /// the checkpoint was produced with, or the epoch streams would diverge.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &PretrainConfig) -> Result<Pretrainer> {
        cfg.validate()?;
        if ckpt.seed != cfg.seed {
            return Err(CoreError::Incompatible(format!(
                "checkpoint seed {} does not match configured seed {}",
                ckpt.seed, cfg.seed
            )));
        }
        let epochs_done = match ckpt.kind {
            crate::models::CheckpointKind::Pretrain { epochs_done } => epochs_done,
            _ => {
                return Err(CoreError::Incompatible(
                    "checkpoint does not hold a pretraining bundle".to_string(),
                ))
            }
        };
        let bundle = ckpt.restore_bundle()?;
        let mut opts = Vec::with_capacity(3);
        for name in ["extractor", "generator", "critic"] {
            opts.push(ckpt.optimizers.get(name).cloned().ok_or_else(|| {
                CoreError::Incompatible(format!("checkpoint missing optimizer state {name:?}"))
            })?);
        }
        let opt_critic = opts.pop().expect("three states");
        let opt_generator = opts.pop().expect("two states");
        let opt_extractor = opts.pop().expect("one state");
        Ok(Pretrainer {
            bundle,
            cfg: cfg.clone(),
            opt_extractor,
            opt_generator,
            opt_critic,
            epochs_done,
        })
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut optimizers = BTreeMap::new();
        optimizers.insert("extractor".to_string(), self.opt_extractor.clone());
        optimizers.insert("generator".to_string(), self.opt_generator.clone());
        optimizers.insert("critic".to_string(), self.opt_critic.clone());
        Checkpoint::from_pretrain(&self.bundle, self.cfg.seed, self.epochs_done, optimizers)
    }

    /// One training step on an aligned pair of batches (`x_j` is a
    /// permutation of `x_i`). Returns the step's losses.
    ///
    /// RNG draw order: 2·b fold specs (the `x_i` half then the `x_j` half),
    /// then per pair one mixing coefficient, then the collapse-guard noise.
    pub fn step(
        &mut self,
        x_i: &[ImageSample],
        x_j: &[ImageSample],
        rng: &mut impl Rng,
    ) -> Result<BTreeMap<String, f64>> {
        if x_i.len() < 2 {
            return Err(CoreError::InvalidInput(format!(
                "a pretraining step needs at least 2 samples, got {}",
                x_i.len()
            )));
        }
        if x_i.len() != x_j.len() {
            return Err(CoreError::InvalidInput(format!(
                "paired batches differ in size: {} vs {}",
                x_i.len(),
                x_j.len()
            )));
        }
        let b = x_i.len();
        let n2 = 2 * b;
        let uses_skips = self.bundle.generator.uses_skips();

        // Phase (a): de-folding. Both halves pass through the fold →
        // reconstruct path; G and D descend on reconstruction +
        // generator-side adversarial loss against the current critic.
        let originals: Vec<&ImageSample> = x_i.iter().chain(x_j.iter()).collect();
        let mut enc_caches = Vec::with_capacity(n2);
        let mut gen_caches = Vec::with_capacity(n2);
        let mut fake_feats = Vec::with_capacity(n2);
        for x in &originals {
            let spec = crate::transforms::sample_fold_spec(rng, x.modality());
            let folded = crate::transforms::fold(x, &spec)?;
            let (c, h, w) = folded.shape();
            let enc = self
                .bundle
                .extractor
                .forward(&Feat::from_parts(c, h, w, folded.pixels().to_vec()));
            let skips = if uses_skips { Some(enc.acts()) } else { None };
            let (y, gen) = self.bundle.generator.forward(&enc.embedding, skips)?;
            enc_caches.push(enc);
            gen_caches.push(gen);
            fake_feats.push(y);
        }

        let ys: Vec<&[f64]> = fake_feats.iter().map(|f| f.data.as_slice()).collect();
        let xs: Vec<&[f64]> = originals.iter().map(|x| x.pixels()).collect();
        let (l_r, recon_grads) = loss_reconstruction_raw(&ys, &xs)?;

        let mut critic_fake_caches = Vec::with_capacity(n2);
        let mut fake_scores = Vec::with_capacity(n2);
        for y in &fake_feats {
            let (score, cache) = self.bundle.critic.forward(y);
            fake_scores.push(score);
            critic_fake_caches.push(cache);
        }
        let l_adv_gen = -fake_scores.iter().sum::<f64>() / n2 as f64;

        let mut g_extractor = vec![0.0; self.bundle.extractor.param_count()];
        let mut g_generator = vec![0.0; self.bundle.generator.param_count()];
        let mut scratch_critic = vec![0.0; self.bundle.critic.param_count()];
        for k in 0..n2 {
            // d(generator adversarial)/d y_k comes through the critic.
            let d_y_adv = self
                .bundle
                .critic
                .backward(&critic_fake_caches[k], -1.0 / n2 as f64, &mut scratch_critic, true)
                .expect("input gradient requested");
            let out = &fake_feats[k];
            let mut d_y = Feat::from_parts(out.c, out.h, out.w, recon_grads[k].clone());
            for (d, a) in d_y.data.iter_mut().zip(&d_y_adv.data) {
                *d += a;
            }
            let (dz, skip_grads) = self
                .bundle
                .generator
                .backward(&gen_caches[k], &d_y, &mut g_generator);
            self.bundle
                .extractor
                .backward(&enc_caches[k], &dz, &skip_grads, &mut g_extractor, false);
        }
        {
            let mut params = self.bundle.generator.flatten_params();
            self.opt_generator.step(&mut params, &g_generator)?;
            self.bundle.generator.load_params(&params)?;
        }
        {
            let mut params = self.bundle.extractor.flatten_params();
            self.opt_extractor.step(&mut params, &g_extractor)?;
            self.bundle.extractor.load_params(&params)?;
        }

        // Phase (b): critic update on originals vs the cached (detached)
        // reconstructions, followed by weight clipping.
        let mut real_scores = Vec::with_capacity(n2);
        let mut critic_real_caches = Vec::with_capacity(n2);
        for x in &originals {
            let (c, h, w) = x.shape();
            let (score, cache) = self
                .bundle
                .critic
                .forward(&Feat::from_parts(c, h, w, x.pixels().to_vec()));
            real_scores.push(score);
            critic_real_caches.push(cache);
        }
        let (_, f_loss) = adversarial_from_scores(&real_scores, &fake_scores)?;
        let mut g_critic = vec![0.0; self.bundle.critic.param_count()];
        for cache in &critic_real_caches {
            self.bundle
                .critic
                .backward(cache, -1.0 / n2 as f64, &mut g_critic, false);
        }
        for cache in &critic_fake_caches {
            self.bundle
                .critic
                .backward(cache, 1.0 / n2 as f64, &mut g_critic, false);
        }
        if self.cfg.learning_rate != 0.0 {
            let mut params = self.bundle.critic.flatten_params();
            self.opt_critic.step(&mut params, &g_critic)?;
            self.bundle.critic.load_params(&params)?;
            self.bundle.critic.clip_params(self.cfg.critic_clip);
        }

        // Phase (c): de-mixing. Mix each pair with a fresh coefficient,
        // embed originals and mixtures with the updated D, and descend on
        // the topological loss.
        let mut eps = Vec::with_capacity(b);
        let mut mixes = Vec::with_capacity(b);
        for p in 0..b {
            let spec = crate::transforms::sample_mix_spec(rng);
            let mixed = crate::transforms::mix(&x_i[p], &x_j[p], &spec)?;
            eps.push(spec.epsilon());
            mixes.push(mixed);
        }
        let embed_cache = |net: &Extractor, img: &ImageSample| {
            let (c, h, w) = img.shape();
            net.forward(&Feat::from_parts(c, h, w, img.pixels().to_vec()))
        };
        let orig_caches: Vec<EncoderCache> = x_i
            .iter()
            .map(|x| embed_cache(&self.bundle.extractor, x))
            .collect();
        let pair_caches: Vec<EncoderCache> = x_j
            .iter()
            .map(|x| embed_cache(&self.bundle.extractor, x))
            .collect();
        let mix_caches: Vec<EncoderCache> = mixes
            .iter()
            .map(|m| embed_cache(&self.bundle.extractor, m))
            .collect();
        let wrap = |caches: &[EncoderCache]| -> Vec<EmbeddingVector> {
            caches
                .iter()
                .map(|c| EmbeddingVector {
                    values: c.embedding.clone(),
                })
                .collect()
        };
        let (l_t, topo_grads) = loss_topological(
            &wrap(&mix_caches),
            &wrap(&orig_caches),
            &wrap(&pair_caches),
            &eps,
            &self.cfg.noise,
            rng,
        )?;
        let mut g_topo = vec![0.0; self.bundle.extractor.param_count()];
        for p in 0..b {
            self.bundle
                .extractor
                .backward(&mix_caches[p], &topo_grads.d_mix[p], &[], &mut g_topo, false);
            self.bundle
                .extractor
                .backward(&orig_caches[p], &topo_grads.d_i[p], &[], &mut g_topo, false);
            self.bundle
                .extractor
                .backward(&pair_caches[p], &topo_grads.d_j[p], &[], &mut g_topo, false);
        }
        {
            let mut params = self.bundle.extractor.flatten_params();
            self.opt_extractor.step(&mut params, &g_topo)?;
            self.bundle.extractor.load_params(&params)?;
        }

        let mut losses = BTreeMap::new();
        losses.insert("reconstruction".to_string(), l_r.value);
        losses.insert("adversarial".to_string(), l_adv_gen);
        losses.insert("topological".to_string(), l_t.value);
        let total = combined_pretrain_loss(&losses)?;
        losses.insert("critic".to_string(), f_loss.value);
        losses.insert("total".to_string(), total.value);
        Ok(losses)
    }

    /// Run epochs `epochs_done..cfg.epochs`. Each epoch shuffles the dataset
    /// with its own derived stream, pairs every batch with a within-batch
    /// permutation (derangement preferred, shift-by-1 fallback), and appends
    /// one history record per step. A checkpoint lands in `checkpoint_dir`
    /// after every epoch.
    pub fn run(
        &mut self,
        dataset: &dyn Dataset,
        checkpoint_dir: Option<&Path>,
        history: &mut TrainingHistory,
    ) -> Result<()> {
        if dataset.is_empty() {
            return Err(CoreError::InvalidInput("empty dataset".to_string()));
        }
        let n = dataset.len();
        let b = self.cfg.batch_size;
        let steps_per_epoch = n / b;
        for epoch in self.epochs_done..self.cfg.epochs {
            let mut rng = seeds::stream_rng(
                self.cfg.seed,
                seeds::streams::PRETRAIN_EPOCH_BASE + epoch as u64,
            );
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for s in 0..steps_per_epoch {
                let idxs = &order[s * b..(s + 1) * b];
                let batch: Vec<ImageSample> = idxs
                    .iter()
                    .map(|&i| dataset.image(i))
                    .collect::<Result<_>>()?;
                let perm = pairing_permutation(b, &mut rng);
                let paired: Vec<ImageSample> = perm.iter().map(|&p| batch[p].clone()).collect();
                let losses = self.step(&batch, &paired, &mut rng)?;
                history.push(HistoryRecord {
                    phase: Phase::Pretrain,
                    epoch,
                    step: epoch * steps_per_epoch + s,
                    losses,
                })?;
            }
            self.epochs_done = epoch + 1;
            if let Some(dir) = checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                self.checkpoint()
                    .save(&dir.join(format!("pretrain_epoch_{:04}.ckpt.json", epoch + 1)))?;
            }
        }
        Ok(())
    }
}

/// Within-batch pairing permutation: up to 32 shuffle attempts for a
/// derangement, then a shift-by-1 fallback.
fn pairing_permutation(b: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..b).collect();
    for _ in 0..32 {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
    (0..b).map(|i| (i + 1) % b).collect()
}

/// Pretrain from scratch: builds the bundle from the config seed, runs the
/// full epoch budget, and returns the trained extractor with its history.
pub fn pretrain(
    dataset: &dyn Dataset,
    backbone: &BackboneConfig,
    cfg: &PretrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Extractor, TrainingHistory)> {
    let start = std::time::Instant::now();
    let mut trainer = Pretrainer::new(backbone, cfg)?;
    let mut history = TrainingHistory::new(cfg.seed);
    trainer.run(dataset, checkpoint_dir, &mut history)?;
    history.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok((trainer.bundle.extractor.clone(), history))
}

/// Resume a pretraining run from a checkpoint and finish the epoch budget.
pub fn pretrain_resume(
    dataset: &dyn Dataset,
    ckpt: &Checkpoint,
    cfg: &PretrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Extractor, TrainingHistory)> {
    let start = std::time::Instant::now();
    let mut trainer = Pretrainer::from_checkpoint(ckpt, cfg)?;
    let mut history = TrainingHistory::new(cfg.seed);
    trainer.run(dataset, checkpoint_dir, &mut history)?;
    history.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok((trainer.bundle.extractor.clone(), history))
}

// ── Fine-tuning ──────────────────────────────────────────────────────────────

/// Fine-tune a detector (trunk and head) on labeled data by minimizing
/// cross-entropy. Every sample must be labeled.
pub fn finetune_detector(
    detector: &mut Detector,
    dataset: &dyn Dataset,
    cfg: &FinetuneConfig,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(CoreError::InvalidInput("empty dataset".to_string()));
    }
    let n = dataset.len();
    let mut targets = Vec::with_capacity(n);
    for idx in 0..n {
        match dataset.label(idx)?.target() {
            Some(t) => targets.push(t),
            None => {
                return Err(CoreError::InvalidInput(format!(
                    "sample {idx} is unlabeled; fine-tuning needs labels"
                )))
            }
        }
    }

    let start = std::time::Instant::now();
    let mut history = TrainingHistory::new(cfg.seed);
    let mut opt = build_optimizer(
        cfg.optimizer,
        cfg.learning_rate,
        cfg.momentum,
        0.999,
        cfg.weight_decay,
        detector.param_count(),
    );
    let b = cfg.batch_size;
    let steps_per_epoch = n / b;
    for epoch in 0..cfg.epochs {
        let mut rng = seeds::stream_rng(
            cfg.seed,
            seeds::streams::FINETUNE_EPOCH_BASE + epoch as u64,
        );
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for s in 0..steps_per_epoch {
            let idxs = &order[s * b..(s + 1) * b];
            let mut caches = Vec::with_capacity(b);
            let mut scores = Vec::with_capacity(b);
            let mut us = Vec::with_capacity(b);
            for &i in idxs {
                let img = dataset.image(i)?;
                let (c, h, w) = img.shape();
                let (logit, cache) = detector.forward(&Feat::from_parts(c, h, w, img.pixels().to_vec()));
                scores.push(crate::nn::sigmoid(logit));
                caches.push(cache);
                us.push(targets[i]);
            }
            let (l_c, d_scores) = loss_crossentropy(&scores, &us)?;
            let mut grads = vec![0.0; detector.param_count()];
            for k in 0..b {
                let d_logit = d_scores[k] * scores[k] * (1.0 - scores[k]);
                detector.backward(&caches[k], d_logit, &mut grads);
            }
            let mut params = detector.flatten_params();
            opt.step(&mut params, &grads)?;
            detector.load_params(&params)?;

            let mut losses = BTreeMap::new();
            losses.insert("cross_entropy".to_string(), l_c.value);
            history.push(HistoryRecord {
                phase: Phase::Finetune,
                epoch,
                step: epoch * steps_per_epoch + s,
                losses,
            })?;
        }
    }
    history.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(history)
}

/// Initialize a detector from a (pretrained) extractor and fine-tune it.
pub fn finetune(
    extractor: &Extractor,
    dataset: &dyn Dataset,
    cfg: &FinetuneConfig,
) -> Result<(Detector, TrainingHistory)> {
    let mut detector = init_detector_from_extractor(
        extractor,
        &mut seeds::stream_rng(cfg.seed, seeds::streams::DETECTOR_HEAD_INIT),
    );
    let history = finetune_detector(&mut detector, dataset, cfg)?;
    Ok((detector, history))
}

/// Baseline: fine-tune from a freshly initialized (never pretrained)
/// extractor with the same seed derivation as pretraining would use.
pub fn finetune_from_scratch(
    backbone: &BackboneConfig,
    dataset: &dyn Dataset,
    cfg: &FinetuneConfig,
) -> Result<(Detector, TrainingHistory)> {
    let extractor = Extractor::seeded(
        backbone,
        &mut seeds::stream_rng(cfg.seed, seeds::streams::EXTRACTOR_INIT),
    )?;
    finetune(&extractor, dataset, cfg)
}
