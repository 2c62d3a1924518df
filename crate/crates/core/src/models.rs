//! The four networks of the pipeline and their checkpoint format.
//!
//! - Extractor `D`: strided conv stack → global average pool → linear map to
//!   the embedding. The embedding is the global-pooled vector; it feeds the
//!   generator, the topological loss, and the detector head alike.
//! - Generator `G`: linear map from the embedding to a small feature map,
//!   then upsample+conv stages ending in a sigmoid so reconstructions stay in
//!   the pixel domain. Paper-scale configs join the extractor's intermediate
//!   feature maps as U-Net skips; the tiny config decodes from the embedding
//!   alone.
//! - Critic `F`: architecturally identical to the extractor; its unbounded
//!   scalar score is the mean of the embedding (an unparameterized reduction,
//!   so D and F have exactly the same parameter count).
//! - Detector `H`: the extractor trunk plus a single linear head; its sigmoid
//!   output is the spoofness score (higher = more likely attack).
//!
//! All parameters are `f64`. Every network exposes its parameters both as one
//! flat vector (for optimizers and gradient checks) and as name-keyed arrays
//! (for checkpoints).

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::{ImageSample, Label, Modality};
use crate::nn::{
    concat_channels, elu, elu_deriv, global_avg_pool, global_avg_pool_backward, sigmoid,
    split_channels, upsample_nearest2, upsample_nearest2_backward, Conv2d, Feat, Linear,
};
use crate::optim::Optimizer;
use crate::seeds;

/// Which architecture family to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    PaperFingerprint,
    PaperFace,
    Tiny,
}

/// Backbone hyperparameters shared by all four networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub arch_id: ArchId,
    /// (channels, height, width) of every input image.
    pub input_shape: (usize, usize, usize),
    pub embedding_dim: usize,
    /// Scales every stage's channel count (minimum 4 per stage).
    pub width_multiplier: f64,
}

/// Channel/stride plan for one architecture. `skip_generator` selects the
/// U-Net path (generator consumes encoder feature maps at matching
/// resolutions) versus the plain decoder.
struct StagePlan {
    encoder: Vec<(usize, usize)>, // (out channels, stride)
    decoder: Vec<usize>,          // intermediate channels, one per upsample except the last
    skip_generator: bool,
}

impl BackboneConfig {
    pub fn tiny() -> BackboneConfig {
        BackboneConfig {
            arch_id: ArchId::Tiny,
            input_shape: (1, 32, 32),
            embedding_dim: 32,
            width_multiplier: 1.0,
        }
    }

    pub fn paper_fingerprint() -> BackboneConfig {
        BackboneConfig {
            arch_id: ArchId::PaperFingerprint,
            input_shape: (1, 224, 224),
            embedding_dim: 128,
            width_multiplier: 1.0,
        }
    }

    pub fn paper_face() -> BackboneConfig {
        BackboneConfig {
            arch_id: ArchId::PaperFace,
            input_shape: (3, 256, 256),
            embedding_dim: 128,
            width_multiplier: 1.0,
        }
    }

    fn plan(&self) -> StagePlan {
        let scale = |ch: usize| ((ch as f64 * self.width_multiplier).round() as usize).max(4);
        match self.arch_id {
            ArchId::Tiny => StagePlan {
                encoder: vec![(scale(8), 2), (scale(16), 2), (scale(16), 2)],
                decoder: vec![scale(20), scale(12)],
                skip_generator: false,
            },
            ArchId::PaperFingerprint => StagePlan {
                encoder: vec![
                    (scale(16), 2),
                    (scale(24), 2),
                    (scale(32), 2),
                    (scale(64), 2),
                    (scale(96), 1),
                ],
                decoder: vec![scale(64), scale(48), scale(32)],
                skip_generator: true,
            },
            ArchId::PaperFace => StagePlan {
                encoder: vec![
                    (scale(32), 2),
                    (scale(64), 2),
                    (scale(128), 2),
                    (scale(256), 2),
                    (scale(256), 1),
                ],
                decoder: vec![scale(128), scale(96), scale(64)],
                skip_generator: true,
            },
        }
    }

    fn downsamples(&self) -> usize {
        self.plan().encoder.iter().filter(|(_, s)| *s == 2).count()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c != 1 && c != 3 {
            return Err(CoreError::InvalidSpec(format!(
                "input channels must be 1 or 3, got {c}"
            )));
        }
        if self.embedding_dim < 8 {
            return Err(CoreError::InvalidSpec(format!(
                "embedding_dim must be at least 8, got {}",
                self.embedding_dim
            )));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(CoreError::InvalidSpec(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        let div = 1usize << self.downsamples();
        if h % div != 0 || w % div != 0 || h / div == 0 || w / div == 0 {
            return Err(CoreError::InvalidSpec(format!(
                "input {h}x{w} must be divisible by {div} for the {:?} stage plan",
                self.arch_id
            )));
        }
        Ok(())
    }
}

/// The global-pooled latent representation produced by the extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

// ── Parameter plumbing shared by all networks ───────────────────────────────

/// Borrow of one parameterized layer.
pub enum LayerSlot<'a> {
    Conv(&'a Conv2d),
    Lin(&'a Linear),
}

pub enum LayerSlotMut<'a> {
    Conv(&'a mut Conv2d),
    Lin(&'a mut Linear),
}

impl LayerSlot<'_> {
    fn weight(&self) -> &[f64] {
        match self {
            LayerSlot::Conv(c) => &c.weight,
            LayerSlot::Lin(l) => &l.weight,
        }
    }
    fn bias(&self) -> &[f64] {
        match self {
            LayerSlot::Conv(c) => &c.bias,
            LayerSlot::Lin(l) => &l.bias,
        }
    }
}

impl LayerSlotMut<'_> {
    fn weight_bias(&mut self) -> (&mut Vec<f64>, &mut Vec<f64>) {
        match self {
            LayerSlotMut::Conv(c) => (&mut c.weight, &mut c.bias),
            LayerSlotMut::Lin(l) => (&mut l.weight, &mut l.bias),
        }
    }
}

/// Uniform parameter access: flat vectors for optimizers/gradients and
/// name-keyed arrays for checkpoints. Flat layout is the `named_layers`
/// order, weight then bias per layer.
pub trait ParamNet {
    fn named_layers(&self) -> Vec<(String, LayerSlot<'_>)>;
    fn named_layers_mut(&mut self) -> Vec<(String, LayerSlotMut<'_>)>;

    fn param_count(&self) -> usize {
        self.named_layers()
            .iter()
            .map(|(_, l)| l.weight().len() + l.bias().len())
            .sum()
    }

    fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, layer) in self.named_layers() {
            out.extend_from_slice(layer.weight());
            out.extend_from_slice(layer.bias());
        }
        out
    }

    fn load_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(CoreError::Incompatible(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut pos = 0;
        for (_, mut layer) in self.named_layers_mut() {
            let (w, b) = layer.weight_bias();
            let (wn, bn) = (w.len(), b.len());
            w.copy_from_slice(&flat[pos..pos + wn]);
            pos += wn;
            b.copy_from_slice(&flat[pos..pos + bn]);
            pos += bn;
        }
        Ok(())
    }

    /// Checkpoint view: `<layer>.weight` / `<layer>.bias` arrays.
    fn named_param_arrays(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (name, layer) in self.named_layers() {
            out.push((format!("{name}.weight"), layer.weight().to_vec()));
            out.push((format!("{name}.bias"), layer.bias().to_vec()));
        }
        out
    }

    fn load_named_param_arrays(
        &mut self,
        arrays: &BTreeMap<String, Vec<f64>>,
        prefix: &str,
    ) -> Result<()> {
        for (name, mut layer) in self.named_layers_mut() {
            let (w, b) = layer.weight_bias();
            for (suffix, buf) in [("weight", w), ("bias", b)] {
                let key = format!("{prefix}{name}.{suffix}");
                let src = arrays.get(&key).ok_or_else(|| {
                    CoreError::Incompatible(format!("checkpoint missing array {key:?}"))
                })?;
                if src.len() != buf.len() {
                    return Err(CoreError::Incompatible(format!(
                        "array {key:?} has length {}, expected {}",
                        src.len(),
                        buf.len()
                    )));
                }
                buf.copy_from_slice(src);
            }
        }
        Ok(())
    }

    /// Clamp every parameter into `[-c, c]` (Wasserstein critic clipping).
    fn clip_params(&mut self, c: f64) {
        for (_, mut layer) in self.named_layers_mut() {
            let (w, b) = layer.weight_bias();
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = v.clamp(-c, c);
            }
        }
    }
}

/// Carve a flat gradient buffer into per-layer (weight, bias) slices in the
/// same order as `flatten_params`.
fn carve_grads<'a>(
    layers: &[(String, LayerSlot<'_>)],
    mut flat: &'a mut [f64],
) -> Vec<(&'a mut [f64], &'a mut [f64])> {
    let mut out = Vec::with_capacity(layers.len());
    for (_, layer) in layers {
        let (w, rest) = flat.split_at_mut(layer.weight().len());
        let (b, rest) = rest.split_at_mut(layer.bias().len());
        flat = rest;
        out.push((w, b));
    }
    debug_assert!(flat.is_empty());
    out
}

fn feat_from_image(image: &ImageSample) -> Feat {
    let (c, h, w) = image.shape();
    Feat::from_parts(c, h, w, image.pixels().to_vec())
}

fn check_input_shape(cfg: &BackboneConfig, image: &ImageSample) -> Result<()> {
    if image.shape() != cfg.input_shape {
        return Err(CoreError::InvalidInput(format!(
            "image shape {:?} does not match configured input shape {:?}",
            image.shape(),
            cfg.input_shape
        )));
    }
    Ok(())
}

// ── Extractor ────────────────────────────────────────────────────────────────

/// Feature extractor `D`: conv stack → global average pool → linear embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    cfg: BackboneConfig,
    convs: Vec<Conv2d>,
    fc: Linear,
}

/// Forward cache of one extractor pass: inputs/pre-activations per conv,
/// the pooled vector, and the embedding.
pub struct EncoderCache {
    /// `xs[0]` is the input; `xs[i+1]` the post-activation output of conv i.
    xs: Vec<Feat>,
    preacts: Vec<Feat>,
    pooled: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl EncoderCache {
    /// Post-activation feature maps, shallowest first (skip-join inputs).
    pub fn acts(&self) -> &[Feat] {
        &self.xs[1..]
    }
}

impl Extractor {
    /// Zero-parameter network of the configured architecture.
    pub fn new(cfg: &BackboneConfig) -> Result<Extractor> {
        cfg.validate()?;
        let plan = cfg.plan();
        let mut convs = Vec::with_capacity(plan.encoder.len());
        let mut in_ch = cfg.input_shape.0;
        for &(out_ch, stride) in &plan.encoder {
            convs.push(Conv2d::new(in_ch, out_ch, 3, stride, 1));
            in_ch = out_ch;
        }
        let fc = Linear::new(in_ch, cfg.embedding_dim);
        Ok(Extractor {
            cfg: cfg.clone(),
            convs,
            fc,
        })
    }

    /// Freshly initialized network (He-normal weights, zero biases).
    pub fn seeded(cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Extractor> {
        let mut net = Extractor::new(cfg)?;
        for conv in &mut net.convs {
            conv.init_he(rng);
        }
        net.fc.init_he(rng);
        Ok(net)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn forward(&self, input: &Feat) -> EncoderCache {
        let mut xs = vec![input.clone()];
        let mut preacts = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let pre = conv.forward(xs.last().expect("xs non-empty"));
            let mut act = pre.clone();
            for v in &mut act.data {
                *v = elu(*v);
            }
            preacts.push(pre);
            xs.push(act);
        }
        let pooled = global_avg_pool(xs.last().expect("xs non-empty"));
        let embedding = self.fc.forward(&pooled);
        EncoderCache {
            xs,
            preacts,
            pooled,
            embedding,
        }
    }

    /// Backpropagate `d_embedding` (plus optional extra gradients flowing
    /// into intermediate activations, e.g. from U-Net skip consumers) into
    /// the flat parameter-gradient buffer; optionally return the input
    /// gradient.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        d_embedding: &[f64],
        act_grads: &[(usize, Feat)],
        gflat: &mut [f64],
        want_gx: bool,
    ) -> Option<Feat> {
        let layers = self.named_layers();
        let mut slices = carve_grads(&layers, gflat);
        let (fc_gw, fc_gb) = slices.pop().expect("fc is the last layer");

        let d_pooled = self
            .fc
            .backward(&cache.pooled, d_embedding, fc_gw, fc_gb, true)
            .expect("input gradient requested");
        let last = cache.xs.last().expect("xs non-empty");
        let mut dfeat = global_avg_pool_backward(&d_pooled, last.c, last.h, last.w);

        for i in (0..self.convs.len()).rev() {
            for (idx, extra) in act_grads {
                if *idx == i {
                    for (d, e) in dfeat.data.iter_mut().zip(&extra.data) {
                        *d += e;
                    }
                }
            }
            let pre = &cache.preacts[i];
            let mut dpre = dfeat;
            for (d, p) in dpre.data.iter_mut().zip(&pre.data) {
                *d *= elu_deriv(*p);
            }
            let (gw, gb) = &mut slices[i];
            let gx = self.convs[i].backward(
                &cache.xs[i],
                &dpre,
                gw,
                gb,
                i > 0 || want_gx,
            );
            match gx {
                Some(g) => dfeat = g,
                None => return None,
            }
        }
        Some(dfeat)
    }

    /// Embed one image (shape-checked against the config).
    pub fn embed(&self, image: &ImageSample) -> Result<EmbeddingVector> {
        check_input_shape(&self.cfg, image)?;
        let cache = self.forward(&feat_from_image(image));
        debug_assert!(cache.embedding.iter().all(|v| v.is_finite()));
        Ok(EmbeddingVector {
            values: cache.embedding,
        })
    }

    /// Order-preserving batch embedding.
    pub fn embed_batch(&self, images: &[ImageSample]) -> Result<Vec<EmbeddingVector>> {
        images.iter().map(|img| self.embed(img)).collect()
    }
}

impl ParamNet for Extractor {
    fn named_layers(&self) -> Vec<(String, LayerSlot<'_>)> {
        let mut out: Vec<(String, LayerSlot)> = self
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("conv{i}"), LayerSlot::Conv(c)))
            .collect();
        out.push(("fc".to_string(), LayerSlot::Lin(&self.fc)));
        out
    }

    fn named_layers_mut(&mut self) -> Vec<(String, LayerSlotMut<'_>)> {
        let mut out: Vec<(String, LayerSlotMut)> = self
            .convs
            .iter_mut()
            .enumerate()
            .map(|(i, c)| (format!("conv{i}"), LayerSlotMut::Conv(c)))
            .collect();
        out.push(("fc".to_string(), LayerSlotMut::Lin(&mut self.fc)));
        out
    }
}

// ── Critic ───────────────────────────────────────────────────────────────────

/// Wasserstein critic `F`: the extractor architecture with its embedding
/// reduced to an unbounded scalar by an unparameterized mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    net: Extractor,
}

impl Critic {
    pub fn new(cfg: &BackboneConfig) -> Result<Critic> {
        Ok(Critic {
            net: Extractor::new(cfg)?,
        })
    }

    pub fn seeded(cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Critic> {
        Ok(Critic {
            net: Extractor::seeded(cfg, rng)?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        self.net.config()
    }

    pub fn forward(&self, input: &Feat) -> (f64, EncoderCache) {
        let cache = self.net.forward(input);
        let dim = cache.embedding.len() as f64;
        let score = cache.embedding.iter().sum::<f64>() / dim;
        (score, cache)
    }

    /// Backpropagate a scalar score gradient.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        d_score: f64,
        gflat: &mut [f64],
        want_gx: bool,
    ) -> Option<Feat> {
        let dim = cache.embedding.len();
        let dz = vec![d_score / dim as f64; dim];
        self.net.backward(cache, &dz, &[], gflat, want_gx)
    }

    /// Unbounded critic score of one image.
    pub fn discriminate(&self, image: &ImageSample) -> Result<f64> {
        check_input_shape(self.net.config(), image)?;
        let (score, _) = self.forward(&feat_from_image(image));
        debug_assert!(score.is_finite());
        Ok(score)
    }

    pub fn discriminate_batch(&self, images: &[ImageSample]) -> Result<Vec<f64>> {
        images.iter().map(|img| self.discriminate(img)).collect()
    }
}

impl ParamNet for Critic {
    fn named_layers(&self) -> Vec<(String, LayerSlot<'_>)> {
        self.net.named_layers()
    }
    fn named_layers_mut(&mut self) -> Vec<(String, LayerSlotMut<'_>)> {
        self.net.named_layers_mut()
    }
}

// ── Generator ────────────────────────────────────────────────────────────────

/// Generator `G`: embedding → linear → ELU → reshape, then per stage
/// upsample ×2 (+ optional encoder skip concat) → conv → ELU, with the final
/// conv mapping to image channels through a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    cfg: BackboneConfig,
    modality: Modality,
    start: (usize, usize, usize),
    fc: Linear,
    convs: Vec<Conv2d>,
    /// Per stage: encoder act index and channel count joined before the conv.
    skip_wiring: Vec<Option<(usize, usize)>>,
}

/// Forward cache of one generator pass.
pub struct GenCache {
    z: Vec<f64>,
    fc_pre: Vec<f64>,
    stage_inputs: Vec<Feat>,
    stage_pre: Vec<Feat>,
    pub out: Feat,
}

impl Generator {
    pub fn new(cfg: &BackboneConfig, modality: Modality) -> Result<Generator> {
        cfg.validate()?;
        let plan = cfg.plan();
        let (in_c, h, w) = cfg.input_shape;
        let k = cfg.downsamples();
        let (h0, w0) = (h >> k, w >> k);

        // Resolution and channels of each encoder activation, for skip wiring.
        let mut enc_acts = Vec::new();
        let (mut eh, mut ew) = (h, w);
        for &(ch, stride) in &plan.encoder {
            eh /= stride;
            ew /= stride;
            enc_acts.push((eh, ew, ch));
        }

        let start_c = plan.encoder.last().expect("plan has stages").0;
        let fc = Linear::new(cfg.embedding_dim, start_c * h0 * w0);

        let mut convs = Vec::with_capacity(k);
        let mut skip_wiring = Vec::with_capacity(k);
        let mut prev_c = start_c;
        let (mut res_h, mut res_w) = (h0, w0);
        for i in 0..k {
            res_h *= 2;
            res_w *= 2;
            let skip = if plan.skip_generator {
                enc_acts
                    .iter()
                    .enumerate()
                    .rev()
                    .find(|(_, &(ah, aw, _))| ah == res_h && aw == res_w)
                    .map(|(idx, &(_, _, ch))| (idx, ch))
            } else {
                None
            };
            let in_ch = prev_c + skip.map_or(0, |(_, ch)| ch);
            let out_ch = if i == k - 1 { in_c } else { plan.decoder[i] };
            convs.push(Conv2d::new(in_ch, out_ch, 3, 1, 1));
            skip_wiring.push(skip);
            prev_c = out_ch;
        }

        Ok(Generator {
            cfg: cfg.clone(),
            modality,
            start: (start_c, h0, w0),
            fc,
            convs,
            skip_wiring,
        })
    }

    pub fn seeded(cfg: &BackboneConfig, modality: Modality, rng: &mut impl Rng) -> Result<Generator> {
        let mut g = Generator::new(cfg, modality)?;
        g.fc.init_he(rng);
        for conv in &mut g.convs {
            conv.init_he(rng);
        }
        Ok(g)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// True when this generator joins encoder feature maps (U-Net path).
    pub fn uses_skips(&self) -> bool {
        self.skip_wiring.iter().any(Option::is_some)
    }

    pub fn forward(&self, z: &[f64], skips: Option<&[Feat]>) -> Result<(Feat, GenCache)> {
        if z.len() != self.cfg.embedding_dim {
            return Err(CoreError::InvalidInput(format!(
                "embedding has dimension {}, generator expects {}",
                z.len(),
                self.cfg.embedding_dim
            )));
        }
        if self.uses_skips() && skips.is_none() {
            return Err(CoreError::InvalidInput(
                "generator is configured with skip connections; encoder feature maps required"
                    .to_string(),
            ));
        }
        let fc_pre = self.fc.forward(z);
        let (c0, h0, w0) = self.start;
        let mut a = Feat::from_parts(c0, h0, w0, fc_pre.iter().map(|&v| elu(v)).collect());

        let mut stage_inputs = Vec::with_capacity(self.convs.len());
        let mut stage_pre = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            let mut u = upsample_nearest2(&a);
            if let Some((idx, ch)) = self.skip_wiring[i] {
                let maps = skips.expect("checked above");
                let feat = maps.get(idx).ok_or_else(|| {
                    CoreError::InvalidInput(format!(
                        "skip path expects encoder act {idx}, got {} feature maps",
                        maps.len()
                    ))
                })?;
                if feat.c != ch || feat.h != u.h || feat.w != u.w {
                    return Err(CoreError::InvalidInput(format!(
                        "skip feature {idx} has shape ({}, {}, {}), expected ({ch}, {}, {})",
                        feat.c, feat.h, feat.w, u.h, u.w
                    )));
                }
                u = concat_channels(&u, feat);
            }
            let pre = conv.forward(&u);
            let last = i == self.convs.len() - 1;
            let act = Feat::from_parts(
                pre.c,
                pre.h,
                pre.w,
                pre.data
                    .iter()
                    .map(|&v| if last { sigmoid(v) } else { elu(v) })
                    .collect(),
            );
            stage_inputs.push(u);
            stage_pre.push(pre);
            a = act;
        }
        let out = a;
        Ok((
            out.clone(),
            GenCache {
                z: z.to_vec(),
                fc_pre,
                stage_inputs,
                stage_pre,
                out,
            },
        ))
    }

    /// Backpropagate an output-pixel gradient. Returns the embedding gradient
    /// and any gradients flowing into the skip feature maps (keyed by encoder
    /// act index).
    pub fn backward(
        &self,
        cache: &GenCache,
        d_out: &Feat,
        gflat: &mut [f64],
    ) -> (Vec<f64>, Vec<(usize, Feat)>) {
        let layers = self.named_layers();
        let mut slices = carve_grads(&layers, gflat);
        let (fc_gw, fc_gb) = slices.remove(0);

        let mut skip_grads = Vec::new();
        let mut dfeat = d_out.clone();
        for i in (0..self.convs.len()).rev() {
            let last = i == self.convs.len() - 1;
            let mut dpre = dfeat;
            if last {
                // d sigmoid = s (1 - s), with s already cached in `out`.
                for (d, &s) in dpre.data.iter_mut().zip(&cache.out.data) {
                    *d *= s * (1.0 - s);
                }
            } else {
                for (d, &p) in dpre.data.iter_mut().zip(&cache.stage_pre[i].data) {
                    *d *= elu_deriv(p);
                }
            }
            let (gw, gb) = &mut slices[i];
            let gin = self.convs[i]
                .backward(&cache.stage_inputs[i], &dpre, gw, gb, true)
                .expect("input gradient requested");
            let gup = if let Some((idx, ch)) = self.skip_wiring[i] {
                let up_ch = gin.c - ch;
                let (gu, gskip) = split_channels(&gin, up_ch);
                skip_grads.push((idx, gskip));
                gu
            } else {
                gin
            };
            dfeat = upsample_nearest2_backward(&gup);
        }

        let mut d_fc_pre = dfeat.data;
        for (d, &p) in d_fc_pre.iter_mut().zip(&cache.fc_pre) {
            *d *= elu_deriv(p);
        }
        let dz = self
            .fc
            .backward(&cache.z, &d_fc_pre, fc_gw, fc_gb, true)
            .expect("input gradient requested");
        (dz, skip_grads)
    }

    /// Reconstruct an image from an embedding (and encoder feature maps when
    /// the config uses skips). Output pixels are sigmoid-bounded.
    pub fn generate(&self, z: &EmbeddingVector, skips: Option<&[Feat]>) -> Result<ImageSample> {
        let (out, _) = self.forward(&z.values, skips)?;
        ImageSample::new(
            self.modality,
            Label::Unlabeled,
            (out.c, out.h, out.w),
            out.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }
}

impl ParamNet for Generator {
    fn named_layers(&self) -> Vec<(String, LayerSlot<'_>)> {
        let mut out = vec![("fc".to_string(), LayerSlot::Lin(&self.fc))];
        out.extend(
            self.convs
                .iter()
                .enumerate()
                .map(|(i, c)| (format!("conv{i}"), LayerSlot::Conv(c))),
        );
        out
    }

    fn named_layers_mut(&mut self) -> Vec<(String, LayerSlotMut<'_>)> {
        let mut out = vec![("fc".to_string(), LayerSlotMut::Lin(&mut self.fc))];
        out.extend(
            self.convs
                .iter_mut()
                .enumerate()
                .map(|(i, c)| (format!("conv{i}"), LayerSlotMut::Conv(c))),
        );
        out
    }
}

// ── Detector ─────────────────────────────────────────────────────────────────

/// Spoofness detector `H`: extractor trunk plus a one-unit linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    trunk: Extractor,
    head: Linear,
}

impl Detector {
    pub fn trunk(&self) -> &Extractor {
        &self.trunk
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn config(&self) -> &BackboneConfig {
        self.trunk.config()
    }

    /// Forward to the pre-sigmoid logit.
    pub fn forward(&self, input: &Feat) -> (f64, EncoderCache) {
        let cache = self.trunk.forward(input);
        let logit = self.head.forward(&cache.embedding)[0];
        (logit, cache)
    }

    /// Backpropagate a logit gradient into the flat gradient buffer.
    /// Gradient layout: trunk parameters first, then the head.
    pub fn backward(&self, cache: &EncoderCache, d_logit: f64, gflat: &mut [f64]) {
        let trunk_len = self.trunk.param_count();
        let (trunk_g, head_g) = gflat.split_at_mut(trunk_len);
        let (head_gw, head_gb) = head_g.split_at_mut(self.head.weight.len());
        let dz = self
            .head
            .backward(&cache.embedding, &[d_logit], head_gw, head_gb, true)
            .expect("input gradient requested");
        self.trunk.backward(cache, &dz, &[], trunk_g, false);
    }

    /// Spoofness score in (0,1): sigmoid of the head logit; higher = more
    /// likely attack.
    pub fn score(&self, image: &ImageSample) -> Result<f64> {
        check_input_shape(self.trunk.config(), image)?;
        let (logit, _) = self.forward(&feat_from_image(image));
        debug_assert!(logit.is_finite());
        Ok(sigmoid(logit))
    }

    pub fn score_batch(&self, images: &[ImageSample]) -> Result<Vec<f64>> {
        images.iter().map(|img| self.score(img)).collect()
    }
}

impl ParamNet for Detector {
    fn named_layers(&self) -> Vec<(String, LayerSlot<'_>)> {
        let mut out: Vec<(String, LayerSlot)> = self
            .trunk
            .named_layers()
            .into_iter()
            .map(|(n, l)| (format!("trunk.{n}"), l))
            .collect();
        out.push(("head".to_string(), LayerSlot::Lin(&self.head)));
        out
    }

    fn named_layers_mut(&mut self) -> Vec<(String, LayerSlotMut<'_>)> {
        let mut out: Vec<(String, LayerSlotMut)> = self
            .trunk
            .named_layers_mut()
            .into_iter()
            .map(|(n, l)| (format!("trunk.{n}"), l))
            .collect();
        out.push(("head".to_string(), LayerSlotMut::Lin(&mut self.head)));
        out
    }
}

/// Build a detector whose trunk parameters are byte-identical copies of the
/// extractor's, with a fresh head (weights ~ N(0, 0.01), zero bias).
pub fn init_detector_from_extractor(extractor: &Extractor, rng: &mut impl Rng) -> Detector {
    let mut head = Linear::new(extractor.config().embedding_dim, 1);
    head.init_normal(0.01, rng);
    Detector {
        trunk: extractor.clone(),
        head,
    }
}

// ── Bundle ───────────────────────────────────────────────────────────────────

/// The networks of one pretraining run. The detector appears once fine-tuning
/// has created it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub backbone: BackboneConfig,
    pub modality: Modality,
    pub extractor: Extractor,
    pub generator: Generator,
    pub critic: Critic,
    pub detector: Option<Detector>,
}

impl ModelBundle {
    /// Deterministically initialize all networks from one seed; each network
    /// draws from its own derived stream.
    pub fn seeded(backbone: &BackboneConfig, modality: Modality, seed: u64) -> Result<ModelBundle> {
        Ok(ModelBundle {
            backbone: backbone.clone(),
            modality,
            extractor: Extractor::seeded(
                backbone,
                &mut seeds::stream_rng(seed, seeds::streams::EXTRACTOR_INIT),
            )?,
            generator: Generator::seeded(
                backbone,
                modality,
                &mut seeds::stream_rng(seed, seeds::streams::GENERATOR_INIT),
            )?,
            critic: Critic::seeded(
                backbone,
                &mut seeds::stream_rng(seed, seeds::streams::CRITIC_INIT),
            )?,
            detector: None,
        })
    }
}

// ── Checkpoints ──────────────────────────────────────────────────────────────

/// Format version written into every checkpoint; loading any other version
/// is an error.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// What a checkpoint captures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Mid- or post-pretraining: all three pretraining networks plus
    /// optimizer states; `epochs_done` epochs are complete.
    Pretrain { epochs_done: usize },
    /// A fine-tuned (or freshly initialized) detector.
    Detector,
}

/// Single-archive checkpoint: parameter arrays keyed by hierarchical names
/// (`extractor.conv0.weight`, `detector.head.bias`, ...), the backbone
/// config, the seed record, and the format version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub modality: Modality,
    pub kind: CheckpointKind,
    pub params: BTreeMap<String, Vec<f64>>,
    /// Optimizer states keyed by network name; present in pretrain
    /// checkpoints so resumed runs continue bit-identically.
    #[serde(default)]
    pub optimizers: BTreeMap<String, Optimizer>,
}

fn pack_net(params: &mut BTreeMap<String, Vec<f64>>, prefix: &str, net: &impl ParamNet) {
    for (name, array) in net.named_param_arrays() {
        params.insert(format!("{prefix}{name}"), array);
    }
}

impl Checkpoint {
    /// Capture a pretraining state.
    pub fn from_pretrain(
        bundle: &ModelBundle,
        seed: u64,
        epochs_done: usize,
        optimizers: BTreeMap<String, Optimizer>,
    ) -> Checkpoint {
        let mut params = BTreeMap::new();
        pack_net(&mut params, "extractor.", &bundle.extractor);
        pack_net(&mut params, "generator.", &bundle.generator);
        pack_net(&mut params, "critic.", &bundle.critic);
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            seed,
            backbone: bundle.backbone.clone(),
            modality: bundle.modality,
            kind: CheckpointKind::Pretrain { epochs_done },
            params,
            optimizers,
        }
    }

    /// Capture a detector.
    pub fn from_detector(
        detector: &Detector,
        modality: Modality,
        seed: u64,
    ) -> Checkpoint {
        let mut params = BTreeMap::new();
        pack_net(&mut params, "detector.", detector);
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            seed,
            backbone: detector.config().clone(),
            modality,
            kind: CheckpointKind::Detector,
            params,
            optimizers: BTreeMap::new(),
        }
    }

    /// Rebuild the pretraining bundle recorded in this checkpoint.
    pub fn restore_bundle(&self) -> Result<ModelBundle> {
        match self.kind {
            CheckpointKind::Pretrain { .. } => {}
            _ => {
                return Err(CoreError::Incompatible(
                    "checkpoint does not hold a pretraining bundle".to_string(),
                ))
            }
        }
        let mut bundle = ModelBundle {
            backbone: self.backbone.clone(),
            modality: self.modality,
            extractor: Extractor::new(&self.backbone)?,
            generator: Generator::new(&self.backbone, self.modality)?,
            critic: Critic::new(&self.backbone)?,
            detector: None,
        };
        bundle
            .extractor
            .load_named_param_arrays(&self.params, "extractor.")?;
        bundle
            .generator
            .load_named_param_arrays(&self.params, "generator.")?;
        bundle
            .critic
            .load_named_param_arrays(&self.params, "critic.")?;
        Ok(bundle)
    }

    /// Rebuild the detector recorded in this checkpoint.
    pub fn restore_detector(&self) -> Result<Detector> {
        match self.kind {
            CheckpointKind::Detector => {}
            _ => {
                return Err(CoreError::Incompatible(
                    "checkpoint does not hold a detector".to_string(),
                ))
            }
        }
        let trunk = Extractor::new(&self.backbone)?;
        let head = Linear::new(self.backbone.embedding_dim, 1);
        let mut detector = Detector { trunk, head };
        detector.load_named_param_arrays(&self.params, "detector.")?;
        Ok(detector)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CoreError::Parse("checkpoint has no format_version".to_string()))?;
        if version != CHECKPOINT_FORMAT_VERSION as u64 {
            return Err(CoreError::Incompatible(format!(
                "checkpoint format version {version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
            )));
        }
        Ok(serde_json::from_value(value)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::stream_rng;

    fn tiny_image(seed: u64) -> ImageSample {
        let mut rng = stream_rng(seed, 99);
        ImageSample::from_fn(Modality::Fingerprint, Label::Unlabeled, (1, 32, 32), |_, _, _| {
            rng.random_range(0.0..1.0)
        })
        .unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = BackboneConfig::tiny();
        cfg.embedding_dim = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::tiny();
        cfg.input_shape = (1, 30, 32); // not divisible by 8
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::tiny();
        cfg.width_multiplier = 0.0;
        assert!(cfg.validate().is_err());
        assert!(BackboneConfig::tiny().validate().is_ok());
        assert!(BackboneConfig::paper_fingerprint().validate().is_ok());
        assert!(BackboneConfig::paper_face().validate().is_ok());
    }

    #[test]
    fn embed_is_deterministic_and_order_preserving() {
        let cfg = BackboneConfig::tiny();
        let d = Extractor::seeded(&cfg, &mut stream_rng(1, 1)).unwrap();
        let imgs: Vec<ImageSample> = (0..4).map(tiny_image).collect();
        let a = d.embed(&imgs[2]).unwrap();
        let b = d.embed(&imgs[2]).unwrap();
        assert_eq!(a, b);
        let batch = d.embed_batch(&imgs).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            assert_eq!(batch[i], d.embed(img).unwrap());
        }
    }

    #[test]
    fn embed_zero_image_matches_seed_replay() {
        let cfg = BackboneConfig::tiny();
        let zero = ImageSample::constant(Modality::Fingerprint, Label::Unlabeled, (1, 32, 32), 0.0)
            .unwrap();
        let z1 = Extractor::seeded(&cfg, &mut stream_rng(42, 1))
            .unwrap()
            .embed(&zero)
            .unwrap();
        let z2 = Extractor::seeded(&cfg, &mut stream_rng(42, 1))
            .unwrap()
            .embed(&zero)
            .unwrap();
        assert_eq!(z1, z2);
        assert_eq!(z1.dim(), cfg.embedding_dim);
        assert!(z1.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn embed_rejects_shape_mismatch() {
        let d = Extractor::seeded(&BackboneConfig::tiny(), &mut stream_rng(0, 1)).unwrap();
        let wrong = ImageSample::constant(Modality::Fingerprint, Label::Unlabeled, (1, 16, 16), 0.5)
            .unwrap();
        assert!(matches!(d.embed(&wrong), Err(CoreError::InvalidInput(_))));
    }

    #[test]
    fn generate_output_is_input_shaped_and_bounded() {
        let cfg = BackboneConfig::tiny();
        let g = Generator::seeded(&cfg, Modality::Fingerprint, &mut stream_rng(5, 2)).unwrap();
        let mut rng = stream_rng(6, 0);
        let z = EmbeddingVector {
            values: (0..cfg.embedding_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        };
        let img = g.generate(&z, None).unwrap();
        assert_eq!(img.shape(), cfg.input_shape);
        assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        let again = g.generate(&z, None).unwrap();
        assert_eq!(img.pixels(), again.pixels());
    }

    #[test]
    fn generate_rejects_dimension_mismatch() {
        let g = Generator::seeded(&BackboneConfig::tiny(), Modality::Face, &mut stream_rng(0, 2))
            .unwrap();
        let bad = EmbeddingVector { values: vec![0.0; 9] };
        assert!(matches!(
            g.generate(&bad, None),
            Err(CoreError::InvalidInput(_))
        ));
    }

    #[test]
    fn paper_scale_generator_requires_skips_and_tiny_does_not() {
        let tiny = Generator::new(&BackboneConfig::tiny(), Modality::Fingerprint).unwrap();
        assert!(!tiny.uses_skips());
        let paper = Generator::new(&BackboneConfig::paper_fingerprint(), Modality::Fingerprint)
            .unwrap();
        assert!(paper.uses_skips());
        let z = EmbeddingVector { values: vec![0.1; 128] };
        assert!(matches!(
            paper.generate(&z, None),
            Err(CoreError::InvalidInput(_))
        ));
    }

    #[test]
    fn skip_path_round_trips_through_encoder_features() {
        // Small paper-family config so the U-Net path runs quickly.
        let cfg = BackboneConfig {
            arch_id: ArchId::PaperFingerprint,
            input_shape: (1, 32, 32),
            embedding_dim: 8,
            width_multiplier: 0.25,
        };
        let d = Extractor::seeded(&cfg, &mut stream_rng(3, 1)).unwrap();
        let g = Generator::seeded(&cfg, Modality::Fingerprint, &mut stream_rng(3, 2)).unwrap();
        let img = ImageSample::constant(Modality::Fingerprint, Label::Unlabeled, (1, 32, 32), 0.5)
            .unwrap();
        let cache = d.forward(&Feat::from_parts(1, 32, 32, img.pixels().to_vec()));
        let z = EmbeddingVector {
            values: cache.embedding.clone(),
        };
        let out = g.generate(&z, Some(cache.acts())).unwrap();
        assert_eq!(out.shape(), cfg.input_shape);
        assert!(out.pixels().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn critic_scores_are_finite_scalars_and_order_preserving() {
        let cfg = BackboneConfig::tiny();
        let f = Critic::seeded(&cfg, &mut stream_rng(7, 3)).unwrap();
        let imgs: Vec<ImageSample> = (0..3).map(tiny_image).collect();
        let batch = f.discriminate_batch(&imgs).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let s = f.discriminate(img).unwrap();
            assert!(s.is_finite());
            assert_eq!(batch[i], s);
        }
    }

    #[test]
    fn clipping_bounds_every_critic_parameter() {
        let mut f = Critic::seeded(&BackboneConfig::tiny(), &mut stream_rng(8, 3)).unwrap();
        assert!(f.flatten_params().iter().any(|p| p.abs() > 0.01));
        f.clip_params(0.01);
        assert!(f.flatten_params().iter().all(|p| p.abs() <= 0.01));
    }

    #[test]
    fn extractor_and_critic_parameter_counts_match() {
        for cfg in [
            BackboneConfig::tiny(),
            BackboneConfig::paper_fingerprint(),
            BackboneConfig::paper_face(),
        ] {
            let d = Extractor::new(&cfg).unwrap();
            let f = Critic::new(&cfg).unwrap();
            assert_eq!(d.param_count(), f.param_count(), "arch {:?}", cfg.arch_id);
        }
    }

    #[test]
    fn zero_head_scores_exactly_half() {
        let cfg = BackboneConfig::tiny();
        let d = Extractor::seeded(&cfg, &mut stream_rng(9, 1)).unwrap();
        let h = Detector {
            trunk: d.clone(),
            head: Linear::new(cfg.embedding_dim, 1),
        };
        for i in 0..5 {
            assert_eq!(h.score(&tiny_image(i)).unwrap(), 0.5);
        }
    }

    #[test]
    fn score_matches_external_composition() {
        let d = Extractor::seeded(&BackboneConfig::tiny(), &mut stream_rng(10, 1)).unwrap();
        let h = init_detector_from_extractor(&d, &mut stream_rng(10, 4));
        for i in 0..4 {
            let img = tiny_image(i);
            let z = d.embed(&img).unwrap();
            let w = &h.head().weight;
            let logit: f64 =
                h.head().bias[0] + w.iter().zip(&z.values).map(|(a, b)| a * b).sum::<f64>();
            let external = 1.0 / (1.0 + (-logit).exp());
            let got = h.score(&img).unwrap();
            assert!(
                (got - external).abs() < 1e-15,
                "score {got} vs composition {external}"
            );
            assert!((0.0..1.0).contains(&got) && got > 0.0);
        }
    }

    #[test]
    fn scores_stay_in_open_unit_interval_on_many_inputs() {
        let d = Extractor::seeded(&BackboneConfig::tiny(), &mut stream_rng(11, 1)).unwrap();
        let h = init_detector_from_extractor(&d, &mut stream_rng(11, 4));
        for i in 0..1000 {
            let s = h.score(&tiny_image(i)).unwrap();
            assert!(s > 0.0 && s < 1.0, "seed {i} gave score {s}");
        }
    }

    #[test]
    fn detector_init_copies_trunk_and_isolates_ownership() {
        let cfg = BackboneConfig::tiny();
        let d = Extractor::seeded(&cfg, &mut stream_rng(12, 1)).unwrap();
        let mut h = init_detector_from_extractor(&d, &mut stream_rng(12, 4));
        assert_eq!(h.trunk().flatten_params(), d.flatten_params());
        // Trunk activations coincide with the extractor's embedding exactly.
        let img = tiny_image(0);
        assert_eq!(
            h.trunk().embed(&img).unwrap().values,
            d.embed(&img).unwrap().values
        );
        // Head init: zero bias, small weights.
        assert_eq!(h.head().bias[0], 0.0);
        assert!(h.head().weight.iter().all(|w| w.abs() < 0.1));
        // Mutating H leaves D untouched.
        let before = d.flatten_params();
        let mut mutated = h.flatten_params();
        for v in &mut mutated {
            *v += 1.0;
        }
        h.load_params(&mutated).unwrap();
        assert_eq!(d.flatten_params(), before);
    }

    #[test]
    fn forward_passes_stay_finite_over_a_hundred_seeds() {
        let cfg = BackboneConfig::tiny();
        for seed in 0..100 {
            let bundle = ModelBundle::seeded(&cfg, Modality::Fingerprint, seed).unwrap();
            let img = tiny_image(seed);
            let z = bundle.extractor.embed(&img).unwrap();
            assert!(z.values.iter().all(|v| v.is_finite()), "seed {seed}");
            let y = bundle.generator.generate(&z, None).unwrap();
            assert!(y.pixels().iter().all(|p| p.is_finite()), "seed {seed}");
            let s = bundle.critic.discriminate(&img).unwrap();
            assert!(s.is_finite(), "seed {seed}");
            let h = init_detector_from_extractor(
                &bundle.extractor,
                &mut stream_rng(seed, seeds::streams::DETECTOR_HEAD_INIT),
            );
            let v = h.score(&img).unwrap();
            assert!(v.is_finite() && v > 0.0 && v < 1.0, "seed {seed}");
        }
    }

    #[test]
    fn tiny_forward_pass_is_fast() {
        let cfg = BackboneConfig::tiny();
        let d = Extractor::seeded(&cfg, &mut stream_rng(13, 1)).unwrap();
        let img = tiny_image(0);
        d.embed(&img).unwrap(); // warm up
        let start = std::time::Instant::now();
        d.embed(&img).unwrap();
        let elapsed = start.elapsed();
        assert!(
            elapsed.as_millis() < 50,
            "tiny forward took {elapsed:?}, budget 50 ms"
        );
    }

    #[test]
    fn flat_param_round_trip_is_exact() {
        let cfg = BackboneConfig::tiny();
        let mut g = Generator::seeded(&cfg, Modality::Face, &mut stream_rng(14, 2)).unwrap();
        let flat = g.flatten_params();
        assert_eq!(flat.len(), g.param_count());
        let mut changed = flat.clone();
        changed[3] = 7.5;
        g.load_params(&changed).unwrap();
        assert_eq!(g.flatten_params(), changed);
        assert!(g.load_params(&changed[1..]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_restores_bundle_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pretrain.ckpt.json");
        let bundle = ModelBundle::seeded(&BackboneConfig::tiny(), Modality::Fingerprint, 77).unwrap();
        let mut opts = BTreeMap::new();
        opts.insert(
            "extractor".to_string(),
            Optimizer::adam(1e-3, 0.9, 0.999, 0.0, bundle.extractor.param_count()),
        );
        let ckpt = Checkpoint::from_pretrain(&bundle, 77, 3, opts);
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);
        let restored = loaded.restore_bundle().unwrap();
        assert_eq!(
            restored.extractor.flatten_params(),
            bundle.extractor.flatten_params()
        );
        assert_eq!(
            restored.generator.flatten_params(),
            bundle.generator.flatten_params()
        );
        assert_eq!(
            restored.critic.flatten_params(),
            bundle.critic.flatten_params()
        );
    }

    #[test]
    fn checkpoint_version_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt.json");
        let bundle = ModelBundle::seeded(&BackboneConfig::tiny(), Modality::Face, 1).unwrap();
        let mut ckpt = Checkpoint::from_pretrain(&bundle, 1, 0, BTreeMap::new());
        ckpt.format_version = 999;
        std::fs::write(&path, serde_json::to_string(&ckpt).unwrap()).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CoreError::Incompatible(_))
        ));
    }

    #[test]
    fn detector_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detector.ckpt.json");
        let d = Extractor::seeded(&BackboneConfig::tiny(), &mut stream_rng(20, 1)).unwrap();
        let det = init_detector_from_extractor(&d, &mut stream_rng(20, 4));
        Checkpoint::from_detector(&det, Modality::Fingerprint, 20)
            .save(&path)
            .unwrap();
        let restored = Checkpoint::load(&path).unwrap().restore_detector().unwrap();
        assert_eq!(restored.flatten_params(), det.flatten_params());
        let img = tiny_image(2);
        assert_eq!(restored.score(&img).unwrap(), det.score(&img).unwrap());
    }

    #[test]
    fn pretrain_checkpoint_cannot_restore_a_detector() {
        let bundle = ModelBundle::seeded(&BackboneConfig::tiny(), Modality::Face, 4).unwrap();
        let ckpt = Checkpoint::from_pretrain(&bundle, 4, 0, BTreeMap::new());
        assert!(matches!(
            ckpt.restore_detector(),
            Err(CoreError::Incompatible(_))
        ));
    }
}
