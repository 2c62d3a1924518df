//! Synthetic data, dataset manifests, and evaluation-protocol splits.
//!
//! The generators stand in for licensed benchmark corpora. Fingerprints are
//! oriented sinusoidal ridge fields; faces are approximately mirror-symmetric
//! blob compositions. A `generator_regime` key selects a frequency band and
//! plays the role of a capture material/sensor/dataset, so cross-material,
//! cross-sensor, and cross-dataset protocols all work on synthetic data.
//! Attack samples perturb the texture (frequency shift + blotches for
//! fingerprints, a moiré grating for faces) so the classes are learnable but
//! not trivially separable; the achieved separability and regime-frequency
//! margins are frozen in `golden/calibration.json`.
//!
//! Generation is pure per (spec, class, sample index): every sample draws
//! from its own derived stream, so parallel generation by index partition
//! yields the same bytes as a sequential pass.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::{ImageSample, Label, Modality};
use crate::seeds;
use crate::training::Dataset;

/// Manifest format version; loading any other version is an error.
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Known texture regimes, ordered by ridge-frequency band.
pub const REGIMES: [&str; 3] = ["coarse", "fine", "dense"];

/// Per-regime base frequency band (radians per pixel) for the texture
/// carrier. Bands are disjoint with comfortable margins so regimes remain
/// statistically distinguishable.
fn regime_band(regime: &str) -> Option<(f64, f64)> {
    match regime {
        "coarse" => Some((0.35, 0.55)),
        "fine" => Some((0.75, 0.95)),
        "dense" => Some((1.15, 1.35)),
        _ => None,
    }
}

/// Recipe for one synthetic class-balanced dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub modality: Modality,
    pub image_size: (usize, usize),
    pub n_per_class: usize,
    /// Texture family key; stands in for a material/sensor/dataset.
    pub generator_regime: String,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn fingerprint(regime: &str, n_per_class: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            modality: Modality::Fingerprint,
            image_size: (32, 32),
            n_per_class,
            generator_regime: regime.to_string(),
            noise_std: 0.03,
            seed,
        }
    }

    pub fn face(regime: &str, n_per_class: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            modality: Modality::Face,
            image_size: (32, 32),
            n_per_class,
            generator_regime: regime.to_string(),
            noise_std: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(CoreError::InvalidSpec(format!(
                "image_size must be at least 16x16, got {h}x{w}"
            )));
        }
        if self.n_per_class < 2 {
            return Err(CoreError::InvalidSpec(format!(
                "n_per_class must be at least 2, got {}",
                self.n_per_class
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(CoreError::InvalidSpec(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        if regime_band(&self.generator_regime).is_none() {
            return Err(CoreError::InvalidSpec(format!(
                "unknown generator_regime {:?} (known: {:?})",
                self.generator_regime, REGIMES
            )));
        }
        Ok(())
    }

    fn meta(&self) -> BTreeMap<String, String> {
        let mut meta = BTreeMap::new();
        for key in ["material", "sensor", "dataset"] {
            meta.insert(key.to_string(), self.generator_regime.clone());
        }
        meta
    }
}

fn binary_class(class: Label) -> Result<bool> {
    match class {
        Label::Attack => Ok(true),
        Label::BonaFide => Ok(false),
        Label::Unlabeled => Err(CoreError::InvalidInput(
            "generation needs a bona_fide or attack class".to_string(),
        )),
    }
}

/// Oriented ridge field with smooth warp; attacks shift the ridge frequency
/// and stamp in dark/bright blotches.
pub fn gen_fingerprint(
    spec: &SyntheticSpec,
    class: Label,
    rng: &mut impl Rng,
) -> Result<ImageSample> {
    spec.validate()?;
    if spec.modality != Modality::Fingerprint {
        return Err(CoreError::InvalidSpec(format!(
            "fingerprint generator called with modality {:?}",
            spec.modality
        )));
    }
    let attack = binary_class(class)?;
    let (h, w) = spec.image_size;
    let (lo, hi) = regime_band(&spec.generator_regime).expect("validated regime");

    let theta: f64 = rng.random_range(0.65..1.05);
    let mut freq = rng.random_range(lo..hi);
    let phase: f64 = rng.random_range(0.0..1.2);
    let warp_amp: f64 = rng.random_range(0.05..0.2);
    let warp_px: f64 = rng.random_range(0.08..0.14);
    let warp_py: f64 = rng.random_range(0.08..0.14);
    let warp_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    // Replica ridges are denser and captures come out slightly darker, the
    // way silicone/gelatin spoofs press unevenly against the sensor.
    let mut brightness = 0.0;
    if attack {
        freq += rng.random_range(0.07..0.13);
        brightness = rng.random_range(-0.04..-0.01);
    }
    // Blotch artifacts (air bubbles, residue) on attacks only, biased dark.
    let blotches: Vec<(f64, f64, f64, f64)> = if attack {
        let count = rng.random_range(2..=4);
        (0..count)
            .map(|_| {
                (
                    rng.random_range(0.0..w as f64),
                    rng.random_range(0.0..h as f64),
                    rng.random_range(2.0..5.0),
                    rng.random_range(0.18..0.32) * if rng.random_bool(0.65) { -1.0 } else { 1.0 },
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let normal = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("validated std");
    let (cos_t, sin_t) = (theta.cos(), theta.sin());

    let mut img = ImageSample::from_fn(Modality::Fingerprint, class, (1, h, w), |_, y, x| {
        let (xf, yf) = (x as f64, y as f64);
        let warp = warp_amp * (warp_px * xf + warp_phase).sin() * (warp_py * yf).cos();
        let carrier = 0.5 + 0.35 * (freq * (xf * cos_t + yf * sin_t) + phase + warp).sin();
        let mut v = carrier + brightness;
        for &(bx, by, r, amp) in &blotches {
            let d2 = (xf - bx) * (xf - bx) + (yf - by) * (yf - by);
            v += amp * (-d2 / (2.0 * r * r)).exp();
        }
        if spec.noise_std > 0.0 {
            v += normal.sample(rng);
        }
        v.clamp(0.0, 1.0)
    })?;
    img.meta = spec.meta();
    Ok(img)
}

/// Approximately mirror-symmetric blob composition over a regime-keyed
/// carrier ripple; attacks overlay a moiré-like grating.
pub fn gen_face(spec: &SyntheticSpec, class: Label, rng: &mut impl Rng) -> Result<ImageSample> {
    spec.validate()?;
    if spec.modality != Modality::Face {
        return Err(CoreError::InvalidSpec(format!(
            "face generator called with modality {:?}",
            spec.modality
        )));
    }
    let attack = binary_class(class)?;
    let (h, w) = spec.image_size;
    let (lo, hi) = regime_band(&spec.generator_regime).expect("validated regime");

    // Mirrored blob pairs: eyes-like and mouth-like masses plus extras.
    let n_pairs = rng.random_range(3..=5);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_pairs)
        .map(|_| {
            (
                rng.random_range(0.15..0.48) * w as f64, // left-half center x
                rng.random_range(0.15..0.85) * h as f64,
                rng.random_range(0.10..0.22) * w as f64, // radius
                rng.random_range(0.25..0.45),            // amplitude
            )
        })
        .collect();
    let ripple_freq = rng.random_range(lo..hi) * 1.6;
    let ripple_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let asym_amp: f64 = rng.random_range(0.01..0.04);
    let asym_fx: f64 = rng.random_range(0.2..0.5);
    let asym_fy: f64 = rng.random_range(0.2..0.5);
    let moire = if attack {
        Some((
            ripple_freq + rng.random_range(0.6..0.9),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.10..0.16),
        ))
    } else {
        None
    };
    let tint = [1.0, rng.random_range(0.90..0.98), rng.random_range(0.82..0.92)];
    // Replayed/printed faces lose a little contrast and color fidelity.
    let fade = if attack { rng.random_range(0.74..0.86) } else { 1.0 };
    let normal = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("validated std");

    let mut img = ImageSample::from_fn(Modality::Face, class, (3, h, w), |c, y, x| {
        let (xf, yf) = (x as f64, y as f64);
        let mut v = 0.18;
        for &(bx, by, r, amp) in &blobs {
            // The blob and its mirror image across the vertical midline.
            for cx in [bx, w as f64 - 1.0 - bx] {
                let d2 = (xf - cx) * (xf - cx) + (yf - by) * (yf - by);
                v += amp * (-d2 / (2.0 * r * r)).exp();
            }
        }
        v += 0.16 * (ripple_freq * (xf + yf) * std::f64::consts::FRAC_1_SQRT_2 + ripple_phase).sin();
        v += asym_amp * (asym_fx * xf).sin() * (asym_fy * yf).cos();
        if let Some((fm, p1, p2, amp)) = moire {
            v += amp * (fm * xf + p1).sin() * (fm * yf + p2).sin();
        }
        if spec.noise_std > 0.0 {
            v += normal.sample(rng);
        }
        (v * tint[c] * fade).clamp(0.0, 1.0)
    })?;
    img.meta = spec.meta();
    Ok(img)
}

/// Dispatch on the spec's modality.
pub fn gen_sample(spec: &SyntheticSpec, class: Label, rng: &mut impl Rng) -> Result<ImageSample> {
    match spec.modality {
        Modality::Fingerprint => gen_fingerprint(spec, class, rng),
        Modality::Face => gen_face(spec, class, rng),
    }
}

/// Class and derived stream of sample `index` within a spec: bona fide fill
/// `0..n_per_class`, attacks `n_per_class..2*n_per_class`.
fn index_class(spec: &SyntheticSpec, index: usize) -> Result<Label> {
    if index >= 2 * spec.n_per_class {
        return Err(CoreError::InvalidInput(format!(
            "sample index {index} out of range for 2x{} samples",
            spec.n_per_class
        )));
    }
    Ok(if index < spec.n_per_class {
        Label::BonaFide
    } else {
        Label::Attack
    })
}

/// Generate the sample at `index` from its own derived stream (pure per
/// index, independent of generation order).
pub fn gen_indexed(spec: &SyntheticSpec, index: usize) -> Result<ImageSample> {
    let class = index_class(spec, index)?;
    let mut rng = seeds::stream_rng(
        spec.seed,
        seeds::streams::DATAGEN_SAMPLE_BASE + index as u64,
    );
    gen_sample(spec, class, &mut rng)
}

/// Generate the full 2·n_per_class dataset sequentially.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    (0..2 * spec.n_per_class).map(|i| gen_indexed(spec, i)).collect()
}

/// Generate the dataset with up to `workers` threads partitioning the index
/// space. Output is identical to [`generate_dataset`].
pub fn generate_dataset_parallel(spec: &SyntheticSpec, workers: usize) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    let total = 2 * spec.n_per_class;
    let workers = workers.clamp(1, total.max(1));
    if workers == 1 {
        return generate_dataset(spec);
    }
    let chunk = total.div_ceil(workers);
    let mut buckets: Vec<Result<Vec<ImageSample>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|wi| {
                let spec = &*spec;
                scope.spawn(move || {
                    let lo = wi * chunk;
                    let hi = ((wi + 1) * chunk).min(total);
                    (lo..hi).map(|i| gen_indexed(spec, i)).collect()
                })
            })
            .collect();
        for handle in handles {
            buckets.push(handle.join().expect("generator thread panicked"));
        }
    });
    let mut out = Vec::with_capacity(total);
    for bucket in buckets {
        out.extend(bucket?);
    }
    Ok(out)
}

// ── Manifests ────────────────────────────────────────────────────────────────

/// Where a manifest entry's pixels come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestSource {
    /// An image file (PNG), relative to the manifest's root directory unless
    /// absolute.
    Path { path: String },
    /// Regenerated on demand from a synthetic spec and sample index — no
    /// files needed.
    Inline { spec: SyntheticSpec, index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source: ManifestSource,
    pub label: Label,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

/// A dataset as a list of sample records. One modality per manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub modality: Modality,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(modality: Modality, entries: Vec<ManifestEntry>) -> DatasetManifest {
        DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            modality,
            entries,
        }
    }

    /// Manifest of inline (regenerate-on-demand) entries for one spec.
    /// Ids are `<regime>-<class>-<index>`; meta carries the regime under the
    /// material/sensor/dataset keys.
    pub fn inline_from_spec(spec: &SyntheticSpec) -> Result<DatasetManifest> {
        spec.validate()?;
        let mut entries = Vec::with_capacity(2 * spec.n_per_class);
        for index in 0..2 * spec.n_per_class {
            let label = index_class(spec, index)?;
            entries.push(ManifestEntry {
                id: format!(
                    "{}-{}-{:05}",
                    spec.generator_regime,
                    label.as_str(),
                    index
                ),
                source: ManifestSource::Inline {
                    spec: spec.clone(),
                    index,
                },
                label,
                meta: spec.meta(),
            });
        }
        Ok(DatasetManifest::new(spec.modality, entries))
    }

    /// Concatenate manifests of the same modality (ids must stay unique).
    pub fn merged(parts: &[DatasetManifest]) -> Result<DatasetManifest> {
        let first = parts
            .first()
            .ok_or_else(|| CoreError::InvalidInput("no manifests to merge".to_string()))?;
        let mut entries = Vec::new();
        for part in parts {
            if part.modality != first.modality {
                return Err(CoreError::Incompatible(
                    "manifests mix modalities".to_string(),
                ));
            }
            entries.extend(part.entries.iter().cloned());
        }
        let merged = DatasetManifest::new(first.modality, entries);
        merged.validate()?;
        Ok(merged)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(CoreError::Incompatible(format!(
                "manifest schema version {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut seen = BTreeSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.id.as_str()) {
                return Err(CoreError::InvalidInput(format!(
                    "duplicate manifest id {:?}",
                    entry.id
                )));
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn count_by_label(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CoreError::Parse("manifest has no schema_version".to_string()))?;
        if version != MANIFEST_SCHEMA_VERSION as u64 {
            return Err(CoreError::Incompatible(format!(
                "manifest schema version {version} is not supported (expected {MANIFEST_SCHEMA_VERSION})"
            )));
        }
        let manifest: DatasetManifest = serde_json::from_value(value)?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// A manifest served as a training/evaluation dataset. Path entries load
/// from disk relative to `root`; inline entries regenerate deterministically.
pub struct ManifestDataset {
    manifest: DatasetManifest,
    root: PathBuf,
}

impl ManifestDataset {
    pub fn new(manifest: DatasetManifest, root: &Path) -> Result<ManifestDataset> {
        manifest.validate()?;
        Ok(ManifestDataset {
            manifest,
            root: root.to_path_buf(),
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn entry(&self, idx: usize) -> Result<&ManifestEntry> {
        self.manifest
            .entries
            .get(idx)
            .ok_or_else(|| CoreError::InvalidInput(format!("index {idx} out of range")))
    }
}

impl Dataset for ManifestDataset {
    fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    fn image(&self, idx: usize) -> Result<ImageSample> {
        let entry = self.entry(idx)?;
        let mut img = match &entry.source {
            ManifestSource::Path { path } => {
                let file = self.root.join(path);
                ImageSample::load_png(&file, self.manifest.modality, Label::Unlabeled)?
            }
            ManifestSource::Inline { spec, index } => gen_indexed(spec, *index)?,
        };
        img.set_label(Label::Unlabeled);
        img.meta = entry.meta.clone();
        Ok(img)
    }

    fn label(&self, idx: usize) -> Result<Label> {
        Ok(self.entry(idx)?.label)
    }
}

// ── Protocol splits ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    CrossMaterial,
    CrossSensor,
    CrossDataset,
}

impl ProtocolKind {
    /// Meta key the protocol splits on.
    pub fn meta_key(self) -> &'static str {
        match self {
            ProtocolKind::CrossMaterial => "material",
            ProtocolKind::CrossSensor => "sensor",
            ProtocolKind::CrossDataset => "dataset",
        }
    }

    pub fn parse(s: &str) -> Result<ProtocolKind> {
        match s {
            "cross_material" => Ok(ProtocolKind::CrossMaterial),
            "cross_sensor" => Ok(ProtocolKind::CrossSensor),
            "cross_dataset" => Ok(ProtocolKind::CrossDataset),
            other => Err(CoreError::Parse(format!("unknown protocol {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::CrossMaterial => "cross_material",
            ProtocolKind::CrossSensor => "cross_sensor",
            ProtocolKind::CrossDataset => "cross_dataset",
        }
    }
}

/// A train/test partition under a generalization protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub name: ProtocolKind,
    pub holdout: Vec<String>,
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

/// Partition a manifest by holding out attribute values.
///
/// Cross-material: attack samples with a held-out material go to test, all
/// other attacks to train; bona fide samples follow their material key when
/// they have one (live captures without a material key stay in train).
/// Cross-sensor / cross-dataset: every sample needs the key, and all samples
/// from held-out sources go to test regardless of class.
pub fn make_protocol_split(
    full: &DatasetManifest,
    protocol: ProtocolKind,
    holdout: &[String],
) -> Result<ProtocolSplit> {
    full.validate()?;
    if holdout.is_empty() {
        return Err(CoreError::InvalidInput(
            "no holdout values given".to_string(),
        ));
    }
    let key = protocol.meta_key();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for entry in &full.entries {
        let value = entry.meta.get(key);
        let held_out = match (protocol, entry.label, value) {
            (ProtocolKind::CrossMaterial, Label::BonaFide, None) => false,
            (_, _, None) => {
                return Err(CoreError::InvalidInput(format!(
                    "sample {:?} has no {key:?} meta key required by the {} protocol",
                    entry.id,
                    protocol.as_str()
                )))
            }
            (_, _, Some(v)) => holdout.iter().any(|h| h == v),
        };
        if held_out {
            test.push(entry.clone());
        } else {
            train.push(entry.clone());
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(CoreError::InsufficientData(format!(
            "{} split left {} train and {} test samples",
            protocol.as_str(),
            train.len(),
            test.len()
        )));
    }
    let split = ProtocolSplit {
        name: protocol,
        holdout: holdout.to_vec(),
        train: DatasetManifest::new(full.modality, train),
        test: DatasetManifest::new(full.modality, test),
    };
    split.verify(full)?;
    Ok(split)
}

impl ProtocolSplit {
    /// Assert split soundness from the manifests alone: exact partition of
    /// the full manifest, and no train attack carries a held-out value.
    pub fn verify(&self, full: &DatasetManifest) -> Result<()> {
        let train_ids = self.train.ids();
        let test_ids = self.test.ids();
        if train_ids.intersection(&test_ids).next().is_some() {
            return Err(CoreError::InvalidInput(
                "train and test overlap".to_string(),
            ));
        }
        let mut union: BTreeSet<&str> = train_ids.union(&test_ids).cloned().collect();
        let full_ids = full.ids();
        if union != full_ids {
            union.clear();
            return Err(CoreError::InvalidInput(
                "train/test union does not equal the full manifest".to_string(),
            ));
        }
        let key = self.name.meta_key();
        for entry in &self.train.entries {
            if entry.label == Label::Attack {
                if let Some(v) = entry.meta.get(key) {
                    if self.holdout.iter().any(|h| h == v) {
                        return Err(CoreError::InvalidInput(format!(
                            "train attack {:?} carries held-out {key} {v:?}",
                            entry.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

// ── Texture statistics & calibration ─────────────────────────────────────────

/// Estimate the dominant spatial frequency (radians per pixel) of an image as
/// the square root of gradient energy over variance. For a pure sinusoid of
/// frequency `f` and orientation `θ` this converges to
/// `sqrt(sin²(f·cosθ) + sin²(f·sinθ))` — `f` in the continuum limit, mildly
/// attenuated at high `f` by central differencing — which is monotone in `f`
/// over the bands used here, so regime ordering survives. Channels pool.
pub fn dominant_frequency(img: &ImageSample) -> f64 {
    let (c, h, w) = img.shape();
    let mut grad2 = 0.0;
    let mut var = 0.0;
    let mut n = 0.0;
    for ch in 0..c {
        let mut mean = 0.0;
        for y in 0..h {
            for x in 0..w {
                mean += img.at(ch, y, x);
            }
        }
        mean /= (h * w) as f64;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let gx = (img.at(ch, y, x + 1) - img.at(ch, y, x - 1)) / 2.0;
                let gy = (img.at(ch, y + 1, x) - img.at(ch, y - 1, x)) / 2.0;
                grad2 += gx * gx + gy * gy;
                let d = img.at(ch, y, x) - mean;
                var += d * d;
                n += 1.0;
            }
        }
    }
    if var <= 0.0 || n == 0.0 {
        return 0.0;
    }
    (grad2 / var).sqrt()
}

/// Mean dominant frequency over a dataset draw of one spec.
pub fn mean_dominant_frequency(spec: &SyntheticSpec) -> Result<f64> {
    let samples = generate_dataset(spec)?;
    Ok(samples.iter().map(dominant_frequency).sum::<f64>() / samples.len() as f64)
}

/// Train a logistic-regression probe on raw (centered) pixels of one draw and
/// report its accuracy on a fresh draw (derived seed). Full-batch gradient
/// descent with a step of `1/L`, `L` the logistic-Hessian spectral bound
/// `max‖x‖²/4`, so the convex fit cannot oscillate. Deterministic.
pub fn linear_probe_accuracy(
    spec: &SyntheticSpec,
    n_train_per_class: usize,
    n_test_per_class: usize,
) -> Result<f64> {
    let mut train_spec = spec.clone();
    train_spec.n_per_class = n_train_per_class;
    let mut test_spec = spec.clone();
    test_spec.n_per_class = n_test_per_class;
    test_spec.seed = seeds::mix(spec.seed, 0x70726f6265); // disjoint draw for eval
    let train = generate_dataset(&train_spec)?;
    let test = generate_dataset(&test_spec)?;

    let centered = |s: &ImageSample| -> Vec<f64> { s.pixels().iter().map(|p| p - 0.5).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(centered).collect();
    let dim = xs[0].len();
    let max_sq_norm = xs
        .iter()
        .map(|x| x.iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    let lr = 1.0 / (0.25 * max_sq_norm.max(1e-9));

    let logit_of = |wgt: &[f64], bias: f64, x: &[f64]| -> f64 {
        bias + wgt.iter().zip(x).map(|(wi, v)| wi * v).sum::<f64>()
    };
    let mut wgt = vec![0.0; dim];
    let mut bias = 0.0;
    let n = train.len() as f64;
    for _ in 0..500 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (sample, x) in train.iter().zip(&xs) {
            let target = if sample.label() == Label::Attack { 1.0 } else { 0.0 };
            let prob = 1.0 / (1.0 + (-logit_of(&wgt, bias, x)).exp());
            let err = (prob - target) / n;
            for (g, v) in gw.iter_mut().zip(x) {
                *g += err * v;
            }
            gb += err;
        }
        for (wi, g) in wgt.iter_mut().zip(&gw) {
            *wi -= lr * g;
        }
        bias -= lr * gb;
    }

    let mut correct = 0usize;
    for sample in &test {
        let predicted_attack = logit_of(&wgt, bias, &centered(sample)) >= 0.0;
        if predicted_attack == (sample.label() == Label::Attack) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

// ── Calibration golden file ──────────────────────────────────────────────────

/// Frozen generator calibration: achieved probe accuracies and regime
/// frequency statistics, recorded once and asserted thereafter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub schema_version: u32,
    /// Inclusive accuracy band the linear probe must land in.
    pub probe_accuracy_band: (f64, f64),
    /// Achieved probe accuracy per modality at calibration time.
    pub probe_accuracy: BTreeMap<String, f64>,
    /// Mean dominant frequency per modality per regime at calibration time.
    pub regime_frequency: BTreeMap<String, BTreeMap<String, f64>>,
    /// Minimum admissible gap between adjacent regimes' mean frequencies.
    pub regime_gap_margin: BTreeMap<String, f64>,
    /// Minimum factor by which pretraining must reduce the reconstruction
    /// loss in the desk-scale smoke run (0.5 = halve it).
    pub pretrain_reconstruction_drop: f64,
}

/// The calibration constants shipped with the crate.
pub fn builtin_calibration() -> Result<Calibration> {
    let text = include_str!("../golden/calibration.json");
    Ok(serde_json::from_str(text)?)
}
