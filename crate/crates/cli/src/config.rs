//! Run configuration: TOML file plus environment and flag overlays.
//!
//! Precedence is file < environment < flags. Environment overrides are
//! `IFOM_SEED`, `IFOM_OUT`, and `IFOM_NUM_WORKERS`. The fully resolved
//! configuration is echoed to the output directory before any work starts;
//! the echo carries no timestamps, so reruns overwrite it with identical
//! bytes (wall-clock data goes to `runinfo.json` instead).

use std::path::{Path, PathBuf};

use ifom_core::datagen::{ProtocolKind, SyntheticSpec};
use ifom_core::image::Modality;
use ifom_core::losses::NoiseSpec;
use ifom_core::models::BackboneConfig;
use ifom_core::optim::OptimizerKind;
use ifom_core::training::{FinetuneConfig, PretrainConfig};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

// ── File schema ──────────────────────────────────────────────────────────────

/// Top-level TOML schema. Unknown keys anywhere are errors.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Worker cap for data generation; `IFOM_NUM_WORKERS` overrides.
    pub workers: Option<usize>,
    pub backbone: Option<BackboneSection>,
    /// One `[[dataset]]` table per synthetic source to generate.
    #[serde(default)]
    pub dataset: Vec<SyntheticSpec>,
    pub pretrain: Option<PretrainSection>,
    pub finetune: Option<FinetuneSection>,
    pub protocol: Option<ProtocolSection>,
    pub metrics: Option<MetricsSection>,
    pub paths: Option<PathsSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    /// `tiny`, `paper_fingerprint`, or `paper_face`.
    pub arch: String,
}

/// Pretraining hyperparameters as a named preset plus field overrides.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    /// `tiny` (default), `paper_fingerprint`, or `paper_face`.
    pub preset: Option<String>,
    pub optimizer: Option<OptimizerKind>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub critic_clip: Option<f64>,
    pub noise_std: Option<f64>,
    /// Defaults to the training manifest's modality.
    pub modality: Option<Modality>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    /// `tiny` (default), `paper_fingerprint`, or `paper_face`.
    pub preset: Option<String>,
    pub optimizer: Option<OptimizerKind>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    /// Skip loading the pretrained trunk; `--from-scratch` also sets this.
    pub from_scratch: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    /// `cross_material`, `cross_sensor`, or `cross_dataset`.
    pub kind: String,
    /// Attribute values held out of training.
    pub holdout: Vec<String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub fdr_cap: Option<f64>,
    pub ace_threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Training (or full, when a protocol splits it) manifest.
    pub manifest: Option<PathBuf>,
    /// Explicit test manifest; otherwise the protocol's test side is used.
    pub test_manifest: Option<PathBuf>,
    /// Pretraining checkpoint consumed by `finetune`.
    pub checkpoint: Option<PathBuf>,
    /// Detector checkpoint consumed by `evaluate`.
    pub detector: Option<PathBuf>,
    /// Score file consumed by `metrics`.
    pub scores: Option<PathBuf>,
}

// ── Overlays ─────────────────────────────────────────────────────────────────

/// Values taken from command-line flags; they win over file and environment.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub protocol: Option<ProtocolKind>,
    pub from_scratch: bool,
}

fn env_u64(name: &str) -> Result<Option<u64>> {
    match std::env::var(name) {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{name} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn env_usize(name: &str) -> Result<Option<usize>> {
    match std::env::var(name) {
        Ok(v) => v
            .parse::<usize>()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{name} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

// ── Resolution ───────────────────────────────────────────────────────────────

/// Everything a command needs, after file + environment + flag overlay.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub workers: usize,
    /// `Some` only when the file named an architecture explicitly; commands
    /// that load checkpoints otherwise adopt the checkpoint's backbone.
    pub backbone: Option<BackboneConfig>,
    pub datasets: Vec<SyntheticSpec>,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub from_scratch: bool,
    pub protocol: Option<(ProtocolKind, Vec<String>)>,
    pub fdr_cap: f64,
    pub ace_threshold: f64,
    pub paths: PathsSection,
}

pub fn load_file(path: &Path) -> Result<RunConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

pub fn resolve(file: RunConfigFile, flags: &FlagOverrides) -> Result<Resolved> {
    let seed = flags
        .seed
        .or(env_u64("IFOM_SEED")?)
        .or(file.seed)
        .unwrap_or(0);
    let out = flags
        .out
        .clone()
        .or_else(|| std::env::var_os("IFOM_OUT").map(PathBuf::from))
        .or(file.out);
    let workers = env_usize("IFOM_NUM_WORKERS")?
        .or(file.workers)
        .unwrap_or(1);
    if workers == 0 {
        return Err(CliError::Usage("workers must be at least 1".to_string()));
    }

    let backbone = match &file.backbone {
        None => None,
        Some(section) => Some(match section.arch.as_str() {
            "tiny" => BackboneConfig::tiny(),
            "paper_fingerprint" => BackboneConfig::paper_fingerprint(),
            "paper_face" => BackboneConfig::paper_face(),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown backbone arch {other:?} (expected tiny, paper_fingerprint, or paper_face)"
                )))
            }
        }),
    };

    let protocol = match (&flags.protocol, &file.protocol) {
        (None, None) => None,
        (Some(kind), None) => {
            return Err(CliError::Usage(format!(
                "--protocol {} needs a [protocol] section with holdout values",
                kind.as_str()
            )))
        }
        (kind_flag, Some(section)) => {
            let kind = match kind_flag {
                Some(k) => *k,
                None => ProtocolKind::parse(&section.kind)
                    .map_err(|e| CliError::Usage(e.to_string()))?,
            };
            if section.holdout.is_empty() {
                return Err(CliError::Usage(
                    "[protocol] holdout must name at least one value".to_string(),
                ));
            }
            Some((kind, section.holdout.clone()))
        }
    };

    let metrics = file.metrics.unwrap_or(MetricsSection {
        fdr_cap: None,
        ace_threshold: None,
    });
    let fdr_cap = metrics.fdr_cap.unwrap_or(ifom_core::metrics::DEFAULT_FDR_CAP);
    let ace_threshold = metrics
        .ace_threshold
        .unwrap_or(ifom_core::metrics::DEFAULT_ACE_THRESHOLD);

    let from_scratch =
        flags.from_scratch || file.finetune.as_ref().is_some_and(|f| f.from_scratch == Some(true));

    Ok(Resolved {
        seed,
        out,
        workers,
        backbone,
        datasets: file.dataset,
        pretrain: file.pretrain.unwrap_or_default(),
        finetune: file.finetune.unwrap_or_default(),
        from_scratch,
        protocol,
        fdr_cap,
        ace_threshold,
        paths: file.paths.unwrap_or_default(),
    })
}

fn preset_err(kind: &str, preset: &str) -> CliError {
    CliError::Usage(format!(
        "unknown {kind} preset {preset:?} (expected tiny, paper_fingerprint, or paper_face)"
    ))
}

impl Resolved {
    /// Concrete pretraining hyperparameters: preset, then field overrides,
    /// then the run seed and the data modality.
    pub fn pretrain_config(&self, data_modality: Modality) -> Result<PretrainConfig> {
        let section = &self.pretrain;
        let mut cfg = match section.preset.as_deref().unwrap_or("tiny") {
            "tiny" => PretrainConfig::tiny(self.seed),
            "paper_fingerprint" => PretrainConfig::paper_fingerprint(self.seed),
            "paper_face" => PretrainConfig::paper_face(self.seed),
            other => return Err(preset_err("pretrain", other)),
        };
        if let Some(v) = section.optimizer {
            cfg.optimizer = v;
        }
        if let Some(v) = section.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = section.beta1 {
            cfg.beta1 = v;
        }
        if let Some(v) = section.beta2 {
            cfg.beta2 = v;
        }
        if let Some(v) = section.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = section.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = section.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = section.critic_clip {
            cfg.critic_clip = v;
        }
        if let Some(v) = section.noise_std {
            cfg.noise = NoiseSpec {
                std: v,
                ..NoiseSpec::default()
            };
        }
        cfg.modality = section.modality.unwrap_or(data_modality);
        if cfg.modality != data_modality {
            return Err(CliError::Usage(format!(
                "[pretrain] modality {} does not match the manifest's {}",
                modality_str(cfg.modality),
                modality_str(data_modality)
            )));
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Concrete fine-tuning hyperparameters.
    pub fn finetune_config(&self) -> Result<FinetuneConfig> {
        let section = &self.finetune;
        let mut cfg = match section.preset.as_deref().unwrap_or("tiny") {
            "tiny" => FinetuneConfig::tiny(self.seed),
            "paper_fingerprint" => FinetuneConfig::paper_fingerprint(self.seed),
            "paper_face" => FinetuneConfig::paper_face(self.seed),
            other => return Err(preset_err("finetune", other)),
        };
        if let Some(v) = section.optimizer {
            cfg.optimizer = v;
        }
        if let Some(v) = section.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = section.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = section.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = section.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = section.epochs {
            cfg.epochs = v;
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| {
            CliError::Usage("no output directory (set `out` in the config, IFOM_OUT, or --out)".to_string())
        })
    }
}

pub fn modality_str(m: Modality) -> &'static str {
    match m {
        Modality::Face => "face",
        Modality::Fingerprint => "fingerprint",
    }
}

// ── Resolved-config echo ─────────────────────────────────────────────────────

/// The audit record written to `<out>/resolved_config.toml`. Scalar fields
/// precede tables so the TOML serializer never backtracks; everything here is
/// deterministic given config + seed.
#[derive(Debug, Serialize)]
pub struct ResolvedEcho {
    pub command: String,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from_scratch: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<ProtocolEcho>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsEcho>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<PathsEcho>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneConfig>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub dataset: Vec<SyntheticSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneConfig>,
}

#[derive(Debug, Serialize)]
pub struct ProtocolEcho {
    pub kind: String,
    pub holdout: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct MetricsEcho {
    pub fdr_cap: f64,
    pub ace_threshold: f64,
}

#[derive(Debug, Default, Serialize)]
pub struct PathsEcho {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<PathBuf>,
}

impl ResolvedEcho {
    pub fn new(command: &str, resolved: &Resolved, out: &Path) -> ResolvedEcho {
        ResolvedEcho {
            command: command.to_string(),
            seed: resolved.seed,
            workers: resolved.workers,
            out: out.to_path_buf(),
            from_scratch: None,
            protocol: resolved.protocol.as_ref().map(|(kind, holdout)| ProtocolEcho {
                kind: kind.as_str().to_string(),
                holdout: holdout.clone(),
            }),
            metrics: None,
            paths: None,
            backbone: None,
            dataset: Vec::new(),
            pretrain: None,
            finetune: None,
        }
    }

    /// Write the echo before any work starts; byte-identical across reruns.
    pub fn write(&self, out: &Path) -> Result<()> {
        let text = toml::to_string(self)
            .map_err(|e| CliError::Runtime(format!("cannot serialize resolved config: {e}")))?;
        std::fs::write(out.join("resolved_config.toml"), text).map_err(|e| {
            CliError::Runtime(format!("cannot write resolved config to {}: {e}", out.display()))
        })?;
        Ok(())
    }
}
