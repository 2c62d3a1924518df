//! The six subcommands. Every writing command echoes its resolved
//! configuration first, produces deterministic artifacts, and confines
//! wall-clock data to `runinfo.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime};

use ifom_core::datagen::{
    generate_dataset_parallel, make_protocol_split, DatasetManifest, ManifestDataset,
    ManifestEntry, ManifestSource,
};
use ifom_core::image::Label;
use ifom_core::metrics::{read_score_file, roc, write_score_file, MetricReport, ScoreSet};
use ifom_core::models::{ArchId, BackboneConfig, Checkpoint, CheckpointKind};
use ifom_core::training::{self, Dataset, Pretrainer, TrainingHistory};

use crate::config::{modality_str, PathsEcho, Resolved, ResolvedEcho};
use crate::{CliError, Result};

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))
}

fn load_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let manifest = DatasetManifest::load(path)
        .map_err(|e| CliError::Runtime(format!("cannot load manifest {}: {e}", path.display())))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((manifest, root))
}

fn write_runinfo(out: &Path, command: &str, started: SystemTime, elapsed: f64) -> Result<()> {
    let started_unix_ms = started
        .duration_since(SystemTime::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    let info = serde_json::json!({
        "command": command,
        "started_unix_ms": started_unix_ms,
        "duration_seconds": elapsed,
    });
    std::fs::write(
        out.join("runinfo.json"),
        serde_json::to_string_pretty(&info)
            .map_err(|e| CliError::Runtime(format!("cannot serialize run info: {e}")))?,
    )
    .map_err(|e| CliError::Runtime(format!("cannot write run info: {e}")))
}

fn print_final_losses(history: &TrainingHistory) {
    if let Some(last) = history.records.last() {
        let parts: Vec<String> = last
            .losses
            .iter()
            .map(|(name, v)| format!("{name}={v:.6}"))
            .collect();
        println!("final step {}: {}", last.step, parts.join(" "));
    }
}

// ── datagen ──────────────────────────────────────────────────────────────────

pub fn datagen(resolved: &Resolved) -> Result<()> {
    if resolved.datasets.is_empty() {
        return Err(CliError::Usage(
            "datagen needs at least one [[dataset]] section".to_string(),
        ));
    }
    for spec in &resolved.datasets {
        spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let out = resolved.require_out()?;
    create_out(&out.join("images"))?;

    let mut echo = ResolvedEcho::new("datagen", resolved, out);
    echo.dataset = resolved.datasets.clone();
    echo.write(out)?;

    let started = SystemTime::now();
    let timer = Instant::now();
    let mut parts = Vec::with_capacity(resolved.datasets.len());
    for (si, spec) in resolved.datasets.iter().enumerate() {
        let samples = generate_dataset_parallel(spec, resolved.workers)?;
        let mut entries = Vec::with_capacity(samples.len());
        for (i, sample) in samples.iter().enumerate() {
            let id = format!(
                "s{si:02}-{}-{}-{i:05}",
                spec.generator_regime,
                sample.label().as_str()
            );
            let rel = format!("images/{id}.png");
            sample.save_png(&out.join(&rel))?;
            entries.push(ManifestEntry {
                id,
                source: ManifestSource::Path { path: rel },
                label: sample.label(),
                meta: sample.meta.clone(),
            });
        }
        println!(
            "dataset {si}: regime {} -> {} bona fide + {} attack",
            spec.generator_regime, spec.n_per_class, spec.n_per_class
        );
        parts.push(DatasetManifest::new(spec.modality, entries));
    }
    let manifest = DatasetManifest::merged(&parts)?;
    manifest.save(&out.join("manifest.json"))?;
    println!(
        "wrote {} samples and {}",
        manifest.entries.len(),
        out.join("manifest.json").display()
    );
    write_runinfo(out, "datagen", started, timer.elapsed().as_secs_f64())
}

// ── pretrain ─────────────────────────────────────────────────────────────────

pub fn pretrain(resolved: &Resolved) -> Result<()> {
    let manifest_path = resolved.paths.manifest.clone().ok_or_else(|| {
        CliError::Usage("pretrain needs [paths] manifest in the config".to_string())
    })?;
    let out = resolved.require_out()?;
    create_out(out)?;
    let (manifest, root) = load_manifest(&manifest_path)?;
    let train_manifest = match &resolved.protocol {
        Some((kind, holdout)) => make_protocol_split(&manifest, *kind, holdout)?.train,
        None => manifest,
    };
    let n_samples = train_manifest.entries.len();
    let cfg = resolved.pretrain_config(train_manifest.modality)?;
    let backbone = resolved.backbone.clone().unwrap_or_else(BackboneConfig::tiny);
    let ds = ManifestDataset::new(train_manifest, &root)?;

    let mut echo = ResolvedEcho::new("pretrain", resolved, out);
    echo.backbone = Some(backbone.clone());
    echo.pretrain = Some(cfg.clone());
    echo.paths = Some(PathsEcho {
        manifest: Some(manifest_path),
        ..PathsEcho::default()
    });
    echo.write(out)?;

    let started = SystemTime::now();
    let timer = Instant::now();
    let ckpt_dir = out.join("checkpoints");
    create_out(&ckpt_dir)?;
    let mut trainer = Pretrainer::new(&backbone, &cfg)?;
    let mut history = TrainingHistory::new(cfg.seed);
    trainer.run(&ds, Some(&ckpt_dir), &mut history)?;
    trainer
        .checkpoint()
        .save(&out.join("pretrain_final.ckpt.json"))?;
    history.write_ndjson(&out.join("pretrain_history.ndjson"))?;
    println!(
        "pretrained {} epochs ({} steps) on {} samples",
        cfg.epochs,
        history.records.len(),
        n_samples
    );
    print_final_losses(&history);
    write_runinfo(out, "pretrain", started, timer.elapsed().as_secs_f64())
}

// ── finetune ─────────────────────────────────────────────────────────────────

pub fn finetune(resolved: &Resolved) -> Result<()> {
    let manifest_path = resolved.paths.manifest.clone().ok_or_else(|| {
        CliError::Usage("finetune needs [paths] manifest in the config".to_string())
    })?;
    let out = resolved.require_out()?;
    create_out(out)?;
    let (manifest, root) = load_manifest(&manifest_path)?;
    let train_manifest = match &resolved.protocol {
        Some((kind, holdout)) => make_protocol_split(&manifest, *kind, holdout)?.train,
        None => manifest,
    };
    let modality = train_manifest.modality;
    let n_samples = train_manifest.entries.len();
    let cfg = resolved.finetune_config()?;
    let ds = ManifestDataset::new(train_manifest, &root)?;

    let (backbone, extractor) = if resolved.from_scratch {
        let backbone = resolved.backbone.clone().unwrap_or_else(BackboneConfig::tiny);
        (backbone, None)
    } else {
        let ckpt_path = resolved.paths.checkpoint.clone().ok_or_else(|| {
            CliError::Usage(
                "finetune needs [paths] checkpoint in the config (or --from-scratch)".to_string(),
            )
        })?;
        let ckpt = Checkpoint::load(&ckpt_path).map_err(|e| {
            CliError::Runtime(format!("cannot load checkpoint {}: {e}", ckpt_path.display()))
        })?;
        if let Some(backbone) = &resolved.backbone {
            if *backbone != ckpt.backbone {
                return Err(CliError::Runtime(format!(
                    "configured backbone does not match checkpoint {}",
                    ckpt_path.display()
                )));
            }
        }
        if ckpt.modality != modality {
            return Err(CliError::Runtime(format!(
                "checkpoint modality {} does not match the manifest's {}",
                modality_str(ckpt.modality),
                modality_str(modality)
            )));
        }
        let bundle = ckpt.restore_bundle()?;
        (ckpt.backbone.clone(), Some(bundle.extractor))
    };

    let mut echo = ResolvedEcho::new("finetune", resolved, out);
    echo.backbone = Some(backbone.clone());
    echo.finetune = Some(cfg.clone());
    echo.from_scratch = Some(resolved.from_scratch);
    echo.paths = Some(PathsEcho {
        manifest: Some(manifest_path),
        checkpoint: resolved.paths.checkpoint.clone().filter(|_| !resolved.from_scratch),
        ..PathsEcho::default()
    });
    echo.write(out)?;

    let started = SystemTime::now();
    let timer = Instant::now();
    let (detector, history) = match extractor {
        Some(extractor) => training::finetune(&extractor, &ds, &cfg)?,
        None => training::finetune_from_scratch(&backbone, &ds, &cfg)?,
    };
    Checkpoint::from_detector(&detector, modality, cfg.seed)
        .save(&out.join("detector.ckpt.json"))?;
    history.write_ndjson(&out.join("finetune_history.ndjson"))?;
    println!(
        "fine-tuned {} epochs ({} steps) on {} samples ({})",
        cfg.epochs,
        history.records.len(),
        n_samples,
        if resolved.from_scratch {
            "from scratch"
        } else {
            "from pretrained trunk"
        }
    );
    print_final_losses(&history);
    write_runinfo(out, "finetune", started, timer.elapsed().as_secs_f64())
}

// ── evaluate ─────────────────────────────────────────────────────────────────

pub fn evaluate(resolved: &Resolved) -> Result<()> {
    let det_path = resolved.paths.detector.clone().ok_or_else(|| {
        CliError::Usage("evaluate needs [paths] detector in the config".to_string())
    })?;
    let out = resolved.require_out()?;
    create_out(out)?;

    let (test_manifest, root) = match (&resolved.paths.test_manifest, &resolved.paths.manifest) {
        (Some(path), _) => load_manifest(path)?,
        (None, Some(path)) => {
            let (manifest, root) = load_manifest(path)?;
            let (kind, holdout) = resolved.protocol.as_ref().ok_or_else(|| {
                CliError::Usage(
                    "evaluate needs [paths] test_manifest, or [paths] manifest plus a [protocol] to derive the test side"
                        .to_string(),
                )
            })?;
            (make_protocol_split(&manifest, *kind, holdout)?.test, root)
        }
        (None, None) => {
            return Err(CliError::Usage(
                "evaluate needs [paths] test_manifest or [paths] manifest".to_string(),
            ))
        }
    };

    let ckpt = Checkpoint::load(&det_path).map_err(|e| {
        CliError::Runtime(format!("cannot load checkpoint {}: {e}", det_path.display()))
    })?;
    if let Some(backbone) = &resolved.backbone {
        if *backbone != ckpt.backbone {
            return Err(CliError::Runtime(format!(
                "configured backbone does not match checkpoint {}",
                det_path.display()
            )));
        }
    }
    if ckpt.modality != test_manifest.modality {
        return Err(CliError::Runtime(format!(
            "checkpoint modality {} does not match the manifest's {}",
            modality_str(ckpt.modality),
            modality_str(test_manifest.modality)
        )));
    }
    let detector = ckpt.restore_detector()?;
    let ds = ManifestDataset::new(test_manifest.clone(), &root)?;

    let mut echo = ResolvedEcho::new("evaluate", resolved, out);
    echo.metrics = Some(crate::config::MetricsEcho {
        fdr_cap: resolved.fdr_cap,
        ace_threshold: resolved.ace_threshold,
    });
    echo.paths = Some(PathsEcho {
        manifest: resolved.paths.manifest.clone(),
        test_manifest: resolved.paths.test_manifest.clone(),
        detector: Some(det_path),
        ..PathsEcho::default()
    });
    echo.write(out)?;

    let started = SystemTime::now();
    let timer = Instant::now();
    let mut rows = Vec::with_capacity(test_manifest.entries.len());
    for (idx, entry) in test_manifest.entries.iter().enumerate() {
        if entry.label == Label::Unlabeled {
            return Err(CliError::Runtime(format!(
                "test sample {} is unlabeled; evaluation needs ground truth",
                entry.id
            )));
        }
        let image = ds.image(idx)?;
        rows.push((entry.id.clone(), entry.label, detector.score(&image)?));
    }
    write_score_file(&out.join("scores.csv"), &rows)?;
    let set = ScoreSet::from_rows(&rows)?;
    let report = MetricReport::compute(&set, resolved.fdr_cap, resolved.ace_threshold)?;
    report.write(&out.join("report.txt"))?;
    roc(&set)?.write_csv(&out.join("roc.csv"))?;
    print!("{}", report.to_text());
    write_runinfo(out, "evaluate", started, timer.elapsed().as_secs_f64())
}

// ── metrics ──────────────────────────────────────────────────────────────────

pub fn metrics(resolved: &Resolved) -> Result<()> {
    let scores_path = resolved.paths.scores.clone().ok_or_else(|| {
        CliError::Usage("metrics needs [paths] scores in the config".to_string())
    })?;
    let rows = read_score_file(&scores_path).map_err(|e| {
        CliError::Runtime(format!("cannot read scores {}: {e}", scores_path.display()))
    })?;
    let set = ScoreSet::from_rows(&rows)?;
    let report = MetricReport::compute(&set, resolved.fdr_cap, resolved.ace_threshold)?;
    if let Some(out) = resolved.out.clone() {
        create_out(&out)?;
        let started = SystemTime::now();
        let timer = Instant::now();
        let mut echo = ResolvedEcho::new("metrics", resolved, &out);
        echo.metrics = Some(crate::config::MetricsEcho {
            fdr_cap: resolved.fdr_cap,
            ace_threshold: resolved.ace_threshold,
        });
        echo.paths = Some(PathsEcho {
            scores: Some(scores_path),
            ..PathsEcho::default()
        });
        echo.write(&out)?;
        report.write(&out.join("report.txt"))?;
        write_runinfo(&out, "metrics", started, timer.elapsed().as_secs_f64())?;
    }
    print!("{}", report.to_text());
    Ok(())
}

// ── inspect ──────────────────────────────────────────────────────────────────

pub fn inspect(path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(path)
        .map_err(|e| CliError::Runtime(format!("cannot load checkpoint {}: {e}", path.display())))?;
    let phase = match ckpt.kind {
        CheckpointKind::Pretrain { epochs_done } => format!("pretrain ({epochs_done} epochs done)"),
        CheckpointKind::Detector => "detector".to_string(),
    };
    let arch = match ckpt.backbone.arch_id {
        ArchId::Tiny => "tiny",
        ArchId::PaperFingerprint => "paper_fingerprint",
        ArchId::PaperFace => "paper_face",
    };
    let (c, h, w) = ckpt.backbone.input_shape;
    println!("checkpoint {}", path.display());
    println!("  phase: {phase}");
    println!("  modality: {}", modality_str(ckpt.modality));
    println!("  backbone: {arch}, input {c}x{h}x{w}, embedding dim {}", ckpt.backbone.embedding_dim);
    println!("  seed: {}", ckpt.seed);
    let mut by_net: BTreeMap<&str, usize> = BTreeMap::new();
    for (name, array) in &ckpt.params {
        *by_net.entry(name.split('.').next().unwrap_or("?")).or_default() += array.len();
    }
    let total: usize = by_net.values().sum();
    println!("  parameters: {total} values in {} arrays", ckpt.params.len());
    for (net, count) in by_net {
        println!("    {net}: {count}");
    }
    if !ckpt.optimizers.is_empty() {
        let nets: Vec<&str> = ckpt.optimizers.keys().map(String::as_str).collect();
        println!("  optimizer state: {}", nets.join(", "));
    }
    Ok(())
}
