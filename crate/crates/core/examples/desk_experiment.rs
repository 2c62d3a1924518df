//! Diagnostic for the desk-scale transfer experiment: prints per-seed
//! reconstruction-loss trajectories and held-out-regime AUCs for the
//! pretrained and from-scratch arms.
//!
//! Run with `cargo run -p ifom-core --example desk_experiment --release`.
//! Environment knobs: `SEEDS` (comma list, default `301,302,303,304,305`),
//! `PRETRAIN_EPOCHS`, `FINETUNE_EPOCHS`, `PRETRAIN_LR`, `FINETUNE_LR`,
//! `PRETRAIN_BATCH`, `FINETUNE_BATCH`, `CURVE=1` (per-epoch loss means).

use std::path::Path;
use std::time::Instant;

use ifom_core::datagen::{
    make_protocol_split, DatasetManifest, ManifestDataset, ProtocolKind, SyntheticSpec,
};
use ifom_core::image::Label;
use ifom_core::metrics::{auc, ScoreSet};
use ifom_core::models::{BackboneConfig, Detector};
use ifom_core::training::{
    finetune, finetune_from_scratch, pretrain, Dataset, FinetuneConfig, PretrainConfig, VecDataset,
};

fn env_or<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn materialize(ds: &dyn Dataset) -> VecDataset {
    let mut samples = Vec::with_capacity(ds.len());
    for idx in 0..ds.len() {
        let mut img = ds.image(idx).unwrap();
        img.set_label(ds.label(idx).unwrap());
        samples.push(img);
    }
    VecDataset::new(samples)
}

fn main() {
    let seeds: Vec<u64> = std::env::var("SEEDS")
        .unwrap_or_else(|_| "301,302,303,304,305".to_string())
        .split(',')
        .map(|s| s.trim().parse().unwrap())
        .collect();
    let pretrain_epochs: usize = env_or("PRETRAIN_EPOCHS", 10);
    let finetune_epochs: usize = env_or("FINETUNE_EPOCHS", 5);
    let pretrain_lr: f64 = env_or("PRETRAIN_LR", PretrainConfig::tiny(0).learning_rate);
    let finetune_lrs: Vec<f64> = std::env::var("FINETUNE_LR")
        .unwrap_or_else(|_| FinetuneConfig::tiny(0).learning_rate.to_string())
        .split(',')
        .map(|s| s.trim().parse().unwrap())
        .collect();
    let pretrain_batch: usize = env_or("PRETRAIN_BATCH", PretrainConfig::tiny(0).batch_size);
    let finetune_batch: usize = env_or("FINETUNE_BATCH", FinetuneConfig::tiny(0).batch_size);
    let beta2: f64 = env_or("BETA2", PretrainConfig::tiny(0).beta2);
    let curve: bool = env_or("CURVE", 0u32) != 0;

    let coarse =
        DatasetManifest::inline_from_spec(&SyntheticSpec::fingerprint("coarse", 500, 1234))
            .unwrap();
    let mut fine =
        DatasetManifest::inline_from_spec(&SyntheticSpec::fingerprint("fine", 500, 1235)).unwrap();
    for entry in &mut fine.entries {
        entry.id = format!("fine-{}", entry.id);
    }
    let full = DatasetManifest::merged(&[coarse, fine]).unwrap();
    let split =
        make_protocol_split(&full, ProtocolKind::CrossMaterial, &["fine".to_string()]).unwrap();
    let train = materialize(&ManifestDataset::new(split.train.clone(), Path::new(".")).unwrap());
    let test = materialize(&ManifestDataset::new(split.test.clone(), Path::new(".")).unwrap());
    eprintln!(
        "train {} samples, test {} samples; pretrain {pretrain_epochs} epochs lr {pretrain_lr}, finetune {finetune_epochs} epochs lrs {finetune_lrs:?}",
        train.len(),
        test.len()
    );

    let backbone = BackboneConfig::tiny();
    let score_all = |det: &Detector| -> f64 {
        let mut attack = Vec::new();
        let mut bona = Vec::new();
        for sample in test.samples() {
            let s = det.score(sample).unwrap();
            match sample.label() {
                Label::Attack => attack.push(s),
                Label::BonaFide => bona.push(s),
                Label::Unlabeled => unreachable!(),
            }
        }
        auc(&ScoreSet::new(attack, bona).unwrap()).unwrap()
    };

    let mut aucs_pre = vec![Vec::new(); finetune_lrs.len()];
    let mut aucs_scr = vec![Vec::new(); finetune_lrs.len()];
    let mut ratios = Vec::new();
    for &seed in &seeds {
        let t0 = Instant::now();
        let pre_cfg = PretrainConfig {
            epochs: pretrain_epochs,
            learning_rate: pretrain_lr,
            batch_size: pretrain_batch,
            beta2,
            ..PretrainConfig::tiny(seed)
        };
        let (extractor, history) = pretrain(&train, &backbone, &pre_cfg, None).unwrap();
        let series = history.series("reconstruction");
        let first = series.first().unwrap().1;
        let per_epoch = series.len() / pre_cfg.epochs;
        if curve {
            let means: Vec<String> = series
                .chunks(per_epoch)
                .map(|c| {
                    format!("{:.2}", c.iter().map(|(_, v)| v).sum::<f64>() / c.len() as f64)
                })
                .collect();
            eprintln!("seed {seed} L_r per epoch: {}", means.join(" "));
        }
        let last_epoch_start = series.len() - per_epoch;
        let last_mean: f64 = series[last_epoch_start..]
            .iter()
            .map(|(_, v)| v)
            .sum::<f64>()
            / (series.len() - last_epoch_start) as f64;
        let ratio = last_mean / first;
        ratios.push(ratio);
        let t_pre = t0.elapsed().as_secs_f64();

        eprintln!("seed {seed}: L_r {first:.4} -> {last_mean:.4} (ratio {ratio:.3}) | pretrain {t_pre:.0}s");
        let ce = |h: &ifom_core::training::TrainingHistory| {
            h.series("cross_entropy").last().map(|(_, v)| *v).unwrap()
        };
        for (li, &lr) in finetune_lrs.iter().enumerate() {
            let ft_cfg = FinetuneConfig {
                epochs: finetune_epochs,
                learning_rate: lr,
                batch_size: finetune_batch,
                ..FinetuneConfig::tiny(seed)
            };
            let t1 = Instant::now();
            let (det_pre, hist_pre) = finetune(&extractor, &train, &ft_cfg).unwrap();
            let (det_scr, hist_scr) = finetune_from_scratch(&backbone, &train, &ft_cfg).unwrap();
            let t_ft = t1.elapsed().as_secs_f64();
            let a_pre = score_all(&det_pre);
            let a_scr = score_all(&det_scr);
            aucs_pre[li].push(a_pre);
            aucs_scr[li].push(a_scr);
            eprintln!(
                "  ft lr {lr}: auc pre {a_pre:.4} scr {a_scr:.4} | ce pre {:.4} scr {:.4} | {t_ft:.0}s",
                ce(&hist_pre),
                ce(&hist_scr),
            );
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for (li, &lr) in finetune_lrs.iter().enumerate() {
        eprintln!(
            "mean (ft lr {lr}): ratio {:.3}, auc pretrained {:.4}, auc scratch {:.4}",
            mean(&ratios),
            mean(&aucs_pre[li]),
            mean(&aucs_scr[li])
        );
    }
}
