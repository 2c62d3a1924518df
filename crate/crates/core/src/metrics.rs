//! Exact presentation-attack-detection metrics over spoofness scores.
//!
//! Attack is the positive class and the classification rule everywhere is
//! "predict attack iff score >= threshold". All metrics are computed exactly
//! from integer counts — no binning, no interpolation beyond the documented
//! EER tie rule — so independent sweep oracles must agree to ~1e-12.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::image::Label;

/// Default false-detection-rate cap for [`tdr_at_fdr`].
pub const DEFAULT_FDR_CAP: f64 = 0.01;
/// Default fixed decision threshold for [`ace`].
pub const DEFAULT_ACE_THRESHOLD: f64 = 0.5;

/// Spoofness scores partitioned by ground truth. Construction checks
/// finiteness; the ratio metrics additionally require both classes non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    attack: Vec<f64>,
    bona_fide: Vec<f64>,
}

impl ScoreSet {
    pub fn new(attack: Vec<f64>, bona_fide: Vec<f64>) -> Result<Self> {
        if attack.iter().chain(&bona_fide).any(|s| !s.is_finite()) {
            return Err(CoreError::InvalidInput(
                "scores must be finite".to_string(),
            ));
        }
        Ok(ScoreSet { attack, bona_fide })
    }

    /// Partition labeled score rows. Unlabeled rows are rejected: evaluation
    /// needs ground truth.
    pub fn from_rows(rows: &[(String, Label, f64)]) -> Result<Self> {
        let mut attack = Vec::new();
        let mut bona_fide = Vec::new();
        for (id, label, score) in rows {
            match label {
                Label::Attack => attack.push(*score),
                Label::BonaFide => bona_fide.push(*score),
                Label::Unlabeled => {
                    return Err(CoreError::InvalidInput(format!(
                        "sample {id} is unlabeled; metrics need ground truth"
                    )))
                }
            }
        }
        ScoreSet::new(attack, bona_fide)
    }

    pub fn attack(&self) -> &[f64] {
        &self.attack
    }

    pub fn bona_fide(&self) -> &[f64] {
        &self.bona_fide
    }

    fn require_both_classes(&self) -> Result<()> {
        if self.attack.is_empty() || self.bona_fide.is_empty() {
            return Err(CoreError::InsufficientData(format!(
                "ratio metrics need both classes, got {} attack / {} bona fide scores",
                self.attack.len(),
                self.bona_fide.len()
            )));
        }
        Ok(())
    }
}

/// One operating point of the step-function ROC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Step-function ROC: points sorted by threshold descending, starting at the
/// above-all-scores sentinel (0,0) and ending at (1,1).
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn points(&self) -> &[RocPoint] {
        &self.points
    }

    /// Export as two-column delimited text with an `fpr,tpr` header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.fpr, p.tpr));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Exact ROC over all distinct score thresholds (descending), preceded by a
/// +inf sentinel so the (0,0) endpoint is always present.
pub fn roc(scores: &ScoreSet) -> Result<RocCurve> {
    scores.require_both_classes()?;
    let na = scores.attack.len() as f64;
    let nb = scores.bona_fide.len() as f64;

    // Pool scores descending, tagging the class, then sweep distinct values.
    let mut pooled: Vec<(f64, bool)> = scores
        .attack
        .iter()
        .map(|&s| (s, true))
        .chain(scores.bona_fide.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores are finite"));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pooled.len() {
        let t = pooled[i].0;
        // Consume the whole tie group: at threshold t every score >= t is
        // predicted attack, so the group enters as one step.
        while i < pooled.len() && pooled[i].0 == t {
            if pooled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / nb,
            tpr: tp as f64 / na,
        });
    }
    Ok(RocCurve { points })
}

/// Area under the ROC as the exact Mann–Whitney statistic:
/// P(attack score > bona fide score) + ½·P(tie), via sorted pair counting.
pub fn auc(scores: &ScoreSet) -> Result<f64> {
    scores.require_both_classes()?;
    let mut attack = scores.attack.clone();
    let mut bona = scores.bona_fide.clone();
    attack.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    bona.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));

    let (mut lt, mut le) = (0usize, 0usize); // bona strictly below / at-or-below the current attack score
    let mut wins_x2 = 0u64; // twice the pair-count sum, so ties stay integral
    for &a in &attack {
        while lt < bona.len() && bona[lt] < a {
            lt += 1;
        }
        while le < bona.len() && bona[le] <= a {
            le += 1;
        }
        wins_x2 += 2 * lt as u64 + (le - lt) as u64;
    }
    Ok(wins_x2 as f64 / (2.0 * attack.len() as f64 * bona.len() as f64))
}

/// Equal error rate: (FPR + FNR)/2 at the threshold minimizing |FPR − FNR|.
/// Thresholds are swept descending and the first strict minimizer wins, which
/// makes the discrete tie handling reproducible.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    let curve = roc(scores)?;
    let mut best_gap = f64::INFINITY;
    let mut best = 0.5;
    for p in curve.points() {
        let fnr = 1.0 - p.tpr;
        let gap = (p.fpr - fnr).abs();
        if gap < best_gap {
            best_gap = gap;
            best = (p.fpr + fnr) / 2.0;
        }
    }
    Ok(best)
}

/// Maximum TPR over achievable operating points with FPR ≤ `fdr_cap`
/// ("false detection" = bona fide flagged as attack). No interpolation: if
/// only the sentinel qualifies, the answer is 0.
pub fn tdr_at_fdr(scores: &ScoreSet, fdr_cap: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&fdr_cap) || fdr_cap <= 0.0 {
        return Err(CoreError::InvalidInput(format!(
            "fdr_cap must lie in (0,1), got {fdr_cap}"
        )));
    }
    let curve = roc(scores)?;
    Ok(curve
        .points()
        .iter()
        .filter(|p| p.fpr <= fdr_cap)
        .map(|p| p.tpr)
        .fold(0.0, f64::max))
}

/// Average classification error (FNR + FPR)/2 at a fixed threshold, under
/// the same "score ≥ threshold predicts attack" rule.
pub fn ace(scores: &ScoreSet, threshold: f64) -> Result<f64> {
    scores.require_both_classes()?;
    let fn_count = scores.attack.iter().filter(|&&s| s < threshold).count();
    let fp_count = scores.bona_fide.iter().filter(|&&s| s >= threshold).count();
    let fnr = fn_count as f64 / scores.attack.len() as f64;
    let fpr = fp_count as f64 / scores.bona_fide.len() as f64;
    Ok((fnr + fpr) / 2.0)
}

/// The standard report bundle computed from one score set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub n_attack: usize,
    pub n_bona_fide: usize,
    pub auc: f64,
    pub eer: f64,
    pub tdr_at_fdr: f64,
    pub fdr_cap: f64,
    pub ace: f64,
    pub ace_threshold: f64,
}

impl MetricReport {
    pub fn compute(scores: &ScoreSet, fdr_cap: f64, ace_threshold: f64) -> Result<Self> {
        Ok(MetricReport {
            n_attack: scores.attack.len(),
            n_bona_fide: scores.bona_fide.len(),
            auc: auc(scores)?,
            eer: eer(scores)?,
            tdr_at_fdr: tdr_at_fdr(scores, fdr_cap)?,
            fdr_cap,
            ace: ace(scores, ace_threshold)?,
            ace_threshold,
        })
    }

    /// Key-value text, one metric per line, floats in full round-trip
    /// precision. Field order is fixed so reruns are byte-identical.
    pub fn to_text(&self) -> String {
        format!(
            "n_attack = {}\nn_bona_fide = {}\nauc = {}\neer = {}\ntdr_at_fdr = {}\nfdr_cap = {}\nace = {}\nace_threshold = {}\n",
            self.n_attack,
            self.n_bona_fide,
            self.auc,
            self.eer,
            self.tdr_at_fdr,
            self.fdr_cap,
            self.ace,
            self.ace_threshold
        )
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| {
                CoreError::Parse(format!("report line {line:?} is not `key = value`"))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<String> {
            map.get(k)
                .cloned()
                .ok_or_else(|| CoreError::Parse(format!("report missing key {k:?}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|e| CoreError::Parse(format!("bad value for {k:?}: {e}")))
        };
        Ok(MetricReport {
            n_attack: num("n_attack")? as usize,
            n_bona_fide: num("n_bona_fide")? as usize,
            auc: num("auc")?,
            eer: num("eer")?,
            tdr_at_fdr: num("tdr_at_fdr")?,
            fdr_cap: num("fdr_cap")?,
            ace: num("ace")?,
            ace_threshold: num("ace_threshold")?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }
}

/// Write a score file: `id,label,score` header plus one row per sample,
/// scores in full round-trip precision.
pub fn write_score_file(path: &Path, rows: &[(String, Label, f64)]) -> Result<()> {
    let mut out = String::from("id,label,score\n");
    for (id, label, score) in rows {
        if id.contains(',') || id.contains('\n') {
            return Err(CoreError::InvalidInput(format!(
                "sample id {id:?} contains a delimiter"
            )));
        }
        out.push_str(&format!("{},{},{}\n", id, label.as_str(), score));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a score file written by [`write_score_file`].
pub fn read_score_file(path: &Path) -> Result<Vec<(String, Label, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("id,label,score") => {}
        other => {
            return Err(CoreError::Parse(format!(
                "score file must start with `id,label,score`, got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let id = parts.next().unwrap_or_default().to_string();
        let label = parts
            .next()
            .ok_or_else(|| CoreError::Parse(format!("row {}: missing label", lineno + 2)))?;
        let score = parts
            .next()
            .ok_or_else(|| CoreError::Parse(format!("row {}: missing score", lineno + 2)))?
            .parse::<f64>()
            .map_err(|e| CoreError::Parse(format!("row {}: bad score: {e}", lineno + 2)))?;
        rows.push((id, Label::parse(label)?, score));
    }
    Ok(rows)
}
