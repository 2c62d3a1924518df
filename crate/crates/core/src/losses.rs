//! Training objectives: reconstruction, adversarial (Wasserstein),
//! topological consistency, cross-entropy, and their unweighted sum.
//!
//! Every loss returns a [`LossValue`] (scalar plus per-term breakdown) and,
//! where the trainer needs them, analytic gradients with respect to the
//! loss's direct inputs. Gradients with respect to network parameters are
//! assembled by the caller by chaining these through the network backward
//! passes.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::image::ImageSample;
use crate::models::{Critic, EmbeddingVector};

/// Probabilities are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// A scalar loss with its per-term breakdown. The scalar always equals the
/// sum of the components (all terms enter with unit weight).
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    /// Single-term loss.
    pub fn single(name: &str, value: f64) -> LossValue {
        let mut components = BTreeMap::new();
        components.insert(name.to_string(), value);
        LossValue { value, components }
    }

    /// Multi-term loss; the scalar is the sum of the parts.
    pub fn from_components(components: BTreeMap<String, f64>) -> LossValue {
        let value = components.values().sum();
        LossValue { value, components }
    }
}

/// Additive Gaussian noise injected into the topological residual so a
/// collapsed embedding space cannot reach zero loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub mean: f64,
    pub std: f64,
    /// `true`: one draw per embedding coordinate; `false`: a single draw per
    /// sample broadcast across coordinates.
    pub per_element: bool,
}

impl Default for NoiseSpec {
    fn default() -> NoiseSpec {
        NoiseSpec {
            mean: 0.0,
            std: 0.1,
            per_element: true,
        }
    }
}

impl NoiseSpec {
    /// Noise-free variant (collapse guard off; used by deterministic tests).
    pub fn disabled() -> NoiseSpec {
        NoiseSpec {
            mean: 0.0,
            std: 0.0,
            per_element: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean.is_finite() && self.std.is_finite() && self.std >= 0.0) {
            return Err(CoreError::InvalidSpec(format!(
                "noise must have finite mean and std >= 0, got mean {} std {}",
                self.mean, self.std
            )));
        }
        Ok(())
    }

    /// Draw one noise vector of dimension `dim` (all-zero when std = 0).
    /// Draw order: coordinates ascending.
    pub fn sample(&self, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
        if self.std == 0.0 {
            return vec![self.mean; dim];
        }
        let normal = Normal::new(self.mean, self.std).expect("validated std");
        if self.per_element {
            (0..dim).map(|_| normal.sample(rng)).collect()
        } else {
            vec![normal.sample(rng); dim]
        }
    }
}

fn check_batch_nonempty(n: usize) -> Result<()> {
    if n == 0 {
        return Err(CoreError::InvalidInput("empty batch".to_string()));
    }
    Ok(())
}

// ── Reconstruction ───────────────────────────────────────────────────────────

/// Mean over the batch of the unsquared Euclidean norm of the per-sample
/// pixel difference. Returns the loss and the gradient with respect to each
/// output's pixels (flat, image layout).
pub fn loss_reconstruction(
    y: &[ImageSample],
    x: &[ImageSample],
) -> Result<(LossValue, Vec<Vec<f64>>)> {
    let ys: Vec<&[f64]> = y.iter().map(|s| s.pixels()).collect();
    let xs: Vec<&[f64]> = x.iter().map(|s| s.pixels()).collect();
    loss_reconstruction_raw(&ys, &xs)
}

/// Flat-pixel form of [`loss_reconstruction`] (what the training step uses
/// on raw generator outputs).
pub fn loss_reconstruction_raw(
    y: &[&[f64]],
    x: &[&[f64]],
) -> Result<(LossValue, Vec<Vec<f64>>)> {
    check_batch_nonempty(y.len())?;
    if y.len() != x.len() {
        return Err(CoreError::InvalidInput(format!(
            "batch sizes differ: {} outputs vs {} targets",
            y.len(),
            x.len()
        )));
    }
    let n = y.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(y.len());
    for (yi, xi) in y.iter().zip(x) {
        if yi.len() != xi.len() {
            return Err(CoreError::InvalidInput(format!(
                "pixel counts differ: {} vs {}",
                yi.len(),
                xi.len()
            )));
        }
        let mut norm_sq = 0.0;
        for (a, b) in yi.iter().zip(xi.iter()) {
            let d = a - b;
            norm_sq += d * d;
        }
        let norm = norm_sq.sqrt();
        total += norm;
        // d||r||/dy = r/||r||, scaled by the batch mean; zero at r = 0
        // (any subgradient is valid there, zero keeps the step stable).
        let scale = if norm > 0.0 { 1.0 / (n * norm) } else { 0.0 };
        grads.push(
            yi.iter()
                .zip(xi.iter())
                .map(|(a, b)| (a - b) * scale)
                .collect(),
        );
    }
    Ok((LossValue::single("reconstruction", total / n), grads))
}

// ── Adversarial (Wasserstein) ────────────────────────────────────────────────

/// Critic-score gap `mean(real) − mean(fake)` — the quantity the critic
/// drives up and training logs.
pub fn wasserstein_gap(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    check_batch_nonempty(real_scores.len())?;
    check_batch_nonempty(fake_scores.len())?;
    let mr = real_scores.iter().sum::<f64>() / real_scores.len() as f64;
    let mf = fake_scores.iter().sum::<f64>() / fake_scores.len() as f64;
    Ok(mr - mf)
}

/// Both sides of the adversarial objective from precomputed critic scores:
/// generator-side loss `−mean(fake)` (descent raises fake scores) and
/// critic-side loss `mean(fake) − mean(real)` (descent widens the gap).
pub fn adversarial_from_scores(
    real_scores: &[f64],
    fake_scores: &[f64],
) -> Result<(LossValue, LossValue)> {
    let gap = wasserstein_gap(real_scores, fake_scores)?;
    let mf = fake_scores.iter().sum::<f64>() / fake_scores.len() as f64;
    Ok((
        LossValue::single("adversarial", -mf),
        LossValue::single("critic", -gap),
    ))
}

/// Run the critic over both batches and form the two adversarial losses.
/// Critic weight clipping is the trainer's responsibility after each critic
/// update.
pub fn loss_adversarial(
    critic: &Critic,
    real: &[ImageSample],
    fake: &[ImageSample],
) -> Result<(LossValue, LossValue)> {
    check_batch_nonempty(real.len())?;
    check_batch_nonempty(fake.len())?;
    let real_scores = critic.discriminate_batch(real)?;
    let fake_scores = critic.discriminate_batch(fake)?;
    adversarial_from_scores(&real_scores, &fake_scores)
}

// ── Topological consistency ──────────────────────────────────────────────────

/// Gradients of the topological loss with respect to its three embedding
/// batches. No gradient flows into the noise.
pub struct TopologicalGrads {
    pub d_mix: Vec<Vec<f64>>,
    pub d_i: Vec<Vec<f64>>,
    pub d_j: Vec<Vec<f64>>,
}

/// Mean over the batch of `||z_mix − (ε z_i + (1−ε) z_j) + δ||_2` with the
/// noise vectors supplied explicitly (deterministic form; the sampling
/// wrapper and tests inject through here).
pub fn loss_topological_given_noise(
    z_mix: &[EmbeddingVector],
    z_i: &[EmbeddingVector],
    z_j: &[EmbeddingVector],
    eps: &[f64],
    noise: &[Vec<f64>],
) -> Result<(LossValue, TopologicalGrads)> {
    check_batch_nonempty(z_mix.len())?;
    if z_i.len() != z_mix.len()
        || z_j.len() != z_mix.len()
        || eps.len() != z_mix.len()
        || noise.len() != z_mix.len()
    {
        return Err(CoreError::InvalidInput(format!(
            "batch sizes differ: {} mixed, {} left, {} right, {} eps, {} noise",
            z_mix.len(),
            z_i.len(),
            z_j.len(),
            eps.len(),
            noise.len()
        )));
    }
    let n = z_mix.len() as f64;
    let mut total = 0.0;
    let mut d_mix = Vec::with_capacity(z_mix.len());
    let mut d_i = Vec::with_capacity(z_mix.len());
    let mut d_j = Vec::with_capacity(z_mix.len());
    for (((zm, zi), zj), (e, dl)) in z_mix
        .iter()
        .zip(z_i)
        .zip(z_j)
        .zip(eps.iter().zip(noise))
    {
        let d = zm.dim();
        if zi.dim() != d || zj.dim() != d || dl.len() != d {
            return Err(CoreError::InvalidInput(format!(
                "embedding dimensions differ: {} vs {} vs {} vs noise {}",
                d,
                zi.dim(),
                zj.dim(),
                dl.len()
            )));
        }
        if !(0.0..=1.0).contains(e) {
            return Err(CoreError::InvalidInput(format!(
                "mixing coefficient must lie in [0,1], got {e}"
            )));
        }
        let mut resid = Vec::with_capacity(d);
        let mut norm_sq = 0.0;
        for k in 0..d {
            let r = zm.values[k] - (e * zi.values[k] + (1.0 - e) * zj.values[k]) + dl[k];
            norm_sq += r * r;
            resid.push(r);
        }
        let norm = norm_sq.sqrt();
        total += norm;
        let scale = if norm > 0.0 { 1.0 / (n * norm) } else { 0.0 };
        d_mix.push(resid.iter().map(|r| r * scale).collect());
        d_i.push(resid.iter().map(|r| -e * r * scale).collect());
        d_j.push(resid.iter().map(|r| -(1.0 - e) * r * scale).collect());
    }
    Ok((
        LossValue::single("topological", total / n),
        TopologicalGrads { d_mix, d_i, d_j },
    ))
}

/// Sampling form: draws one fresh δ per sample from the noise spec (noise
/// draw order: batch index ascending, then coordinates), then evaluates the
/// deterministic loss.
pub fn loss_topological(
    z_mix: &[EmbeddingVector],
    z_i: &[EmbeddingVector],
    z_j: &[EmbeddingVector],
    eps: &[f64],
    noise: &NoiseSpec,
    rng: &mut impl Rng,
) -> Result<(LossValue, TopologicalGrads)> {
    noise.validate()?;
    check_batch_nonempty(z_mix.len())?;
    let draws: Vec<Vec<f64>> = z_mix.iter().map(|z| noise.sample(z.dim(), rng)).collect();
    loss_topological_given_noise(z_mix, z_i, z_j, eps, &draws)
}

// ── Cross-entropy ────────────────────────────────────────────────────────────

/// Clamped binary cross-entropy `−mean(u log v + (1−u) log(1−v))` over
/// probability scores `v` and binary targets `u`. Returns the loss and the
/// gradient with respect to each score (zero where the clamp is active).
pub fn loss_crossentropy(v: &[f64], u: &[f64]) -> Result<(LossValue, Vec<f64>)> {
    check_batch_nonempty(v.len())?;
    if v.len() != u.len() {
        return Err(CoreError::InvalidInput(format!(
            "batch sizes differ: {} scores vs {} targets",
            v.len(),
            u.len()
        )));
    }
    let n = v.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(v.len());
    for (&vi, &ui) in v.iter().zip(u) {
        if !vi.is_finite() || !(0.0..=1.0).contains(&vi) {
            return Err(CoreError::InvalidInput(format!(
                "scores must lie in [0,1], got {vi}"
            )));
        }
        if ui != 0.0 && ui != 1.0 {
            return Err(CoreError::InvalidInput(format!(
                "targets must be exactly 0 or 1, got {ui}"
            )));
        }
        let vc = vi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total -= ui * vc.ln() + (1.0 - ui) * (1.0 - vc).ln();
        let grad = if vi <= BCE_CLAMP || vi >= 1.0 - BCE_CLAMP {
            0.0
        } else {
            (-ui / vc + (1.0 - ui) / (1.0 - vc)) / n
        };
        grads.push(grad);
    }
    Ok((LossValue::single("cross_entropy", total / n), grads))
}

// ── Combined pretraining objective ───────────────────────────────────────────

/// Unweighted sum of the pretraining terms. Requires the reconstruction,
/// (generator-side) adversarial, and topological parts; any extra parts are
/// summed in as well and the full breakdown is retained.
pub fn combined_pretrain_loss(parts: &BTreeMap<String, f64>) -> Result<LossValue> {
    for required in ["reconstruction", "adversarial", "topological"] {
        match parts.get(required) {
            None => {
                return Err(CoreError::InvalidInput(format!(
                    "missing loss component {required:?}"
                )))
            }
            Some(v) if !v.is_finite() => {
                return Err(CoreError::InvalidInput(format!(
                    "loss component {required:?} is not finite: {v}"
                )))
            }
            Some(_) => {}
        }
    }
    Ok(LossValue::from_components(parts.clone()))
}
