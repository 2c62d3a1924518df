//! De-Folding and mixing transforms.
//!
//! De-Folding cuts an image into patches (two vertical strips for faces,
//! four quadrants for fingerprints), optionally flips each patch toward a
//! canonical orientation, resizes every patch back to the full frame with
//! corner-aligned bilinear interpolation, and averages them. Mixing forms a
//! convex combination of two images. Both are pure functions: all randomness
//! lives in the spec-sampling helpers, which take an explicit seeded source.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::image::{ImageSample, Label, Modality};

/// Inclusive range the cut fractions are drawn from and validated against.
/// Keeps every patch at least a quarter of the frame, so no degenerate
/// slivers are ever resized.
pub const CUT_RANGE: (f64, f64) = (0.25, 0.75);

/// Parameters of one De-Folding application.
///
/// Face specs cut once vertically and carry two flip flags (left, right
/// patch; both flips are horizontal). Fingerprint specs cut on both axes and
/// carry four flags in quadrant order top-left, top-right, bottom-left,
/// bottom-right; when set they flip that quadrant toward the top-left
/// canonical frame (TL: horizontal, TR: horizontal, BL: vertical, BR: both).
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSpec {
    modality: Modality,
    cut_v: f64,
    cut_h: Option<f64>,
    flips: Vec<bool>,
}

fn check_cut(name: &str, value: f64) -> Result<()> {
    if !(CUT_RANGE.0..=CUT_RANGE.1).contains(&value) {
        return Err(CoreError::InvalidSpec(format!(
            "{name} = {value} outside [{}, {}]",
            CUT_RANGE.0, CUT_RANGE.1
        )));
    }
    Ok(())
}

impl FoldSpec {
    pub fn face(cut_v: f64, flips: [bool; 2]) -> Result<Self> {
        check_cut("cut_v", cut_v)?;
        Ok(FoldSpec {
            modality: Modality::Face,
            cut_v,
            cut_h: None,
            flips: flips.to_vec(),
        })
    }

    pub fn fingerprint(cut_v: f64, cut_h: f64, flips: [bool; 4]) -> Result<Self> {
        check_cut("cut_v", cut_v)?;
        check_cut("cut_h", cut_h)?;
        Ok(FoldSpec {
            modality: Modality::Fingerprint,
            cut_v,
            cut_h: Some(cut_h),
            flips: flips.to_vec(),
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn cut_v(&self) -> f64 {
        self.cut_v
    }

    pub fn cut_h(&self) -> Option<f64> {
        self.cut_h
    }

    pub fn flips(&self) -> &[bool] {
        &self.flips
    }
}

/// Mixing coefficient for a convex combination of two images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixSpec {
    epsilon: f64,
}

impl MixSpec {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) || !epsilon.is_finite() {
            return Err(CoreError::InvalidSpec(format!(
                "epsilon = {epsilon} outside [0,1]"
            )));
        }
        Ok(MixSpec { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Draw a random fold spec: cut fractions uniform over `CUT_RANGE`, each flip
/// flag an independent fair coin. Draw order is fixed (cut_v, then cut_h for
/// fingerprints, then flips left-to-right) so a seeded source reproduces the
/// same spec.
pub fn sample_fold_spec(rng: &mut impl Rng, modality: Modality) -> FoldSpec {
    let cut_v = rng.random_range(CUT_RANGE.0..=CUT_RANGE.1);
    match modality {
        Modality::Face => {
            let flips = [rng.random_bool(0.5), rng.random_bool(0.5)];
            FoldSpec::face(cut_v, flips).expect("sampled cut is in range")
        }
        Modality::Fingerprint => {
            let cut_h = rng.random_range(CUT_RANGE.0..=CUT_RANGE.1);
            let flips = [
                rng.random_bool(0.5),
                rng.random_bool(0.5),
                rng.random_bool(0.5),
                rng.random_bool(0.5),
            ];
            FoldSpec::fingerprint(cut_v, cut_h, flips).expect("sampled cuts are in range")
        }
    }
}

/// Draw a mixing coefficient uniformly from [0,1).
pub fn sample_mix_spec(rng: &mut impl Rng) -> MixSpec {
    MixSpec::new(rng.random_range(0.0..1.0)).expect("sampled epsilon is in range")
}

/// One cropped (and possibly flipped) single-channel patch.
struct Patch {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Patch {
    fn crop(img: &ImageSample, c: usize, rows: (usize, usize), cols: (usize, usize)) -> Patch {
        let (y0, y1) = rows;
        let (x0, x1) = cols;
        let (h, w) = (y1 - y0, x1 - x0);
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y1 {
            for x in x0..x1 {
                data.push(img.at(c, y, x));
            }
        }
        Patch { h, w, data }
    }

    fn flip_horizontal(&mut self) {
        for row in self.data.chunks_exact_mut(self.w) {
            row.reverse();
        }
    }

    fn flip_vertical(&mut self) {
        for y in 0..self.h / 2 {
            for x in 0..self.w {
                self.data.swap(y * self.w + x, (self.h - 1 - y) * self.w + x);
            }
        }
    }

    /// Corner-aligned bilinear resize to (out_h, out_w): output corners map
    /// exactly onto input corners, interior samples interpolate linearly.
    fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Patch {
        let scale = |out: usize, inp: usize, i: usize| -> f64 {
            if out <= 1 {
                0.0
            } else {
                i as f64 * (inp - 1) as f64 / (out - 1) as f64
            }
        };
        let mut data = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let sy = scale(out_h, self.h, oy);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let ty = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = scale(out_w, self.w, ox);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let tx = sx - x0 as f64;
                let top = self.data[y0 * self.w + x0] * (1.0 - tx) + self.data[y0 * self.w + x1] * tx;
                let bot = self.data[y1 * self.w + x0] * (1.0 - tx) + self.data[y1 * self.w + x1] * tx;
                data.push(top * (1.0 - ty) + bot * ty);
            }
        }
        Patch {
            h: out_h,
            w: out_w,
            data,
        }
    }
}

fn cut_index(fraction: f64, extent: usize) -> Result<usize> {
    let c = (fraction * extent as f64).round() as usize;
    if c == 0 || c >= extent {
        return Err(CoreError::InvalidSpec(format!(
            "cut fraction {fraction} produces a zero-size patch on extent {extent}"
        )));
    }
    Ok(c)
}

fn check_fold_modality(image: &ImageSample, spec: &FoldSpec, want: Modality) -> Result<()> {
    if image.modality() != want || spec.modality() != want {
        return Err(CoreError::InvalidInput(format!(
            "fold expects {want} image and spec, got image = {}, spec = {}",
            image.modality(),
            spec.modality()
        )));
    }
    Ok(())
}

/// Average a set of full-frame patches into an output image that keeps the
/// input's shape, label, and metadata. Values are clamped to [0,1] to absorb
/// last-ulp rounding from the convex arithmetic.
fn average_patches(image: &ImageSample, per_channel: Vec<Vec<Patch>>) -> Result<ImageSample> {
    let (c, h, w) = image.shape();
    let n = per_channel[0].len() as f64;
    let mut pixels = Vec::with_capacity(c * h * w);
    for patches in &per_channel {
        for i in 0..h * w {
            let sum: f64 = patches.iter().map(|p| p.data[i]).sum();
            pixels.push((sum / n).clamp(0.0, 1.0));
        }
    }
    let mut out = ImageSample::new(image.modality(), image.label(), (c, h, w), pixels)?;
    out.meta = image.meta.clone();
    Ok(out)
}

/// De-Folding for faces: cut at column `round(cut_v * W)` into left/right
/// strips, horizontally flip each strip whose flag is set, resize both to the
/// full frame, and average.
pub fn fold_face(image: &ImageSample, spec: &FoldSpec) -> Result<ImageSample> {
    check_fold_modality(image, spec, Modality::Face)?;
    let (c, h, w) = image.shape();
    let cx = cut_index(spec.cut_v(), w)?;
    let mut per_channel = Vec::with_capacity(c);
    for ch in 0..c {
        let mut left = Patch::crop(image, ch, (0, h), (0, cx));
        let mut right = Patch::crop(image, ch, (0, h), (cx, w));
        if spec.flips()[0] {
            left.flip_horizontal();
        }
        if spec.flips()[1] {
            right.flip_horizontal();
        }
        per_channel.push(vec![left.resize_bilinear(h, w), right.resize_bilinear(h, w)]);
    }
    average_patches(image, per_channel)
}

/// De-Folding for fingerprints: cut at `(round(cut_h * H), round(cut_v * W))`
/// into four quadrants, flip each flagged quadrant toward the top-left
/// canonical frame (TL/TR: horizontal, BL: vertical, BR: both), resize all
/// four to the full frame, and average.
pub fn fold_fingerprint(image: &ImageSample, spec: &FoldSpec) -> Result<ImageSample> {
    check_fold_modality(image, spec, Modality::Fingerprint)?;
    let (c, h, w) = image.shape();
    let cx = cut_index(spec.cut_v(), w)?;
    let cy = cut_index(spec.cut_h().expect("fingerprint spec carries cut_h"), h)?;
    let flips = spec.flips();
    let mut per_channel = Vec::with_capacity(c);
    for ch in 0..c {
        let mut tl = Patch::crop(image, ch, (0, cy), (0, cx));
        let mut tr = Patch::crop(image, ch, (0, cy), (cx, w));
        let mut bl = Patch::crop(image, ch, (cy, h), (0, cx));
        let mut br = Patch::crop(image, ch, (cy, h), (cx, w));
        if flips[0] {
            tl.flip_horizontal();
        }
        if flips[1] {
            tr.flip_horizontal();
        }
        if flips[2] {
            bl.flip_vertical();
        }
        if flips[3] {
            br.flip_horizontal();
            br.flip_vertical();
        }
        per_channel.push(vec![
            tl.resize_bilinear(h, w),
            tr.resize_bilinear(h, w),
            bl.resize_bilinear(h, w),
            br.resize_bilinear(h, w),
        ]);
    }
    average_patches(image, per_channel)
}

/// Fold with the geometry selected by the image's modality.
pub fn fold(image: &ImageSample, spec: &FoldSpec) -> Result<ImageSample> {
    match image.modality() {
        Modality::Face => fold_face(image, spec),
        Modality::Fingerprint => fold_fingerprint(image, spec),
    }
}

/// Convex pixel mix `epsilon * x_i + (1 - epsilon) * x_j`. The result is
/// unlabeled; metadata from both parents is kept under "i." / "j." prefixes.
pub fn mix(x_i: &ImageSample, x_j: &ImageSample, spec: &MixSpec) -> Result<ImageSample> {
    if x_i.shape() != x_j.shape() {
        return Err(CoreError::InvalidInput(format!(
            "mix inputs differ in shape: {:?} vs {:?}",
            x_i.shape(),
            x_j.shape()
        )));
    }
    if x_i.modality() != x_j.modality() {
        return Err(CoreError::InvalidInput(
            "mix inputs differ in modality".to_string(),
        ));
    }
    let eps = spec.epsilon();
    let pixels: Vec<f64> = x_i
        .pixels()
        .iter()
        .zip(x_j.pixels())
        .map(|(a, b)| (eps * a + (1.0 - eps) * b).clamp(0.0, 1.0))
        .collect();
    let mut out = ImageSample::new(x_i.modality(), Label::Unlabeled, x_i.shape(), pixels)?;
    let mut meta = std::collections::BTreeMap::new();
    for (k, v) in &x_i.meta {
        meta.insert(format!("i.{k}"), v.clone());
    }
    for (k, v) in &x_j.meta {
        meta.insert(format!("j.{k}"), v.clone());
    }
    out.meta = meta;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(modality: Modality, h: usize, w: usize) -> ImageSample {
        ImageSample::from_fn(modality, Label::Unlabeled, (1, h, w), |_, y, x| {
            (y * w + x) as f64 / ((h * w - 1) as f64)
        })
        .unwrap()
    }

    #[test]
    fn spec_sampling_is_deterministic_under_seed() {
        let a = sample_fold_spec(&mut ChaCha8Rng::seed_from_u64(9), Modality::Face);
        let b = sample_fold_spec(&mut ChaCha8Rng::seed_from_u64(9), Modality::Face);
        assert_eq!(a, b);
    }

    #[test]
    fn fingerprint_spec_has_both_cuts_and_four_flags() {
        let s = sample_fold_spec(&mut ChaCha8Rng::seed_from_u64(3), Modality::Fingerprint);
        assert!(s.cut_h().is_some());
        assert_eq!(s.flips().len(), 4);
        let f = sample_fold_spec(&mut ChaCha8Rng::seed_from_u64(3), Modality::Face);
        assert!(f.cut_h().is_none());
        assert_eq!(f.flips().len(), 2);
    }

    #[test]
    fn cut_fraction_mean_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| sample_fold_spec(&mut rng, Modality::Fingerprint).cut_v())
            .sum::<f64>()
            / n as f64;
        assert!(
            (mean - 0.5).abs() < 0.01,
            "mean cut_v over {n} draws was {mean}"
        );
    }

    #[test]
    fn out_of_range_cut_is_rejected() {
        assert!(FoldSpec::face(0.2, [false, false]).is_err());
        assert!(FoldSpec::face(0.76, [false, false]).is_err());
        assert!(FoldSpec::fingerprint(0.5, 0.9, [false; 4]).is_err());
    }

    #[test]
    fn fold_face_on_symmetric_image_returns_resized_left_half() {
        // Mirror-symmetric image: with a center cut and [no-flip, flip] the
        // two patches coincide, so the output is the resized left half.
        let w = 8;
        let img = ImageSample::from_fn(Modality::Face, Label::BonaFide, (1, 8, w), |_, y, x| {
            let xm = x.min(w - 1 - x) as f64;
            (y as f64 * 0.05 + xm * 0.1).min(1.0)
        })
        .unwrap();
        let spec = FoldSpec::face(0.5, [false, true]).unwrap();
        let folded = fold_face(&img, &spec).unwrap();

        let expect = Patch::crop(&img, 0, (0, 8), (0, 4)).resize_bilinear(8, 8);
        for (a, b) in folded.pixels().iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-6, "got {a}, expected {b}");
        }
    }

    #[test]
    fn fold_preserves_constants() {
        let face = ImageSample::constant(Modality::Face, Label::Attack, (1, 8, 8), 0.37).unwrap();
        let spec = sample_fold_spec(&mut ChaCha8Rng::seed_from_u64(1), Modality::Face);
        for p in fold_face(&face, &spec).unwrap().pixels() {
            assert!((p - 0.37).abs() < 1e-12);
        }
        let fp =
            ImageSample::constant(Modality::Fingerprint, Label::BonaFide, (3, 8, 8), 0.61).unwrap();
        let spec = sample_fold_spec(&mut ChaCha8Rng::seed_from_u64(2), Modality::Fingerprint);
        for p in fold_fingerprint(&fp, &spec).unwrap().pixels() {
            assert!((p - 0.61).abs() < 1e-12);
        }
    }

    #[test]
    fn fold_fingerprint_symmetric_image_equals_resized_top_left() {
        // Symmetric under both axes; center cuts; all flips map each quadrant
        // onto the top-left one exactly.
        let img = ImageSample::from_fn(
            Modality::Fingerprint,
            Label::Unlabeled,
            (1, 8, 8),
            |_, y, x| {
                let ym = y.min(7 - y) as f64;
                let xm = x.min(7 - x) as f64;
                (ym * 0.11 + xm * 0.07).min(1.0)
            },
        )
        .unwrap();
        let spec = FoldSpec::fingerprint(0.5, 0.5, [false, true, true, true]).unwrap();
        let folded = fold_fingerprint(&img, &spec).unwrap();
        let tl = Patch::crop(&img, 0, (0, 4), (0, 4)).resize_bilinear(8, 8);
        for (a, b) in folded.pixels().iter().zip(&tl.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fold_rejects_modality_mismatch() {
        let img = ramp(Modality::Face, 8, 8);
        let spec = sample_fold_spec(&mut ChaCha8Rng::seed_from_u64(0), Modality::Fingerprint);
        assert!(matches!(
            fold_face(&img, &spec),
            Err(CoreError::InvalidInput(_))
        ));
        assert!(matches!(
            fold_fingerprint(&img, &spec),
            Err(CoreError::InvalidInput(_))
        ));
    }

    #[test]
    fn fold_keeps_label_and_meta() {
        let mut img = ramp(Modality::Face, 8, 8);
        img.meta.insert("sensor".into(), "unit".into());
        img.set_label(Label::Attack);
        let spec = FoldSpec::face(0.5, [true, false]).unwrap();
        let out = fold_face(&img, &spec).unwrap();
        assert_eq!(out.label(), Label::Attack);
        assert_eq!(out.meta.get("sensor").map(String::as_str), Some("unit"));
    }

    #[test]
    fn mix_endpoints_and_self_mix() {
        let a = ramp(Modality::Fingerprint, 8, 8);
        let b = a.map_pixels(|p| 1.0 - p).unwrap();
        let at_one = mix(&a, &b, &MixSpec::new(1.0).unwrap()).unwrap();
        assert_eq!(at_one.pixels(), a.pixels());
        let at_zero = mix(&a, &b, &MixSpec::new(0.0).unwrap()).unwrap();
        assert_eq!(at_zero.pixels(), b.pixels());
        let self_mix = mix(&a, &a, &MixSpec::new(0.42).unwrap()).unwrap();
        for (m, x) in self_mix.pixels().iter().zip(a.pixels()) {
            assert!((m - x).abs() < 1e-15);
        }
    }

    #[test]
    fn mix_is_symmetric_under_epsilon_complement() {
        let a = ramp(Modality::Face, 8, 8);
        let b = a.map_pixels(|p| (p * 0.5 + 0.2).min(1.0)).unwrap();
        let m1 = mix(&a, &b, &MixSpec::new(0.3).unwrap()).unwrap();
        let m2 = mix(&b, &a, &MixSpec::new(0.7).unwrap()).unwrap();
        for (x, y) in m1.pixels().iter().zip(m2.pixels()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn mix_rejects_shape_mismatch_and_tags_meta() {
        let a = ramp(Modality::Face, 8, 8);
        let c = ramp(Modality::Face, 8, 16);
        assert!(matches!(
            mix(&a, &c, &MixSpec::new(0.5).unwrap()),
            Err(CoreError::InvalidInput(_))
        ));

        let mut x = ramp(Modality::Face, 8, 8);
        x.meta.insert("sensor".into(), "s1".into());
        let mut y = ramp(Modality::Face, 8, 8);
        y.meta.insert("sensor".into(), "s2".into());
        let m = mix(&x, &y, &MixSpec::new(0.5).unwrap()).unwrap();
        assert_eq!(m.label(), Label::Unlabeled);
        assert_eq!(m.meta.get("i.sensor").map(String::as_str), Some("s1"));
        assert_eq!(m.meta.get("j.sensor").map(String::as_str), Some("s2"));
    }

    #[test]
    fn epsilon_outside_unit_interval_is_rejected() {
        assert!(MixSpec::new(-0.01).is_err());
        assert!(MixSpec::new(1.01).is_err());
        assert!(MixSpec::new(f64::NAN).is_err());
    }
}
