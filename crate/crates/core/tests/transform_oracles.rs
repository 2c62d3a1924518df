//! Oracle checks for the folding and mixing transforms.
//!
//! The star witness is `reference`: a from-scratch reimplementation of
//! crop → corner-aligned bilinear resize → average over nested `Vec` grids,
//! sharing no code with the production transforms. Pinned grids are checked
//! against it (and against closed forms where one exists), and randomized
//! properties assert full equivalence plus the algebraic identities the
//! transforms promise.

use ifom_core::image::{ImageSample, Label, Modality};
use ifom_core::transforms::{
    fold, fold_face, fold_fingerprint, mix, sample_fold_spec, sample_mix_spec, FoldSpec, MixSpec,
};
use ifom_core::seeds;
use proptest::prelude::*;
use rand::Rng;

/// Independent resampler oracle over `grid[y][x]` per channel.
mod reference {
    /// Corner-aligned bilinear resize: output corner samples coincide with
    /// input corners, interior positions interpolate linearly.
    pub fn resize(grid: &[Vec<f64>], out_h: usize, out_w: usize) -> Vec<Vec<f64>> {
        let (in_h, in_w) = (grid.len(), grid[0].len());
        let pos = |o: usize, n_out: usize, n_in: usize| -> f64 {
            if n_out <= 1 {
                0.0
            } else {
                o as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
            }
        };
        (0..out_h)
            .map(|oy| {
                let sy = pos(oy, out_h, in_h);
                let (y0, y1) = (sy.floor() as usize, (sy.ceil() as usize).min(in_h - 1));
                let ty = sy - sy.floor();
                (0..out_w)
                    .map(|ox| {
                        let sx = pos(ox, out_w, in_w);
                        let (x0, x1) = (sx.floor() as usize, (sx.ceil() as usize).min(in_w - 1));
                        let tx = sx - sx.floor();
                        let top = grid[y0][x0] * (1.0 - tx) + grid[y0][x1] * tx;
                        let bot = grid[y1][x0] * (1.0 - tx) + grid[y1][x1] * tx;
                        top * (1.0 - ty) + bot * ty
                    })
                    .collect()
            })
            .collect()
    }

    pub fn crop(grid: &[Vec<f64>], rows: (usize, usize), cols: (usize, usize)) -> Vec<Vec<f64>> {
        grid[rows.0..rows.1]
            .iter()
            .map(|row| row[cols.0..cols.1].to_vec())
            .collect()
    }

    pub fn flip_h(grid: &[Vec<f64>]) -> Vec<Vec<f64>> {
        grid.iter()
            .map(|row| row.iter().rev().cloned().collect())
            .collect()
    }

    pub fn flip_v(grid: &[Vec<f64>]) -> Vec<Vec<f64>> {
        grid.iter().rev().cloned().collect()
    }

    pub fn average(patches: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
        let (h, w) = (patches[0].len(), patches[0][0].len());
        (0..h)
            .map(|y| {
                (0..w)
                    .map(|x| {
                        patches.iter().map(|p| p[y][x]).sum::<f64>() / patches.len() as f64
                    })
                    .collect()
            })
            .collect()
    }

    pub fn fold_face(grid: &[Vec<f64>], cut_v: f64, flips: [bool; 2]) -> Vec<Vec<f64>> {
        let (h, w) = (grid.len(), grid[0].len());
        let cx = (cut_v * w as f64).round() as usize;
        let mut left = crop(grid, (0, h), (0, cx));
        let mut right = crop(grid, (0, h), (cx, w));
        if flips[0] {
            left = flip_h(&left);
        }
        if flips[1] {
            right = flip_h(&right);
        }
        average(&[resize(&left, h, w), resize(&right, h, w)])
    }

    pub fn fold_fingerprint(
        grid: &[Vec<f64>],
        cut_v: f64,
        cut_h: f64,
        flips: [bool; 4],
    ) -> Vec<Vec<f64>> {
        let (h, w) = (grid.len(), grid[0].len());
        let cx = (cut_v * w as f64).round() as usize;
        let cy = (cut_h * h as f64).round() as usize;
        let mut tl = crop(grid, (0, cy), (0, cx));
        let mut tr = crop(grid, (0, cy), (cx, w));
        let mut bl = crop(grid, (cy, h), (0, cx));
        let mut br = crop(grid, (cy, h), (cx, w));
        if flips[0] {
            tl = flip_h(&tl);
        }
        if flips[1] {
            tr = flip_h(&tr);
        }
        if flips[2] {
            bl = flip_v(&bl);
        }
        if flips[3] {
            br = flip_v(&flip_h(&br));
        }
        average(&[
            resize(&tl, h, w),
            resize(&tr, h, w),
            resize(&bl, h, w),
            resize(&br, h, w),
        ])
    }
}

/// Channel `c` of an image as a nested grid for the reference oracle.
fn channel_grid(img: &ImageSample, c: usize) -> Vec<Vec<f64>> {
    let (_, h, w) = img.shape();
    (0..h).map(|y| (0..w).map(|x| img.at(c, y, x)).collect()).collect()
}

fn assert_matches_grid(img: &ImageSample, c: usize, grid: &[Vec<f64>], tol: f64) {
    let (_, h, w) = img.shape();
    for y in 0..h {
        for x in 0..w {
            let (got, want) = (img.at(c, y, x), grid[y][x]);
            assert!(
                (got - want).abs() <= tol,
                "pixel ({c},{y},{x}): got {got}, oracle {want}"
            );
        }
    }
}

fn random_image(modality: Modality, channels: usize, h: usize, w: usize, seed: u64) -> ImageSample {
    let mut rng = seeds::stream_rng(seed, 0xF01D);
    ImageSample::from_fn(modality, Label::Unlabeled, (channels, h, w), |_, _, _| {
        rng.random_range(0.0..=1.0)
    })
    .unwrap()
}

#[test]
fn folded_ramp_matches_reference_and_closed_form() {
    // 4x4 ramp pixel(y,x) = (4y+x)/15, cut_v = 0.5, no flips. The left patch
    // resizes to (4y + x/3)/15 and the right to (4y + 2 + x/3)/15, so the
    // fold is exactly (4y + 1 + x/3)/15.
    let img = ImageSample::from_fn(Modality::Face, Label::Unlabeled, (1, 4, 4), |_, y, x| {
        (4 * y + x) as f64 / 15.0
    })
    .unwrap();
    let folded = fold_face(&img, &FoldSpec::face(0.5, [false, false]).unwrap()).unwrap();

    let oracle = reference::fold_face(&channel_grid(&img, 0), 0.5, [false, false]);
    assert_matches_grid(&folded, 0, &oracle, 1e-12);
    for y in 0..4 {
        for x in 0..4 {
            let closed_form = (4.0 * y as f64 + 1.0 + x as f64 / 3.0) / 15.0;
            assert!((folded.at(0, y, x) - closed_form).abs() < 1e-12);
        }
    }
}

#[test]
fn folded_checkerboard_matches_reference_with_exact_corners() {
    // All four quadrants of an even checkerboard carry the same pattern, so
    // the unflipped fold equals one resized quadrant; its corners must hit
    // the quadrant's corner samples exactly (corner-aligned resampling).
    let img = ImageSample::from_fn(
        Modality::Fingerprint,
        Label::Unlabeled,
        (1, 8, 8),
        |_, y, x| ((x + y) % 2) as f64,
    )
    .unwrap();
    let spec = FoldSpec::fingerprint(0.5, 0.5, [false; 4]).unwrap();
    let folded = fold_fingerprint(&img, &spec).unwrap();

    let oracle = reference::fold_fingerprint(&channel_grid(&img, 0), 0.5, 0.5, [false; 4]);
    assert_matches_grid(&folded, 0, &oracle, 1e-12);
    assert_eq!(folded.at(0, 0, 0), 0.0);
    assert_eq!(folded.at(0, 0, 7), 1.0);
    assert_eq!(folded.at(0, 7, 0), 1.0);
    assert_eq!(folded.at(0, 7, 7), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    /// Production fold equals the independent resampler on arbitrary images
    /// and specs, every channel, both modalities.
    #[test]
    fn fold_matches_reference_resampler(
        seed in any::<u64>(),
        half_h in 4usize..=8,
        half_w in 4usize..=8,
        fingerprint in any::<bool>(),
    ) {
        let (h, w) = (2 * half_h, 2 * half_w);
        let (modality, channels) = if fingerprint {
            (Modality::Fingerprint, 1)
        } else {
            (Modality::Face, 3)
        };
        let img = random_image(modality, channels, h, w, seed);
        let spec = sample_fold_spec(&mut seeds::stream_rng(seed, 0x5EC), modality);
        let folded = fold(&img, &spec).unwrap();
        for c in 0..channels {
            let grid = channel_grid(&img, c);
            let oracle = match modality {
                Modality::Face => reference::fold_face(
                    &grid,
                    spec.cut_v(),
                    [spec.flips()[0], spec.flips()[1]],
                ),
                Modality::Fingerprint => reference::fold_fingerprint(
                    &grid,
                    spec.cut_v(),
                    spec.cut_h().unwrap(),
                    [spec.flips()[0], spec.flips()[1], spec.flips()[2], spec.flips()[3]],
                ),
            };
            assert_matches_grid(&folded, c, &oracle, 1e-12);
        }
    }

    /// Shape is preserved, pixels stay in [0,1], and label/meta survive.
    #[test]
    fn fold_preserves_shape_range_and_annotations(
        seed in any::<u64>(),
        h in 8usize..=16,
        w in 8usize..=16,
        fingerprint in any::<bool>(),
    ) {
        let modality = if fingerprint { Modality::Fingerprint } else { Modality::Face };
        let mut img = random_image(modality, 1, h, w, seed);
        img.set_label(Label::Attack);
        img.meta.insert("material".into(), "gel".into());
        let spec = sample_fold_spec(&mut seeds::stream_rng(seed, 0x5EC), modality);
        let folded = fold(&img, &spec).unwrap();
        prop_assert_eq!(folded.shape(), img.shape());
        prop_assert!(folded.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert_eq!(folded.label(), Label::Attack);
        prop_assert_eq!(folded.meta.get("material").map(String::as_str), Some("gel"));
    }

    /// Folding is pure: the same (image, spec) pair folds bit-identically,
    /// and the input is left untouched.
    #[test]
    fn fold_is_deterministic_and_pure(
        seed in any::<u64>(),
        h in 8usize..=12,
        w in 8usize..=12,
        fingerprint in any::<bool>(),
    ) {
        let modality = if fingerprint { Modality::Fingerprint } else { Modality::Face };
        let img = random_image(modality, 1, h, w, seed);
        let before = img.pixels().to_vec();
        let spec = sample_fold_spec(&mut seeds::stream_rng(seed, 0x5EC), modality);
        let a = fold(&img, &spec).unwrap();
        let b = fold(&img, &spec).unwrap();
        prop_assert_eq!(a.pixels(), b.pixels());
        prop_assert_eq!(img.pixels(), &before[..]);
    }

    /// A left-right symmetric face folded with a center cut and [keep, flip]
    /// collapses to its resized left half.
    #[test]
    fn symmetric_face_folds_to_resized_left_half(
        seed in any::<u64>(),
        h in 8usize..=16,
        half_w in 4usize..=8,
    ) {
        let w = 2 * half_w;
        let mut rng = seeds::stream_rng(seed, 0x517);
        let mut half: Vec<Vec<f64>> = Vec::new();
        for _ in 0..h {
            half.push((0..half_w).map(|_| rng.random_range(0.0..=1.0)).collect());
        }
        let img = ImageSample::from_fn(Modality::Face, Label::Unlabeled, (1, h, w), |_, y, x| {
            half[y][x.min(w - 1 - x)]
        })
        .unwrap();
        let spec = FoldSpec::face(0.5, [false, true]).unwrap();
        let folded = fold_face(&img, &spec).unwrap();
        let expect = reference::resize(&reference::crop(&channel_grid(&img, 0), (0, h), (0, half_w)), h, w);
        assert_matches_grid(&folded, 0, &expect, 1e-9);
    }

    /// A doubly symmetric fingerprint folded with center cuts and canonical
    /// flips collapses to its resized top-left quadrant.
    #[test]
    fn symmetric_fingerprint_folds_to_resized_top_left(
        seed in any::<u64>(),
        half_h in 4usize..=8,
        half_w in 4usize..=8,
    ) {
        let (h, w) = (2 * half_h, 2 * half_w);
        let mut rng = seeds::stream_rng(seed, 0x517);
        let mut quad: Vec<Vec<f64>> = Vec::new();
        for _ in 0..half_h {
            quad.push((0..half_w).map(|_| rng.random_range(0.0..=1.0)).collect());
        }
        let img = ImageSample::from_fn(
            Modality::Fingerprint,
            Label::Unlabeled,
            (1, h, w),
            |_, y, x| quad[y.min(h - 1 - y)][x.min(w - 1 - x)],
        )
        .unwrap();
        let spec = FoldSpec::fingerprint(0.5, 0.5, [false, true, true, true]).unwrap();
        let folded = fold_fingerprint(&img, &spec).unwrap();
        let expect = reference::resize(
            &reference::crop(&channel_grid(&img, 0), (0, half_h), (0, half_w)),
            h,
            w,
        );
        assert_matches_grid(&folded, 0, &expect, 1e-9);
    }

    /// Mix endpoint identities: ε=1 returns x_i, ε=0 returns x_j, and mixing
    /// an image with itself returns it for any ε.
    #[test]
    fn mix_endpoint_and_self_identities(seed in any::<u64>(), eps in 0.0..=1.0f64) {
        let a = random_image(Modality::Face, 1, 8, 8, seed);
        let b = random_image(Modality::Face, 1, 8, 8, seed.wrapping_add(1));
        let at_one = mix(&a, &b, &MixSpec::new(1.0).unwrap()).unwrap();
        prop_assert_eq!(at_one.pixels(), a.pixels());
        let at_zero = mix(&a, &b, &MixSpec::new(0.0).unwrap()).unwrap();
        prop_assert_eq!(at_zero.pixels(), b.pixels());
        let self_mix = mix(&a, &a, &MixSpec::new(eps).unwrap()).unwrap();
        for (m, x) in self_mix.pixels().iter().zip(a.pixels()) {
            prop_assert!((m - x).abs() < 1e-15);
        }
    }

    /// mix(x_i, x_j, ε) = mix(x_j, x_i, 1−ε) elementwise.
    #[test]
    fn mix_is_symmetric_in_epsilon_complement(seed in any::<u64>(), eps in 0.0..=1.0f64) {
        let a = random_image(Modality::Fingerprint, 1, 8, 8, seed);
        let b = random_image(Modality::Fingerprint, 1, 8, 8, seed.wrapping_mul(3).wrapping_add(7));
        let m1 = mix(&a, &b, &MixSpec::new(eps).unwrap()).unwrap();
        let m2 = mix(&b, &a, &MixSpec::new(1.0 - eps).unwrap()).unwrap();
        for (x, y) in m1.pixels().iter().zip(m2.pixels()) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }

    /// Convexity: every mixed pixel lies between its parents, and the
    /// sampled ε itself is always in [0,1).
    #[test]
    fn mix_stays_within_parent_envelope(seed in any::<u64>()) {
        let a = random_image(Modality::Face, 3, 8, 8, seed);
        let b = random_image(Modality::Face, 3, 8, 8, seed ^ 0xABCD);
        let spec = sample_mix_spec(&mut seeds::stream_rng(seed, 0xE95));
        prop_assert!((0.0..1.0).contains(&spec.epsilon()));
        let m = mix(&a, &b, &spec).unwrap();
        for i in 0..m.pixels().len() {
            let (p, pa, pb) = (m.pixels()[i], a.pixels()[i], b.pixels()[i]);
            let (lo, hi) = (pa.min(pb), pa.max(pb));
            prop_assert!(p >= lo - 1e-15 && p <= hi + 1e-15);
        }
    }
}
