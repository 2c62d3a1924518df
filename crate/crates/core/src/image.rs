//! Image container shared by transforms, models, training, and datagen.
//!
//! Pixels are dense `f64` in `[0,1]`, laid out `(channel, row, col)` row-major.
//! Integer images are converted on ingestion and quantized back on export.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CoreError, Result};

/// Biometric modality of a sample. Selects which folding geometry applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Face,
    Fingerprint,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Face => write!(f, "face"),
            Modality::Fingerprint => write!(f, "fingerprint"),
        }
    }
}

/// Ground-truth class of a sample. `Unlabeled` is only meaningful in
/// pretraining contexts; fine-tuning and evaluation reject it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    BonaFide,
    Attack,
    Unlabeled,
}

impl Label {
    /// Binary training target: 1 for attack, 0 for bona fide (higher score =
    /// more likely attack). `None` for unlabeled samples.
    pub fn target(self) -> Option<f64> {
        match self {
            Label::Attack => Some(1.0),
            Label::BonaFide => Some(0.0),
            Label::Unlabeled => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::BonaFide => "bona_fide",
            Label::Attack => "attack",
            Label::Unlabeled => "unlabeled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bona_fide" => Ok(Label::BonaFide),
            "attack" => Ok(Label::Attack),
            "unlabeled" => Ok(Label::Unlabeled),
            other => Err(CoreError::Parse(format!("unknown label {other:?}"))),
        }
    }
}

/// Smallest side length a sample may have. Any cut fraction in `[0.25, 0.75]`
/// leaves at least one pixel on each side of the cut at this size; generated
/// datasets use 8 or larger (see `datagen`).
pub const MIN_SIDE: usize = 4;

/// One image with its class label, modality, and free-form string metadata
/// (conventional keys: "sensor", "material", "dataset", "subject").
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    modality: Modality,
    label: Label,
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    pub meta: BTreeMap<String, String>,
}

impl ImageSample {
    /// Build a sample, validating shape and pixel range.
    pub fn new(
        modality: Modality,
        label: Label,
        (channels, height, width): (usize, usize, usize),
        pixels: Vec<f64>,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(CoreError::InvalidInput(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(CoreError::InvalidInput(format!(
                "image sides must be at least {MIN_SIDE}, got {height}x{width}"
            )));
        }
        if pixels.len() != channels * height * width {
            return Err(CoreError::InvalidInput(format!(
                "pixel buffer length {} does not match shape ({channels},{height},{width})",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(CoreError::InvalidInput(format!(
                "pixel value {bad} outside [0,1]"
            )));
        }
        Ok(ImageSample {
            modality,
            label,
            channels,
            height,
            width,
            pixels,
            meta: BTreeMap::new(),
        })
    }

    /// Build a sample from a pixel function `(channel, row, col) -> value`.
    pub fn from_fn(
        modality: Modality,
        label: Label,
        shape: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let (c, h, w) = shape;
        let mut pixels = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    pixels.push(f(ch, y, x));
                }
            }
        }
        ImageSample::new(modality, label, shape, pixels)
    }

    /// Constant-valued sample; handy in tests and edge-case checks.
    pub fn constant(
        modality: Modality,
        label: Label,
        shape: (usize, usize, usize),
        value: f64,
    ) -> Result<Self> {
        let (c, h, w) = shape;
        ImageSample::new(modality, label, shape, vec![value; c * h * w])
    }

    pub fn with_meta(mut self, meta: BTreeMap<String, String>) -> Self {
        self.meta = meta;
        self
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn label(&self) -> Label {
        self.label
    }

    /// Replace the label (used when projecting labeled storage into the
    /// label-blind pretraining view, and when datagen assigns classes).
    pub fn set_label(&mut self, label: Label) {
        self.label = label;
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[self.idx(c, y, x)]
    }

    /// Rebuild with the same shape/modality/label/meta but new pixel values.
    pub fn map_pixels(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let pixels = self.pixels.iter().map(|&p| f(p)).collect();
        let mut out = ImageSample::new(self.modality, self.label, self.shape(), pixels)?;
        out.meta = self.meta.clone();
        Ok(out)
    }

    /// Write as an 8-bit PNG (grayscale for 1 channel, RGB for 3).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let quant = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        match self.channels {
            1 => {
                let buf: Vec<u8> = self.pixels.iter().map(|&v| quant(v)).collect();
                let img =
                    image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
                        .expect("buffer length matches dimensions");
                img.save(path)?;
            }
            _ => {
                let mut buf = Vec::with_capacity(self.height * self.width * 3);
                for y in 0..self.height {
                    for x in 0..self.width {
                        for c in 0..3 {
                            buf.push(quant(self.at(c, y, x)));
                        }
                    }
                }
                let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
                    .expect("buffer length matches dimensions");
                img.save(path)?;
            }
        }
        Ok(())
    }

    /// Read an 8-bit PNG back into the `[0,1]` pixel domain.
    pub fn load_png(path: &Path, modality: Modality, label: Label) -> Result<Self> {
        let img = image::open(path)?;
        match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                let pixels = g.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
                ImageSample::new(modality, label, (1, h, w), pixels)
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let raw = rgb.into_raw();
                let mut pixels = vec![0.0; 3 * h * w];
                for y in 0..h {
                    for x in 0..w {
                        for c in 0..3 {
                            pixels[(c * h + y) * w + x] = raw[(y * w + x) * 3 + c] as f64 / 255.0;
                        }
                    }
                }
                ImageSample::new(modality, label, (3, h, w), pixels)
            }
        }
    }
}
