//! Stochastic image augmentation for the dual model's second input: random
//! rotation, zoom, brightness, and translation, applied in that order with
//! bilinear resampling and reflected borders.
//!
//! Augmentation is re-drawn every epoch: the per-sample stream label carries
//! the epoch and the sample's dataset index, so a fixed seed reproduces the
//! exact same augmented batches while different epochs see different draws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// How the rotation factor is interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationUnit {
    /// Factor is a fraction of a full turn: angle ~ U(-f * 2pi, f * 2pi).
    FractionOfTurn,
    /// Factor is taken literally in radians: angle ~ U(-f, f).
    Radians,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub rotation_factor: f64,
    pub zoom_factor: f64,
    pub brightness_factor: f64,
    pub translation_factor: f64,
    pub rotation_unit: RotationUnit,
    pub interpolation: Interpolation,
    pub fill: FillMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_factor: 0.1,
            zoom_factor: 0.2,
            brightness_factor: 0.0,
            translation_factor: 0.2,
            rotation_unit: RotationUnit::FractionOfTurn,
            interpolation: Interpolation::Bilinear,
            fill: FillMode::Reflect,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            rotation_factor: 0.0,
            zoom_factor: 0.0,
            brightness_factor: 0.0,
            translation_factor: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rotation_factor", self.rotation_factor),
            ("zoom_factor", self.zoom_factor),
            ("brightness_factor", self.brightness_factor),
            ("translation_factor", self.translation_factor),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} not in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Reflects an integer sample index into `[0, n)`, duplicating the edge
/// pixel (`d c b a | a b c d | d c b a`).
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Bilinear sample at continuous coordinates with reflected borders.
fn sample_bilinear(img: &Tensor, y: f64, x: f64, c: usize, channels: usize, width: usize) -> f32 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = (y - y0) as f32;
    let fx = (x - x0) as f32;
    let h = img.shape()[0];
    let (y0i, x0i) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| -> f32 {
        let yi = reflect(yy, h);
        let xi = reflect(xx, width);
        img[(yi * width + xi) * channels + c]
    };
    let top = at(y0i, x0i) * (1.0 - fx) + at(y0i, x0i + 1) * fx;
    let bot = at(y0i + 1, x0i) * (1.0 - fx) + at(y0i + 1, x0i + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn resample(img: &Tensor, map: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y as f64, x as f64);
            for ch in 0..c {
                out.data_mut()[(y * w + x) * c + ch] = sample_bilinear(img, sy, sx, ch, c, w);
            }
        }
    }
    out
}

/// Rotation by `theta` radians about the image center.
pub fn rotate(img: &Tensor, theta: f64) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    resample(img, |y, x| {
        let dy = y - cy;
        let dx = x - cx;
        (cy + dx * sin + dy * cos, cx + dx * cos - dy * sin)
    })
}

/// Per-axis scale about the center; `sy`/`sx` above 1 sample beyond the
/// borders (zoom out), below 1 zoom in.
pub fn zoom(img: &Tensor, sy: f64, sx: f64) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    resample(img, |y, x| (cy + (y - cy) * sy, cx + (x - cx) * sx))
}

/// Shift by `(dy, dx)` pixels; positive values move the content down/right.
pub fn translate(img: &Tensor, dy: f64, dx: f64) -> Tensor {
    resample(img, |y, x| (y - dy, x - dx))
}

/// Additive brightness shift (values are clamped later by `augment`).
pub fn brightness(img: &Tensor, delta: f64) -> Tensor {
    if delta == 0.0 {
        return img.clone();
    }
    img.map(|v| v + delta as f32)
}

/// Applies rotation, zoom, brightness, and translation with parameters drawn
/// uniformly from the configured ranges. The output keeps the input shape and
/// is clamped to `[0, 1]`.
///
/// Exactly six uniforms are consumed per call regardless of the factors, so
/// stream alignment does not depend on the configuration.
pub fn augment(image: &Tensor, cfg: &AugmentConfig, rng: &mut RngStream) -> Result<Tensor> {
    cfg.validate()?;
    if image.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "augment expects [h, w, c], got {:?}",
            image.shape()
        )));
    }
    let draw = |rng: &mut RngStream, range: f64| -> f64 {
        let u = rng.next_f64();
        (2.0 * u - 1.0) * range
    };
    let theta_range = match cfg.rotation_unit {
        RotationUnit::FractionOfTurn => cfg.rotation_factor * std::f64::consts::TAU,
        RotationUnit::Radians => cfg.rotation_factor,
    };
    let theta = draw(rng, theta_range);
    let zy = 1.0 + draw(rng, cfg.zoom_factor);
    let zx = 1.0 + draw(rng, cfg.zoom_factor);
    let bright = draw(rng, cfg.brightness_factor);
    let (h, w) = (image.shape()[0] as f64, image.shape()[1] as f64);
    let ty = draw(rng, cfg.translation_factor) * h;
    let tx = draw(rng, cfg.translation_factor) * w;

    let mut out = rotate(image, theta);
    out = zoom(&out, zy, zx);
    out = brightness(&out, bright);
    out = translate(&out, ty, tx);
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Stream label for one sample's augmentation draw.
pub fn sample_label(scope: &str, epoch: usize, sample_index: usize) -> String {
    format!("augment/{scope}/epoch{epoch}/sample{sample_index}")
}

/// Augments a batch with per-sample streams derived from the epoch and each
/// sample's dataset index, so every epoch re-draws.
pub fn augment_batch(
    batch: &[(usize, Tensor)],
    cfg: &AugmentConfig,
    scope: &str,
    epoch: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    batch
        .iter()
        .map(|(index, image)| {
            let mut rng = RngStream::new(seed, &sample_label(scope, epoch, *index));
            augment(image, cfg, &mut rng)
        })
        .collect()
}
