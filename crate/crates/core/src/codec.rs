//! Image ↔ latent mapping, mask supervision images and mask post-processing.
//!
//! The latent codec is an exact space-to-depth rearrangement: each `f×f×3`
//! pixel block becomes one latent site with `3f²` channels, so encoding and
//! decoding are bit-exact inverses of one another.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `H×W×3` image with values in `[0, 1]`, stored pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn new(h: usize, w: usize, mut data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * 3, "image data length");
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self { h, w, data }
    }

    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Self::new(h, w, vec![v; h * w * 3])
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * 3 + ch]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.w + x) * 3;
        for (k, v) in rgb.into_iter().enumerate() {
            self.data[i + k] = v.clamp(0.0, 1.0);
        }
    }

    fn check_mask(&self, mask: &BinaryMask) -> Result<()> {
        if (self.h, self.w) != (mask.h, mask.w) {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs mask {}x{}",
                self.h, self.w, mask.h, mask.w
            )));
        }
        Ok(())
    }

    /// Per-pixel channel mean.
    pub fn channel_mean(&self) -> ScoreMap {
        let data = self.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
        ScoreMap { h: self.h, w: self.w, data }
    }
}

/// `h×w×c` latent grid stored site-major, i.e. directly as `(h·w)×c` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl LatentTensor {
    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * c, "latent data length");
        Self { h, w, c, data }
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self::from_vec(h, w, c, vec![0.0; h * w * c])
    }

    pub fn check_same_shape(&self, other: &LatentTensor) -> Result<()> {
        if (self.h, self.w, self.c) != (other.h, other.w, other.c) {
            return Err(Error::ShapeMismatch(format!(
                "latent {}x{}x{} vs {}x{}x{}",
                self.h, self.w, self.c, other.h, other.w, other.c
            )));
        }
        Ok(())
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.h * self.w, self.c, self.data.clone())
    }

    pub fn from_matrix(h: usize, w: usize, m: Matrix) -> Self {
        assert_eq!(m.rows, h * w, "token count");
        Self { h, w, c: m.cols, data: m.data }
    }

    /// Channel-wise concatenation at every site.
    pub fn concat_channels(&self, other: &LatentTensor) -> Result<LatentTensor> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::ShapeMismatch("latent grids differ".into()));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for (a, b) in self.data.chunks_exact(self.c).zip(other.data.chunks_exact(other.c)) {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        Ok(LatentTensor::from_vec(self.h, self.w, self.c + other.c, data))
    }

    /// Channels `[start, start+len)` of every site.
    pub fn channel_slice(&self, start: usize, len: usize) -> LatentTensor {
        let data = self
            .data
            .chunks_exact(self.c)
            .flat_map(|site| site[start..start + len].iter().copied())
            .collect();
        LatentTensor::from_vec(self.h, self.w, len, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Strictly binary `H×W` mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), h * w, "mask data length");
        Self { h, w, data }
    }

    pub fn filled(h: usize, w: usize, v: bool) -> Self {
        Self::new(h, w, vec![v; h * w])
    }

    pub fn from_rows(rows: &[&[u8]]) -> Self {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| v != 0)).collect();
        Self::new(h, w, data)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Nearest-neighbour resample to an `h×w` grid (pixel-centre sampling).
    pub fn resize_nearest(&self, h: usize, w: usize) -> BinaryMask {
        let data = (0..h)
            .flat_map(|y| {
                let sy = nearest_source(y, h, self.h);
                (0..w).map(move |x| (sy, nearest_source(x, w, self.w)))
            })
            .map(|(sy, sx)| self.at(sy, sx))
            .collect();
        BinaryMask::new(h, w, data)
    }
}

/// Source index whose cell contains the centre of destination cell `i`.
pub fn nearest_source(i: usize, dst: usize, src: usize) -> usize {
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

/// Single-channel score grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        Self { h, w, data: rows.concat() }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionForm {
    #[default]
    WhiteOnBlack,
    RealFgBlackBg,
    BlackFgRealBg,
    MaskOverImage,
}

impl SupervisionForm {
    pub const ALL: [SupervisionForm; 4] = [
        Self::WhiteOnBlack,
        Self::RealFgBlackBg,
        Self::BlackFgRealBg,
        Self::MaskOverImage,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::WhiteOnBlack => "white_on_black",
            Self::RealFgBlackBg => "real_fg_black_bg",
            Self::BlackFgRealBg => "black_fg_real_bg",
            Self::MaskOverImage => "mask_over_image",
        }
    }
}

impl std::str::FromStr for SupervisionForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown supervision form `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    #[default]
    Relative,
    Absolute,
}

impl std::str::FromStr for ThresholdMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative" => Ok(Self::Relative),
            "absolute" => Ok(Self::Absolute),
            other => Err(Error::Config(format!("unknown threshold mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub mode: ThresholdMode,
    pub tau: f64,
}

impl ThresholdConfig {
    pub fn new(mode: ThresholdMode, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidRange(format!("threshold tau {tau} outside (0, 1)")));
        }
        Ok(Self { mode, tau })
    }

    pub fn relative(tau: f64) -> Result<Self> {
        Self::new(ThresholdMode::Relative, tau)
    }

    pub fn absolute(tau: f64) -> Result<Self> {
        Self::new(ThresholdMode::Absolute, tau)
    }
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self { mode: ThresholdMode::Relative, tau: 0.25 }
    }
}

/// Binarises a score map. Relative mode cuts at `tau · max(scores)`.
pub fn threshold(scores: &ScoreMap, thr: &ThresholdConfig) -> BinaryMask {
    let cut = match thr.mode {
        ThresholdMode::Absolute => thr.tau,
        ThresholdMode::Relative => {
            let m = scores.max();
            if !(m > 0.0) {
                return BinaryMask::filled(scores.h, scores.w, false);
            }
            thr.tau * m
        }
    };
    BinaryMask::new(scores.h, scores.w, scores.data.iter().map(|&s| s > cut).collect())
}

/// Space-to-depth latent codec with factor `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Codec {
    pub factor: usize,
}

impl Default for Codec {
    fn default() -> Self {
        Self { factor: 4 }
    }
}

impl Codec {
    pub fn new(factor: usize) -> Self {
        assert!(factor >= 1, "codec factor must be positive");
        Self { factor }
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<LatentTensor> {
        let f = self.factor;
        for dim in [image.h, image.w] {
            if dim % f != 0 {
                return Err(Error::NotDivisible { dim, factor: f });
            }
        }
        let (h, w, c) = (image.h / f, image.w / f, self.latent_channels());
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for dy in 0..f {
                    let row = (i * f + dy) * image.w + j * f;
                    data.extend_from_slice(&image.data[row * 3..(row + f) * 3]);
                }
            }
        }
        Ok(LatentTensor::from_vec(h, w, c, data))
    }

    pub fn decode(&self, latent: &LatentTensor) -> Result<ImageTensor> {
        let f = self.factor;
        if latent.c != self.latent_channels() {
            return Err(Error::ShapeMismatch(format!(
                "latent has {} channels, codec expects {}",
                latent.c,
                self.latent_channels()
            )));
        }
        let (hh, ww) = (latent.h * f, latent.w * f);
        let mut data = vec![0.0; hh * ww * 3];
        for i in 0..latent.h {
            for j in 0..latent.w {
                let site = &latent.data[(i * latent.w + j) * latent.c..][..latent.c];
                for dy in 0..f {
                    let row = (i * f + dy) * ww + j * f;
                    data[row * 3..(row + f) * 3].copy_from_slice(&site[dy * f * 3..(dy + 1) * f * 3]);
                }
            }
        }
        Ok(ImageTensor::new(hh, ww, data))
    }
}

/// White-on-black rendering of a mask.
pub fn mask_rgb(mask: &BinaryMask) -> ImageTensor {
    let data = mask
        .data
        .iter()
        .flat_map(|&b| {
            let v = if b { 1.0 } else { 0.0 };
            [v, v, v]
        })
        .collect();
    ImageTensor::new(mask.h, mask.w, data)
}

/// Renders a query mask as the RGB supervision image for `form`.
pub fn mask_to_rgb(mask: &BinaryMask, image: &ImageTensor, form: SupervisionForm) -> Result<ImageTensor> {
    image.check_mask(mask)?;
    let px = |m: bool, v: f64| -> f64 {
        let m = if m { 1.0 } else { 0.0 };
        match form {
            SupervisionForm::WhiteOnBlack => m,
            SupervisionForm::RealFgBlackBg => v * m,
            SupervisionForm::BlackFgRealBg => v * (1.0 - m),
            SupervisionForm::MaskOverImage => 0.5 * v + 0.5 * m,
        }
    };
    let data = image
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| px(mask.data[i / 3], v))
        .collect();
    Ok(ImageTensor::new(image.h, image.w, data))
}

/// Single-channel foreground score for a predicted supervision image.
///
/// Forms b and c are normalised by the original image's brightness when it
/// is supplied; otherwise the raw channel mean (or its complement) is used.
pub fn prediction_scores(
    pred: &ImageTensor,
    form: SupervisionForm,
    original: Option<&ImageTensor>,
) -> Result<ScoreMap> {
    let mean = pred.channel_mean();
    if let Some(o) = original {
        if (o.h, o.w) != (pred.h, pred.w) {
            return Err(Error::ShapeMismatch("prediction vs original image".into()));
        }
    }
    let data = match form {
        SupervisionForm::WhiteOnBlack => mean.data,
        SupervisionForm::RealFgBlackBg | SupervisionForm::BlackFgRealBg => {
            let ratio: Vec<f64> = match original {
                Some(o) => mean
                    .data
                    .iter()
                    .zip(o.channel_mean().data)
                    .map(|(&p, b)| if b > 0.0 { (p / b).clamp(0.0, 1.0) } else { 0.0 })
                    .collect(),
                None => mean.data,
            };
            if form == SupervisionForm::RealFgBlackBg {
                ratio
            } else {
                ratio.into_iter().map(|r| 1.0 - r).collect()
            }
        }
        SupervisionForm::MaskOverImage => {
            let o = original.ok_or(Error::MissingOriginal)?;
            pred.data
                .chunks_exact(3)
                .zip(o.data.chunks_exact(3))
                .map(|(p, q)| {
                    let s: f64 = (0..3).map(|k| 2.0 * (p[k] - 0.5 * q[k])).sum();
                    (s / 3.0).clamp(0.0, 1.0)
                })
                .collect()
        }
    };
    Ok(ScoreMap { h: pred.h, w: pred.w, data })
}

pub fn rgb_to_mask(
    pred: &ImageTensor,
    form: SupervisionForm,
    thr: &ThresholdConfig,
    original: Option<&ImageTensor>,
) -> Result<BinaryMask> {
    Ok(threshold(&prediction_scores(pred, form, original)?, thr))
}
