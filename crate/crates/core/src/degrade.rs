//! Synthetic degradations: AWGN (uniform or spatially varying), Gaussian blur,
//! 45° motion blur, salt-and-pepper noise and square occlusion.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::rng;

/// Per-image noise levels of the mixed-level training regimes.
pub const MIXTURE_SIGMAS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

pub const GAUSSIAN_KERNEL_SIZE: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Awgn,
    GaussianBlur,
    MotionBlur,
    SaltPepper,
    RectCrop,
}

impl std::str::FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "awgn" => Self::Awgn,
            "gaussian_blur" => Self::GaussianBlur,
            "motion_blur" => Self::MotionBlur,
            "salt_pepper" => Self::SaltPepper,
            "rect_crop" => Self::RectCrop,
            other => return Err(Error::invalid(format!("unknown degradation kind `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variation {
    #[default]
    Uniform,
    Varying1d,
    Varying2d,
}

impl std::str::FromStr for Variation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "uniform" => Self::Uniform,
            "varying_1d" | "1d" => Self::Varying1d,
            "varying_2d" | "2d" => Self::Varying2d,
            other => return Err(Error::invalid(format!("unknown variation `{other}`"))),
        })
    }
}

/// Which end of a 2-D field sits at the anchor point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorMode {
    #[default]
    AnchorLow,
    AnchorHigh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Levels change from row to row.
    Rows,
    /// Levels change from column to column.
    Columns,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub level: f64,
    #[serde(default)]
    pub variation: Variation,
    #[serde(default)]
    pub level_hi: f64,
    #[serde(default)]
    pub level_lo: f64,
    #[serde(default)]
    pub anchor: AnchorMode,
    /// Fixes the 1-D ramp axis; drawn from the seed when absent.
    #[serde(default)]
    pub axis: Option<Axis>,
    #[serde(default)]
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, level: f64, seed: u64) -> Self {
        Self {
            kind,
            level,
            variation: Variation::Uniform,
            level_hi: 0.0,
            level_lo: 0.0,
            anchor: AnchorMode::AnchorLow,
            axis: None,
            seed,
        }
    }

    pub fn awgn(sigma: f64, seed: u64) -> Self {
        Self::new(DegradationKind::Awgn, sigma, seed)
    }

    pub fn varying(variation: Variation, level_hi: f64, level_lo: f64, seed: u64) -> Self {
        Self {
            variation,
            level_hi,
            level_lo,
            level: level_hi.max(level_lo),
            ..Self::awgn(0.0, seed)
        }
    }

    /// Same spec with the seed replaced by the stream of image `index`.
    pub fn for_image(&self, index: u64) -> Self {
        Self {
            seed: rng::derive(self.seed, &[index]),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.level, self.level_hi, self.level_lo].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("degradation levels must be finite"));
        }
        if self.level < 0.0 || self.level_hi < 0.0 || self.level_lo < 0.0 {
            return Err(Error::invalid(format!(
                "degradation level must be non-negative, got {}",
                self.level.min(self.level_hi).min(self.level_lo)
            )));
        }
        match self.kind {
            DegradationKind::SaltPepper | DegradationKind::RectCrop if self.level > 1.0 => {
                return Err(Error::invalid(format!(
                    "{:?} level must lie in [0, 1], got {}",
                    self.kind, self.level
                )))
            }
            DegradationKind::MotionBlur if self.level < 1.0 => return Err(Error::invalid("motion blur length must be at least 1")),
            _ => {}
        }
        if self.variation != Variation::Uniform && self.kind != DegradationKind::Awgn {
            return Err(Error::invalid("spatial variation is only defined for awgn"));
        }
        Ok(())
    }
}

/// Per-pixel noise standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl SigmaField {
    pub fn constant(height: usize, width: usize, sigma: f32) -> Self {
        Self {
            height,
            width,
            values: vec![sigma; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn is_constant(&self) -> bool {
        self.values.windows(2).all(|w| w[0] == w[1])
    }
}

/// Builds the noise-level field of an AWGN spec. The random choices (1-D
/// axis, 2-D anchor) are the first draws of the spec's stream, so the field
/// of [`awgn`] and this function agree.
pub fn sigma_field(spec: &DegradationSpec, h: usize, w: usize) -> Result<SigmaField> {
    let mut rng = rng::stream(spec.seed, &[]);
    sigma_field_from(spec, h, w, &mut rng)
}

fn sigma_field_from(spec: &DegradationSpec, h: usize, w: usize, rng: &mut impl Rng) -> Result<SigmaField> {
    if h < 1 || w < 1 {
        return Err(Error::Shape(format!("sigma field needs h, w >= 1, got {h}x{w}")));
    }
    spec.validate()?;
    let (hi, lo) = (spec.level_hi, spec.level_lo);
    let lerp = |t: f64| (hi + (lo - hi) * t) as f32;
    match spec.variation {
        Variation::Uniform => Ok(SigmaField::constant(h, w, spec.level as f32)),
        Variation::Varying1d => {
            let axis = spec
                .axis
                .unwrap_or_else(|| if rng.random_bool(0.5) { Axis::Rows } else { Axis::Columns });
            let n = if axis == Axis::Rows { h } else { w };
            let ramp: Vec<f32> = (0..n)
                .map(|i| if n == 1 { hi as f32 } else { lerp(i as f64 / (n - 1) as f64) })
                .collect();
            let mut values = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    values.push(if axis == Axis::Rows { ramp[y] } else { ramp[x] });
                }
            }
            Ok(SigmaField {
                height: h,
                width: w,
                values,
            })
        }
        Variation::Varying2d => {
            let ay = rng.random_range(0..h) as f64;
            let ax = rng.random_range(0..w) as f64;
            let corners = [
                (0.0, 0.0),
                (0.0, (w - 1) as f64),
                ((h - 1) as f64, 0.0),
                ((h - 1) as f64, (w - 1) as f64),
            ];
            let dmax = corners
                .iter()
                .map(|(y, x)| ((y - ay).powi(2) + (x - ax).powi(2)).sqrt())
                .fold(0.0, f64::max);
            let mut values = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let d = ((y as f64 - ay).powi(2) + (x as f64 - ax).powi(2)).sqrt();
                    let t = if dmax > 0.0 { d / dmax } else { 0.0 };
                    values.push(match spec.anchor {
                        AnchorMode::AnchorLow => (lo + (hi - lo) * t) as f32,
                        AnchorMode::AnchorHigh => lerp(t),
                    });
                }
            }
            Ok(SigmaField {
                height: h,
                width: w,
                values,
            })
        }
    }
}

/// The pre-clip noise `n[c, i, j] ~ N(0, field[i, j]²)` that [`awgn`] adds
/// to a `channels × h × w` image, channel-major, with its σ field.
pub fn awgn_noise(spec: &DegradationSpec, channels: usize, h: usize, w: usize) -> Result<(Vec<f64>, SigmaField)> {
    if spec.kind != DegradationKind::Awgn {
        return Err(Error::invalid(format!("awgn called with a {:?} spec", spec.kind)));
    }
    let mut rng = rng::stream(spec.seed, &[]);
    let field = sigma_field_from(spec, h, w, &mut rng)?;
    let mut noise = Vec::with_capacity(channels * h * w);
    for _ in 0..channels {
        for &s in &field.values {
            let z: f64 = StandardNormal.sample(&mut rng);
            noise.push(if s > 0.0 { z * s as f64 } else { 0.0 });
        }
    }
    Ok((noise, field))
}

/// Adds channel-independent Gaussian noise with per-pixel standard deviation
/// and clips to `[0, 1]`.
pub fn awgn(img: &ImageTensor, spec: &DegradationSpec) -> Result<(ImageTensor, SigmaField)> {
    let (noise, field) = awgn_noise(spec, img.channels(), img.height(), img.width())?;
    let mut out = img.clone();
    for ((v, &n), &s) in out.data_mut().iter_mut().zip(&noise).zip(field.values.iter().cycle()) {
        if s > 0.0 {
            *v = (*v as f64 + n).clamp(0.0, 1.0) as f32;
        }
    }
    Ok((out, field))
}

/// Normalized `13 × 13` Gaussian kernel, row-major.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let k1 = gaussian_kernel_1d(sigma);
    let mut k = Vec::with_capacity(k1.len() * k1.len());
    for a in &k1 {
        for b in &k1 {
            k.push(a * b);
        }
    }
    k
}

fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let r = (GAUSSIAN_KERNEL_SIZE / 2) as i64;
    if sigma <= 0.0 {
        return (-r..=r).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    }
    let raw: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Correlates every channel with a sparse kernel given as `(dy, dx, weight)`
/// taps, using reflect padding.
fn filter_taps(img: &ImageTensor, taps: &[(i64, i64, f64)]) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut out = ImageTensor::filled(c, h, w, 0.0);
    for ci in 0..c {
        let src = img.plane(ci);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for &(dy, dx, k) in taps {
                    let yy = reflect(y as i64 + dy, h);
                    let xx = reflect(x as i64 + dx, w);
                    acc += k * src[yy * w + xx] as f64;
                }
                out.set(ci, y, x, acc.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("blur sigma must be non-negative, got {sigma}")));
    }
    let k = gaussian_kernel_1d(sigma);
    let r = (k.len() / 2) as i64;
    let row: Vec<(i64, i64, f64)> = k.iter().enumerate().map(|(i, &v)| (0, i as i64 - r, v)).collect();
    let col: Vec<(i64, i64, f64)> = k.iter().enumerate().map(|(i, &v)| (i as i64 - r, 0, v)).collect();
    Ok(filter_taps(&filter_taps(img, &row), &col))
}

/// Taps of a normalized 45° line kernel of the given length. The segment is
/// centered on the origin and rasterized along the diagonal; end pixels get
/// their fractional coverage.
pub fn motion_kernel(length: usize) -> Result<Vec<(i64, i64, f64)>> {
    if length < 1 {
        return Err(Error::invalid("motion blur length must be at least 1"));
    }
    let half = length as f64 / 2.0;
    let reach = half.ceil() as i64;
    let mut taps = Vec::new();
    for t in -reach..=reach {
        let (a, b) = (t as f64 - 0.5, t as f64 + 0.5);
        let cover = (b.min(half) - a.max(-half)).max(0.0);
        if cover > 0.0 {
            // Up and to the right as t grows.
            taps.push((-t, t, cover));
        }
    }
    let s: f64 = taps.iter().map(|t| t.2).sum();
    for t in &mut taps {
        t.2 /= s;
    }
    Ok(taps)
}

pub fn motion_blur(img: &ImageTensor, length: usize) -> Result<ImageTensor> {
    Ok(filter_taps(img, &motion_kernel(length)?))
}

/// Replaces each channel element by 0 or 1 (equal odds) with probability `p`.
pub fn salt_pepper(img: &ImageTensor, p: f64, seed: u64) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("salt-and-pepper probability must lie in [0, 1], got {p}")));
    }
    let mut rng = rng::stream(seed, &[]);
    let mut out = img.clone();
    for v in out.data_mut() {
        if rng.random_bool(p) {
            *v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

/// Blacks out a square of side `round(ratio · min(H, W))` at a seeded random
/// position.
pub fn rect_crop(img: &ImageTensor, ratio: f64, seed: u64) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("occlusion ratio must lie in [0, 1], got {ratio}")));
    }
    let (h, w) = (img.height(), img.width());
    let side = (ratio * h.min(w) as f64).round() as usize;
    let mut out = img.clone();
    if side == 0 {
        return Ok(out);
    }
    let mut rng = rng::stream(seed, &[]);
    let top = rng.random_range(0..=h - side);
    let left = rng.random_range(0..=w - side);
    for c in 0..img.channels() {
        for y in top..top + side {
            for x in left..left + side {
                out.set(c, y, x, 0.0);
            }
        }
    }
    Ok(out)
}

/// Applies any spec. The sigma field is returned for AWGN only.
pub fn apply(img: &ImageTensor, spec: &DegradationSpec) -> Result<(ImageTensor, Option<SigmaField>)> {
    spec.validate()?;
    Ok(match spec.kind {
        DegradationKind::Awgn => {
            let (out, field) = awgn(img, spec)?;
            (out, Some(field))
        }
        DegradationKind::GaussianBlur => (gaussian_blur(img, spec.level)?, None),
        DegradationKind::MotionBlur => (motion_blur(img, spec.level.round() as usize)?, None),
        DegradationKind::SaltPepper => (salt_pepper(img, spec.level, spec.seed)?, None),
        DegradationKind::RectCrop => (rect_crop(img, spec.level, spec.seed)?, None),
    })
}

/// Uniform draw from a discrete sigma set.
pub fn sample_sigma(set: &[f64], rng: &mut impl Rng) -> f64 {
    set[rng.random_range(0..set.len())]
}
