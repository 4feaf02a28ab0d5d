//! Degrade → restore → fidelity preparation shared by training and
//! evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::degrade::{self, DegradationSpec, Variation};
use crate::error::{Error, Result};
use crate::fidelity::{self, FidelityEstimator, FidelityMap, FidelityMetric, NoiseMixtureStats};
use crate::imaging::{self, ImageTensor, PreprocessConfig};
use crate::nn::Tensor;
use crate::restore::{self, Denoiser};
use crate::rng;

/// Endpoints of the spatially varying test columns.
pub const VARYING_HI: f64 = 0.5;
pub const VARYING_LO: f64 = 0.0;

/// One column of the evaluation grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Condition {
    Clean,
    Uniform(f64),
    Varying1d,
    Varying2d,
}

impl Condition {
    /// Clean, σ ∈ {0.1, …, 0.5}, then the 1-D and 2-D varying columns.
    pub fn grid() -> Vec<Condition> {
        let mut g = vec![Condition::Clean];
        g.extend(degrade::MIXTURE_SIGMAS[1..].iter().map(|&s| Condition::Uniform(s)));
        g.push(Condition::Varying1d);
        g.push(Condition::Varying2d);
        g
    }

    /// Degradation of image `index`, or `None` for the clean column.
    pub fn spec(&self, seed: u64, index: usize) -> Option<DegradationSpec> {
        let s = rng::derive(seed, &[rng::label_key(&self.to_string()), index as u64]);
        match *self {
            Condition::Clean => None,
            Condition::Uniform(sigma) => Some(DegradationSpec::awgn(sigma, s)),
            Condition::Varying1d => Some(DegradationSpec::varying(Variation::Varying1d, VARYING_HI, VARYING_LO, s)),
            Condition::Varying2d => Some(DegradationSpec::varying(Variation::Varying2d, VARYING_HI, VARYING_LO, s)),
        }
    }

    pub fn degrade(&self, img: &ImageTensor, seed: u64, index: usize) -> Result<ImageTensor> {
        match self.spec(seed, index) {
            None => Ok(img.clone()),
            Some(spec) => Ok(degrade::apply(img, &spec)?.0),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Clean => write!(f, "clean"),
            Condition::Uniform(s) => write!(f, "sigma={s}"),
            Condition::Varying1d => write!(f, "1d"),
            Condition::Varying2d => write!(f, "2d"),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Condition::Clean),
            "1d" => Ok(Condition::Varying1d),
            "2d" => Ok(Condition::Varying2d),
            other => {
                let v = other
                    .strip_prefix("sigma=")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| (0.0..=1.0).contains(v))
                    .ok_or_else(|| Error::invalid(format!("unknown condition `{other}`")))?;
                Ok(Condition::Uniform(v))
            }
        }
    }
}

impl From<Condition> for String {
    fn from(c: Condition) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for Condition {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Per-image σ from the training mixture, as a degradation spec.
pub fn mixture_spec(sigmas: &[f64], seed: u64, keys: &[u64]) -> DegradationSpec {
    let mut r = rng::stream(seed, keys);
    let sigma = degrade::sample_sigma(sigmas, &mut r);
    DegradationSpec::awgn(sigma, rng::derive(seed, keys))
}

/// Where calibration fidelity maps come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidelitySource {
    Oracle,
    EstimatorFrozen,
    EstimatorFinetuned,
}

impl FromStr for FidelitySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "estimator_frozen" | "pretrained" => Ok(Self::EstimatorFrozen),
            "estimator_finetuned" | "end2end" => Ok(Self::EstimatorFinetuned),
            other => Err(Error::invalid(format!("unknown fidelity source `{other}`"))),
        }
    }
}

impl fmt::Display for FidelitySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Oracle => "oracle",
            Self::EstimatorFrozen => "estimator_frozen",
            Self::EstimatorFinetuned => "estimator_finetuned",
        })
    }
}

/// Fidelity maps for a batch: oracle against `clean`, or the estimator on
/// `degraded`; normalized with the mixture moments.
pub fn fidelity_maps(
    source: FidelitySource,
    restored: &[ImageTensor],
    clean: &[ImageTensor],
    degraded: &[ImageTensor],
    estimator: Option<&FidelityEstimator>,
    metric: FidelityMetric,
    stats: &NoiseMixtureStats,
) -> Result<Vec<FidelityMap>> {
    let raw = match source {
        FidelitySource::Oracle => restored
            .iter()
            .zip(clean)
            .map(|(r, c)| fidelity::oracle_fidelity(r, c, metric))
            .collect::<Result<Vec<_>>>()?,
        _ => {
            let est = estimator.ok_or_else(|| Error::invalid(format!("fidelity source `{source}` needs an estimator")))?;
            fidelity::estimate_all(est, degraded)?
        }
    };
    raw.iter().map(|m| fidelity::prepare(m, stats)).collect()
}

/// `[B, 1, H, W]` tensor of prepared maps.
pub fn map_batch(maps: &[FidelityMap]) -> Result<Tensor<f32>> {
    let imgs = maps
        .iter()
        .map(|m| ImageTensor::new(1, m.height, m.width, m.values.clone()))
        .collect::<Result<Vec<_>>>()?;
    imaging::batch(&imgs)
}

/// `[B, 3, H, W]` tensor of normalized images.
pub fn normalized_batch(images: &[ImageTensor], prep: &PreprocessConfig) -> Result<Tensor<f32>> {
    let n = images
        .iter()
        .map(|i| i.normalize(&prep.mean, &prep.std))
        .collect::<Result<Vec<_>>>()?;
    imaging::batch(&n)
}

/// A labelled image set after one degradation condition, with optional
/// restoration. Images are at network resolution.
#[derive(Clone, Debug)]
pub struct Cell {
    pub condition: Condition,
    pub clean: Vec<ImageTensor>,
    pub degraded: Vec<ImageTensor>,
    pub restored: Option<Vec<ImageTensor>>,
    pub labels: Vec<usize>,
}

impl Cell {
    /// Eval geometry, then the degradation, then restoration when a
    /// restorer is given.
    pub fn build(set: &[(ImageTensor, usize)], condition: Condition, crop: usize, seed: u64, restorer: Option<&Denoiser>) -> Result<Self> {
        let clean = set
            .iter()
            .map(|(img, _)| imaging::eval_geometry(img, crop))
            .collect::<Result<Vec<_>>>()?;
        let degraded = clean
            .iter()
            .enumerate()
            .map(|(i, img)| condition.degrade(img, seed, i))
            .collect::<Result<Vec<_>>>()?;
        let restored = restorer.map(|r| restore::denoise_all(r, &degraded)).transpose()?;
        Ok(Self {
            condition,
            clean,
            degraded,
            restored,
            labels: set.iter().map(|(_, l)| *l).collect(),
        })
    }

    /// The network input: restored when available, else degraded.
    pub fn inputs(&self) -> &[ImageTensor] {
        self.restored.as_deref().unwrap_or(&self.degraded)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
