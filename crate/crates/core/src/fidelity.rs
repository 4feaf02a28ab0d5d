//! Fidelity maps: per-pixel distance between a restored image and its clean
//! original, their normalization, and a learned estimator.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Container;
use crate::degrade::DegradationSpec;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::nn::Tensor;
use crate::restore::{self, Denoiser, DenoiserConfig, PairMaker, PatchTrainOptions};
use crate::train::Curves;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FidelityMetric {
    #[default]
    L1,
    L2,
    Cosine,
}

impl std::str::FromStr for FidelityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "l1" => Self::L1,
            "l2" => Self::L2,
            "cosine" => Self::Cosine,
            other => return Err(Error::invalid(format!("unknown fidelity metric `{other}`"))),
        })
    }
}

impl std::fmt::Display for FidelityMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::L1 => "l1",
            Self::L2 => "l2",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub metric: FidelityMetric,
    /// `(mean, std)` used by [`normalize`], if applied.
    pub normalization: Option<(f64, f64)>,
}

impl FidelityMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>, metric: FidelityMetric) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "fidelity map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            metric,
            normalization: None,
        })
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// `[1, H, W]` view of the values.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, self.height, self.width], self.values.clone()).unwrap()
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        Container::new("fidelity", json!({ "metric": self.metric, "normalization": self.normalization }))
            .with_tensor("values", self.to_tensor())
            .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_kind("fidelity")?;
        let t = c.tensor("values")?;
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let mut m = Self::new(h, w, t.data().to_vec(), serde_json::from_value(c.meta["metric"].clone())?)?;
        m.normalization = serde_json::from_value(c.meta["normalization"].clone())?;
        Ok(m)
    }
}

/// Per-pixel distance over the channel vector. ℓ1 and ℓ2 average over
/// channels; cosine is `1 − cos` with zero-norm pixels defined as 0.
pub fn compute_fidelity(restored: &ImageTensor, clean: &ImageTensor, metric: FidelityMetric) -> Result<FidelityMap> {
    if !restored.same_shape(clean) {
        return Err(Error::Shape("fidelity inputs differ in shape".into()));
    }
    restored.require_rgb()?;
    let (h, w) = (clean.height(), clean.width());
    let hw = h * w;
    let (r, c) = (restored.data(), clean.data());
    let values = (0..hw)
        .map(|i| {
            let rv = [r[i], r[hw + i], r[2 * hw + i]].map(f64::from);
            let cv = [c[i], c[hw + i], c[2 * hw + i]].map(f64::from);
            let v = match metric {
                FidelityMetric::L1 => (0..3).map(|k| (rv[k] - cv[k]).abs()).sum::<f64>() / 3.0,
                FidelityMetric::L2 => (0..3).map(|k| (rv[k] - cv[k]).powi(2)).sum::<f64>() / 3.0,
                FidelityMetric::Cosine => {
                    let dot: f64 = (0..3).map(|k| rv[k] * cv[k]).sum();
                    let nr = rv.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nc = cv.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if nr == 0.0 || nc == 0.0 {
                        0.0
                    } else {
                        (1.0 - dot / (nr * nc)).clamp(0.0, 2.0)
                    }
                }
            };
            v as f32
        })
        .collect();
    FidelityMap::new(h, w, values, metric)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseMixtureStats {
    pub sigma_sq: f64,
    pub post_restore_sigma_sq: f64,
    pub half_normal_mean: f64,
    pub half_normal_var: f64,
    pub gamma_mean: f64,
    pub gamma_var: f64,
}

/// Normalization moments for a mixture of noise levels. The mixture
/// variance is `Σσ²/n²` over the `n` configured levels; when
/// `restore_halving` is set, restoration is assumed to halve it and the
/// moments use the halved value.
pub fn mixture_stats(sigmas: &[f64], restore_halving: bool) -> Result<NoiseMixtureStats> {
    if sigmas.is_empty() {
        return Err(Error::invalid("mixture_stats needs at least one sigma"));
    }
    let n = sigmas.len() as f64;
    let sigma_sq = sigmas.iter().map(|s| s * s).sum::<f64>() / (n * n);
    let post = sigma_sq / 2.0;
    let s2 = if restore_halving { post } else { sigma_sq };
    Ok(NoiseMixtureStats {
        sigma_sq: s2,
        post_restore_sigma_sq: post,
        half_normal_mean: s2.sqrt() * (2.0 / PI).sqrt(),
        half_normal_var: s2 * (1.0 - 2.0 / PI),
        gamma_mean: s2,
        gamma_var: s2 * 2f64.sqrt(),
    })
}

impl NoiseMixtureStats {
    /// `(mean, std)` of the distance model for a metric.
    pub fn moments(&self, metric: FidelityMetric) -> Result<(f64, f64)> {
        match metric {
            FidelityMetric::L1 => Ok((self.half_normal_mean, self.half_normal_var.sqrt())),
            FidelityMetric::L2 => Ok((self.gamma_mean, self.gamma_var.sqrt())),
            FidelityMetric::Cosine => Err(Error::invalid("cosine fidelity maps are not normalized")),
        }
    }
}

/// `(v − mean) / std` with the metric's distribution moments.
pub fn normalize(map: &FidelityMap, stats: &NoiseMixtureStats) -> Result<FidelityMap> {
    if map.is_normalized() {
        return Err(Error::invalid("fidelity map is already normalized"));
    }
    let (mean, std) = stats.moments(map.metric)?;
    if !(std > 0.0) {
        return Err(Error::invalid("normalization std must be positive"));
    }
    let mut out = map.clone();
    for v in &mut out.values {
        *v = ((*v as f64 - mean) / std) as f32;
    }
    out.normalization = Some((mean, std));
    Ok(out)
}

/// Applies the normalization a map would receive, or leaves cosine maps as
/// they are.
pub fn prepare(map: &FidelityMap, stats: &NoiseMixtureStats) -> Result<FidelityMap> {
    match map.metric {
        FidelityMetric::Cosine => Ok(map.clone()),
        _ => normalize(map, stats),
    }
}

/// Oracle map of a degraded image: restore, then compare with the clean
/// original.
pub fn oracle_fidelity(restored: &ImageTensor, clean: &ImageTensor, metric: FidelityMetric) -> Result<FidelityMap> {
    compute_fidelity(restored, clean, metric)
}

/// Estimator: a non-negative head on the restorer trunk, regressing the
/// oracle ℓ1 map.
pub type FidelityEstimator = Denoiser;

pub fn estimate_fidelity(estimator: &FidelityEstimator, degraded: &ImageTensor) -> Result<FidelityMap> {
    Ok(estimate_all(estimator, std::slice::from_ref(degraded))?.remove(0))
}

pub fn estimate_all(estimator: &FidelityEstimator, degraded: &[ImageTensor]) -> Result<Vec<FidelityMap>> {
    if estimator.cfg.residual || estimator.cfg.out_channels != 1 {
        return Err(Error::invalid("fidelity estimation needs a one-channel non-negative model"));
    }
    let outs = restore::run_batched(estimator, degraded, |t| estimator.apply_batch(t))?;
    outs.into_iter()
        .map(|o| FidelityMap::new(o.height(), o.width(), o.data().to_vec(), FidelityMetric::L1))
        .collect()
}

/// Estimator pairs: (noisy patch, ℓ1 map of the restored patch).
pub struct EstimatorPairs<'a> {
    pub restorer: &'a Denoiser,
}

impl PairMaker for EstimatorPairs<'_> {
    fn make(&self, clean: &ImageTensor, spec: &DegradationSpec) -> Result<(ImageTensor, ImageTensor)> {
        let (noisy, _) = crate::degrade::awgn(clean, spec)?;
        let restored = restore::denoise(self.restorer, &noisy)?;
        let map = compute_fidelity(&restored, clean, FidelityMetric::L1)?;
        Ok((noisy, ImageTensor::new(1, map.height, map.width, map.values)?))
    }
}

pub fn train_estimator(
    images: &[ImageTensor],
    restorer: &Denoiser,
    cfg: DenoiserConfig,
    opts: &PatchTrainOptions,
) -> Result<(FidelityEstimator, Curves)> {
    if images.is_empty() {
        return Err(Error::Dataset("train_estimator: empty training set".into()));
    }
    let mut model = Denoiser::new(cfg, opts.train.seed ^ 0x5eed)?;
    let curves = restore::fit_patches(&mut model, images, &EstimatorPairs { restorer }, opts, "estimator")?;
    Ok((model, curves))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::MIXTURE_SIGMAS;

    fn pixel(vals: [f32; 3]) -> ImageTensor {
        ImageTensor::new(3, 1, 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn identical_images_give_zero_maps() {
        let img = ImageTensor::new(3, 2, 2, (0..12).map(|i| i as f32 / 12.0).collect()).unwrap();
        for m in [FidelityMetric::L1, FidelityMetric::L2, FidelityMetric::Cosine] {
            let f = compute_fidelity(&img, &img, m).unwrap();
            assert!(f.values.iter().all(|&v| v.abs() < 1e-7), "{m}");
        }
    }

    #[test]
    fn single_pixel_values() {
        let clean = pixel([0.2, 0.4, 0.6]);
        let restored = pixel([0.3, 0.4, 0.5]);
        let l1 = compute_fidelity(&restored, &clean, FidelityMetric::L1).unwrap().values[0];
        let l2 = compute_fidelity(&restored, &clean, FidelityMetric::L2).unwrap().values[0];
        assert!((l1 as f64 - 0.2 / 3.0).abs() < 1e-7);
        assert!((l2 as f64 - 0.02 / 3.0).abs() < 1e-8);
        let cos = compute_fidelity(&restored, &clean, FidelityMetric::Cosine).unwrap().values[0] as f64;
        let oracle = 1.0 - (0.06 + 0.16 + 0.30) / ((0.09f64 + 0.16 + 0.25).sqrt() * (0.04f64 + 0.16 + 0.36).sqrt());
        assert!((cos - oracle).abs() < 1e-6);
    }

    #[test]
    fn zero_vector_cosine_is_zero() {
        let f = compute_fidelity(&pixel([0.0; 3]), &pixel([0.5, 0.1, 0.2]), FidelityMetric::Cosine).unwrap();
        assert_eq!(f.values[0], 0.0);
    }

    #[test]
    fn mixture_constants() {
        let s = mixture_stats(&MIXTURE_SIGMAS, false).unwrap();
        assert!((s.sigma_sq - 0.55 / 36.0).abs() < 1e-15);
        let h = mixture_stats(&MIXTURE_SIGMAS, true).unwrap();
        assert!((h.sigma_sq - 0.55 / 72.0).abs() < 1e-15);
        assert!((h.sigma_sq - 0.0076389).abs() < 1e-7);
        assert!((h.sigma_sq.sqrt() - 0.08740).abs() < 1e-5);
        assert!((h.half_normal_mean - 0.06974).abs() < 1e-5);
        assert_eq!(h.post_restore_sigma_sq, s.sigma_sq / 2.0);
        let z = mixture_stats(&[0.0], true).unwrap();
        for v in [
            z.sigma_sq,
            z.post_restore_sigma_sq,
            z.half_normal_mean,
            z.half_normal_var,
            z.gamma_mean,
            z.gamma_var,
        ] {
            assert_eq!(v, 0.0);
        }
        assert!(mixture_stats(&[], false).is_err());
    }

    #[test]
    fn half_normal_moments_match_monte_carlo() {
        use rand_distr::{Distribution, StandardNormal};
        let s = mixture_stats(&[0.3], false).unwrap();
        let sigma = s.sigma_sq.sqrt();
        let mut r = crate::rng::stream(5, &[]);
        let n = 200_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                (z * sigma).abs()
            })
            .collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!((m / s.half_normal_mean - 1.0).abs() < 0.01);
        assert!((v / s.half_normal_var - 1.0).abs() < 0.02);
    }

    #[test]
    fn normalization_contract() {
        let stats = mixture_stats(&MIXTURE_SIGMAS, true).unwrap();
        let m = FidelityMap::new(2, 2, vec![stats.half_normal_mean as f32; 4], FidelityMetric::L1).unwrap();
        let n = normalize(&m, &stats).unwrap();
        assert!(n.values.iter().all(|v| v.abs() < 1e-6));
        assert!(normalize(&n, &stats).is_err());
        let cos = FidelityMap::new(1, 1, vec![0.1], FidelityMetric::Cosine).unwrap();
        assert!(normalize(&cos, &stats).is_err());
        assert_eq!(prepare(&cos, &stats).unwrap(), cos);
    }

    #[test]
    fn map_file_round_trip() {
        let stats = mixture_stats(&MIXTURE_SIGMAS, true).unwrap();
        let m = normalize(
            &FidelityMap::new(2, 3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5], FidelityMetric::L2).unwrap(),
            &stats,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        m.save(&p).unwrap();
        assert_eq!(FidelityMap::load(&p).unwrap(), m);
    }

    #[test]
    fn estimator_target_on_clean_pairs_is_zero() {
        let restorer = Denoiser::new(
            DenoiserConfig {
                depth: 3,
                width: 4,
                ..DenoiserConfig::desk()
            },
            0,
        )
        .unwrap();
        let clean = ImageTensor::filled(3, 6, 6, 0.4);
        let (inp, tgt) = EstimatorPairs { restorer: &restorer }
            .make(&clean, &DegradationSpec::awgn(0.0, 1))
            .unwrap();
        assert_eq!(inp, clean);
        assert!(tgt.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn estimator_output_shape_and_sign() {
        let est = Denoiser::new(DenoiserConfig::estimator(3, 4), 2).unwrap();
        let img = ImageTensor::new(3, 7, 5, (0..105).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let f = estimate_fidelity(&est, &img).unwrap();
        assert_eq!((f.height, f.width), (7, 5));
        assert!(f.values.iter().all(|&v| v >= 0.0));
        assert!(estimate_fidelity(&Denoiser::uninitialized(DenoiserConfig::estimator(3, 4)), &img).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn img3(v: Vec<f32>) -> ImageTensor {
            ImageTensor::new(3, 2, 3, v).unwrap()
        }

        proptest! {
            #[test]
            fn l1_l2_symmetry_and_triangle(
                a in proptest::collection::vec(0.0f32..1.0, 18),
                b in proptest::collection::vec(0.0f32..1.0, 18),
                c in proptest::collection::vec(0.0f32..1.0, 18),
            ) {
                let (a, b, c) = (img3(a), img3(b), img3(c));
                for m in [FidelityMetric::L1, FidelityMetric::L2] {
                    prop_assert_eq!(compute_fidelity(&a, &b, m).unwrap(), compute_fidelity(&b, &a, m).unwrap());
                }
                let ac = compute_fidelity(&a, &c, FidelityMetric::L1).unwrap();
                let ab = compute_fidelity(&a, &b, FidelityMetric::L1).unwrap();
                let bc = compute_fidelity(&b, &c, FidelityMetric::L1).unwrap();
                for i in 0..6 {
                    prop_assert!(ac.values[i] <= ab.values[i] + bc.values[i] + 1e-6);
                }
                let cos = compute_fidelity(&a, &b, FidelityMetric::Cosine).unwrap();
                prop_assert!(cos.values.iter().all(|v| (0.0..=2.0).contains(v)));
            }

            #[test]
            fn normalize_is_affine(vals in proptest::collection::vec(0.0f32..1.0, 6), k in 0.1f32..3.0, s in 0.0f32..1.0) {
                let stats = mixture_stats(&MIXTURE_SIGMAS, true).unwrap();
                let (mean, std) = stats.moments(FidelityMetric::L1).unwrap();
                let base = FidelityMap::new(2, 3, vals.clone(), FidelityMetric::L1).unwrap();
                let moved = FidelityMap::new(2, 3, vals.iter().map(|v| k * v + s).collect(), FidelityMetric::L1).unwrap();
                let nb = normalize(&base, &stats).unwrap();
                let nm = normalize(&moved, &stats).unwrap();
                for i in 0..6 {
                    let expect = k as f64 * nb.values[i] as f64 + ((k as f64 - 1.0) * mean + s as f64) / std;
                    prop_assert!((nm.values[i] as f64 - expect).abs() < 1e-3 * (1.0 + expect.abs()));
                }
            }
        }
    }
}
