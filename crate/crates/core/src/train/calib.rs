//! Calibration training on mixed-level degraded-then-restored images with a
//! frozen backbone.

use rand::seq::SliceRandom;

use super::classifier::{score, Evaluation, EVAL_BATCH};
use super::{check_finite, lr_at, Curves, Optimizer, TrainConfig};
use crate::calibration::{bind_frozen, BackboneSplit, CalibConfig, CalibrationNet};
use crate::error::{Error, Result};
use crate::fidelity::{FidelityEstimator, FidelityMap, FidelityMetric, NoiseMixtureStats};
use crate::imaging::{self, ImageTensor, PreprocessConfig, PreprocessMode};
use crate::nn::{Graph, Params, Var};
use crate::pipeline::{self, map_batch, normalized_batch, FidelitySource};
use crate::restore::{self, Denoiser};
use crate::rng;

#[derive(Clone, Copy)]
pub struct CalibData<'a> {
    pub train: &'a [(ImageTensor, usize)],
    pub val: &'a [(ImageTensor, usize)],
    /// Train-mode pipeline; its crop size is the network resolution.
    pub prep: &'a PreprocessConfig,
    pub sigmas: &'a [f64],
    pub restorer: &'a Denoiser,
    pub stats: NoiseMixtureStats,
}

pub struct CalibFit {
    pub net: CalibrationNet,
    /// The fine-tuned estimator of an end-to-end run.
    pub estimator: Option<FidelityEstimator>,
    pub curves: Curves,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Calibrated accuracy on restored inputs with prepared fidelity maps.
pub fn evaluate_calibration(
    net: &CalibrationNet,
    split: &BackboneSplit,
    inputs: &[ImageTensor],
    maps: &[FidelityMap],
    labels: &[usize],
    prep: &PreprocessConfig,
) -> Result<Evaluation> {
    if inputs.len() != labels.len() || maps.len() != labels.len() || inputs.is_empty() {
        return Err(Error::Dataset(
            "calibration evaluation needs matching non-empty inputs, maps and labels".into(),
        ));
    }
    let mut correct = 0;
    let mut loss = 0.0;
    for start in (0..inputs.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(inputs.len());
        let x = normalized_batch(&inputs[start..end], prep)?;
        let f = map_batch(&maps[start..end])?;
        let logits = net.predict(split, &x, &f)?;
        let (c, l) = score(&logits, &labels[start..end])?;
        correct += c;
        loss += l;
    }
    let n = inputs.len();
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        loss: loss / n as f64,
        count: n,
    })
}

fn metric_for(source: FidelitySource, metric: FidelityMetric) -> Result<FidelityMetric> {
    if source != FidelitySource::Oracle && metric != FidelityMetric::L1 {
        return Err(Error::Config(format!(
            "the estimator regresses l1 maps; `{metric}` needs the oracle source"
        )));
    }
    Ok(metric)
}

/// Trains calibration parameters (and the estimator when `source` is
/// fine-tuned) on top of a frozen backbone; returns the best-validation
/// state.
pub fn fit_calibration(
    split: &BackboneSplit,
    calib: CalibConfig,
    data: &CalibData,
    source: FidelitySource,
    estimator: Option<&FidelityEstimator>,
    cfg: &TrainConfig,
) -> Result<CalibFit> {
    cfg.validate()?;
    if data.prep.mode != PreprocessMode::Train {
        return Err(Error::invalid("fit_calibration needs a train-mode preprocessing config"));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Dataset("fit_calibration needs non-empty train and val sets".into()));
    }
    if split.hash != split.classifier.checksum() {
        return Err(Error::BackboneMismatch {
            expected: split.hash.clone(),
            found: split.classifier.checksum(),
        });
    }
    let metric = metric_for(source, calib.metric)?;
    if source != FidelitySource::Oracle && estimator.is_none() {
        return Err(Error::invalid(format!("fidelity source `{source}` needs an estimator")));
    }
    let seed = cfg.seed;
    let eval_prep = PreprocessConfig {
        mode: PreprocessMode::Eval,
        ..data.prep.clone()
    };

    // Fixed validation draw.
    let val_clean = data
        .val
        .iter()
        .map(|(img, _)| imaging::eval_geometry(img, data.prep.crop_size))
        .collect::<Result<Vec<_>>>()?;
    let val_degraded = val_clean
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let spec = pipeline::mixture_spec(data.sigmas, seed, &[rng::label_key("calib-val"), i as u64]);
            Ok(crate::degrade::apply(img, &spec)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let val_restored = restore::denoise_all(data.restorer, &val_degraded)?;
    let val_labels: Vec<usize> = data.val.iter().map(|(_, l)| *l).collect();
    let fixed_val_maps = match source {
        FidelitySource::EstimatorFinetuned => None,
        _ => Some(pipeline::fidelity_maps(
            source,
            &val_restored,
            &val_clean,
            &val_degraded,
            estimator,
            metric,
            &data.stats,
        )?),
    };

    let mut net = CalibrationNet::new(calib, split, rng::derive(seed, &[rng::label_key("calib-net")]))?;
    let mut est = match source {
        FidelitySource::EstimatorFinetuned => estimator.cloned(),
        _ => None,
    };
    let (mean, std) = data.stats.moments(FidelityMetric::L1)?;

    let n = data.train.len();
    let bs = cfg.batch_size.min(n);
    let sched = cfg.schedule(n.div_ceil(bs));
    let mut opt = Optimizer::new(cfg, &net.params);
    let mut est_opt = est.as_ref().map(|e| Optimizer::new(cfg, &e.params));
    let mut curves = Curves::default();
    let mut best: Option<(usize, f64, CalibrationNet, Option<FidelityEstimator>)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::label_key("calib-order"), epoch as u64]));
        let (mut total, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(bs) {
            let mut clean = Vec::with_capacity(chunk.len());
            let mut degraded = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let keys = [rng::label_key("calib-sample"), epoch as u64, k as u64];
                let mut r = rng::stream(seed, &keys);
                let img = imaging::augment_train(&data.train[k].0, data.prep, &mut r)?;
                degraded.push(crate::degrade::apply(&img, &pipeline::mixture_spec(data.sigmas, seed, &keys))?.0);
                clean.push(img);
                labels.push(data.train[k].1);
            }
            let restored = restore::denoise_all(data.restorer, &degraded)?;

            let mut g = Graph::new();
            let pb = bind_frozen(&split.classifier.params, &mut g);
            let pc = net.params.bind(&mut g);
            let x = g.constant(normalized_batch(&restored, data.prep)?);
            let (fid, pe): (Var, Option<Params>) = match &est {
                Some(e) => {
                    let pe = e.params.bind(&mut g);
                    let d = g.constant(imaging::batch(&degraded)?);
                    let raw = e.forward(&mut g, &pe, d);
                    (g.affine(raw, (1.0 / std) as f32, (-mean / std) as f32), Some(pe))
                }
                None => {
                    let maps = pipeline::fidelity_maps(source, &restored, &clean, &degraded, estimator, metric, &data.stats)?;
                    (g.constant(map_batch(&maps)?), None)
                }
            };
            let logits = net.forward(&mut g, split, &pb, &pc, x, fid);
            let loss = g.smoothed_cross_entropy(logits, &labels, cfg.label_smoothing_eps as f32);
            let lv = g.value(loss).data()[0] as f64;
            check_finite(lv, "calibration", epoch, step)?;
            correct += score(g.value(logits), &labels)?.0;
            g.backward(loss);
            let lr = lr_at(&sched, step)?;
            let grads = net.params.grads(&g, &pc);
            opt.step(&mut net.params, &grads, lr);
            if let (Some(e), Some(pe), Some(eo)) = (est.as_mut(), pe.as_ref(), est_opt.as_mut()) {
                let grads = e.params.grads(&g, pe);
                eo.step(&mut e.params, &grads, lr);
            }
            total += lv * chunk.len() as f64;
            step += 1;
        }
        let train_acc = correct as f64 / n as f64;
        curves.push(epoch, "train", total / n as f64, train_acc);
        let maps = match &fixed_val_maps {
            Some(m) => m.clone(),
            None => pipeline::fidelity_maps(source, &val_restored, &val_clean, &val_degraded, est.as_ref(), metric, &data.stats)?,
        };
        let val = evaluate_calibration(&net, split, &val_restored, &maps, &val_labels, &eval_prep)?;
        curves.push(epoch, "val", val.loss, val.accuracy);
        log::info!(
            "calibration[{source}] epoch {epoch}: train acc {train_acc:.3} val acc {:.3}",
            val.accuracy
        );
        if best.as_ref().is_none_or(|b| val.accuracy > b.1) {
            best = Some((epoch, val.accuracy, net.clone(), est.clone()));
        }
    }
    if split.hash != split.classifier.checksum() {
        return Err(Error::BackboneMismatch {
            expected: split.hash.clone(),
            found: split.classifier.checksum(),
        });
    }
    let (best_epoch, best_val_accuracy, net, estimator) = best.ok_or_else(|| Error::invalid("training ran zero epochs"))?;
    Ok(CalibFit {
        net,
        estimator,
        curves,
        best_epoch,
        best_val_accuracy,
    })
}
