//! Classifier fine-tuning for the three baseline setups, with best-epoch
//! selection on the validation set.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{argmax, check_finite, lr_at, smoothed_loss, Curves, Optimizer, TrainConfig};
use crate::calibration::Classifier;
use crate::error::{Error, Result};
use crate::imaging::{self, ImageTensor, PreprocessConfig, PreprocessMode};
use crate::nn::{Graph, Tensor};
use crate::pipeline::{self, normalized_batch};
use crate::restore::{self, Denoiser};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Setup1Clean,
    Setup2Degraded,
    Setup3Restored,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "setup1_clean" | "setup1" => Ok(Self::Setup1Clean),
            "setup2_degraded" | "setup2" => Ok(Self::Setup2Degraded),
            "setup3_restored" | "setup3" => Ok(Self::Setup3Restored),
            other => Err(Error::invalid(format!("unknown regime `{other}`"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Setup1Clean => "setup1_clean",
            Self::Setup2Degraded => "setup2_degraded",
            Self::Setup3Restored => "setup3_restored",
        })
    }
}

/// Training inputs. Images are in `[0, 1]`; `prep` is the train-mode
/// pipeline and its crop size is the network resolution.
#[derive(Clone, Copy)]
pub struct ClassifierData<'a> {
    pub train: &'a [(ImageTensor, usize)],
    pub val: &'a [(ImageTensor, usize)],
    pub prep: &'a PreprocessConfig,
    pub sigmas: &'a [f64],
    pub restorer: Option<&'a Denoiser>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
}

pub struct ClassifierFit {
    pub classifier: Classifier,
    pub curves: Curves,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Accuracy and mean cross-entropy of a `[B, K]` logit tensor.
pub(crate) fn score(logits: &Tensor<f32>, labels: &[usize]) -> Result<(usize, f64)> {
    let (b, k) = logits.dims2();
    if b != labels.len() {
        return Err(Error::Shape(format!("{b} logit rows for {} labels", labels.len())));
    }
    let mut correct = 0;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        correct += usize::from(argmax(row) == y);
        let r64: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        loss += smoothed_loss(&r64, y, 0.0)?;
    }
    Ok((correct, loss))
}

pub(crate) const EVAL_BATCH: usize = 64;

/// Top-1 accuracy of `model` on images already at network resolution.
pub fn evaluate_classifier(model: &Classifier, images: &[ImageTensor], labels: &[usize], prep: &PreprocessConfig) -> Result<Evaluation> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::Dataset(format!(
            "evaluation needs matching non-empty sets, got {} images and {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut correct = 0;
    let mut loss = 0.0;
    for (imgs, ys) in images.chunks(EVAL_BATCH).zip(labels.chunks(EVAL_BATCH)) {
        let logits = model.predict(&normalized_batch(imgs, prep)?);
        let (c, l) = score(&logits, ys)?;
        correct += c;
        loss += l;
    }
    let n = images.len();
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        loss: loss / n as f64,
        count: n,
    })
}

/// Validation inputs for a regime: clean for setup 1, one fixed mixture
/// draw per image otherwise, restored for setup 3.
fn validation_inputs(data: &ClassifierData, regime: Regime, seed: u64) -> Result<Vec<ImageTensor>> {
    let clean = data
        .val
        .iter()
        .map(|(img, _)| imaging::eval_geometry(img, data.prep.crop_size))
        .collect::<Result<Vec<_>>>()?;
    if regime == Regime::Setup1Clean {
        return Ok(clean);
    }
    let noisy = clean
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let spec = pipeline::mixture_spec(data.sigmas, seed, &[rng::label_key("classifier-val"), i as u64]);
            Ok(crate::degrade::apply(img, &spec)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    restore_if(regime, data.restorer, noisy)
}

fn restore_if(regime: Regime, restorer: Option<&Denoiser>, imgs: Vec<ImageTensor>) -> Result<Vec<ImageTensor>> {
    if regime != Regime::Setup3Restored {
        return Ok(imgs);
    }
    let r = restorer.ok_or_else(|| Error::invalid("setup3_restored needs a restorer"))?;
    restore::denoise_all(r, &imgs)
}

/// Trains `init` under `regime` and returns the best-validation checkpoint.
pub fn fit_classifier(init: Classifier, data: &ClassifierData, regime: Regime, cfg: &TrainConfig) -> Result<ClassifierFit> {
    cfg.validate()?;
    if data.prep.mode != PreprocessMode::Train {
        return Err(Error::invalid("fit_classifier needs a train-mode preprocessing config"));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Dataset("fit_classifier needs non-empty train and val sets".into()));
    }
    if regime == Regime::Setup3Restored && data.restorer.is_none() {
        return Err(Error::invalid("setup3_restored needs a restorer"));
    }
    let eval_prep = PreprocessConfig {
        mode: PreprocessMode::Eval,
        ..data.prep.clone()
    };
    let seed = cfg.seed;
    let val_inputs = validation_inputs(data, regime, seed)?;
    let val_labels: Vec<usize> = data.val.iter().map(|(_, l)| *l).collect();

    let mut model = init;
    let n = data.train.len();
    let bs = cfg.batch_size.min(n);
    let sched = cfg.schedule(n.div_ceil(bs));
    let mut opt = Optimizer::new(cfg, &model.params);
    let mut curves = Curves::default();
    let mut best: Option<(usize, f64, Classifier)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::label_key("classifier-order"), epoch as u64]));
        let (mut total, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(bs) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let keys = [rng::label_key("classifier-sample"), epoch as u64, k as u64];
                let mut r = rng::stream(seed, &keys);
                let mut img = imaging::augment_train(&data.train[k].0, data.prep, &mut r)?;
                if regime != Regime::Setup1Clean {
                    img = crate::degrade::apply(&img, &pipeline::mixture_spec(data.sigmas, seed, &keys))?.0;
                }
                inputs.push(img);
                labels.push(data.train[k].1);
            }
            let inputs = restore_if(regime, data.restorer, inputs)?;
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let x = g.constant(normalized_batch(&inputs, data.prep)?);
            let logits = model.logits(&mut g, &bound, x);
            let loss = g.smoothed_cross_entropy(logits, &labels, cfg.label_smoothing_eps as f32);
            let lv = g.value(loss).data()[0] as f64;
            check_finite(lv, "classifier", epoch, step)?;
            correct += score(g.value(logits), &labels)?.0;
            g.backward(loss);
            let grads = model.params.grads(&g, &bound);
            opt.step(&mut model.params, &grads, lr_at(&sched, step)?);
            total += lv * chunk.len() as f64;
            step += 1;
        }
        let train_acc = correct as f64 / n as f64;
        curves.push(epoch, "train", total / n as f64, train_acc);
        let val = evaluate_classifier(&model, &val_inputs, &val_labels, &eval_prep)?;
        curves.push(epoch, "val", val.loss, val.accuracy);
        log::info!(
            "classifier[{regime}] epoch {epoch}: train acc {train_acc:.3} val acc {:.3}",
            val.accuracy
        );
        if best.as_ref().is_none_or(|b| val.accuracy > b.1) {
            best = Some((epoch, val.accuracy, model.clone()));
        }
    }
    let (best_epoch, best_val_accuracy, mut classifier) = best.ok_or_else(|| Error::invalid("training ran zero epochs"))?;
    classifier.val_accuracy = Some(best_val_accuracy);
    Ok(ClassifierFit {
        classifier,
        curves,
        best_epoch,
        best_val_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::BackboneConfig;

    fn tiny() -> (Vec<(ImageTensor, usize)>, Vec<(ImageTensor, usize)>) {
        let all = crate::desk::generate(2, 32, 9).unwrap();
        let (train, val): (Vec<_>, Vec<_>) = all.into_iter().enumerate().partition(|(i, _)| i % 2 == 0);
        (
            train.into_iter().map(|(_, s)| s).collect(),
            val.into_iter().map(|(_, s)| s).collect(),
        )
    }

    fn cfg(epochs: usize) -> TrainConfig {
        let mut c = TrainConfig::nag(epochs, 4);
        c.warmup_epochs = 0;
        c.batch_size = 5;
        c.lr_init = 0.05;
        c
    }

    fn fit(regime: Regime, epochs: usize) -> Result<ClassifierFit> {
        let (train, val) = tiny();
        let prep = PreprocessConfig::train(32);
        let data = ClassifierData {
            train: &train,
            val: &val,
            prep: &prep,
            sigmas: &crate::degrade::MIXTURE_SIGMAS,
            restorer: None,
        };
        fit_classifier(Classifier::new(BackboneConfig::desk(10), 1)?, &data, regime, &cfg(epochs))
    }

    #[test]
    fn fits_are_reproducible() {
        let a = fit(Regime::Setup2Degraded, 2).unwrap();
        let b = fit(Regime::Setup2Degraded, 2).unwrap();
        assert_eq!(a.classifier.checksum(), b.classifier.checksum());
        assert_eq!(a.curves, b.curves);
    }

    #[test]
    fn returns_the_first_best_validation_epoch() {
        let f = fit(Regime::Setup1Clean, 4).unwrap();
        let val: Vec<f64> = f.curves.split("val").map(|r| r.accuracy).collect();
        assert_eq!(val.len(), 4);
        let best = val.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(f.best_val_accuracy, best);
        assert_eq!(f.best_epoch, val.iter().position(|&v| v == best).unwrap());
        assert_eq!(f.classifier.val_accuracy, Some(best));
    }

    #[test]
    fn overfits_one_batch() {
        let (train, _) = tiny();
        let batch = &train[..8];
        let mut prep = PreprocessConfig::train(32);
        prep.area_range = [1.0, 1.0];
        prep.aspect_range = [1.0, 1.0];
        prep.hflip_prob = 0.0;
        let data = ClassifierData {
            train: batch,
            val: batch,
            prep: &prep,
            sigmas: &[0.0],
            restorer: None,
        };
        let mut c = TrainConfig::adam(50, 4);
        c.warmup_epochs = 0;
        c.batch_size = 8;
        c.lr_init = 2e-3;
        let f = fit_classifier(
            Classifier::new(BackboneConfig::desk(10), 2).unwrap(),
            &data,
            Regime::Setup1Clean,
            &c,
        )
        .unwrap();
        let losses: Vec<f64> = f.curves.split("train").map(|r| r.loss).collect();
        assert!(losses[49] < 0.2 * losses[0], "{} -> {}", losses[0], losses[49]);
        assert_eq!(f.best_val_accuracy, 1.0);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(fit(Regime::Setup3Restored, 1).is_err());
        let (train, val) = tiny();
        let prep = PreprocessConfig::eval(32);
        let data = ClassifierData {
            train: &train,
            val: &val,
            prep: &prep,
            sigmas: &[0.1],
            restorer: None,
        };
        let init = || Classifier::new(BackboneConfig::desk(10), 1).unwrap();
        assert!(fit_classifier(init(), &data, Regime::Setup1Clean, &cfg(1)).is_err());
        let prep = PreprocessConfig::train(32);
        let empty = ClassifierData {
            val: &[],
            prep: &prep,
            ..data
        };
        assert!(fit_classifier(init(), &empty, Regime::Setup1Clean, &cfg(1)).is_err());
        let logits = Tensor::zeros(&[2, 3]);
        assert!(score(&logits, &[0]).is_err());
        assert!(evaluate_classifier(&init(), &[], &[], &PreprocessConfig::eval(32)).is_err());
    }
}
