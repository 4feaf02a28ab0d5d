//! Plain CNN classifiers and their split into a feature extractor with named
//! insertion points plus a linear head.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::nn::params::{he_normal, xavier_uniform};
use crate::nn::{Graph, ParamStore, Params, Scalar, Tensor, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    /// 2×2 max pooling, stride 2.
    Max2,
    /// Global average pooling to a `[B, C]` vector.
    GlobalAvg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Output width of each conv (ReLU after every conv).
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub pool: Option<PoolKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub name: String,
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    /// Square input side; only needed when the extractor ends in a flatten.
    pub input_size: usize,
}

impl BackboneConfig {
    /// Three pooling layers and a 64-dimensional feature.
    pub fn desk(num_classes: usize) -> Self {
        let stage = |widths: Vec<usize>, pool| StageSpec {
            widths,
            kernel: 3,
            pool: Some(pool),
        };
        Self {
            name: "desk".into(),
            in_channels: 3,
            stages: vec![
                stage(vec![16, 16], PoolKind::Max2),
                stage(vec![32], PoolKind::Max2),
                stage(vec![64], PoolKind::GlobalAvg),
            ],
            num_classes,
            input_size: 32,
        }
    }

    /// Stage widths of ResNet-50 ending in a 2048-dimensional feature. The
    /// wide stages use 1×1 kernels to keep the parameter count small.
    pub fn resnet50_like(num_classes: usize) -> Self {
        let stage = |widths: Vec<usize>, kernel, pool| StageSpec {
            widths,
            kernel,
            pool: Some(pool),
        };
        Self {
            name: "resnet50_like".into(),
            in_channels: 3,
            stages: vec![
                stage(vec![64], 3, PoolKind::Max2),
                stage(vec![256], 1, PoolKind::Max2),
                stage(vec![512], 1, PoolKind::Max2),
                stage(vec![1024], 1, PoolKind::Max2),
                stage(vec![2048], 1, PoolKind::GlobalAvg),
            ],
            num_classes,
            input_size: 224,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.widths.is_empty() || s.kernel % 2 == 0) {
            return Err(Error::Config("every stage needs at least one conv with an odd kernel".into()));
        }
        let n = self.stages.len();
        if self.stages[..n - 1].iter().any(|s| s.pool == Some(PoolKind::GlobalAvg)) {
            return Err(Error::Config("global average pooling may only end the last stage".into()));
        }
        if self.feature_dim() == 0 {
            return Err(Error::Config("input_size is too small for the pooling layers".into()));
        }
        Ok(())
    }

    fn ends_in_gap(&self) -> bool {
        self.stages.last().and_then(|s| s.pool) == Some(PoolKind::GlobalAvg)
    }

    /// Feature length: the last width after global pooling, or the flattened
    /// activation size otherwise.
    pub fn feature_dim(&self) -> usize {
        let width = *self.stages.last().unwrap().widths.last().unwrap();
        if self.ends_in_gap() {
            return width;
        }
        let pools = self.stages.iter().filter(|s| s.pool == Some(PoolKind::Max2)).count();
        let side = self.input_size >> pools;
        width * side * side
    }
}

/// Classifier = conv stages + linear head. Parameters are stored in forward
/// order with the head last.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub cfg: BackboneConfig,
    pub params: ParamStore<f32>,
    /// Validation accuracy of the epoch this checkpoint was selected at.
    pub val_accuracy: Option<f64>,
    head: usize,
}

impl Classifier {
    /// He-initialised trunk and an Xavier head with zero bias.
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, &[rng::label_key("classifier-init")]);
        let mut params = ParamStore::new();
        let mut cin = cfg.in_channels;
        for (si, s) in cfg.stages.iter().enumerate() {
            for (li, &w) in s.widths.iter().enumerate() {
                let fan = cin * s.kernel * s.kernel;
                params.push(
                    format!("stage{si}.conv{li}.weight"),
                    he_normal(&[w, cin, s.kernel, s.kernel], fan, &mut r),
                );
                params.push(format!("stage{si}.conv{li}.bias"), Tensor::zeros(&[w]));
                cin = w;
            }
        }
        let head = params.len();
        let (c, k) = (cfg.feature_dim(), cfg.num_classes);
        params.push("head.weight", xavier_uniform(&[k, c], c, k, &mut r));
        params.push("head.bias", Tensor::zeros(&[k]));
        Ok(Self {
            cfg,
            params,
            val_accuracy: None,
            head,
        })
    }

    /// Re-draws the head (Xavier weights, zero bias), keeping the trunk.
    pub fn reset_head(&mut self, seed: u64) {
        let mut r = rng::stream(seed, &[rng::label_key("head-reset")]);
        let (c, k) = (self.cfg.feature_dim(), self.cfg.num_classes);
        *self.params.get_mut(self.head) = xavier_uniform(&[k, c], c, k, &mut r);
        *self.params.get_mut(self.head + 1) = Tensor::zeros(&[k]);
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Full forward pass `[B, 3, H, W] → [B, K]`.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, p: &Params, x: Var) -> Var {
        let mut h = x;
        let mut idx = 0;
        for s in &self.cfg.stages {
            for _ in &s.widths {
                h = g.conv2d(h, p[idx], p[idx + 1], s.kernel / 2);
                h = g.relu(h);
                idx += 2;
            }
            h = match s.pool {
                Some(PoolKind::Max2) => g.max_pool2(h),
                Some(PoolKind::GlobalAvg) => g.global_avg_pool(h),
                None => h,
            };
        }
        if !self.cfg.ends_in_gap() {
            h = g.flatten(h);
        }
        g.linear(h, p[self.head], p[self.head + 1])
    }

    /// Graph-free logits for a normalized batch.
    pub fn predict(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let mut g = Graph::new();
        let p = bind_frozen(&self.params, &mut g);
        let xv = g.constant(x.clone());
        let out = self.logits(&mut g, &p, xv);
        g.take_value(out)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let mut c = Container::new(
            "classifier",
            json!({
                "config": self.cfg,
                "checksum": self.checksum(),
                "val_accuracy": self.val_accuracy,
            }),
        );
        for p in self.params.iter() {
            c = c.with_tensor(p.name.clone(), p.value.clone());
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_kind("classifier")?;
        let cfg: BackboneConfig = serde_json::from_value(c.meta["config"].clone())?;
        let mut m = Self::new(cfg, 0)?;
        m.params.load_values(c.tensors)?;
        m.val_accuracy = serde_json::from_value(c.meta["val_accuracy"].clone()).unwrap_or(None);
        Ok(m)
    }
}

/// Binds every tensor of a store as a frozen leaf.
pub fn bind_frozen<T: Scalar>(store: &ParamStore<T>, g: &mut Graph<T>) -> Params {
    let mut s = store.clone();
    s.set_trainable(false);
    s.bind(g)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionPoint {
    pub name: String,
    pub channels: usize,
}

/// A frozen classifier viewed as extractor + head.
#[derive(Clone, Debug)]
pub struct BackboneSplit {
    pub classifier: Arc<Classifier>,
    pub insertion_points: Vec<InsertionPoint>,
    pub feature_dim: usize,
    pub hash: String,
}

/// Enumerates the insertion points of a classifier: the extractor input and
/// the site right before every pooling layer.
pub fn split_backbone(classifier: &Classifier) -> BackboneSplit {
    let cfg = &classifier.cfg;
    let mut points = vec![InsertionPoint {
        name: "input".into(),
        channels: cfg.in_channels,
    }];
    for (si, s) in cfg.stages.iter().enumerate() {
        if s.pool.is_some() {
            points.push(InsertionPoint {
                name: format!("stage{si}.prepool"),
                channels: *s.widths.last().unwrap(),
            });
        }
    }
    if points.len() == 1 {
        log::warn!("backbone `{}` has no pooling layers; only the input site is available", cfg.name);
    }
    BackboneSplit {
        feature_dim: cfg.feature_dim(),
        hash: classifier.checksum(),
        insertion_points: points,
        classifier: Arc::new(classifier.clone()),
    }
}

impl BackboneSplit {
    /// Feature extractor with a hook at every insertion point. The hook gets
    /// the site index and the activation, and returns the activation to use.
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, p: &Params, x: Var, hook: &mut dyn FnMut(&mut Graph<T>, usize, Var) -> Var) -> Var {
        let mut h = hook(g, 0, x);
        let mut idx = 0;
        let mut site = 1;
        for s in &self.classifier.cfg.stages {
            for _ in &s.widths {
                h = g.conv2d(h, p[idx], p[idx + 1], s.kernel / 2);
                h = g.relu(h);
                idx += 2;
            }
            if let Some(pool) = s.pool {
                h = hook(g, site, h);
                site += 1;
                h = match pool {
                    PoolKind::Max2 => g.max_pool2(h),
                    PoolKind::GlobalAvg => g.global_avg_pool(h),
                };
            }
        }
        if !self.classifier.cfg.ends_in_gap() {
            h = g.flatten(h);
        }
        h
    }

    pub fn head<T: Scalar>(&self, g: &mut Graph<T>, p: &Params, feat: Var) -> Var {
        let h = self.classifier.head;
        g.linear(feat, p[h], p[h + 1])
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Params {
        bind_frozen(store, g)
    }
}
