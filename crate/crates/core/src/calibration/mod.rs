//! Fidelity-conditioned calibration of a frozen classifier: spatial
//! multiplication and addition at every insertion point, channel
//! multiplication and concatenation on the final feature, a residual skip
//! around each trainable branch and a per-element ensemble with the original
//! feature.

mod backbone;

pub use backbone::{bind_frozen, split_backbone, BackboneConfig, BackboneSplit, Classifier, InsertionPoint, PoolKind, StageSpec};

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::fidelity::{FidelityMap, FidelityMetric};
use crate::nn::layers::{ConvStack, ConvStackSpec, FinalInit, Mlp};
use crate::nn::{Graph, Interp, ParamStore, Params, Scalar, SparseMap, Tensor, Var};
use crate::rng;

/// Module switches, exposed as `calib.modules.*` config keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModuleFlags {
    pub spatial_mult: bool,
    pub spatial_add: bool,
    pub channel_mult: bool,
    pub channel_concat: bool,
    pub residual: bool,
    pub ensemble: bool,
}

pub const MODULE_NAMES: [&str; 6] = [
    "spatial_mult",
    "spatial_add",
    "channel_mult",
    "channel_concat",
    "residual",
    "ensemble",
];

impl ModuleFlags {
    pub fn all() -> Self {
        Self {
            spatial_mult: true,
            spatial_add: true,
            channel_mult: true,
            channel_concat: true,
            residual: true,
            ensemble: true,
        }
    }

    pub fn none() -> Self {
        Self {
            spatial_mult: false,
            spatial_add: false,
            channel_mult: false,
            channel_concat: false,
            residual: false,
            ensemble: false,
        }
    }

    pub fn without_ensemble() -> Self {
        Self {
            ensemble: false,
            ..Self::all()
        }
    }

    pub fn get(&self, name: &str) -> Result<bool> {
        Ok(*self.field(name)?)
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        *self.field_mut(name)? = on;
        Ok(())
    }

    fn field(&self, name: &str) -> Result<&bool> {
        Ok(match name {
            "spatial_mult" => &self.spatial_mult,
            "spatial_add" => &self.spatial_add,
            "channel_mult" => &self.channel_mult,
            "channel_concat" => &self.channel_concat,
            "residual" => &self.residual,
            "ensemble" => &self.ensemble,
            other => return Err(Error::invalid(format!("unknown calibration module `{other}`"))),
        })
    }

    fn field_mut(&mut self, name: &str) -> Result<&mut bool> {
        Ok(match name {
            "spatial_mult" => &mut self.spatial_mult,
            "spatial_add" => &mut self.spatial_add,
            "channel_mult" => &mut self.channel_mult,
            "channel_concat" => &mut self.channel_concat,
            "residual" => &mut self.residual,
            "ensemble" => &mut self.ensemble,
            other => return Err(Error::invalid(format!("unknown calibration module `{other}`"))),
        })
    }

    pub fn enabled(&self) -> Vec<&'static str> {
        MODULE_NAMES.iter().copied().filter(|n| self.get(n).unwrap()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub modules: ModuleFlags,
    /// Hidden width of the spatial conv stacks.
    pub conv_hidden: usize,
    /// Hidden width of the channel FC stacks.
    pub fc_hidden: usize,
    /// Resampling of the flattened map in the channel path.
    pub channel_interp: Interp,
    /// Resizing of the map to each insertion point.
    pub spatial_interp: Interp,
    pub metric: FidelityMetric,
}

impl CalibConfig {
    pub fn desk() -> Self {
        Self {
            modules: ModuleFlags::all(),
            conv_hidden: 8,
            fc_hidden: 64,
            channel_interp: Interp::Bilinear,
            spatial_interp: Interp::Bilinear,
            metric: FidelityMetric::L1,
        }
    }

    pub fn paper() -> Self {
        Self {
            conv_hidden: 64,
            fc_hidden: 1024,
            ..Self::desk()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Site {
    mult: ConvStack,
    add: ConvStack,
    scale: usize,
}

/// Trainable calibration parameters bound to one frozen backbone.
#[derive(Clone, Debug)]
pub struct CalibrationNet {
    pub cfg: CalibConfig,
    pub params: ParamStore<f32>,
    pub backbone_hash: String,
    pub feature_dim: usize,
    sites: Vec<Site>,
    channel_mult: Mlp,
    channel_concat: Mlp,
    ensemble: usize,
}

/// Gate `2·sigmoid(z)`, strictly inside `(0, 2)`.
pub fn double_sigmoid<T: Scalar>(g: &mut Graph<T>, z: Var) -> Var {
    let s = g.sigmoid(z);
    g.affine(s, T::lit(2.0), T::zero())
}

/// `feature ⊙ 2σ(stack(fid))`, broadcast over channels. `fid` must already
/// match the feature's spatial size.
pub fn spatial_multiply<T: Scalar>(g: &mut Graph<T>, p: &Params, stack: &ConvStack, feature: Var, fid: Var) -> Var {
    let z = stack.forward(g, p, fid);
    let gate = double_sigmoid(g, z);
    g.mul_plane(feature, gate)
}

/// `feature + stack(fid)`, broadcast over channels.
pub fn spatial_add<T: Scalar>(g: &mut Graph<T>, p: &Params, stack: &ConvStack, feature: Var, fid: Var) -> Var {
    let a = stack.forward(g, p, fid);
    g.add_plane(feature, a)
}

/// `feature ⊙ 2σ(fc(fid_feat))`.
pub fn channel_multiply<T: Scalar>(g: &mut Graph<T>, p: &Params, fc: &Mlp, feature: Var, fid_feat: Var) -> Var {
    let z = fc.forward(g, p, fid_feat);
    let gate = double_sigmoid(g, z);
    g.mul(feature, gate)
}

/// `fc([feature ‖ fid_feat])`, width `2C → C`.
pub fn channel_concat<T: Scalar>(g: &mut Graph<T>, p: &Params, fc: &Mlp, feature: Var, fid_feat: Var) -> Var {
    let cat = g.concat_cols(feature, fid_feat);
    fc.forward(g, p, cat)
}

/// `α⊙modified + (1−α)⊙original` with `α = sigmoid(gate)`, written as
/// `original + α⊙(modified − original)` so that equal inputs pass through
/// exactly.
pub fn ensemble<T: Scalar>(g: &mut Graph<T>, modified: Var, original: Var, gate: Var) -> Var {
    let alpha = g.sigmoid(gate);
    let diff = g.sub(modified, original);
    let mixed = g.mul_row(diff, alpha);
    g.add(original, mixed)
}

/// Downsampling operator of the channel path for one flatten order.
fn channel_map<T: Scalar>(h: usize, w: usize, c: usize, interp: Interp, transposed: bool) -> SparseMap<T> {
    let mut m = SparseMap::<T>::resize1d(h * w, c / 2, interp);
    if transposed {
        // Position k of the flattened transpose reads pixel (k % h, k / h).
        for taps in &mut m.taps {
            for tap in taps.iter_mut() {
                let k = tap.0;
                tap.0 = (k % h) * w + k / h;
            }
        }
    }
    m
}

/// Length-`C` fidelity feature: the flattened map and its flattened
/// transpose, each resampled to `C/2`, concatenated.
pub fn channel_feature(fid: &FidelityMap, c: usize, interp: Interp) -> Result<Vec<f32>> {
    if !c.is_multiple_of(2) || c == 0 {
        return Err(Error::Config(format!("channel feature length must be even, got {c}")));
    }
    let mut out = vec![0.0f32; c];
    let (h, w) = (fid.height, fid.width);
    channel_map::<f32>(h, w, c, interp, false).apply(&fid.values, &mut out[..c / 2]);
    channel_map::<f32>(h, w, c, interp, true).apply(&fid.values, &mut out[c / 2..]);
    Ok(out)
}

fn channel_feature_graph<T: Scalar>(g: &mut Graph<T>, fid: Var, c: usize, interp: Interp) -> Var {
    let (_, _, h, w) = g.value(fid).dims4();
    let a = g.resample(fid, Arc::new(channel_map(h, w, c, interp, false)), 1, &[c / 2]);
    let b = g.resample(fid, Arc::new(channel_map(h, w, c, interp, true)), 1, &[c / 2]);
    g.concat_cols(a, b)
}

impl CalibrationNet {
    /// Zero-initialised final layers everywhere, residual scales at 1 and
    /// ensemble gates at 0: the calibrated network starts as the backbone.
    pub fn new(cfg: CalibConfig, split: &BackboneSplit, seed: u64) -> Result<Self> {
        let c = split.feature_dim;
        if !c.is_multiple_of(2) {
            return Err(Error::Config(format!("feature dimension {c} must be even")));
        }
        let mut r = rng::stream(seed, &[rng::label_key("calibration-init")]);
        let mut params = ParamStore::new();
        let spec = ConvStackSpec {
            in_channels: 1,
            hidden: cfg.conv_hidden,
            out_channels: 1,
            layers: 3,
            kernel: 3,
        };
        let mut sites = Vec::new();
        for (i, pt) in split.insertion_points.iter().enumerate() {
            let mult = ConvStack::init(&mut params, &format!("site{i}.{}.mult", pt.name), spec, FinalInit::Zero, &mut r);
            let add = ConvStack::init(&mut params, &format!("site{i}.{}.add", pt.name), spec, FinalInit::Zero, &mut r);
            let scale = params.push(format!("site{i}.{}.scale", pt.name), Tensor::full(&[1], 1.0));
            sites.push(Site { mult, add, scale });
        }
        let channel_mult = Mlp::init(&mut params, "channel.mult", &[c, cfg.fc_hidden, c], FinalInit::Zero, &mut r);
        // Without the residual skip the concat branch must carry the feature
        // on its own, so it cannot start at zero.
        let concat_init = if cfg.modules.residual { FinalInit::Zero } else { FinalInit::Xavier };
        let channel_concat = Mlp::init(&mut params, "channel.concat", &[2 * c, cfg.fc_hidden, c], concat_init, &mut r);
        let ensemble = params.push("ensemble.gate", Tensor::zeros(&[c]));
        let mut net = Self {
            cfg,
            params,
            backbone_hash: split.hash.clone(),
            feature_dim: c,
            sites,
            channel_mult,
            channel_concat,
            ensemble,
        };
        net.freeze_disabled();
        Ok(net)
    }

    fn freeze_disabled(&mut self) {
        let m = self.cfg.modules;
        let mut off: Vec<usize> = Vec::new();
        for s in &self.sites {
            if !m.spatial_mult {
                off.extend(s.mult.first..s.mult.first + s.mult.num_params());
            }
            if !m.spatial_add {
                off.extend(s.add.first..s.add.first + s.add.num_params());
            }
            if !m.residual || !(m.spatial_mult || m.spatial_add) {
                off.push(s.scale);
            }
        }
        let mlp_range = |mlp: &Mlp| mlp.first..mlp.first + 2 * (mlp.dims.len() - 1);
        if !m.channel_mult {
            off.extend(mlp_range(&self.channel_mult));
        }
        if !m.channel_concat {
            off.extend(mlp_range(&self.channel_concat));
        }
        if !m.ensemble {
            off.push(self.ensemble);
        }
        for i in off {
            self.params.entries_mut()[i].trainable = false;
        }
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    /// Index of the ensemble gate tensor in `params`.
    pub fn ensemble_index(&self) -> usize {
        self.ensemble
    }

    fn check_binding(&self, split: &BackboneSplit) -> Result<()> {
        if split.hash != self.backbone_hash {
            return Err(Error::BackboneMismatch {
                expected: self.backbone_hash.clone(),
                found: split.hash.clone(),
            });
        }
        Ok(())
    }

    fn site<T: Scalar>(&self, g: &mut Graph<T>, pc: &Params, k: usize, x: Var, fid: Var) -> Var {
        let m = self.cfg.modules;
        if !(m.spatial_mult || m.spatial_add) {
            return x;
        }
        let (_, _, h, w) = g.value(x).dims4();
        let (_, _, fh, fw) = g.value(fid).dims4();
        let f = if (fh, fw) == (h, w) {
            fid
        } else {
            let map = SparseMap::resize2d(fh, fw, h, w, self.cfg.spatial_interp);
            g.resample(fid, Arc::new(map), 2, &[h, w])
        };
        let s = &self.sites[k];
        let mut y = x;
        if m.spatial_mult {
            y = spatial_multiply(g, pc, &s.mult, y, f);
        }
        if m.spatial_add {
            y = spatial_add(g, pc, &s.add, y, f);
        }
        if m.residual {
            let d = g.sub(y, x);
            let d = g.scale_by(d, pc[s.scale]);
            y = g.add(x, d);
        }
        y
    }

    /// Calibrated logits. `x`: normalized restored batch `[B, 3, H, W]`;
    /// `fid`: prepared fidelity maps `[B, 1, H, W]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, split: &BackboneSplit, pb: &Params, pc: &Params, x: Var, fid: Var) -> Var {
        let m = self.cfg.modules;
        let feat = split.features(g, pb, x, &mut |g, k, v| self.site(g, pc, k, v, fid));
        let mut f = feat;
        if m.channel_mult || m.channel_concat {
            let v = channel_feature_graph(g, fid, self.feature_dim, self.cfg.channel_interp);
            if m.channel_mult {
                f = channel_multiply(g, pc, &self.channel_mult, f, v);
            }
            if m.channel_concat {
                let c = channel_concat(g, pc, &self.channel_concat, f, v);
                f = if m.residual { g.add(f, c) } else { c };
            }
        }
        if m.ensemble {
            let original = split.features(g, pb, x, &mut |_, _, v| v);
            f = ensemble(g, f, original, pc[self.ensemble]);
        }
        split.head(g, pb, f)
    }

    /// Inference on prepared inputs; returns `[B, K]` logits.
    pub fn predict(&self, split: &BackboneSplit, x: &Tensor<f32>, fid: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_binding(split)?;
        let mut g = Graph::new();
        let pb = bind_frozen(&split.classifier.params, &mut g);
        let pc = bind_frozen(&self.params, &mut g);
        let xv = g.constant(x.clone());
        let fv = g.constant(fid.clone());
        let out = self.forward(&mut g, split, &pb, &pc, xv, fv);
        Ok(g.take_value(out))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let mut c = Container::new(
            "calibration",
            json!({
                "config": self.cfg,
                "backbone_hash": self.backbone_hash,
                "feature_dim": self.feature_dim,
            }),
        );
        for p in self.params.iter() {
            c = c.with_tensor(p.name.clone(), p.value.clone());
        }
        c.save(path)
    }

    /// Loads a checkpoint and binds it to `split`; fails if the checkpoint
    /// was trained against a different backbone.
    pub fn load(path: &Path, split: &BackboneSplit) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_kind("calibration")?;
        let expected: String = serde_json::from_value(c.meta["backbone_hash"].clone())?;
        if expected != split.hash {
            return Err(Error::BackboneMismatch {
                expected,
                found: split.hash.clone(),
            });
        }
        let cfg: CalibConfig = serde_json::from_value(c.meta["config"].clone())?;
        let mut net = Self::new(cfg, split, 0)?;
        net.params.load_values(c.tensors)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests;
