//! DnCNN-style fully convolutional networks trained on image patches. The
//! same network drives AWGN restoration (residual head) and fidelity-map
//! estimation (non-negative head).

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Container;
use crate::degrade::{self, DegradationSpec};
use crate::error::{Error, Result};
use crate::imaging::{self, ImageTensor};
use crate::nn::layers::{ConvStack, ConvStackSpec, FinalInit};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::rng;
use crate::train::{check_finite, lr_at, Curves, Optimizer, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Conv layers in total, first and last included.
    pub depth: usize,
    pub width: usize,
    pub kernel: usize,
    /// `true`: output = input − prediction. `false`: output = max(prediction, 0).
    pub residual: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    pub final_init: FinalInit,
}

impl DenoiserConfig {
    /// Desk restorer.
    pub fn desk() -> Self {
        Self {
            depth: 6,
            width: 24,
            kernel: 3,
            residual: true,
            in_channels: 3,
            out_channels: 3,
            final_init: FinalInit::Zero,
        }
    }

    /// The 17-layer, 64-wide configuration.
    pub fn dncnn17() -> Self {
        Self {
            depth: 17,
            width: 64,
            ..Self::desk()
        }
    }

    /// Fidelity estimator: same trunk, one non-negative output channel. The
    /// last layer starts non-zero with a positive bias so the output clamp
    /// passes gradient from the first step.
    pub fn estimator(depth: usize, width: usize) -> Self {
        Self {
            depth,
            width,
            kernel: 3,
            residual: false,
            in_channels: 3,
            out_channels: 1,
            final_init: FinalInit::Scaled { gain: 0.1, bias: 0.05 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return Err(Error::Config(format!("denoiser depth must be at least 3, got {}", self.depth)));
        }
        if self.kernel.is_multiple_of(2) || self.width == 0 {
            return Err(Error::Config("kernel must be odd and width positive".into()));
        }
        if self.residual && self.in_channels != self.out_channels {
            return Err(Error::Config("a residual head needs out_channels = in_channels".into()));
        }
        Ok(())
    }

    fn stack_spec(&self) -> ConvStackSpec {
        ConvStackSpec {
            in_channels: self.in_channels,
            hidden: self.width,
            out_channels: self.out_channels,
            layers: self.depth,
            kernel: self.kernel,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    stack: ConvStack,
    pub params: ParamStore<f32>,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, &[rng::label_key("dncnn-init")]);
        let stack = ConvStack::init(&mut params, "dncnn", cfg.stack_spec(), cfg.final_init, &mut r);
        Ok(Self { cfg, stack, params })
    }

    /// A model with no weights; every inference call fails until weights are
    /// loaded.
    pub fn uninitialized(cfg: DenoiserConfig) -> Self {
        Self {
            cfg,
            stack: ConvStack {
                spec: cfg.stack_spec(),
                first: 0,
            },
            params: ParamStore::new(),
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.params.len() == self.stack.num_params()
    }

    fn require_init(&self) -> Result<()> {
        if !self.is_initialized() {
            return Err(Error::Uninitialized(
                "denoiser has no weights; train it or load a checkpoint".into(),
            ));
        }
        Ok(())
    }

    /// Graph forward pass on a `[B, C, H, W]` batch, head applied.
    pub fn forward(&self, g: &mut Graph<f32>, p: &crate::nn::Params, x: Var) -> Var {
        let h = self.stack.forward(g, p, x);
        if self.cfg.residual {
            g.sub(x, h)
        } else {
            g.relu(h)
        }
    }

    /// Raw network output before the head.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.require_init()?;
        let (_, c, h, w) = x.dims4();
        if c != self.cfg.in_channels || h == 0 || w == 0 {
            return Err(Error::Shape(format!("denoiser expects {} channels, got {c}", self.cfg.in_channels)));
        }
        Ok(self.stack.infer(&self.params, x))
    }

    /// Head output without clipping: `x − prediction` or `max(prediction, 0)`.
    pub fn apply_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let pred = self.predict(x)?;
        Ok(if self.cfg.residual {
            let data = x.data().iter().zip(pred.data()).map(|(a, b)| a - b).collect();
            Tensor::from_vec(x.shape(), data)?
        } else {
            pred.map(|v| v.max(0.0))
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        self.require_init()?;
        let mut c = Container::new(
            if self.cfg.residual { "denoiser" } else { "estimator" },
            json!({ "config": self.cfg }),
        );
        for p in self.params.iter() {
            c = c.with_tensor(p.name.clone(), p.value.clone());
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let cfg: DenoiserConfig = serde_json::from_value(c.meta["config"].clone())?;
        let mut model = Self::new(cfg, 0)?;
        model.params.load_values(c.tensors)?;
        Ok(model)
    }
}

/// `clip(img − predicted_noise, 0, 1)` for one image of any size.
pub fn denoise(model: &Denoiser, img: &ImageTensor) -> Result<ImageTensor> {
    Ok(denoise_all(model, std::slice::from_ref(img))?.remove(0))
}

/// Batched [`denoise`]; images of equal size share a forward pass.
pub fn denoise_all(model: &Denoiser, imgs: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
    if !model.cfg.residual {
        return Err(Error::invalid("denoise needs a residual (restoration) model"));
    }
    run_batched(model, imgs, |t| {
        let mut out = model.apply_batch(t)?;
        for v in out.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(out)
    })
}

pub(crate) fn run_batched(
    model: &Denoiser,
    imgs: &[ImageTensor],
    f: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Vec<ImageTensor>> {
    model.require_init()?;
    const CHUNK: usize = 32;
    let mut out = Vec::with_capacity(imgs.len());
    let mut start = 0;
    while start < imgs.len() {
        let mut end = start + 1;
        while end < imgs.len() && end - start < CHUNK && imgs[end].same_shape(&imgs[start]) {
            end += 1;
        }
        let batch = imaging::batch(&imgs[start..end])?;
        out.extend(imaging::unbatch(&f(&batch)?));
        start = end;
    }
    Ok(out)
}

/// Peak signal-to-noise ratio for `[0, 1]` images; identical inputs give
/// `+∞`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("psnr inputs differ in shape".into()));
    }
    Ok(psnr_from_mse(mse(a.data(), b.data())))
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSampler {
    pub patch: usize,
    pub stride: usize,
}

impl PatchSampler {
    pub const PAPER: PatchSampler = PatchSampler { patch: 50, stride: 25 };

    pub fn new(patch: usize, stride: usize) -> Result<Self> {
        if patch == 0 || stride == 0 || stride > patch {
            return Err(Error::Config(format!("invalid patch grid {patch}/{stride}")));
        }
        Ok(Self { patch, stride })
    }

    fn axis(&self, n: usize) -> Vec<usize> {
        if n < self.patch {
            return Vec::new();
        }
        (0..=(n - self.patch) / self.stride).map(|i| i * self.stride).collect()
    }

    /// Top-left corners of the regular patch grid.
    pub fn positions(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let xs = self.axis(w);
        self.axis(h).into_iter().flat_map(|y| xs.iter().map(move |&x| (y, x))).collect()
    }
}

/// How a clean patch becomes a training pair.
pub trait PairMaker {
    /// Returns `(input, target)` for one clean patch under the given noise spec.
    fn make(&self, clean: &ImageTensor, spec: &DegradationSpec) -> Result<(ImageTensor, ImageTensor)>;
}

/// Restoration pairs: (noisy patch, clean patch).
pub struct RestorePairs;

impl PairMaker for RestorePairs {
    fn make(&self, clean: &ImageTensor, spec: &DegradationSpec) -> Result<(ImageTensor, ImageTensor)> {
        Ok((degrade::awgn(clean, spec)?.0, clean.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchTrainOptions {
    pub sampler: PatchSampler,
    pub sigmas: Vec<f64>,
    pub train: TrainConfig,
}

/// Mean ℓ1 patch regression with warmup + cosine and the configured
/// optimizer. Each patch gets its own sigma and noise stream per epoch.
pub fn fit_patches(
    model: &mut Denoiser,
    images: &[ImageTensor],
    pairs: &dyn PairMaker,
    opts: &PatchTrainOptions,
    label: &str,
) -> Result<Curves> {
    opts.train.validate()?;
    model.require_init()?;
    let mut items: Vec<(usize, usize, usize)> = Vec::new();
    for (i, img) in images.iter().enumerate() {
        for (y, x) in opts.sampler.positions(img.height(), img.width()) {
            items.push((i, y, x));
        }
    }
    if items.is_empty() {
        return Err(Error::Dataset(format!(
            "{label}: no training patches (empty set or images smaller than the patch)"
        )));
    }
    let bs = opts.train.batch_size.min(items.len());
    let steps_per_epoch = items.len().div_ceil(bs);
    let sched = opts.train.schedule(steps_per_epoch);
    let mut opt = Optimizer::new(&opts.train, &model.params);
    let mut curves = Curves::default();
    let p = opts.sampler.patch;
    let seed = opts.train.seed;
    let mut step = 0;
    for epoch in 0..opts.train.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::label_key(label), epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let (i, y, x) = items[k];
                let clean = images[i].crop(y, x, p, p)?;
                let mut r = rng::stream(seed, &[rng::label_key(label), epoch as u64, k as u64]);
                let sigma = degrade::sample_sigma(&opts.sigmas, &mut r);
                let spec = DegradationSpec::awgn(sigma, rng::derive(seed, &[epoch as u64, k as u64]));
                let (inp, tgt) = pairs.make(&clean, &spec)?;
                inputs.push(inp);
                targets.push(tgt);
            }
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let x = g.constant(imaging::batch(&inputs)?);
            let y = model.forward(&mut g, &bound, x);
            let loss = g.l1_loss(y, imaging::batch(&targets)?);
            let lv = g.value(loss).data()[0] as f64;
            check_finite(lv, label, epoch, step)?;
            g.backward(loss);
            let grads = model.params.grads(&g, &bound);
            opt.step(&mut model.params, &grads, lr_at(&sched, step)?);
            total += lv * chunk.len() as f64;
            step += 1;
        }
        let mean = total / items.len() as f64;
        log::info!("{label} epoch {epoch}: l1 {mean:.5}");
        curves.push(epoch, "train", mean, 0.0);
    }
    Ok(curves)
}

/// Trains a restorer on clean images with on-the-fly mixture AWGN.
pub fn train_denoiser(images: &[ImageTensor], cfg: DenoiserConfig, opts: &PatchTrainOptions) -> Result<(Denoiser, Curves)> {
    if images.is_empty() {
        return Err(Error::Dataset("train_denoiser: empty training set".into()));
    }
    let mut model = Denoiser::new(cfg, opts.train.seed)?;
    let curves = fit_patches(&mut model, images, &RestorePairs, opts, "denoiser")?;
    Ok((model, curves))
}
