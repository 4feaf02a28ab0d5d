//! Experiment orchestration over one output directory. Every verb of the
//! `fidcal` binary is a method of [`Workspace`]; artifacts land in
//! `models/`, `curves/`, `manifests/` and `reports/` under the root.

mod activations;
mod report;

pub use activations::{mean_features, order_by_difference, ActivationReport, ActivationTable};
pub use report::{reference_table, ExperimentReport, ReportRow};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::calibration::{split_backbone, BackboneSplit, CalibConfig, CalibrationNet, Classifier, ModuleFlags};
use crate::checkpoint::{file_hash, sha256_hex, write_atomic};
use crate::config::ExperimentConfig;
use crate::degrade::DegradationSpec;
use crate::error::{Error, Result};
use crate::fidelity::{self, FidelityEstimator, FidelityMetric, NoiseMixtureStats};
use crate::imaging::{self, DatasetSplit, ImageTensor, PreprocessConfig, PreprocessMode, SplitKind};
use crate::nn::Interp;
use crate::pipeline::{self, Cell, Condition, FidelitySource};
use crate::restore::{self, Denoiser};
use crate::rng;
use crate::train::{self, CalibData, ClassifierData, ClassifierFit, Curves, Regime, RunManifest};

/// Modules that change features; `residual` and `ensemble` only modify them.
pub const FUNCTIONAL_MODULES: [&str; 4] = ["spatial_mult", "spatial_add", "channel_mult", "channel_concat"];

/// Decoded images of the three splits.
pub struct Data {
    pub class_names: Vec<String>,
    pub train: Vec<(ImageTensor, usize)>,
    pub val: Vec<(ImageTensor, usize)>,
    pub test: Vec<(ImageTensor, usize)>,
}

/// One calibration training recipe: the fidelity source and the network.
/// Everything else comes from the workspace config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibPlan {
    pub source: FidelitySource,
    pub net: CalibConfig,
}

pub struct CalibRun {
    pub plan: CalibPlan,
    pub net: CalibrationNet,
    pub split: BackboneSplit,
    /// Estimator used at evaluation: pretrained or fine-tuned.
    pub estimator: Option<FidelityEstimator>,
    /// Hash of the training inputs; names the checkpoint.
    pub key: String,
    pub path: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    FidelityMetric,
    Downsampling,
}

impl StudyKind {
    pub fn default_values(self) -> &'static [&'static str] {
        match self {
            Self::FidelityMetric => &["l1", "l2", "cosine"],
            Self::Downsampling => &["bilinear", "bicubic", "nearest"],
        }
    }

    /// The calibration config key this study varies.
    pub fn key(self) -> &'static str {
        match self {
            Self::FidelityMetric => "metric",
            Self::Downsampling => "channel_interp",
        }
    }

    pub fn apply(self, base: &CalibConfig, value: &str) -> Result<CalibConfig> {
        let mut cfg = base.clone();
        match self {
            Self::FidelityMetric => cfg.metric = value.parse::<FidelityMetric>()?,
            Self::Downsampling => cfg.channel_interp = value.parse::<Interp>()?,
        }
        Ok(cfg)
    }
}

impl FromStr for StudyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "metric" | "fidelity_metric" => Ok(Self::FidelityMetric),
            "downsampling" => Ok(Self::Downsampling),
            other => Err(Error::invalid(format!("unknown study `{other}` (expected metric or downsampling)"))),
        }
    }
}

impl fmt::Display for StudyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FidelityMetric => "metric",
            Self::Downsampling => "downsampling",
        })
    }
}

/// The full model plus one entry per removal group. A group is a module
/// name, or several joined with `+`.
pub fn ablation_plan(base: ModuleFlags, groups: &[String]) -> Result<Vec<(String, ModuleFlags, Vec<String>)>> {
    if groups.is_empty() {
        return Err(Error::invalid("ablation needs at least one module to remove"));
    }
    let mut out = vec![("full".to_string(), base, Vec::new())];
    for group in groups {
        let names: Vec<String> = group.split('+').map(|s| s.trim().to_string()).collect();
        let mut flags = base;
        for n in &names {
            if !flags.get(n)? {
                return Err(Error::invalid(format!("module `{n}` is not enabled in the base model")));
            }
            flags.set(n, false)?;
        }
        if FUNCTIONAL_MODULES.iter().all(|m| !flags.get(m).unwrap_or(false)) {
            return Err(Error::invalid(format!(
                "removing `{group}` leaves no calibration module; the run would be the bare backbone"
            )));
        }
        out.push((format!("without {group}"), flags, names));
    }
    Ok(out)
}

/// Every enabled module of `base` except the ensemble, one per group.
pub fn default_ablation_groups(base: ModuleFlags) -> Vec<String> {
    base.enabled().into_iter().filter(|m| *m != "ensemble").map(String::from).collect()
}

/// One config per value, differing from `base` only in the studied key.
pub fn variant_plan(base: &CalibConfig, kind: StudyKind, values: &[String]) -> Result<Vec<(String, CalibConfig)>> {
    if values.is_empty() {
        return Err(Error::invalid("variant study needs at least one value"));
    }
    values.iter().map(|v| Ok((v.clone(), kind.apply(base, v)?))).collect()
}

fn regime_slug(r: Regime) -> &'static str {
    match r {
        Regime::Setup1Clean => "setup1",
        Regime::Setup2Degraded => "setup2",
        Regime::Setup3Restored => "setup3",
    }
}

fn source_slug(s: FidelitySource) -> &'static str {
    match s {
        FidelitySource::Oracle => "oracle",
        FidelitySource::EstimatorFrozen => "pretrained",
        FidelitySource::EstimatorFinetuned => "end2end",
    }
}

fn percent(acc: f64) -> f64 {
    acc * 100.0
}

pub struct Workspace {
    root: PathBuf,
    pub cfg: ExperimentConfig,
    data: OnceLock<Data>,
    /// Test grid keyed by the restorer checkpoint hash.
    cells: Mutex<Option<(String, Arc<Vec<Cell>>)>>,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, cfg: ExperimentConfig) -> Self {
        Self {
            root: root.into(),
            cfg,
            data: OnceLock::new(),
            cells: Mutex::new(None),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Configured image root, or the generated desk set under the workspace.
    pub fn data_root(&self) -> PathBuf {
        match &self.cfg.data.root {
            Some(r) => r.clone(),
            None => self.root.join("data").join(format!(
                "desk-s{}-n{}-{}",
                self.cfg.seed, self.cfg.data.per_class, self.cfg.data.image_size
            )),
        }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn split_path(&self) -> PathBuf {
        self.root.join("split.tsv")
    }

    pub fn model_path(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.ckpt"))
    }

    pub fn curves_path(&self, name: &str) -> PathBuf {
        self.root.join("curves").join(format!("{name}.csv"))
    }

    pub fn manifest_path(&self, name: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{name}.json"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn classifier_path(&self, regime: Regime) -> PathBuf {
        self.model_path(&format!("classifier_{}", regime_slug(regime)))
    }

    pub fn stats(&self) -> Result<NoiseMixtureStats> {
        fidelity::mixture_stats(&self.cfg.sigmas, self.cfg.calib.restore_halving)
    }

    pub fn eval_prep(&self) -> PreprocessConfig {
        PreprocessConfig {
            mode: PreprocessMode::Eval,
            ..self.cfg.preprocess.clone()
        }
    }

    pub fn write_config(&self) -> Result<()> {
        write_atomic(&self.config_path(), self.cfg.to_toml()?.as_bytes())
    }

    fn require(&self, path: PathBuf, command: impl Into<String>) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact {
                path,
                command: command.into(),
            })
        }
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    fn write_manifest(&self, name: &str, m: &RunManifest) -> Result<String> {
        let p = self.manifest_path(name);
        m.write(&p)?;
        Ok(self.relative(&p))
    }

    /// Generates the desk images when no root is configured, splits them
    /// and writes `split.tsv` plus the effective config.
    pub fn split(&self) -> Result<DatasetSplit> {
        let root = self.data_root();
        if self.cfg.data.root.is_none() && !root.exists() {
            let n = crate::desk::write_dataset(&root, self.cfg.data.per_class, self.cfg.data.image_size, self.cfg.seed)?;
            log::info!("generated {n} desk images under {}", root.display());
        }
        let split = imaging::load_split_with(&root, self.cfg.seed, self.cfg.data.split)?;
        split.write_manifest(&self.split_path())?;
        self.write_config()?;
        let mut m = RunManifest::new("split", self.cfg.seed, serde_json::to_value(&self.cfg.data)?);
        m.outputs.insert("split.tsv".into(), file_hash(&self.split_path())?);
        for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
            m.metrics.insert(kind.as_str().into(), split.samples(kind).len() as f64);
        }
        self.write_manifest("split", &m)?;
        Ok(split)
    }

    pub fn load_split(&self) -> Result<DatasetSplit> {
        let p = self.require(self.split_path(), "fidcal split")?;
        DatasetSplit::read_manifest(&self.data_root(), &p)
    }

    pub fn data(&self) -> Result<&Data> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let split = self.load_split()?;
        let d = Data {
            class_names: split.class_names.clone(),
            train: split.load_all(SplitKind::Train)?,
            val: split.load_all(SplitKind::Val)?,
            test: split.load_all(SplitKind::Test)?,
        };
        if d.class_names.len() != self.cfg.backbone.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, backbone.num_classes is {}",
                d.class_names.len(),
                self.cfg.backbone.num_classes
            )));
        }
        Ok(self.data.get_or_init(|| d))
    }

    fn hashes(&self, names: &[(&str, PathBuf)]) -> Result<BTreeMap<String, String>> {
        names.iter().map(|(k, p)| Ok((k.to_string(), file_hash(p)?))).collect()
    }

    fn network_images(&self, set: &[(ImageTensor, usize)]) -> Result<Vec<ImageTensor>> {
        set.iter()
            .map(|(img, _)| imaging::eval_geometry(img, self.cfg.preprocess.crop_size))
            .collect()
    }

    pub fn train_classifier(&self, regime: Regime) -> Result<ClassifierFit> {
        let data = self.data()?;
        let restorer = match regime {
            Regime::Setup3Restored => Some(self.load_restorer()?),
            _ => None,
        };
        // Every regime starts from the same initialisation.
        let init = Classifier::new(self.cfg.backbone.clone(), self.cfg.seed)?;
        let cd = ClassifierData {
            train: &data.train,
            val: &data.val,
            prep: &self.cfg.preprocess,
            sigmas: &self.cfg.sigmas,
            restorer: restorer.as_ref(),
        };
        let fit = train::fit_classifier(init, &cd, regime, &self.cfg.classifier)?;
        let name = format!("classifier_{}", regime_slug(regime));
        let path = self.classifier_path(regime);
        let hash = fit.classifier.save(&path)?;
        fit.curves.write_csv(&self.curves_path(&name))?;
        let mut m = RunManifest::new(
            "train-classifier",
            self.cfg.seed,
            json!({
                "regime": regime,
                "backbone": self.cfg.backbone,
                "preprocess": self.cfg.preprocess,
                "sigmas": self.cfg.sigmas,
                "train": self.cfg.classifier,
            }),
        );
        let mut inputs = vec![("split.tsv", self.split_path())];
        if restorer.is_some() {
            inputs.push(("restorer", self.model_path("restorer")));
        }
        m.inputs = self.hashes(&inputs)?;
        m.outputs.insert(self.relative(&path), hash);
        m.metrics.insert("best_epoch".into(), fit.best_epoch as f64);
        m.metrics.insert("best_val_accuracy".into(), fit.best_val_accuracy);
        self.write_manifest(&name, &m)?;
        Ok(fit)
    }

    pub fn load_classifier(&self, regime: Regime) -> Result<Classifier> {
        let p = self.require(
            self.classifier_path(regime),
            format!("fidcal train-classifier --regime {}", regime_slug(regime)),
        )?;
        Classifier::load(&p)
    }

    pub fn train_restorer(&self) -> Result<(Denoiser, Curves)> {
        let data = self.data()?;
        let imgs = self.network_images(&data.train)?;
        let t = &self.cfg.restorer;
        let (den, curves) = restore::train_denoiser(&imgs, t.model, &t.patches)?;
        let path = self.model_path("restorer");
        let hash = den.save(&path)?;
        curves.write_csv(&self.curves_path("restorer"))?;
        let mut m = RunManifest::new("train-restorer", self.cfg.seed, serde_json::to_value(t)?);
        m.inputs = self.hashes(&[("split.tsv", self.split_path())])?;
        m.outputs.insert(self.relative(&path), hash);
        if let Some(last) = curves.records.last() {
            m.metrics.insert("final_loss".into(), last.loss);
        }
        self.write_manifest("restorer", &m)?;
        Ok((den, curves))
    }

    pub fn load_restorer(&self) -> Result<Denoiser> {
        Denoiser::load(&self.require(self.model_path("restorer"), "fidcal train-restorer")?)
    }

    pub fn train_estimator(&self) -> Result<(FidelityEstimator, Curves)> {
        let data = self.data()?;
        let restorer = self.load_restorer()?;
        let imgs = self.network_images(&data.train)?;
        let t = &self.cfg.estimator;
        let (est, curves) = fidelity::train_estimator(&imgs, &restorer, t.model, &t.patches)?;
        let path = self.model_path("estimator");
        let hash = est.save(&path)?;
        curves.write_csv(&self.curves_path("estimator"))?;
        let mut m = RunManifest::new("train-estimator", self.cfg.seed, serde_json::to_value(t)?);
        m.inputs = self.hashes(&[("split.tsv", self.split_path()), ("restorer", self.model_path("restorer"))])?;
        m.outputs.insert(self.relative(&path), hash);
        self.write_manifest("estimator", &m)?;
        Ok((est, curves))
    }

    pub fn load_estimator(&self) -> Result<FidelityEstimator> {
        Denoiser::load(&self.require(self.model_path("estimator"), "fidcal train-estimator")?)
    }

    /// The configured calibration with the ensemble switched as requested.
    pub fn standard_plan(&self, source: FidelitySource, ensemble: bool) -> CalibPlan {
        let mut net = self.cfg.calib.net.clone();
        net.modules.ensemble = ensemble;
        CalibPlan { source, net }
    }

    fn calib_command(&self, plan: &CalibPlan) -> String {
        let mut cmd = format!("fidcal train-calib --source {}", source_slug(plan.source));
        if !plan.net.modules.ensemble {
            cmd.push_str(" --no-ensemble");
        }
        cmd
    }

    /// Inputs that determine a calibration run, and their hash.
    fn calib_key(&self, plan: &CalibPlan) -> Result<(Value, String)> {
        let mut inputs = vec![
            (
                "classifier",
                self.require(self.classifier_path(Regime::Setup1Clean), "fidcal train-classifier --regime setup1")?,
            ),
            ("restorer", self.require(self.model_path("restorer"), "fidcal train-restorer")?),
        ];
        if plan.source != FidelitySource::Oracle {
            inputs.push(("estimator", self.require(self.model_path("estimator"), "fidcal train-estimator")?));
        }
        let v = json!({
            "plan": plan,
            "train": self.cfg.calib.train,
            "restore_halving": self.cfg.calib.restore_halving,
            "sigmas": self.cfg.sigmas,
            "preprocess": self.cfg.preprocess,
            "inputs": self.hashes(&inputs)?,
        });
        let key = sha256_hex(&serde_json::to_vec(&v)?)[..16].to_string();
        Ok((v, key))
    }

    /// Loads the calibration trained from identical inputs, or trains it
    /// when `train` is set. Otherwise a missing run names `command`.
    pub fn calib_run(&self, plan: &CalibPlan, train: bool, command: &str) -> Result<CalibRun> {
        let (key_config, key) = self.calib_key(plan)?;
        let stem = format!("{}-{key}", source_slug(plan.source));
        let path = self.root.join("models").join("calib").join(format!("{stem}.ckpt"));
        let est_path = self.root.join("models").join("calib").join(format!("{stem}.estimator.ckpt"));
        let clf = self.load_classifier(Regime::Setup1Clean)?;
        let split = split_backbone(&clf);
        let pretrained = match plan.source {
            FidelitySource::Oracle => None,
            _ => Some(self.load_estimator()?),
        };
        if path.exists() {
            let net = CalibrationNet::load(&path, &split)?;
            let estimator = match plan.source {
                FidelitySource::EstimatorFinetuned => Some(Denoiser::load(&est_path)?),
                _ => pretrained,
            };
            return Ok(CalibRun {
                plan: plan.clone(),
                net,
                split,
                estimator,
                key,
                path,
            });
        }
        if !train {
            return Err(Error::MissingArtifact {
                path,
                command: command.to_string(),
            });
        }
        let data = self.data()?;
        let restorer = self.load_restorer()?;
        let cd = CalibData {
            train: &data.train,
            val: &data.val,
            prep: &self.cfg.preprocess,
            sigmas: &self.cfg.sigmas,
            restorer: &restorer,
            stats: self.stats()?,
        };
        log::info!("training calibration {stem} ({})", plan.net.modules.enabled().join(","));
        let fit = train::fit_calibration(
            &split,
            plan.net.clone(),
            &cd,
            plan.source,
            pretrained.as_ref(),
            &self.cfg.calib.train,
        )?;
        let mut m = RunManifest::new("train-calib", self.cfg.seed, key_config);
        m.outputs.insert(self.relative(&path), fit.net.save(&path)?);
        if let Some(e) = &fit.estimator {
            m.outputs.insert(self.relative(&est_path), e.save(&est_path)?);
        }
        fit.curves.write_csv(&self.curves_path(&format!("calib-{stem}")))?;
        m.metrics.insert("best_epoch".into(), fit.best_epoch as f64);
        m.metrics.insert("best_val_accuracy".into(), fit.best_val_accuracy);
        self.write_manifest(&format!("calib/{stem}"), &m)?;
        let estimator = match plan.source {
            FidelitySource::EstimatorFinetuned => fit.estimator,
            _ => pretrained,
        };
        Ok(CalibRun {
            plan: plan.clone(),
            net: fit.net,
            split,
            estimator,
            key,
            path,
        })
    }

    /// `train-calib`: the configured calibration for one fidelity source.
    pub fn train_calib(&self, source: FidelitySource, ensemble: Option<bool>) -> Result<CalibRun> {
        let plan = self.standard_plan(source, ensemble.unwrap_or(self.cfg.calib.net.modules.ensemble));
        let cmd = self.calib_command(&plan);
        self.calib_run(&plan, true, &cmd)
    }

    pub fn columns() -> Vec<String> {
        Condition::grid().iter().map(ToString::to_string).collect()
    }

    /// The test set under every condition, degraded and restored.
    pub fn test_cells(&self) -> Result<Arc<Vec<Cell>>> {
        let rpath = self.require(self.model_path("restorer"), "fidcal train-restorer")?;
        let hash = file_hash(&rpath)?;
        let mut guard = self.cells.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((h, cells)) = guard.as_ref() {
            if *h == hash {
                return Ok(cells.clone());
            }
        }
        let data = self.data()?;
        let restorer = Denoiser::load(&rpath)?;
        let seed = rng::derive(self.cfg.seed, &[rng::label_key("test-grid")]);
        let cells = Condition::grid()
            .into_iter()
            .map(|c| Cell::build(&data.test, c, self.cfg.preprocess.crop_size, seed, Some(&restorer)))
            .collect::<Result<Vec<_>>>()?;
        let cells = Arc::new(cells);
        *guard = Some((hash, cells.clone()));
        Ok(cells)
    }

    /// Accuracy (%) of a plain classifier per cell.
    pub fn classifier_row(&self, clf: &Classifier, cells: &[Cell], restored: bool) -> Result<Vec<f64>> {
        let prep = self.eval_prep();
        cells
            .iter()
            .map(|c| {
                let inputs = if restored { c.inputs() } else { &c.degraded };
                Ok(percent(train::evaluate_classifier(clf, inputs, &c.labels, &prep)?.accuracy))
            })
            .collect()
    }

    /// Accuracy (%) of a calibrated classifier per cell, on restored inputs.
    pub fn calib_row(&self, run: &CalibRun, cells: &[Cell]) -> Result<Vec<f64>> {
        let prep = self.eval_prep();
        let stats = self.stats()?;
        cells
            .iter()
            .map(|c| {
                let maps = pipeline::fidelity_maps(
                    run.plan.source,
                    c.inputs(),
                    &c.clean,
                    &c.degraded,
                    run.estimator.as_ref(),
                    run.net.cfg.metric,
                    &stats,
                )?;
                let e = train::evaluate_calibration(&run.net, &run.split, c.inputs(), &maps, &c.labels, &prep)?;
                Ok(percent(e.accuracy))
            })
            .collect()
    }

    fn base_inputs(&self) -> Result<BTreeMap<String, String>> {
        self.hashes(&[
            ("split.tsv", self.split_path()),
            ("restorer", self.model_path("restorer")),
            ("classifier_setup1", self.classifier_path(Regime::Setup1Clean)),
        ])
    }

    /// Setups 1–3 with and without restoration, then every proposed variant
    /// with and without the ensemble. Missing optional models become
    /// skipped rows naming the command that builds them.
    pub fn eval_matrix(&self) -> Result<ExperimentReport> {
        self.load_classifier(Regime::Setup1Clean)?;
        let cells = self.test_cells()?;
        let cols = Self::columns();
        let mut report = ExperimentReport::new("Accuracy (%) per test condition", self.cfg.seed, cols.clone());
        report.inputs = self.base_inputs()?;
        for regime in [Regime::Setup1Clean, Regime::Setup2Degraded, Regime::Setup3Restored] {
            let group = match regime {
                Regime::Setup1Clean => "setup1 (clean-trained)",
                Regime::Setup2Degraded => "setup2 (degraded-trained)",
                Regime::Setup3Restored => "setup3 (restored-trained)",
            };
            match self.load_classifier(regime) {
                Ok(clf) => {
                    report.inputs.insert(
                        format!("classifier_{}", regime_slug(regime)),
                        file_hash(&self.classifier_path(regime))?,
                    );
                    report.push(ReportRow::filled(
                        group,
                        "without restoration",
                        self.classifier_row(&clf, &cells, false)?,
                    ))?;
                    report.push(ReportRow::filled(
                        group,
                        "with restoration",
                        self.classifier_row(&clf, &cells, true)?,
                    ))?;
                }
                Err(Error::MissingArtifact { command, .. }) => {
                    for v in ["without restoration", "with restoration"] {
                        report.push(ReportRow::skipped(group, v, cols.len(), format!("skipped: run `{command}`")))?;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        for source in [
            FidelitySource::Oracle,
            FidelitySource::EstimatorFrozen,
            FidelitySource::EstimatorFinetuned,
        ] {
            let group = format!("proposed ({})", source_slug(source));
            for ensemble in [false, true] {
                let variant = if ensemble { "with ensemble" } else { "without ensemble" };
                let plan = self.standard_plan(source, ensemble);
                match self.calib_run(&plan, false, &self.calib_command(&plan)) {
                    Ok(run) => {
                        report.inputs.insert(self.relative(&run.path), file_hash(&run.path)?);
                        report.push(ReportRow::filled(&group, variant, self.calib_row(&run, &cells)?))?;
                    }
                    Err(Error::MissingArtifact { command, .. }) => {
                        report.push(ReportRow::skipped(&group, variant, cols.len(), format!("skipped: run `{command}`")))?;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let mut m = RunManifest::new("eval-matrix", self.cfg.seed, json!({ "columns": cols }));
        m.inputs = report.inputs.clone();
        report.manifests.push(self.write_manifest("eval-matrix", &m)?);
        report.write(&self.reports_dir(), "matrix")?;
        Ok(report)
    }

    fn ablation_base(&self) -> CalibConfig {
        let mut base = self.cfg.calib.net.clone();
        base.modules.ensemble = false;
        base
    }

    /// Oracle calibration without ensemble, then one run per removal group
    /// (every enabled module when `groups` is empty). The last column is the
    /// σ = 0.5 difference to the full model.
    pub fn ablate(&self, groups: &[String]) -> Result<ExperimentReport> {
        let base = self.ablation_base();
        let groups = if groups.is_empty() {
            default_ablation_groups(base.modules)
        } else {
            groups.to_vec()
        };
        let plan = ablation_plan(base.modules, &groups)?;
        let cells = self.test_cells()?;
        let mut cols = Self::columns();
        let worst = cols
            .iter()
            .position(|c| c == "sigma=0.5")
            .ok_or_else(|| Error::invalid("condition grid lacks sigma=0.5"))?;
        cols.push("delta sigma=0.5".into());
        let mut report = ExperimentReport::new("Ablation: oracle calibration without ensemble (%)", self.cfg.seed, cols);
        report.inputs = self.base_inputs()?;
        let mut full = None;
        for (variant, flags, disabled) in plan {
            let net = CalibConfig {
                modules: flags,
                ..base.clone()
            };
            let run = self.calib_run(
                &CalibPlan {
                    source: FidelitySource::Oracle,
                    net,
                },
                true,
                "fidcal ablate",
            )?;
            let mut row = self.calib_row(&run, &cells)?;
            let at = row[worst];
            let reference = *full.get_or_insert(at);
            row.push(at - reference);
            report.inputs.insert(self.relative(&run.path), file_hash(&run.path)?);
            report.push(ReportRow::filled("ablation", &variant, row))?;
            let mut m = RunManifest::new(
                "ablate",
                self.cfg.seed,
                json!({ "variant": variant, "disabled": disabled, "modules": flags, "calib_key": run.key }),
            );
            m.metrics.insert("accuracy_sigma_0.5".into(), at);
            let slug = if disabled.is_empty() {
                "full".to_string()
            } else {
                disabled.join("+")
            };
            report.manifests.push(self.write_manifest(&format!("ablate/{slug}"), &m)?);
        }
        report.write(&self.reports_dir(), "ablation")?;
        Ok(report)
    }

    /// Retrains the oracle calibration without ensemble once per value of
    /// the studied key.
    pub fn variants(&self, kind: StudyKind, values: &[String]) -> Result<ExperimentReport> {
        let values: Vec<String> = if values.is_empty() {
            kind.default_values().iter().map(|s| s.to_string()).collect()
        } else {
            values.to_vec()
        };
        let plan = variant_plan(&self.ablation_base(), kind, &values)?;
        let cells = self.test_cells()?;
        let mut report = ExperimentReport::new(&format!("Study: {} (%)", kind.key()), self.cfg.seed, Self::columns());
        report.inputs = self.base_inputs()?;
        for (value, net) in plan {
            let run = self.calib_run(
                &CalibPlan {
                    source: FidelitySource::Oracle,
                    net: net.clone(),
                },
                true,
                "fidcal variants",
            )?;
            report.inputs.insert(self.relative(&run.path), file_hash(&run.path)?);
            report.push(ReportRow::filled(kind.key(), &value, self.calib_row(&run, &cells)?))?;
            let m = RunManifest::new("variants", self.cfg.seed, json!({ "study": kind, "calib": net }));
            report.manifests.push(self.write_manifest(&format!("variants/{kind}-{value}"), &m)?);
        }
        report.write(&self.reports_dir(), &format!("variants_{kind}"))?;
        Ok(report)
    }

    /// Mean final features of one validation class at every mixture level,
    /// with and without restoration. `class` is a name or an index.
    pub fn activations(&self, class: &str, regime: Regime) -> Result<ActivationReport> {
        let data = self.data()?;
        let class_id = data
            .class_names
            .iter()
            .position(|n| n == class)
            .or_else(|| class.parse::<usize>().ok().filter(|&k| k < data.class_names.len()))
            .ok_or_else(|| Error::Class {
                class: class.into(),
                reason: "unknown class".into(),
            })?;
        let name = data.class_names[class_id].clone();
        let subset: Vec<(ImageTensor, usize)> = data.val.iter().filter(|(_, l)| *l == class_id).cloned().collect();
        if subset.is_empty() {
            return Err(Error::Class {
                class: name,
                reason: "no validation images".into(),
            });
        }
        let clf = self.load_classifier(regime)?;
        let restorer = self.load_restorer()?;
        let split = split_backbone(&clf);
        let seed = rng::derive(self.cfg.seed, &[rng::label_key("activations")]);
        let mut sigmas = self.cfg.sigmas.clone();
        sigmas.sort_by(f64::total_cmp);
        sigmas.dedup();
        let cells = sigmas
            .iter()
            .map(|&s| {
                let c = if s == 0.0 { Condition::Clean } else { Condition::Uniform(s) };
                Cell::build(&subset, c, self.cfg.preprocess.crop_size, seed, Some(&restorer))
            })
            .collect::<Result<Vec<_>>>()?;
        let rep = ActivationReport::build(&split, &cells, class_id, &name, &self.eval_prep())?;
        rep.write(&self.reports_dir(), &format!("activations_{name}"))?;
        Ok(rep)
    }

    /// Every report present under `reports/` plus the reference table, as
    /// one text file.
    pub fn report(&self) -> Result<String> {
        let dir = self.reports_dir();
        let mut out = String::new();
        let mut found = false;
        for stem in ["matrix", "ablation", "variants_metric", "variants_downsampling"] {
            let p = dir.join(format!("{stem}.json"));
            if p.exists() {
                out.push_str(&ExperimentReport::read(&p)?.to_text());
                out.push('\n');
                found = true;
            }
        }
        if !found {
            return Err(Error::MissingArtifact {
                path: dir.join("matrix.json"),
                command: "fidcal eval-matrix".into(),
            });
        }
        let mut summaries: Vec<PathBuf> = match std::fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let n = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    n.starts_with("activations_") && n.ends_with(".json")
                })
                .collect(),
            Err(e) => return Err(Error::io(&dir, e)),
        };
        summaries.sort();
        for p in summaries {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let v: Value = serde_json::from_str(&text)?;
            out.push_str(&format!(
                "activation gap, class {}: {:.4} without restoration, {:.4} with restoration\n",
                v["class_name"].as_str().unwrap_or("?"),
                v["mean_gap_without_restoration"].as_f64().unwrap_or(f64::NAN),
                v["mean_gap_with_restoration"].as_f64().unwrap_or(f64::NAN),
            ));
        }
        out.push('\n');
        out.push_str(&reference_table().to_text());
        write_atomic(&dir.join("summary.txt"), out.as_bytes())?;
        Ok(out)
    }
}

/// Image files under `dir`, recursively, as sorted relative paths.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = entry.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else if p
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| ["png", "jpg", "jpeg"].contains(&e.to_ascii_lowercase().as_str()))
            {
                out.push(p.strip_prefix(base).unwrap_or(&p).to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    if out.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", dir.display())));
    }
    Ok(out)
}

/// Applies `spec` (re-seeded per file index) to every image of `input`;
/// PNGs keep their relative paths under `output`.
pub fn degrade_dir(input: &Path, output: &Path, spec: &DegradationSpec) -> Result<usize> {
    spec.validate()?;
    let files = image_files(input)?;
    for (i, rel) in files.iter().enumerate() {
        let img = ImageTensor::load(&input.join(rel))?;
        let (out, _) = crate::degrade::apply(&img, &spec.for_image(i as u64))?;
        out.save_png(&output.join(rel).with_extension("png"))?;
    }
    Ok(files.len())
}

pub fn restore_dir(model: &Denoiser, input: &Path, output: &Path) -> Result<usize> {
    let files = image_files(input)?;
    for rel in &files {
        let img = ImageTensor::load(&input.join(rel))?;
        restore::denoise(model, &img)?.save_png(&output.join(rel).with_extension("png"))?;
    }
    Ok(files.len())
}

/// Oracle maps of `restored` against same-named files under `clean`.
pub fn oracle_dir(restored: &Path, clean: &Path, output: &Path, metric: FidelityMetric) -> Result<usize> {
    let files = image_files(restored)?;
    for rel in &files {
        let r = ImageTensor::load(&restored.join(rel))?;
        let c = ImageTensor::load(&clean.join(rel))?;
        fidelity::oracle_fidelity(&r, &c, metric)?.save(&output.join(rel).with_extension("fid"))?;
    }
    Ok(files.len())
}

/// Estimated ℓ1 maps of the degraded images under `input`.
pub fn estimate_dir(estimator: &FidelityEstimator, input: &Path, output: &Path) -> Result<usize> {
    let files = image_files(input)?;
    for rel in &files {
        let d = ImageTensor::load(&input.join(rel))?;
        fidelity::estimate_fidelity(estimator, &d)?.save(&output.join(rel).with_extension("fid"))?;
    }
    Ok(files.len())
}
