//! Desk-scale acceptance run. Trains the desk pipeline once, checks every
//! criterion and prints one PASS/FAIL line each; exits non-zero on any FAIL.
//!
//! `FIDCAL_ACCEPTANCE_DIR` keeps the workspace (and reuses trained models)
//! between runs; by default a fresh temporary directory is used.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use fidcal::calibration::{bind_frozen, split_backbone, CalibConfig, CalibrationNet};
use fidcal::config::ExperimentConfig;
use fidcal::degrade::{self, DegradationSpec, MIXTURE_SIGMAS};
use fidcal::expcli::{ExperimentReport, Workspace};
use fidcal::fidelity::{self, FidelityMetric};
use fidcal::imaging::ImageTensor;
use fidcal::nn::{Graph, ParamStore, Tensor};
use fidcal::pipeline::{self, FidelitySource};
use fidcal::restore;
use fidcal::rng;
use fidcal::train::Regime;

const SEED: u64 = 0;

struct Check {
    pass: bool,
    detail: String,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn run(id: usize, name: &str, budget_s: Option<f64>, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let secs = t.elapsed().as_secs_f64();
    let (mut pass, mut detail) = match outcome {
        Ok(c) => (c.pass, c.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    if let Some(b) = budget_s {
        if secs > b {
            pass = false;
            detail.push_str(&format!("; over the {b:.0}s budget"));
        }
    }
    println!(
        "criterion {id} ({name}): {} [{secs:.1}s] {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn std_of(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn criterion_1() -> Check {
    let gray = ImageTensor::filled(3, 256, 256, 0.5);
    let mut notes = Vec::new();
    let mut pass = true;
    for sigma in [0.1, 0.3] {
        let spec = DegradationSpec::awgn(sigma, 7);
        let (noise, _) = degrade::awgn_noise(&spec, 3, 256, 256).unwrap();
        let (_, s) = std_of(noise.iter().copied());
        let (out, _) = degrade::awgn(&gray, &spec).unwrap();
        let composed = out
            .data()
            .iter()
            .zip(&noise)
            .all(|(&o, &n)| o == (0.5f64 + n).clamp(0.0, 1.0) as f32);
        let (_, clipped) = std_of(out.data().iter().map(|&o| f64::from(o) - 0.5));
        let ok = (s / sigma - 1.0).abs() <= 0.02 && composed;
        pass &= ok;
        notes.push(format!(
            "awgn σ={sigma}: noise std {s:.4} (post-clip {clipped:.4}), clip(img+n) exact={composed}"
        ));
    }
    for p in [0.05, 0.2] {
        let out = degrade::salt_pepper(&gray, p, 3).unwrap();
        let frac = out.data().iter().filter(|&&v| v != 0.5).count() as f64 / out.data().len() as f64;
        pass &= (frac - p).abs() <= 0.01;
        notes.push(format!("salt-pepper p={p}: {frac:.4}"));
    }
    let mut worst: f64 = 0.0;
    for s in [0.5, 1.0, 1.5, 2.0, 3.0, 5.0] {
        worst = worst.max((degrade::gaussian_kernel(s).iter().sum::<f64>() - 1.0).abs());
    }
    for len in 1..=21 {
        worst = worst.max((degrade::motion_kernel(len).unwrap().iter().map(|t| t.2).sum::<f64>() - 1.0).abs());
    }
    pass &= worst <= 1e-6;
    notes.push(format!("max |kernel sum − 1| {worst:.1e}"));
    Check::new(pass, notes.join("; "))
}

fn criterion_2(ws: &Workspace) -> Check {
    let plain = fidelity::mixture_stats(&MIXTURE_SIGMAS, false).unwrap();
    let halved = fidelity::mixture_stats(&MIXTURE_SIGMAS, true).unwrap();
    let consts = (plain.sigma_sq - 0.55 / 36.0).abs() < 1e-15 && (halved.sigma_sq - 0.55 / 72.0).abs() < 1e-15;
    // Equal-weight mixture: the test set at every uniform level, restored.
    let cells = ws.test_cells().unwrap();
    let stats = ws.stats().unwrap();
    let mut pooled = Vec::new();
    for cell in cells.iter().take(MIXTURE_SIGMAS.len()) {
        let maps = pipeline::fidelity_maps(
            FidelitySource::Oracle,
            cell.inputs(),
            &cell.clean,
            &cell.degraded,
            None,
            FidelityMetric::L1,
            &stats,
        )
        .unwrap();
        pooled.extend(maps.into_iter().flat_map(|m| m.values.into_iter().map(f64::from)));
    }
    let (mean, std) = std_of(pooled.iter().copied());
    let pass = consts && (-0.15..=0.15).contains(&mean) && (0.8..=1.2).contains(&std);
    Check::new(
        pass,
        format!(
            "σ² {:.6} / {:.6} (0.55/36, 0.55/72 exact={consts}); normalized oracle l1 over {} values: mean {mean:.4}, std {std:.4}",
            plain.sigma_sq,
            halved.sigma_sq,
            pooled.len()
        ),
    )
}

fn criterion_3(ws: &Workspace) -> Check {
    let clf = ws.load_classifier(Regime::Setup1Clean).unwrap();
    let split = split_backbone(&clf);
    let net = CalibrationNet::new(ws.cfg.calib.net.clone(), &split, 5).unwrap();
    let mut r = rng::stream(SEED, &[rng::label_key("identity")]);
    let s = ws.cfg.preprocess.crop_size;
    let mut identical = 0;
    for _ in 0..100 {
        let x = Tensor::from_vec(&[1, 3, s, s], (0..3 * s * s).map(|_| r.sample::<f32, _>(StandardNormal)).collect()).unwrap();
        let f = Tensor::from_vec(&[1, 1, s, s], (0..s * s).map(|_| r.sample::<f32, _>(StandardNormal)).collect()).unwrap();
        let calibrated = net.predict(&split, &x, &f).unwrap();
        let base = clf.predict(&x);
        identical += usize::from(calibrated.data().iter().zip(base.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    // A trained ensemble model with its gate pushed to α → 0.
    let run = ws
        .calib_run(
            &ws.standard_plan(FidelitySource::Oracle, true),
            false,
            "fidcal train-calib --source oracle",
        )
        .unwrap();
    let mut closed = run.net.clone();
    let gi = closed.ensemble_index();
    closed.params.get_mut(gi).data_mut().fill(-1e4);
    let cells = ws.test_cells().unwrap();
    let clean = &cells[0];
    let stats = ws.stats().unwrap();
    let prep = ws.eval_prep();
    let maps = pipeline::fidelity_maps(
        FidelitySource::Oracle,
        &clean.clean,
        &clean.clean,
        &clean.clean,
        None,
        FidelityMetric::L1,
        &stats,
    )
    .unwrap();
    let mut agree = 0;
    for start in (0..clean.len()).step_by(64) {
        let end = (start + 64).min(clean.len());
        let x = pipeline::normalized_batch(&clean.clean[start..end], &prep).unwrap();
        let f = pipeline::map_batch(&maps[start..end]).unwrap();
        let a = closed.predict(&run.split, &x, &f).unwrap();
        let b = clf.predict(&x);
        let k = a.shape()[1];
        for i in 0..end - start {
            let am = argmax(&a.data()[i * k..(i + 1) * k]);
            let bm = argmax(&b.data()[i * k..(i + 1) * k]);
            agree += usize::from(am == bm);
        }
    }
    Check::new(
        identical == 100 && agree == clean.len(),
        format!(
            "{identical}/100 random inputs bit-identical at init; α→0 argmax agreement {agree}/{}",
            clean.len()
        ),
    )
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Block of a calibration parameter: the name up to its module token, e.g.
/// `site2.stage1.prepool.add`, `channel.concat` or `ensemble.gate`.
fn block_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let end = parts
        .iter()
        .position(|p| matches!(*p, "mult" | "add" | "scale" | "concat" | "gate"))
        .map_or(parts.len(), |i| i + 1);
    parts[..end].join(".")
}

fn criterion_4(ws: &Workspace) -> Check {
    let clf = ws.load_classifier(Regime::Setup1Clean).unwrap();
    let split = split_backbone(&clf);
    let cfg = CalibConfig {
        conv_hidden: 4,
        fc_hidden: 16,
        ..ws.cfg.calib.net.clone()
    };
    let net = CalibrationNet::new(cfg, &split, 3).unwrap();
    let mut r = rng::stream(SEED, &[rng::label_key("gradcheck")]);
    let mut store: ParamStore<f64> = net.params.cast();
    for p in store.entries_mut() {
        for v in p.value.data_mut() {
            *v += 0.3 * r.sample::<f64, _>(StandardNormal);
        }
    }
    let backbone: ParamStore<f64> = split.classifier.params.cast();
    let s = ws.cfg.preprocess.crop_size;
    let x = Tensor::<f64>::from_vec(&[2, 3, s, s], (0..6 * s * s).map(|_| r.sample(StandardNormal)).collect()).unwrap();
    let f = Tensor::<f64>::from_vec(&[2, 1, s, s], (0..2 * s * s).map(|_| r.sample(StandardNormal)).collect()).unwrap();
    let targets = [1usize, 6];
    let loss = |store: &ParamStore<f64>, grads: bool| {
        let mut g = Graph::<f64>::new();
        let pb = bind_frozen(&backbone, &mut g);
        let pc = store.bind(&mut g);
        let (xv, fv) = (g.constant(x.clone()), g.constant(f.clone()));
        let out = net.forward(&mut g, &split, &pb, &pc, xv, fv);
        let l = g.smoothed_cross_entropy(out, &targets, 0.1);
        let value = g.value(l).data()[0];
        let gr = if grads {
            g.backward(l);
            store.grads(&g, &pc)
        } else {
            Vec::new()
        };
        (value, gr)
    };
    let (_, analytic) = loss(&store, true);
    // The backbone is piecewise linear; a step much above 1e-6 crosses
    // ReLU and max-pool kinks once the input site is perturbed.
    let h = 1e-6;
    let mut worst: std::collections::BTreeMap<String, f64> = Default::default();
    let mut checked = 0;
    for (pi, p) in net.params.iter().enumerate() {
        for _ in 0..3 {
            let k = r.random_range(0..p.value.len());
            let mut plus = store.clone();
            plus.get_mut(pi).data_mut()[k] += h;
            let mut minus = store.clone();
            minus.get_mut(pi).data_mut()[k] -= h;
            let numeric = (loss(&plus, false).0 - loss(&minus, false).0) / (2.0 * h);
            let a = analytic[pi].data()[k];
            let scale = a.abs().max(numeric.abs());
            let rel = if scale < 1e-9 { 0.0 } else { (a - numeric).abs() / scale };
            checked += 1;
            let e = worst.entry(block_of(&p.name)).or_insert(0.0);
            *e = e.max(rel);
        }
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    let (name, _) = worst.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    Check::new(
        max <= 1e-2,
        format!(
            "{} blocks, {checked} coordinates, step {h:e}, worst relative error {max:.2e} ({name})",
            worst.len()
        ),
    )
}

fn row(m: &ExperimentReport, group: &str, variant: &str) -> Vec<f64> {
    m.row(group, variant)
        .unwrap_or_else(|| panic!("matrix row {group} / {variant} missing"))
        .cells
        .iter()
        .map(|c| c.expect("cell present"))
        .collect()
}

fn fmt_row(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
}

fn criterion_5(m: &ExperimentReport) -> Check {
    let r = row(m, "setup1 (clean-trained)", "without restoration");
    let levels = &r[..6];
    let monotone = levels.windows(2).all(|w| w[1] <= w[0]);
    Check::new(
        monotone && levels[5] < 0.5 * levels[0],
        format!("setup1 without restoration, σ=0..0.5: {}", fmt_row(levels)),
    )
}

fn criterion_6(ws: &Workspace, m: &ExperimentReport) -> Check {
    let cells = ws.test_cells().unwrap();
    let c = &cells[2];
    assert_eq!(c.condition.to_string(), "sigma=0.2");
    let mean_psnr =
        |imgs: &[ImageTensor]| imgs.iter().zip(&c.clean).map(|(a, b)| restore::psnr(a, b).unwrap()).sum::<f64>() / c.len() as f64;
    let (noisy, restored) = (mean_psnr(&c.degraded), mean_psnr(c.inputs()));
    let without = row(m, "setup1 (clean-trained)", "without restoration");
    let with = row(m, "setup1 (clean-trained)", "with restoration");
    let better = (2..6).all(|i| with[i] > without[i]);
    Check::new(
        restored - noisy >= 3.0 && better,
        format!(
            "PSNR σ=0.2 {noisy:.2} → {restored:.2} dB (+{:.2}); σ=0.2..0.5 with {} vs without {}",
            restored - noisy,
            fmt_row(&with[2..6]),
            fmt_row(&without[2..6])
        ),
    )
}

fn criterion_7(m: &ExperimentReport) -> Check {
    let base = row(m, "setup1 (clean-trained)", "with restoration");
    let pretrained = row(m, "setup1 (clean-trained)", "without restoration");
    let ours = row(m, "proposed (oracle)", "without ensemble");
    let gains: Vec<f64> = (3..6).map(|i| ours[i] - base[i]).collect();
    let drop = pretrained[0] - ours[0];
    Check::new(
        gains.iter().all(|&g| g >= 3.0) && drop <= 3.0,
        format!(
            "gain at σ=0.3/0.4/0.5 {} points; clean {:.2} vs pretrained {:.2} (drop {drop:.2})",
            fmt_row(&gains),
            ours[0],
            pretrained[0]
        ),
    )
}

fn criterion_8(m: &ExperimentReport) -> Check {
    let with = row(m, "proposed (oracle)", "with ensemble")[0];
    let without = row(m, "proposed (oracle)", "without ensemble")[0];
    Check::new(
        with >= without,
        format!("clean accuracy with ensemble {with:.2} vs without {without:.2}"),
    )
}

fn criterion_9(ws: &Workspace) -> Check {
    let ab = ws.ablate(&[]).unwrap();
    let col = ab.columns.iter().position(|c| c == "sigma=0.5").unwrap();
    let full = ab.row("ablation", "full").unwrap().cells[col].unwrap();
    let mut notes = vec![format!("full {full:.2}")];
    let mut pass = true;
    for r in ab.rows.iter().filter(|r| r.variant != "full") {
        let v = r.cells[col].unwrap();
        pass &= v <= full;
        if r.variant == "without spatial_add" {
            pass &= full - v > 0.0;
        }
        notes.push(format!("{} {v:.2}", r.variant));
    }
    Check::new(pass, format!("σ=0.5: {}", notes.join(", ")))
}

fn tiny_config() -> ExperimentConfig {
    let sets: Vec<String> = [
        "data.per_class=10",
        "data.split.train_per_class=6",
        "data.split.val_fraction=0.34",
        "classifier.epochs=2",
        "classifier.warmup_epochs=1",
        "restorer.model.depth=3",
        "restorer.model.width=8",
        "restorer.patches.train.epochs=1",
        "restorer.patches.train.warmup_epochs=0",
        "calib.train.epochs=2",
        "calib.train.warmup_epochs=1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    ExperimentConfig::desk(SEED + 11).with_overrides(&sets).unwrap()
}

fn tiny_run(dir: &Path) {
    let ws = Workspace::new(dir, tiny_config());
    ws.split().unwrap();
    ws.train_restorer().unwrap();
    ws.train_classifier(Regime::Setup1Clean).unwrap();
    ws.train_calib(FidelitySource::Oracle, Some(false)).unwrap();
    ws.eval_matrix().unwrap();
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    out.sort();
    out
}

fn criterion_10() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    tiny_run(a.path());
    tiny_run(b.path());
    let mut compared = Vec::new();
    let mut differing = Vec::new();
    let mut targets = vec![PathBuf::from("split.tsv"), PathBuf::from("reports/matrix.json")];
    for f in files_under(&a.path().join("curves")) {
        targets.push(Path::new("curves").join(f.file_name().unwrap()));
    }
    for rel in targets {
        let x = std::fs::read(a.path().join(&rel)).unwrap();
        let y = std::fs::read(b.path().join(&rel)).unwrap_or_default();
        if x != y {
            differing.push(rel.display().to_string());
        }
        compared.push(rel.display().to_string());
    }
    let cells = |d: &Path| ExperimentReport::read(&d.join("reports/matrix.json")).unwrap().rows;
    let same_cells = cells(a.path()) == cells(b.path());
    Check::new(
        differing.is_empty() && same_cells && compared.len() >= 5,
        format!(
            "{} files byte-identical across two runs ({}); differing: {:?}",
            compared.len() - differing.len(),
            compared.join(", "),
            differing
        ),
    )
}

const NAMES: [&str; 10] = [
    "degradation statistics",
    "mixture constants and normalized fidelity",
    "identity at init",
    "gradient checks",
    "monotonic degradation trend",
    "restoration benefit",
    "calibration benefit",
    "ensemble trade-off",
    "ablation direction",
    "reproducibility",
];

type Thunk<'a> = Box<dyn FnOnce() -> Check + 'a>;

fn build(ws: &Workspace) -> ExperimentReport {
    ws.split().unwrap();
    if !ws.model_path("restorer").exists() {
        ws.train_restorer().unwrap();
    }
    if !ws.classifier_path(Regime::Setup1Clean).exists() {
        ws.train_classifier(Regime::Setup1Clean).unwrap();
    }
    for ensemble in [false, true] {
        ws.train_calib(FidelitySource::Oracle, Some(ensemble)).unwrap();
    }
    ws.eval_matrix().unwrap()
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    // `FIDCAL_ACCEPTANCE_ONLY=4,9` runs a subset.
    let only: Option<Vec<usize>> = std::env::var("FIDCAL_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |id: usize| only.as_ref().is_none_or(|v| v.contains(&id));
    let name = |id: usize| NAMES[id - 1];
    let mut all = Vec::new();
    if want(1) {
        all.push(run(1, name(1), Some(60.0), criterion_1));
    }

    let keep = std::env::var_os("FIDCAL_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    let ws = Workspace::new(&root, ExperimentConfig::desk(SEED));
    if (2..=9).any(want) {
        let t = Instant::now();
        let built = catch_unwind(AssertUnwindSafe(|| build(&ws)));
        println!("desk pipeline built in {:.0}s under {}", t.elapsed().as_secs_f64(), root.display());
        match built {
            Ok(matrix) => {
                print!("{}", matrix.to_text());
                let checks: [(usize, Option<f64>, Thunk<'_>); 8] = [
                    (2, Some(300.0), Box::new(|| criterion_2(&ws))),
                    (3, Some(120.0), Box::new(|| criterion_3(&ws))),
                    (4, Some(300.0), Box::new(|| criterion_4(&ws))),
                    (5, None, Box::new(|| criterion_5(&matrix))),
                    (6, None, Box::new(|| criterion_6(&ws, &matrix))),
                    (7, None, Box::new(|| criterion_7(&matrix))),
                    (8, None, Box::new(|| criterion_8(&matrix))),
                    (9, None, Box::new(|| criterion_9(&ws))),
                ];
                for (id, budget, f) in checks {
                    if want(id) {
                        all.push(run(id, name(id), budget, f));
                    }
                }
            }
            Err(_) => {
                for id in (2..=9).filter(|&i| want(i)) {
                    println!("criterion {id} ({}): FAIL desk pipeline did not build", name(id));
                    all.push(false);
                }
            }
        }
        // Not a numbered criterion: the activation gap should shrink after
        // restoration.
        if let Ok(a) = ws.activations("disk", Regime::Setup1Clean) {
            println!(
                "info: class disk mean |clean − σ0.5| activation gap {:.4} without restoration, {:.4} with",
                a.without_restoration.mean_gap(),
                a.with_restoration.mean_gap()
            );
        }
    }
    if want(10) {
        all.push(run(10, name(10), None, criterion_10));
    }

    let passed = all.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", all.len());
    if passed != all.len() {
        std::process::exit(1);
    }
}
