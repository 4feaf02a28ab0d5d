use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fidcal::config::{ExperimentConfig, Profile};
use fidcal::degrade::{DegradationKind, DegradationSpec, Variation};
use fidcal::expcli::{self, StudyKind, Workspace};
use fidcal::fidelity::FidelityMetric;
use fidcal::pipeline::FidelitySource;
use fidcal::restore::Denoiser;
use fidcal::train::Regime;
use fidcal::Result;

#[derive(Parser)]
#[command(
    name = "fidcal",
    version,
    about = "Degraded-image classification with fidelity-map feature calibration"
)]
struct Cli {
    /// Global seed; replaces every training seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Preset used when no config file is found.
    #[arg(long, global = true, value_parser = parse_profile)]
    profile: Option<Profile>,
    /// Workspace directory (output directory for degrade, restore and fidelity).
    #[arg(long, global = true, default_value = "fidcal-out")]
    out: PathBuf,
    /// TOML config; defaults to <out>/config.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, `dotted.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate (desk profile) and split the image set.
    Split,
    /// Degrade every image under a directory.
    Degrade {
        #[arg(long, default_value = "awgn")]
        kind: DegradationKind,
        /// Level: σ for awgn and blur, p for salt-pepper, ratio for rect-crop.
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value = "uniform")]
        variation: Variation,
        #[arg(long, default_value_t = fidcal::pipeline::VARYING_HI)]
        hi: f64,
        #[arg(long, default_value_t = fidcal::pipeline::VARYING_LO)]
        lo: f64,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Run a restoration checkpoint over a directory.
    Restore {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Write fidelity maps (.fid) for a directory.
    Fidelity {
        #[arg(long, value_parser = ["oracle", "estimate"])]
        mode: String,
        /// Restored images (oracle) or degraded images (estimate).
        #[arg(long = "in")]
        input: PathBuf,
        /// Clean references with the same relative paths (oracle mode).
        #[arg(long)]
        clean: Option<PathBuf>,
        /// Estimator checkpoint (estimate mode).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "l1")]
        metric: FidelityMetric,
    },
    TrainClassifier {
        #[arg(long, default_value = "setup1")]
        regime: Regime,
    },
    TrainRestorer,
    TrainEstimator,
    TrainCalib {
        /// oracle, pretrained or end2end.
        #[arg(long, default_value = "oracle")]
        source: FidelitySource,
        #[arg(long, conflicts_with = "ensemble")]
        no_ensemble: bool,
        #[arg(long)]
        ensemble: bool,
    },
    /// Accuracy table over every model and test condition.
    EvalMatrix,
    /// Remove one module (or a `+`-joined group) per run.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        modules: Vec<String>,
    },
    /// Fidelity-metric or downsampling study.
    Variants {
        #[arg(long)]
        kind: StudyKind,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Per-neuron mean activations of one validation class.
    Activations {
        #[arg(long)]
        class: String,
        #[arg(long, default_value = "setup1")]
        regime: Regime,
    },
    /// Collect every report with the reference table.
    Report,
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    s.parse().map_err(|e: fidcal::Error| e.to_string())
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let saved = cli.out.join("config.toml");
    let mut cfg = match (&cli.config, cli.profile) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, None) if saved.exists() => ExperimentConfig::load(&saved)?,
        (None, p) => ExperimentConfig::for_profile(p.unwrap_or(Profile::Desk), cli.seed.unwrap_or(0)),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.with_overrides(&cli.overrides)
}

fn done(what: &str, n: usize, out: &Path) {
    println!("{what} {n} images -> {}", out.display());
}

fn run(cli: Cli) -> Result<()> {
    match &cli.verb {
        Verb::Degrade {
            kind,
            sigma,
            variation,
            hi,
            lo,
            input,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let spec = match variation {
                Variation::Uniform => DegradationSpec::new(*kind, *sigma, seed),
                v => DegradationSpec {
                    kind: *kind,
                    ..DegradationSpec::varying(*v, *hi, *lo, seed)
                },
            };
            let n = expcli::degrade_dir(input, &cli.out, &spec)?;
            done("degraded", n, &cli.out);
            return Ok(());
        }
        Verb::Restore { ckpt, input } => {
            let n = expcli::restore_dir(&Denoiser::load(ckpt)?, input, &cli.out)?;
            done("restored", n, &cli.out);
            return Ok(());
        }
        Verb::Fidelity {
            mode,
            input,
            clean,
            ckpt,
            metric,
        } => {
            let n = if mode == "oracle" {
                let clean = clean
                    .as_ref()
                    .ok_or_else(|| fidcal::Error::InvalidArgument("--mode oracle needs --clean DIR".into()))?;
                expcli::oracle_dir(input, clean, &cli.out, *metric)?
            } else {
                let ckpt = ckpt
                    .as_ref()
                    .ok_or_else(|| fidcal::Error::InvalidArgument("--mode estimate needs --ckpt FILE".into()))?;
                expcli::estimate_dir(&Denoiser::load(ckpt)?, input, &cli.out)?
            };
            done("mapped", n, &cli.out);
            return Ok(());
        }
        _ => {}
    }

    let ws = Workspace::new(&cli.out, resolve_config(&cli)?);
    match &cli.verb {
        Verb::Split => {
            let s = ws.split()?;
            println!(
                "{} classes: {} train / {} val / {} test -> {}",
                s.num_classes(),
                s.train.len(),
                s.val.len(),
                s.test.len(),
                ws.split_path().display()
            );
        }
        Verb::TrainClassifier { regime } => {
            let fit = ws.train_classifier(*regime)?;
            println!("{regime}: best epoch {} val accuracy {:.4}", fit.best_epoch, fit.best_val_accuracy);
        }
        Verb::TrainRestorer => {
            let (_, curves) = ws.train_restorer()?;
            println!("restorer: final l1 {:.5}", curves.records.last().map_or(f64::NAN, |r| r.loss));
        }
        Verb::TrainEstimator => {
            let (_, curves) = ws.train_estimator()?;
            println!("estimator: final l1 {:.5}", curves.records.last().map_or(f64::NAN, |r| r.loss));
        }
        Verb::TrainCalib {
            source,
            no_ensemble,
            ensemble,
        } => {
            let flag = match (no_ensemble, ensemble) {
                (true, _) => Some(false),
                (_, true) => Some(true),
                _ => None,
            };
            let run = ws.train_calib(*source, flag)?;
            println!("calibration [{source}] -> {}", run.path.display());
        }
        Verb::EvalMatrix => print!("{}", ws.eval_matrix()?.to_text()),
        Verb::Ablate { modules } => print!("{}", ws.ablate(modules)?.to_text()),
        Verb::Variants { kind, values } => print!("{}", ws.variants(*kind, values)?.to_text()),
        Verb::Activations { class, regime } => {
            let r = ws.activations(class, *regime)?;
            println!(
                "class {} ({} images): mean |clean - most degraded| {:.4} without restoration, {:.4} with",
                r.class_name,
                r.images,
                r.without_restoration.mean_gap(),
                r.with_restoration.mean_gap()
            );
        }
        Verb::Report => print!("{}", ws.report()?),
        Verb::Degrade { .. } | Verb::Restore { .. } | Verb::Fidelity { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
