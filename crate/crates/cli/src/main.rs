use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use dlfs::config::RunConfig;
use dlfs::data::{gen_dataset, DataConfig, DatasetManifest, GeomConfig, Split, MANIFEST_NAME};
use dlfs::gradcheck::gradcheck_suite;
use dlfs::train::{evaluate, train, BEST_CHECKPOINT};
use dlfs::viz::{render_correlation, render_keypoints};
use dlfs::{checkpoint, io, Error};

const RUN_CONFIG: &str = "run.cfg";

#[derive(Parser)]
#[command(name = "dlfs", version, about = "Differentiable local feature selection on two-modality scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training pool size; a fifth of it becomes the validation split.
        #[arg(long, default_value_t = 300)]
        train: usize,
        #[arg(long, default_value_t = 120)]
        test: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        distractors: Option<usize>,
    },
    /// Train a model; writes checkpoints, metrics.csv and run.cfg into --out.
    Train {
        /// key=value run configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest, or the directory holding it.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        /// Continue from last.ckpt in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Defaults to run.cfg next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write "index<TAB>label<TAB>prediction" lines here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every component.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Render a correlation map or keypoint overlay for one sample.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        /// RGB and depth tensor files of the sample.
        #[arg(long, num_args = 2, value_names = ["RGB", "D"])]
        sample: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: VizMode,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Local,
    Aux,
    Vi,
    Corr,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VizMode {
    Corr,
    Keypoints,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Config errors are usage errors; everything else is a runtime failure.
fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|e| match e {
        Error::BadConfig(_) | Error::BadHyperparam(_) | Error::DivisibilityViolation { .. } => {
            Failure::Usage(anyhow!("{}: {e}", path.display()))
        }
        e => Failure::Runtime(anyhow!("{}: {e}", path.display())),
    })
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_NAME)
    } else {
        data.to_path_buf()
    }
}

fn config_for_checkpoint(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig, Failure> {
    if let Some(p) = explicit {
        return load_config(p);
    }
    let beside = checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join(RUN_CONFIG);
    if beside.exists() {
        load_config(&beside)
    } else {
        Ok(RunConfig::default())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            out,
            classes,
            seed,
            train,
            test,
            size,
            noise,
            distractors,
        } => {
            let mut geom = GeomConfig {
                size,
                ..Default::default()
            };
            geom.noise = noise.unwrap_or(geom.noise);
            geom.distractors = distractors.unwrap_or(geom.distractors);
            let cfg = DataConfig {
                num_classes: classes,
                train,
                test,
                geom,
            };
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let m = gen_dataset(&cfg, seed, &out).map_err(|e| match e {
                Error::BadConfig(_) => Failure::Usage(e.into()),
                e => Failure::Runtime(e.into()),
            })?;
            println!("{}", out.join(MANIFEST_NAME).display());
            eprintln!(
                "train {} val {} test {}",
                m.count(Split::Train),
                m.count(Split::Val),
                m.count(Split::Test)
            );
        }
        Command::Train {
            config,
            data,
            out,
            ablate,
            resume,
        } => {
            let mut cfg = match &config {
                Some(p) => load_config(p)?,
                None => RunConfig::default(),
            };
            for a in ablate {
                match a {
                    Ablation::Local => cfg.train.use_local = false,
                    Ablation::Aux => cfg.train.use_aux = false,
                    Ablation::Vi => cfg.train.use_vi = false,
                    Ablation::Corr => cfg.train.use_corr = false,
                }
            }
            cfg.train.validate().map_err(|e| Failure::Usage(e.into()))?;
            let manifest = DatasetManifest::load(&manifest_path(&data))?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join(RUN_CONFIG), cfg.to_text()).context("writing run.cfg")?;
            let outcome = train(&cfg.model, &cfg.train, &manifest, Some(&out), resume)?;
            println!(
                "best epoch {} val_mca {:.6}",
                outcome.best_epoch, outcome.best_val_mca
            );
            println!("{}", out.join(BEST_CHECKPOINT).display());
        }
        Command::Eval {
            checkpoint: ck_path,
            data,
            split,
            config,
            predictions,
        } => {
            let cfg = config_for_checkpoint(&ck_path, config.as_deref())?;
            let model = cfg.train.effective_model(&cfg.model);
            let ck = checkpoint::load(&ck_path, &model)?;
            let manifest = DatasetManifest::load(&manifest_path(&data))?;
            let split = Split::from(split);
            let examples = manifest.load_split(split)?;
            let report = evaluate(&ck.params, &model, &examples)?;
            println!("split {} samples {}", split.name(), examples.len());
            println!("mean_class_accuracy {:.6}", report.mean_class_accuracy);
            println!("overall_accuracy {:.6}", report.overall_accuracy);
            for (c, r) in report.per_class_recall.iter().enumerate() {
                match r {
                    Some(r) => println!("recall {c} {r:.6}"),
                    None => println!("recall {c} n/a"),
                }
            }
            if let Some(kp) = report.keypoint_hit_rate {
                println!("keypoint_hit_rate {kp:.6}");
            }
            if let Some(path) = predictions {
                let mut text = String::new();
                for (i, (l, p)) in report.labels.iter().zip(&report.predictions).enumerate() {
                    let _ = writeln!(text, "{i}\t{l}\t{p}");
                }
                fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Gradcheck { seeds } => {
            let report = gradcheck_suite(seeds);
            for r in &report {
                println!("{r}");
            }
            let failed = report.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(Failure::Runtime(anyhow!(
                    "{failed} of {} checks failed",
                    report.len()
                )));
            }
        }
        Command::Viz {
            checkpoint: ck_path,
            sample,
            out,
            mode,
            config,
        } => {
            let cfg = config_for_checkpoint(&ck_path, config.as_deref())?;
            let model = cfg.train.effective_model(&cfg.model);
            let ck = checkpoint::load(&ck_path, &model)?;
            let x_rgb = io::load(&sample[0])?;
            let x_d = io::load(&sample[1])?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = match mode {
                VizMode::Corr => {
                    let img = render_correlation(&ck.params, &model, &x_rgb, &x_d)?;
                    let p = out.join("corr.pgm");
                    img.save(&p)?;
                    p
                }
                VizMode::Keypoints => {
                    let img = render_keypoints(&ck.params, &model, &x_rgb, &x_d, &x_rgb)?;
                    let p = out.join("keypoints.ppm");
                    img.save(&p)?;
                    p
                }
            };
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
