use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mvmesh::mesh::MeshTemplate;
use mvmesh::synthetic::{default_rig, load_dataset, make_dataset, GenConfig, RenderConfig};
use mvmesh::train::{
    ablate, evaluate, export_obj, gradcheck, holdout_split, AblationAxis, Checkpoint, EvalOptions, GradcheckOptions,
    TrainConfig, Trainer,
};
use mvmesh::{Error, Result};

#[derive(Parser)]
#[command(name = "mvmesh", version, about = "Multi-view human mesh recovery on synthetic data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-view dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        views: usize,
        #[arg(long, default_value_t = 112)]
        image_size: usize,
    },
    /// Train a model; the metrics log goes to stdout as JSON lines.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path, rewritten after every epoch.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints per-sample metrics and their means.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        views: Option<usize>,
        /// Score every view through the rig instead of the master only.
        #[arg(long)]
        all_views: bool,
    },
    /// Train one model per setting along an axis and compare them.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Held-out set; without it the last `holdout` fraction of --data is used.
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Finite-difference audit of the loss terms and the full network.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write predicted and ground-truth meshes of one sample as OBJ.
    ExportObj {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Cmd) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cmd {
        Cmd::GenData {
            n,
            seed,
            out: path,
            views,
            image_size,
        } => {
            let rig = default_rig(views, image_size)?;
            let config = GenConfig {
                render: RenderConfig {
                    height: image_size,
                    width: image_size,
                    ..RenderConfig::default()
                },
                ..GenConfig::default()
            };
            let ds = make_dataset(&path, n, &rig, seed, &MeshTemplate::default(), &config)?;
            writeln!(out, "wrote {} samples x {} views to {}", ds.header.n_samples, ds.header.n_views, path.display())?;
        }
        Cmd::Train {
            config,
            data,
            out: path,
            resume,
        } => {
            let config = TrainConfig::load(&config)?;
            let data = load_dataset(&data)?;
            mvmesh::train::check_dataset(&config, &data)?;
            let mut trainer = match resume {
                Some(p) => {
                    let mut ck = Checkpoint::load(&p)?;
                    // Only the epoch count may change on resume.
                    ck.config.epochs = config.epochs;
                    if ck.config != config {
                        return Err(Error::Config("checkpoint config differs from --config beyond `epochs`".into()));
                    }
                    Trainer::from_checkpoint(ck)?
                }
                None => Trainer::new(config)?,
            };
            // The initial state is saved too, so 0 epochs yields the initialisation.
            trainer.checkpoint().save(&path)?;
            trainer.train(&data.samples, &mut out, &mut |t| t.checkpoint().save(&path))?;
        }
        Cmd::Eval {
            ckpt,
            data,
            views,
            all_views,
        } => {
            let t = Trainer::from_checkpoint(Checkpoint::load(&ckpt)?)?;
            let data = load_dataset(&data)?;
            mvmesh::train::check_dataset(&t.config, &data)?;
            let opts = EvalOptions {
                n_views: views.unwrap_or(t.config.n_views),
                all_views,
            };
            let report = evaluate(&t.model, &t.store, &t.config, &data.samples, opts)?;
            out.write_all(report.to_text().as_bytes())?;
        }
        Cmd::Ablate {
            axis,
            config,
            data,
            test,
        } => {
            let axis: AblationAxis = axis.parse()?;
            let config = TrainConfig::load(&config)?;
            let data = load_dataset(&data)?;
            mvmesh::train::check_dataset(&config, &data)?;
            let test_data = test.map(|p| load_dataset(&p)).transpose()?;
            let (train, held) = match &test_data {
                Some(t) => {
                    mvmesh::train::check_dataset(&config, t)?;
                    (&data.samples[..], &t.samples[..])
                }
                None => holdout_split(&data.samples, config.holdout)?,
            };
            let table = ablate(&config, axis, train, held, &mut |row| {
                eprintln!("finished {}: mpjpe {:.2} mm", row.setting.label, row.report.mean.mpjpe);
            })?;
            out.write_all(table.to_text().as_bytes())?;
        }
        Cmd::Gradcheck { config, points, seed } => {
            let config = TrainConfig::load(&config)?;
            let opts = GradcheckOptions {
                points,
                seed,
                ..GradcheckOptions::default()
            };
            let report = gradcheck(&config, opts)?;
            out.write_all(report.to_text().as_bytes())?;
            if !report.passed() {
                return Err(Error::NonFinite {
                    what: "gradient check (relative error over tolerance)".into(),
                });
            }
        }
        Cmd::ExportObj {
            ckpt,
            data,
            index,
            out: dir,
        } => {
            let t = Trainer::from_checkpoint(Checkpoint::load(&ckpt)?)?;
            let data = load_dataset(&data)?;
            let (pred, gt) = export_obj(&t.model, &t.store, &t.config, &data, index, &dir)?;
            writeln!(out, "{}\n{}", pred.display(), gt.display())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Io(_) | Error::Format(_) => 3,
                _ => 1,
            })
        }
    }
}
