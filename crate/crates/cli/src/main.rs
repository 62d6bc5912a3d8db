//! `bevshape`: synthesize data, render shape labels, train, evaluate, and run
//! the pilot and ablation studies.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevshape::config::{Profile, RunConfig};
use bevshape::data::{kitti, DatasetDir, Frame};
use bevshape::error::{Error, ErrorKind, Result};
use bevshape::geometry::ScoredBox;
use bevshape::pipeline;
use bevshape::tensor::load_checkpoint;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bevshape", version, about = "BEV shape-heatmap 3D detection toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults to the selected profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "desk")]
    profile: Profile,
    /// Output directory; defaults to the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in the KITTI layout.
    Synth,
    /// Render shape heatmaps for every frame of a dataset.
    Labelgen {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a model and write its checkpoint and loss curve.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or KITTI result files, on the validation frames.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, conflicts_with = "results")]
        ckpt: Option<PathBuf>,
        /// Directory of `NNNNNN.txt` result lines.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Ground-truth heatmap side input versus none, over several seeds.
    Pilot {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Train and evaluate the component lattice (a)-(e).
    Ablation {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::for_profile(c.profile),
    };
    let mut cfg = match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    if let Some(out) = &c.out {
        cfg.paths.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir(cfg: &RunConfig, data: &Option<PathBuf>) -> PathBuf {
    data.clone().unwrap_or_else(|| cfg.paths.data.clone())
}

fn read_results(dir: &Path, frames: &[Frame]) -> Result<Vec<Vec<ScoredBox>>> {
    frames
        .iter()
        .map(|f| {
            let path = dir.join(format!("{:06}.txt", f.id));
            if !path.exists() {
                return Ok(Vec::new());
            }
            kitti::read_records(&path)?
                .into_iter()
                .filter_map(|r| bevshape::data::class_id(&r.class).map(|c| (c, r)))
                .map(|(c, r)| {
                    Ok(ScoredBox {
                        bbox: r.to_box(&f.calib)?,
                        score: r.score.unwrap_or(1.0),
                        class_id: c,
                    })
                })
                .collect()
        })
        .collect()
}

fn print_reports(reports: &[bevshape::eval::EvalReport]) {
    for r in reports {
        println!(
            "Car {:<9} AP_R40 {:7.3}  (gt {}, det {})",
            r.cfg.difficulty.name(),
            r.ap.ap,
            r.ap.num_gt,
            r.ap.num_det
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let out = cfg.paths.out.clone();
    match cli.command {
        Command::Synth => {
            let dir = cli.common.out.clone().unwrap_or_else(|| cfg.paths.data.clone());
            let s = pipeline::synthesize(&cfg, &dir)?;
            println!(
                "{} frames, {} objects, {} points, {} bank entries -> {}",
                s.frames,
                s.objects,
                s.points,
                s.bank_entries,
                dir.display()
            );
        }
        Command::Labelgen { data } => {
            let dir = data_dir(&cfg, &data);
            let r = pipeline::labelgen(&cfg, &dir)?;
            println!(
                "labels written to {}; {} objects labeled from footprints, {} short retrievals",
                dir.join("shape").display(),
                r.empty_objects,
                r.short_retrievals
            );
        }
        Command::Train { data } => {
            let (train, val) = pipeline::load_split(&cfg, &data_dir(&cfg, &data))?;
            let o = pipeline::train_and_eval(&cfg, &train, &val, Some(&out))?;
            if let Some(last) = o.trained.losses.last() {
                println!("step {} loss {:.6}", last.step, last.total);
            }
            print_reports(&o.reports);
            println!("outputs in {}", out.display());
        }
        Command::Eval { data, ckpt, results } => {
            let (_, val) = pipeline::load_split(&cfg, &data_dir(&cfg, &data))?;
            let dets = match (ckpt, results) {
                (Some(ckpt), None) => {
                    let (model, mut store) = pipeline::build_model(&cfg)?;
                    load_checkpoint(&ckpt, &mut store)?;
                    pipeline::predict(&model, &store, &pipeline::samples(&cfg, &val))?
                }
                (None, Some(dir)) => read_results(&dir, &val.frames)?,
                _ => return Err(Error::Config("eval needs exactly one of --ckpt or --results".into())),
            };
            let frames = pipeline::eval_frames(&cfg, &val.frames, &dets);
            let reports = pipeline::evaluate_car(&cfg, &frames)?;
            pipeline::write_resolved_config(&cfg, &out)?;
            pipeline::write_eval_outputs(&out, &reports, &val.frames, &dets)?;
            print_reports(&reports);
        }
        Command::Pilot { data, seeds } => {
            let (train, val) = load_or_synth(&cfg, &data)?;
            let rows = pipeline::pilot(&cfg, &seeds, &train, &val, Some(&out))?;
            for r in &rows {
                println!(
                    "seed {:>3}: with GT heatmap {:7.3}  without {:7.3}  delta {:+7.3}",
                    r.seed,
                    r.ap_with,
                    r.ap_without,
                    r.delta()
                );
            }
        }
        Command::Ablation { data } => {
            let (train, val) = load_or_synth(&cfg, &data)?;
            let mut csv = String::from("row,ap_easy,ap_moderate,ap_hard\n");
            for (name, c) in pipeline::ablation_configs(&cfg) {
                let dir = pipeline::run_dir(&out, name);
                let o = pipeline::train_and_eval(&c, &train, &val, Some(&dir))?;
                let ap: Vec<String> = o.reports.iter().map(|r| format!("{:.4}", r.ap.ap)).collect();
                println!("({name}) AP_R40 easy/moderate/hard {}", ap.join(" / "));
                csv.push_str(&format!("{name},{}\n", ap.join(",")));
            }
            bevshape::eval::write_text(&out.join("ablation.csv"), &csv)?;
        }
    }
    Ok(())
}

/// Reads the dataset when `--data` (or the configured path) exists; otherwise
/// generates the synthetic split in memory.
fn load_or_synth(cfg: &RunConfig, data: &Option<PathBuf>) -> Result<(pipeline::Dataset, pipeline::Dataset)> {
    let dir = data_dir(cfg, data);
    if DatasetDir::new(&dir).frame_ids().is_ok() {
        pipeline::load_split(cfg, &dir)
    } else if data.is_some() {
        Err(Error::Format {
            path: dir,
            message: "no dataset found".into(),
        })
    } else {
        pipeline::synth_split(cfg)
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("BSH_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("BSH_THREADS={v:?} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
