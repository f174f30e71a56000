use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use smoothcorr::config::{Overrides, RunConfig};
use smoothcorr::eval::mean_geodesic_error;
use smoothcorr::features::Checkpoint;
use smoothcorr::losses::Regularizer;
use smoothcorr::matching::PointMap;
use smoothcorr::mesh;
use smoothcorr::pipeline;
use smoothcorr::synth::ShapeCache;
use smoothcorr::{Error, Result};

#[derive(Parser)]
#[command(
    name = "smoothcorr",
    version,
    about = "Learned dense correspondence for deformable shapes"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides paths.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    regularizer: Option<Regularizer>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Meshes,
    Kp2d,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    Synth {
        #[arg(long, value_enum, default_value = "meshes")]
        task: Task,
    },
    /// Cache operators and eigenbases for every manifest mesh.
    Precompute,
    /// Train on the train split; writes checkpoint.scmp and loss.csv.
    Train {
        #[arg(long)]
        resume: bool,
    },
    /// Match two meshes with a trained checkpoint.
    Match {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mesh1: PathBuf,
        #[arg(long)]
        mesh2: PathBuf,
        /// Point-map file (default: <out>/match.map.txt).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a point map, a checkpoint on the test split, or run the λ sweep.
    Eval {
        #[arg(long, requires_all = ["gt", "mesh2"])]
        pointmap: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        mesh2: Option<PathBuf>,
        #[arg(long, conflicts_with = "pointmap")]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["pointmap", "checkpoint"])]
        sweep: bool,
    },
    /// Train and test one model per sweep.lambdas entry.
    Sweep,
    /// Train the keypoint-graph head.
    Kp2dTrain,
    /// Hits@1 of a keypoint checkpoint on the test split.
    Kp2dEval {
        /// Default: <out>/kp2d_checkpoint.scmp.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn print_sweep(rows: &[pipeline::SweepRow]) {
    print!("{}", pipeline::sweep_table(rows));
}

fn run(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        lambda: cli.lambda,
        regularizer: cli.regularizer,
        k: cli.k,
        tau: cli.tau,
    };
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Synth { task: Task::Meshes } => {
            let m = pipeline::synthesize_meshes(&cfg)?;
            println!(
                "wrote {} pairs to {}",
                m.pairs.len(),
                cfg.paths.manifest.display()
            );
        }
        Command::Synth { task: Task::Kp2d } => {
            let m = pipeline::synthesize_graphs(&cfg)?;
            println!(
                "wrote {} graph pairs to {}",
                m.pairs.len(),
                cfg.paths.kp2d_manifest.display()
            );
        }
        Command::Precompute => {
            let s = pipeline::precompute(&cfg)?;
            println!("cache hits {} misses {}", s.hits, s.misses);
        }
        Command::Train { resume } => {
            let a = pipeline::run_training(&cfg, resume)?;
            println!(
                "trained {} epochs: {} {}",
                a.final_checkpoint.epoch,
                a.checkpoint.display(),
                a.loss_csv.display()
            );
        }
        Command::Match {
            checkpoint,
            mesh1,
            mesh2,
            output,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            if cli.config.is_some() && ck.params.architecture() != &cfg.architecture() {
                return Err(Error::Config(format!(
                    "{} was trained with a different architecture than the config",
                    checkpoint.display()
                )));
            }
            let cache = ShapeCache::new(&cfg.paths.cache_dir);
            let pm = pipeline::match_meshes(&ck.params, &mesh1, &mesh2, &cache)?;
            let path = output.unwrap_or_else(|| cfg.paths.out_dir.join("match.map.txt"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.to_path_buf(),
                    source: e,
                })?;
            }
            pm.save(&path)?;
            println!("wrote {} matches to {}", pm.len(), path.display());
        }
        Command::Eval {
            pointmap: Some(pm),
            gt: Some(gt),
            mesh2: Some(m2),
            ..
        } => {
            let report = mean_geodesic_error(
                &PointMap::load(&pm)?,
                &PointMap::load(&gt)?,
                &mesh::load_mesh(&m2)?,
            )?;
            let dir = &cfg.paths.out_dir;
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            report.save(dir, "report")?;
            println!(
                "mean geodesic error {:.6} (x100 {:.4})",
                report.mean, report.mean_x100
            );
        }
        Command::Eval { sweep: true, .. } | Command::Sweep => {
            print_sweep(&pipeline::run_sweep(&cfg)?)
        }
        Command::Eval { checkpoint, .. } => {
            let ck = checkpoint.unwrap_or_else(|| pipeline::checkpoint_path(&cfg));
            let s = pipeline::run_test_evaluation(&cfg, &ck)?;
            println!(
                "test pairs {} mean geodesic error {:.6} (x100 {:.4}) above {}: {:.4}",
                s.pairs.len(),
                s.mean,
                s.mean_x100,
                pipeline::LARGE_ERROR,
                s.fraction_above_large_error
            );
        }
        Command::Kp2dTrain => {
            let p = pipeline::run_kp2d_training(&cfg)?;
            println!("wrote {}", p.display());
        }
        Command::Kp2dEval { checkpoint } => {
            let ck = checkpoint.unwrap_or_else(|| cfg.paths.out_dir.join("kp2d_checkpoint.scmp"));
            let r = pipeline::run_kp2d_evaluation(&cfg, &ck)?;
            println!(
                "Hits@1 {:.4} (random {:.4}) over {} pairs",
                r.mean_hits_at_1,
                r.random_expectation,
                r.hits_at_1.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
