use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use thermoslam::evalsim::{compute_metrics, write_dataset, CircleScenario, Trajectory};
use thermoslam::features::{detect_features, load_features, save_features};
use thermoslam::image::read_gray16;
use thermoslam::pipeline::{run_best_of, with_thread_cap, write_outputs, Alignment, DiskDataset, FrameSource, PipelineConfig, Provider};
use thermoslam::preproc::{Preprocessor, RawThermalFrame};
use thermoslam::{Error, Result};

#[derive(Parser)]
#[command(name = "thermoslam", version, about = "Stereo thermal SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full system on a dataset directory.
    Slam(SlamArgs),
    /// Compare an estimated TUM trajectory against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic dataset.
    Sim(SimArgs),
    /// Precompute feature files for a dataset, or inspect one file.
    Features(FeaturesArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Builtin,
    File,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    None,
    Se3,
    Sim3,
}

impl From<AlignArg> for Alignment {
    fn from(a: AlignArg) -> Self {
        match a {
            AlignArg::None => Alignment::None,
            AlignArg::Se3 => Alignment::Se3,
            AlignArg::Sim3 => Alignment::Sim3,
        }
    }
}

#[derive(Args)]
struct SlamArgs {
    dataset: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Map and close loops on the tracking thread (deterministic).
    #[arg(long)]
    sync: bool,
    #[arg(long)]
    no_loop: bool,
    #[arg(long)]
    no_seg: bool,
    /// Skip photometric alignment; motion model and projection matching only.
    #[arg(long)]
    no_dt: bool,
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    estimate: PathBuf,
    ground_truth: PathBuf,
    #[arg(long, value_enum, default_value = "sim3")]
    align: AlignArg,
    /// Also write the report as key=value lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    /// Scenario TOML; defaults to the 50 m circle.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Dataset directory to process.
    dataset: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print a summary of one feature file instead.
    #[arg(long, conflicts_with = "dataset")]
    inspect: Option<PathBuf>,
    /// Output directory; defaults to `<dataset>/features`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    path.map_or_else(|| Ok(PipelineConfig::default()), PipelineConfig::load)
}

fn slam(a: SlamArgs) -> Result<bool> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.sync |= a.sync;
    cfg.loopclose.enabled &= !a.no_loop;
    cfg.dynfilter.enabled &= !a.no_seg;
    cfg.tracking.dual_level &= !a.no_dt;
    if let Some(p) = a.provider {
        cfg.features.provider = match p {
            ProviderArg::Builtin => Provider::Builtin,
            ProviderArg::File => Provider::File,
        };
    }
    cfg.validate()?;
    let data = DiskDataset::open(&a.dataset)?;
    if cfg.features.provider == Provider::File && !data.has_features() {
        return Err(Error::Config(format!("provider 'file' but {} has no features/ directory", a.dataset.display())));
    }
    let inputs = vec![a.dataset.display().to_string()];
    let (out, cfg) = with_thread_cap(|| run_best_of(&data, &cfg, inputs))?;
    write_outputs(&a.out, &out)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(a.out.join("config.toml"), e))?;
    log::info!("{} frames, {} keyframes, {} loops in {:.1} s", out.manifest.frames, out.manifest.keyframes, out.manifest.loop_closures, out.wall.as_secs_f64());
    if let Some(gt) = data.ground_truth() {
        match compute_metrics(&out.trajectory, &gt, cfg.eval.align.into()) {
            Ok(m) => {
                println!("{m}");
                let p = a.out.join("metrics.txt");
                std::fs::write(&p, m.to_key_values()).map_err(|e| Error::io(&p, e))?;
            }
            Err(e) => log::warn!("no metrics: {e}"),
        }
    }
    if let Some(e) = &out.manifest.error {
        eprintln!("error: {e}");
    }
    Ok(out.manifest.error.is_none())
}

fn eval(a: EvalArgs) -> Result<bool> {
    let est = Trajectory::load(&a.estimate)?;
    let gt = Trajectory::load(&a.ground_truth)?;
    let m = compute_metrics(&est, &gt, Alignment::from(a.align).into())?;
    println!("{m}");
    if let Some(p) = a.out {
        std::fs::write(&p, m.to_key_values()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(true)
}

fn sim(a: SimArgs) -> Result<bool> {
    let sc = match &a.config {
        Some(p) => CircleScenario::load(p)?,
        None => CircleScenario::default(),
    };
    let world = sc.build(a.seed)?;
    with_thread_cap(|| write_dataset(&world, a.seed, &a.out))??;
    println!("wrote {} frames to {}", world.len(), a.out.display());
    Ok(true)
}

fn features(a: FeaturesArgs) -> Result<bool> {
    if let Some(p) = a.inspect {
        let fs = load_features(&p)?;
        let scores: Vec<f32> = fs.keypoints.iter().map(|k| k.score).collect();
        let max = scores.iter().copied().fold(f32::NAN, f32::max);
        println!("timestamp {:.6}", fs.timestamp);
        println!("keypoints {}", fs.len());
        println!("max score {max}");
        for (k, b) in fs.keypoints.iter().zip(&fs.binary).take(5) {
            println!("  ({:.2}, {:.2}) score {:.4} bits {:02x?}…", k.u, k.v, k.score, &b.0[..4]);
        }
        return Ok(true);
    }
    let Some(root) = a.dataset else {
        return Err(Error::Config("features needs a dataset directory or --inspect FILE".into()));
    };
    let cfg = load_config(a.config.as_deref())?;
    let data = DiskDataset::open(&root)?;
    let out = a.out.unwrap_or_else(|| root.join("features"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let dp = cfg.detector_params();
    with_thread_cap(|| {
        data.frames.par_iter().try_for_each(|(t, stem)| -> Result<()> {
            for (side, suffix) in [("left", ""), ("right", ".right")] {
                let grid = read_gray16(&root.join(side).join(format!("{stem}.png")))?;
                let pre = Preprocessor::new(cfg.preproc_params())?.process(&RawThermalFrame::from_grid(*t, grid))?;
                save_features(&out.join(format!("{stem}{suffix}.feat")), &detect_features(&pre, &dp))?;
            }
            Ok(())
        })
    })??;
    println!("wrote features for {} frames to {}", data.len(), out.display());
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Slam(a) => slam(a),
        Command::Eval(a) => eval(a),
        Command::Sim(a) => sim(a),
        Command::Features(a) => features(a),
    };
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
