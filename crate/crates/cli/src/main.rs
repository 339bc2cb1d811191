use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stereoslam_core::eval::MetricsReport;
use stereoslam_core::io::{load_kitti_sequence, read_trajectory, write_trajectory};
use stereoslam_core::pipeline::{accuracy_metrics, run_pipeline, write_outputs, PipelineError};
use stereoslam_core::synth::{generate_scene, write_dataset, SceneSpec};
use stereoslam_core::SlamConfig;

const USAGE: u8 = 1;
const LOAD: u8 = 2;
const HALT: u8 = 3;

#[derive(Parser)]
#[command(name = "stereoslam", version, about = "Stereo visual SLAM on rectified image sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track and map a KITTI-layout stereo sequence.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        sequence: String,
        /// key = value configuration file; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_relocalization: bool,
        /// Override one configuration key, e.g. `--set tracker.iterations=15`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare an estimated trajectory file with ground truth.
    Eval {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Render a synthetic sequence described by a scene file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "00")]
        sequence: String,
    },
    /// Print every configuration key with its default value.
    Config,
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

fn load_config(path: Option<&Path>, overrides: &[String], no_relocalization: bool) -> Result<SlamConfig, Failure> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| fail(LOAD, format!("{}: {e}", p.display())))?;
            SlamConfig::from_text(&text).map_err(|e| fail(LOAD, format!("{}: {e}", p.display())))?
        }
        None => SlamConfig::default(),
    };
    cfg.apply_overrides(overrides.iter().map(String::as_str)).map_err(|e| fail(USAGE, e.to_string()))?;
    if no_relocalization {
        cfg.relocalization = false;
    }
    cfg.validate().map_err(|e| fail(USAGE, e.to_string()))?;
    Ok(cfg)
}

fn run(
    dataset: &Path,
    sequence: &str,
    config: Option<&Path>,
    out: &Path,
    no_relocalization: bool,
    overrides: &[String],
) -> Result<(), Failure> {
    let cfg = load_config(config, overrides, no_relocalization)?;
    let manifest = load_kitti_sequence(dataset, sequence).map_err(|e| fail(LOAD, e.to_string()))?;
    let output_err = |e: std::io::Error| fail(LOAD, format!("writing to {}: {e}", out.display()));
    match run_pipeline(&manifest, &cfg) {
        Ok(output) => {
            write_outputs(&output, manifest.ground_truth.as_deref(), out).map_err(output_err)?;
            print!("{}", output.report.to_table());
            Ok(())
        }
        Err(PipelineError::Halted { source, trajectory }) => {
            std::fs::create_dir_all(out).map_err(output_err)?;
            write_trajectory(&trajectory, &out.join("trajectory.txt")).map_err(output_err)?;
            Err(fail(HALT, format!("{source}; partial trajectory of {} frames written", trajectory.len())))
        }
        Err(PipelineError::Load(e)) => Err(fail(LOAD, e.to_string())),
        Err(PipelineError::Output(e)) => Err(output_err(e)),
    }
}

fn eval(estimate: &Path, truth: &Path) -> Result<(), Failure> {
    let est = read_trajectory(estimate).map_err(|e| fail(LOAD, e.to_string()))?;
    let gt = read_trajectory(truth).map_err(|e| fail(LOAD, e.to_string()))?;
    if est.len() != gt.len() {
        return Err(fail(LOAD, format!("estimate has {} poses, ground truth {}", est.len(), gt.len())));
    }
    let mut report = MetricsReport::default();
    accuracy_metrics(&est, &gt, &mut report);
    println!("poses              {}", est.len());
    print!("{}", report.accuracy_table());
    Ok(())
}

fn synth(spec: &Path, out: &Path, sequence: &str) -> Result<(), Failure> {
    let text = std::fs::read_to_string(spec).map_err(|e| fail(LOAD, format!("{}: {e}", spec.display())))?;
    let spec = SceneSpec::from_text(&text).map_err(|e| fail(LOAD, e))?;
    let scene = generate_scene(&spec);
    write_dataset(&scene, &spec, out, sequence).map_err(|e| fail(LOAD, format!("writing to {}: {e}", out.display())))?;
    println!("wrote {} frames to {}", scene.poses.len(), out.join("sequences").join(sequence).display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(USAGE);
        }
        // --help and --version
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let result = match &cli.command {
        Command::Run { dataset, sequence, config, out, no_relocalization, overrides } => {
            run(dataset, sequence, config.as_deref(), out, *no_relocalization, overrides)
        }
        Command::Eval { estimate, truth } => eval(estimate, truth),
        Command::Synth { spec, out, sequence } => synth(spec, out, sequence),
        Command::Config => {
            print!("{}", SlamConfig::default().to_text());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
