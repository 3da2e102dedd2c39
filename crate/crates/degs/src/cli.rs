//! Argument parsing and dispatch. Every failure prints one JSON object on
//! stderr: `{"error": <kind>, "message": <text>}`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use degs_core::gradcheck::GradCheckConfig;
use degs_core::synth::SynthConfig;
use degs_core::train::Stage;
use serde_json::json;

use crate::commands::{self, BenchOptions, EvalInput, HairSource, RenderOptions, SynthOptions, TrainOptions};
use crate::config::RunConfig;
use crate::error::DegsError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "degs", version, about = "Deformable Gaussian splatting portraits: synthesize, train, render, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ground truth.
    SynthData(SynthArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Render fused frames from a checkpoint, or benchmark the rasterizer.
    Render(RenderArgs),
    /// PSNR/SSIM between two PNGs, or of a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Print the shape, version and stage fields of a checkpoint.
    InspectCkpt(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum JawArg {
    Cycle,
    Ramp,
    Still,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, value_enum, default_value = "cycle")]
    jaw: JawArg,
    /// Leave the hair mask empty.
    #[arg(long)]
    no_hair: bool,
    #[arg(long, default_value_t = 600)]
    face_splats: usize,
    #[arg(long, default_value_t = 150)]
    mouth_splats: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Static,
    Motion,
    Finetune,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Static => Stage::Static,
            StageArg::Motion => Stage::Motion,
            StageArg::Finetune => Stage::Finetune,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// TOML run configuration; the desk preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory; holds checkpoint.degs and metrics_<stage>.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<u64>,
    /// Checkpoint to continue from (default: <out>/checkpoint.degs).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write 0 in the wall_ms column so identical runs give identical logs.
    #[arg(long)]
    no_wall_clock: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HairArg {
    Reference,
    Frame,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long, required_unless_present = "bench")]
    checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "bench")]
    dataset: Option<PathBuf>,
    #[arg(long, required_unless_present = "bench")]
    out: Option<PathBuf>,
    /// Also write the hair, face color, face opacity and mouth color layers.
    #[arg(long)]
    dump_layers: bool,
    /// Hair layer source: the first frame (inference) or each frame.
    #[arg(long, value_enum, default_value = "reference")]
    hair: HairArg,
    /// Render at most this many frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Measure forward renders per second on a random cloud instead.
    #[arg(long)]
    bench: bool,
    #[arg(long, default_value_t = 10_000)]
    splats: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    threads: usize,
    #[arg(long, default_value_t = 30)]
    renders: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, requires = "b", conflicts_with_all = ["checkpoint", "dataset"])]
    a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    b: Option<PathBuf>,
    #[arg(long, requires = "dataset", required_unless_present = "a")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    splats: usize,
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
}

#[derive(Debug, Args)]
struct InspectArgs {
    path: PathBuf,
    /// Print the full lossless text export instead of the summary.
    #[arg(long)]
    text: bool,
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json")
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32, DegsError> {
    let print = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(|e| DegsError::io("<stdout>", e));
    match cmd {
        Command::SynthData(a) => {
            let config = SynthConfig {
                width: a.width,
                height: a.height,
                frames: a.frames,
                face_splats: a.face_splats,
                mouth_splats: a.mouth_splats,
                jaw: commands::parse_jaw(&format!("{:?}", a.jaw).to_lowercase()).expect("value enum"),
                hair: !a.no_hair,
                ..SynthConfig::default()
            };
            print(out, pretty(&commands::synth_data(&SynthOptions { out: a.out, config, seed: a.seed })?))?;
        }
        Command::Train(a) => {
            let config = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::preset("desk")?,
            };
            let opts = TrainOptions {
                stage: a.stage.into(),
                config,
                dataset: a.dataset,
                out: a.out,
                seed: a.seed,
                iterations: a.iters,
                resume: a.resume,
                wall_clock: !a.no_wall_clock,
            };
            let outcome = commands::train(&opts)?;
            print(out, pretty(&commands::train_report(&opts, &outcome)))?;
        }
        Command::Render(a) if a.bench => {
            let o = BenchOptions { splats: a.splats, width: a.width, height: a.height, threads: a.threads, renders: a.renders, seed: 0 };
            let r = commands::bench(&o)?;
            print(out, pretty(&commands::bench_report(&o, &r)))?;
        }
        Command::Render(a) => {
            let o = RenderOptions {
                checkpoint: a.checkpoint.expect("required"),
                dataset: a.dataset.expect("required"),
                out: a.out.expect("required"),
                dump_layers: a.dump_layers,
                hair: match a.hair {
                    HairArg::Reference => HairSource::Reference,
                    HairArg::Frame => HairSource::Frame,
                },
                max_frames: a.frames,
            };
            print(out, pretty(&commands::render(&o)?))?;
        }
        Command::Eval(a) => {
            let input = match (a.a, a.b, a.checkpoint, a.dataset) {
                (Some(a), Some(b), _, _) => EvalInput::Images { a, b },
                (_, _, Some(checkpoint), Some(dataset)) => EvalInput::Checkpoint { checkpoint, dataset },
                _ => unreachable!("clap enforces one input form"),
            };
            print(out, pretty(&commands::eval(&input)?))?;
        }
        Command::Gradcheck(a) => {
            let config = GradCheckConfig { scenes: a.scenes, splats: a.splats, width: a.width, height: a.height, ..GradCheckConfig::default() };
            let (report, v) = commands::gradcheck(a.seed, &config)?;
            print(out, pretty(&v))?;
            if !report.passed() {
                return Err(DegsError::Config(format!(
                    "gradient check failed: max relative error {:e} over {} entries",
                    report.max_rel_error(),
                    report.checked()
                )));
            }
        }
        Command::InspectCkpt(a) => {
            let s = commands::inspect(&a.path, a.text)?;
            write!(out, "{s}").map_err(|e| DegsError::io("<stdout>", e))?;
        }
    }
    Ok(EXIT_OK)
}

fn error_json(kind: &str, message: &str) -> String {
    json!({ "error": kind, "message": message }).to_string()
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = write!(out, "{}", e.render());
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { EXIT_USAGE } else { EXIT_OK };
            }
            let _ = writeln!(err, "{}", error_json("usage", e.render().to_string().trim_end()));
            return EXIT_USAGE;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "{}", error_json(e.kind(), &e.to_string()));
            EXIT_FAILURE
        }
    }
}
