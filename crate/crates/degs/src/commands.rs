//! The work behind each CLI subcommand, callable without going through argv.

use std::path::{Path, PathBuf};
use std::time::Instant;

use degs_core::compositor::{extract_hair_layer, render_portrait};
use degs_core::gradcheck::{self, GradCheckConfig, GradCheckReport};
use degs_core::loss;
use degs_core::synth::{synth_sequence, JawSchedule, SynthConfig};
use degs_core::train::{run_stage, Stage, StageSummary, TrainState};
use degs_core::Image;
use serde_json::{json, Value};

use crate::checkpoint::{ensure_embedding_dim, load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{load_sequence, write_synthetic};
use crate::error::{DegsError, Result};
use crate::fsutil::create_dir_all;
use crate::imageio::{read_png_rgb, write_png8, write_raw_f32};
use crate::metrics::MetricsLog;

pub const CHECKPOINT_FILE: &str = "checkpoint.degs";

pub fn metrics_file(stage: Stage) -> String {
    format!("metrics_{}.csv", stage.name())
}

/// `inf` is not valid JSON; PSNR sentinels are emitted as the string "inf".
pub fn json_number(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v > 0.0 {
        json!("inf")
    } else if v < 0.0 {
        json!("-inf")
    } else {
        json!("nan")
    }
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub out: PathBuf,
    pub config: SynthConfig,
    pub seed: u64,
}

pub fn synth_data(o: &SynthOptions) -> Result<Value> {
    let data = synth_sequence(&o.config, o.seed)?;
    create_dir_all(&o.out)?;
    write_synthetic(&o.out, &data)?;
    let hair: usize = data.sequence.frames().iter().map(|f| f.masks.hair.count()).sum();
    Ok(json!({
        "dataset": o.out.display().to_string(),
        "frames": data.sequence.len(),
        "width": data.sequence.width,
        "height": data.sequence.height,
        "face_splats": data.face.len(),
        "mouth_splats": data.mouth.len(),
        "hair_pixels": hair,
    }))
}

pub fn parse_jaw(s: &str) -> Option<JawSchedule> {
    match s {
        "cycle" => Some(JawSchedule::Cycle),
        "ramp" => Some(JawSchedule::Ramp),
        "still" => Some(JawSchedule::Still),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub stage: Stage,
    pub config: RunConfig,
    pub dataset: PathBuf,
    pub out: PathBuf,
    /// Overrides the configured seed.
    pub seed: Option<u64>,
    /// Overrides the configured iteration count for the stage.
    pub iterations: Option<u64>,
    /// Checkpoint to start from; defaults to `<out>/checkpoint.degs`.
    pub resume: Option<PathBuf>,
    /// Write 0 in the `wall_ms` column so logs are byte-reproducible.
    pub wall_clock: bool,
}

pub struct TrainOutcome {
    pub summary: StageSummary,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub state: TrainState,
}

fn input_state(o: &TrainOptions, seed: u64, sequence: &degs_core::conditioning::Sequence) -> Result<TrainState> {
    let config = o.config.train_config()?;
    let path = o.resume.clone().unwrap_or_else(|| o.out.join(CHECKPOINT_FILE));
    let state = match o.stage {
        Stage::Static if o.resume.is_none() => TrainState::init(&config, sequence, o.config.bounds()?, seed)?,
        stage => {
            if !path.is_file() {
                let need = if stage == Stage::Finetune { "static and motion stages" } else { "static stage" };
                return Err(degs_core::Error::Prerequisite(format!(
                    "the {} stage needs a checkpoint from the {need}, but {} does not exist",
                    stage.name(),
                    path.display()
                ))
                .into());
            }
            load_checkpoint(&path)?
        }
    };
    ensure_embedding_dim(&state, config.embedding_dim)?;
    state.check_prerequisites(o.stage)?;
    Ok(state)
}

pub fn train(o: &TrainOptions) -> Result<TrainOutcome> {
    let config = o.config.train_config()?;
    let seed = o.seed.unwrap_or(o.config.seed);
    let sequence = load_sequence(&o.dataset)?;
    let mut state = input_state(o, seed, &sequence)?;
    create_dir_all(&o.out)?;
    let iterations = o.iterations.unwrap_or_else(|| config.iterations(o.stage));
    let mut log = MetricsLog::new();
    let start = Instant::now();
    let wall = o.wall_clock;
    let summary = run_stage(&mut state, &config, o.stage, &sequence, iterations, None, &mut |r| {
        log.push(r, wall.then(|| start.elapsed().as_millis()));
    })?;
    let checkpoint = o.out.join(CHECKPOINT_FILE);
    let metrics = o.out.join(metrics_file(o.stage));
    log.save(&metrics)?;
    save_checkpoint(&state, &checkpoint)?;
    Ok(TrainOutcome { summary, checkpoint, metrics, state })
}

pub fn train_report(o: &TrainOptions, out: &TrainOutcome) -> Value {
    let s = &out.summary;
    let mean = if s.frame_psnr.is_empty() { f64::NAN } else { s.frame_psnr.iter().sum::<f64>() / s.frame_psnr.len() as f64 };
    json!({
        "stage": o.stage.name(),
        "iterations": s.iterations,
        "final_loss": s.final_loss.total,
        "final_psnr": s.final_psnr.map(json_number),
        "final_ssim": s.final_ssim,
        "mean_frame_psnr": json_number(mean),
        "overlap_energy": s.overlap_energy,
        "splats": out.state.face.cloud.len() + out.state.mouth.cloud.len(),
        "checkpoint": out.checkpoint.display().to_string(),
        "metrics": out.metrics.display().to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HairSource {
    /// The first frame's hair layer for every output frame.
    Reference,
    /// Each frame's own hair layer.
    Frame,
}

#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub dump_layers: bool,
    pub hair: HairSource,
    pub max_frames: Option<usize>,
}

pub fn render(o: &RenderOptions) -> Result<Value> {
    let state = load_checkpoint(&o.checkpoint)?;
    let sequence = load_sequence(&o.dataset)?;
    create_dir_all(&o.out.join("frames"))?;
    let kinds = ["hair", "face_color", "face_opacity", "mouth_color"];
    if o.dump_layers {
        for k in kinds {
            create_dir_all(&o.out.join("layers").join(k))?;
        }
    }
    let reference = sequence.frames().first().ok_or_else(|| DegsError::Config("dataset has no frames".into()))?;
    let reference_hair = extract_hair_layer(&reference.image, &reference.masks.hair)?;
    let n = o.max_frames.map_or(sequence.len(), |m| m.min(sequence.len()));
    let mut psnr = Vec::new();
    let mut overlap = 0.0;
    let mut clamped = 0usize;
    for f in &sequence.frames()[..n] {
        let i = f.conditioning.frame_index;
        let hair = match o.hair {
            HairSource::Reference => reference_hair.clone(),
            HairSource::Frame => extract_hair_layer(&f.image, &f.masks.hair)?,
        };
        let p = render_portrait(
            (&state.face.cloud, &state.face.field),
            (&state.mouth.cloud, &state.mouth.field),
            &f.conditioning,
            &hair,
            false,
        )?;
        write_png8(&o.out.join("frames").join(format!("{i:06}.png")), &p.fused.image)?;
        if o.dump_layers {
            let l = &p.layers;
            for (k, img) in kinds.iter().zip([&l.hair_color, &l.face_color, &l.face_opacity, &l.mouth_color]) {
                let dir = o.out.join("layers").join(k);
                write_png8(&dir.join(format!("{i:06}.png")), img)?;
                write_raw_f32(&dir.join(format!("{i:06}.f32")), img)?;
            }
        }
        psnr.push(loss::psnr(&p.fused.image, &f.image)?);
        overlap += p.fused.diagnostics.overlap_energy;
        clamped += p.fused.diagnostics.clamped_values;
    }
    Ok(json!({
        "frames": n,
        "out": o.out.display().to_string(),
        "psnr": psnr.iter().map(|&v| json_number(v)).collect::<Vec<_>>(),
        "overlap_energy": overlap,
        "clamped_values": clamped,
    }))
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub splats: usize,
    pub width: usize,
    pub height: usize,
    pub threads: usize,
    pub renders: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { splats: 10_000, width: 256, height: 256, threads: 8, renders: 30, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    pub renders_per_sec: f64,
    pub seconds: f64,
    pub renders: usize,
    /// Threads in the pool the renders ran on.
    pub threads: usize,
    /// Hardware threads the machine reports.
    pub available_parallelism: usize,
}

pub fn bench(o: &BenchOptions) -> Result<BenchResult> {
    let r = crate::bench::run(o)?;
    Ok(r)
}

pub fn bench_report(o: &BenchOptions, r: &BenchResult) -> Value {
    json!({
        "splats": o.splats,
        "width": o.width,
        "height": o.height,
        "threads": r.threads,
        "available_parallelism": r.available_parallelism,
        "renders": r.renders,
        "seconds": r.seconds,
        "renders_per_sec": r.renders_per_sec,
    })
}

pub enum EvalInput {
    Images { a: PathBuf, b: PathBuf },
    Checkpoint { checkpoint: PathBuf, dataset: PathBuf },
}

fn pair_metrics(a: &Image, b: &Image) -> Result<(f64, f64)> {
    Ok((loss::psnr(a, b)?, loss::ssim(a, b)?))
}

pub fn eval(input: &EvalInput) -> Result<Value> {
    match input {
        EvalInput::Images { a, b } => {
            let (ia, ib) = (read_png_rgb(a)?, read_png_rgb(b)?);
            let (p, s) = pair_metrics(&ia, &ib)?;
            Ok(json!({ "psnr": json_number(p), "ssim": s }))
        }
        EvalInput::Checkpoint { checkpoint, dataset } => {
            let state = load_checkpoint(checkpoint)?;
            let sequence = load_sequence(dataset)?;
            let mut frames = Vec::new();
            let (mut ps, mut ss) = (Vec::new(), Vec::new());
            for f in sequence.frames() {
                let hair = extract_hair_layer(&f.image, &f.masks.hair)?;
                let p = render_portrait(
                    (&state.face.cloud, &state.face.field),
                    (&state.mouth.cloud, &state.mouth.field),
                    &f.conditioning,
                    &hair,
                    false,
                )?;
                let (psnr, ssim) = pair_metrics(&p.fused.image, &f.image)?;
                frames.push(json!({ "frame": f.conditioning.frame_index, "psnr": json_number(psnr), "ssim": ssim }));
                ps.push(psnr);
                ss.push(ssim);
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            Ok(json!({ "frames": frames, "mean_psnr": json_number(mean(&ps)), "mean_ssim": mean(&ss) }))
        }
    }
}

pub fn gradcheck(seed: u64, config: &GradCheckConfig) -> Result<(GradCheckReport, Value)> {
    let start = Instant::now();
    let report = gradcheck::run(seed, config)?;
    let suites: Vec<Value> = report
        .suites
        .iter()
        .map(|s| {
            json!({
                "name": s.name,
                "checked": s.checked,
                "failures": s.failures,
                "floored": s.floored,
                "max_rel_error": s.max_rel_error,
                "worst": s.worst,
            })
        })
        .collect();
    let v = json!({
        "seed": seed,
        "scenes": report.scenes,
        "splats": config.splats,
        "checked": report.checked(),
        "max_rel_error": report.max_rel_error(),
        "passed": report.passed(),
        "seconds": start.elapsed().as_secs_f64(),
        "suites": suites,
    });
    Ok((report, v))
}

pub fn inspect(path: &Path, text: bool) -> Result<String> {
    let state = load_checkpoint(path)?;
    Ok(if text { crate::checkpoint::to_text(&state) } else { crate::checkpoint::describe(&state) })
}
