//! The three training stages.
//!
//! * static: canonical face and mouth clouds fit the frames masked by the
//!   dilated face / mouth masks, no deformation.
//! * motion: each branch's field and cloud fit the same targets through the
//!   deformation, with the jaw-region term added.
//! * finetune: only color features move, driven by the fused portrait
//!   against the full frame.
//!
//! Frame `iteration % frames` is used at each step. Every step is a fixed
//! sequence of deterministic phases, so identical inputs give bit-identical
//! trajectories.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::compositor::{dilate_mask, extract_hair_layer, fuse_backward, render_portrait, DEFAULT_DILATION_RADIUS};
use crate::conditioning::{FrameRecord, Sequence};
use crate::densify::{densify_and_prune, DensifyConfig, DensifyStats};
use crate::error::{Error, Result};
use crate::field::{DeformationField, FieldConfig, FieldLayout};
use crate::image::{Image, Mask};
use crate::loss::{self, LossBreakdown, LossWeights, PerceptualLoss};
use crate::optim::{CloudLearningRates, CloudOptimizer, FieldOptimizer, TrainableGroups};
use crate::render::{render, render_backward};
use crate::rng::{stream_rng, Stream};
use crate::scene::{init_random_cloud, Bounds, Branch, ColorModel, PrimitiveCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Static,
    Motion,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Static, Stage::Motion, Stage::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Static => "static",
            Stage::Motion => "motion",
            Stage::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Per-branch splat cap of the desk preset; densification at 64x64 is
/// aggressive and the cost of every stage grows linearly with the count.
pub const DESK_MAX_SPLATS: usize = 2_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub rates: CloudLearningRates,
    pub field_lr: f64,
    pub field_weight_decay: f64,
    pub field: FieldConfig,
    pub densify: DensifyConfig,
    /// Densification runs in the static stage only when set.
    pub densify_static: bool,
    pub dilation_radius: usize,
    pub face_splats: usize,
    pub mouth_splats: usize,
    pub embedding_dim: usize,
    pub color_model: ColorModel,
    /// PSNR/SSIM are evaluated every this many iterations and on the last.
    pub metrics_interval: u64,
    pub static_iterations: u64,
    pub motion_iterations: u64,
    pub finetune_iterations: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            rates: CloudLearningRates::default(),
            field_lr: FieldOptimizer::DEFAULT_LR,
            field_weight_decay: FieldOptimizer::DEFAULT_WEIGHT_DECAY,
            field: FieldConfig::default(),
            densify: DensifyConfig { max_splats: DESK_MAX_SPLATS, ..DensifyConfig::default() },
            densify_static: true,
            dilation_radius: DEFAULT_DILATION_RADIUS,
            face_splats: 500,
            mouth_splats: 150,
            embedding_dim: 32,
            color_model: ColorModel::Rgb,
            metrics_interval: 100,
            static_iterations: 2_000,
            motion_iterations: 5_000,
            finetune_iterations: 1_000,
        }
    }
}

impl TrainConfig {
    /// Iteration counts at full scale.
    pub fn full_preset() -> Self {
        TrainConfig {
            densify: DensifyConfig::default(),
            static_iterations: 3_000,
            motion_iterations: 50_000,
            finetune_iterations: 10_000,
            ..Self::default()
        }
    }

    pub fn iterations(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Static => self.static_iterations,
            Stage::Motion => self.motion_iterations,
            Stage::Finetune => self.finetune_iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.field.encoder.validate()?;
        if self.face_splats == 0 || self.mouth_splats == 0 {
            return Err(Error::Config("initial splat counts must be positive".into()));
        }
        Ok(())
    }
}

/// Everything one branch learns plus its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchState {
    pub cloud: PrimitiveCloud,
    pub field: DeformationField,
    pub cloud_opt: CloudOptimizer,
    pub field_opt: FieldOptimizer,
}

impl BranchState {
    pub fn new(cloud: PrimitiveCloud, field: DeformationField, config: &TrainConfig) -> Self {
        let cloud_opt = CloudOptimizer::new(&cloud, config.rates);
        let field_opt = FieldOptimizer::new(&field, config.field_lr, config.field_weight_decay);
        BranchState { cloud, field, cloud_opt, field_opt }
    }

    pub fn branch(&self) -> Branch {
        self.cloud.branch
    }

    /// One canonical (undeformed) step towards `target`.
    pub fn static_step(
        &mut self,
        frame: &FrameRecord,
        target: &Image,
        weights: &LossWeights,
        iteration: u64,
        total: u64,
        stats: Option<&mut DensifyStats>,
    ) -> Result<StepResult> {
        let out = render(&self.cloud, &frame.conditioning.camera, [0.0; 3])?;
        let (parts, grad) = loss::static_loss(&out.color, target, weights)?;
        let g = render_backward(&self.cloud, &out, &grad, None)?;
        if let Some(s) = stats {
            s.accumulate(&g);
        }
        self.cloud_opt.step(&mut self.cloud, &g, TrainableGroups::NO_EMBEDDING, iteration, total)?;
        Ok(StepResult { loss: parts, render: out.color })
    }

    /// One deformed step: field and cloud both move.
    pub fn motion_step(
        &mut self,
        frame: &FrameRecord,
        target: &Image,
        jaw: &Mask,
        weights: &LossWeights,
        iteration: u64,
        total: u64,
    ) -> Result<StepResult> {
        let cond = &frame.conditioning;
        let deformed = self.field.deform_cloud(&self.cloud, &cond.audio, &cond.expression_features())?;
        let out = render(&deformed.cloud, &cond.camera, [0.0; 3])?;
        let (parts, grad) = loss::motion_loss(&out.color, target, jaw, weights)?;
        let gd = render_backward(&deformed.cloud, &out, &grad, None)?;
        let (gc, gf) = self.field.backward_cloud(&self.cloud, &deformed, &gd)?;
        self.cloud_opt.step(&mut self.cloud, &gc, TrainableGroups::ALL, iteration, total)?;
        self.field_opt.step(&mut self.field, &gf)?;
        Ok(StepResult { loss: parts, render: out.color })
    }

    fn densify(&mut self, stats: &DensifyStats, config: &DensifyConfig, seed: u64, iteration: u64) -> Result<()> {
        let mut rng = stream_rng(seed ^ (iteration << 1) ^ self.branch().as_u8() as u64, Stream::Densify);
        let (cloud, remap) = densify_and_prune(&self.cloud, stats, config, &mut rng)?;
        self.cloud_opt.remap(&remap, cloud.color_dim(), cloud.embedding_dim);
        self.cloud = cloud;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub loss: LossBreakdown,
    pub render: Image,
}

/// Complete trainer state; what a checkpoint stores.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub face: BranchState,
    pub mouth: BranchState,
    /// Bit set of completed stages, see [`Stage::bit`].
    pub completed: u8,
    pub seed: u64,
}

impl TrainState {
    pub fn init(config: &TrainConfig, sequence: &Sequence, bounds: Bounds, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = FieldLayout {
            embedding_dim: config.embedding_dim,
            audio_dim: sequence.layout.audio,
            expression_dim: sequence.layout.expression_features(),
        };
        let branch = |b: Branch, n: usize, cloud_stream: Stream, field_stream: Stream| -> Result<BranchState> {
            let cloud = init_random_cloud(n, bounds, b, config.embedding_dim, config.color_model, &mut stream_rng(seed, cloud_stream))?;
            let field = DeformationField::new(layout, &config.field, bounds, &mut stream_rng(seed, field_stream))?;
            Ok(BranchState::new(cloud, field, config))
        };
        Ok(TrainState {
            face: branch(Branch::Face, config.face_splats, Stream::FaceCloud, Stream::FaceField)?,
            mouth: branch(Branch::Mouth, config.mouth_splats, Stream::MouthCloud, Stream::MouthField)?,
            completed: 0,
            seed,
        })
    }

    pub fn has_completed(&self, stage: Stage) -> bool {
        self.completed & stage.bit() != 0
    }

    pub fn check_prerequisites(&self, stage: Stage) -> Result<()> {
        let need: &[Stage] = match stage {
            Stage::Static => &[],
            Stage::Motion => &[Stage::Static],
            Stage::Finetune => &[Stage::Static, Stage::Motion],
        };
        for s in need {
            if !self.has_completed(*s) {
                return Err(Error::Prerequisite(format!(
                    "the {} stage needs a checkpoint that completed the {} stage",
                    stage.name(),
                    s.name()
                )));
            }
        }
        Ok(())
    }

    pub fn branch_mut(&mut self, b: Branch) -> &mut BranchState {
        match b {
            Branch::Face => &mut self.face,
            Branch::Mouth => &mut self.mouth,
        }
    }
}

/// One logged iteration. Loss terms are summed over the branches trained at
/// that step; PSNR/SSIM are averaged over them.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub stage: Stage,
    pub iteration: u64,
    pub loss: LossBreakdown,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub splat_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageSummary {
    pub iterations: u64,
    pub final_loss: LossBreakdown,
    pub final_psnr: Option<f64>,
    pub final_ssim: Option<f64>,
    /// Per-frame PSNR of the final parameters (branch mean for static and
    /// motion, fused image for finetune).
    pub frame_psnr: Vec<f64>,
    pub overlap_energy: f64,
}

/// Per-branch training target: the frame restricted to the dilated region.
pub fn branch_target(frame: &FrameRecord, branch: Branch, radius: usize) -> Result<(Image, Mask)> {
    let region = match branch {
        Branch::Face => &frame.masks.face,
        Branch::Mouth => &frame.masks.mouth,
    };
    let mask = dilate_mask(region, radius);
    Ok((frame.image.masked(&mask)?, mask))
}

fn add_parts(a: &mut LossBreakdown, b: &LossBreakdown) {
    a.total += b.total;
    a.l1 += b.l1;
    a.dssim += b.dssim;
    a.jaw += b.jaw;
    a.perceptual += b.perceptual;
}

fn quality(render: &Image, target: &Image) -> Result<(f64, f64)> {
    Ok((loss::psnr(render, target)?, loss::ssim(render, target)?))
}

/// Mean of finite PSNR values; infinite ones count as `cap`.
fn mean_capped(v: &[f64], cap: f64) -> f64 {
    v.iter().map(|x| x.min(cap)).sum::<f64>() / v.len() as f64
}

/// PSNR is capped at this value when averaging.
pub const PSNR_CAP: f64 = 100.0;

/// Runs `iterations` steps of `stage`, calling `observer` after each.
pub fn run_stage(
    state: &mut TrainState,
    config: &TrainConfig,
    stage: Stage,
    sequence: &Sequence,
    iterations: u64,
    perceptual: Option<&dyn PerceptualLoss>,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<StageSummary> {
    state.check_prerequisites(stage)?;
    config.validate()?;
    let n = sequence.len() as u64;
    if n == 0 {
        return Err(Error::InvalidSequence(alloc::vec![String::from("sequence has no frames")]));
    }
    let r = config.dilation_radius;
    let mut targets = Vec::with_capacity(sequence.len());
    for f in sequence.frames() {
        targets.push([branch_target(f, Branch::Face, r)?.0, branch_target(f, Branch::Mouth, r)?.0]);
    }
    let hair: Vec<Image> = sequence
        .frames()
        .iter()
        .map(|f| extract_hair_layer(&f.image, &f.masks.hair))
        .collect::<Result<_>>()?;

    let mut summary = StageSummary { iterations, ..Default::default() };
    let mut stats = [DensifyStats::new(state.face.cloud.len()), DensifyStats::new(state.mouth.cloud.len())];
    for it in 0..iterations {
        let idx = (it % n) as usize;
        let frame = &sequence.frames()[idx];
        let step = it + 1;
        let log_metrics = config.metrics_interval > 0 && (step % config.metrics_interval == 0) || step == iterations;
        let mut parts = LossBreakdown::default();
        let mut psnr = Vec::new();
        let mut ssim = Vec::new();
        match stage {
            Stage::Static | Stage::Motion => {
                let seed = state.seed;
                for (b, branch) in [Branch::Face, Branch::Mouth].into_iter().enumerate() {
                    let target = &targets[idx][b];
                    let st = state.branch_mut(branch);
                    let res = if stage == Stage::Static {
                        let s = config.densify_static.then_some(&mut stats[b]);
                        st.static_step(frame, target, &config.weights, it, iterations, s)?
                    } else {
                        st.motion_step(frame, target, &frame.masks.jaw, &config.weights, it, iterations)?
                    };
                    add_parts(&mut parts, &res.loss);
                    if log_metrics {
                        let (p, s) = quality(&res.render, target)?;
                        psnr.push(p);
                        ssim.push(s);
                    }
                    if stage == Stage::Static && config.densify_static && config.densify.is_due(step) && step < iterations {
                        st.densify(&stats[b], &config.densify, seed, step)?;
                        stats[b] = DensifyStats::new(st.cloud.len());
                    }
                }
            }
            Stage::Finetune => {
                let res = finetune_step(state, frame, &hair[idx], &config.weights, perceptual, it, iterations)?;
                parts = res.loss;
                summary.overlap_energy = res.overlap_energy;
                if log_metrics {
                    let (p, s) = quality(&res.render, &frame.image)?;
                    psnr.push(p);
                    ssim.push(s);
                }
            }
        }
        let record = IterationRecord {
            stage,
            iteration: step,
            loss: parts,
            psnr: (!psnr.is_empty()).then(|| mean_capped(&psnr, PSNR_CAP)),
            ssim: (!ssim.is_empty()).then(|| ssim.iter().sum::<f64>() / ssim.len() as f64),
            splat_count: state.face.cloud.len() + state.mouth.cloud.len(),
        };
        observer(&record);
        summary.final_loss = parts;
        if record.psnr.is_some() {
            summary.final_psnr = record.psnr;
            summary.final_ssim = record.ssim;
        }
    }
    summary.frame_psnr = evaluate_frames(state, stage, sequence, &targets, &hair)?;
    state.completed |= stage.bit();
    Ok(summary)
}

struct FinetuneResult {
    loss: LossBreakdown,
    render: Image,
    overlap_energy: f64,
}

fn finetune_step(
    state: &mut TrainState,
    frame: &FrameRecord,
    hair: &Image,
    weights: &LossWeights,
    perceptual: Option<&dyn PerceptualLoss>,
    iteration: u64,
    total: u64,
) -> Result<FinetuneResult> {
    let portrait = render_portrait(
        (&state.face.cloud, &state.face.field),
        (&state.mouth.cloud, &state.mouth.field),
        &frame.conditioning,
        hair,
        true,
    )?;
    let (parts, grad) = loss::finetune_loss(&portrait.fused.image, &frame.image, weights, perceptual)?;
    let lg = fuse_backward(&portrait.layers, &portrait.fused, &grad)?;
    let face_g = render_backward(&portrait.face.deformed.cloud, &portrait.face.output, &lg.face_color, Some(&lg.face_opacity))?;
    let mouth_g = render_backward(&portrait.mouth.deformed.cloud, &portrait.mouth.output, &lg.mouth_color, None)?;
    // Color features pass through the deformation unchanged, so the deformed
    // cloud's color gradient is the canonical one.
    for (st, mut g) in [(&mut state.face, face_g), (&mut state.mouth, mouth_g)] {
        g.retain_color_only();
        st.cloud_opt.step(&mut st.cloud, &g, TrainableGroups::COLOR_ONLY, iteration, total)?;
    }
    Ok(FinetuneResult { loss: parts, render: portrait.fused.image, overlap_energy: portrait.fused.diagnostics.overlap_energy })
}

fn evaluate_frames(
    state: &TrainState,
    stage: Stage,
    sequence: &Sequence,
    targets: &[[Image; 2]],
    hair: &[Image],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(sequence.len());
    for (i, frame) in sequence.frames().iter().enumerate() {
        let cond = &frame.conditioning;
        let p = match stage {
            Stage::Static => {
                let f = crate::render::render_with(&state.face.cloud, &cond.camera, [0.0; 3], false)?;
                let m = crate::render::render_with(&state.mouth.cloud, &cond.camera, [0.0; 3], false)?;
                mean_capped(&[loss::psnr(&f.color, &targets[i][0])?, loss::psnr(&m.color, &targets[i][1])?], PSNR_CAP)
            }
            Stage::Motion => {
                let f = crate::compositor::render_branch(&state.face.cloud, &state.face.field, cond, &cond.camera, false)?;
                let m = crate::compositor::render_branch(&state.mouth.cloud, &state.mouth.field, cond, &cond.camera, false)?;
                mean_capped(
                    &[loss::psnr(&f.output.color, &targets[i][0])?, loss::psnr(&m.output.color, &targets[i][1])?],
                    PSNR_CAP,
                )
            }
            Stage::Finetune => {
                let p = render_portrait(
                    (&state.face.cloud, &state.face.field),
                    (&state.mouth.cloud, &state.mouth.field),
                    cond,
                    &hair[i],
                    false,
                )?;
                loss::psnr(&p.fused.image, &frame.image)?.min(PSNR_CAP)
            }
        };
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::EncoderConfig;
    use crate::synth::{synth_sequence, JawSchedule, SynthConfig};
    use alloc::vec;

    fn tiny() -> (TrainConfig, crate::synth::SyntheticDataset) {
        let data = synth_sequence(
            &SynthConfig { width: 32, height: 32, frames: 2, face_splats: 150, mouth_splats: 40, jaw: JawSchedule::Cycle, ..Default::default() },
            1,
        )
        .unwrap();
        let config = TrainConfig {
            face_splats: 60,
            mouth_splats: 20,
            embedding_dim: 4,
            field: FieldConfig {
                encoder: EncoderConfig { levels: 2, table_size: 256, features: 2, min_resolution: 4, max_resolution: 8 },
                hidden: vec![8],
            },
            metrics_interval: 5,
            ..Default::default()
        };
        (config, data)
    }

    #[test]
    fn stage_prerequisites_are_enforced() {
        let (config, data) = tiny();
        let mut state = TrainState::init(&config, &data.sequence, data.bounds, 3).unwrap();
        let err = run_stage(&mut state, &config, Stage::Motion, &data.sequence, 1, None, &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::Prerequisite(_)));
        let err = run_stage(&mut state, &config, Stage::Finetune, &data.sequence, 1, None, &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::Prerequisite(_)));
    }

    #[test]
    fn zero_iterations_keep_parameters() {
        let (config, data) = tiny();
        let mut state = TrainState::init(&config, &data.sequence, data.bounds, 3).unwrap();
        let before = state.clone();
        run_stage(&mut state, &config, Stage::Static, &data.sequence, 0, None, &mut |_| {}).unwrap();
        assert_eq!(state.face, before.face);
        assert_eq!(state.mouth, before.mouth);
        assert!(state.has_completed(Stage::Static));
    }

    #[test]
    fn all_stages_run_and_log_every_iteration() {
        let (config, data) = tiny();
        let mut state = TrainState::init(&config, &data.sequence, data.bounds, 3).unwrap();
        let mut log = Vec::new();
        for stage in Stage::ALL {
            run_stage(&mut state, &config, stage, &data.sequence, 6, None, &mut |r| log.push(r.clone())).unwrap();
        }
        assert_eq!(log.len(), 18);
        assert!(log.iter().all(|r| r.loss.total.is_finite()));
        assert_eq!(log.iter().filter(|r| r.psnr.is_some()).count(), 6);
        assert!(log[6..12].iter().all(|r| r.stage == Stage::Motion));
    }

    #[test]
    fn finetune_moves_only_colors() {
        let (config, data) = tiny();
        let mut state = TrainState::init(&config, &data.sequence, data.bounds, 4).unwrap();
        for stage in [Stage::Static, Stage::Motion] {
            run_stage(&mut state, &config, stage, &data.sequence, 4, None, &mut |_| {}).unwrap();
        }
        let before = state.clone();
        run_stage(&mut state, &config, Stage::Finetune, &data.sequence, 5, None, &mut |_| {}).unwrap();
        for (a, b) in [(&before.face, &state.face), (&before.mouth, &state.mouth)] {
            assert_eq!(a.field, b.field);
            assert_eq!(a.cloud.len(), b.cloud.len());
            let mut changed = false;
            for (p, q) in a.cloud.primitives.iter().zip(&b.cloud.primitives) {
                assert_eq!((p.mu, p.raw_scale, p.raw_rotation), (q.mu, q.raw_scale, q.raw_rotation));
                assert_eq!(p.raw_opacity.to_bits(), q.raw_opacity.to_bits());
                assert_eq!(p.embedding, q.embedding);
                changed |= p.color_feature != q.color_feature;
            }
            assert!(changed);
        }
    }
}
