//! End-to-end acceptance run. Prints one `PASS` or `FAIL` line per
//! criterion. Pass criterion names as arguments to run a subset.
//!
//! The process exits non-zero when a criterion fails, except for a
//! throughput miss on a machine with fewer than 8 hardware threads, where
//! the target cannot be measured as specified. That line still says FAIL.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use degs::commands::{self, BenchOptions};
use degs_core::compositor::{extract_hair_layer, fuse, fuse_unclamped, render_portrait, PortraitLayers};
use degs_core::conditioning::{CoefficientLayout, ConditioningFrame, FrameRecord, RegionMasks};
use degs_core::field::{DeformationField, FieldConfig, FieldLayout};
use degs_core::gradcheck::{self, GradCheckConfig};
use degs_core::loss;
use degs_core::render::{render, ALPHA_MIN, COV2D_FLOOR, TRANSMITTANCE_MIN};
use degs_core::rng::{stream_rng, Stream};
use degs_core::scene::{init_random_cloud, ColorModel};
use degs_core::synth::{synth_sequence, JawSchedule, SynthConfig};
use degs_core::train::{branch_target, run_stage, BranchState, Stage, TrainConfig, TrainState};
use degs_core::{Bounds, Branch, Camera, GaussianPrimitive, Image, Mask, PrimitiveCloud};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
    /// The failure reflects the machine, not the implementation.
    environmental: bool,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail, environmental: false }
    }
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    ("gradient-suite", gradient_suite),
    ("blending-oracle", blending_oracle),
    ("fusion-oracle", fusion_oracle),
    ("zero-deformation", zero_deformation),
    ("static-fit", static_fit),
    ("motion-fit", motion_fit),
    ("hair-preservation", hair_preservation),
    ("finetune-freeze", finetune_freeze),
    ("determinism", determinism),
    ("throughput", throughput),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut hard_failure = false;
    for (name, run) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {name}: {} [{:.1} s]", o.detail, start.elapsed().as_secs_f64());
        hard_failure |= !o.pass && !o.environmental;
    }
    if hard_failure {
        std::process::exit(1);
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let config = GradCheckConfig::default();
    let report = gradcheck::run(0, &config).expect("gradcheck runs");
    let secs = start.elapsed().as_secs_f64();
    let suites: Vec<String> = report
        .suites
        .iter()
        .map(|s| format!("{} {}/{} max {:.1e} ({} under the floor)", s.name, s.checked - s.failures, s.checked, s.max_rel_error, s.floored))
        .collect();
    Outcome::new(
        report.passed() && report.scenes >= 20 && secs < 120.0,
        format!(
            "{} scenes of {} splats at {}x{}, {} entries, max relative error {:.2e} (< 1e-3), {:.1} s (< 120 s); {}",
            report.scenes,
            config.splats,
            config.width,
            config.height,
            report.checked(),
            report.max_rel_error(),
            secs,
            suites.join(", ")
        ),
    )
}

fn rotation_y(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

fn transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = a[c][r];
        }
    }
    out
}

/// Straightforward evaluation of the front-to-back blending sum: project
/// every splat, sort by camera depth, and for each pixel accumulate
/// `c_i a_i T_i` with the renderer's documented contribution and
/// termination thresholds.
fn naive_render(cloud: &PrimitiveCloud, cam: &Camera) -> (Image, Image) {
    struct P {
        depth: f64,
        index: usize,
        mean: [f64; 2],
        conic: [f64; 3],
        opacity: f64,
        color: [f64; 3],
    }
    let mut ps = Vec::new();
    for (index, p) in cloud.primitives.iter().enumerate() {
        let t: Vec<f64> = (0..3).map(|r| (0..3).map(|k| cam.rotation[r][k] * p.mu[k]).sum::<f64>() + cam.translation[r]).collect();
        let [w, x, y, z] = {
            let q = p.raw_rotation;
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            q.map(|v| v / n)
        };
        let rot = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        let s = p.raw_scale.map(f64::exp);
        let mut rs = rot;
        for row in rs.iter_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v *= s[k] * s[k];
            }
        }
        let sigma = mat_mul(&rs, &transpose(&rot));
        let world_to_cam = mat_mul(&mat_mul(&cam.rotation, &sigma), &transpose(&cam.rotation));
        let j = [[cam.fx / t[2], 0.0, -cam.fx * t[0] / (t[2] * t[2])], [0.0, cam.fy / t[2], -cam.fy * t[1] / (t[2] * t[2])]];
        let mut cov = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                cov[a][b] = (0..3).map(|k| (0..3).map(|l| j[a][k] * world_to_cam[k][l] * j[b][l]).sum::<f64>()).sum();
            }
        }
        cov[0][0] += COV2D_FLOOR;
        cov[1][1] += COV2D_FLOOR;
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        ps.push(P {
            depth: t[2],
            index,
            mean: [cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy],
            conic: [cov[1][1] / det, -cov[0][1] / det, cov[0][0] / det],
            opacity: 1.0 / (1.0 + (-p.raw_opacity).exp()),
            color: [p.color_feature[0], p.color_feature[1], p.color_feature[2]],
        });
    }
    ps.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
    let mut color = Image::new(cam.width, cam.height, 3);
    let mut opacity = Image::new(cam.width, cam.height, 1);
    for py in 0..cam.height {
        for px in 0..cam.width {
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for p in &ps {
                let dx = px as f64 + 0.5 - p.mean[0];
                let dy = py as f64 + 0.5 - p.mean[1];
                let g = (-0.5 * (p.conic[0] * dx * dx + p.conic[2] * dy * dy) - p.conic[1] * dx * dy).exp();
                let a = p.opacity * g;
                if a < ALPHA_MIN {
                    continue;
                }
                for k in 0..3 {
                    c[k] += p.color[k] * a * t;
                }
                t *= 1.0 - a;
                if t < TRANSMITTANCE_MIN {
                    break;
                }
            }
            for k in 0..3 {
                color.data[(py * cam.width + px) * 3 + k] = c[k];
            }
            opacity.data[py * cam.width + px] = 1.0 - t;
        }
    }
    (color, opacity)
}

fn blending_oracle() -> Outcome {
    let mut rng = stream_rng(41, Stream::GradCheck);
    let mut worst: f64 = 0.0;
    let mut covered = 0usize;
    let mut pixels = 0usize;
    let scenes = 200;
    for s in 0..scenes {
        let (w, h) = if s % 2 == 0 { (32, 32) } else { (40, 28) };
        let mut cam = Camera::looking_at_origin(w, h, 1.4 * w as f64, 4.0);
        if s % 3 == 0 {
            cam.rotation = rotation_y(0.15);
        }
        let bounds = Bounds::new([-1.0; 3], [1.0; 3]).unwrap();
        let mut cloud = PrimitiveCloud::empty(Branch::Face, bounds, 0, ColorModel::Rgb);
        for _ in 0..rng.random_range(1..=5) {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            cloud.primitives.push(GaussianPrimitive {
                mu: [rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4), rng.random_range(-0.6..0.6)],
                raw_scale: std::array::from_fn(|_| rng.random_range(0.03f64..0.3).ln()),
                raw_rotation: if q.iter().all(|v| v.abs() < 1e-3) { [1.0, 0.0, 0.0, 0.0] } else { q },
                raw_opacity: rng.random_range(-3.0..4.0),
                color_feature: (0..3).map(|_| rng.random_range(0.0..1.0)).collect(),
                embedding: Vec::new(),
            });
        }
        let out = render(&cloud, &cam, [0.0; 3]).unwrap();
        let (color, opacity) = naive_render(&cloud, &cam);
        covered += opacity.data.iter().filter(|&&o| o > 1e-3).count();
        pixels += opacity.data.len();
        for (a, b) in out.color.data.iter().zip(&color.data).chain(out.opacity.data.iter().zip(&opacity.data)) {
            worst = worst.max((a - b).abs());
        }
    }
    Outcome::new(
        worst <= 1e-6 && covered > 0,
        format!(
            "{scenes} scenes of 1-5 splats, {:.0}% of pixels covered, max per-channel difference {worst:.2e} (<= 1e-6)",
            100.0 * covered as f64 / pixels as f64
        ),
    )
}

fn random_layers(rng: &mut impl Rng) -> PortraitLayers {
    let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
    let mut img = |c: usize, lo: f64, hi: f64| {
        let mut im = Image::new(w, h, c);
        im.data.iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
        im
    };
    PortraitLayers {
        hair_color: img(3, 0.0, 0.6),
        face_color: img(3, 0.0, 1.0),
        face_opacity: img(1, 0.0, 1.0),
        mouth_color: img(3, 0.0, 1.0),
    }
}

fn fusion_oracle() -> Outcome {
    let mut rng = stream_rng(42, Stream::GradCheck);
    let mut worst: f64 = 0.0;
    let mut hair_face = true;
    let mut mouth_only = true;
    let mut clamp_ok = true;
    for _ in 0..100 {
        let l = random_layers(&mut rng);
        let got = fuse_unclamped(&l).unwrap();
        for y in 0..l.hair_color.height {
            for x in 0..l.hair_color.width {
                let o = l.face_opacity.get(x, y, 0);
                for c in 0..3 {
                    let want = l.hair_color.get(x, y, c) + l.face_color.get(x, y, c) * o + l.mouth_color.get(x, y, c) * (1.0 - o);
                    worst = worst.max((got.get(x, y, c) - want).abs());
                }
            }
        }
        let fused = fuse(&l).unwrap();
        clamp_ok &= fused.image.data.iter().zip(&got.data).all(|(a, b)| *a == b.clamp(0.0, 1.0));

        let mut ones = l.clone();
        ones.face_opacity.data.iter_mut().for_each(|v| *v = 1.0);
        let f = fuse_unclamped(&ones).unwrap();
        hair_face &= f.data.iter().zip(l.hair_color.data.iter().zip(&l.face_color.data)).all(|(v, (h, c))| *v == h + c);

        let mut zeros = l.clone();
        zeros.face_opacity.data.iter_mut().for_each(|v| *v = 0.0);
        zeros.hair_color.data.iter_mut().for_each(|v| *v = 0.0);
        let f = fuse_unclamped(&zeros).unwrap();
        mouth_only &= f.data == l.mouth_color.data;
    }
    Outcome::new(
        worst <= 1e-7 && hair_face && mouth_only && clamp_ok,
        format!(
            "100 random layer sets, max difference from the pixel loop {worst:.2e} (<= 1e-7); opacity 1 gives hair + face exactly: {hair_face}; \
             opacity 0 with no hair gives mouth exactly: {mouth_only}; clamped output equals clamp(sum): {clamp_ok}"
        ),
    )
}

fn random_frame(rng: &mut impl Rng, index: usize, layout: &CoefficientLayout, cam: Camera) -> ConditioningFrame {
    let mut f = ConditioningFrame::zeros(index, layout, cam);
    for v in [&mut f.audio, &mut f.psi_id, &mut f.psi_s, &mut f.psi_exp, &mut f.psi_eye, &mut f.psi_jaw] {
        v.iter_mut().for_each(|x| *x = rng.random_range(-2.0..2.0));
    }
    f
}

fn zero_deformation() -> Outcome {
    let data = synth_sequence(&SynthConfig { frames: 1, ..SynthConfig::default() }, 9).unwrap();
    let layout = data.sequence.layout;
    let cam = data.sequence.frames()[0].conditioning.camera;
    let field_layout = FieldLayout { embedding_dim: 32, audio_dim: layout.audio, expression_dim: layout.expression_features() };
    let mut rng = stream_rng(9, Stream::GradCheck);
    let mut identical = 0;
    for (branch, gt) in [(Branch::Face, &data.face), (Branch::Mouth, &data.mouth)] {
        let cloud = init_random_cloud(300, data.bounds, branch, 32, ColorModel::Rgb, &mut stream_rng(9, Stream::FaceCloud)).unwrap();
        let field = DeformationField::new(field_layout, &FieldConfig::default(), data.bounds, &mut stream_rng(9, Stream::FaceField)).unwrap();
        let mut with_z = gt.clone();
        with_z.embedding_dim = 32;
        for (p, q) in with_z.primitives.iter_mut().zip(cloud.primitives.iter().cycle()) {
            p.embedding = q.embedding.clone();
        }
        let canonical = render(&with_z, &cam, [0.0; 3]).unwrap();
        for i in 0..5 {
            let frame = random_frame(&mut rng, i, &layout, cam);
            let d = field.deform_cloud(&with_z, &frame.audio, &frame.expression_features()).unwrap();
            let out = render(&d.cloud, &cam, [0.0; 3]).unwrap();
            let same = d.cloud == with_z
                && out.color.data.iter().zip(&canonical.color.data).all(|(a, b)| a.to_bits() == b.to_bits())
                && out.opacity.data.iter().zip(&canonical.opacity.data).all(|(a, b)| a.to_bits() == b.to_bits());
            identical += same as usize;
        }
    }
    Outcome::new(identical == 10, format!("{identical}/10 random conditioning frames render bit-identical to the canonical cloud"))
}

/// Mean PSNR / SSIM of both branch renders against their masked targets.
fn branch_quality(state: &TrainState, frame: &FrameRecord, radius: usize) -> (f64, f64) {
    let mut p = 0.0;
    let mut s = 0.0;
    for (branch, b) in [(Branch::Face, &state.face), (Branch::Mouth, &state.mouth)] {
        let (target, _) = branch_target(frame, branch, radius).unwrap();
        let out = render(&b.cloud, &frame.conditioning.camera, [0.0; 3]).unwrap();
        p += loss::psnr(&out.color, &target).unwrap().min(100.0);
        s += loss::ssim(&out.color, &target).unwrap();
    }
    (p / 2.0, s / 2.0)
}

fn static_fit() -> Outcome {
    let start = Instant::now();
    let data = synth_sequence(&SynthConfig { frames: 1, jaw: JawSchedule::Still, ..SynthConfig::default() }, 7).unwrap();
    let config = TrainConfig { face_splats: 350, mouth_splats: 150, densify_static: false, ..TrainConfig::default() };
    let mut state = TrainState::init(&config, &data.sequence, data.bounds, 7).unwrap();
    run_stage(&mut state, &config, Stage::Static, &data.sequence, 2000, None, &mut |_| {}).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (psnr, ssim) = branch_quality(&state, &data.sequence.frames()[0], config.dilation_radius);
    let splats = state.face.cloud.len() + state.mouth.cloud.len();
    let (w, h) = (data.sequence.width, data.sequence.height);
    Outcome::new(
        psnr >= 30.0 && ssim >= 0.92 && secs < 300.0 && splats == 500,
        format!(
            "{splats} splats, {w}x{h}, 2000 iterations: PSNR {psnr:.2} dB (>= 30), SSIM {ssim:.4} (>= 0.92), {secs:.0} s (< 300 s); \
             branch mean against the masked static targets"
        ),
    )
}

/// Two co-located splats with different colors and identical canonical
/// state except for their embeddings; the targets move them in opposite
/// directions as the audio drive changes sign.
fn distinguishability() -> (bool, String) {
    let amplitude = 0.3;
    let layout = CoefficientLayout::default();
    let cam = Camera::looking_at_origin(32, 32, 40.0, 4.0);
    let bounds = Bounds::new([-1.0; 3], [1.0; 3]).unwrap();
    let config = TrainConfig::default();
    let seeded = init_random_cloud(2, bounds, Branch::Face, config.embedding_dim, ColorModel::Rgb, &mut stream_rng(3, Stream::FaceCloud)).unwrap();
    let splat = |color: [f64; 3], z: &[f64]| GaussianPrimitive {
        mu: [0.0; 3],
        raw_scale: [0.1f64.ln(); 3],
        raw_rotation: [1.0, 0.0, 0.0, 0.0],
        raw_opacity: 2.0,
        color_feature: color.to_vec(),
        embedding: z.to_vec(),
    };
    let red = [0.9, 0.1, 0.1];
    let blue = [0.1, 0.2, 0.9];
    let mut cloud = PrimitiveCloud::empty(Branch::Face, bounds, config.embedding_dim, ColorModel::Rgb);
    cloud.primitives = vec![splat(red, &seeded.primitives[0].embedding), splat(blue, &seeded.primitives[1].embedding)];

    let drives = [-1.0, -0.6, -0.2, 0.2, 0.6, 1.0];
    let frames: Vec<(FrameRecord, Image)> = drives
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut moved = cloud.clone();
            moved.primitives[0].mu[0] = amplitude * s;
            moved.primitives[1].mu[0] = -amplitude * s;
            let target = render(&moved, &cam, [0.0; 3]).unwrap().color;
            let mut cond = ConditioningFrame::zeros(i, &layout, cam);
            cond.audio[0] = s;
            let record = FrameRecord { image: target.clone(), masks: RegionMasks::empty(32, 32), conditioning: cond };
            (record, target)
        })
        .collect();
    let field_layout = FieldLayout { embedding_dim: config.embedding_dim, audio_dim: layout.audio, expression_dim: layout.expression_features() };
    let field = DeformationField::new(field_layout, &config.field, bounds, &mut stream_rng(3, Stream::FaceField)).unwrap();
    let mut state = BranchState::new(cloud, field, &config);
    let jaw = Mask::new(32, 32);
    let iterations = 3000;
    for it in 0..iterations {
        let (frame, target) = &frames[it as usize % frames.len()];
        state.motion_step(frame, target, &jaw, &config.weights, it, iterations).unwrap();
    }
    let frame = &frames[drives.len() - 1].0.conditioning;
    let delta = |i: usize| {
        let p = &state.cloud.primitives[i];
        state.field.predict(&p.mu, &p.embedding, &frame.audio, &frame.expression_features()).unwrap().d_mu
    };
    let (d1, d2) = (delta(0), delta(1));
    let mut fit = 0.0;
    for (frame, target) in &frames {
        let c = &frame.conditioning;
        let moved = state.field.deform_cloud(&state.cloud, &c.audio, &c.expression_features()).unwrap();
        fit += loss::psnr(&render(&moved.cloud, &cam, [0.0; 3]).unwrap().color, target).unwrap().min(100.0) / frames.len() as f64;
    }
    let diff = ((d1[0] - d2[0]).powi(2) + (d1[1] - d2[1]).powi(2) + (d1[2] - d2[2]).powi(2)).sqrt();
    let mu_gap = {
        let (a, b) = (state.cloud.primitives[0].mu, state.cloud.primitives[1].mu);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    };
    (
        diff > 0.1 * amplitude,
        format!(
            "co-located pair: |delta1 - delta2| = {diff:.3} at full drive (> {:.3} = 0.1 x amplitude {amplitude}), x offsets {:+.3} and {:+.3} \
             against targets {:+.3} and {:+.3}; canonical centers {mu_gap:.3} apart; fit {fit:.1} dB",
            0.1 * amplitude,
            state.cloud.primitives[0].mu[0] + d1[0],
            state.cloud.primitives[1].mu[0] + d2[0],
            amplitude,
            -amplitude
        ),
    )
}

fn motion_fit() -> Outcome {
    let start = Instant::now();
    let data = synth_sequence(&SynthConfig { frames: 8, jaw: JawSchedule::Cycle, ..SynthConfig::default() }, 7).unwrap();
    let config = TrainConfig { face_splats: 350, mouth_splats: 150, densify_static: false, ..TrainConfig::default() };
    let mut state = TrainState::init(&config, &data.sequence, data.bounds, 7).unwrap();
    run_stage(&mut state, &config, Stage::Static, &data.sequence, 2000, None, &mut |_| {}).unwrap();
    let summary = run_stage(&mut state, &config, Stage::Motion, &data.sequence, 5000, None, &mut |_| {}).unwrap();
    let per_frame = &summary.frame_psnr;
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    let min = per_frame.iter().cloned().fold(f64::INFINITY, f64::min);
    let fit_secs = start.elapsed().as_secs_f64();
    let (distinct, distinct_detail) = distinguishability();
    Outcome::new(
        mean >= 28.0 && distinct,
        format!(
            "8 frames, 5000 motion iterations after 2000 static: mean per-frame PSNR {mean:.2} dB (>= 28), worst frame {min:.2} dB, fit {fit_secs:.0} s; {distinct_detail}"
        ),
    )
}

fn hair_preservation() -> Outcome {
    let data = synth_sequence(&SynthConfig { frames: 4, ..SynthConfig::default() }, 13).unwrap();
    let layout = data.sequence.layout;
    let fl = FieldLayout { embedding_dim: 0, audio_dim: layout.audio, expression_dim: layout.expression_features() };
    let face_field = DeformationField::new(fl, &FieldConfig::default(), data.bounds, &mut stream_rng(13, Stream::FaceField)).unwrap();
    let mouth_field = DeformationField::new(fl, &FieldConfig::default(), data.bounds, &mut stream_rng(13, Stream::MouthField)).unwrap();
    let (mut checked, mut mismatched, mut hair_total, mut energy) = (0usize, 0usize, 0usize, 0.0);
    for f in data.sequence.frames() {
        let hair = extract_hair_layer(&f.image, &f.masks.hair).unwrap();
        let moved_face = data.motion.apply(&data.face, &f.conditioning);
        let moved_mouth = data.motion.apply(&data.mouth, &f.conditioning);
        let p = render_portrait((&moved_face, &face_field), (&moved_mouth, &mouth_field), &f.conditioning, &hair, false).unwrap();
        energy += p.fused.diagnostics.overlap_energy;
        let (w, h) = (f.image.width, f.image.height);
        for y in 0..h {
            for x in 0..w {
                if !f.masks.hair.get(x, y) {
                    continue;
                }
                hair_total += 1;
                let mouth_zero = (0..3).all(|c| p.layers.mouth_color.get(x, y, c) == 0.0);
                if p.layers.face_opacity.get(x, y, 0) != 0.0 || !mouth_zero {
                    continue;
                }
                checked += 1;
                if (0..3).any(|c| p.fused.image.get(x, y, c) != f.image.get(x, y, c)) {
                    mismatched += 1;
                }
            }
        }
    }
    Outcome::new(
        checked > 0 && mismatched == 0,
        format!(
            "{checked} of {hair_total} hair-mask pixels over 4 frames have zero face opacity and zero mouth color; {mismatched} differ from the source frame; \
             overlap energy {energy:.3e}"
        ),
    )
}

fn finetune_freeze() -> Outcome {
    let data = common::small_synth(3, 21);
    let config = common::small_config();
    let mut state = TrainState::init(&config, &data.sequence, data.bounds, 21).unwrap();
    run_stage(&mut state, &config, Stage::Static, &data.sequence, 40, None, &mut |_| {}).unwrap();
    run_stage(&mut state, &config, Stage::Motion, &data.sequence, 40, None, &mut |_| {}).unwrap();
    let before = state.clone();
    run_stage(&mut state, &config, Stage::Finetune, &data.sequence, 200, None, &mut |_| {}).unwrap();
    let mut frozen = true;
    let mut colors_moved = 0usize;
    for (a, b) in [(&before.face, &state.face), (&before.mouth, &state.mouth)] {
        frozen &= a.field == b.field && a.field_opt == b.field_opt && a.cloud.len() == b.cloud.len();
        for (p, q) in a.cloud.primitives.iter().zip(&b.cloud.primitives) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            frozen &= bits(&p.mu) == bits(&q.mu)
                && bits(&p.raw_scale) == bits(&q.raw_scale)
                && bits(&p.raw_rotation) == bits(&q.raw_rotation)
                && p.raw_opacity.to_bits() == q.raw_opacity.to_bits()
                && bits(&p.embedding) == bits(&q.embedding);
            colors_moved += (p.color_feature != q.color_feature) as usize;
        }
        frozen &= a.cloud_opt.mu == b.cloud_opt.mu
            && a.cloud_opt.scale == b.cloud_opt.scale
            && a.cloud_opt.rotation == b.cloud_opt.rotation
            && a.cloud_opt.opacity == b.cloud_opt.opacity
            && a.cloud_opt.embedding == b.cloud_opt.embedding;
    }
    let total = state.face.cloud.len() + state.mouth.cloud.len();
    Outcome::new(
        frozen && colors_moved > 0,
        format!("after 200 finetune iterations every non-color parameter and its optimizer state is bit-identical: {frozen}; {colors_moved}/{total} color features changed"),
    )
}

fn run_pipeline(root: &Path, threads: usize) -> Vec<(String, Vec<u8>)> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let data = root.join("data");
        let run = root.join("run");
        let frames = root.join("frames");
        let cfg = root.join("run.toml");
        fs::write(&cfg, "seed = 11\n[cloud]\nface_splats = 120\nmouth_splats = 40\n[stages]\nmetrics_interval = 10\n").unwrap();
        let s = |p: &Path| p.display().to_string();
        let steps: Vec<Vec<String>> = vec![
            vec!["synth-data", "--out", &s(&data), "--frames", "4", "--width", "32", "--height", "32", "--seed", "11"],
            vec!["train", "--stage", "static", "--config", &s(&cfg), "--dataset", &s(&data), "--out", &s(&run), "--iters", "60", "--no-wall-clock"],
            vec!["train", "--stage", "motion", "--config", &s(&cfg), "--dataset", &s(&data), "--out", &s(&run), "--iters", "40", "--no-wall-clock"],
            vec!["train", "--stage", "finetune", "--config", &s(&cfg), "--dataset", &s(&data), "--out", &s(&run), "--iters", "20", "--no-wall-clock"],
            vec!["render", "--checkpoint", &s(&run.join("checkpoint.degs")), "--dataset", &s(&data), "--out", &s(&frames)],
        ]
        .into_iter()
        .map(|v| v.into_iter().map(String::from).collect())
        .collect();
        for args in steps {
            let refs: Vec<&str> = args.iter().map(|a| a.as_str()).collect();
            let (code, _, err) = common::cli(&refs);
            assert_eq!(code, 0, "{args:?}: {err}");
        }
        let mut files = Vec::new();
        for name in ["metrics_static.csv", "metrics_motion.csv", "metrics_finetune.csv", "checkpoint.degs"] {
            files.push((name.to_string(), fs::read(run.join(name)).unwrap()));
        }
        let frame_dir = frames.join("frames");
        let mut names: Vec<_> = fs::read_dir(&frame_dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        for n in names {
            files.push((format!("frames/{n}"), fs::read(frame_dir.join(&n)).unwrap()));
        }
        files
    })
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = run_pipeline(a.path(), 1);
    let fb = run_pipeline(b.path(), 4);
    let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let frames = fa.iter().filter(|(n, _)| n.starts_with("frames/")).count();
    Outcome::new(
        fa.len() == fb.len() && differing.is_empty() && frames > 0,
        format!(
            "synth-data, three stages and render run twice (1 and 4 worker threads): {} files compared (3 metric CSVs, checkpoint, {frames} frames), differing: {:?}",
            fa.len(),
            differing
        ),
    )
}

fn throughput() -> Outcome {
    let o = BenchOptions { splats: 10_000, width: 256, height: 256, threads: 8, renders: 30, seed: 0 };
    let r = commands::bench(&o).unwrap();
    let pass = r.renders_per_sec >= 30.0;
    Outcome {
        pass,
        detail: format!(
            "{:.2} renders/s at 256x256 with 10k splats on {} threads (>= 30); machine reports {} hardware threads{}",
            r.renders_per_sec,
            r.threads,
            r.available_parallelism,
            if r.available_parallelism < 8 { ", below the 8 the target assumes" } else { "" }
        ),
        environmental: !pass && r.available_parallelism < 8,
    }
}
