//! Synthetic talking-head sequences with known ground truth.
//!
//! The face is a slightly curved disc of splats with a hole where the mouth
//! is; the mouth interior sits behind it. The jaw (face and mouth splats
//! below the mouth line) translates down with `psi_jaw`, and the cheeks move
//! outwards with `psi_exp[0]`. Audio features are a smooth function of the
//! jaw opening, so a field conditioned on them can recover the motion.

use alloc::vec::Vec;

use rand::Rng;

use crate::camera::Camera;
use crate::conditioning::{CoefficientLayout, ConditioningFrame, FrameRecord, RegionMasks, Sequence};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::math;
use crate::render::render_with;
use crate::rng::{stream_rng, Stream};
use crate::scene::{Bounds, Branch, ColorModel, GaussianPrimitive, PrimitiveCloud};

/// How `psi_jaw` evolves over the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JawSchedule {
    /// `0.5 - 0.5 cos(2 pi t / n)`: closed, open, closed.
    Cycle,
    /// `t / (n - 1)`.
    Ramp,
    /// All coefficients zero.
    Still,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub face_splats: usize,
    pub mouth_splats: usize,
    pub layout: CoefficientLayout,
    pub jaw: JawSchedule,
    /// Downward jaw travel at `psi_jaw = 1`, world units.
    pub jaw_amplitude: f64,
    /// Outward cheek travel at `psi_exp[0] = 1`, world units.
    pub wobble_amplitude: f64,
    pub hair: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            frames: 8,
            face_splats: 600,
            mouth_splats: 150,
            layout: CoefficientLayout::default(),
            jaw: JawSchedule::Cycle,
            jaw_amplitude: 0.12,
            wobble_amplitude: 0.05,
            hair: true,
        }
    }
}

/// Face/mouth y coordinate (world, +y down) below which splats follow the jaw.
pub const JAW_LINE: f64 = 0.36;
const CHEEK_X: f64 = 0.45;
const CAMERA_DISTANCE: f64 = 4.0;

/// The analytic motion applied to the ground-truth clouds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticMotion {
    pub jaw_amplitude: f64,
    pub wobble_amplitude: f64,
}

impl AnalyticMotion {
    pub fn is_jaw(p: &GaussianPrimitive) -> bool {
        p.mu[1] > JAW_LINE
    }

    pub fn displacement(&self, p: &GaussianPrimitive, branch: Branch, frame: &ConditioningFrame) -> [f64; 3] {
        let jaw = frame.psi_jaw.first().copied().unwrap_or(0.0);
        let wobble = frame.psi_exp.first().copied().unwrap_or(0.0);
        let mut d = [0.0; 3];
        if Self::is_jaw(p) {
            d[1] += self.jaw_amplitude * jaw;
        }
        if branch == Branch::Face && p.mu[0].abs() > CHEEK_X {
            d[0] += p.mu[0].signum() * self.wobble_amplitude * wobble;
        }
        d
    }

    pub fn apply(&self, cloud: &PrimitiveCloud, frame: &ConditioningFrame) -> PrimitiveCloud {
        let mut out = cloud.clone();
        for p in out.primitives.iter_mut() {
            let d = self.displacement(p, cloud.branch, frame);
            p.mu = math::add(&p.mu, &d);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub sequence: Sequence,
    pub face: PrimitiveCloud,
    pub mouth: PrimitiveCloud,
    pub motion: AnalyticMotion,
    pub bounds: Bounds,
}

/// Bounds enclosing every synthetic splat in every frame.
pub fn synth_bounds() -> Bounds {
    Bounds { min: [-1.1, -1.1, -0.4], max: [1.1, 1.1, 0.6] }
}

pub fn synth_camera(width: usize, height: usize) -> Camera {
    Camera::looking_at_origin(width, height, 1.25 * width.min(height) as f64, CAMERA_DISTANCE)
}

fn in_mouth_hole(x: f64, y: f64) -> bool {
    let (dx, dy) = (x / 0.34, (y - JAW_LINE) / 0.2);
    dx * dx + dy * dy < 1.0
}

fn splat(mu: [f64; 3], scale: [f64; 3], opacity: f64, rgb: [f64; 3], angle: f64) -> GaussianPrimitive {
    GaussianPrimitive {
        mu,
        raw_scale: scale.map(math::ln),
        raw_rotation: math::quat_from_axis_angle(&[0.0, 0.0, 1.0], angle),
        raw_opacity: math::logit(opacity),
        color_feature: rgb.to_vec(),
        embedding: Vec::new(),
    }
}

fn face_cloud<R: Rng>(n: usize, rng: &mut R) -> PrimitiveCloud {
    let mut cloud = PrimitiveCloud::empty(Branch::Face, synth_bounds(), 0, ColorModel::Rgb);
    while cloud.len() < n {
        let (x, y) = (rng.random_range(-0.75..0.75), rng.random_range(-0.85..0.85));
        if (x / 0.75) * (x / 0.75) + (y / 0.85) * (y / 0.85) > 1.0 || in_mouth_hole(x, y) {
            continue;
        }
        let z = 0.25 * (x * x + y * y);
        let shade = 0.75 - 0.2 * y;
        let mut rgb = [0.95 * shade, 0.72 * shade, 0.6 * shade];
        // eyes and brows
        for ex in [-0.3, 0.3] {
            let d2 = (x - ex) * (x - ex) + (y + 0.2) * (y + 0.2);
            if d2 < 0.012 {
                rgb = [0.15, 0.1, 0.1];
            } else if (y + 0.36).abs() < 0.04 && (x - ex).abs() < 0.16 {
                rgb = [0.35, 0.2, 0.12];
            }
        }
        if y > 0.55 && x.abs() < 0.25 {
            rgb = [rgb[0] * 0.9, rgb[1] * 0.85, rgb[2] * 0.85];
        }
        let s = rng.random_range(0.035..0.06);
        cloud.primitives.push(splat([x, y, z], [s, s * rng.random_range(0.7..1.0), 0.015], 0.9, rgb, rng.random_range(0.0..3.1)));
    }
    cloud
}

fn mouth_cloud<R: Rng>(n: usize, rng: &mut R) -> PrimitiveCloud {
    let mut cloud = PrimitiveCloud::empty(Branch::Mouth, synth_bounds(), 0, ColorModel::Rgb);
    while cloud.len() < n {
        let (x, y) = (rng.random_range(-0.4..0.4), rng.random_range(JAW_LINE - 0.26..JAW_LINE + 0.26));
        let (dx, dy) = (x / 0.4, (y - JAW_LINE) / 0.26);
        if dx * dx + dy * dy > 1.0 {
            continue;
        }
        let rel = y - JAW_LINE;
        let rgb = if rel.abs() > 0.07 && rel.abs() < 0.15 {
            [0.92, 0.9, 0.85]
        } else {
            [0.45, 0.08, 0.1]
        };
        let s = rng.random_range(0.025..0.04);
        cloud.primitives.push(splat([x, y, 0.15], [s, s, 0.01], 0.95, rgb, rng.random_range(0.0..3.1)));
    }
    cloud
}

fn hair_layer(width: usize, height: usize, face_opacity: &Image) -> (Image, Mask) {
    let mut color = Image::new(width, height, 3);
    let mut mask = Mask::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64 - 0.5;
            let v = (y as f64 + 0.5) / height as f64 - 0.5;
            let r2 = u * u + (v + 0.04) * (v + 0.04);
            if v < 0.05 && r2 < 0.43 * 0.43 && r2 > 0.2 * 0.2 && face_opacity.get(x, y, 0) < 0.02 {
                mask.set(x, y, true);
                let stripe = 0.5 + 0.5 * math::sin(0.9 * x as f64 + 0.3 * y as f64);
                color.set(x, y, 0, 0.3 + 0.15 * stripe);
                color.set(x, y, 1, 0.18 + 0.08 * stripe);
                color.set(x, y, 2, 0.08);
            }
        }
    }
    (color, mask)
}

fn coefficients<R: Rng>(config: &SynthConfig, t: usize, camera: Camera, identity: &[f64], shape: &[f64], rng: &mut R) -> ConditioningFrame {
    let n = config.frames;
    let l = &config.layout;
    let mut f = ConditioningFrame::zeros(t, l, camera);
    let phase = t as f64 / n as f64;
    let (jaw, wobble) = match config.jaw {
        JawSchedule::Still => return f,
        JawSchedule::Cycle => (0.5 - 0.5 * math::cos(2.0 * core::f64::consts::PI * phase), math::sin(2.0 * core::f64::consts::PI * phase)),
        JawSchedule::Ramp => (if n > 1 { t as f64 / (n - 1) as f64 } else { 0.0 }, 0.0),
    };
    let f32r = |v: f64| v as f32 as f64;
    f.psi_jaw.iter_mut().for_each(|v| *v = f32r(jaw));
    if let Some(v) = f.psi_exp.first_mut() {
        *v = f32r(wobble);
    }
    if let Some(v) = f.psi_exp.get_mut(1) {
        *v = f32r(jaw);
    }
    for (k, v) in f.audio.iter_mut().enumerate() {
        let jitter: f64 = rng.random_range(-0.01..0.01);
        *v = f32r(0.5 * math::cos(core::f64::consts::PI * (k as f64 + 1.0) * jaw * 0.25) + jitter);
    }
    f.psi_id.copy_from_slice(identity);
    f.psi_s.copy_from_slice(shape);
    f
}

fn threshold(img: &Image, t: f64) -> Mask {
    let mut m = Mask::new(img.width, img.height);
    for (d, &o) in m.data.iter_mut().zip(&img.data) {
        *d = o >= t;
    }
    m
}

/// Ground-truth layers for one frame: fused 8-bit-quantized image and masks.
pub fn render_frame(
    face: &PrimitiveCloud,
    mouth: &PrimitiveCloud,
    motion: &AnalyticMotion,
    frame: &ConditioningFrame,
    hair: bool,
) -> Result<(Image, RegionMasks)> {
    let cam = &frame.camera;
    let face_t = motion.apply(face, frame);
    let mouth_t = motion.apply(mouth, frame);
    let f = render_with(&face_t, cam, [0.0; 3], false)?;
    let m = render_with(&mouth_t, cam, [0.0; 3], false)?;
    let mut jaw_cloud = face_t.clone();
    jaw_cloud.primitives.retain(|p| p.mu[1] > JAW_LINE);
    let jaw = render_with(&jaw_cloud, cam, [0.0; 3], false)?;

    let (w, h) = (cam.width, cam.height);
    let (hair_color, hair_mask) = if hair { hair_layer(w, h, &f.opacity) } else { (Image::new(w, h, 3), Mask::new(w, h)) };
    let mut image = hair_color;
    for p in 0..w * h {
        let o = f.opacity.data[p];
        for c in 0..3 {
            image.data[p * 3 + c] += f.color.data[p * 3 + c] * o + m.color.data[p * 3 + c] * (1.0 - o);
        }
    }
    let face_mask = threshold(&f.opacity, 0.5);
    let mut mouth_mask = threshold(&m.opacity, 0.5);
    for (mm, &fm) in mouth_mask.data.iter_mut().zip(&face_mask.data) {
        *mm &= !fm;
    }
    let masks = RegionMasks { face: face_mask, mouth: mouth_mask, hair: hair_mask, jaw: threshold(&jaw.opacity, 0.5) };
    Ok((image.quantized(255), masks))
}

/// Builds the clouds, coefficients and every frame. Deterministic in `seed`.
pub fn synth_sequence(config: &SynthConfig, seed: u64) -> Result<SyntheticDataset> {
    if config.frames == 0 {
        return Err(Error::invalid("synthetic sequence needs at least one frame"));
    }
    if config.face_splats == 0 || config.mouth_splats == 0 {
        return Err(Error::invalid("synthetic clouds need at least one splat each"));
    }
    let mut rng = stream_rng(seed, Stream::Synth);
    let face = face_cloud(config.face_splats, &mut rng);
    let mouth = mouth_cloud(config.mouth_splats, &mut rng);
    let motion = AnalyticMotion { jaw_amplitude: config.jaw_amplitude, wobble_amplitude: config.wobble_amplitude };
    let camera = synth_camera(config.width, config.height);
    let f32r = |v: f64| v as f32 as f64;
    let identity: Vec<f64> = (0..config.layout.identity).map(|_| f32r(rng.random_range(-1.0..1.0))).collect();
    let shape: Vec<f64> = (0..config.layout.shape).map(|_| f32r(rng.random_range(-1.0..1.0))).collect();
    let mut frames = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        let cond = coefficients(config, t, camera, &identity, &shape, &mut rng);
        let (image, masks) = render_frame(&face, &mouth, &motion, &cond, config.hair)?;
        frames.push(FrameRecord { image, masks, conditioning: cond });
    }
    let sequence = Sequence::new(config.layout, config.width, config.height, frames)?;
    Ok(SyntheticDataset { sequence, face, mouth, motion, bounds: synth_bounds() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(frames: usize, jaw: JawSchedule) -> SynthConfig {
        SynthConfig { frames, jaw, face_splats: 300, mouth_splats: 80, ..Default::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_sequence(&small(2, JawSchedule::Cycle), 4).unwrap();
        let b = synth_sequence(&small(2, JawSchedule::Cycle), 4).unwrap();
        assert_eq!(a, b);
        let c = synth_sequence(&small(2, JawSchedule::Cycle), 5).unwrap();
        assert_ne!(a.sequence.frames()[0].image, c.sequence.frames()[0].image);
    }

    #[test]
    fn masks_are_nonempty_and_disjoint() {
        let d = synth_sequence(&small(1, JawSchedule::Cycle), 1).unwrap();
        let m = &d.sequence.frames()[0].masks;
        for (name, mask) in m.iter() {
            assert!(!mask.is_empty(), "{name}");
        }
        assert!(m.face.data.iter().zip(&m.mouth.data).all(|(a, b)| !(a & b)));
        assert!(m.face.data.iter().zip(&m.hair.data).all(|(a, b)| !(a & b)));
    }

    #[test]
    fn still_single_frame_equals_the_canonical_render() {
        let cfg = SynthConfig { hair: false, ..small(1, JawSchedule::Still) };
        let d = synth_sequence(&cfg, 2).unwrap();
        let f = &d.sequence.frames()[0];
        assert!(f.conditioning.psi_jaw.iter().chain(&f.conditioning.audio).all(|&v| v == 0.0));
        let cam = synth_camera(64, 64);
        let face = render_with(&d.face, &cam, [0.0; 3], false).unwrap();
        let mouth = render_with(&d.mouth, &cam, [0.0; 3], false).unwrap();
        let mut want = Image::new(64, 64, 3);
        for p in 0..64 * 64 {
            let o = face.opacity.data[p];
            for c in 0..3 {
                want.data[p * 3 + c] = face.color.data[p * 3 + c] * o + mouth.color.data[p * 3 + c] * (1.0 - o);
            }
        }
        assert_eq!(f.image, want.quantized(255));
    }

    #[test]
    fn jaw_ramp_moves_the_jaw_region_down_monotonically() {
        let d = synth_sequence(&small(5, JawSchedule::Ramp), 3).unwrap();
        let centroids: Vec<f64> = d
            .sequence
            .frames()
            .iter()
            .map(|f| {
                let m = &f.masks.jaw;
                let (mut s, mut n) = (0.0, 0.0);
                for y in 0..m.height {
                    for x in 0..m.width {
                        if m.get(x, y) {
                            s += y as f64;
                            n += 1.0;
                        }
                    }
                }
                s / n
            })
            .collect();
        assert!(centroids.windows(2).all(|w| w[1] > w[0]), "{centroids:?}");
    }
}
