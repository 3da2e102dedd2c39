//! Layered portrait compositing: preserved hair from the source frame, the
//! rendered face branch over the rendered mouth branch.
//!
//! `C = C_hair + C_face * O_face + C_mouth * (1 - O_face)`, then clamped to
//! `[0, 1]`. The sum is not a convex combination, so where hair and face
//! overlap it can exceed 1; the clipped amount is reported as overlap energy.

use alloc::vec::Vec;

use crate::camera::Camera;
use crate::conditioning::ConditioningFrame;
use crate::error::Result;
use crate::field::{DeformationField, DeformedCloud};
use crate::image::{Image, Mask};
use crate::render::{render_with, RenderOutput};
use crate::scene::PrimitiveCloud;

/// Dilation radius used for branch training masks.
pub const DEFAULT_DILATION_RADIUS: usize = 5;

/// Morphological dilation by a disk `dx^2 + dy^2 <= r^2`.
pub fn dilate_mask(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut out = Mask::new(mask.width, mask.height);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x as usize, y as usize) {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && nx < w && ny < h {
                    out.set(nx as usize, ny as usize, true);
                }
            }
        }
    }
    out
}

/// `C_hair`: the frame where the hair mask is set, zero elsewhere.
pub fn extract_hair_layer(frame: &Image, hair: &Mask) -> Result<Image> {
    frame.masked(hair)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortraitLayers {
    pub hair_color: Image,
    pub face_color: Image,
    /// Single channel.
    pub face_opacity: Image,
    pub mouth_color: Image,
}

impl PortraitLayers {
    fn check(&self) -> Result<()> {
        self.face_color.check_same_shape(&self.hair_color, "face color vs hair layer")?;
        self.mouth_color.check_same_shape(&self.hair_color, "mouth color vs hair layer")?;
        let expect = Image::new(self.hair_color.width, self.hair_color.height, 1);
        self.face_opacity.check_same_shape(&expect, "face opacity")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OverlapDiagnostics {
    /// Channel values outside `[0, 1]` before clamping.
    pub clamped_values: usize,
    /// Total amount removed by the clamp.
    pub overlap_energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub image: Image,
    pub unclamped: Image,
    pub diagnostics: OverlapDiagnostics,
}

/// The fusion sum without the clamp.
pub fn fuse_unclamped(layers: &PortraitLayers) -> Result<Image> {
    layers.check()?;
    let mut out = layers.hair_color.clone();
    let ch = out.channels;
    for p in 0..out.pixel_count() {
        let o = layers.face_opacity.data[p];
        for c in 0..ch {
            let i = p * ch + c;
            out.data[i] += layers.face_color.data[i] * o + layers.mouth_color.data[i] * (1.0 - o);
        }
    }
    Ok(out)
}

pub fn fuse(layers: &PortraitLayers) -> Result<Fused> {
    let unclamped = fuse_unclamped(layers)?;
    let mut image = unclamped.clone();
    let mut diagnostics = OverlapDiagnostics::default();
    for v in image.data.iter_mut() {
        let c = v.clamp(0.0, 1.0);
        if c != *v {
            diagnostics.clamped_values += 1;
            diagnostics.overlap_energy += (*v - c).abs();
        }
        *v = c;
    }
    Ok(Fused { image, unclamped, diagnostics })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub face_color: Image,
    pub face_opacity: Image,
    pub mouth_color: Image,
}

/// Gradients of a loss on the clamped fused image w.r.t. the rendered
/// layers. Values the clamp cut off pass no gradient.
pub fn fuse_backward(layers: &PortraitLayers, fused: &Fused, d_out: &Image) -> Result<LayerGradients> {
    layers.check()?;
    d_out.check_same_shape(&fused.image, "fused gradient")?;
    let ch = d_out.channels;
    let mut g = LayerGradients {
        face_color: Image::new(d_out.width, d_out.height, ch),
        face_opacity: Image::new(d_out.width, d_out.height, 1),
        mouth_color: Image::new(d_out.width, d_out.height, ch),
    };
    for p in 0..d_out.pixel_count() {
        let o = layers.face_opacity.data[p];
        let mut d_o = 0.0;
        for c in 0..ch {
            let i = p * ch + c;
            let u = fused.unclamped.data[i];
            if !(0.0..=1.0).contains(&u) {
                continue;
            }
            let d = d_out.data[i];
            g.face_color.data[i] = d * o;
            g.mouth_color.data[i] = d * (1.0 - o);
            d_o += d * (layers.face_color.data[i] - layers.mouth_color.data[i]);
        }
        g.face_opacity.data[p] = d_o;
    }
    Ok(g)
}

/// One branch's deformed cloud and its render.
#[derive(Debug, Clone)]
pub struct BranchRender {
    pub deformed: DeformedCloud,
    pub output: RenderOutput,
}

#[derive(Debug, Clone)]
pub struct PortraitRender {
    pub face: BranchRender,
    pub mouth: BranchRender,
    pub layers: PortraitLayers,
    pub fused: Fused,
}

/// Deforms and renders one branch over a black background.
pub fn render_branch(
    cloud: &PrimitiveCloud,
    field: &DeformationField,
    frame: &ConditioningFrame,
    camera: &Camera,
    keep_records: bool,
) -> Result<BranchRender> {
    let deformed = field.deform_cloud(cloud, &frame.audio, &frame.expression_features())?;
    let output = render_with(&deformed.cloud, camera, [0.0; 3], keep_records)?;
    Ok(BranchRender { deformed, output })
}

/// Face pass and mouth pass, fused with the given hair layer.
pub fn render_portrait(
    face: (&PrimitiveCloud, &DeformationField),
    mouth: (&PrimitiveCloud, &DeformationField),
    frame: &ConditioningFrame,
    hair_color: &Image,
    keep_records: bool,
) -> Result<PortraitRender> {
    let face = render_branch(face.0, face.1, frame, &frame.camera, keep_records)?;
    let mouth = render_branch(mouth.0, mouth.1, frame, &frame.camera, keep_records)?;
    let layers = PortraitLayers {
        hair_color: hair_color.clone(),
        face_color: face.output.color.clone(),
        face_opacity: face.output.opacity.clone(),
        mouth_color: mouth.output.color.clone(),
    };
    let fused = fuse(&layers)?;
    Ok(PortraitRender { face, mouth, layers, fused })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_mask<R: Rng>(w: usize, h: usize, p: f64, rng: &mut R) -> Mask {
        let mut m = Mask::new(w, h);
        for v in m.data.iter_mut() {
            *v = rng.random::<f64>() < p;
        }
        m
    }

    fn random_image<R: Rng>(w: usize, h: usize, c: usize, rng: &mut R) -> Image {
        let mut im = Image::new(w, h, c);
        for v in im.data.iter_mut() {
            *v = rng.random();
        }
        im
    }

    #[test]
    fn dilation_radius_zero_is_identity() {
        let m = random_mask(20, 13, 0.3, &mut stream_rng(1, Stream::Synth));
        assert_eq!(dilate_mask(&m, 0), m);
    }

    #[test]
    fn dilating_one_pixel_by_one_gives_a_plus() {
        let mut m = Mask::new(5, 5);
        m.set(2, 2, true);
        let d = dilate_mask(&m, 1);
        assert_eq!(d.count(), 5);
        for (x, y) in [(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)] {
            assert!(d.get(x, y));
        }
    }

    #[test]
    fn repeated_dilation_covers_the_larger_radius() {
        let mut rng = stream_rng(2, Stream::Synth);
        for _ in 0..20 {
            let m = random_mask(32, 32, 0.02, &mut rng);
            let r1 = rng.random_range(0..4);
            let r2 = rng.random_range(0..4);
            let twice = dilate_mask(&dilate_mask(&m, r1), r2);
            let once = dilate_mask(&m, r1.max(r2));
            assert!(once.data.iter().zip(&twice.data).all(|(&a, &b)| !a || b));
        }
    }

    #[test]
    fn hair_layer_edge_cases_and_oracle() {
        let mut rng = stream_rng(3, Stream::Synth);
        let frame = random_image(9, 7, 3, &mut rng);
        assert!(extract_hair_layer(&frame, &Mask::new(9, 7)).unwrap().data.iter().all(|&v| v == 0.0));
        assert_eq!(extract_hair_layer(&frame, &Mask::full(9, 7)).unwrap(), frame);
        let m = random_mask(9, 7, 0.5, &mut rng);
        let got = extract_hair_layer(&frame, &m).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                for c in 0..3 {
                    let want = if m.get(x, y) { frame.get(x, y, c) } else { 0.0 };
                    assert_eq!(got.get(x, y, c), want);
                }
            }
        }
        assert!(extract_hair_layer(&frame, &Mask::new(8, 7)).is_err());
    }

    fn random_layers<R: Rng>(w: usize, h: usize, rng: &mut R) -> PortraitLayers {
        let hair_mask = random_mask(w, h, 0.3, rng);
        PortraitLayers {
            hair_color: random_image(w, h, 3, rng).masked(&hair_mask).unwrap(),
            face_color: random_image(w, h, 3, rng),
            face_opacity: random_image(w, h, 1, rng),
            mouth_color: random_image(w, h, 3, rng),
        }
    }

    #[test]
    fn collapse_identities_are_exact() {
        let mut rng = stream_rng(4, Stream::Synth);
        let mut l = random_layers(8, 8, &mut rng);
        l.hair_color = Image::new(8, 8, 3);
        l.face_opacity = Image::filled(8, 8, 1, 1.0);
        assert_eq!(fuse(&l).unwrap().image, l.face_color);
        l.face_opacity = Image::filled(8, 8, 1, 0.0);
        assert_eq!(fuse(&l).unwrap().image, l.mouth_color);
    }

    #[test]
    fn overlap_is_clamped_and_reported() {
        let l = PortraitLayers {
            hair_color: Image::filled(2, 1, 3, 0.8),
            face_color: Image::filled(2, 1, 3, 0.5),
            face_opacity: Image::filled(2, 1, 1, 1.0),
            mouth_color: Image::new(2, 1, 3),
        };
        let f = fuse(&l).unwrap();
        assert!(f.image.data.iter().all(|&v| v == 1.0));
        assert_eq!(f.diagnostics.clamped_values, 6);
        assert!((f.diagnostics.overlap_energy - 6.0 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let mut l = random_layers(4, 4, &mut stream_rng(5, Stream::Synth));
        l.face_opacity = Image::new(4, 4, 3);
        assert!(fuse(&l).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream_rng(6, Stream::Synth);
        let mut l = random_layers(5, 4, &mut rng);
        // keep away from the clamp so the loss is smooth
        for v in l.hair_color.data.iter_mut() {
            *v *= 0.1;
        }
        for v in l.face_color.data.iter_mut().chain(l.mouth_color.data.iter_mut()) {
            *v *= 0.4;
        }
        let w = random_image(5, 4, 3, &mut rng);
        let loss = |l: &PortraitLayers| fuse(l).unwrap().image.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>();
        let fused = fuse(&l).unwrap();
        let g = fuse_backward(&l, &fused, &w).unwrap();
        let h = 1e-6;
        let check = |get: &dyn Fn(&mut PortraitLayers) -> &mut Vec<f64>, grads: &[f64]| {
            for i in 0..grads.len() {
                let (mut a, mut b) = (l.clone(), l.clone());
                get(&mut a)[i] += h;
                get(&mut b)[i] -= h;
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                assert!((fd - grads[i]).abs() < 1e-5, "{i}: {fd} vs {}", grads[i]);
            }
        };
        check(&|l| &mut l.face_color.data, &g.face_color.data);
        check(&|l| &mut l.mouth_color.data, &g.mouth_color.data);
        check(&|l| &mut l.face_opacity.data, &g.face_opacity.data);
    }

    proptest! {
        #[test]
        fn fusion_is_linear_in_the_face_term(seed in 0u64..500, k in -4i32..4) {
            let mut rng = stream_rng(seed, Stream::Synth);
            let l = random_layers(6, 5, &mut rng);
            let mut scaled = l.clone();
            let k = k as f64;
            for v in scaled.face_color.data.iter_mut() {
                *v *= k;
            }
            let a = fuse_unclamped(&l).unwrap();
            let b = fuse_unclamped(&scaled).unwrap();
            for p in 0..30 {
                let o = l.face_opacity.data[p];
                for c in 0..3 {
                    let i = p * 3 + c;
                    let face = l.face_color.data[i] * o;
                    let rest = a.data[i] - face;
                    prop_assert!((b.data[i] - (rest + k * face)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn hair_passes_through_where_branches_vanish(seed in 0u64..500) {
            let mut rng = stream_rng(seed, Stream::Synth);
            let mut l = random_layers(6, 6, &mut rng);
            let frame = random_image(6, 6, 3, &mut rng);
            let hair = random_mask(6, 6, 0.5, &mut rng);
            l.hair_color = extract_hair_layer(&frame, &hair).unwrap();
            for p in 0..36 {
                if hair.data[p] {
                    l.face_opacity.data[p] = 0.0;
                    for c in 0..3 {
                        l.mouth_color.data[p * 3 + c] = 0.0;
                    }
                }
            }
            let f = fuse(&l).unwrap();
            for p in 0..36 {
                if hair.data[p] {
                    for c in 0..3 {
                        prop_assert_eq!(f.image.data[p * 3 + c], frame.data[p * 3 + c]);
                    }
                }
            }
        }
    }
}
