//! Deformation field: a tri-plane hash encoding of the canonical position,
//! concatenated with the per-primitive embedding and the frame's audio and
//! expression features, decoded by an MLP into position, log-scale and
//! quaternion offsets.

pub mod encoder;
pub mod mlp;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

pub use encoder::{EncoderConfig, TriPlaneHashEncoder};
pub use mlp::{Mlp, MlpTrace};

use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::parallel;
use crate::render::CloudGradients;
use crate::scene::{Bounds, GaussianPrimitive, PrimitiveCloud};

/// Number of MLP outputs: 3 position, 3 log-scale, 4 quaternion.
pub const DELTA_WIDTH: usize = 10;

const BACKWARD_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldLayout {
    pub embedding_dim: usize,
    pub audio_dim: usize,
    pub expression_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldConfig {
    pub encoder: EncoderConfig,
    pub hidden: Vec<usize>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig { encoder: EncoderConfig::default(), hidden: vec![64, 64, 64] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DeformationDelta {
    pub d_mu: Vec3,
    pub d_scale: Vec3,
    pub d_rot: [f64; 4],
}

impl DeformationDelta {
    pub const ZERO: DeformationDelta = DeformationDelta { d_mu: [0.0; 3], d_scale: [0.0; 3], d_rot: [0.0; 4] };

    pub fn from_slice(v: &[f64]) -> Self {
        DeformationDelta {
            d_mu: [v[0], v[1], v[2]],
            d_scale: [v[3], v[4], v[5]],
            d_rot: [v[6], v[7], v[8], v[9]],
        }
    }

    pub fn to_array(&self) -> [f64; DELTA_WIDTH] {
        let mut out = [0.0; DELTA_WIDTH];
        out[..3].copy_from_slice(&self.d_mu);
        out[3..6].copy_from_slice(&self.d_scale);
        out[6..].copy_from_slice(&self.d_rot);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// `θ_D = θ_C + δ`: position, raw scale and raw quaternion are offset while
/// opacity, color and embedding pass through. The stored quaternion is the
/// raw sum; activation normalizes it.
pub fn apply_deformation(canonical: &GaussianPrimitive, delta: &DeformationDelta) -> Result<GaussianPrimitive> {
    let mut out = canonical.clone();
    for k in 0..3 {
        out.mu[k] += delta.d_mu[k];
        out.raw_scale[k] += delta.d_scale[k];
    }
    for k in 0..4 {
        out.raw_rotation[k] += delta.d_rot[k];
    }
    let n2: f64 = out.raw_rotation.iter().map(|v| v * v).sum();
    if n2 == 0.0 || !n2.is_finite() {
        return Err(Error::DegenerateRotation);
    }
    Ok(out)
}

/// Gradients of the field parameters, dense over the encoder tables and the
/// flat MLP parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGradients {
    pub tables: Vec<f64>,
    pub mlp: Vec<f64>,
}

impl FieldGradients {
    pub fn zeros(field: &DeformationField) -> Self {
        FieldGradients { tables: vec![0.0; field.encoder.tables.len()], mlp: vec![0.0; field.mlp.params.len()] }
    }

    pub fn accumulate(&mut self, other: &FieldGradients) {
        for (a, b) in self.tables.iter_mut().zip(&other.tables) {
            *a += b;
        }
        for (a, b) in self.mlp.iter_mut().zip(&other.mlp) {
            *a += b;
        }
    }
}

/// Gradients w.r.t. the per-primitive MLP inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradients {
    pub mu: Vec3,
    pub embedding: Vec<f64>,
    pub audio: Vec<f64>,
    pub expression: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub layout: FieldLayout,
    pub encoder: TriPlaneHashEncoder,
    pub mlp: Mlp,
}

/// A deformed cloud plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct DeformedCloud {
    pub cloud: PrimitiveCloud,
    pub deltas: Vec<DeformationDelta>,
    traces: Vec<MlpTrace>,
    audio: Vec<f64>,
    expression: Vec<f64>,
}

impl DeformationField {
    pub fn new<R: Rng>(layout: FieldLayout, config: &FieldConfig, bounds: Bounds, rng: &mut R) -> Result<Self> {
        let encoder = TriPlaneHashEncoder::new(config.encoder, bounds, rng)?;
        let mut widths = vec![encoder.output_width() + layout.embedding_dim + layout.audio_dim + layout.expression_dim];
        widths.extend_from_slice(&config.hidden);
        widths.push(DELTA_WIDTH);
        let mlp = Mlp::new(&widths, rng)?;
        Ok(DeformationField { layout, encoder, mlp })
    }

    pub fn from_parts(layout: FieldLayout, encoder: TriPlaneHashEncoder, mlp: Mlp) -> Result<Self> {
        let expected = encoder.output_width() + layout.embedding_dim + layout.audio_dim + layout.expression_dim;
        if mlp.input_width() != expected {
            return Err(Error::DimensionMismatch { what: "field input width", expected, actual: mlp.input_width() });
        }
        if mlp.output_width() != DELTA_WIDTH {
            return Err(Error::DimensionMismatch {
                what: "field output width",
                expected: DELTA_WIDTH,
                actual: mlp.output_width(),
            });
        }
        Ok(DeformationField { layout, encoder, mlp })
    }

    pub fn input_width(&self) -> usize {
        self.mlp.input_width()
    }

    fn check_inputs(&self, z: &[f64], audio: &[f64], expression: &[f64]) -> Result<()> {
        let checks = [
            ("embedding", self.layout.embedding_dim, z.len()),
            ("audio features", self.layout.audio_dim, audio.len()),
            ("expression features", self.layout.expression_dim, expression.len()),
        ];
        for (what, expected, actual) in checks {
            if expected != actual {
                return Err(Error::Config(format!("{what} width mismatch: field expects {expected}, got {actual}")));
            }
        }
        Ok(())
    }

    fn assemble(&self, mu: &Vec3, z: &[f64], audio: &[f64], expression: &[f64]) -> Vec<f64> {
        let enc = self.encoder.output_width();
        let mut input = vec![0.0; self.input_width()];
        self.encoder.encode_into(mu, &mut input[..enc]);
        let mut at = enc;
        for part in [z, audio, expression] {
            input[at..at + part.len()].copy_from_slice(part);
            at += part.len();
        }
        input
    }

    pub fn predict(&self, mu: &Vec3, z: &[f64], audio: &[f64], expression: &[f64]) -> Result<DeformationDelta> {
        Ok(self.predict_traced(mu, z, audio, expression)?.0)
    }

    pub fn predict_traced(
        &self,
        mu: &Vec3,
        z: &[f64],
        audio: &[f64],
        expression: &[f64],
    ) -> Result<(DeformationDelta, MlpTrace)> {
        self.check_inputs(z, audio, expression)?;
        let trace = self.mlp.forward(&self.assemble(mu, z, audio, expression));
        Ok((DeformationDelta::from_slice(trace.output()), trace))
    }

    /// Backward of one prediction. Table gradients are appended as sparse
    /// `(offset, value)` pairs; MLP gradients accumulate densely.
    pub fn backward_one(
        &self,
        mu: &Vec3,
        trace: &MlpTrace,
        d_delta: &[f64; DELTA_WIDTH],
        table_grads: &mut Vec<(u32, f64)>,
        mlp_grads: &mut [f64],
    ) -> InputGradients {
        let d_in = self.mlp.backward(trace, d_delta, mlp_grads);
        let enc = self.encoder.output_width();
        let d_mu = self.encoder.backward(mu, &d_in[..enc], table_grads);
        let (d, a) = (self.layout.embedding_dim, self.layout.audio_dim);
        InputGradients {
            mu: d_mu,
            embedding: d_in[enc..enc + d].to_vec(),
            audio: d_in[enc + d..enc + d + a].to_vec(),
            expression: d_in[enc + d + a..].to_vec(),
        }
    }

    /// Deforms every primitive of `cloud` for one frame.
    pub fn deform_cloud(&self, cloud: &PrimitiveCloud, audio: &[f64], expression: &[f64]) -> Result<DeformedCloud> {
        self.check_inputs(&vec![0.0; cloud.embedding_dim], audio, expression)?;
        let results = parallel::map_indexed(cloud.len(), |i| {
            let p = &cloud.primitives[i];
            let (delta, trace) = self.predict_traced(&p.mu, &p.embedding, audio, expression)?;
            debug_assert!(
                !delta.is_finite() || math::norm(&delta.d_mu) <= cloud.bounds.diagonal(),
                "position offset exceeds the scene diagonal"
            );
            Ok((apply_deformation(p, &delta)?, delta, trace))
        });
        let mut out = DeformedCloud {
            cloud: PrimitiveCloud::empty(cloud.branch, cloud.bounds, cloud.embedding_dim, cloud.color_model),
            deltas: Vec::with_capacity(cloud.len()),
            traces: Vec::with_capacity(cloud.len()),
            audio: audio.to_vec(),
            expression: expression.to_vec(),
        };
        for r in results {
            let (p, delta, trace) = r?;
            out.cloud.primitives.push(p);
            out.deltas.push(delta);
            out.traces.push(trace);
        }
        Ok(out)
    }

    /// Maps gradients w.r.t. the deformed cloud back onto the canonical cloud
    /// and the field parameters.
    pub fn backward_cloud(
        &self,
        canonical: &PrimitiveCloud,
        deformed: &DeformedCloud,
        d_deformed: &CloudGradients,
    ) -> Result<(CloudGradients, FieldGradients)> {
        let n = canonical.len();
        if deformed.traces.len() != n || d_deformed.len() != n {
            return Err(Error::shape(format!(
                "deformed cloud ({}) and gradients ({}) do not match canonical cloud ({n})",
                deformed.traces.len(),
                d_deformed.len()
            )));
        }
        let d = canonical.embedding_dim;
        let chunks = parallel::map_chunks(n, BACKWARD_CHUNK, |range| {
            let mut tables = Vec::new();
            let mut mlp = vec![0.0; self.mlp.params.len()];
            let mut inputs = Vec::with_capacity(range.len());
            for i in range {
                let mut d_delta = [0.0; DELTA_WIDTH];
                d_delta[..3].copy_from_slice(&d_deformed.mu[i]);
                d_delta[3..6].copy_from_slice(&d_deformed.raw_scale[i]);
                d_delta[6..].copy_from_slice(&d_deformed.raw_rotation[i]);
                if d_delta.iter().all(|&g| g == 0.0) {
                    inputs.push(None);
                    continue;
                }
                let p = &canonical.primitives[i];
                inputs.push(Some(self.backward_one(&p.mu, &deformed.traces[i], &d_delta, &mut tables, &mut mlp)));
            }
            (tables, mlp, inputs)
        });
        let mut field = FieldGradients::zeros(self);
        let mut out = d_deformed.clone();
        let mut i = 0;
        for (tables, mlp, inputs) in chunks {
            for (off, g) in tables {
                field.tables[off as usize] += g;
            }
            for (a, b) in field.mlp.iter_mut().zip(&mlp) {
                *a += b;
            }
            for input in inputs {
                if let Some(g) = input {
                    for k in 0..3 {
                        out.mu[i][k] += g.mu[k];
                    }
                    for (a, b) in out.embedding[i * d..(i + 1) * d].iter_mut().zip(&g.embedding) {
                        *a += b;
                    }
                }
                i += 1;
            }
        }
        Ok((out, field))
    }
}

impl DeformedCloud {
    pub fn audio(&self) -> &[f64] {
        &self.audio
    }

    pub fn expression(&self) -> &[f64] {
        &self.expression
    }
}

/// Free-function form of [`DeformationField::predict`].
pub fn predict_deformation(
    mu: &Vec3,
    z: &[f64],
    audio: &[f64],
    expression: &[f64],
    field: &DeformationField,
) -> Result<DeformationDelta> {
    field.predict(mu, z, audio, expression)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;
    use crate::render::render;
    use crate::rng::{stream_rng, Stream};
    use crate::scene::{init_random_cloud, Branch, ColorModel};

    fn small_config() -> FieldConfig {
        FieldConfig {
            encoder: EncoderConfig { levels: 3, table_size: 1 << 8, features: 2, min_resolution: 4, max_resolution: 16 },
            hidden: vec![16, 16],
        }
    }

    fn layout(d: usize) -> FieldLayout {
        FieldLayout { embedding_dim: d, audio_dim: 4, expression_dim: 3 }
    }

    fn randomize(field: &mut DeformationField, seed: u64, scale: f64) {
        let mut rng = stream_rng(seed, Stream::GradCheck);
        for p in field.mlp.params.iter_mut() {
            *p += (rng.random::<f64>() - 0.5) * scale;
        }
        for t in field.encoder.tables.iter_mut() {
            *t = (rng.random::<f64>() - 0.5) * scale;
        }
    }

    #[test]
    fn fresh_field_predicts_zero() {
        let field = DeformationField::new(layout(5), &FieldConfig::default(), Bounds::unit_cube(), &mut stream_rng(1, Stream::FaceField)).unwrap();
        assert_eq!(field.input_width(), 48 + 5 + 4 + 3);
        let d = field.predict(&[0.1, 0.2, 0.3], &[1.0; 5], &[0.5; 4], &[-0.5; 3]).unwrap();
        assert_eq!(d, DeformationDelta::ZERO);
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let field = DeformationField::new(layout(5), &small_config(), Bounds::unit_cube(), &mut stream_rng(1, Stream::FaceField)).unwrap();
        assert!(matches!(field.predict(&[0.0; 3], &[0.0; 4], &[0.0; 4], &[0.0; 3]), Err(Error::Config(_))));
        assert!(matches!(field.predict(&[0.0; 3], &[0.0; 5], &[0.0; 2], &[0.0; 3]), Err(Error::Config(_))));
    }

    #[test]
    fn empty_embedding_equals_field_without_embedding() {
        // a d=0 field is the same computation as any d field whose embedding
        // weights are absent
        let mut rng = stream_rng(3, Stream::FaceField);
        let mut field = DeformationField::new(layout(0), &small_config(), Bounds::unit_cube(), &mut rng).unwrap();
        randomize(&mut field, 4, 1.0);
        let a = field.predict(&[0.3, 0.4, 0.5], &[], &[0.1, 0.2, 0.3, 0.4], &[1.0, 0.0, -1.0]).unwrap();
        let b = field.predict(&[0.3, 0.4, 0.5], &[], &[0.1, 0.2, 0.3, 0.4], &[1.0, 0.0, -1.0]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, DeformationDelta::ZERO);
    }

    fn primitive() -> GaussianPrimitive {
        GaussianPrimitive {
            mu: [0.1, -0.2, 0.3],
            raw_scale: [-2.0, -2.5, -1.5],
            raw_rotation: [0.9, 0.1, -0.2, 0.3],
            raw_opacity: 0.4,
            color_feature: vec![0.2, 0.5, 0.7],
            embedding: vec![0.01, -0.02],
        }
    }

    #[test]
    fn zero_delta_is_identity() {
        let p = primitive();
        assert_eq!(apply_deformation(&p, &DeformationDelta::ZERO).unwrap(), p);
    }

    #[test]
    fn translation_delta_moves_only_the_center() {
        let p = primitive();
        let d = DeformationDelta { d_mu: [1.0, 0.0, 0.0], ..DeformationDelta::ZERO };
        let q = apply_deformation(&p, &d).unwrap();
        assert_eq!(q.mu, [1.1, -0.2, 0.3]);
        assert_eq!((q.raw_scale, q.raw_rotation, q.raw_opacity), (p.raw_scale, p.raw_rotation, p.raw_opacity));
        assert_eq!((&q.color_feature, &q.embedding), (&p.color_feature, &p.embedding));
    }

    #[test]
    fn degenerate_rotation_is_rejected() {
        let p = primitive();
        let d = DeformationDelta { d_rot: [-0.9, -0.1, 0.2, -0.3], ..DeformationDelta::ZERO };
        assert!(matches!(apply_deformation(&p, &d), Err(Error::DegenerateRotation)));
    }

    #[test]
    fn position_offsets_add_and_invert() {
        let mut p = primitive();
        p.mu = [0.5, -0.25, 0.75];
        let a = DeformationDelta { d_mu: [0.25, -0.5, 0.125], d_scale: [0.1, 0.0, 0.0], d_rot: [0.0, 0.1, 0.0, 0.0] };
        let b = DeformationDelta { d_mu: [0.5, 0.25, -0.75], ..DeformationDelta::ZERO };
        let ab = DeformationDelta { d_mu: math::add(&a.d_mu, &b.d_mu), ..DeformationDelta::ZERO };
        let two = apply_deformation(&apply_deformation(&p, &DeformationDelta { d_mu: a.d_mu, ..DeformationDelta::ZERO }).unwrap(), &b).unwrap();
        assert_eq!(two.mu, apply_deformation(&p, &DeformationDelta { d_mu: ab.d_mu, ..DeformationDelta::ZERO }).unwrap().mu);

        let moved = apply_deformation(&p, &a).unwrap();
        let back = apply_deformation(&moved, &DeformationDelta { d_mu: [-0.25, 0.5, -0.125], ..DeformationDelta::ZERO }).unwrap();
        assert_eq!(back.mu, p.mu);
    }

    #[test]
    fn random_delta_changes_the_render() {
        let mut rng = stream_rng(9, Stream::GradCheck);
        let bounds = Bounds::new([-0.5; 3], [0.5; 3]).unwrap();
        let cloud = init_random_cloud(30, bounds, Branch::Face, 2, ColorModel::Rgb, &mut rng).unwrap();
        let cam = Camera::looking_at_origin(32, 32, 40.0, 3.0);
        let mut moved = cloud.clone();
        for p in moved.primitives.iter_mut() {
            let d = DeformationDelta { d_mu: [0.05, -0.03, 0.0], d_scale: [0.1; 3], d_rot: [0.0, 0.05, 0.0, 0.0] };
            *p = apply_deformation(p, &d).unwrap();
        }
        let a = render(&cloud, &cam, [0.0; 3]).unwrap();
        let b = render(&moved, &cam, [0.0; 3]).unwrap();
        assert_ne!(a.color, b.color);
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = stream_rng(5, Stream::FaceField);
        let bounds = Bounds::new([-1.0; 3], [1.0; 3]).unwrap();
        let mut field = DeformationField::new(layout(2), &small_config(), bounds, &mut rng).unwrap();
        randomize(&mut field, 6, 0.6);
        let w: [f64; DELTA_WIDTH] = core::array::from_fn(|i| (i as f64 * 0.37).sin());
        let mu = [0.13, -0.42, 0.27];
        let z = [0.3, -0.1];
        let fa = [0.2, 0.4, -0.3, 0.1];
        let fe = [0.5, -0.6, 0.05];
        let loss = |f: &DeformationField, mu: &Vec3, z: &[f64], fa: &[f64], fe: &[f64]| {
            f.predict(mu, z, fa, fe).unwrap().to_array().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, trace) = field.predict_traced(&mu, &z, &fa, &fe).unwrap();
        let mut tg = Vec::new();
        let mut mg = vec![0.0; field.mlp.params.len()];
        let g = field.backward_one(&mu, &trace, &w, &mut tg, &mut mg);
        let h = 1e-6;
        let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) || (fd - an).abs() < 1e-8;
        for k in 0..3 {
            let (mut a, mut b) = (mu, mu);
            a[k] += h;
            b[k] -= h;
            let fd = (loss(&field, &a, &z, &fa, &fe) - loss(&field, &b, &z, &fa, &fe)) / (2.0 * h);
            assert!(close(fd, g.mu[k]), "mu {k}: {fd} vs {}", g.mu[k]);
        }
        for k in 0..2 {
            let (mut a, mut b) = (z, z);
            a[k] += h;
            b[k] -= h;
            let fd = (loss(&field, &mu, &a, &fa, &fe) - loss(&field, &mu, &b, &fa, &fe)) / (2.0 * h);
            assert!(close(fd, g.embedding[k]));
        }
        for k in 0..4 {
            let (mut a, mut b) = (fa, fa);
            a[k] += h;
            b[k] -= h;
            let fd = (loss(&field, &mu, &z, &a, &fe) - loss(&field, &mu, &z, &b, &fe)) / (2.0 * h);
            assert!(close(fd, g.audio[k]));
        }
        for k in 0..3 {
            let (mut a, mut b) = (fe, fe);
            a[k] += h;
            b[k] -= h;
            let fd = (loss(&field, &mu, &z, &fa, &a) - loss(&field, &mu, &z, &fa, &b)) / (2.0 * h);
            assert!(close(fd, g.expression[k]));
        }
        let mut dense = vec![0.0; field.encoder.tables.len()];
        for (i, v) in tg {
            dense[i as usize] += v;
        }
        for i in (0..dense.len()).step_by(97) {
            let mut a = field.clone();
            let mut b = field.clone();
            a.encoder.tables[i] += h;
            b.encoder.tables[i] -= h;
            let fd = (loss(&a, &mu, &z, &fa, &fe) - loss(&b, &mu, &z, &fa, &fe)) / (2.0 * h);
            assert!(close(fd, dense[i]), "table {i}");
        }
    }
}
