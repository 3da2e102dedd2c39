//! Adam / AdamW over flat parameter groups, plus the per-cloud and per-field
//! group bundles the trainer steps.

use alloc::vec;
use alloc::vec::Vec;

use crate::densify::{Origin, Remap};
use crate::error::{Error, Result};
use crate::field::{DeformationField, FieldGradients};
use crate::math;
use crate::render::CloudGradients;
use crate::scene::PrimitiveCloud;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub const fn new(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub const fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub const fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// Moments for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    /// Gradient elements skipped because they were not finite.
    pub skipped: u64,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Adam { config, m: vec![0.0; len], v: vec![0.0; len], step: 0, skipped: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update at learning rate `lr`. Elements whose
    /// gradient is not finite are left untouched and counted.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                what: "optimizer group",
                expected: self.m.len(),
                actual: params.len().max(grads.len()),
            });
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - math::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - math::pow(c.beta2, self.step as f64);
        for i in 0..params.len() {
            let g = grads[i];
            if !g.is_finite() {
                self.skipped += 1;
                continue;
            }
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            if c.weight_decay != 0.0 {
                params[i] -= lr * c.weight_decay * params[i];
            }
            params[i] -= lr * m_hat / (math::sqrt(v_hat) + c.eps);
        }
        Ok(())
    }

    /// Rebuilds the moments for a densified cloud with `width` values per
    /// primitive; new primitives start from zero moments.
    pub fn remap(&mut self, remap: &Remap, width: usize) {
        let n = remap.origins.len();
        let (mut m, mut v) = (vec![0.0; n * width], vec![0.0; n * width]);
        for (new, origin) in remap.origins.iter().enumerate() {
            if let Origin::Kept(old) = *origin {
                m[new * width..(new + 1) * width].copy_from_slice(&self.m[old * width..(old + 1) * width]);
                v[new * width..(new + 1) * width].copy_from_slice(&self.v[old * width..(old + 1) * width]);
            }
        }
        self.m = m;
        self.v = v;
    }
}

/// Learning rates for a cloud's parameter groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudLearningRates {
    /// Initial position rate, multiplied by the cloud's spatial scale.
    pub position: f64,
    /// Final position rate as a fraction of the initial one.
    pub position_final_ratio: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub embedding: f64,
    pub embedding_weight_decay: f64,
}

impl Default for CloudLearningRates {
    fn default() -> Self {
        CloudLearningRates {
            position: 1.6e-4,
            position_final_ratio: 0.01,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            embedding: 5e-4,
            embedding_weight_decay: 1e-4,
        }
    }
}

impl CloudLearningRates {
    /// Exponential decay from `position` to `position * final_ratio` over
    /// `total` iterations.
    pub fn position_at(&self, iteration: u64, total: u64) -> f64 {
        if total == 0 {
            return self.position;
        }
        let t = (iteration as f64 / total as f64).clamp(0.0, 1.0);
        self.position * math::pow(self.position_final_ratio, t)
    }
}

/// Which cloud groups an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainableGroups {
    pub geometry: bool,
    pub opacity: bool,
    pub color: bool,
    pub embedding: bool,
}

impl TrainableGroups {
    pub const ALL: TrainableGroups = TrainableGroups { geometry: true, opacity: true, color: true, embedding: true };
    pub const COLOR_ONLY: TrainableGroups = TrainableGroups { geometry: false, opacity: false, color: true, embedding: false };
    pub const NO_EMBEDDING: TrainableGroups = TrainableGroups { geometry: true, opacity: true, color: true, embedding: false };
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudOptimizer {
    pub rates: CloudLearningRates,
    /// Multiplies the position rate; the half-diagonal of the cloud bounds.
    pub spatial_scale: f64,
    pub mu: Adam,
    pub scale: Adam,
    pub rotation: Adam,
    pub opacity: Adam,
    pub color: Adam,
    pub embedding: Adam,
}

fn flatten<const N: usize>(v: &[[f64; N]]) -> Vec<f64> {
    v.iter().flat_map(|a| a.iter().copied()).collect()
}

impl CloudOptimizer {
    pub fn new(cloud: &PrimitiveCloud, rates: CloudLearningRates) -> Self {
        let n = cloud.len();
        CloudOptimizer {
            rates,
            spatial_scale: 0.5 * cloud.bounds.diagonal(),
            mu: Adam::new(n * 3, AdamConfig::new(rates.position).with_eps(1e-15)),
            scale: Adam::new(n * 3, AdamConfig::new(rates.scale)),
            rotation: Adam::new(n * 4, AdamConfig::new(rates.rotation)),
            opacity: Adam::new(n, AdamConfig::new(rates.opacity)),
            color: Adam::new(n * cloud.color_dim(), AdamConfig::new(rates.color)),
            embedding: Adam::new(
                n * cloud.embedding_dim,
                AdamConfig::new(rates.embedding).with_weight_decay(rates.embedding_weight_decay),
            ),
        }
    }

    pub fn skipped(&self) -> u64 {
        [&self.mu, &self.scale, &self.rotation, &self.opacity, &self.color, &self.embedding]
            .iter()
            .map(|a| a.skipped)
            .sum()
    }

    /// Applies one step to the groups enabled in `groups`; the others are
    /// not read or written.
    pub fn step(
        &mut self,
        cloud: &mut PrimitiveCloud,
        grads: &CloudGradients,
        groups: TrainableGroups,
        iteration: u64,
        total: u64,
    ) -> Result<()> {
        let n = cloud.len();
        if grads.len() != n || self.opacity.len() != n {
            return Err(Error::DimensionMismatch { what: "cloud optimizer", expected: n, actual: grads.len() });
        }
        if groups.geometry {
            let mut mu = flatten(&cloud.primitives.iter().map(|p| p.mu).collect::<Vec<_>>());
            let lr = self.rates.position_at(iteration, total) * self.spatial_scale;
            self.mu.step(&mut mu, &flatten(&grads.mu), lr)?;
            let mut s = flatten(&cloud.primitives.iter().map(|p| p.raw_scale).collect::<Vec<_>>());
            self.scale.step(&mut s, &flatten(&grads.raw_scale), self.rates.scale)?;
            let mut q = flatten(&cloud.primitives.iter().map(|p| p.raw_rotation).collect::<Vec<_>>());
            self.rotation.step(&mut q, &flatten(&grads.raw_rotation), self.rates.rotation)?;
            for (i, p) in cloud.primitives.iter_mut().enumerate() {
                p.mu.copy_from_slice(&mu[i * 3..i * 3 + 3]);
                p.raw_scale.copy_from_slice(&s[i * 3..i * 3 + 3]);
                p.raw_rotation.copy_from_slice(&q[i * 4..i * 4 + 4]);
            }
        }
        if groups.opacity {
            let mut o: Vec<f64> = cloud.primitives.iter().map(|p| p.raw_opacity).collect();
            self.opacity.step(&mut o, &grads.raw_opacity, self.rates.opacity)?;
            for (p, v) in cloud.primitives.iter_mut().zip(o) {
                p.raw_opacity = v;
            }
        }
        if groups.color {
            let z = cloud.color_dim();
            let mut c: Vec<f64> = cloud.primitives.iter().flat_map(|p| p.color_feature.iter().copied()).collect();
            self.color.step(&mut c, &grads.color_feature, self.rates.color)?;
            for (i, p) in cloud.primitives.iter_mut().enumerate() {
                p.color_feature.copy_from_slice(&c[i * z..(i + 1) * z]);
            }
        }
        if groups.embedding && cloud.embedding_dim > 0 {
            let d = cloud.embedding_dim;
            let mut e: Vec<f64> = cloud.primitives.iter().flat_map(|p| p.embedding.iter().copied()).collect();
            self.embedding.step(&mut e, &grads.embedding, self.rates.embedding)?;
            for (i, p) in cloud.primitives.iter_mut().enumerate() {
                p.embedding.copy_from_slice(&e[i * d..(i + 1) * d]);
            }
        }
        Ok(())
    }

    pub fn remap(&mut self, remap: &Remap, color_dim: usize, embedding_dim: usize) {
        self.mu.remap(remap, 3);
        self.scale.remap(remap, 3);
        self.rotation.remap(remap, 4);
        self.opacity.remap(remap, 1);
        self.color.remap(remap, color_dim);
        self.embedding.remap(remap, embedding_dim);
    }
}

/// AdamW over the encoder tables and the MLP parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOptimizer {
    pub tables: Adam,
    pub mlp: Adam,
}

impl FieldOptimizer {
    pub const DEFAULT_LR: f64 = 5e-4;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

    pub fn new(field: &DeformationField, lr: f64, weight_decay: f64) -> Self {
        let cfg = AdamConfig::new(lr).with_weight_decay(weight_decay);
        FieldOptimizer { tables: Adam::new(field.encoder.tables.len(), cfg), mlp: Adam::new(field.mlp.params.len(), cfg) }
    }

    pub fn step(&mut self, field: &mut DeformationField, grads: &FieldGradients) -> Result<()> {
        let lr = self.tables.config.lr;
        self.tables.step(&mut field.encoder.tables, &grads.tables, lr)?;
        let lr = self.mlp.config.lr;
        self.mlp.step(&mut field.mlp.params, &grads.mlp, lr)
    }

    pub fn skipped(&self) -> u64 {
        self.tables.skipped + self.mlp.skipped
    }
}
