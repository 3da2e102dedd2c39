//! Adaptive density control: clone small splats and split large ones whose
//! average screen-space positional gradient is high, then prune faint or
//! oversized splats.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;
use crate::render::CloudGradients;
use crate::scene::{GaussianPrimitive, PrimitiveCloud};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyConfig {
    pub interval: u64,
    pub start: u64,
    pub end: u64,
    /// Average screen-space positional gradient that triggers densification.
    pub grad_threshold: f64,
    pub min_opacity: f64,
    /// Splats larger than this fraction of the scene diagonal are split
    /// rather than cloned.
    pub percent_dense: f64,
    /// Splats larger than this fraction of the scene diagonal are pruned.
    pub max_world_size: f64,
    pub split_factor: f64,
    pub max_splats: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            interval: 100,
            start: 500,
            end: 15_000,
            grad_threshold: 2e-4,
            min_opacity: 0.005,
            percent_dense: 0.01,
            max_world_size: 0.5,
            split_factor: 1.6,
            max_splats: 200_000,
        }
    }
}

impl DensifyConfig {
    /// Whether densification runs after `iteration` (1-based).
    pub fn is_due(&self, iteration: u64) -> bool {
        self.interval > 0 && iteration >= self.start && iteration <= self.end && iteration % self.interval == 0
    }
}

/// Running sums of the screen-space positional gradient per splat.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub visible_count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(len: usize) -> Self {
        DensifyStats { grad_sum: vec![0.0; len], visible_count: vec![0; len] }
    }

    pub fn accumulate(&mut self, grads: &CloudGradients) {
        for i in 0..self.grad_sum.len().min(grads.len()) {
            if grads.visible[i] {
                self.grad_sum[i] += grads.mean2d_norm[i];
                self.visible_count[i] += 1;
            }
        }
    }

    pub fn average(&self, i: usize) -> f64 {
        match self.visible_count[i] {
            0 => 0.0,
            n => self.grad_sum[i] / n as f64,
        }
    }
}

/// Where a primitive of the new cloud came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Kept(usize),
    Cloned(usize),
    Split(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Remap {
    /// `origins[new_index]`.
    pub origins: Vec<Origin>,
}

impl Remap {
    pub fn identity(n: usize) -> Self {
        Remap { origins: (0..n).map(Origin::Kept).collect() }
    }
}

/// Point drawn from the primitive's own Gaussian.
fn sample_offset<R: Rng>(p: &GaussianPrimitive, rng: &mut R) -> Result<[f64; 3]> {
    let a = p.activate()?;
    let r = math::quat_to_mat(&a.rotation);
    let e: [f64; 3] = core::array::from_fn(|k| {
        let n: f64 = StandardNormal.sample(rng);
        n * a.scale[k]
    });
    Ok(math::mat_vec(&r, &e))
}

/// Runs one densify/prune pass. Kept primitives come first in their old
/// order, then clones, then split children.
pub fn densify_and_prune<R: Rng>(
    cloud: &PrimitiveCloud,
    stats: &DensifyStats,
    config: &DensifyConfig,
    rng: &mut R,
) -> Result<(PrimitiveCloud, Remap)> {
    let n = cloud.len();
    if stats.grad_sum.len() != n {
        return Err(Error::DimensionMismatch { what: "densify statistics", expected: n, actual: stats.grad_sum.len() });
    }
    let diag = cloud.bounds.diagonal();
    let dense_size = config.percent_dense * diag;
    let mut kept = Vec::new();
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    let mut budget = config.max_splats.saturating_sub(n);
    for (i, p) in cloud.primitives.iter().enumerate() {
        let hot = stats.average(i) >= config.grad_threshold;
        let size = p.scale().iter().cloned().fold(0.0, f64::max);
        if hot && size <= dense_size && budget >= 1 {
            budget -= 1;
            kept.push((Origin::Kept(i), p.clone()));
            let mut c = p.clone();
            let off = sample_offset(p, rng)?;
            c.mu = math::add(&c.mu, &off);
            clones.push((Origin::Cloned(i), c));
        } else if hot && size > dense_size && budget >= 1 {
            budget -= 1;
            let shrink = math::ln(config.split_factor);
            for _ in 0..2 {
                let mut c = p.clone();
                let off = sample_offset(p, rng)?;
                c.mu = math::add(&c.mu, &off);
                c.raw_scale = c.raw_scale.map(|s| s - shrink);
                splits.push((Origin::Split(i), c));
            }
        } else {
            kept.push((Origin::Kept(i), p.clone()));
        }
    }
    let max_size = config.max_world_size * diag;
    let mut out = PrimitiveCloud::empty(cloud.branch, cloud.bounds, cloud.embedding_dim, cloud.color_model);
    let mut origins = Vec::new();
    for (origin, p) in kept.into_iter().chain(clones).chain(splits) {
        let size = p.scale().iter().cloned().fold(0.0, f64::max);
        if p.opacity() < config.min_opacity || size > max_size || !p.is_finite() {
            continue;
        }
        origins.push(origin);
        out.primitives.push(p);
    }
    if out.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok((out, Remap { origins }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use crate::scene::{init_random_cloud, Bounds, Branch, ColorModel};

    fn cloud() -> PrimitiveCloud {
        let b = Bounds::new([-1.0; 3], [1.0; 3]).unwrap();
        let mut c = init_random_cloud(20, b, Branch::Face, 2, ColorModel::Rgb, &mut stream_rng(1, Stream::FaceCloud)).unwrap();
        for p in c.primitives.iter_mut() {
            p.raw_opacity = 0.0;
        }
        c
    }

    #[test]
    fn zero_gradients_only_prune_by_opacity() {
        let mut c = cloud();
        c.primitives[3].raw_opacity = -10.0;
        let stats = DensifyStats::new(c.len());
        let (out, remap) = densify_and_prune(&c, &stats, &DensifyConfig::default(), &mut stream_rng(1, Stream::Densify)).unwrap();
        assert_eq!(out.len(), 19);
        assert!(!remap.origins.contains(&Origin::Kept(3)));
        assert!(remap.origins.iter().all(|o| matches!(o, Origin::Kept(_))));
    }

    #[test]
    fn hot_small_splats_clone_and_hot_large_splats_split() {
        let mut c = cloud();
        c.primitives[0].raw_scale = [math::ln(0.001); 3];
        c.primitives[1].raw_scale = [math::ln(0.2); 3];
        let mut stats = DensifyStats::new(c.len());
        for i in 0..2 {
            stats.grad_sum[i] = 1.0;
            stats.visible_count[i] = 1;
        }
        let (out, remap) = densify_and_prune(&c, &stats, &DensifyConfig::default(), &mut stream_rng(2, Stream::Densify)).unwrap();
        assert_eq!(out.len(), 20 + 1 + 1);
        assert_eq!(remap.origins.iter().filter(|o| **o == Origin::Cloned(0)).count(), 1);
        assert_eq!(remap.origins.iter().filter(|o| **o == Origin::Split(1)).count(), 2);
        assert!(!remap.origins.contains(&Origin::Kept(1)));
        let child = out.primitives[remap.origins.iter().position(|o| *o == Origin::Split(1)).unwrap()].scale();
        assert!((child[0] - 0.2 / 1.6).abs() < 1e-12);
        assert!(out.primitives.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn pruning_everything_is_an_error() {
        let mut c = cloud();
        c.primitives.iter_mut().for_each(|p| p.raw_opacity = -20.0);
        let stats = DensifyStats::new(c.len());
        assert!(matches!(
            densify_and_prune(&c, &stats, &DensifyConfig::default(), &mut stream_rng(3, Stream::Densify)),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn schedule() {
        let c = DensifyConfig::default();
        assert!(!c.is_due(400));
        assert!(c.is_due(500));
        assert!(!c.is_due(550));
        assert!(c.is_due(15_000));
        assert!(!c.is_due(15_100));
    }
}
