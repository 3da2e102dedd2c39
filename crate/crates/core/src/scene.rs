//! Gaussian primitives, their activations, and covariance construction.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};

/// Covariance below this condition number is inverted as-is.
pub const MAX_CONDITION: f64 = 1e12;
/// Diagonal regularizer applied beyond [`MAX_CONDITION`].
pub const COVARIANCE_EPSILON: f64 = 1e-8;

/// Opacity of freshly initialized primitives.
pub const INIT_OPACITY: f64 = 0.1;
/// Standard deviation of freshly initialized embeddings.
pub const INIT_EMBEDDING_STD: f64 = 0.01;

/// One splat. Raw fields are the optimized quantities; activated values come
/// from [`GaussianPrimitive::activate`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: Vec3,
    /// Log-scale; `s = exp(raw_scale)`.
    pub raw_scale: Vec3,
    /// Unnormalized quaternion `(w, x, y, z)`.
    pub raw_rotation: [f64; 4],
    /// Logit of the opacity.
    pub raw_opacity: f64,
    pub color_feature: Vec<f64>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activated {
    pub scale: Vec3,
    pub rotation: [f64; 4],
    pub opacity: f64,
}

impl GaussianPrimitive {
    pub fn activate(&self) -> Result<Activated> {
        activate_parameters(&self.raw_scale, &self.raw_rotation, self.raw_opacity)
    }

    pub fn scale(&self) -> Vec3 {
        self.raw_scale.map(math::exp)
    }

    pub fn opacity(&self) -> f64 {
        math::sigmoid(self.raw_opacity)
    }

    pub fn covariance(&self) -> Result<Covariance3> {
        let a = self.activate()?;
        build_covariance(&a.scale, &a.rotation)
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.raw_scale.iter().all(|v| v.is_finite())
            && self.raw_rotation.iter().all(|v| v.is_finite())
            && self.raw_opacity.is_finite()
            && self.color_feature.iter().all(|v| v.is_finite())
            && self.embedding.iter().all(|v| v.is_finite())
    }
}

/// `s = exp(raw_scale)`, `q = raw_rotation / |raw_rotation|`,
/// `alpha = logistic(raw_opacity)`.
pub fn activate_parameters(
    raw_scale: &Vec3,
    raw_rotation: &[f64; 4],
    raw_opacity: f64,
) -> Result<Activated> {
    if !(raw_scale.iter().all(|v| v.is_finite())
        && raw_rotation.iter().all(|v| v.is_finite())
        && raw_opacity.is_finite())
    {
        return Err(Error::invalid("non-finite raw parameter"));
    }
    Ok(Activated {
        scale: raw_scale.map(math::exp),
        rotation: normalize_quaternion(raw_rotation)?,
        opacity: math::sigmoid(raw_opacity),
    })
}

pub fn normalize_quaternion(q: &[f64; 4]) -> Result<[f64; 4]> {
    let n = math::sqrt(q.iter().map(|v| v * v).sum::<f64>());
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateRotation);
    }
    Ok(q.map(|v| v / n))
}

/// Symmetric positive semi-definite 3x3 covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3 {
    pub matrix: Mat3,
}

/// `R diag(s) diag(s) R^T`.
pub fn build_covariance(scale: &Vec3, rotation: &[f64; 4]) -> Result<Covariance3> {
    if !(scale.iter().all(|v| v.is_finite()) && rotation.iter().all(|v| v.is_finite())) {
        return Err(Error::invalid("non-finite scale or rotation"));
    }
    let r = math::quat_to_mat(rotation);
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * scale[j];
        }
    }
    let mut sigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let v = m[i][0] * m[j][0] + m[i][1] * m[j][1] + m[i][2] * m[j][2];
            sigma[i][j] = v;
            sigma[j][i] = v;
        }
    }
    Ok(Covariance3 { matrix: sigma })
}

/// `exp(-1/2 (x - mu)^T Sigma^-1 (x - mu))`, evaluated in the primitive's
/// principal frame so the inverse never has to be formed explicitly.
pub fn evaluate_density(primitive: &GaussianPrimitive, x: &Vec3) -> Result<f64> {
    let a = primitive.activate()?;
    let variances = a.scale.map(|s| s * s);
    let max = variances.iter().cloned().fold(0.0, f64::max);
    let min = variances.iter().cloned().fold(f64::INFINITY, f64::min);
    let eps = if min <= 0.0 || max / min > MAX_CONDITION {
        COVARIANCE_EPSILON
    } else {
        0.0
    };
    let variances = variances.map(|v| v + eps);
    if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::SingularCovariance);
    }
    let r = math::quat_to_mat(&a.rotation);
    let local = math::mat_t_vec(&r, &math::sub(x, &primitive.mu));
    let m2: f64 = (0..3).map(|k| local[k] * local[k] / variances[k]).sum();
    Ok(math::exp(-0.5 * m2))
}

/// Which portrait region a cloud reconstructs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Face,
    Mouth,
}

impl Branch {
    pub fn as_u8(self) -> u8 {
        match self {
            Branch::Face => 0,
            Branch::Mouth => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Branch::Face),
            1 => Some(Branch::Mouth),
            _ => None,
        }
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let b = Bounds { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn unit_cube() -> Self {
        Bounds {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if !(self.min[k].is_finite() && self.max[k].is_finite()) || self.max[k] < self.min[k] {
                return Err(Error::invalid(format!(
                    "empty bounds on axis {k}: [{}, {}]",
                    self.min[k], self.max[k]
                )));
            }
        }
        Ok(())
    }

    pub fn extent(&self) -> Vec3 {
        math::sub(&self.max, &self.min)
    }

    pub fn diagonal(&self) -> f64 {
        math::norm(&self.extent())
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn clamp(&self, p: &Vec3) -> Vec3 {
        [0, 1, 2].map(|k| p[k].clamp(self.min[k], self.max[k]))
    }
}

/// How the color feature maps to RGB.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorModel {
    /// `Z = 3`: the feature is the RGB color.
    Rgb,
    /// `Z = 12`: degree-1 spherical harmonics per channel, evaluated along
    /// the camera-to-center direction.
    SphericalHarmonics1,
}

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

impl ColorModel {
    pub fn from_dim(dim: usize) -> Result<Self> {
        match dim {
            3 => Ok(ColorModel::Rgb),
            12 => Ok(ColorModel::SphericalHarmonics1),
            other => Err(Error::Config(format!(
                "color feature dimension must be 3 (RGB) or 12 (SH degree 1), got {other}"
            ))),
        }
    }

    pub fn dim(self) -> usize {
        match self {
            ColorModel::Rgb => 3,
            ColorModel::SphericalHarmonics1 => 12,
        }
    }

    /// RGB for a feature seen along unit direction `dir`.
    pub fn eval(self, feature: &[f64], dir: &Vec3) -> [f64; 3] {
        match self {
            ColorModel::Rgb => [feature[0], feature[1], feature[2]],
            ColorModel::SphericalHarmonics1 => {
                let [x, y, z] = *dir;
                [0, 1, 2].map(|c| {
                    0.5 + SH_C0 * feature[c] - SH_C1 * y * feature[3 + c]
                        + SH_C1 * z * feature[6 + c]
                        - SH_C1 * x * feature[9 + c]
                })
            }
        }
    }

    /// Accumulates `dL/dfeature` into `d_feature` and returns `dL/ddir`.
    pub fn backward(self, feature: &[f64], dir: &Vec3, d_rgb: &[f64; 3], d_feature: &mut [f64]) -> Vec3 {
        match self {
            ColorModel::Rgb => {
                for c in 0..3 {
                    d_feature[c] += d_rgb[c];
                }
                [0.0; 3]
            }
            ColorModel::SphericalHarmonics1 => {
                let [x, y, z] = *dir;
                let mut d_dir = [0.0; 3];
                for c in 0..3 {
                    let g = d_rgb[c];
                    d_feature[c] += SH_C0 * g;
                    d_feature[3 + c] -= SH_C1 * y * g;
                    d_feature[6 + c] += SH_C1 * z * g;
                    d_feature[9 + c] -= SH_C1 * x * g;
                    d_dir[0] -= SH_C1 * feature[9 + c] * g;
                    d_dir[1] -= SH_C1 * feature[3 + c] * g;
                    d_dir[2] += SH_C1 * feature[6 + c] * g;
                }
                d_dir
            }
        }
    }

    pub fn is_view_dependent(self) -> bool {
        matches!(self, ColorModel::SphericalHarmonics1)
    }
}

/// Ordered primitives of one branch. Indices are stable identities for
/// gradient accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveCloud {
    pub primitives: Vec<GaussianPrimitive>,
    pub branch: Branch,
    pub bounds: Bounds,
    pub embedding_dim: usize,
    pub color_model: ColorModel,
}

impl PrimitiveCloud {
    pub fn empty(branch: Branch, bounds: Bounds, embedding_dim: usize, color_model: ColorModel) -> Self {
        PrimitiveCloud {
            primitives: Vec::new(),
            branch,
            bounds,
            embedding_dim,
            color_model,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn color_dim(&self) -> usize {
        self.color_model.dim()
    }

    /// Checks the per-primitive dimension invariants.
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        for p in &self.primitives {
            if p.embedding.len() != self.embedding_dim {
                return Err(Error::DimensionMismatch {
                    what: "embedding",
                    expected: self.embedding_dim,
                    actual: p.embedding.len(),
                });
            }
            if p.color_feature.len() != self.color_dim() {
                return Err(Error::DimensionMismatch {
                    what: "color feature",
                    expected: self.color_dim(),
                    actual: p.color_feature.len(),
                });
            }
        }
        Ok(())
    }
}

/// Mean distance from each point to its nearest neighbour (brute force).
pub fn mean_nearest_neighbor_distance(points: &[Vec3]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let nearest = crate::parallel::map_indexed(points.len(), |i| {
        let mut best = f64::INFINITY;
        for (j, q) in points.iter().enumerate() {
            if i != j {
                let d = math::sub(&points[i], q);
                best = best.min(math::dot(&d, &d));
            }
        }
        math::sqrt(best)
    });
    Some(nearest.iter().sum::<f64>() / points.len() as f64)
}

/// Random cloud with uniform centers in `bounds`, isotropic scale equal to
/// the mean nearest-neighbour spacing, opacity 0.1, uniform random RGB, and
/// embeddings drawn from `N(0, 0.01^2)`.
pub fn init_random_cloud<R: Rng>(
    count: usize,
    bounds: Bounds,
    branch: Branch,
    embedding_dim: usize,
    color_model: ColorModel,
    rng: &mut R,
) -> Result<PrimitiveCloud> {
    if count == 0 {
        return Err(Error::invalid("primitive count must be at least 1"));
    }
    bounds.validate()?;
    let extent = bounds.extent();
    let centers: Vec<Vec3> = (0..count)
        .map(|_| [0, 1, 2].map(|k| bounds.min[k] + rng.random::<f64>() * extent[k]))
        .collect();
    let spacing = match mean_nearest_neighbor_distance(&centers) {
        Some(d) if d > 0.0 => d,
        _ => {
            let e = extent.iter().cloned().fold(0.0, f64::max);
            if e > 0.0 {
                0.1 * e
            } else {
                0.01
            }
        }
    };
    let raw_scale = math::ln(spacing);
    let raw_opacity = math::logit(INIT_OPACITY);
    let normal = Normal::new(0.0, INIT_EMBEDDING_STD).expect("valid std");
    let primitives = centers
        .into_iter()
        .map(|mu| {
            let color_feature = match color_model {
                ColorModel::Rgb => (0..3).map(|_| rng.random::<f64>()).collect(),
                ColorModel::SphericalHarmonics1 => {
                    let mut f = alloc::vec![0.0; 12];
                    for v in f.iter_mut().take(3) {
                        *v = (rng.random::<f64>() - 0.5) / SH_C0;
                    }
                    f
                }
            };
            let embedding = (0..embedding_dim).map(|_| normal.sample(rng)).collect();
            GaussianPrimitive {
                mu,
                raw_scale: [raw_scale; 3],
                raw_rotation: [1.0, 0.0, 0.0, 0.0],
                raw_opacity,
                color_feature,
                embedding,
            }
        })
        .collect();
    Ok(PrimitiveCloud {
        primitives,
        branch,
        bounds,
        embedding_dim,
        color_model,
    })
}
