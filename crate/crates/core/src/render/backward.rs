use alloc::vec;
use alloc::vec::Vec;

use super::{PreparedSplat, RenderOutput};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{self, Vec3};
use crate::scene::PrimitiveCloud;

/// Per-primitive gradients, indexed like the cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGradients {
    pub mu: Vec<Vec3>,
    pub raw_scale: Vec<Vec3>,
    pub raw_rotation: Vec<[f64; 4]>,
    pub raw_opacity: Vec<f64>,
    /// `len * color_dim`, row per primitive.
    pub color_feature: Vec<f64>,
    /// `len * embedding_dim`; only the deformation path writes here.
    pub embedding: Vec<f64>,
    /// Magnitude of the screen-space mean gradient in NDC units, the
    /// densification statistic.
    pub mean2d_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

impl CloudGradients {
    pub fn zeros(len: usize, color_dim: usize, embedding_dim: usize) -> Self {
        CloudGradients {
            mu: vec![[0.0; 3]; len],
            raw_scale: vec![[0.0; 3]; len],
            raw_rotation: vec![[0.0; 4]; len],
            raw_opacity: vec![0.0; len],
            color_feature: vec![0.0; len * color_dim],
            embedding: vec![0.0; len * embedding_dim],
            mean2d_norm: vec![0.0; len],
            visible: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Elementwise accumulation of another gradient set of the same shape.
    pub fn accumulate(&mut self, other: &CloudGradients) {
        fn add<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]]) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..N {
                    x[k] += y[k];
                }
            }
        }
        add(&mut self.mu, &other.mu);
        add(&mut self.raw_scale, &other.raw_scale);
        add(&mut self.raw_rotation, &other.raw_rotation);
        for (a, b) in self.raw_opacity.iter_mut().zip(&other.raw_opacity) {
            *a += b;
        }
        for (a, b) in self.color_feature.iter_mut().zip(&other.color_feature) {
            *a += b;
        }
        for (a, b) in self.embedding.iter_mut().zip(&other.embedding) {
            *a += b;
        }
        for (a, b) in self.mean2d_norm.iter_mut().zip(&other.mean2d_norm) {
            *a += b;
        }
        for (a, b) in self.visible.iter_mut().zip(&other.visible) {
            *a |= b;
        }
    }

    /// Zeroes everything except the color features.
    pub fn retain_color_only(&mut self) {
        self.mu.iter_mut().for_each(|v| *v = [0.0; 3]);
        self.raw_scale.iter_mut().for_each(|v| *v = [0.0; 3]);
        self.raw_rotation.iter_mut().for_each(|v| *v = [0.0; 4]);
        self.raw_opacity.iter_mut().for_each(|v| *v = 0.0);
        self.embedding.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Reverse-mode derivative of [`super::render`] for a scalar loss whose
/// gradient w.r.t. the color image is `d_color` (and optionally w.r.t. the
/// opacity map, `d_opacity`).
///
/// Per-tile partials are reduced in tile-major order, so the result does not
/// depend on scheduling.
pub fn render_backward(
    cloud: &PrimitiveCloud,
    output: &RenderOutput,
    d_color: &Image,
    d_opacity: Option<&Image>,
) -> Result<CloudGradients> {
    let records = output.records()?;
    if records.primitive_count != cloud.len() {
        return Err(Error::DimensionMismatch {
            what: "cloud size vs render records",
            expected: records.primitive_count,
            actual: cloud.len(),
        });
    }
    d_color.check_same_shape(&output.color, "color gradient")?;
    if let Some(d_o) = d_opacity {
        d_o.check_same_shape(&output.opacity, "opacity gradient")?;
    }
    let camera = &records.camera;
    let splats = &records.splats;
    let bg = output.background;
    let w = camera.width;

    let per_tile = crate::parallel::map_indexed(records.tiles.len(), |t| {
        let tile = &records.tiles[t];
        let mut grads = vec![SplatGrad::default(); tile.splats.len()];
        for ly in 0..tile.size[1] {
            for lx in 0..tile.size[0] {
                let (x, y) = (tile.origin[0] + lx, tile.origin[1] + ly);
                let p = y * w + x;
                let dc = [d_color.data[p * 3], d_color.data[p * 3 + 1], d_color.data[p * 3 + 2]];
                let d_o = d_opacity.map_or(0.0, |img| img.data[p]);
                if dc == [0.0; 3] && d_o == 0.0 {
                    continue;
                }
                let (start, end) = tile.pixel_ranges[ly * tile.size[0] + lx];
                // color behind the current splat, and product of (1 - a) behind it
                let mut behind = bg;
                let mut behind_t = 1.0;
                for c in tile.contributions[start as usize..end as usize].iter().rev() {
                    let s: &PreparedSplat = &splats[tile.splats[c.slot as usize] as usize];
                    let g = &mut grads[c.slot as usize];
                    let (a, t) = (c.alpha, c.transmittance);
                    let mut dl_da = 0.0;
                    for k in 0..3 {
                        g.color[k] += a * t * dc[k];
                        dl_da += dc[k] * t * (s.color[k] - behind[k]);
                    }
                    dl_da += d_o * t * behind_t;
                    for k in 0..3 {
                        behind[k] = s.color[k] * a + (1.0 - a) * behind[k];
                    }
                    behind_t *= 1.0 - a;

                    let dx = x as f64 + 0.5 - s.projected.mean2d[0];
                    let dy = y as f64 + 0.5 - s.projected.mean2d[1];
                    let gauss = math::exp(s.power_at(x, y));
                    g.opacity += dl_da * gauss;
                    let dl_dpow = dl_da * a;
                    g.conic[0] += -0.5 * dx * dx * dl_dpow;
                    g.conic[1] += -dx * dy * dl_dpow;
                    g.conic[2] += -0.5 * dy * dy * dl_dpow;
                    g.mean[0] += (s.conic[0] * dx + s.conic[1] * dy) * dl_dpow;
                    g.mean[1] += (s.conic[1] * dx + s.conic[2] * dy) * dl_dpow;
                }
            }
        }
        grads
    });

    let mut splat_grads = vec![SplatGrad::default(); splats.len()];
    let mut touched = vec![false; splats.len()];
    for (tile, grads) in records.tiles.iter().zip(&per_tile) {
        for (slot, g) in grads.iter().enumerate() {
            let i = tile.splats[slot] as usize;
            splat_grads[i].add(g);
            touched[i] = true;
        }
    }

    let color_dim = cloud.color_dim();
    let model = cloud.color_model;
    let projected = crate::parallel::map_indexed(splats.len(), |i| {
        let s = &splats[i];
        let prim = &cloud.primitives[s.projected.primitive_index];
        let mut d_feature = vec![0.0; color_dim];
        let pg = project_backward(s, &splat_grads[i], camera, model, &prim.color_feature, &mut d_feature);
        (pg, d_feature)
    });

    let mut out = CloudGradients::zeros(cloud.len(), color_dim, cloud.embedding_dim);
    let ndc = [0.5 * camera.width as f64, 0.5 * camera.height as f64];
    for (i, (pg, d_feature)) in projected.into_iter().enumerate() {
        let idx = splats[i].projected.primitive_index;
        let prim = &cloud.primitives[idx];
        out.mu[idx] = pg.mu;
        out.raw_scale[idx] = [0, 1, 2].map(|k| pg.scale[k] * splats[i].parts.scale[k]);
        // through q = r / |r|
        let r = &prim.raw_rotation;
        let n = math::sqrt(r.iter().map(|v| v * v).sum::<f64>());
        let q = &splats[i].parts.rotation;
        let qd: f64 = (0..4).map(|k| q[k] * pg.rotation[k]).sum();
        out.raw_rotation[idx] = [0, 1, 2, 3].map(|k| (pg.rotation[k] - q[k] * qd) / n);
        let op = splats[i].opacity;
        out.raw_opacity[idx] = splat_grads[i].opacity * op * (1.0 - op);
        out.color_feature[idx * color_dim..(idx + 1) * color_dim].copy_from_slice(&d_feature);
        let gm = splat_grads[i].mean;
        out.mean2d_norm[idx] = { let (a, b) = (gm[0] * ndc[0], gm[1] * ndc[1]); math::sqrt(a * a + b * b) };
        out.visible[idx] = touched[i];
    }
    Ok(out)
}

struct ProjectionGrad {
    mu: Vec3,
    /// w.r.t. activated scale
    scale: Vec3,
    /// w.r.t. normalized quaternion
    rotation: [f64; 4],
}

fn project_backward(
    s: &PreparedSplat,
    g: &SplatGrad,
    camera: &crate::camera::Camera,
    model: crate::scene::ColorModel,
    feature: &[f64],
    d_feature: &mut [f64],
) -> ProjectionGrad {
    let parts = &s.parts;
    let t = parts.t_cam;
    let (fx, fy) = (camera.fx, camera.fy);
    let w = &camera.rotation;
    let sigma = &parts.sigma;

    let mut d_mu = [0.0; 3];
    let d_dir = model.backward(feature, &s.view_dir, &g.color, d_feature);
    if model.is_view_dependent() {
        // dir = (mu - c) / |mu - c|; |mu - c| = |t_cam| since W is a rotation
        let dist = math::norm(&s.parts.t_cam);
        let proj = math::dot(&s.view_dir, &d_dir);
        for k in 0..3 {
            d_mu[k] += (d_dir[k] - s.view_dir[k] * proj) / dist;
        }
    }

    // conic -> cov2d: dCov = -K dK K with dK symmetric
    let [a, b, c] = s.conic;
    let gk = [[g.conic[0], 0.5 * g.conic[1]], [0.5 * g.conic[1], g.conic[2]]];
    let k = [[a, b], [b, c]];
    let mut kg = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            kg[i][j] = k[i][0] * gk[0][j] + k[i][1] * gk[1][j];
        }
    }
    let mut g_cov = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            g_cov[i][j] = -(kg[i][0] * k[0][j] + kg[i][1] * k[1][j]);
        }
    }

    let inv_z = 1.0 / t[2];
    let inv_z2 = inv_z * inv_z;
    let j = [
        [fx * inv_z, 0.0, -fx * t[0] * inv_z2],
        [0.0, fy * inv_z, -fy * t[1] * inv_z2],
    ];
    let mut tm = [[0.0; 3]; 2];
    for r in 0..2 {
        for col in 0..3 {
            tm[r][col] = j[r][0] * w[0][col] + j[r][1] * w[1][col] + j[r][2] * w[2][col];
        }
    }
    // dSigma = T^T G T
    let mut g_sigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for jj in 0..3 {
            let mut acc = 0.0;
            for r in 0..2 {
                for q in 0..2 {
                    acc += tm[r][i] * g_cov[r][q] * tm[q][jj];
                }
            }
            g_sigma[i][jj] = acc;
        }
    }
    // dT = 2 G T Sigma
    let mut t_sigma = [[0.0; 3]; 2];
    for r in 0..2 {
        for col in 0..3 {
            t_sigma[r][col] = tm[r][0] * sigma[0][col] + tm[r][1] * sigma[1][col] + tm[r][2] * sigma[2][col];
        }
    }
    let mut g_t = [[0.0; 3]; 2];
    for r in 0..2 {
        for col in 0..3 {
            g_t[r][col] = 2.0 * (g_cov[r][0] * t_sigma[0][col] + g_cov[r][1] * t_sigma[1][col]);
        }
    }
    // dJ = dT W^T
    let mut g_j = [[0.0; 3]; 2];
    for r in 0..2 {
        for col in 0..3 {
            g_j[r][col] = g_t[r][0] * w[col][0] + g_t[r][1] * w[col][1] + g_t[r][2] * w[col][2];
        }
    }
    let mut d_t = [0.0; 3];
    d_t[0] += g_j[0][2] * (-fx * inv_z2);
    d_t[1] += g_j[1][2] * (-fy * inv_z2);
    d_t[2] += g_j[0][0] * (-fx * inv_z2)
        + g_j[1][1] * (-fy * inv_z2)
        + g_j[0][2] * (2.0 * fx * t[0] * inv_z2 * inv_z)
        + g_j[1][2] * (2.0 * fy * t[1] * inv_z2 * inv_z);
    // mean2d = project(t)
    d_t[0] += g.mean[0] * fx * inv_z;
    d_t[1] += g.mean[1] * fy * inv_z;
    d_t[2] += -g.mean[0] * fx * t[0] * inv_z2 - g.mean[1] * fy * t[1] * inv_z2;
    let d_world = math::mat_t_vec(w, &d_t);
    for k in 0..3 {
        d_mu[k] += d_world[k];
    }

    // Sigma = M M^T, M = R S
    let r = math::quat_to_mat(&parts.rotation);
    let sc = parts.scale;
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for jj in 0..3 {
            m[i][jj] = r[i][jj] * sc[jj];
        }
    }
    let g_m = {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for jj in 0..3 {
                out[i][jj] = 2.0 * (g_sigma[i][0] * m[0][jj] + g_sigma[i][1] * m[1][jj] + g_sigma[i][2] * m[2][jj]);
            }
        }
        out
    };
    let mut g_r = [[0.0; 3]; 3];
    let mut d_scale = [0.0; 3];
    for i in 0..3 {
        for jj in 0..3 {
            g_r[i][jj] = g_m[i][jj] * sc[jj];
            d_scale[jj] += g_m[i][jj] * r[i][jj];
        }
    }
    let d_rot = math::quat_to_mat_backward(&parts.rotation, &g_r);
    ProjectionGrad {
        mu: d_mu,
        scale: d_scale,
        rotation: d_rot,
    }
}
