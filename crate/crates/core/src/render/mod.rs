//! EWA projection and depth-ordered alpha blending.
//!
//! Splats are sorted once per frame by camera depth (ties by primitive
//! index) and binned into 16x16 tiles. Within a tile every pixel walks the
//! tile's list front to back:
//!
//! ```text
//! C = sum_i c_i a_i T_i + T_n * background,  a_i = opacity_i * G_i(pixel),
//! T_i = prod_{j<i} (1 - a_j)
//! ```
//!
//! A splat contributes to a pixel iff `a_i >= ALPHA_MIN`; the tile rectangle
//! is only a conservative bound on that set, so tiled output is bit-identical
//! to a plain per-pixel loop over the sorted splats. A pixel stops blending
//! once its transmittance drops below [`TRANSMITTANCE_MIN`].

mod backward;

pub use backward::{render_backward, CloudGradients};

use alloc::vec::Vec;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{self, Vec3};
use crate::scene::{ColorModel, GaussianPrimitive, PrimitiveCloud};

/// Anti-aliasing floor added to the 2D covariance diagonal (px^2).
pub const COV2D_FLOOR: f64 = 0.3;
/// Per-pixel blending stops once transmittance falls below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Smallest blended alpha; weaker contributions are skipped.
pub const ALPHA_MIN: f64 = 1e-12;
/// Tile edge in pixels.
pub const TILE_SIZE: usize = 16;

/// Screen-space footprint of one primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedSplat {
    pub mean2d: [f64; 2],
    /// `(xx, xy, yy)` in px^2, floor included.
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub primitive_index: usize,
}

/// Camera-space intermediates of a projection, kept for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ProjectionParts {
    pub t_cam: Vec3,
    pub scale: Vec3,
    pub rotation: [f64; 4],
    pub sigma: [[f64; 3]; 3],
}

fn project_parts(
    primitive: &GaussianPrimitive,
    index: usize,
    camera: &Camera,
) -> Result<Option<(ProjectedSplat, ProjectionParts)>> {
    let act = primitive.activate()?;
    let t = camera.to_camera(&primitive.mu);
    if !(t[2] > camera.near && t[2] < camera.far) {
        return Ok(None);
    }
    let sigma = crate::scene::build_covariance(&act.scale, &act.rotation)?.matrix;
    let (fx, fy) = (camera.fx, camera.fy);
    let inv_z = 1.0 / t[2];
    let j = [
        [fx * inv_z, 0.0, -fx * t[0] * inv_z * inv_z],
        [0.0, fy * inv_z, -fy * t[1] * inv_z * inv_z],
    ];
    let w = &camera.rotation;
    let mut jw = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jw[r][c] = j[r][0] * w[0][c] + j[r][1] * w[1][c] + j[r][2] * w[2][c];
        }
    }
    // cov2d = JW Sigma (JW)^T
    let mut ts = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            ts[r][c] = jw[r][0] * sigma[0][c] + jw[r][1] * sigma[1][c] + jw[r][2] * sigma[2][c];
        }
    }
    let xx = math::dot(&ts[0], &jw[0]) + COV2D_FLOOR;
    let xy = math::dot(&ts[0], &jw[1]);
    let yy = math::dot(&ts[1], &jw[1]) + COV2D_FLOOR;
    let mean = camera.project(&t);

    // Cull splats whose 3-sigma disc lies entirely outside the frame.
    let mid = 0.5 * (xx + yy);
    let lambda_max = mid + math::sqrt((mid * mid - (xx * yy - xy * xy)).max(0.0));
    let r3 = 3.0 * math::sqrt(lambda_max);
    if mean[0] + r3 < 0.0
        || mean[0] - r3 > camera.width as f64
        || mean[1] + r3 < 0.0
        || mean[1] - r3 > camera.height as f64
    {
        return Ok(None);
    }
    Ok(Some((
        ProjectedSplat {
            mean2d: mean,
            cov2d: [xx, xy, yy],
            depth: t[2],
            primitive_index: index,
        },
        ProjectionParts {
            t_cam: t,
            scale: act.scale,
            rotation: act.rotation,
            sigma,
        },
    )))
}

/// Perspective projection of the center and first-order (EWA) projection of
/// the covariance. `None` means culled: behind the near plane, beyond the far
/// plane, or more than 3 sigma outside the frame.
pub fn project_gaussian(primitive: &GaussianPrimitive, camera: &Camera) -> Result<Option<ProjectedSplat>> {
    Ok(project_parts(primitive, 0, camera)?.map(|(s, _)| s))
}

/// A projected splat ready for blending.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSplat {
    pub projected: ProjectedSplat,
    /// Inverse 2D covariance `(a, b, c)` of `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub opacity: f64,
    /// The splat contributes where the Gaussian exponent is at least this.
    pub log_cutoff: f64,
    pub color: [f64; 3],
    /// Conservative pixel rectangle `[x0, y0, x1, y1)` of the support.
    pub rect: [usize; 4],
    /// Unit direction from the camera center to the primitive.
    pub view_dir: Vec3,
    pub(crate) parts: ProjectionParts,
}

impl PreparedSplat {
    /// Gaussian exponent at pixel `(x, y)` (sampled at the pixel center).
    #[inline]
    pub fn power_at(&self, x: usize, y: usize) -> f64 {
        let dx = x as f64 + 0.5 - self.projected.mean2d[0];
        let dy = y as f64 + 0.5 - self.projected.mean2d[1];
        -0.5 * (self.conic[0] * dx * dx + self.conic[2] * dy * dy) - self.conic[1] * dx * dy
    }

    /// Blended alpha at `(x, y)`, or `None` where the splat is skipped.
    #[inline]
    pub fn alpha_at(&self, x: usize, y: usize) -> Option<f64> {
        let power = self.power_at(x, y);
        if power < self.log_cutoff {
            None
        } else {
            Some(self.opacity * math::exp(power))
        }
    }
}

/// Projects, culls and depth-sorts a cloud.
pub fn prepare(cloud: &PrimitiveCloud, camera: &Camera) -> Result<Vec<PreparedSplat>> {
    camera.validate()?;
    for (index, p) in cloud.primitives.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::NonFinitePrimitive { index });
        }
    }
    let center = camera.center();
    let model = cloud.color_model;
    let prepared = crate::parallel::map_indexed(cloud.len(), |i| {
        prepare_one(&cloud.primitives[i], i, camera, &center, model)
    });
    let mut splats = Vec::with_capacity(prepared.len());
    for p in prepared {
        if let Some(s) = p? {
            splats.push(s);
        }
    }
    splats.sort_by(|a, b| {
        a.projected
            .depth
            .total_cmp(&b.projected.depth)
            .then(a.projected.primitive_index.cmp(&b.projected.primitive_index))
    });
    Ok(splats)
}

fn prepare_one(
    primitive: &GaussianPrimitive,
    index: usize,
    camera: &Camera,
    center: &Vec3,
    model: ColorModel,
) -> Result<Option<PreparedSplat>> {
    let Some((projected, parts)) = project_parts(primitive, index, camera)? else {
        return Ok(None);
    };
    let opacity = primitive.opacity();
    if !(opacity > ALPHA_MIN) {
        return Ok(None);
    }
    let [xx, xy, yy] = projected.cov2d;
    let det = xx * yy - xy * xy;
    if !(det > 0.0) {
        return Ok(None);
    }
    let conic = [yy / det, -xy / det, xx / det];
    let log_cutoff = math::ln(ALPHA_MIN / opacity);
    let m2 = -2.0 * log_cutoff;
    let hx = math::sqrt(m2 * xx);
    let hy = math::sqrt(m2 * yy);
    let [mx, my] = projected.mean2d;
    // pixel centers sit at +0.5; one pixel of slack on each side.
    let lo = |m: f64, h: f64| math::floor(m - h - 0.5) - 1.0;
    let hi = |m: f64, h: f64| math::ceil(m + h - 0.5) + 2.0;
    let clampi = |v: f64, max: usize| -> usize { v.clamp(0.0, max as f64) as usize };
    let rect = [
        clampi(lo(mx, hx), camera.width),
        clampi(lo(my, hy), camera.height),
        clampi(hi(mx, hx), camera.width),
        clampi(hi(my, hy), camera.height),
    ];
    if rect[0] >= rect[2] || rect[1] >= rect[3] {
        return Ok(None);
    }
    let v = math::sub(&primitive.mu, center);
    let n = math::norm(&v);
    let view_dir = if n > 0.0 { v.map(|c| c / n) } else { [0.0, 0.0, 1.0] };
    let color = model.eval(&primitive.color_feature, &view_dir);
    Ok(Some(PreparedSplat {
        projected,
        conic,
        opacity,
        log_cutoff,
        color,
        rect,
        view_dir,
        parts,
    }))
}

/// One blended term of a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    /// Position in the owning tile's splat list.
    pub slot: u32,
    pub alpha: f64,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileRecords {
    pub origin: [usize; 2],
    pub size: [usize; 2],
    /// Indices into the sorted splat list, front to back.
    pub splats: Vec<u32>,
    /// Per pixel (tile-local row-major) range into `contributions`.
    pub pixel_ranges: Vec<(u32, u32)>,
    pub contributions: Vec<Contribution>,
}

/// Everything the backward pass needs from a forward render.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderRecords {
    pub splats: Vec<PreparedSplat>,
    pub tiles: Vec<TileRecords>,
    pub tiles_x: usize,
    pub primitive_count: usize,
    pub camera: Camera,
}

impl RenderRecords {
    /// `(primitive index, blending weight a_i T_i)` for every splat blended
    /// at `(x, y)`, front to back.
    pub fn pixel_contributions(&self, x: usize, y: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let tile = &self.tiles[(y / TILE_SIZE) * self.tiles_x + x / TILE_SIZE];
        let local = (y - tile.origin[1]) * tile.size[0] + (x - tile.origin[0]);
        let (start, end) = tile.pixel_ranges[local];
        tile.contributions[start as usize..end as usize].iter().map(move |c| {
            let s = &self.splats[tile.splats[c.slot as usize] as usize];
            (s.projected.primitive_index, c.alpha * c.transmittance)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// `H x W x 3`.
    pub color: Image,
    /// `H x W x 1` accumulated alpha `1 - T_final`.
    pub opacity: Image,
    pub background: [f64; 3],
    pub records: Option<RenderRecords>,
}

impl RenderOutput {
    pub fn records(&self) -> Result<&RenderRecords> {
        self.records.as_ref().ok_or(Error::MissingRecords)
    }
}

/// Forward render retaining contribution records for [`render_backward`].
pub fn render(cloud: &PrimitiveCloud, camera: &Camera, background: [f64; 3]) -> Result<RenderOutput> {
    render_with(cloud, camera, background, true)
}

/// Forward render; `keep_records = false` skips the backward bookkeeping.
pub fn render_with(
    cloud: &PrimitiveCloud,
    camera: &Camera,
    background: [f64; 3],
    keep_records: bool,
) -> Result<RenderOutput> {
    let splats = prepare(cloud, camera)?;
    let (w, h) = (camera.width, camera.height);
    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let bins = bin_tiles(&splats, tiles_x, tiles_y);

    let tiles = crate::parallel::map_indexed(tiles_x * tiles_y, |t| {
        let origin = [(t % tiles_x) * TILE_SIZE, (t / tiles_x) * TILE_SIZE];
        let size = [TILE_SIZE.min(w - origin[0]), TILE_SIZE.min(h - origin[1])];
        blend_tile(&splats, &bins[t], origin, size, background, keep_records)
    });

    let mut color = Image::new(w, h, 3);
    let mut opacity = Image::new(w, h, 1);
    let mut records = Vec::with_capacity(if keep_records { tiles.len() } else { 0 });
    for (t, tile) in tiles.into_iter().enumerate() {
        let [ox, oy] = tile.records.origin;
        let [sx, sy] = tile.records.size;
        for ly in 0..sy {
            for lx in 0..sx {
                let l = ly * sx + lx;
                let (x, y) = (ox + lx, oy + ly);
                let base = (y * w + x) * 3;
                color.data[base..base + 3].copy_from_slice(&tile.color[l * 3..l * 3 + 3]);
                opacity.data[y * w + x] = tile.opacity[l];
            }
        }
        if keep_records {
            let mut rec = tile.records;
            rec.splats = bins[t].clone();
            records.push(rec);
        }
    }
    Ok(RenderOutput {
        color,
        opacity,
        background,
        records: keep_records.then(|| RenderRecords {
            splats,
            tiles: records,
            tiles_x,
            primitive_count: cloud.len(),
            camera: *camera,
        }),
    })
}

fn bin_tiles(splats: &[PreparedSplat], tiles_x: usize, tiles_y: usize) -> Vec<Vec<u32>> {
    let mut bins = alloc::vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in splats.iter().enumerate() {
        let [x0, y0, x1, y1] = s.rect;
        for ty in y0 / TILE_SIZE..=((y1 - 1) / TILE_SIZE).min(tiles_y - 1) {
            for tx in x0 / TILE_SIZE..=((x1 - 1) / TILE_SIZE).min(tiles_x - 1) {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    bins
}

struct TileOutput {
    color: Vec<f64>,
    opacity: Vec<f64>,
    records: TileRecords,
}

fn blend_tile(
    splats: &[PreparedSplat],
    list: &[u32],
    origin: [usize; 2],
    size: [usize; 2],
    background: [f64; 3],
    keep_records: bool,
) -> TileOutput {
    // Splat-major sweep: each splat touches only the pixels inside its
    // rectangle. Every pixel still sees its splats front to back, so the
    // per-pixel arithmetic matches a pixel-major loop exactly.
    let n = size[0] * size[1];
    let mut trans = alloc::vec![1.0f64; n];
    let mut acc = alloc::vec![0.0f64; n * 3];
    let mut done = alloc::vec![false; n];
    let mut live = n;
    let mut raw: Vec<(u32, Contribution)> = Vec::new();
    let (tx1, ty1) = (origin[0] + size[0], origin[1] + size[1]);
    for (slot, &si) in list.iter().enumerate() {
        if live == 0 {
            break;
        }
        let s = &splats[si as usize];
        let [rx0, ry0, rx1, ry1] = s.rect;
        let (x0, x1) = (rx0.max(origin[0]), rx1.min(tx1));
        let (y0, y1) = (ry0.max(origin[1]), ry1.min(ty1));
        let [ca, cb, cc] = s.conic;
        for y in y0..y1 {
            let dy = y as f64 + 0.5 - s.projected.mean2d[1];
            let row = (y - origin[1]) * size[0];
            // Row span where the exponent can reach the cutoff, with a pixel
            // of slack; the exact test below still decides membership.
            let disc = cb * cb * dy * dy - ca * (cc * dy * dy + 2.0 * s.log_cutoff);
            if !(disc >= 0.0) {
                continue;
            }
            let root = math::sqrt(disc);
            let centre = s.projected.mean2d[0] - 0.5 - cb * dy / ca;
            let lo = math::floor(centre - root / ca) - 1.0;
            let hi = math::ceil(centre + root / ca) + 2.0;
            let sx0 = if lo > x0 as f64 { lo as usize } else { x0 };
            let sx1 = if hi < x1 as f64 { (hi.max(0.0)) as usize } else { x1 };
            for x in sx0..sx1 {
                let l = row + x - origin[0];
                if done[l] {
                    continue;
                }
                let dx = x as f64 + 0.5 - s.projected.mean2d[0];
                let power = -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
                if power < s.log_cutoff {
                    continue;
                }
                let alpha = s.opacity * math::exp(power);
                let t = trans[l];
                let weight = alpha * t;
                acc[l * 3] += s.color[0] * weight;
                acc[l * 3 + 1] += s.color[1] * weight;
                acc[l * 3 + 2] += s.color[2] * weight;
                if keep_records {
                    raw.push((l as u32, Contribution { slot: slot as u32, alpha, transmittance: t }));
                }
                let t = t * (1.0 - alpha);
                trans[l] = t;
                if t < TRANSMITTANCE_MIN {
                    done[l] = true;
                    live -= 1;
                }
            }
        }
    }

    let mut color = acc;
    let mut opacity = alloc::vec![0.0; n];
    for l in 0..n {
        let t = trans[l];
        color[l * 3] += t * background[0];
        color[l * 3 + 1] += t * background[1];
        color[l * 3 + 2] += t * background[2];
        opacity[l] = 1.0 - t;
    }

    let (pixel_ranges, contributions) = if keep_records {
        // Stable counting sort by pixel keeps each pixel's list in depth order.
        let mut counts = alloc::vec![0u32; n + 1];
        for (l, _) in &raw {
            counts[*l as usize + 1] += 1;
        }
        for l in 0..n {
            counts[l + 1] += counts[l];
        }
        let ranges: Vec<(u32, u32)> = (0..n).map(|l| (counts[l], counts[l + 1])).collect();
        let mut cursor = counts;
        let filler = Contribution { slot: 0, alpha: 0.0, transmittance: 0.0 };
        let mut sorted = alloc::vec![filler; raw.len()];
        for (l, c) in raw {
            sorted[cursor[l as usize] as usize] = c;
            cursor[l as usize] += 1;
        }
        (ranges, sorted)
    } else {
        (Vec::new(), Vec::new())
    };
    TileOutput {
        color,
        opacity,
        records: TileRecords {
            origin,
            size,
            splats: Vec::new(),
            pixel_ranges,
            contributions,
        },
    }
}
