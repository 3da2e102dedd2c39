//! Finite-difference verification of every analytic gradient: rasterizer,
//! hash encoder, MLP, embeddings, fusion, and the full deform-then-render
//! chain.
//!
//! An entry passes when `|analytic - numeric| <= abs_floor` or the relative
//! error `|a - n| / max(|a|, |n|)` is below `rel_tol`. Reported errors are
//! zero for entries under the absolute floor.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::Camera;
use crate::compositor::{fuse, fuse_backward, PortraitLayers};
use crate::error::Result;
use crate::field::{DeformationField, EncoderConfig, FieldConfig, FieldLayout, DELTA_WIDTH};
use crate::image::Image;
use crate::math;
use crate::render::{render, render_backward};
use crate::rng::{stream_rng, Stream};
use crate::scene::{Bounds, Branch, ColorModel, GaussianPrimitive, PrimitiveCloud};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub scenes: usize,
    pub splats: usize,
    pub width: usize,
    pub height: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Table entries, MLP weights and fusion pixels sampled per scene.
    pub samples: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            scenes: 20,
            splats: 10,
            width: 32,
            height: 32,
            step: 1e-4,
            rel_tol: 1e-3,
            abs_floor: 1e-6,
            samples: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checked: usize,
    pub failures: usize,
    /// Entries accepted by the absolute floor alone.
    pub floored: usize,
    pub max_rel_error: f64,
    pub worst: Option<String>,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        SuiteReport { name, checked: 0, failures: 0, floored: 0, max_rel_error: 0.0, worst: None }
    }

    fn merge(&mut self, other: SuiteReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.floored += other.floored;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub scenes: usize,
    pub suites: Vec<SuiteReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.suites.iter().map(|s| s.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.suites.iter().map(|s| s.checked).sum()
    }

    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.failures == 0)
    }
}

struct Tally<'a> {
    cfg: &'a GradCheckConfig,
    report: SuiteReport,
}

impl<'a> Tally<'a> {
    fn new(name: &'static str, cfg: &'a GradCheckConfig) -> Self {
        Tally { cfg, report: SuiteReport::new(name) }
    }

    fn check(&mut self, analytic: f64, numeric: f64, label: impl FnOnce() -> String) {
        self.report.checked += 1;
        let diff = (analytic - numeric).abs();
        let rel = diff / analytic.abs().max(numeric.abs());
        let err = if diff <= self.cfg.abs_floor && !(rel < self.cfg.rel_tol) {
            self.report.floored += 1;
            0.0
        } else if diff == 0.0 {
            0.0
        } else {
            rel
        };
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if err >= self.cfg.rel_tol {
            self.report.failures += 1;
        }
        if err > self.report.max_rel_error || (self.report.worst.is_none() && err > 0.0) {
            self.report.max_rel_error = err;
            self.report.worst = Some(format!("{} (analytic {analytic:e}, numeric {numeric:e})", label()));
        }
    }
}

/// A random scene of `splats` primitives in front of a `width x height`
/// camera: centers spread across the view, opacities in `[0.1, 0.5]`,
/// direct RGB color, embedding width 4. Camera depths are kept at least
/// [`MIN_DEPTH_GAP`] apart so no finite-difference stencil reorders the sort.
pub const MIN_DEPTH_GAP: f64 = 0.01;

pub fn random_scene(seed: u64, splats: usize, width: usize, height: usize) -> (PrimitiveCloud, Camera) {
    random_scene_with(seed, splats, width, height, ColorModel::Rgb)
}

pub fn random_scene_with(
    seed: u64,
    splats: usize,
    width: usize,
    height: usize,
    model: ColorModel,
) -> (PrimitiveCloud, Camera) {
    let mut rng = stream_rng(seed, Stream::GradCheck);
    let camera = Camera::looking_at_origin(width, height, 1.5 * width.max(height) as f64, 4.0);
    let bounds = Bounds::new([-1.0; 3], [1.0; 3]).expect("static bounds");
    let mut cloud = PrimitiveCloud::empty(Branch::Face, bounds, 4, model);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut depths: Vec<f64> = Vec::with_capacity(splats);
    let grid = field_config().encoder.resolutions();
    for _ in 0..splats {
        let mu = loop {
            let mu = [
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6) * height as f64 / width.max(height) as f64,
                rng.random_range(-0.5..0.5),
            ];
            let d = camera.to_camera(&mu)[2];
            if clear_of_grid(&mu, &bounds, &grid) && depths.iter().all(|o| (o - d).abs() >= MIN_DEPTH_GAP) {
                depths.push(d);
                break mu;
            }
        };
        let raw_scale = [0, 1, 2].map(|_| math::ln(rng.random_range(0.06..0.2)));
        let mut q: [f64; 4] = core::array::from_fn(|_| normal.sample(&mut rng));
        if q.iter().all(|v| v.abs() < 1e-3) {
            q[0] = 1.0;
        }
        let raw_opacity = math::logit(rng.random_range(0.1..0.5));
        let color_feature = match model {
            ColorModel::Rgb => (0..3).map(|_| rng.random_range(0.05..0.95)).collect(),
            ColorModel::SphericalHarmonics1 => (0..12).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let embedding = (0..4).map(|_| normal.sample(&mut rng) * 0.3).collect();
        cloud.primitives.push(GaussianPrimitive { mu, raw_scale, raw_rotation: q, raw_opacity, color_feature, embedding });
    }
    (cloud, camera)
}

/// Fixed random weights defining `L = <w_c, color> + <w_o, opacity>`.
struct RenderLoss {
    color: Image,
    opacity: Image,
}

impl RenderLoss {
    fn new(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Self {
        let mut color = Image::new(w, h, 3);
        let mut opacity = Image::new(w, h, 1);
        color.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        opacity.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        RenderLoss { color, opacity }
    }

    fn eval(&self, cloud: &PrimitiveCloud, cam: &Camera) -> Result<f64> {
        let out = render(cloud, cam, [0.0; 3])?;
        let c: f64 = out.color.data.iter().zip(&self.color.data).map(|(a, b)| a * b).sum();
        let o: f64 = out.opacity.data.iter().zip(&self.opacity.data).map(|(a, b)| a * b).sum();
        Ok(c + o)
    }
}

fn central<F: FnMut(f64) -> Result<f64>>(h: f64, mut f: F) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

fn check_rasterizer(seed: u64, cfg: &GradCheckConfig, model: ColorModel) -> Result<SuiteReport> {
    let (cloud, cam) = random_scene_with(seed, cfg.splats, cfg.width, cfg.height, model);
    let mut rng = stream_rng(seed ^ 0x5eed, Stream::GradCheck);
    let loss = RenderLoss::new(&mut rng, cfg.width, cfg.height);
    let out = render(&cloud, &cam, [0.0; 3])?;
    let g = render_backward(&cloud, &out, &loss.color, Some(&loss.opacity))?;
    let mut t = Tally::new("rasterizer", cfg);
    let h = cfg.step;
    for i in 0..cloud.len() {
        let perturb = |edit: &dyn Fn(&mut GaussianPrimitive, f64)| {
            central(h, |d| {
                let mut c = cloud.clone();
                edit(&mut c.primitives[i], d);
                loss.eval(&c, &cam)
            })
        };
        for k in 0..3 {
            let n = perturb(&|p, d| p.mu[k] += d)?;
            t.check(g.mu[i][k], n, || format!("splat {i} mu[{k}]"));
            let n = perturb(&|p, d| p.raw_scale[k] += d)?;
            t.check(g.raw_scale[i][k], n, || format!("splat {i} raw_scale[{k}]"));
        }
        for k in 0..4 {
            let n = perturb(&|p, d| p.raw_rotation[k] += d)?;
            t.check(g.raw_rotation[i][k], n, || format!("splat {i} raw_rotation[{k}]"));
        }
        let n = perturb(&|p, d| p.raw_opacity += d)?;
        t.check(g.raw_opacity[i], n, || format!("splat {i} raw_opacity"));
        let z = cloud.color_dim();
        for k in 0..z {
            let n = perturb(&|p, d| p.color_feature[k] += d)?;
            t.check(g.color_feature[i * z + k], n, || format!("splat {i} color[{k}]"));
        }
    }
    Ok(t.report)
}

fn field_config() -> FieldConfig {
    FieldConfig {
        encoder: EncoderConfig { levels: 4, table_size: 1 << 12, features: 2, min_resolution: 4, max_resolution: 64 },
        hidden: vec![32, 32],
    }
}

/// Whether every normalized coordinate of `mu` sits at least `GRID_MARGIN`
/// cells away from a grid line at every level. Bilinear interpolation has a
/// kink on those lines that a positional stencil must not straddle.
fn clear_of_grid(mu: &[f64; 3], bounds: &Bounds, resolutions: &[usize]) -> bool {
    const GRID_MARGIN: f64 = 1e-3;
    (0..3).all(|k| {
        let u = (mu[k] - bounds.min[k]) / (bounds.max[k] - bounds.min[k]);
        resolutions.iter().all(|&r| {
            let x = u * r as f64;
            let f = x - math::floor(x);
            f > GRID_MARGIN && f < 1.0 - GRID_MARGIN
        })
    })
}

/// A small but fully featured field with randomized (nonzero) weights.
fn random_field(seed: u64, bounds: Bounds, layout: FieldLayout) -> Result<DeformationField> {
    let mut rng = stream_rng(seed, Stream::GradCheck);
    let mut field = DeformationField::new(layout, &field_config(), bounds, &mut rng)?;
    field.encoder.tables.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let widths = field.mlp.widths.clone();
    let last_in = widths[widths.len() - 2];
    let out_start = field.mlp.params.len() - (last_in * DELTA_WIDTH + DELTA_WIDTH);
    for (i, p) in field.mlp.params.iter_mut().enumerate() {
        if i >= out_start {
            *p = rng.random_range(-0.03..0.03);
        }
    }
    Ok(field)
}

fn conditioning(rng: &mut ChaCha8Rng, layout: &FieldLayout) -> (Vec<f64>, Vec<f64>) {
    let a = (0..layout.audio_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let e = (0..layout.expression_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    (a, e)
}

fn check_field_parts(seed: u64, cfg: &GradCheckConfig) -> Result<(SuiteReport, SuiteReport)> {
    let layout = FieldLayout { embedding_dim: 4, audio_dim: 5, expression_dim: 3 };
    let bounds = Bounds::new([-1.0; 3], [1.0; 3])?;
    let field = random_field(seed, bounds, layout)?;
    let mut rng = stream_rng(seed ^ 0xf1e1d, Stream::GradCheck);
    let (audio, expr) = conditioning(&mut rng, &layout);
    let w: [f64; DELTA_WIDTH] = core::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let grid = field.encoder.resolutions().to_vec();
    let mu = loop {
        let mu = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
        if clear_of_grid(&mu, &bounds, &grid) {
            break mu;
        }
    };
    let z: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
    let loss = |f: &DeformationField, mu: &[f64; 3], z: &[f64], a: &[f64], e: &[f64]| -> Result<f64> {
        Ok(f.predict(mu, z, a, e)?.to_array().iter().zip(&w).map(|(x, y)| x * y).sum())
    };
    let (_, trace) = field.predict_traced(&mu, &z, &audio, &expr)?;
    let mut tables = Vec::new();
    let mut mlp = vec![0.0; field.mlp.params.len()];
    let ig = field.backward_one(&mu, &trace, &w, &mut tables, &mut mlp);
    let mut dense = vec![0.0; field.encoder.tables.len()];
    for (i, v) in &tables {
        dense[*i as usize] += v;
    }
    // Bilinear cells are piecewise smooth; a smaller step keeps the
    // positional stencil inside one cell at the finest level.
    let h = cfg.step;
    let mut enc = Tally::new("encoder", cfg);
    for k in 0..3 {
        let n = central(h * 0.01, |d| {
            let mut m = mu;
            m[k] += d;
            loss(&field, &m, &z, &audio, &expr)
        })?;
        enc.check(ig.mu[k], n, || format!("mu[{k}]"));
    }
    let touched: Vec<usize> = tables.iter().map(|(i, _)| *i as usize).collect();
    for s in 0..cfg.samples {
        let i = if s % 2 == 0 { touched[rng.random_range(0..touched.len())] } else { rng.random_range(0..dense.len()) };
        let n = central(h, |d| {
            let mut f = field.clone();
            f.encoder.tables[i] += d;
            loss(&f, &mu, &z, &audio, &expr)
        })?;
        enc.check(dense[i], n, || format!("table[{i}]"));
    }
    let mut net = Tally::new("mlp", cfg);
    for _ in 0..cfg.samples {
        let i = rng.random_range(0..mlp.len());
        let n = central(h, |d| {
            let mut f = field.clone();
            f.mlp.params[i] += d;
            loss(&f, &mu, &z, &audio, &expr)
        })?;
        net.check(mlp[i], n, || format!("weight[{i}]"));
    }
    for k in 0..audio.len() {
        let n = central(h, |d| {
            let mut a = audio.clone();
            a[k] += d;
            loss(&field, &mu, &z, &a, &expr)
        })?;
        net.check(ig.audio[k], n, || format!("audio[{k}]"));
    }
    for k in 0..expr.len() {
        let n = central(h, |d| {
            let mut e = expr.clone();
            e[k] += d;
            loss(&field, &mu, &z, &audio, &e)
        })?;
        net.check(ig.expression[k], n, || format!("expression[{k}]"));
    }
    Ok((enc.report, net.report))
}

/// Loss through deform -> render, with gradients for the embeddings, the
/// canonical centers, the encoder tables and the MLP weights.
fn check_chain(seed: u64, cfg: &GradCheckConfig) -> Result<(SuiteReport, SuiteReport)> {
    let (cloud, cam) = random_scene(seed, cfg.splats, cfg.width, cfg.height);
    let layout = FieldLayout { embedding_dim: cloud.embedding_dim, audio_dim: 5, expression_dim: 3 };
    let field = random_field(seed ^ 0xc4a1, cloud.bounds, layout)?;
    let mut rng = stream_rng(seed ^ 0xc4a2, Stream::GradCheck);
    let (audio, expr) = conditioning(&mut rng, &layout);
    let loss = RenderLoss::new(&mut rng, cfg.width, cfg.height);
    let eval = |f: &DeformationField, c: &PrimitiveCloud| -> Result<f64> {
        let d = f.deform_cloud(c, &audio, &expr)?;
        loss.eval(&d.cloud, &cam)
    };
    let deformed = field.deform_cloud(&cloud, &audio, &expr)?;
    let out = render(&deformed.cloud, &cam, [0.0; 3])?;
    let gd = render_backward(&deformed.cloud, &out, &loss.color, Some(&loss.opacity))?;
    let (gc, gf) = field.backward_cloud(&cloud, &deformed, &gd)?;
    let h = cfg.step;
    let mut emb = Tally::new("embeddings", cfg);
    let d = cloud.embedding_dim;
    for i in 0..cloud.len() {
        for k in 0..d {
            let n = central(h, |s| {
                let mut c = cloud.clone();
                c.primitives[i].embedding[k] += s;
                eval(&field, &c)
            })?;
            emb.check(gc.embedding[i * d + k], n, || format!("splat {i} z[{k}]"));
        }
    }
    let mut chain = Tally::new("full chain", cfg);
    for i in 0..cloud.len() {
        for k in 0..3 {
            let n = central(h * 0.01, |s| {
                let mut c = cloud.clone();
                c.primitives[i].mu[k] += s;
                eval(&field, &c)
            })?;
            chain.check(gc.mu[i][k], n, || format!("splat {i} canonical mu[{k}]"));
        }
    }
    let nz: Vec<usize> = gf.tables.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
    for _ in 0..cfg.samples.min(nz.len()) {
        let i = nz[rng.random_range(0..nz.len())];
        let n = central(h, |s| {
            let mut f = field.clone();
            f.encoder.tables[i] += s;
            eval(&f, &cloud)
        })?;
        chain.check(gf.tables[i], n, || format!("table[{i}]"));
    }
    for _ in 0..cfg.samples {
        let i = rng.random_range(0..gf.mlp.len());
        let n = central(h, |s| {
            let mut f = field.clone();
            f.mlp.params[i] += s;
            eval(&f, &cloud)
        })?;
        chain.check(gf.mlp[i], n, || format!("weight[{i}]"));
    }
    Ok((emb.report, chain.report))
}

fn check_fusion(seed: u64, cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = stream_rng(seed ^ 0xf05e, Stream::GradCheck);
    let (w, h) = (cfg.width, cfg.height);
    let mut img = |c: usize, lo: f64, hi: f64| {
        let mut im = Image::new(w, h, c);
        im.data.iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
        im
    };
    // Ranges keep the fused sum strictly inside (0, 1), away from the clamp.
    let layers = PortraitLayers {
        hair_color: img(3, 0.0, 0.1),
        face_color: img(3, 0.05, 0.45),
        face_opacity: img(1, 0.0, 1.0),
        mouth_color: img(3, 0.05, 0.45),
    };
    let weights = img(3, -1.0, 1.0);
    let loss = |l: &PortraitLayers| -> Result<f64> {
        Ok(fuse(l)?.image.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum())
    };
    let fused = fuse(&layers)?;
    let g = fuse_backward(&layers, &fused, &weights)?;
    let mut t = Tally::new("fusion", cfg);
    let step = cfg.step;
    for _ in 0..cfg.samples {
        let i = rng.random_range(0..w * h * 3);
        let p = i / 3;
        let n = central(step, |s| {
            let mut l = layers.clone();
            l.face_color.data[i] += s;
            loss(&l)
        })?;
        t.check(g.face_color.data[i], n, || format!("face color[{i}]"));
        let n = central(step, |s| {
            let mut l = layers.clone();
            l.mouth_color.data[i] += s;
            loss(&l)
        })?;
        t.check(g.mouth_color.data[i], n, || format!("mouth color[{i}]"));
        let n = central(step, |s| {
            let mut l = layers.clone();
            l.face_opacity.data[p] += s;
            loss(&l)
        })?;
        t.check(g.face_opacity.data[p], n, || format!("face opacity[{p}]"));
    }
    Ok(t.report)
}

/// Runs every suite on `config.scenes` scenes derived from `seed`.
pub fn run(seed: u64, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let names = ["rasterizer", "encoder", "mlp", "embeddings", "fusion", "full chain"];
    let mut suites: Vec<SuiteReport> = names.iter().map(|n| SuiteReport::new(n)).collect();
    for s in 0..config.scenes {
        let scene_seed = seed.wrapping_mul(1_000_003).wrapping_add(s as u64);
        let model = if s % 2 == 0 { ColorModel::Rgb } else { ColorModel::SphericalHarmonics1 };
        suites[0].merge(check_rasterizer(scene_seed, config, model)?);
        let (enc, mlp) = check_field_parts(scene_seed, config)?;
        suites[1].merge(enc);
        suites[2].merge(mlp);
        let (emb, chain) = check_chain(scene_seed, config)?;
        suites[3].merge(emb);
        suites[5].merge(chain);
        suites[4].merge(check_fusion(scene_seed, config)?);
    }
    Ok(GradCheckReport { seed, scenes: config.scenes, suites })
}
