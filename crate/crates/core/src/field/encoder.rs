//! Tri-plane multiresolution hash encoder.
//!
//! A position is normalized into the unit cube of the cloud bounds and
//! projected onto the XY, XZ and YZ planes. Each plane holds `L` levels of
//! `T x F` feature tables at resolutions growing geometrically from `N_min`
//! to `N_max`; a query bilinearly interpolates the four surrounding grid
//! vertices per level. Coarse levels whose vertex grid fits in `T` rows are
//! indexed densely, finer ones through a spatial hash.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::scene::Bounds;

const PLANES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
const HASH_PRIME: u64 = 2_654_435_761;
/// Table entries start uniform in `[-INIT_RANGE, INIT_RANGE]`.
pub const INIT_RANGE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub levels: usize,
    pub table_size: usize,
    pub features: usize,
    pub min_resolution: usize,
    pub max_resolution: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            levels: 8,
            table_size: 1 << 14,
            features: 2,
            min_resolution: 16,
            max_resolution: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.table_size == 0 || self.features == 0 {
            return Err(Error::Config("encoder levels, table size and features must be positive".into()));
        }
        if self.min_resolution == 0 || self.max_resolution < self.min_resolution {
            return Err(Error::Config("encoder resolutions must satisfy 1 <= N_min <= N_max".into()));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        3 * self.levels * self.features
    }

    pub fn table_len(&self) -> usize {
        3 * self.levels * self.table_size * self.features
    }

    /// `N_l = floor(N_min * b^l)` with `b` chosen so the last level is `N_max`.
    pub fn resolutions(&self) -> Vec<usize> {
        if self.levels == 1 {
            return vec![self.min_resolution];
        }
        let growth = math::exp(
            (math::ln(self.max_resolution as f64) - math::ln(self.min_resolution as f64))
                / (self.levels - 1) as f64,
        );
        (0..self.levels)
            .map(|l| math::floor(self.min_resolution as f64 * math::pow(growth, l as f64) + 1e-9) as usize)
            .collect()
    }
}

#[derive(Debug)]
pub struct TriPlaneHashEncoder {
    pub config: EncoderConfig,
    pub bounds: Bounds,
    /// `[plane][level][row][feature]`, flattened.
    pub tables: Vec<f64>,
    resolutions: Vec<usize>,
    out_of_bounds: AtomicU64,
}

impl Clone for TriPlaneHashEncoder {
    fn clone(&self) -> Self {
        TriPlaneHashEncoder {
            config: self.config,
            bounds: self.bounds,
            tables: self.tables.clone(),
            resolutions: self.resolutions.clone(),
            out_of_bounds: AtomicU64::new(self.out_of_bounds()),
        }
    }
}

impl PartialEq for TriPlaneHashEncoder {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.bounds == other.bounds && self.tables == other.tables
    }
}

/// The four interpolation corners of one plane/level.
#[derive(Debug, Clone, Copy)]
struct Corners {
    rows: [usize; 4],
    weights: [f64; 4],
    /// d weights / d u and d weights / d v (plane coordinates in [0, 1]).
    dw_du: [f64; 4],
    dw_dv: [f64; 4],
}

impl TriPlaneHashEncoder {
    pub fn new<R: Rng>(config: EncoderConfig, bounds: Bounds, rng: &mut R) -> Result<Self> {
        let mut enc = Self::zeros(config, bounds)?;
        for v in enc.tables.iter_mut() {
            *v = (rng.random::<f64>() * 2.0 - 1.0) * INIT_RANGE;
        }
        Ok(enc)
    }

    pub fn zeros(config: EncoderConfig, bounds: Bounds) -> Result<Self> {
        config.validate()?;
        bounds.validate()?;
        Ok(TriPlaneHashEncoder {
            config,
            bounds,
            tables: vec![0.0; config.table_len()],
            resolutions: config.resolutions(),
            out_of_bounds: AtomicU64::new(0),
        })
    }

    pub fn with_tables(config: EncoderConfig, bounds: Bounds, tables: Vec<f64>) -> Result<Self> {
        let mut enc = Self::zeros(config, bounds)?;
        if tables.len() != enc.tables.len() {
            return Err(Error::DimensionMismatch {
                what: "encoder tables",
                expected: enc.tables.len(),
                actual: tables.len(),
            });
        }
        enc.tables = tables;
        Ok(enc)
    }

    pub fn output_width(&self) -> usize {
        self.config.output_width()
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    /// Number of queries that fell outside the bounds and were clamped.
    pub fn out_of_bounds(&self) -> u64 {
        self.out_of_bounds.load(Ordering::Relaxed)
    }

    /// Row of grid vertex `(i, j)` at a level of resolution `res`.
    pub fn vertex_row(&self, res: usize, i: usize, j: usize) -> usize {
        let t = self.config.table_size;
        let side = res + 1;
        if side * side <= t {
            i + j * side
        } else {
            (((i as u64) ^ (j as u64).wrapping_mul(HASH_PRIME)) % t as u64) as usize
        }
    }

    /// Flat offset of a table row.
    pub fn row_offset(&self, plane: usize, level: usize, row: usize) -> usize {
        ((plane * self.config.levels + level) * self.config.table_size + row) * self.config.features
    }

    /// Normalized coordinates plus a per-axis "inside" flag (clamped axes
    /// carry no positional gradient).
    fn normalize(&self, mu: &Vec3) -> ([f64; 3], [bool; 3]) {
        let mut u = [0.0; 3];
        let mut inside = [true; 3];
        let mut clamped = false;
        for k in 0..3 {
            let ext = self.bounds.max[k] - self.bounds.min[k];
            if ext <= 0.0 {
                u[k] = 0.5;
                inside[k] = false;
                continue;
            }
            let v = (mu[k] - self.bounds.min[k]) / ext;
            if v < 0.0 || v > 1.0 {
                clamped = true;
                inside[k] = false;
            }
            u[k] = v.clamp(0.0, 1.0);
        }
        if clamped {
            self.out_of_bounds.fetch_add(1, Ordering::Relaxed);
        }
        (u, inside)
    }

    fn corners(&self, res: usize, u: f64, v: f64) -> Corners {
        let cell = |c: f64| {
            let x = c * res as f64;
            let i = (math::floor(x) as usize).min(res - 1);
            (i, x - i as f64)
        };
        let (i, fx) = cell(u);
        let (j, fy) = cell(v);
        let r = res as f64;
        Corners {
            rows: [
                self.vertex_row(res, i, j),
                self.vertex_row(res, i + 1, j),
                self.vertex_row(res, i, j + 1),
                self.vertex_row(res, i + 1, j + 1),
            ],
            weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            dw_du: [-r * (1.0 - fy), r * (1.0 - fy), -r * fy, r * fy],
            dw_dv: [-r * (1.0 - fx), -r * fx, r * (1.0 - fx), r * fx],
        }
    }

    /// Writes the `3 * L * F` feature vector (plane-major, then level).
    pub fn encode_into(&self, mu: &Vec3, out: &mut [f64]) {
        let (u, _) = self.normalize(mu);
        let f = self.config.features;
        for (p, &(a, b)) in PLANES.iter().enumerate() {
            for (l, &res) in self.resolutions.iter().enumerate() {
                let c = self.corners(res, u[a], u[b]);
                let dst = &mut out[(p * self.config.levels + l) * f..][..f];
                dst.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..4 {
                    let row = &self.tables[self.row_offset(p, l, c.rows[k])..][..f];
                    for (d, r) in dst.iter_mut().zip(row) {
                        *d += c.weights[k] * r;
                    }
                }
            }
        }
    }

    pub fn encode(&self, mu: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.output_width()];
        self.encode_into(mu, &mut out);
        out
    }

    /// Pushes `(table offset, gradient)` pairs for `d_out` and returns the
    /// gradient w.r.t. `mu`.
    pub fn backward(&self, mu: &Vec3, d_out: &[f64], table_grads: &mut Vec<(u32, f64)>) -> Vec3 {
        let (u, inside) = self.normalize_quiet(mu);
        let f = self.config.features;
        let mut d_u = [0.0; 3];
        for (p, &(a, b)) in PLANES.iter().enumerate() {
            for (l, &res) in self.resolutions.iter().enumerate() {
                let c = self.corners(res, u[a], u[b]);
                let g = &d_out[(p * self.config.levels + l) * f..][..f];
                for k in 0..4 {
                    let off = self.row_offset(p, l, c.rows[k]);
                    let row = &self.tables[off..off + f];
                    let mut dot = 0.0;
                    for q in 0..f {
                        table_grads.push(((off + q) as u32, c.weights[k] * g[q]));
                        dot += g[q] * row[q];
                    }
                    d_u[a] += c.dw_du[k] * dot;
                    d_u[b] += c.dw_dv[k] * dot;
                }
            }
        }
        let mut d_mu = [0.0; 3];
        for k in 0..3 {
            if inside[k] {
                d_mu[k] = d_u[k] / (self.bounds.max[k] - self.bounds.min[k]);
            }
        }
        d_mu
    }

    fn normalize_quiet(&self, mu: &Vec3) -> ([f64; 3], [bool; 3]) {
        let before = self.out_of_bounds();
        let r = self.normalize(mu);
        self.out_of_bounds.store(before, Ordering::Relaxed);
        r
    }
}
