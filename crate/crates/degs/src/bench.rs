//! Forward-render throughput on a random cloud.

use std::time::Instant;

use degs_core::render::render_with;
use degs_core::rng::{stream_rng, Stream};
use degs_core::scene::{init_random_cloud, ColorModel};
use degs_core::{Bounds, Branch, Camera};

use crate::commands::{BenchOptions, BenchResult};
use crate::error::{DegsError, Result};

pub fn run(o: &BenchOptions) -> Result<BenchResult> {
    if o.renders == 0 || o.threads == 0 {
        return Err(DegsError::Config("bench needs at least one render and one thread".into()));
    }
    let bounds = Bounds::new([-1.0; 3], [1.0; 3])?;
    let cloud = init_random_cloud(o.splats, bounds, Branch::Face, 0, ColorModel::Rgb, &mut stream_rng(o.seed, Stream::Bench))?;
    let camera = Camera::looking_at_origin(o.width, o.height, 1.25 * o.width.min(o.height) as f64, 4.0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(o.threads)
        .build()
        .map_err(|e| DegsError::Config(format!("cannot build a {}-thread pool: {e}", o.threads)))?;
    let (seconds, threads) = pool.install(|| -> Result<(f64, usize)> {
        render_with(&cloud, &camera, [0.0; 3], false)?;
        let start = Instant::now();
        for _ in 0..o.renders {
            std::hint::black_box(render_with(&cloud, &camera, [0.0; 3], false)?);
        }
        Ok((start.elapsed().as_secs_f64(), rayon::current_num_threads()))
    })?;
    Ok(BenchResult {
        renders_per_sec: o.renders as f64 / seconds,
        seconds,
        renders: o.renders,
        threads,
        available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
    })
}
