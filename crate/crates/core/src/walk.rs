//! Continuous-time simple random walk on a cluster and the diffusion
//! constant `D = lim MSD_coord / (2t)`.
//!
//! The walk crosses every incident open bond at rate 1 and is unwrapped on
//! the torus through the direction codes of the cluster graph, so
//! displacements are measured on the periodic lift.

use std::io::Write;

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::percolation::{ClusterGraph, Environment};
use crate::rng::{self, domain};
use crate::stats::MeanSe;

/// Per-coordinate variance of the walk divided by time in the `p = 1` limit.
pub const NORMALIZER: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkOptions {
    pub walkers: usize,
    /// Microscopic time.
    pub horizon: f64,
    /// Number of grid intervals; the grid includes `t = 0`.
    pub grid: usize,
    pub seed: u64,
}

impl Default for WalkOptions {
    fn default() -> Self {
        WalkOptions { walkers: 2000, horizon: 200.0, grid: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkEstimate {
    pub times: Vec<f64>,
    /// `msd[i][c]`: mean squared displacement along axis `c` at `times[i]`.
    pub msd: Vec<Vec<f64>>,
    /// Slope of the coordinate-averaged MSD over the fit window.
    pub slope: f64,
    pub d_hat: f64,
    pub se: f64,
    pub d_coord: Vec<f64>,
    pub d_coord_se: Vec<f64>,
    pub mean_displacement: Vec<f64>,
    pub mean_displacement_se: Vec<f64>,
    pub walkers: usize,
    pub normalizer: f64,
}

impl WalkEstimate {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let d = self.d_coord.len();
        write!(w, "t")?;
        for c in 0..d {
            write!(w, ",msd_{c}")?;
        }
        writeln!(w, ",msd_mean")?;
        for (t, row) in self.times.iter().zip(&self.msd) {
            write!(w, "{t}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{}", row.iter().sum::<f64>() / d as f64)?;
        }
        Ok(())
    }
}

/// Walks one trajectory, returning the unwrapped displacement at each time.
fn walk(graph: &ClusterGraph, times: &[f64], rng: &mut impl Rng) -> Vec<Vec<i64>> {
    let d = graph.dim();
    let mut site = rng.random_range(0..graph.len());
    let mut disp = vec![0i64; d];
    let mut out = Vec::with_capacity(times.len());
    let hold = |site: usize, rng: &mut dyn rand::RngCore| -> f64 {
        let deg = graph.degree(site);
        if deg == 0 {
            return f64::INFINITY;
        }
        let e: f64 = rand::Rng::sample(rng, Exp1);
        e / deg as f64
    };
    let mut next = hold(site, rng);
    for &t in times {
        while next <= t {
            let k = rng.random_range(0..graph.degree(site));
            let dir = graph.directions(site)[k];
            disp[(dir >> 1) as usize] += if dir & 1 == 0 { 1 } else { -1 };
            site = graph.neighbors(site)[k] as usize;
            next += hold(site, rng);
        }
        out.push(disp.clone());
    }
    out
}

/// Estimates `D` from independent walkers started uniformly on `graph`.
/// The slope is fitted through the origin on the second half of the grid.
pub fn estimate_diffusion(graph: &ClusterGraph, opts: &WalkOptions) -> Result<WalkEstimate> {
    if opts.walkers == 0 {
        return Err(invalid("walkers", "at least one walker is required"));
    }
    if !(opts.horizon > 0.0 && opts.horizon.is_finite()) {
        return Err(invalid("horizon", format!("horizon must be positive, got {}", opts.horizon)));
    }
    if opts.grid < 2 {
        return Err(invalid("grid", "the time grid needs at least two intervals"));
    }
    if graph.is_empty() {
        return Err(crate::Error::DegenerateEnvironment { sites: 0 });
    }
    let d = graph.dim();
    let times: Vec<f64> = (0..=opts.grid).map(|i| opts.horizon * i as f64 / opts.grid as f64).collect();
    let window: Vec<usize> = (0..times.len()).filter(|&i| 2.0 * times[i] >= opts.horizon).collect();
    let tt: f64 = window.iter().map(|&i| times[i] * times[i]).sum();

    let paths: Vec<Vec<Vec<i64>>> = (0..opts.walkers)
        .into_par_iter()
        .map(|w| walk(graph, &times, &mut rng::stream(opts.seed, domain::WALK, w as u64)))
        .collect();

    let mut msd = vec![vec![0.0; d]; times.len()];
    for path in &paths {
        for (row, x) in msd.iter_mut().zip(path) {
            for c in 0..d {
                row[c] += (x[c] * x[c]) as f64;
            }
        }
    }
    for row in &mut msd {
        row.iter_mut().for_each(|v| *v /= opts.walkers as f64);
    }

    // per-walker slopes: the mean of slopes is the slope of the mean
    let slope_of = |path: &Vec<Vec<i64>>, c: usize| -> f64 {
        window.iter().map(|&i| times[i] * (path[i][c] * path[i][c]) as f64).sum::<f64>() / tt
    };
    let mut d_coord = Vec::with_capacity(d);
    let mut d_coord_se = Vec::with_capacity(d);
    let mut mean_displacement = Vec::with_capacity(d);
    let mut mean_displacement_se = Vec::with_capacity(d);
    for c in 0..d {
        let s: Vec<f64> = paths.iter().map(|p| slope_of(p, c) / NORMALIZER).collect();
        let m = MeanSe::of(&s);
        d_coord.push(m.mean);
        d_coord_se.push(m.se);
        let x: Vec<f64> = paths.iter().map(|p| p[times.len() - 1][c] as f64).collect();
        let m = MeanSe::of(&x);
        mean_displacement.push(m.mean);
        mean_displacement_se.push(m.se);
    }
    let pooled: Vec<f64> =
        paths.iter().map(|p| (0..d).map(|c| slope_of(p, c)).sum::<f64>() / (d as f64 * NORMALIZER)).collect();
    let pooled = MeanSe::of(&pooled);
    Ok(WalkEstimate {
        times,
        msd,
        slope: pooled.mean * NORMALIZER,
        d_hat: pooled.mean,
        se: pooled.se,
        d_coord,
        d_coord_se,
        mean_displacement,
        mean_displacement_se,
        walkers: opts.walkers,
        normalizer: NORMALIZER,
    })
}

/// Quenched estimates on `environments` independent environments; the
/// walker seed of environment `e` is derived from `opts.seed` and `e`.
pub fn diffusion_by_environment(
    dim: usize,
    side: usize,
    p: f64,
    environments: usize,
    env_seed: u64,
    opts: &WalkOptions,
) -> Result<Vec<WalkEstimate>> {
    (0..environments)
        .map(|e| {
            let env = Environment::generate(dim, side, p, crate::percolation::replica_seed(env_seed, e))?;
            let graph = env.giant()?;
            let o = WalkOptions { seed: rng::derive_seed(opts.seed, domain::WALK, e as u64 + 1), ..*opts };
            estimate_diffusion(&graph, &o)
        })
        .collect()
}
