//! Good and bad boxes at scales `(k, l)`, and chemical distances.
//!
//! A base box of side `k` is good when the cluster sites inside it are
//! joined by open paths that stay within the enlarged box of side
//! `(2l + 1) k` centered on it. The enlarged box is cut out of the torus as
//! a cube: bonds that would wrap across its own faces are not used.

use std::collections::VecDeque;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::percolation::{replica_seed, BondLattice, Environment, Torus, UnionFind};
use crate::rng::{self, domain};
use crate::stats::{linear_fit, LinearFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxPartition {
    pub dim: usize,
    pub side: usize,
    pub k: usize,
    pub l: usize,
}

impl BoxPartition {
    pub fn new(dim: usize, side: usize, k: usize, l: usize) -> Result<Self> {
        if k == 0 || !side.is_multiple_of(k) {
            return Err(invalid("k", format!("box side {k} must divide n = {side}")));
        }
        if (2 * l + 1) * k > side {
            return Err(invalid("l", format!("enlarged box side (2l+1)k = {} exceeds n = {side}", (2 * l + 1) * k)));
        }
        Ok(BoxPartition { dim, side, k, l })
    }

    /// Boxes per axis.
    pub fn per_axis(&self) -> usize {
        self.side / self.k
    }

    pub fn box_count(&self) -> usize {
        self.per_axis().pow(self.dim as u32)
    }

    pub fn enlarged_side(&self) -> usize {
        (2 * self.l + 1) * self.k
    }

    /// Lower corner of base box `j`.
    pub fn base_corner(&self, j: usize, out: &mut [usize]) {
        let b = self.per_axis();
        let mut j = j;
        for x in out.iter_mut() {
            *x = (j % b) * self.k;
            j /= b;
        }
    }

    /// Lower corner of the enlarged box around base box `j`, wrapped.
    pub fn enlarged_corner(&self, j: usize, out: &mut [usize]) {
        self.base_corner(j, out);
        for x in out.iter_mut() {
            *x = (*x + self.side - self.l * self.k) % self.side;
        }
    }

    /// Base box containing `site`.
    pub fn box_of(&self, torus: &Torus, site: usize) -> usize {
        let mut c = vec![0; self.dim];
        torus.coords(site, &mut c);
        let b = self.per_axis();
        c.iter().rev().fold(0, |acc, &x| acc * b + x / self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxClassification {
    pub partition: BoxPartition,
    pub good: Vec<bool>,
    /// `|B_j^0|`, cluster sites in each base box.
    pub cluster_sites: Vec<usize>,
    pub good_count: usize,
    pub bad_count: usize,
    /// `|C_n \ B_n|`.
    pub bad_sites: usize,
}

impl BoxClassification {
    /// `|C_n \ B_n| / n^d`.
    pub fn bad_fraction(&self) -> f64 {
        self.bad_sites as f64 / (self.partition.side as f64).powi(self.partition.dim as i32)
    }
}

fn local_site(a: &[usize], m: usize) -> usize {
    a.iter().rev().fold(0, |acc, &x| acc * m + x)
}

/// Whether the cluster sites of base box `j` lie in one component of the
/// open subgraph induced on its enlarged box. Returns `(good, |B_j^0|)`.
fn classify_one(env: &Environment, part: &BoxPartition, j: usize) -> (bool, usize) {
    let torus = env.lattice.torus();
    let d = part.dim;
    let m = part.enlarged_side();
    let cells = m.pow(d as u32);
    let mut corner = vec![0; d];
    part.enlarged_corner(j, &mut corner);
    let mut uf = UnionFind::new(cells);
    let mut a = vec![0usize; d];
    let mut g = vec![0usize; d];
    let global = |a: &[usize], g: &mut [usize]| {
        for i in 0..d {
            g[i] = (corner[i] + a[i]) % part.side;
        }
        torus.site_of(g)
    };
    for cell in 0..cells {
        let mut c = cell;
        for x in a.iter_mut() {
            *x = c % m;
            c /= m;
        }
        let site = global(&a, &mut g);
        let mut stride = 1;
        for axis in 0..d {
            if a[axis] + 1 < m && env.lattice.is_open(env.lattice.bond_index(site, axis)) {
                uf.union(cell, cell + stride);
            }
            stride *= m;
        }
    }
    let lk = part.l * part.k;
    let mut root = None;
    let mut good = true;
    let mut count = 0;
    for off in 0..part.k.pow(d as u32) {
        let mut c = off;
        for x in a.iter_mut() {
            *x = lk + c % part.k;
            c /= part.k;
        }
        let site = global(&a, &mut g);
        if !env.clusters.in_largest(site) {
            continue;
        }
        count += 1;
        let r = uf.find(local_site(&a, m));
        match root {
            None => root = Some(r),
            Some(r0) if r0 != r => good = false,
            _ => {}
        }
    }
    (good, count)
}

/// Classifies every base box. Boxes without cluster sites are good.
pub fn classify_boxes(env: &Environment, k: usize, l: usize) -> Result<BoxClassification> {
    let part = BoxPartition::new(env.lattice.dim(), env.lattice.side(), k, l)?;
    let res: Vec<(bool, usize)> = (0..part.box_count()).into_par_iter().map(|j| classify_one(env, &part, j)).collect();
    let good: Vec<bool> = res.iter().map(|r| r.0).collect();
    let cluster_sites: Vec<usize> = res.iter().map(|r| r.1).collect();
    let good_count = good.iter().filter(|&&g| g).count();
    let bad_sites = res.iter().filter(|r| !r.0).map(|r| r.1).sum();
    Ok(BoxClassification {
        partition: part,
        bad_count: good.len() - good_count,
        good,
        cluster_sites,
        good_count,
        bad_sites,
    })
}

pub fn bad_fraction(env: &Environment, k: usize, l: usize) -> Result<f64> {
    Ok(classify_boxes(env, k, l)?.bad_fraction())
}

/// Breadth-first distances along open bonds from `source`, stopping at
/// depth `max_depth`. Unreached sites hold `u32::MAX`.
pub fn distances_from(lattice: &BondLattice, source: usize, max_depth: u32) -> Vec<u32> {
    let mut dist = vec![u32::MAX; lattice.torus().site_count()];
    let mut queue = VecDeque::new();
    dist[source] = 0;
    queue.push_back(source);
    while let Some(x) = queue.pop_front() {
        let dx = dist[x];
        if dx == max_depth {
            continue;
        }
        for (y, _, _) in lattice.open_neighbors(x) {
            if dist[y] == u32::MAX {
                dist[y] = dx + 1;
                queue.push_back(y);
            }
        }
    }
    dist
}

/// Graph distance along open bonds, `None` if `y` is not reachable.
pub fn chemical_distance(lattice: &BondLattice, x: usize, y: usize) -> Option<usize> {
    if x == y {
        return Some(0);
    }
    let mut dist = vec![u32::MAX; lattice.torus().site_count()];
    let mut queue = VecDeque::new();
    dist[x] = 0;
    queue.push_back(x);
    while let Some(a) = queue.pop_front() {
        for (b, _, _) in lattice.open_neighbors(a) {
            if dist[b] == u32::MAX {
                dist[b] = dist[a] + 1;
                if b == y {
                    return Some(dist[b] as usize);
                }
                queue.push_back(b);
            }
        }
    }
    None
}

/// The grid `1.0, 1.25, .., 4.0`.
pub fn default_gammas() -> Vec<f64> {
    (0..=12).map(|i| 1.0 + 0.25 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailOptions {
    pub separations: Vec<usize>,
    pub gammas: Vec<f64>,
    /// Source points per environment.
    pub sources: usize,
    pub environments: usize,
    /// Connected pairs required at every separation.
    pub min_pairs: usize,
    pub min_r_squared: f64,
    pub seed: u64,
}

impl Default for TailOptions {
    fn default() -> Self {
        TailOptions {
            separations: vec![8, 16, 24, 32],
            gammas: default_gammas(),
            sources: 1000,
            environments: 4,
            min_pairs: 200,
            min_r_squared: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistancePair {
    /// Separation label the pair was drawn for.
    pub separation: usize,
    pub euclidean: f64,
    /// `None` when the distance exceeds the search depth.
    pub chemical: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub gamma: f64,
    pub fit: LinearFit,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChemicalDistanceStats {
    pub separations: Vec<usize>,
    /// Mean Euclidean `|z|` at each separation.
    pub mean_norm: Vec<f64>,
    pub gammas: Vec<f64>,
    /// `frequency[s][g]`: fraction of connected pairs at separation `s`
    /// with `D > gamma_g |z|`.
    pub frequency: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub pairs: Vec<DistancePair>,
    /// One fit per gamma whose frequencies are all positive.
    pub fits: Vec<TailFit>,
    pub gamma_hat: Option<f64>,
    /// Tail rate, minus the fitted slope at `gamma_hat`.
    pub delta_hat: Option<f64>,
}

impl ChemicalDistanceStats {
    pub fn selected_fit(&self) -> Option<&TailFit> {
        self.gamma_hat.and_then(|g| self.fits.iter().find(|f| f.gamma == g))
    }
}

/// Offsets `z` for separation `s`: `+-s e_i` and the diagonals
/// `r (+-1, .., +-1)` with `r = round(s / sqrt(d))`.
fn offsets(dim: usize, s: usize) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    for axis in 0..dim {
        for sign in [1i64, -1] {
            let mut z = vec![0i64; dim];
            z[axis] = sign * s as i64;
            out.push(z);
        }
    }
    if dim > 1 {
        let r = (s as f64 / (dim as f64).sqrt()).round() as i64;
        for mask in 0..(1usize << dim) {
            out.push((0..dim).map(|i| if mask >> i & 1 == 1 { -r } else { r }).collect());
        }
    }
    out
}

/// Estimates `P(x <-> x + z, D(x, x + z) > gamma |z|)` over sources drawn
/// uniformly on the giant cluster, conditioned on the target being in the
/// giant cluster, and fits `log frequency` against `|z|` for each gamma.
/// `gamma_hat` is the smallest gamma with negative slope and
/// `R^2 >= min_r_squared`.
pub fn tail_estimate(
    dim: usize,
    side: usize,
    p: f64,
    env_seed: u64,
    opts: &TailOptions,
) -> Result<ChemicalDistanceStats> {
    if opts.separations.is_empty() || opts.gammas.is_empty() {
        return Err(invalid("separations", "need at least one separation and one gamma"));
    }
    let smax = *opts.separations.iter().max().unwrap();
    if 2 * smax >= side {
        return Err(invalid("separations", format!("largest separation {smax} must be below n/2 = {}", side / 2)));
    }
    let gmax = opts.gammas.iter().cloned().fold(0.0, f64::max);
    let depth = (gmax * smax as f64 * 1.01).ceil() as u32 + 1;
    let torus = Torus::new(dim, side)?;
    let mut pairs = Vec::new();
    for e in 0..opts.environments {
        let env = Environment::generate(dim, side, p, replica_seed(env_seed, e))?;
        let giant: Vec<usize> = (0..torus.site_count()).filter(|&s| env.clusters.in_largest(s)).collect();
        if giant.len() < 2 {
            return Err(Error::DegenerateEnvironment { sites: giant.len() });
        }
        let env_pairs: Vec<Vec<DistancePair>> = (0..opts.sources)
            .into_par_iter()
            .map(|i| {
                let mut rng = rng::stream(opts.seed, domain::CHEMDIST, (e * opts.sources + i) as u64);
                let x = giant[rng.random_range(0..giant.len())];
                let dist = distances_from(&env.lattice, x, depth);
                let mut xc = vec![0usize; dim];
                let mut yc = vec![0usize; dim];
                torus.coords(x, &mut xc);
                let mut out = Vec::new();
                for &s in &opts.separations {
                    for z in offsets(dim, s) {
                        for i in 0..dim {
                            yc[i] = (xc[i] as i64 + z[i]).rem_euclid(side as i64) as usize;
                        }
                        let y = torus.site_of(&yc);
                        if !env.clusters.in_largest(y) {
                            continue;
                        }
                        let euclidean = z.iter().map(|&v| (v * v) as f64).sum::<f64>().sqrt();
                        let chemical = (dist[y] != u32::MAX).then_some(dist[y]);
                        out.push(DistancePair { separation: s, euclidean, chemical });
                    }
                }
                out
            })
            .collect();
        pairs.extend(env_pairs.into_iter().flatten());
    }

    let mut counts = Vec::new();
    let mut mean_norm = Vec::new();
    let mut frequency = Vec::new();
    for &s in &opts.separations {
        let at: Vec<&DistancePair> = pairs.iter().filter(|q| q.separation == s).collect();
        if at.len() < opts.min_pairs {
            return Err(Error::InsufficientSamples { separation: s, count: at.len(), required: opts.min_pairs });
        }
        counts.push(at.len());
        mean_norm.push(at.iter().map(|q| q.euclidean).sum::<f64>() / at.len() as f64);
        frequency.push(
            opts.gammas
                .iter()
                .map(|&g| {
                    let exceed = at.iter().filter(|q| q.chemical.is_none_or(|c| c as f64 > g * q.euclidean)).count();
                    exceed as f64 / at.len() as f64
                })
                .collect::<Vec<f64>>(),
        );
    }

    let mut fits = Vec::new();
    for (gi, &g) in opts.gammas.iter().enumerate() {
        let ys: Vec<f64> = frequency.iter().map(|f| f[gi]).collect();
        if ys.len() < 2 || ys.iter().any(|&f| f <= 0.0) {
            continue;
        }
        let ly: Vec<f64> = ys.iter().map(|f| f.ln()).collect();
        let fit = linear_fit(&mean_norm, &ly);
        let residuals = mean_norm.iter().zip(&ly).map(|(x, y)| y - fit.intercept - fit.slope * x).collect();
        fits.push(TailFit { gamma: g, fit, residuals });
    }
    let chosen = fits.iter().find(|f| f.fit.slope < 0.0 && f.fit.r_squared >= opts.min_r_squared);
    Ok(ChemicalDistanceStats {
        separations: opts.separations.clone(),
        mean_norm,
        gammas: opts.gammas.clone(),
        frequency,
        counts,
        pairs,
        gamma_hat: chosen.map(|f| f.gamma),
        delta_hat: chosen.map(|f| -f.fit.slope),
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn floyd_warshall(l: &BondLattice) -> Vec<Vec<u32>> {
        let n = l.torus().site_count();
        let inf = u32::MAX / 2;
        let mut d = vec![vec![inf; n]; n];
        for x in 0..n {
            d[x][x] = 0;
            for (y, _, _) in l.open_neighbors(x) {
                d[x][y] = 1;
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = d[i][k] + d[k][j];
                    if via < d[i][j] {
                        d[i][j] = via;
                    }
                }
            }
        }
        d
    }

    #[test]
    fn chemical_distance_matches_floyd_warshall() {
        for (dim, side, p) in [(2, 10, 0.6), (2, 7, 0.5), (3, 4, 0.4), (1, 50, 0.9)] {
            for seed in 0..5 {
                let l = BondLattice::generate(dim, side, p, seed).unwrap();
                let fw = floyd_warshall(&l);
                let n = l.torus().site_count();
                for x in (0..n).step_by(3) {
                    for y in 0..n {
                        let expected = (fw[x][y] < u32::MAX / 2).then_some(fw[x][y] as usize);
                        assert_eq!(chemical_distance(&l, x, y), expected);
                    }
                }
            }
        }
    }

    #[test]
    fn full_lattice_distance_is_l1() {
        let l = BondLattice::generate(2, 12, 1.0, 0).unwrap();
        let t = l.torus();
        for y in 0..t.site_count() {
            assert_eq!(chemical_distance(&l, 5, y), Some(t.l1_distance(5, y)));
        }
    }

    #[test]
    fn detour_around_a_blocked_segment() {
        // open row y = 0, cut bond (2,0)-(3,0), open a detour through y = 1
        let mut l = BondLattice::closed(2, 8).unwrap();
        let t = l.torus();
        for x in 0..8 {
            l.set_open(t.site_of(&[x, 0]), 0, x != 2 && x != 7);
        }
        l.set_open(t.site_of(&[1, 0]), 1, true);
        for x in 1..4 {
            l.set_open(t.site_of(&[x, 1]), 0, true);
        }
        l.set_open(t.site_of(&[4, 0]), 1, true);
        let (a, b) = (t.site_of(&[0, 0]), t.site_of(&[5, 0]));
        assert_eq!(chemical_distance(&l, a, b), Some(5 + 2));
        assert_eq!(chemical_distance(&l, a, a), Some(0));
        assert_eq!(chemical_distance(&l, a, t.site_of(&[0, 4])), None);
    }

    #[test]
    fn full_lattice_has_no_bad_boxes() {
        let env = Environment::generate(2, 32, 1.0, 0).unwrap();
        for (k, l) in [(4, 1), (8, 1), (4, 3), (2, 0)] {
            let c = classify_boxes(&env, k, l).unwrap();
            assert_eq!(c.bad_sites, 0);
            assert_eq!(c.good_count, c.partition.box_count());
        }
    }

    #[test]
    fn partition_checks() {
        let env = Environment::generate(2, 32, 1.0, 0).unwrap();
        assert!(classify_boxes(&env, 5, 1).is_err());
        assert!(classify_boxes(&env, 8, 2).is_err());
        let p = BoxPartition::new(2, 32, 8, 1).unwrap();
        let mut c = [0; 2];
        p.enlarged_corner(0, &mut c);
        assert_eq!(c, [24, 24]);
        let t = Torus::new(2, 32).unwrap();
        assert_eq!(p.box_of(&t, t.site_of(&[9, 17])), 1 + 2 * 4);
    }

    /// Two cluster pieces in base box 0 of a 4x? partition, k = 4, l = 1,
    /// joined by a path leaving the base box.
    fn joined(inside: bool) -> Environment {
        let mut l = BondLattice::closed(2, 24).unwrap();
        let t = l.torus();
        // base box 0 covers [0,4)^2; its enlarged box covers [20,24)u[0,8)
        // pieces at (0,0) and (3,0), each a 2-site vertical bar
        for x in [0, 3] {
            l.set_open(t.site_of(&[x, 0]), 1, true);
        }
        // connect the two bars through row y = 1 going around x = 1..2
        // either inside (row 6) or outside (row 10) the enlarged box
        let row = if inside { 6 } else { 10 };
        for x in [0, 3] {
            for y in 1..row {
                l.set_open(t.site_of(&[x, y]), 1, true);
            }
        }
        for x in 0..3 {
            l.set_open(t.site_of(&[x, row]), 0, true);
        }
        Environment::from_lattice(l)
    }

    #[test]
    fn hand_built_good_and_bad() {
        let good = joined(true);
        let c = classify_boxes(&good, 4, 1).unwrap();
        assert!(c.good[0]);
        assert!(c.cluster_sites[0] > 0);
        let bad = joined(false);
        assert!(bad.clusters.connected(0, 3));
        let c = classify_boxes(&bad, 4, 1).unwrap();
        assert!(!c.good[0]);
        assert_eq!(
            c.bad_sites,
            c.cluster_sites[0] + (1..c.good.len()).filter(|&j| !c.good[j]).map(|j| c.cluster_sites[j]).sum::<usize>()
        );
        // a larger enlargement reaches row 10
        let c = BoxPartition::new(2, 24, 4, 2).unwrap();
        assert_eq!(c.enlarged_side(), 20);
        assert!(classify_boxes(&bad, 4, 2).unwrap().good[0]);
    }

    #[test]
    fn enlarging_never_turns_good_boxes_bad() {
        for seed in 0..4 {
            let env = Environment::generate(2, 64, 0.6, seed).unwrap();
            let mut prev: Option<BoxClassification> = None;
            for l in 0..4 {
                let c = classify_boxes(&env, 8, l).unwrap();
                if let Some(p) = &prev {
                    assert!(p.good.iter().zip(&c.good).all(|(&a, &b)| !a || b));
                    assert!(c.bad_sites <= p.bad_sites);
                }
                prev = Some(c);
            }
        }
    }

    #[test]
    fn tail_on_full_lattice() {
        let opts = TailOptions {
            separations: vec![4, 8],
            gammas: vec![0.75, 1.0, 1.5],
            sources: 20,
            environments: 1,
            min_pairs: 10,
            min_r_squared: 0.9,
            seed: 1,
        };
        let s = tail_estimate(2, 32, 1.0, 0, &opts).unwrap();
        for f in &s.frequency {
            // every pair exceeds 0.75 |z|; only diagonals exceed |z|;
            // nothing exceeds sqrt(2) |z|
            assert_eq!(f[0], 1.0);
            assert!((f[1] - 0.5).abs() < 1e-12);
            assert_eq!(f[2], 0.0);
        }
        assert!(s.pairs.iter().all(|p| p.chemical.unwrap() as f64 >= p.euclidean));
        assert_eq!(s.gamma_hat, None);
    }

    #[test]
    fn insufficient_pairs_reported() {
        let opts = TailOptions { sources: 2, environments: 1, min_pairs: 1000, ..TailOptions::default() };
        assert!(matches!(tail_estimate(2, 128, 0.7, 0, &opts), Err(Error::InsufficientSamples { .. })));
    }
}
