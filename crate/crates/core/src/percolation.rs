//! Bond percolation on the periodic lattice `(Z/nZ)^d`.
//!
//! Site `x = (x_0, .., x_{d-1})` has index `sum_i x_i n^i` (`x_0` varies
//! fastest). The bond leaving `x` in the positive direction of axis `i` has
//! index `site(x) * d + i`, which gives exactly `d n^d` bonds. Bond states
//! are drawn in increasing bond index from the environment stream of
//! [`crate::rng`]: bond `b` is open iff its uniform `u_b < p`. The same seed
//! therefore couples all values of `p` monotonically.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, domain};
use crate::stats::MeanSe;

const FILE_MAGIC: &[u8; 8] = b"PERCENV1";

/// Geometry of the discrete torus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Torus {
    pub dim: usize,
    pub side: usize,
}

impl Torus {
    pub fn new(dim: usize, side: usize) -> Result<Self> {
        if !(1..=8).contains(&dim) {
            return Err(invalid("dim", format!("dimension must be between 1 and 8, got {dim}")));
        }
        if side < 2 {
            return Err(invalid("side", format!("side length must be at least 2, got {side}")));
        }
        let sites = (side as u128).checked_pow(dim as u32);
        match sites {
            Some(s) if s * dim as u128 <= u32::MAX as u128 => Ok(Torus { dim, side }),
            _ => Err(invalid("side", format!("lattice {side}^{dim} is too large"))),
        }
    }

    pub fn site_count(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    pub fn bond_count(&self) -> usize {
        self.dim * self.site_count()
    }

    pub fn coords(&self, mut site: usize, out: &mut [usize]) {
        for c in out.iter_mut().take(self.dim) {
            *c = site % self.side;
            site /= self.side;
        }
    }

    pub fn site_of(&self, coords: &[usize]) -> usize {
        coords.iter().rev().fold(0, |acc, &c| acc * self.side + c % self.side)
    }

    /// Neighbor of `site` one step along `axis`, forward or backward.
    #[inline]
    pub fn step(&self, site: usize, axis: usize, forward: bool) -> usize {
        let stride = self.side.pow(axis as u32);
        let c = (site / stride) % self.side;
        if forward {
            if c + 1 == self.side {
                site + stride - self.side * stride
            } else {
                site + stride
            }
        } else if c == 0 {
            site + (self.side - 1) * stride
        } else {
            site - stride
        }
    }

    /// Shortest l1 distance on the torus.
    pub fn l1_distance(&self, a: usize, b: usize) -> usize {
        let (mut ca, mut cb) = (vec![0; self.dim], vec![0; self.dim]);
        self.coords(a, &mut ca);
        self.coords(b, &mut cb);
        ca.iter()
            .zip(&cb)
            .map(|(&x, &y)| {
                let d = x.abs_diff(y);
                d.min(self.side - d)
            })
            .sum()
    }
}

/// A quenched bond environment.
#[derive(Debug, Clone, PartialEq)]
pub struct BondLattice {
    torus: Torus,
    p: f64,
    seed: u64,
    open: Vec<u64>,
}

impl BondLattice {
    pub fn generate(dim: usize, side: usize, p: f64, seed: u64) -> Result<Self> {
        let torus = Torus::new(dim, side)?;
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid("p", format!("bond probability must lie in [0, 1], got {p}")));
        }
        let mut rng = rng::stream(seed, domain::ENVIRONMENT, 0);
        let mut lattice = BondLattice::closed(dim, side)?;
        lattice.p = p;
        lattice.seed = seed;
        for b in 0..torus.bond_count() {
            if rng::uniform(&mut rng) < p {
                lattice.open[b / 64] |= 1 << (b % 64);
            }
        }
        Ok(lattice)
    }

    /// All bonds closed; used to hand-build instances.
    pub fn closed(dim: usize, side: usize) -> Result<Self> {
        let torus = Torus::new(dim, side)?;
        Ok(BondLattice { torus, p: 0.0, seed: 0, open: vec![0; torus.bond_count().div_ceil(64)] })
    }

    pub fn torus(&self) -> Torus {
        self.torus
    }
    pub fn dim(&self) -> usize {
        self.torus.dim
    }
    pub fn side(&self) -> usize {
        self.torus.side
    }
    pub fn p(&self) -> f64 {
        self.p
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bond_index(&self, site: usize, axis: usize) -> usize {
        site * self.torus.dim + axis
    }

    #[inline]
    pub fn is_open(&self, bond: usize) -> bool {
        self.open[bond / 64] >> (bond % 64) & 1 == 1
    }

    pub fn set_open(&mut self, site: usize, axis: usize, open: bool) {
        let b = self.bond_index(site, axis);
        if open {
            self.open[b / 64] |= 1 << (b % 64);
        } else {
            self.open[b / 64] &= !(1 << (b % 64));
        }
    }

    pub fn open_count(&self) -> usize {
        self.open.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Open neighbors of `site` as `(neighbor, axis, forward)`; parallel
    /// bonds on a side-2 torus are reported once each.
    pub fn open_neighbors(&self, site: usize) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
        let t = self.torus;
        (0..t.dim).flat_map(move |axis| {
            let fwd = self.is_open(self.bond_index(site, axis)).then(|| (t.step(site, axis, true), axis, true));
            let back_site = t.step(site, axis, false);
            let bwd = self.is_open(self.bond_index(back_site, axis)).then_some((back_site, axis, false));
            fwd.into_iter().chain(bwd)
        })
    }

    pub fn open_bonds_subset_of(&self, other: &BondLattice) -> bool {
        self.torus == other.torus && self.open.iter().zip(&other.open).all(|(a, b)| a & !b == 0)
    }

    /// Binary export: magic, `d` and `n` as u32 LE, `p` as f64 LE, seed as
    /// u64 LE, then the bond bitmap (bond `b` is bit `b % 8` of byte `b / 8`).
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(FILE_MAGIC)?;
        w.write_all(&(self.torus.dim as u32).to_le_bytes())?;
        w.write_all(&(self.torus.side as u32).to_le_bytes())?;
        w.write_all(&self.p.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let nbytes = self.torus.bond_count().div_ceil(8);
        let bytes: Vec<u8> = (0..nbytes).map(|i| (self.open[i / 8] >> (8 * (i % 8))) as u8).collect();
        w.write_all(&bytes)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != FILE_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(io)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(io)?;
        let side = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8).map_err(io)?;
        let p = f64::from_le_bytes(b8);
        r.read_exact(&mut b8).map_err(io)?;
        let seed = u64::from_le_bytes(b8);
        let mut lattice = BondLattice::closed(dim, side)?;
        lattice.p = p;
        lattice.seed = seed;
        let mut bytes = vec![0u8; lattice.torus.bond_count().div_ceil(8)];
        r.read_exact(&mut bytes).map_err(io)?;
        for (i, byte) in bytes.into_iter().enumerate() {
            lattice.open[i / 8] |= (byte as u64) << (8 * (i % 8));
        }
        Ok(lattice)
    }
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind { parent: (0..n as u32).collect(), size: vec![1; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] as usize != x {
            let gp = self.parent[self.parent[x] as usize];
            self.parent[x] = gp;
            x = gp as usize;
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra as u32;
        self.size[ra] += self.size[rb];
        true
    }
}

/// Cluster decomposition of a [`BondLattice`].
///
/// Labels are assigned `0, 1, ..` in order of each cluster's smallest site
/// index, so the tie-break "smallest label" is also "contains the smallest
/// site".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterIndex {
    labels: Vec<u32>,
    sizes: Vec<usize>,
    largest: u32,
}

impl ClusterIndex {
    pub fn label(&self, site: usize) -> u32 {
        self.labels[site]
    }
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
    pub fn cluster_count(&self) -> usize {
        self.sizes.len()
    }
    pub fn largest_label(&self) -> u32 {
        self.largest
    }
    pub fn largest_size(&self) -> usize {
        self.sizes[self.largest as usize]
    }
    pub fn in_largest(&self, site: usize) -> bool {
        self.labels[site] == self.largest
    }
    pub fn connected(&self, a: usize, b: usize) -> bool {
        self.labels[a] == self.labels[b]
    }

    /// Relabel an arbitrary partition into canonical form.
    pub fn from_raw_labels(raw: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let mut labels = Vec::with_capacity(raw.len());
        let mut sizes: Vec<usize> = Vec::new();
        for &r in raw {
            let next = map.len() as u32;
            let l = *map.entry(r).or_insert(next);
            if l as usize == sizes.len() {
                sizes.push(0);
            }
            sizes[l as usize] += 1;
            labels.push(l);
        }
        // first maximum wins, i.e. the smallest label among ties
        let largest = sizes.iter().enumerate().fold(0, |best, (i, &s)| if s > sizes[best] { i } else { best }) as u32;
        ClusterIndex { labels, sizes, largest }
    }
}

pub fn find_clusters(lattice: &BondLattice) -> ClusterIndex {
    let t = lattice.torus();
    let mut uf = UnionFind::new(t.site_count());
    for site in 0..t.site_count() {
        for axis in 0..t.dim {
            if lattice.is_open(lattice.bond_index(site, axis)) {
                uf.union(site, t.step(site, axis, true));
            }
        }
    }
    let roots: Vec<usize> = (0..t.site_count()).map(|s| uf.find(s)).collect();
    ClusterIndex::from_raw_labels(&roots)
}

/// Breadth-first labeling; independent of the union-find path.
pub fn bfs_labels(lattice: &BondLattice) -> ClusterIndex {
    let n = lattice.torus().site_count();
    let mut raw = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for start in 0..n {
        if raw[start] != usize::MAX {
            continue;
        }
        raw[start] = start;
        queue.push_back(start);
        while let Some(x) = queue.pop_front() {
            for (y, _, _) in lattice.open_neighbors(x) {
                if raw[y] == usize::MAX {
                    raw[y] = start;
                    queue.push_back(y);
                }
            }
        }
    }
    ClusterIndex::from_raw_labels(&raw)
}

/// Encoded direction of a cluster edge: `2 * axis + (0 forward | 1 backward)`.
pub type Direction = u8;

/// One cluster of an environment viewed as a graph with local indices.
///
/// Local indices follow increasing global site index. Adjacency is stored
/// in compressed rows; each entry carries the lattice direction of the bond
/// so walkers can unwrap their displacement.
#[derive(Debug, Clone)]
pub struct ClusterGraph {
    torus: Torus,
    fingerprint: u64,
    sites: Vec<u32>,
    local: Vec<u32>,
    offsets: Vec<u32>,
    neighbors: Vec<u32>,
    directions: Vec<Direction>,
}

const NOT_IN_CLUSTER: u32 = u32::MAX;

impl ClusterGraph {
    /// The cluster with `label`, without any size requirement.
    pub fn of_label(lattice: &BondLattice, index: &ClusterIndex, label: u32) -> Self {
        let torus = lattice.torus();
        let n = torus.site_count();
        let sites: Vec<u32> = (0..n).filter(|&s| index.label(s) == label).map(|s| s as u32).collect();
        let mut local = vec![NOT_IN_CLUSTER; n];
        for (i, &s) in sites.iter().enumerate() {
            local[s as usize] = i as u32;
        }
        let mut offsets = Vec::with_capacity(sites.len() + 1);
        let mut neighbors = Vec::new();
        let mut directions = Vec::new();
        offsets.push(0);
        for &s in &sites {
            for (y, axis, forward) in lattice.open_neighbors(s as usize) {
                neighbors.push(local[y]);
                directions.push((2 * axis + usize::from(!forward)) as Direction);
            }
            offsets.push(neighbors.len() as u32);
        }
        let mut fp = rng::splitmix64(torus.dim as u64 ^ (torus.side as u64) << 8 ^ (label as u64) << 40);
        for w in &lattice.open {
            fp = rng::splitmix64(fp ^ w);
        }
        fp = rng::splitmix64(fp ^ sites.len() as u64);
        ClusterGraph { torus, fingerprint: fp, sites, local, offsets, neighbors, directions }
    }

    pub fn torus(&self) -> Torus {
        self.torus
    }
    pub fn dim(&self) -> usize {
        self.torus.dim
    }
    /// The scale `n`.
    pub fn side(&self) -> usize {
        self.torus.side
    }
    /// Identifies the environment and cluster this graph was built from.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
    pub fn len(&self) -> usize {
        self.sites.len()
    }
    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
    pub fn global_site(&self, i: usize) -> usize {
        self.sites[i] as usize
    }
    pub fn local_index(&self, global: usize) -> Option<usize> {
        match self.local[global] {
            NOT_IN_CLUSTER => None,
            l => Some(l as usize),
        }
    }
    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        (self.offsets[i + 1] - self.offsets[i]) as usize
    }
    #[inline]
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }
    #[inline]
    pub fn directions(&self, i: usize) -> &[Direction] {
        &self.directions[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }
    pub fn total_degree(&self) -> usize {
        self.neighbors.len()
    }

    /// Macroscopic position `x / n` of local site `i`.
    pub fn position(&self, i: usize, out: &mut [f64]) {
        let mut c = [0usize; 8];
        let d = self.torus.dim;
        self.torus.coords(self.sites[i] as usize, &mut c[..d]);
        for (o, &ci) in out.iter_mut().zip(&c[..d]) {
            *o = ci as f64 / self.torus.side as f64;
        }
    }

    /// Macroscopic positions of every site, row-major `len() x dim()`.
    pub fn positions(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; self.len() * d];
        for (i, chunk) in out.chunks_mut(d).enumerate() {
            self.position(i, chunk);
        }
        out
    }
}

/// A generated environment with its decomposition.
#[derive(Debug, Clone)]
pub struct Environment {
    pub lattice: BondLattice,
    pub clusters: ClusterIndex,
}

impl Environment {
    pub fn generate(dim: usize, side: usize, p: f64, seed: u64) -> Result<Self> {
        let lattice = BondLattice::generate(dim, side, p, seed)?;
        let clusters = find_clusters(&lattice);
        Ok(Environment { lattice, clusters })
    }

    pub fn from_lattice(lattice: BondLattice) -> Self {
        let clusters = find_clusters(&lattice);
        Environment { lattice, clusters }
    }

    pub fn giant_fraction(&self) -> f64 {
        self.clusters.largest_size() as f64 / self.lattice.torus().site_count() as f64
    }

    pub fn giant(&self) -> Result<ClusterGraph> {
        giant_cluster(&self.lattice, &self.clusters)
    }

    pub fn summary(&self) -> EnvironmentSummary {
        EnvironmentSummary {
            dim: self.lattice.dim(),
            side: self.lattice.side(),
            p: self.lattice.p(),
            seed: self.lattice.seed(),
            open_bonds: self.lattice.open_count(),
            bonds: self.lattice.torus().bond_count(),
            cluster_count: self.clusters.cluster_count(),
            giant_size: self.clusters.largest_size(),
            giant_fraction: self.giant_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSummary {
    pub dim: usize,
    pub side: usize,
    pub p: f64,
    pub seed: u64,
    pub open_bonds: usize,
    pub bonds: usize,
    pub cluster_count: usize,
    pub giant_size: usize,
    pub giant_fraction: f64,
}

/// The finite-volume proxy of the infinite cluster: the largest cluster.
pub fn giant_cluster(lattice: &BondLattice, index: &ClusterIndex) -> Result<ClusterGraph> {
    let sites = index.largest_size();
    if sites < 2 {
        return Err(Error::DegenerateEnvironment { sites });
    }
    Ok(ClusterGraph::of_label(lattice, index, index.largest_label()))
}

/// Below this giant fraction an estimate carries a subcritical warning.
pub const SUBCRITICAL_THETA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub theta: f64,
    pub se: f64,
    pub replicas: usize,
    pub warning: Option<String>,
}

/// Replica `r` uses the environment seed `derive_seed(seed, ENVIRONMENT, r)`.
pub fn replica_seed(seed: u64, replica: usize) -> u64 {
    rng::derive_seed(seed, domain::ENVIRONMENT, replica as u64)
}

pub fn estimate_theta(dim: usize, side: usize, p: f64, replicas: usize, seed: u64) -> Result<ThetaEstimate> {
    if replicas == 0 {
        return Err(invalid("replicas", "need at least one replica"));
    }
    Torus::new(dim, side)?;
    let fractions: Vec<f64> = (0..replicas)
        .into_par_iter()
        .map(|r| Environment::generate(dim, side, p, replica_seed(seed, r)).map(|e| e.giant_fraction()))
        .collect::<Result<_>>()?;
    let m = MeanSe::of(&fractions);
    let warning = (m.mean < SUBCRITICAL_THETA)
        .then(|| format!("giant fraction {:.4} below {SUBCRITICAL_THETA}: environment looks subcritical", m.mean));
    Ok(ThetaEstimate { theta: m.mean, se: m.se, replicas, warning })
}

/// Giant-fraction curve over a grid of `p`, using coupled environments
/// (replica `r` shares its bond uniforms across the grid).
pub fn giant_fraction_curve(
    dim: usize,
    side: usize,
    ps: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<Vec<ThetaEstimate>> {
    ps.iter().map(|&p| estimate_theta(dim, side, p, replicas, seed)).collect()
}

/// Crude locator of the percolation threshold: midpoint of the steepest
/// rise of the giant-fraction curve.
pub fn critical_point_estimate(dim: usize, side: usize, ps: &[f64], replicas: usize, seed: u64) -> Result<f64> {
    if ps.len() < 2 {
        return Err(invalid("ps", "need at least two grid points"));
    }
    let curve = giant_fraction_curve(dim, side, ps, replicas, seed)?;
    let (mut best, mut best_slope) = (0, f64::NEG_INFINITY);
    for i in 0..ps.len() - 1 {
        let slope = (curve[i + 1].theta - curve[i].theta) / (ps[i + 1] - ps[i]);
        if slope > best_slope {
            best_slope = slope;
            best = i;
        }
    }
    Ok(0.5 * (ps[best] + ps[best + 1]))
}
