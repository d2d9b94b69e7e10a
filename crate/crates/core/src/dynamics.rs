//! Event-driven simulation of the zero-range process on a cluster.
//!
//! A particle leaves site `x` at rate `g(xi(x))` per open incident bond, so
//! the exit rate of `x` is `g(xi(x)) deg(x)`. Site weights live in a
//! [`SumTree`], making each event `O(log N)`. Microscopic time is tracked in
//! the state; observers see macroscopic time `t = s / n^2`.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::Exp1;

use crate::error::{invalid, Error, Result};
use crate::measure::{MeasureTable, RateFunction};
use crate::percolation::ClusterGraph;
use crate::rng;
use crate::sumtree::SumTree;

/// Events between full recomputations of the total rate.
pub const RATE_CHECK_INTERVAL: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jump {
    /// Microscopic time since the previous jump, or since the start of the
    /// current `simulate` call for its first jump.
    pub dt: f64,
    pub source: usize,
    pub target: usize,
    pub source_before: u32,
    pub target_before: u32,
}

#[derive(Debug, Clone)]
pub struct ZrpState {
    graph: Arc<ClusterGraph>,
    rate: RateFunction,
    occupancy: Vec<u32>,
    tree: SumTree,
    time: f64,
    events: u64,
    particles: u64,
}

impl ZrpState {
    pub fn new(graph: Arc<ClusterGraph>, rate: RateFunction, occupancy: Vec<u32>) -> Result<Self> {
        rate.validate()?;
        if occupancy.len() != graph.len() {
            return Err(Error::EnvironmentMismatch(format!(
                "{} occupancies for a cluster of {} sites",
                occupancy.len(),
                graph.len()
            )));
        }
        let weights: Vec<f64> =
            occupancy.iter().enumerate().map(|(i, &k)| rate.eval(k) * graph.degree(i) as f64).collect();
        let particles = occupancy.iter().map(|&k| k as u64).sum();
        Ok(ZrpState { tree: SumTree::new(&weights), graph, rate, occupancy, time: 0.0, events: 0, particles })
    }

    /// Independent draws from the single-site law on every cluster site.
    pub fn stationary(graph: Arc<ClusterGraph>, table: &MeasureTable, rng: &mut impl rand::RngCore) -> Self {
        let occ = table.sample_occupancies(graph.len(), rng);
        ZrpState::new(graph, table.rate.clone(), occ).expect("sampled occupancies match the graph")
    }

    pub fn graph(&self) -> &ClusterGraph {
        &self.graph
    }
    pub fn graph_arc(&self) -> &Arc<ClusterGraph> {
        &self.graph
    }
    pub fn rate(&self) -> &RateFunction {
        &self.rate
    }
    pub fn occupancy(&self) -> &[u32] {
        &self.occupancy
    }
    /// Microscopic time.
    pub fn time(&self) -> f64 {
        self.time
    }
    pub fn events(&self) -> u64 {
        self.events
    }
    pub fn particles(&self) -> u64 {
        self.particles
    }

    /// Exit rate of the configuration, `sum_x g(xi(x)) deg(x)`.
    #[inline]
    pub fn total_rate(&self) -> f64 {
        self.tree.total()
    }

    pub fn recompute_total_rate(&self) -> f64 {
        self.occupancy.iter().enumerate().map(|(i, &k)| self.rate.eval(k) * self.graph.degree(i) as f64).sum()
    }

    pub fn verify_rates(&self) -> Result<()> {
        let (inc, full) = (self.total_rate(), self.recompute_total_rate());
        if (inc - full).abs() > 1e-9 * full.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::RateMismatch { incremental: inc, recomputed: full });
        }
        Ok(())
    }

    fn holding_time(&self, rng: &mut impl Rng) -> Result<f64> {
        let total = self.total_rate();
        if total <= 0.0 {
            return Err(Error::Absorbing);
        }
        let e: f64 = rng.sample(Exp1);
        Ok(e / total)
    }

    /// Moves one particle; time is not advanced.
    fn fire(&mut self, rng: &mut impl Rng) -> Result<Jump> {
        let source = loop {
            let i = self.tree.find(rng::uniform(rng) * self.total_rate());
            // rounding can land on an empty leaf; redraw keeps the law exact
            if i < self.tree.len() && self.tree.get(i) > 0.0 {
                break i;
            }
        };
        let nbrs = self.graph.neighbors(source);
        let target = nbrs[rng.random_range(0..nbrs.len())] as usize;
        let (a, b) = (self.occupancy[source], self.occupancy[target]);
        if source != target {
            let b1 = b.checked_add(1).ok_or(Error::OccupancyOverflow { site: target })?;
            self.occupancy[source] = a - 1;
            self.occupancy[target] = b1;
            self.tree.set(source, self.rate.eval(a - 1) * self.graph.degree(source) as f64);
            self.tree.set(target, self.rate.eval(b1) * self.graph.degree(target) as f64);
        }
        self.events += 1;
        if self.events.is_multiple_of(RATE_CHECK_INTERVAL) {
            self.verify_rates()?;
        }
        Ok(Jump { dt: 0.0, source, target, source_before: a, target_before: b })
    }

    /// One kinetic Monte Carlo step: exponential holding time, source by
    /// exit rate, target uniform among open neighbors.
    pub fn step(&mut self, rng: &mut impl Rng) -> Result<Jump> {
        let dt = self.holding_time(rng)?;
        let mut jump = self.fire(rng)?;
        self.time += dt;
        jump.dt = dt;
        Ok(jump)
    }
}

/// Receives the trajectory as it is generated. All times are macroscopic.
pub trait Observer {
    /// The configuration stayed constant for `dt`.
    fn advance(&mut self, _state: &ZrpState, _dt: f64) {}
    /// Called after `state` was updated by `jump`.
    fn jump(&mut self, _state: &ZrpState, _jump: &Jump) {}
    /// A sample time `t` (relative to the start of the run) was reached.
    fn sample(&mut self, _state: &ZrpState, _t: f64) {}
}

impl Observer for () {}

impl<O: Observer + ?Sized> Observer for &mut O {
    fn advance(&mut self, s: &ZrpState, dt: f64) {
        (**self).advance(s, dt)
    }
    fn jump(&mut self, s: &ZrpState, j: &Jump) {
        (**self).jump(s, j)
    }
    fn sample(&mut self, s: &ZrpState, t: f64) {
        (**self).sample(s, t)
    }
}

impl<A: Observer, B: Observer> Observer for (A, B) {
    fn advance(&mut self, s: &ZrpState, dt: f64) {
        self.0.advance(s, dt);
        self.1.advance(s, dt);
    }
    fn jump(&mut self, s: &ZrpState, j: &Jump) {
        self.0.jump(s, j);
        self.1.jump(s, j);
    }
    fn sample(&mut self, s: &ZrpState, t: f64) {
        self.0.sample(s, t);
        self.1.sample(s, t);
    }
}

impl<O: Observer> Observer for Vec<O> {
    fn advance(&mut self, s: &ZrpState, dt: f64) {
        self.iter_mut().for_each(|o| o.advance(s, dt))
    }
    fn jump(&mut self, s: &ZrpState, j: &Jump) {
        self.iter_mut().for_each(|o| o.jump(s, j))
    }
    fn sample(&mut self, s: &ZrpState, t: f64) {
        self.iter_mut().for_each(|o| o.sample(s, t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub horizon: f64,
    pub events: u64,
    /// Macroscopic time at which the rate vanished, if it did.
    pub absorbed_at: Option<f64>,
    pub samples: usize,
}

/// `sample_count` equally spaced times `t/k, 2t/k, .., t`.
pub fn sample_grid(horizon: f64, sample_count: usize) -> Vec<f64> {
    (1..=sample_count).map(|i| horizon * i as f64 / sample_count as f64).collect()
}

/// Runs the process for macroscopic time `horizon`, i.e. microscopic time
/// `horizon * n^2`. Sample times are relative to the start, sorted, and in
/// `[0, horizon]`. Reaching an absorbing state is reported, not an error.
pub fn simulate<O: Observer>(
    state: &mut ZrpState,
    horizon: f64,
    sample_times: &[f64],
    observer: &mut O,
    rng: &mut impl Rng,
) -> Result<SimulationReport> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon", format!("horizon must be finite and non-negative, got {horizon}")));
    }
    if sample_times.windows(2).any(|w| w[0] > w[1]) || sample_times.iter().any(|&s| !(0.0..=horizon).contains(&s)) {
        return Err(invalid("sample_times", "sample times must be sorted and lie in [0, horizon]"));
    }
    let n2 = (state.graph.side() as f64).powi(2);
    let start_events = state.events;
    let mut t = 0.0;
    let mut next = 0;
    let mut absorbed_at = None;
    loop {
        let dt = match state.holding_time(rng) {
            Ok(dt) => dt / n2,
            Err(Error::Absorbing) => {
                absorbed_at = Some(t);
                f64::INFINITY
            }
            Err(e) => return Err(e),
        };
        let t_next = t + dt;
        while next < sample_times.len() && sample_times[next] < t_next {
            let s = sample_times[next];
            observer.advance(state, s - t);
            state.time += (s - t) * n2;
            t = s;
            observer.sample(state, s);
            next += 1;
        }
        if t_next > horizon {
            observer.advance(state, horizon - t);
            state.time += (horizon - t) * n2;
            break;
        }
        observer.advance(state, t_next - t);
        state.time += (t_next - t) * n2;
        t = t_next;
        let mut jump = state.fire(rng)?;
        jump.dt = dt * n2;
        observer.jump(state, &jump);
    }
    Ok(SimulationReport { horizon, events: state.events - start_events, absorbed_at, samples: next })
}

/// Time integral of the occupancy of every site.
#[derive(Debug, Clone)]
pub struct OccupancyIntegral {
    pub integral: Vec<f64>,
    pub elapsed: f64,
}

impl OccupancyIntegral {
    pub fn new(sites: usize) -> Self {
        OccupancyIntegral { integral: vec![0.0; sites], elapsed: 0.0 }
    }

    pub fn time_average(&self) -> Vec<f64> {
        self.integral.iter().map(|v| v / self.elapsed).collect()
    }
}

impl Observer for OccupancyIntegral {
    fn advance(&mut self, state: &ZrpState, dt: f64) {
        if dt > 0.0 {
            for (acc, &k) in self.integral.iter_mut().zip(state.occupancy()) {
                *acc += k as f64 * dt;
            }
            self.elapsed += dt;
        }
    }
}

/// Streams jumps as 16-byte little-endian records: macroscopic holding time
/// (f64), source (u32), target (u32).
pub struct JumpLog<W: Write> {
    writer: W,
    n2: f64,
    error: Option<std::io::Error>,
}

impl<W: Write> JumpLog<W> {
    pub fn new(writer: W, side: usize) -> Self {
        JumpLog { writer, n2: (side as f64).powi(2), error: None }
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.writer.flush()?;
        Ok(self.writer)
    }
}

impl<W: Write> Observer for JumpLog<W> {
    fn jump(&mut self, _state: &ZrpState, jump: &Jump) {
        if self.error.is_some() {
            return;
        }
        let mut rec = [0u8; 16];
        rec[..8].copy_from_slice(&(jump.dt / self.n2).to_le_bytes());
        rec[8..12].copy_from_slice(&(jump.source as u32).to_le_bytes());
        rec[12..].copy_from_slice(&(jump.target as u32).to_le_bytes());
        if let Err(e) = self.writer.write_all(&rec) {
            self.error = Some(e);
        }
    }
}

/// Applies a recorded jump log to `occupancy`; returns the elapsed
/// macroscopic time of the last jump.
pub fn replay(occupancy: &mut [u32], mut log: impl Read) -> Result<f64> {
    let mut rec = [0u8; 16];
    let mut t = 0.0;
    loop {
        match log.read_exact(&mut rec) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(t),
            Err(e) => return Err(Error::Format(e.to_string())),
        }
        t += f64::from_le_bytes(rec[..8].try_into().unwrap());
        let s = u32::from_le_bytes(rec[8..12].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(rec[12..].try_into().unwrap()) as usize;
        if s >= occupancy.len() || d >= occupancy.len() || occupancy[s] == 0 {
            return Err(Error::Format(format!("invalid jump {s} -> {d}")));
        }
        occupancy[s] -= 1;
        occupancy[d] += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::Truncation;
    use crate::percolation::{BondLattice, Environment};

    fn two_site() -> Arc<ClusterGraph> {
        // a 3-site ring with one open bond: the giant cluster is the pair
        let mut l = BondLattice::closed(1, 3).unwrap();
        l.set_open(0, 0, true);
        Arc::new(Environment::from_lattice(l).giant().unwrap())
    }

    #[test]
    fn two_site_rate_and_forced_jump() {
        let g = two_site();
        assert_eq!(g.len(), 2);
        let mut s = ZrpState::new(g, RateFunction::Linear, vec![2, 0]).unwrap();
        assert_eq!(s.total_rate(), 2.0);
        let j = s.step(&mut rng::stream(0, 0, 0)).unwrap();
        assert_eq!((j.source, j.target), (0, 1));
        assert_eq!(s.occupancy(), &[1, 1]);
        assert!(j.dt > 0.0);
        assert_eq!(s.particles(), 2);
    }

    #[test]
    fn empty_configuration_is_absorbing() {
        let mut s = ZrpState::new(two_site(), RateFunction::Indicator, vec![0, 0]).unwrap();
        assert_eq!(s.total_rate(), 0.0);
        assert_eq!(s.step(&mut rng::stream(0, 0, 0)).unwrap_err(), Error::Absorbing);
        let rep = simulate(&mut s, 1.0, &[0.5], &mut (), &mut rng::stream(0, 0, 0)).unwrap();
        assert_eq!(rep.events, 0);
        assert_eq!(rep.absorbed_at, Some(0.0));
        assert_eq!(rep.samples, 1);
    }

    #[test]
    fn full_torus_rate() {
        let g = Arc::new(Environment::generate(2, 6, 1.0, 0).unwrap().giant().unwrap());
        let s = ZrpState::new(g, RateFunction::Linear, vec![1; 36]).unwrap();
        assert_eq!(s.total_rate(), 4.0 * 36.0);
    }

    #[test]
    fn mismatched_occupancy_rejected() {
        assert!(matches!(
            ZrpState::new(two_site(), RateFunction::Linear, vec![1, 2, 3]),
            Err(Error::EnvironmentMismatch(_))
        ));
    }

    #[test]
    fn zero_horizon_does_nothing() {
        let g = Arc::new(Environment::generate(2, 6, 1.0, 0).unwrap().giant().unwrap());
        let mut s = ZrpState::new(g, RateFunction::Linear, vec![1; 36]).unwrap();
        let rep = simulate(&mut s, 0.0, &[], &mut (), &mut rng::stream(1, 0, 0)).unwrap();
        assert_eq!(rep.events, 0);
        assert_eq!(s.occupancy(), &[1; 36][..]);
    }

    #[test]
    fn conservation_and_rate_consistency() {
        let env = Environment::generate(2, 12, 0.7, 5).unwrap();
        let g = Arc::new(env.giant().unwrap());
        let table = MeasureTable::from_density(&RateFunction::Indicator, 1.0, Truncation::default()).unwrap();
        let mut r = rng::stream(5, 0, 0);
        let mut s = ZrpState::stationary(g, &table, &mut r);
        let n0 = s.particles();
        for _ in 0..20_000 {
            s.step(&mut r).unwrap();
            assert_eq!(s.occupancy().iter().map(|&k| k as u64).sum::<u64>(), n0);
        }
        assert!(s.verify_rates().is_ok());
        assert_eq!(s.total_rate(), s.recompute_total_rate());
    }

    #[test]
    fn jump_log_replays() {
        let env = Environment::generate(2, 8, 0.8, 2).unwrap();
        let g = Arc::new(env.giant().unwrap());
        let table = MeasureTable::from_density(&RateFunction::Linear, 1.5, Truncation::default()).unwrap();
        let mut r = rng::stream(9, 0, 0);
        let mut s = ZrpState::stationary(g, &table, &mut r);
        let mut start = s.occupancy().to_vec();
        let mut log = JumpLog::new(Vec::new(), 8);
        let rep = simulate(&mut s, 0.05, &[], &mut log, &mut r).unwrap();
        let bytes = log.finish().unwrap();
        assert_eq!(bytes.len() as u64, 16 * rep.events);
        let t = replay(&mut start, &bytes[..]).unwrap();
        assert_eq!(start, s.occupancy());
        assert!(t <= 0.05);
    }

    #[test]
    fn horizon_sets_microscopic_time() {
        let g = Arc::new(Environment::generate(2, 8, 1.0, 0).unwrap().giant().unwrap());
        let mut s = ZrpState::new(g, RateFunction::Linear, vec![1; 64]).unwrap();
        let rep = simulate(&mut s, 0.25, &sample_grid(0.25, 4), &mut (), &mut rng::stream(2, 0, 0)).unwrap();
        assert!((s.time() - 0.25 * 64.0).abs() < 1e-9);
        assert_eq!(rep.samples, 4);
        assert!(rep.events > 0);
    }
}
