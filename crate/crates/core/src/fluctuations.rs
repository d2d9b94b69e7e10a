//! Fluctuation fields of the zero-range process, the Dynkin martingale of
//! the corrected field, the Boltzmann-Gibbs statistic and covariance
//! estimators with their Ornstein-Uhlenbeck targets.
//!
//! All pairings are over cluster sites and carry the factor `n^{-d/2}`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::{apply_ln_into, DiscreteField};
use crate::dynamics::{simulate, Jump, Observer, ZrpState};
use crate::error::{invalid, Error, Result};
use crate::measure::{Centering, MeasureTable, RateFunction};
use crate::percolation::ClusterGraph;
use crate::rng::{self, domain};
use crate::stats::{self, MeanSe};
use crate::testfn::TestFunction;

/// `n^{-d/2}`.
pub fn field_scale(graph: &ClusterGraph) -> f64 {
    (graph.side() as f64).powf(-(graph.dim() as f64) / 2.0)
}

fn check_len(occ: &[u32], graph: &ClusterGraph) -> Result<()> {
    if occ.len() != graph.len() {
        return Err(Error::EnvironmentMismatch(format!("{} occupancies for {} cluster sites", occ.len(), graph.len())));
    }
    Ok(())
}

fn pair(occ: &[u32], weights: &[f64], h: impl Fn(u32) -> f64) -> f64 {
    occ.iter().zip(weights).map(|(&k, w)| h(k) * w).sum()
}

/// `Y(G) = n^{-d/2} sum_x G(x/n) (xi(x) - rho)`.
pub fn density_field(occ: &[u32], graph: &ClusterGraph, tf: &TestFunction, rho: f64) -> Result<f64> {
    check_len(occ, graph)?;
    let g = DiscreteField::sample(graph, tf);
    Ok(field_scale(graph) * pair(occ, &g.values, |k| k as f64 - rho))
}

/// `n^{-d/2} sum_x (xi(x) - rho) G_n(x)`.
pub fn corrected_field(occ: &[u32], gn: &DiscreteField, graph: &ClusterGraph, rho: f64) -> Result<f64> {
    gn.check(graph)?;
    check_len(occ, graph)?;
    Ok(field_scale(graph) * pair(occ, &gn.values, |k| k as f64 - rho))
}

/// `Theta(F) = n^{-d/2} sum_x (g(xi(x)) - phi) F(x/n)`.
pub fn theta_field(occ: &[u32], graph: &ClusterGraph, tf: &TestFunction, rate: &RateFunction, phi: f64) -> Result<f64> {
    check_len(occ, graph)?;
    let f = DiscreteField::sample(graph, tf);
    Ok(field_scale(graph) * pair(occ, &f.values, |k| rate.eval(k) - phi))
}

/// Everything the martingale observer needs, fixed for a run.
#[derive(Debug, Clone)]
pub struct DynkinSetup {
    pub graph: Arc<ClusterGraph>,
    pub rate: RateFunction,
    pub rho: f64,
    pub phi: f64,
    /// `G_n` on the cluster.
    pub gn: Vec<f64>,
    /// `lambda (G_n - G) + D Delta G`.
    pub drift: Vec<f64>,
    /// `sum_{y ~ x} (G_n(y) - G_n(x))^2`.
    pub edge_energy: Vec<f64>,
}

impl DynkinSetup {
    pub fn new(
        graph: Arc<ClusterGraph>,
        table: &MeasureTable,
        tf: &TestFunction,
        gn: &DiscreteField,
        lambda: f64,
        diffusion: f64,
    ) -> Result<Self> {
        gn.check(&graph)?;
        let g = DiscreteField::sample(&graph, tf);
        let lap = DiscreteField::sample_laplacian(&graph, tf);
        let drift =
            (0..graph.len()).map(|i| lambda * (gn.values[i] - g.values[i]) + diffusion * lap.values[i]).collect();
        let f = &gn.values;
        let edge_energy = (0..graph.len())
            .map(|i| graph.neighbors(i).iter().map(|&j| (f[j as usize] - f[i]).powi(2)).sum())
            .collect();
        Ok(DynkinSetup {
            rate: table.rate.clone(),
            rho: table.rho,
            phi: table.phi,
            gn: gn.values.clone(),
            drift,
            edge_energy,
            graph,
        })
    }

    /// Uses `L_n G_n` itself as the drift weight, which the resolvent
    /// equation says equals `lambda (G_n - G) + D Delta G`.
    pub fn with_exact_generator(mut self) -> Self {
        apply_ln_into(&self.graph, &self.gn, &mut self.drift);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSample {
    pub t: f64,
    /// `Y^{n,lambda}_t`, recomputed from the configuration.
    pub y: f64,
    pub m: f64,
    pub drift_integral: f64,
    pub qv_integral: f64,
    /// `y - y_0 - drift_integral - m`.
    pub identity_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleDecomposition {
    pub y0: f64,
    pub samples: Vec<MartingaleSample>,
    pub events: u64,
    /// Largest relative drift of the incrementally kept sums against a
    /// recomputation at sample times.
    pub max_sum_drift: f64,
}

/// Accumulates `M_t`, the drift integral and the quadratic-variation
/// integral exactly between events.
pub struct DynkinObserver<'a> {
    setup: &'a DynkinSetup,
    scale: f64,
    qv_scale: f64,
    drift_offset: f64,
    y0: f64,
    jumps: f64,
    theta_sum: f64,
    qv_sum: f64,
    drift_integral: f64,
    qv_integral: f64,
    max_sum_drift: f64,
    samples: Vec<MartingaleSample>,
}

impl<'a> DynkinObserver<'a> {
    pub fn new(setup: &'a DynkinSetup, occ: &[u32]) -> Self {
        let g = &setup.graph;
        let scale = field_scale(g);
        let mut obs = DynkinObserver {
            setup,
            scale,
            qv_scale: scale * scale * (g.side() as f64).powi(2),
            drift_offset: setup.phi * setup.drift.iter().sum::<f64>(),
            y0: scale * pair(occ, &setup.gn, |k| k as f64 - setup.rho),
            jumps: 0.0,
            theta_sum: 0.0,
            qv_sum: 0.0,
            drift_integral: 0.0,
            qv_integral: 0.0,
            max_sum_drift: 0.0,
            samples: Vec::new(),
        };
        obs.resync(occ);
        obs.max_sum_drift = 0.0;
        obs
    }

    fn resync(&mut self, occ: &[u32]) {
        let s = self.setup;
        let theta = pair(occ, &s.drift, |k| s.rate.eval(k));
        let qv = pair(occ, &s.edge_energy, |k| s.rate.eval(k));
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        self.max_sum_drift = self.max_sum_drift.max(rel(self.theta_sum, theta)).max(rel(self.qv_sum, qv));
        self.theta_sum = theta;
        self.qv_sum = qv;
    }

    pub fn finish(self, events: u64) -> MartingaleDecomposition {
        MartingaleDecomposition { y0: self.y0, samples: self.samples, events, max_sum_drift: self.max_sum_drift }
    }
}

impl Observer for DynkinObserver<'_> {
    fn advance(&mut self, _state: &ZrpState, dt: f64) {
        self.drift_integral += self.scale * (self.theta_sum - self.drift_offset) * dt;
        self.qv_integral += self.qv_scale * self.qv_sum * dt;
    }

    fn jump(&mut self, state: &ZrpState, j: &Jump) {
        let s = self.setup;
        let occ = state.occupancy();
        self.jumps += s.gn[j.target] - s.gn[j.source];
        let dg_s = s.rate.eval(occ[j.source]) - s.rate.eval(j.source_before);
        let dg_t = s.rate.eval(occ[j.target]) - s.rate.eval(j.target_before);
        self.theta_sum += dg_s * s.drift[j.source] + dg_t * s.drift[j.target];
        self.qv_sum += dg_s * s.edge_energy[j.source] + dg_t * s.edge_energy[j.target];
    }

    fn sample(&mut self, state: &ZrpState, t: f64) {
        let occ = state.occupancy();
        let y = self.scale * pair(occ, &self.setup.gn, |k| k as f64 - self.setup.rho);
        let m = self.scale * self.jumps - self.drift_integral;
        self.samples.push(MartingaleSample {
            t,
            y,
            m,
            drift_integral: self.drift_integral,
            qv_integral: self.qv_integral,
            identity_residual: y - self.y0 - self.drift_integral - m,
        });
        self.resync(occ);
    }
}

/// Runs one trajectory from `state` and returns its decomposition.
pub fn martingale_path(
    setup: &DynkinSetup,
    state: &mut ZrpState,
    horizon: f64,
    sample_times: &[f64],
    rng: &mut impl rand::Rng,
) -> Result<MartingaleDecomposition> {
    if !Arc::ptr_eq(state.graph_arc(), &setup.graph) && state.graph().fingerprint() != setup.graph.fingerprint() {
        return Err(Error::EnvironmentMismatch("trajectory and corrector live on different clusters".into()));
    }
    let mut obs = DynkinObserver::new(setup, state.occupancy());
    let report = simulate(state, horizon, sample_times, &mut obs, rng)?;
    Ok(obs.finish(report.events))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleMoments {
    pub times: Vec<f64>,
    pub mean_m: Vec<MeanSe>,
    /// Ensemble mean of `M_t^2 - <M>_t`.
    pub m2_minus_qv: Vec<MeanSe>,
    pub mean_qv: Vec<f64>,
    pub max_identity_residual: f64,
    pub replicas: usize,
}

/// Independent stationary trajectories; replica `r` uses dynamics stream `r`.
pub fn martingale_ensemble(
    setup: &DynkinSetup,
    table: &MeasureTable,
    horizon: f64,
    sample_times: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<(MartingaleMoments, Vec<MartingaleDecomposition>)> {
    if replicas < 2 {
        return Err(invalid("replicas", "need at least two replicas"));
    }
    let paths: Vec<MartingaleDecomposition> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, domain::DYNAMICS, r as u64);
            let mut state = ZrpState::stationary(setup.graph.clone(), table, &mut rng);
            martingale_path(setup, &mut state, horizon, sample_times, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut mean_m = Vec::new();
    let mut m2 = Vec::new();
    let mut mean_qv = Vec::new();
    for i in 0..sample_times.len() {
        let m: Vec<f64> = paths.iter().map(|p| p.samples[i].m).collect();
        let d: Vec<f64> = paths.iter().map(|p| p.samples[i].m.powi(2) - p.samples[i].qv_integral).collect();
        mean_m.push(MeanSe::of(&m));
        m2.push(MeanSe::of(&d));
        mean_qv.push(paths.iter().map(|p| p.samples[i].qv_integral).sum::<f64>() / replicas as f64);
    }
    let max_identity_residual =
        paths.iter().flat_map(|p| &p.samples).fold(0.0f64, |a, s| a.max(s.identity_residual.abs()));
    Ok((
        MartingaleMoments {
            times: sample_times.to_vec(),
            mean_m,
            m2_minus_qv: m2,
            mean_qv,
            max_identity_residual,
            replicas,
        },
        paths,
    ))
}

/// Integrates `n^{-d/2} sum_x V(xi_s(x)) F(x/n)` along a trajectory.
pub struct BgObserver {
    weights: Vec<f64>,
    rate: RateFunction,
    centering: Centering,
    scale: f64,
    sum: f64,
    integral: f64,
    /// Largest `|Theta(F) - phi' Y(F)|` seen at sample times, each field
    /// computed separately from the configuration.
    pub max_split_difference: f64,
    pub integrals: Vec<(f64, f64)>,
}

impl BgObserver {
    pub fn new(graph: &ClusterGraph, tf: &TestFunction, table: &MeasureTable, occ: &[u32]) -> Self {
        let weights = DiscreteField::sample(graph, tf).values;
        let centering = table.centering();
        let rate = table.rate.clone();
        let sum = pair(occ, &weights, |k| centering.v(&rate, k));
        BgObserver {
            weights,
            rate,
            centering,
            scale: field_scale(graph),
            sum,
            integral: 0.0,
            max_split_difference: 0.0,
            integrals: Vec::new(),
        }
    }

    /// `int_0^t (Theta_s(F) - phi' Y_s(F)) ds` so far.
    pub fn integral(&self) -> f64 {
        self.scale * self.integral
    }
}

impl Observer for BgObserver {
    #[inline]
    fn advance(&mut self, _state: &ZrpState, dt: f64) {
        self.integral += self.sum * dt;
    }

    #[inline]
    fn jump(&mut self, state: &ZrpState, j: &Jump) {
        let occ = state.occupancy();
        let (c, r) = (&self.centering, &self.rate);
        self.sum += (c.v(r, occ[j.source]) - c.v(r, j.source_before)) * self.weights[j.source]
            + (c.v(r, occ[j.target]) - c.v(r, j.target_before)) * self.weights[j.target];
    }

    fn sample(&mut self, state: &ZrpState, t: f64) {
        let occ = state.occupancy();
        let c = self.centering;
        let theta = self.scale * pair(occ, &self.weights, |k| self.rate.eval(k) - c.phi);
        let y = self.scale * pair(occ, &self.weights, |k| k as f64 - c.rho);
        self.max_split_difference = self.max_split_difference.max((theta - c.phi_prime * y).abs());
        self.sum = pair(occ, &self.weights, |k| c.v(&self.rate, k));
        self.integrals.push((t, self.integral()));
    }
}

/// Monte Carlo estimate with its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub estimate: f64,
    pub se: f64,
    pub replicas: usize,
    pub target: f64,
    pub provenance: String,
}

impl CovarianceEstimate {
    pub fn within(&self, k: f64) -> bool {
        (self.estimate - self.target).abs() <= k * self.se
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgRun {
    pub estimate: CovarianceEstimate,
    /// Per-replica values of the time integral.
    pub integrals: Vec<f64>,
    /// Largest `|Theta - phi' Y|` at sample times over all replicas.
    pub max_split_difference: f64,
    pub events: u64,
}

/// Estimates `E[(int_0^t (Theta_s(F) - phi' Y_s(F)) ds)^2]` from stationary
/// starts; the target is the scaling limit 0.
pub fn bg_statistic(
    graph: &Arc<ClusterGraph>,
    table: &MeasureTable,
    tf: &TestFunction,
    horizon: f64,
    sample_times: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<BgRun> {
    if replicas < 2 {
        return Err(invalid("replicas", "need at least two replicas"));
    }
    let runs: Vec<(f64, f64, u64)> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, domain::DYNAMICS, r as u64);
            let mut state = ZrpState::stationary(graph.clone(), table, &mut rng);
            let mut obs = BgObserver::new(graph, tf, table, state.occupancy());
            let rep = simulate(&mut state, horizon, sample_times, &mut obs, &mut rng)?;
            Ok((obs.integral(), obs.max_split_difference, rep.events))
        })
        .collect::<Result<_>>()?;
    let integrals: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let sq: Vec<f64> = integrals.iter().map(|x| x * x).collect();
    let m = MeanSe::of(&sq);
    Ok(BgRun {
        estimate: CovarianceEstimate {
            estimate: m.mean,
            se: m.se,
            replicas,
            target: 0.0,
            provenance: "scaling limit of the Boltzmann-Gibbs principle".into(),
        },
        integrals,
        max_split_difference: runs.iter().fold(0.0f64, |a, r| a.max(r.1)),
        events: runs.iter().map(|r| r.2).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticCovariance {
    /// Compared with `chi n^{-d} sum_{x in C} G(x/n) H(x/n)`.
    pub finite_n: CovarianceEstimate,
    /// `theta chi int G H`, the large-`n` limit.
    pub limit_target: f64,
}

/// Covariance of `Y_0(G)` and `Y_0(H)` over independent product-measure
/// configurations on one cluster.
pub fn static_covariance(
    graph: &ClusterGraph,
    table: &MeasureTable,
    g: &TestFunction,
    h: &TestFunction,
    samples: usize,
    theta: f64,
    seed: u64,
) -> Result<StaticCovariance> {
    if samples < 2 {
        return Err(invalid("samples", "need at least two samples"));
    }
    let gv = DiscreteField::sample(graph, g).values;
    let hv = DiscreteField::sample(graph, h).values;
    let scale = field_scale(graph);
    let pairs: Vec<(f64, f64)> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng::stream(seed, domain::SAMPLING, s as u64);
            let occ = table.sample_occupancies(graph.len(), &mut rng);
            let c = |w: &[f64]| scale * pair(&occ, w, |k| k as f64 - table.rho);
            (c(&gv), c(&hv))
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let cov = stats::covariance(&xs, &ys);
    let vol = (graph.side() as f64).powi(graph.dim() as i32);
    let finite: f64 = table.chi * gv.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>() / vol;
    Ok(StaticCovariance {
        finite_n: CovarianceEstimate {
            estimate: cov.mean,
            se: cov.se,
            replicas: samples,
            target: finite,
            provenance: "chi(rho) n^-d sum over the cluster of G(x/n) H(x/n)".into(),
        },
        limit_target: theta * table.chi * g.inner_product(h, graph.dim())?,
    })
}

/// Stationary covariance `E[Y_t(G) Y_s(H)] = theta chi int (P_{t-s} G) H` of
/// the limiting Ornstein-Uhlenbeck process, where `P` is generated by
/// `phi' D Delta`.
pub fn ou_covariance_oracle(
    g: &TestFunction,
    h: &TestFunction,
    s: f64,
    t: f64,
    table: &MeasureTable,
    diffusion: f64,
    theta: f64,
    dim: usize,
) -> Result<f64> {
    if !(t >= s && s >= 0.0) {
        return Err(invalid("t", format!("need t >= s >= 0, got s = {s}, t = {t}")));
    }
    Ok(theta * table.chi * g.heat_pairing(h, table.phi_prime() * diffusion * (t - s), dim)?)
}

/// Records `Y_t(G_i)` and `Theta_t(G_i)` for a list of test functions at
/// sample times.
pub struct FieldRecorder {
    weights: Vec<Vec<f64>>,
    rate: RateFunction,
    rho: f64,
    phi: f64,
    scale: f64,
    pub samples: Vec<FieldSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub t: f64,
    pub density: Vec<f64>,
    pub theta: Vec<f64>,
}

impl FieldRecorder {
    pub fn new(graph: &ClusterGraph, tfs: &[TestFunction], table: &MeasureTable) -> Self {
        FieldRecorder {
            weights: tfs.iter().map(|tf| DiscreteField::sample(graph, tf).values).collect(),
            rate: table.rate.clone(),
            rho: table.rho,
            phi: table.phi,
            scale: field_scale(graph),
            samples: Vec::new(),
        }
    }

    pub fn record(&mut self, occ: &[u32], t: f64) {
        let density = self.weights.iter().map(|w| self.scale * pair(occ, w, |k| k as f64 - self.rho)).collect();
        let theta = self.weights.iter().map(|w| self.scale * pair(occ, w, |k| self.rate.eval(k) - self.phi)).collect();
        self.samples.push(FieldSample { t, density, theta });
    }
}

impl Observer for FieldRecorder {
    fn sample(&mut self, state: &ZrpState, t: f64) {
        self.record(state.occupancy(), t);
    }
}

/// Lag covariance `E[Y_t(G) Y_0(H)]` at each sample time from stationary
/// trajectories, with the Ornstein-Uhlenbeck targets.
#[allow(clippy::too_many_arguments)]
pub fn lag_covariance(
    graph: &Arc<ClusterGraph>,
    table: &MeasureTable,
    g: &TestFunction,
    h: &TestFunction,
    sample_times: &[f64],
    replicas: usize,
    diffusion: f64,
    theta: f64,
    seed: u64,
) -> Result<Vec<(f64, CovarianceEstimate)>> {
    if replicas < 2 {
        return Err(invalid("replicas", "need at least two replicas"));
    }
    let horizon = sample_times.last().copied().unwrap_or(0.0);
    let tfs = [g.clone(), h.clone()];
    let runs: Vec<Vec<FieldSample>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, domain::DYNAMICS, r as u64);
            let mut state = ZrpState::stationary(graph.clone(), table, &mut rng);
            let mut rec = FieldRecorder::new(graph, &tfs, table);
            rec.record(state.occupancy(), 0.0);
            simulate(&mut state, horizon, sample_times, &mut rec, &mut rng)?;
            Ok(rec.samples)
        })
        .collect::<Result<_>>()?;
    sample_times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let prod: Vec<f64> = runs.iter().map(|s| s[i + 1].density[0] * s[0].density[1]).collect();
            let m = MeanSe::of(&prod);
            let target = ou_covariance_oracle(g, h, 0.0, t, table, diffusion, theta, graph.dim())?;
            Ok((
                t,
                CovarianceEstimate {
                    estimate: m.mean,
                    se: m.se,
                    replicas,
                    target,
                    provenance: "theta chi int (P_t G) H, heat semigroup of phi' D Delta".into(),
                },
            ))
        })
        .collect()
}
