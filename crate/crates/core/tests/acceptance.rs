//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use perc_core::connectivity::{classify_boxes, tail_estimate, TailOptions};
use perc_core::corrector::{
    corrector_l2_error, dirichlet_energy, resolvent_rhs, solve_resolvent, DiscreteField, SolverOptions,
};
use perc_core::dynamics::sample_grid;
use perc_core::fluctuations::{bg_statistic, martingale_ensemble, static_covariance, DynkinSetup};
use perc_core::measure::{compressibility, fugacity_of_density, phi_prime_fd, MeasureTable, RateFunction, Truncation};
use perc_core::percolation::{bfs_labels, find_clusters, replica_seed, BondLattice, ClusterGraph, Environment};
use perc_core::testfn::TestFunction;
use perc_core::walk::{diffusion_by_environment, estimate_diffusion, WalkEstimate, WalkOptions};
use perc_core::{connectivity, Result};

type Verdict = Result<(bool, String)>;

fn gaussian() -> TestFunction {
    TestFunction::gaussian(&[0.5, 0.5], 1.0 / 16.0)
}

fn giant(d: usize, n: usize, p: f64, seed: u64) -> Result<(Environment, Arc<ClusterGraph>)> {
    let env = Environment::generate(d, n, p, seed)?;
    let g = Arc::new(env.giant()?);
    Ok((env, g))
}

fn indicator(rho: f64) -> Result<MeasureTable> {
    MeasureTable::from_density(&RateFunction::Indicator, rho, Truncation::default())
}

/// Quenched walk estimates at d = 2, p = 0.7 on five environments of side
/// 256, large against the distance a walker covers by the horizon.
fn walks_p07() -> &'static Vec<WalkEstimate> {
    static CELL: OnceLock<Vec<WalkEstimate>> = OnceLock::new();
    CELL.get_or_init(|| {
        let opts = WalkOptions { walkers: 4000, horizon: 1000.0, grid: 20, seed: 71 };
        diffusion_by_environment(2, 256, 0.7, 5, 70, &opts).expect("walk estimates")
    })
}

/// Pooled `D` at `p = 0.7` and its standard error.
fn d_p07() -> (f64, f64) {
    let w = walks_p07();
    let k = w.len() as f64;
    (w.iter().map(|e| e.d_hat).sum::<f64>() / k, w.iter().map(|e| e.se * e.se).sum::<f64>().sqrt() / k)
}

static C4_RESIDUAL: OnceLock<f64> = OnceLock::new();

fn c1() -> Verdict {
    let mut worst = 0.0f64;
    for rate in [RateFunction::Linear, RateFunction::Indicator] {
        for rho in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let phi = fugacity_of_density(&rate, rho)?;
            let chi = compressibility(&rate, rho)?;
            let dphi = phi_prime_fd(&rate, rho)?;
            worst = worst.max((chi * dphi - phi).abs() / phi);
        }
    }
    Ok((worst < 1e-6, format!("max |chi phi' - phi| / phi = {worst:.2e} (tol 1e-6)")))
}

fn c2() -> Verdict {
    let (_, g) = giant(2, 64, 0.7, 21)?;
    let tab = MeasureTable::from_density(&RateFunction::Linear, 1.0, Truncation::default())?;
    let mut worst_bg = 0.0f64;
    let mut worst_split = 0.0f64;
    let mut events = 0;
    for tf in [gaussian(), TestFunction::bump(&[0.5, 0.5], 0.3)] {
        let run = bg_statistic(&g, &tab, &tf, 0.05, &sample_grid(0.05, 16), 8, 22)?;
        worst_bg = run.integrals.iter().fold(worst_bg, |m, x| m.max(x.abs()));
        worst_split = worst_split.max(run.max_split_difference);
        events += run.events;
    }
    Ok((
        worst_bg <= 1e-10 && worst_split <= 1e-10,
        format!("max |BG integral| = {worst_bg:.1e}, max |Theta - phi' Y| = {worst_split:.1e} over 16 trajectories ({events} events)"),
    ))
}

fn c3() -> Verdict {
    let tab = indicator(1.0)?;
    let h = TestFunction::bump(&[0.5, 0.5], 0.3);
    let mut ok = true;
    let mut parts = Vec::new();
    for p in [1.0, 0.7] {
        let (env, g) = giant(2, 64, p, 31)?;
        let c = static_covariance(&g, &tab, &gaussian(), &h, 10_000, env.giant_fraction(), 32)?;
        let f = &c.finite_n;
        let z = (f.estimate - f.target) / f.se;
        ok &= z.abs() <= 3.0;
        parts.push(format!(
            "p={p}: {:.5} +- {:.5} vs {:.5} ({z:+.2} SE; limit {:.5})",
            f.estimate, f.se, f.target, c.limit_target
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn c4() -> Verdict {
    let (d, _) = d_p07();
    let (_, g) = giant(2, 32, 0.7, 41)?;
    let tab = indicator(1.0)?;
    let tf = gaussian();
    let (gn, _) = solve_resolvent(&g, 1.0, &tf, d, &SolverOptions::default())?;
    let setup = DynkinSetup::new(g, &tab, &tf, &gn, 1.0, d)?;
    let times = sample_grid(0.25, 8);
    let (mom, _) = martingale_ensemble(&setup, &tab, 0.25, &times, 1000, 42)?;
    let _ = C4_RESIDUAL.set(mom.max_identity_residual);
    let zm: Vec<f64> = mom.mean_m.iter().map(|m| m.mean / m.se).collect();
    let zq: Vec<f64> = mom.m2_minus_qv.iter().map(|m| m.mean / m.se).collect();
    let worst = |z: &[f64]| z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok((
        worst(&zm) <= 3.0 && worst(&zq) <= 3.0,
        format!(
            "max |mean M_t| = {:.2} SE, max |mean(M_t^2 - <M>_t)| = {:.2} SE over 8 times, 1000 replicas",
            worst(&zm),
            worst(&zq)
        ),
    ))
}

fn c5() -> Verdict {
    let (d, _) = d_p07();
    let tf = gaussian();
    let opts = SolverOptions::default();
    let mut worst_res = 0.0f64;
    let mut l2 = Vec::new();
    for n in [32, 128] {
        let mut acc = 0.0;
        for e in 0..10 {
            let (_, g) = giant(2, n, 0.7, replica_seed(51, e))?;
            let (gn, rep) = solve_resolvent(&g, 1.0, &tf, d, &opts)?;
            worst_res = worst_res.max(rep.residual);
            acc += corrector_l2_error(&gn, &tf, &g)? / 10.0;
        }
        l2.push(acc);
    }
    let mut worst_oracle = 0.0f64;
    for seed in 0..5 {
        let (_, g) = giant(2, 20, 0.7, replica_seed(52, seed))?;
        assert!(g.len() <= 500);
        let m = g.len();
        let n2 = 400.0;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            a[(i, i)] = 1.0 + n2 * g.degree(i) as f64;
            for &j in g.neighbors(i) {
                a[(i, j as usize)] -= n2;
            }
        }
        let rhs = resolvent_rhs(&g, 1.0, &tf, d);
        let exact = a.lu().solve(&DVector::from_vec(rhs.values.clone())).expect("nonsingular");
        let (gn, _) = solve_resolvent(&g, 1.0, &tf, d, &opts)?;
        worst_oracle = (0..m).fold(worst_oracle, |w, i| w.max((gn.values[i] - exact[i]).abs()));
    }
    let ratio = l2[0] / l2[1];
    Ok((
        ratio >= 2.0 && worst_res <= 1e-8 && worst_oracle <= 1e-8,
        format!(
            "l2 error {:.3e} (n=32) -> {:.3e} (n=128), factor {ratio:.2}; max residual {worst_res:.1e}; dense oracle {worst_oracle:.1e}",
            l2[0], l2[1]
        ),
    ))
}

fn c6() -> Verdict {
    use std::f64::consts::PI;
    let opts = SolverOptions { tol: 1e-12, max_iterations: 100_000 };
    let mut worst = 0.0f64;
    for n in [16usize, 64] {
        let (_, g) = giant(2, n, 1.0, 0)?;
        for modes in [[1, 0], [1, 2], [3, 1]] {
            let tf = TestFunction::cosine(&modes);
            let (gn, _) = solve_resolvent(&g, 1.0, &tf, 1.0, &opts)?;
            let m2: f64 = modes.iter().map(|&m| (m * m) as f64).sum();
            let mu: f64 =
                modes.iter().map(|&m| 2.0 * (n * n) as f64 * (1.0 - (2.0 * PI * m as f64 / n as f64).cos())).sum();
            let c = (1.0 + 4.0 * PI * PI * m2) / (1.0 + mu);
            let g0 = DiscreteField::sample(&g, &tf);
            worst = gn.values.iter().zip(&g0.values).fold(worst, |w, (a, b)| w.max((a - c * b).abs()));
        }
    }
    Ok((worst <= 1e-8, format!("max |G_n - closed form| = {worst:.1e} at n in {{16, 64}}")))
}

fn c7() -> Verdict {
    let tf = gaussian();
    let grad = tf.dirichlet_integral(2)?;
    let opts = SolverOptions::default();
    let mut kappas = Vec::new();
    for n in [64, 128] {
        let (_, g) = giant(2, n, 1.0, 0)?;
        let (gn, _) = solve_resolvent(&g, 1.0, &tf, 1.0, &opts)?;
        kappas.push(dirichlet_energy(&gn, &g)? / grad);
    }
    let spread = (kappas[0] - kappas[1]).abs() / (0.5 * (kappas[0] + kappas[1]));
    let kappa = kappas[1];
    let (d, _) = d_p07();
    let mut ratio = 0.0;
    for e in 0..5 {
        let (env, g) = giant(2, 128, 0.7, replica_seed(71, e))?;
        let (gn, _) = solve_resolvent(&g, 1.0, &tf, d, &opts)?;
        ratio += dirichlet_energy(&gn, &g)? / (kappa * env.giant_fraction() * d * grad) / 5.0;
    }
    Ok((
        spread < 0.02 && (ratio - 1.0).abs() < 0.1,
        format!(
            "kappa = {:.4} (n=64), {:.4} (n=128), spread {:.2}%; p=0.7 energy / (kappa theta D int|grad G|^2) = {ratio:.4}",
            kappas[0],
            kappas[1],
            100.0 * spread
        ),
    ))
}

fn c8() -> Verdict {
    let tab = indicator(1.0)?;
    let tf = gaussian();
    let mut est = Vec::new();
    for n in [16, 64] {
        let (_, g) = giant(2, n, 0.7, 81)?;
        est.push(bg_statistic(&g, &tab, &tf, 1.0, &[], 200, 82)?.estimate);
    }
    let (a, b) = (&est[0], &est[1]);
    Ok((
        b.estimate + 2.0 * b.se < a.estimate - 2.0 * a.se,
        format!(
            "E[(int (Theta - phi' Y))^2]: n=16 {:.3e} +- {:.1e}, n=64 {:.3e} +- {:.1e} (200 replicas each)",
            a.estimate, a.se, b.estimate, b.se
        ),
    ))
}

fn c9() -> Verdict {
    let (_, g) = giant(2, 64, 1.0, 0)?;
    let e1 = estimate_diffusion(&g, &WalkOptions { walkers: 20_000, horizon: 100.0, grid: 20, seed: 91 })?;
    let (d07, se07) = d_p07();
    let walks = walks_p07();
    let gap = (e1.d_hat - d07) / (e1.se.powi(2) + se07.powi(2)).sqrt();
    let worst_env = walks.iter().map(|w| (w.d_hat - d07).abs() / w.se).fold(0.0f64, f64::max);
    Ok((
        (e1.d_hat - 1.0).abs() <= 0.02 && gap > 3.0 && worst_env <= 3.0,
        format!(
            "D(p=1) = {:.4} +- {:.4}; D(p=0.7) = {d07:.4} +- {se07:.4} ({gap:.0} SE below); per-environment spread <= {worst_env:.2} SE",
            e1.d_hat, e1.se
        ),
    ))
}

fn c10() -> Verdict {
    let envs: Vec<Environment> =
        (0..3).map(|e| Environment::generate(2, 256, 0.7, replica_seed(101, e))).collect::<Result<_>>()?;
    let mut fr = Vec::new();
    for l in 1..=3 {
        let mut s = 0.0;
        for env in &envs {
            s += classify_boxes(env, 8, l)?.bad_fraction() / envs.len() as f64;
        }
        fr.push(s);
    }
    let full = Environment::generate(2, 256, 1.0, 0)?;
    let full_bad: f64 = (1..=3).map(|l| connectivity::bad_fraction(&full, 8, l)).sum::<Result<f64>>()?;
    Ok((
        fr[1] <= fr[0] && fr[2] <= fr[1] && fr[2] < 0.05 && full_bad == 0.0,
        format!("bad fraction at l=1,2,3: {:.4}, {:.4}, {:.4}; p=1: {full_bad}", fr[0], fr[1], fr[2]),
    ))
}

fn c11() -> Verdict {
    let opts = TailOptions { sources: 2000, environments: 4, seed: 111, ..TailOptions::default() };
    let s = tail_estimate(2, 128, 0.7, 110, &opts)?;
    match s.selected_fit() {
        Some(f) => Ok((
            f.fit.slope < 0.0 && f.fit.r_squared >= 0.9,
            format!(
                "gamma = {}, slope {:.4} (delta = {:.4}), R^2 = {:.3}, pairs per separation {:?}",
                f.gamma, f.fit.slope, -f.fit.slope, f.fit.r_squared, s.counts
            ),
        )),
        None => Ok((false, "no gamma on the grid gives a decreasing log-linear tail".into())),
    }
}

fn c12() -> Verdict {
    let mut lattices = 0;
    let mut mismatches = 0;
    for d in 1..=3 {
        for n in 2..=8 {
            for p in [0.3, 0.5, 0.7] {
                for seed in 0..100 {
                    let l = BondLattice::generate(d, n, p, seed)?;
                    lattices += 1;
                    if find_clusters(&l) != bfs_labels(&l) {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    let mut fw_bad = 0;
    for (p, seed) in [0.5, 0.6, 0.7].iter().flat_map(|&p| (0..10).map(move |s| (p, s))) {
        let l = BondLattice::generate(2, 10, p, seed)?;
        let dist = floyd_warshall(&l);
        for x in 0..100 {
            for y in 0..100 {
                let want = (dist[x][y] < u32::MAX / 2).then_some(dist[x][y] as usize);
                if connectivity::chemical_distance(&l, x, y) != want {
                    fw_bad += 1;
                }
            }
        }
    }
    let mut worst = C4_RESIDUAL.get().copied().unwrap_or(0.0);
    let mut traj = if C4_RESIDUAL.get().is_some() { 1000 } else { 0 };
    for (rate, n) in [(RateFunction::Indicator, 16), (RateFunction::Linear, 16), (RateFunction::Indicator, 24)] {
        let tab = MeasureTable::from_density(&rate, 1.0, Truncation::default())?;
        let (_, g) = giant(2, n, 0.7, 121)?;
        let tf = gaussian();
        let (gn, _) = solve_resolvent(&g, 1.0, &tf, 0.5, &SolverOptions::default())?;
        let setup = DynkinSetup::new(g, &tab, &tf, &gn, 1.0, 0.5)?;
        let (mom, _) = martingale_ensemble(&setup, &tab, 0.2, &sample_grid(0.2, 16), 20, 122)?;
        worst = worst.max(mom.max_identity_residual);
        traj += 20;
    }
    Ok((
        mismatches == 0 && fw_bad == 0 && worst <= 1e-10,
        format!(
            "union-find vs BFS: {mismatches} mismatches in {lattices} lattices; BFS vs Floyd-Warshall: {fw_bad} mismatches on 30 instances; Dynkin identity residual <= {worst:.1e} on {traj} trajectories"
        ),
    ))
}

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
                d[i][j] = d[i][j].min(d[i][k] + d[k][j]);
            }
        }
    }
    d
}

fn main() {
    let criteria: [(u32, &str, f64, fn() -> Verdict); 12] = [
        (1, "measure identities", 1.0, c1),
        (2, "linear-g exactness", 60.0, c2),
        (3, "static covariance", 300.0, c3),
        (4, "martingale suite", 1800.0, c4),
        (5, "corrector convergence", 600.0, c5),
        (6, "eigen exactness", 60.0, c6),
        (7, "Dirichlet-form consistency", 600.0, c7),
        (8, "Boltzmann-Gibbs decay", 7200.0, c8),
        (9, "diffusion constant", 600.0, c9),
        (10, "connectivity census", 300.0, c10),
        (11, "chemical-distance tail", 600.0, c11),
        (12, "oracle equivalences", 300.0, c12),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run));
        let secs = t0.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(Ok((pass, detail))) => (pass && secs < limit, detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {} {name}: {detail} [{secs:.1} s, limit {limit:.0} s]",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
