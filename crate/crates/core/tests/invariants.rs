//! Property tests for the structural invariants of each module.

use std::sync::Arc;

use perc_core::connectivity::{bad_fraction, chemical_distance, distances_from};
use perc_core::corrector::{apply_ln_into, solve_system, SolverOptions};
use perc_core::dynamics::ZrpState;
use perc_core::measure::{MeasureTable, RateFunction, Truncation};
use perc_core::percolation::{bfs_labels, find_clusters, BondLattice, Environment};
use perc_core::rng::{stream, SimRng};
use perc_core::walk::{estimate_diffusion, WalkOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn rate_strategy() -> impl Strategy<Value = RateFunction> {
    prop_oneof![Just(RateFunction::Linear), Just(RateFunction::Indicator)]
}

fn same_partition(a: &[u32], b: &[u32]) -> bool {
    let mut fwd = std::collections::HashMap::new();
    let mut back = std::collections::HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lattice_is_deterministic(dim in 1usize..=3, side in 2usize..=8, p in 0.0f64..=1.0, seed: u64) {
        let a = BondLattice::generate(dim, side, p, seed).unwrap();
        let b = BondLattice::generate(dim, side, p, seed).unwrap();
        prop_assert_eq!(a.torus().bond_count(), dim * side.pow(dim as u32));
        prop_assert!(a.open_bonds_subset_of(&b) && b.open_bonds_subset_of(&a));
        prop_assert_eq!(find_clusters(&a).labels().to_vec(), find_clusters(&b).labels().to_vec());
    }

    #[test]
    fn union_find_matches_bfs(dim in 1usize..=3, side in 2usize..=8, p in 0.0f64..=1.0, seed: u64) {
        let lattice = BondLattice::generate(dim, side, p, seed).unwrap();
        let uf = find_clusters(&lattice);
        let bfs = bfs_labels(&lattice);
        prop_assert!(same_partition(uf.labels(), bfs.labels()));
        prop_assert_eq!(uf.largest_size(), *uf.sizes().iter().max().unwrap());
        prop_assert_eq!(uf.sizes().iter().sum::<usize>(), lattice.torus().site_count());
    }

    #[test]
    fn coupling_is_monotone(dim in 1usize..=3, side in 2usize..=8, p in 0.0f64..=1.0, q in 0.0f64..=1.0, seed: u64) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let a = Environment::generate(dim, side, lo, seed).unwrap();
        let b = Environment::generate(dim, side, hi, seed).unwrap();
        prop_assert!(a.lattice.open_bonds_subset_of(&b.lattice));
        prop_assert!(a.clusters.largest_size() <= b.clusters.largest_size());
    }

    #[test]
    fn chemical_distance_dominates_l1(side in 3usize..=10, p in 0.5f64..=1.0, seed: u64, x in 0usize..1000, y in 0usize..1000) {
        let lattice = BondLattice::generate(2, side, p, seed).unwrap();
        let torus = lattice.torus();
        let (x, y) = (x % torus.site_count(), y % torus.site_count());
        let clusters = find_clusters(&lattice);
        match chemical_distance(&lattice, x, y) {
            Some(d) => {
                prop_assert!(clusters.connected(x, y));
                prop_assert!(d >= torus.l1_distance(x, y));
                let from_y = distances_from(&lattice, y, u32::MAX);
                prop_assert_eq!(from_y[x] as usize, d);
            }
            None => prop_assert!(!clusters.connected(x, y)),
        }
    }

    #[test]
    fn enlarging_boxes_never_adds_bad_ones(p in 0.4f64..=1.0, seed: u64) {
        let env = Environment::generate(2, 32, p, seed).unwrap();
        let b1 = bad_fraction(&env, 8, 0).unwrap();
        let b2 = bad_fraction(&env, 8, 1).unwrap();
        prop_assert!((0.0..=1.0).contains(&b1));
        prop_assert!(b2 <= b1 + 1e-12);
    }

    #[test]
    fn measure_identities(rate in rate_strategy(), rho in 0.01f64..4.0) {
        let table = MeasureTable::from_density(&rate, rho, Truncation::default()).unwrap();
        let probs = table.probs();
        let mass: f64 = probs.iter().sum();
        let mean: f64 = probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        let var: f64 = probs.iter().enumerate().map(|(k, p)| (k as f64 - mean).powi(2) * p).sum();
        prop_assert!((mass - 1.0).abs() < 1e-9);
        prop_assert!((mean - rho).abs() < 1e-8 * rho.max(1.0));
        prop_assert!((var - table.chi).abs() < 1e-8 * table.chi.max(1.0));
        prop_assert!((table.chi * table.phi_prime() - table.phi).abs() <= 1e-6 * table.phi);
        let round = MeasureTable::from_fugacity(&rate, table.phi, Truncation::default()).unwrap();
        prop_assert!((round.rho - rho).abs() < 1e-8 * rho.max(1.0));
        let c = table.centering();
        let psi: f64 = probs.iter().enumerate().map(|(k, p)| p * c.v(&rate, k as u32)).sum();
        prop_assert!(psi.abs() < 1e-8);
    }

    #[test]
    fn generator_is_symmetric_and_dissipative(side in 3usize..=8, p in 0.5f64..=1.0, seed: u64, vals in proptest::collection::vec(-1.0f64..1.0, 64)) {
        let Ok(graph) = Environment::generate(2, side, p, seed).and_then(|e| e.giant()) else {
            return Ok(());
        };
        let n = graph.len();
        let f: Vec<f64> = (0..n).map(|i| vals[i % 64]).collect();
        let g: Vec<f64> = (0..n).map(|i| vals[(i * 7 + 3) % 64]).collect();
        let (mut lf, mut lg) = (vec![0.0; n], vec![0.0; n]);
        apply_ln_into(&graph, &f, &mut lf);
        apply_ln_into(&graph, &g, &mut lg);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let scale = (side * side) as f64 * (dot(&f, &f) + dot(&g, &g)).max(1e-12);
        prop_assert!((dot(&g, &lf) - dot(&f, &lg)).abs() <= 1e-10 * scale);
        prop_assert!(dot(&f, &lf) <= 1e-10 * scale);
        prop_assert!(lf.iter().sum::<f64>().abs() <= 1e-9 * scale);
    }

    #[test]
    fn resolvent_solution_satisfies_system(side in 3usize..=8, p in 0.6f64..=1.0, lambda in 0.1f64..10.0, seed: u64) {
        let Ok(graph) = Environment::generate(2, side, p, seed).and_then(|e| e.giant()) else {
            return Ok(());
        };
        let n = graph.len();
        let mut rng = stream(seed, 99, 0);
        let rhs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let (u, _) = solve_system(&graph, lambda, &rhs, &SolverOptions::default()).unwrap();
        let mut lu = vec![0.0; n];
        apply_ln_into(&graph, &u, &mut lu);
        let resid: f64 = (0..n).map(|i| (lambda * u[i] - lu[i] - rhs[i]).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = rhs.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(resid <= 1e-8 * norm.max(1e-12));
    }

    #[test]
    fn kmc_conserves_particles_and_rates(rate in rate_strategy(), rho in 0.1f64..3.0, p in 0.6f64..=1.0, seed: u64) {
        let Ok(graph) = Environment::generate(2, 8, p, seed).and_then(|e| e.giant()) else {
            return Ok(());
        };
        let table = MeasureTable::from_density(&rate, rho, Truncation::default()).unwrap();
        let mut rng = SimRng::seed_from_u64(seed);
        let mut state = ZrpState::stationary(Arc::new(graph), &table, &mut rng);
        let particles = state.particles();
        for _ in 0..2000 {
            if state.total_rate() == 0.0 {
                break;
            }
            let jump = state.step(&mut rng).unwrap();
            prop_assert!(jump.dt >= 0.0);
            prop_assert_eq!(state.particles(), particles);
        }
        let fresh = state.recompute_total_rate();
        prop_assert!((state.total_rate() - fresh).abs() <= 1e-9 * fresh.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn walk_starts_at_origin_and_is_seeded(p in 0.6f64..=1.0, seed: u64) {
        let Ok(graph) = Environment::generate(2, 16, p, seed).and_then(|e| e.giant()) else {
            return Ok(());
        };
        let opts = WalkOptions { walkers: 50, horizon: 20.0, grid: 5, seed };
        let a = estimate_diffusion(&graph, &opts).unwrap();
        let b = estimate_diffusion(&graph, &opts).unwrap();
        prop_assert_eq!(a.d_hat.to_bits(), b.d_hat.to_bits());
        prop_assert!(a.d_hat >= 0.0);
        prop_assert_eq!(a.times[0], 0.0);
        prop_assert!(a.msd[0].iter().all(|m| *m == 0.0));
        prop_assert!(a.msd.iter().all(|row| row.iter().all(|m| *m >= 0.0)));
    }
}
