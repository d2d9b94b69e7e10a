//! Corrected test functions: the solution `G_n` on a cluster of
//! `lambda G_n - L_n G_n = lambda G - D Delta G`, where
//! `L_n F(x) = n^2 sum_{y ~ x} (F(y) - F(x))`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::percolation::ClusterGraph;
use crate::testfn::TestFunction;

/// One value per cluster site, tagged with the cluster it lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteField {
    pub values: Vec<f64>,
    pub side: usize,
    pub fingerprint: u64,
}

impl DiscreteField {
    pub fn new(graph: &ClusterGraph, values: Vec<f64>) -> Result<Self> {
        if values.len() != graph.len() {
            return Err(Error::EnvironmentMismatch(format!(
                "field of length {} on a cluster of {} sites",
                values.len(),
                graph.len()
            )));
        }
        Ok(DiscreteField { values, side: graph.side(), fingerprint: graph.fingerprint() })
    }

    /// `x -> f(x / n)` on every cluster site.
    pub fn from_fn(graph: &ClusterGraph, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let mut u = vec![0.0; graph.dim()];
        let values = (0..graph.len())
            .map(|i| {
                graph.position(i, &mut u);
                f(&u)
            })
            .collect();
        DiscreteField { values, side: graph.side(), fingerprint: graph.fingerprint() }
    }

    pub fn sample(graph: &ClusterGraph, tf: &TestFunction) -> Self {
        Self::from_fn(graph, |u| tf.value(u))
    }

    pub fn sample_laplacian(graph: &ClusterGraph, tf: &TestFunction) -> Self {
        Self::from_fn(graph, |u| tf.laplacian(u))
    }

    pub fn check(&self, graph: &ClusterGraph) -> Result<()> {
        if self.fingerprint != graph.fingerprint() || self.values.len() != graph.len() || self.side != graph.side() {
            return Err(Error::EnvironmentMismatch(format!(
                "field built on cluster {:016x} ({} sites, n = {}), used on {:016x} ({} sites, n = {})",
                self.fingerprint,
                self.values.len(),
                self.side,
                graph.fingerprint(),
                graph.len(),
                graph.side()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &DiscreteField) -> f64 {
        dot(&self.values, &other.values)
    }

    /// CSV with the lattice coordinates of each site and its value.
    pub fn write_csv(&self, graph: &ClusterGraph, mut w: impl Write) -> std::io::Result<()> {
        let torus = graph.torus();
        let mut x = vec![0usize; graph.dim()];
        for c in 0..graph.dim() {
            write!(w, "x{c},")?;
        }
        writeln!(w, "value")?;
        for (i, v) in self.values.iter().enumerate() {
            torus.coords(graph.global_site(i), &mut x);
            for c in &x {
                write!(w, "{c},")?;
            }
            writeln!(w, "{v:e}")?;
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = L_n f` on raw site vectors.
pub fn apply_ln_into(graph: &ClusterGraph, f: &[f64], out: &mut [f64]) {
    let n2 = (graph.side() as f64).powi(2);
    for (i, o) in out.iter_mut().enumerate() {
        let fi = f[i];
        *o = n2 * graph.neighbors(i).iter().map(|&j| f[j as usize] - fi).sum::<f64>();
    }
}

pub fn apply_ln(field: &DiscreteField, graph: &ClusterGraph) -> Result<DiscreteField> {
    field.check(graph)?;
    let mut out = vec![0.0; field.len()];
    apply_ln_into(graph, &field.values, &mut out);
    Ok(DiscreteField { values: out, ..*field })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative residual target.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-10, max_iterations: 20_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// `|b - A x| / |b|`, recomputed from the returned solution.
    pub residual: f64,
}

/// Solves `(lambda - L_n) x = rhs` by conjugate gradients with diagonal
/// preconditioner `lambda + n^2 deg`.
pub fn solve_system(
    graph: &ClusterGraph,
    lambda: f64,
    rhs: &[f64],
    opts: &SolverOptions,
) -> Result<(Vec<f64>, SolveReport)> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", format!("lambda must be positive, got {lambda}")));
    }
    if rhs.len() != graph.len() {
        return Err(Error::EnvironmentMismatch(format!(
            "{} right-hand side entries for {} sites",
            rhs.len(),
            graph.len()
        )));
    }
    let n2 = (graph.side() as f64).powi(2);
    let len = rhs.len();
    let diag: Vec<f64> = (0..len).map(|i| lambda + n2 * graph.degree(i) as f64).collect();
    let apply = |x: &[f64], out: &mut [f64]| {
        apply_ln_into(graph, x, out);
        for i in 0..len {
            out[i] = lambda * x[i] - out[i];
        }
    };
    let bnorm = dot(rhs, rhs).sqrt();
    if bnorm == 0.0 {
        return Ok((vec![0.0; len], SolveReport { iterations: 0, residual: 0.0 }));
    }
    let mut x: Vec<f64> = rhs.iter().zip(&diag).map(|(b, d)| b / d).collect();
    let mut ap = vec![0.0; len];
    apply(&x, &mut ap);
    let mut r: Vec<f64> = rhs.iter().zip(&ap).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut iterations = 0;
    while dot(&r, &r).sqrt() > opts.tol * bnorm {
        if iterations == opts.max_iterations {
            return Err(Error::NoConvergence { iterations, residual: dot(&r, &r).sqrt() / bnorm });
        }
        apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..len {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..len {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
    }
    apply(&x, &mut ap);
    let res = rhs.iter().zip(&ap).map(|(b, a)| (b - a).powi(2)).sum::<f64>().sqrt() / bnorm;
    Ok((x, SolveReport { iterations, residual: res }))
}

/// Right-hand side `lambda G(x/n) - D Delta G(x/n)` on the cluster.
pub fn resolvent_rhs(graph: &ClusterGraph, lambda: f64, tf: &TestFunction, diffusion: f64) -> DiscreteField {
    DiscreteField::from_fn(graph, |u| lambda * tf.value(u) - diffusion * tf.laplacian(u))
}

pub fn solve_resolvent(
    graph: &ClusterGraph,
    lambda: f64,
    tf: &TestFunction,
    diffusion: f64,
    opts: &SolverOptions,
) -> Result<(DiscreteField, SolveReport)> {
    if !(diffusion > 0.0 && diffusion.is_finite()) {
        return Err(invalid("diffusion", format!("D must be positive, got {diffusion}")));
    }
    tf.validate(graph.dim())?;
    let rhs = resolvent_rhs(graph, lambda, tf, diffusion);
    let (x, report) = solve_system(graph, lambda, &rhs.values, opts)?;
    Ok((DiscreteField { values: x, ..rhs }, report))
}

/// `n^-d sum_x |G_n(x) - G(x/n)|^2`.
pub fn corrector_l2_error(gn: &DiscreteField, tf: &TestFunction, graph: &ClusterGraph) -> Result<f64> {
    gn.check(graph)?;
    let g = DiscreteField::sample(graph, tf);
    let vol = (graph.side() as f64).powi(graph.dim() as i32);
    Ok(gn.values.iter().zip(&g.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / vol)
}

/// `n^-d sum_x sum_{y ~ x} n^2 (G_n(y) - G_n(x))^2` over ordered pairs.
pub fn dirichlet_energy(gn: &DiscreteField, graph: &ClusterGraph) -> Result<f64> {
    gn.check(graph)?;
    let n = graph.side() as f64;
    let f = &gn.values;
    let s: f64 =
        (0..f.len()).map(|i| graph.neighbors(i).iter().map(|&j| (f[j as usize] - f[i]).powi(2)).sum::<f64>()).sum();
    Ok(s * n * n / n.powi(graph.dim() as i32))
}

/// `energy / (theta D int |grad G|^2)`; at `p = 1` this defines `kappa`.
pub fn energy_ratio(energy: f64, theta: f64, diffusion: f64, grad_integral: f64) -> f64 {
    energy / (theta * diffusion * grad_integral)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::percolation::{BondLattice, Environment};
    use nalgebra::{DMatrix, DVector};
    use std::f64::consts::PI;

    fn full(d: usize, n: usize) -> ClusterGraph {
        Environment::generate(d, n, 1.0, 0).unwrap().giant().unwrap()
    }

    fn opts() -> SolverOptions {
        SolverOptions { tol: 1e-12, max_iterations: 100_000 }
    }

    #[test]
    fn constants_are_annihilated() {
        let g = Environment::generate(2, 16, 0.7, 1).unwrap().giant().unwrap();
        let c = DiscreteField::new(&g, vec![3.5; g.len()]).unwrap();
        assert!(apply_ln(&c, &g).unwrap().values.iter().all(|&v| v == 0.0));
        assert_eq!(dirichlet_energy(&c, &g).unwrap(), 0.0);
    }

    #[test]
    fn indicator_value() {
        let g = Environment::generate(2, 16, 0.7, 1).unwrap().giant().unwrap();
        let i = (0..g.len()).find(|&i| g.degree(i) == 3).unwrap();
        let mut v = vec![0.0; g.len()];
        v[i] = 1.0;
        let out = apply_ln(&DiscreteField::new(&g, v).unwrap(), &g).unwrap();
        assert_eq!(out.values[i], -256.0 * 3.0);
        for &j in g.neighbors(i) {
            assert_eq!(out.values[j as usize], 256.0);
        }
    }

    #[test]
    fn cosine_eigen_relation() {
        for n in [8, 16, 64] {
            let g = full(2, n);
            let f = DiscreteField::sample(&g, &TestFunction::cosine(&[1, 0]));
            let lf = apply_ln(&f, &g).unwrap();
            let mu = 2.0 * (n * n) as f64 * (1.0 - (2.0 * PI / n as f64).cos());
            for (a, b) in lf.values.iter().zip(&f.values) {
                assert!((a + mu * b).abs() < 1e-9 * mu);
            }
        }
    }

    fn mu(n: usize, modes: &[i32]) -> f64 {
        modes.iter().map(|&m| 2.0 * (n * n) as f64 * (1.0 - (2.0 * PI * m as f64 / n as f64).cos())).sum()
    }

    #[test]
    fn eigen_solution_and_l2_error() {
        let modes = [1, 2];
        let tf = TestFunction::cosine(&modes);
        let (lambda, d) = (1.0, 0.8);
        for n in [16, 32] {
            let g = full(2, n);
            let (gn, rep) = solve_resolvent(&g, lambda, &tf, d, &opts()).unwrap();
            assert!(rep.residual <= 1e-12);
            let c = (lambda + 4.0 * PI * PI * d * 5.0) / (lambda + mu(n, &modes));
            let g0 = DiscreteField::sample(&g, &tf);
            for (a, b) in gn.values.iter().zip(&g0.values) {
                assert!((a - c * b).abs() < 1e-9, "{a} vs {}", c * b);
            }
            let l2 = corrector_l2_error(&gn, &tf, &g).unwrap();
            let sq: f64 = g0.values.iter().map(|v| v * v).sum::<f64>() / (n * n) as f64;
            assert!((l2 - (c - 1.0).powi(2) * sq).abs() < 1e-9 * (c - 1.0).powi(2).max(1e-6));
            // ordered pairs: energy = 2 mu c^2 n^-d sum G^2
            let e = dirichlet_energy(&gn, &g).unwrap();
            let expected = 2.0 * mu(n, &modes) * c * c * sq;
            assert!((e - expected).abs() < 1e-9 * expected);
        }
    }

    #[test]
    fn large_lambda_first_order() {
        let g = Environment::generate(2, 32, 0.8, 4).unwrap().giant().unwrap();
        let tf = TestFunction::gaussian(&[0.5, 0.5], 1.0 / 16.0);
        let lambda = 1e8;
        let (gn, _) = solve_resolvent(&g, lambda, &tf, 1.0, &opts()).unwrap();
        // G_n = G + (L_n G - D Delta G) / lambda + O(lambda^-2)
        let g0 = DiscreteField::sample(&g, &tf);
        let lg = apply_ln(&g0, &g).unwrap();
        let lap = DiscreteField::sample_laplacian(&g, &tf);
        let scale = lg.values.iter().chain(&lap.values).fold(0.0f64, |m, v| m.max(v.abs()));
        // |L_n| <= 2 n^2 max deg bounds the second-order remainder
        let op = 2.0 * 1024.0 * 4.0;
        let mut worst_first = 0.0f64;
        for i in 0..g.len() {
            let first = g0.values[i] + (lg.values[i] - lap.values[i]) / lambda;
            assert!((gn.values[i] - first).abs() <= 4.0 * op * scale / (lambda * lambda) + 1e-14);
            worst_first = worst_first.max((gn.values[i] - g0.values[i]).abs());
        }
        assert!(worst_first <= 2.0 * scale / lambda && worst_first > 1e-3 * scale / lambda);
    }

    #[test]
    fn constant_test_function_is_fixed() {
        let g = Environment::generate(2, 16, 0.75, 2).unwrap().giant().unwrap();
        let (gn, _) = solve_resolvent(&g, 2.0, &TestFunction::Constant { value: 1.5 }, 1.0, &opts()).unwrap();
        assert!(gn.values.iter().all(|v| (v - 1.5).abs() < 1e-10));
    }

    #[test]
    fn maximum_principle() {
        let g = Environment::generate(2, 24, 0.7, 3).unwrap().giant().unwrap();
        let tf = TestFunction::gaussian(&[0.5, 0.5], 1.0 / 16.0);
        for lambda in [0.5, 1.0, 10.0] {
            let rhs = resolvent_rhs(&g, lambda, &tf, 1.0);
            let bound = rhs.values.iter().fold(0.0f64, |m, v| m.max(v.abs())) / lambda;
            let (gn, _) = solve_resolvent(&g, lambda, &tf, 1.0, &opts()).unwrap();
            assert!(gn.values.iter().all(|v| v.abs() <= bound * (1.0 + 1e-9)));
        }
    }

    #[test]
    fn dense_oracle_on_small_clusters() {
        let tf = TestFunction::gaussian(&[0.5, 0.5], 1.0 / 16.0);
        for seed in 0..5 {
            let g = Environment::generate(2, 20, 0.65, seed).unwrap().giant().unwrap();
            assert!(g.len() <= 500);
            let n2 = 400.0;
            let m = g.len();
            let mut a = DMatrix::<f64>::zeros(m, m);
            for i in 0..m {
                a[(i, i)] = 1.0 + n2 * g.degree(i) as f64;
                for &j in g.neighbors(i) {
                    a[(i, j as usize)] -= n2;
                }
            }
            let rhs = resolvent_rhs(&g, 1.0, &tf, 0.7);
            let exact = a.lu().solve(&DVector::from_vec(rhs.values.clone())).unwrap();
            let (gn, _) = solve_resolvent(&g, 1.0, &tf, 0.7, &opts()).unwrap();
            for i in 0..m {
                assert!((gn.values[i] - exact[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn energy_is_twice_the_quadratic_form() {
        let g = Environment::generate(2, 32, 0.7, 8).unwrap().giant().unwrap();
        let tf = TestFunction::gaussian(&[0.5, 0.5], 1.0 / 16.0);
        let (gn, _) = solve_resolvent(&g, 1.0, &tf, 0.6, &opts()).unwrap();
        let lg = apply_ln(&gn, &g).unwrap();
        let q = -2.0 * gn.dot(&lg) / 1024.0;
        let e = dirichlet_energy(&gn, &g).unwrap();
        assert!((e - q).abs() < 1e-10 * e);
    }

    #[test]
    fn mismatched_fields_rejected() {
        let a = Environment::generate(2, 16, 0.7, 1).unwrap().giant().unwrap();
        let b = Environment::generate(2, 16, 0.7, 2).unwrap().giant().unwrap();
        let f = DiscreteField::sample(&a, &TestFunction::cosine(&[1, 0]));
        assert!(matches!(apply_ln(&f, &b), Err(Error::EnvironmentMismatch(_))));
        assert!(matches!(dirichlet_energy(&f, &b), Err(Error::EnvironmentMismatch(_))));
    }

    #[test]
    fn iteration_cap_reported() {
        let g = full(2, 32);
        let tf = TestFunction::gaussian(&[0.5, 0.5], 1.0 / 16.0);
        let o = SolverOptions { tol: 1e-14, max_iterations: 2 };
        assert!(matches!(solve_resolvent(&g, 1.0, &tf, 1.0, &o), Err(Error::NoConvergence { iterations: 2, .. })));
    }

    #[test]
    fn two_site_closed_form() {
        let mut l = BondLattice::closed(1, 3).unwrap();
        l.set_open(0, 0, true);
        let g = Environment::from_lattice(l).giant().unwrap();
        // (lambda - L)x = b with L = 9 [[-1, 1], [1, -1]]
        let (x, _) = solve_system(&g, 1.0, &[1.0, 0.0], &opts()).unwrap();
        let det = 10.0 * 10.0 - 81.0;
        assert!((x[0] - 10.0 / det).abs() < 1e-12 && (x[1] - 9.0 / det).abs() < 1e-12);
    }
}
