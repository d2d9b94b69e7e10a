//! One runner per experiment kind. Each writes its result files into the run
//! directory and returns the checks that go into the manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use perc_core::connectivity::{classify_boxes, default_gammas, tail_estimate, TailOptions};
use perc_core::corrector::{corrector_l2_error, dirichlet_energy, energy_ratio, solve_resolvent, SolverOptions};
use perc_core::dynamics::{sample_grid, simulate, ZrpState};
use perc_core::fluctuations::{
    bg_statistic, lag_covariance, martingale_ensemble, static_covariance, DynkinSetup, FieldRecorder,
};
use perc_core::measure::{MeasureTable, RateFunction, Truncation};
use perc_core::percolation::{replica_seed, ClusterGraph, Environment, SUBCRITICAL_THETA};
use perc_core::rng::{domain, stream};
use perc_core::stats::MeanSe;
use perc_core::testfn::TestFunction;
use perc_core::walk::{estimate_diffusion, WalkEstimate, WalkOptions};
use rayon::prelude::*;

use crate::config::{Experiment, FluctKind, RunConfig};
use crate::output::{Check, Constant, Manifest, RunDir, Status, SCHEMA_VERSION};

/// Shared state of one run: the environment, its giant cluster and the
/// derived constants.
struct Run<'a> {
    cfg: &'a RunConfig,
    env: Environment,
    giant: Option<Arc<ClusterGraph>>,
    tfs: Vec<TestFunction>,
    table: Option<MeasureTable>,
    theta: f64,
    theta_fractions: Vec<f64>,
    diffusion: Option<f64>,
    walk: Option<WalkEstimate>,
    kappa: Option<f64>,
    constants: BTreeMap<String, Constant>,
    checks: Vec<Check>,
    warnings: Vec<String>,
}

pub fn run(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut dir = RunDir::create(&cfg.output)?;
    let mut run = Run::prepare(cfg)?;
    match cfg.experiment {
        Experiment::Gen => run.gen(&mut dir)?,
        Experiment::Theta => run.theta(&mut dir)?,
        Experiment::Walk => run.walk(&mut dir)?,
        Experiment::Corrector => run.corrector(&mut dir)?,
        Experiment::Simulate => run.simulate(&mut dir)?,
        Experiment::Fluct => run.fluct(&mut dir)?,
        Experiment::Connect => run.connect(&mut dir)?,
        Experiment::Chemdist => run.chemdist(&mut dir)?,
    }
    let mut files = dir.files.clone();
    files.push(crate::output::MANIFEST.into());
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        tool: "perc".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        experiment: cfg.experiment.name().into(),
        config: cfg.clone(),
        constants: run.constants,
        checks: run.checks,
        files,
        warnings: run.warnings,
    };
    dir.write_json(crate::output::MANIFEST, &manifest)?;
    Ok(manifest)
}

/// Sample times rounded for display.
fn label(t: f64) -> f64 {
    (t * 1e9).round() / 1e9
}

fn csv(rows: impl IntoIterator<Item = String>, header: &str) -> Vec<u8> {
    let mut out = format!("{header}\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out.into_bytes()
}

impl<'a> Run<'a> {
    fn prepare(cfg: &'a RunConfig) -> Result<Self> {
        let e = &cfg.environment;
        let env = Environment::generate(e.dim, e.side, e.p, e.seed)?;
        let giant = env.giant().ok().map(Arc::new);
        let tfs = cfg.test_functions()?;
        let mut run = Run {
            cfg,
            env,
            giant,
            tfs,
            table: None,
            theta: f64::NAN,
            theta_fractions: Vec::new(),
            diffusion: None,
            walk: None,
            kappa: None,
            constants: BTreeMap::new(),
            checks: Vec::new(),
            warnings: Vec::new(),
        };
        run.measure_constants();
        run.theta_constant()?;
        run.diffusion_constant()?;
        run.kappa_constant();
        Ok(run)
    }

    fn graph(&self) -> Result<&Arc<ClusterGraph>> {
        self.giant.as_ref().context("the environment has no cluster with two or more sites")
    }

    fn table(&self) -> Result<&MeasureTable> {
        self.table.as_ref().context("the invariant measure could not be built at this density")
    }

    fn measure_constants(&mut self) {
        let d = &self.cfg.dynamics;
        match MeasureTable::from_density(&d.rate, d.rho, Truncation::default()) {
            Ok(t) => {
                let series = format!("truncated series at rho = {}, {} terms", d.rho, t.order());
                self.constants
                    .insert("phi".into(), Constant::exact(t.phi, format!("fugacity root of rho(phi) = rho; {series}")));
                self.constants.insert("chi".into(), Constant::exact(t.chi, format!("single-site variance; {series}")));
                self.constants.insert("phi_prime".into(), Constant::exact(t.phi_prime(), "identity phi' = phi / chi"));
                self.table = Some(t);
            }
            Err(e) => {
                for k in ["phi", "chi", "phi_prime"] {
                    self.constants.insert(k.into(), Constant::unavailable(e.to_string()));
                }
            }
        }
    }

    fn theta_constant(&mut self) -> Result<()> {
        let e = &self.cfg.environment;
        let fractions: Vec<f64> = (0..e.theta_replicas)
            .into_par_iter()
            .map(|r| Environment::generate(e.dim, e.side, e.p, replica_seed(e.seed, r)).map(|x| x.giant_fraction()))
            .collect::<Result<_, _>>()?;
        let m = MeanSe::of(&fractions);
        self.theta = m.mean;
        self.theta_fractions = fractions;
        let c = if e.p == 1.0 {
            Constant::exact(1.0, "every bond open at p = 1")
        } else {
            Constant::estimate(
                m.mean,
                m.se,
                format!("mean giant-cluster fraction over {} environments", e.theta_replicas),
            )
        };
        if m.mean < SUBCRITICAL_THETA {
            self.warnings
                .push(format!("giant fraction {:.4} below {SUBCRITICAL_THETA}: environment looks subcritical", m.mean));
        }
        self.constants.insert("theta".into(), c);
        Ok(())
    }

    fn walk_options(&self) -> WalkOptions {
        let w = &self.cfg.walk;
        WalkOptions { walkers: w.walkers, horizon: w.horizon, grid: w.grid, seed: w.seed }
    }

    fn diffusion_constant(&mut self) -> Result<()> {
        let c = if let Some(d) = self.cfg.corrector.diffusion {
            self.diffusion = Some(d);
            Constant::exact(d, "corrector.diffusion in the configuration")
        } else if self.cfg.environment.p == 1.0 {
            self.diffusion = Some(1.0);
            Constant::exact(1.0, "full lattice: the walk normalization gives D = 1")
        } else if let Some(g) = &self.giant {
            let est = estimate_diffusion(g, &self.walk_options())?;
            let c = Constant::estimate(
                est.d_hat,
                est.se,
                format!(
                    "walk estimate on the run environment: {} walkers, horizon {}",
                    est.walkers, self.cfg.walk.horizon
                ),
            );
            self.diffusion = Some(est.d_hat);
            self.walk = Some(est);
            c
        } else {
            Constant::unavailable("degenerate environment: no cluster to walk on")
        };
        self.constants.insert("diffusion".into(), c);
        Ok(())
    }

    /// `kappa = energy / int |grad G|^2` on the full torus of the same side.
    fn kappa_constant(&mut self) {
        let e = &self.cfg.environment;
        let c = &self.cfg.corrector;
        let tf = &self.tfs[0];
        let computed = (|| -> perc_core::Result<f64> {
            let g = Environment::generate(e.dim, e.side, 1.0, e.seed)?.giant()?;
            let opts = SolverOptions { tol: c.tolerance, max_iterations: c.max_iterations };
            let (gn, _) = solve_resolvent(&g, c.lambda, tf, 1.0, &opts)?;
            Ok(dirichlet_energy(&gn, &g)? / tf.dirichlet_integral(e.dim)?)
        })();
        let constant = match computed {
            Ok(k) if k.is_finite() => {
                self.kappa = Some(k);
                Constant::exact(
                    k,
                    format!("ordered-pair energy over int |grad G|^2 at p = 1, n = {}, G = {tf}", e.side),
                )
            }
            Ok(_) => Constant::unavailable(format!("{tf} has zero gradient energy")),
            Err(err) => Constant::unavailable(err.to_string()),
        };
        self.constants.insert("kappa".into(), constant);
    }

    fn gen(&mut self, dir: &mut RunDir) -> Result<()> {
        let summary = self.env.summary();
        dir.write_with("lattice.bin", |w| self.env.lattice.write_to(w))?;
        dir.write_json("environment.json", &summary)?;
        self.checks.push(Check::info("giant fraction", summary.giant_fraction, None));
        Ok(())
    }

    fn theta(&mut self, dir: &mut RunDir) -> Result<()> {
        let e = &self.cfg.environment;
        let rows =
            self.theta_fractions.iter().enumerate().map(|(r, f)| format!("{r},{},{f:.17e}", replica_seed(e.seed, r)));
        dir.write("theta.csv", &csv(rows, "replica,seed,giant_fraction"))?;
        let m = MeanSe::of(&self.theta_fractions);
        self.checks.push(if e.p == 1.0 {
            Check::within_abs("theta at p = 1", m.mean, 1.0, 0.0)
        } else {
            Check::info("theta", m.mean, Some(m.se))
        });
        Ok(())
    }

    fn walk(&mut self, dir: &mut RunDir) -> Result<()> {
        let est = match self.walk.take() {
            Some(w) => w,
            None => estimate_diffusion(self.graph()?, &self.walk_options())?,
        };
        dir.write_with("walk.csv", |w| est.write_csv(w))?;
        dir.write_json("walk.json", &est)?;
        self.checks.push(if self.cfg.environment.p == 1.0 {
            Check::within_rel("D at p = 1", est.d_hat, 1.0, 0.02)
        } else {
            Check::info("D", est.d_hat, Some(est.se))
        });
        Ok(())
    }

    fn corrector(&mut self, dir: &mut RunDir) -> Result<()> {
        let g = self.graph()?.clone();
        let c = &self.cfg.corrector;
        let dim = self.cfg.environment.dim;
        let d = self.diffusion.context("no diffusion constant available")?;
        let opts = SolverOptions { tol: c.tolerance, max_iterations: c.max_iterations };
        let mut rows = Vec::new();
        for (i, tf) in self.tfs.iter().enumerate() {
            let (gn, rep) = solve_resolvent(&g, c.lambda, tf, d, &opts)?;
            let l2 = corrector_l2_error(&gn, tf, &g)?;
            let energy = dirichlet_energy(&gn, &g)?;
            let grad = tf.dirichlet_integral(dim)?;
            dir.write_with(&format!("corrector_{i}.csv"), |w| gn.write_csv(&g, w))?;
            rows.push(format!(
                "{i},\"{tf}\",{},{:.6e},{l2:.17e},{energy:.17e},{grad:.17e}",
                rep.iterations, rep.residual
            ));
            self.checks.push(Check::flag(
                format!("solver residual, {tf}"),
                rep.residual,
                None,
                format!("<= {:e}", c.tolerance),
                rep.residual <= c.tolerance,
            ));
            if let (Some(kappa), true) = (self.kappa, grad > 0.0) {
                let ratio = energy_ratio(energy, self.theta, d, grad) / kappa;
                self.checks.push(Check::within_rel(
                    format!("energy / (kappa theta D int|grad G|^2), {tf}"),
                    ratio,
                    1.0,
                    c.energy_tolerance,
                ));
            }
            self.checks.push(Check::info(format!("l2 error, {tf}"), l2, None));
        }
        dir.write(
            "corrector.csv",
            &csv(rows, "index,test_function,iterations,residual,l2_error,energy,grad_integral"),
        )?;
        Ok(())
    }

    fn sample_times(&self) -> Vec<f64> {
        sample_grid(self.cfg.dynamics.horizon, self.cfg.dynamics.samples)
    }

    fn simulate(&mut self, dir: &mut RunDir) -> Result<()> {
        let g = self.graph()?.clone();
        let table = self.table()?.clone();
        let dy = &self.cfg.dynamics;
        let times = self.sample_times();
        let runs: Vec<_> = (0..dy.replicas)
            .into_par_iter()
            .map(|r| {
                let mut rng = stream(dy.seed, domain::DYNAMICS, r as u64);
                let mut state = ZrpState::stationary(g.clone(), &table, &mut rng);
                let mut rec = FieldRecorder::new(&g, &self.tfs, &table);
                let rep = simulate(&mut state, dy.horizon, &times, &mut rec, &mut rng)?;
                Ok((rep, state.particles(), rec.samples))
            })
            .collect::<perc_core::Result<_>>()?;
        let summary = runs.iter().enumerate().map(|(r, (rep, particles, _))| {
            let absorbed = rep.absorbed_at.map(|a| a.to_string()).unwrap_or_default();
            format!("{r},{},{particles},{absorbed}", rep.events)
        });
        dir.write("simulate.csv", &csv(summary, "replica,events,particles,absorbed_at"))?;
        let mut fields = Vec::new();
        for (r, (_, _, samples)) in runs.iter().enumerate() {
            for s in samples {
                for (i, (y, th)) in s.density.iter().zip(&s.theta).enumerate() {
                    fields.push(format!("{r},{},{i},{y:.17e},{th:.17e}", s.t));
                }
            }
        }
        dir.write("fields.csv", &csv(fields, "replica,t,test_function,density,theta"))?;
        let events: Vec<f64> = runs.iter().map(|(rep, _, _)| rep.events as f64).collect();
        let m = MeanSe::of(&events);
        let n2 = (g.side() as f64).powi(2);
        let expected = dy.horizon * n2 * table.phi * g.total_degree() as f64;
        self.checks.push(Check::within_se("events vs t n^2 phi sum deg", m.mean, m.se, expected, self.cfg.fluct.z));
        Ok(())
    }

    fn fluct(&mut self, dir: &mut RunDir) -> Result<()> {
        let g = self.graph()?.clone();
        let table = self.table()?.clone();
        let dy = &self.cfg.dynamics;
        let c = &self.cfg.corrector;
        let z = self.cfg.fluct.z;
        let first = self.tfs[0].clone();
        let second = self.tfs.get(1).unwrap_or(&first).clone();
        let times = self.sample_times();
        match self.cfg.fluct.experiment {
            FluctKind::Static => {
                let s = static_covariance(&g, &table, &first, &second, self.cfg.fluct.samples, self.theta, dy.seed)?;
                dir.write_json("static.json", &s)?;
                let f = &s.finite_n;
                self.checks.push(Check::within_se("Cov(Y(G), Y(H)) vs finite-n form", f.estimate, f.se, f.target, z));
                self.checks.push(Check::info("limit theta chi <G, H>", s.limit_target, None));
            }
            FluctKind::Martingale => {
                let d = self.diffusion.context("no diffusion constant available")?;
                let opts = SolverOptions { tol: c.tolerance, max_iterations: c.max_iterations };
                let (gn, _) = solve_resolvent(&g, c.lambda, &first, d, &opts)?;
                let setup = DynkinSetup::new(g.clone(), &table, &first, &gn, c.lambda, d)?;
                let (m, _) = martingale_ensemble(&setup, &table, dy.horizon, &times, dy.replicas, dy.seed)?;
                let rows = (0..times.len()).map(|i| {
                    format!(
                        "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                        times[i],
                        m.mean_m[i].mean,
                        m.mean_m[i].se,
                        m.m2_minus_qv[i].mean,
                        m.m2_minus_qv[i].se,
                        m.mean_qv[i]
                    )
                });
                dir.write("martingale.csv", &csv(rows, "t,mean_m,mean_m_se,m2_minus_qv,m2_minus_qv_se,mean_qv"))?;
                for (i, t) in times.iter().enumerate() {
                    let (a, b) = (m.mean_m[i], m.m2_minus_qv[i]);
                    self.checks.push(Check::within_se(format!("E[M_t], t = {}", label(*t)), a.mean, a.se, 0.0, z));
                    self.checks.push(Check::within_se(
                        format!("E[M_t^2 - <M>_t], t = {}", label(*t)),
                        b.mean,
                        b.se,
                        0.0,
                        z,
                    ));
                }
                self.checks.push(Check::flag(
                    "Dynkin bookkeeping residual",
                    m.max_identity_residual,
                    Some(0.0),
                    "<= 1e-8",
                    m.max_identity_residual <= 1e-8,
                ));
            }
            FluctKind::Bg => {
                let bg = bg_statistic(&g, &table, &first, dy.horizon, &times, dy.replicas, dy.seed)?;
                let rows = bg.integrals.iter().enumerate().map(|(r, x)| format!("{r},{x:.17e}"));
                dir.write("bg.csv", &csv(rows, "replica,integral"))?;
                let e = &bg.estimate;
                if table.rate == RateFunction::Linear {
                    let worst = bg.integrals.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                    self.checks.push(Check::within_abs(
                        "max |int (Theta - phi' Y) ds| for linear g",
                        worst,
                        0.0,
                        1e-10,
                    ));
                }
                self.checks.push(Check::info("E[(int (Theta - phi' Y) ds)^2]", e.estimate, Some(e.se)));
            }
            FluctKind::Lagcov => {
                let d = self.diffusion.context("no diffusion constant available")?;
                let lags = lag_covariance(&g, &table, &first, &second, &times, dy.replicas, d, self.theta, dy.seed)?;
                let rows = lags.iter().map(|(t, e)| format!("{t},{:.17e},{:.17e},{:.17e}", e.estimate, e.se, e.target));
                dir.write("lagcov.csv", &csv(rows, "t,estimate,se,ou_target"))?;
                for (t, e) in &lags {
                    self.checks.push(Check::within_se(
                        format!("E[Y_t(G) Y_0(H)] vs OU, t = {}", label(*t)),
                        e.estimate,
                        e.se,
                        e.target,
                        z,
                    ));
                }
            }
        }
        Ok(())
    }

    fn connect(&mut self, dir: &mut RunDir) -> Result<()> {
        let k = &self.cfg.connect;
        let mut levels = k.levels.clone();
        levels.sort_unstable();
        levels.dedup();
        let mut fractions = Vec::new();
        let mut rows = Vec::new();
        for &l in &levels {
            let c = classify_boxes(&self.env, k.k, l)?;
            fractions.push(c.bad_fraction());
            rows.push(format!("{l},{},{},{:.17e}", c.good_count, c.bad_count, c.bad_fraction()));
        }
        dir.write("connect.csv", &csv(rows, "level,good,bad,bad_fraction"))?;
        let monotone = fractions.windows(2).all(|w| w[1] <= w[0]);
        let last = *fractions.last().unwrap_or(&f64::NAN);
        self.checks.push(Check::flag("bad fraction non-increasing in l", last, None, "monotone", monotone));
        self.checks.push(Check::flag(
            format!("bad fraction at l = {}", levels.last().unwrap_or(&0)),
            last,
            None,
            format!("< {}", k.max_bad_fraction),
            last < k.max_bad_fraction,
        ));
        if self.cfg.environment.p == 1.0 {
            let worst = fractions.iter().cloned().fold(0.0, f64::max);
            self.checks.push(Check::within_abs("bad fraction at p = 1", worst, 0.0, 0.0));
        }
        Ok(())
    }

    fn chemdist(&mut self, dir: &mut RunDir) -> Result<()> {
        let e = &self.cfg.environment;
        let ch = &self.cfg.chemdist;
        let opts = TailOptions {
            separations: ch.separations.clone(),
            gammas: default_gammas(),
            sources: ch.sources,
            environments: ch.environments,
            min_pairs: ch.min_pairs,
            min_r_squared: ch.min_r_squared,
            seed: e.seed,
        };
        let stats = tail_estimate(e.dim, e.side, e.p, e.seed, &opts)?;
        let mut rows = Vec::new();
        for (s, sep) in stats.separations.iter().enumerate() {
            for (gi, gamma) in stats.gammas.iter().enumerate() {
                rows.push(format!(
                    "{sep},{:.17e},{},{gamma},{:.17e}",
                    stats.mean_norm[s], stats.counts[s], stats.frequency[s][gi]
                ));
            }
        }
        dir.write("chemdist.csv", &csv(rows, "separation,mean_norm,pairs,gamma,frequency"))?;
        let fits = stats
            .fits
            .iter()
            .map(|f| format!("{},{:.17e},{:.17e},{:.17e}", f.gamma, f.fit.slope, f.fit.intercept, f.fit.r_squared));
        dir.write("fits.csv", &csv(fits, "gamma,slope,intercept,r_squared"))?;
        match stats.selected_fit() {
            Some(f) => {
                self.checks.push(Check::info("gamma_hat", f.gamma, None));
                self.checks.push(Check::flag("tail slope at gamma_hat", f.fit.slope, None, "< 0", f.fit.slope < 0.0));
                self.checks.push(Check::flag(
                    "tail R^2 at gamma_hat",
                    f.fit.r_squared,
                    None,
                    format!(">= {}", ch.min_r_squared),
                    f.fit.r_squared >= ch.min_r_squared,
                ));
            }
            None => self.checks.push(Check::flag("gamma_hat", f64::NAN, None, "some gamma qualifies", false)),
        }
        Ok(())
    }
}

/// Formats the manifest checks as an aligned table.
pub fn report_table(manifest: &Manifest, mut out: impl Write) -> std::io::Result<()> {
    let fmt = |x: Option<f64>| x.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "-".into());
    let rows: Vec<[String; 6]> = manifest
        .checks
        .iter()
        .map(|c| {
            let status = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Info => "info",
            };
            [c.name.clone(), fmt(Some(c.estimate)), fmt(c.se), fmt(c.target), c.tolerance.clone(), status.into()]
        })
        .collect();
    let header = ["check", "estimate", "se", "target", "tolerance", "status"].map(String::from);
    let mut width = header.clone().map(|h| h.len());
    for r in &rows {
        for (w, cell) in width.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    writeln!(out, "experiment {} (perc {})", manifest.experiment, manifest.version)?;
    for r in std::iter::once(&header).chain(&rows) {
        let line: Vec<String> = r.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        writeln!(out, "{}", line.join("  ").trim_end())?;
    }
    Ok(())
}

pub fn ensure_valid(manifest: &Manifest) -> Result<()> {
    if manifest.schema_version != SCHEMA_VERSION {
        bail!("unsupported manifest schema version {}", manifest.schema_version);
    }
    Ok(())
}
