//! Smooth test functions on the macroscopic unit torus `[0, 1)^d`.
//!
//! Gaussian and bump functions are evaluated with the minimal-image
//! displacement from their center and are required to be negligible near
//! the seam, so they are smooth periodic functions for all practical
//! purposes. Integrals are over one period.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Values below this are treated as outside the support.
pub const SUPPORT_CUTOFF: f64 = 1e-12;

const QUAD_TOL: f64 = 1e-10;
const QUAD_MAX_POINTS: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TestFunction {
    /// `exp(-|u - c|^2 / (2 sigma^2))`.
    Gaussian {
        center: Vec<f64>,
        sigma: f64,
    },
    /// `exp(1 - 1 / (1 - |u - c|^2 / R^2))` inside the ball of radius `R`.
    Bump {
        center: Vec<f64>,
        radius: f64,
    },
    /// `prod_i cos(2 pi m_i u_i)`.
    Cosine {
        modes: Vec<i32>,
    },
    Constant {
        value: f64,
    },
}

fn wrap(x: f64) -> f64 {
    x - x.round()
}

impl TestFunction {
    pub fn gaussian(center: &[f64], sigma: f64) -> Self {
        TestFunction::Gaussian { center: center.to_vec(), sigma }
    }
    pub fn bump(center: &[f64], radius: f64) -> Self {
        TestFunction::Bump { center: center.to_vec(), radius }
    }
    pub fn cosine(modes: &[i32]) -> Self {
        TestFunction::Cosine { modes: modes.to_vec() }
    }

    /// Dimension fixed by the parameters, if any.
    pub fn dim(&self) -> Option<usize> {
        match self {
            TestFunction::Gaussian { center, .. } | TestFunction::Bump { center, .. } => Some(center.len()),
            TestFunction::Cosine { modes } => Some(modes.len()),
            TestFunction::Constant { .. } => None,
        }
    }

    /// Width parameter used for the support margin.
    pub fn width(&self) -> Option<f64> {
        match self {
            TestFunction::Gaussian { sigma, .. } => Some(*sigma),
            TestFunction::Bump { radius, .. } => Some(*radius),
            _ => None,
        }
    }

    /// Radius of the region where the function exceeds [`SUPPORT_CUTOFF`].
    pub fn support_radius(&self) -> Option<f64> {
        match self {
            TestFunction::Gaussian { sigma, .. } => Some(sigma * (-2.0 * SUPPORT_CUTOFF.ln()).sqrt()),
            TestFunction::Bump { radius, .. } => Some(*radius),
            _ => None,
        }
    }

    /// Checks parameters and that the effective support stays inside the
    /// unit cube with a margin of half the width.
    pub fn validate(&self, dim: usize) -> Result<()> {
        if let Some(d) = self.dim() {
            if d != dim {
                return Err(invalid("test_function", format!("{self} has dimension {d}, expected {dim}")));
            }
        }
        match self {
            TestFunction::Gaussian { sigma: w, .. } | TestFunction::Bump { radius: w, .. } => {
                if !(*w > 0.0 && w.is_finite()) {
                    return Err(invalid("test_function", format!("width must be positive in {self}")));
                }
            }
            TestFunction::Constant { value } if !value.is_finite() => {
                return Err(invalid("test_function", "constant must be finite"));
            }
            _ => {}
        }
        if let (TestFunction::Gaussian { center, .. } | TestFunction::Bump { center, .. }, Some(r), Some(w)) =
            (self, self.support_radius(), self.width())
        {
            let reach = r + w / 2.0;
            if center.iter().any(|&c| !(c.is_finite() && c - reach >= 0.0 && c + reach <= 1.0)) {
                return Err(invalid(
                    "test_function",
                    format!("support of {self} (radius {r:.4} plus margin {:.4}) leaves the unit cube", w / 2.0),
                ));
            }
        }
        Ok(())
    }

    fn displacement(center: &[f64], u: &[f64], out: &mut [f64]) -> f64 {
        let mut r2 = 0.0;
        for i in 0..center.len() {
            out[i] = wrap(u[i] - center[i]);
            r2 += out[i] * out[i];
        }
        r2
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        match self {
            TestFunction::Gaussian { center, sigma } => {
                let r2: f64 = center.iter().zip(u).map(|(c, x)| wrap(x - c).powi(2)).sum();
                (-r2 / (2.0 * sigma * sigma)).exp()
            }
            TestFunction::Bump { center, radius } => {
                let r2: f64 = center.iter().zip(u).map(|(c, x)| wrap(x - c).powi(2)).sum();
                let q = 1.0 - r2 / (radius * radius);
                if q <= 0.0 {
                    0.0
                } else {
                    (1.0 - 1.0 / q).exp()
                }
            }
            TestFunction::Cosine { modes } => {
                modes.iter().zip(u).map(|(&m, x)| (2.0 * PI * m as f64 * x).cos()).product()
            }
            TestFunction::Constant { value } => *value,
        }
    }

    pub fn gradient(&self, u: &[f64], out: &mut [f64]) {
        match self {
            TestFunction::Gaussian { center, sigma } => {
                let r2 = Self::displacement(center, u, out);
                let g = (-r2 / (2.0 * sigma * sigma)).exp();
                out.iter_mut().for_each(|v| *v *= -g / (sigma * sigma));
            }
            TestFunction::Bump { center, radius } => {
                let r2 = Self::displacement(center, u, out);
                let q = 1.0 - r2 / (radius * radius);
                let h = if q <= 0.0 { 0.0 } else { -2.0 * (1.0 - 1.0 / q).exp() / (radius * radius * q * q) };
                out.iter_mut().for_each(|v| *v *= h);
            }
            TestFunction::Cosine { modes } => {
                for i in 0..modes.len() {
                    let mut p = 1.0;
                    for (j, (&m, x)) in modes.iter().zip(u).enumerate() {
                        let k = 2.0 * PI * m as f64;
                        p *= if i == j { -k * (k * x).sin() } else { (k * x).cos() };
                    }
                    out[i] = p;
                }
            }
            TestFunction::Constant { .. } => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    pub fn laplacian(&self, u: &[f64]) -> f64 {
        match self {
            TestFunction::Gaussian { center, sigma } => {
                let s2 = sigma * sigma;
                let r2: f64 = center.iter().zip(u).map(|(c, x)| wrap(x - c).powi(2)).sum();
                (r2 / (s2 * s2) - center.len() as f64 / s2) * (-r2 / (2.0 * s2)).exp()
            }
            TestFunction::Bump { center, radius } => {
                let r2: f64 = center.iter().zip(u).map(|(c, x)| wrap(x - c).powi(2)).sum();
                let rr = radius * radius;
                let q = 1.0 - r2 / rr;
                if q <= 0.0 {
                    return 0.0;
                }
                let g = (1.0 - 1.0 / q).exp();
                let h = -2.0 * g / (rr * q * q);
                let rh = 4.0 * r2 * g / (rr * rr) * (1.0 / q.powi(4) - 2.0 / q.powi(3));
                center.len() as f64 * h + rh
            }
            TestFunction::Cosine { modes } => {
                let m2: f64 = modes.iter().map(|&m| (m as f64).powi(2)).sum();
                -4.0 * PI * PI * m2 * self.value(u)
            }
            TestFunction::Constant { .. } => 0.0,
        }
    }

    /// `int G H` over the unit torus.
    pub fn inner_product(&self, other: &TestFunction, dim: usize) -> Result<f64> {
        self.heat_pairing(other, 0.0, dim)
    }

    /// `int |grad G|^2` over the unit torus.
    pub fn dirichlet_integral(&self, dim: usize) -> Result<f64> {
        match self {
            TestFunction::Gaussian { sigma, .. } => {
                let s2 = sigma * sigma;
                Ok(dim as f64 / (2.0 * s2) * (PI * s2).powf(dim as f64 / 2.0))
            }
            TestFunction::Cosine { modes } => {
                let m2: f64 = modes.iter().map(|&m| (m as f64).powi(2)).sum();
                Ok(4.0 * PI * PI * m2 * cosine_product(modes, modes))
            }
            TestFunction::Constant { .. } => Ok(0.0),
            TestFunction::Bump { .. } => {
                let mut grad = vec![0.0; dim];
                midpoint_quadrature(dim, |u| {
                    self.gradient(u, &mut grad);
                    grad.iter().map(|g| g * g).sum()
                })
            }
        }
    }

    /// `int (P_tau G) H` where `P_tau` is the heat semigroup generated by
    /// `a Delta` and `a_tau = a * tau >= 0`.
    pub fn heat_pairing(&self, other: &TestFunction, a_tau: f64, dim: usize) -> Result<f64> {
        if !(a_tau >= 0.0 && a_tau.is_finite()) {
            return Err(invalid("tau", format!("a * tau must be finite and non-negative, got {a_tau}")));
        }
        use TestFunction::*;
        match (self, other) {
            (Gaussian { center: c1, sigma: s1 }, Gaussian { center: c2, sigma: s2 }) => {
                // P_tau G is a Gaussian of variance s1^2 + 2 a tau with a
                // shrunken amplitude
                let v1 = s1 * s1 + 2.0 * a_tau;
                let v2 = s2 * s2;
                let amp = (s1 * s1 / v1).powf(dim as f64 / 2.0);
                let d2: f64 = c1.iter().zip(c2).map(|(a, b)| wrap(a - b).powi(2)).sum();
                Ok(amp * (2.0 * PI * v1 * v2 / (v1 + v2)).powf(dim as f64 / 2.0) * (-d2 / (2.0 * (v1 + v2))).exp())
            }
            (Cosine { modes: m }, Cosine { modes: k }) => {
                let m2: f64 = m.iter().map(|&x| (x as f64).powi(2)).sum();
                Ok((-4.0 * PI * PI * m2 * a_tau).exp() * cosine_product(m, k))
            }
            (Constant { value }, _) => Ok(value * other.integral(dim)?),
            (_, Constant { value }) => Ok(value * self.integral(dim)?),
            _ if a_tau == 0.0 => midpoint_quadrature(dim, |u| self.value(u) * other.value(u)),
            _ => fft_heat_pairing(self, other, a_tau, dim),
        }
    }

    /// `int G` over the unit torus.
    pub fn integral(&self, dim: usize) -> Result<f64> {
        match self {
            TestFunction::Gaussian { sigma, .. } => Ok((2.0 * PI * sigma * sigma).powf(dim as f64 / 2.0)),
            TestFunction::Cosine { modes } => Ok(if modes.iter().all(|&m| m == 0) { 1.0 } else { 0.0 }),
            TestFunction::Constant { value } => Ok(*value),
            TestFunction::Bump { .. } => midpoint_quadrature(dim, |u| self.value(u)),
        }
    }
}

fn cosine_product(m: &[i32], k: &[i32]) -> f64 {
    m.iter()
        .zip(k)
        .map(|(&a, &b)| match (a.unsigned_abs(), b.unsigned_abs()) {
            (0, 0) => 1.0,
            (x, y) if x == y => 0.5,
            _ => 0.0,
        })
        .product()
}

fn grid_point(mut idx: usize, m: usize, u: &mut [f64]) {
    for x in u.iter_mut() {
        *x = ((idx % m) as f64 + 0.5) / m as f64;
        idx /= m;
    }
}

fn converged(prev: f64, cur: f64) -> bool {
    (cur - prev).abs() <= QUAD_TOL * cur.abs().max(0.1)
}

/// Midpoint rule on `m^d` grids, doubling `m` until successive values agree.
/// Spectrally accurate for smooth periodic integrands.
pub fn midpoint_quadrature(dim: usize, mut f: impl FnMut(&[f64]) -> f64) -> Result<f64> {
    let mut u = vec![0.0; dim];
    let mut prev = f64::NAN;
    let mut m = 16usize;
    loop {
        let pts = m.pow(dim as u32);
        let mut s = 0.0;
        for idx in 0..pts {
            grid_point(idx, m, &mut u);
            s += f(&u);
        }
        s /= pts as f64;
        if converged(prev, s) {
            return Ok(s);
        }
        if (2 * m).pow(dim as u32) > QUAD_MAX_POINTS {
            return Err(Error::Quadrature { change: (s - prev).abs() });
        }
        prev = s;
        m *= 2;
    }
}

fn fft_nd(data: &mut [Complex<f64>], m: usize, dim: usize, planner: &mut FftPlanner<f64>) {
    let fft = planner.plan_fft_forward(m);
    let mut line = vec![Complex::new(0.0, 0.0); m];
    let mut stride = 1;
    for _ in 0..dim {
        let block = stride * m;
        for base in (0..data.len()).step_by(block) {
            for off in 0..stride {
                for j in 0..m {
                    line[j] = data[base + off + j * stride];
                }
                fft.process(&mut line);
                for j in 0..m {
                    data[base + off + j * stride] = line[j];
                }
            }
        }
        stride = block;
    }
}

/// Parseval: `sum_k G^(k) conj(H^(k)) exp(-4 pi^2 |k|^2 a tau)`.
fn fft_heat_pairing(g: &TestFunction, h: &TestFunction, a_tau: f64, dim: usize) -> Result<f64> {
    let mut planner = FftPlanner::new();
    let mut u = vec![0.0; dim];
    let mut prev = f64::NAN;
    let mut m = 32usize;
    loop {
        let pts = m.pow(dim as u32);
        let sample = |f: &TestFunction, u: &mut [f64]| -> Vec<Complex<f64>> {
            (0..pts)
                .map(|idx| {
                    grid_point(idx, m, u);
                    Complex::new(f.value(u), 0.0)
                })
                .collect()
        };
        let mut gk = sample(g, &mut u);
        let mut hk = sample(h, &mut u);
        fft_nd(&mut gk, m, dim, &mut planner);
        fft_nd(&mut hk, m, dim, &mut planner);
        let mut s = 0.0;
        for idx in 0..pts {
            let (mut i, mut k2) = (idx, 0.0);
            for _ in 0..dim {
                let j = (i % m) as i64;
                let k = if 2 * j < m as i64 { j } else { j - m as i64 };
                k2 += (k * k) as f64;
                i /= m;
            }
            s += (gk[idx] * hk[idx].conj()).re * (-4.0 * PI * PI * k2 * a_tau).exp();
        }
        s /= (pts as f64) * (pts as f64);
        if converged(prev, s) {
            return Ok(s);
        }
        if (2 * m).pow(dim as u32) > QUAD_MAX_POINTS {
            return Err(Error::Quadrature { change: (s - prev).abs() });
        }
        prev = s;
        m *= 2;
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        match self {
            TestFunction::Gaussian { center, sigma } => write!(f, "gaussian:{}:{sigma}", join(center)),
            TestFunction::Bump { center, radius } => write!(f, "bump:{}:{radius}", join(center)),
            TestFunction::Cosine { modes } => {
                write!(f, "cosine:{}", modes.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","))
            }
            TestFunction::Constant { value } => write!(f, "constant:{value}"),
        }
    }
}

/// Parses `gaussian:cx,cy:sigma`, `bump:cx,cy:radius`, `cosine:m1,m2` or
/// `constant:c`.
impl FromStr for TestFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| invalid("test_function", format!("cannot parse {s:?}: {why}"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let floats = |t: &str| -> Result<Vec<f64>> {
            t.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| bad("expected numbers"))).collect()
        };
        let scalar = |t: &str| t.trim().parse::<f64>().map_err(|_| bad("expected a number"));
        match parts.as_slice() {
            ["gaussian", c, w] => Ok(TestFunction::Gaussian { center: floats(c)?, sigma: scalar(w)? }),
            ["bump", c, w] => Ok(TestFunction::Bump { center: floats(c)?, radius: scalar(w)? }),
            ["cosine", m] => Ok(TestFunction::Cosine {
                modes: m
                    .split(',')
                    .map(|x| x.trim().parse().map_err(|_| bad("expected integers")))
                    .collect::<Result<_>>()?,
            }),
            ["constant", c] => Ok(TestFunction::Constant { value: scalar(c)? }),
            _ => Err(bad("unknown family or wrong number of fields")),
        }
    }
}
