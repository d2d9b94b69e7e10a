//! Interaction rates and the product invariant measures of the zero-range
//! process.
//!
//! The single-site law at fugacity `phi` puts weight `phi^k / g(k)!` on
//! `k` particles, with the empty product `g(0)! = 1`. Series are truncated
//! once the remaining tail of the mass, mean and second moment is certified
//! below a relative tolerance by a geometric bound on the term ratios.

use std::io::Write;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// How a tabulated rate continues past its last entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailRule {
    Constant,
    Linear,
}

/// The interaction rate `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum RateFunction {
    /// `g(k) = k`: independent walkers.
    Linear,
    /// `g(k) = 1{k >= 1}`.
    Indicator,
    /// Explicit values `g(0), .., g(m-1)` continued by `tail`.
    Table { values: Vec<f64>, tail: TailRule },
}

impl RateFunction {
    pub fn table(values: Vec<f64>, tail: TailRule) -> Result<Self> {
        let g = RateFunction::Table { values, tail };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if let RateFunction::Table { values, tail } = self {
            if values.len() < 2 {
                return Err(Error::InvalidRate("table needs at least g(0) and g(1)".into()));
            }
            if values[0] != 0.0 {
                return Err(Error::InvalidRate(format!("g(0) must be 0, got {}", values[0])));
            }
            if let Some(k) = values.iter().skip(1).position(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidRate(format!("g({}) must be positive and finite", k + 1)));
            }
            if *tail == TailRule::Linear && self.tail_slope() < 0.0 {
                return Err(Error::InvalidRate("linear tail with negative slope eventually violates g > 0".into()));
            }
        }
        Ok(())
    }

    fn tail_slope(&self) -> f64 {
        match self {
            RateFunction::Table { values, tail: TailRule::Linear } => {
                let m = values.len();
                values[m - 1] - values[m - 2]
            }
            _ => 0.0,
        }
    }

    #[inline]
    pub fn eval(&self, k: u32) -> f64 {
        match self {
            RateFunction::Linear => k as f64,
            RateFunction::Indicator => {
                if k > 0 {
                    1.0
                } else {
                    0.0
                }
            }
            RateFunction::Table { values, tail } => {
                let k = k as usize;
                let m = values.len();
                if k < m {
                    values[k]
                } else {
                    match tail {
                        TailRule::Constant => values[m - 1],
                        TailRule::Linear => values[m - 1] + (k + 1 - m) as f64 * self.tail_slope(),
                    }
                }
            }
        }
    }

    /// `sup_n |g(n+1) - g(n)|`; exact for the closed families and tables.
    pub fn lipschitz_bound(&self) -> f64 {
        match self {
            RateFunction::Linear | RateFunction::Indicator => 1.0,
            RateFunction::Table { values, .. } => {
                values.windows(2).map(|w| (w[1] - w[0]).abs()).fold(self.tail_slope().abs(), f64::max)
            }
        }
    }

    /// Smallest `c0` with `g(n) <= c0 n`.
    pub fn linear_bound(&self) -> f64 {
        match self {
            RateFunction::Linear | RateFunction::Indicator => 1.0,
            RateFunction::Table { values, .. } => {
                let m = values.len();
                let table_max = (1..m).map(|k| values[k] / k as f64).fold(0.0, f64::max);
                // past the table g(n)/n moves monotonically toward the slope
                table_max.max(self.tail_slope())
            }
        }
    }

    /// `inf_{j > k} g(j)`.
    fn inf_beyond(&self, k: usize) -> f64 {
        match self {
            RateFunction::Linear => (k + 1) as f64,
            RateFunction::Indicator => 1.0,
            RateFunction::Table { values, .. } => {
                let m = values.len();
                let tail_start = self.eval(m.max(k + 1) as u32);
                values.iter().skip(k + 1).copied().fold(tail_start, f64::min)
            }
        }
    }

    /// True when `inf_beyond(j)` cannot grow for `j >= k`.
    fn inf_is_final(&self, k: usize) -> bool {
        match self {
            RateFunction::Linear => false,
            RateFunction::Indicator => true,
            RateFunction::Table { values, tail } => *tail == TailRule::Constant && k + 1 >= values.len(),
        }
    }
}

/// Truncation controls for the single-site series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub tol: f64,
    pub max_terms: usize,
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation { tol: 1e-15, max_terms: 100_000 }
    }
}

/// The single-site marginal of the product invariant measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureTable {
    pub rate: RateFunction,
    pub phi: f64,
    /// Natural log of the partition value (the value itself may overflow).
    pub log_z: f64,
    pub rho: f64,
    pub chi: f64,
    pub truncation: Truncation,
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl MeasureTable {
    pub fn from_fugacity(rate: &RateFunction, phi: f64, truncation: Truncation) -> Result<Self> {
        rate.validate()?;
        if !(phi >= 0.0 && phi.is_finite()) {
            return Err(invalid("phi", format!("fugacity must be finite and non-negative, got {phi}")));
        }
        if !(truncation.tol > 0.0) {
            return Err(invalid("tol", "truncation tolerance must be positive"));
        }
        let tol = truncation.tol;
        let log_phi = phi.ln();
        // log weights, and running sums of k^m w_k scaled by exp(-scale)
        let mut log_w = vec![0.0f64];
        let mut scale = 0.0f64;
        let (mut s0, mut s1, mut s2) = (1.0f64, 0.0f64, 0.0f64);
        let mut k = 0usize;
        loop {
            let r = phi / rate.inf_beyond(k);
            if r < 1.0 {
                let wk = (log_w[k] - scale).exp();
                let kf = k as f64;
                let a = r / (1.0 - r);
                let b = r / (1.0 - r).powi(2);
                let c = r * (1.0 + r) / (1.0 - r).powi(3);
                let t0 = wk * a;
                let t1 = wk * (kf * a + b);
                let t2 = wk * (kf * kf * a + 2.0 * kf * b + c);
                if t0 <= tol * s0 && t1 <= tol * s1.max(f64::MIN_POSITIVE) && t2 <= tol * s2.max(f64::MIN_POSITIVE) {
                    break;
                }
            } else if rate.inf_is_final(k) {
                return Err(Error::Divergence { phi, cap: k });
            }
            if k + 1 >= truncation.max_terms {
                return Err(Error::Divergence { phi, cap: truncation.max_terms });
            }
            k += 1;
            let lw = log_w[k - 1] + log_phi - rate.eval(k as u32).ln();
            log_w.push(lw);
            if lw > scale {
                let f = (scale - lw).exp();
                s0 *= f;
                s1 *= f;
                s2 *= f;
                scale = lw;
            }
            let w = (lw - scale).exp();
            let kf = k as f64;
            s0 += w;
            s1 += kf * w;
            s2 += kf * kf * w;
        }
        let probs: Vec<f64> = log_w.iter().map(|lw| (lw - scale).exp() / s0).collect();
        let rho: f64 = probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        let chi: f64 = probs.iter().enumerate().map(|(k, p)| (k as f64 - rho).powi(2) * p).sum();
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        *cdf.last_mut().unwrap() = 1.0;
        Ok(MeasureTable { rate: rate.clone(), phi, log_z: scale + s0.ln(), rho, chi, truncation, probs, cdf })
    }

    pub fn from_density(rate: &RateFunction, rho: f64, truncation: Truncation) -> Result<Self> {
        let phi = fugacity_with(rate, rho, truncation)?;
        MeasureTable::from_fugacity(rate, phi, truncation)
    }

    pub fn z(&self) -> f64 {
        self.log_z.exp()
    }

    /// Truncation order `K`: the table covers `k = 0..=K`.
    pub fn order(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, k: usize) -> f64 {
        self.probs.get(k).copied().unwrap_or(0.0)
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    /// `phi'(rho) = phi / chi`, with the `rho -> 0` limit `g(1)`.
    pub fn phi_prime(&self) -> f64 {
        if self.chi > 0.0 {
            self.phi / self.chi
        } else {
            self.rate.eval(1)
        }
    }

    /// Mean of `g` under the table; equals `phi` up to truncation.
    pub fn mean_rate(&self) -> f64 {
        self.probs.iter().enumerate().map(|(k, p)| self.rate.eval(k as u32) * p).sum()
    }

    pub fn centering(&self) -> Centering {
        Centering { rho: self.rho, phi: self.phi, phi_prime: self.phi_prime() }
    }

    /// Inverse-CDF draw.
    #[inline]
    pub fn sample(&self, rng: &mut impl RngCore) -> u32 {
        let u = rng::uniform(rng);
        self.cdf.partition_point(|&c| c <= u) as u32
    }

    pub fn sample_occupancies(&self, sites: usize, rng: &mut impl RngCore) -> Vec<u32> {
        (0..sites).map(|_| self.sample(rng)).collect()
    }

    /// CSV with header `k,weight,cdf`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "k,weight,cdf")?;
        for (k, (p, c)) in self.probs.iter().zip(&self.cdf).enumerate() {
            writeln!(w, "{k},{p:e},{c:e}")?;
        }
        Ok(())
    }
}

/// Fugacity, derivative and density needed to center `g` at `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centering {
    pub rho: f64,
    pub phi: f64,
    pub phi_prime: f64,
}

impl Centering {
    /// `V(k) = g(k) - phi(rho) - phi'(rho) (k - rho)`.
    #[inline]
    pub fn v(&self, rate: &RateFunction, k: u32) -> f64 {
        rate.eval(k) - self.phi - self.phi_prime * (k as f64 - self.rho)
    }
}

/// Partition value and truncation order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partition {
    pub z: f64,
    pub order: usize,
}

pub fn partition_function(rate: &RateFunction, phi: f64, tol: f64) -> Result<Partition> {
    let t = MeasureTable::from_fugacity(rate, phi, Truncation { tol, ..Truncation::default() })?;
    Ok(Partition { z: t.z(), order: t.order() })
}

pub fn density_of_fugacity(rate: &RateFunction, phi: f64) -> Result<f64> {
    Ok(MeasureTable::from_fugacity(rate, phi, Truncation::default())?.rho)
}

pub fn fugacity_of_density(rate: &RateFunction, rho: f64) -> Result<f64> {
    fugacity_with(rate, rho, Truncation::default())
}

fn fugacity_with(rate: &RateFunction, rho: f64, truncation: Truncation) -> Result<f64> {
    rate.validate()?;
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(invalid("rho", format!("density must be finite and non-negative, got {rho}")));
    }
    if rho == 0.0 {
        return Ok(0.0);
    }
    let eval = |phi: f64| MeasureTable::from_fugacity(rate, phi, truncation);
    // bracket [lo, hi] with rho(lo) < rho <= rho(hi); divergence counts as "too high"
    let (mut lo, mut hi) = (0.0f64, rho.min(1.0) * rate.eval(1).max(1e-300));
    let mut hi_valid = false;
    for _ in 0..200 {
        match eval(hi) {
            Ok(t) if t.rho < rho => {
                lo = hi;
                hi *= 2.0;
            }
            Ok(_) => {
                hi_valid = true;
                break;
            }
            Err(Error::Divergence { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    let mut phi = if hi_valid { hi } else { 0.5 * (lo + hi) };
    for _ in 0..500 {
        let table = match eval(phi) {
            Ok(t) => t,
            Err(Error::Divergence { .. }) => {
                hi = phi;
                phi = 0.5 * (lo + hi);
                continue;
            }
            Err(e) => return Err(e),
        };
        let resid = table.rho - rho;
        if resid.abs() <= 4.0 * f64::EPSILON * rho.max(1.0) {
            return Ok(phi);
        }
        if resid < 0.0 {
            lo = phi;
        } else {
            hi = phi;
        }
        // d rho / d phi = chi / phi
        let newton = phi - resid * phi / table.chi;
        let next = if newton > lo && newton < hi && table.chi > 0.0 { newton } else { 0.5 * (lo + hi) };
        if next == phi || (hi - lo) <= f64::EPSILON * hi {
            return Ok(phi);
        }
        phi = next;
    }
    Err(Error::RootFinding { rho })
}

pub fn compressibility(rate: &RateFunction, rho: f64) -> Result<f64> {
    Ok(MeasureTable::from_density(rate, rho, Truncation::default())?.chi)
}

pub fn phi_prime(rate: &RateFunction, rho: f64) -> Result<f64> {
    Ok(MeasureTable::from_density(rate, rho, Truncation::default())?.phi_prime())
}

/// Centered finite difference of `phi(.)`; the independent cross-check of
/// [`phi_prime`].
pub fn phi_prime_fd(rate: &RateFunction, rho: f64) -> Result<f64> {
    let h = 1e-4 * rho.max(1e-2);
    let lo = (rho - h).max(0.0);
    let hi = rho + h;
    Ok((fugacity_of_density(rate, hi)? - fugacity_of_density(rate, lo)?) / (hi - lo))
}

pub fn sample_occupancies(rate: &RateFunction, rho: f64, sites: usize, rng: &mut impl RngCore) -> Result<Vec<u32>> {
    let table = MeasureTable::from_density(rate, rho, Truncation::default())?;
    Ok(table.sample_occupancies(sites, rng))
}

pub fn v_function(rate: &RateFunction, rho: f64, k: u32) -> Result<f64> {
    let t = MeasureTable::from_density(rate, rho, Truncation::default())?;
    Ok(t.centering().v(rate, k))
}

/// `psi(rho') = E_{rho'}[V] = phi(rho') - phi(rho) - phi'(rho)(rho' - rho)`.
pub fn psi(rate: &RateFunction, rho: f64, rho_prime: f64) -> Result<f64> {
    let c = MeasureTable::from_density(rate, rho, Truncation::default())?.centering();
    Ok(fugacity_of_density(rate, rho_prime)? - c.phi - c.phi_prime * (rho_prime - rho))
}
