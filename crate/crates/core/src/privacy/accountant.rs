//! Moments accountant for the subsampled Gaussian mechanism.
//!
//! For sampling fraction `q` and noise multiplier `sigma` (updates normalized
//! to sensitivity 1), the per-round log moment is
//!
//! ```text
//! alpha(lambda) = log max(E1, E2)
//! E1 = ∫ mu0 (mu0 / mu1)^lambda dx
//! E2 = ∫ mu1 (mu1 / mu0)^lambda dx
//! mu0 = N(0, sigma^2),  mu1 = (1 - q) N(0, sigma^2) + q N(1, sigma^2)
//! ```
//!
//! and after `T` rounds the mechanism is `(eps, delta)`-DP with
//! `eps = min_lambda (T alpha(lambda) - ln delta) / lambda`.
//!
//! Both integrals are evaluated in log space with adaptive Gauss-Kronrod
//! quadrature, since `E2` overflows `f64` for large `lambda` and small `sigma`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default upper end of the integer moment grid.
pub const DEFAULT_LAMBDA_MAX: u32 = 64;
/// Default target `delta`.
pub const DEFAULT_DELTA: f64 = 1e-5;

const REL_TOL: f64 = 1e-12;
const MAX_PANELS: usize = 20_000;
const INITIAL_PANELS: usize = 64;
const SCAN_POINTS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountantQuery {
    pub sigma: f64,
    /// Fraction of clients sampled per round, `C`.
    pub sampling: f64,
    pub rounds: u64,
    pub delta: f64,
    pub lambda_max: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonBound {
    pub epsilon: f64,
    /// Moment order attaining the minimum.
    pub lambda: u32,
}

fn check_mechanism(sigma: f64, sampling: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::config(format!("sigma must be positive, got {sigma}")));
    }
    if !(0.0..=1.0).contains(&sampling) {
        return Err(Error::config(format!(
            "sampling fraction must lie in [0, 1], got {sampling}"
        )));
    }
    Ok(())
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + (-(a - b).abs()).exp().ln_1p()
}

/// Log-density ratio `log(mu1(x) / mu0(x))`.
#[inline]
fn log_ratio(x: f64, sigma: f64, log_q: f64, log_1mq: f64) -> f64 {
    log_add_exp(log_1mq, log_q + (2.0 * x - 1.0) / (2.0 * sigma * sigma))
}

#[inline]
fn log_normal_pdf(x: f64, sigma: f64) -> f64 {
    -x * x / (2.0 * sigma * sigma) - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

// Gauss-Kronrod 7/15 nodes and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One Gauss-Kronrod panel: (Kronrod estimate, |Kronrod - Gauss|).
fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

#[derive(Debug)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

/// Globally adaptive quadrature of `f` over `[a, b]`: the panel with the
/// largest error estimate is bisected until the summed error falls below
/// `rel_tol` times the summed value.
pub(crate) fn integrate(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    rel_tol: f64,
) -> std::result::Result<f64, (f64, f64, usize)> {
    let width = (b - a) / INITIAL_PANELS as f64;
    let mut panels: Vec<Panel> = (0..INITIAL_PANELS)
        .map(|i| {
            let pa = a + width * i as f64;
            let pb = if i + 1 == INITIAL_PANELS { b } else { pa + width };
            let (value, err) = gk15(&f, pa, pb);
            Panel { a: pa, b: pb, value, err }
        })
        .collect();
    loop {
        let total: f64 = panels.iter().map(|p| p.value).sum();
        let err: f64 = panels.iter().map(|p| p.err).sum();
        if err <= rel_tol * total.abs() {
            return Ok(total);
        }
        if panels.len() >= MAX_PANELS {
            return Err((total, err, panels.len()));
        }
        let (worst, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.err.total_cmp(&y.1.err))
            .unwrap();
        let p = panels.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        for (pa, pb) in [(p.a, mid), (mid, p.b)] {
            let (value, err) = gk15(&f, pa, pb);
            panels.push(Panel { a: pa, b: pb, value, err });
        }
    }
}

/// `ln ∫ exp(log_f(x)) dx` over `[a, b]`, scaled by the maximum of `log_f`
/// on a dense scan so the quadrature runs on values of order one.
fn log_integral(
    log_f: impl Fn(f64) -> f64 + Sync,
    a: f64,
    b: f64,
    label: &str,
) -> Result<f64> {
    let step = (b - a) / (SCAN_POINTS - 1) as f64;
    let peak = (0..SCAN_POINTS)
        .map(|i| log_f(a + step * i as f64))
        .fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(Error::Numeric(format!(
            "{label}: integrand peak is not finite ({peak})"
        )));
    }
    match integrate(|x| (log_f(x) - peak).exp(), a, b, REL_TOL) {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(peak + v.ln()),
        Ok(v) => Err(Error::Numeric(format!(
            "{label}: quadrature returned {v} on [{a}, {b}]"
        ))),
        Err((value, err, panels)) => Err(Error::Numeric(format!(
            "{label}: quadrature did not converge on [{a}, {b}] after {panels} panels \
             (estimate {value:e}, error {err:e}, scale exp({peak}))"
        ))),
    }
}

/// `(ln E1, ln E2)` for one moment order.
pub fn log_moment_integrals(lambda: u32, sigma: f64, sampling: f64) -> Result<(f64, f64)> {
    check_mechanism(sigma, sampling)?;
    if lambda == 0 {
        return Err(Error::config("moment order lambda must be at least 1"));
    }
    let lam = lambda as f64;
    let log_q = sampling.ln();
    let log_1mq = (-sampling).ln_1p();
    // The E2 integrand is a mixture of Gaussians centred on 0..=lambda+1 and
    // the E1 integrand one centred in [-lambda, 0]; both have width sigma, so
    // 12 sigma of margin leaves tails below 1e-32 of the total.
    let margin = 12.0 * sigma + 1.0;
    let (a, b) = (-(lam + 1.0) - margin, lam + 1.0 + margin);
    let label = format!("lambda={lambda}, sigma={sigma}, C={sampling}");

    let e1 = log_integral(
        |x| log_normal_pdf(x, sigma) - lam * log_ratio(x, sigma, log_q, log_1mq),
        a,
        b,
        &format!("E1 ({label})"),
    )?;
    let e2 = log_integral(
        |x| log_normal_pdf(x, sigma) + (lam + 1.0) * log_ratio(x, sigma, log_q, log_1mq),
        a,
        b,
        &format!("E2 ({label})"),
    )?;
    Ok((e1, e2))
}

/// Per-round log moment `alpha(lambda | C)`; never negative.
pub fn log_moment(lambda: u32, sigma: f64, sampling: f64) -> Result<f64> {
    check_mechanism(sigma, sampling)?;
    if sampling == 0.0 {
        if lambda == 0 {
            return Err(Error::config("moment order lambda must be at least 1"));
        }
        return Ok(0.0);
    }
    let (e1, e2) = log_moment_integrals(lambda, sigma, sampling)?;
    Ok(e1.max(e2).max(0.0))
}

/// Log moments for a fixed mechanism, precomputed on `1..=lambda_max` so
/// epsilon can be queried for any number of rounds.
#[derive(Debug, Clone)]
pub struct MomentsAccountant {
    sigma: f64,
    sampling: f64,
    log_moments: Vec<f64>,
}

impl MomentsAccountant {
    pub fn new(sigma: f64, sampling: f64, lambda_max: u32) -> Result<Self> {
        check_mechanism(sigma, sampling)?;
        if lambda_max == 0 {
            return Err(Error::config("lambda_max must be at least 1"));
        }
        let log_moments = (1..=lambda_max)
            .into_par_iter()
            .map(|l| log_moment(l, sigma, sampling))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sigma,
            sampling,
            log_moments,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn sampling(&self) -> f64 {
        self.sampling
    }

    /// `alpha(lambda)` for `lambda` in `1..=lambda_max`.
    pub fn log_moments(&self) -> &[f64] {
        &self.log_moments
    }

    pub fn epsilon(&self, rounds: u64, delta: f64) -> Result<EpsilonBound> {
        if rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::config(format!("delta must lie in (0, 1), got {delta}")));
        }
        let t = rounds as f64;
        let log_delta = delta.ln();
        let (epsilon, lambda) = self
            .log_moments
            .iter()
            .enumerate()
            .map(|(i, &alpha)| {
                let lam = (i + 1) as f64;
                ((t * alpha - log_delta) / lam, (i + 1) as u32)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        Ok(EpsilonBound { epsilon, lambda })
    }
}

pub fn epsilon(q: &AccountantQuery) -> Result<EpsilonBound> {
    MomentsAccountant::new(q.sigma, q.sampling, q.lambda_max)?.epsilon(q.rounds, q.delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kronrod_weights_integrate_polynomials() {
        let total: f64 = 2.0 * WGK[..7].iter().sum::<f64>() + WGK[7];
        assert!((total - 2.0).abs() < 1e-15);
        let gauss: f64 = 2.0 * WG[..3].iter().sum::<f64>() + WG[3];
        assert!((gauss - 2.0).abs() < 1e-15);
        // x^6 over [0, 2] is exact for both rules
        let (k, e) = gk15(&|x: f64| x.powi(6), 0.0, 2.0);
        assert!((k - 128.0 / 7.0).abs() < 1e-12 && e < 1e-10);
    }

    #[test]
    fn adaptive_quadrature_normal_density() {
        let v = integrate(|x| (-0.5 * x * x).exp(), -40.0, 40.0, 1e-13).unwrap();
        assert!((v - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_sampling_gives_zero_moment() {
        assert_eq!(log_moment(5, 1.0, 0.0).unwrap(), 0.0);
        let (e1, e2) = log_moment_integrals(5, 1.0, 0.0).unwrap();
        assert!(e1.abs() < 1e-12 && e2.abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        assert!(log_moment(0, 1.0, 0.1).is_err());
        assert!(log_moment(1, 0.0, 0.1).is_err());
        assert!(log_moment(1, 1.0, 1.5).is_err());
        let acc = MomentsAccountant::new(1.0, 0.01, 8).unwrap();
        assert!(acc.epsilon(0, 1e-5).is_err());
        assert!(acc.epsilon(10, 0.0).is_err());
        assert!(acc.epsilon(10, 1.0).is_err());
    }

    #[test]
    fn full_sampling_lambda_one_closed_form() {
        // q = 1: E2 = exp(lambda (lambda + 1) / (2 sigma^2)), E1 likewise.
        let s = 2.0;
        let (e1, e2) = log_moment_integrals(3, s, 1.0).unwrap();
        let want = 3.0 * 4.0 / (2.0 * s * s);
        assert!((e1 - want).abs() < 1e-9 && (e2 - want).abs() < 1e-9);
    }

    #[test]
    fn moments_are_nondecreasing_in_lambda() {
        let acc = MomentsAccountant::new(1.54, 1.0 / 60.0, 64).unwrap();
        for w in acc.log_moments().windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn epsilon_is_positive_with_minimizer_in_grid() {
        let b = epsilon(&AccountantQuery {
            sigma: 1.54,
            sampling: 1.0 / 60.0,
            rounds: 200,
            delta: 1e-5,
            lambda_max: 64,
        })
        .unwrap();
        assert!(b.epsilon > 0.0);
        assert!((1..=64).contains(&b.lambda));
    }
}
