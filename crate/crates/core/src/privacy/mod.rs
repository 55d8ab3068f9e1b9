//! Client-level differential privacy: clipping, distributed Gaussian noise,
//! sensitivity calibration and the moments accountant.

pub mod accountant;
mod calibrate;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::compression::CompressedUpdate;
use crate::error::{Error, Result};

pub use accountant::{
    epsilon, log_moment, log_moment_integrals, AccountantQuery, EpsilonBound, MomentsAccountant,
};
pub use calibrate::{calibrate_sensitivity, median, Calibration};

fn check_sensitivity(s: f64) -> Result<()> {
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::config(format!("clipping bound S must be positive, got {s}")));
    }
    Ok(())
}

/// Scales `update` down to L2 norm at most `s`. Updates already inside the
/// ball are returned unchanged, bit for bit.
pub fn clip(update: &CompressedUpdate, s: f64) -> Result<CompressedUpdate> {
    check_sensitivity(s)?;
    let norm = update.l2_norm();
    if norm <= s {
        return Ok(update.clone());
    }
    let mut factor = s / norm;
    loop {
        let out = CompressedUpdate::new(update.values().iter().map(|v| v * factor).collect());
        // rounding can leave the result a few ulps outside the ball
        if out.l2_norm() <= s {
            return Ok(out);
        }
        factor *= 1.0 - 4.0 * f64::EPSILON;
    }
}

/// Adds i.i.d. `N(0, (s * sigma / sqrt(num_selected))^2)` noise to every
/// coordinate, so the sum over `num_selected` clients carries noise of
/// standard deviation `s * sigma`.
pub fn add_client_noise(
    update: &CompressedUpdate,
    s: f64,
    sigma: f64,
    num_selected: usize,
    seed: u64,
) -> Result<CompressedUpdate> {
    check_sensitivity(s)?;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::config(format!("sigma must be positive, got {sigma}")));
    }
    if num_selected == 0 {
        return Err(Error::config("number of selected clients must be at least 1"));
    }
    let std = s * sigma / (num_selected as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(CompressedUpdate::new(
        update
            .values()
            .iter()
            .map(|v| v + normal.sample(&mut rng))
            .collect(),
    ))
}
