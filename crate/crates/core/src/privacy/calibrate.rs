//! Sensitivity calibration: the server simulates one client round on public
//! data and uses the resulting update norm as the clipping bound `S`.

use crate::compression::{self, IndexSet};
use crate::error::{Error, Result};
use crate::federation::client::{client_start, local_update, LocalTraining};
use crate::federation::scheme::{SchemeSpec, Selection};
use crate::nn::{ArchSpec, Batch, WeightVector};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub sensitivity: f64,
    /// Norm of every simulated update, in trial order.
    pub norms: Vec<f64>,
}

/// Median, averaging the two middle values for even-length input.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// Runs one local round from `w0` on the public batch under the scheme's
/// masking rule and returns the L2 norm of the compressed update.
///
/// Fixed-set schemes use `fixed_set` (or every coordinate for
/// [`Selection::All`]) and require `trials == 1`. Schemes that redraw a
/// random set each round draw `trials` sets of size `k` and report the median.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_sensitivity(
    arch: &ArchSpec,
    spec: &SchemeSpec,
    w0: &WeightVector,
    public: &Batch,
    fixed_set: Option<&IndexSet>,
    k: usize,
    train: &LocalTraining,
    trials: usize,
    seed: u64,
) -> Result<Calibration> {
    let n = arch.param_count();
    let one = |set: &IndexSet, trial: u64| -> Result<f64> {
        let start = client_start(w0, w0, set, spec)?;
        let update = local_update(
            arch,
            public,
            &start,
            w0,
            set,
            spec,
            train,
            seed::derive(seed, &[trial]),
        )?;
        Ok(update.l2_norm())
    };

    let norms = if spec.per_round_selection() {
        if trials == 0 {
            return Err(Error::config("calibration needs at least one trial"));
        }
        (0..trials as u64)
            .map(|t| {
                let set = compression::select_random(n, k, seed::derive(seed, &[t, 1]))?;
                one(&set, t)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        if trials != 1 {
            return Err(Error::config(format!(
                "fixed-set schemes calibrate with a single trial, got {trials}"
            )));
        }
        let full;
        let set = match (spec.selection, fixed_set) {
            (Selection::All, _) => {
                full = IndexSet::full(n);
                &full
            }
            (_, Some(set)) => set,
            (_, None) => {
                return Err(Error::config("fixed-set scheme needs its index set to calibrate"))
            }
        };
        vec![one(set, 0)?]
    };
    let sensitivity = median(&norms).unwrap();
    Ok(Calibration { sensitivity, norms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::scheme::{Scheme, SchemeName};
    use crate::nn::{init_model, Activation, Loss, Matrix};

    fn setup() -> (ArchSpec, WeightVector, Batch) {
        let arch = ArchSpec::mlp(&[4, 6, 3], Activation::Relu, Loss::CrossEntropy).unwrap();
        let w0 = init_model(&arch, 2);
        let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let mut y = vec![0.0; 30];
        for r in 0..10 {
            y[r * 3 + r % 3] = 1.0;
        }
        let b = Batch::new(Matrix::new(10, 4, x).unwrap(), Matrix::new(10, 3, y).unwrap()).unwrap();
        (arch, w0, b)
    }

    fn train() -> LocalTraining {
        LocalTraining {
            iterations: 5,
            learning_rate: 0.1,
            batch_size: 5,
        }
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn fixed_set_is_deterministic() {
        let (arch, w0, b) = setup();
        let spec = Scheme::new(SchemeName::FlTop, true).spec();
        let set = IndexSet::new(vec![0, 5, 30, 40], arch.param_count()).unwrap();
        let c1 = calibrate_sensitivity(&arch, &spec, &w0, &b, Some(&set), 4, &train(), 1, 3).unwrap();
        let c2 = calibrate_sensitivity(&arch, &spec, &w0, &b, Some(&set), 4, &train(), 1, 3).unwrap();
        assert_eq!(c1, c2);
        assert!(c1.sensitivity > 0.0);
        assert!(calibrate_sensitivity(&arch, &spec, &w0, &b, Some(&set), 4, &train(), 2, 3).is_err());
        assert!(calibrate_sensitivity(&arch, &spec, &w0, &b, None, 4, &train(), 1, 3).is_err());
    }

    #[test]
    fn full_model_calibration() {
        let (arch, w0, b) = setup();
        let spec = Scheme::new(SchemeName::FlStd, true).spec();
        let c = calibrate_sensitivity(&arch, &spec, &w0, &b, None, 0, &train(), 1, 3).unwrap();
        let local = crate::nn::sgd(&arch, &b, &w0, 5, 0.1, 5, seed::derive(3, &[0])).unwrap();
        let want = local.sub(&w0).unwrap().l2_norm();
        assert_eq!(c.sensitivity, want);
    }

    #[test]
    fn random_scheme_median_within_sample_range() {
        let (arch, w0, b) = setup();
        let spec = Scheme::new(SchemeName::FlBasic, true).spec();
        let c = calibrate_sensitivity(&arch, &spec, &w0, &b, None, 10, &train(), 100, 5).unwrap();
        assert_eq!(c.norms.len(), 100);
        let lo = c.norms.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = c.norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= c.sensitivity && c.sensitivity <= hi);
        assert!(hi > lo);
    }
}
