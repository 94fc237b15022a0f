//! Central finite-difference gradient checker, the oracle every tape
//! primitive is verified against.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::Tensor;

/// Value of a scalar computation plus a hash of all discrete branch decisions
/// taken while evaluating it (see `GradTape::branch_signature`).
pub struct EvalOutput {
    pub value: f64,
    pub branch_sig: u64,
}

impl EvalOutput {
    pub fn plain(value: f64) -> Self {
        EvalOutput {
            value,
            branch_sig: 0,
        }
    }
}

pub struct FdOptions {
    pub epsilon: f64,
    /// Check at most this many coordinates per parameter tensor, sampled
    /// deterministically from `seed`. None = all coordinates.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            epsilon: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because the ±ε evaluations took different branches
    /// (the perturbation interval straddles a kink or an argmax flip).
    pub skipped: usize,
}

/// Compares analytic gradients against central differences
/// (f(p+ε)−f(p−ε))/2ε per coordinate. Relative error uses a
/// max(|analytic|, |numeric|, 1e-8) denominator.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[Tensor]) -> Result<EvalOutput>,
    params: &[Tensor],
    analytic: &[Tensor],
    opts: &FdOptions,
) -> Result<FdReport> {
    if params.len() != analytic.len() {
        return Err(Error::InvalidArgument(
            "finite_diff_check: param/gradient count mismatch".into(),
        ));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    for pi in 0..params.len() {
        let n = params[pi].len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                all.truncate(k);
                all
            }
            _ => (0..n).collect(),
        };
        for ci in coords {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + opts.epsilon;
            let plus = f(&work)?;
            work[pi].data_mut()[ci] = orig - opts.epsilon;
            let minus = f(&work)?;
            work[pi].data_mut()[ci] = orig;
            if !plus.value.is_finite() || !minus.value.is_finite() {
                return Err(Error::NonFinite(
                    "finite_diff_check: non-finite evaluation".into(),
                ));
            }
            if plus.branch_sig != minus.branch_sig {
                skipped += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * opts.epsilon);
            let a = analytic[pi].data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(FdReport {
        max_rel_err: max_rel,
        checked,
        skipped,
    })
}
