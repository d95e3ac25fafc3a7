//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default step for central differences.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Compare analytic gradients of a scalar expression against central finite
/// differences over every entry of every leaf. Returns the maximum relative
/// error `|analytic - numeric| / max(1, |analytic|)`.
///
/// The builder must be pure: called repeatedly with perturbed leaves.
pub fn grad_check<F>(build: F, leaves: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars)?;
        let val = tape.value(root);
        if !val.is_scalar() {
            return Err(Error::NonScalarRoot {
                got: val.shape().to_vec(),
            });
        }
        Ok(val.item())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    if !tape.value(root).is_scalar() {
        return Err(Error::NonScalarRoot {
            got: tape.value(root).shape().to_vec(),
        });
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .enumerate()
        .map(|(i, t)| grads.take(vars[i], t.shape()))
        .collect();

    let mut max_rel: f64 = 0.0;
    let mut work: Vec<Tensor> = leaves.to_vec();
    for li in 0..leaves.len() {
        for e in 0..leaves[li].len() {
            let orig = leaves[li].data()[e];
            work[li].data_mut()[e] = orig + h;
            let fp = eval(&work)?;
            work[li].data_mut()[e] = orig - h;
            let fm = eval(&work)?;
            work[li].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[li].data()[e];
            let rel = (a - numeric).abs() / f64::max(1.0, a.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
