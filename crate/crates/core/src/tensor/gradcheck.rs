//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, shuffle};
use crate::tensor::params::{ParamId, ParamSet};
use crate::tensor::tape::{NodeId, Tape};

/// Coordinates sampled per tensor (all of them when the tensor is smaller).
pub const GRADCHECK_COORDS: usize = 64;

/// Denominator floor of the relative error, per unit of loss magnitude.
/// Central differences carry round-off of about `eps * |f| / h`, so gradients
/// smaller than `RELATIVE_ERROR_FLOOR * max(1, |f|)` cannot be resolved and
/// are judged by absolute error against that floor instead of by noise ratios.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and coordinate of the worst agreement.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares the tape gradient of `f` against `(f(θ+h) − f(θ−h)) / 2h` on a
/// seeded sample of coordinates from each parameter in `ids` (all parameters
/// when `ids` is empty).
///
/// `f` records a scalar loss onto the given tape and returns its node.
pub fn gradient_check<F>(params: &mut ParamSet<f64>, ids: &[ParamId], mut f: F, h: f64, seed: u64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_, f64>) -> Result<NodeId>,
{
    let ids: Vec<ParamId> = if ids.is_empty() {
        params.ids().collect()
    } else {
        ids.to_vec()
    };
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        let value = tape.value(loss).item();
        check_finite(value, "loss")?;
        (tape.backward(loss)?, value)
    };
    let (analytic, value) = analytic;
    let floor = RELATIVE_ERROR_FLOOR * value.abs().max(1.0);
    let mut eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new(ps);
        let loss = f(&mut tape)?;
        let v = tape.value(loss).item();
        check_finite(v, "perturbed loss")?;
        Ok(v)
    };
    let mut rng = rng_from_seed(seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for id in ids {
        let n = params.get(id).len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > GRADCHECK_COORDS {
            shuffle(&mut coords, &mut rng);
            coords.truncate(GRADCHECK_COORDS);
        }
        for c in coords {
            let a = analytic.get(id).map_or(0.0, |g| g.data()[c]);
            let orig = params.get(id).data()[c];
            params.get_mut(id).data_mut()[c] = orig + h;
            let plus = eval(params);
            params.get_mut(id).data_mut()[c] = orig - h;
            let minus = eval(params);
            params.get_mut(id).data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            check_finite(rel, params.name(id))?;
            report.coords_checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some((params.name(id).to_string(), c));
            }
        }
    }
    Ok(report)
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
