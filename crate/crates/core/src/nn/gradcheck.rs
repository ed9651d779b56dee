use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParameterSet, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error so that vanishing gradients
/// compare in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// finite differences on up to `coords_per_param` random coordinates of each
/// parameter.
pub fn grad_check<F>(
    params: &ParameterSet,
    f: F,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let grads = {
        let mut t = Tape::new(params);
        let loss = f(&mut t)?;
        t.backward(loss)?
    };
    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut t = Tape::inference(p);
        let loss = f(&mut t)?;
        let v = t.scalar(loss);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "grad_check" })
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (id, p) in params.iter() {
        let n = p.value.len();
        let picks: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, coords_per_param).into_vec()
        };
        for idx in picks {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[idx]);
            let orig = p.value.data()[idx];
            work.get_mut(id).value.data_mut()[idx] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[idx] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((p.name.clone(), idx));
            }
        }
    }
    Ok(report)
}

/// Redraws every parameter uniformly from `[-bound, bound]`.
///
/// Small initial weights leave maxout pairs nearly tied, where central
/// differences straddle the kink; checks are more informative at a generic
/// point.
pub fn randomize(params: &mut ParameterSet, bound: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for v in params.get_mut(id).value.data_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Group, Mat};

    #[test]
    fn quadratic_at_three() {
        let mut p = ParameterSet::new();
        let id = p.add("x", Group::QgCore, Mat::scalar(3.0)).unwrap();
        let r = grad_check(
            &p,
            |t| {
                let x = t.param(id);
                t.mul(x, x)
            },
            1e-4,
            1,
            0,
        )
        .unwrap();
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_err * 6.0 < 1e-6, "{r:?}");
    }
}
