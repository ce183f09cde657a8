use alloc::vec::Vec;

use rand::Rng;

use super::ParamStore;
use crate::error::invalid;
use crate::Result;

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, element)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates that only agreed at a refined step.
    pub refined: usize,
}

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is numerically zero compare on an absolute scale.
const REL_FLOOR: f64 = 1e-8;

/// Rounding error of one loss evaluation, in units of its last place.
const LOSS_ULPS: f64 = 4.0;

/// Largest error a central difference with step `h` can pick up from
/// rounding the two losses `plus` and `minus`.
pub fn roundoff_bound(plus: f64, minus: f64, h: f64) -> f64 {
    LOSS_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / h
}

/// Relative disagreement left after discounting rounding noise.
fn excess_error(analytic: f64, numeric: f64, noise: f64) -> f64 {
    ((analytic - numeric).abs() - noise).max(0.0) / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Picks up to `per_param` distinct coordinates from every parameter.
pub fn sample_coords<T>(params: &ParamStore<T>, per_param: usize, rng: &mut impl Rng) -> Vec<(usize, usize)>
where
    T: super::Real,
{
    let mut coords = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        let n = p.value.numel();
        if n <= per_param {
            coords.extend((0..n).map(|e| (pi, e)));
        } else {
            let picks = rand::seq::index::sample(rng, n, per_param);
            let mut picks = picks.into_vec();
            picks.sort_unstable();
            coords.extend(picks.into_iter().map(|e| (pi, e)));
        }
    }
    coords
}

/// Compares tape gradients against central differences.
///
/// `eval` must compute the loss at the current parameter values and, as a
/// side effect, back-propagate into `params`. It is called once for the
/// analytic gradient and twice per coordinate. Differences within the
/// rounding noise of the loss ([`roundoff_bound`]) do not count as error.
pub fn finite_diff_check<F>(
    params: &mut ParamStore<f64>,
    coords: &[(usize, usize)],
    epsilon: f64,
    eval: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>) -> Result<f64>,
{
    finite_diff_check_refined(params, coords, epsilon, 0, 0.0, eval)
}

/// [`finite_diff_check`] that retries a coordinate whose error is at least
/// `tolerance` with steps `epsilon / 10`, `epsilon / 100`, ... up to
/// `refinements` times and keeps the smallest error.
///
/// In networks with many ReLUs or max pools a step can carry some unit
/// across its kink, which spoils the difference at that step only; an
/// incorrect gradient disagrees at every step.
pub fn finite_diff_check_refined<F>(
    params: &mut ParamStore<f64>,
    coords: &[(usize, usize)],
    epsilon: f64,
    refinements: usize,
    tolerance: f64,
    mut eval: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>) -> Result<f64>,
{
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(invalid!("finite-difference epsilon must be positive, got {epsilon}"));
    }
    eval(params)?;
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(p, e)| params.get(p).grad.data()[e])
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: coords.len(),
        refined: 0,
    };
    for (&(p, e), &a) in coords.iter().zip(&analytic) {
        let original = params.get(p).value.data()[e];
        let mut best = f64::INFINITY;
        let mut h = epsilon;
        for attempt in 0..=refinements {
            params.get_mut(p).value.data_mut()[e] = original + h;
            let plus = eval(params)?;
            params.get_mut(p).value.data_mut()[e] = original - h;
            let minus = eval(params)?;
            params.get_mut(p).value.data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let err = excess_error(a, numeric, roundoff_bound(plus, minus, h));
            if err < best {
                best = err;
                if attempt > 0 && err < tolerance {
                    report.refined += 1;
                }
            }
            if best < tolerance {
                break;
            }
            h /= 10.0;
        }
        if best > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(best);
            report.worst = Some((p, e));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ParamKind, Parameter, Tape, Tensor};

    #[test]
    fn rejects_zero_epsilon() {
        let mut params = ParamStore::<f64>::new();
        let r = finite_diff_check(&mut params, &[], 0.0, |_| Ok(0.0));
        assert!(r.is_err());
    }

    #[test]
    fn linear_model_is_exact() {
        let mut params = ParamStore::new();
        let w = params
            .push(Parameter::new(
                "w",
                ParamKind::LinearWeight,
                Tensor::from_fn([3, 4], |i| (i as f64 * 0.37).sin()),
            ))
            .unwrap();
        let b = params
            .push(Parameter::new("b", ParamKind::LinearBias, Tensor::from_fn([3], |i| i as f64 * 0.1)))
            .unwrap();
        let x = Tensor::from_fn([2, 4], |i| (i as f64 * 0.7).cos());
        let proj = Tensor::from_fn([2, 3], |i| 1.0 + i as f64);
        let coords: Vec<_> = (0..12).map(|e| (w, e)).chain((0..3).map(|e| (b, e))).collect();
        let report = finite_diff_check(&mut params, &coords, 1e-3, |ps| {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let (wv, bv) = (tape.param(ps, w), tape.param(ps, b));
            let y = tape.linear(xv, wv, Some(bv))?;
            let loss = tape.weighted_sum(y, proj.clone())?;
            let value = tape.value(loss).data()[0];
            tape.backward(loss, ps)?;
            Ok(value)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    fn scalar_param(v: f64) -> ParamStore<f64> {
        let mut params = ParamStore::new();
        params.push(Parameter::new("w", ParamKind::Other, Tensor::scalar(v))).unwrap();
        params
    }

    #[test]
    fn wrong_gradient_fails_at_every_step() {
        let mut params = scalar_param(0.3);
        let report = finite_diff_check_refined(&mut params, &[(0, 0)], 1e-4, 3, 1e-4, |ps| {
            let w = ps.get(0).value.data()[0];
            ps.get_mut(0).grad = Tensor::scalar(2.02 * w);
            Ok(w * w)
        })
        .unwrap();
        assert!((report.max_rel_error - 0.01 / 1.01).abs() < 1e-6, "{report:?}");
        assert_eq!(report.refined, 0);
    }

    #[test]
    fn kink_inside_the_step_is_refined_away() {
        // |w - 0.3001| has its kink within 1e-3 of w = 0.3
        let mut params = scalar_param(0.3);
        let f = |ps: &mut ParamStore<f64>| {
            let w = ps.get(0).value.data()[0];
            ps.get_mut(0).grad = Tensor::scalar(-1.0);
            Ok((w - 0.3001).abs())
        };
        let coarse = finite_diff_check(&mut params, &[(0, 0)], 1e-3, f).unwrap();
        assert!(coarse.max_rel_error > 0.5, "{coarse:?}");
        let refined = finite_diff_check_refined(&mut params, &[(0, 0)], 1e-3, 2, 1e-4, f).unwrap();
        assert!(refined.max_rel_error < 1e-9, "{refined:?}");
        assert_eq!(refined.refined, 1);
    }

    #[test]
    fn rounding_noise_is_not_error() {
        // a gradient of 1e-9 on a loss near 1 is below what differences resolve
        let mut params = scalar_param(0.0);
        let report = finite_diff_check(&mut params, &[(0, 0)], 1e-6, |ps| {
            let w = ps.get(0).value.data()[0];
            ps.get_mut(0).grad = Tensor::scalar(1e-9);
            Ok(1.0 + 1e-9 * w + 1e-17)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(roundoff_bound(1.0, 1.0, 1e-6) < 1e-8);
    }
}
