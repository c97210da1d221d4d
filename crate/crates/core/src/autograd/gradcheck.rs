//! Central finite-difference oracle for tape gradients.
//!
//! The error metric is `|analytic − numeric| / max(1, |numeric|)`, maximized
//! over the checked coordinates.
//!
//! Piecewise-smooth functions (ReLU) can put a kink inside the difference
//! interval, where the central difference measures neither one-sided slope.
//! A coordinate that disagrees with the analytic value is therefore probed
//! with half the step; if the two slopes differ, the function is not smooth
//! on the interval and the slope is re-measured with steps 10 and, if needed,
//! 100 times smaller. A wrong analytic gradient still fails at the smaller
//! step.

use rand::seq::index::sample;
use rand::Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    /// Coordinates re-measured with a smaller step because of a kink.
    pub kinks: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            coords_checked: 0,
            kinks: 0,
        }
    }

    fn record(&mut self, coord: (usize, usize), analytic: f64, (numeric, kink): (f64, bool)) {
        let err = rel_error(analytic, numeric);
        self.coords_checked += 1;
        self.kinks += kink as usize;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some(coord);
        }
    }

    /// Combines two reports, keeping the worse one's location.
    pub fn merge(mut self, other: GradCheckReport) -> Self {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.coords_checked += other.coords_checked;
        self.kinks += other.kinks;
        self
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Disagreement below which a coordinate is accepted without a kink probe.
const PROBE_ABOVE: f64 = 1e-5;
/// Relative slope change between steps `h` and `h / 2` taken as a kink;
/// well above the rounding noise of the composite checks.
const KINK_SLOPE_CHANGE: f64 = 1e-5;

/// Numeric slope of `f` at `x` (see the module docs), and whether a kink was
/// detected.
fn slope(
    mut f: impl FnMut(f64) -> Result<f64>,
    x: f64,
    step: f64,
    analytic: f64,
) -> Result<(f64, bool)> {
    let mut central = |h: f64| -> Result<f64> { Ok((f(x + h)? - f(x - h)?) / (2.0 * h)) };
    let coarse = central(step)?;
    if rel_error(analytic, coarse) <= PROBE_ABOVE {
        return Ok((coarse, false));
    }
    let mut h = step;
    let mut value = coarse;
    let mut half = central(h / 2.0)?;
    let mut kink = false;
    // shrink the interval until it no longer contains a kink
    while (value - half).abs() > KINK_SLOPE_CHANGE * value.abs().max(1.0) && h > step / 100.0 {
        kink = true;
        h /= 10.0;
        value = central(h)?;
        half = central(h / 2.0)?;
    }
    Ok((value, kink))
}

fn finite(v: f64, context: &str, index: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
            index,
        })
    }
}

fn eval_inputs<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Checks every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    grad_check_at(f, inputs, step, &coords)
}

/// Checks the listed `(input, flat index)` coordinates.
pub fn grad_check_at<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    finite(tape.value(out).item()?, "grad_check forward", 0)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt_or_zero(*v)).collect();

    let mut report = GradCheckReport::empty();
    let mut work = inputs.to_vec();
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        let a = analytic[i].data()[j];
        let numeric = slope(
            |x| {
                work[i].data_mut()[j] = x;
                finite(eval_inputs(&f, &work)?, "grad_check perturbed", j)
            },
            orig,
            step,
            a,
        )?;
        work[i].data_mut()[j] = orig;
        report.record((i, j), a, numeric);
    }
    Ok(report)
}

/// Checks parameter gradients of a loss built from a [`ParamSet`].
/// Coordinates are `(parameter name, flat index)`; the report's input index is
/// the position in `coords`.
pub fn grad_check_params<F>(
    params: &ParamSet,
    f: F,
    step: f64,
    coords: &[(String, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, p)?;
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    finite(tape.value(out).item()?, "grad_check forward", 0)?;
    let grads = tape.backward(out)?.param_grads(params);

    let mut report = GradCheckReport::empty();
    let mut work = params.clone();
    for (k, (name, j)) in coords.iter().enumerate() {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.clone()))?
            .data()[*j];
        let orig = work.get(name).expect("checked above").data()[*j];
        let numeric = slope(
            |x| {
                work.get_mut(name)?.data_mut()[*j] = x;
                finite(eval(&work)?, name, *j)
            },
            orig,
            step,
            analytic,
        )?;
        work.get_mut(name)?.data_mut()[*j] = orig;
        report.record((k, *j), analytic, numeric);
    }
    Ok(report)
}

/// Picks up to `per_param` random coordinates from every parameter (all of
/// them for small tensors).
pub fn sample_param_coords<R: Rng + ?Sized>(
    params: &ParamSet,
    per_param: usize,
    rng: &mut R,
) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (name, t) in params.iter() {
        let n = t.numel();
        if n <= per_param {
            out.extend((0..n).map(|j| (name.clone(), j)));
        } else {
            let mut idx = sample(rng, n, per_param).into_vec();
            idx.sort_unstable();
            out.extend(idx.into_iter().map(|j| (name.clone(), j)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let r = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.0))),
            &[Tensor::from_fn([3], |i| i as f64)],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.coords_checked, 3);
    }

    #[test]
    fn non_finite_is_reported_with_coordinate() {
        // exp overflows once the perturbation pushes past ~709.8
        let err = grad_check(
            |t, v| {
                let e = t.exp(v[0]);
                Ok(t.sum(e))
            },
            &[Tensor::new([2], vec![0.0, 709.78]).unwrap()],
            0.1,
        )
        .unwrap_err();
        match err {
            Error::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kink_inside_the_step_is_remeasured() {
        // relu kink 3e-7 away from the point, inside the 1e-6 step but outside 1e-7
        let r = grad_check(
            |t, v| {
                let shifted = t.add_scalar(v[0], 3e-7);
                let y = t.relu(shifted);
                Ok(t.sum(y))
            },
            &[Tensor::scalar(0.0)],
            1e-6,
        )
        .unwrap();
        assert_eq!(r.kinks, 1);
        assert!(r.max_rel_error < 1e-12, "{r:?}");
    }

    #[test]
    fn wrong_gradient_still_fails_after_probe() {
        struct Doubled;
        impl crate::autograd::CustomBackward for Doubled {
            fn name(&self) -> &'static str {
                "doubled"
            }
            fn backward(
                &self,
                _inputs: &[&Tensor],
                _out: &Tensor,
                grad: &[f64],
            ) -> Vec<Option<Vec<f64>>> {
                vec![Some(grad.iter().map(|g| 2.0 * g).collect())]
            }
        }
        let r = grad_check(
            |t, v| {
                let value = t.value(v[0]).clone();
                Ok(t.custom(&[v[0]], value, Box::new(Doubled)))
            },
            &[Tensor::scalar(0.5)],
            1e-6,
        )
        .unwrap();
        assert_eq!(r.kinks, 0);
        assert!((r.max_rel_error - 1.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
