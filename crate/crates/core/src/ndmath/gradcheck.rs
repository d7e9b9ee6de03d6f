//! Finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{CirError, Result};

/// Central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude below which errors are measured absolutely rather than
/// relative to the gradient.
pub const DEFAULT_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: DEFAULT_STEP,
            floor: DEFAULT_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, element)` at which the worst error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Elements whose ±step perturbation crossed a relu kink.
    pub skipped_kinks: usize,
}

impl GradCheck {
    /// Compares tape gradients of the scalar `f(inputs)` with central
    /// differences, element by element, over every input.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        check_finite(&tape, out)?;
        let base_kinks = tape.relu_signature();
        tape.backward(out)?;
        let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

        let eval = |perturbed: &[Tensor]| -> Result<(f64, Vec<bool>)> {
            let mut t = Tape::new();
            let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
            let o = f(&mut t, &vs)?;
            check_finite(&t, o)?;
            Ok((t.scalar_value(o), t.relu_signature()))
        };

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
            skipped_kinks: 0,
        };
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (ti, input) in inputs.iter().enumerate() {
            for k in 0..input.numel() {
                let x0 = input.data()[k];
                work[ti].data_mut()[k] = x0 + self.step;
                let (fp, kp) = eval(&work)?;
                work[ti].data_mut()[k] = x0 - self.step;
                let (fm, km) = eval(&work)?;
                work[ti].data_mut()[k] = x0;
                if kp != base_kinks || km != base_kinks {
                    report.skipped_kinks += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * self.step);
                let a = analytic[ti].data()[k];
                let denom = a.abs().max(numeric.abs()).max(self.floor);
                let rel = (a - numeric).abs() / denom;
                report.checked += 1;
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = rel;
                    report.worst = Some((ti, k));
                }
            }
        }
        Ok(report)
    }
}

/// [`GradCheck::run`] with the default step and floor.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    GradCheck::default().run(inputs, f)
}

fn check_finite(tape: &Tape, out: Var) -> Result<()> {
    if let Some(i) = tape.first_non_finite(out) {
        return Err(CirError::NonFinite(format!("tape node {i}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let c = tape.constant(Tensor::scalar(7.0));
        let zero = tape.scale(v, 0.0);
        let s = tape.sum(zero);
        let out = tape.add(s, c).unwrap();
        tape.backward(out).unwrap();
        assert!(tape.grad(v).unwrap().iter().all(|g| *g == 0.0));

        let r = gradcheck(&[x], |t, v| {
            let z = t.scale(v[0], 0.0);
            Ok(t.sum(z))
        })
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn relu_sum_away_from_zero() {
        let x = Tensor::vector(vec![0.7, -0.4, 1.9, -2.2, 0.05]);
        let r = gradcheck(&[x], |t, v| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.skipped_kinks, 0);
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let x = Tensor::vector(vec![1e-7, 1.0]);
        let r = gradcheck(&[x], |t, v| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        })
        .unwrap();
        assert_eq!(r.skipped_kinks, 1);
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::vector(vec![1000.0]);
        let err = gradcheck(&[x], |t, v| {
            let e = t.exp(v[0]);
            Ok(t.sum(e))
        })
        .unwrap_err();
        assert!(matches!(err, CirError::NonFinite(_)));
    }
}
