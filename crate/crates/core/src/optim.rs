//! Full-batch gradient descent with a step-halving guard.

use crate::error::Result;
use crate::numkernel::Scalar;

/// A bundle of parameter tensors that also serves as its own gradient type.
pub trait ParamSet<T: Scalar>: Clone {
    /// `self += s * other`, tensor by tensor.
    fn axpy(&mut self, s: T, other: &Self);

    /// Largest absolute entry over all tensors.
    fn max_abs(&self) -> T;
}

pub const MAX_HALVINGS: usize = 20;
const GROWTH: f64 = 1.25;

/// Gradient descent whose step is halved (up to [`MAX_HALVINGS`] times) until
/// the loss does not increase. A rejected step leaves the parameters alone, so
/// the loss sequence is non-increasing.
///
/// The gradient is divided by its largest absolute entry, so the learning rate
/// bounds how far any single parameter moves in one step regardless of how the
/// loss is weighted. The accepted step size carries over to the next step and
/// grows by 25% after each success, capped at the base learning rate.
#[derive(Clone, Debug)]
pub struct GuardedDescent<T> {
    base: T,
    lr: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome<T> {
    pub loss: T,
    pub accepted: bool,
}

impl<T: Scalar> GuardedDescent<T> {
    pub fn new(lr: T) -> Self {
        GuardedDescent { base: lr, lr }
    }

    pub fn current_lr(&self) -> T {
        self.lr
    }

    /// Tries `params - lr * grad / max|grad|`; `loss_at` evaluates candidates.
    /// `loss0` is the loss at the current parameters.
    pub fn step<P, F>(
        &mut self,
        params: &mut P,
        grad: &P,
        loss0: T,
        mut loss_at: F,
    ) -> Result<StepOutcome<T>>
    where
        P: ParamSet<T>,
        F: FnMut(&P) -> Result<T>,
    {
        let half = T::of(0.5);
        let gmax = grad.max_abs();
        if !(gmax > T::zero()) || !gmax.is_finite() {
            return Ok(StepOutcome {
                loss: loss0,
                accepted: false,
            });
        }
        let mut lr = self.lr;
        for _ in 0..=MAX_HALVINGS {
            let mut cand = params.clone();
            cand.axpy(-lr / gmax, grad);
            // Overflow in a trial point only means the step is too long.
            let trial = loss_at(&cand).ok().filter(|l| l.is_finite());
            if let Some(loss) = trial {
                if loss <= loss0 {
                    *params = cand;
                    self.lr = (lr * T::of(GROWTH)).min(self.base);
                    return Ok(StepOutcome {
                        loss,
                        accepted: true,
                    });
                }
            }
            lr *= half;
        }
        self.lr = lr;
        Ok(StepOutcome {
            loss: loss0,
            accepted: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug)]
    struct P(f64);

    impl ParamSet<f64> for P {
        fn axpy(&mut self, s: f64, other: &Self) {
            self.0 += s * other.0;
        }

        fn max_abs(&self) -> f64 {
            self.0.abs()
        }
    }

    #[test]
    fn quadratic_converges_and_never_increases() {
        // f(x) = 1000 x^2 from x = 3 with unit-length trial steps.
        let mut opt = GuardedDescent::new(1.0);
        let mut x = P(3.0);
        let mut prev = 1000.0 * 9.0;
        for _ in 0..200 {
            let g = P(2000.0 * x.0);
            let f0 = 1000.0 * x.0 * x.0;
            let out = opt
                .step(&mut x, &g, f0, |p| Ok(1000.0 * p.0 * p.0))
                .unwrap();
            assert!(out.loss <= prev);
            prev = out.loss;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn rejected_step_keeps_params() {
        let mut opt = GuardedDescent::new(1.0);
        let mut x = P(1.0);
        // Gradient pointing uphill: every trial is worse.
        let out = opt.step(&mut x, &P(-1.0), 1.0, |p| Ok(p.0 * p.0)).unwrap();
        assert!(!out.accepted);
        assert_eq!(x.0, 1.0);
        assert_eq!(out.loss, 1.0);
    }
}
