use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Central finite-difference check of reverse-mode gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// numerically zero compare in absolute terms.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per parameter tensor.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

impl GradCheck {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheck {
            tolerance,
            ..GradCheck::default()
        }
    }

    pub fn rel_error(&self, analytic: f64, numeric: f64) -> f64 {
        let denom = libm::fabs(analytic)
            .max(libm::fabs(numeric))
            .max(self.floor);
        libm::fabs(analytic - numeric) / denom
    }

    /// Compares `backward` against central differences for every entry of
    /// every parameter. `f` builds a scalar from trainable leaves and must be
    /// deterministic.
    pub fn run<F>(&self, f: F, params: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let grads = tape.backward(root)?;

        let eval = |ps: &[Tensor]| -> Result<f64> {
            let mut t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
            let r = f(&mut t, &vs)?;
            Ok(t.value(r).item())
        };

        let mut work: Vec<Tensor> = params.to_vec();
        let mut max_rel_error = Vec::with_capacity(params.len());
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[pi], p);
            let mut worst: f64 = 0.0;
            for j in 0..p.len() {
                let orig = p.data()[j];
                work[pi].data_mut()[j] = orig + self.eps;
                let up = eval(&work)?;
                work[pi].data_mut()[j] = orig - self.eps;
                let down = eval(&work)?;
                work[pi].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * self.eps);
                worst = worst.max(self.rel_error(analytic.data()[j], numeric));
            }
            max_rel_error.push(worst);
        }
        Ok(GradCheckReport {
            max_rel_error,
            tolerance: self.tolerance,
        })
    }
}
