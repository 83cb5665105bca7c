//! Scalar arithmetic shared by the plain and the taped dynamics. Both
//! backends perform the same IEEE operations in the same order, so a taped
//! rollout reproduces plain stepping bit for bit.

use crate::autodiff::{Tape, Var};
use crate::error::Result;

pub trait Arith {
    type V: Copy;

    fn add(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
    fn div(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
    fn sin(&mut self, a: Self::V) -> Result<Self::V>;
    fn cos(&mut self, a: Self::V) -> Result<Self::V>;
    fn square(&mut self, a: Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: Self::V, c: f64) -> Result<Self::V>;
    fn add_const(&mut self, a: Self::V, c: f64) -> Result<Self::V>;
    fn clamp(&mut self, a: Self::V, lo: f64, hi: f64) -> Result<Self::V>;
}

/// Plain `f64` evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Plain;

impl Arith for Plain {
    type V = f64;

    fn add(&mut self, a: f64, b: f64) -> Result<f64> {
        Ok(a + b)
    }
    fn sub(&mut self, a: f64, b: f64) -> Result<f64> {
        Ok(a - b)
    }
    fn mul(&mut self, a: f64, b: f64) -> Result<f64> {
        Ok(a * b)
    }
    fn div(&mut self, a: f64, b: f64) -> Result<f64> {
        Ok(a / b)
    }
    fn sin(&mut self, a: f64) -> Result<f64> {
        Ok(libm::sin(a))
    }
    fn cos(&mut self, a: f64) -> Result<f64> {
        Ok(libm::cos(a))
    }
    fn square(&mut self, a: f64) -> Result<f64> {
        Ok(a * a)
    }
    fn scale(&mut self, a: f64, c: f64) -> Result<f64> {
        Ok(a * c)
    }
    fn add_const(&mut self, a: f64, c: f64) -> Result<f64> {
        Ok(a + c)
    }
    fn clamp(&mut self, a: f64, lo: f64, hi: f64) -> Result<f64> {
        Ok(a.clamp(lo, hi))
    }
}

/// Column-wise evaluation on a tape; every value is a `[batch, 1]` node.
pub struct Taped<'a> {
    pub tape: &'a mut Tape,
}

impl Arith for Taped<'_> {
    type V = Var;

    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tape.add(a, b)
    }
    fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tape.sub(a, b)
    }
    fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tape.mul(a, b)
    }
    fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tape.div(a, b)
    }
    fn sin(&mut self, a: Var) -> Result<Var> {
        self.tape.sin(a)
    }
    fn cos(&mut self, a: Var) -> Result<Var> {
        self.tape.cos(a)
    }
    fn square(&mut self, a: Var) -> Result<Var> {
        self.tape.square(a)
    }
    fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.tape.scale(a, c)
    }
    fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.tape.add_scalar(a, c)
    }
    fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.tape.clip(a, lo, hi)
    }
}
