use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use super::Module;
use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::ParamMap;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense layer `y = x w + b` with `w: [in, out]` and `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Uniform fan-in initialization on `[-1/sqrt(in), 1/sqrt(in)]`.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let w = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out));
        let b = Tensor::matrix(1, fan_out, draw(fan_out));
        Linear { w, b }
    }
}

/// ReLU multilayer perceptron with a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`.
    pub fn new(sizes: &[usize], rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidTensor("MLP without layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].w.cols() != pair[1].w.rows() {
                return Err(Error::Shape {
                    op: "mlp",
                    lhs: pair[0].w.shape().to_vec(),
                    rhs: pair[1].w.shape().to_vec(),
                });
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.layers.len() + 1);
        s.push(self.layers[0].w.rows());
        s.extend(self.layers.iter().map(|l| l.w.cols()));
        s
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].w.cols()
    }

    /// Places the parameters on `tape`, as gradient leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.w.clone()), tape.param(l.b.clone()))
                } else {
                    (tape.constant(l.w.clone()), tape.constant(l.b.clone()))
                }
            })
            .collect();
        BoundMlp { layers }
    }

    /// Tape-free forward pass.
    pub fn forward_value(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = net.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    fn to_params(&self) -> ParamMap {
        let mut m = ParamMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            m.insert(format!("l{i}.w"), l.w.clone());
            m.insert(format!("l{i}.b"), l.b.clone());
        }
        m
    }

    fn load_params(&mut self, map: &ParamMap) -> Result<()> {
        let mut loaded = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let w = map.require_shaped(&format!("l{i}.w"), l.w.shape())?;
            let b = map.require_shaped(&format!("l{i}.b"), l.b.shape())?;
            loaded.push(Linear { w, b });
        }
        self.layers = loaded;
        Ok(())
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    /// Rebuilds from handles laid out as `[w0, b0, w1, b1, ..]`.
    pub fn from_vars(vars: &[Var]) -> Self {
        assert!(
            vars.len() >= 2 && vars.len() % 2 == 0,
            "expected weight/bias pairs"
        );
        BoundMlp {
            layers: vars.chunks(2).map(|c| (c[0], c[1])).collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Parameter handles in [`Module::params`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}
