//! Per-step modality embedding: a two-layer MLP applied to every temporal
//! step independently, so output length always equals input length.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    /// Skips the nonlinearity; only useful for testing.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `input × hidden`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `hidden × output`
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: Activation,
}

impl EncoderParams {
    /// Gaussian weights scaled by `1/√fan_in`, zero biases.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w1: Tensor::randn(input, hidden, 1.0 / (input as f64).sqrt(), rng),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::randn(hidden, output, 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(1, output),
            activation: Activation::Tanh,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.w1"), self.w1.clone()),
            (format!("{prefix}.b1"), self.b1.clone()),
            (format!("{prefix}.w2"), self.w2.clone()),
            (format!("{prefix}.b2"), self.b2.clone()),
        ]
    }
}

/// Graph handles for one encoder's parameters.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub activation: Activation,
}

impl EncoderVars {
    pub fn constants(g: &mut Graph, p: &EncoderParams) -> Self {
        Self {
            w1: g.constant(p.w1.clone()),
            b1: g.constant(p.b1.clone()),
            w2: g.constant(p.w2.clone()),
            b2: g.constant(p.b2.clone()),
            activation: p.activation,
        }
    }
}

/// `act(x W1 + b1) W2 + b2`, row by row.
pub fn encode_on(g: &mut Graph, x: Var, p: &EncoderVars) -> Result<Var> {
    let width = g.value(p.w1).rows();
    let got = g.value(x).cols();
    if got != width {
        return Err(Error::dim("encode", width, got));
    }
    if g.value(x).rows() == 0 {
        return Err(Error::dim("encode", "T >= 1", 0));
    }
    let h = g.matmul(x, p.w1)?;
    let h = g.add_row(h, p.b1)?;
    let h = match p.activation {
        Activation::Tanh => g.tanh(h),
        Activation::Identity => h,
    };
    let y = g.matmul(h, p.w2)?;
    g.add_row(y, p.b2)
}

fn encode(x: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = EncoderVars::constants(&mut g, params);
    let xv = g.constant(x.clone());
    let y = encode_on(&mut g, xv, &p)?;
    Ok(g.value(y).clone())
}

/// `T×d_src → T×C`
pub fn encode_source(x: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    encode(x, params)
}

/// `T×d_tgt → T×D`
pub fn encode_target(x: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    encode(x, params)
}
