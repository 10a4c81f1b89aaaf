//! Parameterized layers and parameter traversal.

use std::fmt::Display;
use std::sync::Mutex;

use crate::numerics::{init, Conv2dSpec, Float, Result, RngState, RunningStats, Tensor};

/// Forward-pass mode. Training enables dropout and batch statistics.
pub enum Phase<'a> {
    Eval,
    Train(&'a mut RngState),
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }

    /// Inverted dropout with drop probability `p`; identity in eval mode.
    pub fn dropout<T: Float>(&mut self, x: &Tensor<T>, p: f64) -> Result<Tensor<T>> {
        match self {
            Phase::Train(rng) if p > 0.0 => {
                let keep: Vec<bool> = (0..x.numel()).map(|_| !rng.bernoulli(p)).collect();
                x.dropout(&keep, p)
            }
            _ => Ok(x.clone()),
        }
    }
}

/// What a traversal sees at each leaf.
pub enum Slot<'a, T: Float> {
    Param(&'a mut Tensor<T>),
    Stats(&'a mut RunningStats),
}

/// Walks parameters and running statistics under dotted paths such as
/// `decoder.layers.0.ffn.w1.weight`. Traversal order is fixed per
/// architecture.
pub struct Visitor<'f, T: Float> {
    path: Vec<String>,
    f: &'f mut dyn FnMut(&str, Slot<'_, T>),
}

impl<'f, T: Float> Visitor<'f, T> {
    pub fn new(f: &'f mut dyn FnMut(&str, Slot<'_, T>)) -> Self {
        Visitor { path: Vec::new(), f }
    }

    fn full(&self, name: &str) -> String {
        let mut p = self.path.join(".");
        if !p.is_empty() {
            p.push('.');
        }
        p.push_str(name);
        p
    }

    pub fn scope(&mut self, name: impl Display, body: impl FnOnce(&mut Self)) {
        self.path.push(name.to_string());
        body(self);
        self.path.pop();
    }

    pub fn param(&mut self, name: &str, t: &mut Tensor<T>) {
        let p = self.full(name);
        (self.f)(&p, Slot::Param(t));
    }

    pub fn stats(&mut self, name: &str, s: &mut RunningStats) {
        let p = self.full(name);
        (self.f)(&p, Slot::Stats(s));
    }
}

pub trait Module<T: Float> {
    fn visit(&mut self, v: &mut Visitor<'_, T>);

    /// `(path, tensor)` for every parameter, in traversal order.
    fn named_params(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let mut f = |p: &str, s: Slot<'_, T>| {
            if let Slot::Param(t) = s {
                out.push((p.to_string(), t.clone()));
            }
        };
        self.visit(&mut Visitor::new(&mut f));
        out
    }

    fn num_params(&mut self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn zero_grad(&mut self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }
}

/// `y = x W + b` with `W[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<T: Float = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Float> Linear<T> {
    pub fn new(rng: &mut RngState, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Ok(Linear {
            weight: init::fan_in_uniform(rng, &[d_in, d_out], d_in)?,
            bias: if bias { Some(init::zeros(&[d_out])?) } else { None },
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn visit(&mut self, v: &mut Visitor<'_, T>) {
        v.param("weight", &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.param("bias", b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Float = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub spec: Conv2dSpec,
}

impl<T: Float> Conv2d<T> {
    pub fn new(rng: &mut RngState, c_in: usize, c_out: usize, kernel: usize, spec: Conv2dSpec, bias: bool) -> Result<Self> {
        Ok(Conv2d {
            weight: init::fan_in_uniform(rng, &[c_out, c_in, kernel, kernel], c_in * kernel * kernel)?,
            bias: if bias { Some(init::zeros(&[c_out])?) } else { None },
            spec,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.spec)
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn visit(&mut self, v: &mut Visitor<'_, T>) {
        v.param("weight", &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.param("bias", b);
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
pub struct BatchNorm2d<T: Float = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: Mutex<RunningStats>,
}

impl<T: Float> Clone for BatchNorm2d<T> {
    fn clone(&self) -> Self {
        BatchNorm2d {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running: Mutex::new(self.running.lock().expect("running stats lock").clone()),
        }
    }
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: init::ones(&[channels])?,
            beta: init::zeros(&[channels])?,
            running: Mutex::new(RunningStats::new(channels)),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, phase: &Phase<'_>) -> Result<Tensor<T>> {
        x.batch_norm2d(&self.gamma, &self.beta, &self.running, phase.is_train(), BN_MOMENTUM, BN_EPS)
    }
}

impl<T: Float> Module<T> for BatchNorm2d<T> {
    fn visit(&mut self, v: &mut Visitor<'_, T>) {
        v.param("gamma", &mut self.gamma);
        v.param("beta", &mut self.beta);
        v.stats("running", self.running.get_mut().expect("running stats lock"));
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm<T: Float = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Float> LayerNorm<T> {
    pub fn new(d: usize) -> Result<Self> {
        Ok(LayerNorm { gamma: init::ones(&[d])?, beta: init::zeros(&[d])? })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }
}

impl<T: Float> Module<T> for LayerNorm<T> {
    fn visit(&mut self, v: &mut Visitor<'_, T>) {
        v.param("gamma", &mut self.gamma);
        v.param("beta", &mut self.beta);
    }
}
