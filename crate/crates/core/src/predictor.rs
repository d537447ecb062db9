//! Predictor abstraction: anything mapping an image `[1,H,W]` to a
//! probability map `[C,H,W]` on the graph. The trainable network lives in
//! [`crate::segnet`]; this module holds the trait plus small implementations
//! used by tests, verification and instrumentation.

use std::cell::Cell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait Predictor<S: Scalar> {
    fn classes(&self) -> usize;

    /// Insert the predictor's parameters as graph leaves (empty for
    /// parameterless predictors).
    fn bind(&self, g: &mut Graph<S>, requires_grad: bool) -> Vec<Var>;

    /// Forward pass on the graph. `params` must come from [`bind`] on the
    /// same graph.
    fn forward(&self, g: &mut Graph<S>, params: &[Var], x: Var) -> Result<Var>;

    /// Eager inference on a fresh graph.
    fn predict(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let params = self.bind(&mut g, false);
        let out = self.forward(&mut g, &params, xv)?;
        Ok(g.value(out).clone())
    }
}

/// Ignores its input and returns a fixed map (zero-gradient edge cases).
pub struct ConstantPredictor<S> {
    pub output: Tensor<S>,
}

impl<S: Scalar> Predictor<S> for ConstantPredictor<S> {
    fn classes(&self) -> usize {
        self.output.dims()[0]
    }

    fn bind(&self, _g: &mut Graph<S>, _requires_grad: bool) -> Vec<Var> {
        Vec::new()
    }

    fn forward(&self, g: &mut Graph<S>, _params: &[Var], _x: Var) -> Result<Var> {
        Ok(g.constant(self.output.clone()))
    }
}

/// Fixed random two-layer convolutional predictor. Cheap enough for the
/// finite-difference suite yet genuinely input-dependent.
pub struct TinyPredictor<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    classes: usize,
}

impl<S: Scalar> TinyPredictor<S> {
    pub fn new(classes: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 0.8;
        TinyPredictor {
            w1: Tensor::from_fn(&[hidden, 1, 3, 3], |_| S::c(rng.gen_range(-scale..scale))),
            b1: Tensor::from_fn(&[hidden], |_| S::c(rng.gen_range(-0.1..0.1))),
            w2: Tensor::from_fn(&[classes, hidden, 3, 3], |_| S::c(rng.gen_range(-scale..scale))),
            b2: Tensor::from_fn(&[classes], |_| S::c(rng.gen_range(-0.1..0.1))),
            classes,
        }
    }
}

impl<S: Scalar> Predictor<S> for TinyPredictor<S> {
    fn classes(&self) -> usize {
        self.classes
    }

    fn bind(&self, g: &mut Graph<S>, requires_grad: bool) -> Vec<Var> {
        vec![
            g.leaf(self.w1.clone(), requires_grad),
            g.leaf(self.b1.clone(), requires_grad),
            g.leaf(self.w2.clone(), requires_grad),
            g.leaf(self.b2.clone(), requires_grad),
        ]
    }

    fn forward(&self, g: &mut Graph<S>, params: &[Var], x: Var) -> Result<Var> {
        let h = g.conv2d(x, params[0], params[1])?;
        let a = g.silu(h);
        let logits = g.conv2d(a, params[2], params[3])?;
        g.softmax(logits)
    }
}

/// Counts forward passes through an inner predictor (the efficiency
/// instrumentation for chain-vs-combination comparisons).
pub struct CountingPredictor<'a, S: Scalar, P: Predictor<S>> {
    inner: &'a P,
    forwards: Cell<usize>,
    _marker: std::marker::PhantomData<S>,
}

impl<'a, S: Scalar, P: Predictor<S>> CountingPredictor<'a, S, P> {
    pub fn new(inner: &'a P) -> Self {
        CountingPredictor {
            inner,
            forwards: Cell::new(0),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward_count(&self) -> usize {
        self.forwards.get()
    }

    pub fn reset(&self) {
        self.forwards.set(0);
    }
}

impl<'a, S: Scalar, P: Predictor<S>> Predictor<S> for CountingPredictor<'a, S, P> {
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    fn bind(&self, g: &mut Graph<S>, requires_grad: bool) -> Vec<Var> {
        self.inner.bind(g, requires_grad)
    }

    fn forward(&self, g: &mut Graph<S>, params: &[Var], x: Var) -> Result<Var> {
        self.forwards.set(self.forwards.get() + 1);
        self.inner.forward(g, params, x)
    }
}
