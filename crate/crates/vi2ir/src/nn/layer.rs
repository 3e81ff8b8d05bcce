use super::act::{leaky_relu, leaky_relu_backward, tanh_range, tanh_range_backward};
use super::conv::{Conv2d, ConvTranspose2d};
use super::norm::InstanceNorm2d;
use super::param::{Grads, Params};
use super::Tensor;

/// One step of a feed-forward stack.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    ConvT(ConvTranspose2d),
    InstNorm(InstanceNorm2d),
    Relu,
    LeakyRelu(f64),
    /// tanh rescaled onto (lo, hi).
    TanhRange(f64, f64),
}

impl Layer {
    pub fn forward(&self, ps: Params, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv(c) => c.forward(ps, x),
            Layer::ConvT(c) => c.forward(ps, x),
            Layer::InstNorm(n) => n.forward(ps, x),
            Layer::Relu => leaky_relu(x, 0.0),
            Layer::LeakyRelu(s) => leaky_relu(x, *s),
            Layer::TanhRange(lo, hi) => tanh_range(x, *lo, *hi),
        }
    }

    /// `x` is the same input the forward pass saw for this layer.
    pub fn backward(&self, ps: Params, gs: &mut Grads, x: &Tensor, gy: &Tensor) -> Tensor {
        match self {
            Layer::Conv(c) => c.backward(ps, gs, x, gy),
            Layer::ConvT(c) => c.backward(ps, gs, x, gy),
            Layer::InstNorm(n) => n.backward(ps, gs, x, gy),
            Layer::Relu => leaky_relu_backward(x, gy, 0.0),
            Layer::LeakyRelu(s) => leaky_relu_backward(x, gy, *s),
            Layer::TanhRange(lo, hi) => tanh_range_backward(x, gy, *lo, *hi),
        }
    }
}

/// Inputs seen by each layer of a stack during one forward pass, recorded so
/// the backward pass can replay without global caches (forwards stay pure).
pub type StackTrace = Vec<Tensor>;

/// A plain sequence of layers.
#[derive(Debug, Clone, Default)]
pub struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn new(layers: Vec<Layer>) -> Self {
        Stack { layers }
    }

    pub fn forward(&self, ps: Params, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward(ps, &cur);
        }
        cur
    }

    pub fn forward_trace(&self, ps: Params, x: &Tensor) -> (Tensor, StackTrace) {
        let mut trace = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for l in &self.layers {
            let next = l.forward(ps, &cur);
            trace.push(cur);
            cur = next;
        }
        (cur, trace)
    }

    pub fn backward(&self, ps: Params, gs: &mut Grads, trace: &StackTrace, gy: &Tensor) -> Tensor {
        debug_assert_eq!(trace.len(), self.layers.len());
        let mut g = gy.clone();
        for (l, x) in self.layers.iter().zip(trace.iter()).rev() {
            g = l.backward(ps, gs, x, &g);
        }
        g
    }
}

/// Residual block: y = x + body(x). Body must preserve shape.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub body: Stack,
}

impl ResBlock {
    pub fn forward(&self, ps: Params, x: &Tensor) -> Tensor {
        let y = self.body.forward(ps, x);
        x + &y
    }

    pub fn forward_trace(&self, ps: Params, x: &Tensor) -> (Tensor, StackTrace) {
        let (y, trace) = self.body.forward_trace(ps, x);
        (x + &y, trace)
    }

    pub fn backward(&self, ps: Params, gs: &mut Grads, trace: &StackTrace, gy: &Tensor) -> Tensor {
        let g_body = self.body.backward(ps, gs, trace, gy);
        gy + &g_body
    }
}

/// A chain of residual blocks.
#[derive(Debug, Clone, Default)]
pub struct ResChain {
    pub blocks: Vec<ResBlock>,
}

impl ResChain {
    pub fn forward(&self, ps: Params, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for b in &self.blocks {
            cur = b.forward(ps, &cur);
        }
        cur
    }

    pub fn forward_trace(&self, ps: Params, x: &Tensor) -> (Tensor, Vec<StackTrace>) {
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for b in &self.blocks {
            let (next, t) = b.forward_trace(ps, &cur);
            traces.push(t);
            cur = next;
        }
        (cur, traces)
    }

    pub fn backward(
        &self,
        ps: Params,
        gs: &mut Grads,
        traces: &[StackTrace],
        gy: &Tensor,
    ) -> Tensor {
        let mut g = gy.clone();
        for (b, t) in self.blocks.iter().zip(traces.iter()).rev() {
            g = b.backward(ps, gs, t, &g);
        }
        g
    }
}
