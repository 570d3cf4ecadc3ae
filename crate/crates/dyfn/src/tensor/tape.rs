//! Reverse-mode gradient tape over a define-by-run graph.
//!
//! A [`GradTape`] records one primitive node per operation; [`GradTape::backward`]
//! replays the nodes in reverse insertion order with a fixed accumulation
//! order, so gradients are bit-identical across runs. A tape is confined to
//! one thread (`RefCell` inside); run independent tapes in parallel instead.

use std::cell::RefCell;

use super::Tensor;

pub type NodeId = usize;

type BackFn = Box<dyn Fn(&Tensor, &mut Sink<'_>)>;

struct Node {
    grad_flows: bool,
    backward: Option<BackFn>,
}

/// Gradient accumulator handed to backward closures.
pub struct Sink<'a> {
    flows: &'a [bool],
    grads: &'a mut [Option<Tensor>],
}

impl Sink<'_> {
    /// Whether any leaf is reachable through `id`; closures skip computing
    /// contributions nobody needs.
    pub fn wants(&self, id: NodeId) -> bool {
        self.flows[id]
    }

    pub fn add(&mut self, id: NodeId, contribution: Tensor) {
        if !self.flows[id] {
            return;
        }
        self.grads[id] = Some(match self.grads[id].take() {
            None => contribution,
            Some(existing) => existing.add(&contribution).expect("gradient shape"),
        });
    }
}

#[derive(Default)]
pub struct GradTape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of one scalar output with respect to every reachable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when the loss does not reach it.
    pub fn wrt_or_zeros(&self, v: &Var<'_>) -> Tensor {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value.shape()))
    }
}

/// A tensor tracked on a tape.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t GradTape,
    id: NodeId,
    value: Tensor,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, grad_flows: bool, backward: Option<BackFn>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            grad_flows,
            backward,
        });
        nodes.len() - 1
    }

    /// A trainable leaf: gradients are collected for it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.push(true, None);
        Var {
            tape: self,
            id,
            value,
        }
    }

    /// A constant: gradients never flow into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push(false, None);
        Var {
            tape: self,
            id,
            value,
        }
    }

    /// Reverse sweep from a scalar output. Deterministic: nodes are visited
    /// in reverse insertion order and contributions accumulate in call order.
    pub fn backward(&self, output: &Var<'_>) -> Gradients {
        assert!(
            output.value.is_scalar(),
            "backward from non-scalar {:?}",
            output.value.shape()
        );
        let nodes = self.nodes.borrow();
        let flows: Vec<bool> = nodes.iter().map(|n| n.grad_flows).collect();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(output.value.shape(), 1.0));
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            if let Some(back) = nodes[id].backward.as_ref() {
                let mut sink = Sink {
                    flows: &flows,
                    grads: &mut grads,
                };
                back(&g, &mut sink);
            }
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t GradTape {
        self.tape
    }

    /// Same value, no gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value.clone())
    }

    fn unary(&self, value: Tensor, back: impl Fn(&Tensor, &mut Sink<'_>) + 'static) -> Var<'t> {
        let flows = self.flows();
        let id = self
            .tape
            .push(flows, if flows { Some(Box::new(back)) } else { None });
        Var {
            tape: self.tape,
            id,
            value,
        }
    }

    fn flows(&self) -> bool {
        self.tape.nodes.borrow()[self.id].grad_flows
    }

    fn binary(
        &self,
        other: &Var<'t>,
        value: Tensor,
        back: impl Fn(&Tensor, &mut Sink<'_>) + 'static,
    ) -> Var<'t> {
        let flows = self.flows() || other.flows();
        let id = self
            .tape
            .push(flows, if flows { Some(Box::new(back)) } else { None });
        Var {
            tape: self.tape,
            id,
            value,
        }
    }

    /// Elementwise sum; `other` may be a scalar broadcast over `self`.
    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        let value = self.value.add(&other.value).expect("add shapes");
        let (a, b) = (self.id, other.id);
        let b_scalar = other.value.is_scalar() && !self.value.is_scalar();
        self.binary(other, value, move |g, sink| {
            if sink.wants(a) {
                sink.add(a, g.clone());
            }
            if sink.wants(b) {
                sink.add(b, if b_scalar { Tensor::scalar(g.sum()) } else { g.clone() });
            }
        })
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        let value = self.value.sub(&other.value).expect("sub shapes");
        let (a, b) = (self.id, other.id);
        let b_scalar = other.value.is_scalar() && !self.value.is_scalar();
        self.binary(other, value, move |g, sink| {
            if sink.wants(a) {
                sink.add(a, g.clone());
            }
            if sink.wants(b) {
                let gb = if b_scalar {
                    Tensor::scalar(-g.sum())
                } else {
                    g.scale(-1.0)
                };
                sink.add(b, gb);
            }
        })
    }

    /// Elementwise product; `other` may be a scalar broadcast over `self`.
    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        let value = self.value.mul(&other.value).expect("mul shapes");
        let (a, b) = (self.id, other.id);
        let av = self.value.clone();
        let bv = other.value.clone();
        let b_scalar = other.value.is_scalar() && !self.value.is_scalar();
        self.binary(other, value, move |g, sink| {
            if sink.wants(a) {
                sink.add(a, g.mul(&bv).expect("mul grad"));
            }
            if sink.wants(b) {
                let gb = if b_scalar {
                    Tensor::scalar(g.mul(&av).expect("mul grad").sum())
                } else {
                    g.mul(&av).expect("mul grad")
                };
                sink.add(b, gb);
            }
        })
    }

    pub fn div(&self, other: &Var<'t>) -> Var<'t> {
        let value = self.value.div(&other.value).expect("div shapes");
        let (a, b) = (self.id, other.id);
        let av = self.value.clone();
        let bv = other.value.clone();
        let b_scalar = other.value.is_scalar() && !self.value.is_scalar();
        self.binary(other, value, move |g, sink| {
            if sink.wants(a) {
                sink.add(a, g.div(&bv).expect("div grad"));
            }
            if sink.wants(b) {
                // d(a/b)/db = -a / b^2
                let full = g
                    .mul(&av)
                    .and_then(|t| t.div(&bv))
                    .and_then(|t| t.div(&bv))
                    .expect("div grad")
                    .scale(-1.0);
                let gb = if b_scalar {
                    Tensor::scalar(full.sum())
                } else {
                    full
                };
                sink.add(b, gb);
            }
        })
    }

    /// Elementwise atan2(self, other): self supplies y, other supplies x.
    pub fn atan2(&self, other: &Var<'t>) -> Var<'t> {
        let value = self.value.zip(&other.value, f64::atan2).expect("atan2 shapes");
        let (a, b) = (self.id, other.id);
        let yv = self.value.clone();
        let xv = other.value.clone();
        self.binary(other, value, move |g, sink| {
            let denom = yv
                .zip(&xv, |y, x| y * y + x * x)
                .expect("atan2 grad");
            if sink.wants(a) {
                let ga = g
                    .mul(&xv)
                    .and_then(|t| t.div(&denom))
                    .expect("atan2 grad");
                sink.add(a, ga);
            }
            if sink.wants(b) {
                let gb = g
                    .mul(&yv)
                    .and_then(|t| t.div(&denom))
                    .expect("atan2 grad")
                    .scale(-1.0);
                sink.add(b, gb);
            }
        })
    }

    pub fn neg(&self) -> Var<'t> {
        let id = self.id;
        self.unary(self.value.scale(-1.0), move |g, sink| {
            sink.add(id, g.scale(-1.0));
        })
    }

    /// |x| with subgradient 0 at the kink.
    pub fn abs(&self) -> Var<'t> {
        let id = self.id;
        let xv = self.value.clone();
        self.unary(self.value.map(f64::abs), move |g, sink| {
            let sign = xv.map(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            sink.add(id, g.mul(&sign).expect("abs grad"));
        })
    }

    pub fn exp(&self) -> Var<'t> {
        let y = self.value.map(f64::exp);
        let yv = y.clone();
        let id = self.id;
        self.unary(y, move |g, sink| {
            sink.add(id, g.mul(&yv).expect("exp grad"));
        })
    }

    /// sqrt with a flat derivative once the argument underflows, so masked
    /// zero entries do not poison the sweep with infinities.
    pub fn sqrt(&self) -> Var<'t> {
        let y = self.value.map(f64::sqrt);
        let yv = y.clone();
        let id = self.id;
        self.unary(y, move |g, sink| {
            let d = yv.map(|v| if v > 1e-150 { 0.5 / v } else { 0.0 });
            sink.add(id, g.mul(&d).expect("sqrt grad"));
        })
    }

    pub fn tanh(&self) -> Var<'t> {
        let y = self.value.map(f64::tanh);
        let yv = y.clone();
        let id = self.id;
        self.unary(y, move |g, sink| {
            let d = yv.map(|v| 1.0 - v * v);
            sink.add(id, g.mul(&d).expect("tanh grad"));
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let y = self.value.map(|v| 1.0 / (1.0 + (-v).exp()));
        let yv = y.clone();
        let id = self.id;
        self.unary(y, move |g, sink| {
            let d = yv.map(|v| v * (1.0 - v));
            sink.add(id, g.mul(&d).expect("sigmoid grad"));
        })
    }

    pub fn softplus(&self) -> Var<'t> {
        // ln(1 + e^x), computed stably
        let y = self.value.map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        let xv = self.value.clone();
        let id = self.id;
        self.unary(y, move |g, sink| {
            let d = xv.map(|v| 1.0 / (1.0 + (-v).exp()));
            sink.add(id, g.mul(&d).expect("softplus grad"));
        })
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let id = self.id;
        self.unary(self.value.scale(s), move |g, sink| {
            sink.add(id, g.scale(s));
        })
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let id = self.id;
        self.unary(self.value.add_scalar(s), move |g, sink| {
            sink.add(id, g.clone());
        })
    }

    /// Multiply by an untracked tensor (mask, weight map).
    pub fn mul_plain(&self, t: &Tensor) -> Var<'t> {
        let value = self.value.mul(t).expect("mul_plain shapes");
        let tv = t.clone();
        let id = self.id;
        self.unary(value, move |g, sink| {
            sink.add(id, g.mul(&tv).expect("mul_plain grad"));
        })
    }

    /// Add an untracked tensor (bias map, negated target).
    pub fn add_plain(&self, t: &Tensor) -> Var<'t> {
        let value = self.value.add(t).expect("add_plain shapes");
        let id = self.id;
        self.unary(value, move |g, sink| {
            sink.add(id, g.clone());
        })
    }

    /// Subtract an untracked tensor.
    pub fn sub_plain(&self, t: &Tensor) -> Var<'t> {
        self.add_plain(&t.scale(-1.0))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let value = Tensor::new(shape.to_vec(), self.value.data().to_vec()).expect("reshape size");
        let id = self.id;
        let orig = self.value.shape().to_vec();
        self.unary(value, move |g, sink| {
            sink.add(
                id,
                Tensor::new(orig.clone(), g.data().to_vec()).expect("reshape grad"),
            );
        })
    }

    /// Weighted full reduction: sum(self * w) with untracked weights.
    pub fn sum_weighted(&self, w: &Tensor) -> Var<'t> {
        let value = Tensor::scalar(self.value.mul(w).expect("sum_weighted shapes").sum());
        let wv = w.clone();
        let id = self.id;
        self.unary(value, move |g, sink| {
            sink.add(id, wv.scale(g.item()));
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let value = Tensor::scalar(self.value.sum());
        let shape = self.value.shape().to_vec();
        let id = self.id;
        self.unary(value, move |g, sink| {
            sink.add(id, Tensor::full(&shape, g.item()));
        })
    }

    pub fn conv2d(&self, kernel: &Var<'t>) -> Var<'t> {
        let value = self.value.conv2d(&kernel.value).expect("conv2d shapes");
        let (a, b) = (self.id, kernel.id);
        let input = self.value.clone();
        let ker = kernel.value.clone();
        self.binary(kernel, value, move |g, sink| {
            if sink.wants(a) {
                sink.add(a, Tensor::conv2d_input_grad(g, &ker, input.shape()));
            }
            if sink.wants(b) {
                sink.add(b, Tensor::conv2d_kernel_grad(g, &input, ker.shape()));
            }
        })
    }

    pub fn concat_channels(&self, other: &Var<'t>) -> Var<'t> {
        let value = self
            .value
            .concat_channels(&other.value)
            .expect("concat shapes");
        let (a, b) = (self.id, other.id);
        let c0 = self.value.shape()[0];
        let c1 = other.value.shape()[0];
        self.binary(other, value, move |g, sink| {
            if sink.wants(a) {
                sink.add(a, g.slice_channels(0, c0).expect("concat grad"));
            }
            if sink.wants(b) {
                sink.add(b, g.slice_channels(c0, c0 + c1).expect("concat grad"));
            }
        })
    }

    pub fn slice_channels(&self, start: usize, end: usize) -> Var<'t> {
        let value = self.value.slice_channels(start, end).expect("slice shapes");
        let id = self.id;
        let shape = self.value.shape().to_vec();
        self.unary(value, move |g, sink| {
            let plane = shape[1] * shape[2];
            let mut full = vec![0.0; shape.iter().product()];
            full[start * plane..end * plane].copy_from_slice(g.data());
            sink.add(id, Tensor::new(shape.clone(), full).unwrap());
        })
    }

    pub fn shift_spatial(&self, dy: i64, dx: i64) -> Var<'t> {
        let value = self.value.shift_spatial(dy, dx).expect("shift shapes");
        let id = self.id;
        self.unary(value, move |g, sink| {
            sink.add(id, g.shift_spatial(-dy, -dx).expect("shift grad"));
        })
    }

    pub fn broadcast_channels(&self, h: usize, w: usize) -> Var<'t> {
        let value = self
            .value
            .broadcast_channels(h, w)
            .expect("broadcast shapes");
        let id = self.id;
        self.unary(value, move |g, sink| {
            sink.add(id, g.sum_spatial().expect("broadcast grad"));
        })
    }

    pub fn sum_spatial(&self) -> Var<'t> {
        let value = self.value.sum_spatial().expect("sum_spatial shapes");
        let id = self.id;
        let (h, w) = (self.value.shape()[1], self.value.shape()[2]);
        self.unary(value, move |g, sink| {
            sink.add(id, g.broadcast_channels(h, w).expect("sum_spatial grad"));
        })
    }

    /// Channel-wise mean and population std of a `C x H x W` var, composed
    /// from primitives so gradients flow through both statistics.
    pub fn channel_stats(&self, _eps_unused: f64) -> (Var<'t>, Var<'t>) {
        let (_, h, w) = match self.value.shape() {
            [c, h, w] => (*c, *h, *w),
            s => panic!("channel_stats on shape {s:?}"),
        };
        let inv_n = 1.0 / (h * w) as f64;
        let mu = self.sum_spatial().scale(inv_n);
        let centered = self.sub(&mu.broadcast_channels(h, w));
        let var = centered.mul(&centered).sum_spatial().scale(inv_n);
        let sigma = var.sqrt();
        (mu, sigma)
    }
}
