//! Tape-based reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records every operation whose inputs require gradients.
//! Values flow through the program as [`Var`]s, which carry their forward
//! value plus an optional node id on the tape. Untracked vars (constants,
//! or anything computed on a [`Tape::no_grad`] tape) record nothing, so
//! inference runs through the exact same layer code without retaining
//! intermediates.
//!
//! Gradients of leaves persist on the tape and accumulate across repeated
//! [`Tape::backward`] calls until [`Tape::zero_grad`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

/// A value produced during a forward pass, optionally tracked on a tape.
#[derive(Clone, Debug)]
pub struct Var<T: Float = f32> {
    node: Option<usize>,
    value: Tensor<T>,
}

impl<T: Float> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    /// True when gradients can flow back through this var.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node
    }
}

/// Maps the upstream gradient to one gradient per parent. The mask tells
/// which parents are tracked; untracked slots may be returned as `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    op: &'static str,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    grad: Option<Tensor<T>>,
}

pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    recording: bool,
    params: HashMap<usize, usize>,
    trace: Vec<usize>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    /// A recording tape for training or gradient checks.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            params: HashMap::new(),
            trace: Vec::new(),
        }
    }

    /// A tape that records nothing; every var it produces is untracked.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_name(&self, id: usize) -> Option<&'static str> {
        self.nodes.get(id).map(|n| n.op)
    }

    /// Node ids in the order the last backward pass visited them.
    pub fn backward_trace(&self) -> &[usize] {
        &self.trace
    }

    pub fn constant(&self, value: &Tensor<T>) -> Var<T> {
        Var {
            node: None,
            value: value.clone(),
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        if !requires_grad || !self.recording {
            return Var { node: None, value };
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: "leaf",
            parents: Vec::new(),
            backward: None,
            grad: None,
        });
        Var {
            node: Some(id),
            value,
        }
    }

    /// A trainable parameter. Binding the same storage twice yields the same
    /// leaf, so shared parameters accumulate one gradient.
    pub fn param(&mut self, value: &Tensor<T>) -> Var<T> {
        if !self.recording {
            return self.constant(value);
        }
        let key = value.storage_id();
        if let Some(&id) = self.params.get(&key) {
            return Var {
                node: Some(id),
                value: value.clone(),
            };
        }
        let var = self.leaf(value.clone(), true);
        self.params.insert(key, var.node.expect("recording leaf"));
        var
    }

    pub(crate) fn record(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        if !self.recording || parents.iter().all(|p| p.node.is_none()) {
            return Var { node: None, value };
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            parents: parents.iter().map(|p| p.node).collect(),
            backward: Some(Box::new(backward)),
            grad: None,
        });
        Var {
            node: Some(id),
            value,
        }
    }

    /// Back-propagate from a scalar (1×1×1×1) loss. Leaf gradients
    /// accumulate into whatever is already stored.
    pub fn backward(&mut self, loss: &Var<T>) -> Result<()> {
        if !loss.shape().is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a 1x1x1x1 loss, got {}",
                loss.shape()
            )));
        }
        let root = loss
            .node
            .ok_or_else(|| Error::contract("loss does not depend on any tracked leaf"))?;
        self.trace.clear();
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        pending[root] = Some(Tensor::ones(Shape::SCALAR));
        for id in (0..=root).rev() {
            let Some(upstream) = pending[id].take() else {
                continue;
            };
            self.trace.push(id);
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                let node = &mut self.nodes[id];
                node.grad = Some(match node.grad.take() {
                    Some(acc) => add_same(&acc, &upstream),
                    None => upstream,
                });
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let grads = backward(&upstream, &mask);
            debug_assert_eq!(
                grads.len(),
                node.parents.len(),
                "{} backward arity",
                node.op
            );
            for (parent, grad) in node.parents.iter().zip(grads) {
                if let (Some(p), Some(g)) = (parent, grad) {
                    pending[*p] = Some(match pending[*p].take() {
                        Some(acc) => add_same(&acc, &g),
                        None => g,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn grad(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|id| self.nodes[id].grad.as_ref())
    }

    /// Gradient of a parameter previously bound with [`Tape::param`].
    pub fn param_grad(&self, value: &Tensor<T>) -> Option<&Tensor<T>> {
        self.params
            .get(&value.storage_id())
            .and_then(|&id| self.nodes[id].grad.as_ref())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }
}

fn add_same<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_parts(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect(),
    )
}

/// Apply `f(a[i], b[j])` where `b` is broadcast over `a`'s shape.
pub(crate) fn broadcast_zip<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let s = a.shape();
    if s == b.shape() {
        return Tensor::from_parts(
            s,
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        );
    }
    let bs = b.shape().strides(true);
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(s.numel());
    let mut i = 0;
    for n in 0..s.batch {
        for c in 0..s.channels {
            for h in 0..s.height {
                let row = n * bs[0] + c * bs[1] + h * bs[2];
                for w in 0..s.width {
                    out.push(f(ad[i], bd[row + w * bs[3]]));
                    i += 1;
                }
            }
        }
    }
    Tensor::from_parts(s, out)
}

/// Sum `grad` (shaped like the broadcast output) down to `target`.
pub(crate) fn reduce_to<T: Float>(grad: &Tensor<T>, target: Shape) -> Tensor<T> {
    let s = grad.shape();
    if s == target {
        return grad.clone();
    }
    let ts = target.strides(true);
    let mut acc = vec![0.0f64; target.numel()];
    let gd = grad.data();
    let mut i = 0;
    for n in 0..s.batch {
        for c in 0..s.channels {
            for h in 0..s.height {
                let row = n * ts[0] + c * ts[1] + h * ts[2];
                for w in 0..s.width {
                    acc[row + w * ts[3]] += gd[i].as_f64();
                    i += 1;
                }
            }
        }
    }
    Tensor::from_parts(target, acc.into_iter().map(T::lit).collect())
}

fn check_broadcast<T: Float>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape().accepts_broadcast(&b.shape()) {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        })
    }
}

fn check_same<T: Float>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        })
    }
}

impl<T: Float> Tape<T> {
    /// `a + b`, with `b` broadcast over singleton axes of `a`.
    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        check_broadcast("add", a, b)?;
        let out = broadcast_zip(&a.value, &b.value, |x, y| x + y);
        let b_shape = b.shape();
        Ok(self.record("add", out, &[a, b], move |g, mask| {
            vec![
                mask[0].then(|| g.clone()),
                mask[1].then(|| reduce_to(g, b_shape)),
            ]
        }))
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        check_broadcast("sub", a, b)?;
        let out = broadcast_zip(&a.value, &b.value, |x, y| x - y);
        let b_shape = b.shape();
        Ok(self.record("sub", out, &[a, b], move |g, mask| {
            vec![
                mask[0].then(|| g.clone()),
                mask[1].then(|| reduce_to(&g.map(|v| -v), b_shape)),
            ]
        }))
    }

    /// Elementwise product, `b` broadcast over `a`.
    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        check_broadcast("mul", a, b)?;
        let out = broadcast_zip(&a.value, &b.value, |x, y| x * y);
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record("mul", out, &[a, b], move |g, mask| {
            vec![
                mask[0].then(|| broadcast_zip(g, &bv, |gi, y| gi * y)),
                mask[1].then(|| {
                    let ga = Tensor::from_parts(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(av.data())
                            .map(|(&gi, &x)| gi * x)
                            .collect(),
                    );
                    reduce_to(&ga, bv.shape())
                }),
            ]
        }))
    }

    /// `a / b` where `b != 0`, and 0 (with zero gradient) where `b == 0`.
    pub fn div_or_zero(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        check_same("div_or_zero", a, b)?;
        let out = a.value.zip_map(
            &b.value,
            |x, y| if y == T::zero() { T::zero() } else { x / y },
        )?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record("div_or_zero", out, &[a, b], move |g, mask| {
            let n = g.len();
            let (gd, ad, bd) = (g.data(), av.data(), bv.data());
            let da = mask[0].then(|| {
                Tensor::from_parts(
                    g.shape(),
                    (0..n)
                        .map(|i| {
                            if bd[i] == T::zero() {
                                T::zero()
                            } else {
                                gd[i] / bd[i]
                            }
                        })
                        .collect(),
                )
            });
            let db = mask[1].then(|| {
                Tensor::from_parts(
                    g.shape(),
                    (0..n)
                        .map(|i| {
                            if bd[i] == T::zero() {
                                T::zero()
                            } else {
                                -gd[i] * ad[i] / (bd[i] * bd[i])
                            }
                        })
                        .collect(),
                )
            });
            vec![da, db]
        }))
    }

    pub fn scale(&mut self, a: &Var<T>, factor: f64) -> Var<T> {
        let k = T::lit(factor);
        let out = a.value.map(|v| v * k);
        self.record("scale", out, &[a], move |g, _| vec![Some(g.map(|v| v * k))])
    }

    pub fn add_scalar(&mut self, a: &Var<T>, offset: f64) -> Var<T> {
        let k = T::lit(offset);
        let out = a.value.map(|v| v + k);
        self.record("add_scalar", out, &[a], |g, _| vec![Some(g.clone())])
    }

    /// Rectified linear unit; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: &Var<T>) -> Var<T> {
        let out = a.value.map(|v| if v > T::zero() { v } else { T::zero() });
        let av = a.value.clone();
        self.record("relu", out, &[a], move |g, _| {
            vec![Some(Tensor::from_parts(
                g.shape(),
                g.data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() })
                    .collect(),
            ))]
        })
    }

    pub fn sigmoid(&mut self, a: &Var<T>) -> Var<T> {
        let out = a.value.map(sigmoid);
        let y = out.clone();
        self.record("sigmoid", out, &[a], move |g, _| {
            vec![Some(Tensor::from_parts(
                g.shape(),
                g.data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &s)| gi * s * (T::one() - s))
                    .collect(),
            ))]
        })
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: &Var<T>) -> Var<T> {
        let out = a.value.map(|v| v.abs());
        let av = a.value.clone();
        self.record("abs", out, &[a], move |g, _| {
            vec![Some(Tensor::from_parts(
                g.shape(),
                g.data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gi, &x)| {
                        if x > T::zero() {
                            gi
                        } else if x < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
            ))]
        })
    }

    pub fn square(&mut self, a: &Var<T>) -> Var<T> {
        let out = a.value.map(|v| v * v);
        let av = a.value.clone();
        self.record("square", out, &[a], move |g, _| {
            let two = T::lit(2.0);
            vec![Some(Tensor::from_parts(
                g.shape(),
                g.data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gi, &x)| two * gi * x)
                    .collect(),
            ))]
        })
    }

    /// Clamp into `[low, high]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: &Var<T>, low: f64, high: f64) -> Var<T> {
        let (lo, hi) = (T::lit(low), T::lit(high));
        let out = a.value.map(|v| v.max(lo).min(hi));
        let av = a.value.clone();
        self.record("clamp", out, &[a], move |g, _| {
            vec![Some(Tensor::from_parts(
                g.shape(),
                g.data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gi, &x)| if x > lo && x < hi { gi } else { T::zero() })
                    .collect(),
            ))]
        })
    }

    /// Sum of all elements as a 1×1×1×1 tensor (f64 accumulation).
    pub fn sum(&mut self, a: &Var<T>) -> Var<T> {
        let out = Tensor::scalar(T::lit(a.value.sum_f64()));
        let shape = a.shape();
        self.record("sum", out, &[a], move |g, _| {
            vec![Some(Tensor::full(shape, g.item()))]
        })
    }

    pub fn mean(&mut self, a: &Var<T>) -> Var<T> {
        let out = Tensor::scalar(T::lit(a.value.mean_f64()));
        let shape = a.shape();
        self.record("mean", out, &[a], move |g, _| {
            let v = T::lit(g.item().as_f64() / shape.numel() as f64);
            vec![Some(Tensor::full(shape, v))]
        })
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
