//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value; [`Tape::backward`]
//! walks the tape once in reverse. Gradients only flow into nodes that
//! (transitively) depend on a parameter leaf.

use super::layers::{self, ConvGeom, LayerKind, LayerSpec};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Square(Var),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv { x: Var, w: Var, b: Var, spec: LayerSpec, n: usize, geom: ConvGeom },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every tracked node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A constant input; no gradient is computed for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn unary(&mut self, a: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let t = self.tracked(a);
        self.push(value, op, t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, op, t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.unary(a, v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.unary(a, v, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(a, v, Op::Relu(a))
    }

    /// Sum of all elements, as a `[1]` tensor. Accumulated sequentially in f64.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(T::of(self.value(a).sum()));
        self.unary(a, v, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.unary(a, v, Op::Reshape(a)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = layers::linear(self.value(x), self.value(w), self.value(b))?;
        let t = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(v, Op::Linear { x, w, b }, t))
    }

    /// Conv3d or ConvTranspose3d depending on `spec.kind`; bias is fused.
    pub fn conv(&mut self, x: Var, spec: &LayerSpec, w: Var, b: Var) -> Result<Var> {
        let v = match spec.kind {
            LayerKind::Conv3d => layers::conv3d(self.value(x), spec, self.value(w), self.value(b))?,
            LayerKind::ConvTranspose3d => {
                layers::conv_transpose3d(self.value(x), spec, self.value(w), self.value(b))?
            }
            other => return Err(Error::Contract(format!("{other:?} is not a convolution"))),
        };
        let (n, geom) = layers::conv_geometry(self.value(x), spec)?;
        let t = self.tracked(x) || self.tracked(w) || self.tracked(b);
        let op = Op::Conv {
            x,
            w,
            b,
            spec: *spec,
            n,
            geom,
        };
        Ok(self.push(v, op, t))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.tracked(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => Ok(()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|x| -x))
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
                Ok(())
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * *c)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shaped = g.clone().reshape(self.value(*a).shape())?;
                self.accumulate(grads, *a, shaped)
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(&node.value, |x, e| x * e)?),
            Op::Square(a) => {
                let two = T::of(2.0);
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |x, v| two * v * x)?)
            }
            Op::Relu(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(self.value(*a), |x, v| if v > T::zero() { x } else { T::zero() })?,
            ),
            Op::Sum(a) => {
                let s = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), s))
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) =
                    layers::linear_backward(self.value(*x), self.value(*w), g, self.tracked(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx)?;
                }
                self.accumulate(grads, *w, dw)?;
                self.accumulate(grads, *b, db)
            }
            Op::Conv { x, w, b, spec, n, geom } => {
                let (xv, wv, need_dx) = (self.value(*x), self.value(*w), self.tracked(*x));
                let (dx, dw, db) = match spec.kind {
                    LayerKind::Conv3d => layers::conv3d_backward(xv, wv, g, spec, *n, geom, need_dx),
                    _ => layers::conv_transpose3d_backward(xv, wv, g, spec, *n, geom, need_dx),
                };
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx)?;
                }
                self.accumulate(grads, *w, dw)?;
                self.accumulate(grads, *b, db)
            }
        }
    }
}
