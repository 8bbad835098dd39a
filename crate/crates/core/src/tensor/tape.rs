//! Tape-based reverse-mode differentiation.
//!
//! Every operation applied to a [`Var`] appends a node holding its value and
//! enough saved state to run its vector-Jacobian product later. A backward
//! pass walks the tape once in reverse and returns a fresh [`Gradients`]
//! table; nothing on the tape itself is mutated, so calling backward twice
//! yields the same table twice. Leaf tensors accumulate across calls through
//! [`Tensor::accumulate_grad`], which is where "repeat without reset
//! accumulates" lives.

use std::cell::{Ref, RefCell};
use std::fmt;

use super::layers;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// User-defined differentiable operation.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; the op only has to map the output gradient back onto
/// its inputs.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &str;

    /// Returns one gradient per input, `None` for inputs that receive none.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Square(usize),
    Crop {
        x: usize,
        top: usize,
        left: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
    },
    Deconv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
    },
    Pointwise {
        x: usize,
        w: usize,
        b: usize,
    },
    LayerNorm {
        x: usize,
        w: usize,
        b: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    LeakyRelu(usize, T),
    Softmax(usize),
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for later differentiation. Single-threaded.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a copy of `t`; gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        let mut value = t.clone();
        value.grad = None;
        let requires_grad = t.requires_grad;
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records `t` as a constant input.
    pub fn constant(&self, mut t: Tensor<T>) -> Var<'_, T> {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    /// Records `t` as a differentiable input.
    pub fn variable(&self, mut t: Tensor<T>) -> Var<'_, T> {
        t.requires_grad = true;
        t.grad = None;
        self.push(t, Op::Leaf, true)
    }

    /// Records a custom operation whose forward value was computed by the
    /// caller.
    pub fn custom(
        &self,
        inputs: &[Var<'_, T>],
        value: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Var<'_, T> {
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push(value, Op::Custom { inputs: ids, op }, requires_grad)
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`)
    /// back through the tape.
    pub fn backward_with(&self, output: Var<'_, T>, seed: &[T]) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if seed.len() != out.value.numel() {
            return Err(Error::dim(format!(
                "seed of length {} for output of shape {:?}",
                seed.len(),
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.id + 1];
        if out.requires_grad {
            grads[output.id] = Some(seed.to_vec());
        }

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let needs = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| &nodes[i].value;
            let mut contribs: Vec<(usize, Vec<T>)> = Vec::new();

            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for &p in [a, b] {
                        if needs(p) {
                            contribs.push((p, g.clone()));
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let gb = val(*b).data();
                        contribs.push((*a, g.iter().zip(gb).map(|(&u, &v)| u * v).collect()));
                    }
                    if needs(*b) {
                        let ga = val(*a).data();
                        contribs.push((*b, g.iter().zip(ga).map(|(&u, &v)| u * v).collect()));
                    }
                }
                Op::Scale(a, s) => {
                    contribs.push((*a, g.iter().map(|&u| u * *s).collect()));
                }
                Op::Sum(a) => {
                    contribs.push((*a, vec![g[0]; val(*a).numel()]));
                }
                Op::Square(a) => {
                    let two = T::of(2.0);
                    let x = val(*a).data();
                    contribs.push((*a, g.iter().zip(x).map(|(&u, &v)| two * u * v).collect()));
                }
                Op::Crop { x, top, left } => {
                    let gx = layers::crop_backward(val(*x).shape(), node.value.shape(), *top, *left, &g);
                    contribs.push((*x, gx));
                }
                Op::Conv2d { x, w, b, stride } => {
                    let gr = layers::conv2d_backward(val(*x), val(*w), *stride, &g, needs(*x));
                    if let Some(gx) = gr.input {
                        contribs.push((*x, gx));
                    }
                    contribs.push((*w, gr.weight));
                    contribs.push((*b, gr.bias));
                }
                Op::Deconv2d { x, w, b, stride } => {
                    let gr = layers::deconv2d_backward(val(*x), val(*w), *stride, &g, needs(*x));
                    if let Some(gx) = gr.input {
                        contribs.push((*x, gx));
                    }
                    contribs.push((*w, gr.weight));
                    contribs.push((*b, gr.bias));
                }
                Op::Pointwise { x, w, b } => {
                    let gr = layers::pointwise_backward(val(*x), val(*w), &g, needs(*x));
                    if let Some(gx) = gr.input {
                        contribs.push((*x, gx));
                    }
                    contribs.push((*w, gr.weight));
                    contribs.push((*b, gr.bias));
                }
                Op::LayerNorm { x, w, b, xhat, rstd } => {
                    let gr = layers::layer_norm_backward(val(*x).shape(), val(*w), xhat, rstd, &g);
                    if let Some(gx) = gr.input {
                        contribs.push((*x, gx));
                    }
                    contribs.push((*w, gr.weight));
                    contribs.push((*b, gr.bias));
                }
                Op::Gelu(a) => {
                    contribs.push((*a, layers::gelu_backward(val(*a).data(), &g)));
                }
                Op::LeakyRelu(a, slope) => {
                    contribs.push((*a, layers::leaky_relu_backward(val(*a).data(), *slope, &g)));
                }
                Op::Softmax(a) => {
                    contribs.push((*a, layers::channel_softmax_backward(&node.value, &g)));
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
                    let gs = op.backward(&ins, &node.value, &g);
                    for (&i, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            contribs.push((i, gi));
                        }
                    }
                }
            }

            for (p, gp) in contribs {
                if !needs(p) {
                    continue;
                }
                debug_assert_eq!(gp.len(), nodes[p].value.numel());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&gp).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gp),
                }
            }
            // Keep the gradient for leaves and the output so callers can read them.
            if matches!(node.op, Op::Leaf) || id == output.id {
                grads[id] = Some(g);
            }
        }

        Ok(Gradients { grads })
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Gradients of this scalar with respect to every tracked input.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let numel = self.value().numel();
        if numel != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        self.tape.backward_with(*self, &[T::one()])
    }

    pub(crate) fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn same_shape(&self, other: &Var<'t, T>, what: &str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::dim(format!("{what} of {a:?} and {b:?}")));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "add")?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
            Tensor::from_vec(a.shape().to_vec(), data)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::Add(self.id, other.id), rg))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "mul")?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
            Tensor::from_vec(a.shape().to_vec(), data)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::Mul(self.id, other.id), rg))
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let value = self.value().map(|x| x * s);
        self.unary(value, Op::Scale(self.id, s))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let total = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(total), Op::Sum(self.id))
    }

    pub fn square(&self) -> Var<'t, T> {
        let value = self.value().map(|x| x * x);
        self.unary(value, Op::Square(self.id))
    }

    /// Spatial crop of a `[B,C,H,W]` value to `height x width` starting at
    /// `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Var<'t, T>> {
        let value = layers::crop(&self.value(), top, left, height, width)?;
        Ok(self.unary(
            value,
            Op::Crop {
                x: self.id,
                top,
                left,
            },
        ))
    }
}

/// Result of a backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf (or the differentiated output).
    /// `None` when the value does not require grad or was not reached.
    pub fn get(&self, v: &Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Adds the gradient for `v` into `target.grad`.
    pub fn accumulate_into(&self, v: &Var<'_, T>, target: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => Err(Error::contract(format!(
                "no gradient reached {v:?}; is it connected to the loss?"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::from_vec([2, 3], vec![1., -2., 3., 0.5, 7., 9.]).unwrap());
        let g = x.sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_x() {
        let data = vec![1.5, -2.0, 0.25, 4.0];
        let tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::from_vec([4], data.clone()).unwrap());
        let g = x.square().sum().backward().unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(&x).unwrap(), &want[..]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.variable(Tensor::ones([3]));
        assert!(matches!(x.square().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_accumulation_doubles_leaf_grad() {
        let mut leaf = Tensor::<f64>::from_vec([2], vec![3.0, -1.0]).unwrap().with_grad();
        let tape = Tape::new();
        let x = tape.leaf(&leaf);
        let loss = x.square().sum();
        for _ in 0..2 {
            let g = loss.backward().unwrap();
            g.accumulate_into(&x, &mut leaf).unwrap();
        }
        assert_eq!(leaf.grad.as_deref(), Some(&[12.0, -4.0][..]));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::ones([2]));
        let x = tape.variable(Tensor::ones([2]));
        let g = x.mul(&c).unwrap().sum().backward().unwrap();
        assert!(g.get(&c).is_none());
        assert_eq!(g.get(&x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(x * x + x) -> df/dx = 2x + 1
        let tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::from_vec([2], vec![2.0, -3.0]).unwrap());
        let f = x.mul(&x).unwrap().add(&x).unwrap().sum();
        let g = f.backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[5.0, -5.0]);
    }
}
