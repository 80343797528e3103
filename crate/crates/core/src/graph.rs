//! A small reverse-mode tape over [`Tensor4`] values.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation. Leaves created with
//! [`Graph::constant`] never receive gradients; this is how carried recurrent
//! state is cut off at chunk boundaries.

use crate::tensor::{
    conv2d_grad_input, conv2d_grad_kernel, conv2d_raw, leaky_relu, max_pool2, sigmoid, ConvKernel,
    Dims, Result, Tensor4, TensorError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// A convolution kernel whose weight and bias live on a graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a fixed input.
    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Places a kernel on the graph; the bias becomes a `(1, c_out, 1, 1)` leaf.
    pub fn bind_conv(&mut self, kernel: &ConvKernel, trainable: bool) -> BoundConv {
        let bias = Tensor4::from_vec((1, kernel.c_out(), 1, 1), kernel.bias.clone())
            .expect("kernel bias is finite and sized by construction");
        let (weight, bias) = if trainable {
            (self.param(kernel.weight.clone()), self.param(bias))
        } else {
            (self.constant(kernel.weight.clone()), self.constant(bias))
        };
        BoundConv {
            weight,
            bias: Some(bias),
        }
    }

    /// Places a bias-free weight tensor on the graph.
    pub fn bind_weight(&mut self, weight: &Tensor4, trainable: bool) -> BoundConv {
        let weight = if trainable {
            self.param(weight.clone())
        } else {
            self.constant(weight.clone())
        };
        BoundConv { weight, bias: None }
    }

    pub fn conv2d(&mut self, input: Var, conv: BoundConv, padding: usize) -> Result<Var> {
        let bias = conv.bias.map(|b| self.value(b).data().to_vec());
        let value = conv2d_raw(
            self.value(input),
            self.value(conv.weight),
            bias.as_deref(),
            padding,
        )?;
        let rg = self.needs(input)
            || self.needs(conv.weight)
            || conv.bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight: conv.weight,
                bias: conv.bias,
                padding,
            },
            rg,
        ))
    }

    /// Same-padded convolution.
    pub fn conv2d_same(&mut self, input: Var, conv: BoundConv) -> Result<Var> {
        let k = self.value(conv.weight).dims().h;
        self.conv2d(input, conv, (k - 1) / 2)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: va.dims(),
                right: vb.dims(),
            });
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let value = Tensor4::from_vec(va.dims(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.needs(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.needs(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| leaky_relu(v, slope));
        let rg = self.needs(a);
        self.push(value, Op::LeakyRelu { input: a, slope }, rg)
    }

    pub fn max_pool2(&mut self, a: Var) -> Var {
        let (value, argmax) = max_pool2(self.value(a));
        let rg = self.needs(a);
        self.push(value, Op::MaxPool2 { input: a, argmax }, rg)
    }

    /// Reverse sweep. `seeds` are output gradients `dL/dv` for any set of
    /// nodes; seeds on the same node accumulate.
    pub fn backward(&self, seeds: impl IntoIterator<Item = (Var, Tensor4)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor4>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if g.dims() != self.value(v).dims() {
                return Err(TensorError::ShapeMismatch {
                    op: "backward seed",
                    left: g.dims(),
                    right: self.value(v).dims(),
                });
            }
            last = last.max(v.0 + 1);
            accumulate(&mut grads[v.0], g)?;
        }

        for idx in (0..last).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    padding,
                } => {
                    let w = self.value(*weight);
                    if self.needs(*input) {
                        let gx = conv2d_grad_input(&g, w, self.value(*input).dims(), *padding)?;
                        accumulate(&mut grads[input.0], gx)?;
                    }
                    let wants_bias = bias.is_some_and(|b| self.needs(b));
                    if self.needs(*weight) || wants_bias {
                        let (gw, gb) =
                            conv2d_grad_kernel(&g, self.value(*input), w.dims(), *padding)?;
                        if self.needs(*weight) {
                            accumulate(&mut grads[weight.0], gw)?;
                        }
                        if let Some(b) = bias.filter(|b| self.needs(*b)) {
                            let gb = Tensor4::from_vec((1, gb.len(), 1, 1), gb)?;
                            accumulate(&mut grads[b.0], gb)?;
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.clone())?;
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = hadamard(&g, self.value(*b));
                        accumulate(&mut grads[a.0], ga)?;
                    }
                    if self.needs(*b) {
                        let gb = hadamard(&g, self.value(*a));
                        accumulate(&mut grads[b.0], gb)?;
                    }
                }
                Op::Sigmoid(a) => {
                    let s = &node.value;
                    let ga = zip_map(&g, s, |gv, sv| gv * sv * (1.0 - sv));
                    accumulate(&mut grads[a.0], ga)?;
                }
                Op::Tanh(a) => {
                    let t = &node.value;
                    let ga = zip_map(&g, t, |gv, tv| gv * (1.0 - tv * tv));
                    accumulate(&mut grads[a.0], ga)?;
                }
                Op::LeakyRelu { input, slope } => {
                    let x = self.value(*input);
                    let ga = zip_map(&g, x, |gv, xv| if xv > 0.0 { gv } else { gv * slope });
                    accumulate(&mut grads[input.0], ga)?;
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut ga = self.value(*input).zeros_like();
                    let buf = ga.data_mut();
                    for (gv, &src) in g.data().iter().zip(argmax) {
                        buf[src] += gv;
                    }
                    accumulate(&mut grads[input.0], ga)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor4>, g: Tensor4) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn zip_map(a: &Tensor4, b: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Tensor4 {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor4::from_vec(a.dims(), data).unwrap_or_else(|_| a.zeros_like())
}

fn hadamard(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    zip_map(a, b, |x, y| x * y)
}

/// Gradients of leaf nodes after a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when nothing reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zeros shaped like `dims` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, dims: Dims) -> Tensor4 {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor4::zeros(dims).expect("dims come from a live tensor"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{numeric_gradient, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor4::filled((1, 1, 1, 2), 2.0).unwrap());
        let b = g.param(Tensor4::filled((1, 1, 1, 2), 3.0).unwrap());
        let c = g.mul(a, b).unwrap();
        let seed = Tensor4::filled((1, 1, 1, 2), 1.0).unwrap();
        let grads = g.backward([(c, seed)]).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor4::filled((1, 1, 1, 1), 3.0).unwrap());
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let grads = g
            .backward([(z, Tensor4::filled((1, 1, 1, 1), 1.0).unwrap())])
            .unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn composite_matches_numeric_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor4::uniform((1, 2, 5, 3), 1.0, &mut rng).unwrap();
        let kern = ConvKernel::init_uniform(3, 2, 3, &mut rng).unwrap();
        let probe = Tensor4::uniform((1, 3, 3, 2), 1.0, &mut rng).unwrap();

        let eval = |x: &Tensor4| -> (f64, Option<Tensor4>) {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let k = g.bind_conv(&kern, false);
            let c = g.conv2d_same(xv, k).unwrap();
            let a = g.leaky_relu(c, 0.1);
            let s = g.sigmoid(a);
            let t = g.tanh(c);
            let m = g.mul(s, t).unwrap();
            let p = g.max_pool2(m);
            let loss: f64 = g
                .value(p)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum();
            let grads = g.backward([(p, probe.clone())]).unwrap();
            (loss, grads.get(xv).cloned())
        };
        let (_, analytic) = eval(&x0);
        let numeric = numeric_gradient(
            |p| eval(&Tensor4::from_vec(x0.dims(), p.to_vec()).unwrap()).0,
            x0.data(),
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.unwrap().data().iter().zip(&numeric) {
            assert!(relative_error(*a, *n) <= 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut g = Graph::new();
        let x = g.param(Tensor4::zeros((1, 1, 2, 2)).unwrap());
        let bad = Tensor4::zeros((1, 1, 1, 1)).unwrap();
        assert!(g.backward([(x, bad)]).is_err());
    }
}
