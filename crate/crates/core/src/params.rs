//! Named-parameter traversal shared by every model, the optimizer and the
//! weight container.

use std::collections::BTreeMap;

use crate::graph::{BoundConv, Gradients, Graph, Var};
use crate::tensor::{ConvKernel, Dims, Tensor4};

/// Anything that owns named, trainable `f64` buffers.
///
/// Names are dot-separated paths and must be unique. Biases are reported
/// with dims `(1, c, 1, 1)`.
pub trait Parameters {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, Dims, &[f64]));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Dims, &mut [f64]));

    fn parameter_total(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, d, _| n += d.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |name, _, _| names.push(name.to_string()));
        names
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn bias_dims(len: usize) -> Dims {
    Dims::new(1, len, 1, 1)
}

pub(crate) fn visit_conv(prefix: &str, kernel: &ConvKernel, f: &mut dyn FnMut(&str, Dims, &[f64])) {
    f(
        &join(prefix, "weight"),
        kernel.weight.dims(),
        kernel.weight.data(),
    );
    f(
        &join(prefix, "bias"),
        bias_dims(kernel.bias.len()),
        &kernel.bias,
    );
}

pub(crate) fn visit_conv_mut(
    prefix: &str,
    kernel: &mut ConvKernel,
    f: &mut dyn FnMut(&str, Dims, &mut [f64]),
) {
    let dims = kernel.weight.dims();
    f(&join(prefix, "weight"), dims, kernel.weight.data_mut());
    let bd = bias_dims(kernel.bias.len());
    f(&join(prefix, "bias"), bd, &mut kernel.bias);
}

impl Parameters for ConvKernel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, Dims, &[f64])) {
        visit_conv(prefix, self, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Dims, &mut [f64])) {
        visit_conv_mut(prefix, self, f);
    }
}

/// Maps parameter names to the graph leaves they were bound to, so that
/// gradients can be collected by name after a backward sweep.
pub struct ParamBinding<'t> {
    leaves: Vec<(String, Var, Dims)>,
    trainable: &'t dyn Fn(&str) -> bool,
}

impl<'t> ParamBinding<'t> {
    pub fn new(trainable: &'t dyn Fn(&str) -> bool) -> Self {
        Self {
            leaves: Vec::new(),
            trainable,
        }
    }

    pub fn leaf(&mut self, graph: &mut Graph, name: String, value: &Tensor4) -> Var {
        let dims = value.dims();
        let v = if (self.trainable)(&name) {
            graph.param(value.clone())
        } else {
            graph.constant(value.clone())
        };
        self.leaves.push((name, v, dims));
        v
    }

    pub fn conv(&mut self, graph: &mut Graph, prefix: &str, kernel: &ConvKernel) -> BoundConv {
        let weight = self.leaf(graph, join(prefix, "weight"), &kernel.weight);
        let bias = Tensor4::from_vec(bias_dims(kernel.bias.len()), kernel.bias.clone())
            .expect("kernel bias is finite by construction");
        let bias = self.leaf(graph, join(prefix, "bias"), &bias);
        BoundConv {
            weight,
            bias: Some(bias),
        }
    }

    pub fn weight_only(&mut self, graph: &mut Graph, name: String, weight: &Tensor4) -> BoundConv {
        BoundConv {
            weight: self.leaf(graph, name, weight),
            bias: None,
        }
    }

    pub fn names_and_vars(&self) -> Vec<(String, Var)> {
        self.leaves
            .iter()
            .map(|(n, v, _)| (n.clone(), *v))
            .collect()
    }

    /// Gradients of every bound leaf, zero-filled where none arrived.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Tensor4> {
        self.leaves
            .iter()
            .map(|(name, v, dims)| (name.clone(), grads.get_or_zeros(*v, *dims)))
            .collect()
    }
}

impl std::fmt::Debug for ParamBinding<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamBinding")
            .field("leaves", &self.leaves)
            .finish_non_exhaustive()
    }
}

pub fn all_trainable(_: &str) -> bool {
    true
}

pub fn none_trainable(_: &str) -> bool {
    false
}
