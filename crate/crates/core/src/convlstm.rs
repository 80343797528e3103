//! Convolutional LSTM whose peephole terms are convolutions rather than
//! Hadamard products, so no weight depends on the feature-map size.
//!
//! One step computes, with `*` a same-padded convolution and `∘` the
//! elementwise product:
//!
//! ```text
//! i = σ(W_xi*X + W_hi*H + W_ci*C_prev + b_i)
//! f = σ(W_xf*X + W_hf*H + W_cf*C_prev + b_f)
//! C = f ∘ C_prev + i ∘ tanh(W_xc*X + W_hc*H + b_c)
//! o = σ(W_xo*X + W_ho*H + W_co*C + b_o)        // peephole on the updated cell
//! H = o ∘ tanh(C)
//! ```

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{BoundConv, Graph, Var};
use crate::params::{all_trainable, bias_dims, join, none_trainable, ParamBinding, Parameters};
use crate::tensor::{ConvKernel, Dims, Tensor4, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvLstmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input has {got} channels, cell expects {expected}")]
    InputChannels { expected: usize, got: usize },
    #[error("input must be a single sample, got batch of {0}")]
    Batch(usize),
    #[error("state for layer {layer} has dims {got}, expected {expected}")]
    StateShape {
        layer: usize,
        expected: Dims,
        got: Dims,
    },
    #[error("state has {got} layers, stack has {expected}")]
    StateDepth { expected: usize, got: usize },
    #[error("layer {layer} takes {got} input channels but the previous layer emits {expected}")]
    LayerChain {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("frame {index} has dims {got}, sequence started with {expected}")]
    FrameShape {
        index: usize,
        expected: Dims,
        got: Dims,
    },
    #[error("empty frame sequence")]
    EmptySequence,
    #[error("stack must have at least one layer")]
    EmptyStack,
    #[error("kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("dropout rate {0} must be in [0, 1)")]
    Dropout(f64),
}

pub type Result<T, E = ConvLstmError> = std::result::Result<T, E>;

/// Weights feeding one gate: the input convolution (which carries the gate
/// bias), the recurrent convolution and, for `i`, `f`, `o`, the peephole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateWeights {
    pub input: ConvKernel,
    pub hidden: Tensor4,
    pub peephole: Option<Tensor4>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLstmCell {
    c_in: usize,
    hidden: usize,
    k: usize,
    pub input_gate: GateWeights,
    pub forget_gate: GateWeights,
    pub candidate: GateWeights,
    pub output_gate: GateWeights,
}

impl ConvLstmCell {
    pub fn zeros(c_in: usize, hidden: usize, k: usize) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(ConvLstmError::EvenKernel(k));
        }
        let gate = |peephole: bool| -> Result<GateWeights> {
            Ok(GateWeights {
                input: ConvKernel::zeros(hidden, c_in, k)?,
                hidden: Tensor4::zeros((hidden, hidden, k, k))?,
                peephole: if peephole {
                    Some(Tensor4::zeros((hidden, hidden, k, k))?)
                } else {
                    None
                },
            })
        };
        Ok(Self {
            c_in,
            hidden,
            k,
            input_gate: gate(true)?,
            forget_gate: gate(true)?,
            candidate: gate(false)?,
            output_gate: gate(true)?,
        })
    }

    /// Uniform in ±1/sqrt(fan_in) per kernel, forget bias 1, other biases 0.
    pub fn init(c_in: usize, hidden: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut cell = Self::zeros(c_in, hidden, k)?;
        let x_bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let h_bound = 1.0 / ((hidden * k * k) as f64).sqrt();
        for gate in cell.gates_mut() {
            gate.input.weight = Tensor4::uniform((hidden, c_in, k, k), x_bound, rng)?;
            gate.hidden = Tensor4::uniform((hidden, hidden, k, k), h_bound, rng)?;
            if let Some(p) = gate.peephole.as_mut() {
                *p = Tensor4::uniform((hidden, hidden, k, k), h_bound, rng)?;
            }
        }
        cell.forget_gate
            .input
            .bias
            .iter_mut()
            .for_each(|b| *b = 1.0);
        Ok(cell)
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    fn gates_mut(&mut self) -> [&mut GateWeights; 4] {
        [
            &mut self.input_gate,
            &mut self.forget_gate,
            &mut self.candidate,
            &mut self.output_gate,
        ]
    }

    fn gates(&self) -> [(&GateWeights, char); 4] {
        [
            (&self.input_gate, 'i'),
            (&self.forget_gate, 'f'),
            (&self.candidate, 'c'),
            (&self.output_gate, 'o'),
        ]
    }

    pub fn step(&self, x: &Tensor4, state: &LayerState) -> Result<(Tensor4, LayerState)> {
        let trace = self.step_trace(x, state)?;
        Ok((
            trace.hidden.clone(),
            LayerState {
                hidden: trace.hidden,
                cell: trace.cell,
            },
        ))
    }

    /// One step returning every intermediate map, for inspection.
    pub fn step_trace(&self, x: &Tensor4, state: &LayerState) -> Result<StepTrace> {
        self.check_input(x.dims())?;
        self.check_state(0, state, x.dims())?;
        let mut g = Graph::new();
        let mut binding = ParamBinding::new(&none_trainable);
        let bound = self.bind(&mut g, "", &mut binding);
        let xv = g.constant(x.clone());
        let hv = g.constant(state.hidden.clone());
        let cv = g.constant(state.cell.clone());
        let out = bound.step(&mut g, xv, hv, cv)?;
        Ok(StepTrace {
            input_gate: g.value(out.input_gate).clone(),
            forget_gate: g.value(out.forget_gate).clone(),
            output_gate: g.value(out.output_gate).clone(),
            candidate: g.value(out.candidate).clone(),
            cell: g.value(out.cell).clone(),
            hidden: g.value(out.hidden).clone(),
        })
    }

    pub(crate) fn check_input(&self, d: Dims) -> Result<()> {
        if d.n != 1 {
            return Err(ConvLstmError::Batch(d.n));
        }
        if d.c != self.c_in {
            return Err(ConvLstmError::InputChannels {
                expected: self.c_in,
                got: d.c,
            });
        }
        Ok(())
    }

    pub(crate) fn check_state(&self, layer: usize, state: &LayerState, x: Dims) -> Result<()> {
        let expected = Dims::new(1, self.hidden, x.h, x.w);
        for t in [&state.hidden, &state.cell] {
            if t.dims() != expected {
                return Err(ConvLstmError::StateShape {
                    layer,
                    expected,
                    got: t.dims(),
                });
            }
        }
        Ok(())
    }

    pub fn bind(&self, graph: &mut Graph, prefix: &str, binding: &mut ParamBinding) -> BoundCell {
        let mut bind_gate = |gate: &GateWeights, s: char| BoundGate {
            input: {
                let weight =
                    binding.leaf(graph, join(prefix, &format!("w_x{s}")), &gate.input.weight);
                let b =
                    Tensor4::from_vec(bias_dims(gate.input.bias.len()), gate.input.bias.clone())
                        .expect("finite bias");
                let bias = binding.leaf(graph, join(prefix, &format!("b_{s}")), &b);
                BoundConv {
                    weight,
                    bias: Some(bias),
                }
            },
            hidden: binding.weight_only(graph, join(prefix, &format!("w_h{s}")), &gate.hidden),
            peephole: gate
                .peephole
                .as_ref()
                .map(|p| binding.weight_only(graph, join(prefix, &format!("w_c{s}")), p)),
        };
        BoundCell {
            input_gate: bind_gate(&self.input_gate, 'i'),
            forget_gate: bind_gate(&self.forget_gate, 'f'),
            candidate: bind_gate(&self.candidate, 'c'),
            output_gate: bind_gate(&self.output_gate, 'o'),
        }
    }
}

impl Parameters for ConvLstmCell {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, Dims, &[f64])) {
        for (gate, s) in self.gates() {
            f(
                &join(prefix, &format!("w_x{s}")),
                gate.input.weight.dims(),
                gate.input.weight.data(),
            );
            f(
                &join(prefix, &format!("b_{s}")),
                bias_dims(gate.input.bias.len()),
                &gate.input.bias,
            );
            f(
                &join(prefix, &format!("w_h{s}")),
                gate.hidden.dims(),
                gate.hidden.data(),
            );
            if let Some(p) = &gate.peephole {
                f(&join(prefix, &format!("w_c{s}")), p.dims(), p.data());
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Dims, &mut [f64])) {
        for (gate, s) in self.gates_mut().into_iter().zip(['i', 'f', 'c', 'o']) {
            let d = gate.input.weight.dims();
            f(
                &join(prefix, &format!("w_x{s}")),
                d,
                gate.input.weight.data_mut(),
            );
            let bd = bias_dims(gate.input.bias.len());
            f(&join(prefix, &format!("b_{s}")), bd, &mut gate.input.bias);
            let d = gate.hidden.dims();
            f(&join(prefix, &format!("w_h{s}")), d, gate.hidden.data_mut());
            if let Some(p) = gate.peephole.as_mut() {
                let d = p.dims();
                f(&join(prefix, &format!("w_c{s}")), d, p.data_mut());
            }
        }
    }
}

/// Exact parameter count: `4·h·c_in·k² + 7·h²·k² + 4·h`. Independent of the
/// feature-map size.
pub fn parameter_count(cell: &ConvLstmCell) -> usize {
    let (c, h, k) = (cell.c_in, cell.hidden, cell.k);
    4 * h * c * k * k + 7 * h * h * k * k + 4 * h
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub input_gate: Tensor4,
    pub forget_gate: Tensor4,
    pub output_gate: Tensor4,
    pub candidate: Tensor4,
    pub cell: Tensor4,
    pub hidden: Tensor4,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGate {
    input: BoundConv,
    hidden: BoundConv,
    peephole: Option<BoundConv>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundCell {
    input_gate: BoundGate,
    forget_gate: BoundGate,
    candidate: BoundGate,
    output_gate: BoundGate,
}

#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub input_gate: Var,
    pub forget_gate: Var,
    pub output_gate: Var,
    pub candidate: Var,
    pub cell: Var,
    pub hidden: Var,
}

impl BoundCell {
    fn preactivation(
        g: &mut Graph,
        gate: &BoundGate,
        x: Var,
        h: Var,
        c: Option<Var>,
    ) -> Result<Var> {
        let ax = g.conv2d_same(x, gate.input)?;
        let ah = g.conv2d_same(h, gate.hidden)?;
        let mut acc = g.add(ax, ah)?;
        if let (Some(p), Some(c)) = (gate.peephole, c) {
            let ac = g.conv2d_same(c, p)?;
            acc = g.add(acc, ac)?;
        }
        Ok(acc)
    }

    pub fn step(&self, g: &mut Graph, x: Var, h_prev: Var, c_prev: Var) -> Result<StepVars> {
        let zi = Self::preactivation(g, &self.input_gate, x, h_prev, Some(c_prev))?;
        let i = g.sigmoid(zi);
        let zf = Self::preactivation(g, &self.forget_gate, x, h_prev, Some(c_prev))?;
        let f = g.sigmoid(zf);
        let zc = Self::preactivation(g, &self.candidate, x, h_prev, None)?;
        let cand = g.tanh(zc);
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let zo = Self::preactivation(g, &self.output_gate, x, h_prev, Some(c))?;
        let o = g.sigmoid(zo);
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(StepVars {
            input_gate: i,
            forget_gate: f,
            output_gate: o,
            candidate: cand,
            cell: c,
            hidden: h,
        })
    }
}

/// Hidden and cell maps of one layer, each `(1, hidden, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub hidden: Tensor4,
    pub cell: Tensor4,
}

impl LayerState {
    pub fn zeros(channels: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            hidden: Tensor4::zeros((1, channels, h, w))?,
            cell: Tensor4::zeros((1, channels, h, w))?,
        })
    }
}

/// Recurrent memory of a whole stack, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmState {
    pub layers: Vec<LayerState>,
}

impl ConvLstmState {
    pub fn fresh(stack: &ConvLstmStack, h: usize, w: usize) -> Result<Self> {
        let layers = stack
            .layers
            .iter()
            .map(|c| LayerState::zeros(c.hidden, h, w))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLstmStack {
    layers: Vec<ConvLstmCell>,
    dropout: f64,
}

impl ConvLstmStack {
    pub fn new(layers: Vec<ConvLstmCell>, dropout: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(ConvLstmError::EmptyStack);
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(ConvLstmError::Dropout(dropout));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].c_in != pair[0].hidden {
                return Err(ConvLstmError::LayerChain {
                    layer: i + 1,
                    expected: pair[0].hidden,
                    got: pair[1].c_in,
                });
            }
        }
        Ok(Self { layers, dropout })
    }

    /// `depth` layers mapping `c_in` to `hidden` channels, randomly initialized.
    pub fn init(
        c_in: usize,
        hidden: usize,
        k: usize,
        depth: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| ConvLstmCell::init(if i == 0 { c_in } else { hidden }, hidden, k, rng))
            .collect::<Result<_>>()?;
        Self::new(layers, dropout)
    }

    pub fn layers(&self) -> &[ConvLstmCell] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLstmCell] {
        &mut self.layers
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn c_in(&self) -> usize {
        self.layers[0].c_in
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, |c| c.hidden)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(parameter_count).sum()
    }

    pub fn check_state(&self, state: &ConvLstmState, x: Dims) -> Result<()> {
        if state.layers.len() != self.layers.len() {
            return Err(ConvLstmError::StateDepth {
                expected: self.layers.len(),
                got: state.layers.len(),
            });
        }
        for (i, (cell, st)) in self.layers.iter().zip(&state.layers).enumerate() {
            cell.check_state(i, st, x)?;
        }
        Ok(())
    }

    pub fn bind(&self, graph: &mut Graph, prefix: &str, binding: &mut ParamBinding) -> BoundStack {
        BoundStack {
            cells: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, c)| c.bind(graph, &join(prefix, &format!("layer{i}")), binding))
                .collect(),
            dropout: self.dropout,
        }
    }

    /// Runs the stack over `frames` in order, starting from `state` (fresh
    /// when `None`). `dropout_rng = Some(..)` selects training mode, in which
    /// inter-layer hidden outputs are dropped at the configured rate.
    pub fn forward_sequence(
        &self,
        frames: &[Tensor4],
        state: Option<ConvLstmState>,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<(Vec<Tensor4>, ConvLstmState)> {
        let first = frames.first().ok_or(ConvLstmError::EmptySequence)?.dims();
        for (index, f) in frames.iter().enumerate() {
            if f.dims() != first {
                return Err(ConvLstmError::FrameShape {
                    index,
                    expected: first,
                    got: f.dims(),
                });
            }
        }
        self.layers[0].check_input(first)?;
        let state = match state {
            Some(s) => s,
            None => ConvLstmState::fresh(self, first.h, first.w)?,
        };
        self.check_state(&state, first)?;

        let mut g = Graph::new();
        let mut binding = ParamBinding::new(&none_trainable);
        let bound = self.bind(&mut g, "", &mut binding);
        let mut carried = bound.constant_state(&mut g, &state);
        let mut rng = dropout_rng;
        let mut outputs = Vec::with_capacity(frames.len());
        for frame in frames {
            let x = g.constant(frame.clone());
            let top = bound.step(&mut g, x, &mut carried, reborrow(&mut rng))?;
            outputs.push(g.value(top).clone());
        }
        Ok((outputs, BoundStack::read_state(&g, &carried)))
    }
}

impl Parameters for ConvLstmStack {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, Dims, &[f64])) {
        for (i, c) in self.layers.iter().enumerate() {
            c.visit_params(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Dims, &mut [f64])) {
        for (i, c) in self.layers.iter_mut().enumerate() {
            c.visit_params_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

/// Graph handles of one layer's `(hidden, cell)` pair.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub hidden: Var,
    pub cell: Var,
}

#[derive(Debug, Clone)]
pub struct BoundStack {
    cells: Vec<BoundCell>,
    dropout: f64,
}

impl BoundStack {
    /// Carried state enters the graph as constants: gradients stop here.
    pub fn constant_state(&self, g: &mut Graph, state: &ConvLstmState) -> Vec<StateVars> {
        state
            .layers
            .iter()
            .map(|l| StateVars {
                hidden: g.constant(l.hidden.clone()),
                cell: g.constant(l.cell.clone()),
            })
            .collect()
    }

    pub fn read_state(g: &Graph, vars: &[StateVars]) -> ConvLstmState {
        ConvLstmState {
            layers: vars
                .iter()
                .map(|s| LayerState {
                    hidden: g.value(s.hidden).clone(),
                    cell: g.value(s.cell).clone(),
                })
                .collect(),
        }
    }

    /// Advances every layer by one frame; returns the top layer's hidden map.
    pub fn step(
        &self,
        g: &mut Graph,
        x: Var,
        state: &mut [StateVars],
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let mut input = x;
        let last = self.cells.len() - 1;
        for (i, (cell, st)) in self.cells.iter().zip(state.iter_mut()).enumerate() {
            let out = cell.step(g, input, st.hidden, st.cell)?;
            *st = StateVars {
                hidden: out.hidden,
                cell: out.cell,
            };
            input = out.hidden;
            if i < last && self.dropout > 0.0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    let mask = dropout_mask(g.value(out.hidden).dims(), self.dropout, rng)?;
                    let m = g.constant(mask);
                    input = g.mul(out.hidden, m)?;
                }
            }
        }
        Ok(input)
    }
}

pub(crate) fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Inverted-dropout mask: 0 with probability `rate`, `1/(1-rate)` otherwise.
fn dropout_mask(dims: Dims, rate: f64, rng: &mut dyn RngCore) -> Result<Tensor4> {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..dims.len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Ok(Tensor4::from_vec(dims, data)?)
}

/// Trainable-everything binding of a single cell, used by gradient checks.
pub fn bind_all(cell: &ConvLstmCell, graph: &mut Graph) -> (BoundCell, Vec<(String, Var)>) {
    let mut binding = ParamBinding::new(&all_trainable);
    let bound = cell.bind(graph, "", &mut binding);
    let names = binding.names_and_vars();
    (bound, names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Tensor4 {
        Tensor4::filled((1, 1, 1, 1), v).unwrap()
    }

    #[test]
    fn zero_weights_are_a_fixed_point() {
        let cell = ConvLstmCell::zeros(2, 3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor4::uniform((1, 2, 4, 4), 5.0, &mut rng).unwrap();
        let s0 = LayerState::zeros(3, 4, 4).unwrap();
        let t = cell.step_trace(&x, &s0).unwrap();
        assert!(t.input_gate.data().iter().all(|&v| v == 0.5));
        assert!(t.cell.data().iter().all(|&v| v == 0.0));
        assert!(t.hidden.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_step_matches_hand_evaluation() {
        let mut cell = ConvLstmCell::zeros(1, 1, 1).unwrap();
        cell.candidate.input.weight = scalar(1.0);
        let s0 = LayerState::zeros(1, 1, 1).unwrap();
        let t = cell.step_trace(&scalar(1.0), &s0).unwrap();
        let c1 = 0.5 * 1f64.tanh();
        let h1 = 0.5 * c1.tanh();
        assert_eq!(t.input_gate.data()[0], 0.5);
        assert_eq!(t.forget_gate.data()[0], 0.5);
        assert!((t.output_gate.data()[0] - 0.5).abs() < 1e-12);
        assert!((t.cell.data()[0] - c1).abs() < 1e-12);
        assert!((t.hidden.data()[0] - h1).abs() < 1e-12);
        assert!((t.cell.data()[0] - 0.380797).abs() < 1e-6);
        assert!((t.hidden.data()[0] - 0.18170).abs() < 1e-5);
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        let mut cell = ConvLstmCell::zeros(1, 2, 3).unwrap();
        cell.forget_gate.input.bias = vec![20.0, 20.0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c0 = Tensor4::uniform((1, 2, 3, 3), 2.0, &mut rng).unwrap();
        let s0 = LayerState {
            hidden: Tensor4::zeros((1, 2, 3, 3)).unwrap(),
            cell: c0.clone(),
        };
        let x = Tensor4::uniform((1, 1, 3, 3), 1.0, &mut rng).unwrap();
        let (_, s1) = cell.step(&x, &s0).unwrap();
        for (a, b) in s1.cell.data().iter().zip(c0.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn output_peephole_sees_updated_cell() {
        // With only W_co and a candidate path active, o depends on C_t, not C_{t-1} = 0.
        let mut cell = ConvLstmCell::zeros(1, 1, 1).unwrap();
        cell.candidate.input.weight = scalar(1.0);
        cell.output_gate.peephole = Some(scalar(3.0));
        let s0 = LayerState::zeros(1, 1, 1).unwrap();
        let t = cell.step_trace(&scalar(1.0), &s0).unwrap();
        let c1 = 0.5 * 1f64.tanh();
        let o = crate::tensor::sigmoid(3.0 * c1);
        assert!((t.output_gate.data()[0] - o).abs() < 1e-15);
    }

    #[test]
    fn parameter_count_examples() {
        assert_eq!(parameter_count(&ConvLstmCell::zeros(2, 3, 1).unwrap()), 99);
        assert_eq!(parameter_count(&ConvLstmCell::zeros(1, 1, 1).unwrap()), 15);
        let cell = ConvLstmCell::zeros(4, 5, 3).unwrap();
        assert_eq!(parameter_count(&cell), cell.parameter_total());
    }

    #[test]
    fn rejects_bad_geometry() {
        let cell = ConvLstmCell::zeros(2, 3, 3).unwrap();
        let s = LayerState::zeros(3, 4, 4).unwrap();
        assert!(matches!(
            cell.step(&Tensor4::zeros((1, 1, 4, 4)).unwrap(), &s),
            Err(ConvLstmError::InputChannels { .. })
        ));
        assert!(matches!(
            cell.step(&Tensor4::zeros((1, 2, 5, 4)).unwrap(), &s),
            Err(ConvLstmError::StateShape { .. })
        ));
        assert!(matches!(
            ConvLstmCell::zeros(2, 3, 2),
            Err(ConvLstmError::EvenKernel(2))
        ));
        let stack = ConvLstmStack::new(vec![cell], 0.0).unwrap();
        assert_eq!(
            stack.forward_sequence(&[], None, None).unwrap_err(),
            ConvLstmError::EmptySequence
        );
        assert!(matches!(
            ConvLstmStack::new(
                vec![
                    ConvLstmCell::zeros(2, 3, 3).unwrap(),
                    ConvLstmCell::zeros(2, 3, 3).unwrap()
                ],
                0.0
            ),
            Err(ConvLstmError::LayerChain { .. })
        ));
        assert!(matches!(
            ConvLstmStack::new(vec![ConvLstmCell::zeros(1, 1, 1).unwrap()], 1.0),
            Err(ConvLstmError::Dropout(_))
        ));
    }

    #[test]
    fn single_frame_sequence_equals_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = ConvLstmStack::init(2, 3, 3, 1, 0.0, &mut rng).unwrap();
        let x = Tensor4::uniform((1, 2, 5, 5), 1.0, &mut rng).unwrap();
        let (outs, state) = stack
            .forward_sequence(std::slice::from_ref(&x), None, None)
            .unwrap();
        let (h, s) = stack.layers()[0]
            .step(&x, &LayerState::zeros(3, 5, 5).unwrap())
            .unwrap();
        assert_eq!(outs[0], h);
        assert_eq!(state.layers[0], s);
    }

    #[test]
    fn stacked_zero_weights_give_zero_outputs() {
        let stack = ConvLstmStack::new(
            vec![
                ConvLstmCell::zeros(2, 3, 3).unwrap(),
                ConvLstmCell::zeros(3, 3, 3).unwrap(),
            ],
            0.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames: Vec<_> = (0..4)
            .map(|_| Tensor4::uniform((1, 2, 3, 3), 1.0, &mut rng).unwrap())
            .collect();
        let (outs, _) = stack.forward_sequence(&frames, None, None).unwrap();
        assert!(outs.iter().all(|o| o.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn dropout_only_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack = ConvLstmStack::init(1, 4, 3, 2, 0.5, &mut rng).unwrap();
        let frames: Vec<_> = (0..3)
            .map(|_| Tensor4::uniform((1, 1, 4, 4), 1.0, &mut rng).unwrap())
            .collect();
        let (a, _) = stack.forward_sequence(&frames, None, None).unwrap();
        let (b, _) = stack.forward_sequence(&frames, None, None).unwrap();
        assert_eq!(a, b);
        let mut drng = ChaCha8Rng::seed_from_u64(3);
        let (c, _) = stack
            .forward_sequence(&frames, None, Some(&mut drng))
            .unwrap();
        assert_ne!(a, c);
    }
}
