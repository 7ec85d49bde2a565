//! Stacked convolutional LSTM with peephole connections, plus its exact
//! backward pass (backpropagation through time), written out by hand.
//!
//! One cell step, all convolutions same-padded, `∘` elementwise:
//!
//! ```text
//! i  = σ(W_xi * x + W_hi * h + W_ci ∘ c + b_i)
//! f  = σ(W_xf * x + W_hf * h + W_cf ∘ c + b_f)
//! g  = tanh(W_xc * x + W_hc * h + b_c)
//! c' = f ∘ c + i ∘ g
//! o  = σ(W_xo * x + W_ho * h + W_co ∘ c' + b_o)
//! h' = o ∘ tanh(c')
//! ```
//!
//! The peephole weights W_ci/W_cf/W_co multiply the cell state
//! elementwise and are therefore shaped like the state itself (C×H×W),
//! not like conv kernels. Note o peeks at the NEW state c'.
//!
//! Layers stack by feeding h' upward; a 1×1 convolution plus a sigmoid
//! turns the top hidden state back into a single-channel map.
//!
//! The backward pass differentiates exactly these equations; every term
//! (including both peephole paths into c and the conv transposes) is
//! checked against central differences in the tests.

use crate::prob_map::ProbMap;
use crate::tensor::{
    conv2d, conv2d_acc, conv2d_backward_bias_acc, conv2d_backward_input_acc,
    conv2d_backward_kernels_acc, Scalar, Tensor,
};
use crate::{Error, Result};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

#[cfg(not(feature = "std"))]
use num_traits::Float as _;

/// Compile-time description of a stack: how many channels flow through
/// each layer and the spatial extent the peephole weights are tied to.
#[derive(Debug, Clone, PartialEq)]
pub struct StackLayout {
    pub input_channels: usize,
    /// Hidden width per layer, listed input side first.
    pub hidden_channels: Vec<usize>,
    pub kernel_size: usize,
    pub height: usize,
    pub width: usize,
}

impl StackLayout {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0
            || self.hidden_channels.is_empty()
            || self.hidden_channels.iter().any(|&c| c == 0)
            || self.height == 0
            || self.width == 0
        {
            return Err(Error::Config {
                message: format!("degenerate stack layout: {self:?}"),
            });
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config {
                message: format!("kernel size must be odd, got {}", self.kernel_size),
            });
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.kernel_size / 2
    }
}

/// Parameters of one cell. Kernels are `out×in×K×K`, peephole weights are
/// state-shaped `C×H×W`, biases per-channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmCell<T> {
    pub w_xi: Tensor<T>,
    pub w_hi: Tensor<T>,
    pub w_xf: Tensor<T>,
    pub w_hf: Tensor<T>,
    pub w_xc: Tensor<T>,
    pub w_hc: Tensor<T>,
    pub w_xo: Tensor<T>,
    pub w_ho: Tensor<T>,
    pub w_ci: Tensor<T>,
    pub w_cf: Tensor<T>,
    pub w_co: Tensor<T>,
    pub b_i: Tensor<T>,
    pub b_f: Tensor<T>,
    pub b_c: Tensor<T>,
    pub b_o: Tensor<T>,
}

/// Canonical tensor order used everywhere parameters are enumerated
/// (optimizer state, checkpoints, gradient containers).
pub const CELL_TENSOR_NAMES: [&str; 15] = [
    "w_xi", "w_hi", "w_xf", "w_hf", "w_xc", "w_hc", "w_xo", "w_ho", "w_ci", "w_cf", "w_co",
    "b_i", "b_f", "b_c", "b_o",
];

impl<T: Scalar> ConvLstmCell<T> {
    /// Fresh cell with uniform `±1/√fan_in` kernels, zero peepholes, and
    /// biases zero except the forget gate, which starts at 1 so memory is
    /// initially kept.
    pub fn init(
        in_ch: usize,
        hidden: usize,
        k: usize,
        height: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let x_shape = [hidden, in_ch, k, k];
        let h_shape = [hidden, hidden, k, k];
        let state_shape = [hidden, height, width];
        let x_bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        let h_bound = 1.0 / ((hidden * k * k) as f64).sqrt();
        let mut uniform = |shape: &[usize], bound: f64| {
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = T::from((rng.gen::<f64>() * 2.0 - 1.0) * bound).unwrap();
            }
            t
        };
        Self {
            w_xi: uniform(&x_shape, x_bound),
            w_hi: uniform(&h_shape, h_bound),
            w_xf: uniform(&x_shape, x_bound),
            w_hf: uniform(&h_shape, h_bound),
            w_xc: uniform(&x_shape, x_bound),
            w_hc: uniform(&h_shape, h_bound),
            w_xo: uniform(&x_shape, x_bound),
            w_ho: uniform(&h_shape, h_bound),
            w_ci: Tensor::zeros(&state_shape),
            w_cf: Tensor::zeros(&state_shape),
            w_co: Tensor::zeros(&state_shape),
            b_i: Tensor::zeros(&[hidden]),
            b_f: Tensor::full(&[hidden], T::one()),
            b_c: Tensor::zeros(&[hidden]),
            b_o: Tensor::zeros(&[hidden]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_xi: self.w_xi.zeros_like(),
            w_hi: self.w_hi.zeros_like(),
            w_xf: self.w_xf.zeros_like(),
            w_hf: self.w_hf.zeros_like(),
            w_xc: self.w_xc.zeros_like(),
            w_hc: self.w_hc.zeros_like(),
            w_xo: self.w_xo.zeros_like(),
            w_ho: self.w_ho.zeros_like(),
            w_ci: self.w_ci.zeros_like(),
            w_cf: self.w_cf.zeros_like(),
            w_co: self.w_co.zeros_like(),
            b_i: self.b_i.zeros_like(),
            b_f: self.b_f.zeros_like(),
            b_c: self.b_c.zeros_like(),
            b_o: self.b_o.zeros_like(),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 15] {
        [
            ("w_xi", &self.w_xi),
            ("w_hi", &self.w_hi),
            ("w_xf", &self.w_xf),
            ("w_hf", &self.w_hf),
            ("w_xc", &self.w_xc),
            ("w_hc", &self.w_hc),
            ("w_xo", &self.w_xo),
            ("w_ho", &self.w_ho),
            ("w_ci", &self.w_ci),
            ("w_cf", &self.w_cf),
            ("w_co", &self.w_co),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_c", &self.b_c),
            ("b_o", &self.b_o),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 15] {
        [
            ("w_xi", &mut self.w_xi),
            ("w_hi", &mut self.w_hi),
            ("w_xf", &mut self.w_xf),
            ("w_hf", &mut self.w_hf),
            ("w_xc", &mut self.w_xc),
            ("w_hc", &mut self.w_hc),
            ("w_xo", &mut self.w_xo),
            ("w_ho", &mut self.w_ho),
            ("w_ci", &mut self.w_ci),
            ("w_cf", &mut self.w_cf),
            ("w_co", &mut self.w_co),
            ("b_i", &mut self.b_i),
            ("b_f", &mut self.b_f),
            ("b_c", &mut self.b_c),
            ("b_o", &mut self.b_o),
        ]
    }

    fn hidden(&self) -> usize {
        self.w_xi.shape()[0]
    }

    fn in_channels(&self) -> usize {
        self.w_xi.shape()[1]
    }

    fn kernel(&self) -> usize {
        self.w_xi.shape()[2]
    }
}

/// Recurrent state of one layer: hidden activation and cell memory, both
/// `C×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            h: Tensor::zeros(&[channels, height, width]),
            c: Tensor::zeros(&[channels, height, width]),
        }
    }
}

/// Gate activations retained from a forward step; exactly what the
/// backward pass needs, nothing more.
#[derive(Debug, Clone)]
pub struct CellActivations<T> {
    pub i: Tensor<T>,
    pub f: Tensor<T>,
    pub g: Tensor<T>,
    pub o: Tensor<T>,
    pub c_new: Tensor<T>,
    pub tanh_c: Tensor<T>,
}

/// One cell step, keeping the intermediate activations.
pub fn cell_forward_traced<T: Scalar>(
    x: &Tensor<T>,
    state: &LstmState<T>,
    p: &ConvLstmCell<T>,
) -> Result<(LstmState<T>, CellActivations<T>)> {
    let pad = p.kernel() / 2;
    let (xc, _, _) = x.dims3("cell_forward input")?;
    if xc != p.in_channels() {
        return Err(Error::Shape {
            context: "cell_forward input channels",
            expected: vec![p.in_channels()],
            got: vec![xc],
        });
    }
    if state.h.shape() != p.w_ci.shape() || state.c.shape() != p.w_ci.shape() {
        return Err(Error::Shape {
            context: "cell_forward state",
            expected: p.w_ci.shape().to_vec(),
            got: state.h.shape().to_vec(),
        });
    }

    let mut pre_i = conv2d(x, &p.w_xi, &p.b_i, pad)?;
    conv2d_acc(&mut pre_i, &state.h, &p.w_hi, pad)?;
    pre_i.accumulate_hadamard(&p.w_ci, &state.c)?;
    let i = pre_i.sigmoid();

    let mut pre_f = conv2d(x, &p.w_xf, &p.b_f, pad)?;
    conv2d_acc(&mut pre_f, &state.h, &p.w_hf, pad)?;
    pre_f.accumulate_hadamard(&p.w_cf, &state.c)?;
    let f = pre_f.sigmoid();

    let mut pre_g = conv2d(x, &p.w_xc, &p.b_c, pad)?;
    conv2d_acc(&mut pre_g, &state.h, &p.w_hc, pad)?;
    let g = pre_g.tanh();

    let mut c_new = f.hadamard(&state.c)?;
    c_new.accumulate_hadamard(&i, &g)?;

    let mut pre_o = conv2d(x, &p.w_xo, &p.b_o, pad)?;
    conv2d_acc(&mut pre_o, &state.h, &p.w_ho, pad)?;
    pre_o.accumulate_hadamard(&p.w_co, &c_new)?;
    let o = pre_o.sigmoid();

    let tanh_c = c_new.tanh();
    let h_new = o.hadamard(&tanh_c)?;

    Ok((
        LstmState {
            h: h_new,
            c: c_new.clone(),
        },
        CellActivations {
            i,
            f,
            g,
            o,
            c_new,
            tanh_c,
        },
    ))
}

/// One cell step, discarding the trace.
pub fn cell_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &LstmState<T>,
    p: &ConvLstmCell<T>,
) -> Result<LstmState<T>> {
    cell_forward_traced(x, state, p).map(|(s, _)| s)
}

/// Full model: the layer cells plus the 1×1 read-out convolution mapping
/// the top hidden state to a single-channel map (through a sigmoid).
#[derive(Debug, Clone, PartialEq)]
pub struct StackParams<T> {
    layers: Vec<ConvLstmCell<T>>,
    head_kernel: Tensor<T>,
    head_bias: Tensor<T>,
}

impl<T: Scalar> StackParams<T> {
    pub fn init(layout: &StackLayout, rng: &mut impl Rng) -> Result<Self> {
        layout.validate()?;
        let mut layers = Vec::with_capacity(layout.hidden_channels.len());
        let mut in_ch = layout.input_channels;
        for &hidden in &layout.hidden_channels {
            layers.push(ConvLstmCell::init(
                in_ch,
                hidden,
                layout.kernel_size,
                layout.height,
                layout.width,
                rng,
            ));
            in_ch = hidden;
        }
        let top = *layout.hidden_channels.last().expect("validated non-empty");
        let bound = 1.0 / (top as f64).sqrt();
        let mut head_kernel = Tensor::zeros(&[1, top, 1, 1]);
        for v in head_kernel.data_mut() {
            *v = T::from((rng.gen::<f64>() * 2.0 - 1.0) * bound).unwrap();
        }
        Ok(Self {
            layers,
            head_kernel,
            head_bias: Tensor::zeros(&[1]),
        })
    }

    /// Rebuilds a stack from raw parts (checkpoint restore); shapes are
    /// validated against each other.
    pub fn from_parts(
        layers: Vec<ConvLstmCell<T>>,
        head_kernel: Tensor<T>,
        head_bias: Tensor<T>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config {
                message: "stack needs at least one layer".into(),
            });
        }
        let top = layers.last().unwrap().hidden();
        let (hc, hcin, kh, kw) = head_kernel.dims4("StackParams head kernel")?;
        if (hc, hcin, kh, kw) != (1, top, 1, 1) {
            return Err(Error::Shape {
                context: "StackParams head kernel",
                expected: vec![1, top, 1, 1],
                got: vec![hc, hcin, kh, kw],
            });
        }
        let stack = Self {
            layers,
            head_kernel,
            head_bias,
        };
        stack.layout().validate()?;
        Ok(stack)
    }

    pub fn layers(&self) -> &[ConvLstmCell<T>] {
        &self.layers
    }

    pub fn head(&self) -> (&Tensor<T>, &Tensor<T>) {
        (&self.head_kernel, &self.head_bias)
    }

    /// Layout reconstructed from tensor shapes.
    pub fn layout(&self) -> StackLayout {
        let state = self.layers[0].w_ci.shape();
        StackLayout {
            input_channels: self.layers[0].in_channels(),
            hidden_channels: self.layers.iter().map(|l| l.hidden()).collect(),
            kernel_size: self.layers[0].kernel(),
            height: state[1],
            width: state[2],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(ConvLstmCell::zeros_like).collect(),
            head_kernel: self.head_kernel.zeros_like(),
            head_bias: self.head_bias.zeros_like(),
        }
    }

    pub fn tensor_count(&self) -> usize {
        self.layers.len() * 15 + 2
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// All tensors in canonical order with stable labels
    /// (`layer2.w_xi`, ..., `head.kernel`, `head.bias`).
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(self.tensor_count());
        for (li, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layer{li}.{name}"), t));
            }
        }
        out.push(("head.kernel".into(), &self.head_kernel));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::with_capacity(self.layers.len() * 15 + 2);
        for (li, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.tensors_mut() {
                out.push((format!("layer{li}.{name}"), t));
            }
        }
        out.push(("head.kernel".into(), &mut self.head_kernel));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }

    /// Global L2 norm over every parameter (or gradient) tensor.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for (_, t) in self.tensors() {
            acc += t.sq_sum().to_f64().unwrap_or(f64::NAN);
        }
        acc.sqrt()
    }

    pub fn is_all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_all_finite())
    }

    /// Scales every tensor in place (gradient clipping).
    pub fn scale_all(&mut self, factor: T) {
        for (_, t) in self.tensors_mut() {
            t.scale_inplace(factor);
        }
    }

    /// Elementwise accumulation across the whole container.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape {
                context: "StackParams::accumulate",
                expected: vec![self.layers.len()],
                got: vec![other.layers.len()],
            });
        }
        let theirs = other.tensors();
        for ((_, mine), (_, t)) in self.tensors_mut().into_iter().zip(theirs) {
            mine.accumulate(t)?;
        }
        Ok(())
    }
}

/// Running state for incremental stepping (autoregressive rollouts keep
/// one of these per pedestrian).
#[derive(Debug, Clone)]
pub struct StackRun<'p, T: Scalar> {
    params: &'p StackParams<T>,
    states: Vec<LstmState<T>>,
}

impl<'p, T: Scalar> StackRun<'p, T> {
    pub fn new(params: &'p StackParams<T>) -> Self {
        let layout = params.layout();
        let states = layout
            .hidden_channels
            .iter()
            .map(|&c| LstmState::zeros(c, layout.height, layout.width))
            .collect();
        Self { params, states }
    }

    pub fn states(&self) -> &[LstmState<T>] {
        &self.states
    }

    /// Feeds one input map, returns the predicted next map.
    pub fn step(&mut self, input: &ProbMap<T>) -> Result<ProbMap<T>> {
        let layout = self.params.layout();
        let (c, h, w) = input.tensor().dims3("StackRun::step input")?;
        if (c, h, w) != (layout.input_channels, layout.height, layout.width) {
            return Err(Error::Shape {
                context: "StackRun::step input",
                expected: vec![layout.input_channels, layout.height, layout.width],
                got: vec![c, h, w],
            });
        }
        let mut x = input.tensor().clone();
        for (layer, state) in self.params.layers.iter().zip(&mut self.states) {
            let new_state = cell_forward(&x, state, layer)?;
            x = new_state.h.clone();
            *state = new_state;
        }
        let logits = conv2d(&x, &self.params.head_kernel, &self.params.head_bias, 0)?;
        ProbMap::from_tensor(input.spec(), logits.sigmoid())
    }
}

/// Runs the stack over a whole input sequence from zero states, producing
/// one predicted map per input step (the prediction targets step t+1).
pub fn stack_forward<T: Scalar>(
    inputs: &[ProbMap<T>],
    params: &StackParams<T>,
) -> Result<Vec<ProbMap<T>>> {
    if inputs.is_empty() {
        return Err(Error::Argument {
            context: "stack_forward",
            message: "empty input sequence".into(),
        });
    }
    let mut run = StackRun::new(params);
    inputs.iter().map(|m| run.step(m)).collect()
}

/// Everything the backward pass needs from a traced forward run.
pub struct StackTape<T> {
    /// Input tensor per step (layer 0's x).
    inputs: Vec<Tensor<T>>,
    /// `[layer][t]` gate activations.
    acts: Vec<Vec<CellActivations<T>>>,
    /// `[layer][t]` hidden outputs.
    hidden: Vec<Vec<Tensor<T>>>,
    /// Post-sigmoid head output per step.
    head_out: Vec<Tensor<T>>,
}

impl<T: Scalar> StackTape<T> {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn head_out(&self, t: usize) -> &Tensor<T> {
        &self.head_out[t]
    }
}

/// Forward pass retaining the tape. Predictions are returned as maps on
/// the input grid; the tape holds the raw tensors.
pub fn stack_forward_traced<T: Scalar>(
    inputs: &[ProbMap<T>],
    params: &StackParams<T>,
) -> Result<(Vec<ProbMap<T>>, StackTape<T>)> {
    if inputs.is_empty() {
        return Err(Error::Argument {
            context: "stack_forward_traced",
            message: "empty input sequence".into(),
        });
    }
    let layout = params.layout();
    let n_layers = params.layers.len();
    let steps = inputs.len();
    let mut states: Vec<LstmState<T>> = layout
        .hidden_channels
        .iter()
        .map(|&c| LstmState::zeros(c, layout.height, layout.width))
        .collect();
    let mut tape = StackTape {
        inputs: Vec::with_capacity(steps),
        acts: vec![Vec::with_capacity(steps); n_layers],
        hidden: vec![Vec::with_capacity(steps); n_layers],
        head_out: Vec::with_capacity(steps),
    };
    let mut preds = Vec::with_capacity(steps);
    for input in inputs {
        let (c, h, w) = input.tensor().dims3("stack_forward input")?;
        if (c, h, w) != (layout.input_channels, layout.height, layout.width) {
            return Err(Error::Shape {
                context: "stack_forward input",
                expected: vec![layout.input_channels, layout.height, layout.width],
                got: vec![c, h, w],
            });
        }
        tape.inputs.push(input.tensor().clone());
        let mut x = input.tensor().clone();
        for (li, layer) in params.layers.iter().enumerate() {
            let (new_state, act) = cell_forward_traced(&x, &states[li], layer)?;
            x = new_state.h.clone();
            tape.acts[li].push(act);
            tape.hidden[li].push(new_state.h.clone());
            states[li] = new_state;
        }
        let logits = conv2d(&x, &params.head_kernel, &params.head_bias, 0)?;
        let out = logits.sigmoid();
        tape.head_out.push(out.clone());
        preds.push(ProbMap::from_tensor(input.spec(), out)?);
    }
    Ok((preds, tape))
}

/// `out = a ∘ gate ∘ (1 - gate)`: upstream times the logistic derivative.
fn sigmoid_backward<T: Scalar>(a: &Tensor<T>, gate: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.shape(), gate.shape());
    let mut out = a.clone();
    for (dst, &s) in out.data_mut().iter_mut().zip(gate.data()) {
        *dst = *dst * s * (T::one() - s);
    }
    out
}

/// `out = a ∘ (1 - tanh_v²)`: upstream times the tanh derivative, where
/// `tanh_v` is the already-applied tanh value.
fn tanh_backward<T: Scalar>(a: &Tensor<T>, tanh_v: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.shape(), tanh_v.shape());
    let mut out = a.clone();
    for (dst, &tv) in out.data_mut().iter_mut().zip(tanh_v.data()) {
        *dst = *dst * (T::one() - tv * tv);
    }
    out
}

/// Gradients of a summed-over-steps loss with respect to every parameter,
/// by backpropagation through time.
///
/// `out_grads[t]` is dLoss/dPrediction at step `t` (same `1×H×W` shape as
/// the head output; all-zero where a step is unsupervised). The returned
/// container mirrors `params` tensor-for-tensor.
pub fn stack_backward<T: Scalar>(
    params: &StackParams<T>,
    tape: &StackTape<T>,
    out_grads: &[Tensor<T>],
) -> Result<StackParams<T>> {
    let steps = tape.steps();
    if out_grads.len() != steps {
        return Err(Error::Shape {
            context: "stack_backward out_grads",
            expected: vec![steps],
            got: vec![out_grads.len()],
        });
    }
    let layout = params.layout();
    let pad = layout.padding();
    let (hh, ww) = (layout.height, layout.width);
    let n_layers = params.layers.len();
    let mut grads = params.zeros_like();

    // Head backward: dLoss/dh_top per step, plus head parameter grads.
    let mut dh_seq: Vec<Tensor<T>> = Vec::with_capacity(steps);
    for t in 0..steps {
        let pred = &tape.head_out[t];
        let d_logits = sigmoid_backward(&out_grads[t], pred);
        conv2d_backward_kernels_acc(&mut grads.head_kernel, &tape.hidden[n_layers - 1][t], &d_logits, 0)?;
        conv2d_backward_bias_acc(&mut grads.head_bias, &d_logits)?;
        let mut dh = Tensor::zeros(tape.hidden[n_layers - 1][t].shape());
        conv2d_backward_input_acc(&mut dh, &params.head_kernel, &d_logits, 0)?;
        dh_seq.push(dh);
    }

    // Layers top to bottom; within a layer, time reversed.
    for li in (0..n_layers).rev() {
        let layer = &params.layers[li];
        let g_layer = &mut grads.layers[li];
        let state_shape = layer.w_ci.shape().to_vec();
        let zero_state = Tensor::<T>::zeros(&state_shape);
        let in_ch = layer.in_channels();
        let mut dh_carry = zero_state.clone();
        let mut dc_carry = zero_state.clone();
        let mut dx_seq: Vec<Tensor<T>> = vec![Tensor::zeros(&[in_ch, hh, ww]); steps];
        for t in (0..steps).rev() {
            let act = &tape.acts[li][t];
            let x_t = if li == 0 {
                &tape.inputs[t]
            } else {
                &tape.hidden[li - 1][t]
            };
            let (h_prev, c_prev) = if t == 0 {
                (&zero_state, &zero_state)
            } else {
                (&tape.hidden[li][t - 1], &tape.acts[li][t - 1].c_new)
            };

            // dLoss/dh' = upstream (head or layer above) + recurrent carry
            let mut dh = dh_seq[t].clone();
            dh.accumulate(&dh_carry)?;

            // h' = o ∘ tanh(c')
            let d_o = dh.hadamard(&act.tanh_c)?;
            let d_pre_o = sigmoid_backward(&d_o, &act.o);

            // c' gets three upstream contributions: the next step's carry,
            // h' through tanh, and o's peephole W_co ∘ c'.
            let mut dc = dc_carry.clone();
            {
                let dh_tanh = dh.hadamard(&act.o)?;
                dc.accumulate(&tanh_backward(&dh_tanh, &act.tanh_c))?;
            }
            dc.accumulate_hadamard(&d_pre_o, &layer.w_co)?;

            // output gate parameters
            g_layer.w_co.accumulate_hadamard(&d_pre_o, &act.c_new)?;
            conv2d_backward_bias_acc(&mut g_layer.b_o, &d_pre_o)?;
            conv2d_backward_kernels_acc(&mut g_layer.w_xo, x_t, &d_pre_o, pad)?;
            conv2d_backward_input_acc(&mut dx_seq[t], &layer.w_xo, &d_pre_o, pad)?;

            // c' = f ∘ c + i ∘ g
            let d_i = dc.hadamard(&act.g)?;
            let d_f = dc.hadamard(c_prev)?;
            let d_g = dc.hadamard(&act.i)?;
            let d_pre_i = sigmoid_backward(&d_i, &act.i);
            let d_pre_f = sigmoid_backward(&d_f, &act.f);
            let d_pre_g = tanh_backward(&d_g, &act.g);

            // peepholes into i and f read the previous cell state
            g_layer.w_ci.accumulate_hadamard(&d_pre_i, c_prev)?;
            g_layer.w_cf.accumulate_hadamard(&d_pre_f, c_prev)?;
            conv2d_backward_bias_acc(&mut g_layer.b_i, &d_pre_i)?;
            conv2d_backward_bias_acc(&mut g_layer.b_f, &d_pre_f)?;
            conv2d_backward_bias_acc(&mut g_layer.b_c, &d_pre_g)?;

            conv2d_backward_kernels_acc(&mut g_layer.w_xi, x_t, &d_pre_i, pad)?;
            conv2d_backward_kernels_acc(&mut g_layer.w_xf, x_t, &d_pre_f, pad)?;
            conv2d_backward_kernels_acc(&mut g_layer.w_xc, x_t, &d_pre_g, pad)?;
            conv2d_backward_input_acc(&mut dx_seq[t], &layer.w_xi, &d_pre_i, pad)?;
            conv2d_backward_input_acc(&mut dx_seq[t], &layer.w_xf, &d_pre_f, pad)?;
            conv2d_backward_input_acc(&mut dx_seq[t], &layer.w_xc, &d_pre_g, pad)?;

            // recurrent convolutions: gradients flow to h_{t-1};
            // at t = 0 the previous state is the zero constant, so both
            // the kernel gradients and the carry vanish.
            if t > 0 {
                conv2d_backward_kernels_acc(&mut g_layer.w_ho, h_prev, &d_pre_o, pad)?;
                conv2d_backward_kernels_acc(&mut g_layer.w_hi, h_prev, &d_pre_i, pad)?;
                conv2d_backward_kernels_acc(&mut g_layer.w_hf, h_prev, &d_pre_f, pad)?;
                conv2d_backward_kernels_acc(&mut g_layer.w_hc, h_prev, &d_pre_g, pad)?;
                let mut dh_prev = zero_state.clone();
                conv2d_backward_input_acc(&mut dh_prev, &layer.w_ho, &d_pre_o, pad)?;
                conv2d_backward_input_acc(&mut dh_prev, &layer.w_hi, &d_pre_i, pad)?;
                conv2d_backward_input_acc(&mut dh_prev, &layer.w_hf, &d_pre_f, pad)?;
                conv2d_backward_input_acc(&mut dh_prev, &layer.w_hc, &d_pre_g, pad)?;
                dh_carry = dh_prev;

                // dc_{t-1} = dc ∘ f + peephole paths through i and f
                let mut dc_prev = dc.hadamard(&act.f)?;
                dc_prev.accumulate_hadamard(&d_pre_i, &layer.w_ci)?;
                dc_prev.accumulate_hadamard(&d_pre_f, &layer.w_cf)?;
                dc_carry = dc_prev;
            }
        }
        dh_seq = dx_seq;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob_map::GridSpec;
    use crate::tensor::{finite_diff_grad, max_relative_error};
    use crate::WorldPoint;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = (rng.gen::<f64>() * 2.0 - 1.0) * scale;
        }
        t
    }

    /// Cell with every tensor (peepholes included) random, so all backward
    /// paths carry signal.
    fn rand_cell(
        in_ch: usize,
        hidden: usize,
        k: usize,
        h: usize,
        w: usize,
        rng: &mut ChaCha8Rng,
    ) -> ConvLstmCell<f64> {
        let mut cell = ConvLstmCell::init(in_ch, hidden, k, h, w, rng);
        for (_, t) in cell.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = rand_tensor(&shape, rng, 0.4);
        }
        cell
    }

    fn rand_params(layout: &StackLayout, rng: &mut ChaCha8Rng) -> StackParams<f64> {
        let mut params = StackParams::init(layout, rng).unwrap();
        for (_, t) in params.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = rand_tensor(&shape, rng, 0.4);
        }
        params
    }

    fn grid(h: usize, w: usize) -> GridSpec {
        GridSpec::new(w, h, WorldPoint::new(0.0, 0.0), 0.1).unwrap()
    }

    fn rand_maps(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<ProbMap<f64>> {
        let spec = grid(h, w);
        (0..n)
            .map(|_| {
                let mut t = Tensor::zeros(&[1, h, w]);
                for v in t.data_mut() {
                    *v = rng.gen::<f64>();
                }
                ProbMap::from_tensor(&spec, t).unwrap()
            })
            .collect()
    }

    // ---- independent scripted reference, scalar loops only ----

    type Vol = Vec<Vec<Vec<f64>>>; // [channel][row][col]

    fn vol_zeros(c: usize, h: usize, w: usize) -> Vol {
        vec![vec![vec![0.0; w]; h]; c]
    }

    fn to_vol(t: &Tensor<f64>) -> Vol {
        let (c, h, w) = t.dims3("test to_vol").unwrap();
        let mut out = vol_zeros(c, h, w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[ci][y][x] = t.get(&[ci, y, x]);
                }
            }
        }
        out
    }

    fn kernels_to_vols(t: &Tensor<f64>) -> Vec<Vol> {
        let (o, c, kh, kw) = t.dims4("test kernels_to_vols").unwrap();
        (0..o)
            .map(|oi| {
                let mut k = vol_zeros(c, kh, kw);
                for ci in 0..c {
                    for y in 0..kh {
                        for x in 0..kw {
                            k[ci][y][x] = t.get(&[oi, ci, y, x]);
                        }
                    }
                }
                k
            })
            .collect()
    }

    /// Direct same-padded cross-correlation, one multiply at a time.
    fn naive_conv(x: &Vol, kernels: &[Vol], bias: &[f64], pad: usize) -> Vol {
        let (c_in, h, w) = (x.len(), x[0].len(), x[0][0].len());
        let k = kernels[0][0].len();
        let mut out = vol_zeros(kernels.len(), h, w);
        for (o, ker) in kernels.iter().enumerate() {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[o];
                    for c in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad as isize;
                                let ix = xx as isize + kx as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[c][iy as usize][ix as usize] * ker[c][ky][kx];
                                }
                            }
                        }
                    }
                    out[o][y][xx] = acc;
                }
            }
        }
        out
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// The six cell equations transcribed with plain scalar arithmetic.
    fn scripted_cell(x: &Vol, h: &Vol, c: &Vol, p: &ConvLstmCell<f64>) -> (Vol, Vol) {
        let pad = p.kernel() / 2;
        let bias = |t: &Tensor<f64>| t.data().to_vec();
        let pre_i = naive_conv(x, &kernels_to_vols(&p.w_xi), &bias(&p.b_i), pad);
        let pre_i_h = naive_conv(h, &kernels_to_vols(&p.w_hi), &vec![0.0; p.hidden()], pad);
        let pre_f = naive_conv(x, &kernels_to_vols(&p.w_xf), &bias(&p.b_f), pad);
        let pre_f_h = naive_conv(h, &kernels_to_vols(&p.w_hf), &vec![0.0; p.hidden()], pad);
        let pre_g = naive_conv(x, &kernels_to_vols(&p.w_xc), &bias(&p.b_c), pad);
        let pre_g_h = naive_conv(h, &kernels_to_vols(&p.w_hc), &vec![0.0; p.hidden()], pad);
        let pre_o = naive_conv(x, &kernels_to_vols(&p.w_xo), &bias(&p.b_o), pad);
        let pre_o_h = naive_conv(h, &kernels_to_vols(&p.w_ho), &vec![0.0; p.hidden()], pad);
        let w_ci = to_vol(&p.w_ci);
        let w_cf = to_vol(&p.w_cf);
        let w_co = to_vol(&p.w_co);
        let (ch, hh, ww) = (w_ci.len(), w_ci[0].len(), w_ci[0][0].len());
        let mut c_new = vol_zeros(ch, hh, ww);
        let mut h_new = vol_zeros(ch, hh, ww);
        for ci in 0..ch {
            for y in 0..hh {
                for xx in 0..ww {
                    let i = sig(pre_i[ci][y][xx] + pre_i_h[ci][y][xx] + w_ci[ci][y][xx] * c[ci][y][xx]);
                    let f = sig(pre_f[ci][y][xx] + pre_f_h[ci][y][xx] + w_cf[ci][y][xx] * c[ci][y][xx]);
                    let g = (pre_g[ci][y][xx] + pre_g_h[ci][y][xx]).tanh();
                    let cn = f * c[ci][y][xx] + i * g;
                    let o = sig(pre_o[ci][y][xx] + pre_o_h[ci][y][xx] + w_co[ci][y][xx] * cn);
                    c_new[ci][y][xx] = cn;
                    h_new[ci][y][xx] = o * cn.tanh();
                }
            }
        }
        (h_new, c_new)
    }

    #[test]
    fn cell_matches_scripted_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (in_ch, hidden, k, h, w) = (2, 3, 3, 4, 5);
        let p = rand_cell(in_ch, hidden, k, h, w, &mut rng);
        let x = rand_tensor(&[in_ch, h, w], &mut rng, 1.0);
        let state = LstmState {
            h: rand_tensor(&[hidden, h, w], &mut rng, 0.8),
            c: rand_tensor(&[hidden, h, w], &mut rng, 0.8),
        };
        let (next, _) = cell_forward_traced(&x, &state, &p).unwrap();
        let (h_ref, c_ref) = scripted_cell(&to_vol(&x), &to_vol(&state.h), &to_vol(&state.c), &p);
        for ci in 0..hidden {
            for y in 0..h {
                for xx in 0..w {
                    let dh = (next.h.get(&[ci, y, xx]) - h_ref[ci][y][xx]).abs();
                    let dc = (next.c.get(&[ci, y, xx]) - c_ref[ci][y][xx]).abs();
                    assert!(dh < 1e-12, "h mismatch at ({ci},{y},{xx}): {dh}");
                    assert!(dc < 1e-12, "c mismatch at ({ci},{y},{xx}): {dc}");
                }
            }
        }
    }

    #[test]
    fn hidden_output_stays_inside_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = rand_cell(1, 4, 3, 6, 6, &mut rng);
        let mut state = LstmState::zeros(4, 6, 6);
        for _ in 0..8 {
            let x = rand_tensor(&[1, 6, 6], &mut rng, 3.0);
            state = cell_forward(&x, &state, &p).unwrap();
            assert!(state.c.is_all_finite());
            for &v in state.h.data() {
                assert!(v.abs() < 1.0, "|h| must stay below 1, got {v}");
            }
        }
    }

    #[test]
    fn init_sets_forget_bias_high_and_bounds_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = StackLayout {
            input_channels: 1,
            hidden_channels: vec![4, 2],
            kernel_size: 3,
            height: 5,
            width: 5,
        };
        let params = StackParams::<f64>::init(&layout, &mut rng).unwrap();
        for layer in params.layers() {
            assert!(layer.b_f.data().iter().all(|&b| b == 1.0));
            assert!(layer.b_i.data().iter().all(|&b| b == 0.0));
            assert!(layer.w_ci.data().iter().all(|&v| v == 0.0));
            let bound = 1.0 / ((layer.in_channels() * 9) as f64).sqrt();
            assert!(layer.w_xi.data().iter().all(|&v| v.abs() <= bound));
            let hbound = 1.0 / ((layer.hidden() * 9) as f64).sqrt();
            assert!(layer.w_ho.data().iter().all(|&v| v.abs() <= hbound));
        }
        assert_eq!(params.layout(), layout);
        let again = StackParams::<f64>::init(&layout, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(params, again);
        let other = StackParams::<f64>::init(&layout, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_ne!(params, other);
    }

    #[test]
    fn tensor_labels_follow_declared_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layout = StackLayout {
            input_channels: 1,
            hidden_channels: vec![2, 2],
            kernel_size: 3,
            height: 3,
            width: 3,
        };
        let params = StackParams::<f32>::init(&layout, &mut rng).unwrap();
        let labels: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(labels.len(), 32);
        assert_eq!(labels[0], "layer0.w_xi");
        assert_eq!(labels[14], "layer0.b_o");
        assert_eq!(labels[15], "layer1.w_xi");
        assert_eq!(labels[30], "head.kernel");
        assert_eq!(labels[31], "head.bias");
        for (idx, name) in CELL_TENSOR_NAMES.iter().enumerate() {
            assert_eq!(labels[idx], format!("layer0.{name}"));
        }
        for (a, b) in params.tensors().iter().zip(params.layers()[0].tensors()) {
            assert_eq!(a.0.strip_prefix("layer0.").unwrap_or("head"), b.0);
            if a.0.starts_with("head") {
                break;
            }
        }
    }

    #[test]
    fn stack_run_matches_batch_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layout = StackLayout {
            input_channels: 1,
            hidden_channels: vec![3, 2],
            kernel_size: 3,
            height: 5,
            width: 4,
        };
        let params = rand_params(&layout, &mut rng);
        let inputs = rand_maps(6, 5, 4, &mut rng);
        let batch = stack_forward(&inputs, &params).unwrap();
        assert_eq!(batch.len(), 6);
        let mut run = StackRun::new(&params);
        for (input, expect) in inputs.iter().zip(&batch) {
            let got = run.step(input).unwrap();
            assert_eq!(got.tensor(), expect.tensor());
            for &v in got.tensor().data() {
                assert!(v > 0.0 && v < 1.0, "sigmoid output must lie in (0,1)");
            }
        }
        let (traced, tape) = stack_forward_traced(&inputs, &params).unwrap();
        assert_eq!(tape.steps(), 6);
        for (a, b) in traced.iter().zip(&batch) {
            assert_eq!(a.tensor(), b.tensor());
        }
    }

    #[test]
    fn zero_loss_gradient_backpropagates_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layout = StackLayout {
            input_channels: 1,
            hidden_channels: vec![2],
            kernel_size: 3,
            height: 4,
            width: 4,
        };
        let params = rand_params(&layout, &mut rng);
        let inputs = rand_maps(3, 4, 4, &mut rng);
        let (_, tape) = stack_forward_traced(&inputs, &params).unwrap();
        let zeros = vec![Tensor::<f64>::zeros(&[1, 4, 4]); 3];
        let grads = stack_backward(&params, &tape, &zeros).unwrap();
        for (name, t) in grads.tensors() {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name} expected zero grad");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let layout = StackLayout {
            input_channels: 1,
            hidden_channels: vec![2, 2],
            kernel_size: 3,
            height: 4,
            width: 4,
        };
        let params = rand_params(&layout, &mut rng);
        let inputs = rand_maps(3, 4, 4, &mut rng);
        let targets: Vec<Tensor<f64>> = (0..3)
            .map(|_| rand_tensor(&[1, 4, 4], &mut rng, 0.5))
            .collect();

        // L = sum over steps and cells of (pred - target)^2
        let loss = |preds: &[ProbMap<f64>]| -> f64 {
            preds
                .iter()
                .zip(&targets)
                .map(|(p, t)| {
                    p.tensor()
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(&a, &b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum()
        };

        let (preds, tape) = stack_forward_traced(&inputs, &params).unwrap();
        let out_grads: Vec<Tensor<f64>> = preds
            .iter()
            .zip(&targets)
            .map(|(p, t)| {
                let mut g = p.tensor().clone();
                for (gv, &tv) in g.data_mut().iter_mut().zip(t.data()) {
                    *gv = 2.0 * (*gv - tv);
                }
                g
            })
            .collect();
        let analytic = stack_backward(&params, &tape, &out_grads).unwrap();

        let n = params.tensor_count();
        for idx in 0..n {
            let base = {
                let list = params.tensors();
                list[idx].1.clone()
            };
            let f = |probe: &Tensor<f64>| -> crate::Result<f64> {
                let mut trial = params.clone();
                *trial.tensors_mut()[idx].1 = probe.clone();
                let preds = stack_forward(&inputs, &trial)?;
                Ok(loss(&preds))
            };
            let numeric = finite_diff_grad(f, &base, 1e-5).unwrap();
            let (label, analytic_t) = {
                let list = analytic.tensors();
                (list[idx].0.clone(), list[idx].1.clone())
            };
            let err = max_relative_error(&analytic_t, &numeric, 1e-4).unwrap();
            assert!(err < 1e-5, "{label}: gradient mismatch, rel err {err:.3e}");
        }
    }

    #[test]
    fn rejects_malformed_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layout = StackLayout {
            input_channels: 1,
            hidden_channels: vec![2],
            kernel_size: 3,
            height: 4,
            width: 4,
        };
        let params = StackParams::<f64>::init(&layout, &mut rng).unwrap();
        let empty: [ProbMap<f64>; 0] = [];
        assert!(matches!(
            stack_forward(&empty, &params),
            Err(Error::Argument { .. })
        ));
        let wrong = rand_maps(1, 5, 5, &mut rng);
        assert!(matches!(
            stack_forward(&wrong, &params),
            Err(Error::Shape { .. })
        ));
        let bad_layout = StackLayout {
            kernel_size: 4,
            ..layout
        };
        assert!(matches!(
            StackParams::<f64>::init(&bad_layout, &mut rng),
            Err(Error::Config { .. })
        ));
    }
}
