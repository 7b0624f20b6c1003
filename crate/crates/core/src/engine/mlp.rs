//! Fully-connected stacks on the tape, and their input gradients as graphs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Gradients, NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{HexaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Softmax,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Softmax => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Linear,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Softmax,
            _ => return None,
        })
    }
}

/// `act(x · weight + bias)`, with `weight: in×out` and `bias: 1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(HexaError::contract("an MLP needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            let (fan_in, fan_out) = l.weight.dims();
            if l.bias.dims() != (1, fan_out) {
                return Err(HexaError::dim(
                    "mlp",
                    format!("layer {i}: bias {:?} for weight {:?}", l.bias.shape(), l.weight.shape()),
                ));
            }
            if i > 0 && layers[i - 1].weight.cols() != fan_in {
                return Err(HexaError::dim(
                    "mlp",
                    format!(
                        "layer {i} expects {fan_in} inputs but layer {} emits {}",
                        i - 1,
                        layers[i - 1].weight.cols()
                    ),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// He-initialised weights (std `sqrt(2/fan_in)`), zero biases.
    pub fn he_init<R: Rng + ?Sized>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        Self::build(widths, activations, |fan_in, n| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| normal.sample(rng)).collect()
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn xavier_init<R: Rng + ?Sized>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        let mut fan_out_of = widths.iter().skip(1);
        Self::build(widths, activations, |fan_in, n| {
            let fan_out = *fan_out_of.next().expect("one per layer");
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-limit..limit)).collect()
        })
    }

    pub fn zeros(widths: &[usize], activations: &[Activation]) -> Result<Self> {
        Self::build(widths, activations, |_, n| vec![0.0; n])
    }

    fn build(widths: &[usize], activations: &[Activation], mut weights: impl FnMut(usize, usize) -> Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 {
            return Err(HexaError::contract(format!(
                "{} widths need {} activations, got {}",
                widths.len(),
                widths.len().saturating_sub(1),
                activations.len()
            )));
        }
        if widths.contains(&0) {
            return Err(HexaError::contract(format!("zero-width layer in {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| Layer {
                weight: Tensor::from_matrix(w[0], w[1], weights(w[0], w[0] * w[1])).expect("sized"),
                bias: Tensor::zeros(1, w[1]),
                activation,
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(|l| l.weight.cols()));
        w
    }

    /// Weight then bias, layer by layer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Registers the parameters on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let params = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.parameter(l.weight.clone()), tape.parameter(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        BoundMlp {
            params,
            activations: self.layers.iter().map(|l| l.activation).collect(),
            input_width: self.input_width(),
        }
    }

    /// Forward pass on a throwaway tape.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false);
        let xi = tape.constant(x.clone());
        let trace = net.forward(&mut tape, xi)?;
        Ok(tape.value(trace.output()).clone())
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    params: Vec<(NodeId, NodeId)>,
    activations: Vec<Activation>,
    input_width: usize,
}

/// Node ids recorded by [`BoundMlp::forward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: NodeId,
    pub pre: Vec<NodeId>,
    pub post: Vec<NodeId>,
}

impl ForwardTrace {
    pub fn output(&self) -> NodeId {
        *self.post.last().expect("non-empty")
    }
}

impl BoundMlp {
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.params.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn weight_id(&self, layer: usize) -> NodeId {
        self.params[layer].0
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<ForwardTrace> {
        let width = tape.value(x).cols();
        if width != self.input_width {
            return Err(HexaError::dim(
                "mlp_forward",
                format!("network expects {} inputs, got {:?}", self.input_width, tape.value(x).shape()),
            ));
        }
        let mut h = x;
        let mut pre = Vec::with_capacity(self.params.len());
        let mut post = Vec::with_capacity(self.params.len());
        for (&(w, b), &act) in self.params.iter().zip(&self.activations) {
            let lin = tape.matmul(h, w)?;
            let a = tape.add(lin, b)?;
            h = match act {
                Activation::Linear => a,
                Activation::Relu => tape.relu(a)?,
                Activation::Sigmoid => tape.sigmoid(a)?,
                Activation::Softmax => tape.softmax_rows(a)?,
            };
            pre.push(a);
            post.push(h);
        }
        Ok(ForwardTrace { input: x, pre, post })
    }

    /// Parameter gradients in [`Mlp::params`] order.
    pub fn grads(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.param_ids().into_iter().map(|id| grads.take(id)).collect()
    }
}

/// Repeats every row of `node` `times` times, consecutively.
fn repeat_rows(tape: &mut Tape, node: NodeId, times: usize) -> Result<NodeId> {
    if times == 1 {
        return Ok(node);
    }
    let b = tape.value(node).rows();
    let mut sel = Tensor::zeros(b * times, b);
    for j in 0..b {
        for k in 0..times {
            sel.set(j * times + k, j, 1.0);
        }
    }
    let sel = tape.constant(sel);
    tape.matmul(sel, node)
}

/// `act'(pre)` for one layer, repeated per requested unit, as a node that can
/// be multiplied into the backward chain. ReLU masks are constants; sigmoid
/// slopes stay on the graph so they are differentiated too.
fn activation_slope(tape: &mut Tape, act: Activation, pre: NodeId, post: NodeId, times: usize) -> Result<Option<NodeId>> {
    match act {
        Activation::Linear => Ok(None),
        Activation::Relu => {
            let v = tape.value(pre);
            let (b, c) = v.dims();
            let mut mask = Vec::with_capacity(b * times * c);
            for j in 0..b {
                let row: Vec<f64> = v.row(j).iter().map(|&p| if p > 0.0 { 1.0 } else { 0.0 }).collect();
                for _ in 0..times {
                    mask.extend_from_slice(&row);
                }
            }
            Ok(Some(tape.constant(Tensor::from_matrix(b * times, c, mask)?)))
        }
        Activation::Sigmoid => {
            let (b, c) = tape.value(post).dims();
            let ones = tape.constant(Tensor::ones(b, c));
            let comp = tape.sub(ones, post)?;
            let slope = tape.hadamard(post, comp)?;
            Ok(Some(repeat_rows(tape, slope, times)?))
        }
        Activation::Softmax => Err(HexaError::contract(
            "input gradients through a softmax layer are not supported",
        )),
    }
}

/// Rows of the input Jacobian of a recorded forward pass, as a graph.
///
/// The result has `b·units.len()` rows; row `j·units.len() + k` is
/// `∇_x output[j, units[k]]`. It is built from transposed-weight matmuls and
/// activation slopes, so `backward` on any function of it differentiates with
/// respect to the network weights.
pub fn input_jacobian(tape: &mut Tape, net: &BoundMlp, trace: &ForwardTrace, units: &[usize]) -> Result<NodeId> {
    let out_width = tape.value(trace.output()).cols();
    let b = tape.value(trace.input).rows();
    let u = units.len();
    if u == 0 {
        return Err(HexaError::contract("input_jacobian needs at least one unit"));
    }
    if let Some(&bad) = units.iter().find(|&&k| k >= out_width) {
        return Err(HexaError::contract(format!(
            "unit {bad} out of range for output width {out_width}"
        )));
    }
    let mut seed = Tensor::zeros(b * u, out_width);
    for j in 0..b {
        for (k, &unit) in units.iter().enumerate() {
            seed.set(j * u + k, unit, 1.0);
        }
    }
    let mut g = tape.constant(seed);
    let n_layers = net.activations.len();
    for l in (0..n_layers).rev() {
        if let Some(slope) = activation_slope(tape, net.activations[l], trace.pre[l], trace.post[l], u)? {
            g = tape.hadamard(g, slope)?;
        }
        let wt = tape.transpose(net.weight_id(l))?;
        g = tape.matmul(g, wt)?;
    }
    Ok(g)
}

/// `∇_x output[unit]` for every row of `x`, as a `b×in` node.
pub fn input_gradient_graph(tape: &mut Tape, net: &BoundMlp, x: NodeId, unit: usize) -> Result<NodeId> {
    let trace = net.forward(tape, x)?;
    input_jacobian(tape, net, &trace, &[unit])
}
