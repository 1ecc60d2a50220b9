//! Feed-forward layer graphs, forward traces, and reverse-mode propagation.

use std::ops::Range;

use super::layer::{
    adaptive_backward, conv_backward, linear_backward, log_softmax_backward, maxpool_route, Layer,
    LayerKind, ParamGrads,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Below this input difference the DeepLIFT rescale multiplier falls back to
/// the ordinary local gradient.
pub const RESCALE_EPSILON: f64 = 1e-7;

/// An ordered chain of layers. Immutable graphs are `Sync` and may be shared
/// by concurrent forward/backward calls.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerGraph {
    layers: Vec<Layer>,
    /// Declared `(channels, height, width)` of one input sample.
    input_chw: Option<[usize; 3]>,
}

impl LayerGraph {
    pub fn new(layers: Vec<Layer>) -> Self {
        LayerGraph {
            layers,
            input_chw: None,
        }
    }

    /// Builds a graph that only accepts `(N, c, h, w)` batches and verifies
    /// that the layer chain is shape-consistent for that input.
    pub fn with_input(layers: Vec<Layer>, chw: [usize; 3]) -> Result<Self> {
        let graph = LayerGraph {
            layers,
            input_chw: Some(chw),
        };
        graph.shape_chain(&[1, chw[0], chw[1], chw[2]])?;
        Ok(graph)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_chw(&self) -> Option<[usize; 3]> {
        self.input_chw
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Shapes after every layer for a given input shape (first entry is the
    /// input itself).
    pub fn shape_chain(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![input.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| at_layer(e, i))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Number of leading layers that produce the logits, i.e. every layer
    /// except a trailing LogSoftmax.
    pub fn logit_depth(&self) -> usize {
        match self.layers.last() {
            Some(Layer::LogSoftmax) => self.layers.len() - 1,
            _ => self.layers.len(),
        }
    }

    pub fn last_index_of(&self, kind: LayerKind) -> Option<usize> {
        self.layers.iter().rposition(|l| l.kind() == kind)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .all(|(w, b)| w.is_finite() && b.is_finite())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if let Some([c, h, w]) = self.input_chw {
            match input.shape() {
                [_, ic, ih, iw] if *ic == c && *ih == h && *iw == w => {}
                other => {
                    return Err(Error::LayerShape {
                        layer: 0,
                        kind: "input",
                        expected: format!("(N, {c}, {h}, {w})"),
                        actual: other.to_vec(),
                    })
                }
            }
        }
        Ok(())
    }
}

fn at_layer(err: Error, index: usize) -> Error {
    match err {
        Error::LayerShape {
            kind,
            expected,
            actual,
            ..
        } => Error::LayerShape {
            layer: index,
            kind,
            expected,
            actual,
        },
        other => other,
    }
}

/// Activations retained by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Tensor>,
    output: Tensor,
    argmax: Vec<Option<Vec<usize>>>,
}

impl ForwardTrace {
    /// Number of recorded layers.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, layer: usize) -> &Tensor {
        &self.inputs[layer]
    }

    pub fn output(&self, layer: usize) -> &Tensor {
        self.inputs.get(layer + 1).unwrap_or(&self.output)
    }

    pub fn network_input(&self) -> &Tensor {
        self.inputs.first().unwrap_or(&self.output)
    }

    pub fn network_output(&self) -> &Tensor {
        &self.output
    }

    pub fn argmax(&self, layer: usize) -> Option<&[usize]> {
        self.argmax[layer].as_deref()
    }
}

/// Runs every layer and keeps the trace.
pub fn network_forward(graph: &LayerGraph, input: &Tensor) -> Result<(Tensor, ForwardTrace)> {
    let trace = forward_trace(graph, input)?;
    Ok((trace.output.clone(), trace))
}

pub fn forward_trace(graph: &LayerGraph, input: &Tensor) -> Result<ForwardTrace> {
    graph.check_input(input)?;
    let mut inputs = Vec::with_capacity(graph.len());
    let mut argmax = Vec::with_capacity(graph.len());
    let mut current = input.clone();
    for (i, layer) in graph.layers.iter().enumerate() {
        let out = layer.forward_full(&current).map_err(|e| at_layer(e, i))?;
        inputs.push(std::mem::replace(&mut current, out.output));
        argmax.push(out.argmax);
    }
    Ok(ForwardTrace {
        inputs,
        output: current,
        argmax,
    })
}

/// Forward pass without retaining activations.
pub fn predict(graph: &LayerGraph, input: &Tensor) -> Result<Tensor> {
    graph.check_input(input)?;
    let mut current = input.clone();
    for (i, layer) in graph.layers.iter().enumerate() {
        current = layer.forward(&current).map_err(|e| at_layer(e, i))?;
    }
    Ok(current)
}

/// How nonlinear layers propagate signals backward.
#[derive(Debug, Clone, Copy)]
pub enum BackwardRule<'a> {
    /// Ordinary chain rule.
    Standard,
    /// Chain rule, except ReLUs also zero negative incoming gradients.
    Guided,
    /// DeepLIFT rescale multipliers against a reference forward trace.
    /// Linear layers and LogSoftmax use the chain rule.
    Rescale { baseline: &'a ForwardTrace },
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Gradient with respect to the input of the first differentiated layer.
    pub input: Tensor,
    /// One entry per layer in the differentiated range; `Some` for layers
    /// with parameters when parameter gradients were requested.
    pub params: Vec<Option<ParamGrads>>,
}

/// Full reverse pass: gradients of `<output, output_grad>` with respect to
/// the network input and every parameter.
pub fn network_backward(
    graph: &LayerGraph,
    trace: &ForwardTrace,
    output_grad: &Tensor,
    rule: BackwardRule<'_>,
) -> Result<Gradients> {
    backward_range(graph, trace, 0..graph.len(), output_grad, rule, true)
}

/// Reverse pass over `layers` only. `grad` is taken with respect to the
/// output of `layers.end - 1` and the result is with respect to the input of
/// `layers.start`.
pub fn backward_range(
    graph: &LayerGraph,
    trace: &ForwardTrace,
    layers: Range<usize>,
    grad: &Tensor,
    rule: BackwardRule<'_>,
    want_params: bool,
) -> Result<Gradients> {
    let (input, params) = backward_impl(graph, trace, layers, grad, rule, want_params, true)?;
    Ok(Gradients {
        input: input.expect("input gradient requested"),
        params,
    })
}

/// Parameter gradients only; skips the input gradient of the first layer.
pub fn param_gradients(
    graph: &LayerGraph,
    trace: &ForwardTrace,
    output_grad: &Tensor,
) -> Result<Vec<Option<ParamGrads>>> {
    let (_, params) = backward_impl(
        graph,
        trace,
        0..graph.len(),
        output_grad,
        BackwardRule::Standard,
        true,
        false,
    )?;
    Ok(params)
}

type BackwardParts = (Option<Tensor>, Vec<Option<ParamGrads>>);

fn backward_impl(
    graph: &LayerGraph,
    trace: &ForwardTrace,
    layers: Range<usize>,
    grad: &Tensor,
    rule: BackwardRule<'_>,
    want_params: bool,
    want_input: bool,
) -> Result<BackwardParts> {
    if trace.len() != graph.len() || layers.end > graph.len() || layers.start > layers.end {
        return Err(Error::Autodiff(format!(
            "trace of {} layers cannot drive layers {layers:?} of a {}-layer graph",
            trace.len(),
            graph.len()
        )));
    }
    let end_shape = match layers.end {
        0 => trace.network_input().shape(),
        end => trace.output(end - 1).shape(),
    };
    if grad.shape() != end_shape {
        return Err(Error::Autodiff(format!(
            "output gradient has shape {:?}, expected {:?}",
            grad.shape(),
            end_shape
        )));
    }
    if let BackwardRule::Rescale { baseline } = rule {
        check_baseline(trace, baseline)?;
    }

    let mut params: Vec<Option<ParamGrads>> = vec![None; layers.len()];
    let mut g = grad.clone();
    for i in layers.clone().rev() {
        let layer = &graph.layers[i];
        let x = trace.input(i);
        let need_dx = want_input || i > layers.start;
        let next = match layer {
            Layer::Conv2d(conv) => {
                let (dx, pg) = conv_backward(conv, x, &g, need_dx, want_params);
                params[i - layers.start] = pg;
                dx
            }
            Layer::Linear(lin) => {
                let (dx, pg) = linear_backward(lin, x, &g, need_dx, want_params);
                params[i - layers.start] = pg;
                dx
            }
            Layer::Relu => Some(relu_backward(x, &g, rule, i)),
            Layer::MaxPool2d { .. } => Some(match rule {
                BackwardRule::Rescale { baseline } => maxpool_rescale(trace, baseline, i, &g),
                _ => maxpool_route(
                    x.shape(),
                    trace.argmax(i).expect("max-pool records argmax"),
                    g.data(),
                ),
            }),
            Layer::AdaptiveAvgPool2d { .. } => Some(adaptive_backward(x.shape(), &g)),
            Layer::LogSoftmax => Some(log_softmax_backward(trace.output(i), &g)),
        };
        match next {
            Some(next) => g = next,
            None => return Ok((None, params)),
        }
    }
    Ok((Some(g), params))
}

fn check_baseline(trace: &ForwardTrace, baseline: &ForwardTrace) -> Result<()> {
    if baseline.len() != trace.len() {
        return Err(Error::Autodiff(format!(
            "rescale baseline trace has {} layers, expected {}",
            baseline.len(),
            trace.len()
        )));
    }
    for i in 0..trace.len() {
        if baseline.input(i).shape() != trace.input(i).shape() {
            return Err(Error::Autodiff(format!(
                "rescale baseline activation {i} has shape {:?}, expected {:?}",
                baseline.input(i).shape(),
                trace.input(i).shape()
            )));
        }
    }
    Ok(())
}

fn relu_backward(x: &Tensor, g: &Tensor, rule: BackwardRule<'_>, layer: usize) -> Tensor {
    let data: Vec<f64> = match rule {
        BackwardRule::Standard => x
            .data()
            .iter()
            .zip(g.data())
            .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
            .collect(),
        BackwardRule::Guided => x
            .data()
            .iter()
            .zip(g.data())
            .map(|(&xv, &gv)| if xv > 0.0 && gv > 0.0 { gv } else { 0.0 })
            .collect(),
        BackwardRule::Rescale { baseline } => {
            let xr = baseline.input(layer).data();
            x.data()
                .iter()
                .zip(xr)
                .zip(g.data())
                .map(|((&xv, &rv), &gv)| gv * rescale_multiplier(xv, rv))
                .collect()
        }
    };
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// DeepLIFT rescale multiplier of a ReLU with input `x` and reference `r`.
pub fn rescale_multiplier(x: f64, r: f64) -> f64 {
    let dx = x - r;
    if dx.abs() < RESCALE_EPSILON {
        if x > 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (x.max(0.0) - r.max(0.0)) / dx
    }
}

/// Max-pool multipliers under the rescale rule. In each window with input
/// argmax `p` and reference argmax `q`, `dx[q] <= y - y_ref <= dx[p]`, so the
/// output difference is a convex combination `l dx[p] + (1 - l) dx[q]`; `p`
/// receives multiplier `l` and `q` receives `1 - l`. Multipliers stay in
/// `[0, 1]` and each window's contributions sum to `y - y_ref`. When the
/// argmaxes agree this is the ordinary gradient.
fn maxpool_rescale(
    trace: &ForwardTrace,
    baseline: &ForwardTrace,
    layer: usize,
    g: &Tensor,
) -> Tensor {
    let x = trace.input(layer).data();
    let xr = baseline.input(layer).data();
    let am = trace.argmax(layer).expect("argmax");
    let amr = baseline.argmax(layer).expect("argmax");
    let mut m = vec![0.0; x.len()];
    for (j, &gj) in g.data().iter().enumerate() {
        let (p, q) = (am[j], amr[j]);
        if p == q {
            m[p] += gj;
            continue;
        }
        let (dp, dq) = (x[p] - xr[p], x[q] - xr[q]);
        let dy = x[p] - xr[q];
        let span = dp - dq;
        let l = if span < RESCALE_EPSILON {
            1.0
        } else {
            ((dy - dq) / span).clamp(0.0, 1.0)
        };
        m[p] += gj * l;
        m[q] += gj * (1.0 - l);
    }
    Tensor::from_parts(trace.input(layer).shape().to_vec(), m)
}

/// Number of parameter and input coordinates probed by
/// [`finite_difference_check`].
pub const FD_PARAM_SAMPLES: usize = 128;
pub const FD_INPUT_SAMPLES: usize = 128;
pub const FD_STEP: f64 = 1e-5;

/// Compares standard-rule gradients with central differences of
/// `<output, r>` for a seeded random `r` on a seeded sample of parameter and
/// input coordinates. Returns the largest relative error, measured with
/// denominator `max(|a|, |b|, 1e-8)`.
pub fn finite_difference_check(graph: &LayerGraph, input: &Tensor, seed: u64) -> Result<f64> {
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace = forward_trace(graph, input)?;
    let probe = Tensor::from_parts(
        trace.network_output().shape().to_vec(),
        (0..trace.network_output().len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    );
    let grads = network_backward(graph, &trace, &probe, BackwardRule::Standard)?;
    // outputs are differenced before projecting so rounding scales with
    // each output rather than with the whole objective; the divisor is the
    // representable step actually taken
    let central = |plus: &Tensor, minus: &Tensor, span: f64| -> f64 {
        plus.data()
            .iter()
            .zip(minus.data())
            .zip(probe.data())
            .map(|((a, b), r)| (a - b) * r)
            .sum::<f64>()
            / span
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);

    // (layer, is_bias, offset) for every parameter coordinate
    let mut coords = Vec::new();
    for (li, layer) in graph.layers().iter().enumerate() {
        if let Some((w, b)) = layer.params() {
            coords.extend((0..w.len()).map(|o| (li, false, o)));
            coords.extend((0..b.len()).map(|o| (li, true, o)));
        }
    }
    fn slot(graph: &mut LayerGraph, (li, is_bias, off): (usize, bool, usize)) -> &mut f64 {
        let (w, b) = graph.layers_mut()[li].params_mut().expect("params");
        if is_bias {
            &mut b.data_mut()[off]
        } else {
            &mut w.data_mut()[off]
        }
    }
    let mut worst: f64 = 0.0;
    let mut scratch = graph.clone();
    let picks = sample(&mut rng, coords.len(), FD_PARAM_SAMPLES.min(coords.len()));
    for k in picks.into_iter() {
        let (li, is_bias, off) = coords[k];
        let pg = grads.params[li].as_ref().expect("parameter gradient");
        let analytic = if is_bias {
            pg.bias.data()[off]
        } else {
            pg.weight.data()[off]
        };
        let orig = *slot(&mut scratch, coords[k]);
        let (hi, lo) = (orig + FD_STEP, orig - FD_STEP);
        *slot(&mut scratch, coords[k]) = hi;
        let plus = predict(&scratch, input)?;
        *slot(&mut scratch, coords[k]) = lo;
        let minus = predict(&scratch, input)?;
        *slot(&mut scratch, coords[k]) = orig;
        worst = worst.max(rel(analytic, central(&plus, &minus, hi - lo)));
    }
    let picks = sample(&mut rng, input.len(), FD_INPUT_SAMPLES.min(input.len()));
    let mut x = input.clone();
    for k in picks.into_iter() {
        let orig = x.data()[k];
        let (hi, lo) = (orig + FD_STEP, orig - FD_STEP);
        x.data_mut()[k] = hi;
        let plus = predict(graph, &x)?;
        x.data_mut()[k] = lo;
        let minus = predict(graph, &x)?;
        x.data_mut()[k] = orig;
        worst = worst.max(rel(grads.input.data()[k], central(&plus, &minus, hi - lo)));
    }
    Ok(worst)
}
