//! Layer kinds, their forward rules, and the linear parts of their backward
//! rules. Nonlinear backward rules (ReLU, max-pool) live next to the
//! propagation rules in [`super::graph`].

use std::fmt;

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Conv2d,
    Relu,
    MaxPool2d,
    AdaptiveAvgPool2d,
    Linear,
    LogSoftmax,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv2d => "Conv2D",
            LayerKind::Relu => "ReLU",
            LayerKind::MaxPool2d => "MaxPool2D",
            LayerKind::AdaptiveAvgPool2d => "AdaptiveAvgPool2D",
            LayerKind::Linear => "Linear",
            LayerKind::LogSoftmax => "LogSoftmax",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out_channels, in_channels, kh, kw)`
    pub weight: Tensor,
    /// `(out_channels)`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 || bias.shape() != [ws[0]] || stride == 0 {
            return Err(Error::Autodiff(format!(
                "Conv2D needs weight (out,in,kh,kw) and bias (out) with stride >= 1, got {:?} / {:?} / stride {stride}",
                ws,
                bias.shape()
            )));
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn zeros(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Conv2d {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw {
            return None;
        }
        Some(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(out_features, in_features)`
    pub weight: Tensor,
    /// `(out_features)`
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || bias.shape() != [ws[0]] {
            return Err(Error::Autodiff(format!(
                "Linear needs weight (out,in) and bias (out), got {:?} / {:?}",
                ws,
                bias.shape()
            )));
        }
        Ok(Linear { weight, bias })
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[out_features, in_features]),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    AdaptiveAvgPool2d {
        out_h: usize,
        out_w: usize,
    },
    /// Flattens all non-batch axes of its input.
    Linear(Linear),
    /// Normalizes over the last axis of an `(N, C)` input.
    LogSoftmax,
}

/// Output of a single layer's forward pass.
pub(crate) struct LayerOutput {
    pub output: Tensor,
    /// Flat input index selected by each max-pool output element.
    pub argmax: Option<Vec<usize>>,
}

fn shape_err(kind: LayerKind, expected: impl Into<String>, actual: &[usize]) -> Error {
    Error::LayerShape {
        layer: 0,
        kind: kind_name(kind),
        expected: expected.into(),
        actual: actual.to_vec(),
    }
}

fn kind_name(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv2d => "Conv2D",
        LayerKind::Relu => "ReLU",
        LayerKind::MaxPool2d => "MaxPool2D",
        LayerKind::AdaptiveAvgPool2d => "AdaptiveAvgPool2D",
        LayerKind::Linear => "Linear",
        LayerKind::LogSoftmax => "LogSoftmax",
    }
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool2d { .. } => LayerKind::MaxPool2d,
            Layer::AdaptiveAvgPool2d { .. } => LayerKind::AdaptiveAvgPool2d,
            Layer::Linear(_) => LayerKind::Linear,
            Layer::LogSoftmax => LayerKind::LogSoftmax,
        }
    }

    /// Weight and bias, for kinds that carry parameters.
    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Conv2d(c) => Some((&c.weight, &c.bias)),
            Layer::Linear(l) => Some((&l.weight, &l.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv2d(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Linear(l) => Some((&mut l.weight, &mut l.bias)),
            _ => None,
        }
    }

    /// Shape produced for a given input shape, or a diagnostic when the
    /// input violates the layer's contract. Errors carry layer index 0; the
    /// graph rewrites it.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let kind = self.kind();
        match self {
            Layer::Conv2d(conv) => {
                let expected = format!("(N, {}, H, W)", conv.in_channels());
                let [n, c, h, w] = input[..] else {
                    return Err(shape_err(kind, expected, input));
                };
                if c != conv.in_channels() {
                    return Err(shape_err(kind, expected, input));
                }
                let (oh, ow) = conv.output_hw(h, w).ok_or_else(|| {
                    shape_err(kind, "spatial size at least the kernel size", input)
                })?;
                Ok(vec![n, conv.out_channels(), oh, ow])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2d { kernel, stride } => {
                let [n, c, h, w] = input[..] else {
                    return Err(shape_err(kind, "(N, C, H, W)", input));
                };
                if h < *kernel || w < *kernel || *stride == 0 {
                    return Err(shape_err(kind, format!("H, W >= {kernel}"), input));
                }
                Ok(vec![
                    n,
                    c,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            Layer::AdaptiveAvgPool2d { out_h, out_w } => {
                let [n, c, _, _] = input[..] else {
                    return Err(shape_err(kind, "(N, C, H, W)", input));
                };
                Ok(vec![n, c, *out_h, *out_w])
            }
            Layer::Linear(lin) => {
                let features: usize = input.iter().skip(1).product();
                if input.len() < 2 || features != lin.in_features() {
                    return Err(shape_err(
                        kind,
                        format!("(N, ...) with {} trailing elements", lin.in_features()),
                        input,
                    ));
                }
                Ok(vec![input[0], lin.out_features()])
            }
            Layer::LogSoftmax => {
                if input.len() != 2 {
                    return Err(shape_err(kind, "(N, C)", input));
                }
                Ok(input.to_vec())
            }
        }
    }

    pub(crate) fn forward_full(&self, input: &Tensor) -> Result<LayerOutput> {
        let out_shape = self.output_shape(input.shape())?;
        let mut argmax = None;
        let output = match self {
            Layer::Conv2d(conv) => conv_forward(conv, input, &out_shape),
            Layer::Relu => input.map(|v| v.max(0.0)),
            Layer::MaxPool2d { kernel, stride } => {
                let (out, idx) = maxpool_forward(input, *kernel, *stride, &out_shape);
                argmax = Some(idx);
                out
            }
            Layer::AdaptiveAvgPool2d { .. } => adaptive_forward(input, &out_shape),
            Layer::Linear(lin) => linear_forward(lin, input),
            Layer::LogSoftmax => log_softmax(input),
        };
        Ok(LayerOutput { output, argmax })
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward_full(input)?.output)
    }
}

/// Applies one layer to an input.
pub fn layer_forward(layer: &Layer, input: &Tensor) -> Result<Tensor> {
    layer.forward(input)
}

/// Output columns `ox` whose input column `ox * stride + offset - pad` lies in
/// `[0, len)`.
fn valid_range(
    out_len: usize,
    len: usize,
    stride: usize,
    offset: usize,
    pad: usize,
) -> (usize, usize) {
    // ox * stride + offset >= pad  and  ox * stride + offset < len + pad
    let lo = pad.saturating_sub(offset).div_ceil(stride);
    let hi = if len + pad > offset {
        ((len + pad - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one sample `(C, H, W)` into a `(C*kh*kw) x (OH*OW)` row-major
/// column matrix. `cols` must be zeroed by the caller.
#[allow(clippy::too_many_arguments)]
fn im2col(
    conv: &Conv2d,
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let (kh, kw) = conv.kernel();
    let (s, p) = (conv.stride, conv.padding);
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            let (oy0, oy1) = valid_range(oh, h, s, ki, p);
            for kj in 0..kw {
                let (ox0, ox1) = valid_range(ow, w, s, kj, p);
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in oy0..oy1 {
                    let iy = oy * s + ki - p;
                    let src_row = &src[iy * w..(iy + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if ox0 >= ox1 {
                        continue;
                    }
                    let ix0 = ox0 * s + kj - p;
                    if s == 1 {
                        dst_row[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for (d, &v) in dst_row[ox0..ox1]
                            .iter_mut()
                            .zip(src_row[ix0..].iter().step_by(s))
                        {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates a column-matrix gradient back into one sample's input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im(
    conv: &Conv2d,
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let (kh, kw) = conv.kernel();
    let (s, p) = (conv.stride, conv.padding);
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            let (oy0, oy1) = valid_range(oh, h, s, ki, p);
            for kj in 0..kw {
                let (ox0, ox1) = valid_range(ow, w, s, kj, p);
                if ox0 >= ox1 {
                    continue;
                }
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in oy0..oy1 {
                    let iy = oy * s + ki - p;
                    let dst_row = &mut dst[iy * w..(iy + 1) * w];
                    let src_row = &src[oy * ow + ox0..oy * ow + ox1];
                    let ix0 = ox0 * s + kj - p;
                    if s == 1 {
                        for (d, &g) in dst_row[ix0..ix0 + src_row.len()].iter_mut().zip(src_row) {
                            *d += g;
                        }
                    } else {
                        for (d, &g) in dst_row[ix0..].iter_mut().step_by(s).zip(src_row) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
}

/// Channel-pair count below which a stride-1 convolution runs as shifted row
/// updates instead of im2col + GEMM.
const DIRECT_CONV_MAX_PAIRS: usize = 4;

fn use_direct(conv: &Conv2d) -> bool {
    conv.stride == 1 && conv.in_channels() * conv.out_channels() <= DIRECT_CONV_MAX_PAIRS
}

/// Visits every (output row, input row, valid column span) touched by tap
/// `(ki, kj)` of a stride-1 convolution.
#[allow(clippy::too_many_arguments)]
fn direct_taps(
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    pad: usize,
    ki: usize,
    kj: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let (oy0, oy1) = valid_range(oh, h, 1, ki, pad);
    let (ox0, ox1) = valid_range(ow, w, 1, kj, pad);
    if ox0 >= ox1 {
        return;
    }
    for oy in oy0..oy1 {
        f(
            oy * ow + ox0,
            (oy + ki - pad) * w + ox0 + kj - pad,
            ox1 - ox0,
            oy,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn direct_forward(
    conv: &Conv2d,
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let (kh, kw) = conv.kernel();
    let wt = conv.weight.data();
    let plane = oh * ow;
    for (oc, dst) in out.chunks_exact_mut(plane).enumerate() {
        dst.fill(conv.bias.data()[oc]);
        for ci in 0..c {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let k = wt[((oc * c + ci) * kh + ki) * kw + kj];
                    direct_taps(h, w, oh, ow, conv.padding, ki, kj, |o, i, len, _| {
                        for (d, &v) in dst[o..o + len].iter_mut().zip(&src[i..i + len]) {
                            *d += k * v;
                        }
                    });
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn direct_backward(
    conv: &Conv2d,
    x: &[f64],
    g: &[f64],
    (c, h, w, oh, ow): (usize, usize, usize, usize, usize),
    dw: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    let (kh, kw) = conv.kernel();
    let plane = oh * ow;
    let o = conv.out_channels();
    let tap = |oc: usize, ci: usize, ki: usize, kj: usize| ((oc * c + ci) * kh + ki) * kw + kj;
    if let Some(dw) = dw {
        for oc in 0..o {
            let go = &g[oc * plane..(oc + 1) * plane];
            for ci in 0..c {
                let src = &x[ci * h * w..(ci + 1) * h * w];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let mut acc = 0.0;
                        direct_taps(h, w, oh, ow, conv.padding, ki, kj, |o, i, len, _| {
                            acc += go[o..o + len]
                                .iter()
                                .zip(&src[i..i + len])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        });
                        dw[tap(oc, ci, ki, kj)] += acc;
                    }
                }
            }
        }
    }
    if let Some(dx) = dx {
        let wt = conv.weight.data();
        for oc in 0..o {
            let go = &g[oc * plane..(oc + 1) * plane];
            for ci in 0..c {
                let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let k = wt[tap(oc, ci, ki, kj)];
                        direct_taps(h, w, oh, ow, conv.padding, ki, kj, |o, i, len, _| {
                            for (d, &v) in dst[i..i + len].iter_mut().zip(&go[o..o + len]) {
                                *d += k * v;
                            }
                        });
                    }
                }
            }
        }
    }
}

fn conv_forward(conv: &Conv2d, input: &Tensor, out_shape: &[usize]) -> Tensor {
    let [n, o, oh, ow] = out_shape[..] else {
        unreachable!()
    };
    let (_, c, h, w) = input.dims4().expect("checked by output_shape");
    let k = conv.weight.len() / o;
    let plane = oh * ow;
    let mut out = vec![0.0; n * o * plane];
    let bias = conv.bias.data();
    let direct = use_direct(conv);
    let mut cols = vec![0.0; if direct { 0 } else { k * plane }];
    for (b, out_b) in out.chunks_exact_mut(o * plane).enumerate() {
        if direct {
            direct_forward(
                conv,
                &input.data()[b * c * h * w..(b + 1) * c * h * w],
                c,
                h,
                w,
                oh,
                ow,
                out_b,
            );
            continue;
        }
        cols.fill(0.0);
        im2col(
            conv,
            &input.data()[b * c * h * w..(b + 1) * c * h * w],
            c,
            h,
            w,
            oh,
            ow,
            &mut cols,
        );
        for (oc, row) in out_b.chunks_exact_mut(plane).enumerate() {
            row.fill(bias[oc]);
        }
        gemm(
            o,
            k,
            plane,
            conv.weight.data(),
            k,
            1,
            &cols,
            plane,
            1,
            out_b,
            plane,
            1,
        );
    }
    Tensor::from_parts(out_shape.to_vec(), out)
}

/// Gradients of a parameterized layer's weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Backward of a convolution. Returns the input gradient (when requested)
/// and the parameter gradients (when requested).
pub(crate) fn conv_backward(
    conv: &Conv2d,
    input: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
    want_params: bool,
) -> (Option<Tensor>, Option<ParamGrads>) {
    let (n, o, oh, ow) = grad_out.dims4().expect("conv output is 4-d");
    let (_, c, h, w) = input.dims4().expect("conv input is 4-d");
    let plane = oh * ow;
    let k = conv.weight.len() / o;
    let go = grad_out.data();
    let mut dw = vec![0.0; o * k];
    let mut db = vec![0.0; o];
    let mut dx = if want_input {
        vec![0.0; n * c * h * w]
    } else {
        Vec::new()
    };
    let direct = use_direct(conv);
    let scratch = if direct { 0 } else { k * plane };
    let mut cols = vec![0.0; scratch];
    let mut dcols = vec![0.0; scratch];
    for b in 0..n {
        let g = &go[b * o * plane..(b + 1) * o * plane];
        if direct {
            let xb = &input.data()[b * c * h * w..(b + 1) * c * h * w];
            direct_backward(
                conv,
                xb,
                g,
                (c, h, w, oh, ow),
                want_params.then_some(&mut dw[..]),
                want_input.then(|| &mut dx[b * c * h * w..(b + 1) * c * h * w]),
            );
            if want_params {
                for (d, row) in db.iter_mut().zip(g.chunks_exact(plane)) {
                    *d += row.iter().sum::<f64>();
                }
            }
            continue;
        }
        if want_params {
            cols.fill(0.0);
            im2col(
                conv,
                &input.data()[b * c * h * w..(b + 1) * c * h * w],
                c,
                h,
                w,
                oh,
                ow,
                &mut cols,
            );
            gemm(o, plane, k, g, plane, 1, &cols, 1, plane, &mut dw, k, 1);
            for (d, row) in db.iter_mut().zip(g.chunks_exact(plane)) {
                *d += row.iter().sum::<f64>();
            }
        }
        if want_input {
            dcols.fill(0.0);
            gemm(
                k,
                o,
                plane,
                conv.weight.data(),
                1,
                k,
                g,
                plane,
                1,
                &mut dcols,
                plane,
                1,
            );
            col2im(
                conv,
                &dcols,
                c,
                h,
                w,
                oh,
                ow,
                &mut dx[b * c * h * w..(b + 1) * c * h * w],
            );
        }
    }
    let params = want_params.then(|| ParamGrads {
        weight: Tensor::from_parts(conv.weight.shape().to_vec(), dw),
        bias: Tensor::from_parts(vec![o], db),
    });
    let dx = want_input.then(|| Tensor::from_parts(input.shape().to_vec(), dx));
    (dx, params)
}

fn maxpool_forward(
    input: &Tensor,
    kernel: usize,
    stride: usize,
    out_shape: &[usize],
) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = input.dims4().expect("checked");
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let at = base + (oy * stride + ky) * w + ox * stride + kx;
                        // strict comparison keeps the first maximum in scan order
                        if x[at] > x[best] {
                            best = at;
                        }
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (Tensor::from_parts(out_shape.to_vec(), out), idx)
}

/// Routes each output gradient to its stored argmax position.
pub(crate) fn maxpool_route(in_shape: &[usize], argmax: &[usize], grad_out: &[f64]) -> Tensor {
    let mut dx = vec![0.0; in_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        dx[i] += g;
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Half-open input window `[start, end)` covered by adaptive output cell `i`.
pub fn adaptive_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

fn adaptive_forward(input: &Tensor, out_shape: &[usize]) -> Tensor {
    let (n, c, h, w) = input.dims4().expect("checked");
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, w, ow);
                let mut acc = 0.0;
                for y in y0..y1 {
                    acc += x[base + y * w + x0..base + y * w + x1].iter().sum::<f64>();
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Tensor::from_parts(out_shape.to_vec(), out)
}

pub(crate) fn adaptive_backward(in_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let [n, c, h, w] = in_shape[..] else {
        unreachable!()
    };
    let (_, _, oh, ow) = grad_out.dims4().expect("4-d");
    let g = grad_out.data();
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, w, ow);
                let share = g[(plane * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for v in &mut dx[base + y * w + x0..base + y * w + x1] {
                        *v += share;
                    }
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

fn linear_forward(lin: &Linear, input: &Tensor) -> Tensor {
    let n = input.shape()[0];
    let (o, i) = (lin.out_features(), lin.in_features());
    let mut y = vec![0.0; n * o];
    for row in y.chunks_exact_mut(o) {
        row.copy_from_slice(lin.bias.data());
    }
    gemm(
        n,
        i,
        o,
        input.data(),
        i,
        1,
        lin.weight.data(),
        1,
        i,
        &mut y,
        o,
        1,
    );
    Tensor::from_parts(vec![n, o], y)
}

pub(crate) fn linear_backward(
    lin: &Linear,
    input: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
    want_params: bool,
) -> (Option<Tensor>, Option<ParamGrads>) {
    let n = input.shape()[0];
    let (o, i) = (lin.out_features(), lin.in_features());
    let g = grad_out.data();
    let params = want_params.then(|| {
        let mut dw = vec![0.0; o * i];
        gemm(o, n, i, g, 1, o, input.data(), i, 1, &mut dw, i, 1);
        let mut db = vec![0.0; o];
        for row in g.chunks_exact(o) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        ParamGrads {
            weight: Tensor::from_parts(vec![o, i], dw),
            bias: Tensor::from_parts(vec![o], db),
        }
    });
    let dx = want_input.then(|| {
        let mut dx = vec![0.0; n * i];
        gemm(n, o, i, g, o, 1, lin.weight.data(), i, 1, &mut dx, i, 1);
        Tensor::from_parts(input.shape().to_vec(), dx)
    });
    (dx, params)
}

fn log_softmax(input: &Tensor) -> Tensor {
    let c = input.shape()[1];
    let mut out = input.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::from_parts(input.shape().to_vec(), out)
}

pub(crate) fn log_softmax_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let c = output.shape()[1];
    let mut dx = grad_out.data().to_vec();
    for (row, out_row) in dx.chunks_exact_mut(c).zip(output.data().chunks_exact(c)) {
        let total: f64 = row.iter().sum();
        for (d, &lp) in row.iter_mut().zip(out_row) {
            *d -= lp.exp() * total;
        }
    }
    Tensor::from_parts(output.shape().to_vec(), dx)
}
