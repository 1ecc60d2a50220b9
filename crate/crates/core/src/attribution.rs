//! Post hoc attribution of the target-class logit: guided backpropagation,
//! Grad-CAM, Guided Grad-CAM, Integrated Gradients and Deep SHAP, with
//! rendering to PNG.
//!
//! Inputs are single-sample batches `1 x C x H x W`. Maps over the input are
//! `H x W`, summed over channels.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    backward_range, forward_trace, BackwardRule, Layer, LayerGraph, LayerKind, Tensor,
};
use crate::data::{Example, Label};
use crate::error::{Error, Result};

pub const DEFAULT_IG_STEPS: usize = 64;
pub const DEFAULT_BASELINE_COUNT: usize = 8;
/// Interpolation points evaluated per forward/backward pass.
const IG_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    GuidedBackprop,
    GradCam,
    GuidedGradCam,
    IntegratedGradients,
    DeepShap,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::GuidedBackprop => "guided_backprop",
            Method::GradCam => "grad_cam",
            Method::GuidedGradCam => "guided_grad_cam",
            Method::IntegratedGradients => "integrated_gradients",
            Method::DeepShap => "deep_shap",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "guided_backprop" | "guided" => Method::GuidedBackprop,
            "grad_cam" | "gradcam" => Method::GradCam,
            "guided_grad_cam" | "guided_gradcam" => Method::GuidedGradCam,
            "integrated_gradients" | "ig" => Method::IntegratedGradients,
            "deep_shap" | "deepshap" => Method::DeepShap,
            _ => return Err(Error::Attribution(format!("unknown method {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metadata {
    pub steps: Option<usize>,
    pub baseline: Option<String>,
    /// `|sum(attributions) - (F(x) - F(x'))|`; for Deep SHAP, the mean over
    /// baselines.
    pub completeness_gap: Option<f64>,
    /// Completeness gap divided by `|F(x) - F(x')|`.
    pub relative_gap: Option<f64>,
    /// Deep SHAP only: relative gap of each baseline.
    pub baseline_gaps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub method: Method,
    pub target_class: Label,
    pub values: Tensor,
    pub metadata: Metadata,
}

impl AttributionMap {
    fn new(method: Method, target_class: Label, values: Tensor) -> Self {
        AttributionMap {
            method,
            target_class,
            values,
            metadata: Metadata::default(),
        }
    }

    /// Height and width of the map.
    pub fn hw(&self) -> (usize, usize) {
        let s = self.values.shape();
        (s[0], s[1])
    }

    pub fn sidecar(&self) -> String {
        let m = &self.metadata;
        let mut out = format!(
            "method={}\ntarget_class={}\n",
            self.method, self.target_class
        );
        if let Some(s) = m.steps {
            out += &format!("steps={s}\n");
        }
        if let Some(b) = &m.baseline {
            out += &format!("baseline={b}\n");
        }
        if let Some(g) = m.completeness_gap {
            out += &format!("completeness_gap={g:e}\n");
        }
        if let Some(g) = m.relative_gap {
            out += &format!("relative_gap={g:e}\n");
        }
        if !m.baseline_gaps.is_empty() {
            let gaps: Vec<String> = m.baseline_gaps.iter().map(|g| format!("{g:e}")).collect();
            out += &format!("baseline_gaps={}\n", gaps.join(","));
        }
        out
    }

    /// Writes the values as FXT1 to `path` and the metadata next to it with
    /// a `.txt` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.values.save_fxt1(path)?;
        let side = path.with_extension("txt");
        fs::write(&side, self.sidecar()).map_err(|e| Error::io(&side, e))
    }
}

/// Reference inputs for Deep SHAP.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSet {
    baselines: Vec<Tensor>,
    descriptor: String,
}

impl BaselineSet {
    pub fn new(baselines: Vec<Tensor>, descriptor: impl Into<String>) -> Result<Self> {
        let first = baselines
            .first()
            .ok_or_else(|| Error::Attribution("baseline set is empty".into()))?;
        if let Some(b) = baselines.iter().find(|b| b.shape() != first.shape()) {
            return Err(Error::Attribution(format!(
                "baselines disagree in shape: {:?} vs {:?}",
                b.shape(),
                first.shape()
            )));
        }
        Ok(BaselineSet {
            baselines,
            descriptor: descriptor.into(),
        })
    }

    pub fn constant(shape: &[usize], value: f64) -> Self {
        BaselineSet {
            baselines: vec![Tensor::full(shape, value)],
            descriptor: describe(&Tensor::full(shape, value)),
        }
    }

    /// `k` distinct NF examples drawn with `seed`, as `1 x C x H x W`
    /// batches.
    pub fn sample_nf(examples: &[Example], k: usize, seed: u64) -> Result<Self> {
        let nf: Vec<&Example> = examples.iter().filter(|e| e.label == Label::NF).collect();
        if k == 0 || nf.len() < k {
            return Err(Error::Attribution(format!(
                "need {k} NF baselines, have {} NF examples",
                nf.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = rand::seq::index::sample(&mut rng, nf.len(), k).into_vec();
        picks.sort_unstable();
        let baselines = picks
            .iter()
            .map(|&i| Tensor::stack(&[&nf[i].image]))
            .collect::<Result<Vec<_>>>()?;
        let origins: Vec<String> = picks.iter().map(|&i| nf[i].origin.to_string()).collect();
        Self::new(
            baselines,
            format!("nf_samples seed={seed} origins={}", origins.join(";")),
        )
    }

    pub fn len(&self) -> usize {
        self.baselines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.baselines.is_empty()
    }

    pub fn baselines(&self) -> &[Tensor] {
        &self.baselines
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }
}

fn describe(baseline: &Tensor) -> String {
    let d = baseline.data();
    match d.first() {
        Some(&v) if d.iter().all(|&x| x == v) => {
            if v == 0.0 {
                "zero".into()
            } else {
                format!("constant={v}")
            }
        }
        _ => "custom".into(),
    }
}

fn check_input(graph: &LayerGraph, input: &Tensor) -> Result<(usize, usize, usize)> {
    match input.shape() {
        [1, c, h, w] => {
            graph.shape_chain(input.shape())?;
            Ok((*c, *h, *w))
        }
        other => Err(Error::Attribution(format!(
            "attribution takes a single-sample 1 x C x H x W input, got {other:?}"
        ))),
    }
}

fn logit_count(graph: &LayerGraph, input: &Tensor) -> Result<usize> {
    let depth = graph.logit_depth();
    let chain = graph.shape_chain(input.shape())?;
    match chain[depth][..] {
        [_, k] => Ok(k),
        ref other => Err(Error::Attribution(format!(
            "logits must be N x K, got {other:?}"
        ))),
    }
}

fn one_hot(rows: usize, classes: usize, target: Label) -> Result<Tensor> {
    let t = target.index();
    if t >= classes {
        return Err(Error::Attribution(format!(
            "target class {target} outside the {classes} model outputs"
        )));
    }
    let mut g = Tensor::zeros(&[rows, classes]);
    for r in 0..rows {
        g.data_mut()[r * classes + t] = 1.0;
    }
    Ok(g)
}

/// Target-class logit of every sample in a batch.
pub fn target_logits(graph: &LayerGraph, batch: &Tensor, target: Label) -> Result<Vec<f64>> {
    let depth = graph.logit_depth();
    let mut x = batch.clone();
    for layer in &graph.layers()[..depth] {
        x = layer.forward(&x)?;
    }
    let k = x.shape()[1];
    one_hot(1, k, target)?;
    Ok(x.data().chunks(k).map(|row| row[target.index()]).collect())
}

/// Sums `N x C x H x W` over channels into `N` maps of `H x W`.
fn channel_sum(t: &Tensor, c: usize, h: usize, w: usize) -> Vec<Vec<f64>> {
    t.data()
        .chunks(c * h * w)
        .map(|sample| {
            let mut m = vec![0.0; h * w];
            for ch in sample.chunks(h * w) {
                for (a, b) in m.iter_mut().zip(ch) {
                    *a += b;
                }
            }
            m
        })
        .collect()
}

fn input_gradient(
    graph: &LayerGraph,
    batch: &Tensor,
    target: Label,
    rule: BackwardRule<'_>,
) -> Result<Tensor> {
    let depth = graph.logit_depth();
    let trace = forward_trace(graph, batch)?;
    let k = trace.output(depth - 1).shape()[1];
    let g = one_hot(batch.shape()[0], k, target)?;
    Ok(backward_range(graph, &trace, 0..depth, &g, rule, false)?.input)
}

/// Input gradient of the target logit under the guided ReLU rule.
pub fn guided_backprop(
    graph: &LayerGraph,
    input: &Tensor,
    target: Label,
) -> Result<AttributionMap> {
    let (c, h, w) = check_input(graph, input)?;
    logit_count(graph, input)?;
    let g = input_gradient(graph, input, target, BackwardRule::Guided)?;
    let values = Tensor::new(vec![h, w], channel_sum(&g, c, h, w).remove(0))?;
    Ok(AttributionMap::new(Method::GuidedBackprop, target, values))
}

/// Index of the activation Grad-CAM reads: the ReLU right after the last
/// convolution, or the convolution itself when none follows.
pub fn grad_cam_layer(graph: &LayerGraph) -> Result<usize> {
    let c = graph
        .last_index_of(LayerKind::Conv2d)
        .ok_or_else(|| Error::Attribution("Grad-CAM needs a convolution layer".into()))?;
    Ok(match graph.layers().get(c + 1) {
        Some(Layer::Relu) => c + 1,
        _ => c,
    })
}

/// Raw Grad-CAM at the resolution of the last convolution:
/// `ReLU(sum_k alpha_k A_k)` with `alpha_k` the spatial mean of the target
/// logit's gradient over activation map `A_k`.
pub fn grad_cam(graph: &LayerGraph, input: &Tensor, target: Label) -> Result<AttributionMap> {
    check_input(graph, input)?;
    let k = logit_count(graph, input)?;
    let layer = grad_cam_layer(graph)?;
    let depth = graph.logit_depth();
    if layer >= depth {
        return Err(Error::Attribution(
            "last convolution produces the logits".into(),
        ));
    }
    let trace = forward_trace(graph, input)?;
    let acts = trace.output(layer);
    let [_, maps, h, w] = acts.shape()[..] else {
        unreachable!("convolution outputs are 4-D")
    };
    let g = backward_range(
        graph,
        &trace,
        layer + 1..depth,
        &one_hot(1, k, target)?,
        BackwardRule::Standard,
        false,
    )?
    .input;
    let plane = h * w;
    let mut cam = vec![0.0; plane];
    for (a, gk) in acts.data().chunks(plane).zip(g.data().chunks(plane)) {
        let alpha = gk.iter().sum::<f64>() / plane as f64;
        for (c, v) in cam.iter_mut().zip(a) {
            *c += alpha * v;
        }
    }
    debug_assert_eq!(acts.len(), maps * plane);
    let values = Tensor::new(vec![h, w], cam.into_iter().map(|v| v.max(0.0)).collect())?;
    Ok(AttributionMap::new(Method::GradCam, target, values))
}

/// Bilinear upsampling with half-pixel centers and edge clamping.
pub fn upsample_map(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let [h, w] = map.shape()[..] else {
        return Err(Error::Attribution(format!(
            "map must be H x W, got {:?}",
            map.shape()
        )));
    };
    if height < h || width < w {
        return Err(Error::Attribution(format!(
            "cannot upsample {h}x{w} to the smaller {height}x{width}"
        )));
    }
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let s =
                    ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (coords(height, h), coords(width, w));
    let m = map.data();
    let mut out = Vec::with_capacity(height * width);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = m[y0 * w + x0] * (1.0 - fx) + m[y0 * w + x1] * fx;
            let bottom = m[y1 * w + x0] * (1.0 - fx) + m[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(vec![height, width], out)
}

/// Guided backpropagation multiplied pointwise by upsampled Grad-CAM.
pub fn guided_grad_cam(
    graph: &LayerGraph,
    input: &Tensor,
    target: Label,
) -> Result<AttributionMap> {
    let guided = guided_backprop(graph, input, target)?;
    let cam = grad_cam(graph, input, target)?;
    let (h, w) = guided.hw();
    let up = upsample_map(&cam.values, h, w)?;
    let values = guided.values.zip_with(&up, |a, b| a * b)?;
    Ok(AttributionMap::new(Method::GuidedGradCam, target, values))
}

fn gap_metadata(sum: f64, delta: f64) -> (f64, f64) {
    let gap = (sum - delta).abs();
    (gap, gap / delta.abs().max(1e-12))
}

/// Integrated gradients along the straight path from `baseline` to `input`,
/// midpoint rule with `steps` points.
pub fn integrated_gradients(
    graph: &LayerGraph,
    input: &Tensor,
    baseline: &Tensor,
    target: Label,
    steps: usize,
) -> Result<AttributionMap> {
    let (c, h, w) = check_input(graph, input)?;
    if baseline.shape() != input.shape() {
        return Err(Error::Attribution(format!(
            "baseline shape {:?} differs from input {:?}",
            baseline.shape(),
            input.shape()
        )));
    }
    if steps == 0 {
        return Err(Error::Attribution(
            "integrated gradients needs at least one step".into(),
        ));
    }
    logit_count(graph, input)?;
    let (x, x0) = (input.data(), baseline.data());
    let mut grad_sum = vec![0.0; x.len()];
    let ks: Vec<usize> = (0..steps).collect();
    for chunk in ks.chunks(IG_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * x.len());
        for &k in chunk {
            let alpha = (k as f64 + 0.5) / steps as f64;
            data.extend(x.iter().zip(x0).map(|(a, b)| b + alpha * (a - b)));
        }
        let mut shape = input.shape().to_vec();
        shape[0] = chunk.len();
        let g = input_gradient(
            graph,
            &Tensor::new(shape, data)?,
            target,
            BackwardRule::Standard,
        )?;
        for row in g.data().chunks(x.len()) {
            for (s, v) in grad_sum.iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    let attr: Vec<f64> = grad_sum
        .iter()
        .zip(x.iter().zip(x0))
        .map(|(g, (a, b))| (a - b) * g / steps as f64)
        .collect();
    let attr = Tensor::new(input.shape().to_vec(), attr)?;
    let fx = target_logits(graph, input, target)?[0];
    let fb = target_logits(graph, baseline, target)?[0];
    let (gap, rel) = gap_metadata(attr.sum(), fx - fb);
    let values = Tensor::new(vec![h, w], channel_sum(&attr, c, h, w).remove(0))?;
    let mut map = AttributionMap::new(Method::IntegratedGradients, target, values);
    map.metadata = Metadata {
        steps: Some(steps),
        baseline: Some(describe(baseline)),
        completeness_gap: Some(gap),
        relative_gap: Some(rel),
        baseline_gaps: Vec::new(),
    };
    Ok(map)
}

/// DeepLIFT rescale contributions against each baseline, averaged.
pub fn deep_shap(
    graph: &LayerGraph,
    input: &Tensor,
    baselines: &BaselineSet,
    target: Label,
) -> Result<AttributionMap> {
    let (c, h, w) = check_input(graph, input)?;
    if baselines.is_empty() {
        return Err(Error::Attribution("baseline set is empty".into()));
    }
    if baselines.baselines()[0].shape() != input.shape() {
        return Err(Error::Attribution(format!(
            "baseline shape {:?} differs from input {:?}",
            baselines.baselines()[0].shape(),
            input.shape()
        )));
    }
    let k = logit_count(graph, input)?;
    let n = baselines.len();
    let depth = graph.logit_depth();
    let refs: Vec<&Tensor> = baselines.baselines().iter().collect();
    let reference = Tensor::stack_batch(&refs)?;
    let repeated = Tensor::stack_batch(&vec![input; n])?;
    let ref_trace = forward_trace(graph, &reference)?;
    let trace = forward_trace(graph, &repeated)?;
    let mult = backward_range(
        graph,
        &trace,
        0..depth,
        &one_hot(n, k, target)?,
        BackwardRule::Rescale {
            baseline: &ref_trace,
        },
        false,
    )?
    .input;
    let contrib = mult.zip_with(&repeated.zip_with(&reference, |a, b| a - b)?, |m, d| m * d)?;
    let fx = trace
        .output(depth - 1)
        .data()
        .chunks(k)
        .map(|r| r[target.index()]);
    let fb = ref_trace
        .output(depth - 1)
        .data()
        .chunks(k)
        .map(|r| r[target.index()]);
    let per = input.len();
    let mut gaps = Vec::with_capacity(n);
    let mut abs_gaps = Vec::with_capacity(n);
    for ((row, a), b) in contrib.data().chunks(per).zip(fx).zip(fb) {
        let (gap, rel) = gap_metadata(row.iter().sum(), a - b);
        abs_gaps.push(gap);
        gaps.push(rel);
    }
    let maps = channel_sum(&contrib, c, h, w);
    let mut mean = vec![0.0; h * w];
    for m in &maps {
        for (a, v) in mean.iter_mut().zip(m) {
            *a += v / n as f64;
        }
    }
    let mut map = AttributionMap::new(Method::DeepShap, target, Tensor::new(vec![h, w], mean)?);
    map.metadata = Metadata {
        steps: None,
        baseline: Some(format!("{} ({n} baselines)", baselines.descriptor())),
        completeness_gap: Some(abs_gaps.iter().sum::<f64>() / n as f64),
        relative_gap: Some(gaps.iter().sum::<f64>() / n as f64),
        baseline_gaps: gaps,
    };
    Ok(map)
}

/// Options for [`explain`].
#[derive(Debug, Clone)]
pub struct ExplainOptions<'a> {
    pub steps: usize,
    pub ig_baseline: &'a Tensor,
    pub baselines: &'a BaselineSet,
}

/// Dispatches to one method.
pub fn explain(
    method: Method,
    graph: &LayerGraph,
    input: &Tensor,
    target: Label,
    opts: &ExplainOptions<'_>,
) -> Result<AttributionMap> {
    match method {
        Method::GuidedBackprop => guided_backprop(graph, input, target),
        Method::GradCam => grad_cam(graph, input, target),
        Method::GuidedGradCam => guided_grad_cam(graph, input, target),
        Method::IntegratedGradients => {
            integrated_gradients(graph, input, opts.ig_baseline, target, opts.steps)
        }
        Method::DeepShap => deep_shap(graph, input, opts.baselines, target),
    }
}

/// Mean |value| inside `mask` divided by the mean outside it. `None` when
/// either region is empty or both means vanish.
pub fn localization_ratio(values: &Tensor, mask: &[bool]) -> Option<f64> {
    if values.len() != mask.len() {
        return None;
    }
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (v, &m) in values.data().iter().zip(mask) {
        if m {
            si += v.abs();
            ni += 1;
        } else {
            so += v.abs();
            no += 1;
        }
    }
    if ni == 0 || no == 0 {
        return None;
    }
    let (inside, outside) = (si / ni as f64, so / no as f64);
    match (inside > 0.0, outside > 0.0) {
        (_, true) => Some(inside / outside),
        (true, false) => Some(f64::INFINITY),
        (false, false) => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Heatmap,
    Overlay,
}

impl std::str::FromStr for RenderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heatmap" => Ok(RenderMode::Heatmap),
            "overlay" => Ok(RenderMode::Overlay),
            _ => Err(Error::Attribution(format!("unknown render mode {s:?}"))),
        }
    }
}

/// Blue-white-red diverging colormap over `t` in `[-1, 1]`.
pub fn diverging_color(t: f64) -> [u8; 3] {
    let t = t.clamp(-1.0, 1.0);
    let fade = |v: f64| (255.0 * (1.0 - v.abs())).round() as u8;
    if t < 0.0 {
        [fade(t), fade(t), 255]
    } else {
        [255, fade(t), fade(t)]
    }
}

pub const OVERLAY_ALPHA: f64 = 0.5;

/// RGB pixels of a rendered map. Values are scaled by the largest |value| so
/// the colormap spans `[-M, M]`; `image` holds `[0, 1]` gray levels of the
/// same size.
pub fn render_pixels(map: &Tensor, image: &[f64], mode: RenderMode) -> Result<Vec<u8>> {
    let [h, w] = map.shape()[..] else {
        return Err(Error::Attribution(format!(
            "map must be H x W, got {:?}",
            map.shape()
        )));
    };
    if mode == RenderMode::Overlay && image.len() != h * w {
        return Err(Error::Attribution(format!(
            "overlay image has {} pixels, map has {}",
            image.len(),
            h * w
        )));
    }
    let m = map.max_abs();
    let mut px = Vec::with_capacity(h * w * 3);
    for (i, &v) in map.data().iter().enumerate() {
        let color = diverging_color(if m > 0.0 { v / m } else { 0.0 });
        match mode {
            RenderMode::Heatmap => px.extend_from_slice(&color),
            RenderMode::Overlay => {
                let gray = image[i].clamp(0.0, 1.0) * 255.0;
                px.extend(color.iter().map(|&c| {
                    (OVERLAY_ALPHA * c as f64 + (1.0 - OVERLAY_ALPHA) * gray).round() as u8
                }));
            }
        }
    }
    Ok(px)
}

/// Writes an 8-bit RGB PNG of `map`.
pub fn render_map(map: &Tensor, image: &[f64], out_path: &Path, mode: RenderMode) -> Result<()> {
    let px = render_pixels(map, image, mode)?;
    let (h, w) = (map.shape()[0] as u32, map.shape()[1] as u32);
    let img = image::RgbImage::from_raw(w, h, px).expect("buffer sized from the map");
    img.save_with_format(out_path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: out_path.to_path_buf(),
            reason: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Conv2d, Linear};
    use crate::model::{FlareModel, ModelConfig};
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(lo..hi)).collect(),
        )
        .unwrap()
    }

    fn linear_graph(w: &[f64], b: [f64; 2]) -> LayerGraph {
        // logits: FL = w . x + b1, NF = -(w . x) + b0
        let n = w.len();
        let mut weight = vec![0.0; 2 * n];
        for i in 0..n {
            weight[i] = -w[i];
            weight[n + i] = w[i];
        }
        let lin = Linear::new(
            Tensor::new(vec![2, n], weight).unwrap(),
            Tensor::new(vec![2], b.to_vec()).unwrap(),
        )
        .unwrap();
        LayerGraph::new(vec![Layer::Linear(lin), Layer::LogSoftmax])
    }

    /// conv 1->2 (3x3, pad 1), ReLU, maxpool 2, linear into 2 logits
    fn small_cnn(seed: u64) -> LayerGraph {
        let conv = Conv2d::new(
            rand_tensor(&[2, 1, 3, 3], seed, -1.0, 1.0),
            rand_tensor(&[2], seed + 1, -0.2, 0.2),
            1,
            1,
        )
        .unwrap();
        let lin = Linear::new(
            rand_tensor(&[2, 2 * 3 * 3], seed + 2, -1.0, 1.0),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        LayerGraph::new(vec![
            Layer::Conv2d(conv),
            Layer::Relu,
            Layer::MaxPool2d {
                kernel: 2,
                stride: 2,
            },
            Layer::Linear(lin),
            Layer::LogSoftmax,
        ])
    }

    #[test]
    fn ig_on_linear_model_is_exact() {
        let g = linear_graph(&[2.0, 3.0], [0.0, 0.0]);
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
        let zero = Tensor::zeros(x.shape());
        for steps in [1, 7, 64] {
            let m = integrated_gradients(&g, &x, &zero, Label::FL, steps).unwrap();
            assert_eq!(m.values.data(), &[2.0, 3.0]);
            assert_eq!(m.metadata.baseline.as_deref(), Some("zero"));
        }
    }

    #[test]
    fn linear_methods_agree_with_weight_times_input() {
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let g = linear_graph(&w, [0.3, -0.1]);
        let x = rand_tensor(&[1, 1, 3, 4], 5, -2.0, 2.0);
        let zero = Tensor::zeros(x.shape());
        let ig = integrated_gradients(&g, &x, &zero, Label::FL, 16).unwrap();
        let shap = deep_shap(&g, &x, &BaselineSet::constant(x.shape(), 0.0), Label::FL).unwrap();
        for i in 0..12 {
            let expected = w[i] * x.data()[i];
            assert!((ig.values.data()[i] - expected).abs() < 1e-10);
            assert!((shap.values.data()[i] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn input_equal_to_baseline_gives_zero() {
        let g = small_cnn(1);
        let x = rand_tensor(&[1, 1, 6, 6], 2, 0.0, 1.0);
        let ig = integrated_gradients(&g, &x, &x, Label::FL, 8).unwrap();
        assert!(ig.values.data().iter().all(|&v| v == 0.0));
        let set = BaselineSet::new(vec![x.clone()], "self").unwrap();
        let s = deep_shap(&g, &x, &set, Label::FL).unwrap();
        assert!(s.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ig_completeness_improves_with_steps() {
        let g = small_cnn(3);
        let x = rand_tensor(&[1, 1, 6, 6], 4, 0.0, 1.0);
        let zero = Tensor::zeros(x.shape());
        let coarse = integrated_gradients(&g, &x, &zero, Label::FL, 4).unwrap();
        let fine = integrated_gradients(&g, &x, &zero, Label::FL, 512).unwrap();
        let (gc, gf) = (
            coarse.metadata.relative_gap.unwrap(),
            fine.metadata.relative_gap.unwrap(),
        );
        assert!(gf < 1e-3, "{gf}");
        assert!(gf <= gc);
    }

    #[test]
    fn deep_shap_sums_to_delta_per_baseline() {
        let g = small_cnn(7);
        let x = rand_tensor(&[1, 1, 6, 6], 8, 0.0, 1.0);
        let refs: Vec<Tensor> = (0..4)
            .map(|i| rand_tensor(&[1, 1, 6, 6], 20 + i, 0.0, 1.0))
            .collect();
        let set = BaselineSet::new(refs, "random").unwrap();
        let s = deep_shap(&g, &x, &set, Label::FL).unwrap();
        assert_eq!(s.metadata.baseline_gaps.len(), 4);
        for gap in &s.metadata.baseline_gaps {
            assert!(*gap < 1e-10, "{gap}");
        }
    }

    #[test]
    fn duplicate_baselines_match_one() {
        let g = small_cnn(9);
        let x = rand_tensor(&[1, 1, 6, 6], 10, 0.0, 1.0);
        let b = rand_tensor(&[1, 1, 6, 6], 11, 0.0, 1.0);
        let one = deep_shap(
            &g,
            &x,
            &BaselineSet::new(vec![b.clone()], "b").unwrap(),
            Label::NF,
        )
        .unwrap();
        let two = deep_shap(
            &g,
            &x,
            &BaselineSet::new(vec![b.clone(), b], "bb").unwrap(),
            Label::NF,
        )
        .unwrap();
        for (a, c) in one.values.data().iter().zip(two.values.data()) {
            assert!((a - c).abs() < 1e-15);
        }
    }

    #[test]
    fn baseline_sets_are_validated() {
        assert!(BaselineSet::new(vec![], "none").is_err());
        assert!(BaselineSet::new(
            vec![Tensor::zeros(&[1, 1, 2, 2]), Tensor::zeros(&[1, 1, 3, 3])],
            "mixed"
        )
        .is_err());
        let g = small_cnn(1);
        let x = rand_tensor(&[1, 1, 6, 6], 2, 0.0, 1.0);
        let wrong = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(integrated_gradients(&g, &x, &wrong, Label::FL, 4).is_err());
        assert!(integrated_gradients(&g, &x, &x, Label::FL, 0).is_err());
        assert!(deep_shap(
            &g,
            &x,
            &BaselineSet::constant(&[1, 1, 5, 5], 0.0),
            Label::FL
        )
        .is_err());
    }

    #[test]
    fn sampled_baselines_are_nf_and_seeded() {
        let ex: Vec<Example> = (0..20)
            .map(|i| Example {
                image: Tensor::full(&[1, 2, 2], i as f64),
                label: if i % 3 == 0 { Label::FL } else { Label::NF },
                origin: i,
                augmentation: None,
            })
            .collect();
        let a = BaselineSet::sample_nf(&ex, 8, 5).unwrap();
        assert_eq!(a, BaselineSet::sample_nf(&ex, 8, 5).unwrap());
        assert_eq!(a.len(), 8);
        for b in a.baselines() {
            assert_eq!(b.shape(), &[1, 1, 2, 2]);
            assert_ne!(b.data()[0] as usize % 3, 0);
        }
        assert!(BaselineSet::sample_nf(&ex, 14, 5).is_err());
    }

    #[test]
    fn guided_equals_gradient_without_relu() {
        let g = linear_graph(&[0.5, -1.5, 2.0, 0.1], [0.0, 0.0]);
        let x = rand_tensor(&[1, 1, 2, 2], 3, -1.0, 1.0);
        let m = guided_backprop(&g, &x, Label::FL).unwrap();
        assert_eq!(m.values.data(), &[0.5, -1.5, 2.0, 0.1]);
    }

    #[test]
    fn guided_is_zero_when_relu_is_off() {
        let lin1 = Linear::new(
            Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap(),
            Tensor::new(vec![2], vec![-10.0, -10.0]).unwrap(),
        )
        .unwrap();
        let lin2 = Linear::new(
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        let g = LayerGraph::new(vec![
            Layer::Linear(lin1),
            Layer::Relu,
            Layer::Linear(lin2),
            Layer::LogSoftmax,
        ]);
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.3, 0.7]).unwrap();
        let m = guided_backprop(&g, &x, Label::FL).unwrap();
        assert!(m.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(guided_backprop(&g, &x, Label::FL).unwrap(), m);
    }

    #[test]
    fn grad_cam_of_summed_map_is_relu_of_activation() {
        // one 1x1 conv channel; logit FL sums the whole map
        let conv = Conv2d::new(
            Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(),
            Tensor::new(vec![1], vec![-1.0]).unwrap(),
            1,
            0,
        )
        .unwrap();
        let lin = Linear::new(
            Tensor::new(vec![2, 9], [vec![0.0; 9], vec![1.0; 9]].concat()).unwrap(),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        let g = LayerGraph::new(vec![
            Layer::Conv2d(conv),
            Layer::Linear(lin),
            Layer::LogSoftmax,
        ]);
        let x = rand_tensor(&[1, 1, 3, 3], 4, 0.0, 1.0);
        let m = grad_cam(&g, &x, Label::FL).unwrap();
        assert_eq!(m.values.shape(), &[3, 3]);
        for (v, xi) in m.values.data().iter().zip(x.data()) {
            assert!((v - (2.0 * xi - 1.0).max(0.0)).abs() < 1e-15);
        }
        // the NF logit ignores the map entirely
        let nf = grad_cam(&g, &x, Label::NF).unwrap();
        assert!(nf.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_cam_ignores_logit_bias() {
        let mut g = small_cnn(12);
        let x = rand_tensor(&[1, 1, 6, 6], 13, 0.0, 1.0);
        let before = grad_cam(&g, &x, Label::FL).unwrap();
        assert!(before.values.data().iter().all(|&v| v >= 0.0));
        if let Some((_, b)) = g.layers_mut()[3].params_mut() {
            b.data_mut()[1] += 3.5;
        }
        assert_eq!(grad_cam(&g, &x, Label::FL).unwrap(), before);
    }

    #[test]
    fn grad_cam_needs_a_convolution() {
        let g = linear_graph(&[1.0, 1.0], [0.0, 0.0]);
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            grad_cam(&g, &x, Label::FL),
            Err(Error::Attribution(_))
        ));
    }

    #[test]
    fn desk_grad_cam_matches_last_conv_resolution() {
        let m = FlareModel::new(&ModelConfig::desk(), 3).unwrap();
        let x = rand_tensor(&[1, 1, 64, 64], 1, 0.0, 1.0);
        let cam = grad_cam(&m.graph, &x, Label::FL).unwrap();
        let layer = grad_cam_layer(&m.graph).unwrap();
        let chain = m.graph.shape_chain(x.shape()).unwrap();
        assert_eq!(cam.values.shape(), &chain[layer + 1][2..]);
        let ggc = guided_grad_cam(&m.graph, &x, Label::FL).unwrap();
        assert_eq!(ggc.values.shape(), &[64, 64]);
    }

    #[test]
    fn upsample_examples() {
        let c = upsample_map(&Tensor::full(&[3, 3], 0.7), 10, 7).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let one = upsample_map(&Tensor::full(&[1, 1], -2.0), 5, 5).unwrap();
        assert!(one.data().iter().all(|&v| v == -2.0));
        let m = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let u = upsample_map(&m, 4, 4).unwrap();
        for row in u.data().chunks(4) {
            assert_eq!(row[0], 0.0);
            assert_eq!(row[3], 1.0);
            assert!(row.windows(2).all(|p| p[0] <= p[1]));
        }
        assert!(upsample_map(&m, 1, 4).is_err());
    }

    #[test]
    fn guided_grad_cam_support_within_cam() {
        let g = small_cnn(21);
        for seed in 0..5 {
            let x = rand_tensor(&[1, 1, 6, 6], 100 + seed, 0.0, 1.0);
            let ggc = guided_grad_cam(&g, &x, Label::FL).unwrap();
            let cam = grad_cam(&g, &x, Label::FL).unwrap();
            let up = upsample_map(&cam.values, 6, 6).unwrap();
            for (v, c) in ggc.values.data().iter().zip(up.data()) {
                assert!(*c != 0.0 || *v == 0.0);
            }
        }
    }

    #[test]
    fn localization_ratio_cases() {
        let v = Tensor::new(vec![2, 2], vec![4.0, -4.0, 1.0, -1.0]).unwrap();
        assert_eq!(
            localization_ratio(&v, &[true, true, false, false]),
            Some(4.0)
        );
        assert_eq!(localization_ratio(&v, &[true; 4]), None);
        let z = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(localization_ratio(&z, &[true, false]), Some(f64::INFINITY));
    }

    #[test]
    fn rendering_rules() {
        let zero = Tensor::zeros(&[3, 2]);
        let px = render_pixels(&zero, &[], RenderMode::Heatmap).unwrap();
        assert!(px.chunks(3).all(|c| c == diverging_color(0.0)));
        let img = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        let over = render_pixels(&zero, &img, RenderMode::Overlay).unwrap();
        let mid = diverging_color(0.0);
        for (p, g) in over.chunks(3).zip(img) {
            for (c, m) in p.iter().zip(mid) {
                assert_eq!(*c, (0.5 * m as f64 + 0.5 * g * 255.0).round() as u8);
            }
        }
        let v = Tensor::new(vec![1, 3], vec![-2.0, 0.0, 1.0]).unwrap();
        let px = render_pixels(&v, &[], RenderMode::Heatmap).unwrap();
        assert_eq!(&px[0..3], &[0, 0, 255]);
        assert_eq!(&px[6..9], &[255, 128, 128]);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        render_map(&v, &[], &a, RenderMode::Heatmap).unwrap();
        render_map(&v, &[], &b, RenderMode::Heatmap).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert!(render_pixels(&v, &[0.0], RenderMode::Overlay).is_err());
        let err = render_map(
            &v,
            &[],
            &dir.path().join("missing/x.png"),
            RenderMode::Heatmap,
        )
        .unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    #[test]
    fn save_writes_values_and_sidecar() {
        let g = small_cnn(2);
        let x = rand_tensor(&[1, 1, 6, 6], 3, 0.0, 1.0);
        let m = integrated_gradients(&g, &x, &Tensor::full(x.shape(), 0.5), Label::FL, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ig.fxt");
        m.save(&p).unwrap();
        assert_eq!(Tensor::load_fxt1(&p).unwrap().shape(), &[6, 6]);
        let side = fs::read_to_string(dir.path().join("ig.txt")).unwrap();
        assert!(side.starts_with("method=integrated_gradients\ntarget_class=FL\nsteps=8\nbaseline=constant=0.5\ncompleteness_gap="));
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::GuidedBackprop,
            Method::GradCam,
            Method::GuidedGradCam,
            Method::IntegratedGradients,
            Method::DeepShap,
        ] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("deepshap".parse::<Method>().unwrap(), Method::DeepShap);
        assert_eq!(
            "guided-gradcam".parse::<Method>().unwrap(),
            Method::GuidedGradCam
        );
        assert!("lime".parse::<Method>().is_err());
    }
}
