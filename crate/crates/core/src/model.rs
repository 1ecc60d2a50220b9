//! The flare classifier: an AlexNet-style feature extractor preceded by a
//! 1 -> 3 channel adapter convolution, adaptive average pooling, two fully
//! connected layers and a log-softmax over `{NF, FL}`.
//!
//! Two presets are provided: `paper` (512 x 512 input, AlexNet widths) and
//! `desk` (64 x 64 input, narrow widths) which trains on a CPU in minutes.
//!
//! A saved model is a directory holding `model.txt` (key=value manifest) and
//! one FXT1 file per parameter tensor.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv2d, Layer, LayerGraph, LayerKind, Linear, Tensor};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 2;
/// Index of the no-flare class in every output.
pub const CLASS_NF: usize = 0;
/// Index of the flare (>= M1.0) class in every output; the positive class.
pub const CLASS_FL: usize = 1;

const MANIFEST: &str = "model.txt";
const FORMAT_TAG: &str = "flarecast-model-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}/{}/{}",
            self.out_channels, self.kernel, self.stride, self.padding
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub preset: String,
    /// Pixels per side of the square single-channel input.
    pub input_size: usize,
    /// All six convolutions in order; the first is the 1 -> 3 adapter.
    pub convs: Vec<ConvSpec>,
    /// Indices into `convs` that are followed by a max-pool.
    pub pool_after: Vec<usize>,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    /// Side of the adaptive average pool output.
    pub adaptive_size: usize,
    pub hidden: usize,
    pub classes: usize,
}

pub const CONV_COUNT: usize = 6;
pub const POOL_COUNT: usize = 3;

impl ModelConfig {
    /// 512 x 512 input with the standard AlexNet feature extractor.
    pub fn paper() -> Self {
        ModelConfig {
            preset: "paper".into(),
            input_size: 512,
            convs: vec![
                ConvSpec::new(3, 3, 1, 1),
                ConvSpec::new(64, 11, 4, 2),
                ConvSpec::new(192, 5, 1, 2),
                ConvSpec::new(384, 3, 1, 1),
                ConvSpec::new(256, 3, 1, 1),
                ConvSpec::new(256, 3, 1, 1),
            ],
            pool_after: vec![1, 2, 5],
            pool_kernel: 3,
            pool_stride: 2,
            adaptive_size: 6,
            hidden: 4096,
            classes: NUM_CLASSES,
        }
    }

    /// 64 x 64 input, widths (8, 16, 24, 16, 16), 4 x 4 adaptive pool and a
    /// 64-wide hidden layer.
    pub fn desk() -> Self {
        ModelConfig {
            preset: "desk".into(),
            input_size: 64,
            convs: vec![
                ConvSpec::new(3, 3, 1, 1),
                ConvSpec::new(8, 5, 4, 2),
                ConvSpec::new(16, 3, 1, 1),
                ConvSpec::new(24, 3, 1, 1),
                ConvSpec::new(16, 3, 1, 1),
                ConvSpec::new(16, 3, 1, 1),
            ],
            pool_after: vec![1, 2, 5],
            pool_kernel: 2,
            pool_stride: 2,
            adaptive_size: 4,
            hidden: 64,
            classes: NUM_CLASSES,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Model(format!(
                "unknown preset {other:?} (expected paper or desk)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let topo = |msg: String| Err(Error::Topology(msg));
        if self.convs.len() != CONV_COUNT {
            return topo(format!(
                "expected {CONV_COUNT} convolutional layers, found {}",
                self.convs.len()
            ));
        }
        let adapter = self.convs[0];
        if adapter.out_channels != 3 || adapter.kernel != 3 || adapter.stride != 1 {
            return topo(format!(
                "first convolution must map 1 -> 3 channels with a 3x3 kernel and stride 1, found {adapter}"
            ));
        }
        if self.pool_after.len() != POOL_COUNT {
            return topo(format!(
                "expected {POOL_COUNT} max-pool layers, found {}",
                self.pool_after.len()
            ));
        }
        if self.pool_after.windows(2).any(|w| w[0] >= w[1])
            || self.pool_after.iter().any(|&i| i >= CONV_COUNT)
        {
            return topo(format!(
                "max-pool positions {:?} must be strictly increasing convolution indices",
                self.pool_after
            ));
        }
        if self.classes != NUM_CLASSES {
            return topo(format!("class count is fixed at 2, found {}", self.classes));
        }
        if self
            .convs
            .iter()
            .any(|c| c.out_channels == 0 || c.kernel == 0 || c.stride == 0)
            || self.pool_kernel == 0
            || self.pool_stride == 0
            || self.adaptive_size == 0
            || self.hidden == 0
            || self.input_size == 0
        {
            return topo("all widths, kernels and strides must be positive".into());
        }
        Ok(())
    }

    /// Serializes to `key=value` lines (without parameters).
    fn to_manifest(&self) -> Vec<(String, String)> {
        let convs: Vec<String> = self.convs.iter().map(|c| c.to_string()).collect();
        let pools: Vec<String> = self.pool_after.iter().map(|p| p.to_string()).collect();
        vec![
            ("preset".into(), self.preset.clone()),
            ("input_size".into(), self.input_size.to_string()),
            ("convs".into(), convs.join(",")),
            ("pool_after".into(), pools.join(",")),
            (
                "pool".into(),
                format!("{}/{}", self.pool_kernel, self.pool_stride),
            ),
            ("adaptive_size".into(), self.adaptive_size.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("classes".into(), self.classes.to_string()),
        ]
    }

    fn from_manifest(kv: &BTreeMap<String, String>, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            format: "model manifest",
            path: path.to_path_buf(),
            reason,
        };
        let get = |key: &str| kv.get(key).ok_or_else(|| bad(format!("missing key {key}")));
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| bad(format!("{key} is not an integer")))
        };
        let parse_conv = |s: &str| -> Result<ConvSpec> {
            let err = || bad(format!("bad convolution spec {s:?}"));
            let (out, rest) = s.split_once(':').ok_or_else(err)?;
            let parts: Vec<usize> = rest
                .split('/')
                .map(|p| p.parse().map_err(|_| err()))
                .collect::<Result<_>>()?;
            let [k, st, pad] = parts[..] else {
                return Err(err());
            };
            Ok(ConvSpec::new(out.parse().map_err(|_| err())?, k, st, pad))
        };
        let convs = get("convs")?
            .split(',')
            .map(parse_conv)
            .collect::<Result<Vec<_>>>()?;
        let pool_after = get("pool_after")?
            .split(',')
            .map(|p| {
                p.parse()
                    .map_err(|_| bad(format!("bad pool position {p:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let (pk, ps) = get("pool")?
            .split_once('/')
            .ok_or_else(|| bad("bad pool spec".into()))?;
        let config = ModelConfig {
            preset: get("preset")?.clone(),
            input_size: num("input_size")?,
            convs,
            pool_after,
            pool_kernel: pk.parse().map_err(|_| bad("bad pool kernel".into()))?,
            pool_stride: ps.parse().map_err(|_| bad("bad pool stride".into()))?,
            adaptive_size: num("adaptive_size")?,
            hidden: num("hidden")?,
            classes: num("classes")?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// A built classifier: configuration, layer graph and the seed its
/// parameters were drawn with (if any).
#[derive(Debug, Clone, PartialEq)]
pub struct FlareModel {
    pub config: ModelConfig,
    pub graph: LayerGraph,
    pub seed: Option<u64>,
}

/// Builds the layer graph for a configuration with all parameters zero.
pub fn build_model(config: &ModelConfig) -> Result<FlareModel> {
    config.validate()?;
    let mut layers = Vec::new();
    let mut channels = 1;
    for (i, spec) in config.convs.iter().enumerate() {
        layers.push(Layer::Conv2d(Conv2d::zeros(
            channels,
            spec.out_channels,
            spec.kernel,
            spec.stride,
            spec.padding,
        )));
        layers.push(Layer::Relu);
        if config.pool_after.contains(&i) {
            layers.push(Layer::MaxPool2d {
                kernel: config.pool_kernel,
                stride: config.pool_stride,
            });
        }
        channels = spec.out_channels;
    }
    let a = config.adaptive_size;
    layers.push(Layer::AdaptiveAvgPool2d { out_h: a, out_w: a });
    layers.push(Layer::Linear(Linear::zeros(
        channels * a * a,
        config.hidden,
    )));
    layers.push(Layer::Relu);
    layers.push(Layer::Linear(Linear::zeros(config.hidden, config.classes)));
    layers.push(Layer::LogSoftmax);
    let graph = LayerGraph::with_input(layers, [1, config.input_size, config.input_size])
        .map_err(|e| Error::Topology(format!("{} input does not chain: {e}", config.input_size)))?;
    Ok(FlareModel {
        config: config.clone(),
        graph,
        seed: None,
    })
}

/// Fan-in scaled uniform bound `sqrt(6 / fan_in)`.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Draws weights uniformly in `[-sqrt(6/fan_in), sqrt(6/fan_in)]` and zeroes
/// biases. Draws are made in 32-bit so every parameter is exactly
/// representable in FXT1.
pub fn init_params(graph: &mut LayerGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in graph.layers_mut() {
        if let Some((w, b)) = layer.params_mut() {
            let fan_in: usize = w.shape()[1..].iter().product();
            let bound = init_bound(fan_in) as f32;
            for v in w.data_mut() {
                *v = rng.random_range(-bound..=bound) as f64;
            }
            b.data_mut().fill(0.0);
        }
    }
}

impl FlareModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = build_model(config)?;
        model.init(seed);
        Ok(model)
    }

    pub fn init(&mut self, seed: u64) {
        init_params(&mut self.graph, seed);
        self.seed = Some(seed);
    }

    /// Multiset of layer kinds, used by topology audits.
    pub fn kind_counts(&self) -> BTreeMap<LayerKind, usize> {
        let mut counts = BTreeMap::new();
        for layer in self.graph.layers() {
            *counts.entry(layer.kind()).or_insert(0) += 1;
        }
        counts
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_model(self, dir)
    }
}

fn param_file(layer: usize, which: &str) -> String {
    format!("layer{layer:02}_{which}.fxt")
}

/// Writes the manifest and one FXT1 file per parameter tensor into `dir`.
/// Fails if any parameter is not exactly representable in 32 bits, since the
/// round trip would then not be exact.
pub fn save_model(model: &FlareModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = vec![format!("format={FORMAT_TAG}")];
    for (k, v) in model.config.to_manifest() {
        lines.push(format!("{k}={v}"));
    }
    lines.push(format!(
        "seed={}",
        model
            .seed
            .map(|s| s.to_string())
            .unwrap_or_else(|| "none".into())
    ));
    for (i, layer) in model.graph.layers().iter().enumerate() {
        let Some((w, b)) = layer.params() else {
            continue;
        };
        for (which, t) in [("weight", w), ("bias", b)] {
            if !t.is_f32_exact() {
                return Err(Error::Model(format!(
                    "layer {i} {which} holds values that FXT1 cannot store exactly; call round_params_to_f32 first"
                )));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let name = param_file(i, which);
            lines.push(format!("param.{i}.{which}={name} {}", dims.join("x")));
            t.save_fxt1(&dir.join(&name))?;
        }
    }
    lines.push(String::new());
    let path = dir.join(MANIFEST);
    fs::write(&path, lines.join("\n")).map_err(|e| Error::io(&path, e))
}

/// Rounds every parameter to the nearest 32-bit float.
pub fn round_params_to_f32(graph: &mut LayerGraph) {
    for layer in graph.layers_mut() {
        if let Some((w, b)) = layer.params_mut() {
            w.round_to_f32();
            b.round_to_f32();
        }
    }
}

fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kv = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            format: "model manifest",
            path: path.to_path_buf(),
            reason: format!("line {} is not key=value", n + 1),
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(kv)
}

/// Loads a model directory written by [`save_model`].
pub fn load_model(dir: &Path) -> Result<FlareModel> {
    let manifest: PathBuf = dir.join(MANIFEST);
    let kv = read_manifest(&manifest)?;
    let bad = |reason: String| Error::Format {
        format: "model manifest",
        path: manifest.clone(),
        reason,
    };
    if kv.get("format").map(String::as_str) != Some(FORMAT_TAG) {
        return Err(bad(format!("expected format={FORMAT_TAG}")));
    }
    let config = ModelConfig::from_manifest(&kv, &manifest)?;
    let seed = match kv.get("seed").map(String::as_str) {
        None | Some("none") => None,
        Some(s) => Some(s.parse().map_err(|_| bad(format!("bad seed {s:?}")))?),
    };
    let mut model = build_model(&config)?;
    for (i, layer) in model.graph.layers_mut().iter_mut().enumerate() {
        let Some((w, b)) = layer.params_mut() else {
            continue;
        };
        for (which, slot) in [("weight", w), ("bias", b)] {
            let key = format!("param.{i}.{which}");
            let entry = kv.get(&key).ok_or_else(|| bad(format!("missing {key}")))?;
            let (file, dims) = entry
                .split_once(' ')
                .ok_or_else(|| bad(format!("{key} lacks declared dimensions")))?;
            let declared: Vec<usize> = dims
                .split('x')
                .map(|d| {
                    d.parse()
                        .map_err(|_| bad(format!("{key} has bad dimensions")))
                })
                .collect::<Result<_>>()?;
            let tensor = Tensor::load_fxt1(&dir.join(file))?;
            if declared != slot.shape() || tensor.shape() != slot.shape() {
                return Err(Error::Model(format!(
                    "{key}: configuration expects {:?}, manifest declares {declared:?}, file holds {:?}",
                    slot.shape(),
                    tensor.shape()
                )));
            }
            *slot = tensor;
        }
    }
    model.seed = seed;
    Ok(model)
}

/// Loads a model and checks that it was built from `expected`.
pub fn load_model_with_config(dir: &Path, expected: &ModelConfig) -> Result<FlareModel> {
    let model = load_model(dir)?;
    if &model.config != expected {
        return Err(Error::Model(format!(
            "{} holds a {:?} model that does not match the requested {:?} configuration",
            dir.display(),
            model.config.preset,
            expected.preset
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{network_forward, predict};

    #[test]
    fn five_convolutions_are_rejected() {
        let mut config = ModelConfig::desk();
        config.convs.pop();
        let err = build_model(&config).unwrap_err();
        assert!(err.to_string().contains("6 convolutional"), "{err}");
    }

    #[test]
    fn adapter_must_be_one_to_three() {
        let mut config = ModelConfig::desk();
        config.convs[0].out_channels = 4;
        assert!(matches!(build_model(&config), Err(Error::Topology(_))));
        let mut config = ModelConfig::desk();
        config.pool_after = vec![1, 2];
        assert!(matches!(build_model(&config), Err(Error::Topology(_))));
    }

    #[test]
    fn desk_preset_shape_chain() {
        let model = build_model(&ModelConfig::desk()).unwrap();
        let shapes = model.graph.shape_chain(&[1, 1, 64, 64]).unwrap();
        assert_eq!(shapes.last().unwrap(), &vec![1, 2]);
    }

    #[test]
    fn zero_model_emits_uniform_log_probs() {
        let model = build_model(&ModelConfig::desk()).unwrap();
        let (out, _) = network_forward(&model.graph, &Tensor::zeros(&[1, 1, 64, 64])).unwrap();
        for v in out.data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn topology_audit() {
        for config in [ModelConfig::desk(), ModelConfig::paper()] {
            let model = build_model(&config).unwrap();
            let counts = model.kind_counts();
            assert_eq!(counts[&LayerKind::Conv2d], 6);
            assert_eq!(counts[&LayerKind::Relu], 7);
            assert_eq!(counts[&LayerKind::MaxPool2d], 3);
            assert_eq!(counts[&LayerKind::AdaptiveAvgPool2d], 1);
            assert_eq!(counts[&LayerKind::Linear], 2);
            assert_eq!(counts[&LayerKind::LogSoftmax], 1);
            match &model.graph.layers()[0] {
                Layer::Conv2d(c) => {
                    assert_eq!(c.weight.shape(), &[3, 1, 3, 3]);
                    assert_eq!(c.stride, 1);
                }
                other => panic!("first layer is {other:?}"),
            }
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let config = ModelConfig::desk();
        let a = FlareModel::new(&config, 11).unwrap();
        let b = FlareModel::new(&config, 11).unwrap();
        let c = FlareModel::new(&config, 12).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_ne!(a.graph, c.graph);
        for layer in a.graph.layers() {
            if let Some((w, bias)) = layer.params() {
                let bound = init_bound(w.shape()[1..].iter().product());
                assert!(w.data().iter().all(|v| v.abs() <= bound));
                assert!(bias.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = FlareModel::new(&ModelConfig::desk(), 5).unwrap();
        model.save(dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back, model);
        let x = Tensor::full(&[1, 1, 64, 64], 0.3);
        assert_eq!(
            predict(&model.graph, &x).unwrap().data(),
            predict(&back.graph, &x).unwrap().data()
        );
    }

    #[test]
    fn truncated_parameter_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = FlareModel::new(&ModelConfig::desk(), 5).unwrap();
        model.save(dir.path()).unwrap();
        let victim = dir.path().join(param_file(0, "weight"));
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_model(dir.path()).is_err());
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        FlareModel::new(&ModelConfig::desk(), 5)
            .unwrap()
            .save(dir.path())
            .unwrap();
        let mut other = ModelConfig::desk();
        other.hidden = 32;
        assert!(load_model_with_config(dir.path(), &other).is_err());
        assert!(load_model_with_config(dir.path(), &ModelConfig::desk()).is_ok());

        // manifest edited to a different width: parameter shapes no longer match
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("hidden=64", "hidden=32");
        fs::write(&path, text).unwrap();
        assert!(load_model(dir.path()).is_err());
    }

    #[test]
    fn corrupt_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), "format=something-else\n").unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn unrepresentable_parameters_refuse_to_save() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = FlareModel::new(&ModelConfig::desk(), 5).unwrap();
        if let Some((w, _)) = model.graph.layers_mut()[0].params_mut() {
            w.data_mut()[0] = 0.1;
        }
        assert!(model.save(dir.path()).is_err());
        round_params_to_f32(&mut model.graph);
        model.save(dir.path()).unwrap();
    }
}
