//! Class-weighted NLL training with plain SGD and a per-epoch decaying
//! learning rate, plus the partition-as-fold cross-validation driver.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{network_forward, param_gradients, LayerGraph, ParamGrads, Tensor};
use crate::data::{
    augment, class_weights, fold_split, label_counts, Example, FlareEvent, Label, LabeledSample,
    Partition, Split,
};
use crate::error::{Error, Result};
use crate::evaluation::{self, ConfusionMatrix, FoldEvaluation, SkillReport};
use crate::model::{round_params_to_f32, FlareModel, ModelConfig, CLASS_FL, NUM_CLASSES};

/// Arithmetic used for parameters between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    /// Parameters are rounded to 32-bit floats after every step.
    F32,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" | "64" => Ok(Precision::F64),
            "f32" | "32" => Ok(Precision::F32),
            _ => Err(Error::Training(format!(
                "unknown precision {s:?}, expected f32 or f64"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Factor applied to the learning rate after each epoch.
    pub lr_decay: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            initial_lr: 0.0099,
            lr_decay: 0.95,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Training(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!(
                "initial_lr must be positive, got {}",
                self.initial_lr
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        Ok(())
    }

    /// Learning rate of 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay.powi(epoch.saturating_sub(1) as i32)
    }
}

fn check_batch(log_probs: &Tensor, labels: &[usize]) -> Result<usize> {
    let [n, c] = log_probs.shape()[..] else {
        return Err(Error::Training(format!(
            "log-probs must be N x C, got {:?}",
            log_probs.shape()
        )));
    };
    if n != labels.len() {
        return Err(Error::Training(format!(
            "{n} log-prob rows but {} labels",
            labels.len()
        )));
    }
    if c != NUM_CLASSES {
        return Err(Error::Training(format!(
            "expected {NUM_CLASSES} classes, got {c}"
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::Training(format!("label {l} outside {{0, 1}}")));
    }
    Ok(n)
}

/// `-(1 / sum w_i) * sum w_i * log_probs[i, label_i]` with `w_i =
/// weights[label_i]`.
pub fn weighted_nll(log_probs: &Tensor, labels: &[usize], weights: [f64; 2]) -> Result<f64> {
    let n = check_batch(log_probs, labels)?;
    let lp = log_probs.data();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &y) in labels.iter().enumerate().take(n) {
        num += weights[y] * lp[i * NUM_CLASSES + y];
        den += weights[y];
    }
    if den <= 0.0 {
        return Err(Error::Training("batch has zero total weight".into()));
    }
    Ok(-num / den)
}

/// Gradient of [`weighted_nll`] with respect to the log-probs.
pub fn weighted_nll_grad(
    log_probs: &Tensor,
    labels: &[usize],
    weights: [f64; 2],
) -> Result<Tensor> {
    check_batch(log_probs, labels)?;
    let den: f64 = labels.iter().map(|&y| weights[y]).sum();
    if den <= 0.0 {
        return Err(Error::Training("batch has zero total weight".into()));
    }
    let mut g = Tensor::zeros(log_probs.shape());
    let gd = g.data_mut();
    for (i, &y) in labels.iter().enumerate() {
        gd[i * NUM_CLASSES + y] = -weights[y] / den;
    }
    Ok(g)
}

/// `p <- p - lr * g` for every parameter.
pub fn sgd_step(graph: &mut LayerGraph, grads: &[Option<ParamGrads>], lr: f64) -> Result<()> {
    if grads.len() != graph.len() {
        return Err(Error::Training(format!(
            "{} gradient slots for a {}-layer graph",
            grads.len(),
            graph.len()
        )));
    }
    for (i, (layer, g)) in graph.layers_mut().iter_mut().zip(grads).enumerate() {
        match (layer.params_mut(), g) {
            (Some((w, b)), Some(g)) => {
                if w.shape() != g.weight.shape() || b.shape() != g.bias.shape() {
                    return Err(Error::Training(format!(
                        "gradient shape mismatch at layer {i}"
                    )));
                }
                for (p, d) in w.data_mut().iter_mut().zip(g.weight.data()) {
                    *p -= lr * d;
                }
                for (p, d) in b.data_mut().iter_mut().zip(g.bias.data()) {
                    *p -= lr * d;
                }
            }
            (None, None) => {}
            _ => {
                return Err(Error::Training(format!(
                    "gradient presence mismatch at layer {i}"
                )))
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Weighted NLL over the epoch's batches, before each batch's update.
    pub loss: f64,
    /// TSS of the forecasts made during the epoch; `None` when undefined.
    pub tss_train: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// `epoch,lr,loss,tss_train`; an undefined TSS is left empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Training(format!("writing metrics log: {e}"));
        w.write_record(["epoch", "lr", "loss", "tss_train"])
            .map_err(err)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.8}", e.lr),
                format!("{:.8}", e.loss),
                e.tss_train.map(|t| format!("{t:.6}")).unwrap_or_default(),
            ])
            .map_err(err)?;
        }
        w.flush()
            .map_err(|e| Error::Training(format!("writing metrics log: {e}")))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        evaluation::save_csv(path, |w| self.write_csv(w))
    }
}

/// Trains in place; see [`train_with`].
pub fn train(
    graph: &mut LayerGraph,
    examples: &[Example],
    weights: [f64; 2],
    config: &TrainConfig,
) -> Result<TrainLog> {
    train_with(graph, examples, weights, config, |_, _| Ok(()))
}

/// Runs `config.epochs` epochs of mini-batch SGD over `examples`, reshuffled
/// each epoch from a generator seeded with `config.seed`. `on_epoch` sees
/// every epoch's metrics and the updated graph.
pub fn train_with(
    graph: &mut LayerGraph,
    examples: &[Example],
    weights: [f64; 2],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &LayerGraph) -> Result<()>,
) -> Result<TrainLog> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Training("empty training split".into()));
    }
    if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
        return Err(Error::Training(format!(
            "class weights must be finite and non-negative, got {weights:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut weight_sum) = (0.0, 0.0);
        let mut cm = ConfusionMatrix::default();
        for batch in order.chunks(config.batch_size) {
            let images: Vec<&Tensor> = batch.iter().map(|&i| &examples[i].image).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| examples[i].label.index()).collect();
            let x = Tensor::stack(&images)?;
            let (lp, trace) = network_forward(graph, &x)?;
            let batch_weight: f64 = labels.iter().map(|&y| weights[y]).sum();
            if batch_weight > 0.0 {
                loss_sum += weighted_nll(&lp, &labels, weights)? * batch_weight;
                weight_sum += batch_weight;
                let g = weighted_nll_grad(&lp, &labels, weights)?;
                let grads = param_gradients(graph, &trace, &g)?;
                sgd_step(graph, &grads, lr)?;
                if config.precision == Precision::F32 {
                    round_params_to_f32(graph);
                }
            }
            for (row, &y) in lp.data().chunks(NUM_CLASSES).zip(&labels) {
                let predicted = if row[CLASS_FL].exp() >= 0.5 {
                    Label::FL
                } else {
                    Label::NF
                };
                cm.record(Label::from_index(y)?, predicted);
            }
        }
        if !graph.params_finite() {
            return Err(Error::Training(format!(
                "parameters diverged in epoch {epoch}"
            )));
        }
        let metrics = EpochMetrics {
            epoch,
            lr,
            loss: if weight_sum > 0.0 {
                loss_sum / weight_sum
            } else {
                0.0
            },
            tss_train: evaluation::tss(&cm).ok(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.6} loss {:.5} tss_train {}",
            metrics.loss,
            metrics.tss_train.map_or("-".into(), |t| format!("{t:.3}"))
        );
        on_epoch(&metrics, graph)?;
        log.epochs.push(metrics);
    }
    Ok(log)
}

/// One cross-validation fold: trained model, its log and its held-out
/// scores.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub test: Partition,
    pub model: FlareModel,
    pub log: TrainLog,
    pub weights: [f64; 2],
    pub evaluation: FoldEvaluation,
}

/// Seed used for a fold's augmentation draws.
pub fn augmentation_seed(seed: u64, test: Partition) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ test.id() as u64
}

/// Trains on every partition except `test` and evaluates on `test`.
/// `images[i]` is the loaded image of `samples[i]`. The training split is
/// augmented and class weights come from its augmented counts; the test
/// split is used as is. The returned model's parameters are rounded to
/// 32-bit floats, and that rounded model is the one evaluated.
#[allow(clippy::too_many_arguments)]
pub fn run_fold(
    model_config: &ModelConfig,
    samples: &[LabeledSample],
    images: &[Tensor],
    events: &[FlareEvent],
    test: Partition,
    config: &TrainConfig,
    threshold: f64,
    on_epoch: impl FnMut(&EpochMetrics, &LayerGraph) -> Result<()>,
) -> Result<FoldRun> {
    if samples.len() != images.len() {
        return Err(Error::Training(format!(
            "{} samples but {} images",
            samples.len(),
            images.len()
        )));
    }
    let (train_idx, test_idx) = fold_split(samples, test);
    if train_idx.is_empty() {
        return Err(Error::Training(format!(
            "empty training split for test fold {test}"
        )));
    }
    if test_idx.is_empty() {
        return Err(Error::Training(format!("test fold {test} has no samples")));
    }
    let originals: Vec<Example> = train_idx
        .iter()
        .map(|&i| Example {
            image: images[i].clone(),
            label: samples[i].label,
            origin: i,
            augmentation: None,
        })
        .collect();
    let train_set = augment(
        &originals,
        Split::Train,
        augmentation_seed(config.seed, test),
    )?;
    drop(originals);
    let weights = class_weights(label_counts(&train_set))?;
    log::info!(
        "fold {test}: {} training examples after augmentation, weights NF {:.4} FL {:.4}",
        train_set.len(),
        weights[0],
        weights[1]
    );
    let mut model = FlareModel::new(model_config, config.seed)?;
    let log = train_with(&mut model.graph, &train_set, weights, config, on_epoch)?;
    // evaluate exactly what a saved model holds
    round_params_to_f32(&mut model.graph);
    drop(train_set);
    let test_samples: Vec<LabeledSample> = test_idx.iter().map(|&i| samples[i].clone()).collect();
    let test_images: Vec<&Tensor> = test_idx.iter().map(|&i| &images[i]).collect();
    let evaluation = evaluation::evaluate(
        format!("Fold-{}", test.id()),
        &model.graph,
        &test_samples,
        &test_images,
        threshold,
        events,
    )?;
    Ok(FoldRun {
        test,
        model,
        log,
        weights,
        evaluation,
    })
}

/// Runs [`run_fold`] with each partition held out in turn.
pub fn cross_validate(
    model_config: &ModelConfig,
    samples: &[LabeledSample],
    images: &[Tensor],
    events: &[FlareEvent],
    config: &TrainConfig,
    threshold: f64,
) -> Result<(Vec<FoldRun>, SkillReport)> {
    let runs = Partition::ALL
        .iter()
        .map(|&p| {
            run_fold(
                model_config,
                samples,
                images,
                events,
                p,
                config,
                threshold,
                |_, _| Ok(()),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let evals: Vec<FoldEvaluation> = runs.iter().map(|r| r.evaluation.clone()).collect();
    let report = SkillReport::from_folds(&evals)?;
    Ok((runs, report))
}
