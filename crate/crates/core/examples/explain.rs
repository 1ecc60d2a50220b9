//! Trains a small desk model, then explains one held-out FL magnetogram with
//! Guided Grad-CAM, Integrated Gradients and Deep SHAP. Writes raw FXT1
//! maps, metadata and PNG renderings.
//!
//! cargo run --release --example explain [out-dir]

use anyhow::Result;
use flarecast::attribution::{
    explain, localization_ratio, render_map, BaselineSet, ExplainOptions, Method, RenderMode,
};
use flarecast::autodiff::Tensor;
use flarecast::data::{blob_mask, fold_split, synth_dataset, Example, Label, Partition};
use flarecast::model::ModelConfig;
use flarecast::training::{run_fold, TrainConfig};
use std::path::{Path, PathBuf};

fn main() -> Result<()> {
    let out: PathBuf = std::env::args().nth(1).map_or_else(
        || std::env::temp_dir().join("flarecast-explain"),
        Into::into,
    );
    let data = synth_dataset(2100, 1.0 / 7.0, 7)?;
    let samples = data.labeled(Path::new("."))?;
    let images: Vec<Tensor> = data.samples.iter().map(|s| s.tensor(64)).collect();
    let test = Partition::ALL[0];
    let config = TrainConfig {
        epochs: 8,
        seed: 7,
        ..TrainConfig::default()
    };
    let run = run_fold(
        &ModelConfig::desk(),
        &samples,
        &images,
        &data.events,
        test,
        &config,
        0.5,
        |_, _| Ok(()),
    )?;
    let graph = &run.model.graph;

    let (train_idx, test_idx) = fold_split(&samples, test);
    let train: Vec<Example> = train_idx
        .iter()
        .map(|&i| Example {
            image: images[i].clone(),
            label: samples[i].label,
            origin: i,
            augmentation: None,
        })
        .collect();
    let baselines = BaselineSet::sample_nf(&train, 8, 7)?;
    let i = *test_idx
        .iter()
        .find(|&&i| samples[i].label == Label::FL)
        .expect("held-out FL sample");
    let input = Tensor::stack(&[&images[i]])?;
    let zero = Tensor::zeros(input.shape());
    let opts = ExplainOptions {
        steps: 128,
        ig_baseline: &zero,
        baselines: &baselines,
    };
    let mask = blob_mask(&data.samples[i].blobs, 64);

    std::fs::create_dir_all(&out)?;
    println!("sample {}", samples[i].timestamp);
    for method in [
        Method::GuidedGradCam,
        Method::IntegratedGradients,
        Method::DeepShap,
    ] {
        let map = explain(method, graph, &input, Label::FL, &opts)?;
        map.save(&out.join(format!("{}.fxt", method.name())))?;
        render_map(
            &map.values,
            images[i].data(),
            &out.join(format!("{}_overlay.png", method.name())),
            RenderMode::Overlay,
        )?;
        println!(
            "  {:<22} in/out-of-region ratio {:>6.2}  relative gap {}",
            method.name(),
            localization_ratio(&map.values, &mask).unwrap_or(f64::NAN),
            map.metadata
                .relative_gap
                .map_or("-".into(), |g| format!("{g:.2e}"))
        );
    }
    println!("maps in {}", out.display());
    Ok(())
}
