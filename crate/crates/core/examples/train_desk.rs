//! Trains the desk preset on one fold of a synthetic dataset and scores the
//! held-out partition.
//!
//! cargo run --example train_desk [epochs] [samples]

use anyhow::Result;
use flarecast::autodiff::Tensor;
use flarecast::data::{synth_dataset, Partition};
use flarecast::model::ModelConfig;
use flarecast::training::{run_fold, TrainConfig};
use std::path::Path;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(Ok(5), |s| s.parse())?;
    let n = args.next().map_or(Ok(2100), |s| s.parse())?;

    let data = synth_dataset(n, 1.0 / 7.0, 7)?;
    let samples = data.labeled(Path::new("."))?;
    let images: Vec<Tensor> = data.samples.iter().map(|s| s.tensor(64)).collect();
    let config = TrainConfig {
        epochs,
        seed: 7,
        ..TrainConfig::default()
    };
    let run = run_fold(
        &ModelConfig::desk(),
        &samples,
        &images,
        &data.events,
        Partition::ALL[0],
        &config,
        0.5,
        |m, _| {
            println!(
                "epoch {:>2}  lr {:.5}  loss {:.4}  train TSS {}",
                m.epoch,
                m.lr,
                m.loss,
                m.tss_train.map_or("-".into(), |t| format!("{t:.3}"))
            );
            Ok(())
        },
    )?;
    let e = &run.evaluation;
    println!(
        "\nclass weights NF {:.3} FL {:.3}\n{}: {}  TSS {:.3}  HSS {:.3}",
        run.weights[0],
        run.weights[1],
        e.fold,
        e.matrix,
        flarecast::evaluation::tss(&e.matrix)?,
        flarecast::evaluation::hss(&e.matrix)?
    );
    Ok(())
}
