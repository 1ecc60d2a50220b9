//! Four-fold cross-validation on synthetic data: one model per held-out
//! partition, then the per-fold, aggregate and per-class report.
//!
//! cargo run --release --example cross_validation [epochs] [samples] [out-dir]

use anyhow::Result;
use flarecast::autodiff::Tensor;
use flarecast::data::synth_dataset;
use flarecast::evaluation::{location_report, save_csv, write_location_csv};
use flarecast::model::ModelConfig;
use flarecast::training::{cross_validate, TrainConfig};
use std::path::{Path, PathBuf};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(Ok(15), |s| s.parse())?;
    let n = args.next().map_or(Ok(7000), |s| s.parse())?;
    let out: PathBuf = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("flarecast-cv"), Into::into);

    let data = synth_dataset(n, 1.0 / 7.0, 7)?;
    let samples = data.labeled(Path::new("."))?;
    let images: Vec<Tensor> = data.samples.iter().map(|s| s.tensor(64)).collect();
    let config = TrainConfig {
        epochs,
        seed: 7,
        ..TrainConfig::default()
    };
    let started = std::time::Instant::now();
    let (runs, report) = cross_validate(
        &ModelConfig::desk(),
        &samples,
        &images,
        &data.events,
        &config,
        0.5,
    )?;
    println!("{report}");
    println!("({:.0} s)", started.elapsed().as_secs_f64());

    std::fs::create_dir_all(&out)?;
    save_csv(&out.join("folds.csv"), |w| report.write_folds_csv(w))?;
    save_csv(&out.join("groups.csv"), |w| report.write_groups_csv(w))?;
    let predictions: Vec<_> = runs
        .iter()
        .flat_map(|r| r.evaluation.predictions.clone())
        .collect();
    let rows = location_report(&predictions);
    save_csv(&out.join("locations.csv"), |w| write_location_csv(&rows, w))?;
    for r in &runs {
        r.log
            .save_csv(&out.join(format!("train-fold-{}.csv", r.test)))?;
    }
    println!("CSV reports in {}", out.display());
    Ok(())
}
