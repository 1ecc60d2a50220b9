//! Builds the desk preset, saves it as FXT1 files and checks that the
//! reloaded copy predicts identically.
//!
//! cargo run --example model_io [out-dir]

use anyhow::{ensure, Result};
use flarecast::autodiff::{predict, Tensor};
use flarecast::model::{load_model, round_params_to_f32, FlareModel, ModelConfig};

fn main() -> Result<()> {
    let dir = std::env::args().nth(1).map_or_else(
        || std::env::temp_dir().join("flarecast-model-io"),
        Into::into,
    );
    let config = ModelConfig::desk();
    let mut model = FlareModel::new(&config, 1)?;
    let shapes = model.graph.shape_chain(&[1, 1, 64, 64])?;
    println!("{} preset, {} layers", config.preset, model.graph.len());
    for (layer, shape) in model.graph.layers().iter().zip(&shapes[1..]) {
        println!("  {:<18} -> {shape:?}", layer.kind().to_string());
    }

    // FXT1 stores 32-bit floats
    round_params_to_f32(&mut model.graph);
    model.save(&dir)?;
    let loaded = load_model(&dir)?;
    let x = Tensor::full(&[2, 1, 64, 64], 0.5);
    ensure!(predict(&model.graph, &x)? == predict(&loaded.graph, &x)?);
    println!("saved to {}; reload predicts identically", dir.display());
    Ok(())
}
