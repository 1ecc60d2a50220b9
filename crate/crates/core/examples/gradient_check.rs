//! Central-difference check of the desk-preset gradients.
//!
//! A continuous random input is differentiable almost surely. A quantized
//! magnetogram is not: equal 8-bit pixels put exact ties into max-pool
//! windows, and the check then compares against an average of one-sided
//! slopes. Both are printed.
//!
//! cargo run --example gradient_check [seed]

use anyhow::Result;
use flarecast::autodiff::graph::{FD_INPUT_SAMPLES, FD_PARAM_SAMPLES};
use flarecast::autodiff::{finite_difference_check, Tensor};
use flarecast::data::synth_dataset;
use flarecast::model::{FlareModel, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(7), |s| s.parse())?;
    let model = FlareModel::new(&ModelConfig::desk(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = Tensor::new(
        vec![1, 1, 64, 64],
        (0..64 * 64).map(|_| rng.random::<f64>()).collect(),
    )?;
    let magnetogram = Tensor::stack(&[&synth_dataset(8, 0.5, seed)?.samples[0].tensor(64)])?;

    println!(
        "desk preset, seed {seed}, {} coordinates",
        FD_PARAM_SAMPLES + FD_INPUT_SAMPLES
    );
    for (name, input) in [
        ("uniform input", &uniform),
        ("8-bit magnetogram", &magnetogram),
    ] {
        let err = finite_difference_check(&model.graph, input, seed)?;
        println!("  {name:<18} max relative error {err:.3e}");
    }
    Ok(())
}
