//! Writes a small synthetic dataset and shows how it is labeled and split.
//!
//! cargo run --example synth_dataset [out-dir]

use anyhow::Result;
use flarecast::data::synth::load_blobs;
use flarecast::data::{load_manifest, synth_dataset, Catalog, DatasetSummary, Label};

fn main() -> Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("flarecast-synth"), Into::into);
    let data = synth_dataset(700, 1.0 / 7.0, 7)?;
    data.write(&dir)?;

    // everything below reads back what was written
    let samples = load_manifest(&dir.join("manifest.csv"))?;
    let catalog = Catalog::load(&dir.join("catalog.csv"))?;
    let blobs = load_blobs(&dir.join("blobs.csv"))?;
    println!("{} in {}", samples.len(), dir.display());
    println!("{}", DatasetSummary::of(&samples, catalog.skipped_rows));

    let s = samples
        .iter()
        .find(|s| s.label == Label::FL)
        .expect("an FL sample");
    let event = s.defining_event(&catalog.events).expect("FL has an event");
    println!(
        "\nfirst FL sample {} (partition {}): {} at lon {:.1}",
        s.timestamp, s.partition, event.class, event.longitude
    );
    for (_, b) in blobs.iter().filter(|(t, _)| *t == s.timestamp) {
        println!("  active region box {b:?}");
    }
    Ok(())
}
