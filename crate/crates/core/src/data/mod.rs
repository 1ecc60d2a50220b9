//! Catalogs, labels, partitions, images, augmentation, and synthetic data.

pub mod augment;
pub mod catalog;
pub mod image;
pub mod labeling;
pub mod synth;

pub use augment::{
    augment, class_weights, fold_split, label_counts, load_examples, Augmentation, Example, Split,
    NEUTRAL_GRAY,
};
pub use catalog::{flux_to_class, Catalog, ClassLetter, FlareClass, FlareEvent};
pub use image::load_image;
pub use labeling::{
    assign_partition, label_samples, load_manifest, save_manifest, DatasetSummary, Label,
    LabeledSample, Partition,
};
pub use synth::{blob_mask, synth_dataset, synth_with, BlobBox, SynthDataset, SynthOptions};
