//! Toy segmentation benchmark: data, metrics, retraining and timing.

pub mod data;
pub mod metrics;
pub mod train;

pub use data::{
    augment, augment_with, class_frequencies, collate, generate_scene, make_toy_dataset, sample_batch,
    AugmentParams, Batch, DatasetConfig, Sample, SegmentationSource, Split, ToyDataset,
    THREE_CLASS_FREQUENCY_BOUNDS,
};
pub use metrics::{fps_from_ms, miou, Confusion, EvalReport};
pub use train::{evaluate, finetune, measure_fps, FinetuneConfig, FinetuneResult};
