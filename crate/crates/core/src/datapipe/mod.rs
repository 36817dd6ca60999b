//! Datasets, paired-view augmentation and data-ordering schedules.

mod augment;
mod dataset;
mod schedule;

pub use augment::{
    augment_batch, augment_pair, augment_single_batch, augment_view, eval_batch, eval_transform, AugmentationConfig,
    Normalize, CIFAR_MEAN, CIFAR_STD,
};
pub use dataset::{
    load_dataset, load_dataset_sized, make_subset, parse_cifar10_records, Dataset, DatasetFormat, ImageRef, Split,
    SyntheticSpec, CIFAR_CLASSES, CIFAR_RECORD,
};
pub use schedule::{build_schedule, ChunkSchedule, Eligible, OrderingMode, OrderingPlan, Phase, DEFAULT_CHUNKS};
