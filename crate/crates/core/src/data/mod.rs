//! Low-resolution dataset fabrication, student input preparation and paired loading.

pub mod generate;
pub mod image_ops;
pub mod loader;
pub mod manifest;
pub mod synthetic;

pub use generate::{compute_normalization, default_lr_root, generate_lr_dataset, scan_source, GenerationReport};
pub use image_ops::{
    bicubic_resize, degrade, gaussian_blur, gaussian_kernel, prepare_student_input, ChannelStats, DegradationSpec,
    FloatImage,
};
pub use loader::{load_paired_batches, DistillationBatch, LoaderOptions, MissingPolicy, PairedDataset};
pub use manifest::{DatasetManifest, ManifestHeader, ManifestRecord, Split};
pub use synthetic::{write_synthetic_source, SYNTHETIC_CLASSES};
