//! Dataset construction: synthetic phantoms, raw volume ingestion, and
//! persisted train/test splits.

pub mod dataset;
pub mod ingest;
pub mod phantom;

pub use dataset::{
    build_dataset, load_split, DatasetManifest, DatasetSpec, SamplePair, Source, Split, SplitMode,
};
pub use ingest::{ingest_volumes, IngestConfig, KeepRule, Window};
pub use phantom::{generate_phantom, Band, PhantomSpec};
