//! Corpus manifests, ingestion, normal-image synthesis and the procedural
//! corpus.

pub mod ingest;
pub mod inpaint;
pub mod manifest;
pub mod split;
pub mod synthetic;

pub use ingest::{distressed_only, ingest, load_gray, prepare_crack500_pdd, Crack500Output, Crack500Spec, IngestReport};
pub use inpaint::{synthesize_normal, MaskedCrackImage};
pub use manifest::{CorpusManifest, ManifestEntry, NORMAL};
pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};
