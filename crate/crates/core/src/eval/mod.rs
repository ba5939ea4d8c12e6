//! Corpora, FID, latent embeddings and Gram-space retrieval.

mod corpus;
mod embed;
mod fid;
mod retrieval;

pub use corpus::{
    ingest, make_synthetic_corpus, Corpus, CorpusItem, CorpusRecord, Family, IngestOptions, Provenance,
    DEFAULT_MIN_MASK_FRACTION,
};
pub use embed::{pca_embed, Ellipse, Embedding, PcaFrame};
pub use fid::{
    compute_fid, extractor_registry, frechet_distance, fid_from_features, ExtractorFactory, FeatureExtractor,
    FidReport, PooledBackboneExtractor,
};
pub use retrieval::{family_coverage, nearest_neighbors, Coverage, Neighbor};
