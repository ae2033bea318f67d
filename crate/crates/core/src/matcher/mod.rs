//! Hierarchical correspondence: exact top-K matching at the coarsest level,
//! then per finer level neighbourhood propagation and GRU refinement.

pub mod exhaustive;
pub mod field;
pub mod hierarchy;
pub mod propagate;
pub mod refiner;

pub use exhaustive::{exhaustive_match, exhaustive_match_capped, similarity_matrix_bytes, DEFAULT_EXHAUSTIVE_CAP};
pub use field::{CorrField, OffsetField, Point};
pub use hierarchy::{
    exhaustive_memory_estimate, hierarchical_backward, hierarchical_match, hierarchical_match_traced,
    hierarchical_memory_estimate, offsets_scores, refine_level, upsample_field, MatchConfig, MatchGrads,
    MatchTrace,
};
pub use propagate::{propagate, Provenance};
pub use refiner::{
    gru_refine_step, load_refiners, refiners_from_layers, refiners_to_layers, save_refiners, RefineMode,
    RefinerGrads, RefinerParams, REFINER_LAYERS,
};
