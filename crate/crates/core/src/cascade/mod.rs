//! Stage splitting, per-stage aggregation and decoding, and cascaded
//! mask fusion.

pub mod model;
pub mod nga;
pub mod plan;

pub use model::{
    add_decoder, cascade_masks, decode_stage, decode_vars, sum_vars, CascadeConfig, CascadeModel,
    CascadeOutput, CascadeVars, DecoderConfig,
};
pub use nga::{nga_aggregate, nga_aggregate_var, nga_weights, softplus_inv};
pub use plan::{Aggregation, Fusion, ModeFlags, StagePlan, TextEmbedding};
