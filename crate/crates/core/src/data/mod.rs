//! Synthetic seen/unseen segmentation scenes and the training views built
//! from them.

pub mod corpus;
pub mod scene;
pub mod views;

pub use corpus::{load_corpus, save_corpus, CorpusManifest};
pub use scene::{
    derive_seed, generate, generate_range, render, upsample_tokens, ClassSpec, LabelMap,
    Placement, SceneConfig, SceneSample, ShapeKind, IGNORE,
};
pub use views::{make_inductive_view, pseudo_label_from_probs, TrainingView, UnseenPolicy};
