//! Text scaling with Poisson count models: the unidimensional conditional
//! estimator and its K-dimensional joint constrained extension, plus
//! Fisher-information and parametric-bootstrap uncertainty and a synthetic
//! corpus generator for recovery experiments.

pub mod dfm;
pub mod error;
pub mod estimate;
pub mod inference;
pub mod model;
pub mod stats;
pub mod synth;

pub use dfm::{
    load_counts, save_counts, tokenize_corpus, DfmFormat, DocumentFeatureMatrix,
    PreprocessReport, PreprocessSpec,
};
pub use error::{Error, Result};
pub use estimate::{
    align, choose_epsilon, fit_wordfish, fit_wordkrill, initial_values, signed_permutation,
    Alignment, EpsilonChoice, FitMethod, FitResult,
};
pub use inference::{
    confidence_ellipses, draw_positions, fisher_information, fisher_ses, parametric_bootstrap,
    PositionDraws, UncertaintyMethod, UncertaintyReport, DEFAULT_BOOTSTRAP_REPS,
};
pub use model::{
    gradients, lambda_matrix, log_likelihood, log_rate, AnchorPair, AnchorPolicy,
    ConstraintResiduals, FitConfig, Gradients, ModelParams,
};
pub use synth::{generate, SyntheticSpec};
