//! Gaussian-prototype open-set few-shot relation classification.
//!
//! Each class is summarised by one Gaussian per view (main, head, tail,
//! context), a learned mixture over views, a range `R_c` and a margin `M_c`.
//! Queries that fall outside every range are labelled none-of-the-above.

pub mod attention;
pub mod boundary;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod matrix;
pub mod metric;
pub mod model;
pub mod quantile;
pub mod tape;
pub mod training;

pub use boundary::{
    classify, compute_margin, compute_range, BandPolicy, Boundary, ClassPrototype, Prediction,
    QuantileLevels,
};
pub use data::{Dataset, DatasetManifest, Episode, Instance, InstancePool, View, NUM_VIEWS};
pub use encoder::{encode_view, EncoderParams, Pooling, PromptBank, ViewGaussian};
pub use error::{GpamError, Result};
pub use eval::{
    evaluate, run_ablation, sweep_nota, AblationTable, EvalConfig, EvalReport, SweepResult,
};
pub use exec::Execution;
pub use matrix::Matrix;
pub use metric::{prototype_distance, view_distance, DistanceForm, ViewWeights, WeightMode};
pub use model::{build_prototypes, Block, MarginMode, ModelOptions, ModelParams, ParamGrads};
pub use training::{
    episode_loss, grad_check, gradients, train, Ablations, GradCheckConfig, GradientReport,
    PnsSource, TrainConfig, TrainOutcome, Variant,
};
