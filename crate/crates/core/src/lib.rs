//! Structured label refinement with message-passing factor-neuron networks.
//!
//! Unary scene, action and pose scores (softmax-normalised outputs of some
//! upstream classifier) are refined over `K` residual steps. Each step runs
//! two sparsely connected, template-shared layers: a scene-action-pose
//! factor layer φ and a poses-all factor layer ψ, then adds the weighted
//! factor outputs back onto the scores. Gradients are derived by hand and
//! checked against central differences.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common `f64` instantiation.

pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod map_oracle;
pub mod model_file;
pub mod network;
pub mod scalar;
pub mod synth;
pub mod topology;
pub mod training;

pub use classifier::{train_linear_classifier, ClassifierOptions, LinearClassifier};
pub use config::{validate_config, Activation, Dims, LabelSpaces, ModelConfig};
pub use data::{argmax, load_dataset, pad_instance, save_dataset, softmax, Dataset, DatasetShape, Scores, Truth};
pub use error::{Error, Result};
pub use eval::{evaluate, extract_features, EvalReport, FeatureLayout, FeatureVector};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{FactorActivations, OutParams, PhiParams, PsiParams};
pub use map_oracle::{brute_force_map, LogLinearWeights, Labeling};
pub use model_file::{load_model, save_model, ModelFile};
pub use network::{network_backward, network_forward, predict, step_forward, Backprop, Gradients, NetworkParams, StepParams, StepTape};
pub use scalar::Scalar;
pub use synth::{generate_synthetic, SynthSpec};
pub use topology::{build_topology, Topology};
pub use training::{batch_loss, cross_entropy_loss, sgd_update, train, train_with_log, LossConfig, Phase, Schedule, TrainState};

pub type SceneInstance = data::SceneInstance<f64>;
pub type SceneInstance32 = data::SceneInstance<f32>;
pub type Network = NetworkParams<f64>;
pub type Network32 = NetworkParams<f32>;
pub type Frames = Dataset<f64>;
