//! Desk-scale adversarial training laboratory.
//!
//! Implements dummy-class adversarial training (DUCAT): two-hot soft
//! labels, head doubling, and runtime projection, next to a conventional
//! PGD-AT baseline, on top of a small f64 autodiff tensor core. Synthetic
//! dataset generators, a gradient-attack suite, and an evaluation kit for
//! trade-off metrics and transfer diagnostics round out the lab.

pub mod adversary;
pub mod datasets;
pub mod ducat;
pub mod evalkit;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use adversary::{AdversarialBatch, AttackError, AttackSpec, LossHead, Norm, TargetMode};
pub use datasets::{Dataset, DatasetError, GaussianSpec, RingSpec};
pub use ducat::{DucatError, DucatHyper, TwoHotLabel};
pub use evalkit::{EvalError, EvalReport, OverlapHistogram, TransferMatrix};
pub use nn::{DummyRowInit, HeadMode, InitSpec, MlpModel, ModelError};
pub use rng::Rng;
pub use tensor::{backward, Tensor, TensorError};
pub use trainer::{
    EpochRecord, LrSchedule, Method, ModelArch, OptimConfig, RunRecord, TrainConfig, TrainError,
    TrainOutput,
};
