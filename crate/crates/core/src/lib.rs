//! Reward-guided decoding by adaptive importance sampling on pre-logits.
//!
//! An autoregressive generator's pre-logits `z_t` are shifted by Gaussian
//! perturbations `v_t ~ N(u_t, σ²I)` over a fixed window of `τ` generated
//! positions. Greedy decodes of the perturbed model are scored by a reward
//! model and the mean `U = [u_1, …, u_τ]` is moved by self-normalized
//! importance sampling towards the reward-tilted optimum, with `λ` weighting
//! the KL penalty to the unperturbed model.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`). The aliases at
//! the crate root fix `f64`, which is what the experiment harness uses.

pub mod analysis;
pub mod controller;
pub mod error;
pub mod harness;
pub mod model;
pub mod reward;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod trajectory;

pub use error::{Error, LoadError, Result};
pub use model::{GeneratorModel, RecurrentModel, TokenId, TokenSequence};
pub use reward::RewardModel;
pub use rng::SeedStream;
pub use scalar::Scalar;

/// `d × τ` perturbation in `f64`.
pub type Trajectory = trajectory::Trajectory<f64>;
pub type MeanTrajectory = trajectory::MeanTrajectory<f64>;
pub type ControlConfig = sampling::ControlConfig<f64>;
pub type WeightVector = sampling::WeightVector<f64>;
pub type McEstimate = sampling::McEstimate<f64>;
pub type ToyModel = model::RecurrentModel<f64>;
pub type SyntheticReward = reward::SyntheticReward<f64>;
pub type AispResult = controller::AispResult<f64>;
pub type IterationTrace = controller::IterationTrace<f64>;
pub type BonResult = controller::BonResult<f64>;
pub type ConvergenceCurves = analysis::ConvergenceCurves<f64>;
