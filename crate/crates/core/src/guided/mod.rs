//! Gait-guided policy training: observations, reward, environment, policy
//! optimization and evaluation.

pub mod env;
pub mod eval;
pub mod observation;
pub mod policy;
pub mod ppo;
pub mod reward;

pub use env::{Actuation, Env, EnvConfig, StepInfo};
pub use observation::{assemble_observation, Observation, ObservationProfile, Segment, Terrain};
pub use reward::{
    check_termination, pd_torque, reward, PdGains, RewardInputs, RewardTargets, RewardTerms,
    RewardWeights, Termination, TerminationConfig,
};
