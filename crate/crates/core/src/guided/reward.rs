//! Step reward, PD action mapping and episode termination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaitlib::l_mse;
use crate::guided::observation::{project_observation, Observation, Segment};
use crate::model::{WalkerState, BASE_PITCH, BASE_Z};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub gait: f64,
    pub torque: f64,
    pub angular: f64,
    pub linear_tracking: f64,
    pub angular_tracking: f64,
    pub height: f64,
    pub smoothness: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            gait: 1.0,
            torque: 0.5,
            angular: 3.0,
            linear_tracking: 1.0,
            angular_tracking: 1.0,
            height: 2.0,
            smoothness: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gait,
            self.torque,
            self.angular,
            self.linear_tracking,
            self.angular_tracking,
            self.height,
            self.smoothness,
        ];
        if all.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("reward weights must be finite".into()));
        }
        Ok(())
    }

    /// Weights for standing practice: no gait term, doubled height reward.
    pub fn standing(&self) -> Self {
        Self {
            gait: 0.0,
            height: 2.0 * self.height,
            ..self.clone()
        }
    }
}

/// Signed contribution of each reward term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    pub gait: f64,
    pub torque: f64,
    pub angular: f64,
    pub linear_tracking: f64,
    pub angular_tracking: f64,
    pub height: f64,
    pub smoothness: f64,
}

impl RewardTerms {
    pub const NAMES: [&'static str; 7] = [
        "gait",
        "torque",
        "angular",
        "linear_tracking",
        "angular_tracking",
        "height",
        "smoothness",
    ];

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.gait,
            self.torque,
            self.angular,
            self.linear_tracking,
            self.angular_tracking,
            self.height,
            self.smoothness,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            gait: a[0],
            torque: a[1],
            angular: a[2],
            linear_tracking: a[3],
            angular_tracking: a[4],
            height: a[5],
            smoothness: a[6],
        }
    }

    /// Sum of the terms in declaration order.
    pub fn total(&self) -> f64 {
        self.as_array().iter().sum()
    }
}

/// Desired base velocities in the observation frames.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTargets {
    pub linear: [f64; 3],
    pub angular: [f64; 3],
}

impl RewardTargets {
    pub fn forward(vx: f64) -> Self {
        Self {
            linear: [vx, 0.0, 0.0],
            angular: [0.0; 3],
        }
    }
}

pub struct RewardInputs<'a> {
    pub obs: &'a Observation,
    pub tau: &'a [f64],
    pub action: &'a [f64],
    pub prev_action: &'a [f64],
    /// Raw base height (m).
    pub base_height: f64,
    /// Nearest library frame restricted to the guidance channels; `None` skips the gait term.
    pub guidance: Option<&'a [f64]>,
}

pub fn reward(
    inputs: &RewardInputs,
    targets: &RewardTargets,
    weights: &RewardWeights,
) -> Result<RewardTerms> {
    if inputs.action.len() != inputs.prev_action.len() {
        return Err(Error::shape(
            "previous action",
            inputs.action.len(),
            inputs.prev_action.len(),
        ));
    }
    let v_lin = inputs.obs.segment(Segment::LinearVelocity);
    let v_ang = inputs.obs.segment(Segment::AngularVelocity);
    if v_lin.len() != 3 || v_ang.len() != 3 {
        return Err(Error::shape("velocity segments", 3, v_lin.len().min(v_ang.len())));
    }
    let gait = match inputs.guidance {
        Some(frame) => -weights.gait * l_mse(&project_observation(inputs.obs)?, frame)?,
        None => 0.0,
    };
    let terms = RewardTerms {
        gait,
        torque: -weights.torque * norm(inputs.tau).tanh(),
        angular: -weights.angular * norm(v_ang).tanh(),
        linear_tracking: -weights.linear_tracking * diff_norm(v_lin, &targets.linear).tanh(),
        angular_tracking: -weights.angular_tracking * diff_norm(v_ang, &targets.angular).tanh(),
        height: weights.height * inputs.base_height.tanh(),
        smoothness: -weights.smoothness * diff_norm(inputs.action, inputs.prev_action).tanh(),
    };
    if !terms.total().is_finite() {
        return Err(Error::Domain(format!("non-finite reward terms {terms:?}")));
    }
    Ok(terms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdOutput {
    pub tau: Vec<f64>,
    pub saturated: Vec<bool>,
}

/// `kp (target - q) - kd qd`, clamped to `±limits`.
pub fn pd_torque(
    target: &[f64],
    q: &[f64],
    qd: &[f64],
    gains: &PdGains,
    limits: &[f64],
) -> Result<PdOutput> {
    let n = target.len();
    for (what, len) in [
        ("joint positions", q.len()),
        ("joint rates", qd.len()),
        ("kp", gains.kp.len()),
        ("kd", gains.kd.len()),
        ("torque limits", limits.len()),
    ] {
        if len != n {
            return Err(Error::shape(what, n, len));
        }
    }
    let mut tau = Vec::with_capacity(n);
    let mut saturated = Vec::with_capacity(n);
    for i in 0..n {
        let raw = gains.kp[i] * (target[i] - q[i]) - gains.kd[i] * qd[i];
        let clamped = raw.clamp(-limits[i], limits[i]);
        saturated.push(clamped != raw);
        tau.push(clamped);
    }
    Ok(PdOutput { tau, saturated })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Running,
    Fell,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TerminationConfig {
    pub min_height: f64,
    pub max_pitch: f64,
    pub episode_seconds: f64,
    pub dt: f64,
}

impl Default for TerminationConfig {
    fn default() -> Self {
        Self {
            min_height: 0.5,
            max_pitch: 0.8,
            episode_seconds: 10.0,
            dt: 0.02,
        }
    }
}

impl TerminationConfig {
    pub fn max_steps(&self) -> usize {
        (self.episode_seconds / self.dt - 1e-9).ceil() as usize
    }
}

pub fn check_termination(
    state: &WalkerState,
    step_count: usize,
    config: &TerminationConfig,
) -> Termination {
    let z = state.q[BASE_Z];
    let pitch = state.q[BASE_PITCH];
    if !(z >= config.min_height) || !(pitch.abs() <= config.max_pitch) {
        Termination::Fell
    } else if step_count >= config.max_steps() {
        Termination::Timeout
    } else {
        Termination::Running
    }
}
