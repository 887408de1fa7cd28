//! Transformation from the virtual-knee model's leg joints to the prismatic leg.
//!
//! Per leg, `[hip, ankle, knee]` maps to `[hip, ankle, slide]` with
//!
//! ```text
//! l      = sqrt(l1^2 + l2^2 + 2 l1 l2 cos(knee))
//! hip'   = hip   - (l2 / l) * knee
//! ankle' = ankle - (l1 / l) * knee
//! slide  = l
//! ```
//!
//! Velocities go through the exact Jacobian of this position map. The often-quoted
//! velocity matrix
//!
//! ```text
//! [1 0 -(l2/l) cos(knee)]
//! [0 1 -(l1/l) cos(knee)]
//! [0 0 -2 l1 l2 cos(knee)]
//! ```
//!
//! is not the derivative of the position map (its last row is not even a length
//! rate) and is kept only as [`printed_velocity_matrix`] for comparison.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{Sample, Trajectory};
use crate::model::{Leg, ModelKind, ModelParams, Torques, WalkerState, ANKLE, HIP, KNEE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointMap {
    pub l1: f64,
    pub l2: f64,
}

impl JointMap {
    pub fn new(l1: f64, l2: f64) -> Result<Self> {
        if !(l1 > 0.0 && l2 > 0.0 && l1.is_finite() && l2.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "segment lengths must be positive, got l1 = {l1}, l2 = {l2}"
            )));
        }
        Ok(Self { l1, l2 })
    }

    pub fn from_params(params: &ModelParams) -> Self {
        Self {
            l1: params.l1,
            l2: params.l2,
        }
    }
}

/// Hip-foot distance for knee angle `theta`.
pub fn knee_to_slide_pos(map: &JointMap, theta: f64) -> Result<f64> {
    if !(0.0..=PI).contains(&theta) {
        return Err(Error::Domain(format!("knee angle {theta} outside [0, pi]")));
    }
    Ok(slide_length(map, theta))
}

fn slide_length(map: &JointMap, theta: f64) -> f64 {
    let JointMap { l1, l2 } = *map;
    (l1 * l1 + l2 * l2 + 2.0 * l1 * l2 * theta.cos())
        .max(0.0)
        .sqrt()
}

pub fn slide_to_knee_pos(map: &JointMap, slide: f64) -> Result<f64> {
    let JointMap { l1, l2 } = *map;
    let (lo, hi) = ((l1 - l2).abs(), l1 + l2);
    if !(slide >= lo) {
        return Err(Error::Domain(format!(
            "slide length {slide} below minimum {lo}"
        )));
    }
    if !(slide <= hi) {
        return Err(Error::Domain(format!(
            "slide length {slide} above maximum {hi}"
        )));
    }
    let c = (slide * slide - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    Ok(c.clamp(-1.0, 1.0).acos())
}

/// Maps `[hip, ankle, knee]` of the knee model to `[hip, ankle, slide]`.
pub fn map_positions(map: &JointMap, knee_joints: &Vector3<f64>) -> Result<Vector3<f64>> {
    let [alpha, beta, theta] = [knee_joints.x, knee_joints.y, knee_joints.z];
    let l = knee_to_slide_pos(map, theta)?;
    if l <= 0.0 {
        return Err(Error::Singular(format!(
            "zero slide length at knee angle {theta}"
        )));
    }
    Ok(Vector3::new(
        alpha - map.l2 / l * theta,
        beta - map.l1 / l * theta,
        l,
    ))
}

/// Jacobian of [`map_positions`] with respect to `[hip, ankle, knee]`.
pub fn map_jacobian(map: &JointMap, knee_joints: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let theta = knee_joints.z;
    let l = knee_to_slide_pos(map, theta)?;
    if l <= 0.0 {
        return Err(Error::Singular(format!(
            "zero slide length at knee angle {theta}"
        )));
    }
    let JointMap { l1, l2 } = *map;
    let dl = -l1 * l2 * theta.sin() / l;
    let offset = |k: f64| -k / l + k * theta * dl / (l * l);
    Ok(Matrix3::new(
        1.0,
        0.0,
        offset(l2),
        0.0,
        1.0,
        offset(l1),
        0.0,
        0.0,
        dl,
    ))
}

pub fn map_state(
    map: &JointMap,
    knee_joints: &Vector3<f64>,
    knee_rates: &Vector3<f64>,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let pos = map_positions(map, knee_joints)?;
    let jac = map_jacobian(map, knee_joints)?;
    Ok((pos, jac * knee_rates))
}

/// The velocity matrix as commonly printed alongside the position map.
pub fn printed_velocity_matrix(map: &JointMap, theta: f64) -> Result<Matrix3<f64>> {
    let l = knee_to_slide_pos(map, theta)?;
    let JointMap { l1, l2 } = *map;
    let c = theta.cos();
    Ok(Matrix3::new(
        1.0,
        0.0,
        -l2 / l * c,
        0.0,
        1.0,
        -l1 / l * c,
        0.0,
        0.0,
        -2.0 * l1 * l2 * c,
    ))
}

fn leg_triplet(v: &crate::model::QVec, leg: Leg) -> Vector3<f64> {
    let o = leg.offset();
    Vector3::new(v[o + HIP], v[o + ANKLE], v[o + KNEE])
}

fn store_triplet(v: &mut crate::model::QVec, leg: Leg, t: &Vector3<f64>) {
    let o = leg.offset();
    v[o + HIP] = t.x;
    v[o + ANKLE] = t.y;
    v[o + KNEE] = t.z;
}

/// Maps a full virtual-knee state to prismatic coordinates; base coordinates pass through.
pub fn map_walker_state(map: &JointMap, state: &WalkerState) -> Result<WalkerState> {
    let mut out = state.clone();
    for leg in [Leg::Left, Leg::Right] {
        let (p, v) = map_state(
            map,
            &leg_triplet(&state.q, leg),
            &leg_triplet(&state.qd, leg),
        )?;
        store_triplet(&mut out.q, leg, &p);
        store_triplet(&mut out.qd, leg, &v);
    }
    Ok(out)
}

/// Pointwise [`map_walker_state`]. Torques are not transformed; mapped samples carry zeros.
pub fn map_trajectory(map: &JointMap, traj: &Trajectory) -> Result<Trajectory> {
    let samples = traj
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let state = map_walker_state(map, &s.state)
                .map_err(|e| Error::Singular(format!("sample {i}: {e}")))?;
            Ok(Sample {
                t: s.t,
                state,
                tau: Torques::zeros(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { samples })
}

/// Model parameters for the prismatic counterpart of a virtual-knee model.
pub fn prismatic_params(params: &ModelParams) -> ModelParams {
    params.with_kind(ModelKind::Prismatic)
}
