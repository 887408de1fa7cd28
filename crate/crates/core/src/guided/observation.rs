//! Policy observations and their projection onto library frame channels.
//!
//! Joint channels are ordered stance leg first, then swing leg, each as
//! `[hip, slide, ankle]`, matching the library frame layout.

use std::ops::Range;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaitopt::frame_manifest;
use crate::model::{WalkerState, BASE_PITCH, BASE_X, BASE_Z, NU};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    LinearVelocity,
    AngularVelocity,
    Gravity,
    Command,
    JointPosition,
    JointVelocity,
    PreviousAction,
    Heights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationProfile {
    pub name: String,
    pub segments: Vec<(Segment, usize)>,
}

impl ObservationProfile {
    /// Layout of the original 3D robot: 235 channels.
    pub fn full_scale() -> Self {
        use Segment::*;
        Self {
            name: "full-scale".into(),
            segments: vec![
                (LinearVelocity, 6),
                (AngularVelocity, 6),
                (Gravity, 3),
                (Command, 4),
                (JointPosition, 12),
                (JointVelocity, 12),
                (PreviousAction, 12),
                (Heights, 180),
            ],
        }
    }

    /// Planar layout with `n_heights` terrain samples.
    pub fn desk(n_heights: usize) -> Self {
        use Segment::*;
        Self {
            name: "desk".into(),
            segments: vec![
                (LinearVelocity, 3),
                (AngularVelocity, 3),
                (Gravity, 3),
                (Command, 4),
                (JointPosition, NU),
                (JointVelocity, NU),
                (PreviousAction, NU),
                (Heights, n_heights),
            ],
        }
    }

    pub fn width(&self) -> usize {
        self.segments.iter().map(|s| s.1).sum()
    }

    pub fn range(&self, seg: Segment) -> Option<Range<usize>> {
        let mut start = 0;
        for &(s, w) in &self.segments {
            if s == seg {
                return Some(start..start + w);
            }
            start += w;
        }
        None
    }
}

impl Default for ObservationProfile {
    fn default() -> Self {
        Self::desk(11)
    }
}

/// Ground profile under the walker.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terrain {
    #[default]
    Flat,
}

impl Terrain {
    pub fn height(&self, _x: f64) -> f64 {
        match self {
            Terrain::Flat => 0.0,
        }
    }
}

/// Horizontal spacing of the terrain samples around the base (m).
pub const HEIGHT_SAMPLE_SPACING: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub profile: ObservationProfile,
    pub values: Vec<f64>,
}

impl Observation {
    pub fn from_values(profile: ObservationProfile, values: Vec<f64>) -> Result<Self> {
        if values.len() != profile.width() {
            return Err(Error::shape("observation", profile.width(), values.len()));
        }
        Ok(Self { profile, values })
    }

    pub fn segment(&self, seg: Segment) -> &[f64] {
        match self.profile.range(seg) {
            Some(r) => &self.values[r],
            None => &[],
        }
    }
}

/// Gravity direction in the base frame (x forward, y lateral, z up).
pub fn gravity_in_base(pitch: f64) -> Vector3<f64> {
    // Positive pitch turns the base's forward axis upward.
    let base_to_world = Rotation3::from_axis_angle(&Vector3::y_axis(), -pitch);
    base_to_world.inverse() * Vector3::new(0.0, 0.0, -1.0)
}

/// Stance-first joint positions and rates.
pub fn stance_first_joints(state: &WalkerState) -> ([f64; NU], [f64; NU]) {
    let mut q = [0.0; NU];
    let mut qd = [0.0; NU];
    for (k, leg) in [state.stance, state.swing()].into_iter().enumerate() {
        for j in 0..3 {
            q[3 * k + j] = state.q[leg.offset() + j];
            qd[3 * k + j] = state.qd[leg.offset() + j];
        }
    }
    (q, qd)
}

fn fill(seg: Segment, width: usize, expected: usize, src: &[f64], out: &mut Vec<f64>) -> Result<()> {
    if width != expected {
        return Err(Error::shape(format!("{seg:?} segment"), expected, width));
    }
    out.extend_from_slice(src);
    Ok(())
}

/// Fills every segment of `profile` from the walker state.
pub fn assemble_observation(
    profile: &ObservationProfile,
    state: &WalkerState,
    command: [f64; 4],
    prev_action: &[f64],
    terrain: &Terrain,
) -> Result<Observation> {
    let mut values = Vec::with_capacity(profile.width());
    let (q, qd) = stance_first_joints(state);
    let g = gravity_in_base(state.q[BASE_PITCH]);
    for &(seg, w) in &profile.segments {
        match seg {
            Segment::LinearVelocity => fill(
                seg,
                w,
                3,
                &[state.qd[BASE_X], 0.0, state.qd[BASE_Z]],
                &mut values,
            )?,
            Segment::AngularVelocity => {
                fill(seg, w, 3, &[0.0, state.qd[BASE_PITCH], 0.0], &mut values)?
            }
            Segment::Gravity => fill(seg, w, 3, g.as_slice(), &mut values)?,
            Segment::Command => fill(seg, w, 4, &command, &mut values)?,
            Segment::JointPosition => fill(seg, w, NU, &q, &mut values)?,
            Segment::JointVelocity => fill(seg, w, NU, &qd, &mut values)?,
            Segment::PreviousAction => fill(seg, w, NU, prev_action, &mut values)?,
            Segment::Heights => {
                let x = state.q[BASE_X];
                let half = (w as f64 - 1.0) / 2.0;
                values.extend((0..w).map(|i| {
                    terrain.height(x + (i as f64 - half) * HEIGHT_SAMPLE_SPACING)
                }));
            }
        }
    }
    if prev_action.len() != NU {
        return Err(Error::shape("previous action", NU, prev_action.len()));
    }
    Ok(Observation {
        profile: profile.clone(),
        values,
    })
}

/// Library channels recoverable from an observation, as manifest indices.
/// Absolute base height is not observed, so `base_z` is left out.
pub fn guidance_channels() -> Vec<usize> {
    frame_manifest()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.name != "base_z")
        .map(|(i, _)| i)
        .collect()
}

/// Observation values in library channel order, restricted to [`guidance_channels`].
pub fn project_observation(obs: &Observation) -> Result<Vec<f64>> {
    let need = |seg: Segment, w: usize| -> Result<&[f64]> {
        let s = obs.segment(seg);
        if s.len() != w {
            return Err(Error::shape(format!("{seg:?} segment"), w, s.len()));
        }
        Ok(s)
    };
    let v = need(Segment::LinearVelocity, 3)?;
    let w = need(Segment::AngularVelocity, 3)?;
    let g = need(Segment::Gravity, 3)?;
    let q = need(Segment::JointPosition, NU)?;
    let qd = need(Segment::JointVelocity, NU)?;
    let pitch = (-g[0]).atan2(-g[2]);
    let mut out = Vec::with_capacity(16);
    out.push(pitch);
    out.extend_from_slice(q);
    out.extend_from_slice(&[v[0], v[2], w[1]]);
    out.extend_from_slice(qd);
    Ok(out)
}

/// A library frame restricted to [`guidance_channels`].
pub fn project_frame(frame: &[f64], channels: &[usize]) -> Vec<f64> {
    channels.iter().map(|&i| frame[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Leg, QVec};
    use approx::assert_relative_eq;

    #[test]
    fn full_scale_profile_is_235_wide() {
        assert_eq!(ObservationProfile::full_scale().width(), 235);
        assert_eq!(ObservationProfile::desk(11).width(), 3 + 3 + 3 + 4 + 6 + 6 + 6 + 11);
    }

    #[test]
    fn full_scale_profile_does_not_fit_the_planar_model() {
        let state = WalkerState::new(QVec::zeros(), QVec::zeros(), Leg::Left);
        let err = assemble_observation(
            &ObservationProfile::full_scale(),
            &state,
            [0.0; 4],
            &[0.0; NU],
            &Terrain::Flat,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }

    #[test]
    fn resting_walker_sees_gravity_straight_down() {
        let mut q = QVec::zeros();
        q[BASE_Z] = 0.7;
        let state = WalkerState::new(q, QVec::zeros(), Leg::Left);
        let p = ObservationProfile::default();
        let obs = assemble_observation(&p, &state, [0.0; 4], &[0.0; NU], &Terrain::Flat).unwrap();
        assert_eq!(obs.segment(Segment::Gravity), &[0.0, 0.0, -1.0]);
        assert!(obs.segment(Segment::LinearVelocity).iter().all(|v| *v == 0.0));
        assert!(obs.segment(Segment::AngularVelocity).iter().all(|v| *v == 0.0));
        assert!(obs.segment(Segment::Heights).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gravity_follows_pitch() {
        for pitch in [-0.4, 0.1, 0.3] {
            let g = gravity_in_base(pitch);
            assert_relative_eq!(g.x, -pitch.sin(), epsilon = 1e-15);
            assert_relative_eq!(g.z, -pitch.cos(), epsilon = 1e-15);
        }
    }

    #[test]
    fn joints_are_reported_stance_first() {
        let mut q = QVec::zeros();
        for i in 3..9 {
            q[i] = i as f64;
        }
        let state = WalkerState::new(q, QVec::zeros(), Leg::Right);
        let (js, _) = stance_first_joints(&state);
        assert_eq!(js, [6.0, 7.0, 8.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn projection_has_one_value_per_guidance_channel() {
        let mut q = QVec::zeros();
        q[BASE_PITCH] = 0.2;
        let state = WalkerState::new(q, QVec::zeros(), Leg::Left);
        let obs = assemble_observation(
            &ObservationProfile::default(),
            &state,
            [0.0; 4],
            &[0.0; NU],
            &Terrain::Flat,
        )
        .unwrap();
        let proj = project_observation(&obs).unwrap();
        assert_eq!(proj.len(), guidance_channels().len());
        assert_relative_eq!(proj[0], 0.2, epsilon = 1e-15);
    }
}
