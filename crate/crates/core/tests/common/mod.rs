#![allow(dead_code)]

use gaitlab_core::gaitlib::{GaitLibrary, FORMAT_VERSION};
use gaitlab_core::gaitopt::{frame_manifest, Gait};
use gaitlab_core::hzd::{PhaseKind, VirtualConstraint};
use rand::Rng;

pub const N_FRAMES: usize = 42;

pub fn constraint() -> VirtualConstraint {
    VirtualConstraint {
        bezier_degree: 5,
        coeffs: vec![
            vec![0.3, 0.25, 0.2, 0.1, 0.0, -0.1],
            vec![0.6, 0.62, 0.65, 0.62, 0.6, 0.6],
            vec![-0.3, -0.2, 0.0, 0.2, 0.3, 0.35],
            vec![0.7, 0.9, 1.2, 1.0, 0.8, 0.7],
        ],
        phase_kind: PhaseKind::StanceAngle,
        phase_range: [-0.25, 0.25],
    }
}

/// Gait with the given frames and placeholder replay data.
pub fn gait_with_frames(command: [f64; 2], frames: Vec<Vec<f64>>) -> Gait {
    Gait {
        command,
        period_s: 0.6,
        cost: 1.0,
        converged: true,
        channel_manifest: frame_manifest().into_iter().map(|c| c.name).collect(),
        frames,
        torques: vec![vec![0.0; 6]; N_FRAMES],
        residuals: Vec::new(),
        iterations: 1,
        virtual_constraint: constraint(),
        source_frames: vec![vec![0.0; 14]; N_FRAMES],
    }
}

pub fn random_frames<R: Rng>(rng: &mut R) -> Vec<Vec<f64>> {
    let width = frame_manifest().len();
    (0..N_FRAMES)
        .map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn random_library<R: Rng>(vx: &[f64], vy: &[f64], rng: &mut R) -> GaitLibrary {
    let gaits = vx
        .iter()
        .flat_map(|&x| vy.iter().map(move |&y| [x, y]))
        .map(|c| gait_with_frames(c, random_frames(rng)))
        .collect();
    GaitLibrary {
        version: FORMAT_VERSION,
        vx_grid: vx.to_vec(),
        vy_grid: vy.to_vec(),
        channel_manifest: frame_manifest(),
        gaits,
    }
}
