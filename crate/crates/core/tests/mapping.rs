use std::f64::consts::PI;

use gaitlab_core::mapping::{
    knee_to_slide_pos, map_jacobian, map_positions, map_state, slide_to_knee_pos, JointMap,
};
use nalgebra::Vector3;
use proptest::prelude::*;

const MAP: JointMap = JointMap { l1: 0.4, l2: 0.4 };

fn fd_jacobian(map: &JointMap, q: &Vector3<f64>) -> nalgebra::Matrix3<f64> {
    let h = 1e-5;
    let mut jac = nalgebra::Matrix3::zeros();
    for c in 0..3 {
        let mut up = *q;
        let mut dn = *q;
        up[c] += h;
        dn[c] -= h;
        let d = (map_positions(map, &up).unwrap() - map_positions(map, &dn).unwrap()) / (2.0 * h);
        jac.set_column(c, &d);
    }
    jac
}

proptest! {
    #[test]
    fn knee_angle_round_trips(theta in 0.05..PI - 0.05, l1 in 0.2..0.6f64, l2 in 0.2..0.6f64) {
        for map in [MAP, JointMap::new(l1, l2).unwrap()] {
            let slide = knee_to_slide_pos(&map, theta).unwrap();
            let back = slide_to_knee_pos(&map, slide).unwrap();
            prop_assert!((back - theta).abs() <= 1e-10, "{theta} -> {slide} -> {back}");
        }
    }

    #[test]
    fn velocity_map_is_the_position_jacobian(
        hip in -1.5..1.5f64,
        ankle in -1.0..1.0f64,
        theta in 0.05..PI - 0.05,
        l1 in 0.2..0.6f64,
        l2 in 0.2..0.6f64,
    ) {
        let q = Vector3::new(hip, ankle, theta);
        for map in [MAP, JointMap::new(l1, l2).unwrap()] {
            let analytic = map_jacobian(&map, &q).unwrap();
            let numeric = fd_jacobian(&map, &q);
            for c in 0..3 {
                let err = (analytic.column(c) - numeric.column(c)).norm();
                let scale = analytic.column(c).norm().max(1e-3);
                prop_assert!(err / scale <= 1e-6, "column {c}: {err} vs {scale}");
            }
        }
    }

    #[test]
    fn velocity_map_is_linear_in_rates(
        theta in 0.05..PI - 0.05,
        rates in prop::array::uniform3(-5.0..5.0f64),
        a in -3.0..3.0f64,
    ) {
        let q = Vector3::new(0.1, -0.2, theta);
        let v = Vector3::from(rates);
        let (_, base) = map_state(&MAP, &q, &v).unwrap();
        let (_, scaled) = map_state(&MAP, &q, &(a * v)).unwrap();
        prop_assert!((scaled - a * base).norm() <= 1e-14 * (1.0 + base.norm() * a.abs()));
    }
}

#[test]
fn slide_length_decreases_with_knee_angle() {
    let mut prev = f64::INFINITY;
    let mut theta = 0.0;
    while theta <= PI {
        let slide = knee_to_slide_pos(&MAP, theta).unwrap();
        assert!(slide < prev, "not decreasing at {theta}");
        prev = slide;
        theta += 1e-3;
    }
}

#[test]
fn straight_knee_gives_full_length() {
    let (pos, vel) = map_state(&MAP, &Vector3::new(0.0, 0.0, 0.0), &Vector3::zeros()).unwrap();
    assert_eq!(pos, Vector3::new(0.0, 0.0, MAP.l1 + MAP.l2));
    assert_eq!(vel, Vector3::zeros());
}
