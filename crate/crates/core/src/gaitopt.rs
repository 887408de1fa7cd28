//! Trapezoidal direct collocation of one periodic walking step on the virtual-knee
//! model, with the virtual-constraint parameters as decision variables.
//!
//! Decision vector layout, for `n` nodes:
//!
//! ```text
//! [x_0 (14), ..., x_{n-1}, bezier (4 x (degree+1)), phase_lo, phase_hi, T]
//! ```
//!
//! States are in the stance chart (see [`crate::chart`]). Torques are not free
//! variables: at every node they are the tracking controller's torques for the
//! current curve parameters, so the collocated motion is the closed-loop motion the
//! controller reproduces in simulation. With near-massless legs the torque response of
//! the swing joints is very large, and keeping torques as separate unknowns makes the
//! constraint linearization useless away from the solution.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bezier;
use crate::chart::{self, MinState, NM, NX};
use crate::dynamics::angular_momentum;
use crate::error::{Error, Result};
use crate::hzd::{self, ClosedLoop, Gains, PhaseKind, VirtualConstraint, N_BEZIER};
use crate::mapping::{map_walker_state, JointMap};
use crate::model::{
    Leg, ModelKind, ModelParams, Torques, WalkerState, BASE_PITCH, BASE_X, BASE_Z, NU,
};
use crate::nlp::{self, fd_hessian, fd_jacobian, NlpProblem, SolveReport, SolverOptions, Triplets};

pub const VX_MAX: f64 = 1.2;
pub const DURATION_MIN: f64 = 0.2;
pub const DURATION_MAX: f64 = 1.2;
pub const BEZIER_DEGREE: usize = 5;
/// Minimum normal force at every node (N).
pub const NORMAL_FORCE_MIN: f64 = 1.0;
/// Required downward swing-foot speed at touchdown (m/s).
pub const TOUCHDOWN_SPEED_MIN: f64 = 0.02;
/// Joint bounds other than the length joints: pitch, hip, ankle (rad).
pub const PITCH_LIMIT: f64 = 0.5;
pub const HIP_LIMIT: f64 = 1.2;
pub const ANKLE_LIMIT: f64 = 1.0;
/// Upper bound on the impact's angular-momentum transfer ratio for forward gaits. Its
/// square is the dominant multiplier of the step-to-step map, so this sets the
/// gait's speed-mode contraction.
pub const MOMENTUM_TRANSFER_MAX: f64 = 0.92;

const N_COEFF: usize = N_BEZIER * (BEZIER_DEGREE + 1);
/// Curve coefficients, phase interval and duration.
const N_SHARED: usize = N_COEFF + 3;
/// Node state followed by the shared parameters.
const NODE_LOCAL: usize = NX + N_SHARED;
const JAC_STEP: f64 = 1e-6;
const HESS_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub vx: f64,
    pub vy: f64,
}

impl Command {
    pub fn new(vx: f64, vy: f64) -> Self {
        Self { vx, vy }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.vx, self.vy]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NlpSettings {
    #[serde(flatten)]
    pub solver: SolverOptions,
    /// Peak swing-foot clearance required at mid-step (m).
    pub clearance_min: f64,
    pub n_nodes: usize,
    /// Output-dynamics gains of the tracking controller.
    pub gains: Gains,
}

impl Default for NlpSettings {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            clearance_min: 0.02,
            n_nodes: 42,
            gains: Gains::default(),
        }
    }
}

impl NlpSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.solver.constraint_tol > 0.0 && self.solver.optimality_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.n_nodes < 10 {
            return Err(Error::Config(format!(
                "at least 10 nodes required, got {}",
                self.n_nodes
            )));
        }
        if !(self.clearance_min >= 0.0) {
            return Err(Error::Config("clearance_min must be non-negative".into()));
        }
        Ok(())
    }
}

type ElemFn = Box<dyn Fn(&GaitNlp, &[f64]) -> DVector<f64> + Send + Sync>;

struct Element {
    vars: Vec<usize>,
    row: usize,
    len: usize,
    /// Row scale (inequalities only).
    scale: f64,
    curvature: bool,
    f: ElemFn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub name: String,
    pub rows: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyViolation {
    pub name: String,
    pub max_violation: f64,
}

/// Decision-vector layout and constraint assembly for one commanded speed.
pub struct GaitNlp {
    pub params: ModelParams,
    pub command: Command,
    pub settings: NlpSettings,
    pub n_nodes: usize,
    pub phase_kind: PhaseKind,
    cost_scale: f64,
    n_defects: usize,
    eq: Vec<Element>,
    ineq: Vec<Element>,
    eq_families: Vec<Family>,
    ineq_families: Vec<Family>,
    n_eq: usize,
    n_ineq: usize,
}

impl GaitNlp {
    pub fn n_vars(&self) -> usize {
        self.shared_index() + N_SHARED
    }

    pub fn state_index(&self, k: usize) -> usize {
        k * NX
    }

    pub fn shared_index(&self) -> usize {
        self.n_nodes * NX
    }

    pub fn coeff_index(&self) -> usize {
        self.shared_index()
    }

    pub fn theta_index(&self) -> usize {
        self.coeff_index() + N_COEFF
    }

    pub fn duration_index(&self) -> usize {
        self.theta_index() + 2
    }

    pub fn eq_families(&self) -> &[Family] {
        &self.eq_families
    }

    pub fn ineq_families(&self) -> &[Family] {
        &self.ineq_families
    }

    pub fn n_eq(&self) -> usize {
        self.n_eq
    }

    pub fn n_ineq(&self) -> usize {
        self.n_ineq
    }

    pub fn state(&self, z: &[f64], k: usize) -> MinState {
        MinState::from_column_slice(&z[self.state_index(k)..self.state_index(k) + NX])
    }

    pub fn duration(&self, z: &[f64]) -> f64 {
        z[self.duration_index()]
    }

    pub fn virtual_constraint(&self, z: &[f64]) -> VirtualConstraint {
        vc_from(self.phase_kind, &z[self.shared_index()..])
    }

    fn node_time(&self, k: usize, duration: f64) -> f64 {
        k as f64 * duration / (self.n_nodes - 1) as f64
    }

    /// Node state followed by the shared parameters.
    fn node_local(&self, z: &[f64], k: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(NODE_LOCAL);
        v.extend_from_slice(&z[self.state_index(k)..self.state_index(k) + NX]);
        v.extend_from_slice(&z[self.shared_index()..]);
        v
    }

    fn closed_loop(&self, k: usize, v: &[f64]) -> Option<ClosedLoop> {
        let vc = vc_from(self.phase_kind, &v[NX..]);
        let t = self.node_time(k, v[NODE_LOCAL - 1]);
        hzd::closed_loop_min(&self.params, &vc, &self.settings.gains, &min_state(v), t).ok()
    }

    fn node_field(&self, k: usize, v: &[f64]) -> DVector<f64> {
        match self.closed_loop(k, v) {
            Some(c) => DVector::from_column_slice(c.xdot.as_slice()),
            None => DVector::from_element(NX, f64::NAN),
        }
    }

    fn node_torque(&self, k: usize, v: &[f64]) -> DVector<f64> {
        match self.closed_loop(k, v) {
            Some(c) => DVector::from_column_slice(c.u.as_slice()),
            None => DVector::from_element(NU, f64::NAN),
        }
    }

    /// Node torques, stance leg first.
    pub fn torque(&self, z: &[f64], k: usize) -> Torques {
        Torques::from_iterator(self.node_torque(k, &self.node_local(z, k)).iter().copied())
    }

    fn defects(&self, z: &[f64], fields: &[DVector<f64>]) -> DVector<f64> {
        let half = 0.5 * self.duration(z) / (self.n_nodes - 1) as f64;
        let mut out = DVector::zeros(self.n_defects);
        for k in 0..self.n_nodes - 1 {
            let x0 = self.state(z, k);
            let x1 = self.state(z, k + 1);
            for i in 0..NX {
                out[k * NX + i] = x1[i] - x0[i] - half * (fields[k][i] + fields[k + 1][i]);
            }
        }
        out
    }

    fn all_fields(&self, z: &[f64]) -> Vec<DVector<f64>> {
        (0..self.n_nodes)
            .into_par_iter()
            .map(|k| self.node_field(k, &self.node_local(z, k)))
            .collect()
    }

    fn gather(z: &[f64], vars: &[usize]) -> Vec<f64> {
        vars.iter().map(|&i| z[i]).collect()
    }

    /// Unscaled objective: mean squared torque norm per node spacing.
    pub fn cost(&self, z: &[f64]) -> f64 {
        (0..self.n_nodes)
            .into_par_iter()
            .map(|k| self.node_torque(k, &self.node_local(z, k)).norm_squared())
            .collect::<Vec<_>>()
            .iter()
            .sum::<f64>()
            / (self.n_nodes - 1) as f64
    }

    fn eval_all(&self, z: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let fields = self.all_fields(z);
        let mut c = DVector::zeros(self.n_eq);
        c.rows_mut(0, self.n_defects)
            .copy_from(&self.defects(z, &fields));
        let eval = |elems: &[Element], out: &mut DVector<f64>| {
            let vals: Vec<DVector<f64>> = elems
                .par_iter()
                .map(|e| (e.f)(self, &Self::gather(z, &e.vars)))
                .collect();
            for (e, v) in elems.iter().zip(vals) {
                out.rows_mut(e.row, e.len).copy_from(&v);
            }
        };
        eval(&self.eq, &mut c);
        let mut g = DVector::zeros(self.n_ineq);
        eval(&self.ineq, &mut g);
        (c, g)
    }
}

/// Virtual constraint from `[coeffs, phase_lo, phase_hi, ..]`.
fn vc_from(kind: PhaseKind, shared: &[f64]) -> VirtualConstraint {
    VirtualConstraint {
        bezier_degree: BEZIER_DEGREE,
        coeffs: shared[..N_COEFF]
            .chunks(BEZIER_DEGREE + 1)
            .map(|c| c.to_vec())
            .collect(),
        phase_kind: kind,
        phase_range: [shared[N_COEFF], shared[N_COEFF + 1]],
    }
}

/// Ratio of the angular momenta about the swing and stance feet just before touchdown.
/// The impulse acts at the swing foot, so this is the post/pre ratio of the angular
/// momentum about the respective stance points.
pub fn momentum_transfer(params: &ModelParams, x: &MinState) -> f64 {
    let full = chart::to_full(params, x, Leg::Left, 0.0);
    let (foot, _) = chart::swing_foot(params, x);
    let about_stance = angular_momentum(params, &full, nalgebra::Vector2::zeros());
    angular_momentum(params, &full, foot) / about_stance
}

/// Length-joint interval of the model.
fn length_range(params: &ModelParams) -> (f64, f64) {
    match params.kind {
        ModelKind::VirtualKnee => params.knee_range(),
        ModelKind::Prismatic => (params.slide_min, params.slide_max),
    }
}

/// Clearance envelope over normalized time `s`; peaks at `clearance_min` mid-step.
pub fn clearance_profile(clearance_min: f64, s: f64) -> f64 {
    let b = 4.0 * s * (1.0 - s);
    clearance_min * b * b
}

struct Builder {
    elems: Vec<Element>,
    families: Vec<Family>,
    rows: usize,
}

impl Builder {
    fn new(start: usize) -> Self {
        Self {
            elems: Vec::new(),
            families: Vec::new(),
            rows: start,
        }
    }

    fn family(&mut self, name: &str, build: impl FnOnce(&mut Self)) {
        let start = self.rows;
        build(self);
        self.families.push(Family {
            name: name.into(),
            rows: start..self.rows,
        });
    }

    fn add(&mut self, vars: Vec<usize>, len: usize, scale: f64, curvature: bool, f: ElemFn) {
        self.elems.push(Element {
            vars,
            row: self.rows,
            len,
            scale,
            curvature,
            f,
        });
        self.rows += len;
    }

    fn bound(&mut self, var: usize, lo: f64, hi: f64, scale: f64) {
        self.add(
            vec![var],
            2,
            scale,
            false,
            Box::new(move |_, v| DVector::from_vec(vec![v[0] - lo, hi - v[0]])),
        );
    }
}

fn range(start: usize, len: usize) -> Vec<usize> {
    (start..start + len).collect()
}

fn min_state(v: &[f64]) -> MinState {
    MinState::from_column_slice(&v[..NX])
}

/// Builds the collocation problem for a commanded speed.
pub fn build_nlp(
    params: &ModelParams,
    command: Command,
    settings: &NlpSettings,
) -> Result<GaitNlp> {
    params.validate()?;
    settings.validate()?;
    if !(0.0..=VX_MAX + 1e-9).contains(&command.vx) {
        return Err(Error::Domain(format!(
            "commanded vx = {} outside the solvable range [0, {VX_MAX}] m/s",
            command.vx
        )));
    }
    let n = settings.n_nodes;
    let phase_kind = if command.vx > 0.0 {
        PhaseKind::StanceAngle
    } else {
        PhaseKind::Time
    };
    let mut nlp = GaitNlp {
        params: params.clone(),
        command,
        settings: settings.clone(),
        n_nodes: n,
        phase_kind,
        cost_scale: 1.0 / (params.total_mass() * params.g * (params.l1 + params.l2)).powi(2),
        n_defects: (n - 1) * NX,
        eq: Vec::new(),
        ineq: Vec::new(),
        eq_families: Vec::new(),
        ineq_families: Vec::new(),
        n_eq: 0,
        n_ineq: 0,
    };
    let ti = nlp.duration_index();
    let thi = nlp.theta_index();
    let last = n - 1;
    let xi = |k: usize| nlp.state_index(k);
    let node_vars = |k: usize| {
        let mut v = range(xi(k), NX);
        v.extend(range(nlp.shared_index(), N_SHARED));
        v
    };

    let mut eq = Builder::new(nlp.n_defects);
    eq.families.push(Family {
        name: "defect".into(),
        rows: 0..nlp.n_defects,
    });
    eq.family("periodicity", |b| {
        let mut vars = range(xi(last), NX);
        vars.extend(range(xi(0), NX));
        b.add(
            vars,
            NX,
            1.0,
            true,
            Box::new(|p, v| {
                let post = chart::impact_map_unchecked(&p.params, &min_state(v));
                let x0 = MinState::from_column_slice(&v[NX..2 * NX]);
                DVector::from_column_slice((post - x0).as_slice())
            }),
        );
    });
    eq.family("guard", |b| {
        b.add(
            range(xi(last), NX),
            1,
            1.0,
            true,
            Box::new(|p, v| {
                DVector::from_element(1, chart::swing_foot(&p.params, &min_state(v)).0.y)
            }),
        );
    });
    eq.family("velocity", |b| {
        let mut vars = range(xi(last), NX);
        vars.push(ti);
        b.add(
            vars,
            1,
            1.0,
            true,
            Box::new(|p, v| {
                let step = chart::swing_foot(&p.params, &min_state(v)).0.x;
                DVector::from_element(1, step - p.command.vx * v[NX])
            }),
        );
    });
    eq.family("phase", |b| match phase_kind {
        PhaseKind::StanceAngle => {
            for (k, which) in [(0, 0), (last, 1)] {
                let mut vars = range(xi(k), NX);
                vars.push(thi + which);
                b.add(
                    vars,
                    1,
                    1.0,
                    true,
                    Box::new(|p, v| {
                        let a = hzd::stance_angle(&p.params, &min_state(v)).value;
                        DVector::from_element(1, a - v[NX])
                    }),
                );
            }
        }
        PhaseKind::Time => {
            b.add(
                vec![thi, thi + 1, ti],
                2,
                1.0,
                false,
                Box::new(|_, v| DVector::from_vec(vec![v[0], v[1] - v[2]])),
            );
        }
    });
    // Only the curve outputs are pinned at the start. With light legs the impact keeps the
    // outgoing foot's angle and angle rate, so periodicity already fixes the foot-level
    // outputs; pinning them too makes the rows dependent.
    eq.family("initial_outputs", |b| {
        b.add(
            node_vars(0),
            2 * N_BEZIER,
            1.0,
            true,
            Box::new(|p, v| {
                let vc = vc_from(p.phase_kind, &v[NX..]);
                let out = hzd::outputs_min(&p.params, &vc, &min_state(v), 0.0);
                DVector::from_iterator(
                    2 * N_BEZIER,
                    out.y
                        .iter()
                        .take(N_BEZIER)
                        .chain(out.dy.iter().take(N_BEZIER))
                        .copied(),
                )
            }),
        );
    });

    let limits = params.actuator_limits();
    let (len_lo, len_hi) = length_range(params);
    let clearance_min = settings.clearance_min;
    let weight = params.total_mass() * params.g;
    let mu = params.mu;
    let mut ineq = Builder::new(0);
    ineq.family("torque", |b| {
        for k in 0..n {
            b.add(
                node_vars(k),
                2 * NU,
                1.0 / limits.max(),
                true,
                Box::new(move |p, v| {
                    let u = p.node_torque(k, v);
                    DVector::from_iterator(
                        2 * NU,
                        (0..NU).flat_map(|j| [limits[j] - u[j], u[j] + limits[j]]),
                    )
                }),
            );
        }
    });
    ineq.family("length_joint", |b| {
        for k in 0..n {
            for i in [2, 5] {
                b.bound(xi(k) + i, len_lo, len_hi, 1.0);
            }
        }
    });
    ineq.family("joint_limits", |b| {
        for k in 0..n {
            b.bound(xi(k), -PITCH_LIMIT, PITCH_LIMIT, 1.0);
            for i in [1, 4] {
                b.bound(xi(k) + i, -HIP_LIMIT, HIP_LIMIT, 1.0);
            }
            for i in [3, 6] {
                b.bound(xi(k) + i, -ANKLE_LIMIT, ANKLE_LIMIT, 1.0);
            }
        }
    });
    ineq.family("duration", |b| b.bound(ti, DURATION_MIN, DURATION_MAX, 1.0));
    ineq.family("clearance", |b| {
        for k in 1..last {
            let need = clearance_profile(clearance_min, k as f64 / last as f64);
            b.add(
                range(xi(k), NX),
                1,
                10.0,
                true,
                Box::new(move |p, v| {
                    DVector::from_element(1, chart::swing_foot(&p.params, &min_state(v)).0.y - need)
                }),
            );
        }
    });
    ineq.family("contact", |b| {
        for k in 0..n {
            b.add(
                node_vars(k),
                3,
                1.0 / weight,
                true,
                Box::new(move |p, v| match p.closed_loop(k, v) {
                    Some(c) => DVector::from_vec(vec![
                        mu * c.grf.normal - c.grf.tangential,
                        mu * c.grf.normal + c.grf.tangential,
                        c.grf.normal - NORMAL_FORCE_MIN,
                    ]),
                    None => DVector::from_element(3, f64::NAN),
                }),
            );
        }
    });
    ineq.family("touchdown_descent", |b| {
        b.add(
            range(xi(last), NX),
            1,
            1.0,
            true,
            Box::new(|p, v| {
                let vz = chart::swing_foot(&p.params, &min_state(v)).1.y;
                DVector::from_element(1, -vz - TOUCHDOWN_SPEED_MIN)
            }),
        );
    });
    if phase_kind == PhaseKind::StanceAngle {
        ineq.family("impact_contraction", |b| {
            b.add(
                range(xi(last), NX),
                2,
                1.0,
                true,
                Box::new(|p, v| {
                    let r = momentum_transfer(&p.params, &min_state(v));
                    DVector::from_vec(vec![MOMENTUM_TRANSFER_MAX - r, r])
                }),
            );
        });
        ineq.family("phase_monotone", |b| {
            for k in 0..last {
                let mut vars = range(xi(k), NX);
                vars.extend(range(xi(k + 1), NX));
                b.add(
                    vars,
                    1,
                    10.0,
                    false,
                    Box::new(|p, v| {
                        let a0 = hzd::stance_angle(&p.params, &min_state(v)).value;
                        let a1 = hzd::stance_angle(&p.params, &min_state(&v[NX..])).value;
                        DVector::from_element(1, a1 - a0)
                    }),
                );
            }
        });
    }

    nlp.n_eq = eq.rows;
    nlp.n_ineq = ineq.rows;
    nlp.eq = eq.elems;
    nlp.ineq = ineq.elems;
    nlp.eq_families = eq.families;
    nlp.ineq_families = ineq.families;
    Ok(nlp)
}

impl NlpProblem for GaitNlp {
    fn n_vars(&self) -> usize {
        GaitNlp::n_vars(self)
    }

    fn n_eq(&self) -> usize {
        self.n_eq
    }

    fn n_ineq(&self) -> usize {
        self.n_ineq
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        self.cost_scale * self.cost(z.as_slice())
    }

    fn objective_grad(&self, z: &DVector<f64>) -> DVector<f64> {
        let zs = z.as_slice();
        let w = self.cost_scale / (self.n_nodes - 1) as f64;
        let grads: Vec<DVector<f64>> = (0..self.n_nodes)
            .into_par_iter()
            .map(|k| {
                let v = self.node_local(zs, k);
                let u = self.node_torque(k, &v);
                let jac = fd_jacobian(|v| self.node_torque(k, v), &v, JAC_STEP);
                jac.transpose() * u * (2.0 * w)
            })
            .collect();
        let mut g = DVector::zeros(GaitNlp::n_vars(self));
        for (k, gk) in grads.iter().enumerate() {
            self.scatter_node(k, gk.as_slice(), |i, v| g[i] += v);
        }
        g
    }

    fn constraints(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        self.eval_all(z.as_slice())
    }

    fn jacobians(&self, z: &DVector<f64>) -> (Triplets, Triplets) {
        let zs = z.as_slice();
        let n = self.n_nodes;
        let node_jacs: Vec<(DVector<f64>, DMatrix<f64>)> = (0..n)
            .into_par_iter()
            .map(|k| {
                let v = self.node_local(zs, k);
                (
                    self.node_field(k, &v),
                    fd_jacobian(|v| self.node_field(k, v), &v, JAC_STEP),
                )
            })
            .collect();
        let half = 0.5 * self.duration(zs) / (n - 1) as f64;
        let dt_factor = 0.5 / (n - 1) as f64;
        let mut jc = Triplets::default();
        for k in 0..n - 1 {
            let row = k * NX;
            let mut shared = DMatrix::<f64>::zeros(NX, N_SHARED);
            for (node, sign) in [(k, -1.0), (k + 1, 1.0)] {
                let col = self.state_index(node);
                let jac = &node_jacs[node].1;
                for i in 0..NX {
                    jc.push(row + i, col + i, sign);
                    for j in 0..NX {
                        jc.push(row + i, col + j, -half * jac[(i, j)]);
                    }
                }
                shared -= half * jac.columns(NX, N_SHARED);
            }
            for i in 0..NX {
                shared[(i, N_SHARED - 1)] -=
                    dt_factor * (node_jacs[k].0[i] + node_jacs[k + 1].0[i]);
                for j in 0..N_SHARED {
                    jc.push(row + i, self.shared_index() + j, shared[(i, j)]);
                }
            }
        }
        let elem_jacs = |elems: &[Element], out: &mut Triplets| {
            let blocks: Vec<DMatrix<f64>> = elems
                .par_iter()
                .map(|e| fd_jacobian(|v| (e.f)(self, v), &Self::gather(zs, &e.vars), JAC_STEP))
                .collect();
            for (e, b) in elems.iter().zip(blocks) {
                for i in 0..e.len {
                    for (j, &var) in e.vars.iter().enumerate() {
                        out.push(e.row + i, var, b[(i, j)]);
                    }
                }
            }
        };
        elem_jacs(&self.eq, &mut jc);
        let mut jg = Triplets::default();
        elem_jacs(&self.ineq, &mut jg);
        (jc, jg)
    }

    fn lagrangian_hessian(
        &self,
        z: &DVector<f64>,
        obj_factor: f64,
        lambda: &DVector<f64>,
        ineq_mult: &DVector<f64>,
    ) -> DMatrix<f64> {
        let zs = z.as_slice();
        let nv = GaitNlp::n_vars(self);
        let n = self.n_nodes;
        let mut h = DMatrix::zeros(nv, nv);
        // Per node: torque cost plus the node's share of the trapezoidal defects,
        // which enter with weight T/(2(n-1)) times the adjacent interval multipliers.
        let w_cost = obj_factor * self.cost_scale / (n - 1) as f64;
        let blocks: Vec<DMatrix<f64>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let mut w = DVector::zeros(NX);
                if k > 0 {
                    w += lambda.rows((k - 1) * NX, NX);
                }
                if k < n - 1 {
                    w += lambda.rows(k * NX, NX);
                }
                let scalar = |v: &[f64]| {
                    let Some(c) = self.closed_loop(k, v) else {
                        return f64::NAN;
                    };
                    let weight = v[NODE_LOCAL - 1] * 0.5 / (n - 1) as f64;
                    w_cost * c.u.norm_squared()
                        + weight * w.dot(&DVector::from_column_slice(c.xdot.as_slice()))
                };
                fd_hessian(scalar, &self.node_local(zs, k), HESS_STEP)
            })
            .collect();
        for (k, b) in blocks.iter().enumerate() {
            let idx = self.node_indices(k);
            for (a, &ia) in idx.iter().enumerate() {
                for (c, &ic) in idx.iter().enumerate() {
                    h[(ia, ic)] += b[(a, c)];
                }
            }
        }
        let curved: Vec<(&Element, &DVector<f64>)> = self
            .eq
            .iter()
            .map(|e| (e, lambda))
            .chain(self.ineq.iter().map(|e| (e, ineq_mult)))
            .filter(|(e, _)| e.curvature)
            .collect();
        let elem_blocks: Vec<DMatrix<f64>> = curved
            .par_iter()
            .map(|(e, mult)| {
                let lam = mult.rows(e.row, e.len).into_owned();
                if lam.iter().all(|v| *v == 0.0) {
                    return DMatrix::zeros(e.vars.len(), e.vars.len());
                }
                fd_hessian(
                    |v| -lam.dot(&(e.f)(self, v)),
                    &Self::gather(zs, &e.vars),
                    HESS_STEP,
                )
            })
            .collect();
        for ((e, _), b) in curved.iter().zip(elem_blocks) {
            for (a, &va) in e.vars.iter().enumerate() {
                for (c, &vc) in e.vars.iter().enumerate() {
                    h[(va, vc)] += b[(a, c)];
                }
            }
        }
        h
    }

    fn ineq_scale(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.n_ineq);
        for e in &self.ineq {
            s.rows_mut(e.row, e.len).fill(e.scale);
        }
        s
    }
}

impl GaitNlp {
    fn node_indices(&self, k: usize) -> Vec<usize> {
        let mut idx = range(self.state_index(k), NX);
        idx.extend(range(self.shared_index(), N_SHARED));
        idx
    }

    fn scatter_node(&self, k: usize, local: &[f64], mut add: impl FnMut(usize, f64)) {
        for (i, idx) in self.node_indices(k).into_iter().enumerate() {
            add(idx, local[i]);
        }
    }
}

fn check_len(nlp: &GaitNlp, z: &[f64]) -> Result<()> {
    if z.len() != nlp.n_vars() {
        return Err(Error::shape("decision vector", nlp.n_vars(), z.len()));
    }
    Ok(())
}

/// Objective value: `(1/T) sum_k |tau_k|^2 dt` with `dt = T/(n-1)`.
pub fn eval_cost(nlp: &GaitNlp, z: &[f64]) -> Result<f64> {
    check_len(nlp, z)?;
    Ok(nlp.cost(z))
}

#[derive(Debug, Clone)]
pub struct ConstraintReport {
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
    /// Equality families first, then inequality families, in declaration order.
    pub families: Vec<FamilyViolation>,
    pub max_violation: f64,
}

pub fn eval_constraints(nlp: &GaitNlp, z: &[f64]) -> Result<ConstraintReport> {
    check_len(nlp, z)?;
    let (eq, ineq) = nlp.eval_all(z);
    let mut families = Vec::new();
    for f in &nlp.eq_families {
        let v = eq
            .rows(f.rows.start, f.rows.len())
            .iter()
            .fold(0.0_f64, |m, x| m.max(x.abs()));
        families.push(FamilyViolation {
            name: f.name.clone(),
            max_violation: v,
        });
    }
    for f in &nlp.ineq_families {
        let v = ineq
            .rows(f.rows.start, f.rows.len())
            .iter()
            .fold(0.0_f64, |m, x| m.max(-x));
        families.push(FamilyViolation {
            name: f.name.clone(),
            max_violation: v.max(0.0),
        });
    }
    let max_violation = families
        .iter()
        .map(|f| f.max_violation)
        .fold(0.0_f64, |a, b| if b.is_nan() { f64::NAN } else { a.max(b) });
    Ok(ConstraintReport {
        eq,
        ineq,
        families,
        max_violation,
    })
}

/// Solution of the collocation problem in virtual-knee coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaitSolution {
    pub command: Command,
    pub z: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub period: f64,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    pub max_violation: f64,
    pub optimality: f64,
    pub status: String,
    pub residuals: Vec<FamilyViolation>,
    pub virtual_constraint: VirtualConstraint,
    /// Node states in the stance chart.
    pub states: Vec<Vec<f64>>,
    /// Node torques, stance leg first.
    pub torques: Vec<Vec<f64>>,
}

impl GaitSolution {
    pub fn state(&self, k: usize) -> MinState {
        MinState::from_column_slice(&self.states[k])
    }

    /// Pre-impact state at the end of the step.
    pub fn boundary_state(&self) -> MinState {
        self.state(self.states.len() - 1)
    }

    pub fn boundary_walker_state(&self, params: &ModelParams) -> WalkerState {
        chart::to_full(params, &self.boundary_state(), Leg::Left, 0.0)
    }
}

/// Forward kinematics inverse for a leg: joint triple that puts the foot at `r`
/// relative to the hip with the foot level, for base pitch `pitch`.
fn leg_ik(params: &ModelParams, r: nalgebra::Vector2<f64>, pitch: f64) -> [f64; 3] {
    let d = r.norm();
    let leg = r.x.atan2(-r.y);
    match params.kind {
        ModelKind::VirtualKnee => {
            let (l1, l2) = (params.l1, params.l2);
            let c = ((d * d - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
            let knee = c.acos();
            let thigh = leg + (l2 * knee.sin()).atan2(l1 + l2 * knee.cos());
            let hip = thigh - pitch;
            [hip, knee, knee - thigh]
        }
        ModelKind::Prismatic => [leg - pitch, d, -leg],
    }
}

/// Heuristic initial trajectory: level hip at constant speed, smooth swing arc.
pub fn cold_start(nlp: &GaitNlp) -> Vec<f64> {
    let params = &nlp.params;
    let n = nlp.n_nodes;
    let duration = 0.4;
    let step = nlp.command.vx * duration;
    let max_len = params.slide_max;
    let height = (0.7f64)
        .min((max_len * max_len - 0.25 * step * step).max(0.0).sqrt() - 0.01)
        .max(params.slide_min + 0.05);
    let lift = 0.06;
    let positions = |t: f64| -> [f64; NM] {
        let s = t / duration;
        let hip_x = -0.5 * step + step * s;
        let hip = nalgebra::Vector2::new(hip_x, height);
        let st = leg_ik(params, nalgebra::Vector2::new(0.0, 0.0) - hip, 0.0);
        let smooth = s * s * (3.0 - 2.0 * s);
        let foot =
            nalgebra::Vector2::new(-step + 2.0 * step * smooth, 6.75 * lift * s * s * (1.0 - s));
        let sw = leg_ik(params, foot - hip, 0.0);
        [0.0, st[0], st[1], st[2], sw[0], sw[1], sw[2]]
    };
    let h = 1e-5;
    let mut z = vec![0.0; nlp.n_vars()];
    let mut fit: Vec<Vec<(f64, f64)>> = vec![Vec::new(); N_BEZIER];
    let mut angles = Vec::new();
    for k in 0..n {
        let t = duration * k as f64 / (n - 1) as f64;
        let q = positions(t);
        let qp = positions(t + h);
        let qm = positions(t - h);
        let mut x = MinState::zeros();
        for i in 0..NM {
            x[i] = q[i];
            x[NM + i] = (qp[i] - qm[i]) / (2.0 * h);
        }
        let o = nlp.state_index(k);
        z[o..o + NX].copy_from_slice(x.as_slice());
        angles.push(hzd::stance_angle(params, &x).value);
        for (row, &j) in hzd::BEZIER_JOINTS.iter().enumerate() {
            fit[row].push((t, x[j]));
        }
    }
    z[nlp.duration_index()] = duration;
    let theta = match nlp.phase_kind {
        PhaseKind::StanceAngle => [angles[0], angles[n - 1]],
        PhaseKind::Time => [0.0, duration],
    };
    let ci = nlp.coeff_index();
    for (row, samples) in fit.iter().enumerate() {
        let pts: Vec<(f64, f64)> = samples
            .iter()
            .enumerate()
            .map(|(k, &(t, v))| {
                let s = match nlp.phase_kind {
                    PhaseKind::StanceAngle => (angles[k] - theta[0]) / (theta[1] - theta[0]),
                    PhaseKind::Time => t / duration,
                };
                (s, v)
            })
            .collect();
        let c = bezier::fit(BEZIER_DEGREE, &pts);
        z[ci + row * (BEZIER_DEGREE + 1)..ci + (row + 1) * (BEZIER_DEGREE + 1)].copy_from_slice(&c);
    }
    let thi = nlp.theta_index();
    z[thi] = theta[0];
    z[thi + 1] = theta[1];
    z
}

/// Solves the collocation problem, from `warm_start` when given.
pub fn solve_gait(
    nlp: &GaitNlp,
    settings: &NlpSettings,
    warm_start: Option<&GaitSolution>,
) -> Result<GaitSolution> {
    let (z0, warm) = match warm_start {
        Some(w) => {
            check_len(nlp, &w.z)?;
            let mut z0 = w.z.clone();
            if w.virtual_constraint.phase_kind != nlp.phase_kind {
                // Re-seed the phase interval in the target's own units.
                let [lo, hi] = match nlp.phase_kind {
                    PhaseKind::Time => [0.0, nlp.duration(&z0)],
                    PhaseKind::StanceAngle => [0, nlp.n_nodes - 1]
                        .map(|k| hzd::stance_angle(&nlp.params, &nlp.state(&z0, k)).value),
                };
                z0[nlp.theta_index()] = lo;
                z0[nlp.theta_index() + 1] = hi;
            }
            let lambda =
                (w.lambda.len() == nlp.n_eq).then(|| DVector::from_column_slice(&w.lambda));
            let mu = (w.mu.len() == nlp.n_ineq).then(|| DVector::from_column_slice(&w.mu));
            (
                z0,
                nlp::WarmStart {
                    lambda,
                    mu,
                    rho: None,
                },
            )
        }
        None => (cold_start(nlp), nlp::WarmStart::default()),
    };
    let report = nlp::solve(nlp, &DVector::from_vec(z0), &warm, &settings.solver);
    solution_from_report(nlp, report)
}

fn solution_from_report(nlp: &GaitNlp, report: SolveReport) -> Result<GaitSolution> {
    let z: Vec<f64> = report.z.iter().copied().collect();
    let constraints = eval_constraints(nlp, &z)?;
    let n = nlp.n_nodes;
    Ok(GaitSolution {
        command: nlp.command,
        period: nlp.duration(&z),
        cost: nlp.cost(&z),
        converged: report.converged,
        iterations: report.iterations,
        max_violation: constraints.max_violation,
        optimality: report.optimality,
        status: report.status,
        residuals: constraints.families,
        virtual_constraint: nlp.virtual_constraint(&z),
        states: (0..n)
            .map(|k| nlp.state(&z, k).iter().copied().collect())
            .collect(),
        torques: (0..n)
            .map(|k| nlp.torque(&z, k).iter().copied().collect())
            .collect(),
        lambda: report.lambda.iter().copied().collect(),
        mu: report.mu.iter().copied().collect(),
        z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Position,
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub kind: ChannelKind,
    pub unit: String,
}

/// Channels of a library frame, all in prismatic-model coordinates.
pub fn frame_manifest() -> Vec<Channel> {
    let ch = |name: &str, kind, unit: &str| Channel {
        name: name.into(),
        kind,
        unit: unit.into(),
    };
    use ChannelKind::{Position as P, Velocity as V};
    vec![
        ch("base_z", P, "m"),
        ch("base_pitch", P, "rad"),
        ch("stance_hip", P, "rad"),
        ch("stance_slide", P, "m"),
        ch("stance_ankle", P, "rad"),
        ch("swing_hip", P, "rad"),
        ch("swing_slide", P, "m"),
        ch("swing_ankle", P, "rad"),
        ch("base_vx", V, "m/s"),
        ch("base_vz", V, "m/s"),
        ch("pitch_rate", V, "rad/s"),
        ch("stance_hip_rate", V, "rad/s"),
        ch("stance_slide_rate", V, "m/s"),
        ch("stance_ankle_rate", V, "rad/s"),
        ch("swing_hip_rate", V, "rad/s"),
        ch("swing_slide_rate", V, "m/s"),
        ch("swing_ankle_rate", V, "rad/s"),
    ]
}

/// Frame vector of a prismatic-coordinate state, stance leg first.
pub fn frame_of_state(state: &WalkerState) -> Vec<f64> {
    let st = state.stance.offset();
    let sw = state.swing().offset();
    let mut f = vec![state.q[BASE_Z], state.q[BASE_PITCH]];
    f.extend((0..3).map(|j| state.q[st + j]));
    f.extend((0..3).map(|j| state.q[sw + j]));
    f.push(state.qd[BASE_X]);
    f.push(state.qd[BASE_Z]);
    f.push(state.qd[BASE_PITCH]);
    f.extend((0..3).map(|j| state.qd[st + j]));
    f.extend((0..3).map(|j| state.qd[sw + j]));
    f
}

/// One library gait: 42 prismatic-coordinate frames plus the data needed to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gait {
    pub command: [f64; 2],
    pub period_s: f64,
    pub cost: f64,
    pub converged: bool,
    pub channel_manifest: Vec<String>,
    pub frames: Vec<Vec<f64>>,
    /// Node torques of the source solution, stance leg first.
    pub torques: Vec<Vec<f64>>,
    pub residuals: Vec<FamilyViolation>,
    pub iterations: usize,
    pub virtual_constraint: VirtualConstraint,
    /// Node states of the source solution in the virtual-knee stance chart.
    pub source_frames: Vec<Vec<f64>>,
}

impl Gait {
    pub fn source_state(&self, k: usize) -> MinState {
        MinState::from_column_slice(&self.source_frames[k])
    }

    pub fn boundary_state(&self) -> MinState {
        self.source_state(self.source_frames.len() - 1)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let width = frame_manifest().len();
        if g.channel_manifest.len() != width || g.frames.iter().any(|f| f.len() != width) {
            return Err(Error::Format(format!("gait frames must have {width} channels")));
        }
        if g.source_frames.is_empty() || g.source_frames.iter().any(|f| f.len() != NX) {
            return Err(Error::Format(format!("gait source states must have {NX} entries")));
        }
        g.virtual_constraint.validate()?;
        Ok(g)
    }
}

/// Samples a solution at its nodes and maps each frame to prismatic coordinates.
pub fn to_gait_frames(params: &ModelParams, map: &JointMap, sol: &GaitSolution) -> Result<Gait> {
    let mut frames = Vec::with_capacity(sol.states.len());
    for (k, s) in sol.states.iter().enumerate() {
        let full = chart::to_full(params, &MinState::from_column_slice(s), Leg::Left, 0.0);
        let mapped = match params.kind {
            ModelKind::VirtualKnee => map_walker_state(map, &full)
                .map_err(|e| Error::Singular(format!("node {k}: {e}")))?,
            ModelKind::Prismatic => full,
        };
        frames.push(frame_of_state(&mapped));
    }
    Ok(Gait {
        command: sol.command.as_array(),
        period_s: sol.period,
        cost: sol.cost,
        converged: sol.converged,
        channel_manifest: frame_manifest().into_iter().map(|c| c.name).collect(),
        frames,
        torques: sol.torques.clone(),
        residuals: sol.residuals.clone(),
        iterations: sol.iterations,
        virtual_constraint: sol.virtual_constraint.clone(),
        source_frames: sol.states.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defect_count_matches_nodes() {
        let nlp = build_nlp(
            &ModelParams::default(),
            Command::new(0.4, 0.0),
            &NlpSettings::default(),
        )
        .unwrap();
        assert_eq!(nlp.eq_families()[0].rows.len(), 41 * NX);
    }

    #[test]
    fn rejects_fast_commands() {
        let r = build_nlp(
            &ModelParams::default(),
            Command::new(1.3, 0.0),
            &NlpSettings::default(),
        );
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn cold_start_lies_on_guard_and_meets_speed() {
        let nlp = build_nlp(
            &ModelParams::default(),
            Command::new(0.4, 0.0),
            &NlpSettings::default(),
        )
        .unwrap();
        let z = cold_start(&nlp);
        let rep = eval_constraints(&nlp, &z).unwrap();
        for f in &rep.families {
            if f.name == "guard" || f.name == "velocity" {
                assert!(f.max_violation < 1e-9, "{} {}", f.name, f.max_violation);
            }
        }
    }
}
