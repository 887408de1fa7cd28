//! Tracking evaluation: success rate and velocity error per commanded speed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bezier;
use crate::error::{Error, Result};
use crate::gaitlib::GaitLibrary;
use crate::gaitopt::Gait;
use crate::guided::env::{min_state_of_frame, perturb, state_from_frame, Actuation, Env, EnvConfig};
use crate::guided::policy::ActorCritic;
use crate::guided::reward::Termination;
use crate::hzd::{self, Gains, HzdController, PhaseKind, VirtualConstraint, BEZIER_JOINTS};
use crate::model::{ModelParams, BASE_X, NU};

/// Virtual constraint of a library gait re-expressed in the frame coordinates of
/// `params`, phased by that model's own stance angle.
pub fn frame_virtual_constraint(params: &ModelParams, gait: &Gait) -> Result<VirtualConstraint> {
    let n = gait.frames.len();
    if n < 2 {
        return Err(Error::shape("gait frames (at least)", 2, n));
    }
    let states = gait
        .frames
        .iter()
        .map(|f| min_state_of_frame(f))
        .collect::<Result<Vec<_>>>()?;
    let source = &gait.virtual_constraint;
    let (phase_range, s): ([f64; 2], Vec<f64>) = match source.phase_kind {
        PhaseKind::StanceAngle => {
            let a: Vec<f64> = states
                .iter()
                .map(|x| hzd::stance_angle(params, x).value)
                .collect();
            let span = a[n - 1] - a[0];
            if span.abs() < 1e-9 {
                return Err(Error::Degenerate("stance angle does not advance".into()));
            }
            ([a[0], a[n - 1]], a.iter().map(|v| (v - a[0]) / span).collect())
        }
        PhaseKind::Time => (
            [0.0, gait.period_s],
            (0..n).map(|k| k as f64 / (n - 1) as f64).collect(),
        ),
    };
    let coeffs = BEZIER_JOINTS
        .iter()
        .map(|&j| {
            let samples: Vec<(f64, f64)> = s.iter().zip(&states).map(|(s, x)| (*s, x[j])).collect();
            bezier::fit(source.bezier_degree, &samples)
        })
        .collect();
    let vc = VirtualConstraint {
        bezier_degree: source.bezier_degree,
        coeffs,
        phase_kind: source.phase_kind,
        phase_range,
    };
    vc.validate()?;
    Ok(vc)
}

/// Who drives the walker during evaluation.
#[derive(Clone, Copy)]
pub enum Agent<'a> {
    /// Feedback-linearizing tracking of the nearest library gait, started on that
    /// gait's first frame.
    Scripted {
        library: &'a GaitLibrary,
        gains: Gains,
    },
    /// Deterministic (mean) actions of a trained policy, started standing.
    Learned {
        policy: &'a ActorCritic,
        action_clip: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub env: EnvConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub success: bool,
    pub steps: usize,
    /// Mean squared forward-velocity error over the trial's steps.
    pub mse: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub speed: f64,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean over successful trials; `None` when no trial succeeded.
    pub mse: Option<f64>,
    pub outcomes: Vec<TrialOutcome>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    /// `speed,success_rate,mse` with `Inf` for speeds that never succeeded.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["speed", "success_rate", "mse"]).map_err(fmt)?;
        for r in &self.rows {
            let mse = r.mse.map_or_else(|| "Inf".to_string(), |m| format!("{m:.6}"));
            w.write_record([format!("{}", r.speed), format!("{:.4}", r.success_rate), mse])
                .map_err(fmt)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

fn run_trial(agent: Agent, speed: f64, cfg: &EvalConfig, stream: u64) -> Result<TrialOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut env = Env::new(cfg.env.clone())?;
    let command = [speed, 0.0];
    let scripted = match agent {
        Agent::Scripted { library, gains } => {
            let gait = library.nearest_gait(command);
            let vc = frame_virtual_constraint(&cfg.env.params, gait)?;
            let start = state_from_frame(&cfg.env.params, &gait.frames[0], 0.0)?;
            env.reset(perturb(&cfg.env, &start, &mut rng), command);
            Some(HzdController {
                params: cfg.env.params.clone(),
                vc,
                gains,
            })
        }
        Agent::Learned { .. } => {
            env.reset_standing(command, &mut rng);
            None
        }
    };
    let mut sq = 0.0;
    let mut steps = 0;
    loop {
        let step = match (agent, &scripted) {
            (Agent::Scripted { .. }, Some(ctrl)) => env.step(Actuation::Controller(ctrl), &[0.0; NU]),
            (Agent::Learned { policy, action_clip }, _) => {
                let obs = env.observation()?;
                let a: Vec<f64> = policy
                    .act_mean(&obs.values)?
                    .into_iter()
                    .map(|v| v.clamp(-action_clip, action_clip))
                    .collect();
                let t = cfg.env.targets(&a);
                env.step(Actuation::Targets(&t), &a)
            }
            _ => unreachable!("scripted agents always carry a controller"),
        };
        steps += 1;
        sq += (env.state.qd[BASE_X] - speed).powi(2);
        // A controller that cannot produce a torque has failed the trial.
        let (termination, failure) = match step {
            Ok(info) => (info.termination, info.failure),
            Err(e) => (Termination::Fell, Some(e.to_string())),
        };
        if termination != Termination::Running {
            return Ok(TrialOutcome {
                success: termination == Termination::Timeout,
                steps,
                mse: sq / steps as f64,
                failure,
            });
        }
    }
}

/// Success rate and velocity error per commanded forward speed. Success means
/// the episode reaches its time limit without falling.
pub fn evaluate_policy(agent: Agent, speeds: &[f64], trials: usize, cfg: &EvalConfig) -> Result<EvalTable> {
    cfg.env.validate()?;
    if let Agent::Learned { policy, .. } = agent {
        if policy.obs_dim != cfg.env.profile.width() || policy.action_dim() != NU {
            return Err(Error::Config("policy does not match the evaluation environment".into()));
        }
    }
    if let Agent::Scripted { library, .. } = agent {
        if library.is_empty() {
            return Err(Error::Config("gait library is empty".into()));
        }
    }
    if trials == 0 {
        return Ok(EvalTable::default());
    }
    let jobs: Vec<(usize, usize)> = (0..speeds.len())
        .flat_map(|s| (0..trials).map(move |t| (s, t)))
        .collect();
    let outcomes: Vec<Result<TrialOutcome>> = jobs
        .par_iter()
        .map(|&(s, t)| run_trial(agent, speeds[s], cfg, ((s as u64) << 32) | t as u64))
        .collect();
    let mut outcomes = outcomes.into_iter();
    let mut rows = Vec::with_capacity(speeds.len());
    for &speed in speeds {
        let o = outcomes.by_ref().take(trials).collect::<Result<Vec<_>>>()?;
        let ok: Vec<&TrialOutcome> = o.iter().filter(|t| t.success).collect();
        let mse = (!ok.is_empty()).then(|| ok.iter().map(|t| t.mse).sum::<f64>() / ok.len() as f64);
        rows.push(EvalRow {
            speed,
            trials,
            successes: ok.len(),
            success_rate: ok.len() as f64 / trials as f64,
            mse,
            outcomes: o,
        });
    }
    Ok(EvalTable { rows })
}
