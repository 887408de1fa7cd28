use std::path::Path;

use gaitlab_core::chart::{self, MinState};
use gaitlab_core::dynamics::{angular_momentum, dynamics_terms, impact, kinetic_energy};
use gaitlab_core::gaitlib::{build_library, continuity_report, GaitLibrary, Grid};
use gaitlab_core::gaitopt::{build_nlp, solve_gait, to_gait_frames, Command, Gait};
use gaitlab_core::guided::eval::{evaluate_policy, Agent};
use gaitlab_core::guided::policy::ActorCritic;
use gaitlab_core::guided::ppo::{pretrain_standing, train_guided};
use gaitlab_core::hzd::{
    average_speed, find_limit_cycle, floquet_stability, save_phase_portrait_csv, step_closure, walk,
    HzdController, LimitCycleReport, NewtonOptions, ReturnMapOptions,
};
use gaitlab_core::mapping::{map_trajectory, JointMap};
use gaitlab_core::model::{Leg, ModelKind, ModelParams};
use gaitlab_core::Error;
use serde::Serialize;
use serde_json::json;

use crate::config::Config;
use crate::{Cmd, KindArg};

/// A failed run: a core error or a computation that finished without meeting its goal.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    Unconverged(String),
}

impl Failure {
    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Core(e) => e.kind(),
            Failure::Unconverged(_) => "not_converged",
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Unconverged(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Writes the subcommand and the fully resolved configuration to standard error.
pub fn echo_config(cmd: &Cmd, cfg: &Config) {
    eprintln!("{}", json!({ "invocation": cmd, "resolved_config": cfg }));
}

fn print_json<T: Serialize>(value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_text(path: &Path) -> std::result::Result<String, Failure> {
    Ok(std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn write_or_print(path: Option<&Path>, text: &str) -> Outcome {
    match path {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Parses `start:step:stop`, or a single value.
pub fn parse_range(text: &str) -> std::result::Result<Vec<f64>, Failure> {
    let bad = || Error::Config(format!("range {text:?} is not start:step:stop"));
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    match parts[..] {
        [v] => Ok(vec![v]),
        [lo, _, hi] if lo == hi => Ok(vec![lo]),
        [lo, step, hi] => Ok(Grid::axis(lo, hi, step)?),
        _ => Err(bad().into()),
    }
}

pub fn run(cmd: &Cmd, cfg: &Config) -> Outcome {
    match cmd {
        Cmd::ModelCheck(a) => model_check(a.kind, cfg),
        Cmd::Solve(a) => solve(a.vx, a.vy, &a.out, cfg),
        Cmd::LibraryBuild(a) => {
            let grid = Grid::new(parse_range(&a.vx_range)?, parse_range(&a.vy_range)?)?;
            library_build(&grid, a.jobs, &a.out, a.report.as_deref(), cfg)
        }
        Cmd::LibraryQuery(a) => {
            let lib = GaitLibrary::load(&a.lib)?;
            let index = lib.nearest_index([a.vx, a.vy]);
            print_json(&json!({ "command": lib.gaits[index].command, "index": index }))
        }
        Cmd::Verify(a) => verify(&a.gait, a.out.as_deref(), cfg),
        Cmd::Simulate(a) => simulate(&a.gait, a.steps, &a.out, a.mapped, cfg),
        Cmd::Pretrain(a) => {
            let mut train = cfg.train.clone();
            if let Some(n) = a.iterations {
                train.standing_iterations = n;
            }
            let out = pretrain_standing(&train, None)?;
            out.policy.save(&a.out)?;
            if let Some(log) = &a.log {
                write_text(log, &out.log.to_csv()?)?;
            }
            if !out.report.meets_target() {
                eprintln!(
                    "{}",
                    json!({ "warning": "stand_rate_shortfall", "stand_rate": out.report.stand_rate, "required": out.report.required })
                );
            }
            print_json(&json!({ "stand": out.report, "meets_target": out.report.meets_target() }))
        }
        Cmd::Train(a) => {
            let lib = GaitLibrary::load(&a.lib)?;
            let mut train = cfg.train.clone();
            if let Some(n) = a.iterations {
                train.iterations = n;
            }
            if train.checkpoint.is_none() {
                train.checkpoint = Some(a.out.with_extension("last-finite.json"));
            }
            let init = match &a.init {
                Some(p) => ActorCritic::load(p)?,
                None => train.initial_policy()?,
            };
            let (policy, log) = train_guided(&train, &lib, init)?;
            policy.save(&a.out)?;
            if let Some(path) = &a.log {
                write_text(path, &log.to_csv()?)?;
            }
            let first = log.rows.first().map(|r| r.mean_reward);
            print_json(&json!({
                "iterations": log.rows.len(),
                "first_mean_reward": first,
                "best_mean_reward": log.best_mean_reward(),
            }))
        }
        Cmd::Eval(a) => {
            let lib = GaitLibrary::load(&a.lib)?;
            let policy = a.policy.as_deref().map(ActorCritic::load).transpose()?;
            let agent = match &policy {
                Some(p) => Agent::Learned {
                    policy: p,
                    action_clip: cfg.train.action_clip,
                },
                None => Agent::Scripted {
                    library: &lib,
                    gains: cfg.nlp.gains,
                },
            };
            let table = evaluate_policy(agent, &a.speeds, a.trials, &cfg.eval)?;
            write_or_print(a.out.as_deref(), &table.to_csv()?)
        }
        Cmd::Continuity(a) => {
            let lib = GaitLibrary::load(&a.lib)?;
            let report = continuity_report(&lib)?;
            write_or_print(a.out.as_deref(), &report.to_csv()?)?;
            if a.out.is_some() {
                print_json(&json!({ "all_nearest_adjacent": report.all_nearest_adjacent() }))?;
            }
            Ok(())
        }
    }
}

fn model_check(kind: KindArg, cfg: &Config) -> Outcome {
    let params = cfg.model.with_kind(match kind {
        KindArg::VirtualKnee => ModelKind::VirtualKnee,
        KindArg::Prismatic => ModelKind::Prismatic,
    });
    params.validate()?;
    let (lo, hi) = match params.kind {
        ModelKind::VirtualKnee => params.knee_range(),
        ModelKind::Prismatic => (params.slide_min, params.slide_max),
    };
    let length = 0.5 * (lo + hi);
    // Symmetric double-contact pose with the hip descending, so the swing foot strikes.
    let mut x = MinState::zeros();
    x[1] = -0.2;
    x[2] = length;
    x[4] = 0.2;
    x[5] = length;
    x[chart::NM + 1] = -1.0;
    let pre = chart::to_full(&params, &x, Leg::Left, 0.0);
    let mass_min_eig = dynamics_terms(&params, &pre)?.mass.symmetric_eigenvalues().min();
    let post = impact(&params, &pre)?.post;
    let foot = chart::swing_foot(&params, &x).0;
    let momentum = [angular_momentum(&params, &pre, foot), angular_momentum(&params, &post, foot)];
    let energy = [kinetic_energy(&params, &pre), kinetic_energy(&params, &post)];
    let momentum_error = (momentum[1] - momentum[0]).abs();
    let ok = mass_min_eig > 0.0 && momentum_error <= 1e-8 && energy[1] <= energy[0] + 1e-12;
    print_json(&json!({
        "kind": params.kind,
        "mass_matrix_min_eigenvalue": mass_min_eig,
        "impact_angular_momentum": momentum,
        "impact_angular_momentum_error": momentum_error,
        "impact_kinetic_energy": energy,
        "ok": ok,
    }))?;
    if ok {
        Ok(())
    } else {
        Err(Failure::Unconverged("model check failed".into()))
    }
}

fn solve(vx: f64, vy: f64, out: &Path, cfg: &Config) -> Outcome {
    let nlp = build_nlp(&cfg.model, Command::new(vx, vy), &cfg.nlp)?;
    let sol = solve_gait(&nlp, &cfg.nlp, None)?;
    let summary = json!({
        "command": [vx, vy],
        "converged": sol.converged,
        "status": sol.status,
        "iterations": sol.iterations,
        "cost": sol.cost,
        "period_s": sol.period,
        "max_violation": sol.max_violation,
    });
    if !sol.converged {
        return Err(Failure::Unconverged(format!("gait solve did not converge: {summary}")));
    }
    let gait = to_gait_frames(&cfg.model, &JointMap::from_params(&cfg.model), &sol)?;
    write_text(out, &gait.to_json()?)?;
    print_json(&summary)
}

fn library_build(grid: &Grid, jobs: usize, out: &Path, report: Option<&Path>, cfg: &Config) -> Outcome {
    let (lib, rep) = build_library(&cfg.model, grid, &cfg.nlp, jobs.max(1))?;
    lib.save(out)?;
    if let Some(path) = report {
        let text = serde_json::to_string_pretty(&rep).map_err(|e| Error::Format(e.to_string()))?;
        write_text(path, &text)?;
    }
    print_json(&json!({ "converged": rep.converged, "total": rep.total, "seconds": rep.seconds }))?;
    if rep.all_converged() {
        Ok(())
    } else {
        Err(Failure::Unconverged(format!("{} of {} gaits converged", rep.converged, rep.total)))
    }
}

fn load_gait(path: &Path) -> std::result::Result<Gait, Failure> {
    Ok(Gait::from_json(&read_text(path)?)?)
}

fn controller(params: &ModelParams, gait: &Gait, cfg: &Config) -> HzdController {
    HzdController {
        params: params.clone(),
        vc: gait.virtual_constraint.clone(),
        gains: cfg.nlp.gains,
    }
}

fn verify(gait_path: &Path, out: Option<&Path>, cfg: &Config) -> Outcome {
    let gait = load_gait(gait_path)?;
    let params = &cfg.model;
    let start = chart::to_full(params, &gait.boundary_state(), Leg::Left, 0.0);
    let newton = NewtonOptions::default();
    let lc = find_limit_cycle(params, &gait.virtual_constraint, &cfg.nlp.gains, &start, &newton)?;
    if !lc.converged {
        return Err(Failure::Unconverged(format!(
            "limit cycle search stopped at residual {:.3e}: {}",
            lc.residual,
            lc.failure.as_deref().unwrap_or("iteration limit")
        )));
    }
    let stability = floquet_stability(params, &gait.virtual_constraint, &cfg.nlp.gains, &lc, &newton)?;
    let closure = step_closure(
        params,
        &controller(params, &gait, cfg),
        &lc,
        &JointMap::from_params(params),
        &ReturnMapOptions::default(),
    )?;
    let report = json!({
        "limit_cycle": LimitCycleReport::new(gait.command, &lc, Some(&stability)),
        "closure": closure,
    });
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    write_or_print(out, &(text + "\n"))
}

fn simulate(gait_path: &Path, steps: usize, out: &Path, mapped: bool, cfg: &Config) -> Outcome {
    let gait = load_gait(gait_path)?;
    let params = &cfg.model;
    let start = chart::to_full(params, &gait.boundary_state(), Leg::Left, 0.0);
    let (traj, _) = walk(params, &controller(params, &gait, cfg), &start, steps, &ReturnMapOptions::default())?;
    let speed = average_speed(&traj);
    let (kind, traj) = if mapped && params.kind == ModelKind::VirtualKnee {
        (ModelKind::Prismatic, map_trajectory(&JointMap::from_params(params), &traj)?)
    } else {
        (params.kind, traj)
    };
    save_phase_portrait_csv(kind, &traj, out)?;
    print_json(&json!({
        "steps": steps,
        "samples": traj.samples.len(),
        "average_speed": speed,
        "command": gait.command,
    }))
}
