//! Gait library over a grid of velocity commands: build, persistence and lookups.
//!
//! Gaits are stored vx-major: the gait for `(vx_grid[i], vy_grid[j])` sits at
//! index `i * vy_grid.len() + j`.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaitopt::{
    build_nlp, frame_manifest, solve_gait, to_gait_frames, Channel, Command, Gait, GaitSolution,
    NlpSettings, VX_MAX,
};
use crate::mapping::JointMap;
use crate::model::ModelParams;

pub const FORMAT_VERSION: u32 = 1;
pub const VY_LIMIT: f64 = 0.1;
/// Commands closer than this count as equidistant in lookups.
const TIE_TOL: f64 = 1e-12;
/// Command the warm-start chain grows from.
const SEED_COMMAND: [f64; 2] = [0.4, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
}

impl Grid {
    pub fn new(vx: Vec<f64>, vy: Vec<f64>) -> Result<Self> {
        let g = Self { vx, vy };
        g.validate()?;
        Ok(g)
    }

    /// Inclusive grid `lo, lo + step, ..., hi`, with values rounded to 1e-9.
    pub fn axis(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
        if !(step > 0.0 && lo.is_finite() && hi.is_finite() && hi >= lo) {
            return Err(Error::Config(format!(
                "bad range {lo}:{step}:{hi} (need step > 0 and hi >= lo)"
            )));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        Ok((0..n)
            .map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9)
            .collect())
    }

    /// The desk grid: vx = 0:0.05:1.2, vy = {0}.
    pub fn canonical() -> Self {
        Self {
            vx: Self::axis(0.0, VX_MAX, 0.05).expect("static range"),
            vy: vec![0.0],
        }
    }

    pub fn len(&self) -> usize {
        self.vx.len() * self.vy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn command(&self, i: usize, j: usize) -> [f64; 2] {
        [self.vx[i], self.vy[j]]
    }

    pub fn validate(&self) -> Result<()> {
        check_axis("vx", &self.vx)?;
        check_axis("vy", &self.vy)?;
        if let Some(v) = self.vx.iter().find(|v| !(0.0..=VX_MAX + 1e-9).contains(*v)) {
            return Err(Error::Domain(format!(
                "vx = {v} outside the solvable range [0, {VX_MAX}]"
            )));
        }
        if let Some(v) = self.vy.iter().find(|v| v.abs() > VY_LIMIT + 1e-9) {
            return Err(Error::Domain(format!(
                "vy = {v} outside [-{VY_LIMIT}, {VY_LIMIT}]"
            )));
        }
        Ok(())
    }
}

fn check_axis(name: &str, axis: &[f64]) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::Config(format!("{name} grid is empty")));
    }
    if axis.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("{name} grid has non-finite values")));
    }
    if axis.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("{name} grid is not strictly increasing")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitLibrary {
    pub version: u32,
    pub vx_grid: Vec<f64>,
    pub vy_grid: Vec<f64>,
    pub channel_manifest: Vec<Channel>,
    pub gaits: Vec<Gait>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub command: [f64; 2],
    pub converged: bool,
    pub iterations: usize,
    pub cost: f64,
    pub max_violation: f64,
    pub status: String,
    /// Command whose solution seeded this solve; `None` for the cold-started seed.
    pub warm_from: Option<[f64; 2]>,
    /// The warm start failed and the point was re-solved from scratch.
    pub cold_retry: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub points: Vec<PointReport>,
    pub converged: usize,
    pub total: usize,
    pub seconds: f64,
}

impl BuildReport {
    pub fn all_converged(&self) -> bool {
        self.converged == self.total
    }
}

/// Grid index one step closer to the seed: along vx first, then vy.
fn parent(ij: (usize, usize), seed: (usize, usize)) -> Option<(usize, usize)> {
    let toward = |a: usize, b: usize| if a < b { a + 1 } else { a - 1 };
    if ij.0 != seed.0 {
        Some((toward(ij.0, seed.0), ij.1))
    } else if ij.1 != seed.1 {
        Some((ij.0, toward(ij.1, seed.1)))
    } else {
        None
    }
}

fn nearest_index(axis: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (i, a) in axis.iter().enumerate() {
        if (a - v).abs() < (axis[best] - v).abs() - TIE_TOL {
            best = i;
        }
    }
    best
}

fn solve_point(
    params: &ModelParams,
    command: [f64; 2],
    settings: &NlpSettings,
    warm: Option<(&GaitSolution, [f64; 2])>,
) -> Result<(GaitSolution, PointReport)> {
    let start = Instant::now();
    let nlp = build_nlp(params, Command::new(command[0], command[1]), settings)?;
    let mut sol = solve_gait(&nlp, settings, warm.map(|w| w.0))?;
    let mut cold_retry = false;
    if !sol.converged && warm.is_some() {
        let cold = solve_gait(&nlp, settings, None)?;
        cold_retry = true;
        if cold.converged || cold.max_violation < sol.max_violation {
            sol = cold;
        }
    }
    let report = PointReport {
        command,
        converged: sol.converged,
        iterations: sol.iterations,
        cost: sol.cost,
        max_violation: sol.max_violation,
        status: sol.status.clone(),
        warm_from: warm.map(|w| w.1),
        cold_retry,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((sol, report))
}

/// Solves every grid point. Each point is warm-started from its neighbor one grid
/// step closer to the seed command, so results do not depend on scheduling.
/// Points at equal distance from the seed are solved concurrently on `jobs` threads.
pub fn build_library(
    params: &ModelParams,
    grid: &Grid,
    settings: &NlpSettings,
    jobs: usize,
) -> Result<(GaitLibrary, BuildReport)> {
    grid.validate()?;
    settings.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let (nx, ny) = (grid.vx.len(), grid.vy.len());
    let seed = (
        nearest_index(&grid.vx, SEED_COMMAND[0]),
        nearest_index(&grid.vy, SEED_COMMAND[1]),
    );
    let depth = |(i, j): (usize, usize)| i.abs_diff(seed.0) + j.abs_diff(seed.1);
    let max_depth = (0..nx)
        .flat_map(|i| (0..ny).map(move |j| (i, j)))
        .map(depth)
        .max()
        .unwrap_or(0);

    let mut solutions: Vec<Option<GaitSolution>> = vec![None; nx * ny];
    let mut reports: Vec<Option<PointReport>> = vec![None; nx * ny];
    for d in 0..=max_depth {
        let wave: Vec<(usize, usize)> = (0..nx)
            .flat_map(|i| (0..ny).map(move |j| (i, j)))
            .filter(|&ij| depth(ij) == d)
            .collect();
        let results: Vec<Result<(GaitSolution, PointReport)>> = pool.install(|| {
            wave.par_iter()
                .map(|&(i, j)| {
                    let warm = parent((i, j), seed).map(|(pi, pj)| {
                        let w = solutions[pi * ny + pj]
                            .as_ref()
                            .expect("parents belong to an earlier wave");
                        (w, grid.command(pi, pj))
                    });
                    solve_point(params, grid.command(i, j), settings, warm)
                })
                .collect()
        });
        for (&(i, j), r) in wave.iter().zip(results) {
            let (sol, rep) = r?;
            solutions[i * ny + j] = Some(sol);
            reports[i * ny + j] = Some(rep);
        }
    }

    let map = JointMap::from_params(params);
    let gaits = solutions
        .iter()
        .map(|s| to_gait_frames(params, &map, s.as_ref().expect("every point solved")))
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<PointReport> = reports.into_iter().map(|r| r.expect("solved")).collect();
    let report = BuildReport {
        converged: points.iter().filter(|p| p.converged).count(),
        total: points.len(),
        points,
        seconds: start.elapsed().as_secs_f64(),
    };
    let lib = GaitLibrary {
        version: FORMAT_VERSION,
        vx_grid: grid.vx.clone(),
        vy_grid: grid.vy.clone(),
        channel_manifest: frame_manifest(),
        gaits,
    };
    lib.validate()?;
    Ok((lib, report))
}

impl GaitLibrary {
    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "library format version {} (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        check_axis("vx", &self.vx_grid).map_err(|e| Error::Format(e.to_string()))?;
        check_axis("vy", &self.vy_grid).map_err(|e| Error::Format(e.to_string()))?;
        let expected = self.vx_grid.len() * self.vy_grid.len();
        if self.gaits.len() != expected {
            return Err(Error::shape("library gaits", expected, self.gaits.len()));
        }
        let names: Vec<&str> = self.channel_manifest.iter().map(|c| c.name.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Format("duplicate channel names in manifest".into()));
        }
        let n_frames = self.gaits.first().map_or(0, |g| g.frames.len());
        for (idx, g) in self.gaits.iter().enumerate() {
            let expect_cmd = [
                self.vx_grid[idx / self.vy_grid.len()],
                self.vy_grid[idx % self.vy_grid.len()],
            ];
            if g.command != expect_cmd {
                return Err(Error::Format(format!(
                    "gait {idx} has command {:?}, grid position says {expect_cmd:?}",
                    g.command
                )));
            }
            if g.channel_manifest.iter().map(String::as_str).ne(names.iter().copied()) {
                return Err(Error::Format(format!(
                    "gait {idx} channel manifest differs from the library's"
                )));
            }
            if g.frames.len() != n_frames {
                return Err(Error::shape(format!("frames of gait {idx}"), n_frames, g.frames.len()));
            }
            if let Some(f) = g.frames.iter().find(|f| f.len() != names.len()) {
                return Err(Error::shape(format!("frame of gait {idx}"), names.len(), f.len()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.gaits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaits.is_empty()
    }

    pub fn gait(&self, i: usize, j: usize) -> &Gait {
        &self.gaits[i * self.vy_grid.len() + j]
    }

    fn grid_position(&self, idx: usize) -> (usize, usize) {
        (idx / self.vy_grid.len(), idx % self.vy_grid.len())
    }

    /// Index of the gait nearest to `command`; ties go to the lower vx, then vy, index.
    pub fn nearest_index(&self, command: [f64; 2]) -> usize {
        let dist = |g: &Gait| (g.command[0] - command[0]).hypot(g.command[1] - command[1]);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (idx, g) in self.gaits.iter().enumerate() {
            let d = dist(g);
            if d < best_d - TIE_TOL {
                best = idx;
                best_d = d;
            }
        }
        best
    }

    pub fn nearest_gait(&self, command: [f64; 2]) -> &Gait {
        &self.gaits[self.nearest_index(command)]
    }

    pub fn to_json(&self) -> Result<String> {
        if let Some(g) = self
            .gaits
            .iter()
            .find(|g| g.frames.iter().flatten().any(|v| !v.is_finite()))
        {
            return Err(Error::Format(format!(
                "gait {:?} has non-finite frame values",
                g.command
            )));
        }
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Corruption {
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Format(format!(
                    "library format version {v} (expected {FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::Format("missing library format version".into())),
        }
        let lib: Self = serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
        lib.validate()?;
        Ok(lib)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Byte offset of a 1-based line and column as reported by the JSON parser.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column).min(text.len())
}

/// Save followed by load.
pub fn persist_roundtrip(lib: &GaitLibrary, path: &Path) -> Result<GaitLibrary> {
    lib.save(path)?;
    GaitLibrary::load(path)
}

fn check_lengths(what: &str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(what, a.len(), b.len()));
    }
    Ok(())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Frame closest to `obs` in Euclidean distance; ties go to the lowest index.
pub fn nearest_frame<'g>(gait: &'g Gait, obs: &[f64]) -> Result<(usize, &'g [f64])> {
    let width = gait.channel_manifest.len();
    if obs.len() != width {
        return Err(Error::shape("observation projection", width, obs.len()));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, f) in gait.frames.iter().enumerate() {
        let d = squared_distance(f, obs);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    gait.frames
        .get(best)
        .map(|f| (best, f.as_slice()))
        .ok_or_else(|| Error::Format("gait has no frames".into()))
}

/// Mean of squared channel differences.
pub fn l_mse(obs: &[f64], frame: &[f64]) -> Result<f64> {
    check_lengths("gait frame", obs, frame)?;
    if obs.is_empty() {
        return Ok(0.0);
    }
    Ok(squared_distance(obs, frame) / obs.len() as f64)
}

/// Mean over frames of the Euclidean distance between corresponding frames.
pub fn gait_distance(a: &Gait, b: &Gait) -> Result<f64> {
    if a.frames.len() != b.frames.len() {
        return Err(Error::shape("gait frames", a.frames.len(), b.frames.len()));
    }
    if a.frames.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        check_lengths("gait frame", fa, fb)?;
        total += squared_distance(fa, fb).sqrt();
    }
    Ok(total / a.frames.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborDistance {
    pub command: [f64; 2],
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityRow {
    pub command: [f64; 2],
    /// Grid neighbors (one step in vx or vy).
    pub neighbors: Vec<NeighborDistance>,
    /// Closest other gait in the whole library.
    pub nearest: NeighborDistance,
    pub nearest_is_adjacent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub rows: Vec<ContinuityRow>,
}

impl ContinuityReport {
    pub fn all_nearest_adjacent(&self) -> bool {
        self.rows.iter().all(|r| r.nearest_is_adjacent)
    }

    /// One line per (gait, grid neighbor) pair.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(e.to_string());
        w.write_record([
            "vx",
            "vy",
            "neighbor_vx",
            "neighbor_vy",
            "mean_frame_distance",
            "nearest_vx",
            "nearest_vy",
            "nearest_distance",
            "nearest_is_adjacent",
        ])
        .map_err(fail)?;
        for r in &self.rows {
            for n in &r.neighbors {
                w.write_record([
                    r.command[0].to_string(),
                    r.command[1].to_string(),
                    n.command[0].to_string(),
                    n.command[1].to_string(),
                    n.distance.to_string(),
                    r.nearest.command[0].to_string(),
                    r.nearest.command[1].to_string(),
                    r.nearest.distance.to_string(),
                    r.nearest_is_adjacent.to_string(),
                ])
                .map_err(fail)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn continuity_report(lib: &GaitLibrary) -> Result<ContinuityReport> {
    if lib.len() < 2 {
        return Err(Error::shape("gaits for a continuity report (at least)", 2, lib.len()));
    }
    let n = lib.len();
    let dist: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|a| {
            (0..n)
                .map(|b| gait_distance(&lib.gaits[a], &lib.gaits[b]))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let (nx, ny) = (lib.vx_grid.len(), lib.vy_grid.len());
    let rows = (0..n)
        .map(|a| {
            let (i, j) = lib.grid_position(a);
            let mut adjacent = Vec::new();
            if i > 0 {
                adjacent.push(a - ny);
            }
            if i + 1 < nx {
                adjacent.push(a + ny);
            }
            if j > 0 {
                adjacent.push(a - 1);
            }
            if j + 1 < ny {
                adjacent.push(a + 1);
            }
            let nearest = (0..n)
                .filter(|&b| b != a)
                .fold(None, |best: Option<usize>, b| match best {
                    Some(c) if dist[a][c] <= dist[a][b] => Some(c),
                    _ => Some(b),
                })
                .expect("at least two gaits");
            ContinuityRow {
                command: lib.gaits[a].command,
                neighbors: adjacent
                    .iter()
                    .map(|&b| NeighborDistance {
                        command: lib.gaits[b].command,
                        distance: dist[a][b],
                    })
                    .collect(),
                nearest: NeighborDistance {
                    command: lib.gaits[nearest].command,
                    distance: dist[a][nearest],
                },
                nearest_is_adjacent: adjacent.contains(&nearest),
            }
        })
        .collect();
    Ok(ContinuityReport { rows })
}
