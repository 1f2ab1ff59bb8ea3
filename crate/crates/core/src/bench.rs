//! Benchmark harness: paired tracking-error tables, navigation success
//! tables and the turning-radius sweep.
//!
//! Tracking error per episode is the mean nearest-point distance (see
//! [`crate::controllers`]); table cells are means of per-episode means.
//! Navigation failures map onto outcomes: anything but `reached` fails,
//! and a reference the tracker cannot execute shows up as `infeasible` or
//! `timeout`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{derive_seed, stream, ArchetypeMix, Config};
use crate::controllers::{self, ControllerKind, ExecutionResult, Feasibility, MpcSettings, Outcome};
use crate::envsim::{self, Archetype, Scenario};
use crate::error::{Error, Result};
use crate::esdf::EsdfGrid;
use crate::nnplanner::PlannerParams;
use crate::svg;
use crate::training::{Pipeline, PlanningSample};

/// Index offset separating the navigation manifest's seeds from the tracking one.
pub const NAVIGATION_OFFSET: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub archetype: Archetype,
    pub seed: u64,
}

/// The scenario list of a suite. Scenarios are a pure function of the entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn generate(root_seed: u64, mix: &ArchetypeMix, n: usize, offset: u64) -> Self {
        let mut entries = Vec::with_capacity(n);
        for (a, c) in mix.counts(n) {
            for _ in 0..c {
                let id = entries.len();
                entries.push(ManifestEntry {
                    id,
                    archetype: a,
                    seed: derive_seed(root_seed, stream::BENCH, offset + id as u64),
                });
            }
        }
        Self { entries }
    }

    /// CSV with header `id,archetype,seed`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    /// SHA-256 of the canonical CSV, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_csv().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn build(&self, cfg: &Config) -> Result<Vec<BenchScenario>> {
        self.entries
            .par_iter()
            .map(|e| {
                let grid = Arc::new(envsim::generate_world(e.archetype, e.seed, &cfg.world)?);
                let esdf = Arc::new(EsdfGrid::build(&grid));
                let scenario = envsim::sample_scenario(grid, e.archetype, e.seed, &cfg.world)?;
                Ok(BenchScenario {
                    entry: *e,
                    scenario,
                    esdf,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct BenchScenario {
    pub entry: ManifestEntry,
    pub scenario: Scenario,
    pub esdf: Arc<EsdfGrid>,
}

/// Resolved start and goal of one manifest entry, in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub id: usize,
    pub archetype: Archetype,
    pub seed: u64,
    pub start_x: f64,
    pub start_y: f64,
    pub start_psi: f64,
    pub goal_x: f64,
    pub goal_y: f64,
}

/// CSV of [`ScenarioRow`]s for a built suite.
pub fn scenarios_csv(suite: &[BenchScenario]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for b in suite {
        let s = &b.scenario;
        w.serialize(ScenarioRow {
            id: b.entry.id,
            archetype: b.entry.archetype,
            seed: b.entry.seed,
            start_x: s.start.x,
            start_y: s.start.y,
            start_psi: s.start.psi,
            goal_x: s.goal.x,
            goal_y: s.goal.y,
        })
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// A planner under comparison.
#[derive(Clone, Debug)]
pub struct Planner {
    pub name: String,
    pub params: PlannerParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingRow {
    pub planner: String,
    pub controller: ControllerKind,
    pub archetype: Archetype,
    pub scenario: usize,
    pub r_min: f64,
    /// NaN when the planner produced no usable reference.
    pub mean_error: f64,
    pub outcome: Outcome,
    pub steps: usize,
}

/// One aggregated cell; `archetype` is `None` for the all-scenario mean.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingCell {
    pub planner: String,
    pub controller: ControllerKind,
    pub archetype: Option<Archetype>,
    pub mean_error: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrackingTable {
    pub rows: Vec<TrackingRow>,
    pub executed: Feasibility,
    pub mpc: Feasibility,
}

fn mean(xs: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = xs.filter(|x| x.is_finite()).fold((0.0, 0), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        (f64::NAN, 0)
    } else {
        (s / n as f64, n)
    }
}

fn planner_names<'a>(rows: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for n in rows {
        if !names.contains(n) {
            names.push(n.clone());
        }
    }
    names
}

impl TrackingTable {
    pub fn cells(&self) -> Vec<TrackingCell> {
        let mut out = Vec::new();
        let planners = planner_names(self.rows.iter().map(|r| &r.planner));
        for p in &planners {
            for c in ControllerKind::ALL {
                let sel = |a: Option<Archetype>| {
                    self.rows
                        .iter()
                        .filter(move |r| &r.planner == p && r.controller == c && a.is_none_or(|a| r.archetype == a))
                        .map(|r| r.mean_error)
                };
                if self.rows.iter().all(|r| r.controller != c) {
                    continue;
                }
                for a in Archetype::ALL.iter().map(|a| Some(*a)).chain([None]) {
                    let (m, n) = mean(sel(a));
                    if n == 0 && a.is_some() {
                        continue;
                    }
                    out.push(TrackingCell {
                        planner: p.clone(),
                        controller: c,
                        archetype: a,
                        mean_error: m,
                        episodes: n,
                    });
                }
            }
        }
        out
    }

    /// Mean over all scenarios of one planner/controller pair.
    pub fn overall(&self, planner: &str, controller: ControllerKind) -> f64 {
        mean(
            self.rows
                .iter()
                .filter(|r| r.planner == planner && r.controller == controller)
                .map(|r| r.mean_error),
        )
        .0
    }

    pub fn rows_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// `planner,controller,archetype,mean_error,episodes`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("planner,controller,archetype,mean_error,episodes\n");
        for c in self.cells() {
            let a = c.archetype.map_or("all", |a| a.name());
            let _ = writeln!(s, "{},{},{},{:.6},{}", c.planner, c.controller, a, c.mean_error, c.episodes);
        }
        s
    }

    /// Human-readable table: one row per planner/controller, one column per archetype.
    pub fn format(&self) -> String {
        let cells = self.cells();
        let mut s = format!("{:<24}{:<6}", "planner", "ctrl");
        for a in Archetype::ALL {
            let _ = write!(s, "{:>10}", a.name());
        }
        let _ = writeln!(s, "{:>10}", "all");
        let mut keys: Vec<(String, ControllerKind)> = Vec::new();
        for c in &cells {
            let k = (c.planner.clone(), c.controller);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        for (p, ctrl) in keys {
            let _ = write!(s, "{:<24}{:<6}", p, ctrl.name());
            for a in Archetype::ALL.iter().map(|a| Some(*a)).chain([None]) {
                match cells.iter().find(|c| c.planner == p && c.controller == ctrl && c.archetype == a) {
                    Some(c) => {
                        let _ = write!(s, "{:>10.4}", c.mean_error);
                    }
                    None => {
                        let _ = write!(s, "{:>10}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

fn save_trace(dir: Option<&Path>, name: &str, res: &ExecutionResult, dt: f64) -> Result<()> {
    match dir {
        Some(d) => res.save_trace(&d.join(name), dt),
        None => Ok(()),
    }
}

/// Plans once per scenario and planner, then tracks the reference with each
/// controller on a bicycle with minimum turning radius `r_min`.
pub fn tracking_table(
    planners: &[Planner],
    suite: &[BenchScenario],
    cfg: &Config,
    controllers: &[ControllerKind],
    r_min: f64,
    trace_dir: Option<&Path>,
) -> Result<TrackingTable> {
    let pipeline = Pipeline::from_config(cfg)?;
    let ctrl_cfg = cfg.controller.with_radius(r_min);
    let robot = ctrl_cfg.robot()?;
    let mpc = MpcSettings::from_config(&cfg.mpc);
    if let Some(d) = trace_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let per_scenario: Vec<Result<(Vec<TrackingRow>, Feasibility, Feasibility)>> = suite
        .par_iter()
        .map(|b| {
            let mut rows = Vec::new();
            let mut executed = Feasibility::default();
            let mut mpc_f = Feasibility::default();
            let sample = PlanningSample::new(b.scenario.clone(), b.esdf.clone(), &cfg.sensor)?;
            for p in planners {
                let plan = pipeline.plan(&p.params, &sample);
                for &c in controllers {
                    let row = |mean_error: f64, outcome: Outcome, steps: usize| TrackingRow {
                        planner: p.name.clone(),
                        controller: c,
                        archetype: b.entry.archetype,
                        scenario: b.entry.id,
                        r_min,
                        mean_error,
                        outcome,
                        steps,
                    };
                    match &plan {
                        Ok((_, reference)) => {
                            let world = controllers::to_world(sample.frame(), &reference.states);
                            let res = controllers::track(
                                c,
                                &world,
                                sample.frame(),
                                &b.scenario.grid,
                                pipeline.robot_radius,
                                &ctrl_cfg,
                                &mpc,
                            )?;
                            executed.record(&res.trajectory, &robot);
                            mpc_f.merge(&res.mpc_feasibility);
                            save_trace(trace_dir, &format!("{}_{}_{:04}.csv", p.name, c, b.entry.id), &res, ctrl_cfg.dt)?;
                            rows.push(row(res.mean_error(), res.outcome, res.steps()));
                        }
                        Err(_) => rows.push(row(f64::NAN, Outcome::Infeasible, 0)),
                    }
                }
            }
            Ok((rows, executed, mpc_f))
        })
        .collect();
    let mut table = TrackingTable::default();
    for r in per_scenario {
        let (rows, e, m) = r?;
        table.rows.extend(rows);
        table.executed.merge(&e);
        table.mpc.merge(&m);
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub planner: String,
    pub archetype: Archetype,
    pub scenario: usize,
    pub outcome: Outcome,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuccessCell {
    pub planner: String,
    pub archetype: Option<Archetype>,
    pub successes: usize,
    pub episodes: usize,
}

impl SuccessCell {
    pub fn rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuccessTable {
    pub rows: Vec<SuccessRow>,
    pub executed: Feasibility,
    pub mpc: Feasibility,
}

impl SuccessTable {
    pub fn cells(&self) -> Vec<SuccessCell> {
        let mut out = Vec::new();
        for p in planner_names(self.rows.iter().map(|r| &r.planner)) {
            for a in Archetype::ALL.iter().map(|a| Some(*a)).chain([None]) {
                let sel: Vec<&SuccessRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.planner == p && a.is_none_or(|a| r.archetype == a))
                    .collect();
                if sel.is_empty() && a.is_some() {
                    continue;
                }
                out.push(SuccessCell {
                    planner: p.clone(),
                    archetype: a,
                    successes: sel.iter().filter(|r| r.outcome == Outcome::Reached).count(),
                    episodes: sel.len(),
                });
            }
        }
        out
    }

    pub fn overall(&self, planner: &str) -> f64 {
        self.cells()
            .into_iter()
            .find(|c| c.planner == planner && c.archetype.is_none())
            .map_or(0.0, |c| c.rate())
    }

    /// Outcome counts per planner, for failure breakdowns.
    pub fn outcomes(&self, planner: &str) -> BTreeMap<&'static str, usize> {
        let mut m = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.planner == planner) {
            *m.entry(r.outcome.name()).or_insert(0) += 1;
        }
        m
    }

    pub fn rows_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// `planner,archetype,successes,episodes,rate`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("planner,archetype,successes,episodes,rate\n");
        for c in self.cells() {
            let a = c.archetype.map_or("all", |a| a.name());
            let _ = writeln!(s, "{},{},{},{},{:.4}", c.planner, a, c.successes, c.episodes, c.rate());
        }
        s
    }

    pub fn format(&self) -> String {
        let cells = self.cells();
        let mut s = format!("{:<24}", "planner");
        for a in Archetype::ALL {
            let _ = write!(s, "{:>18}", a.name());
        }
        let _ = writeln!(s, "{:>18}", "all");
        for p in planner_names(self.rows.iter().map(|r| &r.planner)) {
            let _ = write!(s, "{p:<24}");
            for a in Archetype::ALL.iter().map(|a| Some(*a)).chain([None]) {
                match cells.iter().find(|c| c.planner == p && c.archetype == a) {
                    Some(c) => {
                        let txt = format!("{:.2}% ({}/{})", 100.0 * c.rate(), c.successes, c.episodes);
                        let _ = write!(s, "{txt:>18}");
                    }
                    None => {
                        let _ = write!(s, "{:>18}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Closed-loop navigation of every scenario with every planner.
pub fn success_table(
    planners: &[Planner],
    suite: &[BenchScenario],
    cfg: &Config,
    controller: ControllerKind,
    trace_dir: Option<&Path>,
) -> Result<SuccessTable> {
    let pipeline = Pipeline::from_config(cfg)?;
    let robot = cfg.controller.robot()?;
    let mpc = MpcSettings::from_config(&cfg.mpc);
    if let Some(d) = trace_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let per: Vec<Result<(Vec<SuccessRow>, Feasibility, Feasibility)>> = suite
        .par_iter()
        .map(|b| {
            let mut rows = Vec::new();
            let mut executed = Feasibility::default();
            let mut mpc_f = Feasibility::default();
            for p in planners {
                let res = controllers::navigate(
                    &p.params,
                    &pipeline,
                    &b.scenario,
                    &b.esdf,
                    &cfg.sensor,
                    controller,
                    &cfg.controller,
                    &mpc,
                )?;
                executed.record(&res.trajectory, &robot);
                mpc_f.merge(&res.mpc_feasibility);
                save_trace(trace_dir, &format!("{}_nav_{:04}.csv", p.name, b.entry.id), &res, cfg.controller.dt)?;
                rows.push(SuccessRow {
                    planner: p.name.clone(),
                    archetype: b.entry.archetype,
                    scenario: b.entry.id,
                    outcome: res.outcome,
                    steps: res.steps(),
                });
            }
            Ok((rows, executed, mpc_f))
        })
        .collect();
    let mut table = SuccessTable::default();
    for r in per {
        let (rows, e, m) = r?;
        table.rows.extend(rows);
        table.executed.merge(&e);
        table.mpc.merge(&m);
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub r_min: f64,
    pub planner: String,
    pub controller: ControllerKind,
    pub mean_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RadiusSweep {
    pub tables: Vec<TrackingTable>,
    pub radii: Vec<f64>,
}

impl RadiusSweep {
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for (r, t) in self.radii.iter().zip(&self.tables) {
            for c in t.cells().into_iter().filter(|c| c.archetype.is_none()) {
                out.push(SweepPoint {
                    r_min: *r,
                    planner: c.planner,
                    controller: c.controller,
                    mean_error: c.mean_error,
                });
            }
        }
        out
    }

    /// Error-vs-radius curve for one planner/controller pair.
    pub fn curve(&self, planner: &str, controller: ControllerKind) -> Vec<(f64, f64)> {
        self.points()
            .into_iter()
            .filter(|p| p.planner == planner && p.controller == controller)
            .map(|p| (p.r_min, p.mean_error))
            .collect()
    }

    pub fn csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in self.points() {
            w.serialize(p).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn svg(&self) -> String {
        let mut series = Vec::new();
        let names = planner_names(self.tables.iter().flat_map(|t| t.rows.iter().map(|r| &r.planner)));
        for p in &names {
            for c in ControllerKind::ALL {
                let pts = self.curve(p, c);
                if pts.is_empty() {
                    continue;
                }
                series.push(svg::Series {
                    name: format!("{p} + {c}"),
                    points: pts,
                    dashed: c == ControllerKind::Pid,
                });
            }
        }
        svg::line_chart("Tracking error vs minimum turning radius", "r_min (m)", "mean tracking error (m)", &series)
    }
}

pub fn radius_sweep(
    planners: &[Planner],
    suite: &[BenchScenario],
    cfg: &Config,
    controllers: &[ControllerKind],
    radii: &[f64],
    trace_dir: Option<&Path>,
) -> Result<RadiusSweep> {
    if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0)) || radii.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("radii must be positive and strictly ascending".into()));
    }
    let mut out = RadiusSweep {
        tables: Vec::new(),
        radii: radii.to_vec(),
    };
    for &r in radii {
        let dir = trace_dir.map(|d| d.join(format!("r{r:.2}")));
        out.tables.push(tracking_table(planners, suite, cfg, controllers, r, dir.as_deref())?);
    }
    Ok(out)
}
