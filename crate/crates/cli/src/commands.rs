use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use kinoplan::bench::{self, BenchScenario, Manifest, Planner, NAVIGATION_OFFSET};
use kinoplan::config::Config;
use kinoplan::controllers::{self, read_trace, ControllerKind, Feasibility, MpcSettings};
use kinoplan::envsim::{self, OccupancyGrid};
use kinoplan::esdf::EsdfGrid;
use kinoplan::nnplanner::PlannerParams;
use kinoplan::svg::{self, ScenePath};
use kinoplan::training::{evaluate_suite, held_out_suite, Pipeline, PlanningSample, SuiteStats, Trainer};
use kinoplan::{Error, Pose2, Result};
use log::info;
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::{Command, Common, Planners};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { common, no_grids } => gen(&common, no_grids),
        Command::Train { common, resume } => train(&common, resume.as_deref()),
        Command::Eval {
            common,
            params,
            controller,
            archetype,
            scenario_seed,
            manifest,
            id,
        } => {
            let cfg = setup(&common)?;
            let b = match (manifest, id) {
                (Some(m), Some(id)) => {
                    let m = Manifest::load(&m)?;
                    let entry = m
                        .entries
                        .iter()
                        .find(|e| e.id == id)
                        .copied()
                        .ok_or_else(|| Error::Config(format!("manifest has no scenario {id}")))?;
                    Manifest { entries: vec![entry] }.build(&cfg)?.remove(0)
                }
                _ => {
                    let seed = scenario_seed.unwrap_or(cfg.seed);
                    let scenario = envsim::generate(archetype, seed, &cfg.world)?;
                    let esdf = Arc::new(EsdfGrid::build(&scenario.grid));
                    BenchScenario {
                        entry: bench::ManifestEntry { id: 0, archetype, seed },
                        scenario,
                        esdf,
                    }
                }
            };
            eval(&cfg, &common.out, &params, controller, &b)
        }
        Command::Bench {
            common,
            planners,
            navigation_manifest,
        } => bench_tables(&common, &planners, navigation_manifest.as_deref()),
        Command::Sweep { common, planners } => sweep(&common, &planners),
        Command::Replay { trace, grid, plan, out } => replay(&trace, &grid, plan.as_deref(), &out),
    }
}

/// Loads the config, applies `--seed` and overrides, and echoes it into the
/// output directory.
fn setup(common: &Common) -> Result<Config> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = match &common.config {
        Some(p) => Config::load(p, &overrides)?,
        None => Config::default().with_overrides(&overrides)?,
    };
    create_dir(&common.out)?;
    cfg.save(&common.out.join("config.toml"))?;
    Ok(cfg)
}

fn create_dir(d: &Path) -> Result<()> {
    fs::create_dir_all(d).map_err(|e| Error::Io {
        path: d.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_params(path: &Path, cfg: &Config) -> Result<PlannerParams> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let p = PlannerParams::load(path)?;
    if p.arch != cfg.network {
        return Err(Error::Config(format!("{} does not match the [network] architecture", path.display())));
    }
    Ok(p)
}

fn load_planners(specs: &[String], cfg: &Config) -> Result<Vec<Planner>> {
    let mut out: Vec<Planner> = Vec::new();
    for s in specs {
        let (name, path) = s
            .split_once('=')
            .filter(|(n, p)| !n.is_empty() && !p.is_empty())
            .ok_or_else(|| Error::Config(format!("planner {s:?} is not NAME=PATH")))?;
        if out.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("planner name {name:?} given twice")));
        }
        out.push(Planner {
            name: name.to_string(),
            params: load_params(Path::new(path), cfg)?,
        });
    }
    Ok(out)
}

fn manifest_or_default(path: Option<&Path>, cfg: &Config, n: usize, offset: u64) -> Result<Manifest> {
    match path {
        Some(p) => Manifest::load(p),
        None => Ok(Manifest::generate(cfg.seed, &cfg.bench.mix, n, offset)),
    }
}

fn gen(common: &Common, no_grids: bool) -> Result<()> {
    let cfg = setup(common)?;
    let suites = [
        ("tracking", Manifest::generate(cfg.seed, &cfg.bench.mix, cfg.bench.tracking_scenarios, 0)),
        (
            "navigation",
            Manifest::generate(cfg.seed, &cfg.bench.mix, cfg.bench.navigation_episodes, NAVIGATION_OFFSET),
        ),
    ];
    for (name, m) in &suites {
        m.save(&common.out.join(format!("{name}_manifest.csv")))?;
        let built = m.build(&cfg)?;
        write(&common.out.join(format!("{name}_scenarios.csv")), &bench::scenarios_csv(&built))?;
        if !no_grids {
            let dir = common.out.join("grids");
            create_dir(&dir)?;
            for b in &built {
                b.scenario.grid.save(&dir.join(format!("{name}_{:04}.grid", b.entry.id)))?;
            }
        }
        println!("{name}: {} scenarios, manifest sha256 {}", m.len(), m.hash());
    }
    Ok(())
}

fn stats_row(w: &mut csv::Writer<Vec<u8>>, label: &str, s: &SuiteStats) {
    w.write_record([
        label.to_string(),
        s.total.to_string(),
        s.fear.to_string(),
        s.environment.to_string(),
        s.goal.to_string(),
        s.straightness.to_string(),
        s.tracking.to_string(),
        s.mpc_converged.to_string(),
        s.collision_rate.to_string(),
        s.samples.to_string(),
        s.failed.to_string(),
    ])
    .expect("in-memory write");
}

fn train(common: &Common, resume: Option<&Path>) -> Result<()> {
    let cfg = setup(common)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), p)?,
        None => Trainer::new(cfg.clone())?,
    };
    let initial = PlannerParams::init(cfg.network, kinoplan::config::derive_seed(cfg.seed, kinoplan::config::stream::INIT, 0))?;
    info!("training from iteration {} to {}", trainer.iteration, cfg.train.iterations);
    let records = trainer.run(Some(&common.out))?;
    println!("trained {} iterations; parameters in {}", records.len(), common.out.join("final.params").display());
    if cfg.train.eval_scenarios == 0 {
        return Ok(());
    }
    let suite = held_out_suite(&cfg, cfg.train.eval_scenarios)?;
    let before = evaluate_suite(&trainer.pipeline, &initial, &suite);
    let after = evaluate_suite(&trainer.pipeline, &trainer.params, &suite);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "params",
        "total",
        "fear",
        "environment",
        "goal",
        "straightness",
        "tracking",
        "mpc_converged",
        "collision_rate",
        "samples",
        "failed",
    ])
    .expect("in-memory write");
    stats_row(&mut w, "initial", &before);
    stats_row(&mut w, "final", &after);
    write(&common.out.join("heldout.csv"), &String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"))?;
    println!(
        "held-out U {:.4} -> {:.4} ({:.1}% lower), collision rate {:.1}% -> {:.1}%",
        before.total,
        after.total,
        100.0 * (1.0 - after.total / before.total),
        100.0 * before.collision_rate,
        100.0 * after.collision_rate
    );
    Ok(())
}

/// One pose of a stored plan; `path` names the polyline it belongs to.
#[derive(Debug, Serialize, Deserialize)]
struct PlanRow {
    path: String,
    index: usize,
    x: f64,
    y: f64,
    psi: f64,
}

fn plan_rows(name: &str, poses: &[Pose2], out: &mut Vec<PlanRow>) {
    out.extend(poses.iter().enumerate().map(|(index, p)| PlanRow {
        path: name.to_string(),
        index,
        x: p.x,
        y: p.y,
        psi: p.psi,
    }));
}

fn points(poses: &[Pose2]) -> Vec<Vector2<f64>> {
    poses.iter().map(|p| p.translation()).collect()
}

fn eval(cfg: &Config, out: &Path, params_path: &Path, kind: ControllerKind, b: &BenchScenario) -> Result<()> {
    let params = load_params(params_path, cfg)?;
    let pipeline = Pipeline::from_config(cfg)?;
    let sample = PlanningSample::new(b.scenario.clone(), b.esdf.clone(), &cfg.sensor)?;
    let first = pipeline.evaluate(&params, &sample)?;
    let frame = sample.frame();
    let reference = controllers::to_world(frame, &first.reference);
    let optimized = controllers::to_world(frame, &first.optimized);
    let mpc = MpcSettings::from_config(&cfg.mpc);
    let res = controllers::navigate(&params, &pipeline, &b.scenario, &b.esdf, &cfg.sensor, kind, &cfg.controller, &mpc)?;
    res.save_trace(&out.join("trace.csv"), cfg.controller.dt)?;
    b.scenario.grid.save(&out.join("scene.grid"))?;

    let mut rows = Vec::new();
    plan_rows("reference", &reference, &mut rows);
    plan_rows("optimized", &optimized, &mut rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).expect("in-memory write");
    }
    write(&out.join("plan.csv"), &String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"))?;

    let paths = vec![
        scene_path("reference", 0, points(&reference), true),
        scene_path("optimized", 2, points(&optimized), false),
        scene_path("executed", 1, points(&res.trajectory.states), false),
    ];
    let scene = svg::scene(&b.scenario.grid, &paths, Some(b.scenario.start.translation()), Some(b.scenario.goal));
    write(&out.join("scene.svg"), &scene)?;
    println!(
        "{} seed {}: {} after {} steps ({:.1} s simulated), mean tracking error {:.4} m, {} replans",
        b.entry.archetype,
        b.entry.seed,
        res.outcome,
        res.steps(),
        res.steps() as f64 * cfg.controller.dt,
        res.mean_error(),
        res.references.len()
    );
    Ok(())
}

fn scene_path(name: &str, color: usize, points: Vec<Vector2<f64>>, dashed: bool) -> ScenePath {
    ScenePath {
        name: name.to_string(),
        color: svg::PALETTE[color].to_string(),
        points,
        dashed,
    }
}

fn feasibility_line(name: &str, f: &Feasibility) -> String {
    format!("{name},{},{},{}\n", f.trajectories, f.max_curvature, f.max_defect)
}

fn trace_dir(common: &Common, planners: &Planners, sub: &str) -> Option<PathBuf> {
    (!planners.no_traces).then(|| common.out.join("traces").join(sub))
}

fn bench_tables(common: &Common, planners: &Planners, nav_manifest: Option<&Path>) -> Result<()> {
    let cfg = setup(common)?;
    let list = load_planners(&planners.planners, &cfg)?;
    let out = &common.out;
    let tm = manifest_or_default(planners.manifest.as_deref(), &cfg, cfg.bench.tracking_scenarios, 0)?;
    let nm = manifest_or_default(nav_manifest, &cfg, cfg.bench.navigation_episodes, NAVIGATION_OFFSET)?;
    tm.save(&out.join("tracking_manifest.csv"))?;
    nm.save(&out.join("navigation_manifest.csv"))?;
    println!("tracking manifest sha256 {}", tm.hash());
    println!("navigation manifest sha256 {}", nm.hash());

    let suite = tm.build(&cfg)?;
    let r_min = cfg.controller.r_min;
    let t = bench::tracking_table(&list, &suite, &cfg, &ControllerKind::ALL, r_min, trace_dir(common, planners, "tracking").as_deref())?;
    write(&out.join("tracking_rows.csv"), &t.rows_csv())?;
    write(&out.join("tracking_summary.csv"), &t.summary_csv())?;
    write(&out.join("tracking.txt"), &t.format())?;
    println!("\nMean tracking error (m), r_min = {r_min} m\n{}", t.format());

    let nav = nm.build(&cfg)?;
    let s = bench::success_table(&list, &nav, &cfg, ControllerKind::Mpc, trace_dir(common, planners, "navigation").as_deref())?;
    write(&out.join("navigation_rows.csv"), &s.rows_csv())?;
    write(&out.join("navigation_summary.csv"), &s.summary_csv())?;
    write(&out.join("navigation.txt"), &s.format())?;
    println!("\nNavigation success (MPC)\n{}", s.format());

    let feas = String::from("source,trajectories,max_curvature,max_defect\n")
        + &feasibility_line("tracking_executed", &t.executed)
        + &feasibility_line("tracking_mpc", &t.mpc)
        + &feasibility_line("navigation_executed", &s.executed)
        + &feasibility_line("navigation_mpc", &s.mpc);
    write(&out.join("feasibility.csv"), &feas)?;
    Ok(())
}

fn sweep(common: &Common, planners: &Planners) -> Result<()> {
    let cfg = setup(common)?;
    let list = load_planners(&planners.planners, &cfg)?;
    let tm = manifest_or_default(planners.manifest.as_deref(), &cfg, cfg.bench.tracking_scenarios, 0)?;
    tm.save(&common.out.join("tracking_manifest.csv"))?;
    let suite = tm.build(&cfg)?;
    let s = bench::radius_sweep(&list, &suite, &cfg, &ControllerKind::ALL, &cfg.bench.radii, trace_dir(common, planners, "sweep").as_deref())?;
    write(&common.out.join("sweep.csv"), &s.csv())?;
    write(&common.out.join("sweep.svg"), &s.svg())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in &s.tables {
        for r in &t.rows {
            w.serialize(r).expect("in-memory write");
        }
    }
    write(&common.out.join("sweep_rows.csv"), &String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"))?;
    println!("{:<10}{:<24}{:<6}{:>12}", "r_min", "planner", "ctrl", "error (m)");
    for p in s.points() {
        println!("{:<10}{:<24}{:<6}{:>12.4}", p.r_min, p.planner, p.controller, p.mean_error);
    }
    Ok(())
}

fn replay(trace: &Path, grid: &Path, plan: Option<&Path>, out: &Path) -> Result<()> {
    let rows = read_trace(trace)?;
    let grid = OccupancyGrid::load(grid)?;
    let mut paths = Vec::new();
    if let Some(p) = plan {
        let mut r = csv::Reader::from_path(p).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        let mut named: Vec<(String, Vec<Vector2<f64>>)> = Vec::new();
        for row in r.deserialize::<PlanRow>() {
            let row = row.map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
            match named.iter_mut().find(|(n, _)| *n == row.path) {
                Some((_, pts)) => pts.push(Vector2::new(row.x, row.y)),
                None => named.push((row.path, vec![Vector2::new(row.x, row.y)])),
            }
        }
        for (i, (name, pts)) in named.into_iter().enumerate() {
            let color = if i == 0 { 0 } else { 2 + i };
            paths.push(scene_path(&name, color % svg::PALETTE.len(), pts, i == 0));
        }
    }
    let executed: Vec<Vector2<f64>> = rows.iter().map(|r| Vector2::new(r.x, r.y)).collect();
    let start = executed.first().copied();
    paths.push(scene_path("executed", 1, executed, false));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(out, &svg::scene(&grid, &paths, start, None))
}
