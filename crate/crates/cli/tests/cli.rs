use std::path::Path;
use std::process::{Command, Output};

fn kinoplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinoplan")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = kinoplan(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

const SMALL: [&str; 2] = ["bench.tracking_scenarios=6", "bench.navigation_episodes=4"];

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen", "--seed", "7", "-o", d.to_str().unwrap(), SMALL[0], SMALL[1]]);
    }
    for f in ["tracking_manifest.csv", "navigation_manifest.csv", "tracking_scenarios.csv", "config.toml", "grids/navigation_0003.grid"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    assert_eq!(read(&a.join("tracking_manifest.csv")).lines().count(), 7);
    assert!(read(&a.join("config.toml")).contains("seed = 7"));
    assert!(read(&a.join("tracking_scenarios.csv")).starts_with("id,archetype,seed,start_x,start_y,start_psi,goal_x,goal_y\n"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(kinoplan(&["gen", "-o", out, "train.no_such_key=1"]).status.code(), Some(1));
    assert_eq!(kinoplan(&["gen", "-o", out, "train.lr=-1"]).status.code(), Some(1));
    assert_eq!(kinoplan(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(kinoplan(&["--help"]).status.code(), Some(0));
    let missing = kinoplan(&["bench", "-o", out, "--planner", "a=/nonexistent.params"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nonexistent"));
    assert_eq!(kinoplan(&["bench", "-o", out, "--planner", "noequals"]).status.code(), Some(1));
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\niterations = \"many\"\n").unwrap();
    assert_eq!(kinoplan(&["gen", "--config", cfg.to_str().unwrap(), "-o", out]).status.code(), Some(1));
}

#[test]
fn train_eval_bench_sweep_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let train = ["train.iterations=20", "train.batch=4", "train.pool_worlds=2", "train.eval_scenarios=4", "train.checkpoint_every=10"];
    let mut args = vec!["--jobs", "2", "train", "-o"];
    let tdir = d("train");
    args.push(&tdir);
    args.extend(train);
    let stdout = ok(&args);
    assert!(stdout.contains("held-out U"));
    let t = dir.path().join("train");
    assert_eq!(read(&t.join("train.csv")).lines().count(), 21);
    for f in ["final.params", "ckpt-000010.params", "ckpt-000010.optim", "heldout.csv", "config.toml"] {
        assert!(t.join(f).exists(), "{f}");
    }
    let params = d("train/final.params");

    // Resuming the last checkpoint reproduces the final parameters.
    let rdir = d("resumed");
    let mut args = vec!["train", "-o", &rdir, "--resume"];
    let ck = d("train/ckpt-000020.params");
    args.push(&ck);
    args.extend(train);
    ok(&args);
    assert_eq!(std::fs::read(&params).unwrap(), std::fs::read(d("resumed/final.params")).unwrap());

    // Open scene: no obstacles besides the border.
    let edir = d("eval");
    ok(&["eval", "-o", &edir, "--params", &params, "--archetype", "forest", "--scenario-seed", "3", "world.forest_density=0"]);
    let e = dir.path().join("eval");
    let svg = read(&e.join("scene.svg"));
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    for name in ["reference", "optimized", "executed"] {
        assert!(svg.contains(&format!("data-name=\"{name}\"")), "{name}");
    }
    let view: Vec<f64> = svg
        .split("viewBox=\"")
        .nth(1)
        .unwrap()
        .split('"')
        .next()
        .unwrap()
        .split(' ')
        .map(|v| v.parse().unwrap())
        .collect();
    for line in svg.lines().filter(|l| l.contains("class=\"path\"")) {
        let pts = line.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        for p in pts.split(' ').filter(|p| !p.is_empty()) {
            let (x, y) = p.split_once(',').unwrap();
            let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
            assert!((0.0..=view[2]).contains(&x) && (0.0..=view[3]).contains(&y), "{p}");
        }
    }
    assert!(read(&e.join("trace.csv")).starts_with("t,x,y,psi,v,delta,error\n"));
    assert!(read(&e.join("plan.csv")).starts_with("path,index,x,y,psi\n"));

    let replayed = d("replay/scene.svg");
    ok(&["replay", "--trace", &d("eval/trace.csv"), "--grid", &d("eval/scene.grid"), "--plan", &d("eval/plan.csv"), "-o", &replayed]);
    let r = read(Path::new(&replayed));
    assert!(r.contains("data-name=\"executed\"") && r.contains("data-name=\"reference\""));

    let bdir = d("bench");
    let a = format!("a={params}");
    let b = format!("b={params}");
    ok(&["bench", "-o", &bdir, "--planner", &a, "--planner", &b, SMALL[0], SMALL[1]]);
    let bd = dir.path().join("bench");
    for f in ["tracking_rows.csv", "tracking_summary.csv", "tracking.txt", "navigation_rows.csv", "navigation_summary.csv", "feasibility.csv", "config.toml"] {
        assert!(bd.join(f).exists(), "{f}");
    }
    // Identical planners give identical columns.
    let summary = read(&bd.join("tracking_summary.csv"));
    let col = |p: &str| -> Vec<String> {
        summary.lines().filter(|l| l.starts_with(&format!("{p},"))).map(|l| l[2..].to_string()).collect()
    };
    assert_eq!(col("a"), col("b"));
    assert!(bd.join("traces/tracking/a_mpc_0000.csv").exists());
    assert!(bd.join("traces/navigation/b_nav_0003.csv").exists());

    let sdir = d("sweep");
    ok(&["sweep", "-o", &sdir, "--planner", &a, "--no-traces", SMALL[0], "bench.radii=[1.0, 2.0]"]);
    let sweep = read(&dir.path().join("sweep/sweep.csv"));
    assert_eq!(sweep.lines().count(), 1 + 2 * 2);
    assert!(read(&dir.path().join("sweep/sweep.svg")).contains("a + mpc"));
}
