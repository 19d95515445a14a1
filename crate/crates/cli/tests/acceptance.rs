//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_FAILING` are reported but do not fail the
//! target; any other failure, or a known one that starts passing, does.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ropecloth::collision::CollisionPolicy;
use ropecloth::dataset::{generate_dataset, DatasetSetup};
use ropecloth::engine::{run, FrameRecord};
use ropecloth::experiments::{
    default_iteration_policies, iterations_study, pendulum_verify, pushout_demo, soak_scene, IterationsConfig,
    PendulumConfig, PushoutDemoConfig,
};
use ropecloth::refcloth::{locking_experiment, LockingSetup};
use ropecloth::rope::SolverPolicy;
use ropecloth::scene::SceneConfig;
use ropecloth_neural::fit_pca;
use ropecloth_neural::mlp::{gradient_check, Activation, Mlp2};
use serde_json::Value;

const KNOWN_FAILING: &[u32] = &[4, 12];

struct Verdict {
    id: u32,
    pass: bool,
    detail: String,
}

fn verdict(id: u32, pass: bool, detail: impl Into<String>) -> Verdict {
    let v = Verdict { id, pass, detail: detail.into() };
    println!("criterion {:>2}: {}  {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    v
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ropecloth"));
    c.env("RUST_LOG", "warn");
    c
}

fn run_bin(args: &[&str], dir: &Path) -> (i32, Duration) {
    let t = Instant::now();
    let out = bin().args(args).current_dir(dir).output().expect("spawn ropecloth");
    if !out.status.success() {
        eprintln!("ropecloth {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    }
    (out.status.code().unwrap_or(-1), t.elapsed())
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).expect("read json")).expect("parse json")
}

fn soak_records(solver: SolverPolicy) -> Vec<FrameRecord> {
    let (scene, state) = soak_scene(7, 1000, solver).build(7).expect("soak scene");
    run(&scene, state)
}

fn pendulum() -> Verdict {
    let t = Instant::now();
    let r = pendulum_verify(&PendulumConfig::default());
    let secs = t.elapsed().as_secs_f64();
    verdict(
        1,
        r.relative_error < 0.02 && secs < 5.0,
        format!("max angle error {:.3}% of amplitude, runtime {secs:.2} s", 100.0 * r.relative_error),
    )
}

fn inextensibility(soak: &[FrameRecord]) -> Verdict {
    let bad = soak.iter().filter(|r| r.max_stretch > 1e-9).count();
    let worst = soak.iter().map(|r| r.max_stretch).fold(f64::NEG_INFINITY, f64::max);
    verdict(2, bad == 0, format!("{} frames, {bad} with stretch > 1e-9, worst l/l_max − 1 = {worst:.2e}", soak.len()))
}

fn complementarity(runs: &[&[FrameRecord]]) -> Verdict {
    let mut frames = 0;
    let mut bad = 0;
    for recs in runs {
        for r in recs.iter() {
            frames += 1;
            let signs = r.chains.iter().all(|c| {
                c.tensions.iter().chain(&c.impulses).all(|v| *v >= 0.0)
                    && c.taut.iter().zip(c.tensions.iter().zip(&c.impulses)).all(|(t, (a, b))| *t || (*a == 0.0 && *b == 0.0))
            });
            if !(signs && r.diagnostics.complementarity) {
                bad += 1;
            }
        }
    }
    verdict(3, bad == 0, format!("{frames} frames checked, {bad} with negative or slack-carried tension/impulse"))
}

fn impulse_contract(soak: &[FrameRecord]) -> Verdict {
    let worst = soak.iter().map(|r| r.diagnostics.max_separating_velocity).fold(0.0, f64::max);
    let bad = soak.iter().filter(|r| r.diagnostics.max_separating_velocity > 1e-8).count();
    verdict(
        4,
        bad == 0,
        format!("tolerance 1e-6: worst separating velocity {worst:.2e} m/s, {bad}/{} frames above 1e-8", soak.len()),
    )
}

fn damping() -> Verdict {
    let e = iterations_study(&IterationsConfig::default(), &default_iteration_policies());
    let monotone = e.windows(2).all(|w| w[1].amplitude >= w[0].amplitude);
    let strict = e.last().unwrap().amplitude > e[0].amplitude;
    let list: Vec<String> = e.iter().map(|x| format!("{}={:.3}", x.label, x.amplitude)).collect();
    verdict(5, monotone && strict, format!("amplitudes {}", list.join(", ")))
}

fn pushout() -> Verdict {
    let cfg = PushoutDemoConfig::default();
    let hist = pushout_demo(&cfg, &CollisionPolicy::default());
    let grad = pushout_demo(&cfg, &CollisionPolicy::gradient());
    let h = hist.iter().map(|t| t.max_angle).fold(0.0, f64::max);
    let g = grad.iter().map(|t| t.max_angle).fold(f64::INFINITY, f64::min);
    let touched = hist.iter().chain(&grad).all(|t| t.contacted);
    verdict(6, touched && h < 60.0 && g > 90.0, format!("history max {h:.1}°, gradient min of peaks {g:.1}°"))
}

fn collision_safety(runs: &[&[FrameRecord]]) -> Verdict {
    let mut phi: f64 = 0.0;
    let mut vn = f64::INFINITY;
    for r in runs.iter().flat_map(|x| x.iter()) {
        phi = phi.max(r.max_phi_violation);
        vn = vn.min(r.diagnostics.collision.min_relative_normal_velocity);
    }
    verdict(
        7,
        phi <= 1e-9 && vn >= -1e-9,
        format!("deepest bone {phi:.2e} m inside, min relative normal velocity {vn:.2e} m/s"),
    )
}

fn locking() -> Verdict {
    let r = locking_experiment(&LockingSetup::default(), &[1.0, 10.0, 100.0, 1000.0, 10000.0]);
    let weak = r.entries.first().unwrap();
    let stiff = r.entries.last().unwrap();
    let ok = stiff.extent < r.rope_extent && r.rope_extent < weak.extent && r.rope_extent <= r.rope_total_length * (1.0 + 1e-9);
    verdict(
        8,
        ok,
        format!(
            "stiff {:.4} < rope {:.4} < weak {:.4} m, Σ l_max {:.4} m",
            stiff.extent, r.rope_extent, weak.extent, r.rope_total_length
        ),
    )
}

fn energy() -> Verdict {
    let r = pendulum_verify(&PendulumConfig::default());
    verdict(9, r.max_energy_drift_per_period < 0.01, format!("drift {:.3}% per period", 100.0 * r.max_energy_drift_per_period))
}

fn gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_grad: f64 = 0.0;
    for k in 0..10u64 {
        let (n_in, width, n_out) = (rng.gen_range(1..8), rng.gen_range(2..12), rng.gen_range(1..6));
        let act = if k % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        let net = Mlp2::new(n_in, width, n_out, act, k);
        let x: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        worst_grad = worst_grad.max(gradient_check(&net, &x, &c, 1e-5));
    }
    let samples: Vec<Vec<f64>> = (0..24).map(|_| (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let pca = fit_pca(&samples, 23).expect("pca");
    let ortho = pca.orthonormality_error();
    let recon = samples
        .iter()
        .map(|s| {
            let r = pca.reconstruct(&pca.project(s));
            let err: f64 = r.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            err / s.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max);
    verdict(
        10,
        worst_grad < 1e-4 && ortho < 1e-10 && recon < 1e-8,
        format!("gradient rel err {worst_grad:.2e}, orthonormality {ortho:.2e}, full-rank reconstruction {recon:.2e}"),
    )
}

struct Pipeline {
    dir: PathBuf,
    ok: bool,
    elapsed: Duration,
}

const DESK: &[&str] = &["--batch-size", "8", "--epochs", "2000", "--normalize-inputs"];

fn pipeline(dir: &Path) -> Pipeline {
    let t = Instant::now();
    let mut ok = true;
    let mut step = |args: Vec<&str>| {
        if ok {
            ok = run_bin(&args, dir).0 == 0;
        }
    };
    step(vec!["gen-data", "--out", "data.rcds", "--frames", "600", "--cols", "20", "--rows", "20", "--rope-scene", "rope.json"]);
    step(vec!["fit-pca", "--data", "data.rcds", "--k", "16", "--out", "pca.rcnm"]);
    let mut skin = vec!["train", "--stage", "skinning", "--data", "data.rcds", "--model", "pca.rcnm", "--out", "skin.rcnm"];
    skin.extend(["--lr", "1e-4", "--metrics", "skin.json"]);
    skin.extend(DESK);
    step(skin);
    let mut shape = vec!["train", "--stage", "shape", "--data", "data.rcds", "--model", "skin.rcnm", "--out", "shape.rcnm"];
    shape.extend(["--k", "16", "--lr", "1e-5", "--batch-size", "8", "--epochs", "2000", "--metrics", "shape.json"]);
    step(shape);
    step(vec!["simulate", "--scene", "rope.json", "--out", "sim"]);
    step(vec!["infer", "--model", "shape.rcnm", "--bones", "sim/frames.csv", "--out", "inferred"]);
    Pipeline { dir: dir.to_path_buf(), ok, elapsed: t.elapsed() }
}

fn pinn_efficacy(p: &Pipeline) -> Verdict {
    if !p.ok {
        return verdict(11, false, "pipeline did not complete");
    }
    let mut args = vec!["train", "--stage", "skinning", "--data", "data.rcds", "--model", "pca.rcnm", "--out", "skin0.rcnm"];
    args.extend(["--lr", "1e-4", "--pinn-weight", "0", "--metrics", "skin0.json"]);
    args.extend(DESK);
    if run_bin(&args, &p.dir).0 != 0 {
        return verdict(11, false, "ablation training failed");
    }
    let with = read_json(&p.dir.join("skin.json"));
    let without = read_json(&p.dir.join("skin0.json"));
    let (ip1, ip0) = (with["validation"]["interpenetrations"].as_f64().unwrap(), without["validation"]["interpenetrations"].as_f64().unwrap());
    let (r1, r0) = (with["validation"]["rmse"].as_f64().unwrap(), without["validation"]["rmse"].as_f64().unwrap());
    let degrade = r1 / r0 - 1.0;
    verdict(
        11,
        ip1 <= 0.5 * ip0 && degrade <= 0.25,
        format!(
            "interpenetrating vertices {ip1} vs {ip0}; RMSE {r1:.3e} vs {r0:.3e} m ({:+.1}%)",
            100.0 * degrade
        ),
    )
}

fn end_to_end(p: &Pipeline) -> Verdict {
    if !p.ok {
        return verdict(12, false, format!("pipeline failed after {:.0} s", p.elapsed.as_secs_f64()));
    }
    let m = read_json(&p.dir.join("shape.json"));
    let (hold, val) = (m["holdout"]["rmse"].as_f64().unwrap(), m["validation"]["rmse"].as_f64().unwrap());
    let frac = read_json(&p.dir.join("inferred/summary.json"))["fraction_within_5mm"].as_f64().unwrap();
    let secs = p.elapsed.as_secs_f64();
    verdict(
        12,
        secs < 600.0 && hold <= 2.0 * val && frac >= 0.99,
        format!(
            "{secs:.0} s; holdout RMSE {hold:.3e} vs validation {val:.3e} m; {:.2}% of inferred vertices with φ ≥ −5e-3",
            100.0 * frac
        ),
    )
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Verdict {
    let scene = soak_scene(3, 120, SolverPolicy::tolerance(1e-6)).to_json();
    let steps: Vec<Vec<&str>> = vec![
        vec!["simulate", "--scene", "../soak.json", "--out", "sim", "--seed", "3"],
        vec!["pendulum-verify", "--periods", "2", "--out", "pendulum.csv"],
        vec!["iterations-study", "--out", "iterations.csv"],
        vec!["collision-demo", "--out", "pushout.csv"],
        vec!["flag-compare", "--out", "flags.csv"],
        vec!["gen-data", "--out", "d.rcds", "--frames", "40", "--cols", "8", "--rows", "8", "--chains", "2", "--csv", "d.csv", "--rope-scene", "rope.json"],
        vec!["fit-pca", "--data", "d.rcds", "--k", "6", "--out", "pca.rcnm"],
        vec!["train", "--stage", "skinning", "--data", "d.rcds", "--model", "pca.rcnm", "--out", "skin.rcnm", "--epochs", "5", "--log", "skin.csv", "--metrics", "skin.json", "--normalize-inputs"],
        vec!["train", "--stage", "shape", "--data", "d.rcds", "--model", "skin.rcnm", "--out", "shape.rcnm", "--epochs", "5", "--k", "4", "--log", "shape.csv"],
        vec!["simulate", "--scene", "rope.json", "--out", "rope", "--model", "shape.rcnm"],
        vec!["infer", "--model", "shape.rcnm", "--bones", "rope/frames.csv", "--out", "inferred"],
    ];
    fs::write(root.join("soak.json"), scene).unwrap();
    for run in ["a", "b"] {
        let dir = root.join(run);
        fs::create_dir_all(&dir).unwrap();
        for s in &steps {
            if run_bin(s, &dir).0 != 0 {
                return verdict(13, false, format!("`{}` failed", s.join(" ")));
            }
        }
    }
    let (a, b) = (root.join("a"), root.join("b"));
    let files = files_under(&a);
    if files != files_under(&b) {
        return verdict(13, false, "runs produced different file sets");
    }
    let differing: Vec<String> =
        files.iter().filter(|f| fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap()).map(|f| f.display().to_string()).collect();
    verdict(
        13,
        differing.is_empty(),
        format!("{} subcommands rerun, {} output files compared, {} differ {:?}", steps.len(), files.len(), differing.len(), differing),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let tmp = tempfile::tempdir().expect("temp dir");
    let soak = soak_records(SolverPolicy::tolerance(1e-6));
    let rope: Vec<FrameRecord> = {
        let data = generate_dataset(&DatasetSetup { frames: 240, ..DatasetSetup::default() }, 1).expect("dataset");
        let cfg: SceneConfig = data.rope_scene();
        let (scene, state) = cfg.build(1).expect("rope scene");
        run(&scene, state)
    };
    let pipe_dir = tmp.path().join("pipeline");
    fs::create_dir_all(&pipe_dir).unwrap();

    let mut v = vec![pendulum(), inextensibility(&soak), complementarity(&[&soak, &rope])];
    v.push(impulse_contract(&soak));
    v.push(damping());
    v.push(pushout());
    v.push(collision_safety(&[&soak, &rope]));
    v.push(locking());
    v.push(energy());
    v.push(gradients());
    let p = pipeline(&pipe_dir);
    v.push(pinn_efficacy(&p));
    v.push(end_to_end(&p));
    let det_dir = tmp.path().join("determinism");
    fs::create_dir_all(&det_dir).unwrap();
    v.push(determinism(&det_dir));

    let passed = v.iter().filter(|x| x.pass).count();
    println!("{passed}/{} criteria pass", v.len());
    let unexpected: Vec<u32> = v.iter().filter(|x| x.pass == KNOWN_FAILING.contains(&x.id)).map(|x| x.id).collect();
    if !unexpected.is_empty() {
        eprintln!("criteria with unexpected outcome: {unexpected:?}");
        std::process::exit(1);
    }
}
