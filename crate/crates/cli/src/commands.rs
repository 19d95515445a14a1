use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::info;
use ropecloth::collision::CollisionPolicy;
use ropecloth::dataset::{generate_dataset, Dataset, DatasetSetup, Split};
use ropecloth::engine::{check_invariants, run, InvariantTolerances};
use ropecloth::experiments::{
    iterations_study as run_iterations, pendulum_verify as run_pendulum, pushout_demo, IterationsConfig, PendulumConfig,
    PushoutDemoConfig,
};
use ropecloth::geometry::Vec3;
use ropecloth::io::{group_bone_frames, read_frames_csv, write_frames_csv, write_obj};
use ropecloth::refcloth::{locking_experiment, LockingSetup};
use ropecloth::rope::SolverPolicy;
use ropecloth::scene::{ConfigError, SceneConfig};
use ropecloth_neural::mlp::Activation;
use ropecloth_neural::train::{evaluate, phi_values, write_log_csv, SplitMetrics};
use ropecloth_neural::{fit_skinning_pca, train_shape, train_skinning, ClothModel, NeuralError, Stage, TrainConfig};
use serde::Serialize;

use crate::{
    ActivationArg, CollisionDemoArgs, FitPcaArgs, FlagArgs, GenDataArgs, InferArgs, IterationsArgs, PendulumArgs, PolicyChoice,
    SimulateArgs, StageArg, TrainArgs,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Invariant(String),
    #[error("{0}")]
    Failed(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Invariant(_) => 3,
            CliError::Failed(_) | CliError::Runtime(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ropecloth::io::FormatError> for CliError {
    fn from(e: ropecloth::io::FormatError) -> Self {
        match e {
            ropecloth::io::FormatError::Io(e) => CliError::Runtime(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<NeuralError> for CliError {
    fn from(e: NeuralError) -> Self {
        match e {
            NeuralError::Io(e) => CliError::Runtime(e.to_string()),
            NeuralError::Diverged { .. } => CliError::Failed(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<ClothModel> {
    Ok(ClothModel::read(open(path)?)?)
}

fn save_model(path: &Path, model: &ClothModel) -> Result<()> {
    let mut w = create(path)?;
    model.write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Ok(Dataset::read(open(path)?)?)
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = SceneConfig::load(&a.scene)?;
    if let Some(n) = a.frames {
        cfg.frames = n;
    }
    let model = a.model.as_deref().map(load_model).transpose()?;
    let (scene, state) = cfg.build(a.seed)?;
    if let Some(m) = &model {
        let bones: usize = state.chains.iter().map(|c| c.bones.len()).sum();
        if bones != m.meta.n_bones() {
            return Err(CliError::Config(format!("model expects {} bones, scene has {bones}", m.meta.n_bones())));
        }
    }
    info!("simulating {} frames of {} chains", scene.frames, state.chains.len());
    let records = run(&scene, state);
    fs::create_dir_all(&a.out)?;
    let csv_path = a.out.join("frames.csv");
    let mut w = create(&csv_path)?;
    write_frames_csv(&mut w, &records)?;
    w.flush()?;
    info!("wrote {}", csv_path.display());
    if let Some(extra) = &cfg.output_csv {
        let extra = a.scene.parent().unwrap_or(Path::new("")).join(extra);
        fs::copy(&csv_path, &extra)?;
        info!("wrote {}", extra.display());
    }
    if let Some(m) = &model {
        for r in &records {
            let bones: Vec<Vec3> = r.chains.iter().flat_map(|c| c.positions.iter().copied()).collect();
            let x = m.infer_mesh(&bones)?;
            let mut w = create(&a.out.join(format!("mesh_{:05}.obj", r.frame)))?;
            write_obj(&mut w, &x, &m.meta.triangles)?;
            w.flush()?;
        }
    }
    let tol = InvariantTolerances::default();
    let violations: Vec<String> = records.iter().flat_map(|r| check_invariants(r, &tol)).collect();
    if !violations.is_empty() {
        let shown: Vec<&str> = violations.iter().take(10).map(String::as_str).collect();
        return Err(CliError::Invariant(format!("{} invariant violations:\n{}", violations.len(), shown.join("\n"))));
    }
    Ok(())
}

pub fn pendulum_verify(a: PendulumArgs) -> Result<()> {
    if !(a.dt > 0.0 && a.periods > 0.0 && a.length > 0.0 && a.solver_tolerance > 0.0) {
        return Err(CliError::Config("dt, periods, length and solver tolerance must be positive".into()));
    }
    let cfg = PendulumConfig {
        theta0: a.theta0.to_radians(),
        length: a.length,
        dt: a.dt,
        periods: a.periods,
        solver: SolverPolicy::tolerance(a.solver_tolerance),
        ..PendulumConfig::default()
    };
    let r = run_pendulum(&cfg);
    if let Some(path) = &a.out {
        #[derive(Serialize)]
        struct Row {
            t: f64,
            theta: f64,
            theta_oracle: f64,
            energy: f64,
        }
        write_csv(path, r.samples.iter().map(|s| Row { t: s.t, theta: s.theta, theta_oracle: s.theta_oracle, energy: s.energy }))?;
    }
    println!("period (exact)        {:.6} s", r.period);
    if let Some(p) = r.measured_period {
        println!("period (measured)     {p:.6} s");
    }
    println!("max angle error       {:.4e} rad ({:.3}% of amplitude)", r.max_angle_error, 100.0 * r.relative_error);
    println!("energy drift/period   {:.3}%", 100.0 * r.max_energy_drift_per_period);
    println!("max stretch           {:.3e}", r.max_stretch);
    if a.theta0 != 0.0 && r.relative_error > a.tolerance {
        return Err(CliError::Failed(format!("angle error {:.3}% exceeds {:.3}%", 100.0 * r.relative_error, 100.0 * a.tolerance)));
    }
    if r.max_energy_drift_per_period > a.energy_tolerance {
        return Err(CliError::Failed(format!("energy drift {:.3}% per period exceeds the tolerance", 100.0 * r.max_energy_drift_per_period)));
    }
    Ok(())
}

fn parse_policy(s: &str) -> Result<SolverPolicy> {
    let s = s.trim();
    let bad = || CliError::Config(format!("bad policy {s:?}; use a sweep count or tol<eps>"));
    if let Some(eps) = s.strip_prefix("tol") {
        let eps: f64 = eps.parse().map_err(|_| bad())?;
        if !(eps > 0.0) {
            return Err(bad());
        }
        return Ok(SolverPolicy::tolerance(eps));
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(SolverPolicy::sweeps(n)),
        _ => Err(bad()),
    }
}

pub fn iterations_study(a: IterationsArgs) -> Result<()> {
    let labels: Vec<String> = a.sweeps.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if labels.is_empty() {
        return Err(CliError::Config("empty --sweeps list".into()));
    }
    let policies = labels.iter().map(|l| Ok((l.clone(), parse_policy(l)?))).collect::<Result<Vec<_>>>()?;
    let entries = run_iterations(&IterationsConfig::default(), &policies);
    #[derive(Serialize)]
    struct Row<'a> {
        policy: &'a str,
        amplitude: f64,
    }
    for e in &entries {
        println!("{:>10}  {:.6}", e.label, e.amplitude);
    }
    if let Some(path) = &a.out {
        write_csv(path, entries.iter().map(|e| Row { policy: &e.label, amplitude: e.amplitude }))?;
    }
    if let Some(w) = entries.windows(2).find(|w| w[1].amplitude < w[0].amplitude) {
        return Err(CliError::Failed(format!("amplitude decreases from {} to {}", w[0].label, w[1].label)));
    }
    if entries.len() > 1 && entries.last().unwrap().amplitude <= entries[0].amplitude {
        return Err(CliError::Failed("no increase between the first and last policy".into()));
    }
    Ok(())
}

pub fn collision_demo(a: CollisionDemoArgs) -> Result<()> {
    let cfg = PushoutDemoConfig::default();
    let mut runs = Vec::new();
    if a.policy != PolicyChoice::Gradient {
        runs.push(("history", CollisionPolicy::default()));
    }
    if a.policy != PolicyChoice::History {
        runs.push(("gradient", CollisionPolicy::gradient()));
    }
    #[derive(Serialize)]
    struct Row {
        policy: &'static str,
        offset: f64,
        t: f64,
        angle_deg: f64,
        x: f64,
        y: f64,
        z: f64,
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (name, policy) in runs {
        for track in pushout_demo(&cfg, &policy) {
            println!("{name:>8}  offset {:+.2}  max angle {:6.1}°", track.offset, track.max_angle);
            let ok = match name {
                "history" => track.max_angle < 60.0,
                _ => track.max_angle > 90.0,
            };
            if !ok {
                failures.push(format!("{name} particle at offset {} peaked at {:.1}°", track.offset, track.max_angle));
            }
            rows.extend(track.samples.iter().map(|&(t, angle_deg, p)| Row {
                policy: name,
                offset: track.offset,
                t,
                angle_deg,
                x: p.x,
                y: p.y,
                z: p.z,
            }));
        }
    }
    if let Some(path) = &a.out {
        write_csv(path, rows)?;
    }
    if !failures.is_empty() {
        return Err(CliError::Failed(failures.join("; ")));
    }
    Ok(())
}

pub fn flag_compare(a: FlagArgs) -> Result<()> {
    if a.stiffness.is_empty() || a.stiffness.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
        return Err(CliError::Config("--stiffness needs positive values".into()));
    }
    let mut ks = a.stiffness.clone();
    ks.sort_by(f64::total_cmp);
    let r = locking_experiment(&LockingSetup::default(), &ks);
    #[derive(Serialize)]
    struct Row {
        kind: &'static str,
        stiffness: Option<f64>,
        extent: f64,
        max_strain: Option<f64>,
    }
    let mut rows: Vec<Row> = r
        .entries
        .iter()
        .map(|e| Row { kind: "mass_spring", stiffness: Some(e.stiffness), extent: e.extent, max_strain: Some(e.max_strain) })
        .collect();
    rows.push(Row { kind: "rope_chain", stiffness: None, extent: r.rope_extent, max_strain: None });
    for e in &r.entries {
        println!("k = {:>10}  extent {:.4} m", e.stiffness, e.extent);
    }
    println!("rope chain      extent {:.4} m (total length {:.4} m)", r.rope_extent, r.rope_total_length);
    if let Some(path) = &a.out {
        write_csv(path, rows)?;
    }
    let mut failures = Vec::new();
    if r.entries.windows(2).any(|w| w[1].extent > w[0].extent) {
        failures.push("extent increases with stiffness".to_string());
    }
    if r.rope_extent > r.rope_total_length * (1.0 + 1e-9) {
        failures.push("rope extent exceeds its total length".to_string());
    }
    if r.entries.len() > 1 {
        let (weak, stiff) = (&r.entries[0], r.entries.last().unwrap());
        if !(stiff.extent < r.rope_extent && r.rope_extent < weak.extent) {
            failures.push(format!(
                "rope extent {:.4} is not between stiff {:.4} and weak {:.4}",
                r.rope_extent, stiff.extent, weak.extent
            ));
        }
    }
    if !failures.is_empty() {
        return Err(CliError::Failed(failures.join("; ")));
    }
    Ok(())
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.bone_stride == 0 || a.rows < 2 {
        return Err(CliError::Config("--bone-stride must be positive and the patch needs at least 2 rows".into()));
    }
    let bone_rows = (0..=a.rows - 2).step_by(a.bone_stride).map(|r| r as f64).collect();
    let setup = DatasetSetup {
        bone_rows,
        cols: a.cols,
        rows: a.rows,
        chains: a.chains,
        frames: a.frames,
        substeps: a.substeps,
        ..DatasetSetup::default()
    };
    setup.validate().map_err(CliError::Config)?;
    let data = generate_dataset(&setup, a.seed).map_err(CliError::Failed)?;
    let mut w = create(&a.out)?;
    data.write(&mut w)?;
    w.flush()?;
    info!(
        "wrote {} frames ({} train / {} validation / {} holdout) to {}",
        data.frames.len(),
        data.indices(Split::Train).len(),
        data.indices(Split::Validation).len(),
        data.indices(Split::Holdout).len(),
        a.out.display()
    );
    if let Some(path) = &a.csv {
        let mut w = create(path)?;
        data.write_csv(&mut w)?;
        w.flush()?;
    }
    if let Some(path) = &a.rope_scene {
        let mut w = create(path)?;
        writeln!(w, "{}", data.rope_scene().to_json())?;
        w.flush()?;
    }
    Ok(())
}

pub fn fit_pca(a: FitPcaArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let model = fit_skinning_pca(&data, a.k)?;
    if model.skin_pca.padded > 0 {
        println!("warning: {} of {} components padded (data rank too low)", model.skin_pca.padded, a.k);
    }
    let total: f64 = model.skin_pca.singular_values.iter().map(|s| s * s).sum();
    println!("k = {}, captured energy {:.6e}", a.k, total);
    save_model(&a.out, &model)
}

#[derive(Serialize)]
struct Metrics {
    validation: SplitMetrics,
    holdout: SplitMetrics,
    train: SplitMetrics,
    best_epoch: usize,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let model = load_model(&a.model)?;
    let stage = match a.stage {
        StageArg::Skinning => Stage::Skinning,
        StageArg::Shape => Stage::Shape,
    };
    let mut cfg = TrainConfig::for_stage(stage);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    cfg.data_weight = a.data_weight.unwrap_or(cfg.data_weight);
    cfg.pinn_weight = a.pinn_weight.unwrap_or(cfg.pinn_weight);
    cfg.epsilon = a.epsilon.or(cfg.epsilon);
    cfg.width = a.width.unwrap_or(cfg.width);
    if let Some(act) = a.activation {
        cfg.activation = match act {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Tanh => Activation::Tanh,
        };
    }
    cfg.normalize_inputs = a.normalize_inputs;
    cfg.seed = a.seed;
    cfg.validate().map_err(CliError::Config)?;
    info!("training {stage:?} stage: {cfg:?}");
    let outcome = match stage {
        Stage::Skinning => train_skinning(&model, &data, &cfg)?,
        Stage::Shape => train_shape(&model, &data, a.k, &cfg)?,
    };
    if let Some(path) = &a.log {
        write_log_csv(create(path)?, &outcome.log)?;
    }
    let m = Metrics {
        validation: evaluate(&outcome.model, &data, Split::Validation, -5e-3),
        holdout: evaluate(&outcome.model, &data, Split::Holdout, -5e-3),
        train: evaluate(&outcome.model, &data, Split::Train, -5e-3),
        best_epoch: outcome.best_epoch,
    };
    println!("best epoch {}", m.best_epoch);
    println!("validation RMSE {:.6e} m, {} interpenetrating vertices", m.validation.rmse, m.validation.interpenetrations);
    println!("holdout    RMSE {:.6e} m, {} interpenetrating vertices", m.holdout.rmse, m.holdout.interpenetrations);
    if let Some(path) = &a.metrics {
        write_json(path, &m)?;
    }
    save_model(&a.out, &outcome.model)
}

#[derive(Serialize)]
struct InferSummary {
    frames: usize,
    vertices: usize,
    min_phi: f64,
    /// Vertices with `φ < 0`, summed over frames.
    interpenetrations: usize,
    /// Fraction of vertices with `φ ≥ −5e-3` m.
    fraction_within_5mm: f64,
}

pub fn infer(a: InferArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    if model.skin_net.is_none() {
        return Err(CliError::Config("model has no trained skinning net".into()));
    }
    let rows = read_frames_csv(open(&a.bones)?)?;
    let frames = group_bone_frames(&rows)?;
    let layout = frames.first().map(|f| f.chains.iter().map(Vec::len).collect::<Vec<_>>()).unwrap_or_default();
    if layout != model.meta.chain_layout {
        return Err(CliError::Config(format!("bone layout {layout:?} does not match the model's {:?}", model.meta.chain_layout)));
    }
    fs::create_dir_all(&a.out)?;
    let mut s = InferSummary { frames: 0, vertices: 0, min_phi: f64::INFINITY, interpenetrations: 0, fraction_within_5mm: 0.0 };
    let mut within = 0usize;
    for f in &frames {
        let bones: Vec<Vec3> = f.chains.iter().flatten().copied().collect();
        if !bones.iter().all(|b| b.is_finite()) {
            return Err(CliError::Config(format!("frame {} has non-finite bone positions", f.frame)));
        }
        let x = model.infer_mesh(&bones)?;
        let phis = phi_values(&model.meta, &x, f.frame as f64 * model.meta.frame_dt);
        s.frames += 1;
        s.vertices += phis.len();
        s.interpenetrations += phis.iter().filter(|p| **p < 0.0).count();
        within += phis.iter().filter(|p| **p >= -5e-3).count();
        s.min_phi = phis.iter().copied().fold(s.min_phi, f64::min);
        let mut w = create(&a.out.join(format!("mesh_{:05}.obj", f.frame)))?;
        write_obj(&mut w, &x, &model.meta.triangles)?;
        w.flush()?;
    }
    s.fraction_within_5mm = within as f64 / s.vertices.max(1) as f64;
    println!(
        "{} frames, min φ {:.3e} m, {:.4}% of vertices within 5 mm of the surface",
        s.frames,
        s.min_phi,
        100.0 * s.fraction_within_5mm
    );
    write_json(&a.out.join("summary.json"), &s)
}

