//! Subspace fitting and the two training stages.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ropecloth::dataset::{Dataset, Split};
use ropecloth::geometry::Vec3;
use serde::{Deserialize, Serialize};

use crate::loss::{data_loss, pinn_vertex};
use crate::mlp::{cosine_lr, Activation, Adam, Mlp2, MlpCache};
use crate::model::{ClothModel, InputNormalization, ModelMeta};
use crate::pca::{fit_pca, nonrigid_displacement, place_displacement, PcaModel, RigidFrame};
use crate::NeuralError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Skinning,
    Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub data_weight: f64,
    pub pinn_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Collision offset for the penalty targets; `None` uses the dataset's.
    pub epsilon: Option<f64>,
    pub width: usize,
    pub activation: Activation,
    /// Standardize each input feature over the training frames (skinning
    /// stage; the shape stage reuses whatever the model carries).
    pub normalize_inputs: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_weight: 0.1,
            pinn_weight: 1000.0,
            learning_rate: 1e-4,
            epochs: 500,
            batch_size: 32,
            epsilon: None,
            width: 64,
            activation: Activation::Relu,
            normalize_inputs: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Skinning => Self::default(),
            Stage::Shape => Self { learning_rate: 1e-5, ..Self::default() },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.data_weight > 0.0 && self.data_weight.is_finite()) {
            return Err("data weight must be positive".into());
        }
        // Zero is allowed so the penalty can be ablated.
        if !(self.pinn_weight >= 0.0 && self.pinn_weight.is_finite()) {
            return Err("collision weight must be >= 0".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err("learning rate must be positive".into());
        }
        if self.batch_size == 0 || self.width == 0 {
            return Err("batch size and width must be positive".into());
        }
        if self.epsilon.is_some_and(|e| !(e >= 0.0 && e.is_finite())) {
            return Err("epsilon must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-vertex squared error over the epoch's training samples.
    pub data_loss: f64,
    pub pinn_loss: f64,
    pub val_loss: f64,
    pub interpenetrations: usize,
}

pub fn write_log_csv<W: Write>(w: W, log: &[EpochLog]) -> Result<(), NeuralError> {
    let mut out = csv::Writer::from_writer(w);
    for row in log {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ClothModel,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept (0 = initialization).
    pub best_epoch: usize,
}

/// Dataset frames in the form training consumes.
struct Frames {
    features: Vec<Vec<f64>>,
    frames: Vec<RigidFrame>,
    truth: Vec<Vec<Vec3>>,
    times: Vec<f64>,
}

impl Frames {
    fn new(meta: &ModelMeta, data: &Dataset) -> Self {
        let frames: Vec<RigidFrame> =
            data.frames.iter().map(|f| RigidFrame { translation: f.translation, rotation: f.rotation }).collect();
        Self {
            features: data.frames.iter().zip(&frames).map(|(f, r)| meta.features(&f.bones, r)).collect(),
            truth: data.frames.iter().map(|f| f.vertices.clone()).collect(),
            times: data.frames.iter().map(|f| f.time).collect(),
            frames,
        }
    }
}

fn check_dataset(meta: &ModelMeta, data: &Dataset) -> Result<(), NeuralError> {
    if data.meta.n_vertices != meta.n_vertices() || data.meta.n_bones != meta.n_bones() {
        return Err(NeuralError::Dimension(format!(
            "dataset has {} vertices and {} bones, model expects {} and {}",
            data.meta.n_vertices,
            data.meta.n_bones,
            meta.n_vertices(),
            meta.n_bones()
        )));
    }
    if data.indices(Split::Train).is_empty() {
        return Err(NeuralError::Dimension("dataset has no training frames".into()));
    }
    Ok(())
}

/// Skinning subspace from the training frames' nonrigid vertex
/// displacements. The returned model has no networks yet.
pub fn fit_skinning_pca(data: &Dataset, k: usize) -> Result<ClothModel, NeuralError> {
    let meta = ModelMeta::from_dataset(&data.meta);
    check_dataset(&meta, data)?;
    let samples: Vec<Vec<f64>> = data
        .indices(Split::Train)
        .into_iter()
        .map(|i| {
            let f = &data.frames[i];
            nonrigid_displacement(&f.vertices, &meta.rest_vertices, &RigidFrame { translation: f.translation, rotation: f.rotation })
        })
        .collect();
    let skin_pca = fit_pca(&samples, k)?;
    if skin_pca.padded > 0 {
        log::warn!("skinning subspace: k = {k} exceeds the data rank, {} columns padded", skin_pca.padded);
    }
    Ok(ClothModel { meta, skin_pca, skin_net: None, shape_pca: None, shape_net: None })
}

pub fn train_skinning(model: &ClothModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, NeuralError> {
    cfg.validate().map_err(NeuralError::Config)?;
    check_dataset(&model.meta, data)?;
    let mut out = model.clone();
    out.meta.input_normalization = None;
    if cfg.normalize_inputs {
        let raw = Frames::new(&out.meta, data);
        let train: Vec<Vec<f64>> = data.indices(Split::Train).into_iter().map(|i| raw.features[i].clone()).collect();
        out.meta.input_normalization = Some(InputNormalization::fit(&train));
    }
    let frames = Frames::new(&out.meta, data);
    let base = vec![vec![0.0; 3 * model.meta.n_vertices()]; data.frames.len()];
    let (net, log, best_epoch) = fit_network(&out.meta, &out.skin_pca, &base, &frames, data, cfg)?;
    out.skin_net = Some(net);
    out.shape_pca = None;
    out.shape_net = None;
    out.meta.skinning_config = Some(cfg.clone());
    out.meta.shape_config = None;
    Ok(TrainOutcome { model: out, log, best_epoch })
}

/// Runs the frozen skinning net over the dataset, fits a `k`-dimensional
/// subspace to the training residuals and trains the shape net on it.
pub fn train_shape(model: &ClothModel, data: &Dataset, k: usize, cfg: &TrainConfig) -> Result<TrainOutcome, NeuralError> {
    cfg.validate().map_err(NeuralError::Config)?;
    check_dataset(&model.meta, data)?;
    if model.skin_net.is_none() {
        return Err(NeuralError::Config("the shape stage needs a trained skinning net".into()));
    }
    let frames = Frames::new(&model.meta, data);
    let base: Vec<Vec<f64>> = frames.features.iter().map(|x| model.skinned_displacement(x)).collect();
    let residuals: Vec<Vec<f64>> = data
        .indices(Split::Train)
        .into_iter()
        .map(|i| {
            let gt = nonrigid_displacement(&frames.truth[i], &model.meta.rest_vertices, &frames.frames[i]);
            gt.iter().zip(&base[i]).map(|(g, b)| g - b).collect()
        })
        .collect();
    let shape_pca = fit_pca(&residuals, k)?;
    if shape_pca.padded > 0 {
        log::warn!("shape subspace: k = {k} exceeds the residual rank, {} columns padded", shape_pca.padded);
    }
    let (net, log, best_epoch) = fit_network(&model.meta, &shape_pca, &base, &frames, data, cfg)?;
    let mut out = model.clone();
    out.shape_pca = Some(shape_pca);
    out.shape_net = Some(net);
    out.meta.shape_config = Some(cfg.clone());
    Ok(TrainOutcome { model: out, log, best_epoch })
}

#[derive(Clone, Copy, Debug, Default)]
struct SampleLoss {
    data: f64,
    pinn: f64,
    penetrating: usize,
}

/// Per-frame training target in subspace coordinates. The basis is
/// orthonormal and the frame rigid, so `‖x − x_gt‖² = ‖c − c*‖² + r` with
/// `c*` the projection of the target and `r` its out-of-subspace residual.
struct Target {
    coeffs: Vec<f64>,
    residual: f64,
}

struct Objective<'a> {
    meta: &'a ModelMeta,
    pca: &'a PcaModel,
    base: &'a [Vec<f64>],
    frames: &'a Frames,
    targets: Vec<Target>,
    cfg: &'a TrainConfig,
    epsilon: f64,
}

impl<'a> Objective<'a> {
    fn new(meta: &'a ModelMeta, pca: &'a PcaModel, base: &'a [Vec<f64>], frames: &'a Frames, cfg: &'a TrainConfig) -> Self {
        let targets = frames
            .truth
            .iter()
            .zip(&frames.frames)
            .zip(base)
            .map(|((x, f), b)| {
                let mut d = nonrigid_displacement(x, &meta.rest_vertices, f);
                d.iter_mut().zip(b).for_each(|(d, b)| *d -= b);
                let coeffs = pca.project(&d);
                let back = pca.reconstruct(&coeffs);
                let residual = d.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum();
                Target { coeffs, residual }
            })
            .collect();
        Self { meta, pca, base, frames, targets, cfg, epsilon: cfg.epsilon.unwrap_or(meta.collision_epsilon) }
    }

    fn total(&self, l: &SampleLoss) -> f64 {
        self.cfg.data_weight * l.data + self.cfg.pinn_weight * l.pinn
    }

    /// Losses for frame `i` given the net output `c`; when `dc` is given,
    /// adds `scale·∂L/∂c` to it. The collision term is skipped when its
    /// weight is zero and `count` is false.
    fn sample(&self, i: usize, c: &[f64], dc: Option<(&mut [f64], f64)>, count: bool, scratch: &mut Vec<f64>) -> SampleLoss {
        let nv = self.meta.n_vertices() as f64;
        let target = &self.targets[i];
        let dist: f64 = c.iter().zip(&target.coeffs).map(|(a, b)| (a - b).powi(2)).sum();
        let mut out = SampleLoss { data: (dist + target.residual) / nv, pinn: 0.0, penetrating: 0 };
        let mut dc = dc;
        if let Some((g, scale)) = dc.as_mut() {
            for ((g, a), b) in g.iter_mut().zip(c).zip(&target.coeffs) {
                *g += *scale * self.cfg.data_weight * 2.0 * (a - b) / nv;
            }
        }
        if self.cfg.pinn_weight == 0.0 && !count {
            return out;
        }

        scratch.clear();
        scratch.extend(self.base[i].iter().zip(&self.pca.mean).map(|(b, m)| b + m));
        self.pca.add_combination(c, scratch);
        let frame = &self.frames.frames[i];
        let rt = frame.rotation.transpose();
        let truth = &self.frames.truth[i];
        let t = self.frames.times[i];
        for (v, rest) in self.meta.rest_vertices.iter().enumerate() {
            let x = frame.apply(*rest + Vec3::new(scratch[3 * v], scratch[3 * v + 1], scratch[3 * v + 2]));
            let Some(term) = pinn_vertex(x, truth[v], self.meta.phi_grad(x, t), self.epsilon) else {
                continue;
            };
            out.penetrating += 1;
            out.pinn += term.loss / nv;
            if let Some((g, scale)) = dc.as_mut() {
                let gd = (rt * term.grad) * (*scale * self.cfg.pinn_weight / nv);
                for (gj, b) in g.iter_mut().zip(&self.pca.basis) {
                    *gj += gd.x * b[3 * v] + gd.y * b[3 * v + 1] + gd.z * b[3 * v + 2];
                }
            }
        }
        out
    }

    fn evaluate(&self, net: &Mlp2, indices: &[usize], scratch: &mut Vec<f64>) -> (SampleLoss, f64) {
        let mut sum = SampleLoss::default();
        for &i in indices {
            let l = self.sample(i, &net.forward(&self.frames.features[i]), None, true, scratch);
            sum.data += l.data;
            sum.pinn += l.pinn;
            sum.penetrating += l.penetrating;
        }
        let n = indices.len().max(1) as f64;
        sum.data /= n;
        sum.pinn /= n;
        (sum, self.total(&sum))
    }
}

fn fit_network(
    meta: &ModelMeta,
    pca: &PcaModel,
    base: &[Vec<f64>],
    frames: &Frames,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Mlp2, Vec<EpochLog>, usize), NeuralError> {
    let obj = Objective::new(meta, pca, base, frames, cfg);
    let mut scratch = Vec::new();
    let train = data.indices(Split::Train);
    let mut val = data.indices(Split::Validation);
    if val.is_empty() {
        log::warn!("no validation frames; selecting on training loss");
        val = train.clone();
    }
    let mut net = Mlp2::new(3 * meta.n_bones(), cfg.width, pca.k(), cfg.activation, cfg.seed);
    let mut best = (obj.evaluate(&net, &val, &mut scratch).1, net.clone(), 0);
    let mut adam = Adam::new(net.params.len());
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut order = train.clone();
    let mut cache = MlpCache::default();
    let mut grads = vec![0.0; net.params.len()];
    let mut dc = vec![0.0; pca.k()];
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.copy_from_slice(&train);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64));
        let epoch_lr = cosine_lr(cfg.learning_rate, step, total_steps);
        let mut sum = SampleLoss::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                net.forward_cached(&frames.features[i], &mut cache);
                dc.iter_mut().for_each(|g| *g = 0.0);
                let l = obj.sample(i, &cache.output, Some((&mut dc, scale)), false, &mut scratch);
                if !(l.data.is_finite() && l.pinn.is_finite()) {
                    return Err(NeuralError::Diverged { epoch, batch: b, data_loss: l.data, pinn_loss: l.pinn });
                }
                sum.data += l.data;
                sum.pinn += l.pinn;
                net.backward(&cache, &dc, &mut grads);
            }
            adam.step(&mut net.params, &grads, cosine_lr(cfg.learning_rate, step, total_steps));
            step += 1;
            if !net.is_finite() {
                return Err(NeuralError::Diverged { epoch, batch: b, data_loss: f64::NAN, pinn_loss: f64::NAN });
            }
        }
        let (vl, val_loss) = obj.evaluate(&net, &val, &mut scratch);
        if !val_loss.is_finite() {
            return Err(NeuralError::Diverged { epoch, batch: batches_per_epoch, data_loss: vl.data, pinn_loss: vl.pinn });
        }
        let n = train.len() as f64;
        log.push(EpochLog {
            epoch,
            lr: epoch_lr,
            data_loss: sum.data / n,
            pinn_loss: sum.pinn / n,
            val_loss,
            interpenetrations: vl.penetrating,
        });
        log::debug!("epoch {epoch}: train data {:.3e} pinn {:.3e} val {:.3e}", sum.data / n, sum.pinn / n, val_loss);
        if val_loss < best.0 {
            best = (val_loss, net.clone(), epoch);
        }
    }
    Ok((best.1, log, best.2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SplitMetrics {
    pub frames: usize,
    /// Root mean square vertex error (m).
    pub rmse: f64,
    /// Vertices with `φ < 0`, summed over frames.
    pub interpenetrations: usize,
    /// Vertices with `φ < threshold`, summed over frames.
    pub deep_interpenetrations: usize,
    pub vertices: usize,
    pub min_phi: f64,
}

/// Full-model predictions on one split of the dataset, with the rigid frame
/// recovered from the bones as at inference time.
pub fn evaluate(model: &ClothModel, data: &Dataset, split: Split, deep_threshold: f64) -> SplitMetrics {
    let idx = data.indices(split);
    let mut out = SplitMetrics {
        frames: idx.len(),
        rmse: 0.0,
        interpenetrations: 0,
        deep_interpenetrations: 0,
        vertices: 0,
        min_phi: f64::INFINITY,
    };
    let mut sq = 0.0;
    for &i in &idx {
        let f = &data.frames[i];
        let x = model.infer_with_frame(&f.bones, &model.meta.frame_of(&f.bones));
        sq += data_loss(&x, &f.vertices).0;
        let phis = phi_values(&model.meta, &x, f.time);
        out.tally(&phis, deep_threshold);
    }
    out.rmse = (sq / out.vertices.max(1) as f64).sqrt();
    out
}

impl SplitMetrics {
    fn tally(&mut self, phis: &[f64], deep_threshold: f64) {
        self.vertices += phis.len();
        self.interpenetrations += phis.iter().filter(|p| **p < 0.0).count();
        self.deep_interpenetrations += phis.iter().filter(|p| **p < deep_threshold).count();
        self.min_phi = phis.iter().copied().fold(self.min_phi, f64::min);
    }
}

pub fn phi_values(meta: &ModelMeta, x: &[Vec3], t: f64) -> Vec<f64> {
    x.iter().map(|p| meta.phi_grad(*p, t).0).collect()
}

/// Mean squared error of always predicting the rest pose plus the skinning
/// mean, rigidly placed: the baseline a trained model must beat.
pub fn mean_baseline_rmse(model: &ClothModel, data: &Dataset, split: Split) -> f64 {
    let mut sq = 0.0;
    let mut n = 0;
    for i in data.indices(split) {
        let f = &data.frames[i];
        let frame = model.meta.frame_of(&f.bones);
        let x = place_displacement(&model.skin_pca.mean, &model.meta.rest_vertices, &frame);
        sq += data_loss(&x, &f.vertices).0;
        n += x.len();
    }
    (sq / n.max(1) as f64).sqrt()
}
