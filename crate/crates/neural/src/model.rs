//! The full predictor (skinning subspace and net, optional shape residual
//! subspace and net) and its file format, specified in `docs/formats.md`.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ropecloth::collision::CollisionBody;
use ropecloth::dataset::{root_frame, DatasetMeta};
use ropecloth::geometry::Vec3;
use serde::{Deserialize, Serialize};

use crate::mlp::{Activation, Mlp2};
use crate::pca::{nonrigid_displacement, place_displacement, PcaModel, RigidFrame};
use crate::train::TrainConfig;
use crate::NeuralError;

pub const MODEL_MAGIC: &[u8; 4] = b"RCNM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub rest_vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    /// Rest bone positions, flattened chain by chain.
    pub rest_bones: Vec<Vec3>,
    pub chain_layout: Vec<usize>,
    pub bodies: Vec<CollisionBody>,
    pub collision_epsilon: f64,
    /// Frame spacing of the training data; bodies are evaluated at
    /// `frame · frame_dt` when inferring from a frame CSV.
    pub frame_dt: f64,
    /// Per-feature standardization of the network input, fitted on the
    /// training frames when enabled. Shared by both nets.
    #[serde(default)]
    pub input_normalization: Option<InputNormalization>,
    #[serde(default)]
    pub skinning_config: Option<TrainConfig>,
    #[serde(default)]
    pub shape_config: Option<TrainConfig>,
}

impl ModelMeta {
    pub fn from_dataset(meta: &DatasetMeta) -> Self {
        Self {
            rest_vertices: meta.rest_vertices.clone(),
            triangles: meta.triangles.clone(),
            rest_bones: meta.rest_bones.clone(),
            chain_layout: meta.chain_layout(),
            bodies: meta.bodies.clone(),
            collision_epsilon: meta.setup.collision_epsilon,
            frame_dt: meta.setup.frame_dt,
            input_normalization: None,
            skinning_config: None,
            shape_config: None,
        }
    }

    pub fn root_bones(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.chain_layout.len());
        let mut base = 0;
        for n in &self.chain_layout {
            out.push(base);
            base += n;
        }
        out
    }

    pub fn n_vertices(&self) -> usize {
        self.rest_vertices.len()
    }

    pub fn n_bones(&self) -> usize {
        self.rest_bones.len()
    }

    /// Rigid frame recovered from the chain roots of a bone configuration.
    pub fn frame_of(&self, bones: &[Vec3]) -> RigidFrame {
        let (translation, rotation) = root_frame(&self.rest_bones, &self.root_bones(), bones);
        RigidFrame { translation, rotation }
    }

    /// Network input: nonrigid displacement of every bone. Roots are
    /// transported rigidly, so their entries are zero up to the frame fit.
    pub fn features(&self, bones: &[Vec3], frame: &RigidFrame) -> Vec<f64> {
        let mut x = nonrigid_displacement(bones, &self.rest_bones, frame);
        if let Some(n) = &self.input_normalization {
            n.apply(&mut x);
        }
        x
    }

    /// Union signed distance and gradient over all bodies at time `t`.
    pub fn phi_grad(&self, x: Vec3, t: f64) -> (f64, Vec3) {
        self.bodies
            .iter()
            .map(|b| b.phi_grad_at(x, t))
            .fold((f64::INFINITY, Vec3::Y), |a, b| if b.0 < a.0 { b } else { a })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputNormalization {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl InputNormalization {
    /// Features with (near) zero spread, such as rigidly carried roots, keep
    /// unit scale.
    pub fn fit(samples: &[Vec<f64>]) -> Self {
        let n = samples.len().max(1) as f64;
        let dim = samples.first().map_or(0, Vec::len);
        let mean: Vec<f64> = (0..dim).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
        let inv_std = (0..dim)
            .map(|j| {
                let var = samples.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var.sqrt() > 1e-9 {
                    1.0 / var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, inv_std }
    }

    pub fn apply(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.inv_std) {
            *v = (*v - m) * s;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClothModel {
    pub meta: ModelMeta,
    pub skin_pca: PcaModel,
    pub skin_net: Option<Mlp2>,
    pub shape_pca: Option<PcaModel>,
    pub shape_net: Option<Mlp2>,
}

impl ClothModel {
    /// Nonrigid vertex displacement from the skinning stage alone.
    pub fn skinned_displacement(&self, features: &[f64]) -> Vec<f64> {
        match &self.skin_net {
            Some(net) => self.skin_pca.reconstruct(&net.forward(features)),
            None => self.skin_pca.mean.clone(),
        }
    }

    /// Full nonrigid vertex displacement (skinning plus shape residual).
    pub fn displacement(&self, features: &[f64]) -> Vec<f64> {
        let mut d = self.skinned_displacement(features);
        if let Some(pca) = &self.shape_pca {
            match &self.shape_net {
                Some(net) => {
                    let c = net.forward(features);
                    d.iter_mut().zip(&pca.mean).for_each(|(a, m)| *a += m);
                    pca.add_combination(&c, &mut d);
                }
                None => d.iter_mut().zip(&pca.mean).for_each(|(a, m)| *a += m),
            }
        }
        d
    }

    /// World-space mesh for one bone configuration.
    pub fn infer_mesh(&self, bones: &[Vec3]) -> Result<Vec<Vec3>, NeuralError> {
        if bones.len() != self.meta.n_bones() {
            return Err(NeuralError::Dimension(format!("model expects {} bones, got {}", self.meta.n_bones(), bones.len())));
        }
        let frame = self.meta.frame_of(bones);
        Ok(self.infer_with_frame(bones, &frame))
    }

    pub fn infer_with_frame(&self, bones: &[Vec3], frame: &RigidFrame) -> Vec<Vec3> {
        let d = self.displacement(&self.meta.features(bones, frame));
        place_displacement(&d, &self.meta.rest_vertices, frame)
    }

    pub fn check_dimensions(&self) -> Result<(), NeuralError> {
        let dim = 3 * self.meta.n_vertices();
        let n_in = 3 * self.meta.n_bones();
        let bad = |m: String| Err(NeuralError::Dimension(m));
        if let Some(n) = &self.meta.input_normalization {
            if n.mean.len() != n_in || n.inv_std.len() != n_in {
                return bad("input normalization does not match the bone count".into());
            }
        }
        if self.meta.chain_layout.iter().sum::<usize>() != self.meta.n_bones() {
            return bad("chain layout does not cover the bones".into());
        }
        if self.skin_pca.dim() != dim {
            return bad(format!("skinning subspace has dimension {}, mesh needs {dim}", self.skin_pca.dim()));
        }
        if let Some(p) = &self.shape_pca {
            if p.dim() != dim {
                return bad(format!("shape subspace has dimension {}, mesh needs {dim}", p.dim()));
            }
        }
        for (name, net, pca) in [("skinning", &self.skin_net, Some(&self.skin_pca)), ("shape", &self.shape_net, self.shape_pca.as_ref())] {
            if let Some(net) = net {
                let k = pca.map_or(0, PcaModel::k);
                if net.n_in != n_in || net.n_out != k {
                    return bad(format!("{name} net is {}→{}, expected {n_in}→{k}", net.n_in, net.n_out));
                }
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), NeuralError> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| NeuralError::Format(e.to_string()))?;
        w.write_all(MODEL_MAGIC)?;
        w.write_u32::<LittleEndian>(MODEL_VERSION)?;
        w.write_u64::<LittleEndian>(meta.len() as u64)?;
        w.write_all(&meta)?;
        let flags = self.skin_net.is_some() as u8 | (self.shape_pca.is_some() as u8) << 1 | (self.shape_net.is_some() as u8) << 2;
        w.write_u8(flags)?;
        write_pca(&mut w, &self.skin_pca)?;
        if let Some(n) = &self.skin_net {
            write_mlp(&mut w, n)?;
        }
        if let Some(p) = &self.shape_pca {
            write_pca(&mut w, p)?;
        }
        if let Some(n) = &self.shape_net {
            write_mlp(&mut w, n)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, NeuralError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(NeuralError::Format("not a model file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != MODEL_VERSION {
            return Err(NeuralError::Format(format!("unsupported model version {version}")));
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut meta = vec![0u8; len];
        r.read_exact(&mut meta)?;
        let meta: ModelMeta = serde_json::from_slice(&meta).map_err(|e| NeuralError::Format(format!("model header: {e}")))?;
        let flags = r.read_u8()?;
        if flags > 7 || (flags & 4 != 0 && flags & 2 == 0) {
            return Err(NeuralError::Format(format!("bad section flags {flags}")));
        }
        let skin_pca = read_pca(&mut r)?;
        let skin_net = if flags & 1 != 0 { Some(read_mlp(&mut r)?) } else { None };
        let shape_pca = if flags & 2 != 0 { Some(read_pca(&mut r)?) } else { None };
        let shape_net = if flags & 4 != 0 { Some(read_mlp(&mut r)?) } else { None };
        let mut rest = Vec::new();
        if r.read_to_end(&mut rest)? != 0 {
            return Err(NeuralError::Format("trailing bytes after the last section".into()));
        }
        let model = Self { meta, skin_pca, skin_net, shape_pca, shape_net };
        model.check_dimensions()?;
        Ok(model)
    }
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    xs.iter().try_for_each(|x| w.write_f64::<LittleEndian>(*x))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut v = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

/// Guards allocations against corrupt size fields.
fn checked_len(n: u64) -> Result<usize, NeuralError> {
    if n > (1 << 28) {
        return Err(NeuralError::Format(format!("implausible array size {n}")));
    }
    Ok(n as usize)
}

fn write_pca<W: Write>(w: &mut W, p: &PcaModel) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(p.dim() as u64)?;
    w.write_u64::<LittleEndian>(p.k() as u64)?;
    w.write_u64::<LittleEndian>(p.padded as u64)?;
    write_f64s(w, &p.mean)?;
    for b in &p.basis {
        write_f64s(w, b)?;
    }
    write_f64s(w, &p.singular_values)
}

fn read_pca<R: Read>(r: &mut R) -> Result<PcaModel, NeuralError> {
    let dim = checked_len(r.read_u64::<LittleEndian>()?)?;
    let k = checked_len(r.read_u64::<LittleEndian>()?)?;
    let padded = checked_len(r.read_u64::<LittleEndian>()?)?;
    if k > dim || padded > k || dim.checked_mul(k).is_none_or(|n| n > 1 << 28) {
        return Err(NeuralError::Format(format!("bad subspace dimensions {dim}×{k}")));
    }
    let mean = read_f64s(r, dim)?;
    let basis = (0..k).map(|_| read_f64s(r, dim)).collect::<Result<_, _>>()?;
    let singular_values = read_f64s(r, k)?;
    Ok(PcaModel { mean, basis, singular_values, padded })
}

fn write_mlp<W: Write>(w: &mut W, n: &Mlp2) -> std::io::Result<()> {
    w.write_u8(n.activation.tag())?;
    w.write_u64::<LittleEndian>(n.n_in as u64)?;
    w.write_u64::<LittleEndian>(n.width as u64)?;
    w.write_u64::<LittleEndian>(n.n_out as u64)?;
    write_f64s(w, &n.params)
}

fn read_mlp<R: Read>(r: &mut R) -> Result<Mlp2, NeuralError> {
    let tag = r.read_u8()?;
    let activation = Activation::from_tag(tag).ok_or_else(|| NeuralError::Format(format!("unknown activation {tag}")))?;
    let n_in = checked_len(r.read_u64::<LittleEndian>()?)?;
    let width = checked_len(r.read_u64::<LittleEndian>()?)?;
    let n_out = checked_len(r.read_u64::<LittleEndian>()?)?;
    let count = checked_len(Mlp2::param_count(n_in, width, n_out) as u64)?;
    let params = read_f64s(r, count)?;
    Ok(Mlp2 { n_in, width, n_out, activation, params })
}
