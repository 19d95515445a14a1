//! Rigid-frame removal and the PCA displacement subspace.

use nalgebra::DMatrix;
use ropecloth::geometry::{Mat3, Vec3};

/// Pose of the key body part for one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidFrame {
    pub translation: Vec3,
    pub rotation: Mat3,
}

impl RigidFrame {
    pub const IDENTITY: RigidFrame = RigidFrame { translation: Vec3::ZERO, rotation: Mat3::IDENTITY };

    pub fn apply(&self, x: Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn inverse_apply(&self, x: Vec3) -> Vec3 {
        self.rotation.transpose() * (x - self.translation)
    }
}

/// `R⁻¹(x − t) − x_rest` per point, flattened xyz.
pub fn nonrigid_displacement(positions: &[Vec3], rest: &[Vec3], frame: &RigidFrame) -> Vec<f64> {
    assert_eq!(positions.len(), rest.len(), "position and rest counts differ");
    positions
        .iter()
        .zip(rest)
        .flat_map(|(x, r)| (frame.inverse_apply(*x) - *r).to_array())
        .collect()
}

/// Inverse of [`nonrigid_displacement`].
pub fn place_displacement(d: &[f64], rest: &[Vec3], frame: &RigidFrame) -> Vec<Vec3> {
    assert_eq!(d.len(), 3 * rest.len());
    rest.iter()
        .zip(d.chunks_exact(3))
        .map(|(r, c)| frame.apply(*r + Vec3::new(c[0], c[1], c[2])))
        .collect()
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum PcaError {
    #[error("no samples")]
    Empty,
    #[error("samples have inconsistent dimensions")]
    Ragged,
    #[error("k = {k} exceeds min(samples, dimension) = {limit}")]
    TooManyComponents { k: usize, limit: usize },
    #[error("non-finite sample value")]
    NonFinite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Column `j` is `basis[j]`, each of length `dim`.
    pub basis: Vec<Vec<f64>>,
    /// Singular values of the centered data matrix for the kept columns.
    /// Padded columns carry 0.
    pub singular_values: Vec<f64>,
    /// Number of trailing columns that are not singular vectors but an
    /// orthonormal completion, because `k` exceeded the numerical rank.
    pub padded: usize,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.basis.len()
    }

    /// `basisᵀ(d − mean)`.
    pub fn project(&self, d: &[f64]) -> Vec<f64> {
        self.basis
            .iter()
            .map(|b| b.iter().zip(d).zip(&self.mean).map(|((b, d), m)| b * (d - m)).sum())
            .collect()
    }

    /// `mean + basis·c`.
    pub fn reconstruct(&self, c: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        self.add_combination(c, &mut out);
        out
    }

    /// `out += basis·c`.
    pub fn add_combination(&self, c: &[f64], out: &mut [f64]) {
        for (b, &cj) in self.basis.iter().zip(c) {
            if cj != 0.0 {
                for (o, bi) in out.iter_mut().zip(b) {
                    *o += cj * bi;
                }
            }
        }
    }

    /// `basisᵀ·g`, the pull-back of a gradient in displacement space.
    pub fn pull_back(&self, g: &[f64]) -> Vec<f64> {
        self.basis.iter().map(|b| b.iter().zip(g).map(|(b, g)| b * g).sum()).collect()
    }

    /// Largest `|bᵢ·bⱼ − δᵢⱼ|`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.basis.iter().enumerate() {
            for (j, b) in self.basis.iter().enumerate().skip(i) {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }
}

/// Top-`k` principal directions of the samples through a thin SVD of the
/// centered data matrix. Each column's largest-magnitude entry is made
/// positive (first such entry on ties).
pub fn fit_pca(samples: &[Vec<f64>], k: usize) -> Result<PcaModel, PcaError> {
    let n = samples.len();
    let dim = samples.first().ok_or(PcaError::Empty)?.len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(PcaError::Ragged);
    }
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PcaError::NonFinite);
    }
    let limit = n.min(dim);
    if k > limit {
        return Err(PcaError::TooManyComponents { k, limit });
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(dim, n, |i, j| samples[j][i] - mean[i]);
    let svd = centered.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));

    let s_max = order.first().map_or(0.0, |&i| s[i]);
    let tol = s_max * dim.max(n) as f64 * f64::EPSILON;
    let rank = order.iter().take_while(|&&i| s[i] > tol && s[i] > 0.0).count();

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut singular_values = Vec::with_capacity(k);
    for &i in order.iter().take(k.min(rank)) {
        basis.push(u.column(i).iter().copied().collect());
        singular_values.push(s[i]);
    }
    let padded = k - basis.len();
    let mut e = 0;
    while basis.len() < k {
        let mut v = vec![0.0; dim];
        v[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = b.iter().zip(&v).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
            singular_values.push(0.0);
        }
    }
    for b in &mut basis {
        let mut big = 0;
        for (i, v) in b.iter().enumerate() {
            if v.abs() > b[big].abs() {
                big = i;
            }
        }
        if b[big] < 0.0 {
            b.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(PcaModel { mean, basis, singular_values, padded })
}

/// Undirected edge list of a triangle mesh, each edge once, sorted.
pub fn mesh_edges(triangles: &[[usize; 3]]) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = triangles
        .iter()
        .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// `Σ_edges ‖b_i − b_j‖²` for a flattened per-vertex field `b`: the
/// graph-Laplacian quadratic form, large for high spatial frequencies.
pub fn laplacian_energy(b: &[f64], edges: &[(usize, usize)]) -> f64 {
    edges
        .iter()
        .map(|&(i, j)| (0..3).map(|a| (b[3 * i + a] - b[3 * j + a]).powi(2)).sum::<f64>())
        .sum()
}
