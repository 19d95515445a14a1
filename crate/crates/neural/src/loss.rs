//! Per-vertex data and collision penalty terms.

use ropecloth::geometry::Vec3;

#[derive(Clone, Debug, PartialEq)]
pub struct PinnTerm {
    pub loss: f64,
    /// `∂loss/∂x` per vertex.
    pub grad: Vec<Vec3>,
    pub penetrating: usize,
    /// Penetrating vertices that coincide with their ground truth and were
    /// pushed along `∇φ` instead.
    pub gradient_fallbacks: usize,
}

/// Collision penalty on predicted vertices.
///
/// A vertex with `φ < 0` gets the constant target `x + (|φ| + ε)·r̂`, `r̂`
/// pointing from the prediction to its ground truth, and contributes
/// `‖x − target‖²`. The target is not differentiated, so the gradient is
/// `2(x − target)`. When the prediction sits on its ground truth `r̂` is
/// undefined and `∇φ` is used.
pub fn pinn_collision_loss(pred: &[Vec3], truth: &[Vec3], phi_grad: impl Fn(Vec3) -> (f64, Vec3), epsilon: f64) -> PinnTerm {
    assert_eq!(pred.len(), truth.len());
    let mut out = PinnTerm { loss: 0.0, grad: vec![Vec3::ZERO; pred.len()], penetrating: 0, gradient_fallbacks: 0 };
    for (k, (&x, &gt)) in pred.iter().zip(truth).enumerate() {
        if let Some(v) = pinn_vertex(x, gt, phi_grad(x), epsilon) {
            out.penetrating += 1;
            out.gradient_fallbacks += v.fallback as usize;
            out.loss += v.loss;
            out.grad[k] = v.grad;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinnVertex {
    pub loss: f64,
    pub grad: Vec3,
    pub fallback: bool,
}

/// One vertex of [`pinn_collision_loss`]; `None` when it is not inside.
pub fn pinn_vertex(x: Vec3, truth: Vec3, (phi, normal): (f64, Vec3), epsilon: f64) -> Option<PinnVertex> {
    if phi >= 0.0 {
        return None;
    }
    let (dir, fallback) = match (truth - x).dir_len(1e-12) {
        Some((d, _)) => (d, false),
        None => (normal, true),
    };
    let r = -(dir * (phi.abs() + epsilon));
    Some(PinnVertex { loss: r.norm_squared(), grad: r * 2.0, fallback })
}

/// `Σ ‖x − x_gt‖²` and its gradient.
pub fn data_loss(pred: &[Vec3], truth: &[Vec3]) -> (f64, Vec<Vec3>) {
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(truth)
        .map(|(x, gt)| {
            let r = *x - *gt;
            loss += r.norm_squared();
            r * 2.0
        })
        .collect();
    (loss, grad)
}
