//! Two-hidden-layer perceptron with hand-written backpropagation, plus Adam
//! and the cosine learning-rate schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// `y = W3·σ(W2·σ(W1·x + b1) + b2) + b3`.
///
/// All parameters live in one flat vector laid out as
/// `[W1, b1, W2, b2, W3, b3]`, weights row-major (`out × in`).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2 {
    pub n_in: usize,
    pub width: usize,
    pub n_out: usize,
    pub activation: Activation,
    pub params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    pub output: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

impl Mlp2 {
    pub fn param_count(n_in: usize, width: usize, n_out: usize) -> usize {
        width * n_in + width + width * width + width + n_out * width + n_out
    }

    fn layout(&self) -> Layout {
        let (i, w, o) = (self.n_in, self.width, self.n_out);
        let w1 = 0;
        let b1 = w1 + w * i;
        let w2 = b1 + w;
        let b2 = w2 + w * w;
        let w3 = b2 + w;
        let b3 = w3 + o * w;
        Layout { w1, b1, w2, b2, w3, b3, end: b3 + o }
    }

    pub fn zeros(n_in: usize, width: usize, n_out: usize, activation: Activation) -> Self {
        Self { n_in, width, n_out, activation, params: vec![0.0; Self::param_count(n_in, width, n_out)] }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn new(n_in: usize, width: usize, n_out: usize, activation: Activation, seed: u64) -> Self {
        let mut net = Self::zeros(n_in, width, n_out, activation);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = net.layout();
        for (range, fan_in) in [(l.w1..l.b1, n_in), (l.w2..l.b2, width), (l.w3..l.b3, width)] {
            let a = 1.0 / (fan_in.max(1) as f64).sqrt();
            for p in &mut net.params[range] {
                *p = rng.gen_range(-a..a);
            }
        }
        net
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = MlpCache::default();
        self.forward_cached(x, &mut cache);
        cache.output
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut MlpCache) {
        assert_eq!(x.len(), self.n_in, "input dimension");
        let l = self.layout();
        let p = &self.params;
        cache.input.clear();
        cache.input.extend_from_slice(x);
        dense(&p[l.w1..l.b1], &p[l.b1..l.w2], x, &mut cache.h1);
        cache.h1.iter_mut().for_each(|z| *z = self.activation.apply(*z));
        dense(&p[l.w2..l.b2], &p[l.b2..l.w3], &cache.h1, &mut cache.h2);
        cache.h2.iter_mut().for_each(|z| *z = self.activation.apply(*z));
        dense(&p[l.w3..l.b3], &p[l.b3..l.end], &cache.h2, &mut cache.output);
    }

    /// Adds `∂L/∂θ` to `grads` given `dy = ∂L/∂y` for the cached pass.
    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grads: &mut [f64]) {
        assert_eq!(dy.len(), self.n_out);
        assert_eq!(grads.len(), self.params.len());
        let l = self.layout();
        let p = &self.params;
        let w = self.width;

        let mut d2 = vec![0.0; w];
        for (o, &g) in dy.iter().enumerate() {
            grads[l.b3 + o] += g;
            let row = l.w3 + o * w;
            for j in 0..w {
                grads[row + j] += g * cache.h2[j];
                d2[j] += g * p[row + j];
            }
        }
        for (d, a) in d2.iter_mut().zip(&cache.h2) {
            *d *= self.activation.slope(*a);
        }

        let mut d1 = vec![0.0; w];
        for (o, &g) in d2.iter().enumerate() {
            grads[l.b2 + o] += g;
            let row = l.w2 + o * w;
            for j in 0..w {
                grads[row + j] += g * cache.h1[j];
                d1[j] += g * p[row + j];
            }
        }
        for (d, a) in d1.iter_mut().zip(&cache.h1) {
            *d *= self.activation.slope(*a);
        }

        for (o, &g) in d1.iter().enumerate() {
            grads[l.b1 + o] += g;
            let row = l.w1 + o * self.n_in;
            for (j, x) in cache.input.iter().enumerate() {
                grads[row + j] += g * x;
            }
        }
    }
}

fn dense(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(b.iter().enumerate().map(|(o, bo)| bo + w[o * x.len()..(o + 1) * x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()));
}

/// Compares backpropagated gradients of `L = Σ c_o·y_o + ½Σ y_o²` with
/// central differences of step `h` on every parameter. Returns the largest
/// relative error `|g − g_fd| / max(|g|, |g_fd|, 1e-6)`.
pub fn gradient_check(net: &Mlp2, x: &[f64], c: &[f64], h: f64) -> f64 {
    let loss = |n: &Mlp2| -> f64 { n.forward(x).iter().zip(c).map(|(y, c)| c * y + 0.5 * y * y).sum() };
    let mut cache = MlpCache::default();
    net.forward_cached(x, &mut cache);
    let dy: Vec<f64> = cache.output.iter().zip(c).map(|(y, c)| c + y).collect();
    let mut grads = vec![0.0; net.params.len()];
    net.backward(&cache, &dy, &mut grads);
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        let p0 = net.params[i];
        probe.params[i] = p0 + h;
        let up = loss(&probe);
        probe.params[i] = p0 - h;
        let down = loss(&probe);
        probe.params[i] = p0;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
    }
    worst
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.epsilon);
        }
    }
}

/// Learning rate after `step` of `total` steps, annealed from `lr0` to 0.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}
