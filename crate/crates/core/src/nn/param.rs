//! Named trainable tensors.

use ndarray::ArrayD;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A named trainable tensor with an optional accumulated gradient.
/// Layers leave `grad` as `None` until a backward pass touches them; the
/// optimizer skips grad-less parameters entirely.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: Option<ArrayD<f32>>,
}

/// Initialization recipe for a parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum ParamInit {
    Zeros,
    Ones,
    Constant(f32),
    /// Normal(0, std).
    Normal(f32),
    /// Uniform(-bound, bound).
    Uniform(f32),
}

impl Param {
    /// Create a parameter. Random draws are seeded from `seed` mixed with a
    /// hash of the name, so initialization is independent of creation order.
    pub fn new(name: impl Into<String>, shape: &[usize], init: ParamInit, seed: u64) -> Self {
        let name = name.into();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            ParamInit::Zeros => vec![0.0; n],
            ParamInit::Ones => vec![1.0; n],
            ParamInit::Constant(c) => vec![c; n],
            ParamInit::Normal(std) => (0..n).map(|_| std * normal_draw(&mut rng)).collect(),
            ParamInit::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b)).collect(),
        };
        Param {
            name,
            value: ArrayD::from_shape_vec(shape.to_vec(), data).unwrap(),
            grad: None,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: ArrayD<f32>) {
        match &mut self.grad {
            Some(acc) => *acc += &g,
            None => self.grad = Some(g),
        }
    }
}

/// 64-bit FNV-1a, used to derive per-parameter seeds and to hash text tokens.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Box-Muller standard normal draw.
fn normal_draw(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}
