//! Parameter store, initializers, and small layer building blocks.

use std::rc::Rc;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::derive_rng;
use crate::tensor::{Param, ParamSlot, Scalar, Tensor};

/// Weight initialization schemes. Every parameter draws from an RNG derived
/// from `(seed, param name)` so initialization is independent of creation
/// order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    UniformFanIn,
    /// Xavier/Glorot uniform on `[-sqrt(6/(fan_in+fan_out)), ...]`.
    Xavier,
    /// Random orthonormal columns (Gram-Schmidt on a Gaussian draw).
    Orthogonal,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    Zeros,
    Ones,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn init_array<F: Scalar>(
    init: Init,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<F> {
    match init {
        Init::UniformFanIn => {
            let a = 1.0 / (rows.max(1) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| F::of_f64(rng.gen_range(-a..a)))
        }
        Init::Xavier => {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| F::of_f64(rng.gen_range(-a..a)))
        }
        Init::Orthogonal => orthogonal(rows, cols, rng),
        Init::Normal(std) => {
            Array2::from_shape_fn((rows, cols), |_| F::of_f64(gaussian(rng) * std))
        }
        Init::Zeros => Array2::zeros((rows, cols)),
        Init::Ones => Array2::from_elem((rows, cols), F::one()),
    }
}

/// Orthonormalize a Gaussian draw with modified Gram-Schmidt over the
/// shorter dimension.
fn orthogonal<F: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<F> {
    let (n, m) = (rows.max(cols), rows.min(cols));
    let mut a = Array2::<f64>::from_shape_fn((n, m), |_| gaussian(rng));
    for j in 0..m {
        for k in 0..j {
            let proj: f64 = (0..n).map(|i| a[(i, j)] * a[(i, k)]).sum();
            for i in 0..n {
                a[(i, j)] -= proj * a[(i, k)];
            }
        }
        let norm: f64 = (0..n).map(|i| a[(i, j)] * a[(i, j)]).sum::<f64>().sqrt();
        let norm = if norm < 1e-12 { 1.0 } else { norm };
        for i in 0..n {
            a[(i, j)] /= norm;
        }
    }
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let v = if rows >= cols { a[(r, c)] } else { a[(c, r)] };
            out[(r, c)] = F::of_f64(v);
        }
    }
    out
}

/// Ordered registry of every trainable parameter of a model.
pub struct ParamStore<F: Scalar> {
    seed: u64,
    params: IndexMap<String, Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: IndexMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Create and register a parameter. The init RNG is derived from the
    /// store seed and the parameter name.
    pub fn create(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Param<F> {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter name {name}"
        );
        let mut rng = derive_rng(self.seed, &format!("init/{name}"));
        let value = init_array(init, rows, cols, &mut rng);
        let p = ParamSlot::new(name, value);
        self.params.insert(name.to_string(), Rc::clone(&p));
        p
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.params.get(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&self) {
        for p in self.params.values() {
            p.zero_grad();
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params
            .values()
            .map(|p| {
                let (r, c) = p.shape();
                r * c
            })
            .sum()
    }
}

/// Dense layer `x W + b`.
pub struct Linear<F: Scalar> {
    pub w: Param<F>,
    pub b: Option<Param<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        bias: bool,
    ) -> Self {
        let w = store.create(&format!("{name}.w"), d_in, d_out, init);
        let b = bias.then(|| store.create(&format!("{name}.b"), 1, d_out, Init::Zeros));
        Linear { w, b }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let y = x.matmul(&self.w.leaf());
        match &self.b {
            Some(b) => y.add_bias(&b.leaf()),
            None => y,
        }
    }
}

/// Layer normalization over the feature axis with learned affine.
pub struct LayerNorm<F: Scalar> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub eps: F,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.create(&format!("{name}.gamma"), 1, d, Init::Ones),
            beta: store.create(&format!("{name}.beta"), 1, d, Init::Zeros),
            eps: F::of_f64(1e-5),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        x.layer_norm(&self.gamma.leaf(), &self.beta.leaf(), self.eps)
    }
}

/// Inverted dropout. `None` RNG (eval mode) is the identity.
pub fn dropout<F: Scalar>(x: &Tensor<F>, p: f64, rng: Option<&mut ChaCha8Rng>) -> Tensor<F> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let mask = Array2::from_shape_fn((x.nrows(), x.ncols()), |_| {
                if rng.gen_range(0.0..1.0) < keep {
                    F::of_f64(1.0 / keep)
                } else {
                    F::zero()
                }
            });
            x.mul(&Tensor::constant(mask))
        }
        _ => x.clone(),
    }
}
