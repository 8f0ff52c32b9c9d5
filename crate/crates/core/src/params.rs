//! Named parameter storage and deterministic initialization.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    Duplicate(String),
    #[error("unknown parameter {0:?}")]
    Unknown(String),
    #[error("parameter {name:?} has shape {got:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("parameter {0:?} holds a non-finite value")]
    NonFinite(String),
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId, ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), ParamError> {
        let id = self.id(name).ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        let current = self.get(id);
        if current.shape() != value.shape() {
            return Err(ParamError::Shape {
                name: name.to_string(),
                expected: current.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(ParamError::NonFinite(name.to_string()));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.leaf_shared(Arc::clone(v), requires_grad)).collect() }
    }
}

/// Tape variables for each parameter of a store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Seeds a generator from a parameter name so each tensor's initial values
/// do not depend on which other parameters exist.
pub fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a; stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h ^ seed.rotate_left(17))
}

/// Glorot-uniform `[fan_in, fan_out]` matrix.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

const PHI_MODES: usize = 3;
const THETA_MODES: usize = 2;

/// Spin filters `[D, Φ, Θ, M]` sampled from a random band-limited function
/// of `(φ, θ)`. Grids of different resolution sample the same function, so
/// refining the grid refines the same model.
pub fn smooth_filters(rng: &mut impl Rng, d: usize, phi: usize, theta: usize, m: usize) -> Tensor {
    let n_theta = 2 * THETA_MODES + 1;
    let n_coef = PHI_MODES * n_theta;
    let scale = 1.0 / ((n_coef * m) as f64).sqrt();
    let coef: Vec<f64> = (0..d * m * n_coef).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
    let phi_step = PI / (phi - 1) as f64;
    let theta_step = 2.0 * PI / theta as f64;
    let mut data = Vec::with_capacity(d * phi * theta * m);
    for k in 0..d {
        for i in 0..phi {
            let pf: Vec<f64> = (0..PHI_MODES).map(|p| (p as f64 * i as f64 * phi_step).cos()).collect();
            for l in 0..theta {
                let t = l as f64 * theta_step;
                let mut tf = Vec::with_capacity(n_theta);
                tf.push(1.0);
                for q in 1..=THETA_MODES {
                    tf.push((q as f64 * t).cos());
                    tf.push((q as f64 * t).sin());
                }
                for mi in 0..m {
                    let c = &coef[(k * m + mi) * n_coef..(k * m + mi + 1) * n_coef];
                    let mut v = 0.0;
                    for (p, pv) in pf.iter().enumerate() {
                        for (q, tv) in tf.iter().enumerate() {
                            v += c[p * n_theta + q] * pv * tv;
                        }
                    }
                    data.push(v);
                }
            }
        }
    }
    Tensor::from_parts(vec![d, phi, theta, m], data)
}
