//! Model hyper-parameters, the named parameter store and batch packing.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instances::VrpInstance;
use crate::numkernel::{xavier_init_with, Float, KernelError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Architecture knobs. Parameter shapes depend only on `d_model`,
/// `layers` and `heads`, so one model runs on any problem size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Fraction of customers each customer aggregates from.
    pub neighbor_rate: f64,
    /// Bound applied to decoder logits through `clip * tanh(.)`.
    pub clip: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d_model: 128, layers: 4, heads: 8, neighbor_rate: 0.5, clip: 10.0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 {
            return Err(ModelError::Config("d_model must be positive".into()));
        }
        if self.layers == 0 {
            return Err(ModelError::Config("at least one encoder layer is required".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.neighbor_rate > 0.0 && self.neighbor_rate <= 1.0) {
            return Err(ModelError::Config(format!("neighbor rate {} outside (0, 1]", self.neighbor_rate)));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(ModelError::Config(format!("clip {} must be positive", self.clip)));
        }
        Ok(())
    }

    /// Neighbour count for `n` customers: `ceil(rate * n)` kept in `1..=n`.
    pub fn neighbors_for(&self, n: usize) -> usize {
        ((self.neighbor_rate * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
    }

    /// Every trainable tensor with its shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("enc.depot.w".into(), vec![2, d]),
            ("enc.depot.b".into(), vec![d]),
            ("enc.node.w".into(), vec![3, d]),
            ("enc.node.b".into(), vec![d]),
            ("enc.edge.w".into(), vec![1, d]),
            ("enc.edge.b".into(), vec![d]),
        ];
        for bn in self.norm_layers() {
            out.push((format!("{bn}.gamma"), vec![d]));
            out.push((format!("{bn}.beta"), vec![d]));
        }
        for l in 0..self.layers {
            for w in ["wq", "wk", "wv"] {
                out.push((format!("enc.layer{l}.{w}"), vec![d, d]));
            }
        }
        out.extend([
            ("enc.readout.w1".into(), vec![2 * d, d]),
            ("enc.readout.b1".into(), vec![d]),
            ("enc.readout.w2".into(), vec![d, d]),
            ("enc.readout.b2".into(), vec![d]),
            ("dec.w_ctx".into(), vec![2 * d + 1, d]),
        ]);
        for w in ["wq", "wk", "wv", "wm", "wq_single", "wk_single"] {
            out.push((format!("dec.{w}"), vec![d, d]));
        }
        out
    }

    /// Name prefixes of the batch-norm layers.
    pub fn norm_layers(&self) -> Vec<String> {
        let mut names = vec!["enc.node_bn".to_string(), "enc.edge_bn".to_string()];
        names.extend((0..self.layers).map(|l| format!("enc.layer{l}.bn")));
        names
    }
}

/// Running moments of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch moments produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchMoments<T> {
    pub layer: String,
    pub mean: Vec<T>,
    /// Biased variance over `count` rows.
    pub var: Vec<T>,
    pub count: usize,
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Named parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: IndexMap<String, Tensor<T>>,
    pub running: IndexMap<String, RunningStats<T>>,
}

impl<T: Float> ModelParams<T> {
    /// Xavier-uniform weight matrices, zero biases, unit scales and zero
    /// shifts for batch norm, and running statistics `(0, 1)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with(".gamma") {
                Tensor::full(&shape, T::one())
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                xavier_init_with(&shape, &mut rng)
            };
            tensors.insert(name, t);
        }
        Ok(ModelParams { config: config.clone(), tensors, running: Self::fresh_running(config) })
    }

    fn fresh_running(config: &ModelConfig) -> IndexMap<String, RunningStats<T>> {
        let d = config.d_model;
        config
            .norm_layers()
            .into_iter()
            .map(|n| (n, RunningStats { mean: vec![T::zero(); d], var: vec![T::one(); d] }))
            .collect()
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.tensors[name]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            running: self
                .running
                .iter()
                .map(|(k, r)| (k.clone(), RunningStats { mean: conv(&r.mean), var: conv(&r.var) }))
                .collect(),
        }
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Exponential moving average of batch moments; the variance is stored
    /// unbiased.
    pub fn update_running(&mut self, moments: &[BatchMoments<T>], momentum: f64) {
        let m = T::of(momentum);
        for bm in moments {
            let stats = self.running.get_mut(&bm.layer).expect("moments for a known layer");
            let corr = if bm.count > 1 { T::of(bm.count as f64 / (bm.count - 1) as f64) } else { T::one() };
            for (r, &b) in stats.mean.iter_mut().zip(&bm.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in stats.var.iter_mut().zip(&bm.var) {
                *r = (T::one() - m) * *r + m * b * corr;
            }
        }
    }
}

/// Tape handles for a bound parameter set.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Leaf gradients keyed by parameter name; untouched parameters get
    /// zeros.
    pub fn grads<T: Float>(&self, tape: &Tape<T>) -> IndexMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)))))
            .collect()
    }
}

/// Whether batch norm uses batch statistics or stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Equal-size instances packed into dense model inputs.
#[derive(Clone, Debug)]
pub struct ProblemBatch<'a, T> {
    pub instances: Vec<&'a VrpInstance>,
    /// Customers per instance.
    pub n: usize,
    /// `[B, 2]` depot coordinates.
    pub depot: Tensor<T>,
    /// `[B, n, 3]` customer `(x, y, demand / capacity)`.
    pub customers: Tensor<T>,
    /// `[B, n+1, n+1]` pairwise distances.
    pub dist: Tensor<T>,
}

impl<'a, T: Float> ProblemBatch<'a, T> {
    pub fn new(instances: &[&'a VrpInstance]) -> Result<Self, ModelError> {
        let first = instances.first().ok_or_else(|| ModelError::Batch("empty batch".into()))?;
        let n = first.n_customers();
        if let Some(bad) = instances.iter().find(|i| i.n_customers() != n) {
            return Err(ModelError::Batch(format!(
                "mixed sizes {} and {} in one batch",
                n,
                bad.n_customers()
            )));
        }
        let b = instances.len();
        let nn = n + 1;
        let mut depot = Vec::with_capacity(b * 2);
        let mut customers = Vec::with_capacity(b * n * 3);
        let mut dist = Vec::with_capacity(b * nn * nn);
        for inst in instances {
            let c = inst.coords();
            depot.extend([T::of(c[0][0]), T::of(c[0][1])]);
            for (xy, q) in c.iter().zip(inst.demands()).skip(1) {
                customers.extend([T::of(xy[0]), T::of(xy[1]), T::of(q / inst.capacity())]);
            }
            dist.extend(inst.dist_matrix().iter().map(|&d| T::of(d)));
        }
        Ok(ProblemBatch {
            instances: instances.to_vec(),
            n,
            depot: Tensor::new(vec![b, 2], depot)?,
            customers: Tensor::new(vec![b, n, 3], customers)?,
            dist: Tensor::new(vec![b, nn, nn], dist)?,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn nodes(&self) -> usize {
        self.n + 1
    }
}
