//! Losses, the AMSGrad optimizer, the plateau schedule, evaluation metrics
//! and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, Tape, Tensor};
use crate::data::{DatasetStats, StructureRecord};
use crate::geometry::{dot, AtomicSystem, mat_vec, norm, random_rotation, Mat3, Vec3};
use crate::model::{positions_tensor, rows_to_vec3, Model, ModelError, Prediction, Variant};
use crate::params::{Bound, ParamStore};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("prediction and target disagree in shape: {0}")]
    Shape(String),
    #[error("non-finite {what} at step {step}: {detail}")]
    NonFinite { what: &'static str, step: usize, detail: String },
    #[error("empty dataset: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Weight of the per-structure energy L1 term.
    pub energy_weight: f64,
    /// Weight of the per-component force L1 term.
    pub force_weight: f64,
    pub learning_rate: f64,
    /// Factor applied to the learning rate on a validation plateau.
    pub decay_factor: f64,
    /// Validation rounds without improvement before decaying.
    pub patience: usize,
    pub max_steps: usize,
    /// Steps between validation rounds.
    pub val_interval: usize,
    /// Validation uses at most this many structures.
    pub val_structures: usize,
    /// Steps between checkpoints; 0 writes only the final model.
    pub checkpoint_interval: usize,
    /// Drop the energy term entirely.
    pub force_only: bool,
    /// Random rotations per structure per step for force-centric training.
    pub train_rotations: usize,
    /// Largest atom displacement of the finite-difference Hessian-vector
    /// product used for energy-centric force training, Å.
    pub hvp_displacement: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            energy_weight: 1.0,
            force_weight: 100.0,
            learning_rate: 1e-3,
            decay_factor: 0.8,
            patience: 3,
            max_steps: 2000,
            val_interval: 200,
            val_structures: 64,
            checkpoint_interval: 0,
            force_only: false,
            train_rotations: 1,
            hvp_displacement: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [("energy_weight", self.energy_weight), ("force_weight", self.force_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!("decay_factor must lie in (0, 1), got {}", self.decay_factor));
        }
        if self.patience == 0 || self.val_interval == 0 || self.val_structures == 0 || self.train_rotations == 0 {
            return bad("patience, val_interval, val_structures and train_rotations must be at least 1".into());
        }
        if !(self.hvp_displacement > 0.0 && self.hvp_displacement.is_finite()) {
            return bad("hvp_displacement must be positive".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return bad("need beta1, beta2 in [0, 1) and adam_eps > 0".into());
        }
        Ok(())
    }

    pub fn effective_energy_weight(&self) -> f64 {
        if self.force_only {
            0.0
        } else {
            self.energy_weight
        }
    }
}

/// `w_E |ΔE| + w_F · mean |Δf|`, the force mean taken over atoms and components.
pub fn loss(
    pred_energy: f64,
    pred_forces: &[Vec3],
    energy: f64,
    forces: &[Vec3],
    energy_weight: f64,
    force_weight: f64,
) -> Result<f64, TrainError> {
    if pred_forces.len() != forces.len() {
        return Err(TrainError::Shape(format!("{} predicted forces, {} targets", pred_forces.len(), forces.len())));
    }
    let count = 3 * forces.len();
    let force_term = if count == 0 {
        0.0
    } else {
        pred_forces.iter().flatten().zip(forces.iter().flatten()).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / count as f64
    };
    Ok(energy_weight * (pred_energy - energy).abs() + force_weight * force_term)
}

/// Adam with the AMSGrad running maximum of the second moment.
#[derive(Clone, Debug)]
pub struct AmsGrad {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    v_max: Vec<Vec<f64>>,
}

impl AmsGrad {
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        Self { beta1, beta2, eps, t: 0, m: zeros(), v: zeros(), v_max: zeros() }
    }

    pub fn for_params(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = params.ids().map(|id| params.get(id).len()).collect();
        Self::new(&sizes, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of every parameter group; `params[i]` pairs with `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = (1.0 - self.beta2.powi(self.t)).sqrt();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v, vm) = (&mut self.m[i], &mut self.v[i], &mut self.v_max[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                vm[j] = vm[j].max(v[j]);
                p[j] -= lr / c1 * m[j] / (vm[j].sqrt() / c2 + self.eps);
            }
        }
    }

    pub fn step_store(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        let ids: Vec<_> = params.ids().collect();
        let mut values: Vec<Tensor> = ids.iter().map(|&id| params.get(id).clone()).collect();
        {
            let mut slices: Vec<&mut [f64]> = values.iter_mut().map(|t| t.data_mut()).collect();
            let g: Vec<&[f64]> = grads.iter().map(|t| t.data()).collect();
            self.step(&mut slices, &g, lr);
        }
        for (id, value) in ids.into_iter().zip(values) {
            *params.get_mut(id) = value;
        }
    }
}

/// Learning rate after a validation history: each run of `patience` rounds
/// without a new best multiplies it by `factor` and restarts the count.
pub fn plateau_lr(history: &[f64], initial: f64, factor: f64, patience: usize) -> f64 {
    let mut lr = initial;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for &v in history {
        if v < best {
            best = v;
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                lr *= factor;
                stale = 0;
            }
        }
    }
    lr
}

/// Energy-within threshold, eV.
pub const EFWT_ENERGY: f64 = 0.02;
/// Force-component-within threshold, eV/Å.
pub const EFWT_FORCE: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub structures: usize,
    /// Mean per-structure absolute energy error, eV.
    pub energy_mae: f64,
    /// Mean per-component absolute force error, eV/Å.
    pub force_mae: f64,
    /// Cosine between predicted and target force vectors, averaged over atoms.
    pub force_cosine: f64,
    /// Fraction of structures within both thresholds.
    pub efwt: f64,
}

fn cosine(a: Vec3, b: Vec3) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        (dot(a, b) / d).clamp(-1.0, 1.0)
    }
}

pub fn metrics(predictions: &[Prediction], targets: &[StructureRecord]) -> Result<MetricsReport, TrainError> {
    if targets.is_empty() {
        return Err(TrainError::Empty("no structures to evaluate"));
    }
    if predictions.len() != targets.len() {
        return Err(TrainError::Shape(format!("{} predictions, {} targets", predictions.len(), targets.len())));
    }
    let (mut e_sum, mut f_sum, mut cos_sum, mut within) = (0.0, 0.0, 0.0, 0usize);
    let (mut components, mut atoms) = (0usize, 0usize);
    for (p, t) in predictions.iter().zip(targets) {
        if p.forces.len() != t.forces.len() {
            return Err(TrainError::Shape(format!("{} predicted forces, {} targets", p.forces.len(), t.forces.len())));
        }
        let de = (p.energy - t.energy).abs();
        e_sum += de;
        let mut worst: f64 = 0.0;
        for (a, b) in p.forces.iter().zip(&t.forces) {
            for k in 0..3 {
                let d = (a[k] - b[k]).abs();
                f_sum += d;
                worst = worst.max(d);
            }
            cos_sum += cosine(*a, *b);
        }
        components += 3 * t.forces.len();
        atoms += t.forces.len();
        within += (de < EFWT_ENERGY && worst < EFWT_FORCE) as usize;
    }
    let n = targets.len();
    Ok(MetricsReport {
        structures: n,
        energy_mae: e_sum / n as f64,
        force_mae: if components == 0 { 0.0 } else { f_sum / components as f64 },
        force_cosine: if atoms == 0 { 0.0 } else { cos_sum / atoms as f64 },
        efwt: within as f64 / n as f64,
    })
}

/// Predicts the training-set median energy and median force component for
/// every structure and every atom.
pub fn median_baseline(stats: &DatasetStats, record: &StructureRecord) -> Prediction {
    let f = stats.median_force;
    Prediction { energy: stats.median_energy, forces: vec![[f, f, f]; record.forces.len()] }
}

/// Scores the model on `records`; rotations for force-centric models are
/// drawn from a generator seeded with `seed`.
pub fn evaluate(model: &Model, records: &[StructureRecord], seed: u64) -> Result<MetricsReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let preds =
        records.iter().map(|r| model.predict(&r.system(), &mut rng)).collect::<Result<Vec<_>, ModelError>>()?;
    metrics(&preds, records)
}

/// Gradient of the summed loss of one structure, parameter by parameter.
pub struct StructureGradient {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

fn param_grads(model: &Model, bound: &Bound, grads: &mut Gradients) -> Vec<Tensor> {
    model.params().ids().map(|id| grads.take(bound.var(id))).collect()
}

fn rotated_forces(q: &Mat3, f: &[Vec3]) -> Vec<Vec3> {
    f.iter().map(|v| mat_vec(q, *v)).collect()
}

/// Force-centric loss gradient for one structure under the global rotation `q`.
pub fn force_centric_gradient(
    model: &Model,
    record: &StructureRecord,
    q: &Mat3,
    energy_weight: f64,
    force_weight: f64,
) -> Result<StructureGradient, TrainError> {
    let system = record.system().rotated(q);
    let prep = model.prepare(&system)?;
    let tape = Tape::new();
    let bound = model.params().bind(&tape, true);
    let pos = tape.constant(positions_tensor(&system.positions));
    let fwd = model.forward(&tape, &bound, &prep, pos, true)?;
    let forces = fwd.forces.ok_or_else(|| ModelError::Config("model has no force block".into()))?;
    let target_f = tape.constant(positions_tensor(&rotated_forces(q, &record.forces)));
    let mut total = tape.scale(tape.l1_mean(forces, target_f)?, force_weight)?;
    if energy_weight > 0.0 {
        let target_e = tape.constant(Tensor::scalar(record.energy));
        let e_term = tape.scale(tape.l1_mean(fwd.energy, target_e)?, energy_weight)?;
        total = tape.add(total, e_term)?;
    }
    let mut grads = tape.backward(total)?;
    Ok(StructureGradient { loss: tape.value(total).item(), grads: param_grads(model, &bound, &mut grads) })
}

fn energy_pass(model: &Model, positions: &[Vec3], numbers: &[u32]) -> Result<(f64, Vec<Vec3>, Vec<Tensor>), TrainError> {
    let system = AtomicSystem { positions: positions.to_vec(), numbers: numbers.to_vec(), energy: None, forces: None };
    let prep = model.prepare(&system)?;
    let tape = Tape::new();
    let bound = model.params().bind(&tape, true);
    let pos = tape.leaf(positions_tensor(positions), true);
    let fwd = model.forward(&tape, &bound, &prep, pos, false)?;
    let mut grads = tape.backward(fwd.energy)?;
    let forces = rows_to_vec3(&grads.take(pos).map(|v| -v));
    Ok((tape.value(fwd.energy).item(), forces, param_grads(model, &bound, &mut grads)))
}

/// Energy-centric loss gradient. The force term needs `∂f/∂θ` with
/// `f = -∂E/∂x`; its contraction with `v = ∂L/∂f` equals
/// `-∂/∂θ (v · ∂E/∂x)`, taken here as a central difference of `∂E/∂θ` along `v`.
pub fn energy_centric_gradient(
    model: &Model,
    record: &StructureRecord,
    energy_weight: f64,
    force_weight: f64,
    displacement: f64,
) -> Result<StructureGradient, TrainError> {
    let (energy, forces, grad_e) = energy_pass(model, &record.positions, &record.numbers)?;
    let value = loss(energy, &forces, record.energy, &record.forces, energy_weight, force_weight)?;
    let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
    let s = energy_weight * sign(energy - record.energy);
    let mut grads: Vec<Tensor> = grad_e.iter().map(|g| g.map(|x| s * x)).collect();
    let count = (3 * forces.len()).max(1) as f64;
    let v: Vec<Vec3> = forces
        .iter()
        .zip(&record.forces)
        .map(|(p, t)| {
            let c = |k: usize| force_weight * sign(p[k] - t[k]) / count;
            [c(0), c(1), c(2)]
        })
        .collect();
    let v_max = v.iter().map(|x| norm(*x)).fold(0.0, f64::max);
    if v_max > 0.0 {
        let eps = displacement / v_max;
        let shifted = |sgn: f64| -> Vec<Vec3> {
            record.positions.iter().zip(&v).map(|(x, d)| [x[0] + sgn * eps * d[0], x[1] + sgn * eps * d[1], x[2] + sgn * eps * d[2]]).collect()
        };
        let (_, _, plus) = energy_pass(model, &shifted(1.0), &record.numbers)?;
        let (_, _, minus) = energy_pass(model, &shifted(-1.0), &record.numbers)?;
        for ((g, p), m) in grads.iter_mut().zip(&plus).zip(&minus) {
            for ((x, a), b) in g.data_mut().iter_mut().zip(p.data()).zip(m.data()) {
                *x -= (a - b) / (2.0 * eps);
            }
        }
    }
    Ok(StructureGradient { loss: value, grads })
}

/// One row of the metrics CSV, written after every validation round.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    pub val: MetricsReport,
}

impl MetricsRow {
    pub const HEADER: &'static str = "step,lr,train_loss,val_energy_mae,val_force_mae,val_force_cosine,val_efwt";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.train_loss,
            self.val.energy_mae,
            self.val.force_mae,
            self.val.force_cosine,
            self.val.efwt
        )
    }
}

pub struct Trainer {
    model: Model,
    config: TrainConfig,
    optimizer: AmsGrad,
    rng: ChaCha8Rng,
    train: Vec<StructureRecord>,
    val: Vec<StructureRecord>,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
    lr: f64,
    val_history: Vec<f64>,
    losses: Vec<f64>,
    rows: Vec<MetricsRow>,
}

impl Trainer {
    pub fn new(
        model: Model,
        config: TrainConfig,
        train: Vec<StructureRecord>,
        val: Vec<StructureRecord>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if train.is_empty() {
            return Err(TrainError::Empty("training split is empty"));
        }
        if val.is_empty() {
            return Err(TrainError::Empty("validation split is empty"));
        }
        let mut val = val;
        val.truncate(config.val_structures);
        let optimizer = AmsGrad::for_params(model.params(), &config);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let lr = config.learning_rate;
        let order = (0..train.len()).collect();
        Ok(Self {
            model,
            config,
            optimizer,
            rng,
            train,
            val,
            order,
            cursor: usize::MAX,
            step: 0,
            lr,
            val_history: Vec::new(),
            losses: Vec::new(),
            rows: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Training loss of every step so far.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size.min(self.train.len()) {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// One optimizer update on the next batch; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64, TrainError> {
        let batch = self.next_batch();
        let w_e = self.config.effective_energy_weight();
        let w_f = self.config.force_weight;
        let mut total: Option<Vec<Tensor>> = None;
        let mut loss = 0.0;
        let mut count = 0.0;
        for &i in &batch {
            let record = &self.train[i];
            let parts = match self.model.config().variant {
                Variant::ForceCentric => {
                    let mut parts = Vec::with_capacity(self.config.train_rotations);
                    for _ in 0..self.config.train_rotations {
                        let q = random_rotation(&mut self.rng);
                        parts.push(force_centric_gradient(&self.model, record, &q, w_e, w_f)?);
                    }
                    parts
                }
                Variant::EnergyCentric => {
                    vec![energy_centric_gradient(&self.model, record, w_e, w_f, self.config.hvp_displacement)?]
                }
            };
            for g in parts {
                loss += g.loss;
                count += 1.0;
                match &mut total {
                    None => total = Some(g.grads),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g.grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
        }
        let mut grads = total.expect("batch is non-empty");
        for g in &mut grads {
            for x in g.data_mut() {
                *x /= count;
            }
        }
        loss /= count;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { what: "loss", step: self.step, detail: format!("batch {batch:?}") });
        }
        for (id, g) in self.model.params().ids().zip(&grads) {
            if let Some(bad) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(TrainError::NonFinite {
                    what: "gradient",
                    step: self.step,
                    detail: format!("{} entry {bad}, batch {batch:?}", self.model.params().name(id)),
                });
            }
        }
        self.optimizer.step_store(self.model.params_mut(), &grads, self.lr);
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    /// Scores the validation subset with rotations that are the same every round.
    pub fn validate(&self) -> Result<MetricsReport, TrainError> {
        evaluate(&self.model, &self.val, self.config.seed ^ 0x5eed_0000_0000_0001)
    }

    fn validation_round(&mut self, since: usize) -> Result<MetricsRow, TrainError> {
        let val = self.validate()?;
        let score = self.config.effective_energy_weight() * val.energy_mae + self.config.force_weight * val.force_mae;
        let recent = &self.losses[since..];
        let train_loss = if recent.is_empty() { 0.0 } else { recent.iter().sum::<f64>() / recent.len() as f64 };
        let row = MetricsRow { step: self.step, lr: self.lr, train_loss, val };
        self.val_history.push(score);
        self.lr = plateau_lr(&self.val_history, self.config.learning_rate, self.config.decay_factor, self.config.patience);
        self.rows.push(row.clone());
        Ok(row)
    }

    /// Trains to `max_steps`. With an output directory, writes `metrics.csv`,
    /// periodic `checkpoint_<step>.json` files and the final `model.json`.
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_row: impl FnMut(&MetricsRow)) -> Result<(), TrainError> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        let mut since = self.losses.len();
        while self.step < self.config.max_steps {
            self.train_step()?;
            let last = self.step == self.config.max_steps;
            if self.step.is_multiple_of(self.config.val_interval) || last {
                let row = self.validation_round(since)?;
                since = self.losses.len();
                on_row(&row);
                if let Some(dir) = out_dir {
                    fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
                }
            }
            if let (Some(dir), k) = (out_dir, self.config.checkpoint_interval) {
                if k > 0 && self.step.is_multiple_of(k) {
                    self.model.save(&dir.join(format!("checkpoint_{}.json", self.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
            self.model.save(&dir.join("model.json"))?;
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(MetricsRow::HEADER);
        out.push('\n');
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.to_csv());
        }
        out
    }
}

#[cfg(test)]
mod tests;
