//! Mini-batch gradient descent for the base model and for LoRA adapters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterDelta, DeltaMetadata, Role};
use crate::error::{Error, Result};
use crate::toy::loss::{base_grads, loss_ga, loss_gd, loss_retain, loss_rmu, LossOutput};
use crate::toy::model::{LoraConfig, ToyModel};
use crate::toy::task::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// Gradient ascent on the forget data.
    Ga,
    /// Push hidden activations of forget inputs towards `c·u`.
    Rmu {
        c: f32,
        /// Use the raw `Uniform([0,1]^d)` draw instead of normalizing it.
        #[serde(default)]
        raw_uniform: bool,
    },
    /// Cross-entropy fine-tuning on retained data.
    Retain,
    /// Gradient ascent on forget data plus λ·cross-entropy on retain data.
    Gd { lambda: f32 },
}

impl Objective {
    pub fn role(&self) -> Role {
        match self {
            Objective::Retain => Role::Retain,
            _ => Role::Unlearn,
        }
    }
}

fn default_lr() -> f32 {
    0.05
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(objective: Objective) -> Self {
        Self {
            objective,
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be ≥ 1".into()));
        }
        match self.objective {
            Objective::Gd { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                Err(Error::InvalidConfig(format!("GD lambda must be ≥ 0, got {lambda}")))
            }
            Objective::Rmu { c, .. } if !(c > 0.0 && c.is_finite()) => {
                Err(Error::InvalidConfig(format!("RMU c must be > 0, got {c}")))
            }
            _ => Ok(()),
        }
    }
}

/// Data an adapter is trained on. `data` holds one or more sets the
/// objective runs over (several sets are interleaved batch by batch);
/// `retain` is the retain side of the GD objective.
#[derive(Debug, Clone, Default)]
pub struct TrainingSets {
    pub data: Vec<Dataset>,
    pub retain: Option<Dataset>,
}

impl TrainingSets {
    pub fn single(data: Dataset) -> Self {
        Self {
            data: vec![data],
            retain: None,
        }
    }
}

fn default_hidden() -> usize {
    32
}
fn default_pretrain_lr() -> f32 {
    0.1
}
fn default_pretrain_epochs() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_pretrain_lr")]
    pub learning_rate: f32,
    #[serde(default = "default_pretrain_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            learning_rate: default_pretrain_lr(),
            epochs: default_pretrain_epochs(),
            batch_size: default_batch(),
            seed: 0,
        }
    }
}

fn batches(len: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Fits all base weights on `data` with plain mini-batch gradient descent.
pub fn pretrain(data: &Dataset, num_classes: usize, cfg: &PretrainConfig) -> Result<ToyModel> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut model = ToyModel::init(data.dim, cfg.hidden, num_classes, cfg.seed, LoraConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let lr = f64::from(cfg.learning_rate);
    for epoch in 0..cfg.epochs {
        for (step, idx) in batches(data.len(), cfg.batch_size, &mut rng).iter().enumerate() {
            let batch = data.gather(idx);
            let (loss, g) = base_grads(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, step });
            }
            for (w, d) in [
                (&mut model.w1, &g.w1),
                (&mut model.b1, &g.b1),
                (&mut model.w2, &g.w2),
                (&mut model.b2, &g.b2),
            ] {
                w.iter_mut().zip(d).for_each(|(w, d)| *w -= lr * d);
            }
        }
    }
    Ok(model)
}

/// The RMU target direction: a `Uniform([0,1]^d)` draw, normalized to unit
/// length unless `raw` is set.
pub fn rmu_direction(dim: usize, seed: u64, raw: bool) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    if !raw {
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            u.iter_mut().for_each(|v| *v /= norm);
        }
    }
    u
}

/// Trains the LoRA factors of a copy of `model`; base weights are never
/// touched. `on_epoch` sees the model after each completed epoch (1-based).
pub fn train_lora(
    model: &ToyModel,
    sets: &TrainingSets,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &ToyModel) -> Result<()>,
) -> Result<ToyModel> {
    cfg.validate()?;
    if sets.data.is_empty() || sets.data.iter().any(Dataset::is_empty) {
        return Err(Error::EmptyBatch);
    }
    let retain = match (cfg.objective, &sets.retain) {
        (Objective::Gd { .. }, Some(r)) if !r.is_empty() => Some(r),
        (Objective::Gd { .. }, _) => {
            return Err(Error::InvalidConfig("GD objective needs a retain set".into()))
        }
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let u = match cfg.objective {
        Objective::Rmu { raw_uniform, .. } => rmu_direction(model.hidden, rng.random(), raw_uniform),
        _ => Vec::new(),
    };
    let mut trained = model.clone();
    let mut params = trained.lora_params();
    let lr = f64::from(cfg.learning_rate);

    for epoch in 0..cfg.epochs {
        let per_set: Vec<Vec<Vec<usize>>> = sets
            .data
            .iter()
            .map(|d| batches(d.len(), cfg.batch_size, &mut rng))
            .collect();
        let retain_batches = retain.map(|r| batches(r.len(), cfg.batch_size, &mut rng));
        let rounds = per_set.iter().map(Vec::len).max().unwrap_or(0);
        let mut step = 0;
        for round in 0..rounds {
            for (set, set_batches) in sets.data.iter().zip(&per_set) {
                let Some(idx) = set_batches.get(round) else {
                    continue;
                };
                let batch = set.gather(idx);
                let LossOutput { loss, grads } = match cfg.objective {
                    Objective::Ga => loss_ga(&trained, &batch)?,
                    Objective::Retain => loss_retain(&trained, &batch)?,
                    Objective::Rmu { c, .. } => loss_rmu(&trained, &batch, f64::from(c), &u)?,
                    Objective::Gd { lambda } => {
                        let (r, rb) = (retain.expect("checked"), retain_batches.as_ref().expect("checked"));
                        let rbatch = r.gather(&rb[step % rb.len()]);
                        loss_gd(&trained, &batch, &rbatch, f64::from(lambda))?
                    }
                };
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { epoch, step });
                }
                params.iter_mut().zip(&grads).for_each(|(p, g)| *p -= lr * g);
                if params.iter().any(|p| !p.is_finite() || p.abs() > f64::from(f32::MAX)) {
                    return Err(Error::TrainingDiverged { epoch, step });
                }
                trained.set_lora_params(&params);
                step += 1;
            }
        }
        on_epoch(epoch + 1, &trained)?;
    }
    Ok(trained)
}

/// Trains an adapter and returns its LoRA delta. The role follows the
/// objective (`retain` for RETAIN, `unlearn` otherwise).
pub fn train_adapter(
    model: &ToyModel,
    sets: &TrainingSets,
    cfg: &TrainConfig,
    domain: &str,
    client_id: &str,
) -> Result<AdapterDelta> {
    let trained = train_lora(model, sets, cfg, |_, _| Ok(()))?;
    trained.adapter(DeltaMetadata::new(cfg.objective.role(), domain, client_id))
}
