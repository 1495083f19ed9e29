//! Training objectives with exact analytic LoRA gradients.

use crate::error::{Error, Result};
use crate::toy::model::{DenseGrads, Forward, ToyModel};
use crate::toy::task::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Same layout as [`ToyModel::lora_params`].
    pub grads: Vec<f64>,
}

/// Mean cross-entropy, its logit gradient and the forward pass.
pub(crate) fn cross_entropy(model: &ToyModel, batch: &Dataset) -> Result<(f64, Vec<f64>, Forward)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let fwd = model.forward(batch);
    let (n, c) = (batch.len(), model.classes);
    let mut d_logits = vec![0.0; n * c];
    let mut total = 0.0;
    for s in 0..n {
        let row = &fwd.logits[s * c..(s + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        let y = batch.labels[s];
        total += log_z - row[y];
        for k in 0..c {
            let p = (row[k] - log_z).exp();
            d_logits[s * c + k] = (p - if k == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((total / n as f64, d_logits, fwd))
}

/// Gradients of mean cross-entropy with respect to the effective weights
/// and biases; used to fit the base model.
pub fn base_grads(model: &ToyModel, batch: &Dataset) -> Result<(f64, DenseGrads)> {
    let (loss, d_logits, fwd) = cross_entropy(model, batch)?;
    Ok((loss, model.backward(batch, &fwd, Some(&d_logits), None)))
}

/// Mean cross-entropy on retained data.
pub fn loss_retain(model: &ToyModel, batch: &Dataset) -> Result<LossOutput> {
    let (loss, d_logits, fwd) = cross_entropy(model, batch)?;
    let g = model.backward(batch, &fwd, Some(&d_logits), None);
    Ok(LossOutput {
        loss,
        grads: model.lora_grads(&g),
    })
}

/// Negated cross-entropy: descending it ascends the original loss.
pub fn loss_ga(model: &ToyModel, forget: &Dataset) -> Result<LossOutput> {
    let out = loss_retain(model, forget)?;
    Ok(LossOutput {
        loss: -out.loss,
        grads: out.grads.into_iter().map(|g| -g).collect(),
    })
}

/// Mean over the batch of `‖h(x) − c·u‖²`, where `h` is the rectified hidden
/// activation.
pub fn loss_rmu(model: &ToyModel, forget: &Dataset, c: f64, u: &[f64]) -> Result<LossOutput> {
    if forget.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if u.len() != model.hidden {
        return Err(Error::InvalidConfig(format!(
            "RMU direction has {} entries, hidden layer has {}",
            u.len(),
            model.hidden
        )));
    }
    let fwd = model.forward(forget);
    let (n, h) = (forget.len(), model.hidden);
    let mut d_hidden = vec![0.0; n * h];
    let mut total = 0.0;
    for s in 0..n {
        for j in 0..h {
            let diff = fwd.hidden[s * h + j] - c * u[j];
            total += diff * diff;
            d_hidden[s * h + j] = 2.0 * diff / n as f64;
        }
    }
    let g = model.backward(forget, &fwd, None, Some(&d_hidden));
    Ok(LossOutput {
        loss: total / n as f64,
        grads: model.lora_grads(&g),
    })
}

/// `loss_ga(forget) + λ · loss_retain(retain)`.
pub fn loss_gd(model: &ToyModel, forget: &Dataset, retain: &Dataset, lambda: f64) -> Result<LossOutput> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("GD lambda must be ≥ 0, got {lambda}")));
    }
    let f = loss_ga(model, forget)?;
    let r = loss_retain(model, retain)?;
    Ok(LossOutput {
        loss: f.loss + lambda * r.loss,
        grads: f
            .grads
            .iter()
            .zip(&r.grads)
            .map(|(a, b)| a + lambda * b)
            .collect(),
    })
}
