use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ModelParams;
use crate::toy::model::{LoraConfig, ToyModel};
use crate::toy::task::Dataset;

/// Fraction of argmax-correct predictions.
pub fn accuracy(model: &ToyModel, split: &Dataset) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let correct = model
        .predict(split)
        .iter()
        .zip(&split.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / split.len() as f64)
}

/// Accuracy of the plain model described by `params` (no adapter).
pub fn params_accuracy(params: &ModelParams, split: &Dataset) -> Result<f64> {
    accuracy(&ToyModel::from_params(params, LoraConfig::default())?, split)
}

/// Named retention metrics (higher is better) and unlearning metrics
/// (lower is better), all fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSet {
    pub retain: Vec<(String, f64)>,
    pub unlearn: Vec<(String, f64)>,
}

impl MetricSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_retain(mut self, name: impl Into<String>, value: f64) -> Self {
        self.retain.push((name.into(), value));
        self
    }

    pub fn with_unlearn(mut self, name: impl Into<String>, value: f64) -> Self {
        self.unlearn.push((name.into(), value));
        self
    }

    pub fn len(&self) -> usize {
        self.retain.len() + self.unlearn.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.retain
            .iter()
            .chain(&self.unlearn)
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyInput);
        }
        for (name, v) in self.retain.iter().chain(&self.unlearn) {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::InvalidConfig(format!(
                    "metric `{name}` = {v} is outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Mean of the retention metrics and the reversed (`1 − m`) unlearning
/// metrics.
pub fn overall(metrics: &MetricSet) -> Result<f64> {
    metrics.validate()?;
    let total: f64 = metrics.retain.iter().map(|(_, v)| v).sum::<f64>()
        + metrics.unlearn.iter().map(|(_, v)| 1.0 - v).sum::<f64>();
    Ok(total / metrics.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_predictor_on_balanced_split() {
        let mut m = ToyModel::init(2, 3, 4, 0, LoraConfig::default()).unwrap();
        m.w2.iter_mut().for_each(|w| *w = 0.0);
        m.b2 = vec![0.0, 0.0, 1.0, 0.0];
        let mut ds = Dataset::new(2);
        for c in 0..4 {
            for _ in 0..5 {
                ds.push(&[0.3, -0.1], c);
            }
        }
        assert_eq!(accuracy(&m, &ds).unwrap(), 0.25);
        assert!(matches!(accuracy(&m, &Dataset::new(2)), Err(Error::EmptyBatch)));
    }

    #[test]
    fn overall_reproduces_published_rows() {
        let t2 = MetricSet::new()
            .with_retain("utility", 0.5725)
            .with_unlearn("bio", 0.3905)
            .with_unlearn("cyber", 0.2582)
            .with_unlearn("hp", 0.3448);
        assert!((overall(&t2).unwrap() * 100.0 - 64.48).abs() <= 0.01);
        let t1 = MetricSet::new()
            .with_retain("real_authors", 0.9906)
            .with_retain("real_world", 0.7835)
            .with_retain("retain", 0.6448)
            .with_retain("utility", 0.7062)
            .with_unlearn("forget", 0.5184);
        assert!((overall(&t1).unwrap() * 100.0 - 72.13).abs() <= 0.01);
        let t3 = MetricSet::new()
            .with_retain("real_authors", 0.8613)
            .with_retain("real_world", 0.7585)
            .with_retain("retain", 0.4837)
            .with_retain("utility", 0.7062)
            .with_unlearn("forget", 0.2079);
        assert!((overall(&t3).unwrap() * 100.0 - 72.04).abs() <= 0.01);
    }

    #[test]
    fn overall_errors() {
        assert!(matches!(overall(&MetricSet::new()), Err(Error::EmptyInput)));
        assert!(overall(&MetricSet::new().with_retain("x", 1.5)).is_err());
    }

    #[test]
    fn swapping_retain_for_reversed_unlearn_is_neutral() {
        let a = MetricSet::new().with_retain("r", 0.3).with_unlearn("u", 0.6);
        let b = MetricSet::new().with_unlearn("r", 0.7).with_unlearn("u", 0.6);
        assert!((overall(&a).unwrap() - overall(&b).unwrap()).abs() < 1e-12);
    }
}
