//! Domain-structured Gaussian-cluster classification tasks.
//!
//! Every domain gets a random center; its classes get means scattered
//! around that center. A domain may borrow another domain's center
//! (`anchor`), which makes the two near-iid.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub classes: Vec<usize>,
    /// Share the center of this (non-anchored) domain.
    #[serde(default)]
    pub anchor: Option<String>,
}

fn default_input_dim() -> usize {
    16
}
fn default_num_classes() -> usize {
    8
}
fn default_domain_scale() -> f32 {
    0.25
}
fn default_class_scale() -> f32 {
    0.125
}
fn default_sigma() -> f32 {
    0.15
}
fn default_train() -> usize {
    200
}
fn default_eval() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    pub domains: Vec<DomainSpec>,
    /// Standard deviation of domain centers around the origin.
    #[serde(default = "default_domain_scale")]
    pub domain_scale: f32,
    /// Standard deviation of class means around their domain center.
    #[serde(default = "default_class_scale")]
    pub class_scale: f32,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f32,
    #[serde(default = "default_train")]
    pub train_per_class: usize,
    #[serde(default = "default_eval")]
    pub eval_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    /// Two domains, A = {0..3} and B = {4..7}, at default scales.
    pub fn two_domain(seed: u64) -> Self {
        Self {
            input_dim: 16,
            num_classes: 8,
            domains: vec![
                DomainSpec {
                    name: "A".into(),
                    classes: vec![0, 1, 2, 3],
                    anchor: None,
                },
                DomainSpec {
                    name: "B".into(),
                    classes: vec![4, 5, 6, 7],
                    anchor: None,
                },
            ],
            domain_scale: default_domain_scale(),
            class_scale: default_class_scale(),
            noise_sigma: default_sigma(),
            train_per_class: default_train(),
            eval_per_class: default_eval(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::TaskSpec(m));
        if self.input_dim == 0 || self.num_classes < 2 {
            return err("need input_dim ≥ 1 and num_classes ≥ 2".into());
        }
        if self.train_per_class == 0 || self.eval_per_class == 0 {
            return err("per-class sample counts must be positive".into());
        }
        for (name, v) in [
            ("domain_scale", self.domain_scale),
            ("class_scale", self.class_scale),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be finite and ≥ 0"));
            }
        }
        let mut seen_names = BTreeSet::new();
        let mut seen_classes = BTreeSet::new();
        for d in &self.domains {
            if !seen_names.insert(d.name.as_str()) {
                return err(format!("duplicate domain `{}`", d.name));
            }
            if d.classes.is_empty() {
                return err(format!("domain `{}` has no classes", d.name));
            }
            for &c in &d.classes {
                if c >= self.num_classes {
                    return err(format!("class {c} out of range in `{}`", d.name));
                }
                if !seen_classes.insert(c) {
                    return err(format!("class {c} appears in more than one domain"));
                }
            }
        }
        for d in &self.domains {
            if let Some(a) = &d.anchor {
                match self.domains.iter().find(|x| &x.name == a) {
                    None => return err(format!("unknown anchor `{a}` for `{}`", d.name)),
                    Some(x) if x.anchor.is_some() => {
                        return err(format!("anchor `{a}` is itself anchored"))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }
}

/// Row-major inputs with integer labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, x: &[f32], label: usize) {
        debug_assert_eq!(x.len(), self.dim);
        self.inputs.extend_from_slice(x);
        self.labels.push(label);
    }

    pub fn gather(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.dim);
        for &i in idx {
            out.push(self.row(i), self.labels[i]);
        }
        out
    }

    pub fn concat(parts: &[&Dataset]) -> Dataset {
        let dim = parts.first().map_or(0, |p| p.dim);
        let mut out = Dataset::new(dim);
        for p in parts {
            out.inputs.extend_from_slice(&p.inputs);
            out.labels.extend_from_slice(&p.labels);
        }
        out
    }

    fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx
    }

    /// Part `index` of `parts` near-equal iid shards (shuffled by `seed`).
    pub fn split_iid(&self, parts: usize, index: usize, seed: u64) -> Result<Dataset> {
        if parts == 0 || index >= parts {
            return Err(Error::InvalidConfig(format!(
                "shard {index} of {parts} is out of range"
            )));
        }
        let idx = self.shuffled_indices(seed);
        let n = idx.len();
        let (lo, hi) = (n * index / parts, n * (index + 1) / parts);
        Ok(self.gather(&idx[lo..hi]))
    }

    /// A random `fraction` of the samples (at least one).
    pub fn subsample(&self, fraction: f32, seed: u64) -> Result<Dataset> {
        Ok(self.split_fraction(fraction, seed)?.0)
    }

    /// Disjoint random split into a `fraction` part (at least one sample)
    /// and the remainder. The first part equals `subsample(fraction, seed)`.
    pub fn split_fraction(&self, fraction: f32, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("fraction {fraction} not in (0, 1]")));
        }
        if self.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let idx = self.shuffled_indices(seed);
        let k = ((fraction as f64 * idx.len() as f64).round() as usize).clamp(1, idx.len());
        Ok((self.gather(&idx[..k]), self.gather(&idx[k..])))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub class_means: Vec<Vec<f32>>,
    /// Per-domain training samples.
    pub train: BTreeMap<String, Dataset>,
    /// Per-domain held-out samples.
    pub eval: BTreeMap<String, Dataset>,
    /// Training samples of every class, including classes outside all
    /// domains; used to fit the base model.
    pub pretrain: Dataset,
}

impl SyntheticTask {
    pub fn train_split(&self, domain: &str) -> Result<&Dataset> {
        self.train
            .get(domain)
            .ok_or_else(|| Error::TaskSpec(format!("unknown domain `{domain}`")))
    }

    pub fn eval_split(&self, domain: &str) -> Result<&Dataset> {
        self.eval
            .get(domain)
            .ok_or_else(|| Error::TaskSpec(format!("unknown domain `{domain}`")))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f32) -> Vec<f32> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z as f32
        })
        .collect()
}

/// Generates the task deterministically from `spec.seed`.
pub fn gen_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let dim = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut centers: BTreeMap<&str, Vec<f32>> = BTreeMap::new();
    for d in spec.domains.iter().filter(|d| d.anchor.is_none()) {
        centers.insert(&d.name, gaussian(&mut rng, dim, spec.domain_scale));
    }
    let mut class_center: Vec<Option<Vec<f32>>> = vec![None; spec.num_classes];
    for d in &spec.domains {
        let key = d.anchor.as_deref().unwrap_or(&d.name);
        for &c in &d.classes {
            class_center[c] = Some(centers[key].clone());
        }
    }
    let class_means: Vec<Vec<f32>> = class_center
        .into_iter()
        .map(|center| {
            let center = center.unwrap_or_else(|| gaussian(&mut rng, dim, spec.domain_scale));
            let offset = gaussian(&mut rng, dim, spec.class_scale);
            center.iter().zip(offset).map(|(c, o)| c + o).collect()
        })
        .collect();

    let sample = |count: usize, rng: &mut ChaCha8Rng| -> Vec<Dataset> {
        class_means
            .iter()
            .enumerate()
            .map(|(c, mean)| {
                let mut ds = Dataset::new(dim);
                for _ in 0..count {
                    let noise = gaussian(rng, dim, spec.noise_sigma);
                    let x: Vec<f32> = mean.iter().zip(noise).map(|(m, n)| m + n).collect();
                    ds.push(&x, c);
                }
                ds
            })
            .collect()
    };
    let train_by_class = sample(spec.train_per_class, &mut rng);
    let eval_by_class = sample(spec.eval_per_class, &mut rng);

    let by_domain = |per_class: &[Dataset]| -> BTreeMap<String, Dataset> {
        spec.domains
            .iter()
            .map(|d| {
                let parts: Vec<&Dataset> = d.classes.iter().map(|&c| &per_class[c]).collect();
                (d.name.clone(), Dataset::concat(&parts))
            })
            .collect()
    };
    let pretrain = Dataset::concat(&train_by_class.iter().collect::<Vec<_>>());
    Ok(SyntheticTask {
        spec: spec.clone(),
        train: by_domain(&train_by_class),
        eval: by_domain(&eval_by_class),
        class_means,
        pretrain,
    })
}
