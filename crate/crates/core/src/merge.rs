//! Merging strategies: AVG, SUM, TIES and the hierarchical composition
//! (TIES vote inside each similarity cluster, sum across clusters).
//!
//! Every strategy is bitwise invariant under permutation of its inputs:
//! per-coordinate sums are taken in value-sorted order and trimming ties are
//! broken by flat index within a single delta.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapter::{
    align, canonical_sum, flatten, linear_combine, unflatten, AdapterDelta, DeltaMetadata,
};
use crate::container::delta_digest;
use crate::error::{Error, Result};
use crate::similarity::{cluster, similarity_matrix, Clustering, SimilarityMatrix, DEFAULT_XI};

pub const DEFAULT_DENSITY: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimScope {
    /// Top-k over the whole flattened delta.
    #[default]
    Global,
    /// Top-k within each tensor separately.
    PerTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiesConfig {
    pub density: f32,
    #[serde(default)]
    pub scope: TrimScope,
}

impl TiesConfig {
    pub fn new(density: f32) -> Result<Self> {
        let cfg = Self {
            density,
            scope: TrimScope::Global,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.density > 0.0 && self.density <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "TIES density must lie in (0, 1], got {}",
                self.density
            )))
        }
    }

    /// ⌈density·n⌉, robust to the f32 representation error of `density`.
    pub fn keep_count(&self, n: usize) -> usize {
        let raw = f64::from(self.density) * n as f64;
        let k = (raw - raw * 1e-7).ceil() as usize;
        k.clamp(n.min(1), n)
    }
}

impl Default for TiesConfig {
    fn default() -> Self {
        Self {
            density: DEFAULT_DENSITY,
            scope: TrimScope::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MergeStrategy {
    Avg,
    Sum,
    Ties(TiesConfig),
    Hierarchical { xi: f32, ties: TiesConfig },
}

impl MergeStrategy {
    pub fn hierarchical_default() -> Self {
        MergeStrategy::Hierarchical {
            xi: DEFAULT_XI,
            ties: TiesConfig::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MergeStrategy::Avg => "avg",
            MergeStrategy::Sum => "sum",
            MergeStrategy::Ties(_) => "ties",
            MergeStrategy::Hierarchical { .. } => "hier",
        }
    }
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MergeStrategy::Avg => write!(f, "avg"),
            MergeStrategy::Sum => write!(f, "sum"),
            MergeStrategy::Ties(c) => write!(f, "ties(density={})", c.density),
            MergeStrategy::Hierarchical { xi, ties } => {
                write!(f, "hier(xi={xi},density={})", ties.density)
            }
        }
    }
}

pub fn merge_avg(deltas: &[AdapterDelta]) -> Result<AdapterDelta> {
    if deltas.is_empty() {
        return Err(Error::EmptyInput);
    }
    let w = 1.0 / deltas.len() as f32;
    linear_combine(deltas, &vec![w; deltas.len()])
}

pub fn merge_sum(deltas: &[AdapterDelta]) -> Result<AdapterDelta> {
    linear_combine(deltas, &vec![1.0; deltas.len()])
}

/// Indices of the `k` largest magnitudes; equal magnitudes keep the lower
/// index first.
fn top_k(values: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_unstable_by(|&a, &b| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

fn trim_flat(values: &[f32], k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; values.len()];
    for i in top_k(values, k) {
        out[i] = values[i];
    }
    out
}

/// Keeps the ⌈density·N⌉ largest-magnitude coordinates and zeroes the rest.
pub fn ties_trim(delta: &AdapterDelta, cfg: &TiesConfig) -> Result<AdapterDelta> {
    cfg.validate()?;
    let dense = align(std::slice::from_ref(delta))?.remove(0);
    let shapes = dense.shapes();
    let flat = flatten(&dense)?;
    let trimmed = match cfg.scope {
        TrimScope::Global => trim_flat(&flat, cfg.keep_count(flat.len())),
        TrimScope::PerTensor => {
            let mut out = Vec::with_capacity(flat.len());
            let mut at = 0;
            for shape in shapes.values() {
                let n: usize = shape.iter().product();
                out.extend(trim_flat(&flat[at..at + n], cfg.keep_count(n)));
                at += n;
            }
            out
        }
    };
    unflatten(&trimmed, &shapes, dense.metadata)
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

fn elect_flat(flats: &[Vec<f32>]) -> Vec<i8> {
    let mut terms = vec![0.0f64; flats.len()];
    (0..flats[0].len())
        .map(|i| {
            for (t, f) in terms.iter_mut().zip(flats) {
                *t = f64::from(f[i]);
            }
            sign(canonical_sum(&mut terms))
        })
        .collect()
}

/// Per-coordinate sign of the summed (already trimmed) values; an exact zero
/// sum elects 0.
pub fn ties_elect_sign(trimmed: &[AdapterDelta]) -> Result<Vec<i8>> {
    if trimmed.is_empty() {
        return Err(Error::EmptyInput);
    }
    let aligned = align(trimmed)?;
    let flats: Vec<Vec<f32>> = aligned.iter().map(flatten).collect::<Result<_>>()?;
    Ok(elect_flat(&flats))
}

/// Trim, elect sign, then average the nonzero trimmed values agreeing with
/// the elected sign. No rescaling is applied afterwards.
pub fn ties_merge(deltas: &[AdapterDelta], cfg: &TiesConfig) -> Result<AdapterDelta> {
    if deltas.is_empty() {
        return Err(Error::EmptyInput);
    }
    cfg.validate()?;
    let aligned = align(deltas)?;
    let shapes = aligned[0].shapes();
    let flats: Vec<Vec<f32>> = aligned
        .iter()
        .map(|d| ties_trim(d, cfg).and_then(|t| flatten(&t)))
        .collect::<Result<_>>()?;
    let signs = elect_flat(&flats);
    let mut agreeing = Vec::with_capacity(flats.len());
    let out: Vec<f32> = signs
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if s == 0 {
                return 0.0;
            }
            agreeing.clear();
            agreeing.extend(
                flats
                    .iter()
                    .map(|f| f64::from(f[i]))
                    .filter(|&v| sign(v) == s),
            );
            if agreeing.is_empty() {
                return 0.0;
            }
            let n = agreeing.len() as f64;
            (canonical_sum(&mut agreeing) / n) as f32
        })
        .collect();
    unflatten(&out, &shapes, DeltaMetadata::merged())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalMerge {
    pub delta: AdapterDelta,
    pub matrix: SimilarityMatrix,
    pub clustering: Clustering,
}

/// Clusters by cosine at threshold ξ, TIES-votes inside every cluster of two
/// or more adapters, and sums the cluster results. A singleton cluster has
/// nothing to vote against and passes through unchanged.
pub fn merge_hierarchical(
    deltas: &[AdapterDelta],
    xi: f32,
    cfg: &TiesConfig,
) -> Result<HierarchicalMerge> {
    if deltas.is_empty() {
        return Err(Error::EmptyInput);
    }
    cfg.validate()?;
    let aligned = align(deltas)?;
    let matrix = similarity_matrix(&aligned)?;
    let clustering = cluster(&matrix, xi)?;
    let votes: Vec<AdapterDelta> = clustering
        .clusters
        .iter()
        .map(|members| match members.as_slice() {
            [single] => Ok(aligned[*single].clone()),
            _ => {
                let group: Vec<AdapterDelta> =
                    members.iter().map(|&i| aligned[i].clone()).collect();
                ties_merge(&group, cfg)
            }
        })
        .collect::<Result<_>>()?;
    Ok(HierarchicalMerge {
        delta: merge_sum(&votes)?,
        matrix,
        clustering,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub delta: AdapterDelta,
    pub strategy: MergeStrategy,
    /// Present for the hierarchical strategy.
    pub clustering: Option<Clustering>,
}

/// Dispatches on `strategy`. The output metadata records the strategy in
/// `domain` and the sorted input labels in `client_id`.
pub fn merge(deltas: &[AdapterDelta], strategy: MergeStrategy) -> Result<MergeOutcome> {
    let (mut delta, clustering) = match strategy {
        MergeStrategy::Avg => (merge_avg(deltas)?, None),
        MergeStrategy::Sum => (merge_sum(deltas)?, None),
        MergeStrategy::Ties(cfg) => (ties_merge(deltas, &cfg)?, None),
        MergeStrategy::Hierarchical { xi, ties } => {
            let h = merge_hierarchical(deltas, xi, &ties)?;
            (h.delta, Some(h.clustering))
        }
    };
    let mut labels: Vec<String> = deltas.iter().map(|d| d.metadata.label()).collect();
    labels.sort();
    delta.metadata.domain = strategy.to_string();
    delta.metadata.client_id = labels.join(",");
    Ok(MergeOutcome {
        delta,
        strategy,
        clustering,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InputRecord {
    pub label: String,
    pub digest: String,
}

/// Machine-readable summary of one merge. Inputs and clusters are listed by
/// label in sorted order, so the report does not depend on input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub strategy: String,
    pub xi: Option<f32>,
    pub density: Option<f32>,
    pub inputs: Vec<InputRecord>,
    pub clusters: Option<Vec<Vec<String>>>,
    pub output_digest: String,
}

impl MergeReport {
    pub fn new(inputs: &[AdapterDelta], outcome: &MergeOutcome) -> Result<Self> {
        let labels: Vec<String> = inputs.iter().map(|d| d.metadata.label()).collect();
        let mut records: Vec<InputRecord> = inputs
            .iter()
            .zip(&labels)
            .map(|(d, l)| {
                Ok(InputRecord {
                    label: l.clone(),
                    digest: delta_digest(d)?,
                })
            })
            .collect::<Result<_>>()?;
        records.sort();
        let clusters = outcome.clustering.as_ref().map(|c| {
            let mut groups: Vec<Vec<String>> = c
                .clusters
                .iter()
                .map(|members| {
                    let mut g: Vec<String> = members.iter().map(|&i| labels[i].clone()).collect();
                    g.sort();
                    g
                })
                .collect();
            groups.sort();
            groups
        });
        let (xi, density) = match outcome.strategy {
            MergeStrategy::Avg | MergeStrategy::Sum => (None, None),
            MergeStrategy::Ties(c) => (None, Some(c.density)),
            MergeStrategy::Hierarchical { xi, ties } => (Some(xi), Some(ties.density)),
        };
        Ok(Self {
            strategy: outcome.strategy.to_string(),
            xi,
            density,
            inputs: records,
            clusters,
            output_digest: delta_digest(&outcome.delta)?,
        })
    }
}
