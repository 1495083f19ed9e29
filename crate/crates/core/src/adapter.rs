//! Adapter deltas: named parameter updates stored dense or as LoRA factors.
//!
//! All arithmetic here is pure. Deltas are recovered to dense before any
//! combination, and deltas with different name sets are aligned by treating
//! missing tensors as zeros (adapters may target different layers).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, ModelParams, TensorF32};

/// LoRA factors for one weight: `W' = W + (alpha / rank) * down * up`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    /// `B`, shape `(d, r)`.
    pub down: TensorF32,
    /// `A`, shape `(r, d')`.
    pub up: TensorF32,
    pub rank: usize,
    pub alpha: f32,
}

impl LoraFactors {
    pub fn new(down: TensorF32, up: TensorF32, rank: usize, alpha: f32) -> Result<Self> {
        let factors = Self {
            down,
            up,
            rank,
            alpha,
        };
        factors.validate("lora")?;
        Ok(factors)
    }

    pub(crate) fn validate(&self, name: &str) -> Result<()> {
        let shape_err = || Error::FactorShape {
            name: name.to_string(),
            down: self.down.shape().to_vec(),
            up: self.up.shape().to_vec(),
            rank: self.rank,
        };
        let (Some((_, dr)), Some((ur, _))) = (self.down.dims2(), self.up.dims2()) else {
            return Err(shape_err());
        };
        if self.rank == 0 || dr != self.rank || ur != self.rank {
            return Err(shape_err());
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "LoRA alpha for `{name}` must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        f64::from(self.alpha) / self.rank as f64
    }

    /// Shape of the recovered dense update.
    pub fn dense_shape(&self) -> Vec<usize> {
        vec![self.down.shape()[0], self.up.shape()[1]]
    }

    /// `(alpha / rank) * down * up`, accumulated in f64.
    pub fn to_dense(&self, name: &str) -> Result<TensorF32> {
        self.validate(name)?;
        let (rows, r) = self.down.dims2().expect("validated");
        let (_, cols) = self.up.dims2().expect("validated");
        let (b, a) = (self.down.data(), self.up.data());
        let scale = self.scale();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let mut acc = 0.0f64;
                for k in 0..r {
                    acc += f64::from(b[i * r + k]) * f64::from(a[k * cols + j]);
                }
                out.push((acc * scale) as f32);
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("recovered `{name}`")));
        }
        TensorF32::new(vec![rows, cols], out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeltaEntry {
    Dense(TensorF32),
    Lora(LoraFactors),
}

impl DeltaEntry {
    pub fn dense_shape(&self) -> Vec<usize> {
        match self {
            DeltaEntry::Dense(t) => t.shape().to_vec(),
            DeltaEntry::Lora(f) => f.dense_shape(),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, DeltaEntry::Dense(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Unlearn,
    Retain,
    Merged,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Unlearn => "unlearn",
            Role::Retain => "retain",
            Role::Merged => "merged",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unlearn" => Some(Role::Unlearn),
            "retain" => Some(Role::Retain),
            "merged" => Some(Role::Merged),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaMetadata {
    pub role: Role,
    pub domain: String,
    pub client_id: String,
}

impl DeltaMetadata {
    pub fn new(role: Role, domain: impl Into<String>, client_id: impl Into<String>) -> Self {
        Self {
            role,
            domain: domain.into(),
            client_id: client_id.into(),
        }
    }

    pub fn merged() -> Self {
        Self::new(Role::Merged, "", "")
    }

    /// `client_id/role`, used to label uploads in reports and matrices.
    pub fn label(&self) -> String {
        format!("{}/{}", self.client_id, self.role)
    }
}

/// A parameter update ∇θ, the unit of federation and merging.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterDelta {
    pub entries: BTreeMap<String, DeltaEntry>,
    pub metadata: DeltaMetadata,
}

impl AdapterDelta {
    pub fn new(metadata: DeltaMetadata) -> Self {
        Self {
            entries: BTreeMap::new(),
            metadata,
        }
    }

    pub fn with_dense(mut self, name: impl Into<String>, tensor: TensorF32) -> Self {
        self.entries.insert(name.into(), DeltaEntry::Dense(tensor));
        self
    }

    pub fn with_lora(mut self, name: impl Into<String>, factors: LoraFactors) -> Self {
        self.entries.insert(name.into(), DeltaEntry::Lora(factors));
        self
    }

    pub fn is_dense(&self) -> bool {
        self.entries.values().all(DeltaEntry::is_dense)
    }

    pub fn dense(&self, name: &str) -> Option<&TensorF32> {
        match self.entries.get(name) {
            Some(DeltaEntry::Dense(t)) => Some(t),
            _ => None,
        }
    }

    /// Dense-recovered shape per tensor name.
    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.dense_shape()))
            .collect()
    }

    /// Total number of coordinates after dense recovery.
    pub fn num_coords(&self) -> usize {
        self.entries.values().map(|e| numel(&e.dense_shape())).sum()
    }

    /// Identical name sets and identical dense shapes per name.
    pub fn is_shape_compatible(&self, other: &AdapterDelta) -> bool {
        self.shapes() == other.shapes()
    }

    /// Euclidean norm of the dense-recovered delta.
    pub fn l2_norm(&self) -> Result<f64> {
        let dense = recover_dense(self)?;
        Ok(dense
            .entries
            .values()
            .map(|e| match e {
                DeltaEntry::Dense(t) => t.l2_norm().powi(2),
                DeltaEntry::Lora(_) => unreachable!("recovered"),
            })
            .sum::<f64>()
            .sqrt())
    }

    /// A dense all-zero delta with the given tensor shapes.
    pub fn zeros(shapes: &BTreeMap<String, Vec<usize>>, metadata: DeltaMetadata) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (name, shape) in shapes {
            entries.insert(name.clone(), DeltaEntry::Dense(TensorF32::zeros(shape.clone())?));
        }
        Ok(Self { entries, metadata })
    }
}

/// Replaces every LoRA entry by its dense update `(alpha / rank) * B * A`.
pub fn recover_dense(delta: &AdapterDelta) -> Result<AdapterDelta> {
    let mut entries = BTreeMap::new();
    for (name, entry) in &delta.entries {
        let dense = match entry {
            DeltaEntry::Dense(t) => t.clone(),
            DeltaEntry::Lora(f) => f.to_dense(name)?,
        };
        entries.insert(name.clone(), DeltaEntry::Dense(dense));
    }
    Ok(AdapterDelta {
        entries,
        metadata: delta.metadata.clone(),
    })
}

/// Concatenates all tensors in lexicographic name order.
pub fn flatten(delta: &AdapterDelta) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(delta.num_coords());
    for (name, entry) in &delta.entries {
        match entry {
            DeltaEntry::Dense(t) => out.extend_from_slice(t.data()),
            DeltaEntry::Lora(_) => return Err(Error::NotRecovered(name.clone())),
        }
    }
    Ok(out)
}

/// Inverse of [`flatten`] for the given name-ordered shapes.
pub fn unflatten(
    flat: &[f32],
    shapes: &BTreeMap<String, Vec<usize>>,
    metadata: DeltaMetadata,
) -> Result<AdapterDelta> {
    let total: usize = shapes.values().map(|s| numel(s)).sum();
    if total != flat.len() {
        return Err(Error::InvalidShape {
            shape: vec![total],
            len: flat.len(),
        });
    }
    let mut entries = BTreeMap::new();
    let mut at = 0;
    for (name, shape) in shapes {
        let n = numel(shape);
        let t = TensorF32::new(shape.clone(), flat[at..at + n].to_vec())?;
        entries.insert(name.clone(), DeltaEntry::Dense(t));
        at += n;
    }
    Ok(AdapterDelta { entries, metadata })
}

/// Recovers every delta to dense and zero-fills tensors missing from some
/// deltas so all share the union name set. Same-named tensors must agree in
/// shape.
pub fn align(deltas: &[AdapterDelta]) -> Result<Vec<AdapterDelta>> {
    let dense: Vec<AdapterDelta> = deltas.iter().map(recover_dense).collect::<Result<_>>()?;
    let mut union: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for d in &dense {
        for (name, entry) in &d.entries {
            let shape = entry.dense_shape();
            match union.get(name) {
                Some(existing) if *existing != shape => {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: existing.clone(),
                        found: shape,
                    })
                }
                Some(_) => {}
                None => {
                    union.insert(name.clone(), shape);
                }
            }
        }
    }
    dense
        .into_iter()
        .map(|mut d| {
            for (name, shape) in &union {
                if !d.entries.contains_key(name) {
                    d.entries.insert(
                        name.clone(),
                        DeltaEntry::Dense(TensorF32::zeros(shape.clone())?),
                    );
                }
            }
            Ok(d)
        })
        .collect()
}

/// Sums per-coordinate terms in a canonical (value-sorted) order so the
/// result does not depend on the order of the inputs.
pub(crate) fn canonical_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// Elementwise `Σ wᵢ·δᵢ`. Each product is exact in f64; the sum is taken in
/// value-sorted order, so the output is bitwise invariant under paired
/// permutation of `(deltas, weights)`.
pub fn linear_combine(deltas: &[AdapterDelta], weights: &[f32]) -> Result<AdapterDelta> {
    if deltas.is_empty() {
        return Err(Error::EmptyInput);
    }
    if deltas.len() != weights.len() {
        return Err(Error::InvalidConfig(format!(
            "{} deltas but {} weights",
            deltas.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("merge weights".into()));
    }
    let aligned = align(deltas)?;
    let flats: Vec<Vec<f32>> = aligned.iter().map(flatten).collect::<Result<_>>()?;
    let mut terms = vec![0.0f64; flats.len()];
    let out: Vec<f32> = (0..flats[0].len())
        .map(|i| {
            for (slot, (flat, &w)) in terms.iter_mut().zip(flats.iter().zip(weights)) {
                *slot = f64::from(w) * f64::from(flat[i]);
            }
            canonical_sum(&mut terms) as f32
        })
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear combination".into()));
    }
    unflatten(&out, &aligned[0].shapes(), DeltaMetadata::merged())
}

/// `base + delta` per tensor; tensors of `base` absent from `delta` pass
/// through. LoRA entries are recovered first.
pub fn apply_delta(base: &ModelParams, delta: &AdapterDelta) -> Result<ModelParams> {
    let dense = recover_dense(delta)?;
    let mut out = base.clone();
    for (name, entry) in &dense.entries {
        let DeltaEntry::Dense(d) = entry else {
            unreachable!("recovered")
        };
        let target = out
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
        if target.shape() != d.shape() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: target.shape().to_vec(),
                found: d.shape().to_vec(),
            });
        }
        let summed: Vec<f32> = target
            .data()
            .iter()
            .zip(d.data())
            .map(|(a, b)| a + b)
            .collect();
        if summed.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("updated `{name}`")));
        }
        *target = target.with_data(summed)?;
    }
    Ok(out)
}
