//! Cosine similarity between adapter deltas and ξ-threshold clustering.

use serde::{Deserialize, Serialize};

use crate::adapter::{align, flatten, AdapterDelta};
use crate::error::{Error, Result};

pub const DEFAULT_XI: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f32>>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i][j]
    }

    /// Labels as header row and column, values with 6 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(&self.values) {
            out.push_str(label);
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// A partition of adapter indices; clusters ordered by smallest member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub xi: f32,
    pub clusters: Vec<Vec<usize>>,
}

fn cosine_flat(a: &[f32], b: &[f32]) -> f32 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32
}

/// Cosine of the flattened dense deltas over the zero-filled union of their
/// tensor names. Zero-norm inputs give 0.
pub fn cosine(a: &AdapterDelta, b: &AdapterDelta) -> Result<f32> {
    let aligned = align(&[a.clone(), b.clone()])?;
    Ok(cosine_flat(&flatten(&aligned[0])?, &flatten(&aligned[1])?))
}

/// Full symmetric matrix of pairwise cosines, labelled `client_id/role`.
pub fn similarity_matrix(deltas: &[AdapterDelta]) -> Result<SimilarityMatrix> {
    let labels = deltas.iter().map(|d| d.metadata.label()).collect();
    similarity_matrix_labeled(deltas, labels)
}

pub fn similarity_matrix_labeled(
    deltas: &[AdapterDelta],
    labels: Vec<String>,
) -> Result<SimilarityMatrix> {
    if deltas.is_empty() {
        return Err(Error::EmptyInput);
    }
    let aligned = align(deltas)?;
    let flats: Vec<Vec<f32>> = aligned.iter().map(flatten).collect::<Result<_>>()?;
    let k = flats.len();
    let mut values = vec![vec![0.0f32; k]; k];
    for i in 0..k {
        for j in i..k {
            let c = cosine_flat(&flats[i], &flats[j]);
            values[i][j] = c;
            values[j][i] = c;
        }
    }
    Ok(SimilarityMatrix { labels, values })
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Connected components of the graph with an edge wherever similarity ≥ ξ.
pub fn cluster(matrix: &SimilarityMatrix, xi: f32) -> Result<Clustering> {
    if xi.is_nan() || xi <= 0.0 {
        return Err(Error::InvalidThreshold(xi));
    }
    let k = matrix.values.len();
    let mut parent: Vec<usize> = (0..k).collect();
    for i in 0..k {
        for j in (i + 1)..k {
            if matrix.values[i][j] >= xi {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; k];
    for i in 0..k {
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[slot[root]].push(i);
    }
    Ok(Clustering { xi, clusters })
}
