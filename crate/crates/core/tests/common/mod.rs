//! Independent reference implementations and fixtures shared by the
//! integration and acceptance tests. Nothing here calls the code under test
//! to compute an expected value.
#![allow(dead_code)]

pub mod fixtures;

use fulm_core::toy::{Dataset, LoraConfig, ToyModel};
use fulm_core::{AdapterDelta, DeltaMetadata, LoraFactors, Role, TensorF32};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn meta(client: &str) -> DeltaMetadata {
    DeltaMetadata::new(Role::Unlearn, "d", client)
}

/// A single-tensor dense delta `w` of shape `(1, n)`.
pub fn flat_delta(values: &[f32], client: &str) -> AdapterDelta {
    AdapterDelta::new(meta(client)).with_dense("w", TensorF32::new(vec![1, values.len()], values.to_vec()).unwrap())
}

/// A value whose magnitude lies in `[2^-8, 2^8)`, or zero. Sums of up to a
/// few hundred such f32 values are exact in f64, so any summation order
/// yields the same result.
pub fn exact_value(rng: &mut ChaCha8Rng) -> f32 {
    match rng.random_range(0..10) {
        0 => 0.0,
        1 => rng.random_range(-4i32..=4) as f32,
        _ => {
            let mag = 2f32.powf(rng.random_range(-8.0f32..8.0));
            if rng.random() {
                mag
            } else {
                -mag
            }
        }
    }
}

/// Random dense delta over tensors `a` and `b` with `n` coordinates total,
/// drawn from [`exact_value`]. Magnitudes are often repeated across
/// coordinates to exercise the tie-break rule.
pub fn exact_delta(rng: &mut ChaCha8Rng, n: usize, client: &str) -> AdapterDelta {
    let pool: Vec<f32> = (0..n.div_ceil(2).max(1)).map(|_| exact_value(rng)).collect();
    let values: Vec<f32> = (0..n)
        .map(|_| {
            let v = pool[rng.random_range(0..pool.len())];
            if rng.random() {
                v
            } else {
                -v
            }
        })
        .collect();
    let split = n / 2;
    let mut d = AdapterDelta::new(meta(client));
    if split > 0 {
        d = d.with_dense("a", TensorF32::new(vec![split], values[..split].to_vec()).unwrap());
    }
    d.with_dense("b", TensorF32::new(vec![n - split], values[split..].to_vec()).unwrap())
}

/// Row-major data of the tensors of a dense delta, in name order.
pub fn values(d: &AdapterDelta) -> Vec<f32> {
    d.entries
        .keys()
        .flat_map(|name| d.dense(name).expect("dense").data().to_vec())
        .collect()
}

/// Row-major `(n, k) x (k, m)` product by the textbook triple loop.
pub fn naive_matmul(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * m];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i * m + j] += f64::from(a[i * k + t]) * f64::from(b[t * m + j]);
            }
        }
    }
    out
}

/// Brute-force TIES over flat vectors with `density = num / den`.
///
/// Trim: coordinate `i` survives iff fewer than `k = ⌈N·num/den⌉` other
/// coordinates outrank it, where `j` outranks `i` when `|v_j| > |v_i|` or the
/// magnitudes tie and `j < i`. Election: sign of the total over the trimmed
/// values. Merge: mean of the trimmed nonzero values carrying that sign.
pub fn ties_reference(inputs: &[Vec<f32>], num: usize, den: usize) -> Vec<f32> {
    let n = inputs[0].len();
    let k = (n * num).div_ceil(den);
    let trimmed: Vec<Vec<f32>> = inputs
        .iter()
        .map(|v| {
            (0..n)
                .map(|i| {
                    let outranked_by = (0..n)
                        .filter(|&j| v[j].abs() > v[i].abs() || (v[j].abs() == v[i].abs() && j < i))
                        .count();
                    if outranked_by < k {
                        v[i]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            let mass: f64 = trimmed.iter().map(|t| f64::from(t[i])).sum();
            let elected = if mass > 0.0 {
                1.0
            } else if mass < 0.0 {
                -1.0
            } else {
                return 0.0;
            };
            let agreeing: Vec<f64> = trimmed
                .iter()
                .map(|t| f64::from(t[i]))
                .filter(|&v| v != 0.0 && v.signum() == elected)
                .collect();
            if agreeing.is_empty() {
                0.0
            } else {
                (agreeing.iter().sum::<f64>() / agreeing.len() as f64) as f32
            }
        })
        .collect()
}

pub const FD_EPS: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central finite difference of `f` at coordinate `i` of `x`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += FD_EPS;
    minus[i] -= FD_EPS;
    (f(&plus) - f(&minus)) / (2.0 * FD_EPS)
}

/// A loss and its LoRA gradient as a function of the model.
pub type LossFn<'a> = Box<dyn Fn(&ToyModel) -> (f64, Vec<f64>) + 'a>;

/// Largest relative error between analytic and central-difference
/// gradients over every LoRA coordinate.
pub fn worst_gradient_error(loss: &dyn Fn(&ToyModel) -> (f64, Vec<f64>), model: &ToyModel) -> f64 {
    let x = model.lora_params();
    let (_, analytic) = loss(model);
    let f = |p: &[f64]| {
        let mut m = model.clone();
        m.set_lora_params(p);
        loss(&m).0
    };
    (0..x.len())
        .map(|i| rel_error(analytic[i], central_difference(&f, &x, i)))
        .fold(0.0, f64::max)
}

/// Small random model with nonzero LoRA factors in both layers.
pub fn random_model(seed: u64, input: usize, hidden: usize, classes: usize) -> ToyModel {
    let lora = LoraConfig {
        rank: 2,
        alpha: 4.0,
        init_seed: seed,
    };
    let mut model = ToyModel::init(input, hidden, classes, seed, lora).unwrap();
    model.randomize_lora(seed.wrapping_add(1), 0.3);
    model
}

/// Standard-normal-ish inputs with uniform random labels.
pub fn random_batch(seed: u64, n: usize, dim: usize, classes: usize) -> Dataset {
    let mut r = rng(seed);
    let mut ds = Dataset::new(dim);
    for _ in 0..n {
        let x: Vec<f32> = (0..dim).map(|_| r.random_range(-1.5f32..1.5)).collect();
        ds.push(&x, r.random_range(0..classes));
    }
    ds
}

/// Fraction of `predicted` equal to `labels`, counted directly.
pub fn direct_accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

fn tensor(shape: &[usize], data: &[f32]) -> TensorF32 {
    TensorF32::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Delta with dense, LoRA and 1-d entries and a role chosen by `client`.
pub fn random_mixed_delta(r: &mut ChaCha8Rng, client: &str) -> AdapterDelta {
    let mut v = |n: usize| -> Vec<f32> { (0..n).map(|_| r.random_range(-3.0f32..3.0)).collect() };
    let (dense, down, up, bias) = (v(12), v(8), v(6), v(5));
    let role = if client.len().is_multiple_of(2) { Role::Unlearn } else { Role::Retain };
    AdapterDelta::new(fulm_core::DeltaMetadata::new(role, format!("dom-{client}"), client))
        .with_dense("dense", tensor(&[3, 4], &dense))
        .with_lora("lora", LoraFactors::new(tensor(&[4, 2], &down), tensor(&[2, 3], &up), 2, 8.0).unwrap())
        .with_dense("bias", tensor(&[5], &bias))
}

/// Rebuilds a container with an edited JSON header and the original payload.
pub fn with_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + h]).unwrap();
    edit(&mut header);
    let mut json = serde_json::to_vec(&header).unwrap();
    while !(16 + json.len()).is_multiple_of(8) {
        json.push(b' ');
    }
    let mut out = b"FULM".to_vec();
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[16 + h..]);
    out
}
