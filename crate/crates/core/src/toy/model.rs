//! A two-layer rectifier classifier with frozen base weights and trainable
//! LoRA factors on both weight matrices. Arithmetic is f64 throughout so
//! analytic gradients can be checked against finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterDelta, DeltaMetadata, LoraFactors};
use crate::error::{Error, Result};
use crate::tensor::{ModelParams, TensorF32};
use crate::toy::task::Dataset;

pub const W1: &str = "w1";
pub const B1: &str = "b1";
pub const W2: &str = "w2";
pub const B2: &str = "b2";

fn default_rank() -> usize {
    2
}
fn default_alpha() -> f32 {
    4.0
}

/// LoRA shape and initialization. Clients that share `init_seed` start from
/// the same `up` factors, as adapters initialized from one broadcast would.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: default_rank(),
            alpha: default_alpha(),
            init_seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "LoRA needs rank ≥ 1 and alpha > 0, got rank {} alpha {}",
                self.rank, self.alpha
            )));
        }
        Ok(())
    }
}

/// `W + scale * down * up` for a `(rows, cols)` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub rows: usize,
    pub cols: usize,
    /// `(rows, rank)`
    pub down: Vec<f64>,
    /// `(rank, cols)`
    pub up: Vec<f64>,
}

impl LoraPair {
    fn init(rows: usize, cols: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        Self {
            rows,
            cols,
            down: vec![0.0; rows * rank],
            up: (0..rank * cols).map(|_| rng.random_range(-bound..bound)).collect(),
        }
    }

    fn product(&self, rank: usize, scale: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for k in 0..rank {
                let b = self.down[i * rank + k] * scale;
                if b == 0.0 {
                    continue;
                }
                let up = &self.up[k * self.cols..(k + 1) * self.cols];
                for (o, a) in out[i * self.cols..(i + 1) * self.cols].iter_mut().zip(up) {
                    *o += b * a;
                }
            }
        }
        out
    }

    /// Gradients of both factors given the gradient of the effective weight.
    fn backward(&self, grad_w: &[f64], rank: usize, scale: f64) -> (Vec<f64>, Vec<f64>) {
        let mut g_down = vec![0.0; self.rows * rank];
        let mut g_up = vec![0.0; rank * self.cols];
        for i in 0..self.rows {
            let gw = &grad_w[i * self.cols..(i + 1) * self.cols];
            for k in 0..rank {
                let up = &self.up[k * self.cols..(k + 1) * self.cols];
                g_down[i * rank + k] = scale * gw.iter().zip(up).map(|(g, a)| g * a).sum::<f64>();
                let b = scale * self.down[i * rank + k];
                for (gu, g) in g_up[k * self.cols..(k + 1) * self.cols].iter_mut().zip(gw) {
                    *gu += b * g;
                }
            }
        }
        (g_down, g_up)
    }

    fn factors(&self, rank: usize, alpha: f32) -> Result<LoraFactors> {
        let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        LoraFactors::new(
            TensorF32::new(vec![self.rows, rank], to32(&self.down))?,
            TensorF32::new(vec![rank, self.cols], to32(&self.up))?,
            rank,
            alpha,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
    /// `(hidden, input)`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `(classes, hidden)`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub lora: LoraConfig,
    pub lora1: LoraPair,
    pub lora2: LoraPair,
}

/// Intermediate values of one forward pass over a batch.
pub struct Forward {
    /// `(n, hidden)` pre-activations.
    pub pre: Vec<f64>,
    /// `(n, hidden)` rectified activations.
    pub hidden: Vec<f64>,
    /// `(n, classes)`
    pub logits: Vec<f64>,
}

/// Gradients with respect to the effective weights and the biases.
pub struct DenseGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ToyModel {
    /// Random base weights (He-style scaling) with fresh LoRA factors.
    pub fn init(input: usize, hidden: usize, classes: usize, seed: u64, lora: LoraConfig) -> Result<Self> {
        lora.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, fan_in: usize| -> Vec<f64> {
            let s = (2.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s * z
                })
                .collect()
        };
        let w1 = normal(hidden * input, input);
        let w2 = normal(classes * hidden, hidden);
        let mut model = Self {
            input,
            hidden,
            classes,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; classes],
            lora,
            lora1: LoraPair {
                rows: hidden,
                cols: input,
                down: vec![],
                up: vec![],
            },
            lora2: LoraPair {
                rows: classes,
                cols: hidden,
                down: vec![],
                up: vec![],
            },
        };
        model.reset_lora(lora)?;
        Ok(model)
    }

    /// Base weights from parameters named `w1`, `b1`, `w2`, `b2`.
    pub fn from_params(params: &ModelParams, lora: LoraConfig) -> Result<Self> {
        let get = |name: &str| {
            params
                .get(name)
                .ok_or_else(|| Error::UnknownTensor(name.to_string()))
        };
        let (w1, b1, w2, b2) = (get(W1)?, get(B1)?, get(W2)?, get(B2)?);
        let (hidden, input) = w1
            .dims2()
            .ok_or_else(|| Error::InvalidConfig("w1 must be 2-D".into()))?;
        let (classes, h2) = w2
            .dims2()
            .ok_or_else(|| Error::InvalidConfig("w2 must be 2-D".into()))?;
        if h2 != hidden || b1.len() != hidden || b2.len() != classes {
            return Err(Error::InvalidConfig("inconsistent toy model parameter shapes".into()));
        }
        let widen = |t: &TensorF32| t.data().iter().map(|&v| f64::from(v)).collect::<Vec<f64>>();
        let mut model = Self {
            input,
            hidden,
            classes,
            w1: widen(w1),
            b1: widen(b1),
            w2: widen(w2),
            b2: widen(b2),
            lora,
            lora1: LoraPair {
                rows: hidden,
                cols: input,
                down: vec![],
                up: vec![],
            },
            lora2: LoraPair {
                rows: classes,
                cols: hidden,
                down: vec![],
                up: vec![],
            },
        };
        model.reset_lora(lora)?;
        Ok(model)
    }

    /// Fresh LoRA factors: zero `down`, seeded uniform `up`.
    pub fn reset_lora(&mut self, lora: LoraConfig) -> Result<()> {
        lora.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(lora.init_seed);
        self.lora = lora;
        self.lora1 = LoraPair::init(self.hidden, self.input, lora.rank, &mut rng);
        self.lora2 = LoraPair::init(self.classes, self.hidden, lora.rank, &mut rng);
        Ok(())
    }

    /// Base weights only, as f32 parameters.
    pub fn to_params(&self) -> Result<ModelParams> {
        let narrow = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let mut p = ModelParams::new();
        p.insert(W1, TensorF32::new(vec![self.hidden, self.input], narrow(&self.w1))?);
        p.insert(B1, TensorF32::new(vec![self.hidden], narrow(&self.b1))?);
        p.insert(W2, TensorF32::new(vec![self.classes, self.hidden], narrow(&self.w2))?);
        p.insert(B2, TensorF32::new(vec![self.classes], narrow(&self.b2))?);
        Ok(p)
    }

    pub fn scale(&self) -> f64 {
        f64::from(self.lora.alpha) / self.lora.rank as f64
    }

    pub fn effective_w1(&self) -> Vec<f64> {
        let d = self.lora1.product(self.lora.rank, self.scale());
        self.w1.iter().zip(d).map(|(w, d)| w + d).collect()
    }

    pub fn effective_w2(&self) -> Vec<f64> {
        let d = self.lora2.product(self.lora.rank, self.scale());
        self.w2.iter().zip(d).map(|(w, d)| w + d).collect()
    }

    pub fn forward(&self, batch: &Dataset) -> Forward {
        let (n, h, c, d) = (batch.len(), self.hidden, self.classes, self.input);
        let (w1, w2) = (self.effective_w1(), self.effective_w2());
        let mut pre = vec![0.0; n * h];
        let mut hid = vec![0.0; n * h];
        let mut logits = vec![0.0; n * c];
        for s in 0..n {
            let x = batch.row(s);
            for j in 0..h {
                let row = &w1[j * d..(j + 1) * d];
                let z = self.b1[j] + row.iter().zip(x).map(|(w, &x)| w * f64::from(x)).sum::<f64>();
                pre[s * h + j] = z;
                hid[s * h + j] = z.max(0.0);
            }
            let hs = &hid[s * h..(s + 1) * h];
            for k in 0..c {
                let row = &w2[k * h..(k + 1) * h];
                logits[s * c + k] = self.b2[k] + row.iter().zip(hs).map(|(w, a)| w * a).sum::<f64>();
            }
        }
        Forward {
            pre,
            hidden: hid,
            logits,
        }
    }

    /// Backpropagates `d_logits` (n × classes) and `d_hidden` (n × hidden,
    /// added to the gradient arriving from the output layer).
    pub fn backward(
        &self,
        batch: &Dataset,
        fwd: &Forward,
        d_logits: Option<&[f64]>,
        d_hidden: Option<&[f64]>,
    ) -> DenseGrads {
        let (n, h, c, d) = (batch.len(), self.hidden, self.classes, self.input);
        let w2 = self.effective_w2();
        let mut g = DenseGrads {
            w1: vec![0.0; h * d],
            b1: vec![0.0; h],
            w2: vec![0.0; c * h],
            b2: vec![0.0; c],
        };
        let mut dh = vec![0.0; h];
        for s in 0..n {
            dh.iter_mut().for_each(|v| *v = 0.0);
            if let Some(dl) = d_logits {
                let hs = &fwd.hidden[s * h..(s + 1) * h];
                for k in 0..c {
                    let gk = dl[s * c + k];
                    if gk == 0.0 {
                        continue;
                    }
                    g.b2[k] += gk;
                    for j in 0..h {
                        g.w2[k * h + j] += gk * hs[j];
                        dh[j] += gk * w2[k * h + j];
                    }
                }
            }
            if let Some(dhid) = d_hidden {
                for j in 0..h {
                    dh[j] += dhid[s * h + j];
                }
            }
            let x = batch.row(s);
            for (j, &dz) in dh.iter().enumerate() {
                if fwd.pre[s * h + j] <= 0.0 {
                    continue;
                }
                g.b1[j] += dz;
                for (gw, &xi) in g.w1[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *gw += dz * f64::from(xi);
                }
            }
        }
        g
    }

    /// Number of trainable LoRA scalars.
    pub fn num_lora_params(&self) -> usize {
        self.lora1.down.len() + self.lora1.up.len() + self.lora2.down.len() + self.lora2.up.len()
    }

    /// LoRA parameters flattened as `[down1, up1, down2, up2]`.
    pub fn lora_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_lora_params());
        v.extend(&self.lora1.down);
        v.extend(&self.lora1.up);
        v.extend(&self.lora2.down);
        v.extend(&self.lora2.up);
        v
    }

    pub fn set_lora_params(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.num_lora_params());
        let mut at = 0;
        for slot in [
            &mut self.lora1.down,
            &mut self.lora1.up,
            &mut self.lora2.down,
            &mut self.lora2.up,
        ] {
            let n = slot.len();
            slot.copy_from_slice(&v[at..at + n]);
            at += n;
        }
    }

    /// Maps dense weight gradients onto the LoRA parameter layout.
    pub fn lora_grads(&self, g: &DenseGrads) -> Vec<f64> {
        let (r, s) = (self.lora.rank, self.scale());
        let (d1, u1) = self.lora1.backward(&g.w1, r, s);
        let (d2, u2) = self.lora2.backward(&g.w2, r, s);
        let mut v = Vec::with_capacity(self.num_lora_params());
        v.extend(d1);
        v.extend(u1);
        v.extend(d2);
        v.extend(u2);
        v
    }

    /// Random nonzero LoRA factors, for gradient checks.
    pub fn randomize_lora(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..self.num_lora_params())
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        self.set_lora_params(&v);
    }

    /// The trained LoRA factors as an adapter delta over `w1` and `w2`.
    pub fn adapter(&self, metadata: DeltaMetadata) -> Result<AdapterDelta> {
        let (r, a) = (self.lora.rank, self.lora.alpha);
        Ok(AdapterDelta::new(metadata)
            .with_lora(W1, self.lora1.factors(r, a)?)
            .with_lora(W2, self.lora2.factors(r, a)?))
    }

    pub fn predict(&self, batch: &Dataset) -> Vec<usize> {
        let fwd = self.forward(batch);
        fwd.logits
            .chunks(self.classes)
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}
