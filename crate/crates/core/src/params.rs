//! Named parameter registry with frozen/trainable partitioning, the Adam/SGD
//! optimizer, and the central finite-difference gradient checker used as the
//! oracle for every analytic backward pass in the crate.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    pub trainable: bool,
    pub grad: Option<Tensor>,
    moment1: Option<Tensor>,
    moment2: Option<Tensor>,
}

/// Optimizer family. Adam is the training default; plain SGD keeps unit
/// tests exactly predictable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerMode {
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd,
}

impl Default for OptimizerMode {
    fn default() -> Self {
        OptimizerMode::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Map from parameter name to tensor plus trainable flag. Iteration order is
/// name-sorted, which keeps every downstream artifact reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                trainable,
                grad: None,
                moment1: None,
                moment2: None,
            },
        );
        Ok(())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        entry.trainable = trainable;
        Ok(())
    }

    /// Flip every entry to frozen; optimizer state is dropped.
    pub fn freeze_all(&mut self) {
        for entry in self.entries.values_mut() {
            entry.trainable = false;
            entry.grad = None;
            entry.moment1 = None;
            entry.moment2 = None;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Reset gradients of all trainable entries to zero tensors.
    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            if entry.trainable {
                entry.grad = Some(Tensor::zeros(entry.value.shape().to_vec()));
            }
        }
    }

    /// Accumulate `grad` into the slot of a trainable entry. Gradients
    /// arriving for frozen entries are dropped: embeddings and backbone
    /// weights sit on the far side of the trainable boundary.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if !entry.trainable {
            return Ok(());
        }
        if grad.shape() != entry.value.shape() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: entry.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        match &mut entry.grad {
            Some(g) => g.add_scaled(grad, 1.0)?,
            None => entry.grad = Some(grad.clone()),
        }
        Ok(())
    }

    /// Divide all present gradients by `factor` (batch averaging).
    pub fn scale_grads(&mut self, factor: f64) {
        for entry in self.entries.values_mut() {
            if let Some(g) = &mut entry.grad {
                *g = g.scale(factor);
            }
        }
    }

    /// One optimizer step over the trainable entries. Frozen entries are
    /// untouched by construction; the step counter always advances.
    pub fn optimizer_step(&mut self, lr: f64, mode: OptimizerMode) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::Degenerate {
                op: "optimizer_step",
                detail: format!("bad learning rate {lr}"),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        for (name, entry) in self.entries.iter_mut() {
            if !entry.trainable {
                continue;
            }
            let grad = entry
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            match mode {
                OptimizerMode::Sgd => {
                    let g = grad.clone();
                    entry.value.add_scaled(&g, -lr)?;
                }
                OptimizerMode::Adam { beta1, beta2, eps } => {
                    let m = entry
                        .moment1
                        .get_or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
                    for (mv, gv) in m.data_mut().iter_mut().zip(grad.data()) {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                    }
                    let v = entry
                        .moment2
                        .get_or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
                    for (vv, gv) in v.data_mut().iter_mut().zip(grad.data()) {
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                    }
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let m = entry.moment1.as_ref().unwrap();
                    let v = entry.moment2.as_ref().unwrap();
                    for ((val, mv), vv) in entry
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(m.data())
                        .zip(v.data())
                    {
                        let mhat = mv / bc1;
                        let vhat = vv / bc2;
                        *val -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            if !entry.value.all_finite() {
                return Err(Error::NonFinite("optimizer_step"));
            }
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of the selected entries, in name order.
    pub fn fingerprint<F: Fn(&str) -> bool>(&self, select: F) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        let mut mix = |byte: u8| {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        };
        for (name, entry) in &self.entries {
            if !select(name) {
                continue;
            }
            for b in name.as_bytes() {
                mix(*b);
            }
            for v in entry.value.data() {
                for b in v.to_bits().to_le_bytes() {
                    mix(b);
                }
            }
        }
        hash
    }

    pub fn fingerprint_all(&self) -> u64 {
        self.fingerprint(|_| true)
    }

    pub(crate) fn entries(&self) -> &BTreeMap<String, ParamEntry> {
        &self.entries
    }

    pub(crate) fn insert_raw(&mut self, name: String, value: Tensor, trainable: bool) {
        self.entries.insert(
            name,
            ParamEntry {
                value,
                trainable,
                grad: None,
                moment1: None,
                moment2: None,
            },
        );
    }
}

/// Per-parameter outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.values().cloned().fold(0.0, f64::max)
    }
}

/// Compare analytic gradients already stored in `params` against central
/// finite differences of `f`. Frozen entries are excluded from the report.
///
/// Relative error per scalar: |a - n| / max(|a|, |n|, 1e-8).
pub fn grad_check<F>(mut f: F, params: &mut ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Degenerate {
            op: "grad_check",
            detail: format!("eps {eps} outside [1e-7, 1e-3]"),
        });
    }
    let names = params.trainable_names();
    let mut per_param = BTreeMap::new();
    for name in names {
        let len = params.value(&name)?.len();
        let analytic = params
            .entry(&name)?
            .grad
            .clone()
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        let mut worst = 0.0f64;
        for idx in 0..len {
            let original = params.value(&name)?.data()[idx];
            params.value_mut(&name)?.data_mut()[idx] = original + eps;
            let plus = f(params)?;
            params.value_mut(&name)?.data_mut()[idx] = original - eps;
            let minus = f(params)?;
            params.value_mut(&name)?.data_mut()[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("grad_check"));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        per_param.insert(name, worst);
    }
    Ok(GradCheckReport { per_param })
}

/// Xavier-uniform initialization from a seeded generator.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("xavier shape")
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
