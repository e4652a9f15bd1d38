use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Element-wise update gate: 1 trains the entry, 0 freezes it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterMask {
    mask: Tensor,
}

impl ParameterMask {
    pub fn new(mask: Tensor) -> Result<Self> {
        if let Some(bad) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain(format!("mask entries must be 0 or 1, found {bad}")));
        }
        Ok(ParameterMask { mask })
    }

    pub fn ones(shape: &[usize]) -> Self {
        ParameterMask {
            mask: Tensor::full(shape, 1.0),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        ParameterMask {
            mask: Tensor::zeros(shape),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mask
    }

    pub fn shape(&self) -> &[usize] {
        self.mask.shape()
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.mask.data()[i] == 1.0
    }
}

fn check_step(theta: &Tensor, grad: Option<&Tensor>, mask: &ParameterMask) -> Result<()> {
    let grad = grad.ok_or_else(|| Error::Usage("gradient not populated".into()))?;
    if grad.shape() != theta.shape() || mask.shape() != theta.shape() {
        return Err(Error::Shape(format!(
            "parameter {:?}, gradient {:?}, mask {:?}",
            theta.shape(),
            grad.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

/// One masked descent step, `theta - eta * (grad ⊙ mask)`.
///
/// Frozen entries are copied, never recomputed, so they stay bit-identical
/// even when the gradient is not finite.
pub fn masked_sgd_step(
    theta: &Tensor,
    grad: Option<&Tensor>,
    mask: &ParameterMask,
    eta: f64,
) -> Result<Tensor> {
    check_step(theta, grad, mask)?;
    let grad = grad.unwrap();
    let mut out = theta.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask.is_trainable(i) {
            *v -= eta * grad.data()[i];
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            max_epochs: 100,
            seed: 0,
            batch_size: 16,
            optimizer: OptimizerKind::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Domain(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Domain("max_epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub mask: ParameterMask,
}

/// Named trainable tensors with their update masks.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let mask = ParameterMask::ones(value.shape());
        self.add_masked(name, value, mask)
    }

    pub fn add_masked(&mut self, name: &str, value: Tensor, mask: ParameterMask) -> ParamId {
        assert_eq!(mask.shape(), value.shape(), "mask shape for {name}");
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            mask,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Puts every parameter on `tape` as a gradient-tracked leaf, in insertion order.
    pub fn attach<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
    }
}

/// Masked first-order optimiser over a [`ParamStore`].
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Optimizer {
            kind,
            lr,
            steps: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Usage(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.steps += 1;
        for (k, (p, g)) in store.params.iter_mut().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Sgd { momentum } if momentum == 0.0 => {
                    p.value = masked_sgd_step(&p.value, Some(g), &p.mask, self.lr)?;
                }
                OptimizerKind::Sgd { momentum } => {
                    check_step(&p.value, Some(g), &p.mask)?;
                    let vel = &mut self.first[k];
                    for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                        if p.mask.is_trainable(i) {
                            vel[i] = momentum * vel[i] + g.data()[i];
                            *v -= self.lr * vel[i];
                        }
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    check_step(&p.value, Some(g), &p.mask)?;
                    let t = self.steps as i32;
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    let (m, s) = (&mut self.first[k], &mut self.second[k]);
                    for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                        if p.mask.is_trainable(i) {
                            let gi = g.data()[i];
                            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                            s[i] = beta2 * s[i] + (1.0 - beta2) * gi * gi;
                            *v -= self.lr * (m[i] / c1) / ((s[i] / c2).sqrt() + eps);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_freeze_is_bit_identical() {
        let theta = Tensor::vector(vec![0.1, -3.7, 1e-300]);
        let grad = Tensor::vector(vec![f64::NAN, 5.0, -2.0]);
        let out = masked_sgd_step(&theta, Some(&grad), &ParameterMask::zeros(&[3]), 0.5).unwrap();
        for (a, b) in out.data().iter().zip(theta.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn unmasked_is_plain_descent() {
        let theta = Tensor::vector(vec![1.0, 2.0]);
        let grad = Tensor::vector(vec![4.0, -2.0]);
        let out = masked_sgd_step(&theta, Some(&grad), &ParameterMask::ones(&[2]), 0.25).unwrap();
        assert_eq!(out.data(), &[0.0, 2.5]);
    }

    #[test]
    fn partial_mask() {
        let theta = Tensor::vector(vec![1.0, 1.0]);
        let grad = Tensor::vector(vec![2.0, 2.0]);
        let mask = ParameterMask::new(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let out = masked_sgd_step(&theta, Some(&grad), &mask, 0.5).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0]);
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let theta = Tensor::vector(vec![1.0]);
        let r = masked_sgd_step(&theta, None, &ParameterMask::ones(&[1]), 0.1);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn mask_rejects_fractional_entries() {
        assert!(ParameterMask::new(Tensor::vector(vec![0.5])).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn adam_respects_mask() {
        let mut store = ParamStore::new();
        let id = store.add_masked(
            "w",
            Tensor::vector(vec![1.0, 1.0]),
            ParameterMask::new(Tensor::vector(vec![0.0, 1.0])).unwrap(),
        );
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1, &store);
        for _ in 0..5 {
            opt.step(&mut store, &[Tensor::vector(vec![1.0, 1.0])]).unwrap();
        }
        let v = store.get(id).value.data();
        assert_eq!(v[0].to_bits(), 1f64.to_bits());
        assert!(v[1] < 0.6);
    }
}
