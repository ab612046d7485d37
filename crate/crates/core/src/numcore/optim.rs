//! Named parameter storage and the AdamW optimizer.

use indexmap::IndexMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters. Defaults follow the adapter-finetuning recipe:
/// lr 1e-4, betas (0.9, 0.999), weight decay 1e-2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    trainable: bool,
}

/// Insertion-ordered named parameters plus AdamW moment state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: IndexMap<String, Slot>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let n = tensor.numel();
        self.slots.insert(
            name,
            Slot {
                tensor,
                m: vec![0.0; n],
                v: vec![0.0; n],
                trainable: true,
            },
        );
        Ok(())
    }

    fn slot(&self, name: &str) -> Result<&Slot> {
        self.slots
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.slot(name)?.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.slots
            .get_mut(name)
            .map(|s| &mut s.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        Ok(self.slot(name)?.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.slots
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .trainable = trainable;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.tensor))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.slots.values().map(|s| s.tensor.numel()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn clear_grads(&mut self) {
        self.slots.values_mut().for_each(|s| s.tensor.clear_grad());
    }

    /// Appends rows to a 2-D parameter, extending its moments with zeros.
    pub fn append_rows(&mut self, name: &str, rows: &[f64]) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let cols = slot.tensor.cols();
        if rows.is_empty() || !rows.len().is_multiple_of(cols) {
            return Err(Error::Shape {
                op: "append_rows",
                lhs: slot.tensor.shape().to_vec(),
                rhs: vec![rows.len()],
            });
        }
        let mut data = slot.tensor.data().to_vec();
        data.extend_from_slice(rows);
        let n_rows = data.len() / cols;
        slot.tensor = Tensor::new(vec![n_rows, cols], data)?;
        slot.m.resize(n_rows * cols, 0.0);
        slot.v.resize(n_rows * cols, 0.0);
        Ok(())
    }

    /// Replaces parameter values in place (shapes must match); moments kept.
    pub fn assign(&mut self, name: &str, values: &Tensor) -> Result<()> {
        let t = self.get_mut(name)?;
        if t.shape() != values.shape() {
            return Err(Error::Shape {
                op: "assign",
                lhs: t.shape().to_vec(),
                rhs: values.shape().to_vec(),
            });
        }
        t.data_mut().copy_from_slice(values.data());
        Ok(())
    }

    /// One AdamW update over every trainable parameter, consuming grads.
    pub fn adamw_step(&mut self, opt: &AdamW) -> Result<()> {
        let missing: Vec<String> = self
            .slots
            .iter()
            .filter(|(_, s)| s.trainable && s.tensor.grad().is_none())
            .map(|(k, _)| k.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingGrad(missing));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        for slot in self.slots.values_mut().filter(|s| s.trainable) {
            let g = slot.tensor.take_grad().expect("checked above");
            let p = slot.tensor.data_mut();
            for i in 0..p.len() {
                slot.m[i] = opt.beta1 * slot.m[i] + (1.0 - opt.beta1) * g[i];
                slot.v[i] = opt.beta2 * slot.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                p[i] -= opt.lr * opt.weight_decay * p[i];
                p[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("parameter after AdamW step".into()));
            }
        }
        self.clear_grads();
        Ok(())
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

/// Free-function form of [`ParamStore::adamw_step`].
pub fn adamw_step(
    store: &mut ParamStore,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
) -> Result<()> {
    store.adamw_step(&AdamW {
        lr,
        beta1: betas.0,
        beta2: betas.1,
        weight_decay,
        ..AdamW::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(p)).unwrap();
        s.get_mut("p").unwrap().set_grad(vec![g]).unwrap();
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut s = scalar_store(0.731, 0.0);
        adamw_step(&mut s, 1e-4, (0.9, 0.999), 0.0).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[0.731]);
    }

    #[test]
    fn first_step_matches_formula() {
        let mut s = scalar_store(1.0, 1.0);
        adamw_step(&mut s, 1e-4, (0.9, 0.999), 0.0).unwrap();
        // m = 0.1, v = 0.001; bias-corrected both give 1.0.
        let m_hat = (0.1 * 1.0) / (1.0 - 0.9);
        let v_hat = (0.001 * 1.0) / (1.0 - 0.999);
        let expected = 1.0 - 1e-4 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        let got = s.get("p").unwrap().data()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!((got - (1.0 - 1e-4 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut s = scalar_store(1.0, 0.0);
        adamw_step(&mut s, 1e-4, (0.9, 0.999), 1e-2).unwrap();
        let got = s.get("p").unwrap().data()[0];
        assert!((got - 0.999999).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_lists_names() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        s.insert("b", Tensor::scalar(1.0)).unwrap();
        s.get_mut("a").unwrap().set_grad(vec![0.0]).unwrap();
        match s.adamw_step(&AdamW::default()) {
            Err(Error::MissingGrad(names)) => assert_eq!(names, vec!["b".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
        s.set_trainable("b", false).unwrap();
        s.adamw_step(&AdamW::default()).unwrap();
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn duplicate_names_rejected_and_rows_append() {
        let mut s = ParamStore::new();
        s.insert("e", Tensor::zeros(&[2, 3])).unwrap();
        assert!(s.insert("e", Tensor::zeros(&[1])).is_err());
        s.append_rows("e", &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.get("e").unwrap().shape(), &[3, 3]);
        assert!(s.append_rows("e", &[1.0]).is_err());
    }
}
