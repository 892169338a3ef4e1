//! Adam optimizer with bias correction, plus a proximal L1 shrinkage step.
//!
//! L1 regularization is applied as soft-thresholding *after* the Adam update
//! (threshold `lr * coeff`) rather than by adding a sign term to the
//! gradient. The proximal form actually drives small weights to exact zero
//! instead of letting them oscillate around it at the scale of the learning
//! rate, which is what makes "stronger penalty, sparser matrix" hold all the
//! way down at tiny magnitudes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::graph::Gradients;
use super::tensor::{ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates per parameter, allocated lazily on first
/// update so the optimizer can be created before the parameter set is final.
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment estimates in name order, `(name, m, v)` per parameter —
    /// everything beyond `config` and `step_count` a checkpoint must carry.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &[T], &[T])> {
        self.m.iter().map(|(name, m)| {
            let v = self.v.get(name).expect("m and v are updated pairwise");
            (name.as_str(), m.as_slice(), v.as_slice())
        })
    }

    /// Rebuild an optimizer from checkpointed state. Each slot is
    /// `(name, m, v)`; the moment vectors of a slot must have equal length.
    pub fn restore(
        config: AdamConfig,
        step: u64,
        slots: Vec<(String, Vec<T>, Vec<T>)>,
    ) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, mi, vi) in slots {
            if mi.len() != vi.len() {
                return Err(Error::usage(format!(
                    "optimizer slot '{name}' has mismatched moment lengths {} vs {}",
                    mi.len(),
                    vi.len()
                )));
            }
            if m.insert(name.clone(), mi).is_some() {
                return Err(Error::usage(format!("duplicate optimizer slot '{name}'")));
            }
            v.insert(name, vi);
        }
        Ok(Adam { config, step, m, v })
    }

    /// Apply one update to every trainable parameter that received a
    /// gradient. Rejects non-finite gradients, naming the offending
    /// parameter. Parameters without a gradient (detached from the loss this
    /// step) are left untouched and their moments are not advanced.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let lr = T::from_f64(self.config.lr);
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let eps = T::from_f64(self.config.eps);
        let one = T::one();
        // Bias correction: divide the moment estimates by (1 - beta^t).
        let c1 = one - T::from_f64(self.config.beta1.powi(t));
        let c2 = one - T::from_f64(self.config.beta2.powi(t));

        for (name, grad) in grads.iter() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::runtime(format!("gradient for unknown parameter '{name}'")))?;
            if !p.requires_grad() {
                continue;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { context: format!("gradient of '{name}'") });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); grad.len()]);
            if m.len() != grad.len() {
                return Err(Error::runtime(format!(
                    "parameter '{name}' changed size mid-optimization"
                )));
            }
            for ((w, &g), (mi, vi)) in
                p.data_mut().iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Soft-threshold one parameter in place: `w <- sign(w) * max(|w| - thr, 0)`.
pub fn l1_prox<T: Scalar>(param: &mut Tensor<T>, threshold: f64) {
    let thr = T::from_f64(threshold);
    for w in param.data_mut() {
        let a = w.abs();
        *w = if a <= thr {
            T::zero()
        } else if *w > T::zero() {
            a - thr
        } else {
            thr - a
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::graph::{Graph, Mode};

    /// One-parameter graph whose loss gradient is exactly `slope * p`, used
    /// to drive the optimizer with known gradients.
    fn grads_for(p: &ParamStore<f64>) -> Gradients<f64> {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param("p", p.require("p").unwrap().shape()).unwrap();
        let zeros = g.const_filled(x_shape(p), 0.0);
        let half = g.scale(x, 0.5).unwrap();
        let loss = g.squared_error(half, zeros).unwrap();
        let eval = g.evaluate(p, &[], Mode::Eval).unwrap();
        g.gradients(&eval, p, loss).unwrap()
    }

    fn x_shape(p: &ParamStore<f64>) -> &[usize] {
        p.require("p").unwrap().shape()
    }

    /// Gradients with every entry set to a constant, independent of params.
    fn const_grads(value: f64, len: usize) -> Gradients<f64> {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param("p", &[len]).unwrap();
        let c = g.const_filled(&[len], value);
        let prod = g.mul(x, c).unwrap();
        let loss = g.l1_norm(prod);
        let mut params = ParamStore::new();
        // Positive params so d|v·p|/dp = v exactly.
        params.insert("p", Tensor::filled(&[len], 1.0).with_requires_grad(true));
        let eval = g.evaluate(&params, &[], Mode::Eval).unwrap();
        g.gradients(&eval, &params, loss).unwrap()
    }

    #[test]
    fn hand_computed_first_step() {
        // p=1, g=1, lr=0.1: mhat = vhat = 1 after bias correction, so the
        // update is lr / (1 + eps) and p lands at ~0.9.
        let mut params: ParamStore<f64> = ParamStore::new();
        params.insert("p", Tensor::filled(&[1], 1.0).with_requires_grad(true));
        let grads = const_grads(1.0, 1);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
        opt.step(&mut params, &grads).unwrap();
        let p = params.require("p").unwrap().data()[0];
        assert!((p - 0.9).abs() < 1e-9, "p = {p}");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params: ParamStore<f64> = ParamStore::new();
        params.insert("p", Tensor::filled(&[3], 2.5).with_requires_grad(true));
        let grads = const_grads(0.0, 3);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.require("p").unwrap().data(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn lr_zero_is_bit_identical() {
        let mut params: ParamStore<f64> = ParamStore::new();
        params.insert(
            "p",
            Tensor::from_f64_slice(&[3], &[0.1, -0.7, 3.14159]).unwrap().with_requires_grad(true),
        );
        let before: Vec<u64> = params.require("p").unwrap().data().iter().map(|f| f.to_bits()).collect();
        let grads = grads_for(&params);
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() });
        opt.step(&mut params, &grads).unwrap();
        let after: Vec<u64> = params.require("p").unwrap().data().iter().map(|f| f.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut params: ParamStore<f64> = ParamStore::new();
            params.insert(
                "p",
                Tensor::from_f64_slice(&[2], &[1.0, -2.0]).unwrap().with_requires_grad(true),
            );
            let mut opt = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() });
            for _ in 0..7 {
                let grads = grads_for(&params);
                opt.step(&mut params, &grads).unwrap();
            }
            params
                .require("p")
                .unwrap()
                .data()
                .iter()
                .map(|f| f.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut params: ParamStore<f64> = ParamStore::new();
        params.insert("p", Tensor::filled(&[1], 1.0).with_requires_grad(true));
        let grads = const_grads(f64::INFINITY, 1);
        let mut opt = Adam::new(AdamConfig::default());
        let err = opt.step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains("'p'"), "{err}");
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut params: ParamStore<f64> = ParamStore::new();
        params.insert("p", Tensor::filled(&[1], 1.0).with_requires_grad(false));
        let grads = const_grads(1.0, 1);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.require("p").unwrap().data(), &[1.0]);
    }

    #[test]
    fn soft_threshold_zeroes_small_weights_and_shrinks_large() {
        let mut t: Tensor<f64> =
            Tensor::from_f64_slice(&[5], &[0.5, -0.5, 0.009, -0.009, 0.0]).unwrap();
        l1_prox(&mut t, 0.01);
        let d = t.data();
        assert!((d[0] - 0.49).abs() < 1e-12);
        assert!((d[1] + 0.49).abs() < 1e-12);
        assert_eq!(&d[2..], &[0.0, 0.0, 0.0]);
    }
}
