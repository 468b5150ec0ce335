//! Differentially private optimization: per-example gradients are clipped and
//! summed by a streaming accumulator, the sum is privatized with Gaussian
//! noise once per step, and the noised mean drives Adam with decoupled weight
//! decay applied to the previous iterate.

use crate::error::{Error, Result};
use crate::model::{GradientSet, ParameterSet};
use crate::rng::{fill_gaussian, StreamKey};
use crate::tensor::{clip_factor, Element, TensorMap};
use serde::{Deserialize, Serialize};

/// Hyperparameters of the private optimizer. Defaults are the tuned
/// large-batch values this codebase is organized around.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpOptimizerConfig {
    /// Per-example gradient clip bound C.
    pub clip_norm: f64,
    /// Noise multiplier sigma; per-coordinate noise std is sigma * C.
    pub noise_multiplier: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Decoupled weight decay strength.
    pub weight_decay: f64,
    /// Offset added to sqrt(v_hat) in the Adam denominator.
    pub adam_eps: f64,
}

impl Default for DpOptimizerConfig {
    fn default() -> Self {
        DpOptimizerConfig {
            clip_norm: 3.2429e-3,
            noise_multiplier: 0.547556103157,
            beta1: 0.75,
            beta2: 0.9,
            weight_decay: 1.0,
            adam_eps: 1e-11,
        }
    }
}

impl DpOptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::parameter(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0) {
            return Err(Error::parameter(format!(
                "noise_multiplier must be >= 0, got {}",
                self.noise_multiplier
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::parameter(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::parameter(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::parameter(format!("adam_eps must be > 0, got {}", self.adam_eps)));
        }
        Ok(())
    }
}

/// Byproduct of privatization: the norms that determine the step's
/// signal-to-noise ratio. The signal is the clipped gradient sum before the
/// division by batch size; the ratio is undefined when no noise was added.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrRecord {
    pub step: u64,
    pub signal_norm: f64,
    pub noise_norm: f64,
}

impl SnrRecord {
    /// Signal over noise; None when the noise norm is zero.
    pub fn ratio(&self) -> Option<f64> {
        if self.noise_norm == 0.0 {
            None
        } else {
            Some(self.signal_norm / self.noise_norm)
        }
    }
}

/// Streaming sum of clipped per-example gradients. Memory use is one gradient
/// set regardless of how many examples are absorbed, and absorbing then
/// reading off the sum is bit-identical to clipping every gradient up front
/// and adding the copies in the same order.
#[derive(Debug, Clone)]
pub struct ClippedAccumulator<E: Element> {
    sum: GradientSet<E>,
    clip_norm: f64,
    count: u64,
}

impl<E: Element> ClippedAccumulator<E> {
    /// Empty accumulator matching the layout of `like`.
    pub fn new(like: &TensorMap<E>, clip_norm: f64) -> Result<Self> {
        if !(clip_norm > 0.0) {
            return Err(Error::parameter(format!("clip_norm must be > 0, got {clip_norm}")));
        }
        Ok(ClippedAccumulator { sum: like.zeros_like(), clip_norm, count: 0 })
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn clip_norm(&self) -> f64 {
        self.clip_norm
    }

    /// Clip `grad` to the bound and add it to the running sum. Returns the
    /// pre-clip global norm.
    pub fn absorb(&mut self, grad: &GradientSet<E>) -> Result<f64> {
        self.sum.same_layout(grad)?;
        let norm = grad.l2_norm();
        let factor = clip_factor::<E>(norm, self.clip_norm)?;
        if factor == 1.0 {
            for (dst, src) in self.sum.tensors_mut().iter_mut().zip(grad.tensors()) {
                for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
                    *a = *a + *b;
                }
            }
        } else {
            let f = E::from_f64(factor);
            for (dst, src) in self.sum.tensors_mut().iter_mut().zip(grad.tensors()) {
                for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
                    // multiply-then-add, the same two roundings as
                    // clip_to_norm followed by +=
                    *a = *a + *b * f;
                }
            }
        }
        self.count += 1;
        Ok(norm)
    }

    /// Combine two partial accumulations over disjoint example sets.
    pub fn merge(mut self, other: ClippedAccumulator<E>) -> Result<Self> {
        if self.clip_norm != other.clip_norm {
            return Err(Error::contract(format!(
                "merging accumulators with different clip norms {} and {}",
                self.clip_norm, other.clip_norm
            )));
        }
        self.sum.same_layout(&other.sum)?;
        for (dst, src) in self.sum.tensors_mut().iter_mut().zip(other.sum.tensors()) {
            for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
                *a = *a + *b;
            }
        }
        self.count += other.count;
        Ok(self)
    }

    /// Add Gaussian noise of per-coordinate std sigma * C to the sum, divide
    /// by the number of absorbed examples, and report the norms involved.
    /// The step recorded in the returned SnrRecord is taken from `key`.
    pub fn privatize(
        self,
        noise_multiplier: f64,
        key: StreamKey,
    ) -> Result<(GradientSet<E>, SnrRecord)> {
        if self.count == 0 {
            return Err(Error::contract("privatizing an empty accumulator"));
        }
        if !(noise_multiplier >= 0.0) {
            return Err(Error::parameter(format!(
                "noise_multiplier must be >= 0, got {noise_multiplier}"
            )));
        }
        let scale = noise_multiplier * self.clip_norm;
        let mut noise = self.sum.zeros_like();
        let mut rng = key.rng();
        for t in noise.tensors_mut() {
            fill_gaussian(&mut rng, t, scale);
        }
        let signal_norm = self.sum.l2_norm();
        let noise_norm = noise.l2_norm();
        let mut out = self.sum;
        let count = E::from_f64(self.count as f64);
        for (s, z) in out.tensors_mut().iter_mut().zip(noise.tensors()) {
            for (a, b) in s.data_mut().iter_mut().zip(z.data()) {
                *a = (*a + *b) / count;
            }
        }
        Ok((out, SnrRecord { step: key.step, signal_norm, noise_norm }))
    }
}

/// Adam first and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<E: Element> {
    step: u64,
    m: TensorMap<E>,
    v: TensorMap<E>,
}

impl<E: Element> OptimizerState<E> {
    pub fn new(params: &ParameterSet<E>) -> Self {
        OptimizerState { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&TensorMap<E>, &TensorMap<E>) {
        (&self.m, &self.v)
    }

    /// Rebuild from checkpointed pieces.
    pub fn from_parts(step: u64, m: TensorMap<E>, v: TensorMap<E>) -> Result<Self> {
        m.same_layout(&v)?;
        Ok(OptimizerState { step, m, v })
    }

    /// One Adam update with decoupled weight decay:
    ///   m <- b1 m + (1-b1) g            v <- b2 v + (1-b2) g^2
    ///   theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + lambda theta_prev)
    /// The decay term uses the iterate from before this update.
    pub fn adam_step(
        &mut self,
        params: &mut ParameterSet<E>,
        grad: &GradientSet<E>,
        opt: &DpOptimizerConfig,
        lr: f64,
    ) -> Result<()> {
        opt.validate()?;
        if !(lr >= 0.0) {
            return Err(Error::parameter(format!("learning rate must be >= 0, got {lr}")));
        }
        params.same_layout(grad)?;
        params.same_layout(&self.m)?;
        grad.check_finite("gradient")?;
        let t = self.step + 1;
        let bc1 = 1.0 - opt.beta1.powi(t as i32);
        let bc2 = 1.0 - opt.beta2.powi(t as i32);
        let b1 = E::from_f64(opt.beta1);
        let b2 = E::from_f64(opt.beta2);
        let c1 = E::from_f64(1.0 - opt.beta1);
        let c2 = E::from_f64(1.0 - opt.beta2);
        let ibc1 = E::from_f64(1.0 / bc1);
        let ibc2 = E::from_f64(1.0 / bc2);
        let eps = E::from_f64(opt.adam_eps);
        let lam = E::from_f64(opt.weight_decay);
        let lr_e = E::from_f64(lr);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for (((p, &g), m), v) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                let m_hat = *m * ibc1;
                let v_hat = *v * ibc2;
                let update = m_hat / (v_hat.sqrt() + eps) + lam * *p;
                *p = *p - lr_e * update;
            }
        }
        self.step = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::rng::{gaussian_noise, Purpose, RngStream};
    use crate::tensor::clip_to_norm;

    fn map_of(values: &[f64]) -> TensorMap<f64> {
        let mut m = TensorMap::new();
        m.insert("w", Tensor::from_vec(&[values.len()], values.to_vec()).unwrap()).unwrap();
        m
    }

    fn random_grad(seed: u64, n: usize, scale: f64) -> TensorMap<f64> {
        let mut m = TensorMap::new();
        m.insert(
            "w",
            gaussian_noise(&[n], scale, RngStream::new(seed).key(0, 0, Purpose::Probe)).unwrap(),
        )
        .unwrap();
        m
    }

    #[test]
    fn absorb_clips_and_counts() {
        let layout = map_of(&[0.0, 0.0]);
        let mut acc = ClippedAccumulator::new(&layout, 5.0).unwrap();
        // norm 5 exactly: passes through
        let n1 = acc.absorb(&map_of(&[3.0, 4.0])).unwrap();
        assert_eq!(n1, 5.0);
        // norm 10: scaled to the bound
        let n2 = acc.absorb(&map_of(&[6.0, 8.0])).unwrap();
        assert_eq!(n2, 10.0);
        assert_eq!(acc.count(), 2);
        let (g, snr) = acc.privatize(0.0, RngStream::new(1).key(7, 0, Purpose::Noise)).unwrap();
        // sum = [3,4] + [3,4]*margin, mean over 2
        let w = g.get("w").unwrap().data();
        assert!((w[0] - 3.0).abs() < 1e-9 && (w[1] - 4.0).abs() < 1e-9);
        assert_eq!(snr.step, 7);
        assert_eq!(snr.noise_norm, 0.0);
        assert_eq!(snr.ratio(), None);
        assert!((snr.signal_norm - 10.0).abs() < 1e-9);
    }

    #[test]
    fn streaming_matches_batch_oracle_exactly() {
        let layout = random_grad(0, 32, 0.0);
        for c in [0.05, 0.5, 2.0] {
            let mut acc = ClippedAccumulator::new(&layout, c).unwrap();
            let grads: Vec<TensorMap<f64>> =
                (0..50).map(|s| random_grad(100 + s, 32, 0.3)).collect();
            for g in &grads {
                acc.absorb(g).unwrap();
            }
            // oracle: clip every gradient as a standalone op, then sum
            let mut oracle = vec![0.0f64; 32];
            for g in &grads {
                let clipped = clip_to_norm(g.tensors(), c).unwrap();
                for (o, x) in oracle.iter_mut().zip(clipped[0].data()) {
                    *o += x;
                }
            }
            let (out, _) =
                acc.privatize(0.0, RngStream::new(1).key(0, 0, Purpose::Noise)).unwrap();
            let got = out.get("w").unwrap().data();
            for (g, o) in got.iter().zip(&oracle) {
                let mean = o / 50.0;
                assert!((g - mean).abs() <= 1e-9 * mean.abs().max(1.0), "{g} vs {mean}");
            }
        }
    }

    #[test]
    fn merge_equals_single_accumulation() {
        let layout = random_grad(0, 16, 0.0);
        let grads: Vec<TensorMap<f64>> = (0..20).map(|s| random_grad(200 + s, 16, 1.0)).collect();
        let mut whole = ClippedAccumulator::new(&layout, 0.7).unwrap();
        for g in &grads {
            whole.absorb(g).unwrap();
        }
        let mut left = ClippedAccumulator::new(&layout, 0.7).unwrap();
        let mut right = ClippedAccumulator::new(&layout, 0.7).unwrap();
        for (i, g) in grads.iter().enumerate() {
            if i < 9 {
                left.absorb(g).unwrap();
            } else {
                right.absorb(g).unwrap();
            }
        }
        let merged = left.merge(right).unwrap();
        assert_eq!(merged.count(), whole.count());
        let key = RngStream::new(3).key(1, 0, Purpose::Noise);
        let (a, _) = whole.privatize(0.5, key).unwrap();
        let (b, _) = merged.privatize(0.5, key).unwrap();
        // merge adds the right-hand subtotal as one prerounded quantity, so
        // agreement is to rounding error, not bitwise
        for (x, y) in a.get("w").unwrap().data().iter().zip(b.get("w").unwrap().data()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn privatize_noise_is_keyed_and_scaled() {
        let layout = map_of(&[0.0; 8]);
        let mut acc = ClippedAccumulator::new(&layout, 2.0).unwrap();
        acc.absorb(&map_of(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
        let key = RngStream::new(9).key(3, 0, Purpose::Noise);
        let sigma = 0.25;
        let (g, snr) = acc.privatize(sigma, key).unwrap();
        // reference: same stream, std sigma*C, added to the sum then /1
        let expect_noise: Tensor<f64> = gaussian_noise(&[8], sigma * 2.0, key).unwrap();
        let got = g.get("w").unwrap().data();
        for (i, x) in got.iter().enumerate() {
            let signal = if i == 0 || i == 7 { 1.0 } else { 0.0 };
            assert_eq!(*x, signal + expect_noise.data()[i]);
        }
        assert!((snr.noise_norm - expect_noise.l2_norm()).abs() < 1e-12);
        assert_eq!(snr.ratio(), Some(snr.signal_norm / snr.noise_norm));
    }

    #[test]
    fn empty_accumulator_cannot_privatize() {
        let layout = map_of(&[0.0]);
        let acc = ClippedAccumulator::<f64>::new(&layout, 1.0).unwrap();
        let r = acc.privatize(1.0, RngStream::new(0).key(0, 0, Purpose::Noise));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn adam_first_step_hand_computed() {
        let opt = DpOptimizerConfig {
            clip_norm: 1.0,
            noise_multiplier: 0.0,
            beta1: 0.75,
            beta2: 0.9,
            weight_decay: 0.0,
            adam_eps: 1e-11,
        };
        let mut params = map_of(&[10.0]);
        let mut state = OptimizerState::new(&params);
        let grad = map_of(&[1.0]);
        state.adam_step(&mut params, &grad, &opt, 1.0).unwrap();
        // m = 0.25, v = 0.1, m_hat = v_hat = 1: theta = 10 - 1/(1 + 1e-11)
        let expect = 10.0 - 1.0 / (1.0 + 1e-11);
        assert!((params.get("w").unwrap().data()[0] - expect).abs() < 1e-12);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn constant_gradient_cancels_bias_correction() {
        let opt = DpOptimizerConfig { weight_decay: 0.0, ..Default::default() };
        let mut params = map_of(&[0.0]);
        let mut state = OptimizerState::new(&params);
        let grad = map_of(&[2.0]);
        for t in 1..=5 {
            state.adam_step(&mut params, &grad, &opt, 0.1).unwrap();
            // with constant g, m_hat = g and v_hat = g^2 at every step,
            // so each update moves by lr * g/(|g| + eps) = lr (for g > 0)
            let expect = -0.1 * t as f64;
            let got = params.get("w").unwrap().data()[0];
            assert!((got - expect).abs() < 1e-9, "step {t}: {got} vs {expect}");
        }
    }

    #[test]
    fn decay_is_decoupled_and_uses_previous_iterate() {
        let opt = DpOptimizerConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut params = map_of(&[2.0]);
        let mut state = OptimizerState::new(&params);
        let zero_grad = map_of(&[0.0]);
        let lr = 0.5;
        // with zero gradient the Adam term is 0/(0 + eps) = 0, leaving pure
        // multiplicative decay theta <- theta (1 - lr * lambda)
        state.adam_step(&mut params, &zero_grad, &opt, lr).unwrap();
        let after1 = params.get("w").unwrap().data()[0];
        assert!((after1 - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
        state.adam_step(&mut params, &zero_grad, &opt, lr).unwrap();
        let after2 = params.get("w").unwrap().data()[0];
        assert!((after2 - 2.0 * (1.0 - 0.05) * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn nonfinite_gradient_rejected_by_name() {
        let opt = DpOptimizerConfig::default();
        let mut params = map_of(&[1.0]);
        let mut state = OptimizerState::new(&params);
        let grad = map_of(&[f64::NAN]);
        let err = state.adam_step(&mut params, &grad, &opt, 0.1).unwrap_err();
        match err {
            Error::NonFinite(ctx) => assert!(ctx.contains('w'), "{ctx}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        let mut params = map_of(&[1.0]);
        let mut state = OptimizerState::new(&params);
        let grad = map_of(&[0.5]);
        let bad = DpOptimizerConfig { beta1: 1.0, ..Default::default() };
        assert!(state.adam_step(&mut params, &grad, &bad, 0.1).is_err());
        let good = DpOptimizerConfig::default();
        assert!(state.adam_step(&mut params, &grad, &good, -0.1).is_err());
        assert!(matches!(
            ClippedAccumulator::<f64>::new(&params, 0.0),
            Err(Error::Parameter(_))
        ));
    }
}
