//! Squashing normalisation, the cosine classifier, and the training objective
//! `L = sum_n CE_n + lambda * sum_n LM_n`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{pairwise_distances, MemoryBank};
use crate::nn::{next, normal_tensor, Module};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_MARGIN: f64 = 5.0;
pub const DEFAULT_LOGIT_SCALE: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Weight of the large-margin term.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Margin in embedding-distance units.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_margin() -> f64 {
    DEFAULT_MARGIN
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: DEFAULT_LAMBDA,
            margin: DEFAULT_MARGIN,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::Config(format!(
                "objective needs lambda >= 0 and margin >= 0, got {} / {}",
                self.lambda, self.margin
            )));
        }
        Ok(())
    }
}

/// Row-wise `(|v|^2 / (1 + |v|^2)) * v / max(|v|, eps)` for `v: [n, d]`.
pub fn squash<T: Real>(tape: &mut Tape<T>, v: Var, eps: T) -> Result<Var> {
    let norm = tape.l2_norm(v, 1)?;
    let sq = tape.mul(norm, norm)?;
    let denom = tape.add_scalar(sq, T::one())?;
    let gain = tape.div(sq, denom)?;
    let guarded = tape.clamp_min(norm, eps)?;
    let scale = tape.div(gain, guarded)?;
    tape.mul(v, scale)
}

pub fn squash_vec<T: Real>(v: &[T], eps: T) -> Vec<T> {
    let n2: T = v.iter().map(|&x| x * x).sum();
    let n = n2.sqrt();
    let scale = n2 / (T::one() + n2) / n.max(eps);
    v.iter().map(|&x| x * scale).collect()
}

/// Bias-free classifier over unit-normalised weight rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineClassifier<T> {
    /// `[K, d]`.
    pub weight: Tensor<T>,
    pub scale: T,
}

impl<T: Real> CosineClassifier<T> {
    pub fn init<R: Rng>(rng: &mut R, classes: usize, dim: usize, scale: T) -> Self {
        CosineClassifier {
            weight: normal_tensor(rng, &[classes, dim], (1.0 / dim as f64).sqrt()),
            scale,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Appends weight rows.
    pub fn push_rows(&mut self, rows: &[Vec<T>]) -> Result<()> {
        let d = self.dim();
        let mut data = self.weight.data().to_vec();
        for r in rows {
            if r.len() != d {
                return Err(Error::shape("classifier_push", &[&[r.len()], &[d]]));
            }
            data.extend_from_slice(r);
        }
        self.weight = Tensor::new(vec![self.num_classes() + rows.len(), d], data)?;
        Ok(())
    }
}

impl<T: Real> Module<T> for CosineClassifier<T> {
    type Bound = Var;

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight]
    }

    fn bind_vars(&self, vars: &mut std::slice::Iter<'_, Var>) -> Var {
        next(vars)
    }
}

/// `scale * <x, w_k / |w_k|>` for `x: [n, d]` (already squashed), `weight: [K, d]`.
pub fn cosine_logits<T: Real>(tape: &mut Tape<T>, x: Var, weight: Var, scale: T) -> Result<Var> {
    if let Some(k) = tape
        .value(weight)
        .data()
        .chunks(tape.shape(weight)[1].max(1))
        .position(|row| row.iter().all(|&w| w == T::zero()))
    {
        return Err(Error::ZeroNormWeight(k));
    }
    let norms = tape.l2_norm(weight, 1)?;
    let unit = tape.div(weight, norms)?;
    let unit_t = tape.transpose(unit)?;
    let dots = tape.matmul(x, unit_t)?;
    tape.scalar_mul(dots, scale)
}

fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        data[i * classes + l] = T::one();
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Softmax cross-entropy summed over the batch; `logits: [n, K]`.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("cross_entropy", &[&s, &[labels.len()]]));
    }
    let mask = tape.constant(one_hot(labels, s[1])?);
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked)?;
    tape.neg(total)
}

/// `sum_n max(0, |v_n - c_{y_n}| - sum_{i != y_n} |v_n - c_i| + margin)`.
pub fn large_margin<T: Real>(
    tape: &mut Tape<T>,
    v_meta: Var,
    bank: &MemoryBank<T>,
    labels: &[usize],
    margin: T,
) -> Result<Var> {
    let k = bank.num_classes();
    let own_mask = one_hot::<T>(labels, k)?;
    let other_mask = Tensor::new(
        own_mask.shape().to_vec(),
        own_mask.data().iter().map(|&x| T::one() - x).collect(),
    )?;
    let centroids = tape.constant(bank.centroids().clone());
    let dist = pairwise_distances(tape, v_meta, centroids)?;
    let own_mask = tape.constant(own_mask);
    let other_mask = tape.constant(other_mask);
    let own = tape.mul(dist, own_mask)?;
    let own = tape.sum_axis(own, 1)?;
    let other = tape.mul(dist, other_mask)?;
    let other = tape.sum_axis(other, 1)?;
    let arg = tape.sub(own, other)?;
    let arg = tape.add_scalar(arg, margin)?;
    let hinge = tape.relu(arg)?;
    tape.sum(hinge)
}

pub fn total_loss<T: Real>(tape: &mut Tape<T>, ce: Var, lm: Var, lambda: T) -> Result<Var> {
    let weighted = tape.scalar_mul(lm, lambda)?;
    tape.add(ce, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, gradcheck::DEFAULT_FD_STEP};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn row(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.constant(Tensor::from_f64(vec![1, v.len()], v).unwrap())
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn squash_examples() {
        let mut tape = Tape::new();
        let v = row(&mut tape, &[0.6, 0.8]);
        let s = squash(&mut tape, v, 1e-12).unwrap();
        assert_relative_eq!(tape.value(s).data()[0], 0.3, epsilon = 1e-15);
        assert_relative_eq!(tape.value(s).data()[1], 0.4, epsilon = 1e-15);
        let z = row(&mut tape, &[0.0, 0.0]);
        let s = squash(&mut tape, z, 1e-12).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 0.0]);
        let three = row(&mut tape, &[3.0, 0.0, 0.0]);
        let s = squash(&mut tape, three, 1e-12).unwrap();
        assert_relative_eq!(norm(tape.value(s).data()), 0.9, epsilon = 1e-15);
        assert_eq!(squash_vec(&[3.0, 0.0, 0.0], 1e-12), tape.value(s).data());
    }

    fn classifier(w: &[f64], k: usize) -> CosineClassifier<f64> {
        CosineClassifier {
            weight: Tensor::from_f64(vec![k, w.len() / k], w).unwrap(),
            scale: 16.0,
        }
    }

    #[test]
    fn cosine_logit_examples() {
        let c = classifier(&[2.0, 0.0, 0.0, 3.0, -1.0, 0.0], 3);
        let mut tape = Tape::new();
        let (w, _) = c.bind(&mut tape, false);
        let x = row(&mut tape, &[0.5, 0.0]);
        let l = cosine_logits(&mut tape, x, w, 16.0).unwrap();
        assert_eq!(tape.value(l).data(), &[8.0, 0.0, -8.0]);
    }

    #[test]
    fn zero_weight_row_is_an_error() {
        let c = classifier(&[1.0, 0.0, 0.0, 0.0], 2);
        let mut tape = Tape::new();
        let (w, _) = c.bind(&mut tape, false);
        let x = row(&mut tape, &[0.5, 0.0]);
        assert!(matches!(
            cosine_logits(&mut tape, x, w, 16.0),
            Err(Error::ZeroNormWeight(1))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = row(&mut tape, &[0.0, 0.0]);
        let ce = cross_entropy(&mut tape, l, &[1]).unwrap();
        assert_relative_eq!(tape.value(ce).data()[0], std::f64::consts::LN_2, epsilon = 1e-15);
        let l = row(&mut tape, &[30.0, -30.0]);
        let ce = cross_entropy(&mut tape, l, &[0]).unwrap();
        assert!(tape.value(ce).data()[0] < 1e-20);
        assert!(matches!(
            cross_entropy(&mut tape, l, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = Tensor::<f64>::from_f64(vec![1, 4], &[0.3, -1.1, 2.0, 0.4]).unwrap();
        let r = grad_check(|t, v| cross_entropy(t, v[0], &[2]), &[logits], DEFAULT_FD_STEP).unwrap();
        assert!(r.max_rel_err <= 1e-6, "{r:?}");
    }

    fn bank2(other: f64) -> MemoryBank<f64> {
        MemoryBank::new(Tensor::from_f64(vec![2, 2], &[0.0, 0.0, other, 0.0]).unwrap()).unwrap()
    }

    #[test]
    fn margin_examples() {
        let mut tape = Tape::new();
        let v = row(&mut tape, &[0.0, 0.0]);
        let far = large_margin(&mut tape, v, &bank2(10.0), &[0], 5.0).unwrap();
        assert_eq!(tape.value(far).data(), &[0.0]);
        let near = large_margin(&mut tape, v, &bank2(3.0), &[0], 5.0).unwrap();
        assert_relative_eq!(tape.value(near).data()[0], 2.0);
        let mid = row(&mut tape, &[1.5, 0.0]);
        let tie = large_margin(&mut tape, mid, &bank2(3.0), &[0], 0.0).unwrap();
        assert_eq!(tape.value(tie).data(), &[0.0]);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let ce = tape.constant(Tensor::scalar(2.0));
        let lm = tape.constant(Tensor::scalar(3.0));
        let t = total_loss(&mut tape, ce, lm, 0.1).unwrap();
        assert_relative_eq!(tape.value(t).data()[0], 2.3, epsilon = 1e-15);
        let t0 = total_loss(&mut tape, ce, lm, 0.0).unwrap();
        assert_eq!(tape.value(t0).data()[0], 2.0);
    }

    proptest! {
        #[test]
        fn squash_norm_below_one_and_monotone(
            v in proptest::collection::vec(-50.0f64..50.0, 1..8),
            shrink in 0.01f64..0.99,
        ) {
            let s = squash_vec(&v, 1e-12);
            let u: Vec<f64> = v.iter().map(|x| x * shrink).collect();
            let su = squash_vec(&u, 1e-12);
            prop_assert!(norm(&s) < 1.0);
            if norm(&v) > 1e-6 {
                prop_assert!(norm(&su) < norm(&s));
            }
        }

        #[test]
        fn logits_invariant_to_weight_scaling(
            w in proptest::collection::vec(-3.0f64..3.0, 6),
            x in proptest::collection::vec(-1.0f64..1.0, 2),
        ) {
            prop_assume!(w.chunks(2).all(|r| norm(r) > 1e-3));
            let c1 = classifier(&w, 3);
            let c2 = classifier(&w.iter().map(|v| v * 2.0).collect::<Vec<_>>(), 3);
            let mut tape = Tape::new();
            let xv = row(&mut tape, &x);
            let (w1, _) = c1.bind(&mut tape, false);
            let (w2, _) = c2.bind(&mut tape, false);
            let l1 = cosine_logits(&mut tape, xv, w1, 16.0).unwrap();
            let l2 = cosine_logits(&mut tape, xv, w2, 16.0).unwrap();
            prop_assert_eq!(tape.value(l1).data(), tape.value(l2).data());
        }
    }
}
