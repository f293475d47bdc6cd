//! Parameter containers shared by the trainable components.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};

/// A component owning trainable tensors in a fixed order.
pub trait Module<T: Real> {
    /// Tape handles for the parameters, in `named_params` order.
    type Bound;

    fn named_params(&self) -> Vec<(String, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
    /// Consumes one var per parameter, in `named_params` order.
    fn bind_vars(&self, vars: &mut std::slice::Iter<'_, Var>) -> Self::Bound;

    /// Records every parameter on `tape`; as constants when `trainable` is false.
    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> (Self::Bound, Vec<Var>) {
        let vars: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let bound = self.bind_vars(&mut vars.iter());
        (bound, vars)
    }

    fn param_tensors(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t.clone()).collect()
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn prefixed<'a, T>(prefix: &str, v: Vec<(String, &'a Tensor<T>)>) -> Vec<(String, &'a Tensor<T>)> {
    v.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

pub(crate) fn next(vars: &mut std::slice::Iter<'_, Var>) -> Var {
    *vars.next().expect("one var per parameter")
}

pub fn normal_tensor<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::c(std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Real> Linear<T> {
    /// He-normal weights, zero bias.
    pub fn init<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: normal_tensor(rng, &[inputs, outputs], (2.0 / inputs as f64).sqrt()),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![inputs, outputs]),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Appends `extra` zero-initialised output columns.
    pub fn grow_outputs(&mut self, extra: usize) {
        let (i, o) = (self.inputs(), self.outputs());
        let mut w = Vec::with_capacity(i * (o + extra));
        for r in 0..i {
            w.extend_from_slice(&self.weight.data()[r * o..(r + 1) * o]);
            w.extend(std::iter::repeat_n(T::zero(), extra));
        }
        self.weight = Tensor::new(vec![i, o + extra], w).expect("grown shape");
        let mut b = self.bias.data().to_vec();
        b.extend(std::iter::repeat_n(T::zero(), extra));
        self.bias = Tensor::new(vec![o + extra], b).expect("grown shape");
    }
}

impl LinearVars {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    type Bound = LinearVars;

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn bind_vars(&self, vars: &mut std::slice::Iter<'_, Var>) -> LinearVars {
        LinearVars {
            weight: next(vars),
            bias: next(vars),
        }
    }
}
