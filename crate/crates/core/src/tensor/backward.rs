use super::kernels::{self, axis_split, ConvDims};
use super::tape::{Op, Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Gradient of a scalar loss with respect to every value on a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; all zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn acc<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    /// Reverse sweep from a one-element `loss`. Each recorded op is visited
    /// once; contributions to shared inputs accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> &'a mut Vec<T> {
        let len = self.nodes[v.0].value.len();
        acc(&mut grads[v.0], len)
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let x = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let nn = shape(*b)[1];
                if self.wants(*a) {
                    let bt = kernels::transpose(x(*b), k, nn);
                    let da = kernels::matmul(self.backend, g, &bt, m, nn, k);
                    add_into(self.slot(grads, *a), &da);
                }
                if self.wants(*b) {
                    let at = kernels::transpose(x(*a), m, k);
                    let db = kernels::matmul(self.backend, &at, g, k, m, nn);
                    add_into(self.slot(grads, *b), &db);
                }
            }
            Op::Transpose(a) => {
                let s = shape(*a);
                let gt = kernels::transpose(g, s[1], s[0]);
                add_into(self.slot(grads, *a), &gt);
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let bc = kernels::broadcast(shape(*a), shape(*b)).expect("validated in forward");
                let (av, bv) = (x(*a), x(*b));
                let op = &node.op;
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    for (o, (&i, &j)) in bc.a_idx.iter().zip(&bc.b_idx).enumerate() {
                        ga[i] += match op {
                            Op::Add(..) | Op::Sub(..) => g[o],
                            Op::Mul(..) => g[o] * bv[j],
                            _ => g[o] / bv[j],
                        };
                    }
                }
                if self.wants(*b) {
                    let gb = self.slot(grads, *b);
                    for (o, (&i, &j)) in bc.a_idx.iter().zip(&bc.b_idx).enumerate() {
                        gb[j] += match op {
                            Op::Add(..) => g[o],
                            Op::Sub(..) => -g[o],
                            Op::Mul(..) => g[o] * av[i],
                            _ => -g[o] * av[i] / (bv[j] * bv[j]),
                        };
                    }
                }
            }
            Op::Relu(a) => {
                let xa = x(*a);
                let ga = self.slot(grads, *a);
                for i in 0..g.len() {
                    if xa[i] > T::zero() {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Tanh(a) => {
                let ga = self.slot(grads, *a);
                for i in 0..g.len() {
                    ga[i] += g[i] * (T::one() - out[i] * out[i]);
                }
            }
            Op::Exp(a) => {
                let ga = self.slot(grads, *a);
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i];
                }
            }
            Op::Log(a) => {
                let tiny = T::min_positive_value();
                let xa = x(*a);
                let ga = self.slot(grads, *a);
                for i in 0..g.len() {
                    if xa[i] > tiny {
                        ga[i] += g[i] / xa[i];
                    }
                }
            }
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, n, inner) = axis_split(shape(*a), *axis);
                let ga = self.slot(grads, *a);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        if log {
                            let gs: T = (0..n).map(|j| g[at(j)]).sum();
                            for j in 0..n {
                                ga[at(j)] += g[at(j)] - out[at(j)].exp() * gs;
                            }
                        } else {
                            let dot: T = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..n {
                                ga[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let ga = self.slot(grads, *a);
                ga.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mean(a) => {
                let ga = self.slot(grads, *a);
                let s = g[0] / T::c(ga.len() as f64);
                ga.iter_mut().for_each(|v| *v += s);
            }
            Op::SumAxis(a, axis) | Op::L2Norm(a, axis) => {
                let norm = matches!(node.op, Op::L2Norm(..));
                let (outer, n, inner) = axis_split(shape(*a), *axis);
                let xa = x(*a);
                let tiny = T::min_positive_value();
                let ga = self.slot(grads, *a);
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        for j in 0..n {
                            let at = (o * n + j) * inner + i;
                            ga[at] += if norm {
                                if out[r] > tiny {
                                    g[r] * xa[at] / out[r]
                                } else {
                                    T::zero()
                                }
                            } else {
                                g[r]
                            };
                        }
                    }
                }
            }
            Op::ScalarMul(a, s) => {
                let ga = self.slot(grads, *a);
                for i in 0..g.len() {
                    ga[i] += g[i] * *s;
                }
            }
            Op::AddScalar(a, _) | Op::Reshape(a) => {
                add_into(self.slot(grads, *a), g);
            }
            Op::ClampMin(a, floor) => {
                let xa = x(*a);
                let ga = self.slot(grads, *a);
                for i in 0..g.len() {
                    if xa[i] > *floor {
                        ga[i] += g[i];
                    }
                }
            }
            Op::MinAxis { x: a, axis, argmin } => {
                let (outer, n, inner) = axis_split(shape(*a), *axis);
                let ga = self.slot(grads, *a);
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        ga[(o * n + argmin[r]) * inner + i] += g[r];
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let nv = shape(v)[*axis];
                    if self.wants(v) {
                        let gv = self.slot(grads, v);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + nv) * inner];
                            add_into(&mut gv[o * nv * inner..(o + 1) * nv * inner], src);
                        }
                    }
                    offset += nv;
                }
            }
            Op::Conv3x3 { x: xv, w, b } => {
                let sx = shape(*xv);
                let d = ConvDims {
                    n: sx[0],
                    cin: sx[1],
                    cout: shape(*w)[0],
                    h: sx[2],
                    w: sx[3],
                };
                let (dx, dw, db) = kernels::conv3x3_backward(self.backend, &d, x(*xv), x(*w), g);
                if self.wants(*xv) {
                    add_into(self.slot(grads, *xv), &dx);
                }
                if self.wants(*w) {
                    add_into(self.slot(grads, *w), &dw);
                }
                if self.wants(*b) {
                    add_into(self.slot(grads, *b), &db);
                }
            }
            Op::GlobalAvgPool(a) => {
                let s = shape(*a);
                let plane = s[2] * s[3];
                let scale = T::c(1.0 / plane as f64);
                let ga = self.slot(grads, *a);
                for (c, chunk) in ga.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += g[c] * scale);
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
