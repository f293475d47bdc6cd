use super::kernels::{self, axis_split, ConvDims};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::par::Backend;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    SumAxis(Var, usize),
    Mean(Var),
    L2Norm(Var, usize),
    ScalarMul(Var, T),
    AddScalar(Var, T),
    ClampMin(Var, T),
    MinAxis { x: Var, axis: usize, argmin: Vec<usize> },
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Conv3x3 { x: Var, w: Var, b: Var },
    GlobalAvgPool(Var),
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Records every executed op in execution order, so inputs always precede
/// the ops that consume them.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) backend: Backend,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_backend(Backend::default())
    }

    pub fn with_backend(backend: Backend) -> Self {
        Tape {
            nodes: Vec::new(),
            backend,
        }
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn vals(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(v).len() {
            return Err(Error::shape(op, &[self.shape(v), &[axis]]));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.backend, self.vals(a), self.vals(b), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", &[s]));
        }
        let (m, n) = (s[0], s[1]);
        let t = Tensor::new(vec![n, m], kernels::transpose(self.vals(a), m, n))?;
        self.push("transpose", t, Op::Transpose(a), &[a])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let bc = kernels::broadcast(self.shape(a), self.shape(b))
            .ok_or_else(|| Error::shape(name, &[self.shape(a), self.shape(b)]))?;
        let (av, bv) = (self.vals(a), self.vals(b));
        let data = bc.a_idx.iter().zip(&bc.b_idx).map(|(&i, &j)| f(av[i], bv[j])).collect();
        Tensor::new(bc.out_shape, data)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", t, Op::Div(a, b), &[a, b])
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(a);
        Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", t, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, T::tanh);
        self.push("tanh", t, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, T::exp);
        self.push("exp", t, Op::Exp(a), &[a])
    }

    /// Natural log with inputs floored at the smallest positive normal.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let tiny = T::min_positive_value();
        let t = self.unary(a, |x| x.max(tiny).ln());
        self.push("log", t, Op::Log(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scalar_mul(a, -T::one())
    }

    pub fn scalar_mul(&mut self, a: Var, s: T) -> Result<Var> {
        let t = self.unary(a, |x| x * s);
        self.push("scalar_mul", t, Op::ScalarMul(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let t = self.unary(a, |x| x + s);
        self.push("add_scalar", t, Op::AddScalar(a, s), &[a])
    }

    /// `max(x, floor)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Result<Var> {
        let t = self.unary(a, |x| x.max(floor));
        self.push("clamp_min", t, Op::ClampMin(a, floor), &[a])
    }

    fn softmax_impl(&self, a: Var, axis: usize, log: bool) -> Tensor<T> {
        let v = self.value(a);
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let x = v.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let sum: T = (0..n).map(|j| (x[at(j)] - max).exp()).sum();
                let lse = sum.ln();
                for j in 0..n {
                    let z = x[at(j)] - max;
                    out[at(j)] = if log { z - lse } else { z.exp() / sum };
                }
            }
        }
        Tensor {
            shape: v.shape().to_vec(),
            data: out,
        }
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let t = self.softmax_impl(a, axis, false);
        self.push("softmax", t, Op::Softmax(a, axis), &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let t = self.softmax_impl(a, axis, true);
        self.push("log_softmax", t, Op::LogSoftmax(a, axis), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.vals(a).iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.vals(a);
        if v.is_empty() {
            return Err(Error::shape("mean", &[self.shape(a)]));
        }
        let s: T = v.iter().copied().sum::<T>() / T::c(v.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    fn reduce_axis(&self, a: Var, axis: usize, f: impl Fn(&mut dyn Iterator<Item = T>) -> T) -> Tensor<T> {
        let v = self.value(a);
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let x = v.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                out.push(f(&mut (0..n).map(|j| x[(o * n + j) * inner + i])));
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        Tensor { shape, data: out }
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let t = self.reduce_axis(a, axis, |it| it.sum());
        self.push("sum_axis", t, Op::SumAxis(a, axis), &[a])
    }

    /// Euclidean norm along `axis`, keeping it with extent 1.
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("l2_norm", a, axis)?;
        let t = self.reduce_axis(a, axis, |it| it.map(|x| x * x).sum::<T>().sqrt());
        self.push("l2_norm", t, Op::L2Norm(a, axis), &[a])
    }

    /// Minimum along `axis` (kept with extent 1). The lowest index wins ties
    /// and alone receives the gradient.
    pub fn min_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("min_axis", a, axis)?;
        let v = self.value(a);
        let (outer, n, inner) = axis_split(v.shape(), axis);
        if n == 0 {
            return Err(Error::shape("min_axis", &[v.shape()]));
        }
        let x = v.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmin = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..n {
                    if x[(o * n + j) * inner + i] < x[(o * n + best) * inner + i] {
                        best = j;
                    }
                }
                out.push(x[(o * n + best) * inner + i]);
                argmin.push(best);
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let t = Tensor { shape, data: out };
        self.push("min_axis", t, Op::MinAxis { x: a, axis, argmin }, &[a])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", &[]))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &[&base, &[axis]]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (p, q))| d == axis || p == q);
            if !compatible {
                let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.shape(v)).collect();
                return Err(Error::shape("concat", &shapes));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                data.extend_from_slice(&self.vals(x)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        self.push("concat", t, Op::Concat(xs.to_vec(), axis), xs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    /// `x: [n,cin,h,w]`, `w: [cout,cin,3,3]`, `b: [cout]`; stride 1, padding 1.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let ok = sx.len() == 4 && sw.len() == 4 && sw[1] == sx[1] && sw[2] == 3 && sw[3] == 3 && sb == [sw[0]];
        if !ok {
            return Err(Error::shape("conv2d-3x3", &[sx, sw, sb]));
        }
        let d = ConvDims {
            n: sx[0],
            cin: sx[1],
            cout: sw[0],
            h: sx[2],
            w: sx[3],
        };
        let data = kernels::conv3x3(self.backend, &d, self.vals(x), self.vals(w), self.vals(b));
        let t = Tensor::new(vec![d.n, d.cout, d.h, d.w], data)?;
        self.push("conv2d-3x3", t, Op::Conv3x3 { x, w, b }, &[x, w, b])
    }

    /// `[n,c,h,w] -> [n,c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(Error::shape("global_avg_pool", &[s]));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let scale = T::c(1.0 / plane as f64);
        let data = self
            .vals(a)
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        let t = Tensor::new(vec![n, c], data)?;
        self.push("global_avg_pool", t, Op::GlobalAvgPool(a), &[a])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), d).unwrap()
    }

    #[test]
    fn tanh_at_origin() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[0.0]));
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).data(), &[1.0]);
    }

    #[test]
    fn matmul_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_symmetric() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1000.0, 1000.0, -1000.0]));
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s).data()[..2], [0.5, 0.5]);
        let ls = tape.log_softmax(a, 0).unwrap();
        assert!(tape.value(ls).is_finite());
    }

    #[test]
    fn log_is_floored() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[0.0, 1.0]));
        let l = tape.log(a).unwrap();
        assert_eq!(tape.value(l).data()[0], f64::MIN_POSITIVE.ln());
        assert_eq!(tape.value(l).data()[1], 0.0);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1], &[1.0]));
        let z = tape.constant(t(&[1], &[0.0]));
        let q = tape.div(a, z);
        assert!(matches!(q, Err(Error::NonFinite { op: "div" })));
        let big = tape.constant(t(&[1], &[1000.0]));
        assert!(matches!(tape.exp(big), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn concat_and_reshape() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let r = tape.reshape(c, &[3, 2]).unwrap();
        assert_eq!(tape.shape(r), &[3, 2]);
        assert!(tape.reshape(c, &[4]).is_err());
    }

    #[test]
    fn min_axis_ties_pick_lowest_index() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[1, 3], &[2.0, 1.0, 1.0]));
        let m = tape.min_axis(a, 1).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0]);
        let l = tape.sum(m).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn global_avg_pool_means_planes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 2, 1, 2], &[1.0, 3.0, 5.0, 7.0]));
        let p = tape.global_avg_pool(a).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 6.0]);
    }
}
