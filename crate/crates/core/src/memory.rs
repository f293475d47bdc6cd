//! Visual memory of per-class centroids and the dynamic meta-embedding
//! `v_meta = (v_direct + e * v_memory) / max(gamma, eps)`.

use crate::error::{Error, Result};
use crate::nn::{Linear, LinearVars, Module};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Default guard for the `1 / gamma` scaling.
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// One centroid per known class; row `i` belongs to label `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    centroids: Tensor<T>,
}

impl<T: Real> MemoryBank<T> {
    pub fn new(centroids: Tensor<T>) -> Result<Self> {
        let s = centroids.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::EmptyBank);
        }
        if !centroids.is_finite() {
            return Err(Error::invalid("centroids must be finite"));
        }
        Ok(MemoryBank { centroids })
    }

    pub fn zeros(classes: usize, dim: usize) -> Self {
        MemoryBank {
            centroids: Tensor::zeros(vec![classes, dim]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    pub fn centroid(&self, i: usize) -> &[T] {
        self.centroids.row(i)
    }

    pub fn centroids(&self) -> &Tensor<T> {
        &self.centroids
    }

    /// Per-class means of `features` (`[n, d]`) over labels `0..classes`.
    pub fn init_centroids(features: &Tensor<T>, labels: &[usize], classes: usize) -> Result<Self> {
        let d = features.shape()[1];
        if features.rows() != labels.len() {
            return Err(Error::shape("init_centroids", &[features.shape(), &[labels.len()]]));
        }
        let mut sums = vec![T::zero(); classes * d];
        let mut counts = vec![0usize; classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            counts[l] += 1;
            for (s, &x) in sums[l * d..(l + 1) * d].iter_mut().zip(features.row(i)) {
                *s += x;
            }
        }
        let missing: Vec<usize> = (0..classes).filter(|&c| counts[c] == 0).collect();
        if !missing.is_empty() {
            return Err(Error::MissingClasses(missing));
        }
        for (c, &n) in counts.iter().enumerate() {
            let inv = T::c(n as f64);
            sums[c * d..(c + 1) * d].iter_mut().for_each(|s| *s /= inv);
        }
        MemoryBank::new(Tensor::new(vec![classes, d], sums)?)
    }

    /// Centre-loss style step: `delta_i = sum_b [y_b = i](c_i - x_b) / (1 + n_i)`,
    /// then `c_i -= rate * delta_i`. Classes absent from the batch are untouched.
    pub fn update_centroids(&mut self, features: &[T], labels: &[usize], rate: T) -> Result<()> {
        let (k, d) = (self.num_classes(), self.dim());
        if features.len() != labels.len() * d {
            return Err(Error::shape(
                "update_centroids",
                &[&[features.len()], &[labels.len(), d]],
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
        let mut delta = vec![T::zero(); k * d];
        let mut counts = vec![0usize; k];
        for (b, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let c = self.centroids.row(l);
            for j in 0..d {
                delta[l * d + j] += c[j] - features[b * d + j];
            }
        }
        let data = self.centroids.data_mut();
        for i in 0..k {
            if counts[i] == 0 {
                continue;
            }
            let denom = T::one() + T::c(counts[i] as f64);
            for j in 0..d {
                data[i * d + j] -= rate * (delta[i * d + j] / denom);
            }
        }
        Ok(())
    }

    /// Euclidean distance from `v` to every centroid.
    pub fn distances(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.dim() {
            return Err(Error::shape("reachability", &[&[v.len()], self.centroids.shape()]));
        }
        Ok((0..self.num_classes())
            .map(|i| {
                self.centroid(i)
                    .iter()
                    .zip(v)
                    .map(|(&c, &x)| (x - c) * (x - c))
                    .sum::<T>()
                    .sqrt()
            })
            .collect())
    }

    /// `min_i ||v - c_i||`.
    pub fn reachability(&self, v: &[T]) -> Result<T> {
        Ok(self.distances(v)?.into_iter().fold(T::infinity(), T::min))
    }

    /// Appends a centroid for a newly discovered class.
    pub fn push(&mut self, centroid: &[T]) -> Result<usize> {
        let d = self.dim();
        if centroid.len() != d {
            return Err(Error::shape("memory_push", &[&[centroid.len()], &[d]]));
        }
        let mut data = self.centroids.data().to_vec();
        data.extend_from_slice(centroid);
        let k = self.num_classes() + 1;
        self.centroids = Tensor::new(vec![k, d], data)?;
        Ok(k - 1)
    }
}

/// `[n, k]` Euclidean distances between rows of `x: [n, d]` and `centroids: [k, d]`.
pub fn pairwise_distances<T: Real>(tape: &mut Tape<T>, x: Var, centroids: Var) -> Result<Var> {
    let (n, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    let k = tape.shape(centroids)[0];
    if tape.shape(centroids)[1] != d {
        return Err(Error::shape(
            "pairwise_distances",
            &[tape.shape(x), tape.shape(centroids)],
        ));
    }
    let xr = tape.reshape(x, &[n, 1, d])?;
    let cr = tape.reshape(centroids, &[1, k, d])?;
    let diff = tape.sub(xr, cr)?;
    let dist = tape.l2_norm(diff, 2)?;
    tape.reshape(dist, &[n, k])
}

/// Tape handles of one meta-embedding computation over a batch.
#[derive(Debug, Clone, Copy)]
pub struct MetaVars {
    /// Hallucinated coefficients `[n, K]`.
    pub coefficients: Var,
    pub v_memory: Var,
    /// Concept selector in `(-1, 1)`, `[n, d]`.
    pub selector: Var,
    /// Reachability `[n, 1]`.
    pub gamma: Var,
    pub v_meta: Var,
}

/// Builds the meta-embedding of `v_direct: [n, d]` on the tape. Centroids enter
/// as constants; `gamma` is differentiable with respect to `v_direct`.
pub fn meta_embedding<T: Real>(
    tape: &mut Tape<T>,
    v_direct: Var,
    bank: &MemoryBank<T>,
    hallucinator: &LinearVars,
    selector: &LinearVars,
    eps: T,
) -> Result<MetaVars> {
    let centroids = tape.constant(bank.centroids.clone());
    let coefficients = hallucinator.forward(tape, v_direct)?;
    if tape.shape(coefficients)[1] != bank.num_classes() {
        return Err(Error::shape(
            "compose_meta_embedding",
            &[tape.shape(coefficients), bank.centroids.shape()],
        ));
    }
    let v_memory = tape.matmul(coefficients, centroids)?;
    let pre = selector.forward(tape, v_direct)?;
    let e = tape.tanh(pre)?;
    let dist = pairwise_distances(tape, v_direct, centroids)?;
    let gamma = tape.min_axis(dist, 1)?;
    let guarded = tape.clamp_min(gamma, eps)?;
    let infused = tape.mul(e, v_memory)?;
    let sum = tape.add(v_direct, infused)?;
    let v_meta = tape.div(sum, guarded)?;
    Ok(MetaVars {
        coefficients,
        v_memory,
        selector: e,
        gamma,
        v_meta,
    })
}

/// Values of one sample's meta-embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaEmbedding<T> {
    pub v_direct: Vec<T>,
    pub coefficients: Vec<T>,
    pub v_memory: Vec<T>,
    pub selector: Vec<T>,
    pub gamma: T,
    pub v_meta: Vec<T>,
}

/// Meta-embedding of a single direct feature.
pub fn compose_meta_embedding<T: Real>(
    v_direct: &[T],
    bank: &MemoryBank<T>,
    hallucinator: &Linear<T>,
    selector: &Linear<T>,
    eps: T,
) -> Result<MetaEmbedding<T>> {
    if !(eps > T::zero()) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let mut tape = Tape::new();
    let (hal, _) = hallucinator.bind(&mut tape, false);
    let (sel, _) = selector.bind(&mut tape, false);
    let v = tape.constant(Tensor::new(vec![1, v_direct.len()], v_direct.to_vec())?);
    let m = meta_embedding(&mut tape, v, bank, &hal, &sel, eps)?;
    let get = |x: Var| tape.value(x).data().to_vec();
    Ok(MetaEmbedding {
        v_direct: v_direct.to_vec(),
        coefficients: get(m.coefficients),
        v_memory: get(m.v_memory),
        selector: get(m.selector),
        gamma: tape.value(m.gamma).data()[0],
        v_meta: get(m.v_meta),
    })
}
