//! Mini-batch samplers: class-aware neighbourhood batches and plain instance
//! shuffling.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// `P` classes per batch, `Q` samples each.
    ClassAware,
    /// Uniform over training samples, one shuffled pass per epoch.
    Instance,
}

/// Training-sample indices grouped by known label `0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassIndex {
    pub by_class: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn new(data: &Dataset) -> Result<Self> {
        let k = data.num_known();
        let mut by_class = vec![Vec::new(); k];
        for (i, &l) in data.labels.iter().enumerate() {
            if l >= k {
                return Err(Error::LabelOutOfRange { label: l, classes: k });
            }
            by_class[l].push(i);
        }
        let missing: Vec<usize> = (0..k).filter(|&c| by_class[c].is_empty()).collect();
        if !missing.is_empty() {
            return Err(Error::MissingClasses(missing));
        }
        Ok(ClassIndex { by_class })
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }
}

/// Sample indices and their labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

/// `q` samples of each class in `classes`; with replacement only for classes
/// smaller than `q`.
fn draw_from_classes<R: Rng>(index_: &ClassIndex, classes: &[usize], q: usize, rng: &mut R) -> Batch {
    let mut indices = Vec::with_capacity(classes.len() * q);
    let mut labels = Vec::with_capacity(classes.len() * q);
    for &c in classes {
        let pool = &index_.by_class[c];
        if pool.len() >= q {
            indices.extend(index::sample(rng, pool.len(), q).into_iter().map(|i| pool[i]));
        } else {
            indices.extend((0..q).map(|_| pool[rng.gen_range(0..pool.len())]));
        }
        labels.extend(std::iter::repeat_n(c, q));
    }
    Batch { indices, labels }
}

/// `p` distinct classes drawn uniformly, `q` samples each.
pub fn sample_neighborhood_batch<R: Rng>(index_: &ClassIndex, p: usize, q: usize, rng: &mut R) -> Result<Batch> {
    let k = index_.num_classes();
    if p == 0 || q == 0 || p > k {
        return Err(Error::Config(format!(
            "class-aware batches need 1 <= P <= K and Q >= 1, got P={p}, Q={q}, K={k}"
        )));
    }
    let classes = index::sample(rng, k, p).into_vec();
    Ok(draw_from_classes(index_, &classes, q, rng))
}

/// Position within the current pass over classes (or samples).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub order: Vec<usize>,
    pub cursor: usize,
}

impl SamplerState {
    /// Class-aware: shuffles the class list once per cycle and serves
    /// consecutive groups of `p`; a short last group is padded with other
    /// random classes so every batch has exactly `p` distinct labels.
    pub fn next_class_aware<R: Rng>(&mut self, index_: &ClassIndex, p: usize, q: usize, rng: &mut R) -> Result<Batch> {
        let k = index_.num_classes();
        if p == 0 || q == 0 || p > k {
            return Err(Error::Config(format!(
                "class-aware batches need 1 <= P <= K and Q >= 1, got P={p}, Q={q}, K={k}"
            )));
        }
        if self.cursor >= self.order.len() || self.order.len() != k {
            self.order = (0..k).collect();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let end = (self.cursor + p).min(k);
        let mut classes = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        if classes.len() < p {
            let mut rest: Vec<usize> = (0..k).filter(|c| !classes.contains(c)).collect();
            rest.shuffle(rng);
            classes.extend(rest.into_iter().take(p - classes.len()));
        }
        Ok(draw_from_classes(index_, &classes, q, rng))
    }

    /// Instance sampling: `b` consecutive samples of a per-pass shuffle; the pass
    /// restarts (reshuffled) when exhausted.
    pub fn next_instance<R: Rng>(&mut self, labels: &[usize], b: usize, rng: &mut R) -> Batch {
        let n = labels.len();
        let mut indices = Vec::with_capacity(b);
        while indices.len() < b {
            if self.cursor >= self.order.len() || self.order.len() != n {
                self.order = (0..n).collect();
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let take = (b - indices.len()).min(n - self.cursor);
            indices.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        let labels = indices.iter().map(|&i| labels[i]).collect();
        Batch { indices, labels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn index(sizes: &[usize]) -> ClassIndex {
        let mut next = 0;
        ClassIndex {
            by_class: sizes
                .iter()
                .map(|&s| {
                    let v = (next..next + s).collect();
                    next += s;
                    v
                })
                .collect(),
        }
    }

    #[test]
    fn batch_has_p_labels_q_each() {
        let idx = index(&[5, 5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_neighborhood_batch(&idx, 2, 2, &mut rng).unwrap();
        assert_eq!(b.indices.len(), 4);
        let labels: BTreeSet<_> = b.labels.iter().collect();
        assert_eq!(labels.len(), 2);
        for (&i, &l) in b.indices.iter().zip(&b.labels) {
            assert!(idx.by_class[l].contains(&i));
        }
    }

    #[test]
    fn small_class_is_repeated() {
        let idx = index(&[1, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = draw_from_classes(&idx, &[0], 4, &mut rng);
        assert_eq!(b.indices, vec![0, 0, 0, 0]);
    }

    #[test]
    fn large_class_is_drawn_without_replacement() {
        let idx = index(&[10]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = draw_from_classes(&idx, &[0], 10, &mut rng);
        let distinct: BTreeSet<_> = b.indices.iter().collect();
        assert_eq!(distinct.len(), 10);
    }

    #[test]
    fn same_seed_same_batches() {
        let idx = index(&[3, 4, 5, 6]);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut s = SamplerState::default();
            (0..5)
                .map(|_| s.next_class_aware(&idx, 3, 2, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn one_cycle_covers_every_class() {
        let idx = index(&[2; 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = SamplerState::default();
        let mut seen = BTreeSet::new();
        for _ in 0..7usize.div_ceil(3) {
            let b = s.next_class_aware(&idx, 3, 1, &mut rng).unwrap();
            assert_eq!(b.labels.iter().collect::<BTreeSet<_>>().len(), 3);
            seen.extend(b.labels);
        }
        assert_eq!(seen.len(), 7);
    }

    #[test]
    fn p_above_k_is_rejected() {
        let idx = index(&[2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_neighborhood_batch(&idx, 3, 1, &mut rng).is_err());
        assert!(SamplerState::default().next_class_aware(&idx, 3, 1, &mut rng).is_err());
    }

    #[test]
    fn instance_pass_visits_each_sample_once() {
        let labels = vec![0, 1, 1, 2, 2, 2, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = SamplerState::default();
        let mut all = Vec::new();
        for _ in 0..7 {
            all.extend(s.next_instance(&labels, 1, &mut rng).indices);
        }
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        let b = s.next_instance(&labels, 3, &mut rng);
        assert_eq!(b.labels, b.indices.iter().map(|&i| labels[i]).collect::<Vec<_>>());
    }
}
