//! Active exploration of an unlabelled pool: per-sample openness and
//! informativeness, score-ranked selection, simulated annotation, classifier
//! growth by weight hallucination, and the multi-stage recognition loop.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{to_real, Inference, Mode, Model};
use crate::nn::Module;
use crate::objective::{cosine_logits, cross_entropy, squash_vec};
use crate::par::Backend;
use crate::tensor::{Real, Tape, Tensor};

/// Per-sample uncertainty of a direct feature against the visual memory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    /// Distance to the nearest centroid.
    pub u_open: f64,
    /// Nearest over second-nearest distance, in `(0, 1]`.
    pub u_info: f64,
    /// `u_open * u_info`; larger means more worth annotating.
    pub score: f64,
    /// `-T ln(K exp(score / T))`.
    pub energy: f64,
}

/// Uncertainty from the distances of one sample to all `K >= 2` centroids.
pub fn uncertainty_from_distances(distances: &[f64], temperature: f64) -> Result<UncertaintyRecord> {
    let k = distances.len();
    if k < 2 {
        return Err(Error::invalid("uncertainty needs at least two centroids"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("exploration temperature must be positive"));
    }
    let (mut d1, mut d2) = (f64::INFINITY, f64::INFINITY);
    for &d in distances {
        if d < d1 {
            d2 = d1;
            d1 = d;
        } else if d < d2 {
            d2 = d;
        }
    }
    let u_info = if d2 == 0.0 { 1.0 } else { d1 / d2 };
    let score = d1 * u_info;
    // The summand does not depend on the class, so all K terms are equal.
    let terms = vec![score / temperature; k];
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + terms.iter().map(|&t| (t - m).exp()).sum::<f64>().ln();
    Ok(UncertaintyRecord {
        u_open: d1,
        u_info,
        score,
        energy: -temperature * lse,
    })
}

/// Uncertainty of `v_direct` against `bank`.
pub fn compute_uncertainties<T: Real>(
    v_direct: &[T],
    bank: &crate::memory::MemoryBank<T>,
    temperature: f64,
) -> Result<UncertaintyRecord> {
    let d: Vec<f64> = bank
        .distances(v_direct)?
        .into_iter()
        .map(|x| x.to_f64().unwrap_or(f64::NAN))
        .collect();
    uncertainty_from_distances(&d, temperature)
}

/// Number of samples a budget fraction buys from a pool of `n`.
pub fn budget_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Indices of the `ceil(fraction * n)` largest scores; equal scores keep pool order.
pub fn select_for_annotation(scores: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot select from an empty pool"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "budget fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(budget_count(scores.len(), fraction));
    Ok(order)
}

/// Uniformly random subset of the same size, in ascending index order.
pub fn select_random<R: Rng>(n: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("cannot select from an empty pool"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "budget fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut v = index::sample(rng, n, budget_count(n, fraction)).into_vec();
    v.sort_unstable();
    Ok(v)
}

/// Unit-normalised `sum_s softmax(score / T)_s * squash(v_meta_s)`.
pub fn hallucinate_class_weights<T: Real>(meta: &[Vec<T>], scores: &[f64], temperature: f64, eps: T) -> Result<Vec<T>> {
    if meta.is_empty() || meta.len() != scores.len() {
        return Err(Error::invalid(
            "weight hallucination needs one score per annotated sample",
        ));
    }
    let d = meta[0].len();
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|&s| ((s - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut w = vec![T::zero(); d];
    for (v, &ei) in meta.iter().zip(&e) {
        if v.len() != d {
            return Err(Error::shape("hallucinate_class_weights", &[&[v.len()], &[d]]));
        }
        let omega = T::c(ei / z);
        for (wj, sj) in w.iter_mut().zip(squash_vec(v, eps)) {
            *wj += omega * sj;
        }
    }
    let norm = w.iter().map(|&x| x * x).sum::<T>().sqrt();
    if !(norm > T::zero()) {
        return Err(Error::invalid("hallucinated weight has zero norm"));
    }
    Ok(w.into_iter().map(|x| x / norm).collect())
}

/// Answer of the annotator.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OracleLabel {
    /// A class the model already has, by classifier index.
    Known(usize),
    /// A class name the model has not seen.
    Novel(String),
}

/// Source of labels for selected pool samples.
pub trait LabelOracle {
    fn query(&mut self, pool_index: usize) -> OracleLabel;
    fn queries(&self) -> usize;
}

/// Answers from hidden ground-truth labels; open labels become `open-<label>`.
#[derive(Debug, Clone)]
pub struct LookupOracle {
    labels: Vec<usize>,
    known: BTreeSet<usize>,
    queries: usize,
}

impl LookupOracle {
    pub fn new(pool: &Dataset) -> Self {
        LookupOracle {
            labels: pool.labels.clone(),
            known: pool.known_labels.clone(),
            queries: 0,
        }
    }
}

pub fn novel_name(label: usize) -> String {
    format!("open-{label}")
}

impl LabelOracle for LookupOracle {
    fn query(&mut self, pool_index: usize) -> OracleLabel {
        self.queries += 1;
        let l = self.labels[pool_index];
        if self.known.contains(&l) {
            OracleLabel::Known(l)
        } else {
            OracleLabel::Novel(novel_name(l))
        }
    }

    fn queries(&self) -> usize {
        self.queries
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneConfig {
    #[serde(default = "default_ft_epochs")]
    pub epochs: usize,
    #[serde(default = "default_ft_lr")]
    pub learning_rate: f64,
}

fn default_ft_epochs() -> usize {
    10
}

fn default_ft_lr() -> f64 {
    0.01
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: default_ft_epochs(),
            learning_rate: default_ft_lr(),
        }
    }
}

/// One annotated pool sample with the values computed when it was scored.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation<T> {
    pub label: OracleLabel,
    pub v_direct: Vec<T>,
    pub v_meta: Vec<T>,
    pub score: f64,
}

/// Classifier state plus the names of the classes discovered so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Explorer<T> {
    pub model: Model<T>,
    /// Classifier index of every discovered class name.
    pub discovered: BTreeMap<String, usize>,
}

impl<T: Real> Explorer<T> {
    pub fn new(model: Model<T>) -> Self {
        Explorer {
            model,
            discovered: BTreeMap::new(),
        }
    }

    /// Scores a pool: direct features, meta-embeddings and uncertainty records.
    pub fn score_pool(
        &self,
        inputs: &[T],
        temperature: f64,
        backend: Backend,
    ) -> Result<(Inference<T>, Vec<UncertaintyRecord>)> {
        let inf = self.model.infer(inputs, Mode::Meta, backend)?;
        let records = backend.try_map_range(inf.len(), self.model.num_classes() * inf.dim, |i| {
            compute_uncertainties(inf.direct_row(i), &self.model.bank, temperature)
        })?;
        Ok((inf, records))
    }

    /// Grows the classifier for novel labels, then fine-tunes every classifier row
    /// with the backbone and heads frozen.
    pub fn update_with_annotations(
        &mut self,
        annotations: &[Annotation<T>],
        temperature: f64,
        fine_tune: &FineTuneConfig,
    ) -> Result<()> {
        let k = self.model.num_classes();
        let mut groups: BTreeMap<String, Vec<&Annotation<T>>> = BTreeMap::new();
        for a in annotations {
            match &a.label {
                OracleLabel::Known(c) if *c >= k => {
                    return Err(Error::Annotation(format!(
                        "known label {c} but the classifier has {k} classes"
                    )));
                }
                OracleLabel::Known(_) => {}
                OracleLabel::Novel(name) if self.discovered.contains_key(name) => {}
                OracleLabel::Novel(name) => groups.entry(name.clone()).or_default().push(a),
            }
        }
        let mut weights = Vec::new();
        let mut centroids = Vec::new();
        for (name, group) in &groups {
            let meta: Vec<Vec<T>> = group.iter().map(|a| a.v_meta.clone()).collect();
            let scores: Vec<f64> = group.iter().map(|a| a.score).collect();
            weights.push(hallucinate_class_weights(
                &meta,
                &scores,
                temperature,
                self.model.epsilon,
            )?);
            let d = group[0].v_direct.len();
            let mut c = vec![T::zero(); d];
            for a in group {
                for (cj, &x) in c.iter_mut().zip(&a.v_direct) {
                    *cj += x;
                }
            }
            let n = T::c(group.len() as f64);
            centroids.push(c.into_iter().map(|x| x / n).collect());
            self.discovered.insert(name.clone(), k + weights.len() - 1);
        }
        self.model.grow(&weights, &centroids)?;
        self.fine_tune(annotations, fine_tune)
    }

    fn label_index(&self, label: &OracleLabel) -> Result<usize> {
        match label {
            OracleLabel::Known(c) => Ok(*c),
            OracleLabel::Novel(name) => self
                .discovered
                .get(name)
                .copied()
                .ok_or_else(|| Error::Annotation(format!("undiscovered class {name}"))),
        }
    }

    /// Mean cross-entropy on the annotated samples, plain SGD on the classifier only.
    fn fine_tune(&mut self, annotations: &[Annotation<T>], cfg: &FineTuneConfig) -> Result<()> {
        if annotations.is_empty() || cfg.epochs == 0 {
            return Ok(());
        }
        let labels = annotations
            .iter()
            .map(|a| self.label_index(&a.label))
            .collect::<Result<Vec<_>>>()?;
        // Meta-embeddings against the grown memory, fixed during fine-tuning.
        let mut direct = Vec::new();
        for a in annotations {
            direct.extend_from_slice(&a.v_direct);
        }
        let n = annotations.len();
        let d = self.model.feature_dim();
        let squashed = {
            let mut tape = Tape::with_backend(Backend::Sequential);
            let (vars, _) = self.model.bind(&mut tape, false);
            let x = tape.constant(Tensor::new(vec![n, d], direct)?);
            let fwd = self.model.head(&mut tape, &vars, x, Mode::Meta)?;
            let rows: Vec<Vec<T>> = tape
                .value(fwd.embedding)
                .data()
                .chunks(d)
                .map(|r| squash_vec(r, self.model.epsilon))
                .collect();
            Tensor::new(vec![n, d], rows.concat())?
        };
        let lr = T::c(cfg.learning_rate);
        let inv_n = T::c(1.0 / n as f64);
        for _ in 0..cfg.epochs {
            let mut tape = Tape::with_backend(Backend::Sequential);
            let w = tape.param(self.model.classifier.weight.clone());
            let x = tape.constant(squashed.clone());
            let logits = cosine_logits(&mut tape, x, w, self.model.classifier.scale)?;
            let ce = cross_entropy(&mut tape, logits, &labels)?;
            let loss = tape.scalar_mul(ce, inv_n)?;
            let g = tape.backward(loss)?.get(w);
            for (p, &gi) in self.model.classifier.weight.data_mut().iter_mut().zip(g.data()) {
                *p -= lr * gi;
            }
        }
        Ok(())
    }

    /// Class names (as strings) assigned to each test sample under the current
    /// classifier: known rows map to their label, grown rows to their name.
    fn predicted_names(&self, inputs: &[T], backend: Backend) -> Result<Vec<String>> {
        let inf = self.model.infer(inputs, Mode::Meta, backend)?;
        let names: BTreeMap<usize, String> = self.discovered.iter().map(|(n, &i)| (i, n.clone())).collect();
        Ok(inf
            .argmax()
            .into_iter()
            .map(|c| names.get(&c).cloned().unwrap_or_else(|| c.to_string()))
            .collect())
    }

    /// Accuracy on known test samples and on open test samples whose class is in
    /// `open_so_far`, classifying over every current class.
    pub fn evaluate(
        &self,
        test: &Dataset,
        open_so_far: &BTreeSet<usize>,
        backend: Backend,
    ) -> Result<(f64, Option<f64>)> {
        let x = to_real::<T>(&test.features);
        let names = self.predicted_names(&x, backend)?;
        let (mut kn, mut kh, mut on, mut oh) = (0usize, 0usize, 0usize, 0usize);
        for (i, &l) in test.labels.iter().enumerate() {
            if test.known_labels.contains(&l) {
                kn += 1;
                kh += usize::from(names[i] == l.to_string());
            } else if open_so_far.contains(&l) {
                on += 1;
                oh += usize::from(names[i] == novel_name(l));
            }
        }
        let known_acc = if kn > 0 { kh as f64 / kn as f64 } else { 0.0 };
        Ok((known_acc, (on > 0).then(|| oh as f64 / on as f64)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Largest `u_open * u_info` first.
    Score,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRow {
    pub stage: usize,
    pub budget_used: usize,
    pub known_acc: f64,
    pub unknown_acc: f64,
    pub classifier_width: usize,
}

/// Settings of the multi-stage loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub budget: f64,
    pub temperature: f64,
    pub policy: Policy,
    pub fine_tune: FineTuneConfig,
}

/// Runs select -> annotate -> update for each stage pool. Row 0 is the
/// pre-loop evaluation; stage `t` counts unknown accuracy over the open classes
/// present in pools `1..=t`.
pub fn run_dynamic_loop<T: Real, R: Rng>(
    explorer: &mut Explorer<T>,
    pools: &[Dataset],
    test: &Dataset,
    cfg: &LoopConfig,
    rng: &mut R,
    backend: Backend,
) -> Result<Vec<LoopRow>> {
    if !(0.0..=1.0).contains(&cfg.budget) {
        return Err(Error::Config(format!(
            "active.budget must lie in [0, 1], got {}",
            cfg.budget
        )));
    }
    let mut open_so_far = BTreeSet::new();
    let (known_acc, _) = explorer.evaluate(test, &open_so_far, backend)?;
    let mut rows = vec![LoopRow {
        stage: 0,
        budget_used: 0,
        known_acc,
        unknown_acc: 0.0,
        classifier_width: explorer.model.num_classes(),
    }];
    for (t, pool) in pools.iter().enumerate() {
        open_so_far.extend(pool.labels.iter().filter(|l| !pool.known_labels.contains(l)));
        let mut used = 0;
        if cfg.budget > 0.0 && !pool.is_empty() {
            let x = to_real::<T>(&pool.features);
            let (inf, records) = explorer.score_pool(&x, cfg.temperature, backend)?;
            let picked = match cfg.policy {
                Policy::Score => {
                    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
                    select_for_annotation(&scores, cfg.budget)?
                }
                Policy::Random => select_random(pool.len(), cfg.budget, rng)?,
            };
            let mut oracle = LookupOracle::new(pool);
            let annotations: Vec<Annotation<T>> = picked
                .iter()
                .map(|&i| Annotation {
                    label: oracle.query(i),
                    v_direct: inf.direct_row(i).to_vec(),
                    v_meta: inf.embedding_row(i).to_vec(),
                    score: records[i].score,
                })
                .collect();
            used = oracle.queries();
            explorer.update_with_annotations(&annotations, cfg.temperature, &cfg.fine_tune)?;
        }
        let (known_acc, unknown_acc) = explorer.evaluate(test, &open_so_far, backend)?;
        rows.push(LoopRow {
            stage: t + 1,
            budget_used: used,
            known_acc,
            unknown_acc: unknown_acc.unwrap_or(0.0),
            classifier_width: explorer.model.num_classes(),
        });
    }
    Ok(rows)
}
