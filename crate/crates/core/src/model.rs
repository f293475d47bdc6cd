//! The full recogniser: backbone, hallucination and selector heads, cosine
//! classifier and visual memory.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneVars};
use crate::error::{Error, Result};
use crate::memory::{meta_embedding, MemoryBank, MetaVars, DEFAULT_EPSILON};
use crate::nn::{prefixed, Linear, LinearVars, Module};
use crate::objective::{
    cosine_logits, cross_entropy, large_margin, squash, total_loss, CosineClassifier, ObjectiveConfig,
    DEFAULT_LOGIT_SCALE,
};
use crate::par::Backend;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Samples per tape during batched inference.
pub const INFER_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_feature_dim() -> usize {
    16
}

fn default_logit_scale() -> f64 {
    DEFAULT_LOGIT_SCALE
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            feature_dim: default_feature_dim(),
            logit_scale: default_logit_scale(),
            epsilon: default_epsilon(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::Config("model.feature_dim must be at least 2".into()));
        }
        if !(self.logit_scale > 0.0) || !self.logit_scale.is_finite() {
            return Err(Error::Config("model.logit_scale must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("model.epsilon must be positive".into()));
        }
        match self.backbone {
            BackboneConfig::Mlp { hidden } if hidden.contains(&0) => {
                Err(Error::Config("model.backbone.hidden must be positive".into()))
            }
            BackboneConfig::Cnn { channels } if channels < 2 || channels % 2 != 0 => Err(Error::Config(
                "model.backbone.channels must be even and at least 2".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// `Meta` classifies the calibrated meta-embedding; `Plain` classifies the
/// direct feature (memory off, `gamma` fixed to 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Meta,
    Plain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub backbone: Backbone<T>,
    /// `d -> K` coefficients over the centroids.
    pub hallucinator: Linear<T>,
    /// `d -> d`, tanh-gated.
    pub selector: Linear<T>,
    pub classifier: CosineClassifier<T>,
    pub bank: MemoryBank<T>,
    pub epsilon: T,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub hallucinator: LinearVars,
    pub selector: LinearVars,
    pub classifier: Var,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub direct: Var,
    pub meta: Option<MetaVars>,
    /// The embedding fed to the classifier (`v_meta` or `v_direct`).
    pub embedding: Var,
    pub logits: Var,
}

impl<T: Real> Model<T> {
    /// Fresh parameters; the memory starts as zero centroids until initialised.
    pub fn init<R: Rng>(rng: &mut R, cfg: &ModelConfig, sample_shape: &[usize], classes: usize) -> Result<Self> {
        cfg.validate()?;
        if classes == 0 {
            return Err(Error::Config("at least one known class is required".into()));
        }
        let d = cfg.feature_dim;
        let backbone = Backbone::init(rng, &cfg.backbone, sample_shape, d)?;
        // Zero heads make the first meta step equal to v_direct / gamma.
        let hallucinator = Linear::zeros(d, classes);
        let selector = Linear::zeros(d, d);
        let classifier = CosineClassifier::init(rng, classes, d, T::c(cfg.logit_scale));
        Ok(Model {
            backbone,
            hallucinator,
            selector,
            classifier,
            bank: MemoryBank::zeros(classes, d),
            epsilon: T::c(cfg.epsilon),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.dim()
    }

    pub fn sample_len(&self) -> usize {
        self.backbone.sample_shape().iter().product()
    }

    /// Records the forward pass of `n` row-major samples.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &ModelVars, inputs: &[T], n: usize, mode: Mode) -> Result<Forward> {
        let direct = vars.backbone.forward(tape, inputs, n)?;
        self.head(tape, vars, direct, mode)
    }

    /// Everything after the backbone, starting from direct features `[n, d]`.
    pub fn head(&self, tape: &mut Tape<T>, vars: &ModelVars, direct: Var, mode: Mode) -> Result<Forward> {
        let (meta, embedding) = match mode {
            Mode::Meta => {
                let m = meta_embedding(
                    tape,
                    direct,
                    &self.bank,
                    &vars.hallucinator,
                    &vars.selector,
                    self.epsilon,
                )?;
                (Some(m), m.v_meta)
            }
            Mode::Plain => (None, direct),
        };
        let squashed = squash(tape, embedding, self.epsilon)?;
        let logits = cosine_logits(tape, squashed, vars.classifier, self.classifier.scale)?;
        Ok(Forward {
            direct,
            meta,
            embedding,
            logits,
        })
    }

    /// Cross-entropy plus, in `Meta` mode, the weighted large-margin term; both summed
    /// over the batch.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        fwd: &Forward,
        labels: &[usize],
        objective: &ObjectiveConfig,
    ) -> Result<Var> {
        let ce = cross_entropy(tape, fwd.logits, labels)?;
        match fwd.meta {
            Some(m) => {
                let lm = large_margin(tape, m.v_meta, &self.bank, labels, T::c(objective.margin))?;
                total_loss(tape, ce, lm, T::c(objective.lambda))
            }
            None => Ok(ce),
        }
    }

    /// Batched inference without gradients. Chunks of [`INFER_CHUNK`] samples run
    /// on independent tapes, in parallel under [`Backend::Parallel`].
    pub fn infer(&self, inputs: &[T], mode: Mode, backend: Backend) -> Result<Inference<T>> {
        let per = self.sample_len();
        if per == 0 || !inputs.len().is_multiple_of(per) {
            return Err(Error::shape("infer", &[&[inputs.len()], &[per]]));
        }
        let n = inputs.len() / per;
        let chunks = n.div_ceil(INFER_CHUNK);
        let work = INFER_CHUNK * self.backbone.num_params().max(1);
        let parts = backend.try_map_range(chunks, work, |c| {
            let lo = c * INFER_CHUNK;
            let hi = (lo + INFER_CHUNK).min(n);
            let mut tape = Tape::with_backend(Backend::Sequential);
            let (vars, _) = self.bind(&mut tape, false);
            let fwd = self.forward(&mut tape, &vars, &inputs[lo * per..hi * per], hi - lo, mode)?;
            Ok::<_, Error>(Inference {
                direct: tape.value(fwd.direct).data().to_vec(),
                embedding: tape.value(fwd.embedding).data().to_vec(),
                logits: tape.value(fwd.logits).data().to_vec(),
                classes: self.num_classes(),
                dim: self.feature_dim(),
            })
        })?;
        let mut out = Inference {
            direct: Vec::with_capacity(n * self.feature_dim()),
            embedding: Vec::with_capacity(n * self.feature_dim()),
            logits: Vec::with_capacity(n * self.num_classes()),
            classes: self.num_classes(),
            dim: self.feature_dim(),
        };
        for p in parts {
            out.direct.extend(p.direct);
            out.embedding.extend(p.embedding);
            out.logits.extend(p.logits);
        }
        Ok(out)
    }

    /// Adds classes discovered after training: classifier rows, centroids and zero
    /// hallucinator columns.
    pub fn grow(&mut self, weights: &[Vec<T>], centroids: &[Vec<T>]) -> Result<()> {
        if weights.len() != centroids.len() {
            return Err(Error::invalid("one centroid per new classifier row is required"));
        }
        self.classifier.push_rows(weights)?;
        for c in centroids {
            self.bank.push(c)?;
        }
        self.hallucinator.grow_outputs(weights.len());
        Ok(())
    }

    /// Replaces every tensor whose name matches; shapes must agree.
    pub fn set_named(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if name == "memory.centroids" {
            if value.shape() != self.bank.centroids().shape() {
                return Err(Error::Checkpoint {
                    tensor: name.into(),
                    reason: format!("shape {:?} != {:?}", value.shape(), self.bank.centroids().shape()),
                });
            }
            self.bank = MemoryBank::new(value)?;
            return Ok(());
        }
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        let slot = names.iter().position(|n| n == name).ok_or_else(|| Error::Checkpoint {
            tensor: name.into(),
            reason: "no such tensor in this model".into(),
        })?;
        let target = self.params_mut().swap_remove(slot);
        if target.shape() != value.shape() {
            return Err(Error::Checkpoint {
                tensor: name.into(),
                reason: format!("shape {:?} != {:?}", value.shape(), target.shape()),
            });
        }
        *target = value;
        Ok(())
    }
}

impl<T: Real> Module<T> for Model<T> {
    type Bound = ModelVars;

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = prefixed("backbone", self.backbone.named_params());
        v.extend(prefixed("hallucinator", self.hallucinator.named_params()));
        v.extend(prefixed("selector", self.selector.named_params()));
        v.extend(prefixed("classifier", self.classifier.named_params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.backbone.params_mut();
        v.extend(self.hallucinator.params_mut());
        v.extend(self.selector.params_mut());
        v.extend(self.classifier.params_mut());
        v
    }

    fn bind_vars(&self, vars: &mut std::slice::Iter<'_, Var>) -> ModelVars {
        ModelVars {
            backbone: self.backbone.bind_vars(vars),
            hallucinator: self.hallucinator.bind_vars(vars),
            selector: self.selector.bind_vars(vars),
            classifier: self.classifier.bind_vars(vars),
        }
    }
}

/// Row-major outputs of [`Model::infer`].
#[derive(Debug, Clone, PartialEq)]
pub struct Inference<T> {
    pub direct: Vec<T>,
    pub embedding: Vec<T>,
    pub logits: Vec<T>,
    pub classes: usize,
    pub dim: usize,
}

impl<T: Real> Inference<T> {
    pub fn len(&self) -> usize {
        self.logits.len() / self.classes.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn logits_row(&self, i: usize) -> &[T] {
        &self.logits[i * self.classes..(i + 1) * self.classes]
    }

    pub fn direct_row(&self, i: usize) -> &[T] {
        &self.direct[i * self.dim..(i + 1) * self.dim]
    }

    pub fn embedding_row(&self, i: usize) -> &[T] {
        &self.embedding[i * self.dim..(i + 1) * self.dim]
    }

    /// Arg-max class per sample, lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.logits_row(i))).collect()
    }
}

pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Converts stored `f32` samples to the model precision.
pub fn to_real<T: Real>(xs: &[f32]) -> Vec<T> {
    xs.iter().map(|&x| T::c(x as f64)).collect()
}
