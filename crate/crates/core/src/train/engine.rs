use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optimizer::{clip_global_norm, sgd_momentum, zero_velocity};
use super::sampler::{Batch, ClassIndex, SamplerState, Sampling};
use crate::data::{Dataset, ShotSplit};
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::metrics::{evaluate_splits, Prediction};
use crate::model::{argmax, to_real, Mode, Model, ModelConfig};
use crate::nn::Module;
use crate::objective::ObjectiveConfig;
use crate::par::Backend;
use crate::tensor::{Precision, Real, Tape, Tensor};

/// RNG stream for parameter initialisation; the sampler uses its own.
const STREAM_INIT: u64 = 100;
const STREAM_SAMPLER: u64 = 101;

/// Learning rate multiplier applied from two thirds of the main epochs on.
pub const LR_DECAY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Main epochs after warm-up.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    /// `P`.
    #[serde(default = "default_p")]
    pub classes_per_batch: usize,
    /// `Q`.
    #[serde(default = "default_q")]
    pub samples_per_class: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// L2 penalty added to every gradient.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    /// `alpha_c` of the centroid update.
    #[serde(default = "default_centroid_rate")]
    pub centroid_rate: f64,
    #[serde(default = "default_sampling")]
    pub sampling: Sampling,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub precision: Precision,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_epochs() -> usize {
    4
}
fn default_warmup() -> usize {
    1
}
fn default_p() -> usize {
    8
}
fn default_q() -> usize {
    4
}
fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_grad_clip() -> f64 {
    5.0
}
fn default_centroid_rate() -> f64 {
    0.5
}
fn default_sampling() -> Sampling {
    Sampling::ClassAware
}
fn default_mode() -> Mode {
    Mode::Meta
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            warmup_epochs: default_warmup(),
            classes_per_batch: default_p(),
            samples_per_class: default_q(),
            learning_rate: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            grad_clip: default_grad_clip(),
            centroid_rate: default_centroid_rate(),
            sampling: default_sampling(),
            mode: default_mode(),
            precision: Precision::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.epochs
    }

    pub fn validate(&self, known_classes: usize) -> Result<()> {
        if self.classes_per_batch == 0 || self.samples_per_class == 0 {
            return Err(Error::Config(
                "training.classes_per_batch and training.samples_per_class must be positive".into(),
            ));
        }
        if self.classes_per_batch > known_classes {
            return Err(Error::Config(format!(
                "training.classes_per_batch = {} exceeds the {known_classes} known classes",
                self.classes_per_batch
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("training.learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("training.momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config("training.weight_decay must be finite and >= 0".into()));
        }
        if !(self.grad_clip >= 0.0) || !self.grad_clip.is_finite() {
            return Err(Error::Config("training.grad_clip must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.centroid_rate) {
            return Err(Error::Config("training.centroid_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate for the zero-based overall epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match epoch.checked_sub(self.warmup_epochs) {
            Some(main) if 3 * main >= 2 * self.epochs => self.learning_rate * LR_DECAY,
            _ => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Main,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Main => "main",
        }
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub model: Model<T>,
    /// Momentum buffers in parameter order.
    pub velocity: Vec<Tensor<T>>,
    /// Completed epochs, warm-up included.
    pub epoch: usize,
    pub step: u64,
    /// Whether the centroids have been initialised from class means.
    pub memory_ready: bool,
    pub rng: ChaCha8Rng,
    pub sampler: SamplerState,
}

impl<T: Real> TrainState<T> {
    pub fn new(seed: u64, cfg: &ModelConfig, sample_shape: &[usize], classes: usize) -> Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        init.set_stream(STREAM_INIT);
        let model = Model::init(&mut init, cfg, sample_shape, classes)?;
        let velocity = zero_velocity(&model.named_params().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_SAMPLER);
        Ok(TrainState {
            model,
            velocity,
            epoch: 0,
            step: 0,
            memory_ready: false,
            rng,
            sampler: SamplerState::default(),
        })
    }
}

/// One row of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    /// One-based, warm-up included.
    pub epoch: usize,
    pub phase: Phase,
    /// Mean per-sample loss over the epoch's batches.
    pub loss: f64,
    /// Accuracy on the sampled training batches.
    pub train_acc: f64,
    pub many_acc: Option<f64>,
    pub medium_acc: Option<f64>,
    pub few_acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Batch-summed loss before the update.
    pub loss: f64,
    pub correct: usize,
}

/// Binds a training run to its data.
pub struct Trainer<'a> {
    pub train: &'a Dataset,
    pub test: Option<&'a Dataset>,
    pub config: TrainConfig,
    pub objective: ObjectiveConfig,
    pub backend: Backend,
    index: ClassIndex,
    split: ShotSplit,
}

impl<'a> Trainer<'a> {
    pub fn new(
        train: &'a Dataset,
        test: Option<&'a Dataset>,
        config: TrainConfig,
        objective: ObjectiveConfig,
        backend: Backend,
    ) -> Result<Self> {
        train.check()?;
        config.validate(train.num_known())?;
        objective.validate()?;
        let index = ClassIndex::new(train)?;
        let split = train.shot_split();
        Ok(Trainer {
            train,
            test,
            config,
            objective,
            backend,
            index,
            split,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config.batch_size())
    }

    pub fn phase_of(&self, epoch: usize) -> Phase {
        if epoch < self.config.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Main
        }
    }

    pub fn next_batch<T: Real>(&self, state: &mut TrainState<T>) -> Result<Batch> {
        match self.config.sampling {
            Sampling::ClassAware => state.sampler.next_class_aware(
                &self.index,
                self.config.classes_per_batch,
                self.config.samples_per_class,
                &mut state.rng,
            ),
            Sampling::Instance => {
                Ok(state
                    .sampler
                    .next_instance(&self.train.labels, self.config.batch_size(), &mut state.rng))
            }
        }
    }

    fn gather<T: Real>(&self, indices: &[usize]) -> Vec<T> {
        let mut x = Vec::with_capacity(indices.len() * self.train.sample_len());
        for &i in indices {
            x.extend(to_real::<T>(self.train.sample(i)));
        }
        x
    }

    /// Forward, backward and momentum update, then the centroid update with the
    /// batch's direct features from the same forward pass.
    pub fn train_step<T: Real>(
        &self,
        state: &mut TrainState<T>,
        batch: &Batch,
        phase: Phase,
        lr: f64,
    ) -> Result<StepOutcome> {
        let mode = match phase {
            Phase::Warmup => Mode::Plain,
            Phase::Main => self.config.mode,
        };
        let x = self.gather::<T>(&batch.indices);
        let mut tape = Tape::with_backend(self.backend);
        let (vars, params) = state.model.bind(&mut tape, true);
        let fwd = state.model.forward(&mut tape, &vars, &x, batch.indices.len(), mode)?;
        let loss = state.model.loss(&mut tape, &fwd, &batch.labels, &self.objective)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { op: "total_loss" });
        }
        let k = state.model.num_classes();
        let logits = tape.value(fwd.logits).data();
        let correct = batch
            .labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| argmax(&logits[i * k..(i + 1) * k]) == l)
            .count();
        let grads = tape.backward(loss)?;
        let mut grads: Vec<Tensor<T>> = params.iter().map(|&p| grads.get(p)).collect();
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            let name = state.model.named_params()[bad].0.clone();
            return Err(Error::invalid(format!("non-finite gradient for {name}")));
        }
        clip_global_norm(&mut grads, T::c(self.config.grad_clip));
        let direct = tape.value(fwd.direct).data().to_vec();
        sgd_momentum(
            state.model.params_mut(),
            &mut state.velocity,
            &grads,
            T::c(lr),
            T::c(self.config.momentum),
            T::c(self.config.weight_decay),
        )?;
        if state.memory_ready {
            state
                .model
                .bank
                .update_centroids(&direct, &batch.labels, T::c(self.config.centroid_rate))?;
        }
        state.step += 1;
        Ok(StepOutcome {
            loss: loss_value.to_f64().unwrap_or(f64::NAN),
            correct,
        })
    }

    /// Centroids as class means of the current direct features of the training set.
    pub fn init_memory<T: Real>(&self, state: &mut TrainState<T>) -> Result<()> {
        let x = to_real::<T>(&self.train.features);
        let inf = state.model.infer(&x, Mode::Plain, self.backend)?;
        let feats = Tensor::new(vec![self.train.len(), state.model.feature_dim()], inf.direct)?;
        state.model.bank = MemoryBank::init_centroids(&feats, &self.train.labels, state.model.num_classes())?;
        state.memory_ready = true;
        Ok(())
    }

    /// Runs the next epoch; centroids are initialised on entering the main phase.
    pub fn run_epoch<T: Real>(&self, state: &mut TrainState<T>) -> Result<EpochRow> {
        let phase = self.phase_of(state.epoch);
        if phase == Phase::Main && !state.memory_ready {
            self.init_memory(state)?;
        }
        let lr = self.config.lr_at(state.epoch);
        let mut loss = 0.0;
        let mut correct = 0;
        let mut seen = 0;
        for _ in 0..self.steps_per_epoch() {
            let batch = self.next_batch(state)?;
            let out = self.train_step(state, &batch, phase, lr)?;
            loss += out.loss;
            correct += out.correct;
            seen += batch.indices.len();
        }
        state.epoch += 1;
        if self.phase_of(state.epoch) == Phase::Main && !state.memory_ready {
            self.init_memory(state)?;
        }
        let (many_acc, medium_acc, few_acc) = match self.test {
            Some(test) => self.split_accuracy(state, test, phase)?,
            None => (None, None, None),
        };
        Ok(EpochRow {
            epoch: state.epoch,
            phase,
            loss: loss / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            many_acc,
            medium_acc,
            few_acc,
        })
    }

    fn split_accuracy<T: Real>(
        &self,
        state: &TrainState<T>,
        test: &Dataset,
        phase: Phase,
    ) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
        let known: Vec<usize> = (0..test.len())
            .filter(|&i| test.labels[i] < state.model.num_classes() && test.known_labels.contains(&test.labels[i]))
            .collect();
        let mut x = Vec::with_capacity(known.len() * test.sample_len());
        for &i in &known {
            x.extend(to_real::<T>(test.sample(i)));
        }
        let mode = match phase {
            Phase::Warmup => Mode::Plain,
            Phase::Main => self.config.mode,
        };
        let inf = state.model.infer(&x, mode, self.backend)?;
        let preds: Vec<Prediction> = inf.argmax().into_iter().map(Prediction::Class).collect();
        let truth: Vec<usize> = known.iter().map(|&i| test.labels[i]).collect();
        let acc = evaluate_splits(&preds, &truth, &self.split)?;
        Ok((acc.many, acc.medium, acc.few))
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one. With no main
    /// epochs the centroids are still initialised after warm-up.
    pub fn run<T: Real, F>(&self, state: &mut TrainState<T>, mut on_epoch: F) -> Result<Vec<EpochRow>>
    where
        F: FnMut(&TrainState<T>, &EpochRow) -> Result<()>,
    {
        let mut log = Vec::new();
        while state.epoch < self.config.total_epochs() {
            let row = self.run_epoch(state)?;
            on_epoch(state, &row)?;
            log.push(row);
        }
        if !state.memory_ready {
            self.init_memory(state)?;
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::{generate_gaussian_mixture, LongTailProfile, MixtureConfig};

    fn data() -> (Dataset, Dataset) {
        let cfg = MixtureConfig {
            dim: 4,
            known_classes: 3,
            open_classes: 1,
            profile: LongTailProfile::exp(3, 12, 4.0, 1),
            open_count_per_class: 5,
            test_per_class: 5,
            mean_radius: 4.0,
            noise_sigma: 0.5,
        };
        let s = generate_gaussian_mixture(11, &cfg).unwrap();
        (s.train, s.test)
    }

    fn model_cfg() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::Mlp { hidden: [8, 8] },
            feature_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            classes_per_batch: 2,
            samples_per_class: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_decays_at_two_thirds() {
        let c = TrainConfig {
            epochs: 6,
            warmup_epochs: 1,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..7).map(|e| c.lr_at(e)).collect();
        assert_eq!(&lrs[..5], &[0.01; 5]);
        assert!((lrs[5] - 0.001).abs() < 1e-15 && (lrs[6] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn zero_main_epochs_leaves_warmup_state_with_centroids() {
        let (train, test) = data();
        let t = Trainer::new(
            &train,
            Some(&test),
            train_cfg(0),
            ObjectiveConfig::default(),
            Backend::Sequential,
        )
        .unwrap();
        let mut s = TrainState::<f64>::new(1, &model_cfg(), &train.sample_shape, 3).unwrap();
        let log = t.run(&mut s, |_, _| Ok(())).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].phase, Phase::Warmup);
        assert!(s.memory_ready);
        assert_eq!(s.model.bank.num_classes(), 3);
    }

    #[test]
    fn zero_rates_freeze_parameters_and_centroids() {
        let (train, _) = data();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            centroid_rate: 0.0,
            ..train_cfg(1)
        };
        let t = Trainer::new(&train, None, cfg, ObjectiveConfig::default(), Backend::Sequential).unwrap();
        let mut s = TrainState::<f64>::new(2, &model_cfg(), &train.sample_shape, 3).unwrap();
        t.init_memory(&mut s).unwrap();
        s.epoch = 1;
        let before = s.model.clone();
        let batch = t.next_batch(&mut s).unwrap();
        let a = t.train_step(&mut s, &batch, Phase::Main, 0.0).unwrap();
        assert_eq!(s.model, before);
        let b = t.train_step(&mut s, &batch, Phase::Main, 0.0).unwrap();
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn step_applies_centroid_rule_to_fresh_features() {
        let (train, _) = data();
        let t = Trainer::new(
            &train,
            None,
            train_cfg(1),
            ObjectiveConfig::default(),
            Backend::Sequential,
        )
        .unwrap();
        let mut s = TrainState::<f64>::new(3, &model_cfg(), &train.sample_shape, 3).unwrap();
        t.init_memory(&mut s).unwrap();
        let batch = t.next_batch(&mut s).unwrap();
        let x = t.gather::<f64>(&batch.indices);
        let direct = s.model.infer(&x, Mode::Plain, Backend::Sequential).unwrap().direct;
        let mut expected = s.model.bank.clone();
        expected.update_centroids(&direct, &batch.labels, 0.5).unwrap();
        t.train_step(&mut s, &batch, Phase::Main, 0.01).unwrap();
        assert_eq!(s.model.bank, expected);
    }

    #[test]
    fn same_seed_same_run() {
        let (train, test) = data();
        let run = || {
            let t = Trainer::new(
                &train,
                Some(&test),
                train_cfg(2),
                ObjectiveConfig::default(),
                Backend::Parallel,
            )
            .unwrap();
            let mut s = TrainState::<f32>::new(5, &model_cfg(), &train.sample_shape, 3).unwrap();
            let log = t.run(&mut s, |_, _| Ok(())).unwrap();
            (s, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(la.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn p_above_k_is_a_config_error() {
        let (train, _) = data();
        let cfg = TrainConfig {
            classes_per_batch: 4,
            ..train_cfg(1)
        };
        let err = Trainer::new(&train, None, cfg, ObjectiveConfig::default(), Backend::Sequential)
            .err()
            .unwrap();
        assert!(err.is_config());
    }
}
