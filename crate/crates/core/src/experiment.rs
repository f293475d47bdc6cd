//! End-to-end steps shared by the command line and the test suites.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::data::{Dataset, Splits};
use crate::error::Result;
use crate::explore::{run_dynamic_loop, Explorer, LoopRow};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{to_real, Mode, Model};
use crate::par::Backend;
use crate::tensor::Real;
use crate::train::{EpochRow, TrainState, Trainer};

/// RNG stream of the random selection baseline.
pub const STREAM_EXPLORE: u64 = 102;

pub const TRAIN_STEM: &str = "train";
pub const TEST_STEM: &str = "test";

pub fn pool_stem(stage: usize) -> String {
    format!("pool-{stage}")
}

/// Train/test splits from `dir` when given, otherwise generated from the config.
pub fn load_or_generate(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Splits> {
    match dir {
        Some(d) => Ok(Splits {
            train: Dataset::load(d, TRAIN_STEM)?,
            test: Dataset::load(d, TEST_STEM)?,
        }),
        None => cfg.generate(),
    }
}

/// Exploration pools from `dir` when given, otherwise generated from the config.
pub fn load_or_generate_pools(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Vec<Dataset>> {
    match dir {
        Some(d) => (1..=cfg.active.stages.len())
            .map(|t| Dataset::load(d, &pool_stem(t)))
            .collect(),
        None => cfg.pools(),
    }
}

/// Fresh training state for `cfg` on `train`.
pub fn init_state<T: Real>(cfg: &ExperimentConfig, train: &Dataset) -> Result<TrainState<T>> {
    TrainState::new(cfg.seed, &cfg.model, &train.sample_shape, train.num_known())
}

/// Trains `state` to the configured epoch count, calling `on_epoch` after each epoch.
pub fn train<T: Real, F>(
    cfg: &ExperimentConfig,
    splits: &Splits,
    state: &mut TrainState<T>,
    backend: Backend,
    on_epoch: F,
) -> Result<Vec<EpochRow>>
where
    F: FnMut(&TrainState<T>, &EpochRow) -> Result<()>,
{
    let trainer = Trainer::new(
        &splits.train,
        Some(&splits.test),
        cfg.training.clone(),
        cfg.objective,
        backend,
    )?;
    trainer.run(state, on_epoch)
}

/// Open-set evaluation of `model` on the test split.
pub fn evaluate_model<T: Real>(
    cfg: &ExperimentConfig,
    model: &Model<T>,
    splits: &Splits,
    backend: Backend,
) -> Result<EvalReport> {
    let mode: Mode = cfg.training.mode;
    let inf = model.infer(&to_real::<T>(&splits.test.features), mode, backend)?;
    evaluate(
        &inf.logits,
        model.num_classes(),
        &splits.test.labels,
        &splits.test.known_labels,
        &splits.train.shot_split(),
        &cfg.openset,
    )
}

/// The staged exploration loop starting from `model`.
pub fn explore<T: Real>(
    cfg: &ExperimentConfig,
    model: Model<T>,
    test: &Dataset,
    pools: &[Dataset],
    backend: Backend,
) -> Result<Vec<LoopRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_EXPLORE);
    let mut explorer = Explorer::new(model);
    run_dynamic_loop(&mut explorer, pools, test, &cfg.active.loop_config(), &mut rng, backend)
}
