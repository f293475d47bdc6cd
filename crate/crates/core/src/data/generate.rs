//! Seeded synthetic worlds: Gaussian mixtures for vector data and blob/stripe
//! images for the convolutional path.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetInfo};
use super::profile::LongTailProfile;
use crate::error::{Error, Result};

pub const STREAM_CLASSES: u64 = 0;
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_TEST: u64 = 2;
/// Exploration pool for stage `t` uses stream `STREAM_POOL + t`.
pub const STREAM_POOL: u64 = 16;

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A family of class-conditional sample distributions. Known classes are
/// labelled `0..known()`, open classes `known()..known()+open()`.
pub trait World {
    fn name(&self) -> &'static str;
    fn seed(&self) -> u64;
    fn known(&self) -> usize;
    fn open(&self) -> usize;
    fn sample_shape(&self) -> Vec<usize>;
    /// Appends one sample of `label` to `out`.
    fn draw(&self, label: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f32>);

    /// Draws `count` samples for each `(label, count)` of `plan`, in plan order.
    fn sample(&self, plan: &[(usize, usize)], stream: u64, profile: Option<LongTailProfile>) -> Dataset {
        let mut rng = rng_for(self.seed(), stream);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for &(label, count) in plan {
            for _ in 0..count {
                self.draw(label, &mut rng, &mut features);
                labels.push(label);
            }
        }
        Dataset {
            sample_shape: self.sample_shape(),
            features,
            labels,
            known_labels: (0..self.known()).collect(),
            open_labels: (self.known()..self.known() + self.open()).collect(),
            info: DatasetInfo {
                generator: self.name().into(),
                seed: self.seed(),
                stream,
                profile,
            },
        }
    }
}

/// Long-tailed training set plus a balanced test set with open classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Plan shared by both generators.
pub(crate) fn draw_splits(
    world: &dyn World,
    profile: &LongTailProfile,
    test_per_class: usize,
    open_count_per_class: usize,
) -> Result<Splits> {
    if profile.num_classes != world.known() {
        return Err(Error::Config(format!(
            "profile has {} classes but {} known classes are configured",
            profile.num_classes,
            world.known()
        )));
    }
    let sizes = profile.sizes()?;
    let train_plan: Vec<(usize, usize)> = sizes.iter().copied().enumerate().collect();
    let mut test_plan: Vec<(usize, usize)> = (0..world.known()).map(|k| (k, test_per_class)).collect();
    test_plan.extend((world.known()..world.known() + world.open()).map(|z| (z, open_count_per_class)));
    let mut train = world.sample(&train_plan, STREAM_TRAIN, Some(*profile));
    // The training set never contains open classes; keep the label sets anyway.
    train.open_labels = (world.known()..world.known() + world.open()).collect::<BTreeSet<_>>();
    let test = world.sample(&test_plan, STREAM_TEST, Some(*profile));
    Ok(Splits { train, test })
}

/// Unlabelled exploration pools, one per stage. Stage `t` (one-based) holds
/// `known_per_class` fresh samples of every known class plus `open_per_class`
/// samples of each of the next `stages[t - 1]` open classes, drawn from stream
/// `STREAM_POOL + t`.
pub fn exploration_pools(
    world: &dyn World,
    stages: &[usize],
    known_per_class: usize,
    open_per_class: usize,
) -> Result<Vec<Dataset>> {
    let total: usize = stages.iter().sum();
    if total > world.open() {
        return Err(Error::Config(format!(
            "stages introduce {total} open classes but only {} exist",
            world.open()
        )));
    }
    let mut next_open = world.known();
    Ok(stages
        .iter()
        .enumerate()
        .map(|(t, &z)| {
            let mut plan: Vec<(usize, usize)> = (0..world.known()).map(|k| (k, known_per_class)).collect();
            plan.extend((next_open..next_open + z).map(|l| (l, open_per_class)));
            next_open += z;
            world.sample(&plan, STREAM_POOL + t as u64 + 1, None)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub dim: usize,
    pub known_classes: usize,
    pub open_classes: usize,
    pub profile: LongTailProfile,
    pub open_count_per_class: usize,
    pub test_per_class: usize,
    pub mean_radius: f64,
    pub noise_sigma: f64,
}

/// Isotropic Gaussian classes with means uniform on the radius-R sphere.
#[derive(Debug, Clone)]
pub struct GaussianWorld {
    seed: u64,
    known: usize,
    open: usize,
    sigma: f64,
    pub means: Vec<Vec<f64>>,
}

impl GaussianWorld {
    pub fn new(seed: u64, cfg: &MixtureConfig) -> Result<Self> {
        if cfg.known_classes < 1 || cfg.open_classes < 1 || cfg.dim < 2 {
            return Err(Error::Config(format!(
                "mixture needs known >= 1, open >= 1, dim >= 2 (got {}, {}, {})",
                cfg.known_classes, cfg.open_classes, cfg.dim
            )));
        }
        if !(cfg.mean_radius > 0.0) || !(cfg.noise_sigma >= 0.0) {
            return Err(Error::Config("mixture radius must be > 0 and sigma >= 0".into()));
        }
        let mut rng = rng_for(seed, STREAM_CLASSES);
        let means = (0..cfg.known_classes + cfg.open_classes)
            .map(|_| loop {
                let v: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-9 {
                    break v.iter().map(|x| x / n * cfg.mean_radius).collect();
                }
            })
            .collect();
        Ok(GaussianWorld {
            seed,
            known: cfg.known_classes,
            open: cfg.open_classes,
            sigma: cfg.noise_sigma,
            means,
        })
    }
}

impl World for GaussianWorld {
    fn name(&self) -> &'static str {
        "gaussian"
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn known(&self) -> usize {
        self.known
    }

    fn open(&self) -> usize {
        self.open
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![self.means[0].len()]
    }

    fn draw(&self, label: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
        for &m in &self.means[label] {
            let z: f64 = rng.sample(StandardNormal);
            out.push((m + self.sigma * z) as f32);
        }
    }
}

pub fn generate_gaussian_mixture(seed: u64, cfg: &MixtureConfig) -> Result<Splits> {
    let world = GaussianWorld::new(seed, cfg)?;
    draw_splits(&world, &cfg.profile, cfg.test_per_class, cfg.open_count_per_class)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobConfig {
    pub side: usize,
    pub known_classes: usize,
    pub open_classes: usize,
    pub profile: LongTailProfile,
    pub open_count_per_class: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
}

/// Maximum distance between a sample's blob centre and its class centre.
pub const BLOB_JITTER: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobClass {
    pub center: [f64; 2],
    pub orientation: f64,
}

/// 1-channel images: a Gaussian blob at a class-specific centre over a
/// class-specific stripe orientation, values clamped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct BlobWorld {
    seed: u64,
    side: usize,
    known: usize,
    open: usize,
    sigma: f64,
    pub classes: Vec<BlobClass>,
}

impl BlobWorld {
    pub fn new(seed: u64, cfg: &BlobConfig) -> Result<Self> {
        if cfg.side < 8 || cfg.known_classes < 1 || cfg.open_classes < 1 {
            return Err(Error::Config(format!(
                "blob images need side >= 8 and known/open >= 1 (got side {})",
                cfg.side
            )));
        }
        let mut rng = rng_for(seed, STREAM_CLASSES);
        let s = cfg.side as f64;
        let classes = (0..cfg.known_classes + cfg.open_classes)
            .map(|_| BlobClass {
                center: [rng.gen_range(s * 0.25..s * 0.75), rng.gen_range(s * 0.25..s * 0.75)],
                orientation: rng.gen_range(0.0..std::f64::consts::PI),
            })
            .collect();
        Ok(BlobWorld {
            seed,
            side: cfg.side,
            known: cfg.known_classes,
            open: cfg.open_classes,
            sigma: cfg.noise_sigma,
            classes,
        })
    }

    /// Draws one image and returns the jittered blob centre it was rendered with.
    pub fn draw_with_center(&self, label: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) -> [f64; 2] {
        let class = self.classes[label];
        let r = BLOB_JITTER * rng.gen::<f64>().sqrt();
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        let center = [class.center[0] + r * a.cos(), class.center[1] + r * a.sin()];
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let (c, s) = (class.orientation.cos(), class.orientation.sin());
        let width = self.side as f64 / 6.0;
        for y in 0..self.side {
            for x in 0..self.side {
                let (fx, fy) = (x as f64, y as f64);
                let d2 = (fx - center[0]).powi(2) + (fy - center[1]).powi(2);
                let blob = (-d2 / (2.0 * width * width)).exp();
                let stripe = 0.5 + 0.5 * ((fx * c + fy * s) * std::f64::consts::FRAC_PI_2 + phase).sin();
                let z: f64 = rng.sample(StandardNormal);
                let v = 0.6 * blob + 0.4 * stripe + self.sigma * z;
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        center
    }
}

impl World for BlobWorld {
    fn name(&self) -> &'static str {
        "blobs"
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn known(&self) -> usize {
        self.known
    }

    fn open(&self) -> usize {
        self.open
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![1, self.side, self.side]
    }

    fn draw(&self, label: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
        self.draw_with_center(label, rng, out);
    }
}

pub fn generate_blob_images(seed: u64, cfg: &BlobConfig) -> Result<Splits> {
    let world = BlobWorld::new(seed, cfg)?;
    draw_splits(&world, &cfg.profile, cfg.test_per_class, cfg.open_count_per_class)
}
