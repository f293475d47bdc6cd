use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use oltr::backbone::BackboneConfig;
use oltr::config::{DatasetConfig, ExperimentConfig};
use oltr::data::{BlobConfig, LongTailProfile};
use oltr::experiment;
use oltr::explore::Explorer;
use oltr::model::{to_real, Mode, ModelConfig};
use oltr::nn::normal_tensor;
use oltr::par::Backend;
use oltr::tensor::{Tape, Tensor};
use oltr::train::Trainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BACKENDS: [(&str, Backend); 2] = [("sequential", Backend::Sequential), ("parallel", Backend::Parallel)];

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Tensor<f32> = normal_tensor(&mut rng, &[256, 256], 1.0);
    let b: Tensor<f32> = normal_tensor(&mut rng, &[256, 256], 1.0);
    let mut group = c.benchmark_group("matmul_256");
    for (name, backend) in BACKENDS {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let mut tape = Tape::with_backend(backend);
                let x = tape.param(a.clone());
                let y = tape.param(b.clone());
                let z = tape.matmul(x, y).unwrap();
                let s = tape.sum(z).unwrap();
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Tensor<f32> = normal_tensor(&mut rng, &[32, 8, 16, 16], 1.0);
    let w: Tensor<f32> = normal_tensor(&mut rng, &[8, 8, 3, 3], 0.1);
    let b: Tensor<f32> = Tensor::zeros(vec![8]);
    let mut group = c.benchmark_group("conv3x3_32x8x16x16");
    for (name, backend) in BACKENDS {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let mut tape = Tape::with_backend(backend);
                let xv = tape.param(x.clone());
                let wv = tape.param(w.clone());
                let bv = tape.param(b.clone());
                let y = tape.conv3x3(xv, wv, bv).unwrap();
                let s = tape.sum(y).unwrap();
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn trained_setup(cnn: bool) -> (ExperimentConfig, oltr::data::Splits, oltr::train::TrainState<f32>) {
    let mut cfg = ExperimentConfig::default();
    if cnn {
        cfg.dataset = DatasetConfig::Blobs(BlobConfig {
            side: 12,
            known_classes: 10,
            open_classes: 3,
            profile: LongTailProfile::exp(10, 60, 10.0, 1),
            open_count_per_class: 20,
            test_per_class: 20,
            noise_sigma: 0.1,
        });
        cfg.active.stages = vec![3];
        cfg.model = ModelConfig {
            backbone: BackboneConfig::Cnn { channels: 8 },
            ..ModelConfig::default()
        };
        cfg.training.classes_per_batch = 5;
    }
    let splits = cfg.generate().unwrap();
    let mut state = experiment::init_state::<f32>(&cfg, &splits.train).unwrap();
    let trainer = Trainer::new(
        &splits.train,
        None,
        cfg.training.clone(),
        cfg.objective,
        Backend::Parallel,
    )
    .unwrap();
    trainer.init_memory(&mut state).unwrap();
    (cfg, splits, state)
}

fn inference(c: &mut Criterion) {
    let (_, splits, state) = trained_setup(false);
    let x = to_real::<f32>(&splits.test.features);
    let mut group = c.benchmark_group("infer_test_split");
    for (name, backend) in BACKENDS {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| black_box(state.model.infer(&x, Mode::Meta, backend).unwrap()))
        });
    }
    group.finish();
}

fn pool_scoring(c: &mut Criterion) {
    let (cfg, _, state) = trained_setup(false);
    let pools = cfg.pools().unwrap();
    let x = to_real::<f32>(&pools[0].features);
    let explorer = Explorer::new(state.model);
    let mut group = c.benchmark_group("score_pool");
    for (name, backend) in BACKENDS {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| black_box(explorer.score_pool(&x, cfg.active.temperature, backend).unwrap()))
        });
    }
    group.finish();
}

fn cnn_epoch(c: &mut Criterion) {
    let (cfg, splits, state) = trained_setup(true);
    let mut group = c.benchmark_group("cnn_train_epoch");
    group.sample_size(10);
    for (name, backend) in BACKENDS {
        let trainer = Trainer::new(&splits.train, None, cfg.training.clone(), cfg.objective, backend).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let mut s = state.clone();
                black_box(trainer.run_epoch(&mut s).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, conv, inference, pool_scoring, cnn_epoch);
criterion_main!(benches);
