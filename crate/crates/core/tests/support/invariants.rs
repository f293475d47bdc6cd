//! Algebraic identities as property tests, runnable from any test binary.

use oltr::explore::uncertainty_from_distances;
use oltr::memory::{compose_meta_embedding, MemoryBank};
use oltr::nn::Linear;
use oltr::objective::{cosine_logits, large_margin, squash, squash_vec};
use oltr::tensor::{Tape, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CASES: u32 = 512;

pub type Invariant = fn() -> Result<(), String>;

pub const INVARIANTS: &[(&str, Invariant)] = &[
    ("squash_norm_below_one_and_monotone", squash_norm_below_one_and_monotone),
    (
        "selector_strictly_inside_unit_interval",
        selector_strictly_inside_unit_interval,
    ),
    ("energy_identity", energy_identity),
    ("cosine_logits_ignore_weight_scale", cosine_logits_ignore_weight_scale),
    (
        "hinge_zero_iff_argument_nonpositive",
        hinge_zero_iff_argument_nonpositive,
    ),
];

fn run<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn squash_norm_below_one_and_monotone() -> Result<(), String> {
    run((vec(-50.0f64..50.0, 1..8), 1.0f64..20.0), |(v, stretch)| {
        let s = squash_vec(&v, 1e-12);
        let n = norm(&s);
        prop_assert!(n < 1.0);
        let longer: Vec<f64> = v.iter().map(|x| x * stretch).collect();
        prop_assert!(norm(&squash_vec(&longer, 1e-12)) >= n);

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, v.len()], v.clone()).unwrap());
        let y = squash(&mut tape, x, 1e-12).unwrap();
        let taped = tape.value(y).data().to_vec();
        prop_assert!(norm(&taped) < 1.0);
        for (a, b) in taped.iter().zip(&s) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        Ok(())
    })
}

pub fn selector_strictly_inside_unit_interval() -> Result<(), String> {
    let shapes = (1usize..6, 1usize..6, any::<u64>());
    let strategy = shapes.prop_flat_map(|(k, d, seed)| {
        (
            Just((k, d, seed)),
            vec(-3.0f64..3.0, d),
            vec(-5.0f64..5.0, k * d),
            0.1f64..1.0,
        )
    });
    run(strategy, |((k, d, seed), v, centroids, gain)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = MemoryBank::new(Tensor::new(vec![k, d], centroids).unwrap()).unwrap();
        let hal = Linear::init(&mut rng, d, k);
        let mut sel = Linear::init(&mut rng, d, d);
        sel.weight.data_mut().iter_mut().for_each(|w| *w *= gain);
        let m = compose_meta_embedding(&v, &bank, &hal, &sel, 1e-12).unwrap();
        for &e in &m.selector {
            prop_assert!(e > -1.0 && e < 1.0, "selector value {e}");
        }
        Ok(())
    })
}

pub fn energy_identity() -> Result<(), String> {
    run((vec(0.0f64..20.0, 2..30), 0.05f64..10.0), |(d, t)| {
        let r = uncertainty_from_distances(&d, t).unwrap();
        let want = -(r.u_open * r.u_info + t * (d.len() as f64).ln());
        prop_assert!(
            (r.energy - want).abs() <= 1e-9 * want.abs().max(1.0),
            "{} vs {want}",
            r.energy
        );
        Ok(())
    })
}

pub fn cosine_logits_ignore_weight_scale() -> Result<(), String> {
    let strategy = (1usize..5, 1usize..6, 1usize..6).prop_flat_map(|(n, k, d)| {
        (
            Just((n, k, d)),
            vec(-3.0f64..3.0, n * d),
            vec(prop_oneof![-2.0f64..-0.1, 0.1f64..2.0], k * d),
            vec(1e-3f64..1e3, k),
            1.0f64..32.0,
        )
    });
    run(strategy, |((n, k, d), x, w, scales, sigma)| {
        let logits = |weight: Vec<f64>| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(Tensor::new(vec![n, d], x.clone()).unwrap());
            let wv = tape.constant(Tensor::new(vec![k, d], weight).unwrap());
            let out = cosine_logits(&mut tape, xv, wv, sigma).unwrap();
            tape.value(out).data().to_vec()
        };
        let scaled: Vec<f64> = w.iter().enumerate().map(|(i, &v)| v * scales[i / d]).collect();
        for (a, b) in logits(w.clone()).iter().zip(logits(scaled)) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        }
        Ok(())
    })
}

pub fn hinge_zero_iff_argument_nonpositive() -> Result<(), String> {
    let strategy = (2usize..6, 1usize..5).prop_flat_map(|(k, d)| {
        (
            Just((k, d)),
            vec(-3.0f64..3.0, d),
            vec(-3.0f64..3.0, k * d),
            0..k,
            -10.0f64..20.0,
        )
    });
    run(strategy, |((k, d), v, centroids, label, margin)| {
        let bank = MemoryBank::new(Tensor::new(vec![k, d], centroids).unwrap()).unwrap();
        let dist = bank.distances(&v).unwrap();
        let others: f64 = (0..k).filter(|&i| i != label).map(|i| dist[i]).sum();
        let arg = dist[label] - others + margin;
        prop_assume!(arg.abs() > 1e-9);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, d], v.clone()).unwrap());
        let loss = large_margin(&mut tape, x, &bank, &[label], margin).unwrap();
        let value = tape.value(loss).data()[0];
        prop_assert_eq!(value == 0.0, arg <= 0.0, "hinge {} for argument {}", value, arg);
        if arg > 0.0 {
            prop_assert!((value - arg).abs() <= 1e-9 * arg.max(1.0));
        }
        Ok(())
    })
}
