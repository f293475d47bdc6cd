//! Randomised finite-difference checks of every differentiable operation and of
//! the full training objective, at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{BackboneConfig, ModulatedAttention};
use crate::error::Result;
use crate::memory::{meta_embedding, pairwise_distances, MemoryBank};
use crate::model::{Mode, Model, ModelConfig};
use crate::nn::{normal_tensor, Linear, LinearVars, Module};
use crate::objective::{cosine_logits, cross_entropy, large_margin, squash, ObjectiveConfig};
use crate::tensor::{grad_check, gradcheck::DEFAULT_FD_STEP, Tape, Tensor, Var};

/// Acceptance bound on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES_PER_CASE: usize = 3;

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn instances(&self) -> usize {
        self.cases.iter().map(|c| c.instances).sum()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= TOLERANCE
    }
}

type Case = fn(&mut ChaCha8Rng) -> Result<(f64, usize)>;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    normal_tensor(rng, shape, 1.0)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=5))
}

/// Contracts `y` with fixed pseudo-random weights so every output entry gets a
/// distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| (1.3 * i as f64 + 0.5).sin()).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check<F>(params: &[Tensor<f64>], f: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    let r = grad_check(f, params, DEFAULT_FD_STEP)?;
    Ok((r.max_rel_err, r.entries))
}

fn unary(rng: &mut ChaCha8Rng, positive: bool, op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<(f64, usize)> {
    let (m, n) = dims(rng);
    let mut x = randn(rng, &[m, n]);
    if positive {
        x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
    }
    check(&[x], move |t, v| {
        let y = op(t, v[0])?;
        probe(t, y)
    })
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Result<(f64, usize)> {
    let (m, n) = dims(rng);
    let a = randn(rng, &[m, n]);
    // Alternate full-shape and row-broadcast right operands.
    let b_shape = if rng.gen_bool(0.5) { vec![m, n] } else { vec![n] };
    let mut b = randn(rng, &b_shape);
    b.data_mut().iter_mut().for_each(|v| *v = v.signum() * (v.abs() + 0.5));
    check(&[a, b], move |t, v| {
        let y = op(t, v[0], v[1])?;
        probe(t, y)
    })
}

fn matmul(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let (m, k) = dims(rng);
    let n = rng.gen_range(1..=4);
    check(&[randn(rng, &[m, k]), randn(rng, &[k, n])], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe(t, y)
    })
}

fn reductions(rng: &mut ChaCha8Rng, op: fn(&mut Tape<f64>, Var, usize) -> Result<Var>) -> Result<(f64, usize)> {
    let (m, n) = dims(rng);
    let axis = rng.gen_range(0..2);
    check(&[randn(rng, &[m, n])], move |t, v| {
        let y = op(t, v[0], axis)?;
        probe(t, y)
    })
}

fn concat(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let (m, n) = dims(rng);
    let axis = rng.gen_range(0..2);
    let other = if axis == 0 {
        vec![rng.gen_range(1..=3), n]
    } else {
        vec![m, rng.gen_range(1..=3)]
    };
    check(&[randn(rng, &[m, n]), randn(rng, &other)], move |t, v| {
        let y = t.concat(&[v[0], v[1]], axis)?;
        probe(t, y)
    })
}

fn reshape(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let (m, n) = dims(rng);
    check(&[randn(rng, &[m, n])], move |t, v| {
        let y = t.reshape(v[0], &[n, m])?;
        probe(t, y)
    })
}

fn conv(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=3));
    let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let params = [
        randn(rng, &[n, cin, h, w]),
        randn(rng, &[cout, cin, 3, 3]),
        randn(rng, &[cout]),
    ];
    check(&params, |t, v| {
        let y = t.conv3x3(v[0], v[1], v[2])?;
        probe(t, y)
    })
}

fn pool(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let shape = [
        rng.gen_range(1..=2),
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
    ];
    check(&[randn(rng, &shape)], |t, v| {
        let y = t.global_avg_pool(v[0])?;
        probe(t, y)
    })
}

fn linear(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let (m, k) = dims(rng);
    let n = rng.gen_range(1..=4);
    check(&[randn(rng, &[m, k]), randn(rng, &[k, n]), randn(rng, &[n])], |t, v| {
        let lin = LinearVars {
            weight: v[1],
            bias: v[2],
        };
        let y = lin.forward(t, v[0])?;
        probe(t, y)
    })
}

fn squash_case(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let (m, n) = dims(rng);
    let mut x = randn(rng, &[m, n]);
    let scale = rng.gen_range(0.2..3.0);
    x.data_mut().iter_mut().for_each(|v| *v *= scale);
    check(&[x], |t, v| {
        let y = squash(t, v[0], 1e-12)?;
        probe(t, y)
    })
}

fn cosine(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let (m, d) = dims(rng);
    let k = rng.gen_range(1..=4);
    check(&[randn(rng, &[m, d]), randn(rng, &[k, d])], |t, v| {
        let y = cosine_logits(t, v[0], v[1], 16.0)?;
        probe(t, y)
    })
}

fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}

fn ce(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let n = rng.gen_range(1..=4);
    let k = rng.gen_range(2..=5);
    let y = labels(rng, n, k);
    check(&[randn(rng, &[n, k])], move |t, v| cross_entropy(t, v[0], &y))
}

fn random_bank(rng: &mut ChaCha8Rng, k: usize, d: usize, spread: f64) -> Result<MemoryBank<f64>> {
    MemoryBank::new(normal_tensor(rng, &[k, d], spread))
}

fn margin(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let n = rng.gen_range(1..=4);
    let k = rng.gen_range(2..=4);
    let d = rng.gen_range(1..=4);
    let bank = random_bank(rng, k, d, 1.0)?;
    let y = labels(rng, n, k);
    // A margin large enough to keep most hinges active.
    let m = rng.gen_range(5.0..15.0);
    check(&[randn(rng, &[n, d])], move |t, v| large_margin(t, v[0], &bank, &y, m))
}

fn distances(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let n = rng.gen_range(1..=4);
    let k = rng.gen_range(1..=4);
    let d = rng.gen_range(1..=4);
    let c = randn(rng, &[k, d]);
    check(&[randn(rng, &[n, d])], move |t, v| {
        let c = t.constant(c.clone());
        let y = pairwise_distances(t, v[0], c)?;
        probe(t, y)
    })
}

fn meta(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let n = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=4);
    let d = rng.gen_range(1..=4);
    let bank = random_bank(rng, k, d, 1.0)?;
    let hal = Linear::<f64>::init(rng, d, k);
    let sel = Linear::<f64>::init(rng, d, d);
    let params = [
        randn(rng, &[n, d]),
        hal.weight,
        randn(rng, &[k]),
        sel.weight,
        randn(rng, &[d]),
    ];
    check(&params, move |t, v| {
        let h = LinearVars {
            weight: v[1],
            bias: v[2],
        };
        let s = LinearVars {
            weight: v[3],
            bias: v[4],
        };
        let m = meta_embedding(t, v[0], &bank, &h, &s, 1e-12)?;
        probe(t, m.v_meta)
    })
}

fn attention(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let c = 2 * rng.gen_range(1..=2);
    let hw = rng.gen_range(1..=5);
    let att = ModulatedAttention::<f64>::init(rng, c)?;
    let mut params = vec![randn(rng, &[c, hw])];
    params.extend(att.param_tensors());
    check(&params, move |t, v| {
        let vars = att.bind_vars(&mut v[1..].iter());
        let y = vars.forward(t, v[0])?;
        probe(t, y)
    })
}

fn pipeline(rng: &mut ChaCha8Rng, backbone: BackboneConfig, sample_shape: &[usize]) -> Result<(f64, usize)> {
    let n = rng.gen_range(2..=4);
    let k = rng.gen_range(2..=4);
    let cfg = ModelConfig {
        backbone,
        feature_dim: rng.gen_range(2..=4),
        ..ModelConfig::default()
    };
    let d = cfg.feature_dim;
    let mut model = Model::<f64>::init(rng, &cfg, sample_shape, k)?;
    model.hallucinator = Linear::init(rng, d, k);
    model.selector = Linear::init(rng, d, d);
    model.bank = random_bank(rng, k, d, 2.0)?;
    let len: usize = sample_shape.iter().product();
    let x = randn(rng, &[n * len]).into_data();
    let y = labels(rng, n, k);
    let objective = ObjectiveConfig {
        lambda: 0.1,
        margin: rng.gen_range(0.0..15.0),
    };
    let params = model.param_tensors();
    check(&params, move |t, v| {
        let vars = model.bind_vars(&mut v.iter());
        let fwd = model.forward(t, &vars, &x, n, Mode::Meta)?;
        model.loss(t, &fwd, &y, &objective)
    })
}

fn pipeline_mlp(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let input = rng.gen_range(2..=5);
    pipeline(rng, BackboneConfig::Mlp { hidden: [5, 4] }, &[input])
}

fn pipeline_cnn(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    pipeline(rng, BackboneConfig::Cnn { channels: 2 }, &[1, 3, 3])
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", matmul),
        ("transpose", |r| unary(r, false, |t, v| t.transpose(v))),
        ("add", |r| binary(r, |t, a, b| t.add(a, b))),
        ("sub", |r| binary(r, |t, a, b| t.sub(a, b))),
        ("mul", |r| binary(r, |t, a, b| t.mul(a, b))),
        ("div", |r| binary(r, |t, a, b| t.div(a, b))),
        ("relu", |r| unary(r, false, |t, v| t.relu(v))),
        ("tanh", |r| unary(r, false, |t, v| t.tanh(v))),
        ("exp", |r| unary(r, false, |t, v| t.exp(v))),
        ("log", |r| unary(r, true, |t, v| t.log(v))),
        ("neg", |r| unary(r, false, |t, v| t.neg(v))),
        ("scalar_mul", |r| unary(r, false, |t, v| t.scalar_mul(v, -1.7))),
        ("add_scalar", |r| unary(r, false, |t, v| t.add_scalar(v, 0.3))),
        ("clamp_min", |r| unary(r, false, |t, v| t.clamp_min(v, 0.1))),
        ("softmax", |r| reductions(r, |t, v, a| t.softmax(v, a))),
        ("log_softmax", |r| reductions(r, |t, v, a| t.log_softmax(v, a))),
        ("sum", |r| unary(r, false, |t, v| t.sum(v))),
        ("mean", |r| unary(r, false, |t, v| t.mean(v))),
        ("sum_axis", |r| reductions(r, |t, v, a| t.sum_axis(v, a))),
        ("l2_norm", |r| reductions(r, |t, v, a| t.l2_norm(v, a))),
        ("min_axis", |r| reductions(r, |t, v, a| t.min_axis(v, a))),
        ("concat", concat),
        ("reshape", reshape),
        ("conv3x3", conv),
        ("global_avg_pool", pool),
        ("linear", linear),
        ("squash", squash_case),
        ("cosine_logits", cosine),
        ("cross_entropy", ce),
        ("large_margin", margin),
        ("pairwise_distances", distances),
        ("meta_embedding", meta),
        ("modulated_attention", attention),
        ("pipeline_mlp", pipeline_mlp),
        ("pipeline_cnn", pipeline_cnn),
    ]
}

/// Runs every case `instances_per_case` times on fresh random inputs.
pub fn run_gradient_suite(seed: u64, instances_per_case: usize) -> Result<SuiteReport> {
    let mut out = Vec::new();
    for (i, (name, case)) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut report = CaseReport {
            name,
            instances: 0,
            entries: 0,
            max_rel_err: 0.0,
        };
        for _ in 0..instances_per_case {
            let (err, entries) = case(&mut rng)?;
            report.instances += 1;
            report.entries += entries;
            report.max_rel_err = report.max_rel_err.max(err);
        }
        out.push(report);
    }
    Ok(SuiteReport { cases: out })
}
