//! Reference implementations checked against the library on random inputs.
//! Every check runs `trials` independent instances and returns the largest
//! absolute deviation seen, or a description of the first mismatch.

use oltr::explore::{select_for_annotation, uncertainty_from_distances};
use oltr::memory::{compose_meta_embedding, MemoryBank};
use oltr::metrics::{detection_curves, open_f_measure, Prediction, Truth, TARGET_TPR};
use oltr::nn::Linear;
use oltr::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TRIALS: usize = 1000;
pub const TOLERANCE: f64 = 1e-9;

pub type Oracle = fn(u64, usize) -> Result<f64, String>;

pub const ORACLES: &[(&str, Oracle)] = &[
    ("centroid_update", centroid_update),
    ("reachability", reachability),
    ("informativeness_ratio", informativeness_ratio),
    ("top_k_selection", top_k_selection),
    ("f_measure", f_measure),
    ("fpr_at_95tpr", fpr_at_95tpr),
    ("detection_error", detection_error),
    ("auroc", auroc),
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(what: &str, trial: usize, got: f64, want: f64, worst: &mut f64) -> Result<(), String> {
    let err = (got - want).abs();
    if !(err <= TOLERANCE * want.abs().max(1.0)) {
        return Err(format!("{what}, trial {trial}: got {got}, expected {want}"));
    }
    *worst = worst.max(err);
    Ok(())
}

fn random_bank(r: &mut ChaCha8Rng, k: usize, d: usize) -> MemoryBank<f64> {
    let data: Vec<f64> = (0..k * d).map(|_| r.gen_range(-5.0..5.0)).collect();
    MemoryBank::new(Tensor::new(vec![k, d], data).unwrap()).unwrap()
}

pub fn centroid_update(seed: u64, trials: usize) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let k = r.gen_range(1..7);
        let d = r.gen_range(1..6);
        let b = r.gen_range(1..12);
        let mut bank = random_bank(&mut r, k, d);
        let before: Vec<Vec<f64>> = (0..k).map(|i| bank.centroid(i).to_vec()).collect();
        let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..k)).collect();
        let x: Vec<f64> = (0..b * d).map(|_| r.gen_range(-5.0..5.0)).collect();
        let rate: f64 = r.gen_range(0.0..1.0);
        bank.update_centroids(&x, &labels, rate).map_err(|e| e.to_string())?;
        for i in 0..k {
            let members: Vec<usize> = (0..b).filter(|&s| labels[s] == i).collect();
            for j in 0..d {
                let want = if members.is_empty() {
                    before[i][j]
                } else {
                    let mut pull = 0.0;
                    for &s in &members {
                        pull += before[i][j] - x[s * d + j];
                    }
                    before[i][j] - rate * pull / (1.0 + members.len() as f64)
                };
                close("centroid", trial, bank.centroid(i)[j], want, &mut worst)?;
            }
        }
    }
    Ok(worst)
}

/// The bank's reachability and the differentiable one inside the meta-embedding
/// both match a brute-force minimum.
pub fn reachability(seed: u64, trials: usize) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let k = r.gen_range(1..9);
        let d = r.gen_range(1..7);
        let bank = random_bank(&mut r, k, d);
        let v: Vec<f64> = (0..d).map(|_| r.gen_range(-6.0..6.0)).collect();
        let mut want = f64::INFINITY;
        for i in 0..k {
            let mut s = 0.0;
            for j in 0..d {
                s += (v[j] - bank.centroid(i)[j]).powi(2);
            }
            want = want.min(s.sqrt());
        }
        let got = bank.reachability(&v).map_err(|e| e.to_string())?;
        close("reachability", trial, got, want, &mut worst)?;
        let hal = Linear::zeros(d, k);
        let sel = Linear::zeros(d, d);
        let m = compose_meta_embedding(&v, &bank, &hal, &sel, 1e-12).map_err(|e| e.to_string())?;
        close("meta gamma", trial, m.gamma, want, &mut worst)?;
    }
    Ok(worst)
}

pub fn informativeness_ratio(seed: u64, trials: usize) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let k = r.gen_range(2..12);
        let mut d: Vec<f64> = (0..k).map(|_| r.gen_range(0.0..10.0)).collect();
        if r.gen_bool(0.2) {
            let (a, b) = (r.gen_range(0..k), r.gen_range(0..k));
            d[a] = d[b];
        }
        let t = r.gen_range(0.1..5.0);
        let rec = uncertainty_from_distances(&d, t).map_err(|e| e.to_string())?;
        let mut sorted = d.clone();
        sorted.sort_by(f64::total_cmp);
        let ratio = if sorted[1] == 0.0 { 1.0 } else { sorted[0] / sorted[1] };
        close("u_open", trial, rec.u_open, sorted[0], &mut worst)?;
        close("u_info", trial, rec.u_info, ratio, &mut worst)?;
        close("score", trial, rec.score, sorted[0] * ratio, &mut worst)?;
    }
    Ok(worst)
}

pub fn top_k_selection(seed: u64, trials: usize) -> Result<f64, String> {
    let mut r = rng(seed);
    for trial in 0..trials {
        let n = r.gen_range(1..60);
        let levels = r.gen_range(1..20);
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 / levels as f64).collect();
        let k = r.gen_range(1..=n);
        let fraction = k as f64 / n as f64;
        let got = select_for_annotation(&scores, fraction).map_err(|e| e.to_string())?;
        let mut keyed: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<usize> = keyed.into_iter().take(k).map(|(_, i)| i).collect();
        if got != want {
            return Err(format!("selection, trial {trial}: got {got:?}, expected {want:?}"));
        }
    }
    Ok(0.0)
}

fn random_open_set(r: &mut ChaCha8Rng) -> (Vec<Prediction>, Vec<Truth>) {
    let k = r.gen_range(1..6);
    let n = r.gen_range(1..50);
    let mut preds = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for _ in 0..n {
        truth.push(if r.gen_bool(0.7) {
            Truth::Known(r.gen_range(0..k))
        } else {
            Truth::Open
        });
        preds.push(if r.gen_bool(0.2) {
            Prediction::Reject
        } else {
            Prediction::Class(r.gen_range(0..k))
        });
    }
    (preds, truth)
}

/// Confusion matrix over `K` known classes plus one open row and one reject column.
pub fn f_measure(seed: u64, trials: usize) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let (preds, truth) = random_open_set(&mut r);
        let k = 6;
        let mut m = vec![vec![0usize; k + 1]; k + 1];
        for (p, t) in preds.iter().zip(&truth) {
            let row = match t {
                Truth::Known(c) => *c,
                Truth::Open => k,
            };
            let col = match p {
                Prediction::Class(c) => *c,
                Prediction::Reject => k,
            };
            m[row][col] += 1;
        }
        let tp: usize = (0..k).map(|c| m[c][c]).sum();
        let predicted_known: usize = (0..=k).map(|row| (0..k).map(|c| m[row][c]).sum::<usize>()).sum();
        let actual_known: usize = (0..k).map(|row| m[row].iter().sum::<usize>()).sum();
        let p = if predicted_known == 0 {
            0.0
        } else {
            tp as f64 / predicted_known as f64
        };
        let rc = if actual_known == 0 {
            0.0
        } else {
            tp as f64 / actual_known as f64
        };
        let want = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
        let got = open_f_measure(&preds, &truth).map_err(|e| e.to_string())?;
        close("f-measure", trial, got, want, &mut worst)?;
    }
    Ok(worst)
}

fn draw_scores(r: &mut ChaCha8Rng, n: usize, shift: f64, coarse: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = r.gen_range(0.0..1.0) + shift;
            if coarse {
                (x * 10.0).round() / 10.0
            } else {
                x
            }
        })
        .collect()
}

fn random_scores(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let coarse = r.gen_bool(0.5);
    let nk = r.gen_range(1..60);
    let no = r.gen_range(1..60);
    let known = draw_scores(r, nk, 0.3, coarse);
    let open = draw_scores(r, no, 0.0, coarse);
    (known, open)
}

/// Sweeps every candidate threshold; keeps the largest one with TPR >= 95%.
fn sweep(known: &[f64], open: &[f64]) -> (f64, f64) {
    let rate = |xs: &[f64], t: f64| xs.iter().filter(|&&x| x >= t).count() as f64 / xs.len() as f64;
    let mut candidates: Vec<f64> = known.iter().chain(open).copied().collect();
    candidates.push(f64::NEG_INFINITY);
    let mut best = f64::NEG_INFINITY;
    for &t in &candidates {
        if rate(known, t) >= TARGET_TPR && t > best {
            best = t;
        }
    }
    (rate(known, best), rate(open, best))
}

pub fn fpr_at_95tpr(seed: u64, trials: usize) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let (known, open) = random_scores(&mut r);
        let (tpr, fpr) = sweep(&known, &open);
        let c = detection_curves(&known, &open).map_err(|e| e.to_string())?;
        close("tpr", trial, c.tpr, tpr, &mut worst)?;
        close("fpr@95tpr", trial, c.fpr_at_95tpr, fpr, &mut worst)?;
    }
    Ok(worst)
}

pub fn detection_error(seed: u64, trials: usize) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let (known, open) = random_scores(&mut r);
        let (tpr, fpr) = sweep(&known, &open);
        let c = detection_curves(&known, &open).map_err(|e| e.to_string())?;
        close(
            "detection error",
            trial,
            c.detection_error,
            0.5 * (1.0 - tpr) + 0.5 * fpr,
            &mut worst,
        )?;
    }
    Ok(worst)
}

/// Probability that a random known score beats a random open one, ties half.
pub fn auroc(seed: u64, trials: usize) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let (known, open) = random_scores(&mut r);
        let mut wins = 0.0;
        for &k in &known {
            for &o in &open {
                wins += if k > o {
                    1.0
                } else if k == o {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let want = wins / (known.len() * open.len()) as f64;
        let c = detection_curves(&known, &open).map_err(|e| e.to_string())?;
        close("auroc", trial, c.auroc, want, &mut worst)?;
    }
    Ok(worst)
}
