use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use oltr::checkpoint::{load_checkpoint, save_checkpoint, Manifest};
use oltr::config::ExperimentConfig;
use oltr::experiment::{self, pool_stem, TEST_STEM, TRAIN_STEM};
use oltr::gradsuite::{run_gradient_suite, TOLERANCE};
use oltr::metrics::EvalReport;
use oltr::par::Backend;
use oltr::tensor::{Precision, Real};
use oltr::Error;
use serde::Serialize;

use crate::output::{write_csv, write_json};
use crate::Common;

pub const EPOCH_LOG: &str = "epochs.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const LOOP_CSV: &str = "loop.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint";

/// Config from `--config`, else the checkpoint's own, else defaults; then `--seed`.
fn resolve_config(common: &Common, manifest: Option<&Manifest>) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, manifest) {
        (Some(path), _) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
            other => other,
        })?,
        (None, Some(m)) => m.config.clone(),
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(p) = common.precision {
        cfg.training.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

pub fn gen_data(common: &Common) -> Result<()> {
    let out = common.out_dir();
    let cfg = resolve_config(common, None)?;
    create_out(&out)?;
    let splits = cfg.generate()?;
    splits.train.save(&out, TRAIN_STEM)?;
    splits.test.save(&out, TEST_STEM)?;
    for (t, pool) in cfg.pools()?.iter().enumerate() {
        pool.save(&out, &pool_stem(t + 1))?;
    }
    write_json(&out.join("config.json"), &cfg)?;
    println!(
        "wrote {} train, {} test samples to {}",
        splits.train.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    Manifest::read(dir).with_context(|| format!("reading checkpoint {}", dir.display()))
}

pub fn train(common: &Common, data: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let manifest = resume.map(read_manifest).transpose()?;
    let cfg = resolve_config(common, manifest.as_ref())?;
    let precision = match &manifest {
        Some(m) if common.precision.is_some_and(|p| p != m.dtype) => {
            return Err(Error::Config(format!(
                "checkpoint stores {}, --precision asks for another",
                m.dtype.name()
            ))
            .into());
        }
        Some(m) => m.dtype,
        None => cfg.training.precision,
    };
    match precision {
        Precision::F32 => train_as::<f32>(&cfg, common, data, resume),
        Precision::F64 => train_as::<f64>(&cfg, common, data, resume),
    }
}

fn train_as<T: Real>(
    cfg: &ExperimentConfig,
    common: &Common,
    data: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let out = common.out_dir();
    let splits = experiment::load_or_generate(cfg, data)?;
    let mut state = match resume {
        Some(dir) => load_checkpoint::<T>(dir, Some(cfg))?.state,
        None => experiment::init_state::<T>(cfg, &splits.train)?,
    };
    create_out(&out)?;
    let every = cfg.training.checkpoint_every;
    let log = experiment::train(cfg, &splits, &mut state, Backend::default(), |st, row| {
        log::info!(
            "epoch {} {} loss {:.4} train_acc {:.4}",
            row.epoch,
            row.phase.name(),
            row.loss,
            row.train_acc
        );
        if every > 0 && row.epoch % every == 0 {
            save_checkpoint(
                st,
                cfg,
                &out.join("checkpoints").join(format!("epoch-{:03}", row.epoch)),
            )?;
        }
        Ok(())
    })?;
    write_csv(&out.join(EPOCH_LOG), &log)?;
    save_checkpoint(&state, cfg, &out.join(FINAL_CHECKPOINT))?;
    write_json(&out.join("config.json"), cfg)?;
    match log.last() {
        Some(r) => println!(
            "trained to epoch {}: loss {:.4}, train acc {:.4}, few-shot acc {}",
            r.epoch,
            r.loss,
            r.train_acc,
            r.few_acc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
        ),
        None => println!("nothing to train: checkpoint already at epoch {}", state.epoch),
    }
    Ok(())
}

/// Flat view of [`EvalReport`] for the CSV row.
#[derive(Serialize)]
struct EvalRow {
    epoch: usize,
    threshold: f64,
    overall_acc: Option<f64>,
    many_acc: Option<f64>,
    medium_acc: Option<f64>,
    few_acc: Option<f64>,
    f_measure: f64,
    fpr_at_95tpr: Option<f64>,
    detection_error: Option<f64>,
    auroc: Option<f64>,
    known_samples: usize,
    open_samples: usize,
}

#[derive(Serialize)]
struct EvalDocument<'a> {
    checkpoint_epoch: usize,
    config_hash: String,
    report: &'a EvalReport,
}

pub fn eval(common: &Common, data: Option<&Path>, checkpoint: &Path) -> Result<()> {
    let manifest = read_manifest(checkpoint)?;
    let cfg = resolve_config(common, Some(&manifest))?;
    let report = match manifest.dtype {
        Precision::F32 => eval_as::<f32>(&cfg, data, checkpoint)?,
        Precision::F64 => eval_as::<f64>(&cfg, data, checkpoint)?,
    };
    let out = common.out_dir();
    create_out(&out)?;
    let row = EvalRow {
        epoch: manifest.epoch,
        threshold: report.threshold,
        overall_acc: report.overall_acc,
        many_acc: report.many_acc,
        medium_acc: report.medium_acc,
        few_acc: report.few_acc,
        f_measure: report.f_measure,
        fpr_at_95tpr: report.fpr_at_95tpr,
        detection_error: report.detection_error,
        auroc: report.auroc,
        known_samples: report.known_samples,
        open_samples: report.open_samples,
    };
    write_csv(&out.join(EVAL_CSV), &[row])?;
    let doc = EvalDocument {
        checkpoint_epoch: manifest.epoch,
        config_hash: cfg.hash(),
        report: &report,
    };
    write_json(&out.join(EVAL_JSON), &doc)?;
    let show = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "overall {} many {} medium {} few {} | F {:.4} | AUROC {}",
        show(report.overall_acc),
        show(report.many_acc),
        show(report.medium_acc),
        show(report.few_acc),
        report.f_measure,
        show(report.auroc)
    );
    Ok(())
}

fn eval_as<T: Real>(cfg: &ExperimentConfig, data: Option<&Path>, checkpoint: &Path) -> Result<EvalReport> {
    let splits = experiment::load_or_generate(cfg, data)?;
    let loaded = load_checkpoint::<T>(checkpoint, Some(cfg))?;
    Ok(experiment::evaluate_model(
        cfg,
        &loaded.state.model,
        &splits,
        Backend::default(),
    )?)
}

pub fn explore(common: &Common, data: Option<&Path>, checkpoint: &Path) -> Result<()> {
    let manifest = read_manifest(checkpoint)?;
    let cfg = resolve_config(common, Some(&manifest))?;
    let rows = match manifest.dtype {
        Precision::F32 => explore_as::<f32>(&cfg, data, checkpoint)?,
        Precision::F64 => explore_as::<f64>(&cfg, data, checkpoint)?,
    };
    let out = common.out_dir();
    create_out(&out)?;
    write_csv(&out.join(LOOP_CSV), &rows)?;
    for r in &rows {
        println!(
            "stage {} annotated {} known acc {:.4} unknown acc {:.4} width {}",
            r.stage, r.budget_used, r.known_acc, r.unknown_acc, r.classifier_width
        );
    }
    Ok(())
}

fn explore_as<T: Real>(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    checkpoint: &Path,
) -> Result<Vec<oltr::explore::LoopRow>> {
    let splits = experiment::load_or_generate(cfg, data)?;
    let pools = experiment::load_or_generate_pools(cfg, data)?;
    let loaded = load_checkpoint::<T>(checkpoint, Some(cfg))?;
    Ok(experiment::explore(
        cfg,
        loaded.state.model,
        &splits.test,
        &pools,
        Backend::default(),
    )?)
}

pub fn gradcheck(common: &Common, instances: usize) -> Result<()> {
    if instances == 0 {
        return Err(Error::Config("--instances must be positive".into()).into());
    }
    let report = run_gradient_suite(common.seed.unwrap_or(0), instances)?;
    for c in &report.cases {
        println!(
            "{:<20} {:>3} instances {:>6} entries  max rel err {:.3e}",
            c.name, c.instances, c.entries, c.max_rel_err
        );
    }
    println!("instances: {}", report.instances());
    println!("max rel err: {:.3e}", report.max_rel_err());
    if let Some(out) = &common.out {
        create_out(out)?;
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    if !report.passed() {
        bail!("gradient check failed: {:.3e} > {TOLERANCE:e}", report.max_rel_err());
    }
    Ok(())
}
