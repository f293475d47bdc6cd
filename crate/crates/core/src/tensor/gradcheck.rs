//! Central finite-difference check of tape gradients.

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::par::Backend;

/// Default central-difference step at 64-bit precision.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - fd| / max(1, |analytic|)` over all parameter entries.
    pub max_rel_err: f64,
    pub entries: usize,
    /// `(parameter index, flat entry)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
}

fn eval<T, F>(f: &F, params: &[Tensor<T>], backend: Backend) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_backend(backend);
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(loss).to_vec()));
    }
    Ok((tape, vars, loss))
}

fn loss_at<T, F>(f: &F, params: &[Tensor<T>], which: usize, entry: usize, delta: T) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut p = params.to_vec();
    p[which].data_mut()[entry] += delta;
    let (tape, _, loss) = eval(f, &p, Backend::Sequential)?;
    Ok(tape.value(loss).data()[0].to_f64().unwrap())
}

/// Compares reverse-mode gradients of the scalar program `f` against central
/// differences with step `fd_step`, entry by entry.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], fd_step: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var> + Sync + Send,
{
    let (tape, vars, loss) = eval(&f, params, Backend::Sequential)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars.iter().map(|&v| grads.get(v).into_data()).collect();

    let index: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |e| (p, e)))
        .collect();
    let h = T::c(fd_step);
    let work = tape.len() * 64;
    let errs = Backend::default().try_map_range(index.len(), work, |k| {
        let (p, e) = index[k];
        let up = loss_at(&f, params, p, e, h)?;
        let down = loss_at(&f, params, p, e, -h)?;
        let fd = (up - down) / (2.0 * fd_step);
        let a = analytic[p][e].to_f64().unwrap();
        Ok::<f64, Error>((a - fd).abs() / a.abs().max(1.0))
    })?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        entries: index.len(),
        worst: None,
    };
    for (k, err) in errs.into_iter().enumerate() {
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(index[k]);
        }
    }
    Ok(report)
}
