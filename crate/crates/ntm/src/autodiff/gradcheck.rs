//! Central finite-difference verification of analytic gradients.

use super::{ParameterStore, Tape};
use crate::error::{NtmError, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub tol: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compare the analytic gradient of `build` (a deterministic map from the
/// store's parameters to a scalar loss node) against central finite
/// differences at every scalar parameter. Two central differences (at eps
/// and eps/2) are Richardson-extrapolated so that truncation error from
/// sharp curvature cannot masquerade as a gradient bug. The relative
/// error uses the denominator `max(|analytic|, |numeric|, 1e-5)`.
pub fn gradient_check<F>(
    mut build: F,
    store: &mut ParameterStore,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParameterStore) -> Result<super::NodeId>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(NtmError::Config(format!("gradcheck eps {eps} outside [1e-6, 1e-4]")));
    }

    // Analytic pass.
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(name, e)| (name.clone(), e.grad.clone()))
        .collect();
    drop(tape);

    let mut forward = |store: &ParameterStore| -> Result<f64> {
        let mut t = Tape::new();
        let loss = build(&mut t, store)?;
        Ok(t.scalar(loss))
    };

    let mut max_rel_err: f64 = 0.0;
    let mut worst_param = String::new();
    let mut checked = 0usize;
    let names: Vec<String> = store.names().cloned().collect();
    for name in &names {
        let n = store.entry(name).unwrap().value.len();
        for i in 0..n {
            let orig = store.entry(name).unwrap().value[i];
            let mut central = |h: f64| -> Result<f64> {
                store.entry_mut(name).unwrap().value[i] = orig + h;
                let f_plus = forward(store)?;
                store.entry_mut(name).unwrap().value[i] = orig - h;
                let f_minus = forward(store)?;
                store.entry_mut(name).unwrap().value[i] = orig;
                Ok((f_plus - f_minus) / (2.0 * h))
            };
            let d_full = central(eps)?;
            let d_half = central(eps / 2.0)?;
            let numeric = (4.0 * d_half - d_full) / 3.0;
            let a = analytic
                .iter()
                .find(|(nm, _)| nm == name)
                .map(|(_, g)| g[i])
                .unwrap();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_param = format!("{name}[{i}]");
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst_param,
        tol,
        checked,
    })
}
