//! Finite-difference validation of reverse-mode gradients.

use indexmap::IndexMap;

use crate::error::{LabError, Result};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients against central differences on up to
/// `sample` seeded coordinates per named tensor.
///
/// Relative error is `|a − b| / max(1, |a|, |b|)`.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, eps: f64, sample: usize) -> Result<GradCheck>
where
    F: Fn(&ParamStore) -> Result<(f64, IndexMap<String, Tensor>)>,
{
    let (loss, grads) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(LabError::NonFinite("grad_check loss".into()));
    }
    let mut rng = SeededRng::new(0x6772_6164, "grad_check");
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.clone();
    for (name, value) in params.iter() {
        let analytic = grads
            .get(name)
            .ok_or_else(|| LabError::Invalid(format!("loss_fn returned no gradient for {name}")))?;
        for idx in rng.sample_indices(value.len(), sample) {
            let orig = value.data()[idx];
            let entry = probe.get_mut(name).expect("cloned store");
            entry.data_mut()[idx] = orig + eps;
            let (plus, _) = loss_fn(&probe)?;
            probe.get_mut(name).expect("cloned store").data_mut()[idx] = orig - eps;
            let (minus, _) = loss_fn(&probe)?;
            probe.get_mut(name).expect("cloned store").data_mut()[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(LabError::NonFinite(format!(
                    "grad_check loss at {name}[{idx}]"
                )));
            }
            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic.data()[idx];
            let rel = (fd - an).abs() / 1f64.max(fd.abs()).max(an.abs());
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name.to_string(), idx));
            }
        }
    }
    Ok(report)
}
