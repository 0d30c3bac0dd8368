use crate::error::{Error, Result};
use crate::ndmath::params::ParamSet;

/// Compare analytic gradients against central differences.
///
/// `f` evaluates the loss at the given parameters and, when asked, writes
/// analytic gradients into the set's gradient slots. Returns the maximum
/// over all coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(params: &ParamSet<f64>, eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut ParamSet<f64>, bool) -> Result<f64>,
{
    let mut analytic = params.clone();
    analytic.zero_grad();
    let base = f(&mut analytic, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at base point".into()));
    }

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let grad = analytic.get(name)?.grad.clone();
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of `{name}`")));
        }
        for idx in 0..grad.len() {
            let orig = probe.get(name)?.value.data()[idx];
            probe.get_mut(name)?.value.data_mut()[idx] = orig + eps;
            let plus = f(&mut probe, false)?;
            probe.get_mut(name)?.value.data_mut()[idx] = orig - eps;
            let minus = f(&mut probe, false)?;
            probe.get_mut(name)?.value.data_mut()[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss near `{name}`[{idx}]")));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
