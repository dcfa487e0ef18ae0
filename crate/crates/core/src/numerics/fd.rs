use super::{NumericsError, ParamStore};

/// Compares analytic adjoints against central differences.
///
/// Returns `max |analytic - fd| / max(1, |analytic|)` over every coordinate
/// of every tensor in `params`. Tensors missing from `analytic` are treated
/// as having a zero adjoint.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &ParamStore,
    analytic: &std::collections::BTreeMap<String, super::Tensor>,
    h: f64,
) -> Result<f64, NumericsError>
where
    F: FnMut(&ParamStore) -> Result<f64, NumericsError>,
{
    if !(h > 0.0) {
        return Err(NumericsError::BadStep(h));
    }
    let mut work = params.clone();
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let len = params.get(&name)?.len();
        for i in 0..len {
            let orig = params.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + h;
            let up = f(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - h;
            let down = f(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            for v in [up, down] {
                if !v.is_finite() {
                    return Err(NumericsError::NonFinite(v, name.clone()));
                }
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(&name).map(|t| t.data()[i]).unwrap_or(0.0);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
