use super::params::{Gradients, ParamStore};

/// Finite-difference comparison for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub analytic_norm: f64,
    pub rel_error: f64,
}

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute.
const REL_FLOOR: f64 = 1e-6;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(REL_FLOOR)
}

/// Central finite differences of `loss` with respect to every trainable
/// parameter in `store`, compared against `analytic`.
pub fn check_params<E>(
    store: &ParamStore,
    analytic: &Gradients,
    h: f64,
    mut loss: impl FnMut(&ParamStore) -> Result<f64, E>,
) -> Result<Vec<ParamCheck>, E> {
    let mut work = store.clone();
    let mut out = Vec::new();
    for id in store.ids() {
        let entry = store.entry(id);
        if !entry.trainable {
            continue;
        }
        let n = entry.value.len();
        let mut numeric = vec![0.0; n];
        for k in 0..n {
            let orig = entry.value.data()[k];
            work.value_mut(id).data_mut()[k] = orig + h;
            let plus = loss(&work)?;
            work.value_mut(id).data_mut()[k] = orig - h;
            let minus = loss(&work)?;
            work.value_mut(id).data_mut()[k] = orig;
            numeric[k] = (plus - minus) / (2.0 * h);
        }
        let zeros = vec![0.0; n];
        let a = analytic.get(id).map_or(&zeros[..], |g| g.data());
        out.push(ParamCheck {
            name: entry.name.clone(),
            entries: n,
            analytic_norm: a.iter().map(|v| v * v).sum::<f64>().sqrt(),
            rel_error: relative_error(a, &numeric),
        });
    }
    Ok(out)
}
