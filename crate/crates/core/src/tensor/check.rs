use super::{Gradients, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)`
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
}

/// Compares analytic gradients against central finite differences.
///
/// `f` returns the loss and its analytic gradients for a given store. With
/// `per_param = Some(k)` at most `k` evenly spaced coordinates of each
/// parameter are perturbed; `None` checks every coordinate.
pub fn grad_check<F>(
    store: &ParamStore,
    f: F,
    eps: f64,
    per_param: Option<usize>,
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> (f64, Gradients),
{
    let (_, analytic) = f(store);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates_checked: 0,
    };
    for id in store.ids() {
        let n = store.value(id).len();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        for idx in coords {
            let at = [idx / store.value(id).ncols(), idx % store.value(id).ncols()];
            let original = store.value(id)[at];
            probe.value_mut(id)[at] = original + eps;
            let plus = f(&probe).0;
            probe.value_mut(id)[at] = original - eps;
            let minus = f(&probe).0;
            probe.value_mut(id)[at] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic.get(id).map(|g| g[at]).unwrap_or(0.0);
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            let rel = (exact - numeric).abs() / denom;
            report.coordinates_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = idx;
            }
        }
    }
    report
}
