//! Central finite-difference verification of analytic gradients.

use rand::seq::index;

use super::Parameters;
use crate::error::{Result, RetoError};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter tensor holding the worst entry, and the flat index inside it.
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `analytic` against `(L(θ+h) - L(θ-h)) / 2h` on `count` scalars drawn without
/// replacement (or all of them when there are fewer).
///
/// Relative error is `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn finite_difference_gradcheck<P, F>(params: &P, analytic: &P, loss: F, h: f64, count: usize, seed: u64) -> Result<GradCheckReport>
where
    P: Parameters,
    F: Fn(&P) -> Result<f64>,
{
    let layout: Vec<(String, usize)> = params.named_slices().into_iter().map(|(n, d)| (n, d.len())).collect();
    let grads: Vec<Vec<f64>> = analytic.named_slices().into_iter().map(|(_, d)| d.to_vec()).collect();
    if grads.iter().map(Vec::len).ne(layout.iter().map(|(_, l)| *l)) {
        return Err(RetoError::Shape("gradient layout differs from parameter layout".into()));
    }
    let total: usize = layout.iter().map(|(_, l)| l).sum();
    if total == 0 {
        return Err(RetoError::EmptyInput("no parameters to check".into()));
    }
    let picks = index::sample(&mut stream_rng(seed, "gradcheck"), total, count.min(total)).into_vec();

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for flat in picks {
        let (mut t, mut i) = (0, flat);
        while i >= layout[t].1 {
            i -= layout[t].1;
            t += 1;
        }
        let original = params.named_slices()[t].1[i];
        probe.named_slices_mut()[t].1[i] = original + h;
        let up = loss(&probe)?;
        probe.named_slices_mut()[t].1[i] = original - h;
        let down = loss(&probe)?;
        probe.named_slices_mut()[t].1[i] = original;

        let numeric = (up - down) / (2.0 * h);
        let a = grads[t][i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = layout[t].0.clone();
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
