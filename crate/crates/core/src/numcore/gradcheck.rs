use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Cap on entries checked per parameter tensor; `None` checks all.
    /// Entries with a non-zero analytic gradient are preferred.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<GradCheckEntry>,
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares analytic gradients against central finite differences.
///
/// `f(store, want_grad)` evaluates the scalar objective and, when asked,
/// its gradients. The store is restored to its original values on return.
pub fn grad_check<F>(store: &mut ParamStore, cfg: &GradCheckConfig, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Option<Gradients>)>,
{
    let (_, grads) = f(store, true)?;
    let grads = grads.ok_or_else(|| Error::invalid("objective returned no gradients"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let entries = select_entries(store, &grads, id, cfg.max_entries_per_param, &mut rng);
        for flat in entries {
            let original = store.value(id).data()[flat];
            store.value_mut(id).data_mut()[flat] = original + cfg.step;
            let plus = f(store, false);
            store.value_mut(id).data_mut()[flat] = original - cfg.step;
            let minus = f(store, false);
            store.value_mut(id).data_mut()[flat] = original;
            let numeric = (plus?.0 - minus?.0) / (2.0 * cfg.step);
            let analytic = grads.entry(id, flat);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(GradCheckEntry {
                    param: store.param(id).name.clone(),
                    index: flat,
                    analytic,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}

fn select_entries(
    store: &ParamStore,
    grads: &Gradients,
    id: ParamId,
    cap: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = store.value(id).len();
    let Some(cap) = cap else {
        return (0..n).collect();
    };
    if n <= cap {
        return (0..n).collect();
    }
    let (mut nonzero, mut zero): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&i| grads.entry(id, i) != 0.0);
    nonzero.shuffle(rng);
    zero.shuffle(rng);
    nonzero.truncate(cap);
    zero.truncate((cap / 4).max(1));
    nonzero.extend(zero);
    nonzero.sort_unstable();
    nonzero
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Graph, Tensor};

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::matrix(2, 2, vec![0.3, -1.2, 2.0, 0.7]).unwrap())
            .unwrap();
        let report = grad_check(&mut store, &GradCheckConfig::default(), |s, want| {
            let mut g = Graph::new(s, true);
            let p = g.param(w);
            let sq = g.matmul(p, p)?;
            let loss = g.sum(sq);
            let grads = if want { Some(g.backward(loss)?) } else { None };
            Ok((g.scalar(loss), grads))
        })
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        assert_eq!(store.value(w).data(), &[0.3, -1.2, 2.0, 0.7]);
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::matrix(2, 2, vec![0.3, -1.2, 2.0, 0.7]).unwrap())
            .unwrap();
        let report = grad_check(&mut store, &GradCheckConfig::default(), |s, want| {
            let mut g = Graph::new(s, true).with_corrupted_backward(true);
            let p = g.param(w);
            let sq = g.matmul(p, p)?;
            let loss = g.sum(sq);
            let grads = if want { Some(g.backward(loss)?) } else { None };
            Ok((g.scalar(loss), grads))
        })
        .unwrap();
        assert!(report.max_rel_error > 1e-2, "{report:?}");
    }
}
