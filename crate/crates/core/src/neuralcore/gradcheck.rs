use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, NnError, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tol: f64,
    /// Entries with `|a| + |b|` below this sit at the finite-difference
    /// rounding floor; they pass if `|a − b| ≤ tol · resolution` instead of
    /// the relative test.
    pub resolution: f64,
    /// Tensors larger than this are checked on a seeded random subsample.
    pub max_entries_per_param: usize,
    pub seed: u64,
    /// Restrict the check to these parameters; `None` checks all.
    pub only: Option<Vec<ParamId>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            resolution: 1e-6,
            max_entries_per_param: 16,
            seed: 0,
            only: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries judged by the absolute test under `resolution`.
    pub unresolved: usize,
    pub worst: Option<(String, usize)>,
    /// Backprop and finite-difference values at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub tol: f64,
    pub passed: bool,
    /// Parameters left out of the comparison by the caller.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
}

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares backprop gradients of the scalar built by `loss_fn` against
/// central differences. `loss_fn` must be deterministic (seed any dropout
/// inside it).
pub fn grad_check<F, E>(
    store: &mut ParamStore,
    opts: &GradCheckOptions,
    mut loss_fn: F,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var), E>,
    E: From<NnError>,
{
    store.zero_grad();
    let (g, loss) = loss_fn(store)?;
    g.backward(loss, store)?;
    let analytic: Vec<Tensor> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    compare_gradients(store, &analytic, opts, loss_fn)
}

/// Finite-difference comparison against caller-supplied gradients, one
/// tensor per parameter in store order.
pub fn compare_gradients<F, E>(
    store: &mut ParamStore,
    analytic: &[Tensor],
    opts: &GradCheckOptions,
    mut loss_fn: F,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var), E>,
    E: From<NnError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<ParamId> = match &opts.only {
        Some(ids) => ids.clone(),
        None => store.ids().collect(),
    };
    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let (g, loss) = loss_fn(store)?;
        Ok(g.value(loss).data()[0])
    };

    let mut max_err: f64 = 0.0;
    let mut worst = None;
    let mut worst_values = None;
    let mut checked = 0;
    let mut unresolved = 0;
    for id in ids {
        let n = store.get(id).value.len();
        let entries: Vec<usize> = if n > opts.max_entries_per_param {
            let mut picked = sample(&mut rng, n, opts.max_entries_per_param).into_vec();
            picked.sort_unstable();
            picked
        } else {
            (0..n).collect()
        };
        for i in entries {
            let original = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = original + opts.step;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[i] = original - opts.step;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let a = analytic[id.0].data()[i];
            let err = rel_error(a, numeric);
            checked += 1;
            if err > opts.tol
                && a.abs() + numeric.abs() < opts.resolution
                && (a - numeric).abs() <= opts.tol * opts.resolution
            {
                unresolved += 1;
                continue;
            }
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((store.get(id).name.clone(), i));
                worst_values = Some((a, numeric));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        checked,
        unresolved,
        worst,
        worst_values,
        tol: opts.tol,
        passed: max_err <= opts.tol,
        skipped: Vec::new(),
    })
}
