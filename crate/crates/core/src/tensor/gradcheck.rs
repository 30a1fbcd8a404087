use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, ParamStore, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Maximum admissible relative error.
    pub tol: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_analytic: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }
}

/// Below this magnitude the central difference cannot resolve a gradient:
/// its rounding error is about `eps·|f| / h`, near 1e-11 for `h = 1e-5`.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Anything that owns an `f64` parameter store.
pub trait ParamHolder {
    fn params(&self) -> &ParamStore<f64>;
    fn params_mut(&mut self) -> &mut ParamStore<f64>;
}

impl ParamHolder for ParamStore<f64> {
    fn params(&self) -> &ParamStore<f64> {
        self
    }
    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        self
    }
}

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` must build its scalar output on the graph it is handed; it is called
/// once for the analytic pass and twice per checked entry. Gradients already
/// present in `store` are cleared first and left holding the analytic values.
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check_model(store, f, opts)
}

/// [`grad_check`] over a model that owns its parameters.
pub fn grad_check_model<M, F>(model: &mut M, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    M: ParamHolder,
    F: Fn(&mut Graph<f64>, &M) -> Result<Var>,
{
    model.params_mut().zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, model)?;
    g.backward(loss, model.params_mut())?;

    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, m)?;
        Ok(g.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = model.params().get(id).value.len();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &e in &entries {
            let orig = model.params().get(id).value.data()[e];
            model.params_mut().get_mut(id).value.data_mut()[e] = orig + opts.h;
            let fp = eval(model)?;
            model.params_mut().get_mut(id).value.data_mut()[e] = orig - opts.h;
            let fm = eval(model)?;
            model.params_mut().get_mut(id).value.data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let analytic = model.params().get(id).grad.data()[e];
            max_rel = max_rel.max(relative_error(analytic, numeric));
            max_abs = max_abs.max(analytic.abs());
        }
        params.push(ParamCheck {
            name: model.params().get(id).name.clone(),
            checked: entries.len(),
            max_rel_err: max_rel,
            max_abs_analytic: max_abs,
        });
    }
    Ok(GradCheckReport { tol: opts.tol, params })
}
