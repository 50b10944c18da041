use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

/// Gradients smaller than this (in both routes) are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub id: ParamId,
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of every parameter in `store`.
///
/// `f` builds the scalar loss on the graph it is handed; it is called once for
/// the analytic pass and twice per parameter entry.
pub fn finite_diff_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParamStore) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");
    let analytic = {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.backward(loss)?.param_grads(&g, store)
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        Ok(g.value(loss).data()[0])
    };

    let ids: Vec<ParamId> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let mut check = ParamCheck {
            id,
            name: store.name(id).to_string(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id)[j];
            let rel = relative_error(a, numeric);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = j;
            }
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
        }
        params.push(check);
    }
    Ok(GradCheckReport { params })
}
