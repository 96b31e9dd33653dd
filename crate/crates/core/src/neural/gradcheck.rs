//! Central finite-difference checks of analytic parameter gradients.

use super::graph::{Graph, Var};
use super::params::{ParamGroup, ParamStore};

/// Gradients smaller than this are compared absolutely, since central
/// differences on an O(10) loss cannot resolve them relatively.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter name and coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of `loss` against central differences for up
/// to `coords_per_param` evenly strided coordinates of every parameter in
/// `groups`.
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    groups: &[ParamGroup],
    coords_per_param: usize,
    eps: f64,
    loss: F,
) -> GradCheckReport
where
    F: Fn(&mut Graph<'_, f64>) -> Var,
{
    let mut g = Graph::new(store, groups);
    let l = loss(&mut g);
    let grads = g.backward(l);
    let analytic = g.param_grads(&grads);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::inference(s);
        let v = loss(&mut g);
        g.scalar(v)
    };
    let mut probe = store.clone();
    for group in groups {
        for id in store.ids_in_group(*group) {
            let n = store.value(id).len();
            let stride = (n / coords_per_param.max(1)).max(1);
            let grad = analytic.iter().find(|(pid, _)| *pid == id).map(|(_, m)| m);
            for c in (0..n).step_by(stride).take(coords_per_param) {
                let orig = store.value(id).data[c];
                probe.value_mut(id).data[c] = orig + eps;
                let up = eval(&probe);
                probe.value_mut(id).data[c] = orig - eps;
                let down = eval(&probe);
                probe.value_mut(id).data[c] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = grad.map_or(0.0, |m| m.data[c]);
                let err = rel_err(a, numeric);
                report.checked += 1;
                if err > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = err;
                    report.worst = Some((store.get(id).name.clone(), c));
                }
            }
        }
    }
    report
}
