//! Central finite-difference checks of analytic parameter gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;

pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub entries: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, NORM_FLOOR)`.
    /// The floor keeps structurally zero gradients (e.g. attention key
    /// biases, which softmax cancels) from turning rounding noise into 1.0.
    pub relative_error: f64,
    pub analytic_norm: f64,
}

/// Compares backpropagated gradients of `loss` against central differences
/// with step `eps` for every scalar of every parameter.
pub fn check_parameter_gradients<F>(ps: &mut ParamStore, eps: f64, loss: F) -> Vec<GroupReport>
where
    F: Fn(&ParamStore) -> (Graph, Var),
{
    ps.zero_grad();
    let (g, l) = loss(ps);
    let grads = g.backward(l);
    g.accumulate(&grads, ps, 1.0);
    let ids: Vec<_> = ps.ids().collect();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = ps.grad(id).clone();
        let mut numeric = vec![0.0; analytic.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = ps.value(id).data()[k];
            ps.value_mut(id).data_mut()[k] = orig + eps;
            let (gp, lp) = loss(ps);
            let plus = gp.value(lp).item();
            ps.value_mut(id).data_mut()[k] = orig - eps;
            let (gm, lm) = loss(ps);
            let minus = gm.value(lm).item();
            ps.value_mut(id).data_mut()[k] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let an = analytic.norm();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = (an + nn).max(NORM_FLOOR);
        reports.push(GroupReport {
            name: ps.name(id).to_string(),
            entries: analytic.len(),
            relative_error: diff / denom,
            analytic_norm: an,
        });
    }
    ps.zero_grad();
    reports
}

pub fn worst(reports: &[GroupReport]) -> Option<&GroupReport> {
    reports
        .iter()
        .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
}
