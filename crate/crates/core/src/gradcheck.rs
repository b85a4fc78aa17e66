//! Central finite-difference comparison against backprop.

use crate::autograd::{Graph, NodeId};
use crate::params::{ParamId, ParamMask, ParamStore};

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, 0 when both vanish.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Checks every parameter selected by `mask`. `build` must return a 1×1 node
/// and be a deterministic function of the store.
pub fn check_gradients(
    store: &mut ParamStore,
    mask: &ParamMask,
    step: f64,
    build: impl Fn(&mut Graph) -> NodeId,
) -> Vec<TensorCheck> {
    let analytic = {
        let mut g = Graph::new(store, mask.clone());
        let l = build(&mut g);
        g.backward(l)
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::inference(store);
        let l = build(&mut g);
        g.value(l).data()[0]
    };
    let ids: Vec<ParamId> = mask.selected().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).len();
        let mut numeric = vec![0.0; n];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[e];
            store.get_mut(id).data_mut()[e] = orig + step;
            let plus = eval(store);
            store.get_mut(id).data_mut()[e] = orig - step;
            let minus = eval(store);
            store.get_mut(id).data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let ana: Vec<f64> = analytic.get(id).map_or(vec![0.0; n], |m| m.data().to_vec());
        let diff = ana.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let an = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = an.max(nn);
        let rel_error = if denom == 0.0 { 0.0 } else { diff / denom };
        out.push(TensorCheck { name: store.name(id).to_string(), rel_error, analytic_norm: an, numeric_norm: nn });
    }
    out
}
