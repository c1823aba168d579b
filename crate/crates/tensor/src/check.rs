//! Central finite-difference verification of analytic gradients.

use crate::params::ParameterStore;

/// Compare the gradients currently held in `store` against central
/// finite differences of `loss_fn`, returning the maximum relative
/// error over all coordinates.
///
/// The caller runs one taped forward/backward pass first so that the
/// store's gradient slots hold the analytic gradient; `loss_fn` must
/// re-evaluate the same deterministic loss from store values alone and
/// must not touch gradient slots. Relative error uses denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(
    store: &mut ParameterStore,
    epsilon: f64,
    mut loss_fn: F,
) -> f64
where
    F: FnMut(&ParameterStore) -> f64,
{
    let mut max_rel = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.values(id).len() {
            let orig = store.values(id)[i];
            store.values_mut(id)[i] = orig + epsilon;
            let f_plus = loss_fn(store);
            store.values_mut(id)[i] = orig - epsilon;
            let f_minus = loss_fn(store);
            store.values_mut(id)[i] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * epsilon);
            let analytic = store.grad(id)[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((analytic - numeric).abs() / denom);
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tape;

    #[test]
    fn quadratic_loss_gradient_is_exact() {
        // loss = |p|^2, analytic gradient 2p
        let mut store = ParameterStore::new();
        let id = store.add_vector_values("p", vec![0.7, -1.3, 2.1]).unwrap();

        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss, &mut store).unwrap();
        for (g, v) in store.grad(id).iter().zip([0.7, -1.3, 2.1]) {
            assert!((g - 2.0 * v).abs() < 1e-15);
        }

        let err = finite_difference_check(&mut store, 1e-5, |s| {
            s.values(id).iter().map(|v| v * v).sum()
        });
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut store = ParameterStore::new();
        let id = store.add_vector_values("p", vec![1.0, 2.0]).unwrap();

        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let s = tape.sum(p).unwrap();
        let loss = tape.scale(s, 0.0).unwrap();
        tape.backward(loss, &mut store).unwrap();

        let err = finite_difference_check(&mut store, 1e-5, |_| 3.5);
        assert_eq!(err, 0.0);
    }
}
