//! Gradient audits: every differentiable op is exercised inside random
//! compositions and compared against central finite differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgrec_tensor::{
    finite_difference_check, gru_cell, GruLeaves, GruParams, ParameterStore, Tape, TensorId,
};

/// A three-layer composition touching matvec, concat, slices, tanh,
/// sigmoid, softmax, attention primitives, cosine similarity and the
/// log-domain reductions. Returns the scalar loss.
fn composite_loss(tape: &mut Tape, store: &ParameterStore) -> TensorId {
    let w1 = tape.param(store, store.lookup("w1").unwrap());
    let w2 = tape.param(store, store.lookup("w2").unwrap());
    let b = tape.param(store, store.lookup("b").unwrap());
    let q = tape.param(store, store.lookup("q").unwrap());

    let x = tape.vector(&[0.3, -0.7, 1.1, 0.2]);
    let h1_pre = tape.matvec(w1, x).unwrap();
    let h1_b = tape.add(h1_pre, b).unwrap();
    let h1 = tape.tanh(h1_b).unwrap();
    let h2_pre = tape.matvec(w2, h1).unwrap();
    let h2 = tape.sigmoid(h2_pre).unwrap();

    // attention-style mixing of three derived rows
    let r1 = tape.slice(h2, 0, 4).unwrap();
    let scaled = tape.scale(h2, -0.5).unwrap();
    let r2 = tape.slice(scaled, 0, 4).unwrap();
    let prod = tape.mul(h2, h2).unwrap();
    let r3 = tape.slice(prod, 0, 4).unwrap();
    let keys = tape.stack_rows(&[r1, r2, r3]).unwrap();
    let scores = tape.head_scores(keys, q, 2).unwrap();
    let weights = tape.softmax_cols(scores).unwrap();
    let mixed = tape.head_mix(weights, keys, 2).unwrap();

    let cos = tape.cosine_sim(mixed, h1).unwrap();
    let ip = tape.dot(mixed, r1).unwrap();
    let ls = tape.log_sigmoid(ip).unwrap();
    let cat = tape.concat(&[cos, ls, ip]).unwrap();
    let sm = tape.softmax(cat).unwrap();
    let lse = tape.log_sum_exp(sm).unwrap();
    let s = tape.sum(mixed).unwrap();
    let parts = tape.concat(&[lse, s, cos]).unwrap();
    tape.sum(parts).unwrap()
}

fn composite_store(seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    store.add_matrix("w1", 4, 4, &mut rng).unwrap();
    store.add_matrix("w2", 4, 4, &mut rng).unwrap();
    store.add_vector_values("b", (0..4).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
    store.add_vector_values("q", (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    store
}

#[test]
fn composite_gradients_match_finite_differences() {
    for seed in [1u64, 2, 3, 4, 5] {
        let mut store = composite_store(seed);
        let mut tape = Tape::new();
        let loss = composite_loss(&mut tape, &store);
        tape.backward(loss, &mut store).unwrap();

        let err = finite_difference_check(&mut store, 1e-5, |s| {
            let mut t = Tape::new();
            let l = composite_loss(&mut t, s);
            t.scalar_value(l)
        });
        assert!(err < 1e-7, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn gru_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParameterStore::new();
    let p = GruParams::create(&mut store, "gru", 4, 4, &mut rng).unwrap();

    let x_vals: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h_vals: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

    let run = |tape: &mut Tape, store: &ParameterStore| {
        let x = tape.vector(&x_vals);
        let h = tape.vector(&h_vals);
        let leaves = GruLeaves::on_tape(tape, store, &p);
        let h2 = gru_cell(tape, x, h, &leaves).unwrap();
        let h3 = gru_cell(tape, h2.to_owned(), h2, &leaves).unwrap(); // reuse as input twice
        let sq = tape.mul(h3, h3).unwrap();
        tape.sum(sq).unwrap()
    };

    let mut tape = Tape::new();
    let loss = run(&mut tape, &store);
    tape.backward(loss, &mut store).unwrap();

    let err = finite_difference_check(&mut store, 1e-5, |s| {
        let mut t = Tape::new();
        let l = run(&mut t, s);
        t.scalar_value(l)
    });
    assert!(err < 1e-7, "max relative error {err}");
}

#[test]
fn gradients_are_linear_in_the_loss() {
    // grad(a*L1 + b*L2) = a*grad(L1) + b*grad(L2)
    let (a, b) = (0.37, -2.4);
    let grads_of = |mode: u8| -> Vec<f64> {
        let mut store = composite_store(77);
        let mut tape = Tape::new();
        let l1 = composite_loss(&mut tape, &store);
        let sq = {
            let w1 = tape.param(&store, store.lookup("w1").unwrap());
            let m = tape.mul(w1, w1).unwrap();
            tape.sum(m).unwrap()
        };
        let loss = match mode {
            0 => tape.scale(l1, a).unwrap(),
            1 => tape.scale(sq, b).unwrap(),
            _ => {
                let s1 = tape.scale(l1, a).unwrap();
                let s2 = tape.scale(sq, b).unwrap();
                tape.add(s1, s2).unwrap()
            }
        };
        tape.backward(loss, &mut store).unwrap();
        let mut out = Vec::new();
        for id in store.ids() {
            out.extend_from_slice(store.grad(id));
        }
        out
    };

    let g1 = grads_of(0);
    let g2 = grads_of(1);
    let g12 = grads_of(2);
    for ((x, y), z) in g1.iter().zip(&g2).zip(&g12) {
        let want = x + y;
        let denom = want.abs().max(z.abs()).max(1e-10);
        assert!((want - z).abs() / denom < 1e-10, "linearity violated: {want} vs {z}");
    }
}

#[test]
fn unreached_parameters_keep_zero_gradient() {
    let mut store = composite_store(5);
    store.add_vector_values("orphan", vec![1.0, 2.0]).unwrap();
    let orphan = store.lookup("orphan").unwrap();

    let mut tape = Tape::new();
    let loss = composite_loss(&mut tape, &store);
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(orphan), &[0.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_sums_to_one_and_stays_in_open_interval(
        vals in proptest::collection::vec(-50.0f64..50.0, 1..12)
    ) {
        let mut tape = Tape::new();
        let v = tape.vector(&vals);
        let s = tape.softmax(v).unwrap();
        let total: f64 = tape.value(s).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for &x in tape.value(s) {
            prop_assert!(x > 0.0 && x < 1.0 + 1e-12);
        }
    }

    #[test]
    fn cosine_similarity_is_bounded(
        a in proptest::collection::vec(-100.0f64..100.0, 3),
        b in proptest::collection::vec(-100.0f64..100.0, 3),
    ) {
        let mut tape = Tape::new();
        let ta = tape.vector(&a);
        let tb = tape.vector(&b);
        let c = tape.cosine_sim(ta, tb).unwrap();
        prop_assert!(tape.scalar_value(c).abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn gru_zero_parameter_halving_holds_exactly(
        h in proptest::collection::vec(-5.0f64..5.0, 4),
        x in proptest::collection::vec(-5.0f64..5.0, 3),
    ) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GruParams::create(&mut store, "gru", 3, 4, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let tx = tape.vector(&x);
        let th = tape.vector(&h);
        let leaves = GruLeaves::on_tape(&mut tape, &store, &p);
        let out = gru_cell(&mut tape, tx, th, &leaves).unwrap();
        for (o, hv) in tape.value(out).iter().zip(&h) {
            prop_assert_eq!(*o, hv / 2.0);
        }
    }

    #[test]
    fn finite_inputs_never_produce_non_finite_outputs(
        vals in proptest::collection::vec(-300.0f64..300.0, 4),
        scale in -100.0f64..100.0,
    ) {
        let mut tape = Tape::new();
        let v = tape.vector(&vals);
        let s = tape.scale(v, scale).unwrap();
        let sm = tape.softmax(s).unwrap();
        let t = tape.tanh(s).unwrap();
        let sg = tape.sigmoid(s).unwrap();
        let lse = tape.log_sum_exp(s).unwrap();
        let d = tape.dot(t, sg).unwrap();
        let lsig = tape.log_sigmoid(d).unwrap();
        let c = tape.cosine_sim(sm, t).unwrap();
        for id in [sm, t, sg] {
            prop_assert!(tape.value(id).iter().all(|x| x.is_finite()));
        }
        for id in [lse, d, lsig, c] {
            prop_assert!(tape.scalar_value(id).is_finite());
        }
    }
}
