//! Taped GRU cell.
//!
//! Gate convention, normative for every oracle in this workspace:
//!
//! ```text
//! z  = sigmoid(Wz·x + Uz·h + bz)
//! r  = sigmoid(Wr·x + Ur·h + br)
//! h~ = tanh(Wh·x + Uh·(r ⊙ h) + bh)
//! h' = z ⊙ h + (1 − z) ⊙ h~
//! ```

use crate::graph::{Tape, TensorError, TensorId};
use crate::params::{ParamError, ParamId, ParameterStore};
use rand::Rng;

/// Store handles for one GRU's nine parameters.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_update: ParamId,
    pub u_update: ParamId,
    pub b_update: ParamId,
    pub w_reset: ParamId,
    pub u_reset: ParamId,
    pub b_reset: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
    pub b_cand: ParamId,
}

impl GruParams {
    /// Register the nine parameters under `prefix.*`.
    pub fn create<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self, ParamError> {
        Ok(GruParams {
            w_update: store.add_matrix(&format!("{prefix}.w_update"), hidden_dim, input_dim, rng)?,
            u_update: store.add_matrix(&format!("{prefix}.u_update"), hidden_dim, hidden_dim, rng)?,
            b_update: store.add_vector_zeros(&format!("{prefix}.b_update"), hidden_dim)?,
            w_reset: store.add_matrix(&format!("{prefix}.w_reset"), hidden_dim, input_dim, rng)?,
            u_reset: store.add_matrix(&format!("{prefix}.u_reset"), hidden_dim, hidden_dim, rng)?,
            b_reset: store.add_vector_zeros(&format!("{prefix}.b_reset"), hidden_dim)?,
            w_cand: store.add_matrix(&format!("{prefix}.w_cand"), hidden_dim, input_dim, rng)?,
            u_cand: store.add_matrix(&format!("{prefix}.u_cand"), hidden_dim, hidden_dim, rng)?,
            b_cand: store.add_vector_zeros(&format!("{prefix}.b_cand"), hidden_dim)?,
        })
    }
}

/// Tape leaves for the nine GRU parameters, created once per tape and
/// shared by every cell application recorded on it.
#[derive(Clone, Copy, Debug)]
pub struct GruLeaves {
    pub w_update: TensorId,
    pub u_update: TensorId,
    pub b_update: TensorId,
    pub w_reset: TensorId,
    pub u_reset: TensorId,
    pub b_reset: TensorId,
    pub w_cand: TensorId,
    pub u_cand: TensorId,
    pub b_cand: TensorId,
}

impl GruLeaves {
    pub fn on_tape(tape: &mut Tape, store: &ParameterStore, p: &GruParams) -> Self {
        GruLeaves {
            w_update: tape.param(store, p.w_update),
            u_update: tape.param(store, p.u_update),
            b_update: tape.param(store, p.b_update),
            w_reset: tape.param(store, p.w_reset),
            u_reset: tape.param(store, p.u_reset),
            b_reset: tape.param(store, p.b_reset),
            w_cand: tape.param(store, p.w_cand),
            u_cand: tape.param(store, p.u_cand),
            b_cand: tape.param(store, p.b_cand),
        }
    }
}

/// One recorded GRU step: returns the next hidden state.
pub fn gru_cell(
    tape: &mut Tape,
    x: TensorId,
    h: TensorId,
    p: &GruLeaves,
) -> Result<TensorId, TensorError> {
    let gate = |tape: &mut Tape, w: TensorId, u: TensorId, b: TensorId, hin: TensorId| {
        let wx = tape.matvec(w, x)?;
        let uh = tape.matvec(u, hin)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };

    let z_pre = gate(tape, p.w_update, p.u_update, p.b_update, h)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, p.w_reset, p.u_reset, p.b_reset, h)?;
    let r = tape.sigmoid(r_pre)?;

    let rh = tape.mul(r, h)?;
    let cand_pre = gate(tape, p.w_cand, p.u_cand, p.b_cand, rh)?;
    let cand = tape.tanh(cand_pre)?;

    let zh = tape.mul(z, h)?;
    let one_minus_z = tape.one_minus(z)?;
    let zc = tape.mul(one_minus_z, cand)?;
    tape.add(zh, zc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_gru(store: &mut ParameterStore, input_dim: usize, hidden_dim: usize) -> GruParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GruParams::create(store, "gru", input_dim, hidden_dim, &mut rng).unwrap();
        for id in store.ids() {
            store.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    #[test]
    fn zero_parameters_halve_the_hidden_state() {
        // z = 0.5 and the candidate is 0, so h' = h / 2 exactly.
        let mut store = ParameterStore::new();
        let p = zero_gru(&mut store, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let x_vals: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let h_vals: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = tape.vector(&x_vals);
            let h = tape.vector(&h_vals);
            let leaves = GruLeaves::on_tape(&mut tape, &store, &p);
            let out = gru_cell(&mut tape, x, h, &leaves).unwrap();
            for (o, hv) in tape.value(out).iter().zip(&h_vals) {
                assert_eq!(*o, hv / 2.0);
            }
        }
    }

    #[test]
    fn zero_input_zero_state_stays_zero() {
        let mut store = ParameterStore::new();
        let p = zero_gru(&mut store, 2, 2);
        let mut tape = Tape::new();
        let x = tape.vector(&[0.0, 0.0]);
        let h = tape.vector(&[0.0, 0.0]);
        let leaves = GruLeaves::on_tape(&mut tape, &store, &p);
        let out = gru_cell(&mut tape, x, h, &leaves).unwrap();
        assert_eq!(tape.value(out), &[0.0, 0.0]);
    }

    #[test]
    fn random_instance_matches_straight_line_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParameterStore::new();
        let p = GruParams::create(&mut store, "gru", 4, 4, &mut rng).unwrap();
        // give the biases nonzero values too
        for name in ["gru.b_update", "gru.b_reset", "gru.b_cand"] {
            let id = store.lookup(name).unwrap();
            store.values_mut(id).iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }

        let x_vals: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h_vals: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let x = tape.vector(&x_vals);
        let h = tape.vector(&h_vals);
        let leaves = GruLeaves::on_tape(&mut tape, &store, &p);
        let out = gru_cell(&mut tape, x, h, &leaves).unwrap();

        // Straight-line re-evaluation of the three-gate formula, no tape.
        let matvec = |name: &str, v: &[f64]| -> Vec<f64> {
            let id = store.lookup(name).unwrap();
            let m = store.values(id);
            let cols = v.len();
            (0..4).map(|r| (0..cols).map(|c| m[r * cols + c] * v[c]).sum()).collect()
        };
        let vec_of = |name: &str| store.values(store.lookup(name).unwrap()).to_vec();
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());

        let mut expected = vec![0.0; 4];
        let wzx = matvec("gru.w_update", &x_vals);
        let uzh = matvec("gru.u_update", &h_vals);
        let bz = vec_of("gru.b_update");
        let wrx = matvec("gru.w_reset", &x_vals);
        let urh = matvec("gru.u_reset", &h_vals);
        let br = vec_of("gru.b_reset");
        let z: Vec<f64> = (0..4).map(|i| sigmoid(wzx[i] + uzh[i] + bz[i])).collect();
        let r: Vec<f64> = (0..4).map(|i| sigmoid(wrx[i] + urh[i] + br[i])).collect();
        let rh: Vec<f64> = (0..4).map(|i| r[i] * h_vals[i]).collect();
        let whx = matvec("gru.w_cand", &x_vals);
        let uhrh = matvec("gru.u_cand", &rh);
        let bh = vec_of("gru.b_cand");
        for i in 0..4 {
            let cand = (whx[i] + uhrh[i] + bh[i]).tanh();
            expected[i] = z[i] * h_vals[i] + (1.0 - z[i]) * cand;
        }

        for (got, want) in tape.value(out).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-14, "got {got}, want {want}");
        }
    }
}
