//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records one forward computation against a borrowed
//! [`ParamStore`]; [`Tape::backward`] accumulates parameter gradients into a
//! [`Grads`]. Tapes are built fresh for every step and never reused.

pub mod checkpoint;
mod gat;
mod grad_check;
mod params;
mod tape;
mod tensor;

use rand::Rng;

pub use gat::{gat_forward, GatHead, GatOutput, GatParams};
pub use grad_check::{grad_check, grad_check_with, GradCheckReport, ParamError};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{Axis, OpResult, Tape, Var};
pub use tensor::{ShapeMismatch, Tensor};

/// Weight matrix and bias of an affine map `out x in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Uniform initialization in `±1/sqrt(input)`.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let k = 1.0 / (input.max(1) as f64).sqrt();
        Self {
            w: store.add(format!("{name}.w"), Tensor::uniform(output, input, k, rng)),
            b: store.add(format!("{name}.b"), Tensor::uniform(output, 1, k, rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> OpResult {
        tape.linear(self.w, self.b, x)
    }
}

/// Gated recurrent unit with gates stacked as `[reset; update; new]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: store.add(format!("{name}.w_ih"), Tensor::uniform(3 * hidden, input, k, rng)),
            w_hh: store.add(format!("{name}.w_hh"), Tensor::uniform(3 * hidden, hidden, k, rng)),
            b_ih: store.add(format!("{name}.b_ih"), Tensor::uniform(3 * hidden, 1, k, rng)),
            b_hh: store.add(format!("{name}.b_hh"), Tensor::uniform(3 * hidden, 1, k, rng)),
            hidden,
        }
    }

    /// `W_ih · xs + b_ih` for a whole sequence of input columns.
    pub fn project_inputs(&self, tape: &mut Tape, xs: Var) -> OpResult {
        tape.linear(self.w_ih, self.b_ih, xs)
    }

    /// One step from a projected input column (`3h x 1`).
    pub fn step_projected(&self, tape: &mut Tape, xp: Var, h: Var) -> OpResult {
        let n = self.hidden;
        let hp = tape.linear(self.w_hh, self.b_hh, h)?;
        let xr = tape.slice(xp, Axis::Rows, 0, n)?;
        let xz = tape.slice(xp, Axis::Rows, n, n)?;
        let xn = tape.slice(xp, Axis::Rows, 2 * n, n)?;
        let hr = tape.slice(hp, Axis::Rows, 0, n)?;
        let hz = tape.slice(hp, Axis::Rows, n, n)?;
        let hn = tape.slice(hp, Axis::Rows, 2 * n, n)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let rn = tape.mul(r, hn)?;
        let nn = tape.add(xn, rn)?;
        let nn = tape.tanh(nn);
        let diff = tape.sub(h, nn)?;
        let zd = tape.mul(z, diff)?;
        tape.add(nn, zd)
    }

    /// `h' = (1 - z) ∘ n + z ∘ h`.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> OpResult {
        let xp = self.project_inputs(tape, x)?;
        self.step_projected(tape, xp, h)
    }

    /// Runs over the columns of `xs` (`input x T`) from `h0`; returns the
    /// final state. An empty sequence returns `h0`.
    pub fn run(&self, tape: &mut Tape, xs: Var, h0: Var) -> OpResult {
        let steps = tape.shape(xs).1;
        if steps == 0 {
            return Ok(h0);
        }
        let proj = self.project_inputs(tape, xs)?;
        let mut h = h0;
        for t in 0..steps {
            let xp = tape.slice(proj, Axis::Cols, t, 1)?;
            h = self.step_projected(tape, xp, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_closed_forms() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let z = tape.constant(Tensor::zeros(4, 1));
        let s = tape.softmax(z, Axis::Rows);
        assert!(tape.value(s).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let x = tape.constant(Tensor::column(vec![0.0, 3f64.ln()]));
        let s = tape.softmax(x, Axis::Rows);
        let p = tape.value(s).data();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn masked_entries_are_exactly_zero() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::column(vec![1.0, 2.0, 3.0]));
        let s = tape.masked_softmax(x, vec![true, false, true], Axis::Rows).unwrap();
        let p = tape.value(s).data().to_vec();
        assert_eq!(p[1], 0.0);
        assert!((p[0] + p[2] - 1.0).abs() < 1e-12);
        let l = tape.log_softmax(x, Some(vec![true, false, true]), Axis::Rows).unwrap();
        assert!((tape.value(l).data()[0].exp() - p[0]).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!((err.left, err.right), ((2, 3), (2, 3)));
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn dropout_replays_with_seed() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::filled(8, 8, 1.0));
        let a = tape.dropout(x, 0.5, 3);
        let b = tape.dropout(x, 0.5, 3);
        assert_eq!(tape.value(a), tape.value(b));
        assert_eq!(tape.dropout(x, 0.0, 3), x);
    }

    #[test]
    fn gru_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "g", 3, 2, &mut rng);
        let x = Tensor::column(vec![0.3, -0.2, 0.9]);
        let h = Tensor::column(vec![0.1, -0.4]);
        let mut tape = Tape::new(&store);
        let (xv, hv) = (tape.constant(x.clone()), tape.constant(h.clone()));
        let out = gru.step(&mut tape, xv, hv).unwrap();
        let got = tape.value(out).clone();

        let wi = store.get(gru.w_ih).matmul(&x).unwrap();
        let wh = store.get(gru.w_hh).matmul(&h).unwrap();
        let (bi, bh) = (store.get(gru.b_ih), store.get(gru.b_hh));
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..2 {
            let g = |k: usize| (wi.data()[k * 2 + j] + bi.data()[k * 2 + j], wh.data()[k * 2 + j] + bh.data()[k * 2 + j]);
            let (ir, hr) = g(0);
            let (iz, hz) = g(1);
            let (inn, hn) = g(2);
            let r = sig(ir + hr);
            let z = sig(iz + hz);
            let n = (inn + r * hn).tanh();
            let want = (1.0 - z) * n + z * h.data()[j];
            assert!((got.data()[j] - want).abs() < 1e-14);
        }
    }
}
