//! Central finite-difference gradient checking.

use super::{Grads, ParamStore, Tape, Var};

pub const STEP: f64 = 1e-5;
/// Denominator floor so near-zero gradients compare absolutely.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tolerance)
    }

    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamError> {
        self.params.iter().filter(|p| p.max_rel_error > self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Checks the tape gradients of the scalar built by `f` against central
/// differences, perturbing every entry of every parameter in `store`.
pub fn grad_check(store: &ParamStore, f: impl Fn(&mut Tape) -> Var, tolerance: f64) -> GradCheckReport {
    let loss = |s: &ParamStore| {
        let mut tape = Tape::new(s);
        let out = f(&mut tape);
        tape.value(out).item()
    };
    let grads = |s: &ParamStore| {
        let mut tape = Tape::new(s);
        let out = f(&mut tape);
        let mut g = Grads::new(s);
        tape.backward(out, &mut g);
        g
    };
    grad_check_with(store, loss, grads, tolerance)
}

/// As [`grad_check`] with separately supplied loss and gradient functions.
pub fn grad_check_with(
    store: &ParamStore,
    loss: impl Fn(&ParamStore) -> f64,
    grads: impl Fn(&ParamStore) -> Grads,
    tolerance: f64,
) -> GradCheckReport {
    let analytic = grads(store);
    let mut work = store.clone();
    let mut params = Vec::new();
    for (id, name, t) in store.iter() {
        let mut worst = (0.0f64, 0usize);
        for i in 0..t.len() {
            let orig = t.data()[i];
            work.get_mut(id).data_mut()[i] = orig + STEP;
            let up = loss(&work);
            work.get_mut(id).data_mut()[i] = orig - STEP;
            let down = loss(&work);
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            if err > worst.0 || err.is_nan() {
                worst = (if err.is_nan() { f64::INFINITY } else { err }, i);
            }
        }
        params.push(ParamError {
            name: name.to_string(),
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    GradCheckReport { params, tolerance }
}
