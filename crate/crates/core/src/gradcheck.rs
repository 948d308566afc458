//! Central-difference verification of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|g_tape − g_fd| / max(1, |g_tape|, |g_fd|)` over all scalars.
    pub max_rel_err: f64,
    /// Parameter path (`name[index]`) of the worst scalar.
    pub worst: String,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Compares the tape gradient of `loss` against `(f(θ+h) − f(θ−h)) / 2h` for
/// every scalar in `store`.
///
/// `loss` builds the forward pass on the tape it is given (already bound to
/// `store`) and returns a scalar. It must be deterministic.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, tolerance: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    grad_check_subset(store, None, h, tolerance, &mut loss)
}

/// Like [`grad_check`], restricted to the listed parameters when `only` is set.
pub fn grad_check_subset<F>(
    store: &mut ParamStore,
    only: Option<&[ParamId]>,
    h: f64,
    tolerance: f64,
    loss: &mut F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::invalid(alloc::format!(
            "finite-difference step {h} outside [1e-7, 1e-4]"
        )));
    }
    let mut tape = Tape::with_params(store);
    let out = loss(&mut tape)?;
    let base = tape.value(out).data()[0];
    if !base.is_finite() {
        return Err(Error::NonFinite {
            what: String::from("loss at unperturbed parameters"),
        });
    }
    tape.backward(out)?;
    let grads: Vec<Vec<f64>> = store.ids().map(|id| tape.grad_or_zeros(tape.param(id))).collect();
    drop(tape);

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        tolerance,
    };
    for id in ids {
        for idx in 0..store.get(id).numel() {
            let g_tape = grads[id.index()][idx];
            if !g_tape.is_finite() {
                return Err(Error::NonFinite {
                    what: alloc::format!("tape gradient of {}", param_path(store, id, idx)),
                });
            }
            let orig = store.get(id).data()[idx];
            store.get_mut(id).data_mut()[idx] = orig + h;
            let plus = eval(store, loss)?;
            store.get_mut(id).data_mut()[idx] = orig - h;
            let minus = eval(store, loss)?;
            store.get_mut(id).data_mut()[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    what: alloc::format!("loss when perturbing {}", param_path(store, id, idx)),
                });
            }
            let g_fd = (plus - minus) / (2.0 * h);
            let err = relative_error(g_tape, g_fd);
            if err > report.max_rel_err || report.checked == 0 {
                report.max_rel_err = err;
                report.worst = param_path(store, id, idx);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn param_path(store: &ParamStore, id: ParamId, idx: usize) -> String {
    alloc::format!("{}[{}]", store.name(id), idx)
}

fn eval<F>(store: &ParamStore, loss: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let out = loss(&mut tape)?;
    Ok(tape.value(out).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_passes() {
        let mut store = ParamStore::new();
        let theta = store.add("theta", Tensor::vector(alloc::vec![1.0, 2.0]));
        let rep = grad_check(&mut store, 1e-5, 1e-9, |t| {
            let x = t.param(theta);
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert_eq!(rep.checked, 2);
    }

    #[test]
    fn step_out_of_range_rejected() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(0.0));
        let r = grad_check(&mut store, 1e-2, 1e-6, |t| {
            let x = t.param_vars()[0];
            Ok(t.sum(x))
        });
        assert!(r.is_err());
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(0.0));
        let err = grad_check(&mut store, 1e-5, 1e-6, |t| {
            let x = t.param(p);
            let v = t.value(x).data()[0];
            let c = t.constant(Tensor::scalar(if v > 0.0 { f64::NAN } else { 1.0 }));
            let y = t.mul(x, c)?;
            Ok(t.sum(y))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref what } if what.contains("p[0]")));
    }
}
