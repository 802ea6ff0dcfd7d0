#![allow(dead_code)]

use selectfusion::nn::{Bound, ParameterStore};
use selectfusion::tensor::{Tape, Var};

pub mod cases;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Entries whose AD and FD values differ by at most this pass outright.
pub const ABS_FLOOR: f64 = 1e-8;
/// Bound on `|ad - fd| / max(|ad|, |fd|)` for the remaining entries.
pub const MAX_REL_ERR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    pub worst: String,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel < MAX_REL_ERR
    }
}

fn loss_value(store: &ParameterStore, f: &dyn Fn(&mut Tape, &Bound) -> Var) -> f64 {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let l = f(&mut tape, &p);
    tape.value(l).data()[0]
}

/// Compares reverse-mode gradients of `f` with respect to every tensor in
/// `store` against central differences. At most `per_tensor` entries of each
/// tensor are probed (evenly spaced); `usize::MAX` probes all.
pub fn check(store: &ParameterStore, per_tensor: usize, f: &dyn Fn(&mut Tape, &Bound) -> Var) -> GradReport {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let l = f(&mut tape, &p);
    tape.backward(l).expect("scalar loss");
    let grads = store.gradients(&tape, &p);

    let mut report = GradReport {
        checked: 0,
        max_rel: 0.0,
        max_abs: 0.0,
        worst: String::new(),
    };
    let mut probe = store.clone();
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for (k, name) in names.iter().enumerate() {
        let id = store.id(name).unwrap();
        let n = store.get(id).value.numel();
        let stride = if per_tensor >= n { 1 } else { n.div_ceil(per_tensor) };
        for i in (0..n).step_by(stride) {
            let ad = grads[k].as_ref().map_or(0.0, |g| g.data()[i]);
            let orig = store.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let up = loss_value(&probe, f);
            probe.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let down = loss_value(&probe, f);
            probe.get_mut(id).value.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            report.checked += 1;
            let diff = (ad - fd).abs();
            report.max_abs = report.max_abs.max(diff);
            if diff <= ABS_FLOOR {
                continue;
            }
            let rel = diff / ad.abs().max(fd.abs());
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{name}[{i}]: ad {ad:e} fd {fd:e}");
            }
        }
    }
    report
}
