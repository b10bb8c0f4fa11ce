//! Central finite-difference verification of tape gradients.

use super::{Result, Tape, Tensor, Var};
use crate::params::{Binder, ParamStore};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on an absolute scale instead of amplifying
/// round-off.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input (or parameter) holding the worst coordinate.
    pub worst: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub(crate) fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            coord: 0,
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
        }
    }

    pub(crate) fn observe(&mut self, name: &str, coord: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.coords_checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = err;
            self.worst = name.to_string();
            self.coord = coord;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of a scalar closure against central
/// differences in every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut report = GradCheckReport::empty();
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for c in 0..probe[i].len() {
            let orig = probe[i].data()[c];
            probe[i].data_mut()[c] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[c] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[c] = orig;
            report.observe(
                &format!("input{i}"),
                c,
                grad.data()[c],
                (up - down) / (2.0 * eps),
            );
        }
    }
    Ok(report)
}

/// Same check over named parameters of a store. `f` builds the scalar loss
/// from a [`Binder`]; only parameters marked trainable are checked, and at
/// most `max_coords` coordinates per parameter (evenly strided) when given.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    eps: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &mut Binder) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let mut bind = Binder::frozen(s);
        let out = f(&mut tape, &mut bind)?;
        Ok(tape.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let mut bind = Binder::new(store);
    let out = f(&mut tape, &mut bind)?;
    tape.backward(out)?;
    let grads = bind.grads(&tape);

    let mut report = GradCheckReport::empty();
    let mut probe = store.clone();
    for name in store.trainable_names() {
        let n = store.get(&name)?.len();
        let stride = max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        for c in (0..n).step_by(stride) {
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[c]);
            let orig = probe.get(&name)?.data()[c];
            probe.get_mut(&name)?.data_mut()[c] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[c] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[c] = orig;
            report.observe(&name, c, analytic, (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::new(vec![3], vec![0.5, -2.0, 1.25]).unwrap();
        let x = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let r = grad_check(
            |t, v| {
                let c = t.constant(w.clone());
                let p = t.mul(v[0], c)?;
                t.sum(p)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x·stop_grad(x) is x, not 2x: grad_check must flag it.
        let x = Tensor::new(vec![2], vec![0.7, -0.3]).unwrap();
        let r = grad_check(
            |t, v| {
                let frozen = t.constant(t.value(v[0]).clone());
                let p = t.mul(v[0], frozen)?;
                t.sum(p)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4, "{r:?}");
    }
}
