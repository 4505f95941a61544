//! Central finite-difference checks of tape gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// Gradients smaller than this are compared absolutely rather than
/// relatively, so FD round-off on near-zero entries does not dominate.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one check.
///
/// `max_rel` is the largest per-entry relative error. `norm_rel` compares
/// whole gradient vectors, `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`; it is insensitive
/// to FD truncation error on entries that are tiny relative to the rest.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub norm_rel: f64,
}

#[derive(Default)]
struct Acc {
    report: FdReport,
    diff2: f64,
    a2: f64,
    n2: f64,
}

impl Acc {
    fn push(&mut self, analytic: f64, numeric: f64) {
        self.report.checked += 1;
        let e = rel_error(analytic, numeric);
        if e > self.report.max_rel || e.is_nan() {
            self.report.max_rel = e;
        }
        self.diff2 += (analytic - numeric).powi(2);
        self.a2 += analytic * analytic;
        self.n2 += numeric * numeric;
    }

    fn finish(mut self) -> FdReport {
        let scale = self.a2.max(self.n2).sqrt();
        self.report.norm_rel = if scale > 0.0 { self.diff2.sqrt() / scale } else { self.diff2.sqrt() };
        self.report
    }
}

impl FdReport {
    pub fn merge(self, other: FdReport) -> FdReport {
        FdReport {
            checked: self.checked + other.checked,
            max_rel: self.max_rel.max(other.max_rel),
            norm_rel: self.norm_rel.max(other.norm_rel),
        }
    }
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    if g.shape(v) != (1, 1) {
        return Err(Error::shape("gradcheck", "1 x 1 output", format!("{:?}", g.shape(v))));
    }
    Ok(g.scalar(v))
}

/// Checks `d f / d inputs` for every entry of every input matrix.
pub fn check_inputs(
    inputs: &[Matrix],
    step: f64,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<FdReport> {
    check_inputs_with(inputs, step, f, |_| {})
}

/// Like [`check_inputs`], but `corrupt` may alter the analytic gradients
/// before comparison (a negative control for the checker itself).
pub fn check_inputs_with(
    inputs: &[Matrix],
    step: f64,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    corrupt: impl Fn(&mut [Matrix]),
) -> Result<FdReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.variable(m.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar(&g, out)?;
    let grads = g.backward(out);
    let mut analytic: Vec<Matrix> = vars
        .iter()
        .zip(inputs)
        .map(|(v, m)| grads.wrt(*v).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
        .collect();
    corrupt(&mut analytic);
    let eval = |which: usize, k: usize, delta: f64| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let mut m = m.clone();
                if j == which {
                    m.as_mut_slice()[k] += delta;
                }
                g.constant(m)
            })
            .collect();
        let o = f(&mut g, &vars)?;
        scalar(&g, o)
    };
    let mut acc = Acc::default();
    for (i, m) in inputs.iter().enumerate() {
        for k in 0..m.len() {
            let numeric = (eval(i, k, step)? - eval(i, k, -step)?) / (2.0 * step);
            acc.push(analytic[i].as_slice()[k], numeric);
        }
    }
    Ok(acc.finish())
}

/// Checks the gradient of `f` w.r.t. the listed entries of the flat
/// parameter vector.
pub fn check_params(
    store: &ParamStore,
    indices: &[usize],
    step: f64,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<FdReport> {
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar(&g, out)?;
    let grads = g.backward(out);
    let mut flat = vec![0.0; store.len()];
    grads.accumulate_params(&g, store, &mut flat);
    let mut probe = store.clone();
    let mut acc = Acc::default();
    for &i in indices {
        let orig = probe.flat()[i];
        let mut at = |x: f64| -> Result<f64> {
            probe.flat_mut()[i] = x;
            let mut g = Graph::new();
            let o = f(&mut g, &probe)?;
            scalar(&g, o)
        };
        let numeric = (at(orig + step)? - at(orig - step)?) / (2.0 * step);
        probe.flat_mut()[i] = orig;
        acc.push(flat[i], numeric);
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_corruption_fails() {
        let x = Matrix::from_rows(&[[0.3, -1.2], [2.0, 0.5]]);
        let f = |g: &mut Graph, v: &[Var]| {
            let s = g.square(v[0]);
            Ok(g.sum(s))
        };
        let ok = check_inputs(std::slice::from_ref(&x), 1e-5, f).unwrap();
        assert_eq!(ok.checked, 4);
        assert!(ok.max_rel < 1e-8);
        let bad = check_inputs_with(&[x], 1e-5, f, |a| a[0].as_mut_slice()[1] *= 1.01).unwrap();
        assert!(bad.max_rel > 5e-3);
    }
}
