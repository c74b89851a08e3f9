//! Central finite-difference verification of tape gradients (64-bit).

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Graph, Mode, OpKind, Var};

/// Step used for central differences.
pub const EPS: f64 = 1e-3;
/// Per-op tolerance on the relative error.
pub const OP_TOL: f64 = 1e-4;
/// End-to-end tolerance on the relative error.
pub const MODEL_TOL: f64 = 1e-3;
/// Magnitude below which a gradient is compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Parameter and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Options for one check run.
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub tolerance: f64,
    pub eps: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Backward fault injected into the analytic pass (harness self-test).
    pub fault: Option<(OpKind, f64)>,
    /// Check at most this many elements per parameter (evenly strided).
    pub max_per_param: Option<usize>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            tolerance: OP_TOL,
            eps: EPS,
            mode: Mode::Eval,
            seed: 0,
            fault: None,
            max_per_param: None,
        }
    }
}

/// Compares tape gradients of the scalar built by `loss` against central
/// differences over every non-frozen parameter in `store`.
pub fn check<F>(name: &str, store: &ParamStore<f64>, opts: &CheckOptions, loss: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store, opts.mode, opts.seed);
        if let Some((kind, k)) = opts.fault {
            g.inject_backward_fault(kind, k);
        }
        let l = loss(&mut g)?;
        g.backward(l)?;
        g.param_grads()
    };

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s, opts.mode, opts.seed);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };

    let mut work = store.clone();
    let mut report = CheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        tolerance: opts.tolerance,
    };
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(n, _)| n.to_string())
        .collect();
    for pname in names {
        let n = store.get(&pname).expect("listed").value.len();
        let stride = opts.max_per_param.map_or(1, |m| n.div_ceil(m).max(1));
        let grad = analytic.get(&pname);
        for i in (0..n).step_by(stride) {
            let orig = work.get(&pname).expect("listed").value.data()[i];
            work.get_mut(&pname).expect("listed").value.data_mut()[i] = orig + opts.eps;
            let up = eval(&work)?;
            work.get_mut(&pname).expect("listed").value.data_mut()[i] = orig - opts.eps;
            let down = eval(&work)?;
            work.get_mut(&pname).expect("listed").value.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * opts.eps);
            let a = grad.map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((pname.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn detects_correct_and_faulty_rules() {
        let s = store(&[("x", Tensor::from_rows(&[&[0.3, -0.7, 1.1]]))]);
        let f = |g: &mut Graph<'_, f64>| {
            let x = g.param("x")?;
            let t = g.tanh(x)?;
            g.sum(t)
        };
        let ok = check("tanh", &s, &CheckOptions::default(), f).unwrap();
        assert!(ok.passed(), "{ok:?}");

        let opts = CheckOptions {
            fault: Some((OpKind::Tanh, 1.5)),
            ..CheckOptions::default()
        };
        let bad = check("tanh", &s, &opts, f).unwrap();
        assert!(!bad.passed());
        assert!(bad.max_rel_err > 0.3);
        assert_eq!(bad.worst.as_ref().unwrap().0, "x");
    }
}
