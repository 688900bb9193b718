use super::graph::{Graph, Var};
use super::params::ParamSet;
use crate::error::{Error, Result};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of comparing reverse-mode gradients with finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub n_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", v.shape(), &[]));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares the tape gradient of the scalar `f` with central differences over
/// every entry of every parameter.
pub fn grad_check<F>(f: F, params: &ParamSet, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    if !(tol > 0.0) {
        return Err(Error::Param(format!("tolerance must be positive, got {tol}")));
    }
    eval(&f, params)?;
    let analytic = {
        let mut g = Graph::new();
        let out = f(&mut g, params)?;
        g.backward(out)?.param_grads(params)
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        n_checked: 0,
        tol,
    };
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = params.value(id).len();
        for i in 0..n {
            let orig = params.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let fp = eval(&f, &work)?;
            work.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let fm = eval(&f, &work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let err = relative_error(analytic[id.index()].data()[i], numeric);
            report.n_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                if err >= report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some((params.get(id).name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}
