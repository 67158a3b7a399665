//! Central finite-difference verification of tape gradients.

use std::fmt;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

/// Builds a scalar loss on a fresh tape from bound parameters.
pub type LossFn<'a> = dyn Fn(&mut Tape, &Bound) -> Result<Var> + 'a;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor: components smaller than this are compared absolutely.
    pub floor: f64,
    /// Checks at most this many evenly spaced entries per parameter.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Entry index with the largest error.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<32} entries={:<6} max_rel_err={:.3e} {}",
                p.name,
                p.checked,
                p.max_rel_error,
                if p.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss(f: &LossFn<'_>, params: &ParamStore) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &|_| false)?;
    let loss = f(&mut tape, &bound)?;
    let v = tape.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::numeric("gradient_check", "loss is non-finite"));
    }
    Ok(v)
}

/// Compares analytic gradients with central differences for every parameter accepted by `select`.
pub fn gradient_check(
    f: &LossFn<'_>,
    params: &ParamStore,
    select: &dyn Fn(&str) -> bool,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, select)?;
    let loss = f(&mut tape, &bound)?;
    tape.backward(loss)?;

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        tolerance: opts.tolerance,
        params: Vec::new(),
    };
    let names: Vec<String> = params.names().filter(|n| select(n)).map(str::to_string).collect();
    for name in names {
        let var = bound.var(&name)?;
        let n = params.value(&name)?.len();
        let analytic = tape.grad(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let stride = match opts.max_entries {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            passed: true,
        };
        for i in (0..n).step_by(stride) {
            let original = params.value(&name)?.data()[i];
            let entry = |probe: &mut ParamStore, v: f64| {
                probe.get_mut(&name).expect("cloned store").value.data_mut()[i] = v;
            };
            entry(&mut probe, original + opts.step);
            let plus = eval_loss(f, &probe)?;
            entry(&mut probe, original - opts.step);
            let minus = eval_loss(f, &probe)?;
            entry(&mut probe, original);
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[i], numeric, opts.floor);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
            }
            check.checked += 1;
        }
        check.passed = check.max_rel_error <= opts.tolerance;
        report.params.push(check);
    }
    Ok(report)
}
