use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exec::{self, Exec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Central-difference step.
    pub h: f64,
    pub exec: Exec,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            rtol: 1e-4,
            atol: 1e-6,
            h: 1e-5,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub index: usize,
    /// Largest `max(0, |a - n| - atol) / max(|a|, |n|)` over the elements.
    pub max_rel_error: f64,
    pub max_abs_diff: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
}

impl GradReport {
    /// Vacuously true when there are no parameters.
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_diff).fold(0.0, f64::max)
    }
}

fn evaluate<F>(f: &F, params: &[Tensor], requires_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone(), requires_grad))
        .collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

fn scalar_value<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, params, false)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Oracle(format!("function evaluated to {v}")));
    }
    Ok(v)
}

/// Compare reverse-mode gradients of the scalar `f(params)` against central
/// differences `(f(p + h) - f(p - h)) / 2h`, one element at a time.
pub fn check_gradients<F>(f: F, params: &[Tensor], cfg: GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if params.is_empty() {
        return Ok(GradReport::default());
    }
    if let Some(bad) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::Contract(format!("parameter {bad} is not finite")));
    }
    let (mut tape, vars, out) = evaluate(&f, params, true)?;
    if !tape.value(out).item()?.is_finite() {
        return Err(Error::Oracle("non-finite function value".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(Tensor::into_vec)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |e| (pi, e)))
        .collect();
    let numeric = exec::map_indexed(cfg.exec, coords.len(), |c| -> Result<f64> {
        let (pi, e) = coords[c];
        let mut shifted = params.to_vec();
        let orig = params[pi].data()[e];
        shifted[pi].data_mut()[e] = orig + cfg.h;
        let plus = scalar_value(&f, &shifted)?;
        shifted[pi].data_mut()[e] = orig - cfg.h;
        let minus = scalar_value(&f, &shifted)?;
        Ok((plus - minus) / (2.0 * cfg.h))
    });

    let mut reports: Vec<ParamReport> = (0..params.len())
        .map(|index| ParamReport {
            index,
            max_rel_error: 0.0,
            max_abs_diff: 0.0,
            passed: true,
        })
        .collect();
    for (&(pi, e), num) in coords.iter().zip(numeric) {
        let num = num?;
        let a = analytic[pi][e];
        let diff = (a - num).abs();
        let scale = a.abs().max(num.abs());
        let rel = if diff <= cfg.atol {
            0.0
        } else {
            (diff - cfg.atol) / scale
        };
        let r = &mut reports[pi];
        r.max_abs_diff = r.max_abs_diff.max(diff);
        r.max_rel_error = r.max_rel_error.max(rel);
    }
    for r in &mut reports {
        r.passed = r.max_rel_error <= cfg.rtol;
    }
    Ok(GradReport { params: reports })
}
