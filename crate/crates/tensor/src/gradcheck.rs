//! Central finite-difference probes for tape gradients, run in `f64`.

use crate::{Tape, Tensor, TensorError, Var};

/// Denominator floor for relative errors, so gradients that are zero up to
/// roundoff do not report spurious relative mismatches.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamGradError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of `f` against central differences at `point`.
///
/// `f` receives a fresh tape and one leaf per named tensor (in order) and
/// must return a scalar. It is evaluated `1 + 2·Σ numel` times.
pub fn grad_check<F, E>(mut f: F, point: &[(String, Tensor<f64>)], step: f64) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    if step <= 0.0 {
        return Err(TensorError::contract("grad_check", "step must be positive").into());
    }
    let mut tape = Tape::new();
    let leaves: Vec<Var> = point.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let mut values: Vec<Tensor<f64>> = point.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport::default();
    for (p, (name, _)) in point.iter().enumerate() {
        let analytic = grads.get(leaves[p]).expect("leaf gradient").data().to_vec();
        let mut entry = ParamGradError {
            name: name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for i in 0..analytic.len() {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + step;
            let plus = eval(&mut f, &values, name)?;
            values[p].data_mut()[i] = orig - step;
            let minus = eval(&mut f, &values, name)?;
            values[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = relative_error(analytic[i], numeric);
            let abs = (analytic[i] - numeric).abs();
            if rel > entry.max_rel_err {
                entry.max_rel_err = rel;
                entry.worst_index = i;
            }
            entry.max_abs_err = entry.max_abs_err.max(abs);
        }
        report.params.push(entry);
    }
    Ok(report)
}

fn eval<F, E>(f: &mut F, values: &[Tensor<f64>], name: &str) -> Result<f64, E>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(TensorError::Probe {
            param: name.to_string(),
            msg: format!("objective is {v} at a perturbed point"),
        }
        .into());
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let point = vec![("x".to_string(), Tensor::scalar(3.0))];
        let report = grad_check::<_, TensorError>(
            |tape, xs| {
                let sq = tape.mul(xs[0], xs[0])?;
                tape.sum(sq)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-8, "{report:?}");
    }

    #[test]
    fn non_finite_objective_names_parameter() {
        let point = vec![("w".to_string(), Tensor::scalar(0.0))];
        let err = grad_check::<_, TensorError>(
            |tape, xs| {
                // 1/x via a constant reciprocal is infinite at the perturbed point only
                let v = tape.value(xs[0]).item();
                let inv = if v == 0.0 { 0.0 } else { f64::INFINITY };
                let c = tape.constant(Tensor::scalar(inv));
                let s = tape.add(xs[0], c)?;
                tape.sum(s)
            },
            &point,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::Probe { ref param, .. } if param == "w"));
    }
}
