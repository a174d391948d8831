//! Central finite-difference verification of analytic gradients.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One parameter element whose analytic and numeric gradients were compared.
#[derive(Clone, Debug)]
pub struct GradEntry {
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.error < self.tolerance)
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries.iter().max_by(|a, b| a.error.total_cmp(&b.error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradEntry> {
        self.entries.iter().filter(move |e| e.error >= self.tolerance)
    }
}

/// Compares analytic gradients against central differences.
///
/// `f` evaluates the scalar objective at the given parameter values and
/// returns it together with its analytic gradient (one vector per parameter).
/// Each element is scored as `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(mut f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let (first, analytic) = f(params)?;
    let (second, _) = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    if analytic.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "objective returned {} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut entries = Vec::new();
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.len() != params[pi].numel() {
            return Err(Error::ShapeMismatch {
                op: "grad_check",
                left: params[pi].shape().to_vec(),
                right: vec![grad.len()],
            });
        }
        for (ei, &g) in grad.iter().enumerate() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let (plus, _) = f(&work)?;
            work[pi].data_mut()[ei] = orig - step;
            let (minus, _) = f(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let error = (g - numeric).abs() / numeric.abs().max(1.0);
            entries.push(GradEntry {
                param: pi,
                element: ei,
                analytic: g,
                numeric,
                error,
            });
        }
    }
    Ok(GradCheckReport {
        tolerance: tol,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use std::cell::Cell;

    #[test]
    fn half_square_at_three() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let report = grad_check(
            |p| {
                let v = p[0].data()[0];
                Ok((0.5 * v * v, vec![vec![v]]))
            },
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap();
        let e = &report.entries[0];
        assert_eq!(e.analytic, 3.0);
        assert!((e.numeric - 3.0).abs() < 1e-9);
        assert!(report.passed());
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |p| {
                let d = p[0].data();
                Ok((d[0] * d[1], vec![vec![d[1], 0.0]]))
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().count(), 1);
    }

    #[test]
    fn detects_nondeterminism() {
        let calls = Cell::new(0.0);
        let x = Tensor::scalar(1.0);
        let err = grad_check(
            |_| {
                calls.set(calls.get() + 1.0);
                Ok((calls.get(), vec![vec![0.0]]))
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn tape_objective_roundtrip() {
        let x = Tensor::new(vec![2, 2], vec![0.1, -0.4, 0.7, 1.2]).unwrap();
        let report = grad_check(
            |p| {
                let mut tape = Tape::new();
                let v = tape.param(&p[0]);
                let s = tape.softmax(v, 1)?;
                let g = tape.gelu(s);
                let l = tape.mul(g, v)?;
                let loss = tape.sum(l);
                let grads = tape.backward(loss)?;
                Ok((tape.data(loss)[0], vec![grads.get_or_zeros(v, 4)]))
            },
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "max error {}", report.max_error());
    }
}
