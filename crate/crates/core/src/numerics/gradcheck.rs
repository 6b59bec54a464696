use super::tape::{Tape, Var};
use super::tensor::Params;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step. Roundoff grows like `|f| * 1e-16 / eps` and must
    /// stay well under the `1e-8` floor.
    pub eps: f64,
    /// Upper bound on coordinates probed per tensor; `None` probes all.
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_coords_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all probed coordinates.
    pub max_rel_error: f64,
    /// Tensor name and flat coordinate where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every parameter in `params` that requires a gradient.
///
/// `f` must rebuild the whole computation on the tape it is handed and return
/// a scalar. Run in 64-bit; finite differences in 32-bit are too noisy.
pub fn grad_check<F>(params: &Params<f64>, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        let value = tape.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("objective is {value} at the base point")));
        }
        tape.backward(loss)?
    };

    let eval = |p: &Params<f64>| -> Result<f64> {
        let mut tape = Tape::new(p);
        let loss = f(&mut tape)?;
        let v = tape.scalar(loss)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("objective is {v} under perturbation")))
        }
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
    };

    for id in params.ids() {
        let tensor = params.get(id);
        if !tensor.requires_grad() {
            continue;
        }
        let n = tensor.len();
        let stride = match opts.max_coords_per_tensor {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let x = tensor.data()[j];
            let mut at = |dx: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[j] = x + dx;
                eval(&probe)
            };
            let h = opts.eps;
            let (f1, f_1, f2, f_2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            probe.get_mut(id).data_mut()[j] = x;

            // five-point stencil, truncation error O(h^4)
            let numeric = (8.0 * (f1 - f_1) - (f2 - f_2)) / (12.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_at_one() {
        let mut p = Params::new();
        let x = p.add("x", Tensor::vector(vec![1.0]).unwrap().with_grad()).unwrap();
        let opts = GradCheckOptions {
            eps: 1e-5,
            ..Default::default()
        };
        let r = grad_check(&p, opts, |t| {
            let v = t.param(x)?;
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
        assert_eq!(r.coords_checked, 1);
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let mut p = Params::new();
        p.add("x", Tensor::vector(vec![0.3, 0.4]).unwrap().with_grad()).unwrap();
        let r = grad_check(&p, GradCheckOptions::default(), |t| t.row(&[2.5])).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        // exp is differentiated correctly, so fake a mismatch by checking a
        // function whose analytic path is cut: the objective reads the param
        // through a constant copy.
        let mut p = Params::new();
        let x = p.add("x", Tensor::vector(vec![0.7]).unwrap().with_grad()).unwrap();
        let r = grad_check(&p, GradCheckOptions::default(), |t| {
            let v = t.params().get(x).data()[0];
            t.row(&[v * v])
        })
        .unwrap();
        assert!(r.max_rel_error > 0.5);
        assert_eq!(r.worst, Some(("x".to_string(), 0)));
    }

    #[test]
    fn non_finite_objective_is_numeric_error() {
        let mut p = Params::new();
        p.add("x", Tensor::vector(vec![0.0]).unwrap().with_grad()).unwrap();
        let r = grad_check(&p, GradCheckOptions::default(), |t| t.row(&[f64::NAN]));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
