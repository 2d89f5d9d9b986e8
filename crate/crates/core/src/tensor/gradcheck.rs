//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Denominator floor for the relative error, so that coordinates with
    /// vanishing gradient are compared in absolute terms.
    pub rel_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            rel_floor: 1e-6,
        }
    }
}

/// (parameter index, flat coordinate)
pub type Coord = (usize, usize);

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coord>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crosses a relu/clamp kink.
    pub excluded: Vec<Coord>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<i8>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::NotScalar {
            shape: v.shape().to_vec(),
        });
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok((v, tape.branch_signature()))
}

/// Compare the tape gradient of `f` at `params` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, coordinate by coordinate.
pub fn finite_difference_check<F>(params: &[Tensor], cfg: GradCheck, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if cfg.eps <= 0.0 {
        return Err(Error::Invalid(format!("eps must be positive, got {}", cfg.eps)));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite("objective at base point".into()));
    }
    let base_sig = tape.branch_signature();
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        excluded: Vec::new(),
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let orig = p.data()[j];
            work[pi].data_mut()[j] = orig + cfg.eps;
            let (fp, sp) = eval(&f, &work)?;
            work[pi].data_mut()[j] = orig - cfg.eps;
            let (fm, sm) = eval(&f, &work)?;
            work[pi].data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                report.excluded.push((pi, j));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = analytic[pi].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.rel_floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, j));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = Tensor::new([4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let r = finite_difference_check(&[theta], GradCheck::default(), |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn active_clamp_coordinate_is_excluded() {
        // second coordinate sits exactly on the upper bound
        let theta = Tensor::new([3], vec![0.5, 1.0, 0.2]).unwrap();
        let r = finite_difference_check(&[theta], GradCheck::default(), |tape, v| {
            let c = tape.clamp(v[0], 0.0, 1.0)?;
            let sq = tape.square(c);
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert_eq!(r.excluded, vec![(0, 1)]);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let theta = Tensor::new([1], vec![1.0]).unwrap();
        let r = finite_difference_check(&[theta], GradCheck::default(), |tape, v| {
            let z = tape.mul_scalar(v[0], f64::INFINITY);
            Ok(tape.sum(z))
        });
        assert!(r.is_err());
    }
}
