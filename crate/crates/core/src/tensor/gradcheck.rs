//! Central finite-difference verification of analytic gradients.

use super::{Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all checked entries.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of scalar parameters compared.
    pub checked: usize,
    /// Entries left out because the stencil `θ ± h` changed a rectifier sign
    /// or a max-pool winner, where central differences are meaningless.
    pub skipped: usize,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: (usize, usize),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckOptions {
    /// Negative-control hook: distorts the first compared analytic gradient
    /// entry so that the check must fail.
    pub corrupt_analytic: bool,
    /// Compare at most this many entries per parameter (evenly strided).
    pub max_entries_per_param: Option<usize>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of the scalar `f(params)` against
/// `(f(θ+h) - f(θ-h)) / 2h`, element by element, in double precision.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    grad_check_with(f, params, h, GradCheckOptions::default())
}

pub fn grad_check_with<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    options: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let leaves: Vec<Tensor> = params
        .iter()
        .map(|p| p.with_precision(Precision::Double).map(|t| t.to_param()))
        .collect::<Result<_>>()?;
    let (loss, base_branches) = super::branch::traced(|| f(&leaves));
    let loss = loss?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let constants: Vec<Tensor> = leaves.iter().map(Tensor::detach).collect();
    // value at θ + delta, and whether every branch matched the one taken at θ
    let eval = |which: usize, index: usize, delta: f64| -> Result<(f64, bool)> {
        let mut args = constants.clone();
        let mut data = args[which].to_vec();
        data[index] += delta;
        args[which] = Tensor::new(args[which].shape(), data, Precision::Double)?;
        let (value, branches) = super::branch::traced(|| f(&args));
        Ok((value?.item(), branches == base_branches))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        skipped: 0,
        worst: (0, 0),
    };
    let mut corrupt = options.corrupt_analytic;
    for (which, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let stride = match options.max_entries_per_param {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for index in (0..n).step_by(stride) {
            let (plus, same_plus) = eval(which, index, h)?;
            let (minus, same_minus) = eval(which, index, -h)?;
            if !(same_plus && same_minus) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let mut a = grad[index];
            if std::mem::take(&mut corrupt) {
                a = a * 1.5 + 1.0;
            }
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = rel;
                report.worst = (which, index);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let r = grad_check(|p| p[0].mul(&p[0])?.sum(), &[x], 1e-3).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap();
        let opts = GradCheckOptions {
            corrupt_analytic: true,
            ..Default::default()
        };
        let r = grad_check_with(|p| p[0].mul(&p[0])?.sum(), &[x], 1e-3, opts).unwrap();
        assert!(r.max_rel_err > 0.1);
        assert_eq!(r.worst, (0, 0));
    }

    #[test]
    fn kinks_inside_the_stencil_are_skipped() {
        // relu(x) at x = 1e-4 with h = 1e-3: the stencil crosses zero
        let x = Tensor::from_vec(&[2], vec![1e-4, 0.5]).unwrap();
        let r = grad_check(|p| p[0].relu()?.sum(), &[x], 1e-3).unwrap();
        assert_eq!((r.checked, r.skipped), (1, 1));
        assert!(r.max_rel_err < 1e-12);
    }

    #[test]
    fn rejects_bad_step_and_non_scalar() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|p| p[0].sum(), &[x.clone()], 0.0).is_err());
        assert!(matches!(
            grad_check(|p| p[0].scale(2.0), &[x], 1e-3),
            Err(Error::NonScalarLoss(_))
        ));
    }
}
