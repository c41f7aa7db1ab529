//! Central finite-difference gradient checking at 64-bit precision.

use super::{Graph, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Checks every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_at(f, inputs, FD_STEP, |_, _, _| true)
}

/// Checks the coordinates accepted by `select(input, index, value)`.
pub fn grad_check_at<F, S>(f: F, inputs: &[Tensor<f64>], h: f64, select: S) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    S: Fn(usize, usize, f64) -> bool,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad_or_zeros(&grads, v);
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            if !select(k, i, x0) {
                continue;
            }
            work[k].data_mut()[i] = x0 + h;
            let fp = eval(&f, &work)?;
            work[k].data_mut()[i] = x0 - h;
            let fm = eval(&f, &work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = err;
                report.worst = (k, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn quadratic_form_checks_clean() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let row = g.reshape(v[0], &[1, 3])?;
                let sq = g.linear(row, row, None)?;
                Ok(g.sum(sq))
            },
            &[x],
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }
}
