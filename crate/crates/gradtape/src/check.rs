use crate::error::{Result, TapeError};
use crate::tensor::{Graph, Tensor};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - central| / max(1, |analytic|)
    pub max_rel_err: f64,
    /// parameter index of the worst coordinate
    pub worst_param: usize,
    /// flat coordinate within that parameter
    pub worst_coord: usize,
    /// total coordinates checked
    pub coords: usize,
}

/// Compare reverse-mode gradients of `f` against central finite differences.
///
/// `f` must be a deterministic map from the given parameters to a scalar.
/// Every call receives a fresh graph and freshly bound parameter tensors, so
/// the analytic pass and each of the two perturbed evaluations per coordinate
/// are independent.
pub fn grad_check<F>(f: F, params: &[(Vec<usize>, Vec<f64>)], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Tensor]) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(TapeError::Domain("grad_check eps must be positive".into()));
    }
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let graph = Graph::new();
        let tensors = params
            .iter()
            .zip(values.iter())
            .map(|((shape, _), v)| graph.param(shape, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&graph, &tensors)?;
        if loss.numel() != 1 {
            return Err(TapeError::Graph(
                "grad_check function must return a scalar".into(),
            ));
        }
        Ok(loss.item())
    };

    // analytic gradients
    let graph = Graph::new();
    let tensors = params
        .iter()
        .map(|(shape, data)| graph.param(shape, data.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&graph, &tensors)?;
    // a loss that never touched the parameters has zero gradient everywhere
    if loss.node_id().is_some() {
        loss.backward()?;
    }
    let analytic: Vec<Vec<f64>> = tensors
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut values: Vec<Vec<f64>> = params.iter().map(|(_, d)| d.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
        coords: 0,
    };
    for p in 0..values.len() {
        for c in 0..values[p].len() {
            let orig = values[p][c];
            values[p][c] = orig + eps;
            let up = eval(&values)?;
            values[p][c] = orig - eps;
            let down = eval(&values)?;
            values[p][c] = orig;
            let central = (up - down) / (2.0 * eps);
            let a = analytic[p][c];
            let rel = (a - central).abs() / a.abs().max(1.0);
            report.coords += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = p;
                report.worst_coord = c;
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
        let params = vec![(vec![3], vec![0.5, -1.5, 2.0])];
        let report = grad_check(
            |_, ps| ps[0].mul(&ps[0])?.sum_axis(0),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-9, "err {}", report.max_rel_err);
        assert_eq!(report.coords, 3);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let params = vec![(vec![2], vec![1.0, 2.0])];
        let report = grad_check(|_, _| Ok(Tensor::scalar(3.0)), &params, 1e-5).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn constant_via_zero_weight_is_zero() {
        let params = vec![(vec![2], vec![1.0, 2.0])];
        let report = grad_check(
            |_, ps| ps[0].mul_scalar(0.0)?.sum_axis(0)?.add_scalar(7.0),
            &params,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }
}
