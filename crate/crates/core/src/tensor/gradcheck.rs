use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Matrix, NodeId};

/// Central-difference gradient of a scalar function built on a fresh graph.
///
/// `build` receives the graph and one leaf per parameter and returns the
/// scalar output node.
pub fn numeric_gradient<T, F>(build: &F, params: &[Matrix<T>], eps: T) -> Result<Vec<Matrix<T>>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Matrix<T>]| -> Result<T> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.constant(v.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.scalar(out))
    };
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Matrix::zeros(params[p].rows(), params[p].cols());
        for k in 0..params[p].len() {
            let orig = work[p].as_slice()[k];
            work[p].as_mut_slice()[k] = orig + eps;
            let plus = eval(&work)?;
            work[p].as_mut_slice()[k] = orig - eps;
            let minus = eval(&work)?;
            work[p].as_mut_slice()[k] = orig;
            grad.as_mut_slice()[k] = (plus - minus) / (eps + eps);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Max coordinatewise relative error between the autodiff gradient and
/// central differences, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<T, F>(build: F, params: &[Matrix<T>], eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > T::zero()) {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|v| g.param(v.clone())).collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;

    let numeric = numeric_gradient(&build, params, eps)?;
    let floor = T::of(1e-8);
    let mut worst = T::zero();
    for (id, num) in ids.iter().zip(&numeric) {
        let analytic = g.grad(*id);
        for (&a, &n) in analytic.as_slice().iter().zip(num.as_slice()) {
            let denom = a.abs().max(n.abs()).max(floor);
            worst = worst.max((a - n).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let theta = Matrix::from_rows(&[vec![0.3, -1.2, 2.5]]).unwrap();
        let err = grad_check(
            |g, p| {
                let s = g.sum_squares(p[0]);
                Ok(g.scale(s, 0.5))
            },
            &[theta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn affine_is_exact() {
        let theta = Matrix::from_rows(&[vec![0.5], vec![-2.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![3.0, -1.0]]).unwrap();
        let err = grad_check(
            |g, p| {
                let w = g.constant(w.clone());
                g.matmul(w, p[0])
            },
            &[theta],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let theta = Matrix::<f64>::zeros(1, 1);
        assert!(grad_check(|g, p| Ok(g.sum_squares(p[0])), &[theta], 0.0).is_err());
    }
}
