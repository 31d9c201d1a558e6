use super::graph::{GradSkip, Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences with step `h`, returning
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
///
/// `build` receives a fresh graph and the leaf holding `point`, and must
/// return a scalar node.
pub fn grad_check<F>(build: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {h}")));
    }
    let eval = |p: Tensor| -> Result<(Graph, NodeId, NodeId)> {
        let mut g = Graph::new();
        let x = g.leaf(p);
        let y = build(&mut g, x)?;
        if !g.value(y).is_scalar() {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                g.value(y).shape()
            )));
        }
        Ok((g, x, y))
    };

    let mut p = point.clone();
    p.set_requires_grad(true);
    let (mut g, x, y) = eval(p)?;
    g.backward(y, &GradSkip::none())?;
    let analytic = g.grad(x).expect("leaf requires grad").to_vec();

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let (gp, _, yp) = eval(plus)?;
        let (gm, _, ym) = eval(minus)?;
        let numeric = (gp.value(yp).item() - gm.value(ym).item()) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let p = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let s = g.square(x)?;
                g.sum(s)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let p = Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let w = g.leaf(Tensor::new(&[3, 1], vec![1.0, 2.0, -3.0])?);
                g.matmul(x, w)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_scalar_is_rejected() {
        let p = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(|g, x| g.relu(x), &p, 1e-5);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn bad_step_is_rejected() {
        let p = Tensor::new(&[1], vec![1.0]).unwrap();
        assert!(grad_check(|g, x| g.sum(x), &p, 0.0).is_err());
    }
}
