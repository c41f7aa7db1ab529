use super::graph::Op;
use super::{invalid, shape_err, Float, Graph, Result, Tensor, Var};

pub const PROB_CLAMP: f64 = 1e-7;

fn clamp<T: Float>(p: T) -> T {
    let lo = T::from_f64_lossy(PROB_CLAMP);
    let hi = T::one() - lo;
    p.max(lo).min(hi)
}

/// Gradient is evaluated at the clamped probability and passed straight
/// through the clamp.
pub(crate) fn bce_backward<T: Float>(p: &[T], y: &[T], pos_weight: T, upstream: T) -> Vec<T> {
    let n = T::from_usize(p.len()).unwrap();
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = clamp(p);
            let d = -(pos_weight * y / p) + (T::one() - y) / (T::one() - p);
            d * upstream / n
        })
        .collect()
}

impl<T: Float> Graph<T> {
    /// Mean of `-[w*y*ln p + (1-y)*ln(1-p)]` with `p` clamped to
    /// `[1e-7, 1 - 1e-7]`.
    pub fn bce_loss(&mut self, p: Var, targets: &[T], pos_weight: f64) -> Result<Var> {
        if targets.len() != self.value(p).numel() {
            return Err(shape_err(
                "bce_loss",
                format!("{} targets for {} probabilities", targets.len(), self.value(p).numel()),
            ));
        }
        if targets.iter().any(|&y| y != T::zero() && y != T::one()) {
            return Err(invalid("bce_loss", "targets must be 0 or 1"));
        }
        if !(pos_weight > 0.0) {
            return Err(invalid(
                "bce_loss",
                format!("pos_weight must be positive, got {pos_weight}"),
            ));
        }
        let w = T::from_f64_lossy(pos_weight);
        let mut acc = 0.0f64;
        for (&pv, &y) in self.value(p).data().iter().zip(targets) {
            let pc = clamp(pv).as_f64();
            let y = y.as_f64();
            acc -= pos_weight * y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let loss = T::from_f64_lossy(acc / targets.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
                pos_weight: w,
            },
            &[p],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_at(p: f64, y: f64, w: f64) -> f64 {
        let mut g = Graph::<f64>::new();
        let pv = g.constant(Tensor::scalar(p));
        let l = g.bce_loss(pv, &[y], w).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn closed_form_values() {
        assert!((loss_at(0.5, 1.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss_at(0.5, 1.0, 7.0) - 4.852030263919617).abs() < 1e-12);
    }

    #[test]
    fn decreasing_in_p_for_positive_label() {
        let mut prev = f64::INFINITY;
        for p in [0.1, 0.3, 0.5, 0.9, 0.999, 1.0 - 1e-9] {
            let l = loss_at(p, 1.0, 1.0);
            assert!(l < prev);
            prev = l;
        }
        assert!(loss_at(1.0, 1.0, 1.0) < 1e-6);
    }

    #[test]
    fn rejects_non_binary_targets() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::scalar(0.5));
        assert!(g.bce_loss(p, &[0.5], 1.0).is_err());
        assert!(g.bce_loss(p, &[1.0], 0.0).is_err());
    }

    #[test]
    fn sigmoid_bce_gradient_is_p_minus_y() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::scalar(0.0), true);
        let p = g.sigmoid(z);
        let l = g.bce_loss(p, &[1.0], 1.0).unwrap();
        let grads = g.backward(l).unwrap();
        assert!((grads.get(z).unwrap().data()[0] + 0.5).abs() < 1e-12);
    }
}
