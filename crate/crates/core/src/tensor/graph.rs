use super::conv::{conv_backward, ConvGeom};
use super::{Float, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanDims {
        x: Var,
        dims: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    MeanOfList {
        xs: Vec<Var>,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        dim: usize,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Bce {
        p: Var,
        targets: Vec<T>,
        pos_weight: T,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Append-only tape of primitive applications.
///
/// Inputs of a node always precede it, so insertion order is a topological
/// order and [`Graph::backward`] simply walks the tape in reverse.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a leaf, or `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Zero-filled gradient when `v` was unreachable from the root.
    pub fn grad_or_zeros(&self, grads: &Gradients<T>, v: Var) -> Tensor<T> {
        grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    /// Reverse-mode accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_shape, T::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape for node {}", v.0);
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::Conv { x, w, b, geom, cols } => {
                let (dx, dw, db) = conv_backward(
                    cols.as_deref(),
                    self.value(*x).data(),
                    self.value(*w).data(),
                    geom,
                    g.data(),
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap());
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw).unwrap());
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), db).unwrap());
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dgamma, dbeta) =
                    super::norm::train_backward(self.shape(*x), self.value(*gamma).data(), xhat, inv_std, g.data());
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap());
                self.accumulate(grads, *gamma, Tensor::new(self.shape(*gamma).to_vec(), dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::new(self.shape(*beta).to_vec(), dbeta).unwrap());
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (dx, dgamma, dbeta) =
                    super::norm::eval_backward(self.value(*x), self.value(*gamma).data(), mean, inv_std, g.data());
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap());
                self.accumulate(grads, *gamma, Tensor::new(self.shape(*gamma).to_vec(), dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::new(self.shape(*beta).to_vec(), dbeta).unwrap());
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx[src] += gv;
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap());
            }
            Op::MeanDims { x, dims } => {
                let dx = super::pool::mean_dims_backward(self.shape(*x), dims, g.data());
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap());
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = super::linalg::linear_backward(
                    self.value(*x),
                    self.value(*w),
                    g.data(),
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap());
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw).unwrap());
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), db).unwrap());
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let mut dx = g;
                for (d, &v) in dx.data_mut().iter_mut().zip(xv) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let mut dx = g;
                for (d, &s) in dx.data_mut().iter_mut().zip(y) {
                    *d *= s * (T::one() - s);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                self.accumulate(grads, *b, g);
            }
            Op::Sub { a, b } => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::MeanOfList { xs } => {
                let inv = T::one() / T::from_usize(xs.len()).unwrap();
                let scaled = g.map(|v| v * inv);
                for x in xs {
                    self.accumulate(grads, *x, scaled.clone());
                }
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Reshape { x } => {
                let dx = g.reshape(self.shape(*x)).expect("reshape preserves count");
                self.accumulate(grads, *x, dx);
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let dx = super::shape::permute_tensor(&g, &inverse);
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { xs, dim } => {
                let shapes: Vec<&[usize]> = xs.iter().map(|x| self.shape(*x)).collect();
                let parts = super::shape::split_along(&g, &shapes, *dim);
                for (x, part) in xs.iter().zip(parts) {
                    self.accumulate(grads, *x, part);
                }
            }
            Op::Gather { x, indices } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let row = dx.numel() / self.shape(*x)[0];
                for (o, &i) in indices.iter().enumerate() {
                    let src = &g.data()[o * row..(o + 1) * row];
                    for (d, &v) in dx.data_mut()[i * row..(i + 1) * row].iter_mut().zip(src) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Bce { p, targets, pos_weight } => {
                let dp = super::loss::bce_backward(self.value(*p).data(), targets, *pos_weight, g.data()[0]);
                self.accumulate(grads, *p, Tensor::new(self.shape(*p).to_vec(), dp).unwrap());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn sum_root_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[3], 2.0), true);
        let unused = g.leaf(Tensor::full(&[4], 1.0), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(g.grad_or_zeros(&grads, unused).data(), &[0.0; 4]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[2], 1.5), true);
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let build = || {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(
                Tensor::from_fn(&[1, 2, 5, 5], |i| ((i * 37) % 11) as f64 * 0.1 - 0.4),
                true,
            );
            let w = g.leaf(
                Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 13) % 7) as f64 * 0.05 - 0.1),
                true,
            );
            let b = g.leaf(Tensor::zeros(&[3]), true);
            let y = g.conv2d(x, w, Some(b), 1, 1).unwrap();
            let r = g.relu(y);
            let s = g.sum(r);
            let grads = g.backward(s).unwrap();
            (grads.get(x).unwrap().clone(), grads.get(w).unwrap().clone())
        };
        assert_eq!(build(), build());
    }
}
