use super::graph::Op;
use super::{shape_err, Float, Graph, Result, Tensor, Var};

#[allow(clippy::type_complexity)]
pub(crate) fn linear_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (b, n) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[0];
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); b * n];
        T::gemm(
            b,
            m,
            n,
            T::one(),
            dy,
            (m, 1),
            w.data(),
            (n, 1),
            T::zero(),
            &mut dx,
            (n, 1),
        );
        dx
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); m * n];
        T::gemm(
            m,
            b,
            n,
            T::one(),
            dy,
            (1, m),
            x.data(),
            (n, 1),
            T::zero(),
            &mut dw,
            (n, 1),
        );
        dw
    });
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); m];
        for row in dy.chunks_exact(m) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        db
    });
    (dx, dw, db)
}

impl<T: Float> Graph<T> {
    /// `y = x W^T + bias` for `x: (b, n)`, `W: (m, n)`, `bias: (m)`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err(
                "linear",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        let (b, n, m) = (xs[0], xs[1], ws[0]);
        if let Some(bv) = bias {
            if self.shape(bv) != [m] {
                return Err(shape_err(
                    "linear",
                    format!("bias shape {:?}, expected [{m}]", self.shape(bv)),
                ));
            }
        }
        let mut out = vec![T::zero(); b * m];
        if let Some(bv) = bias {
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(self.value(bv).data());
            }
        }
        T::gemm(
            b,
            n,
            m,
            T::one(),
            self.value(x).data(),
            (n, 1),
            self.value(weight).data(),
            (1, n),
            T::one(),
            &mut out,
            (m, 1),
        );
        let value = Tensor::new(vec![b, m], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(value, Op::Linear { x, w: weight, b: bias }, &inputs))
    }
}
