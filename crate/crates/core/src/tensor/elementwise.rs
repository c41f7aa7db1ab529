use super::graph::Op;
use super::{invalid, shape_err, Float, Graph, Result, Tensor, Var};

impl<T: Float> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut value = self.value(a).clone();
        for (d, &v) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *d -= v;
        }
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// Element-wise mean of equally shaped tensors, summed in list order.
    pub fn mean_of_list(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(invalid("mean_of_list", "needs at least one operand"));
        };
        for &x in &xs[1..] {
            self.same_shape("mean_of_list", first, x)?;
        }
        if xs.len() == 1 {
            let value = self.value(first).clone();
            return Ok(self.push(value, Op::MeanOfList { xs: xs.to_vec() }, xs));
        }
        let mut value = self.value(first).clone();
        for &x in &xs[1..] {
            value.add_assign(self.value(x));
        }
        let inv = T::one() / T::from_usize(xs.len()).unwrap();
        for v in value.data_mut() {
            *v *= inv;
        }
        Ok(self.push(value, Op::MeanOfList { xs: xs.to_vec() }, xs))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }
}
