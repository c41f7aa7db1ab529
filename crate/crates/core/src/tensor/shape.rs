use super::graph::Op;
use super::{invalid, numel, shape_err, strides, Float, Graph, Result, Tensor, Var};

pub(crate) fn permute_tensor<T: Float>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // input stride walked by each output dim
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    let (inner_n, inner_s) = (out_shape[last], walk[last]);
    let outer = src.len() / inner_n;
    for _ in 0..outer {
        for j in 0..inner_n {
            out.push(src[offset + j * inner_s]);
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            offset += walk[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= walk[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves count")
}

/// Splits `g` along `dim` into pieces with the given shapes.
pub(crate) fn split_along<T: Float>(g: &Tensor<T>, shapes: &[&[usize]], dim: usize) -> Vec<Tensor<T>> {
    let outer: usize = g.shape()[..dim].iter().product();
    let inner: usize = g.shape()[dim + 1..].iter().product();
    let total = g.shape()[dim];
    let mut parts: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(numel(s))).collect();
    let data = g.data();
    for o in 0..outer {
        let mut start = 0;
        for (part, s) in parts.iter_mut().zip(shapes) {
            let len = s[dim] * inner;
            let base = (o * total) * inner + start;
            part.extend_from_slice(&data[base..base + len]);
            start += len;
        }
    }
    parts
        .into_iter()
        .zip(shapes)
        .map(|(p, s)| Tensor::new(s.to_vec(), p).unwrap())
        .collect()
}

impl<T: Float> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Reorders dims so that output dim `i` is input dim `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid(
                "permute",
                format!("{perm:?} is not a permutation of {rank} dims"),
            ));
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(x);
        }
        let value = permute_tensor(self.value(x), perm);
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], dim: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(invalid("concat", "needs at least one operand"));
        };
        let base = self.shape(first).to_vec();
        if dim >= base.len() {
            return Err(invalid(
                "concat",
                format!("dim {dim} out of range for rank {}", base.len()),
            ));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len() && (0..s.len()).all(|d| d == dim || s[d] == base[d]);
            if !compatible {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along dim {dim}"),
                ));
            }
            total += s[dim];
        }
        let mut out_shape = base.clone();
        out_shape[dim] = total;
        let outer: usize = base[..dim].iter().product();
        let inner: usize = base[dim + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[dim] * inner;
                data.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), dim }, xs))
    }

    /// Rows of `x` along dim 0 picked by `indices`; repeats are allowed and
    /// their gradients accumulate.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if indices.is_empty() {
            return Err(invalid("gather", "needs at least one index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(invalid(
                "gather",
                format!("index {bad} out of range for {} rows", shape[0]),
            ));
        }
        let row = numel(&shape[1..]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }
}
