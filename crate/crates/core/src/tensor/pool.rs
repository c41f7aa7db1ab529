use super::graph::Op;
use super::{invalid, shape_err, strides, ConvGeom, Float, Graph, Result, Tensor, Var};

pub(crate) fn mean_dims_backward<T: Float>(in_shape: &[usize], dims: &[usize], dy: &[T]) -> Vec<T> {
    let n: usize = dims.iter().map(|&d| in_shape[d]).product();
    let inv = T::one() / T::from_usize(n).unwrap();
    let map = reduce_map(in_shape, dims);
    map.iter().map(|&o| dy[o] * inv).collect()
}

/// Output flat index for every input flat index when `dims` are reduced away.
fn reduce_map(in_shape: &[usize], dims: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = (0..in_shape.len()).filter(|d| !dims.contains(d)).collect();
    let kept_shape: Vec<usize> = kept.iter().map(|&d| in_shape[d]).collect();
    let kept_strides = strides(&kept_shape);
    // stride in output space contributed by each input dim (0 for reduced)
    let mut out_stride = vec![0usize; in_shape.len()];
    for (k, &d) in kept.iter().enumerate() {
        out_stride[d] = kept_strides[k];
    }
    let total: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; in_shape.len()];
    let mut out = 0usize;
    for _ in 0..total {
        map.push(out);
        for d in (0..in_shape.len()).rev() {
            idx[d] += 1;
            out += out_stride[d];
            if idx[d] < in_shape[d] {
                break;
            }
            out -= out_stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

impl<T: Float> Graph<T> {
    /// Max over `k x k` windows of `x: (b, c, h, w)`; padding never wins.
    ///
    /// Backward routes each output gradient to the first maximal element of
    /// its window in row-major order.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("maxpool2d", format!("expected rank-4 input, got {shape:?}")));
        }
        if pad >= k {
            return Err(invalid(
                "maxpool2d",
                format!("padding {pad} must be smaller than window {k}"),
            ));
        }
        let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
        let (oh, ow) = match (
            ConvGeom::out_extent(h, k, stride, pad),
            ConvGeom::out_extent(w, k, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(shape_err(
                    "maxpool2d",
                    format!("window {k} with stride {stride} and padding {pad} does not fit {h}x{w}"),
                ))
            }
        };
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                let y0 = (y * stride) as isize - pad as isize;
                let ylo = y0.max(0) as usize;
                let yhi = ((y0 + k as isize) as usize).min(h);
                for z in 0..ow {
                    let z0 = (z * stride) as isize - pad as isize;
                    let zlo = z0.max(0) as usize;
                    let zhi = ((z0 + k as isize) as usize).min(w);
                    let mut best = base + ylo * w + zlo;
                    let mut best_v = xd[best];
                    for yy in ylo..yhi {
                        for zz in zlo..zhi {
                            let i = base + yy * w + zz;
                            if xd[i] > best_v {
                                best_v = xd[i];
                                best = i;
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Mean over `dims`, which are removed from the shape. An empty list is
    /// the identity.
    pub fn mean_dims(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        if dims.is_empty() {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        let mut sorted = dims.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != dims.len() || sorted.iter().any(|&d| d >= shape.len()) {
            return Err(invalid(
                "global_avg_pool",
                format!("dims {dims:?} invalid for rank {}", shape.len()),
            ));
        }
        let mut out_shape: Vec<usize> = (0..shape.len())
            .filter(|d| !sorted.contains(d))
            .map(|d| shape[d])
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let count: usize = sorted.iter().map(|&d| shape[d]).product();
        let map = reduce_map(&shape, &sorted);
        let mut acc = vec![0.0f64; out_shape.iter().product()];
        for (&o, v) in map.iter().zip(self.value(x).data()) {
            acc[o] += v.as_f64();
        }
        let data = acc.into_iter().map(|s| T::from_f64_lossy(s / count as f64)).collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::MeanDims { x, dims: sorted }, &[x]))
    }

    /// Alias of [`Graph::mean_dims`] named after its role in the model head.
    pub fn global_avg_pool(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        self.mean_dims(x, dims)
    }
}
