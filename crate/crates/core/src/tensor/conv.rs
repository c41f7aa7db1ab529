//! 2-D and 3-D cross-correlation through a shared im2col + GEMM kernel.
//!
//! A 2-D convolution is evaluated as a 3-D one with unit depth, so both
//! entry points share forward and backward code.

use super::graph::Op;
use super::{shape_err, Float, Graph, Result, Tensor, Var};

/// Geometry of one convolution over up to three spatial dims.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// `floor((n + 2p - k) / s) + 1`, or `None` when the kernel exceeds the
    /// padded input.
    pub fn out_extent(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
        if s == 0 || k == 0 || k > n + 2 * p {
            return None;
        }
        Some((n + 2 * p - k) / s + 1)
    }

    fn new(op: &'static str, x: &[usize], w: &[usize], stride: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        // x: (N, Cin, D, H, W), w: (Cout, Cin, KD, KH, KW)
        if x[1] != w[1] {
            return Err(shape_err(
                op,
                format!(
                    "input has {} channels but weight expects {} (x {:?}, weight {:?})",
                    x[1], w[1], x, w
                ),
            ));
        }
        let mut output = [0; 3];
        for d in 0..3 {
            output[d] = Self::out_extent(x[2 + d], w[2 + d], stride[d], pad[d]).ok_or_else(|| {
                shape_err(
                    op,
                    format!(
                        "kernel {:?} with stride {:?} and padding {:?} does not fit input {:?}",
                        &w[2..],
                        stride,
                        pad,
                        &x[2..]
                    ),
                )
            })?;
        }
        Ok(Self {
            batch: x[0],
            cin: x[1],
            cout: w[0],
            input: [x[2], x[3], x[4]],
            kernel: [w[2], w[3], w[4]],
            stride,
            pad,
            output,
        })
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn patch(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }
}

const PAD: usize = usize::MAX;

/// Offset within one input sample of every (patch row, output position)
/// tap, row-major over `patch x positions`; `PAD` where the tap falls in
/// the zero padding.
fn tap_table(g: &ConvGeom) -> Vec<usize> {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [od, oh, ow] = g.output;
    let plane = id * ih * iw;
    let inside = |z: usize, k: usize, s: usize, p: usize, n: usize| {
        let i = (z * s + k) as isize - p as isize;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    };
    let mut table = Vec::with_capacity(g.patch() * g.positions());
    for c in 0..g.cin {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    for zd in 0..od {
                        for zh in 0..oh {
                            for zw in 0..ow {
                                let tap = match (
                                    inside(zd, a, sd, g.pad[0], id),
                                    inside(zh, b, sh, g.pad[1], ih),
                                    inside(zw, e, sw, g.pad[2], iw),
                                ) {
                                    (Some(d), Some(h), Some(w)) => c * plane + (d * ih + h) * iw + w,
                                    _ => PAD,
                                };
                                table.push(tap);
                            }
                        }
                    }
                }
            }
        }
    }
    table
}

/// Patch matrix `patch x (batch * positions)`: row `r` holds kernel tap
/// `r` for every output position of every sample.
fn im2col<T: Float>(x: &[T], g: &ConvGeom, table: &[usize]) -> Vec<T> {
    let p = g.positions();
    let np = g.batch * p;
    let sample = x.len() / g.batch;
    let mut cols = vec![T::zero(); g.patch() * np];
    for (taps, row) in table.chunks_exact(p).zip(cols.chunks_exact_mut(np)) {
        if p >= 8 {
            for (n, dst) in row.chunks_exact_mut(p).enumerate() {
                let src = &x[n * sample..(n + 1) * sample];
                for (d, &t) in dst.iter_mut().zip(taps) {
                    if t != PAD {
                        *d = src[t];
                    }
                }
            }
        } else {
            for (q, &t) in taps.iter().enumerate() {
                if t == PAD {
                    continue;
                }
                for (d, &v) in row[q..].iter_mut().step_by(p).zip(x[t..].iter().step_by(sample)) {
                    *d = v;
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, table: &[usize]) -> Vec<T> {
    let p = g.positions();
    let np = g.batch * p;
    let sample = g.cin * g.input.iter().product::<usize>();
    let mut dx = vec![T::zero(); g.batch * sample];
    for (taps, row) in table.chunks_exact(p).zip(cols.chunks_exact(np)) {
        if p >= 8 {
            for (n, src) in row.chunks_exact(p).enumerate() {
                let dst = &mut dx[n * sample..(n + 1) * sample];
                for (&v, &t) in src.iter().zip(taps) {
                    if t != PAD {
                        dst[t] += v;
                    }
                }
            }
        } else {
            for (q, &t) in taps.iter().enumerate() {
                if t == PAD {
                    continue;
                }
                for (d, &v) in dx[t..].iter_mut().step_by(sample).zip(row[q..].iter().step_by(p)) {
                    *d += v;
                }
            }
        }
    }
    dx
}

/// Forward output plus the patch matrix when the weight gradient will
/// need it.
fn conv_forward<T: Float>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let cols = im2col(x, g, &tap_table(g));
    let (p, ck, cout) = (g.positions(), g.patch(), g.cout);
    let np = g.batch * p;
    // (cout x ck) * (ck x np)
    let mut prod = vec![T::zero(); cout * np];
    T::gemm(
        cout,
        ck,
        np,
        T::one(),
        w,
        (ck, 1),
        &cols,
        (np, 1),
        T::zero(),
        &mut prod,
        (np, 1),
    );
    let mut out = vec![T::zero(); g.batch * cout * p];
    for co in 0..cout {
        let b = bias.map_or(T::zero(), |b| b[co]);
        for n in 0..g.batch {
            let src = &prod[co * np + n * p..co * np + (n + 1) * p];
            let dst = &mut out[(n * cout + co) * p..(n * cout + co + 1) * p];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + b;
            }
        }
    }
    (out, keep_cols.then_some(cols))
}

#[allow(clippy::type_complexity)]
pub(crate) fn conv_backward<T: Float>(
    cols: Option<&[T]>,
    x: &[T],
    w: &[T],
    g: &ConvGeom,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (p, ck, cout) = (g.positions(), g.patch(), g.cout);
    let np = g.batch * p;
    // dy as (cout x np)
    let mut dy_t = vec![T::zero(); cout * np];
    for n in 0..g.batch {
        for co in 0..cout {
            dy_t[co * np + n * p..co * np + (n + 1) * p]
                .copy_from_slice(&dy[(n * cout + co) * p..(n * cout + co + 1) * p]);
        }
    }
    let db = need_db.then(|| dy_t.chunks_exact(np).map(|row| row.iter().copied().sum()).collect());
    let table = (need_dx || (need_dw && cols.is_none())).then(|| tap_table(g));
    let dw = need_dw.then(|| {
        let rebuilt;
        let cols = match cols {
            Some(c) => c,
            None => {
                rebuilt = im2col(x, g, table.as_deref().expect("table built"));
                &rebuilt
            }
        };
        let mut dw = vec![T::zero(); cout * ck];
        T::gemm(
            cout,
            np,
            ck,
            T::one(),
            &dy_t,
            (np, 1),
            cols,
            (1, np),
            T::zero(),
            &mut dw,
            (ck, 1),
        );
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); ck * np];
        T::gemm(
            ck,
            cout,
            np,
            T::one(),
            w,
            (1, ck),
            &dy_t,
            (np, 1),
            T::zero(),
            &mut dcols,
            (np, 1),
        );
        col2im(&dcols, g, table.as_deref().expect("table built"))
    });
    (dx, dw, db)
}

impl<T: Float> Graph<T> {
    fn conv_impl(
        &mut self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(shape_err(
                    op,
                    format!("bias shape {:?}, expected [{}]", self.shape(b), geom.cout),
                ));
            }
        }
        let (data, cols) = conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
            self.requires_grad(w),
        );
        let value = Tensor::new(out_shape, data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv { x, w, b, geom, cols }, &inputs))
    }

    /// Cross-correlation of `x: (b, cin, h, w)` with `weight: (cout, cin, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected rank-4 input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        let geom = ConvGeom::new(
            "conv2d",
            &[xs[0], xs[1], 1, xs[2], xs[3]],
            &[ws[0], ws[1], 1, ws[2], ws[3]],
            [1, stride, stride],
            [0, pad, pad],
        )?;
        let out = vec![geom.batch, geom.cout, geom.output[1], geom.output[2]];
        self.conv_impl("conv2d", x, weight, bias, geom, out)
    }

    /// Cross-correlation of `x: (b, cin, d, h, w)` with `weight: (cout, cin, kd, kh, kw)`.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 5 || ws.len() != 5 {
            return Err(shape_err(
                "conv3d",
                format!("expected rank-5 input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        let geom = ConvGeom::new("conv3d", &xs, &ws, [stride; 3], [pad; 3])?;
        let out = vec![geom.batch, geom.cout, geom.output[0], geom.output[1], geom.output[2]];
        self.conv_impl("conv3d", x, weight, bias, geom, out)
    }
}
