//! Per-channel batch normalization over every non-channel dim.

use super::graph::Op;
use super::{invalid, shape_err, Float, Graph, Result, Tensor, Var};

/// Whether normalization layers use batch statistics or running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Statistics of one training-mode batch, per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divides by the element count).
    pub var: Vec<T>,
    pub count: usize,
}

/// Exponential running averages used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`, with the
    /// unbiased batch variance.
    pub fn update(&mut self, stats: &BatchStats<T>, momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        let keep = T::one() - m;
        let n = stats.count as f64;
        let correction = T::from_f64_lossy(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + m * stats.mean[c];
            self.var[c] = keep * self.var[c] + m * stats.var[c] * correction;
        }
    }
}

fn layout(op: &'static str, shape: &[usize], channels: usize) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(op, format!("input {shape:?} has no channel dim")));
    }
    if shape[1] != channels {
        return Err(shape_err(
            op,
            format!("input has {} channels, affine terms have {channels}", shape[1]),
        ));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

pub(crate) fn train_backward<T: Float>(
    shape: &[usize],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, inner) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let m = T::from_usize(n * inner).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                dbeta[ch] += dy[i];
                dgamma[ch] += dy[i] * xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let k = gamma[ch] * inv_std[ch] / m;
            for i in off..off + inner {
                dx[i] = k * (m * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn eval_backward<T: Float>(
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let shape = x.shape();
    let (n, c, inner) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let xd = x.data();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let k = gamma[ch] * inv_std[ch];
            for i in off..off + inner {
                dx[i] = dy[i] * k;
                dbeta[ch] += dy[i];
                dgamma[ch] += dy[i] * (xd[i] - mean[ch]) * inv_std[ch];
            }
        }
    }
    (dx, dgamma, dbeta)
}

impl<T: Float> Graph<T> {
    /// Normalizes with the statistics of this batch and returns them.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let channels = self.shape(gamma)[0];
        if self.shape(beta) != [channels] || self.shape(gamma).len() != 1 {
            return Err(shape_err("batchnorm", "gamma and beta must both have shape [channels]"));
        }
        let shape = self.shape(x).to_vec();
        let (n, c, inner) = layout("batchnorm", &shape, channels)?;
        let count = n * inner;
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * inner;
                s += xd[off..off + inner].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mu = s / count as f64;
            let mut ss = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * inner;
                ss += xd[off..off + inner]
                    .iter()
                    .map(|v| (v.as_f64() - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = T::from_f64_lossy(mu);
            var[ch] = T::from_f64_lossy(ss / count as f64);
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64_lossy(eps)).sqrt())
            .collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * gd[ch] + bd[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let v = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &RunningStats<T>, eps: f64) -> Result<Var> {
        let channels = self.shape(gamma)[0];
        if self.shape(beta) != [channels] || stats.mean.len() != channels || stats.var.len() != channels {
            return Err(shape_err(
                "batchnorm",
                "gamma, beta and running stats must agree on channel count",
            ));
        }
        let shape = self.shape(x).to_vec();
        let (n, c, inner) = layout("batchnorm", &shape, channels)?;
        let inv_std: Vec<T> = stats
            .var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64_lossy(eps)).sqrt())
            .collect();
        let mean = stats.mean.clone();
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    out[i] = (xd[i] - mean[ch]) * inv_std[ch] * gd[ch] + bd[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mode-dispatching batch normalization; updates `stats` in train mode.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(invalid("batchnorm", format!("eps must be positive, got {eps}")));
        }
        match mode {
            Mode::Train => {
                let (y, batch) = self.batchnorm_train(x, gamma, beta, eps)?;
                stats.update(&batch, momentum);
                Ok(y)
            }
            Mode::Eval => self.batchnorm_eval(x, gamma, beta, stats, eps),
        }
    }
}
