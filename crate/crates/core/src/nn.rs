//! Parameter storage and the layers the model is assembled from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Float, Gradients, Graph, Mode, Result, RunningStats, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Trainable tensors in a declared, stable order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn push(&mut self, name: String, value: Tensor<T>) -> ParamId {
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Non-trainable normalization statistics.
#[derive(Clone, Debug, Default)]
pub struct BufferStore<T> {
    names: Vec<String>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Float> BufferStore<T> {
    pub fn push(&mut self, name: String, stats: RunningStats<T>) -> BufferId {
        self.names.push(name);
        self.stats.push(stats);
        BufferId(self.stats.len() - 1)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }
}

/// Allocates parameters with deterministic initialization.
pub struct ParamBuilder<T> {
    pub params: ParamStore<T>,
    pub buffers: BufferStore<T>,
    rng: ChaCha8Rng,
    scope: Vec<String>,
}

impl<T: Float> ParamBuilder<T> {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            params: ParamStore::default(),
            buffers: BufferStore::default(),
            rng,
            scope: Vec::new(),
        }
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    fn qualified(&self, name: &str) -> String {
        let mut s = self.scope.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    /// Kaiming-uniform: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)));
        let q = self.qualified(name);
        self.params.push(q, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let q = self.qualified(name);
        self.params.push(q, Tensor::full(shape, T::from_f64_lossy(value)))
    }

    pub fn running_stats(&mut self, name: &str, channels: usize) -> BufferId {
        let q = self.qualified(name);
        self.buffers.push(q, RunningStats::new(channels))
    }
}

/// One forward pass: a fresh graph bound to a model's parameters.
pub struct Session<'a, T> {
    pub graph: Graph<T>,
    params: &'a ParamStore<T>,
    buffers: &'a mut BufferStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
}

impl<'a, T: Float> Session<'a, T> {
    pub fn new(params: &'a ParamStore<T>, buffers: &'a mut BufferStore<T>, mode: Mode, track_grads: bool) -> Self {
        Self {
            graph: Graph::new(),
            params,
            buffers,
            bound: vec![None; params.len()],
            mode,
            track_grads,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Graph leaf for a parameter, inserted once per session.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.params.get(id).clone(), self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn stats_mut(&mut self, id: BufferId) -> &mut RunningStats<T> {
        &mut self.buffers.stats_mut()[id.0]
    }

    /// Gradients for every parameter in store order; zeros where unused.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, b)| match b.and_then(|v| grads.take(v)) {
                Some(g) => g,
                None => Tensor::zeros(self.params.values()[i].shape()),
            })
            .collect()
    }
}

/// 2-D or 3-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
    spatial: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        b: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        spatial: usize,
    ) -> Self {
        assert!(spatial == 2 || spatial == 3);
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat_n(kernel, spatial));
        let fan_in = cin * kernel.pow(spatial as u32);
        let weight = b.kaiming(&format!("{name}.weight"), &shape, fan_in);
        let bias = b.constant(&format!("{name}.bias"), &[cout], 0.0);
        Self {
            weight,
            bias,
            stride,
            pad,
            spatial,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        if self.spatial == 2 {
            s.graph.conv2d(x, w, Some(b), self.stride, self.pad)
        } else {
            s.graph.conv3d(x, w, Some(b), self.stride, self.pad)
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    stats: BufferId,
}

impl BatchNorm {
    pub fn new<T: Float>(b: &mut ParamBuilder<T>, name: &str, channels: usize) -> Self {
        let gamma = b.constant(&format!("{name}.gamma"), &[channels], 1.0);
        let beta = b.constant(&format!("{name}.beta"), &[channels], 0.0);
        let stats = b.running_stats(name, channels);
        Self { gamma, beta, stats }
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let mode = s.mode;
        let stats = &mut s.buffers.stats_mut()[self.stats.0];
        s.graph.batchnorm(x, gamma, beta, stats, mode, BN_EPS, BN_MOMENTUM)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<T: Float>(b: &mut ParamBuilder<T>, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = b.kaiming(&format!("{name}.weight"), &[outputs, inputs], inputs);
        let bias = b.constant(&format!("{name}.bias"), &[outputs], 0.0);
        Self { weight, bias }
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.linear(x, w, Some(b))
    }
}

/// Basic two-convolution residual block with a strided 1x1 projection
/// shortcut whenever the shape changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    shortcut: Option<Conv>,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ResidualBlock {
    pub fn new<T: Float>(b: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        b.push_scope(name);
        let conv1 = Conv::new(b, "conv1", cin, cout, 3, stride, 1, 2);
        let bn1 = BatchNorm::new(b, "bn1", cout);
        let conv2 = Conv::new(b, "conv2", cout, cout, 3, 1, 1, 2);
        let bn2 = BatchNorm::new(b, "bn2", cout);
        let shortcut = (stride != 1 || cin != cout).then(|| Conv::new(b, "shortcut", cin, cout, 1, stride, 0, 2));
        b.pop_scope();
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
            cin,
            cout,
            stride,
        }
    }

    /// Output spatial extent for an input extent.
    pub fn out_extent(&self, n: usize) -> usize {
        (n + 2 - 3) / self.stride + 1
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(s, x)?;
        let y = self.bn1.forward(s, y)?;
        let y = s.graph.relu(y);
        let y = self.conv2.forward(s, y)?;
        let y = self.bn2.forward(s, y)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(s, x)?,
            None => x,
        };
        let sum = s.graph.add(y, skip)?;
        Ok(s.graph.relu(sum))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kaiming_bounds_and_determinism() {
        let build = || {
            let mut b = ParamBuilder::<f64>::new(ChaCha8Rng::seed_from_u64(3));
            let id = b.kaiming("w", &[8, 4, 3, 3], 36);
            b.params.get(id).clone()
        };
        let w = build();
        let bound = (6.0f64 / 36.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < bound));
        assert_eq!(w, build());
    }

    #[test]
    fn residual_block_shapes_and_shortcut() {
        let mut b = ParamBuilder::<f64>::new(ChaCha8Rng::seed_from_u64(1));
        let same = ResidualBlock::new(&mut b, "a", 4, 4, 1);
        let down = ResidualBlock::new(&mut b, "b", 4, 8, 2);
        assert!(same.shortcut.is_none());
        assert!(down.shortcut.is_some());
        let ParamBuilder {
            params, mut buffers, ..
        } = b;
        let mut s = Session::new(&params, &mut buffers, Mode::Train, true);
        let x = s
            .graph
            .constant(Tensor::from_fn(&[3, 4, 6, 6], |i| (i % 7) as f64 - 3.0));
        let y = same.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[3, 4, 6, 6]);
        let z = down.forward(&mut s, y).unwrap();
        assert_eq!(s.graph.shape(z), &[3, 8, 3, 3]);
        assert_eq!(down.out_extent(6), 3);
    }

    #[test]
    fn session_binds_each_param_once() {
        let mut b = ParamBuilder::<f64>::new(ChaCha8Rng::seed_from_u64(1));
        let lin = Linear::new(&mut b, "fc", 3, 2);
        let ParamBuilder {
            params, mut buffers, ..
        } = b;
        let mut s = Session::new(&params, &mut buffers, Mode::Eval, true);
        let x = s.graph.constant(Tensor::full(&[1, 3], 1.0));
        let y1 = lin.forward(&mut s, x).unwrap();
        let y2 = lin.forward(&mut s, x).unwrap();
        let sum = s.graph.add(y1, y2).unwrap();
        let root = s.graph.sum(sum);
        let mut grads = s.graph.backward(root).unwrap();
        let pg = s.param_grads(&mut grads);
        // d/dW of 2 * sum(W x) = 2 * x for each row
        assert_eq!(pg[0].data(), &[2.0; 6]);
        assert_eq!(pg[1].data(), &[2.0, 2.0]);
    }
}
