//! Non-monotonic processing steps.
//!
//! A step owns `K` processing paths. Each path applies the same `T` stage
//! kinds in a different order, every path with its own parameters. The
//! contrasting module averages the `K` path outputs, passes the average
//! through a 3-D convolution and batch normalization, and the result is
//! subtracted from every path output:
//!
//! ```text
//! P_i = f_{i_T}( ... f_{i_1}(D_i))
//! C   = bn(conv3(mean(P_1 .. P_K)))
//! D'_i = P_i - C
//! ```
//!
//! Step states use the layout `(batch, row, col, channel, height, width)`.
//! A stage reads and writes only its target axes; every other axis is
//! folded into the batch dim while the stage runs.

use std::fmt;

use thiserror::Error;

use crate::nn::{BatchNorm, Conv, ParamBuilder, ResidualBlock, Session};
use crate::tensor::{Float, Result as TensorResult, TensorError, Var};

#[derive(Debug, Error)]
pub enum NonMonoError {
    #[error("stage targets overlap: {0} and {1}")]
    OverlappingTargets(String, String),
    #[error("a step needs at least one stage")]
    NoStages,
    #[error("signature mismatch: {0}")]
    Signature(String),
    #[error("expected {expected} path inputs, got {got}")]
    PathCount { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NonMonoError>;

/// Named axes of a step state other than batch and channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Axis {
    Row,
    Col,
    Height,
    Width,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Row, Axis::Col, Axis::Height, Axis::Width];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    /// Position of the axis in the state layout.
    fn state_dim(self) -> usize {
        match self {
            Axis::Row => 1,
            Axis::Col => 2,
            Axis::Height => 4,
            Axis::Width => 5,
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Non-empty set of axes a stage operates on.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct DimSubset(u8);

impl DimSubset {
    pub fn new(axes: &[Axis]) -> Option<Self> {
        let bits = axes.iter().fold(0u8, |acc, a| acc | a.bit());
        (bits != 0).then_some(Self(bits))
    }

    pub fn row_col() -> Self {
        Self(Axis::Row.bit() | Axis::Col.bit())
    }

    pub fn height_width() -> Self {
        Self(Axis::Height.bit() | Axis::Width.bit())
    }

    pub fn contains(self, axis: Axis) -> bool {
        self.0 & axis.bit() != 0
    }

    /// Member axes in state-layout order.
    pub fn axes(self) -> Vec<Axis> {
        Axis::ALL.into_iter().filter(|a| self.contains(*a)).collect()
    }

    pub fn is_disjoint(self, other: DimSubset) -> bool {
        self.0 & other.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Debug for DimSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.axes())
    }
}

/// Channel count and axis extents of a step state (batch excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Signature {
    pub channels: usize,
    /// Extents of `[row, col, height, width]`.
    pub extents: [usize; 4],
}

impl Signature {
    pub fn new(channels: usize, row: usize, col: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            extents: [row, col, height, width],
        }
    }

    pub fn extent(&self, axis: Axis) -> usize {
        self.extents[axis.slot()]
    }

    /// Full state shape for a batch size.
    pub fn state_shape(&self, batch: usize) -> Vec<usize> {
        let [r, c, h, w] = self.extents;
        vec![batch, r, c, self.channels, h, w]
    }
}

/// A parameterized map over folded tensors `(fold, channel, targets...)`.
pub trait FoldedTransform<T: Float> {
    fn forward(&self, s: &mut Session<T>, x: Var) -> TensorResult<Var>;
}

/// Stage kind, instantiated once per path with that path's parameters.
pub trait StageSpec<T: Float> {
    fn name(&self) -> String;

    fn target(&self) -> DimSubset;

    /// Output channel count and target extents for an input signature.
    fn output(&self, channels: usize, target_extents: &[usize]) -> Result<(usize, Vec<usize>)>;

    fn build(
        &self,
        b: &mut ParamBuilder<T>,
        channels: usize,
        target_extents: &[usize],
    ) -> Result<Box<dyn FoldedTransform<T>>>;
}

/// A stage bound to a concrete input signature.
pub struct StageProcessor<T: Float> {
    pub name: String,
    pub target: DimSubset,
    pub input: Signature,
    pub output: Signature,
    transform: Box<dyn FoldedTransform<T>>,
}

impl<T: Float> StageProcessor<T> {
    pub fn instantiate(spec: &dyn StageSpec<T>, input: Signature, b: &mut ParamBuilder<T>) -> Result<Self> {
        let target = spec.target();
        let target_extents: Vec<usize> = target.axes().iter().map(|a| input.extent(*a)).collect();
        let (channels, out_extents) = spec.output(input.channels, &target_extents)?;
        if out_extents.len() != target_extents.len() {
            return Err(NonMonoError::Signature(format!(
                "stage {} reports {} target extents for {} target axes",
                spec.name(),
                out_extents.len(),
                target_extents.len()
            )));
        }
        let mut output = input;
        output.channels = channels;
        for (axis, e) in target.axes().into_iter().zip(out_extents) {
            output.extents[axis.slot()] = e;
        }
        let transform = spec.build(b, input.channels, &target_extents)?;
        Ok(Self {
            name: spec.name(),
            target,
            input,
            output,
            transform,
        })
    }

    /// Dim order that moves non-target axes next to batch and targets last.
    fn fold_perm(&self) -> Vec<usize> {
        let mut perm = vec![0];
        perm.extend(
            Axis::ALL
                .iter()
                .filter(|a| !self.target.contains(**a))
                .map(|a| a.state_dim()),
        );
        perm.push(3);
        perm.extend(self.target.axes().iter().map(|a| a.state_dim()));
        perm
    }

    pub fn apply(&self, s: &mut Session<T>, state: Var) -> TensorResult<Var> {
        let shape = s.graph.shape(state).to_vec();
        let batch = shape[0];
        let perm = self.fold_perm();
        let permuted = s.graph.permute(state, &perm)?;
        let kept: Vec<usize> = perm[1..perm.len() - 1 - self.target.len()]
            .iter()
            .map(|&d| shape[d])
            .collect();
        let fold = batch * kept.iter().product::<usize>();
        let mut folded_shape = vec![fold, shape[3]];
        folded_shape.extend(self.target.axes().iter().map(|a| shape[a.state_dim()]));
        let folded = s.graph.reshape(permuted, &folded_shape)?;

        let out = self.transform.forward(s, folded)?;

        let out_shape = s.graph.shape(out).to_vec();
        let mut unfolded_shape = vec![batch];
        unfolded_shape.extend(&kept);
        unfolded_shape.extend(&out_shape[1..]);
        let unfolded = s.graph.reshape(out, &unfolded_shape)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        s.graph.permute(unfolded, &inverse)
    }
}

/// All `t!` orderings of `0..t`, in lexicographic order.
pub fn permutations(t: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(t), &mut vec![false; t], &mut out);
    out
}

/// One processing path: an ordering of the step's stages, 1-based index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathSpec {
    pub index: usize,
    pub order: Vec<usize>,
}

/// Lists every ordering of `stages` after checking that their target
/// subsets are pairwise disjoint.
pub fn enumerate_paths<T: Float>(stages: &[&dyn StageSpec<T>]) -> Result<Vec<PathSpec>> {
    if stages.is_empty() {
        return Err(NonMonoError::NoStages);
    }
    for (i, a) in stages.iter().enumerate() {
        for b in &stages[i + 1..] {
            if !a.target().is_disjoint(b.target()) {
                return Err(NonMonoError::OverlappingTargets(a.name(), b.name()));
            }
        }
    }
    Ok(orders_to_paths(permutations(stages.len())))
}

pub fn orders_to_paths(orders: Vec<Vec<usize>>) -> Vec<PathSpec> {
    orders
        .into_iter()
        .enumerate()
        .map(|(i, order)| PathSpec { index: i + 1, order })
        .collect()
}

/// `bn(conv3d(mean(P_1..P_K)))` over depth = row x col, height, width.
pub struct Contrast {
    conv: Conv,
    bn: BatchNorm,
    channels: usize,
}

impl Contrast {
    pub fn new<T: Float>(b: &mut ParamBuilder<T>, channels: usize) -> Self {
        b.push_scope("contrast");
        let conv = Conv::new(b, "conv3d", channels, channels, 3, 1, 1, 3);
        let bn = BatchNorm::new(b, "bn", channels);
        b.pop_scope();
        Self { conv, bn, channels }
    }

    pub fn conv(&self) -> &Conv {
        &self.conv
    }

    pub fn bn(&self) -> &BatchNorm {
        &self.bn
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, outputs: &[Var]) -> Result<Var> {
        if outputs.len() < 2 {
            return Err(NonMonoError::PathCount {
                expected: 2,
                got: outputs.len(),
            });
        }
        let mean = s.graph.mean_of_list(outputs)?;
        let shape = s.graph.shape(mean).to_vec();
        let [b, r, c, ch, h, w] = [shape[0], shape[1], shape[2], shape[3], shape[4], shape[5]];
        if ch != self.channels {
            return Err(NonMonoError::Signature(format!(
                "contrast built for {} channels, got {ch}",
                self.channels
            )));
        }
        let x = s.graph.reshape(mean, &[b, r * c, ch, h, w])?;
        let x = s.graph.permute(x, &[0, 2, 1, 3, 4])?;
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        let y = s.graph.permute(y, &[0, 2, 1, 3, 4])?;
        Ok(s.graph.reshape(y, &shape)?)
    }
}

/// One non-monotonic step: `K` paths with independent parameters and an
/// optional contrasting module (absent only for single-path steps).
pub struct NonMonoStep<T: Float> {
    pub index: usize,
    pub paths: Vec<(PathSpec, Vec<StageProcessor<T>>)>,
    pub contrast: Option<Contrast>,
    pub input: Signature,
    pub output: Signature,
}

impl<T: Float> NonMonoStep<T> {
    /// Instantiates every path of `paths` over `stages`. A contrasting
    /// module is attached when there are at least two paths.
    pub fn build(
        index: usize,
        stages: &[&dyn StageSpec<T>],
        paths: Vec<PathSpec>,
        input: Signature,
        b: &mut ParamBuilder<T>,
    ) -> Result<Self> {
        if stages.is_empty() {
            return Err(NonMonoError::NoStages);
        }
        b.push_scope(format!("step{index}"));
        let mut built = Vec::with_capacity(paths.len());
        let mut output: Option<Signature> = None;
        for path in paths {
            if path.order.len() != stages.len() {
                b.pop_scope();
                return Err(NonMonoError::Signature(format!(
                    "path {} orders {} stages, step has {}",
                    path.index,
                    path.order.len(),
                    stages.len()
                )));
            }
            b.push_scope(format!("path{}", path.index));
            let mut sig = input;
            let mut procs = Vec::with_capacity(stages.len());
            for (pos, &k) in path.order.iter().enumerate() {
                b.push_scope(format!("stage{pos}"));
                let p = StageProcessor::instantiate(stages[k], sig, b);
                b.pop_scope();
                let p = match p {
                    Ok(p) => p,
                    Err(e) => {
                        b.pop_scope();
                        b.pop_scope();
                        return Err(e);
                    }
                };
                sig = p.output;
                procs.push(p);
            }
            b.pop_scope();
            match output {
                None => output = Some(sig),
                Some(o) if o != sig => {
                    b.pop_scope();
                    return Err(NonMonoError::Signature(format!(
                        "path {} ends at {sig:?}, earlier paths end at {o:?}",
                        path.index
                    )));
                }
                _ => {}
            }
            built.push((path, procs));
        }
        let output = output.ok_or(NonMonoError::PathCount { expected: 1, got: 0 })?;
        let contrast = (built.len() >= 2).then(|| Contrast::new(b, output.channels));
        b.pop_scope();
        Ok(Self {
            index,
            paths: built,
            contrast,
            input,
            output,
        })
    }

    pub fn k(&self) -> usize {
        self.paths.len()
    }

    /// Applies path `i` (0-based) to its input state.
    pub fn apply_path(&self, s: &mut Session<T>, i: usize, d: Var) -> Result<Var> {
        let mut x = d;
        for p in &self.paths[i].1 {
            x = p.apply(s, x)?;
        }
        Ok(x)
    }

    /// `D'_i = P_i - C` for every path.
    pub fn forward(&self, s: &mut Session<T>, inputs: &[Var]) -> Result<Vec<Var>> {
        if inputs.len() != self.k() {
            return Err(NonMonoError::PathCount {
                expected: self.k(),
                got: inputs.len(),
            });
        }
        let outputs: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, &d)| self.apply_path(s, i, d))
            .collect::<Result<_>>()?;
        let Some(contrast) = &self.contrast else {
            return Ok(outputs);
        };
        let c = contrast.forward(s, &outputs)?;
        outputs.iter().map(|&p| Ok(s.graph.sub(p, c)?)).collect()
    }
}

/// Validated sequence of steps sharing one path count.
pub struct StepStack<T: Float> {
    pub steps: Vec<NonMonoStep<T>>,
    k: usize,
}

impl<T: Float> StepStack<T> {
    /// `k` is the number of path copies made of the stack input; it must
    /// equal every step's path count.
    pub fn new(steps: Vec<NonMonoStep<T>>, k: usize) -> Result<Self> {
        for w in steps.windows(2) {
            if w[0].output != w[1].input {
                return Err(NonMonoError::Signature(format!(
                    "step {} produces {:?} but step {} expects {:?}",
                    w[0].index, w[0].output, w[1].index, w[1].input
                )));
            }
        }
        if let Some(step) = steps.iter().find(|s| s.k() != k) {
            return Err(NonMonoError::PathCount {
                expected: k,
                got: step.k(),
            });
        }
        Ok(Self { steps, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Copies `d` once per path and runs every step in sequence.
    pub fn forward(&self, s: &mut Session<T>, d: Var) -> Result<Vec<Var>> {
        let mut states = vec![d; self.k];
        for step in &self.steps {
            states = step.forward(s, &states)?;
        }
        Ok(states)
    }

    /// Like [`StepStack::forward`] but also records every path's output shape.
    pub fn forward_traced(
        &self,
        s: &mut Session<T>,
        d: Var,
        trace: &mut Vec<(String, Vec<usize>)>,
    ) -> Result<Vec<Var>> {
        let mut states = vec![d; self.k];
        for step in &self.steps {
            states = step.forward(s, &states)?;
            for (i, &st) in states.iter().enumerate() {
                trace.push((format!("step{}.path{}", step.index, i + 1), s.graph.shape(st).to_vec()));
            }
        }
        Ok(states)
    }
}

/// Whether a residual stage keeps its channel count or sets a new one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channels {
    Same,
    Fixed(usize),
}

/// Residual block over exactly two target axes.
pub struct ResBlockStage {
    pub target: DimSubset,
    pub channels: Channels,
    pub stride: usize,
}

struct ResBlockTransform(ResidualBlock);

impl<T: Float> FoldedTransform<T> for ResBlockTransform {
    fn forward(&self, s: &mut Session<T>, x: Var) -> TensorResult<Var> {
        self.0.forward(s, x)
    }
}

impl<T: Float> StageSpec<T> for ResBlockStage {
    fn name(&self) -> String {
        let c = match self.channels {
            Channels::Same => "same".to_string(),
            Channels::Fixed(n) => n.to_string(),
        };
        format!("resblock(c={c},s={})@{:?}", self.stride, self.target)
    }

    fn target(&self) -> DimSubset {
        self.target
    }

    fn output(&self, channels: usize, target_extents: &[usize]) -> Result<(usize, Vec<usize>)> {
        if target_extents.len() != 2 {
            return Err(NonMonoError::Signature(format!(
                "residual stage needs two target axes, got {}",
                target_extents.len()
            )));
        }
        let out_c = match self.channels {
            Channels::Same => channels,
            Channels::Fixed(n) => n,
        };
        let ext = target_extents.iter().map(|&n| (n - 1) / self.stride + 1).collect();
        Ok((out_c, ext))
    }

    fn build(
        &self,
        b: &mut ParamBuilder<T>,
        channels: usize,
        target_extents: &[usize],
    ) -> Result<Box<dyn FoldedTransform<T>>> {
        let (out_c, _) = StageSpec::<T>::output(self, channels, target_extents)?;
        Ok(Box::new(ResBlockTransform(ResidualBlock::new(
            b,
            "block",
            channels,
            out_c,
            self.stride,
        ))))
    }
}

/// Averages over the target axes, keeping them with extent one.
pub struct MeanPoolStage {
    pub target: DimSubset,
}

struct MeanPoolTransform;

impl<T: Float> FoldedTransform<T> for MeanPoolTransform {
    fn forward(&self, s: &mut Session<T>, x: Var) -> TensorResult<Var> {
        let shape = s.graph.shape(x).to_vec();
        let dims: Vec<usize> = (2..shape.len()).collect();
        let m = s.graph.mean_dims(x, &dims)?;
        let mut keep = vec![shape[0], shape[1]];
        keep.extend(std::iter::repeat_n(1, shape.len() - 2));
        s.graph.reshape(m, &keep)
    }
}

impl<T: Float> StageSpec<T> for MeanPoolStage {
    fn name(&self) -> String {
        format!("meanpool@{:?}", self.target)
    }

    fn target(&self) -> DimSubset {
        self.target
    }

    fn output(&self, channels: usize, target_extents: &[usize]) -> Result<(usize, Vec<usize>)> {
        Ok((channels, vec![1; target_extents.len()]))
    }

    fn build(&self, _: &mut ParamBuilder<T>, _: usize, _: &[usize]) -> Result<Box<dyn FoldedTransform<T>>> {
        Ok(Box::new(MeanPoolTransform))
    }
}

/// Leaves its input untouched.
pub struct IdentityStage {
    pub target: DimSubset,
}

struct IdentityTransform;

impl<T: Float> FoldedTransform<T> for IdentityTransform {
    fn forward(&self, _: &mut Session<T>, x: Var) -> TensorResult<Var> {
        Ok(x)
    }
}

impl<T: Float> StageSpec<T> for IdentityStage {
    fn name(&self) -> String {
        format!("identity@{:?}", self.target)
    }

    fn target(&self) -> DimSubset {
        self.target
    }

    fn output(&self, channels: usize, target_extents: &[usize]) -> Result<(usize, Vec<usize>)> {
        Ok((channels, target_extents.to_vec()))
    }

    fn build(&self, _: &mut ParamBuilder<T>, _: usize, _: &[usize]) -> Result<Box<dyn FoldedTransform<T>>> {
        Ok(Box::new(IdentityTransform))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBuilder;
    use crate::tensor::{Mode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn builder() -> ParamBuilder<f64> {
        ParamBuilder::new(ChaCha8Rng::seed_from_u64(11))
    }

    fn axis_stage(axis: Axis) -> IdentityStage {
        IdentityStage {
            target: DimSubset::new(&[axis]).unwrap(),
        }
    }

    #[test]
    fn path_count_is_factorial() {
        let stages = [
            axis_stage(Axis::Row),
            axis_stage(Axis::Col),
            axis_stage(Axis::Height),
            axis_stage(Axis::Width),
        ];
        let mut fact = 1;
        for t in 1..=4 {
            fact *= t;
            let refs: Vec<&dyn StageSpec<f64>> = stages[..t].iter().map(|s| s as &dyn StageSpec<f64>).collect();
            let paths = enumerate_paths(&refs).unwrap();
            assert_eq!(paths.len(), fact);
            let mut orders: Vec<_> = paths.iter().map(|p| p.order.clone()).collect();
            let sorted = orders.clone();
            orders.sort();
            assert_eq!(orders, sorted, "lexicographic");
            orders.dedup();
            assert_eq!(orders.len(), fact, "distinct");
        }
    }

    #[test]
    fn two_stages_give_both_orders() {
        let a = axis_stage(Axis::Row);
        let b = axis_stage(Axis::Height);
        let paths = enumerate_paths::<f64>(&[&a, &b]).unwrap();
        assert_eq!(
            paths,
            vec![
                PathSpec {
                    index: 1,
                    order: vec![0, 1]
                },
                PathSpec {
                    index: 2,
                    order: vec![1, 0]
                }
            ]
        );
    }

    #[test]
    fn overlapping_targets_rejected() {
        let a = IdentityStage {
            target: DimSubset::height_width(),
        };
        let b = IdentityStage {
            target: DimSubset::new(&[Axis::Width]).unwrap(),
        };
        assert!(matches!(
            enumerate_paths::<f64>(&[&a, &b]),
            Err(NonMonoError::OverlappingTargets(..))
        ));
        assert!(matches!(enumerate_paths::<f64>(&[]), Err(NonMonoError::NoStages)));
    }

    #[test]
    fn fold_keeps_non_target_extents() {
        let mut b = builder();
        let stage = ResBlockStage {
            target: DimSubset::row_col(),
            channels: Channels::Fixed(5),
            stride: 1,
        };
        let proc = StageProcessor::instantiate(&stage, Signature::new(3, 3, 3, 4, 2), &mut b).unwrap();
        assert_eq!(proc.output, Signature::new(5, 3, 3, 4, 2));
        let ParamBuilder {
            params, mut buffers, ..
        } = b;
        let mut s = Session::new(&params, &mut buffers, Mode::Train, false);
        let x = s
            .graph
            .constant(Tensor::from_fn(&[2, 3, 3, 3, 4, 2], |i| (i % 5) as f64));
        let y = proc.apply(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[2, 3, 3, 5, 4, 2]);
    }

    #[test]
    fn identity_paths_reproduce_input() {
        let mut b = builder();
        let a = axis_stage(Axis::Row);
        let c = axis_stage(Axis::Width);
        let paths = enumerate_paths::<f64>(&[&a, &c]).unwrap();
        let step = NonMonoStep::build(0, &[&a, &c], paths, Signature::new(2, 3, 3, 2, 2), &mut b).unwrap();
        let ParamBuilder {
            params, mut buffers, ..
        } = b;
        let mut s = Session::new(&params, &mut buffers, Mode::Eval, false);
        let xt = Tensor::from_fn(&[1, 3, 3, 2, 2, 2], |i| i as f64);
        let x = s.graph.constant(xt.clone());
        for i in 0..2 {
            let p = step.apply_path(&mut s, i, x).unwrap();
            assert_eq!(s.graph.value(p), &xt);
        }
    }

    #[test]
    fn commuting_mean_pools_agree() {
        let mut b = builder();
        let rc = MeanPoolStage {
            target: DimSubset::row_col(),
        };
        let hw = MeanPoolStage {
            target: DimSubset::height_width(),
        };
        let paths = enumerate_paths::<f64>(&[&rc, &hw]).unwrap();
        let step = NonMonoStep::build(0, &[&rc, &hw], paths, Signature::new(3, 3, 3, 4, 4), &mut b).unwrap();
        let ParamBuilder {
            params, mut buffers, ..
        } = b;
        let mut s = Session::new(&params, &mut buffers, Mode::Eval, false);
        let x = s.graph.constant(Tensor::from_fn(&[2, 3, 3, 3, 4, 4], |i| {
            ((i * 7919) % 101) as f64 / 10.0
        }));
        let p1 = step.apply_path(&mut s, 0, x).unwrap();
        let p2 = step.apply_path(&mut s, 1, x).unwrap();
        assert_eq!(s.graph.shape(p1), &[2, 1, 1, 3, 1, 1]);
        for (a, b) in s.graph.value(p1).data().iter().zip(s.graph.value(p2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_path_outputs_rejected_at_construction() {
        let mut b = builder();
        let same = ResBlockStage {
            target: DimSubset::height_width(),
            channels: Channels::Same,
            stride: 1,
        };
        let wide = ResBlockStage {
            target: DimSubset::height_width(),
            channels: Channels::Fixed(4),
            stride: 2,
        };
        // Explicit orders where the second path skips the widening stage.
        let paths = orders_to_paths(vec![vec![0, 1], vec![0, 0]]);
        let err = NonMonoStep::build(0, &[&same, &wide], paths, Signature::new(2, 3, 3, 4, 4), &mut b);
        assert!(matches!(err, Err(NonMonoError::Signature(_))));
    }

    #[test]
    fn stack_rejects_signature_gap() {
        let mut b = builder();
        let id = IdentityStage {
            target: DimSubset::height_width(),
        };
        let paths = || orders_to_paths(vec![vec![0], vec![0]]);
        let s1 = NonMonoStep::build(0, &[&id], paths(), Signature::new(2, 3, 3, 4, 4), &mut b).unwrap();
        let s2 = NonMonoStep::build(1, &[&id], paths(), Signature::new(3, 3, 3, 4, 4), &mut b).unwrap();
        assert!(StepStack::new(vec![s1, s2], 2).is_err());
    }
}
