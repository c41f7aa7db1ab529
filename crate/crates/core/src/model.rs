//! The matrix classifier: shared stem, two stacked non-monotonic steps,
//! global pooling and an MLP head producing the probability that a
//! completed matrix is correct.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{BatchNorm, BufferStore, Conv, Linear, ParamBuilder, ParamStore, Session};
use crate::nonmono::{
    orders_to_paths, permutations, Channels, DimSubset, NonMonoError, NonMonoStep, PathSpec, ResBlockStage, Signature,
    StageSpec, StepStack,
};
use crate::tensor::{Float, Mode, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("panel size {got} does not match the model's {expected}")]
    PanelSize { expected: usize, got: usize },
    #[error("completed matrix: {0}")]
    Matrix(String),
    #[error(transparent)]
    NonMono(#[from] NonMonoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    pub panel_size: usize,
    pub stem_channels: usize,
    pub step1_channels: usize,
    pub step2_channels: usize,
    pub mlp_hidden: usize,
}

impl ModelConfig {
    /// Full-size layer table: 160-px panels, 64/128/256 channels.
    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            panel_size: 160,
            stem_channels: 64,
            step1_channels: 128,
            step2_channels: 256,
            mlp_hidden: 256,
        }
    }

    /// Desk scale: 32-px panels and a quarter of the channel widths.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            panel_size: 32,
            stem_channels: 16,
            step1_channels: 32,
            step2_channels: 64,
            mlp_hidden: 64,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.panel_size == 0 || !self.panel_size.is_multiple_of(16) {
            return Err(ModelError::InvalidConfig(format!(
                "panel size {} must be a positive multiple of 16",
                self.panel_size
            )));
        }
        if self.stem_channels == 0
            || self.step1_channels != 2 * self.stem_channels
            || self.step2_channels != 2 * self.step1_channels
        {
            return Err(ModelError::InvalidConfig(format!(
                "channels {}/{}/{} must follow the 1:2:4 ratio",
                self.stem_channels, self.step1_channels, self.step2_channels
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(ModelError::InvalidConfig("mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[serde(rename = "nonmono")]
    NonMonotonic,
    Monotonic,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::NonMonotonic => "nonmono",
            Variant::Monotonic => "monotonic",
        }
    }

    pub fn by_name(s: &str) -> Option<Self> {
        match s {
            "nonmono" => Some(Variant::NonMonotonic),
            "monotonic" => Some(Variant::Monotonic),
            _ => None,
        }
    }
}

/// A 3x3 matrix whose bottom-right panel holds a candidate answer.
///
/// Pixels are ink intensities in `[0, 1]` laid out `(row, col, 1, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletedMatrix {
    panel_size: usize,
    data: Vec<f32>,
}

impl CompletedMatrix {
    pub fn new(panel_size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 9 * panel_size * panel_size {
            return Err(ModelError::Matrix(format!(
                "{} values for 9 panels of {panel_size}x{panel_size}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ModelError::Matrix("values must lie in [0, 1]".into()));
        }
        Ok(Self { panel_size, data })
    }

    /// Builds from 8-bit grayscale panels (255 = white background).
    pub fn from_panels(panels: [&[u8]; 9], panel_size: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(9 * panel_size * panel_size);
        for p in panels {
            if p.len() != panel_size * panel_size {
                return Err(ModelError::Matrix(format!(
                    "panel has {} bytes, expected {}",
                    p.len(),
                    panel_size * panel_size
                )));
            }
            data.extend(p.iter().map(|&b| 1.0 - b as f32 / 255.0));
        }
        Ok(Self { panel_size, data })
    }

    pub fn panel_size(&self) -> usize {
        self.panel_size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Distinct grayscale panels `(n, 1, s, s)` plus, per completed matrix, the
/// indices of its nine panels in row-major matrix order.
#[derive(Clone, Debug)]
pub struct PanelBatch<T> {
    panels: Tensor<T>,
    layout: Option<Vec<usize>>,
}

impl<T: Float> PanelBatch<T> {
    /// Every matrix contributes its own nine panels.
    pub fn from_matrices(batch: &[CompletedMatrix]) -> Result<Self> {
        let Some(first) = batch.first() else {
            return Err(ModelError::Matrix("empty batch".into()));
        };
        let s = first.panel_size;
        let mut data = Vec::with_capacity(batch.len() * 9 * s * s);
        for m in batch {
            if m.panel_size != s {
                return Err(ModelError::PanelSize {
                    expected: s,
                    got: m.panel_size,
                });
            }
            data.extend(m.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Ok(Self {
            panels: Tensor::new(vec![batch.len() * 9, 1, s, s], data)?,
            layout: None,
        })
    }

    /// Items given as 8 context panels followed by 8 choice panels (8-bit,
    /// 255 = white). Each item expands to 8 completed matrices, one per
    /// choice, sharing the context panels.
    pub fn from_items<'a>(panel_size: usize, items: impl IntoIterator<Item = &'a [Vec<u8>]>) -> Result<Self> {
        let area = panel_size * panel_size;
        let mut data = Vec::new();
        let mut layout = Vec::new();
        for (n, panels) in items.into_iter().enumerate() {
            if panels.len() != 16 {
                return Err(ModelError::Matrix(format!(
                    "item {n} has {} panels, expected 16",
                    panels.len()
                )));
            }
            for p in panels {
                if p.len() != area {
                    return Err(ModelError::PanelSize {
                        expected: panel_size,
                        got: (p.len() as f64).sqrt() as usize,
                    });
                }
                data.extend(p.iter().map(|&b| T::from_f64_lossy(1.0 - b as f64 / 255.0)));
            }
            let base = n * 16;
            for choice in 0..8 {
                layout.extend(base..base + 8);
                layout.push(base + 8 + choice);
            }
        }
        if layout.is_empty() {
            return Err(ModelError::Matrix("empty batch".into()));
        }
        let count = data.len() / area;
        Ok(Self {
            panels: Tensor::new(vec![count, 1, panel_size, panel_size], data)?,
            layout: Some(layout),
        })
    }

    pub fn panels(&self) -> &Tensor<T> {
        &self.panels
    }

    pub fn matrices(&self) -> usize {
        match &self.layout {
            Some(l) => l.len() / 9,
            None => self.panels.shape()[0] / 9,
        }
    }
}

struct Stem {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
}

struct Head {
    fc1: Linear,
    fc2: Linear,
}

/// Everything but the parameter values: layer wiring and parameter ids.
pub struct ModelArch<T: Float> {
    stem: Stem,
    stack: StepStack<T>,
    head: Head,
    panel_size: usize,
}

pub type ShapeTrace = Vec<(String, Vec<usize>)>;

impl<T: Float> ModelArch<T> {
    pub fn stack(&self) -> &StepStack<T> {
        &self.stack
    }

    pub fn panel_size(&self) -> usize {
        self.panel_size
    }

    /// Probabilities `(matrices, 1)` for a batch of distinct panels.
    ///
    /// The stem runs once per distinct panel; `layout` then assembles the
    /// nine panels of every completed matrix.
    pub fn forward(&self, s: &mut Session<T>, batch: &PanelBatch<T>, trace: Option<&mut ShapeTrace>) -> Result<Var> {
        let mut scratch = Vec::new();
        let trace = trace.unwrap_or(&mut scratch);
        let shape = batch.panels.shape().to_vec();
        if shape[2] != self.panel_size || shape[3] != self.panel_size {
            return Err(ModelError::PanelSize {
                expected: self.panel_size,
                got: shape[2],
            });
        }
        let matrices = batch.matrices();
        trace.push(("input".into(), shape));
        let panels = s.graph.constant(batch.panels.clone());

        let x = self.stem.conv1.forward(s, panels)?;
        let x = self.stem.bn1.forward(s, x)?;
        let x = s.graph.relu(x);
        let x = s.graph.maxpool2d(x, 3, 2, 1)?;
        trace.push(("conv1".into(), s.graph.shape(x).to_vec()));
        let x = self.stem.conv2.forward(s, x)?;
        let x = self.stem.bn2.forward(s, x)?;
        let x = s.graph.relu(x);
        let x = s.graph.maxpool2d(x, 3, 2, 1)?;
        trace.push(("conv2".into(), s.graph.shape(x).to_vec()));

        let x = match &batch.layout {
            Some(layout) => s.graph.gather(x, layout)?,
            None => x,
        };
        let st = s.graph.shape(x).to_vec();
        let d = s.graph.reshape(x, &[matrices, 3, 3, st[1], st[2], st[3]])?;
        let states = self.stack.forward_traced(s, d, trace)?;

        let mut pooled = Vec::with_capacity(states.len());
        for (i, st) in states.into_iter().enumerate() {
            let v = s.graph.global_avg_pool(st, &[1, 2, 4, 5])?;
            trace.push((format!("pool.path{}", i + 1), s.graph.shape(v).to_vec()));
            pooled.push(v);
        }
        let features = if pooled.len() == 1 {
            pooled[0]
        } else {
            s.graph.concat(&pooled, 1)?
        };
        let h = self.head.fc1.forward(s, features)?;
        let h = s.graph.relu(h);
        let logit = self.head.fc2.forward(s, h)?;
        let p = s.graph.sigmoid(logit);
        trace.push(("mlp".into(), s.graph.shape(p).to_vec()));
        Ok(p)
    }
}

pub struct VarModel<T: Float> {
    config: ModelConfig,
    variant: Variant,
    widths: (usize, usize),
    params: ParamStore<T>,
    buffers: BufferStore<T>,
    arch: ModelArch<T>,
}

fn conv_count(cin: usize, cout: usize, k: usize, dims: u32) -> usize {
    cout * cin * k.pow(dims) + cout
}

fn resblock_count(cin: usize, cout: usize, stride: usize) -> usize {
    let shortcut = if stride != 1 || cin != cout {
        conv_count(cin, cout, 1, 2)
    } else {
        0
    };
    conv_count(cin, cout, 3, 2) + 2 * cout + conv_count(cout, cout, 3, 2) + 2 * cout + shortcut
}

/// Closed-form trainable parameter count for a variant with the given
/// step widths.
pub fn expected_param_count(config: &ModelConfig, variant: Variant, widths: (usize, usize)) -> usize {
    let c = config.stem_channels;
    let stem = conv_count(1, c, 7, 2) + 2 * c + conv_count(c, c, 3, 2) + 2 * c;
    let step = |cin: usize, cout: usize| {
        let path1 = resblock_count(cin, cin, 1) + resblock_count(cin, cout, 2);
        match variant {
            Variant::Monotonic => path1,
            Variant::NonMonotonic => {
                let path2 = resblock_count(cin, cout, 2) + resblock_count(cout, cout, 1);
                path1 + path2 + conv_count(cout, cout, 3, 3) + 2 * cout
            }
        }
    };
    let k = match variant {
        Variant::Monotonic => 1,
        Variant::NonMonotonic => 2,
    };
    let head = (k * widths.1) * config.mlp_hidden + config.mlp_hidden + config.mlp_hidden + 1;
    stem + step(c, widths.0) + step(widths.0, widths.1) + head
}

/// Step widths `(w, 2w)` for the monotonic baseline whose parameter count
/// is closest to the non-monotonic model's.
pub fn baseline_widths(config: &ModelConfig) -> (usize, usize) {
    let target = expected_param_count(
        config,
        Variant::NonMonotonic,
        (config.step1_channels, config.step2_channels),
    ) as f64;
    (config.step1_channels..=config.step1_channels * 4)
        .map(|w| (w, 2 * w))
        .min_by(|a, b| {
            let da = (expected_param_count(config, Variant::Monotonic, *a) as f64 - target).abs();
            let db = (expected_param_count(config, Variant::Monotonic, *b) as f64 - target).abs();
            da.total_cmp(&db)
        })
        .expect("non-empty search range")
}

impl<T: Float> VarModel<T> {
    /// The two-path non-monotonic model.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build_variant(config, Variant::NonMonotonic, seed)
    }

    /// Single-path, contrast-free baseline widened to a matched parameter count.
    pub fn build_monotonic_baseline(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build_variant(config, Variant::Monotonic, seed)
    }

    pub fn build_variant(config: &ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let widths = match variant {
            Variant::NonMonotonic => (config.step1_channels, config.step2_channels),
            Variant::Monotonic => baseline_widths(config),
        };
        let mut b = ParamBuilder::<T>::new(ChaCha8Rng::seed_from_u64(seed));
        let c = config.stem_channels;
        b.push_scope("stem");
        let stem = Stem {
            conv1: Conv::new(&mut b, "conv1", 1, c, 7, 2, 3, 2),
            bn1: BatchNorm::new(&mut b, "bn1", c),
            conv2: Conv::new(&mut b, "conv2", c, c, 3, 1, 1, 2),
            bn2: BatchNorm::new(&mut b, "bn2", c),
        };
        b.pop_scope();

        let paths = || -> Vec<PathSpec> {
            match variant {
                // Both stages act on (height, width), so every ordering is
                // listed explicitly rather than through the disjointness check.
                Variant::NonMonotonic => orders_to_paths(permutations(2)),
                Variant::Monotonic => orders_to_paths(vec![vec![0, 1]]),
            }
        };
        let k = paths().len();
        let mut steps = Vec::with_capacity(2);
        let mut sig = Signature::new(c, 3, 3, config.panel_size / 4, config.panel_size / 4);
        for (j, width) in [widths.0, widths.1].into_iter().enumerate() {
            let keep = ResBlockStage {
                target: DimSubset::height_width(),
                channels: Channels::Same,
                stride: 1,
            };
            let widen = ResBlockStage {
                target: DimSubset::height_width(),
                channels: Channels::Fixed(width),
                stride: 2,
            };
            let stages: [&dyn StageSpec<T>; 2] = [&keep, &widen];
            let step = NonMonoStep::build(j, &stages, paths(), sig, &mut b)?;
            sig = step.output;
            steps.push(step);
        }
        let stack = StepStack::new(steps, k)?;

        b.push_scope("head");
        let head = Head {
            fc1: Linear::new(&mut b, "fc1", k * widths.1, config.mlp_hidden),
            fc2: Linear::new(&mut b, "fc2", config.mlp_hidden, 1),
        };
        b.pop_scope();
        let ParamBuilder { params, buffers, .. } = b;
        Ok(Self {
            config: config.clone(),
            variant,
            widths,
            params,
            buffers,
            arch: ModelArch {
                stem,
                stack,
                head,
                panel_size: config.panel_size,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn step_widths(&self) -> (usize, usize) {
        self.widths
    }

    /// Trainable scalars including normalization affine terms.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &BufferStore<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut BufferStore<T> {
        &mut self.buffers
    }

    pub fn arch(&self) -> &ModelArch<T> {
        &self.arch
    }

    /// A fresh session over this model's parameters plus the wiring to run.
    pub fn session(&mut self, mode: Mode, track_grads: bool) -> (&ModelArch<T>, Session<'_, T>) {
        let Self {
            params, buffers, arch, ..
        } = self;
        (arch, Session::new(params, buffers, mode, track_grads))
    }

    /// One probability per matrix.
    pub fn forward(&mut self, batch: &[CompletedMatrix], mode: Mode) -> Result<Vec<T>> {
        let batch = PanelBatch::from_matrices(batch)?;
        self.forward_batch(&batch, mode)
    }

    pub fn forward_batch(&mut self, batch: &PanelBatch<T>, mode: Mode) -> Result<Vec<T>> {
        let (arch, mut s) = self.session(mode, false);
        let p = arch.forward(&mut s, batch, None)?;
        Ok(s.graph.value(p).data().to_vec())
    }

    /// Output shape after every layer group, for a forward over `batch`.
    pub fn shape_trace(&mut self, batch: &[CompletedMatrix], mode: Mode) -> Result<ShapeTrace> {
        let batch = PanelBatch::from_matrices(batch)?;
        let (arch, mut s) = self.session(mode, false);
        let mut trace = Vec::new();
        arch.forward(&mut s, &batch, Some(&mut trace))?;
        Ok(trace)
    }
}
