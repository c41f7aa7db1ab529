//! Property suites shared by the command line and the test targets.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{ModelConfig, ShapeTrace, VarModel};
use crate::tensor::{grad_check_at, Graph, Mode, Result as TensorResult, RunningStats, Tensor, Var, FD_STEP};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Denominator floor for model-level relative errors. Conv biases feeding
/// train-mode batch norm have an exact zero gradient, where both sides are
/// rounding noise near 1e-11.
const KINK_TOLERANCE: f64 = 1e-4;
const KINK_FLOOR: f64 = 1e-9;
const MIN_KINK_STEP: f64 = 1e-7;

pub const MODEL_GRAD_FLOOR: f64 = 1e-6;

/// One named measurement compared against a bound.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
            detail: String::new(),
        }
    }

    pub fn exact(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: if passed { 0.0 } else { 1.0 },
            threshold: 0.0,
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "check={} status={} value={:.3e} threshold={:.1e}",
            self.name,
            if self.passed { "pass" } else { "fail" },
            self.value,
            self.threshold
        )?;
        if !self.detail.is_empty() {
            write!(f, " detail={:?}", self.detail)?;
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values at least 0.05 apart in random order, so max-pool windows have
/// clear winners under a finite-difference step.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 + rng.gen_range(-0.02..0.02)).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("shape")
}

/// Projects `y` onto fixed random weights, giving a scalar whose gradient
/// reaches every element of `y` with a different coefficient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> TensorResult<Var> {
    let n = g.value(y).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = g.constant(uniform(&mut rng, &[1, n], -1.0, 1.0));
    let flat = g.reshape(y, &[1, n])?;
    let out = g.linear(flat, r, None)?;
    g.reshape(out, &[1])
}

type Case = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Graph<f64>, &[Var]) -> TensorResult<Var>>,
);

fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<Case> = Vec::new();
    let s = seed;

    cases.push((
        "conv2d",
        vec![
            uniform(&mut rng, &[2, 2, 5, 5], -1.0, 1.0),
            uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[3], -1.0, 1.0),
        ],
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "conv2d_strided",
        vec![
            uniform(&mut rng, &[2, 1, 7, 6], -1.0, 1.0),
            uniform(&mut rng, &[2, 1, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[2], -1.0, 1.0),
        ],
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "conv3d",
        vec![
            uniform(&mut rng, &[1, 2, 3, 4, 4], -1.0, 1.0),
            uniform(&mut rng, &[2, 2, 3, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[2], -1.0, 1.0),
        ],
        Box::new(move |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), 1, 1)?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "conv2d_tiny",
        vec![
            uniform(&mut rng, &[3, 2, 2, 2], -1.0, 1.0),
            uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[2], -1.0, 1.0),
        ],
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "conv3d_tiny",
        vec![
            uniform(&mut rng, &[2, 2, 3, 1, 1], -1.0, 1.0),
            uniform(&mut rng, &[2, 2, 3, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[2], -1.0, 1.0),
        ],
        Box::new(move |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), 1, 1)?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "batchnorm_train",
        vec![
            uniform(&mut rng, &[4, 3, 2, 2], -2.0, 2.0),
            uniform(&mut rng, &[3], 0.5, 1.5),
            uniform(&mut rng, &[3], -0.5, 0.5),
        ],
        Box::new(move |g, v| {
            let (y, _) = g.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            project(g, y, s)
        }),
    ));
    let mut stats = RunningStats::new(3);
    stats.mean = uniform(&mut rng, &[3], -0.5, 0.5).into_data();
    stats.var = uniform(&mut rng, &[3], 0.5, 2.0).into_data();
    cases.push((
        "batchnorm_eval",
        vec![
            uniform(&mut rng, &[2, 3, 2, 2], -2.0, 2.0),
            uniform(&mut rng, &[3], 0.5, 1.5),
            uniform(&mut rng, &[3], -0.5, 0.5),
        ],
        Box::new(move |g, v| {
            let y = g.batchnorm_eval(v[0], v[1], v[2], &stats, 1e-5)?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "maxpool2d",
        vec![distinct(&mut rng, &[2, 2, 6, 6])],
        Box::new(move |g, v| {
            let y = g.maxpool2d(v[0], 3, 2, 1)?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "global_avg_pool",
        vec![uniform(&mut rng, &[2, 3, 3, 2, 2, 2], -1.0, 1.0)],
        Box::new(move |g, v| {
            let y = g.global_avg_pool(v[0], &[1, 2, 4, 5])?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "linear",
        vec![
            uniform(&mut rng, &[3, 4], -1.0, 1.0),
            uniform(&mut rng, &[2, 4], -1.0, 1.0),
            uniform(&mut rng, &[2], -1.0, 1.0),
        ],
        Box::new(move |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "relu",
        vec![distinct(&mut rng, &[12]).map(|x| x - 0.6)],
        Box::new(move |g, v| {
            let y = g.relu(v[0]);
            project(g, y, s)
        }),
    ));
    cases.push((
        "sigmoid",
        vec![uniform(&mut rng, &[10], -3.0, 3.0)],
        Box::new(move |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, s)
        }),
    ));
    cases.push((
        "add_sub_scale",
        vec![
            uniform(&mut rng, &[2, 3], -1.0, 1.0),
            uniform(&mut rng, &[2, 3], -1.0, 1.0),
        ],
        Box::new(move |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.scale(v[1], 0.7);
            let y = g.sub(a, b)?;
            let y = g.sub(y, v[0])?;
            let y = g.add(y, a)?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "mean_of_list",
        vec![
            uniform(&mut rng, &[2, 2], -1.0, 1.0),
            uniform(&mut rng, &[2, 2], -1.0, 1.0),
            uniform(&mut rng, &[2, 2], -1.0, 1.0),
        ],
        Box::new(move |g, v| {
            let y = g.mean_of_list(v)?;
            project(g, y, s)
        }),
    ));
    cases.push((
        "reshape_permute_concat_gather",
        vec![
            uniform(&mut rng, &[2, 3, 4], -1.0, 1.0),
            uniform(&mut rng, &[2, 3, 1], -1.0, 1.0),
        ],
        Box::new(move |g, v| {
            let c = g.concat(&[v[0], v[1]], 2)?;
            let p = g.permute(c, &[2, 0, 1])?;
            let r = g.reshape(p, &[5, 6])?;
            let y = g.gather(r, &[4, 0, 4, 2])?;
            project(g, y, s)
        }),
    ));
    let targets: Vec<f64> = (0..8)
        .map(|i| if i == (seed as usize) % 8 { 1.0 } else { 0.0 })
        .collect();
    cases.push((
        "bce_loss",
        vec![uniform(&mut rng, &[8, 1], 0.05, 0.95)],
        Box::new(move |g, v| g.bce_loss(v[0], &targets, 7.0)),
    ));
    cases
}

/// Central finite differences on every differentiable primitive, worst
/// relative error over `seeds` random draws each.
pub fn gradcheck_suite(seeds: u64) -> TensorResult<Vec<CheckOutcome>> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..seeds {
        for (i, (name, inputs, f)) in primitive_cases(seed).into_iter().enumerate() {
            let report = grad_check_at(f, &inputs, FD_STEP, |_, _, _| true)?;
            if worst.len() <= i {
                worst.push((name, 0.0));
            }
            worst[i].1 = worst[i].1.max(report.max_rel_err);
        }
    }
    Ok(worst
        .into_iter()
        .map(|(name, err)| CheckOutcome::at_most(format!("gradcheck.{name}"), err, PRIMITIVE_TOLERANCE))
        .collect())
}

/// The full-size layer table's output shapes for one completed matrix.
pub fn paper_shape_trace() -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("input", vec![9, 1, 160, 160]),
        ("conv1", vec![9, 64, 40, 40]),
        ("conv2", vec![9, 64, 20, 20]),
        ("step0.path1", vec![1, 3, 3, 128, 10, 10]),
        ("step0.path2", vec![1, 3, 3, 128, 10, 10]),
        ("step1.path1", vec![1, 3, 3, 256, 5, 5]),
        ("step1.path2", vec![1, 3, 3, 256, 5, 5]),
        ("pool.path1", vec![1, 256]),
        ("pool.path2", vec![1, 256]),
        ("mlp", vec![1, 1]),
    ]
}

/// Runs one forward pass of the full-size model and compares each layer's
/// output shape with the layer table.
pub fn shapes_suite() -> Vec<CheckOutcome> {
    let result = (|| -> Result<ShapeTrace, crate::model::ModelError> {
        let mut model = VarModel::<f32>::build(&ModelConfig::paper(), 0)?;
        let s = 160 * 160;
        let m = crate::model::CompletedMatrix::new(160, (0..9 * s).map(|i| (i % 251) as f32 / 251.0).collect())?;
        model.shape_trace(&[m], Mode::Eval)
    })();
    let trace = match result {
        Ok(t) => t,
        Err(e) => return vec![CheckOutcome::exact("shapes.paper", false, e.to_string())],
    };
    let mut out = Vec::new();
    let expected = paper_shape_trace();
    out.push(CheckOutcome::exact(
        "shapes.layers",
        trace.len() == expected.len(),
        format!("{} layer groups", trace.len()),
    ));
    for ((name, want), (got_name, got)) in expected.iter().zip(&trace) {
        let ok = name == got_name && want == got;
        out.push(CheckOutcome::exact(
            format!("shapes.{name}"),
            ok,
            format!("{got_name} {got:?}"),
        ));
    }
    out
}

/// Finite-difference check of one item's training loss against its
/// parameter gradient, on the desk model in 64-bit precision. Up to
/// `per_tensor` coordinates are sampled from every parameter tensor.
pub fn model_gradcheck(seed: u64, per_tensor: usize) -> Result<CheckOutcome, crate::train::TrainError> {
    use crate::rpm::{generate_dataset, Configuration, GeneratorOptions};
    use crate::train::batch_loss;

    let config = ModelConfig::desk();
    let item = generate_dataset(
        &[Configuration::Center],
        1,
        seed,
        config.panel_size,
        &GeneratorOptions::default(),
    )
    .map_err(|e| crate::train::TrainError::InvalidConfig(e.to_string()))?
    .remove(0);
    let mut model = VarModel::<f64>::build(&config, seed)?;
    let loss_at = |model: &mut VarModel<f64>| -> Result<f64, crate::train::TrainError> {
        let (arch, mut s) = model.session(Mode::Train, false);
        let (_, loss) = batch_loss(arch, &mut s, &[&item], 7.0)?;
        Ok(s.graph.value(loss).data()[0])
    };
    let analytic = {
        let (arch, mut s) = model.session(Mode::Train, true);
        let (_, loss) = batch_loss(arch, &mut s, &[&item], 7.0)?;
        let mut grads = s.graph.backward(loss)?;
        s.param_grads(&mut grads)
    };
    let base = loss_at(&mut model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (mut worst, mut worst_at, mut checked) = (0.0f64, String::new(), 0usize);
    for t in 0..analytic.len() {
        let n = analytic[t].numel();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_tensor).into_vec()
        };
        for i in picks {
            let original = model.params().values()[t].data()[i];
            let mut h = FD_STEP;
            let numeric = loop {
                model.params_mut().values_mut()[t].data_mut()[i] = original + h;
                let up = loss_at(&mut model)?;
                model.params_mut().values_mut()[t].data_mut()[i] = original - h;
                let down = loss_at(&mut model)?;
                model.params_mut().values_mut()[t].data_mut()[i] = original;
                let (fwd, bwd) = ((up - base) / h, (base - down) / h);
                // one-sided slopes that disagree mean a ReLU or max-pool switch
                // lies inside [x - h, x + h]
                let straddles = (fwd - bwd).abs() > (KINK_TOLERANCE * fwd.abs().max(bwd.abs())).max(KINK_FLOOR);
                if !straddles || h <= MIN_KINK_STEP {
                    break (up - down) / (2.0 * h);
                }
                h /= 10.0;
            };
            let a = analytic[t].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(MODEL_GRAD_FLOOR);
            checked += 1;
            if err > worst {
                worst = err;
                worst_at = format!("{}[{i}]", model.params().names()[t]);
            }
        }
    }
    let mut out = CheckOutcome::at_most("gradcheck.model_desk", worst, MODEL_TOLERANCE);
    out.detail = format!("{checked} coordinates, worst at {worst_at}");
    Ok(out)
}

/// Generates `per_config` items for every shipped configuration and checks
/// the symbolic oracle, row-wise rules and choice distinctness on each,
/// then checks answer-position balance over `balance_items` center items.
pub fn oracle_suite(
    per_config: usize,
    balance_items: usize,
    seed: u64,
) -> Result<Vec<CheckOutcome>, crate::rpm::RpmError> {
    use crate::rpm::{generate_dataset, oracle_check, rules_hold_on_all_rows, Configuration, GeneratorOptions};

    let mut out = Vec::new();
    for config in Configuration::SHIPPED {
        let items = generate_dataset(&[config], per_config, seed, 32, &GeneratorOptions::default())?;
        let (mut bad, mut rows, mut dup) = (0usize, 0usize, 0usize);
        for item in &items {
            bad += !oracle_check(item)?.well_formed as usize;
            rows += !rules_hold_on_all_rows(item)? as usize;
            let c = &item.attributes.as_ref().expect("generated items carry attributes")[8..];
            let px = item.choices();
            dup += (0..8).any(|a| (a + 1..8).any(|b| c[a] == c[b] || px[a] == px[b])) as usize;
        }
        let n = items.len().max(1) as f64;
        out.push(CheckOutcome::at_most(
            format!("oracle.{config}.well_formed"),
            bad as f64 / n,
            0.0,
        ));
        out.push(CheckOutcome::at_most(
            format!("oracle.{config}.rows"),
            rows as f64 / n,
            0.0,
        ));
        out.push(CheckOutcome::at_most(
            format!("oracle.{config}.distinct"),
            dup as f64 / n,
            0.0,
        ));
    }
    let items = generate_dataset(
        &[Configuration::Center],
        balance_items,
        seed ^ 0xba1a,
        16,
        &GeneratorOptions::default(),
    )?;
    let mut counts = [0usize; 8];
    items.iter().for_each(|it| counts[it.correct as usize] += 1);
    let n = balance_items as f64;
    let sd = (n * 0.125 * 0.875).sqrt();
    let z = counts
        .iter()
        .map(|&c| (c as f64 - n / 8.0).abs() / sd.max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    let mut balance = CheckOutcome::at_most("oracle.answer_balance", z, 3.0);
    balance.detail = format!("max |z| over indices, counts {counts:?}");
    out.push(balance);
    Ok(out)
}

/// Step laws of the multi-path module: `T!` paths for `T` disjoint stages,
/// identical outputs for identical paths, and plain path outputs once the
/// contrasting module is zeroed.
pub fn nonmono_suite(seed: u64) -> Vec<CheckOutcome> {
    use crate::nn::{ParamBuilder, Session};
    use crate::nonmono::{
        enumerate_paths, orders_to_paths, Axis, Channels, DimSubset, IdentityStage, NonMonoStep, ResBlockStage,
        Signature, StageSpec,
    };

    let mut out = Vec::new();
    let axes = [Axis::Row, Axis::Col, Axis::Height, Axis::Width];
    let stages: Vec<IdentityStage> = axes
        .iter()
        .map(|&a| IdentityStage {
            target: DimSubset::new(&[a]).expect("one axis"),
        })
        .collect();
    let mut factorial = 1;
    for t in 1..=4 {
        factorial *= t;
        let refs: Vec<&dyn StageSpec<f64>> = stages[..t].iter().map(|s| s as &dyn StageSpec<f64>).collect();
        let got = enumerate_paths(&refs).map(|p| p.len());
        out.push(CheckOutcome::exact(
            format!("nonmono.path_count_t{t}"),
            got.as_ref().ok() == Some(&factorial),
            format!("{got:?} paths, expected {factorial}"),
        ));
    }

    let rc = ResBlockStage {
        target: DimSubset::row_col(),
        channels: Channels::Same,
        stride: 1,
    };
    let hw = ResBlockStage {
        target: DimSubset::height_width(),
        channels: Channels::Fixed(6),
        stride: 2,
    };
    let specs: [&dyn StageSpec<f64>; 2] = [&rc, &hw];
    let input = Signature::new(4, 3, 3, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &input.state_shape(2), -1.0, 1.0);

    // same stage order on both paths, then copy path 1's parameters to path 2
    let result = (|| -> Result<bool, crate::nonmono::NonMonoError> {
        let mut b = ParamBuilder::<f64>::new(ChaCha8Rng::seed_from_u64(seed));
        let step = NonMonoStep::build(0, &specs, orders_to_paths(vec![vec![0, 1], vec![0, 1]]), input, &mut b)?;
        let ParamBuilder {
            mut params,
            mut buffers,
            ..
        } = b;
        let names = params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            if let Some(rest) = name.strip_prefix("step0.path1.") {
                let j = names
                    .iter()
                    .position(|n| n == &format!("step0.path2.{rest}"))
                    .expect("mirrored parameter");
                let v = params.values()[i].clone();
                params.values_mut()[j] = v;
            }
        }
        let mut equal = true;
        for mode in [Mode::Train, Mode::Eval] {
            let mut s = Session::new(&params, &mut buffers, mode, false);
            let d = s.graph.constant(x.clone());
            let ys = step.forward(&mut s, &[d, d])?;
            equal &= s.graph.value(ys[0]).data() == s.graph.value(ys[1]).data();
        }
        Ok(equal)
    })();
    out.push(match result {
        Ok(ok) => CheckOutcome::exact(
            "nonmono.consensus_symmetry",
            ok,
            "equal inputs and parameters, train and eval",
        ),
        Err(e) => CheckOutcome::exact("nonmono.consensus_symmetry", false, e.to_string()),
    });

    let result = (|| -> Result<bool, crate::nonmono::NonMonoError> {
        let mut b = ParamBuilder::<f64>::new(ChaCha8Rng::seed_from_u64(seed + 1));
        let paths = enumerate_paths(&specs)?;
        let step = NonMonoStep::build(0, &specs, paths, input, &mut b)?;
        let ParamBuilder {
            mut params,
            mut buffers,
            ..
        } = b;
        let contrast = step.contrast.as_ref().expect("two paths carry a contrast");
        for id in [
            contrast.conv().weight(),
            contrast.conv().bias(),
            contrast.bn().gamma(),
            contrast.bn().beta(),
        ] {
            params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let y = uniform(&mut rng, &input.state_shape(2), -1.0, 1.0);
        let mut equal = true;
        for mode in [Mode::Train, Mode::Eval] {
            let mut s = Session::new(&params, &mut buffers, mode, false);
            let inputs = [s.graph.constant(x.clone()), s.graph.constant(y.clone())];
            let stepped = step.forward(&mut s, &inputs)?;
            for (i, &d) in inputs.iter().enumerate() {
                let alone = step.apply_path(&mut s, i, d)?;
                equal &= s.graph.value(alone).data() == s.graph.value(stepped[i]).data();
            }
        }
        Ok(equal)
    })();
    out.push(match result {
        Ok(ok) => CheckOutcome::exact("nonmono.zero_contrast", ok, "zeroed contrast leaves independent paths"),
        Err(e) => CheckOutcome::exact("nonmono.zero_contrast", false, e.to_string()),
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonmono_laws_hold() {
        for o in nonmono_suite(3) {
            assert!(o.passed, "{o}");
        }
    }

    #[test]
    fn check_line_format() {
        let o = CheckOutcome::at_most("x", 0.5, 1.0);
        assert_eq!(o.to_string(), "check=x status=pass value=5.000e-1 threshold=1.0e0");
    }
}
