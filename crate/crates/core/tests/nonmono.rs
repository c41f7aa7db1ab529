use nmrpm::nn::{ParamBuilder, ParamStore, Session};
use nmrpm::nonmono::{
    orders_to_paths, Channels, DimSubset, NonMonoStep, ResBlockStage, Signature, StageSpec, StepStack,
};
use nmrpm::tensor::{Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INPUT: Signature = Signature {
    channels: 4,
    extents: [3, 3, 4, 4],
};

fn stages() -> (ResBlockStage, ResBlockStage) {
    (
        ResBlockStage {
            target: DimSubset::height_width(),
            channels: Channels::Same,
            stride: 1,
        },
        ResBlockStage {
            target: DimSubset::height_width(),
            channels: Channels::Fixed(6),
            stride: 2,
        },
    )
}

fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn step(orders: Vec<Vec<usize>>, seed: u64) -> (NonMonoStep<f64>, ParamStore<f64>, nmrpm::nn::BufferStore<f64>) {
    let (keep, widen) = stages();
    let specs: [&dyn StageSpec<f64>; 2] = [&keep, &widen];
    let mut b = ParamBuilder::<f64>::new(ChaCha8Rng::seed_from_u64(seed));
    let step = NonMonoStep::build(0, &specs, orders_to_paths(orders), INPUT, &mut b).unwrap();
    let ParamBuilder { params, buffers, .. } = b;
    (step, params, buffers)
}

#[test]
fn each_path_subtracts_the_shared_contrast() {
    let (step, params, mut buffers) = step(vec![vec![0, 1], vec![1, 0]], 1);
    let x = random(2, &INPUT.state_shape(2));
    let y = random(3, &INPUT.state_shape(2));
    for mode in [Mode::Eval, Mode::Train] {
        let mut s = Session::new(&params, &mut buffers, mode, false);
        let (dx, dy) = (s.graph.constant(x.clone()), s.graph.constant(y.clone()));
        let out = step.forward(&mut s, &[dx, dy]).unwrap();
        let p = [
            step.apply_path(&mut s, 0, dx).unwrap(),
            step.apply_path(&mut s, 1, dy).unwrap(),
        ];
        let c = step.contrast.as_ref().unwrap().forward(&mut s, &p).unwrap();
        let (c, p0, p1) = (
            s.graph.value(c).data().to_vec(),
            s.graph.value(p[0]).data().to_vec(),
            s.graph.value(p[1]).data().to_vec(),
        );
        let (o0, o1) = (
            s.graph.value(out[0]).data().to_vec(),
            s.graph.value(out[1]).data().to_vec(),
        );
        for i in 0..c.len() {
            assert_eq!(o0[i], p0[i] - c[i]);
            assert_eq!(o1[i], p1[i] - c[i]);
            let mean_out = (o0[i] + o1[i]) / 2.0;
            assert!((mean_out - ((p0[i] + p1[i]) / 2.0 - c[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn swapping_paths_swaps_outputs() {
    let (a, pa, mut ba) = step(vec![vec![0, 1], vec![1, 0]], 4);
    let (b, mut pb, mut bb) = step(vec![vec![1, 0], vec![0, 1]], 5);
    let names = pb.names().to_vec();
    for (j, name) in names.iter().enumerate() {
        let source = if let Some(rest) = name.strip_prefix("step0.path1.") {
            format!("step0.path2.{rest}")
        } else if let Some(rest) = name.strip_prefix("step0.path2.") {
            format!("step0.path1.{rest}")
        } else {
            name.clone()
        };
        let i = pa.names().iter().position(|n| *n == source).unwrap();
        pb.values_mut()[j] = pa.values()[i].clone();
    }
    let x = random(6, &INPUT.state_shape(1));
    let y = random(7, &INPUT.state_shape(1));
    for mode in [Mode::Eval, Mode::Train] {
        let mut s = Session::new(&pa, &mut ba, mode, false);
        let (dx, dy) = (s.graph.constant(x.clone()), s.graph.constant(y.clone()));
        let fwd = a.forward(&mut s, &[dx, dy]).unwrap();
        let fwd: Vec<Vec<f64>> = fwd.iter().map(|&v| s.graph.value(v).data().to_vec()).collect();
        let mut s = Session::new(&pb, &mut bb, mode, false);
        let (dx, dy) = (s.graph.constant(x.clone()), s.graph.constant(y.clone()));
        let rev = b.forward(&mut s, &[dy, dx]).unwrap();
        let rev: Vec<Vec<f64>> = rev.iter().map(|&v| s.graph.value(v).data().to_vec()).collect();
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[0]);
    }
}

#[test]
fn empty_stack_copies_its_input() {
    let params = ParamStore::<f64>::default();
    let mut buffers = Default::default();
    let stack = StepStack::<f64>::new(vec![], 3).unwrap();
    let mut s = Session::new(&params, &mut buffers, Mode::Eval, false);
    let d = s.graph.constant(random(8, &INPUT.state_shape(1)));
    let out = stack.forward(&mut s, d).unwrap();
    assert_eq!(out.len(), 3);
    for v in out {
        assert_eq!(s.graph.value(v).data(), s.graph.value(d).data());
    }
}
