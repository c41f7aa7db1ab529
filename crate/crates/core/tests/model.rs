use nmrpm::model::{expected_param_count, CompletedMatrix, ModelConfig, VarModel, Variant};
use nmrpm::rpm::{generate_dataset, split_dataset, Configuration, GeneratorOptions};
use nmrpm::tensor::Mode;
use nmrpm::train::{batch_loss, train, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Hand count: stem 40,384 + step0 1,273,088 + step1 5,085,696 + head 131,585.
const PAPER_PARAMS: usize = 6_530_753;

fn random_matrices(n: usize, size: usize, seed: u64) -> Vec<CompletedMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| CompletedMatrix::new(size, (0..9 * size * size).map(|_| rng.gen::<f32>()).collect()).unwrap())
        .collect()
}

#[test]
fn same_seed_same_parameters() {
    for variant in [Variant::NonMonotonic, Variant::Monotonic] {
        let a = VarModel::<f32>::build_variant(&ModelConfig::desk(), variant, 9).unwrap();
        let b = VarModel::<f32>::build_variant(&ModelConfig::desk(), variant, 9).unwrap();
        let c = VarModel::<f32>::build_variant(&ModelConfig::desk(), variant, 10).unwrap();
        assert_eq!(a.params().values(), b.params().values());
        assert_ne!(a.params().values(), c.params().values());
    }
}

#[test]
fn parameter_counts() {
    for config in [ModelConfig::desk(), ModelConfig::paper()] {
        let nm = VarModel::<f32>::build(&config, 0).unwrap();
        let mono = VarModel::<f32>::build_monotonic_baseline(&config, 0).unwrap();
        let gap = (nm.param_count() as f64 - mono.param_count() as f64).abs() / nm.param_count() as f64;
        assert!(gap <= 0.10, "{} vs {}", nm.param_count(), mono.param_count());
        assert_eq!(
            nm.param_count(),
            expected_param_count(&config, Variant::NonMonotonic, nm.step_widths())
        );
    }
    let paper = VarModel::<f32>::build(&ModelConfig::paper(), 0).unwrap();
    assert_eq!(paper.param_count(), PAPER_PARAMS);
    assert_eq!(
        VarModel::<f32>::build(&ModelConfig::desk(), 0).unwrap().param_count(),
        410_801
    );
}

#[test]
fn eval_outputs_are_pure_probabilities() {
    let batch = random_matrices(6, 32, 1);
    for variant in [Variant::NonMonotonic, Variant::Monotonic] {
        let mut m = VarModel::<f32>::build_variant(&ModelConfig::desk(), variant, 2).unwrap();
        let p = m.forward(&batch, Mode::Eval).unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(p, m.forward(&batch, Mode::Eval).unwrap());

        let twice = vec![batch[0].clone(), batch[3].clone(), batch[0].clone()];
        let q = m.forward(&twice, Mode::Eval).unwrap();
        assert_eq!(q[0].to_bits(), q[2].to_bits());
        assert_eq!(q[0].to_bits(), p[0].to_bits());

        let t = m.forward(&batch, Mode::Train).unwrap();
        assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn untrained_outputs_stay_moderate() {
    let mut m = VarModel::<f32>::build(&ModelConfig::desk(), 4).unwrap();
    let mut sum = 0.0f64;
    for chunk in random_matrices(256, 32, 5).chunks(64) {
        sum += m
            .forward(chunk, Mode::Eval)
            .unwrap()
            .iter()
            .map(|&p| p as f64)
            .sum::<f64>();
    }
    let mean = sum / 256.0;
    assert!(mean > 0.2 && mean < 0.8, "{mean}");
}

/// Every parameter tensor receives a nonzero gradient. Eval mode, because
/// in train mode a bias directly ahead of batch norm is cancelled by the
/// batch mean and gets an exactly zero gradient.
#[test]
fn gradient_reaches_every_parameter_tensor() {
    let items = generate_dataset(&[Configuration::Center], 2, 6, 32, &GeneratorOptions::default()).unwrap();
    let refs: Vec<_> = items.iter().collect();
    for variant in [Variant::NonMonotonic, Variant::Monotonic] {
        let mut m = VarModel::<f64>::build_variant(&ModelConfig::desk(), variant, 7).unwrap();
        let names = m.params().names().to_vec();
        let (arch, mut s) = m.session(Mode::Eval, true);
        let (_, loss) = batch_loss(arch, &mut s, &refs, 7.0).unwrap();
        let mut grads = s.graph.backward(loss).unwrap();
        let grads = s.param_grads(&mut grads);
        for (name, g) in names.iter().zip(&grads) {
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "{variant:?}: {name} has an all-zero gradient"
            );
        }
        if variant == Variant::NonMonotonic {
            for path in ["path1", "path2"] {
                assert!(names.iter().any(|n| n.starts_with("step0.") && n.contains(path)));
            }
        }
    }
}

#[test]
fn trained_model_depends_on_panel_order() {
    let items = generate_dataset(&[Configuration::Center], 40, 7, 32, &GeneratorOptions::no_arithmetic()).unwrap();
    let s = split_dataset(&items, 0);
    let tr: Vec<_> = s.train.iter().map(|&i| &items[i]).collect();
    let va: Vec<_> = s.val.iter().map(|&i| &items[i]).collect();
    let mut m = VarModel::<f32>::build(&ModelConfig::desk(), 8).unwrap();
    train(
        &mut m,
        &tr,
        &va,
        &TrainConfig {
            epochs: 2,
            ..Default::default()
        },
    )
    .unwrap();

    let item = &items[0];
    let mut panels: Vec<&[u8]> = item.context().iter().map(|p| p.as_slice()).collect();
    panels.push(&item.choices()[item.correct as usize]);
    let base = m
        .forward(
            &[CompletedMatrix::from_panels(panels.clone().try_into().unwrap(), 32).unwrap()],
            Mode::Eval,
        )
        .unwrap()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut differs = false;
    for _ in 0..10 {
        let mut order = panels.clone();
        order.shuffle(&mut rng);
        let matrix = CompletedMatrix::from_panels(order.try_into().unwrap(), 32).unwrap();
        differs |= m.forward(&[matrix], Mode::Eval).unwrap()[0] != base;
    }
    assert!(differs);
}
