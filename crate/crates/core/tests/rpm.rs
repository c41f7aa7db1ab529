use nmrpm::rpm::{
    encode_dataset, generate_dataset, oracle_check, rules_hold_on_all_rows, split_dataset, Configuration,
    GeneratorOptions, RpmItem,
};
use proptest::prelude::*;

fn shipped(count: usize, seed: u64, size: usize) -> Vec<RpmItem> {
    generate_dataset(&Configuration::SHIPPED, count, seed, size, &GeneratorOptions::default()).unwrap()
}

#[test]
fn thousand_items_all_certified() {
    for config in Configuration::ALL {
        let items = generate_dataset(&[config], 250, 11, 16, &GeneratorOptions::default()).unwrap();
        for (i, item) in items.iter().enumerate() {
            let report = oracle_check(item).unwrap();
            assert!(report.well_formed, "{config} item {i}: {report:?}");
            assert!(rules_hold_on_all_rows(item).unwrap(), "{config} item {i}");
        }
    }
}

#[test]
fn choices_are_pairwise_distinct() {
    for config in Configuration::ALL {
        for size in [16, 32] {
            for item in generate_dataset(&[config], 150, 2, size, &GeneratorOptions::default()).unwrap() {
                let choices = &item.attributes.as_ref().unwrap()[8..];
                let pixels = item.choices();
                for a in 0..8 {
                    for b in a + 1..8 {
                        assert_ne!(choices[a], choices[b]);
                        assert_ne!(pixels[a], pixels[b], "{config} at {size} px");
                    }
                }
            }
        }
    }
}

#[test]
fn answer_position_is_balanced() {
    let n = 10_000;
    let items = generate_dataset(&[Configuration::Center], n, 77, 16, &GeneratorOptions::default()).unwrap();
    let mut counts = [0usize; 8];
    for item in &items {
        counts[item.correct as usize] += 1;
    }
    let (mean, sd) = (n as f64 / 8.0, (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt());
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "index {i}: {c} of {n}");
    }
}

#[test]
fn same_seed_same_bytes() {
    let a = encode_dataset(&shipped(12, 4, 32)).unwrap();
    let b = encode_dataset(&shipped(12, 4, 32)).unwrap();
    let c = encode_dataset(&shipped(12, 5, 32)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn split_sizes_and_stratification() {
    let center = generate_dataset(&[Configuration::Center], 1000, 1, 16, &GeneratorOptions::default()).unwrap();
    let s = split_dataset(&center, 3);
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (600, 200, 200));
    assert_eq!(s, split_dataset(&center, 3));
    assert_ne!(s, split_dataset(&center, 4));

    let two = generate_dataset(
        &[Configuration::Center, Configuration::Grid2x2],
        1000,
        1,
        16,
        &GeneratorOptions::default(),
    )
    .unwrap();
    let s = split_dataset(&two, 3);
    for config in [Configuration::Center, Configuration::Grid2x2] {
        let count = |idx: &[usize]| idx.iter().filter(|&&i| two[i].config == config).count() as i64;
        assert!((count(&s.train) - 300).abs() <= 1);
        assert!((count(&s.val) - 100).abs() <= 1);
        assert!((count(&s.test) - 100).abs() <= 1);
    }
    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..1000).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn any_seed_yields_certified_items(seed in any::<u64>(), config in 0u8..7, no_arith in any::<bool>()) {
        let config = Configuration::from_id(config).unwrap();
        let options = if no_arith { GeneratorOptions::no_arithmetic() } else { GeneratorOptions::default() };
        let items = generate_dataset(&[config], 8, seed, 16, &options).unwrap();
        for item in &items {
            prop_assert!(oracle_check(item).unwrap().well_formed);
            prop_assert!(rules_hold_on_all_rows(item).unwrap());
        }
    }
}
