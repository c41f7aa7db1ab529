use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::RpmItem;

/// Train, validation and test indices into a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic 60/20/20 split, stratified by configuration. Each
/// configuration's items are shuffled with `seed`; the first 60% go to
/// train, the next 20% to validation and the remainder to test.
pub fn split_dataset(items: &[RpmItem], seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<(u8, Vec<usize>)> = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let id = item.config.id();
        match groups.iter_mut().find(|(g, _)| *g == id) {
            Some((_, v)) => v.push(i),
            None => groups.push((id, vec![i])),
        }
    }
    groups.sort_by_key(|(id, _)| *id);
    let mut split = Split::default();
    for (_, mut idx) in groups {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let (a, b) = (n * 6 / 10, n * 6 / 10 + n * 2 / 10);
        split.train.extend_from_slice(&idx[..a]);
        split.val.extend_from_slice(&idx[a..b]);
        split.test.extend_from_slice(&idx[b..]);
    }
    split
}
