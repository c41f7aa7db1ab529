use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::render_panel;
use super::{
    ArithmeticOp, Attribute, Configuration, PanelState, RpmError, RpmItem, Rule, RuleSpec, Slot, SlotState,
    COLOR_LEVELS, SHAPE_TYPES, SIZE_LEVELS,
};

const MAX_ATTEMPTS: usize = 1000;
const MAX_DISTRACTOR_DRAWS: usize = 1000;

/// Which rules and attributes the sampler may use.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorOptions {
    /// Rules eligible for sampling; each (slot, attribute) draws uniformly
    /// among those applicable to it.
    pub rules: Vec<Rule>,
    /// Attributes that may vary. The rest are held constant.
    pub attributes: Vec<Attribute>,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            rules: Rule::all(),
            attributes: Attribute::ALL.to_vec(),
        }
    }
}

impl GeneratorOptions {
    /// Constant, progression and distribute-three over type, size and color.
    pub fn no_arithmetic() -> Self {
        Self {
            rules: Rule::all()
                .into_iter()
                .filter(|r| !matches!(r, Rule::Arithmetic(_)))
                .collect(),
            attributes: vec![Attribute::Type, Attribute::Size, Attribute::Color],
        }
    }
}

fn domain_size(slot: &Slot, attribute: Attribute) -> usize {
    match attribute {
        Attribute::Number => slot.cells(),
        Attribute::Position => (1 << slot.cells()) - 1,
        Attribute::Type => SHAPE_TYPES.len(),
        Attribute::Size => SIZE_LEVELS,
        Attribute::Color => COLOR_LEVELS.len(),
    }
}

fn rotate(mask: u32, by: i32, cells: usize) -> u32 {
    let n = cells as i32;
    let mut out = 0;
    for i in 0..n {
        if mask & (1 << i) != 0 {
            out |= 1 << (i + by).rem_euclid(n);
        }
    }
    out
}

/// Whether row `r` of `grid` (values of one attribute) obeys `rule`.
///
/// Numeric values are 0-based levels; arithmetic acts on 1-based levels.
/// Position values are cell masks, on which progression rotates the cells.
/// Distribute-three rows must permute the first row's three distinct values
/// without repeating a value within any column.
pub(crate) fn row_holds(rule: Rule, attribute: Attribute, cells: usize, grid: &[[u32; 3]; 3], r: usize) -> bool {
    let [a, b, c] = grid[r];
    match rule {
        Rule::Constant => a == b && b == c && a == grid[0][0],
        Rule::Progression(d) => {
            if attribute == Attribute::Position {
                b == rotate(a, d as i32, cells) && c == rotate(b, d as i32, cells) && a != b
            } else {
                let d = d as i64;
                b as i64 == a as i64 + d && c as i64 == b as i64 + d
            }
        }
        Rule::Arithmetic(op) => {
            let (a, b, c) = (a as i64 + 1, b as i64 + 1, c as i64 + 1);
            match op {
                ArithmeticOp::Plus => c == a + b,
                ArithmeticOp::Minus => c == a - b,
            }
        }
        Rule::DistributeThree => {
            let first = grid[0];
            let distinct = first[0] != first[1] && first[1] != first[2] && first[0] != first[2];
            let mut row = grid[r];
            let mut base = first;
            row.sort_unstable();
            base.sort_unstable();
            distinct && row == base && (0..3).all(|col| (0..r).all(|above| grid[above][col] != grid[r][col]))
        }
    }
}

/// Values of one attribute over a 3x3 matrix, or `None` when the rule
/// cannot fit the domain.
fn sample_grid(rule: Rule, attribute: Attribute, slot: &Slot, rng: &mut ChaCha8Rng) -> Option<[[u32; 3]; 3]> {
    let cells = slot.cells();
    let size = domain_size(slot, attribute) as i64;
    let mut grid = [[0u32; 3]; 3];
    let draw = |rng: &mut ChaCha8Rng| -> u32 {
        if attribute == Attribute::Position {
            rng.gen_range(1..=size as u32)
        } else {
            rng.gen_range(0..size as u32)
        }
    };
    match rule {
        Rule::Constant => {
            let v = draw(rng);
            grid = [[v; 3]; 3];
        }
        Rule::Progression(d) if attribute == Attribute::Position => {
            for row in &mut grid {
                let candidates: Vec<u32> = (1..=size as u32).filter(|&m| rotate(m, d as i32, cells) != m).collect();
                let a = *candidates.choose(rng)?;
                let b = rotate(a, d as i32, cells);
                *row = [a, b, rotate(b, d as i32, cells)];
            }
        }
        Rule::Progression(d) => {
            let d = d as i64;
            let (lo, hi) = (0.max(-2 * d), (size - 1).min(size - 1 - 2 * d));
            if lo > hi {
                return None;
            }
            for row in &mut grid {
                let a = rng.gen_range(lo..=hi);
                *row = [a as u32, (a + d) as u32, (a + 2 * d) as u32];
            }
        }
        Rule::Arithmetic(op) => {
            if !attribute.is_numeric() {
                return None;
            }
            // 1-based levels: plus needs a + b <= size, minus needs a - b >= 1
            let pairs: Vec<(i64, i64)> = (1..=size)
                .flat_map(|a| (1..=size).map(move |b| (a, b)))
                .filter(|&(a, b)| match op {
                    ArithmeticOp::Plus => a + b <= size,
                    ArithmeticOp::Minus => a - b >= 1,
                })
                .collect();
            for row in &mut grid {
                let &(a, b) = pairs.choose(rng)?;
                let c = match op {
                    ArithmeticOp::Plus => a + b,
                    ArithmeticOp::Minus => a - b,
                };
                *row = [(a - 1) as u32, (b - 1) as u32, (c - 1) as u32];
            }
        }
        Rule::DistributeThree => {
            if size < 3 {
                return None;
            }
            let mut values = Vec::with_capacity(3);
            while values.len() < 3 {
                let v = draw(rng);
                if !values.contains(&v) {
                    values.push(v);
                }
            }
            let dir = if rng.gen_bool(0.5) { 1 } else { 2 };
            for (r, row) in grid.iter_mut().enumerate() {
                for (col, v) in row.iter_mut().enumerate() {
                    *v = values[(col + r * dir) % 3];
                }
            }
        }
    }
    Some(grid)
}

fn random_mask(count: u32, cells: usize, rng: &mut ChaCha8Rng) -> u16 {
    let mut idx: Vec<usize> = (0..cells).collect();
    idx.shuffle(rng);
    idx[..count as usize].iter().fold(0u16, |m, &i| m | (1 << i))
}

/// Sampled rules and the resulting 3x3 panel states of one item.
struct Matrix {
    rules: Vec<RuleSpec>,
    panels: Vec<PanelState>,
}

fn sample_matrix(
    config: Configuration,
    options: &GeneratorOptions,
    rng: &mut ChaCha8Rng,
) -> Result<std::result::Result<Matrix, RuleSpec>, RpmError> {
    let slots = config.slots();
    let mut rules = Vec::new();
    let mut panels: Vec<PanelState> = vec![Vec::with_capacity(slots.len()); 9];
    for slot in &slots {
        let mut grids: Vec<(Attribute, [[u32; 3]; 3])> = Vec::new();
        let mut attributes: Vec<Attribute> = slot.attributes().to_vec();
        if slot.grid > 1 {
            // number and position form one layout attribute; one of them
            // carries the rule
            let layout: Vec<Attribute> = [Attribute::Number, Attribute::Position]
                .into_iter()
                .filter(|a| options.attributes.contains(a))
                .collect();
            let governed = layout.choose(rng).copied().unwrap_or(Attribute::Position);
            attributes.retain(|&a| a == governed || !matches!(a, Attribute::Number | Attribute::Position));
        }
        for attribute in attributes {
            let rule = if options.attributes.contains(&attribute) {
                let allowed: Vec<Rule> = options
                    .rules
                    .iter()
                    .copied()
                    .filter(|r| r.applies_to(attribute))
                    .collect();
                *allowed.choose(rng).ok_or(RpmError::NoAllowedRule {
                    slot: slot.name.into(),
                    attribute,
                })?
            } else {
                Rule::Constant
            };
            let spec = RuleSpec {
                slot: slot.name.into(),
                attribute,
                rule,
            };
            match sample_grid(rule, attribute, slot, rng) {
                Some(grid) => grids.push((attribute, grid)),
                None => return Ok(Err(spec)),
            }
            rules.push(spec);
        }
        for (k, panel) in panels.iter_mut().enumerate() {
            let (r, c) = (k / 3, k % 3);
            let value = |a: Attribute| grids.iter().find(|(x, _)| *x == a).map(|(_, g)| g[r][c]);
            let positions = match (value(Attribute::Position), value(Attribute::Number)) {
                (Some(mask), _) => mask as u16,
                (None, Some(level)) => random_mask(level + 1, slot.cells(), rng),
                (None, None) => 1,
            };
            panel.push(SlotState {
                positions,
                shape: value(Attribute::Type).unwrap_or(0) as u8,
                size: value(Attribute::Size).unwrap_or(0) as u8,
                color: value(Attribute::Color).unwrap_or(0) as u8,
            });
        }
    }
    Ok(Ok(Matrix { rules, panels }))
}

/// Applies one edit to a governed attribute, always changing its value.
fn perturb(state: &mut SlotState, attribute: Attribute, slot: &Slot, rng: &mut ChaCha8Rng) {
    let cells = slot.cells();
    match attribute {
        Attribute::Number => {
            let current = state.number();
            let count = loop {
                let n = rng.gen_range(1..=cells as u32);
                if n != current {
                    break n;
                }
            };
            state.positions = random_mask(count, cells, rng);
        }
        Attribute::Position => {
            let full = (1u32 << cells) - 1;
            state.positions = loop {
                let m = rng.gen_range(1..=full) as u16;
                if m != state.positions {
                    break m;
                }
            };
        }
        Attribute::Type => state.shape = different(state.shape, SHAPE_TYPES.len(), rng),
        Attribute::Size => state.size = different(state.size, SIZE_LEVELS, rng),
        Attribute::Color => state.color = different(state.color, COLOR_LEVELS.len(), rng),
    }
}

fn different(v: u8, size: usize, rng: &mut ChaCha8Rng) -> u8 {
    let shift = rng.gen_range(1..size as u8);
    (v + shift) % size as u8
}

fn copy_field(to: &mut SlotState, from: &SlotState, attribute: Attribute) {
    match attribute {
        Attribute::Number | Attribute::Position => to.positions = from.positions,
        Attribute::Type => to.shape = from.shape,
        Attribute::Size => to.size = from.size,
        Attribute::Color => to.color = from.color,
    }
}

/// Seven distractors forming, with the answer, the full product of one
/// alternative value on each of three governed attributes. Every value of
/// an edited attribute then appears on exactly four choices, so no choice
/// is singled out by being typical of the set. With fewer than three
/// governed attributes, falls back to independent random edits.
fn distractors(
    answer: &PanelState,
    rules: &[RuleSpec],
    slots: &[Slot],
    rng: &mut ChaCha8Rng,
) -> Option<Vec<PanelState>> {
    let governed: Vec<(usize, Attribute)> = rules
        .iter()
        .map(|r| {
            (
                slots.iter().position(|s| s.name == r.slot).expect("rule slot exists"),
                r.attribute,
            )
        })
        .collect();
    if governed.len() >= 3 {
        let axes: Vec<(usize, Attribute, SlotState)> = governed
            .choose_multiple(rng, 3)
            .map(|&(slot, attribute)| {
                let mut alt = answer[slot];
                perturb(&mut alt, attribute, &slots[slot], rng);
                (slot, attribute, alt)
            })
            .collect();
        return Some(
            (1..8u32)
                .map(|bits| {
                    let mut candidate = answer.clone();
                    for (i, (slot, attribute, alt)) in axes.iter().enumerate() {
                        if bits & (1 << i) != 0 {
                            copy_field(&mut candidate[*slot], alt, *attribute);
                        }
                    }
                    candidate
                })
                .collect(),
        );
    }
    let mut out: Vec<PanelState> = Vec::with_capacity(7);
    for _ in 0..MAX_DISTRACTOR_DRAWS {
        if out.len() == 7 {
            break;
        }
        let edits = rng.gen_range(1..=governed.len());
        let mut candidate = answer.clone();
        for &(slot, attribute) in governed.choose_multiple(rng, edits) {
            perturb(&mut candidate[slot], attribute, &slots[slot], rng);
        }
        if &candidate != answer && !out.contains(&candidate) {
            out.push(candidate);
        }
    }
    (out.len() == 7).then_some(out)
}

fn renders_distinct(choices: &[Vec<u8>]) -> bool {
    choices
        .iter()
        .enumerate()
        .all(|(i, a)| choices[i + 1..].iter().all(|b| a != b))
}

/// Samples one item: rules, a rule-consistent matrix, seven distractors and
/// a shuffled choice order.
pub fn sample_item(
    config: Configuration,
    rng: &mut ChaCha8Rng,
    panel_size: usize,
    options: &GeneratorOptions,
) -> Result<RpmItem, RpmError> {
    if panel_size < 16 {
        return Err(RpmError::PanelSize(panel_size));
    }
    let slots = config.slots();
    let mut last_conflict = None;
    for _ in 0..MAX_ATTEMPTS {
        let matrix = match sample_matrix(config, options, rng)? {
            Ok(m) => m,
            Err(conflict) => {
                last_conflict = Some(conflict);
                continue;
            }
        };
        let answer = matrix.panels[8].clone();
        let Some(wrong) = distractors(&answer, &matrix.rules, &slots, rng) else {
            last_conflict = matrix.rules.first().cloned();
            continue;
        };
        let mut choices: Vec<(bool, PanelState)> = std::iter::once((true, answer))
            .chain(wrong.into_iter().map(|d| (false, d)))
            .collect();
        choices.shuffle(rng);
        let correct = choices.iter().position(|(ok, _)| *ok).expect("answer present") as u8;
        let mut attributes: Vec<PanelState> = matrix.panels[..8].to_vec();
        attributes.extend(choices.into_iter().map(|(_, s)| s));
        let panels: Vec<Vec<u8>> = attributes.iter().map(|s| render_panel(s, config, panel_size)).collect();
        if !renders_distinct(&panels[8..]) {
            last_conflict = matrix.rules.first().cloned();
            continue;
        }
        let item = RpmItem {
            config,
            panel_size,
            rules: matrix.rules,
            correct,
            panels,
            attributes: Some(attributes),
        };
        match oracle_check(&item) {
            Ok(report) if report.well_formed => return Ok(item),
            _ => last_conflict = item.rules.first().cloned(),
        }
    }
    Err(RpmError::GenerationFailed {
        attempts: MAX_ATTEMPTS,
        rule: last_conflict.map_or_else(|| "none".into(), |r| r.to_string()),
    })
}

/// Item `i` uses configuration `configs[i % len]` and its own random stream
/// derived from `(seed, i)`, so items can be produced in any order.
pub fn generate_dataset(
    configs: &[Configuration],
    count: usize,
    seed: u64,
    panel_size: usize,
    options: &GeneratorOptions,
) -> Result<Vec<RpmItem>, RpmError> {
    (0..count)
        .map(|i| generate_one(configs, i, seed, panel_size, options))
        .collect()
}

/// Same output as [`generate_dataset`], produced on `threads` workers over
/// contiguous index ranges.
pub fn generate_dataset_parallel(
    configs: &[Configuration],
    count: usize,
    seed: u64,
    panel_size: usize,
    options: &GeneratorOptions,
    threads: usize,
) -> Result<Vec<RpmItem>, RpmError> {
    let threads = threads.clamp(1, count.max(1));
    if threads == 1 {
        return generate_dataset(configs, count, seed, panel_size, options);
    }
    let per = count.div_ceil(threads);
    let parts: Vec<Result<Vec<RpmItem>, RpmError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let range = (t * per).min(count)..((t + 1) * per).min(count);
                scope.spawn(move || {
                    range
                        .map(|i| generate_one(configs, i, seed, panel_size, options))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generator thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(count);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

pub(crate) fn generate_one(
    configs: &[Configuration],
    index: usize,
    seed: u64,
    panel_size: usize,
    options: &GeneratorOptions,
) -> Result<RpmItem, RpmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    sample_item(configs[index % configs.len()], &mut rng, panel_size, options)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleReport {
    pub well_formed: bool,
    /// Choices that satisfy every rule.
    pub passing: Vec<usize>,
    /// Choices other than the stored answer that satisfy every rule, plus
    /// the stored answer if it fails.
    pub violating: Vec<usize>,
}

fn attribute_grid(panels: &[&PanelState], slot: usize, attribute: Attribute) -> [[u32; 3]; 3] {
    let mut grid = [[0u32; 3]; 3];
    for (k, p) in panels.iter().enumerate() {
        grid[k / 3][k % 3] = p[slot].get(attribute);
    }
    grid
}

fn matrix_with(item_attrs: &[PanelState], choice: usize) -> Vec<&PanelState> {
    item_attrs[..8]
        .iter()
        .chain(std::iter::once(&item_attrs[8 + choice]))
        .collect()
}

fn rule_slot(item: &RpmItem, spec: &RuleSpec) -> Result<(usize, Slot), RpmError> {
    item.config
        .slots()
        .into_iter()
        .enumerate()
        .find(|(_, s)| s.name == spec.slot)
        .ok_or_else(|| RpmError::BadRule(spec.to_string()))
}

/// Symbolic check: inserts each choice at the missing position and tests
/// every rule on the third row.
pub fn oracle_check(item: &RpmItem) -> Result<OracleReport, RpmError> {
    let attrs = item.attributes.as_deref().ok_or(RpmError::MissingAnnotations)?;
    if item.rules.is_empty() || attrs.len() != 16 {
        return Err(RpmError::MissingAnnotations);
    }
    let mut passing = Vec::new();
    for choice in 0..8 {
        let panels = matrix_with(attrs, choice);
        let mut ok = true;
        for spec in &item.rules {
            let (slot, info) = rule_slot(item, spec)?;
            let grid = attribute_grid(&panels, slot, spec.attribute);
            ok &= row_holds(spec.rule, spec.attribute, info.cells(), &grid, 2);
        }
        if ok {
            passing.push(choice);
        }
    }
    let correct = item.correct as usize;
    let mut violating: Vec<usize> = passing.iter().copied().filter(|&c| c != correct).collect();
    if !passing.contains(&correct) {
        violating.push(correct);
    }
    Ok(OracleReport {
        well_formed: passing == [correct],
        passing,
        violating,
    })
}

/// Whether every rule holds on all three rows of the matrix completed with
/// the stored answer.
pub fn rules_hold_on_all_rows(item: &RpmItem) -> Result<bool, RpmError> {
    let attrs = item.attributes.as_deref().ok_or(RpmError::MissingAnnotations)?;
    let panels = matrix_with(attrs, item.correct as usize);
    for spec in &item.rules {
        let (slot, info) = rule_slot(item, spec)?;
        let grid = attribute_grid(&panels, slot, spec.attribute);
        if !(0..3).all(|r| row_holds(spec.rule, spec.attribute, info.cells(), &grid, r)) {
            return Ok(false);
        }
    }
    Ok(true)
}
