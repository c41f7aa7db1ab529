//! Procedural mini-RPM items: attribute domains, row rules, spatial
//! configurations, rendering, a symbolic oracle and the on-disk format.

mod format;
mod generate;
mod render;
mod split;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{decode_dataset, encode_dataset, read_dataset, sidecar_path, write_dataset, FormatError, HEADER_LEN};
pub use generate::{
    generate_dataset, generate_dataset_parallel, oracle_check, rules_hold_on_all_rows, sample_item, GeneratorOptions,
    OracleReport,
};
pub use render::{render_panel, SHAPE_SCALES};
pub use split::{split_dataset, Split};

#[derive(Debug, Error, PartialEq)]
pub enum RpmError {
    #[error("generation failed after {attempts} attempts; last conflicting rule {rule}")]
    GenerationFailed { attempts: usize, rule: String },
    #[error("no rule is allowed for {slot}:{attribute}")]
    NoAllowedRule { slot: String, attribute: Attribute },
    #[error("panel size {0} is below the minimum of 16")]
    PanelSize(usize),
    #[error("item carries no attribute annotations")]
    MissingAnnotations,
    #[error("bad rule annotation {0:?}")]
    BadRule(String),
    #[error("unknown configuration {0:?}")]
    UnknownConfiguration(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Number,
    Position,
    Type,
    Size,
    Color,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Number,
        Attribute::Position,
        Attribute::Type,
        Attribute::Size,
        Attribute::Color,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Number => "number",
            Attribute::Position => "position",
            Attribute::Type => "type",
            Attribute::Size => "size",
            Attribute::Color => "color",
        }
    }

    /// Whether values are ordered integers that arithmetic can combine.
    pub fn is_numeric(self) -> bool {
        matches!(self, Attribute::Number | Attribute::Size | Attribute::Color)
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = RpmError;

    fn from_str(s: &str) -> Result<Self, RpmError> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| RpmError::BadRule(s.into()))
    }
}

pub const SHAPE_TYPES: [&str; 5] = ["triangle", "square", "pentagon", "hexagon", "circle"];
pub const SIZE_LEVELS: usize = 6;
/// Fill gray value per color level; level 0 is the lightest.
pub const COLOR_LEVELS: [u8; 8] = [224, 192, 160, 128, 96, 64, 32, 0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArithmeticOp {
    Plus,
    Minus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "param", rename_all = "snake_case")]
pub enum Rule {
    Constant,
    Progression(i8),
    Arithmetic(ArithmeticOp),
    DistributeThree,
}

impl Rule {
    pub fn kind(&self) -> &'static str {
        match self {
            Rule::Constant => "constant",
            Rule::Progression(_) => "progression",
            Rule::Arithmetic(_) => "arithmetic",
            Rule::DistributeThree => "distribute_three",
        }
    }

    /// Every rule the generator knows, in a stable order.
    pub fn all() -> Vec<Rule> {
        vec![
            Rule::Constant,
            Rule::Progression(-2),
            Rule::Progression(-1),
            Rule::Progression(1),
            Rule::Progression(2),
            Rule::Arithmetic(ArithmeticOp::Plus),
            Rule::Arithmetic(ArithmeticOp::Minus),
            Rule::DistributeThree,
        ]
    }

    pub fn applies_to(&self, attribute: Attribute) -> bool {
        match self {
            Rule::Arithmetic(_) => attribute.is_numeric(),
            _ => true,
        }
    }
}

/// One rule governing one attribute of one slot, row by row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub slot: String,
    pub attribute: Attribute,
    pub rule: Rule,
}

impl fmt::Display for RuleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let param = match self.rule {
            Rule::Progression(d) => format!("{d:+}"),
            Rule::Arithmetic(ArithmeticOp::Plus) => "plus".into(),
            Rule::Arithmetic(ArithmeticOp::Minus) => "minus".into(),
            Rule::Constant | Rule::DistributeThree => String::new(),
        };
        write!(f, "{}:{}:{}:{}", self.slot, self.attribute, self.rule.kind(), param)
    }
}

impl FromStr for RuleSpec {
    type Err = RpmError;

    fn from_str(line: &str) -> Result<Self, RpmError> {
        let bad = || RpmError::BadRule(line.into());
        let parts: Vec<&str> = line.split(':').collect();
        let [slot, attribute, kind, param] = parts[..] else {
            return Err(bad());
        };
        let attribute: Attribute = attribute.parse().map_err(|_| bad())?;
        let rule = match (kind, param) {
            ("constant", "") => Rule::Constant,
            ("distribute_three", "") => Rule::DistributeThree,
            ("arithmetic", "plus") => Rule::Arithmetic(ArithmeticOp::Plus),
            ("arithmetic", "minus") => Rule::Arithmetic(ArithmeticOp::Minus),
            ("progression", p) => match p.parse::<i8>() {
                Ok(d @ (-2 | -1 | 1 | 2)) if p.starts_with(['+', '-']) => Rule::Progression(d),
                _ => return Err(bad()),
            },
            _ => return Err(bad()),
        };
        if slot.is_empty() || !rule.applies_to(attribute) {
            return Err(bad());
        }
        Ok(RuleSpec {
            slot: slot.into(),
            attribute,
            rule,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Configuration {
    Center,
    Grid2x2,
    Grid3x3,
    LeftRight,
    UpDown,
    OutInCenter,
    OutInGrid,
}

/// A layout region holding one entity or a grid of cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: &'static str,
    /// `(x0, y0, x1, y1)` as fractions of the panel side.
    pub bbox: (f64, f64, f64, f64),
    /// Cells per side; 1 for a single entity.
    pub grid: usize,
    /// Largest size level usable in this slot.
    pub max_scale: f64,
}

impl Slot {
    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Attributes carried by the slot: single-entity slots have no number
    /// or position.
    pub fn attributes(&self) -> &'static [Attribute] {
        if self.grid > 1 {
            &Attribute::ALL
        } else {
            &[Attribute::Type, Attribute::Size, Attribute::Color]
        }
    }
}

impl Configuration {
    pub const ALL: [Configuration; 7] = [
        Configuration::Center,
        Configuration::Grid2x2,
        Configuration::Grid3x3,
        Configuration::LeftRight,
        Configuration::UpDown,
        Configuration::OutInCenter,
        Configuration::OutInGrid,
    ];

    /// Configurations with generation presets.
    pub const SHIPPED: [Configuration; 4] = [
        Configuration::Center,
        Configuration::Grid2x2,
        Configuration::LeftRight,
        Configuration::UpDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Configuration::Center => "center",
            Configuration::Grid2x2 => "grid2x2",
            Configuration::Grid3x3 => "grid3x3",
            Configuration::LeftRight => "left_right",
            Configuration::UpDown => "up_down",
            Configuration::OutInCenter => "out_in_center",
            Configuration::OutInGrid => "out_in_grid",
        }
    }

    pub fn id(self) -> u8 {
        Self::ALL.iter().position(|&c| c == self).expect("listed") as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn slots(self) -> Vec<Slot> {
        let slot = |name, bbox, grid, max_scale| Slot {
            name,
            bbox,
            grid,
            max_scale,
        };
        match self {
            Configuration::Center => vec![slot("center", (0.0, 0.0, 1.0, 1.0), 1, 1.0)],
            Configuration::Grid2x2 => vec![slot("grid", (0.0, 0.0, 1.0, 1.0), 2, 1.0)],
            Configuration::Grid3x3 => vec![slot("grid", (0.0, 0.0, 1.0, 1.0), 3, 1.0)],
            Configuration::LeftRight => {
                vec![
                    slot("left", (0.0, 0.25, 0.5, 0.75), 1, 1.0),
                    slot("right", (0.5, 0.25, 1.0, 0.75), 1, 1.0),
                ]
            }
            Configuration::UpDown => {
                vec![
                    slot("up", (0.25, 0.0, 0.75, 0.5), 1, 1.0),
                    slot("down", (0.25, 0.5, 0.75, 1.0), 1, 1.0),
                ]
            }
            Configuration::OutInCenter => {
                vec![
                    slot("out", (0.0, 0.0, 1.0, 1.0), 1, 1.0),
                    slot("in", (0.3, 0.3, 0.7, 0.7), 1, 0.8),
                ]
            }
            Configuration::OutInGrid => {
                vec![
                    slot("out", (0.0, 0.0, 1.0, 1.0), 1, 1.0),
                    slot("grid", (0.3, 0.3, 0.7, 0.7), 2, 0.8),
                ]
            }
        }
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Configuration {
    type Err = RpmError;

    fn from_str(s: &str) -> Result<Self, RpmError> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| RpmError::UnknownConfiguration(s.into()))
    }
}

/// Attribute values of one slot in one panel. Entities of a grid slot
/// share type, size and color.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotState {
    /// Occupied cells as a bitmask, row-major; `1` for single-entity slots.
    pub positions: u16,
    #[serde(rename = "type")]
    pub shape: u8,
    pub size: u8,
    pub color: u8,
}

impl SlotState {
    pub fn number(&self) -> u32 {
        self.positions.count_ones()
    }

    /// Value of an attribute as a comparable integer: a 0-based level, with
    /// count minus one for number and the cell mask for position.
    pub fn get(&self, attribute: Attribute) -> u32 {
        match attribute {
            Attribute::Number => self.number().saturating_sub(1),
            Attribute::Position => self.positions as u32,
            Attribute::Type => self.shape as u32,
            Attribute::Size => self.size as u32,
            Attribute::Color => self.color as u32,
        }
    }
}

/// All slots of one panel, in configuration slot order.
pub type PanelState = Vec<SlotState>;

#[derive(Clone, Debug, PartialEq)]
pub struct RpmItem {
    pub config: Configuration,
    pub panel_size: usize,
    pub rules: Vec<RuleSpec>,
    pub correct: u8,
    /// 8 context panels (row-major, bottom-right missing) then 8 choices,
    /// each `panel_size * panel_size` bytes with 255 as background.
    pub panels: Vec<Vec<u8>>,
    /// Symbolic ground truth in the same order as `panels`.
    pub attributes: Option<Vec<PanelState>>,
}

impl RpmItem {
    pub fn context(&self) -> &[Vec<u8>] {
        &self.panels[..8]
    }

    pub fn choices(&self) -> &[Vec<u8>] {
        &self.panels[8..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_annotation_round_trip() {
        for attribute in Attribute::ALL {
            for rule in Rule::all().into_iter().filter(|r| r.applies_to(attribute)) {
                let spec = RuleSpec {
                    slot: "left".into(),
                    attribute,
                    rule,
                };
                let line = spec.to_string();
                assert_eq!(line.parse::<RuleSpec>().unwrap(), spec, "{line}");
            }
        }
        assert_eq!(
            RuleSpec {
                slot: "center".into(),
                attribute: Attribute::Size,
                rule: Rule::Progression(1)
            }
            .to_string(),
            "center:size:progression:+1"
        );
        for bad in [
            "center:type:arithmetic:plus",
            "center:size:progression:3",
            "center:size",
            ":size:constant:",
            "center:size:constant:x",
        ] {
            assert!(bad.parse::<RuleSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn configuration_names_and_ids() {
        for c in Configuration::ALL {
            assert_eq!(c.name().parse::<Configuration>().unwrap(), c);
            assert_eq!(Configuration::from_id(c.id()), Some(c));
        }
        assert!("diamond".parse::<Configuration>().is_err());
        assert_eq!(Configuration::from_id(7), None);
    }

    #[test]
    fn domains_fit_three_value_rules() {
        assert!(SHAPE_TYPES.len() >= 3 && SIZE_LEVELS >= 3 && COLOR_LEVELS.len() >= 3);
        assert!(COLOR_LEVELS.windows(2).all(|w| w[0] > w[1]));
    }
}
