use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::rpm::Configuration;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Val,
    Test,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Val => "val",
            Phase::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub accuracy: f64,
    pub per_config: Vec<(Configuration, f64)>,
    /// Wall-clock time; kept out of the CSV so histories compare bytewise.
    pub seconds: f64,
}

impl EpochRecord {
    pub fn from_report(epoch: usize, phase: Phase, report: &EvalReport, seconds: f64) -> Self {
        Self {
            epoch,
            phase,
            loss: report.loss,
            accuracy: report.accuracy,
            per_config: report.config_accuracy(),
            seconds,
        }
    }
}

/// Records in strictly increasing `(epoch, phase)` order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub records: Vec<EpochRecord>,
}

impl Metrics {
    pub fn push(&mut self, record: EpochRecord) {
        if let Some(last) = self.records.last() {
            assert!(
                (last.epoch, last.phase) < (record.epoch, record.phase),
                "record ({}, {}) out of order",
                record.epoch,
                record.phase.name()
            );
        }
        self.records.push(record);
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.phase(Phase::Val).map(|r| r.accuracy).reduce(f64::max)
    }

    fn configs(&self) -> Vec<Configuration> {
        let mut out: Vec<Configuration> = self
            .records
            .iter()
            .flat_map(|r| r.per_config.iter().map(|(c, _)| *c))
            .collect();
        out.sort_by_key(|c| c.id());
        out.dedup();
        out
    }

    /// `epoch,split,loss,accuracy` plus one accuracy column per
    /// configuration seen; cells are empty where a split lacks that
    /// configuration.
    pub fn to_csv(&self) -> String {
        let configs = self.configs();
        let mut out = String::from("epoch,split,loss,accuracy");
        for c in &configs {
            write!(out, ",acc_{c}").unwrap();
        }
        out.push('\n');
        for r in &self.records {
            write!(out, "{},{},{:.6},{:.6}", r.epoch, r.phase.name(), r.loss, r.accuracy).unwrap();
            for c in &configs {
                match r.per_config.iter().find(|(x, _)| x == c) {
                    Some((_, a)) => write!(out, ",{a:.6}").unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, phase: Phase, per_config: Vec<(Configuration, f64)>) -> EpochRecord {
        EpochRecord {
            epoch,
            phase,
            loss: 0.5,
            accuracy: 0.25,
            per_config,
            seconds: 1.0,
        }
    }

    #[test]
    fn csv_layout() {
        let mut m = Metrics::default();
        m.push(rec(0, Phase::Val, vec![(Configuration::Center, 0.25)]));
        m.push(rec(
            1,
            Phase::Train,
            vec![(Configuration::Center, 0.5), (Configuration::Grid2x2, 0.0)],
        ));
        assert_eq!(
            m.to_csv(),
            "epoch,split,loss,accuracy,acc_center,acc_grid2x2\n\
             0,val,0.500000,0.250000,0.250000,\n\
             1,train,0.500000,0.250000,0.500000,0.000000\n"
        );
    }

    #[test]
    #[should_panic(expected = "out of order")]
    fn records_must_increase() {
        let mut m = Metrics::default();
        m.push(rec(1, Phase::Val, vec![]));
        m.push(rec(1, Phase::Train, vec![]));
    }
}
