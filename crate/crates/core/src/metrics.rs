//! Subgroup accuracy, worst/best accuracy ratio (PQD), per-class
//! recall-parity (EOM) and report assembly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::UNCERTAIN;
use crate::error::{Error, Result};

/// Binary task classes.
pub const CLASSES: [i64; 2] = [0, 1];

pub const PREDICTIONS_HEADER: [&str; 5] = ["id", "y_hat", "y", "s_race", "s_gender"];
pub const REPORT_CSV_HEADER: [&str; 4] = ["grouping", "Acc/Avg", "PQD", "EOM"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub y_hat: i64,
    pub y: i64,
    pub s_race: usize,
    pub s_gender: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Race,
    RaceGender,
}

impl Grouping {
    pub fn key(self, r: &PredictionRecord) -> String {
        match self {
            Grouping::Race => format!("race={}", r.s_race),
            Grouping::RaceGender => format!("race={},gender={}", r.s_race, r.s_gender),
        }
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grouping::Race => "race",
            Grouping::RaceGender => "race_gender",
        })
    }
}

fn certain(records: &[PredictionRecord]) -> impl Iterator<Item = &PredictionRecord> {
    records.iter().filter(|r| r.y != UNCERTAIN)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub n: usize,
    pub correct: usize,
    pub acc: f64,
}

/// Per-group accuracy over records with a certain label.
pub fn subgroup_accuracy(records: &[PredictionRecord], grouping: Grouping) -> BTreeMap<String, GroupAccuracy> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in certain(records) {
        let e = counts.entry(grouping.key(r)).or_default();
        e.0 += 1;
        e.1 += usize::from(r.y_hat == r.y);
    }
    counts
        .into_iter()
        .map(|(k, (n, correct))| {
            (
                k,
                GroupAccuracy {
                    n,
                    correct,
                    acc: correct as f64 / n as f64,
                },
            )
        })
        .collect()
}

/// `min_j acc_j / max_j acc_j`.
pub fn pqd(accs: &[f64]) -> Result<f64> {
    if accs.is_empty() {
        return Err(Error::Metric("PQD needs at least one group".into()));
    }
    let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) {
        return Err(Error::Metric("PQD undefined: every group has zero accuracy".into()));
    }
    Ok(min / max)
}

/// Why a class was left out of the EOM mean.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedClass {
    pub class: i64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eom {
    pub value: f64,
    /// Per class: `min_j TPR / max_j TPR`, or `None` when skipped.
    pub ratios: BTreeMap<i64, Option<f64>>,
    pub skipped: Vec<SkippedClass>,
}

/// Mean over classes of the worst/best per-group recall ratio.
///
/// A class is skipped (and flagged) when some group has no sample of it, or
/// when every group has zero recall on it; `strict` turns the first case
/// into an error. At least one class must remain.
pub fn eom(records: &[PredictionRecord], grouping: Grouping, classes: &[i64], strict: bool) -> Result<Eom> {
    let table = tpr_table(records, grouping, classes);
    let mut ratios = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut sum = 0.0;
    let mut m = 0usize;
    for &c in classes {
        let cells: Vec<(&String, &(usize, usize))> = table.iter().filter_map(|(g, row)| row.get(&c).map(|v| (g, v))).collect();
        if let Some((g, _)) = cells.iter().find(|(_, (n, _))| *n == 0) {
            if strict {
                return Err(Error::Metric(format!("class {c} has no samples in group {g}")));
            }
            warn!("EOM: class {c} skipped, no samples in group {g}");
            skipped.push(SkippedClass {
                class: c,
                reason: format!("no samples in group {g}"),
            });
            ratios.insert(c, None);
            continue;
        }
        let tprs: Vec<f64> = cells.iter().map(|(_, (n, k))| *k as f64 / *n as f64).collect();
        let max = tprs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = tprs.iter().copied().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) {
            warn!("EOM: class {c} skipped, zero recall in every group");
            skipped.push(SkippedClass {
                class: c,
                reason: "zero recall in every group".into(),
            });
            ratios.insert(c, None);
            continue;
        }
        let ratio = min / max;
        ratios.insert(c, Some(ratio));
        sum += ratio;
        m += 1;
    }
    if m == 0 {
        return Err(Error::Metric("EOM undefined: no evaluable class".into()));
    }
    Ok(Eom {
        value: sum / m as f64,
        ratios,
        skipped,
    })
}

/// group → class → (support, correct). Every present group gets a cell
/// for every class, possibly with zero support.
fn tpr_table(records: &[PredictionRecord], grouping: Grouping, classes: &[i64]) -> BTreeMap<String, BTreeMap<i64, (usize, usize)>> {
    let mut table: BTreeMap<String, BTreeMap<i64, (usize, usize)>> = BTreeMap::new();
    for r in certain(records) {
        let row = table
            .entry(grouping.key(r))
            .or_insert_with(|| classes.iter().map(|c| (*c, (0, 0))).collect());
        if let Some(cell) = row.get_mut(&r.y) {
            cell.0 += 1;
            cell.1 += usize::from(r.y_hat == r.y);
        }
    }
    table
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub n: usize,
    pub acc: f64,
    /// Recall per class; `None` for zero support.
    pub tpr: BTreeMap<i64, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub grouping: Grouping,
    pub n: usize,
    /// Headline `Acc/Avg` value.
    pub acc_overall: f64,
    /// Unweighted mean of group accuracies.
    pub acc_macro: f64,
    pub pqd: f64,
    pub eom: f64,
    pub eom_skipped: Vec<SkippedClass>,
    pub groups: Vec<GroupRow>,
}

pub fn subgroup_report(records: &[PredictionRecord], grouping: Grouping, strict: bool) -> Result<SubgroupReport> {
    let accs = subgroup_accuracy(records, grouping);
    if accs.is_empty() {
        return Err(Error::Metric("no records with a certain label".into()));
    }
    let n: usize = accs.values().map(|a| a.n).sum();
    let correct: usize = accs.values().map(|a| a.correct).sum();
    let acc_values: Vec<f64> = accs.values().map(|a| a.acc).collect();
    let e = eom(records, grouping, &CLASSES, strict)?;
    let table = tpr_table(records, grouping, &CLASSES);
    let groups = accs
        .iter()
        .map(|(g, a)| GroupRow {
            group: g.clone(),
            n: a.n,
            acc: a.acc,
            tpr: table[g]
                .iter()
                .map(|(c, (n, k))| (*c, (*n > 0).then(|| *k as f64 / *n as f64)))
                .collect(),
        })
        .collect();
    Ok(SubgroupReport {
        grouping,
        n,
        acc_overall: correct as f64 / n as f64,
        acc_macro: acc_values.iter().sum::<f64>() / acc_values.len() as f64,
        pqd: pqd(&acc_values)?,
        eom: e.value,
        eom_skipped: e.skipped,
        groups,
    })
}

/// Race and race×gender reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub race: SubgroupReport,
    pub race_gender: SubgroupReport,
}

pub fn report(records: &[PredictionRecord], strict: bool) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Metric("no prediction records".into()));
    }
    Ok(Report {
        race: subgroup_report(records, Grouping::Race, strict)?,
        race_gender: subgroup_report(records, Grouping::RaceGender, strict)?,
    })
}

impl Report {
    /// Writes `<prefix>.json` and `<prefix>.csv`.
    pub fn write(&self, prefix: &Path) -> Result<()> {
        let json_path = prefix.with_extension("json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
        let csv_path = prefix.with_extension("csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record(REPORT_CSV_HEADER)?;
        for r in [&self.race, &self.race_gender] {
            w.write_record([r.grouping.to_string(), r.acc_overall.to_string(), r.pqd.to_string(), r.eom.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PREDICTIONS_HEADER)?;
    for r in records {
        w.write_record([
            r.id.clone(),
            r.y_hat.to_string(),
            r.y.to_string(),
            r.s_race.to_string(),
            r.s_gender.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != PREDICTIONS_HEADER {
        return Err(Error::Data(format!(
            "{}: header must be {}",
            path.display(),
            PREDICTIONS_HEADER.join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in reader.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
