//! Statistical parity fairness over labelled generations.
//!
//! For each occupation the empirical frequency `p̂_a` of the reported
//! attribute is compared with the uniform frequency `1/|A|`. The score is the
//! mean of `|p̂_a − 1/|A||` over occupations; rows labelled `unknown` are left
//! out of every denominator. With more than two attributes the per-occupation
//! deviation is the mean over all attributes.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::AttributeSet;
use crate::error::{Error, Result};
use crate::gate::check_header;

pub const UNKNOWN: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub occupation: String,
    pub image_id: String,
    pub label: String,
}

/// Labelled generations, unique per `(occupation, image_id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTable {
    attributes: AttributeSet,
    rows: Vec<LabelRow>,
    seen: HashSet<(String, String)>,
}

impl LabelTable {
    pub fn new(attributes: AttributeSet) -> Self {
        Self {
            attributes,
            rows: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub fn attributes(&self) -> &AttributeSet {
        &self.attributes
    }

    pub fn push(
        &mut self,
        occupation: impl Into<String>,
        image_id: impl Into<String>,
        label: impl Into<String>,
    ) -> Result<()> {
        let row = LabelRow {
            occupation: occupation.into(),
            image_id: image_id.into(),
            label: label.into(),
        };
        if row.label != UNKNOWN && !self.attributes.contains(&row.label) {
            return Err(Error::invalid(format!(
                "label {:?} is neither in {} nor {UNKNOWN:?}",
                row.label, self.attributes
            )));
        }
        if !self.seen.insert((row.occupation.clone(), row.image_id.clone())) {
            return Err(Error::invalid(format!(
                "duplicate row for occupation {:?}, image {:?}",
                row.occupation, row.image_id
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[LabelRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Per occupation, the count of each attribute in set order.
    pub fn counts(&self) -> BTreeMap<&str, Vec<u64>> {
        let mut out: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
        for r in &self.rows {
            let c = out
                .entry(r.occupation.as_str())
                .or_insert_with(|| vec![0; self.attributes.len()]);
            if let Some(i) = self.attributes.index_of(&r.label) {
                c[i] += 1;
            }
        }
        out
    }

    pub fn read_csv<R: io::Read>(reader: R, attributes: AttributeSet) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        check_header(&mut rdr, &["occupation", "image_id", "label"])?;
        let mut table = Self::new(attributes);
        for row in rdr.deserialize::<LabelRow>() {
            let row = row?;
            table.push(row.occupation, row.image_id, row.label)?;
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>, attributes: AttributeSet) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, attributes)
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(["occupation", "image_id", "label"])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeScore {
    pub score: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub score: f64,
    pub std: f64,
    pub attribute: String,
    pub per_occupation: BTreeMap<String, f64>,
    /// Score and spread of every attribute's own deviation.
    pub per_attribute: BTreeMap<String, AttributeScore>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fairness of `table`, reporting `report_attribute`.
pub fn fairness_score(table: &LabelTable, report_attribute: &str) -> Result<FairnessReport> {
    let attrs = table.attributes();
    let report_idx = attrs
        .index_of(report_attribute)
        .ok_or_else(|| Error::invalid(format!("{report_attribute:?} is not in {attrs}")))?;
    let counts = table.counts();
    if counts.is_empty() {
        return Err(Error::invalid("label table is empty"));
    }
    let empty: Vec<String> = counts
        .iter()
        .filter(|(_, c)| c.iter().sum::<u64>() == 0)
        .map(|(o, _)| (*o).to_owned())
        .collect();
    if !empty.is_empty() {
        return Err(Error::EmptyOccupations(empty));
    }

    let uniform = 1.0 / attrs.len() as f64;
    let entries: Vec<(&str, &Vec<u64>)> = counts.iter().map(|(o, c)| (*o, c)).collect();
    // deviations[o][a]
    let deviations: Vec<Vec<f64>> = entries
        .par_iter()
        .map(|(_, c)| {
            let total = c.iter().sum::<u64>() as f64;
            c.iter().map(|&n| (n as f64 / total - uniform).abs()).collect()
        })
        .collect();

    let per_occ: Vec<f64> = deviations
        .iter()
        .map(|d| {
            if attrs.len() == 2 {
                d[report_idx]
            } else {
                d.iter().sum::<f64>() / d.len() as f64
            }
        })
        .collect();
    let (score, std) = mean_std(&per_occ);
    let per_attribute = attrs
        .names()
        .iter()
        .enumerate()
        .map(|(a, name)| {
            let col: Vec<f64> = deviations.iter().map(|d| d[a]).collect();
            let (score, std) = mean_std(&col);
            (name.clone(), AttributeScore { score, std })
        })
        .collect();
    Ok(FairnessReport {
        score,
        std,
        attribute: report_attribute.to_owned(),
        per_occupation: entries.iter().map(|(o, _)| (*o).to_owned()).zip(per_occ).collect(),
        per_attribute,
    })
}

impl FairnessReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table: one line per occupation, then the summary.
    pub fn render_table(&self) -> String {
        let width = self
            .per_occupation
            .keys()
            .map(|o| o.chars().count())
            .max()
            .unwrap_or(0)
            .max("occupation".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  deviation ({})", "occupation", self.attribute);
        for (o, d) in &self.per_occupation {
            let _ = writeln!(out, "{o:<width$}  {d:.4}");
        }
        let _ = writeln!(out, "{:<width$}  {:.4}", "score", self.score);
        let _ = writeln!(out, "{:<width$}  {:.4}", "std", self.std);
        out
    }
}

/// `⟨weights, feature⟩ + bias`.
pub fn linear_score(weights: &[f64], bias: f64, feature: &[f64]) -> Result<f64> {
    if weights.len() != feature.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            found: feature.len(),
        });
    }
    Ok(weights.iter().zip(feature).map(|(w, x)| w * x).sum::<f64>() + bias)
}
