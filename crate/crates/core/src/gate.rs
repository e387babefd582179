//! Bias identification gate.
//!
//! For a prompt embedding `z0` and its explicitly gendered variants, the gate
//! measures how much calibration moves `z0` relative to each variant:
//!
//! ```text
//! ΔS(z0, zt) = | sim(z0, zt) − sim(C·z0, zt) |
//! skew(z0)   = ΔS(z0, z_male) − ΔS(z0, z_female)
//! ```
//!
//! A positive skew routes as male-skewed, a negative one as female-skewed,
//! and anything within `±threshold` (including an exact zero) activates no
//! expert. For attribute sets other than gender, "male" stands for the first
//! attribute and "female" for the second.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{build_calibration, CalibrationMatrix, PromptPairSet};
use crate::embedding::{similarity, EmbeddingSet, EmbeddingVector, SimilarityKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Male,
    Female,
    None,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Male => "male",
            Verdict::Female => "female",
            Verdict::None => "none",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "male" => Ok(Verdict::Male),
            "female" => Ok(Verdict::Female),
            "none" => Ok(Verdict::None),
            _ => Err(Error::invalid(format!("unknown verdict {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub lambda: f64,
    pub similarity: SimilarityKind,
    pub threshold: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            lambda: 4000.0,
            similarity: SimilarityKind::Pearson,
            threshold: 0.0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(format!(
                "gate lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return Err(Error::invalid(format!(
                "gate threshold must be finite and >= 0, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub prompt_label: String,
    pub skew: f64,
    pub verdict: Verdict,
}

/// `|sim(z0, zt) − sim(C·z0, zt)|`.
pub fn delta_similarity(
    z0: &EmbeddingVector,
    zt: &EmbeddingVector,
    c: &CalibrationMatrix,
    kind: SimilarityKind,
) -> Result<f64> {
    let projected = c.project(z0)?;
    delta_with_projection(z0, &projected, zt, kind)
}

fn delta_with_projection(
    z0: &EmbeddingVector,
    projected: &EmbeddingVector,
    zt: &EmbeddingVector,
    kind: SimilarityKind,
) -> Result<f64> {
    let before = similarity(kind, z0, zt)?;
    let after = similarity(kind, projected, zt)?;
    Ok((before - after).abs())
}

/// `ΔS(z0, z_male) − ΔS(z0, z_female)`.
pub fn gender_skew(
    z0: &EmbeddingVector,
    z_male: &EmbeddingVector,
    z_female: &EmbeddingVector,
    c: &CalibrationMatrix,
    kind: SimilarityKind,
) -> Result<f64> {
    if z_male.dim() != z0.dim() || z_female.dim() != z0.dim() {
        return Err(Error::DimensionMismatch {
            expected: z0.dim(),
            found: if z_male.dim() != z0.dim() {
                z_male.dim()
            } else {
                z_female.dim()
            },
        });
    }
    let projected = c.project(z0)?;
    let to_male = delta_with_projection(z0, &projected, z_male, kind)?;
    let to_female = delta_with_projection(z0, &projected, z_female, kind)?;
    Ok(to_male - to_female)
}

/// Uncalibrated comparison `sim(z0, z_male) − sim(z0, z_female)`.
pub fn baseline_skew(
    z0: &EmbeddingVector,
    z_male: &EmbeddingVector,
    z_female: &EmbeddingVector,
    kind: SimilarityKind,
) -> Result<f64> {
    Ok(similarity(kind, z0, z_male)? - similarity(kind, z0, z_female)?)
}

pub fn classify(skew: f64, threshold: f64) -> Verdict {
    if skew > threshold {
        Verdict::Male
    } else if skew < -threshold {
        Verdict::Female
    } else {
        Verdict::None
    }
}

/// Prompt embeddings paired row by row with their gendered variants.
#[derive(Debug, Clone)]
pub struct GateInputs {
    prompts: EmbeddingSet,
    male: EmbeddingSet,
    female: EmbeddingSet,
}

impl GateInputs {
    /// The three sets must carry identical labels in identical order.
    pub fn new(prompts: EmbeddingSet, male: EmbeddingSet, female: EmbeddingSet) -> Result<Self> {
        for (name, other) in [("male", &male), ("female", &female)] {
            if other.dim() != prompts.dim() {
                return Err(Error::DimensionMismatch {
                    expected: prompts.dim(),
                    found: other.dim(),
                });
            }
            if other.len() != prompts.len() {
                return Err(Error::LabelMismatch(format!(
                    "{name} set has {} rows, prompt set has {}",
                    other.len(),
                    prompts.len()
                )));
            }
            if let Some((i, (a, b))) = prompts
                .labels()
                .zip(other.labels())
                .enumerate()
                .find(|(_, (a, b))| a != b)
            {
                return Err(Error::LabelMismatch(format!(
                    "row {i}: prompt label {a:?} vs {name} label {b:?}"
                )));
            }
        }
        Ok(Self { prompts, male, female })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prompts.dim()
    }

    pub fn prompts(&self) -> &EmbeddingSet {
        &self.prompts
    }

    pub fn male(&self) -> &EmbeddingSet {
        &self.male
    }

    pub fn female(&self) -> &EmbeddingSet {
        &self.female
    }

    /// `(label, z0, z_male, z_female)` rows in prompt order.
    pub fn rows(&self) -> impl Iterator<Item = (&str, &EmbeddingVector, &EmbeddingVector, &EmbeddingVector)> {
        self.prompts
            .entries()
            .iter()
            .zip(self.male.vectors())
            .zip(self.female.vectors())
            .map(|(((l, z0), m), f)| (l.as_str(), z0, m, f))
    }

    pub fn row(&self, label: &str) -> Option<(&EmbeddingVector, &EmbeddingVector, &EmbeddingVector)> {
        let i = self.prompts.labels().position(|l| l == label)?;
        Some((
            &self.prompts.entries()[i].1,
            &self.male.entries()[i].1,
            &self.female.entries()[i].1,
        ))
    }
}

/// Runs the calibrated gate on every prompt, in prompt order.
pub fn run_gate(inputs: &GateInputs, c: &CalibrationMatrix, cfg: &GateConfig) -> Result<Vec<GateDecision>> {
    cfg.validate()?;
    let rows: Vec<_> = inputs.rows().collect();
    rows.par_iter()
        .map(|&(label, z0, zm, zf)| {
            let skew = gender_skew(z0, zm, zf, c, cfg.similarity)?;
            Ok(GateDecision {
                prompt_label: label.to_owned(),
                skew,
                verdict: classify(skew, cfg.threshold),
            })
        })
        .collect()
}

/// Runs the uncalibrated comparison gate on every prompt.
pub fn run_baseline_gate(inputs: &GateInputs, kind: SimilarityKind, threshold: f64) -> Result<Vec<GateDecision>> {
    inputs
        .rows()
        .map(|(label, z0, zm, zf)| {
            let skew = baseline_skew(z0, zm, zf, kind)?;
            Ok(GateDecision {
                prompt_label: label.to_owned(),
                skew,
                verdict: classify(skew, threshold),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkewCounts {
    pub male_count: u64,
    pub female_count: u64,
}

impl SkewCounts {
    /// Male only when the male count is strictly more than half the total.
    pub fn majority(&self) -> Verdict {
        if self.male_count > self.female_count {
            Verdict::Male
        } else {
            Verdict::Female
        }
    }
}

/// Per-occupation attribute counts used as the gate's reference labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkewLabelTable {
    rows: BTreeMap<String, SkewCounts>,
    order: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SkewLabelRecord {
    occupation: String,
    male_count: u64,
    female_count: u64,
}

impl SkewLabelTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, occupation: impl Into<String>, male_count: u64, female_count: u64) -> Result<()> {
        let occupation = occupation.into();
        if self.rows.contains_key(&occupation) {
            return Err(Error::invalid(format!("duplicate occupation {occupation:?}")));
        }
        self.order.push(occupation.clone());
        self.rows.insert(
            occupation,
            SkewCounts {
                male_count,
                female_count,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, occupation: &str) -> Option<SkewCounts> {
        self.rows.get(occupation).copied()
    }

    pub fn label(&self, occupation: &str) -> Option<Verdict> {
        self.get(occupation).map(|c| c.majority())
    }

    pub fn occupations(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn read_csv<R: io::Read>(reader: R) -> Result<Self> {
        let mut table = Self::new();
        let mut rdr = csv::Reader::from_reader(reader);
        check_header(&mut rdr, &["occupation", "male_count", "female_count"])?;
        for rec in rdr.deserialize::<SkewLabelRecord>() {
            let rec = rec?;
            table.insert(rec.occupation, rec.male_count, rec.female_count)?;
        }
        Ok(table)
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for occ in &self.order {
            let c = self.rows[occ];
            w.serialize(SkewLabelRecord {
                occupation: occ.clone(),
                male_count: c.male_count,
                female_count: c.female_count,
            })?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::read_csv(std::fs::File::open(path).map_err(|e| Error::io(path, e))?)
    }
}

pub(crate) fn check_header<R: io::Read>(rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::invalid(format!(
            "unexpected csv header {:?}, expected {:?}",
            header.iter().collect::<Vec<_>>(),
            expected
        )));
    }
    Ok(())
}

/// Number of decisions whose verdict equals the majority label. A `none`
/// verdict never counts as correct.
pub fn count_correct(decisions: &[GateDecision], labels: &SkewLabelTable) -> Result<usize> {
    let mut seen = HashSet::with_capacity(decisions.len());
    let mut correct = 0;
    for d in decisions {
        let truth = labels
            .label(&d.prompt_label)
            .ok_or_else(|| Error::UnknownOccupation(d.prompt_label.clone()))?;
        if !seen.insert(d.prompt_label.as_str()) {
            return Err(Error::invalid(format!("duplicate decision for {:?}", d.prompt_label)));
        }
        if d.verdict == truth {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Fraction of occupations whose verdict matches the majority-count label.
pub fn evaluate_gate(decisions: &[GateDecision], labels: &SkewLabelTable) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::invalid("no gate decisions to evaluate"));
    }
    Ok(count_correct(decisions, labels)? as f64 / decisions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// One calibrated gate evaluation per λ, in the order given.
pub fn sweep_lambda(
    pairs: &PromptPairSet,
    inputs: &GateInputs,
    labels: &SkewLabelTable,
    lambdas: &[f64],
    similarity: SimilarityKind,
    threshold: f64,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::invalid("lambda sweep needs at least one value"));
    }
    let mut cache: HashMap<u64, SweepRow> = HashMap::new();
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        if let Some(row) = cache.get(&lambda.to_bits()) {
            out.push(row.clone());
            continue;
        }
        let cfg = GateConfig {
            lambda,
            similarity,
            threshold,
        };
        cfg.validate()?;
        let c = build_calibration(pairs, lambda)?;
        let decisions = run_gate(inputs, &c, &cfg)?;
        let correct = count_correct(&decisions, labels)?;
        let row = SweepRow {
            lambda,
            correct,
            total: decisions.len(),
            accuracy: if decisions.is_empty() {
                0.0
            } else {
                correct as f64 / decisions.len() as f64
            },
        };
        cache.insert(lambda.to_bits(), row.clone());
        out.push(row);
    }
    Ok(out)
}

/// The row with the most correct predictions; the smallest λ wins ties.
pub fn best_lambda(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter()
        .max_by(|a, b| a.correct.cmp(&b.correct).then(b.lambda.total_cmp(&a.lambda)))
}

#[derive(Debug, Serialize, Deserialize)]
struct DecisionRecord {
    prompt: String,
    skew: String,
    verdict: String,
}

/// Writes `prompt,skew,verdict` rows, skew to 9 significant digits.
pub fn write_decisions_csv<W: io::Write>(decisions: &[GateDecision], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for d in decisions {
        w.serialize(DecisionRecord {
            prompt: d.prompt_label.clone(),
            skew: format!("{:.8e}", d.skew),
            verdict: d.verdict.as_str().to_owned(),
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_decisions_csv<R: io::Read>(reader: R) -> Result<Vec<GateDecision>> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(&mut rdr, &["prompt", "skew", "verdict"])?;
    rdr.deserialize::<DecisionRecord>()
        .map(|rec| {
            let rec = rec?;
            let skew: f64 = rec
                .skew
                .parse()
                .map_err(|_| Error::invalid(format!("bad skew {:?}", rec.skew)))?;
            Ok(GateDecision {
                prompt_label: rec.prompt,
                skew,
                verdict: rec.verdict.parse()?,
            })
        })
        .collect()
}
