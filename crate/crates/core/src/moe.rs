//! Fixed-weight expert routing and gated generation.
//!
//! The gate's verdict selects a row of the [`RoutingTable`]; the row's weights
//! mix the original model with the male and female bias experts inside the
//! attention block at every denoising step.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{BiasAdapter, ExpertWeights, ORIGINAL};
use crate::calibration::CalibrationMatrix;
use crate::diffusion::{sample, ConditioningContext, MixedDenoiser, NoiseSchedule, ToyDenoiser};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::gate::{classify, gender_skew, GateConfig, GateDecision, Verdict};

pub const MALE: &str = "male";
pub const FEMALE: &str = "female";
pub const EXPERT_IDS: [&str; 3] = [ORIGINAL, MALE, FEMALE];

/// Expert weights per gate verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingTable {
    pub on_male_skew: ExpertWeights,
    pub on_female_skew: ExpertWeights,
    #[serde(default = "ExpertWeights::original_only")]
    pub on_none: ExpertWeights,
}

impl Default for RoutingTable {
    /// A male skew sends half the weight to the female expert, a tenth to the
    /// male expert and keeps 40% on the original model; symmetrically for a
    /// female skew.
    fn default() -> Self {
        Self {
            on_male_skew: ExpertWeights::from_pairs([(ORIGINAL, 0.4), (MALE, 0.1), (FEMALE, 0.5)]),
            on_female_skew: ExpertWeights::from_pairs([(ORIGINAL, 0.4), (MALE, 0.5), (FEMALE, 0.1)]),
            on_none: ExpertWeights::original_only(),
        }
    }
}

impl RoutingTable {
    pub fn validate(&self) -> Result<()> {
        for (name, row) in self.rows() {
            for (id, &w) in &row.0 {
                if !EXPERT_IDS.contains(&id.as_str()) {
                    return Err(Error::UnknownExpert(id.clone()));
                }
                if !(w.is_finite() && w >= 0.0) {
                    return Err(Error::invalid(format!("{name}: weight {w} for {id:?} must be >= 0")));
                }
            }
            let total = row.total();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("{name}: weights sum to {total}, not 1")));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> [(&'static str, &ExpertWeights); 3] {
        [
            ("on_male_skew", &self.on_male_skew),
            ("on_female_skew", &self.on_female_skew),
            ("on_none", &self.on_none),
        ]
    }
}

/// Pure lookup of the routing row for `verdict`.
pub fn route(verdict: Verdict, table: &RoutingTable) -> ExpertWeights {
    match verdict {
        Verdict::Male => table.on_male_skew.clone(),
        Verdict::Female => table.on_female_skew.clone(),
        Verdict::None => table.on_none.clone(),
    }
}

/// Base denoiser with exactly the male and female experts attached.
#[derive(Debug, Clone)]
pub struct ExpertRegistry {
    model: ToyDenoiser,
}

impl ExpertRegistry {
    pub fn new(base: &ToyDenoiser, male: BiasAdapter, female: BiasAdapter) -> Result<Self> {
        let mut model = base.base_only();
        model.insert_adapter(MALE, male)?;
        model.insert_adapter(FEMALE, female)?;
        Ok(Self { model })
    }

    /// Loads a `TDEN` base and two `BIAS` checkpoints whose stored ids must be
    /// `male` and `female`.
    pub fn load(base: impl AsRef<Path>, male: impl AsRef<Path>, female: impl AsRef<Path>) -> Result<Self> {
        let base = ToyDenoiser::load(base)?;
        let mut experts = BTreeMap::new();
        for (expected, path) in [(MALE, male.as_ref()), (FEMALE, female.as_ref())] {
            let (id, adapter) = BiasAdapter::load(path)?;
            if id != expected {
                return Err(Error::invalid(format!(
                    "{}: holds expert {id:?}, expected {expected:?}",
                    path.display()
                )));
            }
            experts.insert(id, adapter);
        }
        let male = experts.remove(MALE).expect("loaded above");
        let female = experts.remove(FEMALE).expect("loaded above");
        Self::new(&base, male, female)
    }

    pub fn model(&self) -> &ToyDenoiser {
        &self.model
    }
}

/// Where the gate verdict comes from.
#[derive(Debug, Clone, Copy)]
pub enum GateSource<'a> {
    /// Score the prompt against its gendered variants.
    Variants {
        male: &'a EmbeddingVector,
        female: &'a EmbeddingVector,
        calibration: &'a CalibrationMatrix,
        config: &'a GateConfig,
    },
    /// Skip the gate. The decision is recorded with a skew of 0.
    Override(Verdict),
}

#[derive(Debug, Clone)]
pub struct MoeOutput {
    pub samples: Vec<nalgebra::DVector<f64>>,
    pub decision: GateDecision,
    pub weights: ExpertWeights,
}

/// `seed` XOR the first eight bytes (little-endian) of SHA-256 of `label`.
pub fn batch_seed(seed: u64, label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Gate, route and sample `n` vectors for one prompt.
#[allow(clippy::too_many_arguments)]
pub fn moe_generate(
    registry: &ExpertRegistry,
    table: &RoutingTable,
    label: &str,
    prompt: &EmbeddingVector,
    gate: GateSource<'_>,
    special_token: Option<&[f64]>,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<MoeOutput> {
    table.validate()?;
    let decision = match gate {
        GateSource::Variants {
            male,
            female,
            calibration,
            config,
        } => {
            config.validate()?;
            let skew = gender_skew(prompt, male, female, calibration, config.similarity)?;
            GateDecision {
                prompt_label: label.to_owned(),
                skew,
                verdict: classify(skew, config.threshold),
            }
        }
        GateSource::Override(verdict) => GateDecision {
            prompt_label: label.to_owned(),
            skew: 0.0,
            verdict,
        },
    };
    let weights = route(decision.verdict, table);
    let ctx = ConditioningContext::new(prompt.as_slice(), special_token)?;
    let model = MixedDenoiser {
        model: registry.model(),
        weights: &weights,
    };
    let samples = sample(&model, schedule, &ctx, n, batch_seed(seed, label))?;
    Ok(MoeOutput {
        samples,
        decision,
        weights,
    })
}

/// Checkpoint locations for a pipeline run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointPaths {
    pub base: Option<PathBuf>,
    pub male: Option<PathBuf>,
    pub female: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub routing: RoutingTable,
    pub gate: GateConfig,
    pub special_token_enabled: bool,
    pub checkpoints: CheckpointPaths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            routing: RoutingTable::default(),
            gate: GateConfig::default(),
            special_token_enabled: true,
            checkpoints: CheckpointPaths::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.routing.validate()?;
        self.gate.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of the sample CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub concept: String,
    pub sample_index: usize,
    pub attribute: String,
    pub verdict: Verdict,
}

pub fn write_samples_csv<W: io::Write>(records: &[SampleRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["concept", "sample_index", "attribute", "verdict"])?;
    for r in records {
        w.serialize((&r.concept, r.sample_index, &r.attribute, r.verdict.as_str()))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_samples_csv<R: io::Read>(reader: R) -> Result<Vec<SampleRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    crate::gate::check_header(&mut rdr, &["concept", "sample_index", "attribute", "verdict"])?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::special_token;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_routing_rows() {
        let t = RoutingTable::default();
        t.validate().unwrap();
        let m = route(Verdict::Male, &t);
        assert_eq!((m.get(ORIGINAL), m.get(MALE), m.get(FEMALE)), (0.4, 0.1, 0.5));
        let f = route(Verdict::Female, &t);
        assert_eq!((f.get(ORIGINAL), f.get(MALE), f.get(FEMALE)), (0.4, 0.5, 0.1));
        assert_eq!(route(Verdict::None, &t), ExpertWeights::original_only());
        for (_, row) in t.rows() {
            assert!((row.total() - 1.0).abs() <= 1e-12);
        }
        // the counter-skew expert gets the largest non-original weight
        assert!(m.get(FEMALE) > m.get(MALE));
        assert!(f.get(MALE) > f.get(FEMALE));
    }

    #[test]
    fn invalid_tables() {
        let t = RoutingTable {
            on_none: ExpertWeights::from_pairs([(ORIGINAL, 0.9)]),
            ..RoutingTable::default()
        };
        assert!(t.validate().is_err());
        let t = RoutingTable {
            on_male_skew: ExpertWeights::from_pairs([(ORIGINAL, 0.5), ("neutral", 0.5)]),
            ..RoutingTable::default()
        };
        assert!(t.validate().is_err());
        let json = r#"{"on_male_skew": {"original": 1.0}, "on_female_skew": {"original": 1.0}}"#;
        let t: RoutingTable = serde_json::from_str(json).unwrap();
        assert_eq!(t.on_none, ExpertWeights::original_only());
    }

    #[test]
    fn batch_seed_is_stable() {
        assert_eq!(batch_seed(7, "nurse"), batch_seed(7, "nurse"));
        assert_ne!(batch_seed(7, "nurse"), batch_seed(7, "pilot"));
        let digest = Sha256::digest(b"nurse");
        assert_eq!(batch_seed(0, "nurse").to_le_bytes(), digest[..8]);
    }

    #[test]
    fn fresh_experts_and_none_match_base_sampling() {
        let base = ToyDenoiser::new(3, 8, 6, 5, 10, 2).unwrap();
        let dims = base.dims();
        let schedule = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let reg = ExpertRegistry::new(
            &base,
            BiasAdapter::new(dims, 2, 1).unwrap(),
            BiasAdapter::new(dims, 2, 2).unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = EmbeddingVector::new((0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let tok = special_token(6, 1);
        let table = RoutingTable::default();
        let ctx = ConditioningContext::new(z0.as_slice(), Some(&tok)).unwrap();
        let plain = sample(&base, &schedule, &ctx, 4, batch_seed(9, "nurse")).unwrap();
        for v in [Verdict::Male, Verdict::Female, Verdict::None] {
            let out = moe_generate(
                &reg,
                &table,
                "nurse",
                &z0,
                GateSource::Override(v),
                Some(&tok),
                &schedule,
                4,
                9,
            )
            .unwrap();
            assert_eq!(out.decision.verdict, v);
            for (a, b) in out.samples.iter().zip(&plain) {
                assert!((a - b).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn registry_rejects_swapped_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let base = ToyDenoiser::new(3, 8, 6, 5, 10, 2).unwrap();
        let a = BiasAdapter::new(base.dims(), 2, 1).unwrap();
        base.save(dir.path().join("base.tden")).unwrap();
        a.save(MALE, dir.path().join("m.bias")).unwrap();
        a.save(FEMALE, dir.path().join("f.bias")).unwrap();
        let p = |n: &str| dir.path().join(n);
        assert!(ExpertRegistry::load(p("base.tden"), p("m.bias"), p("f.bias")).is_ok());
        assert!(ExpertRegistry::load(p("base.tden"), p("f.bias"), p("m.bias")).is_err());
    }

    #[test]
    fn sample_csv_round_trip() {
        let recs = vec![SampleRecord {
            concept: "nurse".into(),
            sample_index: 0,
            attribute: "female".into(),
            verdict: Verdict::Male,
        }];
        let mut out = Vec::new();
        write_samples_csv(&recs, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out.clone()).unwrap(),
            "concept,sample_index,attribute,verdict\nnurse,0,female,male\n"
        );
        assert_eq!(read_samples_csv(out.as_slice()).unwrap(), recs);
    }
}
