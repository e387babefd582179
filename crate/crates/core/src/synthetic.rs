//! Embedding worlds with a planted spurious direction.
//!
//! Every occupation embedding is `c_o + s_o·g + noise`, where `g` is a unit
//! "gender" direction shared by the whole world and the sign of `s_o` is the
//! ground-truth skew. Gendered variants shift the prompt by `±m·g`, and the
//! calibration pairs differ by `2a·g` plus noise, so the calibrated projection
//! learns to suppress exactly the planted direction.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::PromptPairSet;
use crate::embedding::{EmbeddingSet, EmbeddingVector};
use crate::error::{Error, Result};
use crate::gate::{GateInputs, SkewLabelTable, Verdict};

const OCCUPATIONS_CSV: &str = include_str!("../fixtures/occupations.csv");

/// The 153-occupation prompt list, alphabetically, with whether the reference
/// gate classified each one correctly (`true`) or not.
pub fn occupations() -> Vec<(&'static str, bool)> {
    OCCUPATIONS_CSV
        .lines()
        .skip(1)
        .filter_map(|l| l.split_once(','))
        .map(|(o, p)| (o, p == "right"))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedWorldConfig {
    pub dim: usize,
    pub occupations: usize,
    pub pairs: usize,
    /// Half the spurious offset between the two prompts of a pair.
    pub pair_offset: f64,
    /// Offset of each gendered variant from its neutral prompt.
    pub variant_offset: f64,
    pub skew_min: f64,
    pub skew_max: f64,
    /// Total norm scale of isotropic noise on prompts and pairs.
    pub noise: f64,
    pub variant_noise: f64,
    pub seed: u64,
}

impl Default for PlantedWorldConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            occupations: 60,
            pairs: 8,
            pair_offset: 0.5,
            variant_offset: 0.5,
            skew_min: 0.3,
            skew_max: 1.0,
            noise: 0.02,
            variant_noise: 0.01,
            seed: 7,
        }
    }
}

impl PlantedWorldConfig {
    fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.occupations == 0 || self.pairs == 0 {
            return Err(Error::invalid(
                "planted world needs dim >= 2 and at least one occupation and pair",
            ));
        }
        if !(0.0 < self.skew_min && self.skew_min <= self.skew_max) {
            return Err(Error::invalid("planted world needs 0 < skew_min <= skew_max"));
        }
        Ok(())
    }
}

/// A generated world: calibration pairs, gate inputs and ground truth.
#[derive(Debug, Clone)]
pub struct PlantedGateWorld {
    pub direction: DVector<f64>,
    pub pair_set: EmbeddingSet,
    pub pairs: PromptPairSet,
    pub inputs: GateInputs,
    pub labels: SkewLabelTable,
    /// Planted skew per occupation, in prompt order.
    pub skews: Vec<f64>,
}

impl PlantedGateWorld {
    pub fn generate(cfg: &PlantedWorldConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = 1.0 / (d as f64).sqrt();
        let gauss = |rng: &mut ChaCha8Rng, s: f64| -> DVector<f64> {
            DVector::from_fn(d, |_, _| {
                let x: f64 = StandardNormal.sample(rng);
                x * s * scale
            })
        };

        let g = {
            let v = gauss(&mut rng, 1.0);
            let n = v.norm();
            v / n
        };

        let list = occupations();
        let names: Vec<String> = (0..cfg.occupations)
            .map(|i| match list.get(i) {
                Some((o, _)) => (*o).to_owned(),
                None => format!("occupation {i}"),
            })
            .collect();

        let mut pair_set = EmbeddingSet::new(d)?;
        for k in 0..cfg.pairs {
            let class = gauss(&mut rng, 1.0);
            let zi = &class + &g * cfg.pair_offset + gauss(&mut rng, cfg.noise);
            let zj = &class - &g * cfg.pair_offset + gauss(&mut rng, cfg.noise);
            pair_set.push(format!("class {k} with male attributes"), to_ev(&zi)?)?;
            pair_set.push(format!("class {k} with female attributes"), to_ev(&zj)?)?;
        }
        let pair_set = pair_set.quantized();
        let pairs = PromptPairSet::from_embedding_set(&pair_set)?;

        let mut prompts = EmbeddingSet::new(d)?;
        let mut male = EmbeddingSet::new(d)?;
        let mut female = EmbeddingSet::new(d)?;
        let mut labels = SkewLabelTable::new();
        let mut skews = Vec::with_capacity(cfg.occupations);
        for name in &names {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let s = sign * rng.random_range(cfg.skew_min..=cfg.skew_max);
            let z0 = gauss(&mut rng, 1.0) + &g * s + gauss(&mut rng, cfg.noise);
            let zm = &z0 + &g * cfg.variant_offset + gauss(&mut rng, cfg.variant_noise);
            let zf = &z0 - &g * cfg.variant_offset + gauss(&mut rng, cfg.variant_noise);
            prompts.push(name.clone(), to_ev(&z0)?)?;
            male.push(name.clone(), to_ev(&zm)?)?;
            female.push(name.clone(), to_ev(&zf)?)?;

            let share = 0.5 + 0.45 * s / cfg.skew_max;
            let male_count = (100.0 * share).round() as u64;
            labels.insert(name.clone(), male_count, 100 - male_count)?;
            skews.push(s);
        }
        let inputs = GateInputs::new(prompts.quantized(), male.quantized(), female.quantized())?;
        Ok(Self {
            direction: g,
            pair_set,
            pairs,
            inputs,
            labels,
            skews,
        })
    }

    pub fn truth(&self, i: usize) -> Verdict {
        if self.skews[i] > 0.0 {
            Verdict::Male
        } else {
            Verdict::Female
        }
    }
}

fn to_ev(v: &DVector<f64>) -> Result<EmbeddingVector> {
    EmbeddingVector::new(v.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn occupation_list_has_153_entries() {
        let list = occupations();
        assert_eq!(list.len(), 153);
        assert_eq!(list.iter().filter(|(_, right)| *right).count(), 121);
        assert!(list.iter().any(|(o, _)| *o == "nurse"));
    }

    #[test]
    fn world_is_deterministic_and_consistent() {
        let cfg = PlantedWorldConfig::default();
        let a = PlantedGateWorld::generate(&cfg).unwrap();
        let b = PlantedGateWorld::generate(&cfg).unwrap();
        assert_eq!(a.pair_set, b.pair_set);
        assert_eq!(a.inputs.prompts(), b.inputs.prompts());
        assert_eq!(a.pairs.len(), cfg.pairs);
        assert_eq!(a.inputs.len(), cfg.occupations);
        for (i, occ) in a.inputs.prompts().labels().enumerate() {
            assert_eq!(a.labels.label(occ), Some(a.truth(i)));
        }
    }
}
