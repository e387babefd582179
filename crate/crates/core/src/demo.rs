//! The whole toy pipeline in one place: world generation, biased
//! pre-training, expert fine-tuning, gated sampling and fairness scoring.

use serde::{Deserialize, Serialize};

use crate::adapter::BiasAdapter;
use crate::calibration::build_calibration;
use crate::diffusion::{
    oracle_classify, pretrain, sample, train_expert, SyntheticWorld, ToyConfig, ToyDenoiser, TrainReport, TrainSettings,
};
use crate::error::Result;
use crate::fairness::{fairness_score, FairnessReport, LabelTable};
use crate::gate::{evaluate_gate, GateConfig, GateDecision};
use crate::moe::{batch_seed, moe_generate, ExpertRegistry, GateSource, RoutingTable, SampleRecord, FEMALE, MALE};

/// Pre-trains a fresh base model on the biased world.
pub fn pretrain_base(cfg: &ToyConfig, world: &SyntheticWorld) -> Result<(ToyDenoiser, TrainReport)> {
    let schedule = cfg.schedule()?;
    let mut model = ToyDenoiser::new(cfg.k, cfg.d_x, cfg.d_c, cfg.d_h, cfg.steps_t, cfg.seed)?;
    let report = pretrain(
        &mut model,
        world,
        &schedule,
        &TrainSettings {
            steps: cfg.steps,
            lr: cfg.lr,
            batch: cfg.batch,
            seed: cfg.seed,
        },
        cfg.pretrain_token_rate,
    )?;
    Ok((model, report))
}

#[derive(Debug, Clone)]
pub struct TrainedExperts {
    pub male: BiasAdapter,
    pub female: BiasAdapter,
    pub male_report: TrainReport,
    pub female_report: TrainReport,
}

/// Fine-tunes the male and female experts concurrently; each run is
/// single-threaded and seeded, so the result does not depend on scheduling.
pub fn train_experts(cfg: &ToyConfig, world: &SyntheticWorld, base: &ToyDenoiser) -> Result<TrainedExperts> {
    let schedule = cfg.schedule()?;
    let settings = |offset: u64| TrainSettings {
        steps: cfg.expert_steps,
        lr: cfg.expert_lr,
        batch: cfg.batch,
        seed: cfg.seed.wrapping_add(offset),
    };
    let train = |id: &str, attribute: usize, offset: u64| {
        train_expert(
            base,
            id,
            world,
            attribute,
            cfg.special_token,
            cfg.rank,
            &schedule,
            &settings(offset),
        )
    };
    let (male, female) = rayon::join(|| train(MALE, 0, 1), || train(FEMALE, 1, 2));
    let (male, male_report) = male?;
    let (female, female_report) = female?;
    Ok(TrainedExperts {
        male,
        female,
        male_report,
        female_report,
    })
}

fn label_rows(world: &SyntheticWorld, concept: usize, samples: &[nalgebra::DVector<f64>]) -> Result<Vec<String>> {
    samples
        .iter()
        .map(|s| oracle_classify(world, concept, s).map(str::to_owned))
        .collect()
}

/// Samples the base model alone (no special token) for every concept and
/// labels the results with the oracle classifier.
pub fn sample_base(cfg: &ToyConfig, world: &SyntheticWorld, base: &ToyDenoiser) -> Result<LabelTable> {
    let schedule = cfg.schedule()?;
    let mut table = LabelTable::new(world.attributes.clone());
    for (ci, concept) in world.concepts.iter().enumerate() {
        let ctx = world.context(ci, false)?;
        let samples = sample(
            &base.base_only(),
            &schedule,
            &ctx,
            cfg.samples_per_concept,
            batch_seed(cfg.seed, &concept.name),
        )?;
        for (i, label) in label_rows(world, ci, &samples)?.into_iter().enumerate() {
            table.push(concept.name.clone(), i.to_string(), label)?;
        }
    }
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct GatedSamples {
    pub labels: LabelTable,
    pub records: Vec<SampleRecord>,
    pub decisions: Vec<GateDecision>,
}

/// The gate configuration the demo uses for a toy config.
pub fn demo_gate_config(cfg: &ToyConfig) -> GateConfig {
    GateConfig {
        lambda: cfg.gate_lambda,
        ..GateConfig::default()
    }
}

/// Gates every concept, routes to the experts and labels the samples.
pub fn sample_gated(
    cfg: &ToyConfig,
    world: &SyntheticWorld,
    registry: &ExpertRegistry,
    table: &RoutingTable,
    gate: &GateConfig,
    special_token: bool,
) -> Result<GatedSamples> {
    let schedule = cfg.schedule()?;
    let calibration = build_calibration(&world.gate.pairs, gate.lambda)?;
    let token = special_token.then_some(world.special_token.as_slice());
    let mut out = GatedSamples {
        labels: LabelTable::new(world.attributes.clone()),
        records: Vec::new(),
        decisions: Vec::new(),
    };
    for (ci, (label, z0, zm, zf)) in world.gate.inputs.rows().enumerate() {
        let result = moe_generate(
            registry,
            table,
            label,
            z0,
            GateSource::Variants {
                male: zm,
                female: zf,
                calibration: &calibration,
                config: gate,
            },
            token,
            &schedule,
            cfg.samples_per_concept,
            cfg.seed,
        )?;
        for (i, attr) in label_rows(world, ci, &result.samples)?.into_iter().enumerate() {
            out.labels.push(label, i.to_string(), attr.clone())?;
            out.records.push(SampleRecord {
                concept: label.to_owned(),
                sample_index: i,
                attribute: attr,
                verdict: result.decision.verdict,
            });
        }
        out.decisions.push(result.decision);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub config: ToyConfig,
    pub pretrain: TrainReport,
    pub male_expert: TrainReport,
    pub female_expert: TrainReport,
    pub gate_accuracy: f64,
    pub decisions: Vec<GateDecision>,
    pub before: FairnessReport,
    pub after: FairnessReport,
}

/// Everything the demo produced, including the trained weights.
#[derive(Debug, Clone)]
pub struct DemoRun {
    pub report: DemoReport,
    pub base: ToyDenoiser,
    pub experts: TrainedExperts,
    pub base_labels: LabelTable,
    pub samples: GatedSamples,
}

pub fn run_demo(cfg: &ToyConfig) -> Result<DemoRun> {
    let world = SyntheticWorld::generate(cfg)?;
    let (base, pretrain_report) = pretrain_base(cfg, &world)?;
    let base_labels = sample_base(cfg, &world, &base)?;
    let before = fairness_score(&base_labels, MALE)?;
    let experts = train_experts(cfg, &world, &base)?;
    let registry = ExpertRegistry::new(&base, experts.male.clone(), experts.female.clone())?;
    let gate = demo_gate_config(cfg);
    let samples = sample_gated(
        cfg,
        &world,
        &registry,
        &RoutingTable::default(),
        &gate,
        cfg.special_token,
    )?;
    let after = fairness_score(&samples.labels, MALE)?;
    let report = DemoReport {
        config: cfg.clone(),
        pretrain: pretrain_report,
        male_expert: experts.male_report,
        female_expert: experts.female_report,
        gate_accuracy: evaluate_gate(&samples.decisions, &world.gate.labels)?,
        decisions: samples.decisions.clone(),
        before,
        after,
    };
    Ok(DemoRun {
        report,
        base,
        experts,
        base_labels,
        samples,
    })
}
