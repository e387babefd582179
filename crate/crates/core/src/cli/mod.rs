//! The `moesd` command line. Every subcommand writes its outputs plus a
//! `<output>.manifest.json` run record.
//!
//! Exit codes: 0 on success, 2 for input or configuration errors, 3 when a
//! run diverges numerically.

mod manifest;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use manifest::ManifestBuilder;
pub use manifest::{file_digest, manifest_path, RunManifest};

use crate::calibration::{build_calibration, CalibrationMatrix, PromptPairSet};
use crate::demo::{pretrain_base, run_demo, sample_base, sample_gated, train_experts};
use crate::diffusion::{SyntheticWorld, ToyConfig, ToyDenoiser};
use crate::embedding::{load_embedding_set, AttributeSet, SimilarityKind};
use crate::error::{Error, Result};
use crate::fairness::{fairness_score, LabelTable};
use crate::gate::{
    best_lambda, count_correct, run_gate, sweep_lambda, write_decisions_csv, GateConfig, GateInputs, SkewLabelTable,
};
use crate::moe::{write_samples_csv, ExpertRegistry, PipelineConfig, FEMALE, MALE};

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Parser)]
#[command(
    name = "moesd",
    version,
    about = "Bias gating, bias experts and fairness evaluation for a toy conditional diffusion model"
)]
pub struct Cli {
    /// Worker threads for parallel sections
    #[arg(long, global = true, default_value_t = default_threads())]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a calibration matrix from prompt pairs
    Calibrate(CalibrateArgs),
    /// Classify every prompt with the calibrated gate
    Gate(GateArgs),
    /// Gate accuracy for each of a list of lambdas
    SweepLambda(SweepArgs),
    /// Gate accuracy against majority-skew labels at one lambda
    GateEval(GateEvalArgs),
    /// Pre-train the toy denoiser on the biased synthetic world
    Pretrain(PretrainArgs),
    /// Fine-tune the male and female bias experts
    TrainExperts(TrainExpertsArgs),
    /// Generate and label samples for every concept
    Sample(SampleArgs),
    /// Fairness score of a label CSV
    EvalFairness(FairnessArgs),
    /// Whole toy pipeline in one run
    DemoE2e(DemoArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// EMBD file whose consecutive rows form prompt pairs
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value_t = 4000.0)]
    pub lambda: f64,
    /// Output CMAT file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GateEmbeddings {
    /// EMBD file of neutral prompts
    #[arg(long)]
    pub prompts: PathBuf,
    /// EMBD file of male variants, same labels as the prompts
    #[arg(long)]
    pub male: PathBuf,
    /// EMBD file of female variants, same labels as the prompts
    #[arg(long)]
    pub female: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f64,
    /// pearson, cosine, neg_euclidean, neg_manhattan or jaccard
    #[arg(long, default_value_t = SimilarityKind::Pearson)]
    pub similarity: SimilarityKind,
}

#[derive(Debug, Args, Serialize)]
pub struct GateArgs {
    /// CMAT calibration matrix
    #[arg(long)]
    pub calib: PathBuf,
    #[command(flatten)]
    pub embeddings: GateEmbeddings,
    /// Output decisions CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// EMBD file of prompt pairs
    #[arg(long)]
    pub pairs: PathBuf,
    #[command(flatten)]
    pub embeddings: GateEmbeddings,
    /// Majority-skew label CSV (occupation,male_count,female_count)
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,10,100,500,1000,2000,4000,8000")]
    pub lambdas: Vec<f64>,
    /// Output CSV (lambda,correct,total,accuracy)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GateEvalArgs {
    /// EMBD file of prompt pairs
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value_t = 4000.0)]
    pub lambda: f64,
    #[command(flatten)]
    pub embeddings: GateEmbeddings,
    /// Majority-skew label CSV (occupation,male_count,female_count)
    #[arg(long)]
    pub labels: PathBuf,
    /// Output JSON summary
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags that override values of the JSON toy config.
#[derive(Debug, Args, Serialize)]
pub struct ToyOverrides {
    /// JSON toy config; built-in defaults when absent
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed [default: 7]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the pre-training steps [default: 60000]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides the expert fine-tuning steps [default: 1000]
    #[arg(long)]
    pub expert_steps: Option<usize>,
    /// Overrides the samples drawn per concept [default: 200]
    #[arg(long)]
    pub samples: Option<usize>,
}

impl ToyOverrides {
    fn resolve(&self) -> Result<ToyConfig> {
        let mut cfg = match &self.config {
            Some(path) => ToyConfig::load(path).map_err(|e| at_path(path, e))?,
            None => ToyConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.expert_steps {
            cfg.expert_steps = v;
        }
        if let Some(v) = self.samples {
            cfg.samples_per_concept = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn record(&self, m: &mut ManifestBuilder, cfg: &ToyConfig) -> Result<()> {
        if let Some(path) = &self.config {
            m.input(path)?;
        }
        m.seed("seed", cfg.seed);
        Ok(())
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub toy: ToyOverrides,
    /// Output TDEN checkpoint
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainExpertsArgs {
    #[command(flatten)]
    pub toy: ToyOverrides,
    /// TDEN base checkpoint
    #[arg(long)]
    pub base: PathBuf,
    /// Output directory for male.bias and female.bias
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    pub toy: ToyOverrides,
    /// JSON pipeline config (routing, gate, special token, checkpoints)
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    /// TDEN base checkpoint; overrides the pipeline config
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// BIAS male expert; overrides the pipeline config
    #[arg(long)]
    pub male: Option<PathBuf>,
    /// BIAS female expert; overrides the pipeline config
    #[arg(long)]
    pub female: Option<PathBuf>,
    /// Sample the base model alone, without gate or experts
    #[arg(long)]
    pub base_only: bool,
    /// Output sample CSV (concept,sample_index,attribute,verdict)
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a label CSV (occupation,image_id,label)
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FairnessArgs {
    /// Label CSV (occupation,image_id,label)
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "male,female")]
    pub attributes: Vec<String>,
    /// Attribute whose deviation is reported [default: first attribute]
    #[arg(long)]
    pub attribute: Option<String>,
    /// Output JSON report
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DemoArgs {
    #[command(flatten)]
    pub toy: ToyOverrides,
    /// Output JSON report
    #[arg(long)]
    pub out: PathBuf,
}

fn at_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Divergence(_) => e,
        other => Error::invalid(format!("{}: {other}", path.display())),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_gate_inputs(e: &GateEmbeddings, m: &mut ManifestBuilder) -> Result<GateInputs> {
    for p in [&e.prompts, &e.male, &e.female] {
        m.input(p)?;
    }
    GateInputs::new(
        load_embedding_set(&e.prompts)?,
        load_embedding_set(&e.male)?,
        load_embedding_set(&e.female)?,
    )
}

fn load_pairs(path: &Path, m: &mut ManifestBuilder) -> Result<PromptPairSet> {
    m.input(path)?;
    PromptPairSet::from_embedding_set(&load_embedding_set(path)?).map_err(|e| at_path(path, e))
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("calibrate");
    m.config(a)?;
    let pairs = load_pairs(&a.pairs, &mut m)?;
    let c = build_calibration(&pairs, a.lambda)?;
    c.save(&a.out)?;
    m.output(&a.out);
    m.finish(&a.out)?;
    println!("calibration d={} lambda={} -> {}", c.dim(), c.lambda(), a.out.display());
    Ok(())
}

fn cmd_gate(a: &GateArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("gate");
    m.config(a)?;
    m.input(&a.calib)?;
    let c = CalibrationMatrix::load(&a.calib)?;
    let inputs = load_gate_inputs(&a.embeddings, &mut m)?;
    let cfg = GateConfig {
        lambda: c.lambda(),
        similarity: a.embeddings.similarity,
        threshold: a.embeddings.threshold,
    };
    let decisions = run_gate(&inputs, &c, &cfg)?;
    write_decisions_csv(&decisions, create(&a.out)?)?;
    m.output(&a.out);
    m.finish(&a.out)?;
    println!("{} decisions -> {}", decisions.len(), a.out.display());
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("sweep-lambda");
    m.config(a)?;
    let pairs = load_pairs(&a.pairs, &mut m)?;
    let inputs = load_gate_inputs(&a.embeddings, &mut m)?;
    m.input(&a.labels)?;
    let labels = SkewLabelTable::load(&a.labels).map_err(|e| at_path(&a.labels, e))?;
    let rows = sweep_lambda(
        &pairs,
        &inputs,
        &labels,
        &a.lambdas,
        a.embeddings.similarity,
        a.embeddings.threshold,
    )?;
    let mut w = csv::Writer::from_writer(create(&a.out)?);
    for row in &rows {
        w.serialize(row)?;
        println!(
            "lambda {:>10} accuracy {:.4} ({}/{})",
            row.lambda, row.accuracy, row.correct, row.total
        );
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    if let Some(best) = best_lambda(&rows) {
        println!("best lambda {} accuracy {:.4}", best.lambda, best.accuracy);
    }
    m.output(&a.out);
    m.finish(&a.out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct GateEvalSummary {
    lambda: f64,
    similarity: SimilarityKind,
    correct: usize,
    total: usize,
    accuracy: f64,
}

fn cmd_gate_eval(a: &GateEvalArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("gate-eval");
    m.config(a)?;
    let pairs = load_pairs(&a.pairs, &mut m)?;
    let inputs = load_gate_inputs(&a.embeddings, &mut m)?;
    m.input(&a.labels)?;
    let labels = SkewLabelTable::load(&a.labels).map_err(|e| at_path(&a.labels, e))?;
    let cfg = GateConfig {
        lambda: a.lambda,
        similarity: a.embeddings.similarity,
        threshold: a.embeddings.threshold,
    };
    let c = build_calibration(&pairs, a.lambda)?;
    let decisions = run_gate(&inputs, &c, &cfg)?;
    let correct = count_correct(&decisions, &labels)?;
    let total = decisions.len();
    let summary = GateEvalSummary {
        lambda: a.lambda,
        similarity: a.embeddings.similarity,
        correct,
        total,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
    };
    write_text(&a.out, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    m.output(&a.out);
    m.finish(&a.out)?;
    println!("accuracy {:.4} ({correct}/{total})", summary.accuracy);
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = a.toy.resolve()?;
    let mut m = ManifestBuilder::new("pretrain");
    m.config(&cfg)?;
    a.toy.record(&mut m, &cfg)?;
    let world = SyntheticWorld::generate(&cfg)?;
    let (model, report) = pretrain_base(&cfg, &world)?;
    model.save(&a.out)?;
    m.output(&a.out);
    m.finish(&a.out)?;
    println!(
        "pretrain {} steps loss {:.4} -> {:.4}",
        report.steps, report.initial_loss, report.final_loss
    );
    Ok(())
}

fn cmd_train_experts(a: &TrainExpertsArgs) -> Result<()> {
    let cfg = a.toy.resolve()?;
    let mut m = ManifestBuilder::new("train-experts");
    m.config(&cfg)?;
    a.toy.record(&mut m, &cfg)?;
    m.seed("male", cfg.seed.wrapping_add(1));
    m.seed("female", cfg.seed.wrapping_add(2));
    m.input(&a.base)?;
    let base = ToyDenoiser::load(&a.base)?;
    if base.k() != cfg.k || base.steps() != cfg.steps_t {
        return Err(Error::invalid(format!(
            "{}: checkpoint does not match the config (k or T differ)",
            a.base.display()
        )));
    }
    let world = SyntheticWorld::generate(&cfg)?;
    let experts = train_experts(&cfg, &world, &base)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (id, adapter, report) in [
        (MALE, &experts.male, &experts.male_report),
        (FEMALE, &experts.female, &experts.female_report),
    ] {
        let path = a.out.join(format!("{id}.bias"));
        adapter.save(id, &path)?;
        m.output(&path);
        println!(
            "{id} expert {} steps loss {:.4} -> {:.4}",
            report.steps, report.initial_loss, report.final_loss
        );
    }
    m.finish(&a.out)?;
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let cfg = a.toy.resolve()?;
    let mut pipeline = match &a.pipeline {
        Some(path) => PipelineConfig::load(path).map_err(|e| at_path(path, e))?,
        None => PipelineConfig {
            gate: crate::demo::demo_gate_config(&cfg),
            special_token_enabled: cfg.special_token,
            ..PipelineConfig::default()
        },
    };
    for (flag, slot) in [
        (&a.base, &mut pipeline.checkpoints.base),
        (&a.male, &mut pipeline.checkpoints.male),
        (&a.female, &mut pipeline.checkpoints.female),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    let mut m = ManifestBuilder::new("sample");
    m.config(&serde_json::json!({ "toy": cfg, "pipeline": pipeline, "base_only": a.base_only }))?;
    a.toy.record(&mut m, &cfg)?;
    if let Some(path) = &a.pipeline {
        m.input(path)?;
    }
    let need = |p: &Option<PathBuf>, what: &str| {
        p.clone()
            .ok_or_else(|| Error::invalid(format!("no {what} checkpoint given (flag or pipeline config)")))
    };
    let world = SyntheticWorld::generate(&cfg)?;
    let base_path = need(&pipeline.checkpoints.base, "base")?;
    m.input(&base_path)?;

    let (labels, records) = if a.base_only {
        let base = ToyDenoiser::load(&base_path)?;
        let labels = sample_base(&cfg, &world, &base)?;
        let records = labels
            .rows()
            .iter()
            .map(|r| crate::moe::SampleRecord {
                concept: r.occupation.clone(),
                sample_index: r.image_id.parse().unwrap_or_default(),
                attribute: r.label.clone(),
                verdict: crate::gate::Verdict::None,
            })
            .collect();
        (labels, records)
    } else {
        let male = need(&pipeline.checkpoints.male, "male")?;
        let female = need(&pipeline.checkpoints.female, "female")?;
        m.input(&male)?;
        m.input(&female)?;
        let registry = ExpertRegistry::load(&base_path, &male, &female)?;
        let out = sample_gated(
            &cfg,
            &world,
            &registry,
            &pipeline.routing,
            &pipeline.gate,
            pipeline.special_token_enabled,
        )?;
        for d in &out.decisions {
            println!("{:<24} skew {:+.4} {}", d.prompt_label, d.skew, d.verdict.as_str());
        }
        (out.labels, out.records)
    };
    write_samples_csv(&records, create(&a.out)?)?;
    m.output(&a.out);
    if let Some(path) = &a.labels_out {
        labels.write_csv(create(path)?)?;
        m.output(path);
    }
    m.finish(&a.out)?;
    let report = fairness_score(&labels, MALE)?;
    println!("{} samples, fairness score {:.4}", records.len(), report.score);
    Ok(())
}

fn cmd_eval_fairness(a: &FairnessArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("eval-fairness");
    m.config(a)?;
    m.input(&a.labels)?;
    let attributes = AttributeSet::new(a.attributes.iter().cloned())?;
    let report_attr = a.attribute.clone().unwrap_or_else(|| attributes.names()[0].clone());
    let table = LabelTable::load(&a.labels, attributes).map_err(|e| at_path(&a.labels, e))?;
    let report = fairness_score(&table, &report_attr)?;
    write_text(&a.out, &(report.to_json()? + "\n"))?;
    m.output(&a.out);
    m.finish(&a.out)?;
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_demo(a: &DemoArgs) -> Result<()> {
    let cfg = a.toy.resolve()?;
    let mut m = ManifestBuilder::new("demo-e2e");
    m.config(&cfg)?;
    a.toy.record(&mut m, &cfg)?;
    let run = run_demo(&cfg)?;
    let r = &run.report;
    write_text(&a.out, &(serde_json::to_string_pretty(r)? + "\n"))?;
    m.output(&a.out);
    m.finish(&a.out)?;
    println!(
        "pretrain loss {:.4} -> {:.4}",
        r.pretrain.initial_loss, r.pretrain.final_loss
    );
    println!(
        "male expert loss {:.4} -> {:.4}",
        r.male_expert.initial_loss, r.male_expert.final_loss
    );
    println!(
        "female expert loss {:.4} -> {:.4}",
        r.female_expert.initial_loss, r.female_expert.final_loss
    );
    println!("gate accuracy {:.4}", r.gate_accuracy);
    println!("fairness before {:.4}", r.before.score);
    println!("fairness after  {:.4}", r.after.score);
    Ok(())
}

impl Cli {
    pub fn run(&self) -> Result<()> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| match &self.command {
            Command::Calibrate(a) => cmd_calibrate(a),
            Command::Gate(a) => cmd_gate(a),
            Command::SweepLambda(a) => cmd_sweep(a),
            Command::GateEval(a) => cmd_gate_eval(a),
            Command::Pretrain(a) => cmd_pretrain(a),
            Command::TrainExperts(a) => cmd_train_experts(a),
            Command::Sample(a) => cmd_sample(a),
            Command::EvalFairness(a) => cmd_eval_fairness(a),
            Command::DemoE2e(a) => cmd_demo(a),
        })
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence(_) => 3,
        _ => 2,
    }
}

/// Parses the process arguments, runs the subcommand and maps failures to
/// exit codes.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match cli.run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flag_is_an_error() {
        assert!(Cli::try_parse_from(["moesd", "calibrate", "--pairs", "p", "--out", "o", "--bogus"]).is_err());
        let ok = Cli::try_parse_from(["moesd", "calibrate", "--pairs", "p", "--out", "o"]).unwrap();
        match ok.command {
            Command::Calibrate(a) => assert_eq!(a.lambda, 4000.0),
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        std::fs::write(&path, r#"{"seed": 3, "steps": 10}"#).unwrap();
        let o = ToyOverrides {
            config: Some(path),
            seed: Some(9),
            steps: None,
            expert_steps: None,
            samples: Some(5),
        };
        let cfg = o.resolve().unwrap();
        assert_eq!((cfg.seed, cfg.steps, cfg.samples_per_concept), (9, 10, 5));
    }

    #[test]
    fn config_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"learning_rate": 1}"#).unwrap();
        let o = ToyOverrides {
            config: Some(path.clone()),
            seed: None,
            steps: None,
            expert_steps: None,
            samples: None,
        };
        let e = o.resolve().unwrap_err();
        assert!(e.to_string().contains("bad.json"), "{e}");
        assert_eq!(exit_code(&e), 2);
        assert_eq!(exit_code(&Error::Divergence("x".into())), 3);
    }

    #[test]
    fn help_lists_defaults() {
        let help = Cli::command()
            .find_subcommand_mut("gate-eval")
            .unwrap()
            .render_long_help()
            .to_string();
        for s in ["--lambda", "[default: 4000]", "--threshold", "[default: pearson]"] {
            assert!(help.contains(s), "{s} missing from:\n{help}");
        }
    }
}
