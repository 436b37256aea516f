//! The seeded reference experiment: a sorted-digits dataset split into a
//! short and a long domain, one analytic expert teacher per domain, and a
//! noisier student.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use opd_core::policy::{checkpoint, SortedDigits, TabularPolicy};
use opd_core::Prompt;

use crate::config::{EnsembleConfig, EvalConfig, RunConfig, TeacherMode, TrainConfig};
use crate::dataset;
use crate::error::{write_file, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSetup {
    pub digits: usize,
    pub prompts: usize,
    pub bucket_count: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Prompts up to this size belong to the `short` domain.
    pub short_max_size: usize,
    pub teacher_sharpness: f64,
    pub student_sharpness: f64,
    pub student_noise: f64,
    pub seed: u64,
}

impl Default for ReferenceSetup {
    fn default() -> Self {
        Self {
            digits: 8,
            prompts: 96,
            bucket_count: 256,
            min_size: 1,
            max_size: 4,
            short_max_size: 2,
            teacher_sharpness: 6.0,
            student_sharpness: 3.0,
            student_noise: 1.0,
            seed: 2024,
        }
    }
}

pub struct ReferenceArtifacts {
    pub task: SortedDigits,
    pub dataset: Vec<Prompt>,
    pub student: TabularPolicy,
    pub teachers: Vec<(String, TabularPolicy)>,
    pub routes: BTreeMap<String, String>,
}

pub const SHORT: &str = "short";
pub const LONG: &str = "long";

pub fn build(setup: &ReferenceSetup) -> Result<ReferenceArtifacts> {
    let task = SortedDigits::new(setup.digits);
    let short_max = setup.short_max_size;
    let dataset = task.generate(
        setup.prompts,
        setup.min_size,
        setup.max_size,
        setup.bucket_count,
        setup.seed,
        |size| if size <= short_max { SHORT } else { LONG }.to_string(),
    )?;
    let mut teachers = Vec::new();
    for domain in [SHORT, LONG] {
        let own: Vec<Prompt> = dataset.iter().filter(|p| p.domain == domain).cloned().collect();
        teachers.push((
            domain.to_string(),
            task.expert(&own, setup.bucket_count, setup.teacher_sharpness)?,
        ));
    }
    let student = task.noisy_expert(
        &dataset,
        setup.bucket_count,
        setup.student_sharpness,
        setup.student_noise,
        setup.seed ^ 0x5eed,
    )?;
    let routes = [SHORT, LONG].iter().map(|d| (d.to_string(), d.to_string())).collect();
    Ok(ReferenceArtifacts {
        task,
        dataset,
        student,
        teachers,
        routes,
    })
}

/// Reference run settings, with paths relative to the configuration file.
pub fn reference_config(setup: &ReferenceSetup) -> RunConfig {
    RunConfig {
        dataset: "dataset.jsonl".into(),
        student: "student.json".into(),
        teachers: [SHORT, LONG]
            .iter()
            .map(|t| (t.to_string(), PathBuf::from(format!("teacher_{t}.json"))))
            .collect(),
        ensemble: EnsembleConfig {
            routes: [SHORT, LONG].iter().map(|d| (d.to_string(), d.to_string())).collect(),
            ..EnsembleConfig::default()
        },
        routing_table: Some("routing.json".into()),
        output_dir: "out".into(),
        profile: None,
        digits: setup.digits,
        train: TrainConfig {
            group_size: 16,
            batch_prompts: 64,
            learning_rate: 50.0,
            max_response_length: 5,
            total_steps: 200,
            seed: 7,
            ..TrainConfig::default()
        },
        balance: Default::default(),
        offline_balancing: true,
        online_filtering: true,
        calibration: Default::default(),
        teacher_mode: TeacherMode::Local,
        metrics_flush_interval: 10,
        track_kl: true,
        eval: EvalConfig::default(),
    }
}

/// Writes the dataset, checkpoints, a routing table and `config.json` into `dir`.
pub fn write_reference(dir: &Path, setup: &ReferenceSetup) -> Result<PathBuf> {
    let art = build(setup)?;
    write_file(&dir.join("dataset.jsonl"), &dataset::to_jsonl(&art.dataset))?;
    write_file(&dir.join("student.json"), &checkpoint::to_checkpoint(&art.student))?;
    for (name, policy) in &art.teachers {
        write_file(
            &dir.join(format!("teacher_{name}.json")),
            &checkpoint::to_checkpoint(policy),
        )?;
    }
    let routing = serde_json::json!({
        "routes": art.routes,
        "pools": { SHORT: ["127.0.0.1:7101"], LONG: ["127.0.0.1:7102"] },
    });
    write_file(
        &dir.join("routing.json"),
        &(serde_json::to_string_pretty(&routing).expect("json") + "\n"),
    )?;
    let config_path = dir.join("config.json");
    write_file(&config_path, &(reference_config(setup).effective_json() + "\n"))?;
    Ok(config_path)
}
