//! Run configuration. Relative paths are resolved against the directory of
//! the configuration file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use opd_core::balance::BalanceConfig;
use opd_core::calibration::CalibrationConfig;
use opd_core::policy::{checkpoint, EnsembleMode, ReturnAggregation, SortedDigits, TabularPolicy, TeacherEnsemble};
use serde::{Deserialize, Serialize};

use crate::error::{read_file, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TeacherMode {
    #[default]
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub batch_prompts: usize,
    pub learning_rate: f64,
    pub max_response_length: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub return_aggregation: ReturnAggregation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            batch_prompts: 64,
            learning_rate: 1.0,
            max_response_length: 8,
            total_steps: 200,
            seed: 0,
            return_aggregation: ReturnAggregation::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(HarnessError::Config(format!(
                "group size must be >= 2, got {}",
                self.group_size
            )));
        }
        if self.batch_prompts == 0 {
            return Err(HarnessError::Config("batch_prompts must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HarnessError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_response_length == 0 {
            return Err(HarnessError::Config("max_response_length must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub mode: EnsembleMode,
    /// Domain to teacher name, used in routing mode.
    pub routes: BTreeMap<String, String>,
    /// Teacher name to weight, used in weighted mode.
    pub weights: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Responses sampled per prompt.
    pub samples: usize,
    pub k: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            k: vec![1, 4, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    /// Initial student checkpoint.
    pub student: PathBuf,
    /// Teacher name to checkpoint.
    pub teachers: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    /// Required in remote teacher mode.
    #[serde(default)]
    pub routing_table: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Difficulty profile; defaults to `<output_dir>/profile.jsonl`.
    #[serde(default)]
    pub profile: Option<PathBuf>,
    /// Number of digits in the sorted-digits task.
    pub digits: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub balance: BalanceConfig,
    #[serde(default = "yes")]
    pub offline_balancing: bool,
    #[serde(default = "yes")]
    pub online_filtering: bool,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub teacher_mode: TeacherMode,
    #[serde(default = "default_flush")]
    pub metrics_flush_interval: usize,
    /// Compute the exact reverse KL to the teachers before and after training.
    #[serde(default = "yes")]
    pub track_kl: bool,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn yes() -> bool {
    true
}

fn default_flush() -> usize {
    10
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!(
            "{what} `{}` does not exist",
            path.display()
        )))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config: {e}")))
    }

    /// Reads, resolves paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.dataset = resolve(base, &self.dataset);
        self.student = resolve(base, &self.student);
        for p in self.teachers.values_mut() {
            *p = resolve(base, p);
        }
        self.routing_table = self.routing_table.as_ref().map(|p| resolve(base, p));
        self.output_dir = resolve(base, &self.output_dir);
        self.profile = self.profile.as_ref().map(|p| resolve(base, p));
    }

    pub fn validate(&self) -> Result<()> {
        require_file(&self.dataset, "dataset")?;
        require_file(&self.student, "student checkpoint")?;
        if self.teachers.is_empty() {
            return Err(HarnessError::Config("at least one teacher is required".into()));
        }
        for (name, path) in &self.teachers {
            require_file(path, &format!("checkpoint of teacher `{name}`"))?;
        }
        if self.teacher_mode == TeacherMode::Remote {
            match &self.routing_table {
                Some(p) => require_file(p, "routing table")?,
                None => return Err(HarnessError::Config("remote teacher mode needs a routing_table".into())),
            }
            if self.ensemble.mode != EnsembleMode::Routing {
                return Err(HarnessError::Config(
                    "remote teacher mode supports routing ensembles only".into(),
                ));
            }
        }
        if self.digits < 2 {
            return Err(HarnessError::Config("the task needs at least 2 digits".into()));
        }
        self.train.validate()?;
        self.balance.validate()?;
        self.calibration.validate()?;
        if self.eval.samples == 0 {
            return Err(HarnessError::Config("eval.samples must be positive".into()));
        }
        Ok(())
    }

    pub fn profile_path(&self) -> PathBuf {
        self.profile
            .clone()
            .unwrap_or_else(|| self.output_dir.join("profile.jsonl"))
    }

    pub fn task(&self) -> SortedDigits {
        SortedDigits::new(self.digits)
    }

    pub fn effective_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load_student(&self) -> Result<TabularPolicy> {
        load_policy(&self.student)
    }

    pub fn load_ensemble(&self) -> Result<TeacherEnsemble> {
        let mut teachers = Vec::new();
        for (name, path) in &self.teachers {
            teachers.push((name.clone(), load_policy(path)?));
        }
        let weights = match self.ensemble.mode {
            EnsembleMode::Routing => vec![1.0 / teachers.len() as f64; teachers.len()],
            EnsembleMode::Weighted => {
                let mut w = Vec::new();
                for (name, _) in &teachers {
                    w.push(
                        *self
                            .ensemble
                            .weights
                            .get(name)
                            .ok_or_else(|| HarnessError::Config(format!("no weight for teacher `{name}`")))?,
                    );
                }
                w
            }
        };
        Ok(TeacherEnsemble::new(
            teachers,
            weights,
            self.ensemble.routes.clone(),
            self.ensemble.mode,
        )?)
    }
}

pub fn load_policy(path: &Path) -> Result<TabularPolicy> {
    checkpoint::from_checkpoint(&read_file(path)?).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}
