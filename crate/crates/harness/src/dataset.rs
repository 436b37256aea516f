//! Line-delimited prompt datasets: `{"id","domain","prompt_tokens","target"}`.

use std::collections::HashSet;
use std::path::Path;

use opd_core::Prompt;

use crate::error::{read_file, HarnessError, Result};

pub fn parse_dataset(text: &str) -> Result<Vec<Prompt>> {
    let mut prompts = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let prompt: Prompt =
            serde_json::from_str(line).map_err(|e| HarnessError::Config(format!("dataset line {}: {e}", i + 1)))?;
        if prompt.tokens.is_empty() {
            return Err(HarnessError::Config(format!("prompt `{}` has no tokens", prompt.id)));
        }
        if !ids.insert(prompt.id.clone()) {
            return Err(HarnessError::Config(format!("duplicate prompt id `{}`", prompt.id)));
        }
        prompts.push(prompt);
    }
    Ok(prompts)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Prompt>> {
    parse_dataset(&read_file(path)?)
}

pub fn to_jsonl(prompts: &[Prompt]) -> String {
    prompts
        .iter()
        .map(|p| serde_json::to_string(p).expect("prompt serializes") + "\n")
        .collect()
}
