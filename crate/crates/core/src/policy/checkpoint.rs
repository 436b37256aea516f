//! Policy checkpoints.
//!
//! A checkpoint is a single compact JSON object followed by a newline:
//!
//! ```text
//! {"format":"opd-tabular-policy","version":1,"vocab_size":9,"context_order":1,
//!  "bucket_count":256,"terminator":8,"logits":[...]}
//! ```
//!
//! `logits` is the row-major table, `context_count * vocab_size` entries.
//! Rows are indexed by `bucket` (order 0) or `bucket * (vocab_size + 1) + prev`
//! (order 1, with `prev = vocab_size` at the start of the response). Floats
//! use the shortest representation that round-trips to the same `f64`.

use serde::{Deserialize, Serialize};

use super::tabular::{ContextOrder, TabularPolicy};
use crate::error::{OpdError, Result};

pub const CHECKPOINT_FORMAT: &str = "opd-tabular-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    format: String,
    version: u32,
    vocab_size: usize,
    context_order: u32,
    bucket_count: usize,
    terminator: u32,
    logits: Vec<f64>,
}

pub fn to_checkpoint(policy: &TabularPolicy) -> String {
    let record = Record {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        vocab_size: policy.vocab_size(),
        context_order: policy.order().as_int(),
        bucket_count: policy.bucket_count(),
        terminator: policy.terminator(),
        logits: policy.logits().to_vec(),
    };
    let mut out = serde_json::to_string(&record).expect("checkpoint serializes");
    out.push('\n');
    out
}

pub fn from_checkpoint(text: &str) -> Result<TabularPolicy> {
    let record: Record = serde_json::from_str(text.trim()).map_err(|e| OpdError::Format(e.to_string()))?;
    if record.format != CHECKPOINT_FORMAT {
        return Err(OpdError::Format(format!(
            "unknown checkpoint format `{}`",
            record.format
        )));
    }
    if record.version != CHECKPOINT_VERSION {
        return Err(OpdError::Format(format!(
            "unsupported checkpoint version {}",
            record.version
        )));
    }
    TabularPolicy::from_logits(
        record.vocab_size,
        ContextOrder::from_int(record.context_order)?,
        record.bucket_count,
        record.terminator,
        record.logits,
    )
}
