//! On-disk formats: dataset shards, checkpoints, configs and metric logs.

mod checkpoint;
mod config;
mod dataset;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, LoadReport, TensorRecord,
    CHECKPOINT_VERSION,
};
pub use config::{Resolved, TrainSettings};
pub use dataset::{
    decode_record, encode_record, rle_decode, rle_encode, write_dataset, DatasetReader, DatasetWriter, Manifest,
    ShardInfo, DATASET_VERSION, DEFAULT_SHARD_RECORDS, GENERATOR_VERSION, MANIFEST_FILE,
};

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::training::MetricRecord;

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Line-delimited JSON, one record per line.
pub fn metrics_to_jsonl(records: &[MetricRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn metrics_from_jsonl(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
