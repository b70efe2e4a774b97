//! Body record JSONL shared by sample, fit, eval, and export.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use inhabit_core::BodyParams;

/// One generated (or refined) body, tied to the dataset view it was
/// conditioned on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BodyRecord {
    pub scene_id: String,
    /// View path relative to the dataset root.
    pub view: String,
    /// Camera-frame body features (75).
    pub body: Vec<f64>,
}

impl BodyRecord {
    pub fn params(&self) -> anyhow::Result<BodyParams> {
        Ok(BodyParams::from_flat(&self.body)?)
    }
}

pub fn write_records(path: &Path, records: &[BodyRecord]) -> anyhow::Result<()> {
    let mut file = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for r in records {
        writeln!(file, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> anyhow::Result<Vec<BodyRecord>> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: BodyRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if record.body.len() != 75 {
            anyhow::bail!("{}:{}: body has {} values, expected 75", path.display(), i + 1, record.body.len());
        }
        out.push(record);
    }
    Ok(out)
}
