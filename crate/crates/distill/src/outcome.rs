use std::path::{Path, PathBuf};

use hsib_models::{save_checkpoint, CheckpointMeta};
use serde_json::json;

use crate::error::{DistillError, Result};
use crate::trainers::DistillOutcome;

/// Writes `{stem}.ckpt` and a `{stem}.json` sidecar holding the resolved
/// configuration, the training history and any per-branch scores.
pub fn save_outcome(out: &DistillOutcome, dir: &Path, stem: &str, meta: &CheckpointMeta) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|source| DistillError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let ckpt = dir.join(format!("{stem}.ckpt"));
    save_checkpoint(&out.student, meta, &ckpt)?;
    let side = dir.join(format!("{stem}.json"));
    let doc = json!({
        "method": out.method.id(),
        "family": out.method.family().title(),
        "distill": out.config,
        "train": out.train,
        "history": out.history,
        "stages": out.stages.iter().map(|(n, h)| json!({"name": n, "history": h})).collect::<Vec<_>>(),
        "branch_top1": out.branch_top1,
    });
    let text = serde_json::to_string_pretty(&doc).expect("json values serialize");
    std::fs::write(&side, text).map_err(|source| DistillError::Io {
        path: side.clone(),
        source,
    })?;
    Ok((ckpt, side))
}
