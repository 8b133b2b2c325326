//! On-disk record formats owned by the CLI: the per-pair tracking
//! results (JSON lines) and the timing sidecar that keeps volatile
//! data out of the deterministic outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lesiontrack::error::{Error, Result};
use lesiontrack::pipeline::{Stage, TrackDiagnostics, TrackResult};
use lesiontrack::sampling::{BoxSpec, LesionType};

/// One line of the results file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrackRecord {
    Ok(OkRecord),
    /// The pair could not be tracked (for example a missing image);
    /// evaluation scores it as a failure.
    Error(ErrorRecord),
}

impl TrackRecord {
    pub fn id(&self) -> &str {
        match self {
            TrackRecord::Ok(r) => &r.id,
            TrackRecord::Error(r) => &r.id,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OkRecord {
    pub id: String,
    pub lesion_type: LesionType,
    pub method: String,
    pub stage: Stage,
    #[serde(rename = "box")]
    pub bbox: BoxSpec,
    pub cls_score: Option<f64>,
    pub similarity: Option<f64>,
    pub registration_objective: Option<f64>,
    pub registration_fallback: bool,
    pub candidates: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorRecord {
    pub id: String,
    pub lesion_type: LesionType,
    pub method: String,
    pub message: String,
}

impl OkRecord {
    pub fn from_result(
        id: &str,
        lesion_type: LesionType,
        method: &str,
        result: &TrackResult,
    ) -> OkRecord {
        OkRecord {
            id: id.to_string(),
            lesion_type,
            method: method.to_string(),
            stage: result.stage,
            bbox: BoxSpec::from_box(&result.bbox),
            cls_score: result.cls_score,
            similarity: result.similarity,
            registration_objective: result.diagnostics.registration_objective,
            registration_fallback: result.diagnostics.registration_fallback,
            candidates: result.diagnostics.candidates,
        }
    }

    pub fn to_result(&self) -> Result<TrackResult> {
        let result = TrackResult {
            bbox: self.bbox.to_box()?,
            cls_score: self.cls_score,
            similarity: self.similarity,
            stage: self.stage,
            diagnostics: TrackDiagnostics {
                registration_objective: self.registration_objective,
                registration_fallback: self.registration_fallback,
                candidates: self.candidates,
            },
        };
        result.validate()?;
        Ok(result)
    }
}

pub fn write_jsonl(path: &Path, records: &[TrackRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Schema {
            context: "track record".into(),
            message: e.to_string(),
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TrackRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                context: format!("{}:{}", path.display(), n + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Volatile run data (wall time, worker count) lives next to the
/// deterministic artifact, never inside it.
#[derive(Debug, Serialize)]
pub struct Sidecar<'a> {
    pub command: &'a str,
    pub elapsed_seconds: f64,
    pub jobs: usize,
    pub items: usize,
}

/// `results.jsonl` gets `results.meta.json` beside it; extensionless
/// paths gain `.meta.json`.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    artifact.with_extension("meta.json")
}

pub fn write_sidecar(artifact: &Path, sidecar: &Sidecar) -> Result<()> {
    let path = sidecar_path(artifact);
    let text = serde_json::to_string_pretty(sidecar).map_err(|e| Error::Schema {
        context: "run sidecar".into(),
        message: e.to_string(),
    })?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::Io {
        path,
        source: e,
    })
}
