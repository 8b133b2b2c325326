//! Dataset manifest: one JSON document listing cases, views, and
//! time points with lesion boxes in full-image pixel coordinates.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionType {
    Mass,
    Calcification,
}

/// Axis-aligned box in full-image pixels as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxSpec {
    pub fn to_box(self) -> Result<BoundingBox> {
        BoundingBox::new(self.cx, self.cy, self.w, self.h, Frame::FullImage)
    }

    pub fn from_box(b: &BoundingBox) -> BoxSpec {
        BoxSpec {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimePoint {
    /// Acquisition order; strictly increasing within a view.
    pub index: i64,
    /// Image path relative to the manifest file.
    pub image: String,
    #[serde(rename = "box")]
    pub lesion_box: BoxSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct View {
    pub view_id: String,
    pub timepoints: Vec<TimePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseManifest {
    pub id: String,
    pub lesion_type: LesionType,
    pub views: Vec<View>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spacing_mm: f64,
    pub cases: Vec<CaseManifest>,
}

impl Manifest {
    /// Structural validation; `base_dir`, when given, additionally
    /// requires every referenced image file to exist.
    pub fn validate(&self, base_dir: Option<&Path>) -> Result<()> {
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            return Err(Error::Schema {
                context: "spacing_mm".into(),
                message: format!("must be positive, got {}", self.spacing_mm),
            });
        }
        for (ci, case) in self.cases.iter().enumerate() {
            for (vi, view) in case.views.iter().enumerate() {
                let ctx = |ti: usize, field: &str| {
                    format!(
                        "cases[{ci}].views[{vi}].timepoints[{ti}].{field} (case {})",
                        case.id
                    )
                };
                for (ti, tp) in view.timepoints.iter().enumerate() {
                    tp.lesion_box.to_box().map_err(|e| Error::Schema {
                        context: ctx(ti, "box"),
                        message: e.to_string(),
                    })?;
                    if ti > 0 && tp.index <= view.timepoints[ti - 1].index {
                        return Err(Error::Schema {
                            context: ctx(ti, "index"),
                            message: "time point indexes must be strictly increasing".into(),
                        });
                    }
                    if let Some(dir) = base_dir {
                        let p = dir.join(&tp.image);
                        if !p.exists() {
                            return Err(Error::MissingFile(p));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// (cases, lesions, pairs) where a lesion is one tracked view and
    /// pairs counts all unordered time-point combinations.
    pub fn stats(&self) -> (usize, usize, usize) {
        let lesions: usize = self.cases.iter().map(|c| c.views.len()).sum();
        let pairs: usize = self
            .cases
            .iter()
            .flat_map(|c| &c.views)
            .map(|v| v.timepoints.len() * v.timepoints.len().saturating_sub(1) / 2)
            .sum();
        (self.cases.len(), lesions, pairs)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Schema {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest.validate(Some(base))?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    manifest.validate(None)?;
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Schema {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
