//! Cascade orchestration: global alignment proposes a search-exam
//! estimate, oversized lesions stop there, everything else is
//! tracked locally and the candidates re-ranked by the refiner. The
//! result is reported in full-image coordinates of the search exam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_to_frame, BoundingBox, Frame, FrameMeta};
use crate::image::Image;
use crate::refine::{
    build_refine_pair, filter_candidates, similarity_score, RefineCandidate, Refiner,
};
use crate::registration::{map_box, register, AffineTransform, RegistrationConfig};
use crate::sampling::{extract_search, extract_template, PatchPair, PatchSpec, Variant};
use crate::tracknet::{decode, Tracker};

/// How far through the cascade a result travelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Lesion larger than the template extent: the registered box is
    /// the final answer.
    Bypass,
    /// Candidate filtering left nothing (or no template mask was
    /// available): raw top tracker detection.
    TrackerOnly,
    /// Full cascade: best candidate by similarity.
    Refined,
}

/// Per-pair cascade bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackDiagnostics {
    /// Final registration objective; absent when registration was
    /// skipped by configuration.
    pub registration_objective: Option<f64>,
    /// Registration hit a non-finite objective and used the identity.
    pub registration_fallback: bool,
    /// Candidates surviving the filter.
    pub candidates: usize,
}

/// Final tracking output for one template/search exam pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    /// Predicted box in the search exam's full-image frame.
    pub bbox: BoundingBox,
    /// Tracker classification score of the chosen candidate; absent
    /// for bypass results.
    pub cls_score: Option<f64>,
    /// Refinement similarity of the chosen candidate; absent unless
    /// the full cascade ran.
    pub similarity: Option<f64>,
    pub stage: Stage,
    pub diagnostics: TrackDiagnostics,
}

impl TrackResult {
    /// Stage/score coherence and a finite, positive-extent box.
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if self.bbox.frame != Frame::FullImage {
            return Err(Error::FrameMismatch(self.bbox.frame, Frame::FullImage));
        }
        let ok = match self.stage {
            Stage::Bypass => self.cls_score.is_none() && self.similarity.is_none(),
            Stage::TrackerOnly => self.cls_score.is_some() && self.similarity.is_none(),
            Stage::Refined => self.cls_score.is_some() && self.similarity.is_some(),
        };
        if !ok {
            return Err(Error::Config(format!(
                "stage {:?} with cls_score {:?} and similarity {:?}",
                self.stage, self.cls_score, self.similarity
            )));
        }
        Ok(())
    }
}

/// Cascade settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub patch: PatchSpec,
    pub variant: Variant,
    pub registration: RegistrationConfig,
    /// Multiply classification by centerness when ranking tracker
    /// detections (ablation toggle).
    pub use_centerness: bool,
    /// Run the refinement stage; when false the raw top tracker
    /// detection is returned (ablation toggle).
    pub refine: bool,
    /// Treat the exams as already aligned: skip the optimizer and use
    /// the identity transform.
    pub assume_registered: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            patch: PatchSpec::default(),
            variant: Variant::MaskGuided,
            registration: RegistrationConfig::default(),
            use_centerness: true,
            refine: true,
            assume_registered: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.registration.validate()
    }
}

/// Pick the winning candidate: maximal similarity, ties broken by
/// higher classification score, then lower index. All candidates
/// must carry a similarity.
pub(crate) fn select_best(candidates: &[RefineCandidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        let sim = c.similarity?;
        let better = match best {
            None => true,
            Some(b) => {
                let bs = candidates[b].similarity.expect("checked above");
                sim > bs || (sim == bs && c.cls_score > candidates[b].cls_score)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Track one lesion from the template exam into the search exam.
///
/// Registration maps the ground-truth box into the search exam;
/// lesions wider than the template extent return that box directly
/// (bypass). Otherwise the tracker scores a search patch centred on
/// the mapped box, the candidates are NMS-filtered, and the refiner's
/// similarity picks the winner, mapped back to full-image
/// coordinates. An empty candidate set (or a variant without a
/// template mask, which the refiner requires) falls back to the raw
/// top tracker detection.
pub fn track(
    template: &Image,
    gt_box: &BoundingBox,
    search: &Image,
    tracker: &Tracker,
    refiner: &Refiner,
    cfg: &PipelineConfig,
) -> Result<TrackResult> {
    cfg.validate()?;
    gt_box.validate()?;
    if gt_box.frame != Frame::FullImage {
        return Err(Error::FrameMismatch(gt_box.frame, Frame::FullImage));
    }
    if (template.spacing_mm() - search.spacing_mm()).abs() > 1e-9 {
        return Err(Error::SpacingMismatch(
            template.spacing_mm(),
            search.spacing_mm(),
        ));
    }

    // Global alignment.
    let (transform, objective, reg_fallback) = if cfg.assume_registered {
        (AffineTransform::IDENTITY, None, false)
    } else {
        let reg = register(template, search, &cfg.registration)?;
        (reg.transform, Some(reg.objective), reg.fell_back_to_identity)
    };
    let mapped = match map_box(&transform, gt_box) {
        Ok(b) => b,
        // A degenerate estimate degrades to the identity path rather
        // than failing the pair.
        Err(_) => *gt_box,
    };

    // Large-lesion bypass.
    if cfg.patch.box_extent_mm(gt_box) > cfg.patch.template_extent_mm {
        return Ok(TrackResult {
            bbox: mapped,
            cls_score: None,
            similarity: None,
            stage: Stage::Bypass,
            diagnostics: TrackDiagnostics {
                registration_objective: objective,
                registration_fallback: reg_fallback,
                candidates: 0,
            },
        });
    }

    // Local tracking around the mapped center.
    let tf = extract_template(template, gt_box, &cfg.patch, cfg.variant)?;
    let sf = extract_search(search, (mapped.cx, mapped.cy), None, &cfg.patch)?;
    let search_meta = sf.frame;
    let template_mask = tf.mask.clone();
    let pair = PatchPair::assemble(tf, sf);
    let maps = tracker.forward(&pair)?;
    let dets = decode(&maps, cfg.use_centerness, tracker.config().top_k)?;
    let top = dets.first().ok_or(Error::EmptyInput("tracker detections"))?;

    let boxes: Vec<BoundingBox> = dets.iter().map(|d| d.bbox).collect();
    let cls: Vec<f64> = dets.iter().map(|d| d.cls).collect();
    let mut candidates = filter_candidates(&boxes, &cls)?;

    let diagnostics = |n: usize| TrackDiagnostics {
        registration_objective: objective,
        registration_fallback: reg_fallback,
        candidates: n,
    };
    let to_full = |b: &BoundingBox| box_to_frame(b, &search_meta, &FrameMeta::FULL);

    // Refinement disabled, or impossible without a template mask:
    // the raw top detection is the answer.
    let mask = match (cfg.refine, template_mask) {
        (true, Some(m)) => m,
        _ => {
            return Ok(TrackResult {
                bbox: to_full(&top.bbox)?,
                cls_score: Some(top.cls),
                similarity: None,
                stage: Stage::TrackerOnly,
                diagnostics: diagnostics(candidates.len()),
            });
        }
    };
    if candidates.is_empty() {
        return Ok(TrackResult {
            bbox: to_full(&top.bbox)?,
            cls_score: Some(top.cls),
            similarity: None,
            stage: Stage::TrackerOnly,
            diagnostics: diagnostics(0),
        });
    }

    // Refinement: similarity for every surviving candidate.
    for cand in &mut candidates {
        let rp = build_refine_pair(
            &pair.template,
            &mask,
            &pair.search,
            &cand.bbox,
            refiner.config().refine_px,
        )?;
        cand.similarity = Some(similarity_score(refiner.distance(&rp)?)?);
    }
    let best = select_best(&candidates).expect("nonempty with similarities");
    let chosen = &candidates[best];
    Ok(TrackResult {
        bbox: to_full(&chosen.bbox)?,
        cls_score: Some(chosen.cls_score),
        similarity: chosen.similarity,
        stage: Stage::Refined,
        diagnostics: diagnostics(candidates.len()),
    })
}
