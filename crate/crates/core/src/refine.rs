//! Candidate refinement. Tracker candidates are filtered by NMS and
//! a score floor, re-rendered as two-channel (intensity + mask)
//! pairs at a fixed refine resolution, and scored by a learned
//! subtraction-based distance; `similarity = 1 - distance` ranks the
//! candidates.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, nms, BoundingBox, Frame};
use crate::image::Image;
use crate::nn::{load_weights, save_weights, sigmoid, Adam, AdamConfig, NodeId, Tape, Tensor};
use crate::sampling::{make_mask_channel, PatchPair};
use crate::tracknet::{conv_stack, decode, patch_tensor, Tracker};

/// NMS overlap threshold applied to tracker candidates.
pub const NMS_IOU: f64 = 0.7;
/// Candidates at or below this classification score are dropped.
pub const MIN_CLS_SCORE: f64 = 0.05;

const MODEL_KIND: &str = "subtraction-refiner";

/// One tracker candidate surviving the filter.
#[derive(Debug, Clone)]
pub struct RefineCandidate {
    /// Candidate box in the search-patch frame.
    pub bbox: BoundingBox,
    /// Tracker score (in (0,1)).
    pub cls_score: f64,
    /// Refinement similarity, filled in by the pipeline.
    pub similarity: Option<f64>,
}

/// Distance target band of a candidate against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceLabel {
    /// IoU > 0.5: same lesion, target distance 0.
    Near,
    /// IoU < 0.3: different structure, target distance 1.
    Far,
    /// 0.3 <= IoU <= 0.5: excluded from the loss.
    Ignore,
}

impl DistanceLabel {
    /// Strict banding; the boundary overlaps 0.3 and 0.5 are ignored.
    pub fn from_iou(value: f64) -> Result<DistanceLabel> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::OutOfRange {
                what: "candidate IoU",
                range: "[0, 1]",
                value,
            });
        }
        Ok(if value > 0.5 {
            DistanceLabel::Near
        } else if value < 0.3 {
            DistanceLabel::Far
        } else {
            DistanceLabel::Ignore
        })
    }

    /// BCE target distance, when the band participates in training.
    pub fn target(self) -> Option<f64> {
        match self {
            DistanceLabel::Near => Some(0.0),
            DistanceLabel::Far => Some(1.0),
            DistanceLabel::Ignore => None,
        }
    }
}

/// NMS (overlap 0.7) then the score floor; order (descending score)
/// is preserved. An empty result is valid — the pipeline falls back
/// to the raw top tracker box.
pub fn filter_candidates(boxes: &[BoundingBox], scores: &[f64]) -> Result<Vec<RefineCandidate>> {
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let kept = nms(boxes, scores, NMS_IOU)?;
    Ok(kept
        .into_iter()
        .filter(|&i| scores[i] > MIN_CLS_SCORE)
        .map(|i| RefineCandidate {
            bbox: boxes[i],
            cls_score: scores[i],
            similarity: None,
        })
        .collect())
}

/// `1 - distance`, the candidate's ranking score.
pub fn similarity_score(distance: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&distance) {
        return Err(Error::OutOfRange {
            what: "distance",
            range: "[0, 1]",
            value: distance,
        });
    }
    Ok(1.0 - distance)
}

/// Two-channel refiner inputs at the refine resolution.
#[derive(Debug, Clone)]
pub struct RefinePair {
    pub template: Image,
    pub template_mask: Image,
    pub search: Image,
    pub search_mask: Image,
    /// True when the candidate box rasterized to an all-zero mask
    /// (e.g. fully outside the patch).
    pub empty_candidate_mask: bool,
}

/// Assemble one refiner input pair: the mask-guided template and the
/// search patch with the candidate's box rendered as its mask
/// channel, both resampled to `refine_px` (intensities bilinearly,
/// masks nearest-neighbor; both sides share the [0,1] intensity
/// normalization of the patches).
pub fn build_refine_pair(
    template: &Image,
    template_mask: &Image,
    search: &Image,
    candidate: &BoundingBox,
    refine_px: usize,
) -> Result<RefinePair> {
    candidate.validate()?;
    if candidate.frame != Frame::SearchPatch {
        return Err(Error::FrameMismatch(candidate.frame, Frame::SearchPatch));
    }
    if refine_px == 0 {
        return Err(Error::Config("refine resolution must be positive".into()));
    }
    if template.width() != template.height() || search.width() != search.height() {
        return Err(Error::ShapeMismatch(
            "refiner patches must be square".into(),
        ));
    }
    if template_mask.width() != template.width() || template_mask.height() != template.height() {
        return Err(Error::ShapeMismatch(format!(
            "template mask {}x{} vs patch {}x{}",
            template_mask.width(),
            template_mask.height(),
            template.width(),
            template.height()
        )));
    }
    let resample = |img: &Image| -> Result<Image> {
        let n = img.width() as f64;
        img.crop_and_resize(n / 2.0, n / 2.0, n, refine_px)
    };
    let (candidate_mask, _) = make_mask_channel(candidate, search.width())?;
    let search_mask = candidate_mask.resize_nearest(refine_px, refine_px)?;
    let empty = search_mask.data().iter().all(|&v| v == 0.0);
    Ok(RefinePair {
        template: resample(template)?,
        template_mask: template_mask.resize_nearest(refine_px, refine_px)?,
        search: resample(search)?,
        search_mask,
        empty_candidate_mask: empty,
    })
}

/// Refiner architecture: a tracker-family conv backbone per side
/// (shared weights across sides), global average pooling, and a
/// two-layer fully-connected head on the embedding difference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    /// Input resolution both sides are resampled to.
    pub refine_px: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// Hidden width of the first fully-connected layer.
    pub head_hidden: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            refine_px: 128,
            widths: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
            head_hidden: 64,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refine_px < 8 {
            return Err(Error::Config(format!(
                "refine resolution must be >= 8 px, got {}",
                self.refine_px
            )));
        }
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(
                "refiner widths and strides must be nonempty and of equal length".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0)
            || self.strides.iter().any(|&s| s == 0)
            || self.head_hidden == 0
        {
            return Err(Error::Config(
                "refiner widths, strides, and head width must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RefinerModel {
    kind: String,
    config: RefinerConfig,
}

fn param_specs(cfg: &RefinerConfig) -> Vec<(String, Vec<usize>)> {
    let mut specs = Vec::new();
    let mut c_in = 2usize;
    for (i, &w) in cfg.widths.iter().enumerate() {
        specs.push((format!("backbone.{i}.weight"), vec![w, c_in, 3, 3]));
        specs.push((format!("backbone.{i}.bias"), vec![w]));
        c_in = w;
    }
    let embed = *cfg.widths.last().expect("validated nonempty");
    specs.push(("fc1.weight".into(), vec![cfg.head_hidden, embed]));
    specs.push(("fc1.bias".into(), vec![cfg.head_hidden]));
    specs.push(("fc2.weight".into(), vec![1, cfg.head_hidden]));
    specs.push(("fc2.bias".into(), vec![1]));
    specs
}

/// The refiner: architecture plus parameters.
#[derive(Debug, Clone)]
pub struct Refiner {
    cfg: RefinerConfig,
    params: Vec<Tensor>,
}

impl Refiner {
    pub fn init(cfg: RefinerConfig, seed: u64) -> Result<Refiner> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs(&cfg)
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".weight") {
                    let fan_in = shape[1..].iter().product();
                    Tensor::he_uniform(&shape, fan_in, &mut rng)
                } else {
                    Tensor::zeros(&shape)
                }
            })
            .collect();
        Ok(Refiner { cfg, params })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.cfg
    }

    fn pair_tensors(&self, pair: &RefinePair) -> Result<(Tensor, Tensor)> {
        let n = self.cfg.refine_px;
        for img in [&pair.template, &pair.template_mask, &pair.search, &pair.search_mask] {
            if img.width() != n || img.height() != n {
                return Err(Error::ShapeMismatch(format!(
                    "refiner inputs must be {n}x{n}, got {}x{}",
                    img.width(),
                    img.height()
                )));
            }
        }
        let t = patch_tensor(&pair.template, Some(&pair.template_mask), 2)?;
        let s = patch_tensor(&pair.search, Some(&pair.search_mask), 2)?;
        Ok((t, s))
    }

    /// Differentiable distance logit; also returns the parameter
    /// nodes (canonical order) and the head-input (embedding
    /// difference) node.
    fn logit_on_tape(
        &self,
        tape: &mut Tape,
        template: Tensor,
        search: Tensor,
    ) -> Result<(NodeId, Vec<NodeId>, NodeId)> {
        let ids: Vec<NodeId> = self.params.iter().map(|p| tape.input(p.clone())).collect();
        let nb = self.cfg.widths.len();
        let blocks: Vec<(NodeId, NodeId)> =
            (0..nb).map(|i| (ids[2 * i], ids[2 * i + 1])).collect();
        let embed = |tape: &mut Tape, x: Tensor| -> Result<NodeId> {
            let input = tape.input(x);
            let f = conv_stack(tape, &blocks, &self.cfg.strides, input)?;
            tape.gap(f)
        };
        let et = embed(tape, template)?;
        let es = embed(tape, search)?;
        let diff = tape.sub(et, es)?;
        let h = tape.linear(diff, ids[2 * nb], ids[2 * nb + 1])?;
        let h = tape.relu(h);
        let logit = tape.linear(h, ids[2 * nb + 2], ids[2 * nb + 3])?;
        Ok((logit, ids, diff))
    }

    /// Embedding difference fed to the head (used to verify the
    /// subtraction structure).
    #[cfg(test)]
    fn head_input(&self, pair: &RefinePair) -> Result<Vec<f64>> {
        let (t, s) = self.pair_tensors(pair)?;
        let mut tape = Tape::new();
        let (_, _, diff) = self.logit_on_tape(&mut tape, t, s)?;
        Ok(tape.value(diff).data().to_vec())
    }

    /// Learned distance in (0,1); 0 means "same lesion".
    pub fn distance(&self, pair: &RefinePair) -> Result<f64> {
        let (t, s) = self.pair_tensors(pair)?;
        let mut tape = Tape::new();
        let (logit, _, _) = self.logit_on_tape(&mut tape, t, s)?;
        Ok(sigmoid(tape.value(logit).item()))
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable access to the parameter tensors, for external
    /// optimizers and perturbation analyses.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Binary cross-entropy of one candidate pair against `target`
    /// (0 = same lesion, 1 = different) together with its gradient
    /// per parameter tensor: the refiner's training quantity.
    pub fn bce_loss_grads(&self, pair: &RefinePair, target: f64) -> Result<(f64, Vec<Tensor>)> {
        let (t, s) = self.pair_tensors(pair)?;
        let mut tape = Tape::new();
        let (logit, ids, _) = self.logit_on_tape(&mut tape, t, s)?;
        let loss = tape.bce_mean(logit, Tensor::from_vec(&[1], vec![target])?)?;
        let value = tape.value(loss).item();
        let g = tape.backward(loss)?;
        Ok((value, ids.iter().map(|&id| g[id].clone()).collect()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let model = RefinerModel {
            kind: MODEL_KIND.into(),
            config: self.cfg.clone(),
        };
        let specs = param_specs(&self.cfg);
        let named: Vec<(&str, &Tensor)> = specs
            .iter()
            .zip(&self.params)
            .map(|((name, _), t)| (name.as_str(), t))
            .collect();
        save_weights(path, &model, &named)
    }

    pub fn load(path: &Path) -> Result<Refiner> {
        let loaded = load_weights::<RefinerModel>(path)?;
        if loaded.model.kind != MODEL_KIND {
            return Err(Error::WeightsFormat(format!(
                "expected a {MODEL_KIND} weights file, found {:?}",
                loaded.model.kind
            )));
        }
        let cfg = loaded.model.config;
        cfg.validate()?;
        let specs = param_specs(&cfg);
        if loaded.tensors.len() != specs.len() {
            return Err(Error::WeightsFormat(format!(
                "expected {} tensors, found {}",
                specs.len(),
                loaded.tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape), (got_name, tensor)) in specs.into_iter().zip(loaded.tensors) {
            if got_name != name || tensor.shape() != shape.as_slice() {
                return Err(Error::WeightsFormat(format!(
                    "tensor {got_name} {:?} does not match the architecture's {name} {shape:?}",
                    tensor.shape()
                )));
            }
            params.push(tensor);
        }
        Ok(Refiner { cfg, params })
    }
}

/// One labelled training candidate (box relative to its source
/// pair's search patch).
#[derive(Debug, Clone)]
pub struct TrainingCandidate {
    pub pair_idx: usize,
    pub bbox: BoundingBox,
    pub label: DistanceLabel,
    /// True for gt-jitter positives injected when the tracker
    /// produced none.
    pub injected: bool,
}

/// Refiner training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Relative center/scale jitter of injected gt positives.
    pub jitter: f64,
    /// Injected positives per starved pair.
    pub max_injected: usize,
}

impl Default for RefineTrainConfig {
    fn default() -> Self {
        RefineTrainConfig {
            epochs: 5,
            batch_size: 8,
            learning_rate: 5e-5,
            seed: 0,
            jitter: 0.1,
            max_injected: 2,
        }
    }
}

impl RefineTrainConfig {
    pub fn validate(&self) -> Result<()> {
        // Zero epochs is a valid no-op run (weights keep their
        // initialization).
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::OutOfRange {
                what: "gt jitter",
                range: "[0, 0.5)",
                value: self.jitter,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RefineTrainReport {
    /// Mean BCE per epoch (over the resampled pool).
    pub epoch_loss: Vec<f64>,
    pub positives: usize,
    pub negatives: usize,
    pub injected: usize,
    pub ignored: usize,
}

/// Run the tracker over the training pairs and label the filtered
/// candidates against each pair's ground truth. Pairs whose
/// candidates contain no positive band get up to `max_injected`
/// jittered copies of the gt box as positives.
pub fn harvest_candidates(
    tracker: &Tracker,
    pairs: &[PatchPair],
    cfg: &RefineTrainConfig,
) -> Result<Vec<TrainingCandidate>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut out = Vec::new();
    for (pair_idx, pair) in pairs.iter().enumerate() {
        let Some(gt) = pair.gt_search_box else {
            continue;
        };
        let maps = tracker.forward(pair)?;
        let dets = decode(&maps, true, tracker.config().top_k)?;
        let boxes: Vec<BoundingBox> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let mut any_positive = false;
        for cand in filter_candidates(&boxes, &scores)? {
            let label = DistanceLabel::from_iou(iou(&cand.bbox, &gt)?)?;
            any_positive |= label == DistanceLabel::Near;
            out.push(TrainingCandidate {
                pair_idx,
                bbox: cand.bbox,
                label,
                injected: false,
            });
        }
        if !any_positive {
            for _ in 0..cfg.max_injected {
                let j = cfg.jitter;
                let w = gt.w * (1.0 + rng.gen_range(-j..=j));
                let h = gt.h * (1.0 + rng.gen_range(-j..=j));
                let cx = gt.cx + gt.w * rng.gen_range(-j..=j);
                let cy = gt.cy + gt.h * rng.gen_range(-j..=j);
                let bbox = BoundingBox::new(cx, cy, w, h, gt.frame)?;
                let label = DistanceLabel::from_iou(iou(&bbox, &gt)?)?;
                out.push(TrainingCandidate {
                    pair_idx,
                    bbox,
                    label,
                    injected: true,
                });
            }
        }
    }
    Ok(out)
}

/// Train the refiner on harvested candidates with per-epoch 2:1
/// negative:positive resampling and BCE on the distance. Ignored
/// bands contribute nothing. Deterministic per seed.
pub fn fit_refiner(
    refiner: &mut Refiner,
    pairs: &[PatchPair],
    candidates: &[TrainingCandidate],
    cfg: &RefineTrainConfig,
) -> Result<RefineTrainReport> {
    cfg.validate()?;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let mut ignored = 0usize;
    for (i, c) in candidates.iter().enumerate() {
        if c.pair_idx >= pairs.len() {
            return Err(Error::Config(format!(
                "candidate {i} references pair {} of {}",
                c.pair_idx,
                pairs.len()
            )));
        }
        match c.label {
            DistanceLabel::Near => positives.push(i),
            DistanceLabel::Far => negatives.push(i),
            DistanceLabel::Ignore => ignored += 1,
        }
    }
    if positives.is_empty() {
        return Err(Error::NoPositiveSamples);
    }
    let injected = candidates.iter().filter(|c| c.injected).count();

    let shapes: Vec<Vec<usize>> = refiner.params.iter().map(|p| p.shape().to_vec()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &shapes,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        // Per-epoch pool: all positives plus at most twice as many
        // negatives, freshly drawn.
        let mut neg_order = negatives.clone();
        neg_order.shuffle(&mut rng);
        neg_order.truncate(2 * positives.len());
        let mut pool: Vec<usize> = positives.iter().copied().chain(neg_order).collect();
        pool.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (bidx, batch) in pool.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            for &ci in batch {
                let c = &candidates[ci];
                let pair = &pairs[c.pair_idx];
                let mask = pair.template_mask.as_ref().ok_or_else(|| {
                    Error::Config(
                        "refiner training needs mask-guided template patches".into(),
                    )
                })?;
                let rp = build_refine_pair(
                    &pair.template,
                    mask,
                    &pair.search,
                    &c.bbox,
                    refiner.cfg.refine_px,
                )?;
                let (t, s) = refiner.pair_tensors(&rp)?;
                let target = c.label.target().expect("pool holds only labelled bands");
                let mut tape = Tape::new();
                let (logit, ids, _) = refiner.logit_on_tape(&mut tape, t, s)?;
                let loss = tape.bce_mean(logit, Tensor::from_vec(&[1], vec![target])?)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: bidx,
                        value,
                    });
                }
                loss_sum += value;
                let g = tape.backward(loss)?;
                for (slot, &id) in ids.iter().enumerate() {
                    grads[slot].add_assign(&g[id]);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.scale(inv);
            }
            adam.step(&mut refiner.params, &grads)?;
        }
        epoch_loss.push(loss_sum / pool.len() as f64);
    }
    Ok(RefineTrainReport {
        epoch_loss,
        positives: positives.len(),
        negatives: negatives.len(),
        injected,
        ignored,
    })
}

/// Harvest candidates with the tracker, then fit the refiner.
pub fn train_refiner(
    refiner: &mut Refiner,
    tracker: &Tracker,
    pairs: &[PatchPair],
    cfg: &RefineTrainConfig,
) -> Result<(RefineTrainReport, Vec<TrainingCandidate>)> {
    let candidates = harvest_candidates(tracker, pairs, cfg)?;
    let report = fit_refiner(refiner, pairs, &candidates, cfg)?;
    Ok((report, candidates))
}
