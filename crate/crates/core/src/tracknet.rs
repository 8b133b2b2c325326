//! Anchor-free Siamese tracker. A shared convolutional backbone
//! embeds the template and search patches; the center region of the
//! template features is cross-correlated depth-wise against the
//! search features; small convolutional heads predict per-location
//! classification, center-ness, and box edge-distance maps, trained
//! with focal and EIoU losses and decoded as score-ranked boxes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centerness, eiou_loss, BoundingBox, Frame, RegressionTargets};
use crate::image::Image;
use crate::nn::{load_weights, save_weights, sigmoid, Adam, AdamConfig, NodeId, Tape, Tensor};
use crate::sampling::{PatchPair, Variant};

/// Focal loss parameters for the classification and center-ness
/// terms.
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Bias for the final classification/center-ness layers so the
/// initial sigmoid output is ~0.01: with heavy negative imbalance,
/// starting near the negative class keeps the focal loss stable.
const RARE_POSITIVE_LOGIT: f64 = -4.595119850134589; // ln(0.01/0.99)

const MIN_CORRELATION_MAP: usize = 5;
const MODEL_KIND: &str = "siamese-tracker";

/// Architecture of the tracker: backbone widths/strides, shared by
/// both branches, plus the prediction head geometry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// 1 (intensity) or 2 (intensity + mask channel).
    pub in_channels: usize,
    /// Output channels of each 3x3 backbone block.
    pub widths: Vec<usize>,
    /// Stride of each backbone block (same length as `widths`).
    pub strides: Vec<usize>,
    /// Channels of the head trunk convolutions.
    pub head_width: usize,
    /// Number of 3x3 trunk convolutions per head stack.
    pub head_depth: usize,
    /// Side of the center template-feature crop.
    pub template_crop: usize,
    /// Default number of decoded candidates to keep.
    pub top_k: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            in_channels: 2,
            widths: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
            head_width: 64,
            head_depth: 2,
            template_crop: 7,
            top_k: 32,
        }
    }
}

impl TrackerConfig {
    /// Default architecture with the channel count the template
    /// variant calls for.
    pub fn for_variant(variant: Variant) -> TrackerConfig {
        TrackerConfig {
            in_channels: if variant == Variant::MaskGuided { 2 } else { 1 },
            ..TrackerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.in_channels) {
            return Err(Error::Config(format!(
                "tracker input channels must be 1 or 2, got {}",
                self.in_channels
            )));
        }
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(
                "backbone widths and strides must be nonempty and of equal length".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) || self.strides.iter().any(|&s| s == 0) {
            return Err(Error::Config(
                "backbone widths and strides must be positive".into(),
            ));
        }
        if self.head_width == 0 || self.head_depth == 0 {
            return Err(Error::Config("head width/depth must be positive".into()));
        }
        if self.template_crop == 0 {
            return Err(Error::Config("template crop must be positive".into()));
        }
        Ok(())
    }

    /// Total backbone stride.
    pub fn stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Spatial size of the backbone output for a square input
    /// (3x3 kernels, padding 1).
    pub fn feature_size(&self, input_px: usize) -> usize {
        self.strides
            .iter()
            .fold(input_px, |n, &s| (n + 2 - 3) / s + 1)
    }

    /// Correlation (= score map) side for a square search patch.
    pub fn map_size(&self, search_px: usize) -> Result<usize> {
        let feat = self.feature_size(search_px);
        if feat < self.template_crop {
            return Err(Error::Config(format!(
                "search features ({feat}) smaller than the template crop ({})",
                self.template_crop
            )));
        }
        let corr = feat - self.template_crop + 1;
        if corr < MIN_CORRELATION_MAP {
            return Err(Error::Config(format!(
                "correlation map {corr} < {MIN_CORRELATION_MAP}; enlarge the search patch"
            )));
        }
        Ok(corr)
    }
}

/// Offset placing the score-map grid symmetrically in the search
/// patch: grid cell (i, j) sits at
/// `(j * stride + offset, i * stride + offset)` in patch coordinates.
pub fn grid_offset(search_px: usize, map_size: usize, stride: usize) -> f64 {
    (search_px as f64 - ((map_size - 1) * stride) as f64) / 2.0
}

/// Per-location tracker outputs on the score-map grid.
#[derive(Debug, Clone)]
pub struct ScoreMaps {
    /// Classification probability per location, row-major.
    pub cls: Vec<f64>,
    /// Center-ness probability per location.
    pub ctr: Vec<f64>,
    /// Edge distances (l, t, r, b) in search-patch pixels,
    /// channel-major: `reg[c * n + loc]`.
    pub reg: Vec<f64>,
    pub map_size: usize,
    pub stride: usize,
    pub search_px: usize,
}

impl ScoreMaps {
    pub fn locations(&self) -> usize {
        self.map_size * self.map_size
    }

    /// Search-patch point of grid cell `(i, j)`.
    pub fn point(&self, i: usize, j: usize) -> (f64, f64) {
        let off = grid_offset(self.search_px, self.map_size, self.stride);
        (j as f64 * self.stride as f64 + off, i as f64 * self.stride as f64 + off)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.locations();
        if self.map_size == 0 || self.stride == 0 || self.search_px == 0 {
            return Err(Error::Config("score map geometry must be positive".into()));
        }
        for (what, len, expected) in [
            ("cls map", self.cls.len(), n),
            ("ctr map", self.ctr.len(), n),
            ("reg map", self.reg.len(), 4 * n),
        ] {
            if len != expected {
                return Err(Error::LengthMismatch {
                    what,
                    got: len,
                    expected,
                });
            }
        }
        if self
            .cls
            .iter()
            .chain(&self.ctr)
            .chain(&self.reg)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("score maps contain non-finite values".into()));
        }
        Ok(())
    }
}

/// Per-location training targets on the score-map grid.
#[derive(Debug, Clone)]
pub struct Labels {
    /// 1.0 inside the ground-truth box, else 0.0.
    pub cls: Vec<f64>,
    /// Center-ness target at positives, 0 elsewhere.
    pub ctr: Vec<f64>,
    /// Edge-distance targets at positives (channel-major like
    /// [`ScoreMaps::reg`]), 0 elsewhere.
    pub reg: Vec<f64>,
    /// Positive (= regression-valid) flag per location.
    pub positive: Vec<bool>,
    pub num_positive: usize,
    pub map_size: usize,
    pub stride: usize,
    pub search_px: usize,
    pub gt: BoundingBox,
}

/// Assign per-location targets for one ground-truth box in the
/// search-patch frame: locations whose grid point falls strictly
/// inside the box are positive and regress its edge distances.
/// Zero positives is not an error; callers skip such pairs.
pub fn assign_labels(
    gt: &BoundingBox,
    map_size: usize,
    stride: usize,
    search_px: usize,
) -> Result<Labels> {
    gt.validate()?;
    if gt.frame != Frame::SearchPatch {
        return Err(Error::FrameMismatch(gt.frame, Frame::SearchPatch));
    }
    if map_size == 0 || stride == 0 || search_px == 0 {
        return Err(Error::Config("label grid geometry must be positive".into()));
    }
    let n = map_size * map_size;
    let (x1, y1, x2, y2) = gt.corners();
    let mut labels = Labels {
        cls: vec![0.0; n],
        ctr: vec![0.0; n],
        reg: vec![0.0; 4 * n],
        positive: vec![false; n],
        num_positive: 0,
        map_size,
        stride,
        search_px,
        gt: *gt,
    };
    let off = grid_offset(search_px, map_size, stride);
    for i in 0..map_size {
        let py = i as f64 * stride as f64 + off;
        for j in 0..map_size {
            let px = j as f64 * stride as f64 + off;
            if px > x1 && px < x2 && py > y1 && py < y2 {
                let loc = i * map_size + j;
                let t = RegressionTargets::new(px - x1, py - y1, x2 - px, y2 - py);
                labels.cls[loc] = 1.0;
                labels.ctr[loc] = centerness(&t)?;
                labels.reg[loc] = t.left;
                labels.reg[n + loc] = t.top;
                labels.reg[2 * n + loc] = t.right;
                labels.reg[3 * n + loc] = t.bottom;
                labels.positive[loc] = true;
                labels.num_positive += 1;
            }
        }
    }
    Ok(labels)
}

/// Loss term weights (classification, center-ness, regression).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub ctr: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            ctr: 1.0,
            reg: 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cls, self.ctr, self.reg];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if all.iter().sum::<f64>() == 0.0 {
            return Err(Error::Config("loss weights must not all be zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub ctr: f64,
    pub reg: f64,
    /// True when the labels had no positive locations; the
    /// center-ness and regression terms are zero then.
    pub no_positives: bool,
}

/// Evaluate the weighted tracking loss of predicted maps against
/// labels: mean focal classification over all locations, mean
/// soft-target focal center-ness and mean EIoU regression over
/// positives.
pub fn total_loss(maps: &ScoreMaps, labels: &Labels, w: &LossWeights) -> Result<LossBreakdown> {
    maps.validate()?;
    w.validate()?;
    if maps.map_size != labels.map_size {
        return Err(Error::LengthMismatch {
            what: "label grid",
            got: labels.map_size,
            expected: maps.map_size,
        });
    }
    let n = maps.locations();

    // In the cross-entropy terms below, the focal factor is zero
    // whenever p sits exactly at its target, so the ln(0) limits
    // resolve to zero loss rather than NaN.
    let mut cls = 0.0;
    for loc in 0..n {
        let p = maps.cls[loc];
        cls += if labels.cls[loc] > 0.5 {
            FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * -p.ln()
        } else {
            (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * -(1.0 - p).ln()
        };
    }
    cls /= n as f64;

    let (mut ctr, mut reg) = (0.0, 0.0);
    let no_positives = labels.num_positive == 0;
    if !no_positives {
        for loc in 0..n {
            if !labels.positive[loc] {
                continue;
            }
            let (t, p) = (labels.ctr[loc], maps.ctr[loc]);
            let bce = if t > 0.0 { -t * p.ln() } else { 0.0 }
                + if t < 1.0 { -(1.0 - t) * (1.0 - p).ln() } else { 0.0 };
            ctr += (t - p).abs().powf(FOCAL_GAMMA) * bce;

            let (i, j) = (loc / maps.map_size, loc % maps.map_size);
            let (px, py) = maps.point(i, j);
            let (l, t_, r, b) = (
                maps.reg[loc],
                maps.reg[n + loc],
                maps.reg[2 * n + loc],
                maps.reg[3 * n + loc],
            );
            let pred = BoundingBox::new(
                px + (r - l) / 2.0,
                py + (b - t_) / 2.0,
                l + r,
                t_ + b,
                labels.gt.frame,
            )?;
            reg += eiou_loss(&pred, &labels.gt)?;
        }
        ctr /= labels.num_positive as f64;
        reg /= labels.num_positive as f64;
    }
    Ok(LossBreakdown {
        total: w.cls * cls + w.ctr * ctr + w.reg * reg,
        cls,
        ctr,
        reg,
        no_positives,
    })
}

/// One decoded candidate box on the score-map grid.
#[derive(Debug, Clone)]
pub struct Detection {
    /// Candidate box in the search-patch frame.
    pub bbox: BoundingBox,
    /// Ranking score: `cls * ctr` or plain `cls`.
    pub score: f64,
    pub cls: f64,
    pub ctr: f64,
    /// Grid cell (row, column) the box was decoded from.
    pub loc: (usize, usize),
}

/// Decode score maps into the top-K candidates ranked by score
/// (center-ness-weighted when `use_centerness`; ties keep the lower
/// grid index first).
pub fn decode(maps: &ScoreMaps, use_centerness: bool, top_k: usize) -> Result<Vec<Detection>> {
    maps.validate()?;
    let n = maps.locations();
    let mut dets = Vec::with_capacity(n);
    for loc in 0..n {
        let (i, j) = (loc / maps.map_size, loc % maps.map_size);
        let (px, py) = maps.point(i, j);
        let (l, t, r, b) = (
            maps.reg[loc],
            maps.reg[n + loc],
            maps.reg[2 * n + loc],
            maps.reg[3 * n + loc],
        );
        let bbox = BoundingBox::new(
            px + (r - l) / 2.0,
            py + (b - t) / 2.0,
            l + r,
            t + b,
            Frame::SearchPatch,
        )?;
        let (cls, ctr) = (maps.cls[loc], maps.ctr[loc]);
        dets.push(Detection {
            bbox,
            score: if use_centerness { cls * ctr } else { cls },
            cls,
            ctr,
            loc: (i, j),
        });
    }
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores validated finite")
            .then(
                (a.loc.0 * maps.map_size + a.loc.1).cmp(&(b.loc.0 * maps.map_size + b.loc.1)),
            )
    });
    dets.truncate(top_k);
    Ok(dets)
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 5e-5,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
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
        self.loss_weights.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Pairs dropped for missing ground truth or zero positive
    /// locations.
    pub skipped_pairs: usize,
}

/// Weights-file header.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrackerModel {
    kind: String,
    config: TrackerConfig,
}

/// The tracker: architecture plus parameters.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    params: Vec<Tensor>,
}

/// Canonical parameter list (name, shape) for an architecture.
fn param_specs(cfg: &TrackerConfig) -> Vec<(String, Vec<usize>)> {
    let mut specs = Vec::new();
    let mut c_in = cfg.in_channels;
    for (i, &w) in cfg.widths.iter().enumerate() {
        specs.push((format!("backbone.{i}.weight"), vec![w, c_in, 3, 3]));
        specs.push((format!("backbone.{i}.bias"), vec![w]));
        c_in = w;
    }
    let feat = *cfg.widths.last().expect("validated nonempty");
    for trunk in ["head_cls_ctr", "head_reg"] {
        let mut prev = feat;
        for d in 0..cfg.head_depth {
            specs.push((format!("{trunk}.{d}.weight"), vec![cfg.head_width, prev, 3, 3]));
            specs.push((format!("{trunk}.{d}.bias"), vec![cfg.head_width]));
            prev = cfg.head_width;
        }
        if trunk == "head_cls_ctr" {
            for out in ["cls_out", "ctr_out"] {
                specs.push((format!("{out}.weight"), vec![1, cfg.head_width, 1, 1]));
                specs.push((format!("{out}.bias"), vec![1]));
            }
        } else {
            specs.push(("reg_out.weight".into(), vec![4, cfg.head_width, 1, 1]));
            specs.push(("reg_out.bias".into(), vec![4]));
        }
    }
    specs
}

/// Node ids of the parameters of one forward pass, in canonical
/// order, grouped by role.
struct ParamIds {
    all: Vec<NodeId>,
    backbone: Vec<(NodeId, NodeId)>,
    cls_trunk: Vec<(NodeId, NodeId)>,
    cls_out: (NodeId, NodeId),
    ctr_out: (NodeId, NodeId),
    reg_trunk: Vec<(NodeId, NodeId)>,
    reg_out: (NodeId, NodeId),
}

/// Backbone/trunk building block: 3x3 convolutions (padding 1) with
/// ReLU. Shared with the refiner's embedding network.
pub(crate) fn conv_stack(
    tape: &mut Tape,
    blocks: &[(NodeId, NodeId)],
    strides: &[usize],
    input: NodeId,
) -> Result<NodeId> {
    let mut x = input;
    for ((w, b), &s) in blocks.iter().zip(strides) {
        x = tape.conv2d(x, *w, *b, s, 1)?;
        x = tape.relu(x);
    }
    Ok(x)
}

/// Image (+ optional mask) to a `[channels, h, w]` input tensor. A
/// two-channel tensor without a mask gets an all-zero mask plane, so
/// the mask weights only ever act on the template branch.
pub(crate) fn patch_tensor(img: &Image, mask: Option<&Image>, channels: usize) -> Result<Tensor> {
    let (h, w) = (img.height(), img.width());
    match channels {
        1 => Tensor::from_vec(&[1, h, w], img.data().to_vec()),
        2 => {
            let mut data = Vec::with_capacity(2 * h * w);
            data.extend_from_slice(img.data());
            match mask {
                Some(m) => {
                    if m.height() != h || m.width() != w {
                        return Err(Error::ShapeMismatch(format!(
                            "mask {}x{} vs patch {}x{}",
                            m.width(),
                            m.height(),
                            w,
                            h
                        )));
                    }
                    data.extend_from_slice(m.data());
                }
                None => data.resize(2 * h * w, 0.0),
            }
            Tensor::from_vec(&[2, h, w], data)
        }
        c => Err(Error::Config(format!("unsupported input channels: {c}"))),
    }
}

/// Differentiable forward-pass handles.
struct ForwardNodes {
    cls_logits: NodeId,
    ctr_logits: NodeId,
    /// Edge distances after the positive output mapping
    /// `exp(raw) * stride`.
    reg_dist: NodeId,
    map_size: usize,
    params: Vec<NodeId>,
}

impl Tracker {
    /// Fresh tracker with fan-in-scaled uniform weights; the final
    /// classification/center-ness biases start at a rare-positive
    /// prior.
    pub fn init(cfg: TrackerConfig, seed: u64) -> Result<Tracker> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs(&cfg)
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".weight") {
                    let fan_in = shape[1..].iter().product();
                    Tensor::he_uniform(&shape, fan_in, &mut rng)
                } else if name == "cls_out.bias" || name == "ctr_out.bias" {
                    Tensor::from_vec(&shape, vec![RARE_POSITIVE_LOGIT; shape[0]])
                        .expect("static shape")
                } else {
                    Tensor::zeros(&shape)
                }
            })
            .collect();
        Ok(Tracker { cfg, params })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn insert_params(&self, tape: &mut Tape) -> ParamIds {
        let all: Vec<NodeId> = self.params.iter().map(|p| tape.input(p.clone())).collect();
        let pairs = |range: std::ops::Range<usize>| -> Vec<(NodeId, NodeId)> {
            range.map(|i| (all[2 * i], all[2 * i + 1])).collect()
        };
        let nb = self.cfg.widths.len();
        let hd = self.cfg.head_depth;
        let backbone = pairs(0..nb);
        let cls_trunk = pairs(nb..nb + hd);
        let cls_out = (all[2 * (nb + hd)], all[2 * (nb + hd) + 1]);
        let ctr_out = (all[2 * (nb + hd) + 2], all[2 * (nb + hd) + 3]);
        let reg_trunk = pairs(nb + hd + 2..nb + 2 * hd + 2);
        let k = 2 * (nb + 2 * hd + 2);
        let reg_out = (all[k], all[k + 1]);
        ParamIds {
            all,
            backbone,
            cls_trunk,
            cls_out,
            ctr_out,
            reg_trunk,
            reg_out,
        }
    }

    /// Backbone features of one input tensor on a fresh tape
    /// (shared-weight path used by both branches).
    #[cfg(test)]
    fn features_value(&self, input: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ids = self.insert_params(&mut tape);
        let x = tape.input(input);
        let f = conv_stack(&mut tape, &ids.backbone, &self.cfg.strides, x)?;
        Ok(tape.value(f).clone())
    }

    fn forward_on_tape(
        &self,
        tape: &mut Tape,
        template: Tensor,
        search: Tensor,
    ) -> Result<ForwardNodes> {
        let search_px = *search.shape().last().expect("tensor rank 3");
        let map_size = self.cfg.map_size(search_px)?;
        let ids = self.insert_params(tape);
        let t_in = tape.input(template);
        let s_in = tape.input(search);
        let t_feat = conv_stack(tape, &ids.backbone, &self.cfg.strides, t_in)?;
        let s_feat = conv_stack(tape, &ids.backbone, &self.cfg.strides, s_in)?;
        let t_crop = tape.crop_center(t_feat, self.cfg.template_crop)?;
        let corr = tape.dw_xcorr(s_feat, t_crop)?;

        let trunk = |tape: &mut Tape, blocks: &[(NodeId, NodeId)]| -> Result<NodeId> {
            let strides = vec![1; blocks.len()];
            conv_stack(tape, blocks, &strides, corr)
        };
        let c = trunk(tape, &ids.cls_trunk)?;
        let cls_logits = tape.conv2d(c, ids.cls_out.0, ids.cls_out.1, 1, 0)?;
        let ctr_logits = tape.conv2d(c, ids.ctr_out.0, ids.ctr_out.1, 1, 0)?;
        let r = trunk(tape, &ids.reg_trunk)?;
        let reg_raw = tape.conv2d(r, ids.reg_out.0, ids.reg_out.1, 1, 0)?;
        let reg_dist = tape.exp_scale(reg_raw, self.cfg.stride() as f64);
        debug_assert_eq!(tape.value(cls_logits).shape()[1], map_size);
        Ok(ForwardNodes {
            cls_logits,
            ctr_logits,
            reg_dist,
            map_size,
            params: ids.all,
        })
    }

    fn pair_tensors(&self, pair: &PatchPair) -> Result<(Tensor, Tensor)> {
        if self.cfg.in_channels == 2 && pair.template_mask.is_none() {
            return Err(Error::Config(
                "this tracker expects a template mask channel, but the pair has none".into(),
            ));
        }
        let t = patch_tensor(&pair.template, pair.template_mask.as_ref(), self.cfg.in_channels)?;
        let s = patch_tensor(&pair.search, None, self.cfg.in_channels)?;
        Ok((t, s))
    }

    /// Run the tracker on one patch pair.
    pub fn forward(&self, pair: &PatchPair) -> Result<ScoreMaps> {
        let (t, s) = self.pair_tensors(pair)?;
        let search_px = pair.search.width();
        let mut tape = Tape::new();
        let f = self.forward_on_tape(&mut tape, t, s)?;
        let probs = |id: NodeId| -> Vec<f64> {
            tape.value(id).data().iter().map(|&z| sigmoid(z)).collect()
        };
        Ok(ScoreMaps {
            cls: probs(f.cls_logits),
            ctr: probs(f.ctr_logits),
            reg: tape.value(f.reg_dist).data().to_vec(),
            map_size: f.map_size,
            stride: self.cfg.stride(),
            search_px,
        })
    }

    /// Mutable access to the parameter tensors, for external
    /// optimizers and perturbation analyses.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Total training loss of one labelled pair together with its
    /// gradient per parameter tensor (in [`Tracker::params`] order):
    /// exactly the quantity each optimizer step descends.
    pub fn pair_loss_grads(
        &self,
        pair: &PatchPair,
        labels: &Labels,
        w: &LossWeights,
    ) -> Result<(f64, Vec<Tensor>)> {
        let (t, s) = self.pair_tensors(pair)?;
        let mut tape = Tape::new();
        let (loss, param_ids) = self.loss_on_tape(&mut tape, t, s, labels, w)?;
        let value = tape.value(loss).item();
        let g = tape.backward(loss)?;
        Ok((value, param_ids.iter().map(|&id| g[id].clone()).collect()))
    }

    /// Differentiable total loss of one labelled pair: returns the
    /// scalar loss node and the parameter nodes, in canonical order.
    fn loss_on_tape(
        &self,
        tape: &mut Tape,
        template: Tensor,
        search: Tensor,
        labels: &Labels,
        w: &LossWeights,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let f = self.forward_on_tape(tape, template, search)?;
        let m = f.map_size;
        if m != labels.map_size {
            return Err(Error::LengthMismatch {
                what: "label grid",
                got: labels.map_size,
                expected: m,
            });
        }
        let n = m * m;
        let shape = [1, m, m];
        let ones = Tensor::from_vec(&shape, vec![1.0; n])?;
        let pos: Vec<f64> = labels.positive.iter().map(|&p| f64::from(p as u8)).collect();
        let cls_t = Tensor::from_vec(&shape, labels.cls.clone())?;
        let ctr_t = Tensor::from_vec(&shape, labels.ctr.clone())?;
        let pos_t = Tensor::from_vec(&shape, pos.clone())?;

        let cls = tape.focal_bce(f.cls_logits, cls_t, ones, FOCAL_ALPHA, FOCAL_GAMMA)?;
        let ctr = tape.soft_focal_bce(f.ctr_logits, ctr_t, pos_t, FOCAL_GAMMA)?;
        let points: Vec<(f64, f64)> = (0..n)
            .map(|loc| {
                let off = grid_offset(labels.search_px, m, labels.stride);
                let (i, j) = (loc / m, loc % m);
                (j as f64 * labels.stride as f64 + off, i as f64 * labels.stride as f64 + off)
            })
            .collect();
        let reg = tape.eiou_mean(f.reg_dist, points, Tensor::from_vec(&[n], pos)?, labels.gt)?;
        let total = tape.weighted_sum(&[(cls, w.cls), (ctr, w.ctr), (reg, w.reg)])?;
        Ok((total, f.params))
    }

    /// Train on labelled patch pairs with Adam. Deterministic for a
    /// fixed seed: epoch shuffling is seeded and per-batch gradients
    /// are accumulated in batch order.
    pub fn train(&mut self, pairs: &[PatchPair], cfg: &TrainConfig) -> Result<TrainReport> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::EmptyInput("training pairs"));
        }
        let stride = self.cfg.stride();
        let mut usable: Vec<(usize, Labels)> = Vec::new();
        let mut skipped = 0usize;
        for (idx, pair) in pairs.iter().enumerate() {
            let Some(gt) = pair.gt_search_box else {
                skipped += 1;
                continue;
            };
            let map_size = self.cfg.map_size(pair.search.width())?;
            let labels = assign_labels(&gt, map_size, stride, pair.search.width())?;
            if labels.num_positive == 0 {
                skipped += 1;
                continue;
            }
            usable.push((idx, labels));
        }
        if usable.is_empty() {
            return Err(Error::EmptyInput("training pairs with positive labels"));
        }

        let shapes: Vec<Vec<usize>> = self.params.iter().map(|p| p.shape().to_vec()).collect();
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: cfg.learning_rate,
                ..AdamConfig::default()
            },
            &shapes,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..usable.len()).collect();
        let mut epoch_loss = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for (bidx, batch) in order.chunks(cfg.batch_size).enumerate() {
                let mut grads: Vec<Tensor> =
                    shapes.iter().map(|s| Tensor::zeros(s)).collect();
                for &u in batch {
                    let (pair_idx, labels) = &usable[u];
                    let pair = &pairs[*pair_idx];
                    let (t, s) = self.pair_tensors(pair)?;
                    let mut tape = Tape::new();
                    let (loss, param_ids) =
                        self.loss_on_tape(&mut tape, t, s, labels, &cfg.loss_weights)?;
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
                    for (slot, &id) in param_ids.iter().enumerate() {
                        grads[slot].add_assign(&g[id]);
                    }
                }
                let inv = 1.0 / batch.len() as f64;
                for g in &mut grads {
                    g.scale(inv);
                }
                adam.step(&mut self.params, &grads)?;
            }
            epoch_loss.push(loss_sum / usable.len() as f64);
        }
        Ok(TrainReport {
            epoch_loss,
            skipped_pairs: skipped,
        })
    }

    /// Write the weights container (JSON architecture header +
    /// little-endian f32 payloads).
    pub fn save(&self, path: &Path) -> Result<()> {
        let model = TrackerModel {
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

    pub fn load(path: &Path) -> Result<Tracker> {
        let loaded = load_weights::<TrackerModel>(path)?;
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
        Ok(Tracker { cfg, params })
    }
}
