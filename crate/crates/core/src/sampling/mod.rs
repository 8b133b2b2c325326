//! Patch geometry around lesions: metric crop extents, the three
//! template input variants, mask-channel rasterization, pair
//! enumeration, manifest I/O, and the synthetic phantom generator.

pub mod manifest;
pub mod synth;

pub use manifest::{
    read_manifest, write_manifest, BoxSpec, CaseManifest, LesionType, Manifest, TimePoint, View,
};
pub use synth::{synth_generate, synth_generate_case, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_to_frame, BoundingBox, Frame, FrameMeta};
use crate::image::Image;

/// Metric patch geometry. Crops are squares of a fixed physical
/// extent around the lesion, resampled to a fixed pixel size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    pub template_extent_mm: f64,
    pub search_extent_mm: f64,
    pub template_px: usize,
    pub search_px: usize,
    pub spacing_mm: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            template_extent_mm: 80.0,
            search_extent_mm: 110.0,
            template_px: 512,
            search_px: 1024,
            spacing_mm: 0.07,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.template_extent_mm > 0.0)
            || !(self.search_extent_mm > self.template_extent_mm)
            || !(self.spacing_mm > 0.0)
        {
            return Err(Error::Config(format!(
                "patch extents must satisfy 0 < template ({}) < search ({}) with positive \
                 spacing ({})",
                self.template_extent_mm, self.search_extent_mm, self.spacing_mm
            )));
        }
        if self.template_px == 0 || self.search_px == 0 {
            return Err(Error::Config("patch pixel sizes must be positive".into()));
        }
        Ok(())
    }

    /// Source-side template crop size in full-image pixels
    /// (`round(extent / spacing)`; 1143 at defaults).
    pub fn template_crop_px(&self) -> f64 {
        (self.template_extent_mm / self.spacing_mm).round()
    }

    /// Source-side search crop size in full-image pixels (1571 at
    /// defaults).
    pub fn search_crop_px(&self) -> f64 {
        (self.search_extent_mm / self.spacing_mm).round()
    }

    /// Lesion extent in millimetres from a full-image box.
    pub fn box_extent_mm(&self, b: &BoundingBox) -> f64 {
        b.w.max(b.h) * self.spacing_mm
    }
}

/// Template input construction variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Tight crop-and-resize, no mask channel.
    CropResize,
    /// Intensity patch plus a binary mask channel.
    MaskGuided,
    /// Intensities multiplied by the mask, background zeroed.
    Masked,
}

impl Variant {
    pub fn uses_mask(self) -> bool {
        !matches!(self, Variant::CropResize)
    }
}

/// Template-side extraction output.
#[derive(Debug, Clone)]
pub struct TemplateFragment {
    pub patch: Image,
    /// Present for the mask-guided and masked variants.
    pub mask: Option<Image>,
    pub frame: FrameMeta,
    /// Ground-truth box mapped to the template-patch frame.
    pub gt_box: BoundingBox,
    /// Lesion exceeds the template extent under a mask variant; the
    /// pipeline bypasses local tracking for such lesions.
    pub oversize: bool,
}

/// Search-side extraction output.
#[derive(Debug, Clone)]
pub struct SearchFragment {
    pub patch: Image,
    pub frame: FrameMeta,
    /// Ground-truth box mapped to the search-patch frame and clamped
    /// to it; `None` when absent or fully outside.
    pub gt_box: Option<BoundingBox>,
    /// The requested crop center fell outside the image.
    pub center_off_image: bool,
}

/// A template/search input pair for the tracker.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub template: Image,
    pub template_mask: Option<Image>,
    pub search: Image,
    pub gt_search_box: Option<BoundingBox>,
    pub template_frame: FrameMeta,
    pub search_frame: FrameMeta,
}

impl PatchPair {
    pub fn assemble(t: TemplateFragment, s: SearchFragment) -> PatchPair {
        PatchPair {
            template: t.patch,
            template_mask: t.mask,
            search: s.patch,
            gt_search_box: s.gt_box,
            template_frame: t.frame,
            search_frame: s.frame,
        }
    }
}

/// Rasterize a box into a binary mask: corners round to the nearest
/// integer, then pixels whose centers fall in the half-open box are
/// set. Returns the mask and whether it came out empty (box outside
/// the patch).
pub fn make_mask_channel(b: &BoundingBox, patch_px: usize) -> Result<(Image, bool)> {
    b.validate()?;
    if patch_px == 0 {
        return Err(Error::ImageTooSmall);
    }
    let (x1, y1, x2, y2) = b.corners();
    let p = patch_px as i64;
    let jlo = (x1.round() as i64).max(0);
    let jhi = (x2.round() as i64).min(p);
    let ilo = (y1.round() as i64).max(0);
    let ihi = (y2.round() as i64).min(p);
    let mut mask = Image::new(patch_px, patch_px)?;
    let mut any = false;
    for i in ilo.max(0)..ihi.max(0) {
        for j in jlo.max(0)..jhi.max(0) {
            mask.set(i as usize, j as usize, 1.0);
            any = true;
        }
    }
    Ok((mask, !any))
}

fn patch_frame(frame: Frame, cx: f64, cy: f64, crop_px: f64, out_px: usize) -> FrameMeta {
    FrameMeta {
        frame,
        origin_x: cx - crop_px / 2.0,
        origin_y: cy - crop_px / 2.0,
        scale: out_px as f64 / crop_px,
    }
}

/// Extract the template patch centered on the lesion.
///
/// The crop covers `template_extent_mm` around the ground-truth box
/// center (zero-padded past image borders) and is resampled to
/// `template_px`. For `crop_resize`, a lesion larger than the extent
/// enlarges the crop to cover it tightly; for the mask variants such
/// lesions are flagged `oversize` for the bypass path.
pub fn extract_template(
    img: &Image,
    gt_box: &BoundingBox,
    spec: &PatchSpec,
    variant: Variant,
) -> Result<TemplateFragment> {
    spec.validate()?;
    gt_box.validate()?;
    if gt_box.frame != Frame::FullImage {
        return Err(Error::UnrelatedFrames {
            box_frame: gt_box.frame,
            src_frame: Frame::FullImage,
        });
    }
    if (img.spacing_mm() - spec.spacing_mm).abs() > 1e-9 {
        return Err(Error::SpacingMismatch(img.spacing_mm(), spec.spacing_mm));
    }
    let base_crop = spec.template_crop_px();
    let lesion_px = gt_box.w.max(gt_box.h);
    let oversize = lesion_px > base_crop;
    let crop_px = match variant {
        Variant::CropResize => base_crop.max(lesion_px),
        _ => base_crop,
    };
    let patch = img.crop_and_resize(gt_box.cx, gt_box.cy, crop_px, spec.template_px)?;
    let frame = patch_frame(
        Frame::TemplatePatch,
        gt_box.cx,
        gt_box.cy,
        crop_px,
        spec.template_px,
    );
    let gt_patch = box_to_frame(gt_box, &FrameMeta::FULL, &frame)?;
    let (mask, patch) = if variant.uses_mask() {
        let (mask, _) = make_mask_channel(&gt_patch, spec.template_px)?;
        let patch = match variant {
            Variant::Masked => {
                let mut m = patch;
                for (v, &mv) in m.data_mut().iter_mut().zip(mask.data()) {
                    *v *= mv;
                }
                m
            }
            _ => patch,
        };
        (Some(mask), patch)
    } else {
        (None, patch)
    };
    Ok(TemplateFragment {
        patch,
        mask,
        frame,
        gt_box: gt_patch,
        oversize,
    })
}

/// Extract the search patch centered at a full-image point (typically
/// the registration-mapped lesion center).
pub fn extract_search(
    img: &Image,
    center: (f64, f64),
    gt_box: Option<&BoundingBox>,
    spec: &PatchSpec,
) -> Result<SearchFragment> {
    spec.validate()?;
    if (img.spacing_mm() - spec.spacing_mm).abs() > 1e-9 {
        return Err(Error::SpacingMismatch(img.spacing_mm(), spec.spacing_mm));
    }
    let (cx, cy) = center;
    if !(cx.is_finite() && cy.is_finite()) {
        return Err(Error::NonFiniteBox);
    }
    let crop_px = spec.search_crop_px();
    let patch = img.crop_and_resize(cx, cy, crop_px, spec.search_px)?;
    let frame = patch_frame(Frame::SearchPatch, cx, cy, crop_px, spec.search_px);
    let center_off_image =
        cx < 0.0 || cy < 0.0 || cx > img.width() as f64 || cy > img.height() as f64;
    let gt_patch = match gt_box {
        Some(b) => {
            if b.frame != Frame::FullImage {
                return Err(Error::UnrelatedFrames {
                    box_frame: b.frame,
                    src_frame: Frame::FullImage,
                });
            }
            clamp_box(&box_to_frame(b, &FrameMeta::FULL, &frame)?, spec.search_px)
        }
        None => None,
    };
    Ok(SearchFragment {
        patch,
        frame,
        gt_box: gt_patch,
        center_off_image,
    })
}

/// Clamp a patch-frame box to `[0, patch_px]^2`; `None` if nothing
/// remains.
fn clamp_box(b: &BoundingBox, patch_px: usize) -> Option<BoundingBox> {
    let p = patch_px as f64;
    let (x1, y1, x2, y2) = b.corners();
    let (x1, y1, x2, y2) = (x1.max(0.0), y1.max(0.0), x2.min(p), y2.min(p));
    if x2 > x1 && y2 > y1 {
        Some(BoundingBox::from_corners(x1, y1, x2, y2, b.frame).expect("positive extents"))
    } else {
        None
    }
}

/// How to orient a time-point combination into (template, search).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrientation {
    /// The later exam is the annotated template; the earlier exam is
    /// searched (the default).
    LaterTemplate,
    EarlierTemplate,
}

/// Reference to one (template, search) exam pair in a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairRef {
    pub case: usize,
    pub view: usize,
    pub template_tp: usize,
    pub search_tp: usize,
}

impl PairRef {
    /// Stable id such as `case0000/v0/t1-s0`.
    pub fn id(&self, m: &Manifest) -> String {
        let case = &m.cases[self.case];
        let view = &case.views[self.view];
        format!(
            "{}/{}/t{}-s{}",
            case.id,
            view.view_id,
            view.timepoints[self.template_tp].index,
            view.timepoints[self.search_tp].index
        )
    }
}

/// All unordered time-point combinations within each view, oriented
/// per `orientation`. A view with n time points yields n(n-1)/2
/// pairs; single-time-point views contribute none.
pub fn enumerate_pairs(m: &Manifest, orientation: PairOrientation) -> Vec<PairRef> {
    let mut out = Vec::new();
    for (ci, case) in m.cases.iter().enumerate() {
        for (vi, view) in case.views.iter().enumerate() {
            let n = view.timepoints.len();
            for earlier in 0..n {
                for later in earlier + 1..n {
                    let (t, s) = match orientation {
                        PairOrientation::LaterTemplate => (later, earlier),
                        PairOrientation::EarlierTemplate => (earlier, later),
                    };
                    out.push(PairRef {
                        case: ci,
                        view: vi,
                        template_tp: t,
                        search_tp: s,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn full_box(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h, Frame::FullImage).unwrap()
    }

    #[test]
    fn default_crop_sizes() {
        let spec = PatchSpec::default();
        assert_eq!(spec.template_crop_px(), 1143.0);
        assert_eq!(spec.search_crop_px(), 1571.0);
    }

    #[test]
    fn mask_corner_box_has_four_ones() {
        let b = BoundingBox::from_corners(0.0, 0.0, 2.0, 2.0, Frame::TemplatePatch).unwrap();
        let (mask, empty) = make_mask_channel(&b, 8).unwrap();
        assert!(!empty);
        assert_eq!(mask.data().iter().sum::<f64>(), 4.0);
        assert_eq!(mask.get(0, 0), 1.0);
        assert_eq!(mask.get(1, 1), 1.0);
        assert_eq!(mask.get(2, 2), 0.0);
    }

    #[test]
    fn mask_full_patch_is_all_ones() {
        let b = BoundingBox::from_corners(0.0, 0.0, 8.0, 8.0, Frame::TemplatePatch).unwrap();
        let (mask, empty) = make_mask_channel(&b, 8).unwrap();
        assert!(!empty);
        assert!(mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_offscreen_box_is_flagged() {
        let b = full_box(-50.0, -50.0, 10.0, 10.0);
        let (mask, empty) = make_mask_channel(&b, 8).unwrap();
        assert!(empty);
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_centered_box_centroid_near_patch_center() {
        for &(w, h) in &[(10.0, 10.0), (13.3, 7.7), (128.0, 90.5), (1.0, 3.0)] {
            let b = BoundingBox::new(64.0, 64.0, w, h, Frame::TemplatePatch).unwrap();
            let (mask, _) = make_mask_channel(&b, 128).unwrap();
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for i in 0..128 {
                for j in 0..128 {
                    if mask.get(i, j) > 0.0 {
                        sx += j as f64 + 0.5;
                        sy += i as f64 + 0.5;
                        n += 1.0;
                    }
                }
            }
            assert!((sx / n - 64.0).abs() <= 0.5, "w={w} h={h}");
            assert!((sy / n - 64.0).abs() <= 0.5, "w={w} h={h}");
        }
    }

    /// Desk-scale spec used by most extraction tests: 512 px images
    /// at 0.28 mm, 128/256 px patches.
    fn desk_spec() -> PatchSpec {
        PatchSpec {
            template_px: 128,
            search_px: 256,
            spacing_mm: 0.28,
            ..PatchSpec::default()
        }
    }

    fn desk_image() -> Image {
        Image::from_fn(512, 512, |x, y| {
            0.4 + 0.2 * (x * 0.021).sin() + 0.2 * (y * 0.017).cos()
        })
        .unwrap()
        .with_spacing(0.28)
        .unwrap()
    }

    #[test]
    fn template_mask_ratio_matches_extent() {
        // A 20 mm lesion inside an 80 mm crop occupies a mask square
        // of (20/80) * template_px pixels per side.
        let spec = PatchSpec::default();
        let img = Image::from_fn(64, 64, |_, _| 0.5)
            .unwrap()
            .with_spacing(0.07)
            .unwrap();
        // Lesion 20 mm = 285.71 px at full resolution.
        let b = full_box(32.0, 32.0, 20.0 / 0.07, 20.0 / 0.07);
        let frag = extract_template(&img, &b, &spec, Variant::MaskGuided).unwrap();
        let ones = frag.mask.as_ref().unwrap().data().iter().sum::<f64>();
        assert_eq!(ones, 128.0 * 128.0);
        assert_relative_eq!(frag.gt_box.cx, 256.0, epsilon = 1e-9);
        assert_relative_eq!(frag.gt_box.w, 127.98, epsilon = 0.01);
    }

    #[test]
    fn masked_variant_multiplies_intensities() {
        let spec = desk_spec();
        let img = Image::from_fn(512, 512, |_, _| 0.75)
            .unwrap()
            .with_spacing(0.28)
            .unwrap();
        let b = full_box(256.0, 256.0, 60.0, 40.0);
        let frag = extract_template(&img, &b, &spec, Variant::Masked).unwrap();
        let mask = frag.mask.as_ref().unwrap();
        for (v, m) in frag.patch.data().iter().zip(mask.data()) {
            assert_relative_eq!(*v, 0.75 * m, epsilon = 1e-12);
        }
    }

    #[test]
    fn corner_lesion_is_zero_padded() {
        let spec = desk_spec();
        let img = Image::from_fn(512, 512, |_, _| 1.0)
            .unwrap()
            .with_spacing(0.28)
            .unwrap();
        let b = full_box(10.0, 10.0, 30.0, 30.0);
        let frag = extract_template(&img, &b, &spec, Variant::MaskGuided).unwrap();
        // Top-left of the crop lies far outside the image -> zeros.
        assert_eq!(frag.patch.get(0, 0), 0.0);
        // The lesion area itself is present.
        let c = 64;
        assert!(frag.patch.get(c, c) > 0.99);
        // Mask is derived from the box, not the padded intensities.
        let ones = frag.mask.as_ref().unwrap().data().iter().sum::<f64>();
        assert!(ones > 0.0);
    }

    #[test]
    fn crop_resize_enlarges_for_oversize_lesion() {
        let spec = desk_spec();
        let img = desk_image();
        // 100 mm lesion > 80 mm extent: 357 px.
        let b = full_box(256.0, 256.0, 100.0 / 0.28, 200.0);
        let tight = extract_template(&img, &b, &spec, Variant::CropResize).unwrap();
        assert!(tight.oversize);
        // Crop side equals the lesion's larger extent: the gt box
        // fills the patch exactly along x.
        assert_relative_eq!(tight.gt_box.w, 128.0, epsilon = 1e-9);
        let masked = extract_template(&img, &b, &spec, Variant::MaskGuided).unwrap();
        assert!(masked.oversize);
        // Mask variants keep the 80 mm crop: box wider than patch,
        // mask saturates horizontally.
        assert!(masked.gt_box.w > 128.0);
    }

    #[test]
    fn search_gt_at_crop_center_lands_at_patch_center() {
        let spec = desk_spec();
        let img = desk_image();
        let gt = full_box(300.0, 220.0, 40.0, 30.0);
        let frag = extract_search(&img, (300.0, 220.0), Some(&gt), &spec).unwrap();
        let b = frag.gt_box.unwrap();
        assert_relative_eq!(b.cx, 128.0, epsilon = 1e-9);
        assert_relative_eq!(b.cy, 128.0, epsilon = 1e-9);
        assert!(!frag.center_off_image);
    }

    #[test]
    fn search_gt_offset_matches_scale_chain() {
        // 10 mm right of center at paper-scale defaults:
        // cx = 512 + (10 / 0.07) * (1024 / 1571) ~= 605.1.
        let spec = PatchSpec::default();
        let img = Image::from_fn(64, 64, |_, _| 0.5)
            .unwrap()
            .with_spacing(0.07)
            .unwrap();
        let center = (2000.0, 2000.0);
        let gt = full_box(2000.0 + 10.0 / 0.07, 2000.0, 100.0, 100.0);
        let frag = extract_search(&img, center, Some(&gt), &spec).unwrap();
        let b = frag.gt_box.unwrap();
        assert_relative_eq!(b.cx, 605.1, epsilon = 0.05);
        // Center far outside the 64 px image -> flagged.
        assert!(frag.center_off_image);
    }

    #[test]
    fn search_box_round_trips_to_full_frame() {
        let spec = desk_spec();
        let img = desk_image();
        let gt = full_box(310.7, 205.3, 41.3, 28.9);
        let frag = extract_search(&img, (297.2, 214.9), Some(&gt), &spec).unwrap();
        let back = box_to_frame(&frag.gt_box.unwrap(), &frag.frame, &FrameMeta::FULL).unwrap();
        assert_relative_eq!(back.cx, gt.cx, epsilon = 0.1);
        assert_relative_eq!(back.cy, gt.cy, epsilon = 0.1);
        assert_relative_eq!(back.w, gt.w, epsilon = 0.1);
        assert_relative_eq!(back.h, gt.h, epsilon = 0.1);
    }

    #[test]
    fn search_gt_fully_outside_becomes_none() {
        let spec = desk_spec();
        let img = desk_image();
        let gt = full_box(10.0, 10.0, 20.0, 20.0);
        let frag = extract_search(&img, (480.0, 480.0), Some(&gt), &spec).unwrap();
        assert!(frag.gt_box.is_none());
    }

    #[test]
    fn enumerate_pairs_counts_and_orientation() {
        let tp = |index: i64| TimePoint {
            index,
            image: format!("t{index}.pgm"),
            lesion_box: BoxSpec {
                cx: 10.0,
                cy: 10.0,
                w: 5.0,
                h: 5.0,
            },
        };
        let mut m = Manifest {
            spacing_mm: 0.28,
            cases: vec![CaseManifest {
                id: "c".into(),
                lesion_type: LesionType::Mass,
                views: vec![
                    View {
                        view_id: "v2".into(),
                        timepoints: vec![tp(0), tp(1)],
                    },
                    View {
                        view_id: "v1".into(),
                        timepoints: vec![tp(0)],
                    },
                ],
            }],
        };
        let pairs = enumerate_pairs(&m, PairOrientation::LaterTemplate);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].template_tp, 1);
        assert_eq!(pairs[0].search_tp, 0);
        assert_eq!(pairs[0].id(&m), "c/v2/t1-s0");

        // n(n-1)/2 against a brute-force double loop for n <= 10.
        for n in 0..=10usize {
            m.cases[0].views[0].timepoints = (0..n as i64).map(tp).collect();
            let got = enumerate_pairs(&m, PairOrientation::EarlierTemplate).len();
            let mut expected = 0;
            for i in 0..n {
                for j in 0..n {
                    if i < j {
                        expected += 1;
                    }
                }
            }
            assert_eq!(got, expected, "n={n}");
        }
    }
}
