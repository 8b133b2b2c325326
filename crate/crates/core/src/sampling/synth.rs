//! Synthetic phantom-pair generator: smooth textured "breast"
//! backgrounds with one embedded lesion per view, observed at several
//! time points under random affine motion plus lesion appearance
//! drift. Everything is evaluated analytically, so ground-truth boxes
//! are exact by construction.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::sampling::manifest::{BoxSpec, CaseManifest, LesionType, Manifest, TimePoint, View};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_px: usize,
    pub spacing_mm: f64,
    pub num_cases: usize,
    pub views_per_case: usize,
    pub timepoints_per_view: usize,
    /// Probability that a case carries a mass (vs a calcification
    /// cluster).
    pub mass_fraction: f64,
    /// Lesion extent range in millimetres at the first time point.
    pub lesion_extent_mm: (f64, f64),
    /// Inter-time-point motion ranges.
    pub max_translation_px: f64,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    /// Lesion size drift (relative, e.g. 0.3 for +-30%).
    pub size_drift: f64,
    /// Lesion intensity drift (relative, e.g. 0.2 for +-20%).
    pub intensity_drift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_px: 512,
            spacing_mm: 0.28,
            num_cases: 40,
            views_per_case: 1,
            timepoints_per_view: 2,
            mass_fraction: 0.7,
            lesion_extent_mm: (6.0, 24.0),
            max_translation_px: 40.0,
            max_rotation_deg: 10.0,
            scale_range: (0.9, 1.1),
            size_drift: 0.3,
            intensity_drift: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_px < 64 {
            return Err(Error::Config("synthetic images must be >= 64 px".into()));
        }
        if !(self.spacing_mm > 0.0) {
            return Err(Error::InvalidSpacing(self.spacing_mm));
        }
        if self.num_cases == 0 || self.views_per_case == 0 || self.timepoints_per_view == 0 {
            return Err(Error::Config(
                "synthetic counts (cases, views, time points) must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mass_fraction) {
            return Err(Error::OutOfRange {
                what: "mass_fraction",
                range: "[0, 1]",
                value: self.mass_fraction,
            });
        }
        let (lo, hi) = self.lesion_extent_mm;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "lesion extent range ({lo}, {hi}) mm is invalid"
            )));
        }
        let (slo, shi) = self.scale_range;
        if !(slo > 0.0 && shi >= slo) {
            return Err(Error::Config(format!(
                "scale range ({slo}, {shi}) is invalid"
            )));
        }
        if self.max_translation_px < 0.0
            || self.max_rotation_deg < 0.0
            || !(0.0..1.0).contains(&self.size_drift)
            || !(0.0..1.0).contains(&self.intensity_drift)
        {
            return Err(Error::Config("drift/motion ranges are invalid".into()));
        }
        Ok(())
    }
}

/// SplitMix64-style finalizer decorrelating (seed, index) into an
/// independent per-case stream seed.
fn mix(seed: u64, idx: u64) -> u64 {
    let mut z = seed ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Affine map on continuous image coordinates.
#[derive(Debug, Clone, Copy)]
struct Motion {
    a11: f64,
    a12: f64,
    a21: f64,
    a22: f64,
    tx: f64,
    ty: f64,
}

impl Motion {
    const IDENTITY: Motion = Motion {
        a11: 1.0,
        a12: 0.0,
        a21: 0.0,
        a22: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// Rotation + isotropic scale about `(cx, cy)` followed by a
    /// translation.
    fn about(cx: f64, cy: f64, angle: f64, scale: f64, tx: f64, ty: f64) -> Motion {
        let (s, c) = angle.sin_cos();
        let (a11, a12, a21, a22) = (c * scale, -s * scale, s * scale, c * scale);
        Motion {
            a11,
            a12,
            a21,
            a22,
            tx: cx - a11 * cx - a12 * cy + tx,
            ty: cy - a21 * cx - a22 * cy + ty,
        }
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a11 * x + self.a12 * y + self.tx,
            self.a21 * x + self.a22 * y + self.ty,
        )
    }

    fn inverse(&self) -> Motion {
        let det = self.a11 * self.a22 - self.a12 * self.a21;
        let (i11, i12, i21, i22) = (
            self.a22 / det,
            -self.a12 / det,
            -self.a21 / det,
            self.a11 / det,
        );
        Motion {
            a11: i11,
            a12: i12,
            a21: i21,
            a22: i22,
            tx: -(i11 * self.tx + i12 * self.ty),
            ty: -(i21 * self.tx + i22 * self.ty),
        }
    }
}

/// Smooth background: a half-elliptical soft plateau anchored at the
/// left edge plus low-frequency sinusoidal texture.
struct Background {
    ax: f64,
    ay: f64,
    cy: f64,
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng, size: f64) -> Background {
        let ax = size * rng.gen_range(0.75..0.95);
        let ay = size * rng.gen_range(0.38..0.48);
        let cy = size * rng.gen_range(0.45..0.55);
        let waves = (0..6)
            .map(|_| {
                (
                    rng.gen_range(0.02..0.06),
                    rng.gen_range(-0.06..0.06),
                    rng.gen_range(-0.06..0.06),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        Background { ax, ay, cy, waves }
    }

    fn radius(&self, x: f64, y: f64) -> f64 {
        ((x / self.ax).powi(2) + ((y - self.cy) / self.ay).powi(2)).sqrt()
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        let edge = 1.0 / (1.0 + ((self.radius(x, y) - 1.0) / 0.02).exp());
        let mut v = 0.35;
        for &(amp, fx, fy, phase) in &self.waves {
            v += amp * (fx * x + fy * y + phase).sin();
        }
        (edge * v).clamp(0.0, 1.0)
    }

    fn inside(&self, x: f64, y: f64, shrink: f64) -> bool {
        x > 0.0 && self.radius(x, y) <= shrink
    }
}

/// One lesion's appearance at one time point, in continuous image
/// coordinates.
enum Appearance {
    /// Gaussian-profile rotated ellipse.
    Mass {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        angle: f64,
        amp: f64,
    },
    /// Cluster of small bright dots.
    Dots(Vec<Dot>),
}

struct Dot {
    cx: f64,
    cy: f64,
    sigma: f64,
    amp: f64,
}

const DOT_SUPPORT_SIGMAS: f64 = 3.0;

impl Appearance {
    fn value(&self, x: f64, y: f64) -> f64 {
        match self {
            Appearance::Mass {
                cx,
                cy,
                a,
                b,
                angle,
                amp,
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let rho2 = (u / a).powi(2) + (v / b).powi(2);
                amp * (-3.0 * rho2).exp()
            }
            Appearance::Dots(dots) => dots
                .iter()
                .map(|d| {
                    let r2 = (x - d.cx).powi(2) + (y - d.cy).powi(2);
                    d.amp * (-r2 / (2.0 * d.sigma * d.sigma)).exp()
                })
                .sum(),
        }
    }

    /// Exact tight bounding box (mass: rotated-ellipse extremes at
    /// the `rho = 1` boundary; dots: union of their supports).
    fn tight_box(&self) -> BoxSpec {
        match self {
            Appearance::Mass {
                cx,
                cy,
                a,
                b,
                angle,
                ..
            } => {
                let (s, c) = angle.sin_cos();
                let hw = ((a * c).powi(2) + (b * s).powi(2)).sqrt();
                let hh = ((a * s).powi(2) + (b * c).powi(2)).sqrt();
                BoxSpec {
                    cx: *cx,
                    cy: *cy,
                    w: 2.0 * hw,
                    h: 2.0 * hh,
                }
            }
            Appearance::Dots(dots) => {
                let (mut x1, mut y1) = (f64::INFINITY, f64::INFINITY);
                let (mut x2, mut y2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for d in dots {
                    let r = DOT_SUPPORT_SIGMAS * d.sigma;
                    x1 = x1.min(d.cx - r);
                    y1 = y1.min(d.cy - r);
                    x2 = x2.max(d.cx + r);
                    y2 = y2.max(d.cy + r);
                }
                BoxSpec {
                    cx: (x1 + x2) / 2.0,
                    cy: (y1 + y2) / 2.0,
                    w: x2 - x1,
                    h: y2 - y1,
                }
            }
        }
    }

    /// The same lesion under motion `m`, size factor `size`, and
    /// intensity factor `gain`. Motion here is rotation+scale+
    /// translation, so an ellipse maps to an ellipse.
    fn transformed(&self, m: &Motion, rot: f64, scale: f64, size: f64, gain: f64) -> Appearance {
        match self {
            Appearance::Mass {
                cx,
                cy,
                a,
                b,
                angle,
                amp,
            } => {
                let (ncx, ncy) = m.apply(*cx, *cy);
                Appearance::Mass {
                    cx: ncx,
                    cy: ncy,
                    a: a * scale * size,
                    b: b * scale * size,
                    angle: angle + rot,
                    amp: amp * gain,
                }
            }
            Appearance::Dots(dots) => {
                // `m` already rotates/scales the dot offsets; the size
                // drift additionally rescales them about the cluster
                // center.
                let _ = rot;
                let bb = self.tight_box();
                let (ccx, ccy) = m.apply(bb.cx, bb.cy);
                Appearance::Dots(
                    dots.iter()
                        .map(|d| {
                            let (mx, my) = m.apply(d.cx, d.cy);
                            Dot {
                                cx: ccx + size * (mx - ccx),
                                cy: ccy + size * (my - ccy),
                                sigma: d.sigma * scale * size,
                                amp: d.amp * gain,
                            }
                        })
                        .collect(),
                )
            }
        }
    }
}

struct TimePointSpec {
    motion: Motion,
    rot: f64,
    scale: f64,
    size: f64,
    gain: f64,
}

/// Generate one case: sample its content, rasterize and write the
/// PGM images, and return the manifest entry. Deterministic given
/// (cfg, seed, case_idx).
pub fn synth_generate_case(
    cfg: &SynthConfig,
    seed: u64,
    case_idx: usize,
    out_dir: &Path,
) -> Result<CaseManifest> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, case_idx as u64));
    let size = cfg.image_px as f64;
    let c = size / 2.0;
    let background = Background::sample(&mut rng, size);
    let lesion_type = if rng.gen_bool(cfg.mass_fraction) {
        LesionType::Mass
    } else {
        LesionType::Calcification
    };
    let case_id = format!("case{case_idx:04}");
    let margin = 4.0;

    let mut views = Vec::with_capacity(cfg.views_per_case);
    for view_idx in 0..cfg.views_per_case {
        // Sample lesion + motions until every time point keeps the
        // lesion inside the support/image.
        let mut placed = None;
        for _attempt in 0..100 {
            let extent_px =
                rng.gen_range(cfg.lesion_extent_mm.0..=cfg.lesion_extent_mm.1) / cfg.spacing_mm;
            let cx = rng.gen_range(0.1 * size..0.9 * size);
            let cy = rng.gen_range(0.1 * size..0.9 * size);
            let base = match lesion_type {
                LesionType::Mass => {
                    let a = extent_px / 2.0;
                    let b = a * rng.gen_range(0.6..1.0);
                    Appearance::Mass {
                        cx,
                        cy,
                        a,
                        b,
                        angle: rng.gen_range(0.0..std::f64::consts::PI),
                        amp: rng.gen_range(0.25..0.45),
                    }
                }
                LesionType::Calcification => {
                    let n = rng.gen_range(5..=30usize);
                    let r = extent_px / 2.0;
                    let dots = (0..n)
                        .map(|_| {
                            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                            let rad = r * rng.gen_range(0.0f64..1.0).sqrt();
                            Dot {
                                cx: cx + rad * ang.cos(),
                                cy: cy + rad * ang.sin(),
                                sigma: rng.gen_range(0.6..1.2),
                                amp: rng.gen_range(0.35..0.6),
                            }
                        })
                        .collect();
                    Appearance::Dots(dots)
                }
            };
            let mut specs = vec![TimePointSpec {
                motion: Motion::IDENTITY,
                rot: 0.0,
                scale: 1.0,
                size: 1.0,
                gain: 1.0,
            }];
            for _ in 1..cfg.timepoints_per_view {
                let rot = rng
                    .gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
                    .to_radians();
                let scale = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
                let tx = rng.gen_range(-cfg.max_translation_px..=cfg.max_translation_px);
                let ty = rng.gen_range(-cfg.max_translation_px..=cfg.max_translation_px);
                specs.push(TimePointSpec {
                    motion: Motion::about(c, c, rot, scale, tx, ty),
                    rot,
                    scale,
                    size: 1.0 + rng.gen_range(-cfg.size_drift..=cfg.size_drift),
                    gain: 1.0 + rng.gen_range(-cfg.intensity_drift..=cfg.intensity_drift),
                });
            }

            // Acceptance: the t0 envelope sits inside the breast
            // support; every time point's box stays inside the image.
            let bb0 = base.tight_box();
            let corners_inside_support = [
                (bb0.cx - bb0.w / 2.0, bb0.cy - bb0.h / 2.0),
                (bb0.cx + bb0.w / 2.0, bb0.cy - bb0.h / 2.0),
                (bb0.cx - bb0.w / 2.0, bb0.cy + bb0.h / 2.0),
                (bb0.cx + bb0.w / 2.0, bb0.cy + bb0.h / 2.0),
            ]
            .iter()
            .all(|&(x, y)| background.inside(x, y, 0.92));
            let all_in_image = specs.iter().all(|tp| {
                let app = base.transformed(&tp.motion, tp.rot, tp.scale, tp.size, tp.gain);
                let bb = app.tight_box();
                bb.cx - bb.w / 2.0 >= margin
                    && bb.cy - bb.h / 2.0 >= margin
                    && bb.cx + bb.w / 2.0 <= size - margin
                    && bb.cy + bb.h / 2.0 <= size - margin
            });
            if corners_inside_support && all_in_image {
                placed = Some((base, specs));
                break;
            }
        }
        let (base, specs) = placed.ok_or(Error::PlacementFailed(case_idx))?;

        let mut timepoints = Vec::with_capacity(specs.len());
        for (k, tp) in specs.iter().enumerate() {
            let app = base.transformed(&tp.motion, tp.rot, tp.scale, tp.size, tp.gain);
            let inv = tp.motion.inverse();
            let img = Image::from_fn(cfg.image_px, cfg.image_px, |x, y| {
                let (sx, sy) = inv.apply(x, y);
                (background.value(sx, sy) + app.value(x, y)).clamp(0.0, 1.0)
            })?;
            let name = format!("{case_id}_v{view_idx}_t{k}.pgm");
            img.write_pgm(&out_dir.join(&name))?;
            timepoints.push(TimePoint {
                index: k as i64,
                image: name,
                lesion_box: app.tight_box(),
            });
        }
        views.push(View {
            view_id: format!("v{view_idx}"),
            timepoints,
        });
    }
    Ok(CaseManifest {
        id: case_id,
        lesion_type,
        views,
    })
}

/// Generate the full dataset sequentially; cases are independent and
/// callers may instead invoke [`synth_generate_case`] per case in
/// parallel.
pub fn synth_generate(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let cases = (0..cfg.num_cases)
        .map(|i| synth_generate_case(cfg, seed, i, out_dir))
        .collect::<Result<Vec<_>>>()?;
    Ok(Manifest {
        spacing_mm: cfg.spacing_mm,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            image_px: 128,
            spacing_mm: 0.28,
            num_cases: 2,
            lesion_extent_mm: (4.0, 8.0),
            max_translation_px: 10.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = synth_generate(&small_cfg(), 7, d1.path()).unwrap();
        let m2 = synth_generate(&small_cfg(), 7, d2.path()).unwrap();
        assert_eq!(m1, m2);
        for case in &m1.cases {
            for view in &case.views {
                for tp in &view.timepoints {
                    let b1 = std::fs::read(d1.path().join(&tp.image)).unwrap();
                    let b2 = std::fs::read(d2.path().join(&tp.image)).unwrap();
                    assert_eq!(b1, b2, "{}", tp.image);
                }
            }
        }
    }

    #[test]
    fn distinct_seeds_differ() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = synth_generate(&small_cfg(), 7, d1.path()).unwrap();
        let m2 = synth_generate(&small_cfg(), 8, d2.path()).unwrap();
        let i1 = &m1.cases[0].views[0].timepoints[0].image;
        let i2 = &m2.cases[0].views[0].timepoints[0].image;
        assert_ne!(
            std::fs::read(d1.path().join(i1)).unwrap(),
            std::fs::read(d2.path().join(i2)).unwrap()
        );
    }

    #[test]
    fn zero_motion_zero_drift_gives_identical_timepoints() {
        let cfg = SynthConfig {
            max_translation_px: 0.0,
            max_rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            size_drift: 0.0,
            intensity_drift: 0.0,
            ..small_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(&cfg, 3, dir.path()).unwrap();
        let view = &m.cases[0].views[0];
        assert_eq!(view.timepoints[0].lesion_box, view.timepoints[1].lesion_box);
        let b0 = std::fs::read(dir.path().join(&view.timepoints[0].image)).unwrap();
        let b1 = std::fs::read(dir.path().join(&view.timepoints[1].image)).unwrap();
        assert_eq!(b0, b1);
    }

    #[test]
    fn translation_only_shifts_gt_and_content_together() {
        let cfg = SynthConfig {
            max_translation_px: 20.0,
            max_rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            size_drift: 0.0,
            intensity_drift: 0.0,
            num_cases: 1,
            ..small_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(&cfg, 5, dir.path()).unwrap();
        let view = &m.cases[0].views[0];
        let (b0, b1) = (view.timepoints[0].lesion_box, view.timepoints[1].lesion_box);
        // Pure translation: extents unchanged exactly.
        assert_relative_eq!(b0.w, b1.w, epsilon = 1e-9);
        assert_relative_eq!(b0.h, b1.h, epsilon = 1e-9);
        let (dx, dy) = (b1.cx - b0.cx, b1.cy - b0.cy);
        assert!(dx.abs() <= 20.0 + 1e-9 && dy.abs() <= 20.0 + 1e-9);
        // Image content shifts by the same displacement.
        let i0 = Image::read_pgm(&dir.path().join(&view.timepoints[0].image)).unwrap();
        let i1 = Image::read_pgm(&dir.path().join(&view.timepoints[1].image)).unwrap();
        let mut err = 0.0;
        let mut n = 0.0;
        for i in (30..98).step_by(4) {
            for j in (30..98).step_by(4) {
                // Sample t1 at x and t0 at x - d (index coords).
                let v1 = i1.get(i, j);
                let v0 = i0.sample_bilinear(j as f64 - dx, i as f64 - dy);
                err += (v1 - v0).abs();
                n += 1.0;
            }
        }
        assert!(err / n < 0.02, "mean shift mismatch {}", err / n);
    }

    #[test]
    fn boxes_stay_inside_image() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_cases: 6,
            ..small_cfg()
        };
        let m = synth_generate(&cfg, 21, dir.path()).unwrap();
        for case in &m.cases {
            for view in &case.views {
                for tp in &view.timepoints {
                    let b = tp.lesion_box;
                    assert!(b.cx - b.w / 2.0 >= 0.0);
                    assert!(b.cy - b.h / 2.0 >= 0.0);
                    assert!(b.cx + b.w / 2.0 <= cfg.image_px as f64);
                    assert!(b.cy + b.h / 2.0 <= cfg.image_px as f64);
                }
            }
        }
    }

    #[test]
    fn mass_tight_box_matches_parametric_boundary_extremes() {
        let mass = Appearance::Mass {
            cx: 40.0,
            cy: 55.0,
            a: 10.0,
            b: 6.0,
            angle: 0.7,
            amp: 0.3,
        };
        let bb = mass.tight_box();
        // Scan the rho = 1 boundary; its extremes must meet the box
        // edges and never exceed them.
        let (s, c) = 0.7f64.sin_cos();
        let mut max_dx: f64 = 0.0;
        let mut max_dy: f64 = 0.0;
        for k in 0..20_000 {
            let t = std::f64::consts::TAU * k as f64 / 20_000.0;
            let (u, v) = (10.0 * t.cos(), 6.0 * t.sin());
            max_dx = max_dx.max((c * u - s * v).abs());
            max_dy = max_dy.max((s * u + c * v).abs());
        }
        assert_relative_eq!(bb.w / 2.0, max_dx, epsilon = 1e-6);
        assert_relative_eq!(bb.h / 2.0, max_dy, epsilon = 1e-6);
    }

    #[test]
    fn dot_cluster_box_is_tight_union_of_supports() {
        let dots = Appearance::Dots(vec![
            Dot {
                cx: 10.0,
                cy: 20.0,
                sigma: 1.0,
                amp: 0.5,
            },
            Dot {
                cx: 16.0,
                cy: 18.0,
                sigma: 0.5,
                amp: 0.4,
            },
        ]);
        let bb = dots.tight_box();
        // Each edge comes from whichever dot support reaches furthest:
        // left 10-3, right 16+1.5, top 18-1.5, bottom 20+3.
        assert_relative_eq!(bb.cx - bb.w / 2.0, 10.0 - 3.0);
        assert_relative_eq!(bb.cx + bb.w / 2.0, 16.0 + 1.5);
        assert_relative_eq!(bb.cy - bb.h / 2.0, 18.0 - 1.5);
        assert_relative_eq!(bb.cy + bb.h / 2.0, 20.0 + 3.0);
    }

    #[test]
    fn pure_translation_moves_tight_box_exactly() {
        let mass = Appearance::Mass {
            cx: 40.0,
            cy: 55.0,
            a: 10.0,
            b: 6.0,
            angle: 0.7,
            amp: 0.3,
        };
        let m = Motion::about(64.0, 64.0, 0.0, 1.0, 12.5, -7.25);
        let moved = mass.transformed(&m, 0.0, 1.0, 1.0, 1.0);
        let (b0, b1) = (mass.tight_box(), moved.tight_box());
        assert_relative_eq!(b1.cx, b0.cx + 12.5, epsilon = 1e-12);
        assert_relative_eq!(b1.cy, b0.cy - 7.25, epsilon = 1e-12);
        assert_relative_eq!(b1.w, b0.w, epsilon = 1e-12);
        assert_relative_eq!(b1.h, b0.h, epsilon = 1e-12);
    }

    #[test]
    fn mass_center_outshines_image_corner() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_cases: 8,
            mass_fraction: 1.0,
            ..small_cfg()
        };
        let m = synth_generate(&cfg, 13, dir.path()).unwrap();
        for case in &m.cases {
            for view in &case.views {
                for tp in &view.timepoints {
                    let img = Image::read_pgm(&dir.path().join(&tp.image)).unwrap();
                    let b = tp.lesion_box;
                    // Brightest pixel adjacent to the analytic peak.
                    let (pr, pc) = ((b.cy - 0.5).round() as i64, (b.cx - 0.5).round() as i64);
                    let mut center: f64 = 0.0;
                    for dr in -1..=1 {
                        for dc in -1..=1 {
                            let r = (pr + dr).clamp(0, img.height() as i64 - 1) as usize;
                            let c = (pc + dc).clamp(0, img.width() as i64 - 1) as usize;
                            center = center.max(img.get(r, c));
                        }
                    }
                    // Image corners lie outside the soft support and
                    // are near zero; a mass peak adds >= 0.18 on top
                    // of the background there.
                    let corner = img.get(0, 0).max(img.get(0, img.width() - 1));
                    assert!(
                        center > corner + 0.1,
                        "case {} tp {}: center {center:.3} corner {corner:.3}",
                        case.id,
                        tp.index
                    );
                }
            }
        }
    }

    #[test]
    fn mass_and_calcification_both_occur() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_cases: 12,
            mass_fraction: 0.5,
            ..small_cfg()
        };
        let m = synth_generate(&cfg, 2, dir.path()).unwrap();
        let masses = m
            .cases
            .iter()
            .filter(|c| c.lesion_type == LesionType::Mass)
            .count();
        assert!(masses > 0 && masses < 12);
    }
}
