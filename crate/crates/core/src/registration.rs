//! Global search: intensity-based affine registration.
//!
//! Estimates an affine transform aligning a template image to a
//! search image by minimizing a smoothed mean absolute intensity
//! difference on a multi-resolution pyramid, then maps the template
//! lesion box into search-image coordinates.
//!
//! Transforms act on pixel **index** coordinates (pixel centers at
//! integers). [`warp`] performs backward warping: output pixel `u`
//! samples the source at `T^{-1}(u)`, so `T` is the forward motion of
//! image content.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::image::Image;

const SINGULAR_DET_EPS: f64 = 1e-12;

/// 2-D affine transform `x' = A x + t` on index coordinates, with the
/// translation expressed in full-resolution pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        a11: 1.0,
        a12: 0.0,
        a21: 0.0,
        a22: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn translation(tx: f64, ty: f64) -> Self {
        AffineTransform {
            tx,
            ty,
            ..Self::IDENTITY
        }
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        AffineTransform {
            a11: sx,
            a22: sy,
            ..Self::IDENTITY
        }
    }

    /// Rotation by `angle_rad` about the point `(cx, cy)`.
    pub fn rotation_about(angle_rad: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = angle_rad.sin_cos();
        AffineTransform {
            a11: c,
            a12: -s,
            a21: s,
            a22: c,
            tx: cx - c * cx + s * cy,
            ty: cy - s * cx - c * cy,
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a11 * x + self.a12 * y + self.tx,
            self.a21 * x + self.a22 * y + self.ty,
        )
    }

    pub fn determinant(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        AffineTransform {
            a11: self.a11 * other.a11 + self.a12 * other.a21,
            a12: self.a11 * other.a12 + self.a12 * other.a22,
            a21: self.a21 * other.a11 + self.a22 * other.a21,
            a22: self.a21 * other.a12 + self.a22 * other.a22,
            tx: self.a11 * other.tx + self.a12 * other.ty + self.tx,
            ty: self.a21 * other.tx + self.a22 * other.ty + self.ty,
        }
    }

    pub fn invert(&self) -> Result<AffineTransform> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < SINGULAR_DET_EPS {
            return Err(Error::SingularTransform(det));
        }
        let (i11, i12, i21, i22) = (
            self.a22 / det,
            -self.a12 / det,
            -self.a21 / det,
            self.a11 / det,
        );
        Ok(AffineTransform {
            a11: i11,
            a12: i12,
            a21: i21,
            a22: i22,
            tx: -(i11 * self.tx + i12 * self.ty),
            ty: -(i21 * self.tx + i22 * self.ty),
        })
    }

    /// Rotation angle (radians) extracted from the polar decomposition
    /// of the linear part.
    pub fn rotation_angle(&self) -> f64 {
        (self.a21 - self.a12).atan2(self.a11 + self.a22)
    }
}

/// Backward-warp `img` by `t`: output pixel `u` (index coordinates)
/// samples the source at `t^{-1}(u)`; samples outside the source read
/// as zero.
pub fn warp(img: &Image, t: &AffineTransform) -> Result<Image> {
    let inv = t.invert()?;
    let (w, h) = (img.width(), img.height());
    let mut out = Image::new(w, h)?.with_spacing(img.spacing_mm())?;
    for i in 0..h {
        for j in 0..w {
            let (sx, sy) = inv.apply(j as f64, i as f64);
            out.set(i, j, img.sample_bilinear(sx, sy));
        }
    }
    Ok(out)
}

/// Map a lesion box through the transform: the center is transformed
/// exactly; width and height scale by the column norms of the linear
/// part (axis-aligned approximation).
pub fn map_box(t: &AffineTransform, b: &BoundingBox) -> Result<BoundingBox> {
    b.validate()?;
    let det = t.determinant();
    if !det.is_finite() || det.abs() < SINGULAR_DET_EPS {
        return Err(Error::SingularTransform(det));
    }
    // Box coordinates are continuous (pixel center at j + 0.5); the
    // transform acts on index coordinates (center at j).
    let (cx, cy) = t.apply(b.cx - 0.5, b.cy - 0.5);
    let sx = (t.a11 * t.a11 + t.a21 * t.a21).sqrt();
    let sy = (t.a12 * t.a12 + t.a22 * t.a22).sqrt();
    BoundingBox::new(cx + 0.5, cy + 0.5, b.w * sx, b.h * sy, b.frame)
}

/// Multi-resolution optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    /// Downsampling factors per pyramid level, coarse to fine. The
    /// last entry is the level the reported objective refers to.
    pub levels: Vec<usize>,
    /// Iteration cap per level.
    pub max_iterations: usize,
    /// A level stops when the relative objective decrease over
    /// `patience` iterations falls below this.
    pub tolerance: f64,
    pub patience: usize,
    /// Smoothing of |x| as sqrt(x^2 + epsilon^2).
    pub epsilon: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: vec![32, 16, 8],
            max_iterations: 200,
            tolerance: 1e-5,
            patience: 5,
            epsilon: 1e-3,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("registration levels must be nonempty".into()));
        }
        if self.levels.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "registration levels must be ordered coarse to fine".into(),
            ));
        }
        if self.levels.iter().any(|&f| f == 0) {
            return Err(Error::InvalidFactor(0));
        }
        if self.max_iterations == 0 || self.patience == 0 {
            return Err(Error::Config(
                "registration iteration counts must be positive".into(),
            ));
        }
        if !(self.tolerance > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config(
                "registration tolerance and epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of [`register`].
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Estimated forward transform at full resolution.
    pub transform: AffineTransform,
    /// Final objective on the finest configured level.
    pub objective: f64,
    /// Set when optimization hit a non-finite objective and the
    /// identity transform was returned instead.
    pub fell_back_to_identity: bool,
    /// Accepted objective values, coarse level first; nonincreasing
    /// within each level.
    pub trace: Vec<f64>,
}

// Sampling map optimized internally: u_fixed -> u_moving in level
// coordinates, parametrized about the grid center c as
// M(u) = A (u - c) + c + t so that translation and linear part are
// decoupled.
#[derive(Clone, Copy)]
struct CenteredMap {
    a: [f64; 4],
    t: [f64; 2],
    c: [f64; 2],
}

impl CenteredMap {
    fn to_affine(self) -> AffineTransform {
        let [a11, a12, a21, a22] = self.a;
        let [cx, cy] = self.c;
        AffineTransform {
            a11,
            a12,
            a21,
            a22,
            tx: cx + self.t[0] - (a11 * cx + a12 * cy),
            ty: cy + self.t[1] - (a21 * cx + a22 * cy),
        }
    }

    fn from_affine(t: &AffineTransform, c: [f64; 2]) -> Self {
        let (mx, my) = t.apply(c[0], c[1]);
        CenteredMap {
            a: [t.a11, t.a12, t.a21, t.a22],
            t: [mx - c[0], my - c[1]],
            c,
        }
    }
}

/// Level-`f` index coordinates -> full-resolution index coordinates:
/// pixel centers of a block-mean pyramid relate by `u = f*v + (f-1)/2`.
fn level_to_full(f: usize) -> AffineTransform {
    let f = f as f64;
    let off = (f - 1.0) / 2.0;
    AffineTransform {
        a11: f,
        a12: 0.0,
        a21: 0.0,
        a22: f,
        tx: off,
        ty: off,
    }
}

/// Smoothed-L1 objective of a sampling map on one pyramid level, and
/// its gradient with respect to the centered parameters.
fn objective_and_grad(
    template: &Image,
    search: &Image,
    m: &CenteredMap,
    eps: f64,
    want_grad: bool,
) -> (f64, [f64; 6]) {
    let (w, h) = (search.width(), search.height());
    let n = (w * h) as f64;
    let e2 = eps * eps;
    let mut obj = 0.0;
    let mut grad = [0.0f64; 6];
    for i in 0..h {
        for j in 0..w {
            let ux = j as f64 - m.c[0];
            let uy = i as f64 - m.c[1];
            let sx = m.a[0] * ux + m.a[1] * uy + m.c[0] + m.t[0];
            let sy = m.a[2] * ux + m.a[3] * uy + m.c[1] + m.t[1];
            let v = template.sample_bilinear(sx, sy);
            let r = v - search.get(i, j);
            let s = (r * r + e2).sqrt();
            obj += s;
            if want_grad {
                let dr = r / s;
                let (gx, gy) = bilinear_grad(template, sx, sy);
                let px = dr * gx;
                let py = dr * gy;
                grad[0] += px * ux;
                grad[1] += px * uy;
                grad[2] += py * ux;
                grad[3] += py * uy;
                grad[4] += px;
                grad[5] += py;
            }
        }
    }
    for g in &mut grad {
        *g /= n;
    }
    (obj / n, grad)
}

/// Spatial gradient of the bilinear interpolant at an index-coordinate
/// position, with out-of-range neighbours reading zero.
fn bilinear_grad(img: &Image, x: f64, y: f64) -> (f64, f64) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (c0, r0) = (x0 as i64, y0 as i64);
    let at = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= img.height() as i64 || c >= img.width() as i64 {
            0.0
        } else {
            img.get(r as usize, c as usize)
        }
    };
    let v00 = at(r0, c0);
    let v01 = at(r0, c0 + 1);
    let v10 = at(r0 + 1, c0);
    let v11 = at(r0 + 1, c0 + 1);
    (
        (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy,
        (v10 - v00) * (1.0 - fx) + (v11 - v01) * fx,
    )
}

/// Estimate the affine transform aligning `template` to `search`.
///
/// Gradient descent with backtracking line search runs per pyramid
/// level on the six affine parameters of the inverse sampling map; the
/// returned forward transform is its inverse, expressed at full
/// resolution. The returned objective never exceeds the identity
/// transform's objective on the finest level.
pub fn register(
    template: &Image,
    search: &Image,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    if (template.spacing_mm() - search.spacing_mm()).abs() > 1e-9 {
        return Err(Error::SpacingMismatch(
            template.spacing_mm(),
            search.spacing_mm(),
        ));
    }

    // Pyramids, coarse to fine.
    let mut tmpl_levels = Vec::with_capacity(cfg.levels.len());
    let mut srch_levels = Vec::with_capacity(cfg.levels.len());
    for &f in &cfg.levels {
        tmpl_levels.push(template.downsample_block_mean(f)?);
        srch_levels.push(search.downsample_block_mean(f)?);
    }

    let mut trace = Vec::new();
    let mut fell_back = false;
    // Full-resolution sampling map carried between levels.
    let mut m_full = AffineTransform::IDENTITY;

    for (li, &f) in cfg.levels.iter().enumerate() {
        let tmpl = &tmpl_levels[li];
        let srch = &srch_levels[li];
        let phi = level_to_full(f);
        let phi_inv = phi.invert()?;
        let c = [
            (srch.width() as f64 - 1.0) / 2.0,
            (srch.height() as f64 - 1.0) / 2.0,
        ];
        let m_level = phi_inv.compose(&m_full).compose(&phi);
        let mut m = CenteredMap::from_affine(&m_level, c);

        // Equalize parameter sensitivities: a unit change of a linear
        // coefficient moves points by ~half the grid extent.
        let span = 0.5 * (srch.width().max(srch.height()) as f64).max(1.0);
        let precond = [
            1.0 / (span * span),
            1.0 / (span * span),
            1.0 / (span * span),
            1.0 / (span * span),
            1.0,
            1.0,
        ];

        let (mut obj, mut grad) = objective_and_grad(tmpl, srch, &m, cfg.epsilon, true);
        if !obj.is_finite() {
            fell_back = true;
            break;
        }
        trace.push(obj);
        let mut step = 1.0f64;
        let mut recent: Vec<f64> = vec![obj];

        for _ in 0..cfg.max_iterations {
            // Directional derivative along the preconditioned
            // negative gradient.
            let mut dd = 0.0;
            for k in 0..6 {
                dd += grad[k] * grad[k] * precond[k];
            }
            if dd <= 0.0 || !dd.is_finite() {
                break;
            }

            let mut accepted = false;
            let mut alpha = step;
            for _ in 0..40 {
                let mut cand = m;
                for k in 0..4 {
                    cand.a[k] -= alpha * precond[k] * grad[k];
                }
                cand.t[0] -= alpha * precond[4] * grad[4];
                cand.t[1] -= alpha * precond[5] * grad[5];
                let (cand_obj, _) = objective_and_grad(tmpl, srch, &cand, cfg.epsilon, false);
                if cand_obj.is_finite() && cand_obj <= obj - 1e-4 * alpha * dd {
                    m = cand;
                    obj = cand_obj;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
            step = (alpha * 2.0).min(1e3);
            trace.push(obj);
            recent.push(obj);
            if recent.len() > cfg.patience + 1 {
                recent.remove(0);
            }
            if recent.len() == cfg.patience + 1 {
                let past = recent[0];
                if past - obj < cfg.tolerance * past.abs().max(1e-12) {
                    break;
                }
            }
            let g = objective_and_grad(tmpl, srch, &m, cfg.epsilon, true);
            grad = g.1;
            if !g.0.is_finite() {
                fell_back = true;
                break;
            }
        }
        if fell_back {
            break;
        }
        m_full = phi.compose(&m.to_affine()).compose(&phi_inv);
    }

    // Evaluate on the finest level and enforce "never worse than
    // identity" there.
    let finest = cfg.levels.len() - 1;
    let f = cfg.levels[finest];
    let tmpl = &tmpl_levels[finest];
    let srch = &srch_levels[finest];
    let c = [
        (srch.width() as f64 - 1.0) / 2.0,
        (srch.height() as f64 - 1.0) / 2.0,
    ];
    let phi = level_to_full(f);
    let phi_inv = phi.invert()?;
    let eval_full = |mf: &AffineTransform| -> f64 {
        let m_level = phi_inv.compose(mf).compose(&phi);
        objective_and_grad(tmpl, srch, &CenteredMap::from_affine(&m_level, c), cfg.epsilon, false)
            .0
    };
    let ident_obj = eval_full(&AffineTransform::IDENTITY);
    let mut final_obj = if fell_back {
        f64::INFINITY
    } else {
        eval_full(&m_full)
    };
    if !final_obj.is_finite() || final_obj > ident_obj || m_full.invert().is_err() {
        if !final_obj.is_finite() {
            fell_back = true;
        }
        m_full = AffineTransform::IDENTITY;
        final_obj = ident_obj;
    }

    Ok(RegistrationResult {
        transform: m_full.invert()?,
        objective: final_obj,
        fell_back_to_identity: fell_back,
        trace,
    })
}
