//! Grayscale image buffer with bilinear sampling, cropping/resampling
//! helpers, and 16-bit binary PGM (P5) reading and writing.
//!
//! Pixel values are `f64` in `[0, 1]`. Two coordinate conventions are
//! used and explicitly named:
//!
//! * **index coordinates**: the center of pixel `(i, j)` is at
//!   `(x, y) = (j, i)`; this is what [`Image::sample_bilinear`] takes.
//! * **continuous coordinates**: pixel `(i, j)` covers the unit square
//!   `[j, j+1) x [i, i+1)`, so its center is at `(j + 0.5, i + 0.5)`
//!   and the image spans `[0, W] x [0, H]`. Boxes and crop geometry
//!   use this convention; the two differ by an offset of `0.5`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale image with a physical pixel spacing.
///
/// The spacing is carried alongside the buffer (PGM files do not
/// store it; dataset manifests do) and defaults to 1 mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    spacing_mm: f64,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ImageTooSmall);
        }
        Ok(Image {
            width,
            height,
            spacing_mm: 1.0,
            data: vec![0.0; width * height],
        })
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ImageTooSmall);
        }
        if data.len() != width * height {
            return Err(Error::LengthMismatch {
                what: "image data",
                got: data.len(),
                expected: width * height,
            });
        }
        Ok(Image {
            width,
            height,
            spacing_mm: 1.0,
            data,
        })
    }

    pub fn with_spacing(mut self, spacing_mm: f64) -> Result<Self> {
        if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
            return Err(Error::InvalidSpacing(spacing_mm));
        }
        self.spacing_mm = spacing_mm;
        Ok(self)
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    /// Build an image by evaluating `f(x, y)` at every pixel center in
    /// continuous coordinates.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        let mut img = Image::new(width, height)?;
        for i in 0..height {
            for j in 0..width {
                img.data[i * width + j] = f(j as f64 + 0.5, i as f64 + 0.5);
            }
        }
        Ok(img)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    #[inline]
    fn at_or_zero(&self, row: i64, col: i64) -> f64 {
        if row < 0 || col < 0 || row >= self.height as i64 || col >= self.width as i64 {
            0.0
        } else {
            self.data[row as usize * self.width + col as usize]
        }
    }

    /// Bilinear sample in index coordinates; neighbours outside the
    /// image contribute zero.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (c0, r0) = (x0 as i64, y0 as i64);
        let v00 = self.at_or_zero(r0, c0);
        let v01 = self.at_or_zero(r0, c0 + 1);
        let v10 = self.at_or_zero(r0 + 1, c0);
        let v11 = self.at_or_zero(r0 + 1, c0 + 1);
        v00 * (1.0 - fx) * (1.0 - fy)
            + v01 * fx * (1.0 - fy)
            + v10 * (1.0 - fx) * fy
            + v11 * fx * fy
    }

    /// Extract a square window of side `size` (continuous units)
    /// centered at `(center_x, center_y)` (continuous coordinates) and
    /// resample it to `out_px` x `out_px`. Output pixel `(i, j)`
    /// samples the source at the center of its footprint:
    /// `origin + (j + 0.5) * size / out_px` where
    /// `origin = center - size / 2`. Regions outside the source read
    /// as zero.
    pub fn crop_and_resize(
        &self,
        center_x: f64,
        center_y: f64,
        size: f64,
        out_px: usize,
    ) -> Result<Image> {
        if out_px == 0 {
            return Err(Error::ImageTooSmall);
        }
        if !(size.is_finite() && size > 0.0) || !center_x.is_finite() || !center_y.is_finite() {
            return Err(Error::NonFiniteBox);
        }
        let step = size / out_px as f64;
        let ox = center_x - size / 2.0;
        let oy = center_y - size / 2.0;
        let mut out = Image::new(out_px, out_px)?;
        out.spacing_mm = self.spacing_mm * step;
        for i in 0..out_px {
            let sy = oy + (i as f64 + 0.5) * step;
            for j in 0..out_px {
                let sx = ox + (j as f64 + 0.5) * step;
                // Continuous -> index coordinates.
                out.data[i * out_px + j] = self.sample_bilinear(sx - 0.5, sy - 0.5);
            }
        }
        Ok(out)
    }

    /// Nearest-neighbor resize; each output pixel takes the source
    /// pixel containing its center. Used for binary masks, which
    /// bilinear resampling would smear.
    pub fn resize_nearest(&self, out_w: usize, out_h: usize) -> Result<Image> {
        if out_w == 0 || out_h == 0 {
            return Err(Error::ImageTooSmall);
        }
        let mut out = Image::new(out_w, out_h)?;
        out.spacing_mm = self.spacing_mm * self.width as f64 / out_w as f64;
        for i in 0..out_h {
            let si = ((i as f64 + 0.5) * self.height as f64 / out_h as f64) as usize;
            let si = si.min(self.height - 1);
            for j in 0..out_w {
                let sj = ((j as f64 + 0.5) * self.width as f64 / out_w as f64) as usize;
                let sj = sj.min(self.width - 1);
                out.data[i * out_w + j] = self.data[si * self.width + sj];
            }
        }
        Ok(out)
    }

    /// Downsample by averaging `factor` x `factor` blocks, truncating
    /// trailing rows/columns that do not fill a block. The pixel
    /// spacing grows by `factor`.
    pub fn downsample_block_mean(&self, factor: usize) -> Result<Image> {
        if factor == 0 {
            return Err(Error::InvalidFactor(0));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        if self.width < factor || self.height < factor {
            return Err(Error::ImageTooSmall);
        }
        let ow = self.width / factor;
        let oh = self.height / factor;
        let mut out = Image::new(ow, oh)?;
        out.spacing_mm = self.spacing_mm * factor as f64;
        let inv = 1.0 / (factor * factor) as f64;
        for bi in 0..oh {
            for bj in 0..ow {
                let mut sum = 0.0;
                for r in bi * factor..(bi + 1) * factor {
                    for c in bj * factor..(bj + 1) * factor {
                        sum += self.data[r * self.width + c];
                    }
                }
                out.data[bi * ow + bj] = sum * inv;
            }
        }
        Ok(out)
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Write as binary PGM (P5) with 16-bit big-endian samples.
    /// Values are clamped to `[0, 1]` and scaled to `[0, 65535]`.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = format!("P5\n{} {}\n65535\n", self.width, self.height);
        w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::with_capacity(self.data.len() * 2);
        for &v in &self.data {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf.extend_from_slice(&q.to_be_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Read a binary PGM (P5) with a 16-bit maxval, mapping samples
    /// linearly to `[0, 1]`.
    pub fn read_pgm(path: &Path) -> Result<Image> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

        let bad = |msg: &str| Error::ImageFormat {
            path: path.to_path_buf(),
            message: msg.to_string(),
        };
        let mut pos = 0usize;
        // Header tokens separated by whitespace; `#` starts a comment
        // running to end of line.
        let next_token = |bytes: &[u8], pos: &mut usize| -> Option<String> {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos > start {
                Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
            } else {
                None
            }
        };

        let magic = next_token(&bytes, &mut pos).ok_or_else(|| bad("truncated header"))?;
        if magic != "P5" {
            return Err(bad(&format!("expected P5 magic, found {magic:?}")));
        }
        let width: usize = next_token(&bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("invalid width"))?;
        let height: usize = next_token(&bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("invalid height"))?;
        let maxval: u32 = next_token(&bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("invalid maxval"))?;
        if !(256..=65535).contains(&maxval) {
            return Err(bad(&format!("expected a 16-bit maxval, found {maxval}")));
        }
        // Exactly one whitespace byte separates the header from data.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(bad("missing separator after maxval"));
        }
        pos += 1;

        let n = width
            .checked_mul(height)
            .ok_or_else(|| bad("image dimensions overflow"))?;
        let payload = &bytes[pos..];
        if payload.len() != n * 2 {
            return Err(bad(&format!(
                "expected {} payload bytes, found {}",
                n * 2,
                payload.len()
            )));
        }
        let scale = 1.0 / maxval as f64;
        let data: Vec<f64> = payload
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
            .collect();
        Image::from_vec(width, height, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bilinear_interior_and_exterior() {
        let img = Image::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        // At integer index coordinates the sample is the pixel value.
        assert_eq!(img.sample_bilinear(0.0, 0.0), 0.0);
        assert_eq!(img.sample_bilinear(1.0, 0.0), 1.0);
        assert_eq!(img.sample_bilinear(0.5, 0.5), 1.5);
        // Outside contributions read zero.
        assert_eq!(img.sample_bilinear(-0.5, 0.0), 0.0 * 0.5);
        assert_eq!(img.sample_bilinear(-2.0, -2.0), 0.0);
        assert_relative_eq!(img.sample_bilinear(1.5, 1.0), 3.0 * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn crop_identity_when_aligned() {
        let img = Image::from_fn(8, 8, |x, y| (x + 10.0 * y) / 100.0).unwrap();
        // A crop of side 4 centered at (4, 4) with 4 output pixels
        // reproduces the central 4x4 block exactly.
        let crop = img.crop_and_resize(4.0, 4.0, 4.0, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_relative_eq!(crop.get(i, j), img.get(i + 2, j + 2), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn crop_upsamples_with_interpolation() {
        let img = Image::from_fn(8, 8, |x, _| x / 8.0).unwrap();
        // Doubling resolution of a linear ramp keeps it linear.
        let crop = img.crop_and_resize(4.0, 4.0, 4.0, 8).unwrap();
        let step = crop.get(0, 2) - crop.get(0, 1);
        for j in 2..6 {
            assert_relative_eq!(
                crop.get(0, j) - crop.get(0, j - 1),
                step,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn crop_outside_reads_zero() {
        let img = Image::from_fn(4, 4, |_, _| 1.0).unwrap();
        let crop = img.crop_and_resize(-10.0, -10.0, 4.0, 4).unwrap();
        assert_eq!(crop.min_max(), (0.0, 0.0));
    }

    #[test]
    fn nearest_resize_keeps_binary_values() {
        let img = Image::from_vec(4, 4, {
            let mut d = vec![0.0; 16];
            for i in 1..3 {
                for j in 1..3 {
                    d[i * 4 + j] = 1.0;
                }
            }
            d
        })
        .unwrap();
        let up = img.resize_nearest(8, 8).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(up.data().iter().sum::<f64>(), 16.0);
        let down = img.resize_nearest(2, 2).unwrap();
        assert!(down.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn block_mean_downsample() {
        let img = Image::from_vec(4, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let half = img.downsample_block_mean(2).unwrap();
        assert_eq!(half.width(), 2);
        assert_eq!(half.height(), 1);
        assert_eq!(half.get(0, 0), (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(half.get(0, 1), (2.0 + 3.0 + 6.0 + 7.0) / 4.0);

        let tiny = Image::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let one = tiny.downsample_block_mean(2).unwrap();
        assert_eq!((one.width(), one.height()), (1, 1));
        assert_eq!(one.get(0, 0), 0.5);

        let same = img.downsample_block_mean(1).unwrap();
        assert_eq!(same, img);
    }

    #[test]
    fn block_mean_truncates_partial_blocks() {
        let img = Image::from_vec(3, 2, vec![0.0, 1.0, 5.0, 2.0, 1.0, 5.0]).unwrap();
        let half = img.downsample_block_mean(2).unwrap();
        assert_eq!((half.width(), half.height()), (1, 1));
        assert_eq!(half.get(0, 0), 1.0);
        assert!(matches!(
            img.downsample_block_mean(4),
            Err(Error::ImageTooSmall)
        ));
    }

    #[test]
    fn spacing_propagates() {
        let img = Image::from_fn(16, 16, |x, y| (x + y) / 32.0)
            .unwrap()
            .with_spacing(0.07)
            .unwrap();
        let down = img.downsample_block_mean(8).unwrap();
        assert_relative_eq!(down.spacing_mm(), 0.56, epsilon = 1e-12);
        assert_eq!((down.width(), down.height()), (2, 2));
        let crop = img.crop_and_resize(8.0, 8.0, 8.0, 16).unwrap();
        assert_relative_eq!(crop.spacing_mm(), 0.035, epsilon = 1e-12);
        assert!(Image::new(4, 4).unwrap().with_spacing(0.0).is_err());
    }

    #[test]
    fn pgm_round_trip_is_exact_on_grid_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        // Values on the 16-bit grid survive a round trip exactly.
        let img = Image::from_fn(5, 3, |x, y| {
            ((x as usize * 7 + y as usize * 13) % 65536) as f64 / 65535.0
        })
        .unwrap();
        img.write_pgm(&path).unwrap();
        let back = Image::read_pgm(&path).unwrap();
        assert_eq!(back.width(), 5);
        assert_eq!(back.height(), 3);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn pgm_quantization_error_is_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Image::from_fn(16, 16, |x, y| ((x * 0.37 + y * 0.61).sin() * 0.5 + 0.5)).unwrap();
        img.write_pgm(&path).unwrap();
        let back = Image::read_pgm(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_rejects_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p6 = dir.path().join("bad.pgm");
        std::fs::write(&p6, b"P6\n2 2\n255\n0000").unwrap();
        assert!(matches!(
            Image::read_pgm(&p6),
            Err(Error::ImageFormat { .. })
        ));
        let eight_bit = dir.path().join("bad8.pgm");
        std::fs::write(&eight_bit, b"P5\n2 2\n255\n\x00\x01\x02\x03").unwrap();
        assert!(matches!(
            Image::read_pgm(&eight_bit),
            Err(Error::ImageFormat { .. })
        ));
        let truncated = dir.path().join("trunc.pgm");
        std::fs::write(&truncated, b"P5\n2 2\n65535\n\x00\x01").unwrap();
        assert!(matches!(
            Image::read_pgm(&truncated),
            Err(Error::ImageFormat { .. })
        ));
        assert!(matches!(
            Image::read_pgm(&dir.path().join("missing.pgm")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(
            &path,
            b"P5 # comment\n# another\n2 1\n65535\n\x00\x00\xff\xff".as_slice(),
        )
        .unwrap();
        let img = Image::read_pgm(&path).unwrap();
        assert_eq!(img.get(0, 0), 0.0);
        assert_eq!(img.get(0, 1), 1.0);
    }
}
