//! RGB image buffers and pixel-level operations: HSV conversion, the four
//! photometric adjustments (brightness / contrast / saturation / hue), and
//! geometric resampling (flip / bilinear resize / crop / pad).
//!
//! Every op quantizes with round-half-up then clamps to [0, 255], so results
//! are bit-exact across platforms. Resize uses half-pixel sample centers,
//! which makes same-size resize an exact identity.

use crate::mask::{sample_axis, Rect};
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("crop rect {rect:?} does not fit inside a {height}x{width} image")]
    InvalidRect { height: u32, width: u32, rect: Rect },
    #[error("invalid target extent {height}x{width}: {reason}")]
    InvalidTarget { height: u32, width: u32, reason: &'static str },
    #[error("cannot open {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot encode/decode {path}: {source}")]
    Codec { path: String, source: image::ImageError },
}

/// 8-bit RGB image, row-major interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    height: u32,
    width: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageBuffer({}x{})", self.height, self.width)
    }
}

impl ImageBuffer {
    /// All-black image. Panics on a zero-sized extent.
    pub fn new(height: u32, width: u32) -> Self {
        assert!(height >= 1 && width >= 1, "image extent must be at least 1x1");
        ImageBuffer { height, width, data: vec![0; (height * width * 3) as usize] }
    }

    pub fn from_vec(height: u32, width: u32, data: Vec<u8>) -> Self {
        assert!(height >= 1 && width >= 1, "image extent must be at least 1x1");
        assert_eq!(data.len(), (height * width * 3) as usize, "image data length mismatch");
        ImageBuffer { height, width, data }
    }

    /// Builds an image by evaluating `f(y, x)` at every pixel.
    pub fn from_fn(height: u32, width: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut img = ImageBuffer::new(height, width);
        for y in 0..height {
            for x in 0..width {
                img.set(y, x, f(y, x));
            }
        }
        img
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    /// Row-major interleaved RGB bytes.
    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: u32, x: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: u32, x: u32, px: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// Mirrors columns.
    pub fn hflip(&self) -> ImageBuffer {
        let mut out = ImageBuffer::new(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Bilinear resize with half-pixel sample centers. Rows are computed in
    /// parallel; per-pixel arithmetic is independent of scheduling, so the
    /// result is byte-identical to a sequential pass.
    pub fn resize(&self, height: u32, width: u32) -> Result<ImageBuffer, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::InvalidTarget { height, width, reason: "zero extent" });
        }
        let xs: Vec<(u32, u32, f64)> =
            (0..width).map(|ox| sample_axis(ox, self.width, width)).collect();
        let mut data = vec![0u8; (height * width * 3) as usize];
        data.par_chunks_mut((width * 3) as usize).enumerate().for_each(|(oy, row)| {
            let (y0, y1, fy) = sample_axis(oy as u32, self.height, height);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let p00 = self.get(y0, x0);
                let p01 = self.get(y0, x1);
                let p10 = self.get(y1, x0);
                let p11 = self.get(y1, x1);
                for c in 0..3 {
                    let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                    let bot = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                    row[ox * 3 + c] = quantize(top * (1.0 - fy) + bot * fy);
                }
            }
        });
        Ok(ImageBuffer { height, width, data })
    }

    /// Extracts `rect`, which must lie inside the image.
    pub fn crop(&self, rect: Rect) -> Result<ImageBuffer, ImageError> {
        let fits = rect.width >= 1
            && rect.height >= 1
            && rect.x.checked_add(rect.width).is_some_and(|r| r <= self.width)
            && rect.y.checked_add(rect.height).is_some_and(|b| b <= self.height);
        if !fits {
            return Err(ImageError::InvalidRect { height: self.height, width: self.width, rect });
        }
        let mut out = ImageBuffer::new(rect.height, rect.width);
        for y in 0..rect.height {
            let src = (((rect.y + y) * self.width + rect.x) * 3) as usize;
            let dst = ((y * rect.width) * 3) as usize;
            let n = (rect.width * 3) as usize;
            out.data[dst..dst + n].copy_from_slice(&self.data[src..src + n]);
        }
        Ok(out)
    }

    /// Grows the canvas to `height`×`width`, filling new right/bottom pixels
    /// with `fill`.
    pub fn pad(&self, height: u32, width: u32, fill: [u8; 3]) -> Result<ImageBuffer, ImageError> {
        if height < self.height || width < self.width {
            return Err(ImageError::InvalidTarget { height, width, reason: "smaller than input" });
        }
        let mut out = ImageBuffer::from_fn(height, width, |_, _| fill);
        for y in 0..self.height {
            let src = ((y * self.width) * 3) as usize;
            let dst = ((y * width) * 3) as usize;
            let n = (self.width * 3) as usize;
            out.data[dst..dst + n].copy_from_slice(&self.data[src..src + n]);
        }
        Ok(out)
    }
}

/// Round half-up, then clamp to the 8-bit range.
#[inline]
fn quantize(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Hexcone RGB→HSV: h in degrees [0, 360), s in [0, 1], v in [0, 255].
pub fn rgb_to_hsv(px: [u8; 3]) -> (f64, f64, f64) {
    let r = px[0] as f64;
    let g = px[1] as f64;
    let b = px[2] as f64;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    let h = if delta == 0.0 {
        0.0
    } else {
        let h = if max == r {
            (g - b) / delta
        } else if max == g {
            (b - r) / delta + 2.0
        } else {
            (r - g) / delta + 4.0
        } * 60.0;
        h.rem_euclid(360.0)
    };
    (h, s, v)
}

/// Inverse of [`rgb_to_hsv`] with 8-bit quantization of the result.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [quantize(r1 + m), quantize(g1 + m), quantize(b1 + m)]
}

/// One photometric adjustment. Brightness is additive in 8-bit units,
/// contrast and saturation are multiplicative factors, hue is additive in
/// degrees (mod 360).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Photometric {
    Brightness(f64),
    Contrast(f64),
    Saturation(f64),
    Hue(f64),
}

/// Applies `op` to every pixel.
pub fn photometric_adjust(img: &ImageBuffer, op: Photometric) -> ImageBuffer {
    let mut out = img.clone();
    match op {
        Photometric::Brightness(delta) => {
            for byte in &mut out.data {
                *byte = quantize(*byte as f64 + delta);
            }
        }
        Photometric::Contrast(factor) => {
            for byte in &mut out.data {
                *byte = quantize(*byte as f64 * factor);
            }
        }
        Photometric::Saturation(factor) => {
            for px in out.data.chunks_exact_mut(3) {
                let (h, s, v) = rgb_to_hsv([px[0], px[1], px[2]]);
                px.copy_from_slice(&hsv_to_rgb(h, (s * factor).clamp(0.0, 1.0), v));
            }
        }
        Photometric::Hue(delta) => {
            for px in out.data.chunks_exact_mut(3) {
                let (h, s, v) = rgb_to_hsv([px[0], px[1], px[2]]);
                px.copy_from_slice(&hsv_to_rgb(h + delta, s, v));
            }
        }
    }
    out
}

/// Decodes a PNG (or any format `image` recognizes) into an RGB buffer.
pub fn read_png(path: &Path) -> Result<ImageBuffer, ImageError> {
    let reader = image::ImageReader::open(path)
        .map_err(|source| ImageError::Io { path: path.display().to_string(), source })?;
    let decoded = reader
        .decode()
        .map_err(|source| ImageError::Codec { path: path.display().to_string(), source })?
        .to_rgb8();
    Ok(ImageBuffer::from_vec(decoded.height(), decoded.width(), decoded.into_raw()))
}

/// Encodes the buffer as a PNG at `path`.
pub fn write_png(img: &ImageBuffer, path: &Path) -> Result<(), ImageError> {
    let rgb = image::RgbImage::from_raw(img.width, img.height, img.data.clone())
        .expect("buffer length matches extent by construction");
    rgb.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| ImageError::Codec { path: path.display().to_string(), source })
}
