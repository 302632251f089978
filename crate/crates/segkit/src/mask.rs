//! Binary masks, bounding boxes, and the algebra between them: the COCO-style
//! run-length codec, IoU on masks and boxes, and the geometric transforms
//! (flip / resize / crop / pad) that the augmentation and TTA stages build on.
//!
//! Masks are stored row-major, one byte per pixel (0 or 1). The RLE
//! representation here keeps plain integer run counts in COCO column-major
//! order; the compressed string codec used by COCO JSON lives in [`crate::coco`].

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(u32, u32, u32, u32),
    #[error("RLE counts sum to {got}, expected {expected} for a {height}x{width} mask")]
    MalformedRle { height: u32, width: u32, expected: u64, got: u64 },
    #[error("crop rect {rect:?} does not fit inside a {height}x{width} mask")]
    InvalidRect { height: u32, width: u32, rect: Rect },
    #[error("invalid target extent {height}x{width}: {reason}")]
    InvalidTarget { height: u32, width: u32, reason: &'static str },
}

/// Axis-aligned integer rectangle in pixel coordinates (top-left origin).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// Dense binary mask, row-major, one byte per pixel, values 0/1.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: u32,
    width: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, area {})", self.height, self.width, self.area())
    }
}

impl BinaryMask {
    /// All-zero mask. Panics on a zero-sized extent.
    pub fn new(height: u32, width: u32) -> Self {
        assert!(height >= 1 && width >= 1, "mask extent must be at least 1x1");
        BinaryMask { height, width, data: vec![0; (height * width) as usize] }
    }

    /// Builds a mask from a row-major byte vector; values must be 0 or 1.
    pub fn from_vec(height: u32, width: u32, data: Vec<u8>) -> Self {
        assert!(height >= 1 && width >= 1, "mask extent must be at least 1x1");
        assert_eq!(data.len(), (height * width) as usize, "mask data length mismatch");
        assert!(data.iter().all(|&b| b <= 1), "mask bytes must be 0 or 1");
        BinaryMask { height, width, data }
    }

    /// Builds a mask by evaluating `f(y, x)` at every pixel.
    pub fn from_fn(height: u32, width: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = BinaryMask::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[(y * width + x) as usize] = f(y, x) as u8;
            }
        }
        m
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    /// Row-major pixel bytes (0/1).
    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: u32, x: u32) -> bool {
        self.data[(y * self.width + x) as usize] != 0
    }

    #[inline]
    pub fn set(&mut self, y: u32, x: u32, value: bool) {
        self.data[(y * self.width + x) as usize] = value as u8;
    }

    /// Foreground pixel count.
    pub fn area(&self) -> u64 {
        self.data.iter().map(|&b| b as u64).sum()
    }

    /// Sets every pixel of `rect` to foreground. The rect must fit.
    pub fn fill_rect(&mut self, rect: Rect) {
        assert!(rect.x + rect.width <= self.width && rect.y + rect.height <= self.height);
        for y in rect.y..rect.y + rect.height {
            let row = (y * self.width + rect.x) as usize;
            self.data[row..row + rect.width as usize].fill(1);
        }
    }

    /// In-place union with a mask of the same extent.
    pub fn union_with(&mut self, other: &BinaryMask) {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "union of differently sized masks"
        );
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    /// In-place subtraction: clears every pixel that is set in `other`.
    pub fn subtract(&mut self, other: &BinaryMask) {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "subtraction of differently sized masks"
        );
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a &= 1 - b;
        }
    }

    /// Tight bounding box of the foreground, or `None` for an empty mask.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (u32::MAX, u32::MAX, 0u32, 0u32);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    any = true;
                    min_x = min_x.min(x);
                    min_y = min_y.min(y);
                    max_x = max_x.max(x);
                    max_y = max_y.max(y);
                }
            }
        }
        any.then(|| BBox {
            x: min_x as f64,
            y: min_y as f64,
            w: (max_x - min_x + 1) as f64,
            h: (max_y - min_y + 1) as f64,
        })
    }

    /// Mirrors columns: output pixel (y, x) = input pixel (y, width−1−x).
    pub fn hflip(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    /// Bilinear resize of the {0,1} field with half-pixel sample centers,
    /// thresholded at 0.5 (ties count as foreground). Resizing to the same
    /// extent reproduces the input exactly.
    pub fn resize(&self, height: u32, width: u32) -> Result<BinaryMask, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::InvalidTarget { height, width, reason: "zero extent" });
        }
        let mut out = BinaryMask::new(height, width);
        for oy in 0..height {
            let (y0, y1, fy) = sample_axis(oy, self.height, height);
            for ox in 0..width {
                let (x0, x1, fx) = sample_axis(ox, self.width, width);
                let v00 = self.get(y0, x0) as u8 as f64;
                let v01 = self.get(y0, x1) as u8 as f64;
                let v10 = self.get(y1, x0) as u8 as f64;
                let v11 = self.get(y1, x1) as u8 as f64;
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                let v = top * (1.0 - fy) + bot * fy;
                out.set(oy, ox, v >= 0.5);
            }
        }
        Ok(out)
    }

    /// Extracts `rect`, which must lie inside the mask.
    pub fn crop(&self, rect: Rect) -> Result<BinaryMask, MaskError> {
        let fits = rect.width >= 1
            && rect.height >= 1
            && rect.x.checked_add(rect.width).is_some_and(|r| r <= self.width)
            && rect.y.checked_add(rect.height).is_some_and(|b| b <= self.height);
        if !fits {
            return Err(MaskError::InvalidRect { height: self.height, width: self.width, rect });
        }
        Ok(BinaryMask::from_fn(rect.height, rect.width, |y, x| {
            self.get(rect.y + y, rect.x + x)
        }))
    }

    /// Grows the mask to `height`×`width` by appending background pixels on
    /// the right and bottom. The target must be at least the current extent.
    pub fn pad(&self, height: u32, width: u32) -> Result<BinaryMask, MaskError> {
        if height < self.height || width < self.width {
            return Err(MaskError::InvalidTarget { height, width, reason: "smaller than input" });
        }
        let mut out = BinaryMask::new(height, width);
        for y in 0..self.height {
            let src = (y * self.width) as usize;
            let dst = (y * width) as usize;
            out.data[dst..dst + self.width as usize]
                .copy_from_slice(&self.data[src..src + self.width as usize]);
        }
        Ok(out)
    }
}

/// Bilinear source coordinates for output index `o` when mapping `n_in`
/// samples onto `n_out`, using half-pixel centers: src = (o+0.5)·n_in/n_out − 0.5,
/// clamped to the valid range. Returns (floor index, neighbor index, fraction).
pub(crate) fn sample_axis(o: u32, n_in: u32, n_out: u32) -> (u32, u32, f64) {
    let src = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    let src = src.clamp(0.0, (n_in - 1) as f64);
    let i0 = src.floor() as u32;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

/// Run-length encoded mask: COCO column-major order, first run counts zeros.
/// A zero count may appear only at index 0 (when the mask starts with
/// foreground); `sum(counts)` always equals `height × width`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u32>,
}

/// Encodes a mask as alternating column-major run lengths starting with the
/// zero run. `rle_decode` inverts this exactly.
pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = 0u8; // runs alternate starting from background
    let mut run = 0u32;
    for x in 0..mask.width {
        for y in 0..mask.height {
            let v = mask.get(y, x) as u8;
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    RleMask { height: mask.height, width: mask.width, counts }
}

/// Expands column-major run counts back into a dense mask.
pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask, MaskError> {
    let expected = rle.height as u64 * rle.width as u64;
    let got: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if got != expected {
        return Err(MaskError::MalformedRle { height: rle.height, width: rle.width, expected, got });
    }
    let mut mask = BinaryMask::new(rle.height, rle.width);
    let mut idx = 0u64; // column-major pixel index
    for (i, &count) in rle.counts.iter().enumerate() {
        let value = (i % 2) as u8; // even runs are background
        if value == 1 {
            for k in idx..idx + count as u64 {
                let x = (k / rle.height as u64) as u32;
                let y = (k % rle.height as u64) as u32;
                mask.set(y, x, true);
            }
        }
        idx += count as u64;
    }
    Ok(mask)
}

/// |a∩b| / |a∪b| by pixel counting; 0.0 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    if a.height != b.height || a.width != b.width {
        return Err(MaskError::ShapeMismatch(a.height, a.width, b.height, b.width));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&pa, &pb) in a.data.iter().zip(&b.data) {
        inter += (pa & pb) as u64;
        union += (pa | pb) as u64;
    }
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Axis-aligned box: top-left corner plus extent, all in (possibly fractional)
/// pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Mirror against an image of width `image_width`: x → W − x − w.
    pub fn hflip(&self, image_width: f64) -> BBox {
        BBox { x: image_width - self.x - self.w, ..*self }
    }

    /// Multiplies all four fields by `s`.
    pub fn scale(&self, s: f64) -> BBox {
        BBox { x: self.x * s, y: self.y * s, w: self.w * s, h: self.h * s }
    }

    /// Shifts the top-left corner by (dx, dy).
    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox { x: self.x + dx, y: self.y + dy, ..*self }
    }

    /// Intersects the box with the image rect [0,width]×[0,height]; the
    /// result may have zero area.
    pub fn clip(&self, height: f64, width: f64) -> BBox {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        BBox { x: x0, y: y0, w: (x1 - x0).max(0.0), h: (y1 - y0).max(0.0) }
    }
}

/// Intersection-over-union on box areas; 0.0 when the union is empty.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    let inter = ix.max(0.0) * iy.max(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
