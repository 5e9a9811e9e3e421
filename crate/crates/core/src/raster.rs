//! Binary and RGB rasters used throughout the dataset and evaluation code.
//!
//! Coordinates are `(x, y)` = `(column, row)`, with the center of pixel
//! `(x, y)` at the integer point `(x, y)`.

use serde::{Deserialize, Serialize};

pub type Rgb = [u8; 3];

/// Binary raster, bit-packed row-major (bit `i` of the stream is pixel
/// `(i % width, i / width)`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x <= self.x1 as f64 && y >= self.y0 as f64 && y <= self.y1 as f64
    }
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            words: vec![0; (width * height).div_ceil(64)],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask data length");
        let mut m = Self::new(width, height);
        for (i, b) in data.into_iter().enumerate() {
            if b {
                m.words[i >> 6] |= 1 << (i & 63);
            }
        }
        m
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Pixels in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.width * self.height).map(move |i| self.words[i >> 6] >> (i & 63) & 1 == 1)
    }

    /// Coordinates of set pixels in row-major order.
    pub fn ones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.words.iter().enumerate().flat_map(move |(wi, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let i = wi * 64 + b;
                Some((i % w, i / w))
            })
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        debug_assert!(x < self.width && y < self.height);
        let i = y * self.width + x;
        self.words[i >> 6] >> (i & 63) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        debug_assert!(x < self.width && y < self.height);
        let i = y * self.width + x;
        if v {
            self.words[i >> 6] |= 1 << (i & 63);
        } else {
            self.words[i >> 6] &= !(1 << (i & 63));
        }
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn same_dims(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Pixelwise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_dims(other) && self.words.iter().zip(&other.words).all(|(&a, &b)| a & !b == 0)
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        assert!(self.same_dims(other));
        self.words
            .iter()
            .zip(&other.words)
            .map(|(&a, &b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_count(&self, other: &Mask) -> usize {
        assert!(self.same_dims(other));
        self.words
            .iter()
            .zip(&other.words)
            .map(|(&a, &b)| (a | b).count_ones() as usize)
            .sum()
    }

    /// `self` with every pixel of `other` cleared.
    pub fn minus(&self, other: &Mask) -> Mask {
        assert!(self.same_dims(other));
        Mask {
            width: self.width,
            height: self.height,
            words: self.words.iter().zip(&other.words).map(|(&a, &b)| a & !b).collect(),
        }
    }

    pub fn union_with(&mut self, other: &Mask) {
        assert!(self.same_dims(other));
        for (a, &b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.words.iter().zip(&other.words).any(|(&a, &b)| a & b != 0)
    }

    pub fn bbox(&self) -> Option<BBox> {
        let mut bb: Option<BBox> = None;
        for (x, y) in self.ones() {
            bb = Some(match bb {
                None => BBox {
                    x0: x,
                    y0: y,
                    x1: x,
                    y1: y,
                },
                Some(b) => BBox {
                    x0: b.x0.min(x),
                    y0: b.y0.min(y),
                    x1: b.x1.max(x),
                    y1: b.y1.max(y),
                },
            });
        }
        bb
    }

    /// Mean `(x, y)` of the set pixels, `None` when empty.
    pub fn center_of_mass(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
        for (x, y) in self.ones() {
            sx += x as f64;
            sy += y as f64;
            n += 1;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// The sub-raster covered by the bounding box (empty mask stays as is).
    pub fn tight_crop(&self) -> Mask {
        match self.bbox() {
            None => self.clone(),
            Some(b) => Mask::from_fn(b.width(), b.height(), |x, y| self.get(b.x0 + x, b.y0 + y)),
        }
    }

    /// Row-major bits, most significant bit first within each byte.
    pub fn pack_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; (self.width * self.height).div_ceil(8)];
        for (i, b) in self.iter().enumerate() {
            if b {
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out
    }

    pub fn unpack_bits(width: usize, height: usize, bytes: &[u8]) -> Option<Mask> {
        let n = width * height;
        if bytes.len() != n.div_ceil(8) {
            return None;
        }
        let data = (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        Some(Mask::from_vec(width, height, data))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbRaster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbRaster {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3, "rgb data length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Paints `color` wherever `mask` is set. Dimensions must agree.
    pub fn paint(&mut self, mask: &Mask, color: Rgb) {
        assert!(mask.width() == self.width && mask.height() == self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if mask.get(x, y) {
                    self.set(x, y, color);
                }
            }
        }
    }

    /// Pixels whose color equals `color` exactly.
    pub fn color_mask(&self, color: Rgb) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| self.get(x, y) == color)
    }

    /// Channel-last floats in [0, 1].
    pub fn to_unit_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }

    /// White where `mask` is set, black elsewhere.
    pub fn from_mask(mask: &Mask) -> Self {
        let mut out = Self::filled(mask.width(), mask.height(), [0, 0, 0]);
        out.paint(mask, [255, 255, 255]);
        out
    }
}

/// Top-left corner of a `size`×`size` window centred on `center` (rounded to
/// the nearest integer) and clamped to lie inside a `frame`×`frame` raster.
pub fn clamped_window(center: (f64, f64), size: usize, frame: usize) -> (usize, usize) {
    let half = (size / 2) as i64;
    let max0 = (frame - size) as i64;
    let cx = center.0.round() as i64;
    let cy = center.1.round() as i64;
    (
        (cx - half).clamp(0, max0) as usize,
        (cy - half).clamp(0, max0) as usize,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn com_and_bbox() {
        let mut m = Mask::new(10, 10);
        m.set(2, 3, true);
        m.set(4, 3, true);
        assert_eq!(m.center_of_mass(), Some((3.0, 3.0)));
        let b = m.bbox().unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (2, 3, 4, 3));
        assert_eq!(m.tight_crop().width(), 3);
        assert!(Mask::new(4, 4).center_of_mass().is_none());
    }

    #[test]
    fn bit_packing_96() {
        let m = Mask::from_fn(96, 96, |x, y| (x * 7 + y * 3) % 5 == 0);
        let bytes = m.pack_bits();
        assert_eq!(bytes.len(), 1152);
        assert_eq!(Mask::unpack_bits(96, 96, &bytes).unwrap(), m);
    }

    #[test]
    fn window_clamps_at_borders() {
        assert_eq!(clamped_window((50.0, 50.0), 32, 96), (34, 34));
        assert_eq!(clamped_window((0.0, 0.0), 32, 96), (0, 0));
        assert_eq!(clamped_window((95.0, 95.0), 32, 96), (64, 64));
    }
}
