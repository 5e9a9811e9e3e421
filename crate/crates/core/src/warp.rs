//! Affine resampling of binary glyph bitmaps.
//!
//! The source canvas is scaled to `width_px × height_px`, sheared along x,
//! then rotated, all about the canvas center, and finally translated so the
//! canvas center lands on the destination point. Destination pixels are
//! inverse-mapped into the source, sampled bilinearly (outside = 0) and
//! thresholded at 0.5.
//!
//! When the map shrinks the source by more than one source pixel per
//! destination pixel, each destination pixel is probed on a `k × k` grid of
//! sub-pixel points (`k` = source pixels per destination pixel, rounded up)
//! and becomes ink if any probe does. At unit or larger scale `k = 1` and
//! the single probe sits on the pixel center. This keeps thin pen strokes
//! connected at 16 px scales.

use crate::raster::Mask;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphAffine {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub width_px: f64,
    pub height_px: f64,
}

impl GlyphAffine {
    pub fn scale_only(width_px: f64, height_px: f64) -> Self {
        Self {
            rotation_deg: 0.0,
            shear_deg: 0.0,
            width_px,
            height_px,
        }
    }
}

type Mat2 = [[f64; 2]; 2];

/// Forward linear part `R(θ) · Shear(φ) · Scale` for a `src_w × src_h` canvas.
pub fn forward_matrix(src_w: usize, src_h: usize, a: &GlyphAffine) -> Mat2 {
    let sx = a.width_px / src_w as f64;
    let sy = a.height_px / src_h as f64;
    let t = a.shear_deg.to_radians().tan();
    let (sin, cos) = a.rotation_deg.to_radians().sin_cos();
    // Shear · Scale = [[sx, t*sy], [0, sy]]
    let hs = [[sx, t * sy], [0.0, sy]];
    [
        [cos * hs[0][0] - sin * hs[1][0], cos * hs[0][1] - sin * hs[1][1]],
        [sin * hs[0][0] + cos * hs[1][0], sin * hs[0][1] + cos * hs[1][1]],
    ]
}

fn invert(m: &Mat2) -> Mat2 {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ]
}

pub fn canvas_center(w: usize, h: usize) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

#[inline]
fn bilinear(src: &Mask, qx: f64, qy: f64) -> f64 {
    let x0 = qx.floor();
    let y0 = qy.floor();
    let fx = qx - x0;
    let fy = qy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= src.width() as i64 || y >= src.height() as i64 {
            0.0
        } else if src.get(x as usize, y as usize) {
            1.0
        } else {
            0.0
        }
    };
    (1.0 - fx) * (1.0 - fy) * at(x0, y0)
        + fx * (1.0 - fy) * at(x0 + 1, y0)
        + (1.0 - fx) * fy * at(x0, y0 + 1)
        + fx * fy * at(x0 + 1, y0 + 1)
}

/// Destination pixels that receive ink, in unbounded integer coordinates
/// (row-major order).
pub fn warp_ink(src: &Mask, a: &GlyphAffine, dst_center: (f64, f64)) -> Vec<(i64, i64)> {
    let Some(bb) = src.bbox() else {
        return Vec::new();
    };
    let m = forward_matrix(src.width(), src.height(), a);
    let inv = invert(&m);
    let c = canvas_center(src.width(), src.height());
    let fwd = |x: f64, y: f64| {
        let (dx, dy) = (x - c.0, y - c.1);
        (
            dst_center.0 + m[0][0] * dx + m[0][1] * dy,
            dst_center.1 + m[1][0] * dx + m[1][1] * dy,
        )
    };
    let corners = [
        fwd(bb.x0 as f64 - 1.0, bb.y0 as f64 - 1.0),
        fwd(bb.x1 as f64 + 1.0, bb.y0 as f64 - 1.0),
        fwd(bb.x0 as f64 - 1.0, bb.y1 as f64 + 1.0),
        fwd(bb.x1 as f64 + 1.0, bb.y1 as f64 + 1.0),
    ];
    let min_x = corners.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor() as i64 - 1;
    let max_x = corners.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil() as i64 + 1;
    let min_y = corners.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor() as i64 - 1;
    let max_y = corners.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil() as i64 + 1;

    let k = probes_per_axis(&inv);
    let offsets: Vec<f64> = (0..k).map(|i| (i as f64 + 0.5) / k as f64 - 0.5).collect();
    let mut out = Vec::new();
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            let hit = offsets.iter().any(|&oy| {
                offsets.iter().any(|&ox| {
                    let (dx, dy) = (x as f64 + ox - dst_center.0, y as f64 + oy - dst_center.1);
                    let qx = c.0 + inv[0][0] * dx + inv[0][1] * dy;
                    let qy = c.1 + inv[1][0] * dx + inv[1][1] * dy;
                    bilinear(src, qx, qy) >= 0.5
                })
            });
            if hit {
                out.push((x, y));
            }
        }
    }
    out
}

/// Source pixels spanned by one destination pixel along its longest axis.
fn probes_per_axis(inv: &Mat2) -> usize {
    let col = |j: usize| (inv[0][j] * inv[0][j] + inv[1][j] * inv[1][j]).sqrt();
    let stretch = col(0).max(col(1));
    (stretch - 1e-9).ceil().max(1.0) as usize
}

/// Warps `src` into a `dst_w × dst_h` raster. Returns the raster and whether
/// any ink fell outside it.
pub fn warp_into(
    src: &Mask,
    a: &GlyphAffine,
    dst_center: (f64, f64),
    dst_w: usize,
    dst_h: usize,
) -> (Mask, bool) {
    let mut out = Mask::new(dst_w, dst_h);
    let mut clipped = false;
    for (x, y) in warp_ink(src, a, dst_center) {
        if x >= 0 && y >= 0 && (x as usize) < dst_w && (y as usize) < dst_h {
            out.set(x as usize, y as usize, true);
        } else {
            clipped = true;
        }
    }
    (out, clipped)
}

/// Warps `src` and crops tightly around the resulting ink.
pub fn warp_tight(src: &Mask, a: &GlyphAffine) -> Mask {
    let ink = warp_ink(src, a, (0.0, 0.0));
    if ink.is_empty() {
        return Mask::new(0, 0);
    }
    let x0 = ink.iter().map(|p| p.0).min().unwrap();
    let x1 = ink.iter().map(|p| p.0).max().unwrap();
    let y0 = ink.iter().map(|p| p.1).min().unwrap();
    let y1 = ink.iter().map(|p| p.1).max().unwrap();
    let mut out = Mask::new((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
    for (x, y) in ink {
        out.set((x - x0) as usize, (y - y0) as usize, true);
    }
    out
}
