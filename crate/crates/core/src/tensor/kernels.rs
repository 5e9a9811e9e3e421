//! Raw NHWC kernels on flat slices. The graph layer handles shapes and
//! bookkeeping; these functions only compute.

use rayon::prelude::*;

/// Zero padding before the first row/column for a "same" convolution.
/// Even kernels pad only after (bottom/right).
pub fn pad_before(k: usize, dilation: usize) -> usize {
    dilation * (k - 1) / 2
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub dilation: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn kdim(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

/// `col[(y*w + x), (ky*kw + kx)*cin + c] = x[y + ky*d - pt, x + kx*d - pl, c]`.
fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let (pt, pl) = (pad_before(g.kh, g.dilation), pad_before(g.kw, g.dilation));
    let kdim = g.kdim();
    for y in 0..g.h {
        for xx in 0..g.w {
            let row = &mut col[(y * g.w + xx) * kdim..(y * g.w + xx + 1) * kdim];
            for ky in 0..g.kh {
                let sy = (y + ky * g.dilation) as isize - pt as isize;
                for kx in 0..g.kw {
                    let sx = (xx + kx * g.dilation) as isize - pl as isize;
                    let dst = &mut row[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                    if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                        dst.fill(0.0);
                    } else {
                        let s = (sy as usize * g.w + sx as usize) * g.cin;
                        dst.copy_from_slice(&x[s..s + g.cin]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `col` back into `dx`.
fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (pt, pl) = (pad_before(g.kh, g.dilation), pad_before(g.kw, g.dilation));
    let kdim = g.kdim();
    for y in 0..g.h {
        for xx in 0..g.w {
            let row = &col[(y * g.w + xx) * kdim..(y * g.w + xx + 1) * kdim];
            for ky in 0..g.kh {
                let sy = (y + ky * g.dilation) as isize - pt as isize;
                if sy < 0 || sy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let sx = (xx + kx * g.dilation) as isize - pl as isize;
                    if sx < 0 || sx >= g.w as isize {
                        continue;
                    }
                    let s = (sy as usize * g.w + sx as usize) * g.cin;
                    let src = &row[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                    for (d, v) in dx[s..s + g.cin].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `c = alpha * a·b + beta * c` for row-major `a: m×k`, `b: k×n`, `c: m×n`
/// with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose lengths cover every strided index
    // of the m×k, k×n and m×n operands.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(x: &[f32], kernel: &[f32], bias: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (hw, kdim, cout) = (g.hw(), g.kdim(), g.cout);
    let mut out = vec![0.0f32; g.batch * hw * cout];
    out.par_chunks_mut(hw * cout)
        .enumerate()
        .for_each_init(Vec::new, |col, (b, o)| {
            for row in o.chunks_mut(cout) {
                row.copy_from_slice(bias);
            }
            let xs = &x[b * hw * g.cin..(b + 1) * hw * g.cin];
            let a: &[f32] = if g.is_pointwise() {
                xs
            } else {
                col.resize(hw * kdim, 0.0);
                im2col(xs, g, col);
                col
            };
            gemm(hw, kdim, cout, a, kdim as isize, 1, kernel, cout as isize, 1, 1.0, o);
        });
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dkernel: Option<Vec<f32>>,
    pub dbias: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    x: &[f32],
    kernel: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    need_dx: bool,
    need_dk: bool,
    need_db: bool,
) -> ConvGrads {
    let (hw, kdim, cout) = (g.hw(), g.kdim(), g.cout);
    let mut dx = need_dx.then(|| vec![0.0f32; x.len()]);
    let mut dk = need_dk.then(|| vec![0.0f32; kernel.len()]);
    let mut db = need_db.then(|| vec![0.0f32; cout]);
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    for b in 0..g.batch {
        let xs = &x[b * hw * g.cin..(b + 1) * hw * g.cin];
        let dys = &dy[b * hw * cout..(b + 1) * hw * cout];
        if let Some(db) = db.as_mut() {
            for row in dys.chunks(cout) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        if let Some(dk) = dk.as_mut() {
            let a: &[f32] = if g.is_pointwise() {
                xs
            } else {
                col.resize(hw * kdim, 0.0);
                im2col(xs, g, &mut col);
                &col
            };
            // dk (kdim×cout) += colᵀ (kdim×hw) · dy (hw×cout)
            gemm(kdim, hw, cout, a, 1, kdim as isize, dys, cout as isize, 1, 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[b * hw * g.cin..(b + 1) * hw * g.cin];
            if g.is_pointwise() {
                // dx (hw×cin) = dy (hw×cout) · kᵀ (cout×cin)
                gemm(hw, cout, kdim, dys, cout as isize, 1, kernel, 1, cout as isize, 0.0, dxs);
            } else {
                dcol.resize(hw * kdim, 0.0);
                gemm(hw, cout, kdim, dys, cout as isize, 1, kernel, 1, cout as isize, 0.0, &mut dcol);
                col2im(&dcol, g, dxs);
            }
        }
    }
    ConvGrads {
        dx,
        dkernel: dk,
        dbias: db,
    }
}

pub fn avg_pool2_forward(x: &[f32], b: usize, h: usize, w: usize, c: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; b * oh * ow * c];
    for n in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                let o = ((n * oh + y) * ow + xx) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((n * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                    for ch in 0..c {
                        out[o + ch] += x[s + ch];
                    }
                }
                for v in &mut out[o..o + c] {
                    *v *= 0.25;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &[f32], b: usize, h: usize, w: usize, c: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0f32; b * h * w * c];
    for n in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                let o = ((n * oh + y) * ow + xx) * c;
                for (dy_, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((n * h + 2 * y + dy_) * w + 2 * xx + dx_) * c;
                    for ch in 0..c {
                        dx[s + ch] = 0.25 * dy[o + ch];
                    }
                }
            }
        }
    }
    dx
}

pub fn upsample2_forward(x: &[f32], b: usize, h: usize, w: usize, c: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; b * oh * ow * c];
    for n in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                let s = ((n * h + y / 2) * w + xx / 2) * c;
                let o = ((n * oh + y) * ow + xx) * c;
                out[o..o + c].copy_from_slice(&x[s..s + c]);
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &[f32], b: usize, h: usize, w: usize, c: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0f32; b * h * w * c];
    for n in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                let s = ((n * h + y / 2) * w + xx / 2) * c;
                let o = ((n * oh + y) * ow + xx) * c;
                for ch in 0..c {
                    dx[s + ch] += dy[o + ch];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &[f32], k: &[f32], g: &ConvGeom) -> Vec<f32> {
        let (pt, pl) = (pad_before(g.kh, g.dilation) as isize, pad_before(g.kw, g.dilation) as isize);
        let mut out = vec![0.0; g.batch * g.h * g.w * g.cout];
        for b in 0..g.batch {
            for y in 0..g.h as isize {
                for xx in 0..g.w as isize {
                    for co in 0..g.cout {
                        let mut acc = 0.0f64;
                        for ky in 0..g.kh as isize {
                            for kx in 0..g.kw as isize {
                                let sy = y + ky * g.dilation as isize - pt;
                                let sx = xx + kx * g.dilation as isize - pl;
                                if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                                    continue;
                                }
                                for ci in 0..g.cin {
                                    let xv = x[((b * g.h + sy as usize) * g.w + sx as usize) * g.cin + ci];
                                    let kv = k[((ky as usize * g.kw + kx as usize) * g.cin + ci) * g.cout + co];
                                    acc += xv as f64 * kv as f64;
                                }
                            }
                        }
                        out[((b * g.h + y as usize) * g.w + xx as usize) * g.cout + co] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_summation() {
        for (kh, kw, d) in [(3, 3, 1), (3, 3, 2), (2, 2, 1), (1, 1, 1)] {
            let g = ConvGeom {
                batch: 2,
                h: 5,
                w: 6,
                cin: 3,
                kh,
                kw,
                cout: 4,
                dilation: d,
            };
            let x: Vec<f32> = (0..2 * 5 * 6 * 3).map(|i| ((i * 37 % 11) as f32 - 5.0) / 5.0).collect();
            let k: Vec<f32> = (0..kh * kw * 3 * 4).map(|i| ((i * 13 % 7) as f32 - 3.0) / 3.0).collect();
            let got = conv2d_forward(&x, &k, &[0.0; 4], &g);
            let want = direct_conv(&x, &k, &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-5, "k{kh}x{kw} d{d}: {a} vs {b}");
            }
        }
    }
}
