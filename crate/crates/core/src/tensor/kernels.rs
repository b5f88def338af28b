//! Low-level numeric kernels. Convolution lowers to im2col + dgemm over
//! chunks of samples; all reductions run in a fixed order so results are reproducible.

use super::Tensor;
use crate::error::{Error, Result};

/// `c = a·b + beta·c` for strided row/column-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted extents keep every access inside the slices and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], b: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || w[1] != x[1] || w[2] != w[3] || b != [w[0]] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.iter().chain(b).copied().collect(),
            });
        }
        let (ho, wo) = match (
            conv_output_size(x[2], w[2], stride, pad),
            conv_output_size(x[3], w[3], stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::shape("conv2d (kernel does not fit / stride 0)", x, w)),
        };
        Ok(ConvGeom {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            k: w[2],
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.o, self.ho, self.wo]
    }
}

/// Column matrix of shape [C·K·K, N·Ho·Wo].
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.plane();
    let cols_w = g.n * p;
    let mut cols = vec![0.0; g.rows() * cols_w];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let row = &mut cols[r * cols_w..(r + 1) * cols_w];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut row[n * p + oy * g.wo..n * p + (oy + 1) * g.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.plane();
    let cols_w = g.n * p;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let row = &cols[r * cols_w..(r + 1) * cols_w];
                for n in 0..g.n {
                    let base = (n * g.c + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut dx[base + iy as usize * g.w..base + (iy as usize + 1) * g.w];
                        let src = &row[n * p + oy * g.wo..n * p + (oy + 1) * g.wo];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Samples per im2col chunk, keeping the column buffer near 2 MB so deep
/// layers with few output pixels still get a wide gemm.
fn chunk_len(g: &ConvGeom) -> usize {
    const TARGET: usize = 1 << 18;
    (TARGET / (g.rows() * g.plane())).clamp(1, g.n.max(1))
}

pub(crate) fn conv2d_raw(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.plane();
    let in_len = g.c * g.h * g.w;
    let chunk = chunk_len(g);
    let mut out = vec![0.0; g.n * g.o * p];
    let mut tmp = Vec::new();
    for n0 in (0..g.n).step_by(chunk) {
        let s = chunk.min(g.n - n0);
        let sub = ConvGeom { n: s, ..*g };
        let cols = im2col(&x[n0 * in_len..(n0 + s) * in_len], &sub);
        tmp.clear();
        tmp.resize(g.o * s * p, 0.0);
        gemm(g.o, g.rows(), s * p, w, g.rows(), 1, &cols, s * p, 1, 0.0, &mut tmp, s * p, 1);
        for i in 0..s {
            for o in 0..g.o {
                let dst = &mut out[((n0 + i) * g.o + o) * p..((n0 + i) * g.o + o + 1) * p];
                let src = &tmp[o * s * p + i * p..o * s * p + (i + 1) * p];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + b[o];
                }
            }
        }
    }
    out
}

/// Returns (dx, dw, db); dx only when `need_dx`. Contributions to dw and db
/// are accumulated chunk by chunk in sample order.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let p = g.plane();
    let rows = g.rows();
    let in_len = g.c * g.h * g.w;
    let chunk = chunk_len(g);
    let mut dw = vec![0.0; g.o * rows];
    let mut db = vec![0.0; g.o];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dyc = Vec::new();
    let mut dcols = Vec::new();
    for n0 in (0..g.n).step_by(chunk) {
        let s = chunk.min(g.n - n0);
        let sub = ConvGeom { n: s, ..*g };
        // gather dy into [O, s·P]
        dyc.clear();
        dyc.resize(g.o * s * p, 0.0);
        for i in 0..s {
            for o in 0..g.o {
                let src = &dy[((n0 + i) * g.o + o) * p..((n0 + i) * g.o + o + 1) * p];
                db[o] += src.iter().sum::<f64>();
                dyc[o * s * p + i * p..o * s * p + (i + 1) * p].copy_from_slice(src);
            }
        }
        let cols = im2col(&x[n0 * in_len..(n0 + s) * in_len], &sub);
        gemm(g.o, s * p, rows, &dyc, s * p, 1, &cols, 1, s * p, 1.0, &mut dw, rows, 1);
        if let Some(dx) = dx.as_mut() {
            dcols.clear();
            dcols.resize(rows * s * p, 0.0);
            gemm(rows, g.o, s * p, w, 1, rows, &dyc, s * p, 1, 0.0, &mut dcols, s * p, 1);
            col2im(&dcols, &sub, &mut dx[n0 * in_len..(n0 + s) * in_len]);
        }
    }
    (dx, dw, db)
}

/// Plain forward cross-correlation on NCHW input with OIKK weights.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), weight.shape(), bias.shape(), stride, pad)?;
    let out = conv2d_raw(input.data(), weight.data(), bias.data(), &g);
    Tensor::new(&g.out_shape(), out)
}

/// 2×2 max pooling with stride 2. Returns the output and the flat input index
/// of each selected maximum (first one wins on ties).
pub(crate) fn maxpool2x2_raw(x: &[f64], shape: &[usize]) -> Result<(Vec<f64>, Vec<usize>, [usize; 4])> {
    if shape.len() != 4 || !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
        return Err(Error::shape("maxpool2x2 (needs NCHW with even H, W)", shape, &[2, 2]));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((out, arg, [n, c, ho, wo]))
}

pub fn maxpool2x2_forward(input: &Tensor) -> Result<Tensor> {
    let (out, _, shape) = maxpool2x2_raw(input.data(), input.shape())?;
    Tensor::new(&shape, out)
}

/// y[N,Out] = x[N,In]·wᵀ + b with w stored [Out, In].
pub(crate) fn linear_raw(x: &[f64], w: &[f64], b: &[f64], n: usize, fin: usize, fout: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * fout);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    gemm(n, fin, fout, x, fin, 1, w, 1, fin, 1.0, &mut y, fout, 1);
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_arithmetic() {
        assert_eq!(conv_output_size(32, 3, 1, 1), Some(32));
        assert_eq!(conv_output_size(7, 3, 2, 0), Some(3));
        assert_eq!(conv_output_size(2, 5, 1, 1), None);
        assert_eq!(conv_output_size(8, 3, 0, 1), None);
    }

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, 3, 1, &b, 4, 1, 0.0, &mut c, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn maxpool_picks_max_and_rejects_odd() {
        let x = Tensor::new(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 2.0, 0.0]).unwrap();
        let y = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[5.0, 2.0]);
        let odd = Tensor::zeros(&[1, 1, 3, 4]);
        assert!(maxpool2x2_forward(&odd).is_err());
    }
}
