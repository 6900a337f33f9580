//! Slice-level numeric kernels behind the tape operations.
//!
//! Every output row is produced by one sequential loop, so results do not
//! depend on how many rayon workers split the rows.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::strides_of;

const PAR_MIN_WORK: usize = 1 << 15;

/// `a[m×k] · b[k×p]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    let mut out = vec![T::zero(); m * p];
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bv;
            }
        }
    };
    if m * k * p >= PAR_MIN_WORK && m > 1 {
        out.par_chunks_mut(p).enumerate().for_each(row);
    } else {
        out.chunks_mut(p).enumerate().for_each(row);
    }
    out
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Materialized axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

/// Inverse of a permutation vector.
pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Splits `shape` around `axis` into (outer, extent, inner) loop counts.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    if inner == 1 {
        let rows = |(src, dst): (&[T], &mut [T])| softmax_row(src, dst);
        if x.len() >= PAR_MIN_WORK {
            x.par_chunks(n).zip(out.par_chunks_mut(n)).for_each(rows);
        } else {
            x.chunks(n).zip(out.chunks_mut(n)).for_each(rows);
        }
        return out;
    }
    let mut buf_in = vec![T::zero(); n];
    let mut buf_out = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for j in 0..n {
                buf_in[j] = x[base + j * inner];
            }
            softmax_row(&buf_in, &mut buf_out);
            for j in 0..n {
                out[base + j * inner] = buf_out[j];
            }
        }
    }
    out
}

fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total = total + *d;
    }
    for d in dst.iter_mut() {
        *d = *d / total;
    }
}

/// `dx = y ⊙ (dy − Σ dy⊙y)` along `axis`.
pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = T::zero();
            for j in 0..n {
                let at = base + j * inner;
                dot = dot + dy[at] * y[at];
            }
            for j in 0..n {
                let at = base + j * inner;
                dx[at] = y[at] * (dy[at] - dot);
            }
        }
    }
    dx
}

/// Geometry of a square-kernel 2-D convolution with symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Unfolds `x[C×H×W]` into `(C·k·k) × (H_out·W_out)` columns.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = vec![T::zero(); g.patch_len() * oh * ow];
    for c in 0..g.c_in {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = x[(c * g.h + iy as usize) * g.w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let at = (c * g.h + iy as usize) * g.w + ix as usize;
                        x[at] = x[at] + src[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_expanded() {
        let z = matmul(&[1.0f64, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(z, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_large_matches_serial_bitwise() {
        let (m, k, p) = (64, 33, 70);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 101) as f32).sin()).collect();
        let b: Vec<f32> = (0..k * p).map(|i| ((i * 11 % 97) as f32).cos()).collect();
        let par = matmul(&a, &b, m, k, p);
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| matmul(&a, &b, m, k, p));
        assert_eq!(par, single);
    }

    #[test]
    fn permute_3d() {
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (y, shape) = permute(&x, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(shape, vec![4, 2, 3]);
        // y[k, i, j] = x[i, j, k]
        assert_eq!(y[(3 * 2 + 1) * 3 + 2], x[(3 + 2) * 4 + 3]);
        let (back, _) = permute(&y, &shape, &inverse_perm(&[2, 0, 1]));
        assert_eq!(back, x);
    }

    #[test]
    fn conv_geometry() {
        let g = ConvGeom {
            c_in: 3,
            h: 32,
            w: 32,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!((g.out_h(), g.out_w()), (16, 16));
    }
}
