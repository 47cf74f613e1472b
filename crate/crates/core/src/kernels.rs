//! Raw loops for the heavier tensor operators, shared by the forward and
//! backward passes of the tape.
//!
//! Image tensors are laid out `[batch, channels, height, width]`.

use crate::scalar::{Scalar, Strided, StridedMut};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Output index range `[lo, hi)` along one axis for kernel offset `kk`,
    /// restricted to positions whose input index lands inside `0..len`.
    fn valid(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // need o*s + off in [0, len)
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_excl = {
            let top = len as isize - 1 - off;
            if top < 0 {
                0
            } else {
                (top / s + 1).min(out_len as isize)
            }
        };
        let lo = lo.max(0) as usize;
        let hi = hi_excl.max(0) as usize;
        (lo, hi.max(lo))
    }
}

/// Unfolds one sample `[c_in, h, w]` into patch rows `[c_in*k*k, oh*ow]`,
/// zero where the kernel overhangs the padding.
fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], col: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.k {
            let (ilo, ihi) = g.valid(ki, g.h, oh);
            for kj in 0..g.k {
                let (jlo, jhi) = g.valid(kj, g.w, ow);
                let row = &mut col[((c * g.k + ki) * g.k + kj) * p..][..p];
                row[..ilo * ow].fill(S::zero());
                row[ihi * ow..].fill(S::zero());
                for oi in ilo..ihi {
                    let ii = oi * g.stride + ki - g.pad;
                    let src = &plane[ii * g.w..][..g.w];
                    let dst = &mut row[oi * ow..][..ow];
                    dst[..jlo].fill(S::zero());
                    dst[jhi..].fill(S::zero());
                    if jlo == jhi {
                        continue;
                    }
                    let start = jlo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst[jlo..jhi].copy_from_slice(&src[start..start + (jhi - jlo)]);
                    } else {
                        for (d, &v) in dst[jlo..jhi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Inverse scatter of [`im2col`], accumulating into `x`.
fn col2im<S: Scalar>(g: &ConvGeom, col: &[S], x: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.k {
            let (ilo, ihi) = g.valid(ki, g.h, oh);
            for kj in 0..g.k {
                let (jlo, jhi) = g.valid(kj, g.w, ow);
                let row = &col[((c * g.k + ki) * g.k + kj) * p..][..p];
                if jlo == jhi {
                    continue;
                }
                let start = jlo * g.stride + kj - g.pad;
                for oi in ilo..ihi {
                    let ii = oi * g.stride + ki - g.pad;
                    let dst = &mut plane[ii * g.w..][..g.w];
                    let src = &row[oi * ow..][jlo..jhi];
                    for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(src) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    b: Option<&[S]>,
) -> Vec<S> {
    let p = g.out_h() * g.out_w();
    let r = g.c_in * g.k * g.k;
    let mut col = vec![S::zero(); r * p];
    let mut out = vec![S::zero(); g.n * g.c_out * p];
    for n in 0..g.n {
        im2col(g, &x[n * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w], &mut col);
        let dst = &mut out[n * g.c_out * p..][..g.c_out * p];
        if let Some(b) = b {
            for (plane, &bo) in dst.chunks_exact_mut(p).zip(b) {
                plane.iter_mut().for_each(|v| *v = bo);
            }
        }
        S::gemm(g.c_out, r, p, Strided(w, r, 1), Strided(&col, p, 1), S::one(), StridedMut(dst, p, 1));
    }
    out
}

/// Accumulates input, weight and bias gradients for a convolution.
pub(crate) fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    grad_out: &[S],
    mut grad_x: Option<&mut [S]>,
    mut grad_w: Option<&mut [S]>,
    grad_b: Option<&mut [S]>,
) {
    let p = g.out_h() * g.out_w();
    let r = g.c_in * g.k * g.k;
    let per_in = g.c_in * g.h * g.w;
    if let Some(gb) = grad_b {
        for n in 0..g.n {
            for (o, gbo) in gb.iter_mut().enumerate() {
                let gp = &grad_out[(n * g.c_out + o) * p..][..p];
                *gbo = *gbo + gp.iter().copied().sum::<S>();
            }
        }
    }
    let mut col = vec![S::zero(); r * p];
    let mut gcol = vec![S::zero(); r * p];
    for n in 0..g.n {
        let gout = &grad_out[n * g.c_out * p..][..g.c_out * p];
        if let Some(gw) = grad_w.as_deref_mut() {
            im2col(g, &x[n * per_in..][..per_in], &mut col);
            // gw[o, r] += sum_p gout[o, p] col[r, p]
            S::gemm(g.c_out, p, r, Strided(gout, p, 1), Strided(&col, 1, p), S::one(), StridedMut(gw, r, 1));
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            // gcol[r, p] = sum_o w[o, r] gout[o, p]
            S::gemm(r, g.c_out, p, Strided(w, 1, r), Strided(gout, p, 1), S::zero(), StridedMut(&mut gcol, p, 1));
            col2im(g, &gcol, &mut gx[n * per_in..][..per_in]);
        }
    }
}

/// `out[n, o] = sum_i w[o, i] x[n, i] + b[o]`.
pub(crate) fn dense_forward<S: Scalar>(
    n: usize,
    inp: usize,
    outp: usize,
    x: &[S],
    w: &[S],
    b: Option<&[S]>,
) -> Vec<S> {
    let mut out = Vec::with_capacity(n * outp);
    for row in x.chunks_exact(inp) {
        for o in 0..outp {
            let wr = &w[o * inp..][..inp];
            let mut acc: S = wr.iter().zip(row).map(|(&a, &b)| a * b).sum();
            if let Some(b) = b {
                acc = acc + b[o];
            }
            out.push(acc);
        }
    }
    out
}
