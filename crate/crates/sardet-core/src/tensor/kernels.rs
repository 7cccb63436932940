//! Dense compute kernels behind the tape ops.
//!
//! Every kernel accumulates each output element in one fixed sequential
//! order, so repeated runs are bit-identical.

use crate::scalar::Scalar;

/// C[m,n] += A[m,k] * B[k,n] for one batch slice.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

/// dA[m,k] += dC[m,n] * B^T for one batch slice.
pub fn matmul_grad_a<T: Scalar>(g: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for (j, &gv) in g_row.iter().enumerate() {
            for p in 0..k {
                da_row[p] += gv * b[p * n + j];
            }
        }
    }
}

/// dB[k,n] += A^T * dC[m,n] for one batch slice.
pub fn matmul_grad_b<T: Scalar>(g: &[T], a: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let db_row = &mut db[p * n..(p + 1) * n];
            for j in 0..n {
                db_row[j] += av * g_row[j];
            }
        }
    }
}

/// Geometry of one conv2d call, with output extents validated elsewhere.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    /// Output-column range [lo, hi) whose input column ox*s + kx - pad stays in bounds.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride as i64;
        let off = kx as i64 - self.pad as i64;
        // ox*s + off in [0, w)
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((self.w as i64 - 1 - off) / s + 1).clamp(0, self.w_out as i64);
        (lo.min(self.w_out as i64) as usize, hi as usize)
    }

    fn iy(&self, oy: usize, ky: usize) -> Option<usize> {
        let v = (oy * self.stride + ky) as i64 - self.pad as i64;
        (v >= 0 && v < self.h as i64).then_some(v as usize)
    }
}

/// out[b,co,oy,ox] = sum_{ci,ky,kx} x[b,ci,iy,ix] * k[co,ci,ky,kx] (+ bias[co]).
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    kern: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
    d: &ConvDims,
) {
    let in_plane = d.h * d.w;
    let out_plane = d.h_out * d.w_out;
    for b in 0..d.batch {
        let x_img = &x[b * d.c_in * in_plane..(b + 1) * d.c_in * in_plane];
        for co in 0..d.c_out {
            let o_plane = &mut out
                [(b * d.c_out + co) * out_plane..(b * d.c_out + co + 1) * out_plane];
            if let Some(bv) = bias {
                o_plane.fill(bv[co]);
            }
            for ci in 0..d.c_in {
                let x_plane = &x_img[ci * in_plane..(ci + 1) * in_plane];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = kern[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                        let (lo, hi) = d.ox_range(kx);
                        for oy in 0..d.h_out {
                            let Some(iy) = d.iy(oy, ky) else { continue };
                            let x_row = &x_plane[iy * d.w..(iy + 1) * d.w];
                            let o_row = &mut o_plane[oy * d.w_out..(oy + 1) * d.w_out];
                            let off = kx as i64 - d.pad as i64;
                            for ox in lo..hi {
                                let ix = (ox * d.stride) as i64 + off;
                                o_row[ox] += wv * x_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dx accumulation for conv2d.
pub fn conv2d_grad_input<T: Scalar>(g: &[T], kern: &[T], dx: &mut [T], d: &ConvDims) {
    let in_plane = d.h * d.w;
    let out_plane = d.h_out * d.w_out;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let g_plane = &g[(b * d.c_out + co) * out_plane..(b * d.c_out + co + 1) * out_plane];
            for ci in 0..d.c_in {
                let dx_plane = &mut dx
                    [(b * d.c_in + ci) * in_plane..(b * d.c_in + ci + 1) * in_plane];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = kern[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                        let (lo, hi) = d.ox_range(kx);
                        let off = kx as i64 - d.pad as i64;
                        for oy in 0..d.h_out {
                            let Some(iy) = d.iy(oy, ky) else { continue };
                            let g_row = &g_plane[oy * d.w_out..(oy + 1) * d.w_out];
                            let dx_row = &mut dx_plane[iy * d.w..(iy + 1) * d.w];
                            for ox in lo..hi {
                                let ix = (ox * d.stride) as i64 + off;
                                dx_row[ix as usize] += wv * g_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dk and optional dbias accumulation for conv2d.
pub fn conv2d_grad_kernel<T: Scalar>(
    g: &[T],
    x: &[T],
    dk: &mut [T],
    mut dbias: Option<&mut [T]>,
    d: &ConvDims,
) {
    let in_plane = d.h * d.w;
    let out_plane = d.h_out * d.w_out;
    for b in 0..d.batch {
        let x_img = &x[b * d.c_in * in_plane..(b + 1) * d.c_in * in_plane];
        for co in 0..d.c_out {
            let g_plane = &g[(b * d.c_out + co) * out_plane..(b * d.c_out + co + 1) * out_plane];
            if let Some(db) = dbias.as_deref_mut() {
                let mut acc = T::ZERO;
                for &gv in g_plane {
                    acc += gv;
                }
                db[co] += acc;
            }
            for ci in 0..d.c_in {
                let x_plane = &x_img[ci * in_plane..(ci + 1) * in_plane];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let (lo, hi) = d.ox_range(kx);
                        let off = kx as i64 - d.pad as i64;
                        let mut acc = T::ZERO;
                        for oy in 0..d.h_out {
                            let Some(iy) = d.iy(oy, ky) else { continue };
                            let g_row = &g_plane[oy * d.w_out..(oy + 1) * d.w_out];
                            let x_row = &x_plane[iy * d.w..(iy + 1) * d.w];
                            for ox in lo..hi {
                                let ix = (ox * d.stride) as i64 + off;
                                acc += g_row[ox] * x_row[ix as usize];
                            }
                        }
                        dk[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx] += acc;
                    }
                }
            }
        }
    }
}
