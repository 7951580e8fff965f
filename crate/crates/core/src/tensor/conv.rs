//! im2col-backed 2-D cross-correlation kernels used by the tape's conv op.
//!
//! Every output element is produced by exactly one task and each inner loop
//! runs sequentially, so results are bit-identical for any thread count.

use rayon::prelude::*;

use super::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unpacks one sample into a `[c_in·k·k × h_out·w_out]` patch matrix.
fn im2col<F: Scalar>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let x_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let base = oh * g.w_out;
                    if ih < 0 || ih >= g.h as isize {
                        dst[base..base + g.w_out].fill(F::zero());
                        continue;
                    }
                    let src_row = &x_plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        dst[base + ow] = if iw < 0 || iw >= g.w as isize {
                            F::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatters a patch-matrix gradient back onto the input layout.
fn col2im_accumulate<F: Scalar>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let dx_plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let base = oh * g.w_out;
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        let idx = ih as usize * g.w + iw as usize;
                        dx_plane[idx] = dx_plane[idx] + src[base + ow];
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation; `out` is `[batch × c_out × h_out × w_out]`.
pub(crate) fn conv2d_forward<F: Scalar>(x: &[F], kernels: &[F], g: &ConvGeom, out: &mut [F]) {
    let patch = g.patch_len();
    let plane = g.out_plane();
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * plane;
    out.par_chunks_mut(out_stride)
        .zip(x.par_chunks(in_stride))
        .for_each(|(out_b, x_b)| {
            let mut cols = vec![F::zero(); patch * plane];
            im2col(x_b, g, &mut cols);
            unsafe {
                F::gemm(
                    g.c_out,
                    patch,
                    plane,
                    F::one(),
                    kernels.as_ptr(),
                    patch as isize,
                    1,
                    cols.as_ptr(),
                    plane as isize,
                    1,
                    F::zero(),
                    out_b.as_mut_ptr(),
                    plane as isize,
                    1,
                );
            }
        });
}

/// Gradients w.r.t. input and kernels given the upstream gradient `d_out`.
pub(crate) fn conv2d_backward<F: Scalar>(
    x: &[F],
    kernels: &[F],
    d_out: &[F],
    g: &ConvGeom,
    dx: &mut [F],
    dk: &mut [F],
) {
    let patch = g.patch_len();
    let plane = g.out_plane();
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * plane;

    // dX: per sample, cols-gradient = Kᵀ · dOut, then scatter back.
    dx.par_chunks_mut(in_stride)
        .zip(d_out.par_chunks(out_stride))
        .for_each(|(dx_b, dout_b)| {
            let mut dcols = vec![F::zero(); patch * plane];
            unsafe {
                F::gemm(
                    patch,
                    g.c_out,
                    plane,
                    F::one(),
                    kernels.as_ptr(),
                    1,
                    patch as isize,
                    dout_b.as_ptr(),
                    plane as isize,
                    1,
                    F::zero(),
                    dcols.as_mut_ptr(),
                    plane as isize,
                    1,
                );
            }
            col2im_accumulate(&dcols, g, dx_b);
        });

    // dK: per-sample contributions computed in parallel, reduced in batch
    // order so the summation order is independent of the thread count.
    let per_sample: Vec<Vec<F>> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let x_b = &x[b * in_stride..(b + 1) * in_stride];
            let dout_b = &d_out[b * out_stride..(b + 1) * out_stride];
            let mut cols = vec![F::zero(); patch * plane];
            im2col(x_b, g, &mut cols);
            let mut dk_b = vec![F::zero(); g.c_out * patch];
            unsafe {
                F::gemm(
                    g.c_out,
                    plane,
                    patch,
                    F::one(),
                    dout_b.as_ptr(),
                    plane as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    plane as isize,
                    F::zero(),
                    dk_b.as_mut_ptr(),
                    patch as isize,
                    1,
                );
            }
            dk_b
        })
        .collect();
    for dk_b in per_sample {
        for (acc, v) in dk.iter_mut().zip(dk_b) {
            *acc = *acc + v;
        }
    }
}
