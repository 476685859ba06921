//! Raw forward/backward kernels over row-major buffers.

use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`.
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<(Self, bool)> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        };
        let (batch, c_in, h, w, batched) = match *input {
            [c, h, w] => (1, c, h, w, false),
            [n, c, h, w] => (n, c, h, w, true),
            _ => return Err(mismatch()),
        };
        let [c_out, kc, kh, kw] = *kernel else {
            return Err(mismatch());
        };
        if kc != c_in {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        let (ho, wo, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(mismatch());
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let ho = h.div_ceil(stride);
                let wo = w.div_ceil(stride);
                let pad_h = ((ho - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((wo - 1) * stride + kw).saturating_sub(w);
                if kh > h + pad_h || kw > w + pad_w {
                    return Err(mismatch());
                }
                (ho, wo, pad_h / 2, pad_w / 2)
            }
        };
        Ok((
            ConvGeom {
                batch,
                c_in,
                h,
                w,
                c_out,
                kh,
                kw,
                stride,
                pad_top,
                pad_left,
                ho,
                wo,
            },
            batched,
        ))
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_sample(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_sample(&self) -> usize {
        self.c_out * self.out_plane()
    }

    pub fn output_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.c_out, self.ho, self.wo]
        } else {
            vec![self.c_out, self.ho, self.wo]
        }
    }

    // Input coordinate for output `o` and kernel offset `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(pad).filter(|&v| v < extent)
    }

    /// Output columns `lo..hi` whose tap `kj` lands inside the input row.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        // ox * s + kj >= pad_left
        let lo = self.pad_left.saturating_sub(kj).div_ceil(s);
        // ox * s + kj - pad_left <= w - 1
        let hi = match (self.w + self.pad_left).checked_sub(kj + 1) {
            Some(v) => (v / s + 1).min(self.wo),
            None => 0,
        };
        (lo.min(hi), hi)
    }
}

/// Unfold one sample into a `[c_in*kh*kw, ho*wo]` column matrix.
pub(crate) fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.ho {
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.src(oy, ki, g.pad_top, g.h) else {
                        out_row.fill(T::zero());
                        continue;
                    };
                    let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if lo < hi {
                        let start = lo * g.stride + kj - g.pad_left;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&xrow[start..start + hi - lo]);
                        } else {
                            for (v, src) in out_row[lo..hi].iter_mut().zip(xrow[start..].iter().step_by(g.stride)) {
                                *v = *src;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into one sample.
pub(crate) fn col2im<T: Element>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kj);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ki, g.pad_top, g.h) else {
                        continue;
                    };
                    let start = lo * g.stride + kj - g.pad_left;
                    let dst = dxc[iy * g.w + start..(iy + 1) * g.w].iter_mut().step_by(g.stride);
                    for (d, v) in dst.zip(&src[oy * g.wo + lo..oy * g.wo + hi]) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_sample()];
    let mut cols = vec![T::zero(); patch * plane];
    for n in 0..g.batch {
        im2col(g, &x[n * g.in_sample()..(n + 1) * g.in_sample()], &mut cols);
        let y = &mut out[n * g.out_sample()..(n + 1) * g.out_sample()];
        if let Some(b) = bias {
            for (o, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.fill(b[o]);
            }
        }
        T::gemm(
            g.c_out,
            patch,
            plane,
            T::one(),
            kernel,
            (patch as isize, 1),
            &cols,
            (plane as isize, 1),
            T::one(),
            y,
            (plane as isize, 1),
        );
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`; `d_input` is skipped when not needed.
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut dk = vec![T::zero(); g.c_out * patch];
    let mut db = vec![T::zero(); g.c_out];
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * g.in_sample()]);
    let mut cols = vec![T::zero(); patch * plane];
    let mut dcols = vec![T::zero(); patch * plane];
    for n in 0..g.batch {
        let dyn_ = &dy[n * g.out_sample()..(n + 1) * g.out_sample()];
        for (o, chunk) in dyn_.chunks(plane).enumerate() {
            db[o] += chunk.iter().copied().sum::<T>();
        }
        im2col(g, &x[n * g.in_sample()..(n + 1) * g.in_sample()], &mut cols);
        // dK += dY [c_out, plane] * cols^T [plane, patch]
        T::gemm(
            g.c_out,
            plane,
            patch,
            T::one(),
            dyn_,
            (plane as isize, 1),
            &cols,
            (1, plane as isize),
            T::one(),
            &mut dk,
            (patch as isize, 1),
        );
        if let Some(dx) = dx.as_mut() {
            // dcols = K^T [patch, c_out] * dY [c_out, plane]
            T::gemm(
                patch,
                g.c_out,
                plane,
                T::one(),
                kernel,
                (1, patch as isize),
                dyn_,
                (plane as isize, 1),
                T::zero(),
                &mut dcols,
                (plane as isize, 1),
            );
            col2im(g, &dcols, &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()]);
        }
    }
    (dx, dk, db)
}

/// Non-overlapping max pooling over the last two axes. Returns the pooled
/// buffer and the flat input index of every selected maximum.
pub(crate) fn max_pool2d_forward<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / size, w / size);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        // first maximum wins on ties
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn upsample_nearest_forward<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..wo {
                out.push(row[ox / factor]);
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<T: Element>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                dx[p * h * w + (oy / factor) * w + ox / factor] += dy[p * ho * wo + oy * wo + ox];
            }
        }
    }
    dx
}
