//! Raw forward/backward kernels on NCHW buffers.

use std::ops::Range;

use rayon::prelude::*;

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `ox` whose input column `ox·stride + j − pad` is inside `0..len`.
fn valid_span(out: usize, stride: usize, j: usize, pad: usize, len: usize) -> Range<usize> {
    let lo = if pad > j { (pad - j).div_ceil(stride) } else { 0 };
    let hi = if len + pad > j { ((len + pad - j - 1) / stride + 1).min(out) } else { 0 };
    lo.min(hi)..hi
}

/// Writes the patches of one sample into `col`, whose rows are `ld` apart.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T], ld: usize) {
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * ld;
                let span = valid_span(g.ow, g.stride, j, g.pad_left, g.w);
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad_top as isize;
                    let dst = &mut col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize || span.is_empty() {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + y as usize) * g.w..(c * g.h + y as usize + 1) * g.w];
                    dst[..span.start].fill(T::zero());
                    dst[span.end..].fill(T::zero());
                    let first = span.start * g.stride + j - g.pad_left;
                    if g.stride == 1 {
                        dst[span.clone()].copy_from_slice(&src[first..first + span.len()]);
                    } else {
                        for (d, s) in dst[span.clone()].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], ld: usize, dx: &mut [T]) {
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * ld;
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad_top as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + y as usize) * g.w;
                    for ox in 0..g.ow {
                        let xx = (ox * g.stride + j) as isize - g.pad_left as isize;
                        if xx >= 0 && (xx as usize) < g.w {
                            dx[base + xx as usize] += col[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Upper bound on im2col elements per group of samples.
const COL_BUDGET: usize = 1 << 22;

/// Splits the batch into groups whose stacked im2col buffers fit the budget.
fn groups(g: &ConvGeom, n: usize) -> Vec<Range<usize>> {
    let per = (g.patch() * g.positions()).max(1);
    let size = (COL_BUDGET / per).clamp(1, n.max(1));
    (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect()
}

/// Patches of the samples in `range` side by side: `[patch, len·p]`.
fn im2col_group<T: Scalar>(g: &ConvGeom, x: &[T], range: &Range<usize>) -> Vec<T> {
    let (in_size, p) = (g.c * g.h * g.w, g.positions());
    let ld = range.len() * p;
    let mut col = vec![T::zero(); g.patch() * ld];
    for (j, b) in range.clone().enumerate() {
        im2col(g, &x[b * in_size..(b + 1) * in_size], &mut col[j * p..], ld);
    }
    col
}

fn split_by<'a, T>(mut rest: &'a mut [T], ranges: &[Range<usize>], unit: usize) -> Vec<&'a mut [T]> {
    let mut out = Vec::with_capacity(ranges.len());
    for r in ranges {
        let (head, tail) = rest.split_at_mut(r.len() * unit);
        out.push(head);
        rest = tail;
    }
    out
}

pub(crate) fn conv_forward<T: Scalar>(g: &ConvGeom, n: usize, x: &[T], k: &[T]) -> Vec<T> {
    let (p, patch) = (g.positions(), g.patch());
    let out_size = g.co * p;
    let mut out = vec![T::zero(); n * out_size];
    let ranges = groups(g, n);
    let chunks = split_by(&mut out, &ranges, out_size);
    ranges.par_iter().zip(chunks).for_each(|(range, y)| {
        let ld = range.len() * p;
        let col = im2col_group(g, x, range);
        let mut prod = vec![T::zero(); g.co * ld];
        T::gemm(g.co, patch, ld, k, (patch as isize, 1), &col, (ld as isize, 1), T::zero(), &mut prod, (ld as isize, 1));
        // [co, len·p] -> [len, co, p]
        for j in 0..range.len() {
            for o in 0..g.co {
                y[(j * g.co + o) * p..(j * g.co + o + 1) * p].copy_from_slice(&prod[o * ld + j * p..o * ld + (j + 1) * p]);
            }
        }
    });
    out
}

/// Returns `(dx, dk)`; `dx` is skipped when not needed. Kernel gradients of
/// sample groups are reduced in group order so results do not depend on
/// scheduling.
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    k: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let in_size = g.c * g.h * g.w;
    let out_size = g.co * g.positions();
    let patch = g.patch();
    let p = g.positions();
    let ranges = groups(g, n);
    let per_group = |range: &Range<usize>, dxg: Option<&mut [T]>| -> Vec<T> {
        let ld = range.len() * p;
        let mut col = im2col_group(g, x, range);
        // gather dy into [co, len·p]
        let mut dyg = vec![T::zero(); g.co * ld];
        for (j, b) in range.clone().enumerate() {
            for o in 0..g.co {
                let src = &dy[b * out_size + o * p..b * out_size + (o + 1) * p];
                dyg[o * ld + j * p..o * ld + (j + 1) * p].copy_from_slice(src);
            }
        }
        let mut dk = vec![T::zero(); g.co * patch];
        // dk = dy (co×ld) · colᵀ (ld×patch)
        T::gemm(g.co, ld, patch, &dyg, (ld as isize, 1), &col, (1, ld as isize), T::zero(), &mut dk, (patch as isize, 1));
        if let Some(dxg) = dxg {
            // dcol = kᵀ (patch×co) · dy (co×ld)
            T::gemm(patch, g.co, ld, k, (1, patch as isize), &dyg, (ld as isize, 1), T::zero(), &mut col, (ld as isize, 1));
            for j in 0..range.len() {
                col2im(g, &col[j * p..], ld, &mut dxg[j * in_size..(j + 1) * in_size]);
            }
        }
        dk
    };
    let (dx, partials): (Option<Vec<T>>, Vec<Vec<T>>) = if need_dx {
        let mut dx = vec![T::zero(); n * in_size];
        let chunks = split_by(&mut dx, &ranges, in_size);
        let partials = ranges.par_iter().zip(chunks).map(|(r, c)| per_group(r, Some(c))).collect();
        (Some(dx), partials)
    } else {
        (None, ranges.par_iter().map(|r| per_group(r, None)).collect())
    };
    let mut dk = vec![T::zero(); g.co * patch];
    for part in partials {
        for (a, b) in dk.iter_mut().zip(part) {
            *a += b;
        }
    }
    (dx, dk)
}

/// Max over each window; ties keep the first maximal index in row-major
/// order. Returns values and the flat input index of each maximum.
pub(crate) fn max_pool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for plane in 0..planes {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (v, i) = window_max(x, base, w, oy * stride..oy * stride + window, ox * stride..ox * stride + window);
                out.push(v);
                arg.push(i);
            }
        }
    }
    (out, arg)
}

fn window_max<T: Scalar>(
    x: &[T],
    base: usize,
    w: usize,
    rows: Range<usize>,
    cols: Range<usize>,
) -> (T, usize) {
    let mut best = T::neg_infinity();
    let mut best_i = base + rows.start * w + cols.start;
    for y in rows {
        for xx in cols.clone() {
            let i = base + y * w + xx;
            if x[i] > best {
                best = x[i];
                best_i = i;
            }
        }
    }
    (best, best_i)
}

/// Rows `floor(i·len/level) .. ceil((i+1)·len/level)` of bin `i`.
pub(crate) fn spp_bin(i: usize, level: usize, len: usize) -> Range<usize> {
    let start = i * len / level;
    let end = ((i + 1) * len).div_ceil(level);
    start..end
}

/// Output layout per sample: levels in declared order, then channel, then
/// bin row, then bin column.
pub(crate) fn spp_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    levels: &[usize],
) -> (Vec<T>, Vec<usize>) {
    let bins: usize = levels.iter().map(|l| l * l).sum();
    let mut out = Vec::with_capacity(n * c * bins);
    let mut arg = Vec::with_capacity(n * c * bins);
    for b in 0..n {
        for &level in levels {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for by in 0..level {
                    for bx in 0..level {
                        let (v, i) = window_max(x, base, w, spp_bin(by, level, h), spp_bin(bx, level, w));
                        out.push(v);
                        arg.push(i);
                    }
                }
            }
        }
    }
    (out, arg)
}
