//! Raw forward/backward kernels over flat row-major buffers.
//!
//! All reductions run in a fixed order so results do not depend on how
//! the caller schedules work.

use crate::error::{Error, Result};

/// Padding rule for [`conv2d`](super::ops::conv2d).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that the output extent is `ceil(input / stride)`.
    /// Odd total padding puts the extra row/column at the bottom/right.
    Same,
    /// No padding.
    Valid,
}

/// Resolved sizes of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn same_extent(input: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(input);
    (out, total / 2)
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let [batch, in_h, in_w, in_c] = match *input {
            [b, h, w, c] => [b, h, w, c],
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be B×H×W×C, got {input:?}"),
                ))
            }
        };
        let [k_h, k_w, k_in, out_c] = match *kernel {
            [a, b, c, d] => [a, b, c, d],
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be Kh×Kw×Cin×Cout, got {kernel:?}"),
                ))
            }
        };
        if k_in != in_c {
            return Err(Error::shape(
                "conv2d",
                format!("input channel axis (3) has {in_c} but kernel input-channel axis (2) has {k_in}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if k_h > in_h || k_w > in_w {
                    return Err(Error::shape(
                        "conv2d",
                        format!(
                            "valid padding needs kernel {k_h}×{k_w} within input height/width axes (1, 2) {in_h}×{in_w}"
                        ),
                    ));
                }
                ((in_h - k_h) / stride + 1, (in_w - k_w) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let (oh, pt) = same_extent(in_h, k_h, stride);
                let (ow, pl) = same_extent(in_w, k_w, stride);
                (oh, ow, pt, pl)
            }
        };
        Ok(ConvGeometry {
            batch,
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_c,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    /// A 1×1 stride-1 unpadded convolution reads the input as its own patch matrix.
    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_c]
    }

    /// Source row/column for an output coordinate and kernel tap, if in bounds.
    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(pad).filter(|&i| i < extent)
    }
}

/// `c = a·b + beta·c` for row-major `c` (m×n) with arbitrary strides on `a`, `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let last_a = (m - 1) * a_strides.0 + k.saturating_sub(1) * a_strides.1;
    let last_b = k.saturating_sub(1) * b_strides.0 + (n - 1) * b_strides.1;
    assert!(k == 0 || (last_a < a.len() && last_b < b.len()));
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is an exclusive borrow of at least m×n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let c = g.in_c;
    let patch = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.k_h {
                let iy = g.source(oy, ky, g.pad_top, g.in_h);
                for kx in 0..g.k_w {
                    let dst = &mut row[(ky * g.k_w + kx) * c..][..c];
                    match (iy, g.source(ox, kx, g.pad_left, g.in_w)) {
                        (Some(iy), Some(ix)) => {
                            dst.copy_from_slice(&x[(iy * g.in_w + ix) * c..][..c])
                        }
                        _ => dst.fill(0.0),
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let c = g.in_c;
    let patch = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.k_h {
                let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else {
                    continue;
                };
                for kx in 0..g.k_w {
                    let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else {
                        continue;
                    };
                    let src = &row[(ky * g.k_w + kx) * c..][..c];
                    let dst = &mut dx[(iy * g.in_w + ix) * c..][..c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Below this many output channels the patch-matrix route is dominated by
/// building and packing the patches, so a direct loop is used instead.
const DIRECT_MAX_OUT_CHANNELS: usize = 32;

fn use_direct(g: &ConvGeometry) -> bool {
    !g.is_pointwise() && g.out_c <= DIRECT_MAX_OUT_CHANNELS
}

/// Calls `f(output pixel, input pixel, tap)` for every in-bounds kernel tap.
#[inline(always)]
fn for_each_tap(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let p = oy * g.out_w + ox;
            for ky in 0..g.k_h {
                let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else {
                    continue;
                };
                for kx in 0..g.k_w {
                    if let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) {
                        f(p, iy * g.in_w + ix, ky * g.k_w + kx);
                    }
                }
            }
        }
    }
}

/// Runs a kernel body through an AVX2-enabled copy when the CPU has it.
///
/// The bodies only use separate multiplies and adds in a fixed order, so the
/// wide and baseline versions produce identical bits.
macro_rules! simd_dispatch {
    ($name:ident, $body:ident $(, $generic:ident)? ; ($($arg:ident : $ty:ty),*)) => {
        fn $name$(<const $generic: usize>)?($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,avx512f")]
                unsafe fn avx512$(<const $generic: usize>)?($($arg: $ty),*) {
                    $body$(::<$generic>)?($($arg),*)
                }
                #[target_feature(enable = "avx2")]
                unsafe fn avx2$(<const $generic: usize>)?($($arg: $ty),*) {
                    $body$(::<$generic>)?($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx512f") {
                    // SAFETY: the feature was detected at runtime.
                    unsafe { avx512$(::<$generic>)?($($arg),*) };
                    return;
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: as above.
                    unsafe { avx2$(::<$generic>)?($($arg),*) };
                    return;
                }
            }
            $body$(::<$generic>)?($($arg),*)
        }
    };
}

simd_dispatch!(direct_forward_fixed, direct_forward_fixed_body, CO; (x: &[f64], kernel: &[f64], g: &ConvGeometry, out: &mut [f64]));
simd_dispatch!(direct_forward_any, direct_forward_any_body; (x: &[f64], kernel: &[f64], g: &ConvGeometry, out: &mut [f64]));
simd_dispatch!(direct_dk_fixed, direct_dk_fixed_body, CO; (x: &[f64], dout: &[f64], g: &ConvGeometry, dk: &mut [f64]));
simd_dispatch!(direct_dk_any, direct_dk_any_body; (x: &[f64], dout: &[f64], g: &ConvGeometry, dk: &mut [f64]));
simd_dispatch!(direct_dx, direct_dx_body; (kt: &[f64], dout: &[f64], g: &ConvGeometry, dx: &mut [f64]));

macro_rules! by_out_channels {
    ($g:expr, $fixed:ident, $any:ident, ($($arg:expr),*)) => {
        match $g.out_c {
            1 => $fixed::<1>($($arg),*),
            2 => $fixed::<2>($($arg),*),
            4 => $fixed::<4>($($arg),*),
            8 => $fixed::<8>($($arg),*),
            12 => $fixed::<12>($($arg),*),
            16 => $fixed::<16>($($arg),*),
            24 => $fixed::<24>($($arg),*),
            32 => $fixed::<32>($($arg),*),
            _ => $any($($arg),*),
        }
    };
}

fn conv2d_direct_forward(x: &[f64], kernel: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    by_out_channels!(g, direct_forward_fixed, direct_forward_any, (x, kernel, g, out))
}

/// Output pixels computed together in the direct forward loop.
const PIXEL_GROUP: usize = 4;

/// Output columns `[lo, hi)` whose every horizontal tap lands inside the input.
fn interior_columns(g: &ConvGeometry) -> (usize, usize) {
    let hi = if g.in_w + g.pad_left >= g.k_w {
        ((g.in_w + g.pad_left - g.k_w) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (g.pad_left.div_ceil(g.stride).min(hi), hi)
}

/// Output-channel count known at compile time keeps the accumulators in
/// registers. Interior pixels go in groups that share each kernel row; every
/// output still sums its taps in the same order.
#[inline(always)]
fn direct_forward_fixed_body<const CO: usize>(x: &[f64], kernel: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let ci = g.in_c;
    let (lo, hi) = interior_columns(g);
    for b in 0..g.batch {
        let xs = &x[b * g.in_len()..][..g.in_len()];
        let os = &mut out[b * g.out_pixels() * CO..][..g.out_pixels() * CO];
        for oy in 0..g.out_h {
            let mut ox = 0;
            while ox < g.out_w {
                if ox >= lo && ox + PIXEL_GROUP <= hi {
                    let mut acc = [[0.0f64; CO]; PIXEL_GROUP];
                    for ky in 0..g.k_h {
                        let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else {
                            continue;
                        };
                        for kx in 0..g.k_w {
                            let ix = ox * g.stride + kx - g.pad_left;
                            let rows: [&[f64]; PIXEL_GROUP] =
                                std::array::from_fn(|p| &xs[(iy * g.in_w + ix + p * g.stride) * ci..][..ci]);
                            let kt = &kernel[(ky * g.k_w + kx) * ci * CO..][..ci * CO];
                            for (c, krow) in kt.chunks_exact(CO).enumerate() {
                                let krow: &[f64; CO] = krow.try_into().unwrap();
                                for p in 0..PIXEL_GROUP {
                                    let xv = rows[p][c];
                                    for o in 0..CO {
                                        acc[p][o] += xv * krow[o];
                                    }
                                }
                            }
                        }
                    }
                    for (p, a) in acc.iter().enumerate() {
                        os[(oy * g.out_w + ox + p) * CO..][..CO].copy_from_slice(a);
                    }
                    ox += PIXEL_GROUP;
                    continue;
                }
                let mut acc = [0.0f64; CO];
                for ky in 0..g.k_h {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else {
                            continue;
                        };
                        let xrow = &xs[(iy * g.in_w + ix) * ci..][..ci];
                        let kt = &kernel[(ky * g.k_w + kx) * ci * CO..][..ci * CO];
                        for (xv, krow) in xrow.iter().zip(kt.chunks_exact(CO)) {
                            let krow: &[f64; CO] = krow.try_into().unwrap();
                            for o in 0..CO {
                                acc[o] += xv * krow[o];
                            }
                        }
                    }
                }
                os[(oy * g.out_w + ox) * CO..][..CO].copy_from_slice(&acc);
                ox += 1;
            }
        }
    }
}

#[inline(always)]
fn direct_forward_any_body(x: &[f64], kernel: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let (ci, co) = (g.in_c, g.out_c);
    for b in 0..g.batch {
        let xs = &x[b * g.in_len()..][..g.in_len()];
        let os = &mut out[b * g.out_pixels() * co..][..g.out_pixels() * co];
        for_each_tap(g, |p, q, tap| {
            let acc = &mut os[p * co..][..co];
            let xrow = &xs[q * ci..][..ci];
            let kt = &kernel[tap * ci * co..][..ci * co];
            for (xv, krow) in xrow.iter().zip(kt.chunks_exact(co)) {
                for (a, k) in acc.iter_mut().zip(krow) {
                    *a += xv * k;
                }
            }
        });
    }
}

#[inline(always)]
fn direct_dk_fixed_body<const CO: usize>(x: &[f64], dout: &[f64], g: &ConvGeometry, dk: &mut [f64]) {
    let ci = g.in_c;
    for b in 0..g.batch {
        let xs = &x[b * g.in_len()..][..g.in_len()];
        let dys = &dout[b * g.out_pixels() * CO..][..g.out_pixels() * CO];
        for_each_tap(g, |p, q, tap| {
            let dy: &[f64; CO] = dys[p * CO..][..CO].try_into().unwrap();
            let xrow = &xs[q * ci..][..ci];
            let dkt = &mut dk[tap * ci * CO..][..ci * CO];
            for (xv, drow) in xrow.iter().zip(dkt.chunks_exact_mut(CO)) {
                for o in 0..CO {
                    drow[o] += xv * dy[o];
                }
            }
        });
    }
}

#[inline(always)]
fn direct_dk_any_body(x: &[f64], dout: &[f64], g: &ConvGeometry, dk: &mut [f64]) {
    let (ci, co) = (g.in_c, g.out_c);
    for b in 0..g.batch {
        let xs = &x[b * g.in_len()..][..g.in_len()];
        let dys = &dout[b * g.out_pixels() * co..][..g.out_pixels() * co];
        for_each_tap(g, |p, q, tap| {
            let dy = &dys[p * co..][..co];
            let xrow = &xs[q * ci..][..ci];
            let dkt = &mut dk[tap * ci * co..][..ci * co];
            for (xv, drow) in xrow.iter().zip(dkt.chunks_exact_mut(co)) {
                for (d, gy) in drow.iter_mut().zip(dy) {
                    *d += xv * gy;
                }
            }
        });
    }
}

/// `kt` is the kernel with its channel axes swapped (tap × Cout × Cin).
#[inline(always)]
fn direct_dx_body(kt: &[f64], dout: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (ci, co) = (g.in_c, g.out_c);
    for b in 0..g.batch {
        let dxs = &mut dx[b * g.in_len()..][..g.in_len()];
        let dys = &dout[b * g.out_pixels() * co..][..g.out_pixels() * co];
        for_each_tap(g, |p, q, tap| {
            let dy = &dys[p * co..][..co];
            let drow = &mut dxs[q * ci..][..ci];
            let ktt = &kt[tap * co * ci..][..co * ci];
            for (gy, krow) in dy.iter().zip(ktt.chunks_exact(ci)) {
                for (d, k) in drow.iter_mut().zip(krow) {
                    *d += gy * k;
                }
            }
        });
    }
}

fn conv2d_direct_backward(
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeometry,
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    let (ci, co) = (g.in_c, g.out_c);
    if let Some(dk) = dk {
        by_out_channels!(g, direct_dk_fixed, direct_dk_any, (x, dout, g, dk));
    }
    if let Some(dx) = dx {
        let mut kt = vec![0.0; kernel.len()];
        for tap in 0..g.k_h * g.k_w {
            for i in 0..ci {
                for o in 0..co {
                    kt[(tap * co + o) * ci + i] = kernel[(tap * ci + i) * co + o];
                }
            }
        }
        direct_dx(&kt, dout, g, dx);
    }
}

pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let (m, kk, n) = (g.out_pixels(), g.patch_len(), g.out_c);
    let mut out = vec![0.0; g.batch * m * n];
    if use_direct(g) {
        conv2d_direct_forward(x, kernel, g, &mut out);
        add_bias(&mut out, bias, n);
        return out;
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; m * kk] };
    for b in 0..g.batch {
        let xs = &x[b * g.in_len()..][..g.in_len()];
        let a: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm(m, kk, n, a, (kk, 1), kernel, (n, 1), &mut out[b * m * n..][..m * n], 0.0);
    }
    add_bias(&mut out, bias, n);
    out
}

fn add_bias(out: &mut [f64], bias: Option<&[f64]>, n: usize) {
    if let Some(bias) = bias {
        for px in out.chunks_exact_mut(n) {
            for (o, b) in px.iter_mut().zip(bias) {
                *o += b;
            }
        }
    }
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeometry,
    need: [bool; 3],
) -> ConvGrads {
    let (m, kk, n) = (g.out_pixels(), g.patch_len(), g.out_c);
    let [need_x, need_k, need_b] = need;
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dk = need_k.then(|| vec![0.0; kernel.len()]);
    let db = need_b.then(|| {
        let mut db = vec![0.0; n];
        for px in dout.chunks_exact(n) {
            for (d, v) in db.iter_mut().zip(px) {
                *d += v;
            }
        }
        db
    });
    if use_direct(g) {
        conv2d_direct_backward(x, kernel, dout, g, dx.as_deref_mut(), dk.as_deref_mut());
        return ConvGrads {
            input: dx,
            kernel: dk,
            bias: db,
        };
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; m * kk] };
    let mut dcols = if need_x && !g.is_pointwise() {
        vec![0.0; m * kk]
    } else {
        Vec::new()
    };
    for b in 0..g.batch {
        let dy = &dout[b * m * n..][..m * n];
        if let Some(dk) = dk.as_mut() {
            let xs = &x[b * g.in_len()..][..g.in_len()];
            let a: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            // dK (kk×n) += colsᵀ (kk×m) · dy (m×n)
            gemm(kk, m, n, a, (1, kk), dy, (n, 1), dk, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[b * g.in_len()..][..g.in_len()];
            // dcols (m×kk) = dy (m×n) · Kᵀ (n×kk)
            if g.is_pointwise() {
                gemm(m, n, kk, dy, (n, 1), kernel, (1, n), dxs, 0.0);
            } else {
                gemm(m, n, kk, dy, (n, 1), kernel, (1, n), &mut dcols, 0.0);
                col2im_add(&dcols, g, dxs);
            }
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

/// Per-channel statistics of a channels-last buffer (two-pass).
pub(crate) fn channel_mean_var(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for px in x.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut var = vec![0.0; c];
    for px in x.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= rows);
    (mean, var)
}

/// Returns (xhat, y) given per-channel centre and inverse scale.
/// Normalizes per channel; `xhat` is only materialized when `keep_xhat`.
pub(crate) fn batch_norm_apply(
    x: &[f64],
    centre: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
    keep_xhat: bool,
) -> (Vec<f64>, Vec<f64>) {
    let c = centre.len();
    let mut y = vec![0.0; x.len()];
    if !keep_xhat {
        for (px, py) in x.chunks_exact(c).zip(y.chunks_exact_mut(c)) {
            for j in 0..c {
                py[j] = gamma[j] * ((px[j] - centre[j]) * inv_std[j]) + beta[j];
            }
        }
        return (Vec::new(), y);
    }
    let mut xhat = vec![0.0; x.len()];
    for ((px, hx), py) in x
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c))
        .zip(y.chunks_exact_mut(c))
    {
        for j in 0..c {
            hx[j] = (px[j] - centre[j]) * inv_std[j];
            py[j] = gamma[j] * hx[j] + beta[j];
        }
    }
    (xhat, y)
}

pub(crate) struct BnGrads {
    pub input: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub(crate) fn batch_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    batch_stats: bool,
) -> BnGrads {
    let c = gamma.len();
    let rows = (dy.len() / c) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (pd, ph) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for j in 0..c {
            dbeta[j] += pd[j];
            dgamma[j] += pd[j] * ph[j];
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for ((pdx, pd), ph) in dx
        .chunks_exact_mut(c)
        .zip(dy.chunks_exact(c))
        .zip(xhat.chunks_exact(c))
    {
        for j in 0..c {
            let scale = gamma[j] * inv_std[j];
            pdx[j] = if batch_stats {
                scale * (pd[j] - dbeta[j] / rows - ph[j] * dgamma[j] / rows)
            } else {
                scale * pd[j]
            };
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            sum += *oi;
        }
        o.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Reduction used by the pooling primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// Average over height and width: B×H×W×C → B×1×1×C.
    GlobalAvg,
    /// Maximum over height and width: B×H×W×C → B×1×1×C.
    GlobalMax,
    /// Average over channels: B×H×W×C → B×H×W×1.
    ChannelAvg,
    /// Maximum over channels: B×H×W×C → B×H×W×1.
    ChannelMax,
}

/// Output values plus, for max modes, the flat input index that won.
pub(crate) fn pool_forward(x: &[f64], dims: [usize; 4], mode: PoolMode) -> (Vec<f64>, Vec<usize>) {
    let [b, h, w, c] = dims;
    let hw = h * w;
    match mode {
        PoolMode::GlobalAvg | PoolMode::GlobalMax => {
            let max = mode == PoolMode::GlobalMax;
            let mut out = vec![if max { f64::NEG_INFINITY } else { 0.0 }; b * c];
            let mut arg = if max { vec![0; b * c] } else { Vec::new() };
            for bi in 0..b {
                let o = &mut out[bi * c..][..c];
                for p in 0..hw {
                    let base = (bi * hw + p) * c;
                    for j in 0..c {
                        let v = x[base + j];
                        if max {
                            if v > o[j] {
                                o[j] = v;
                                arg[bi * c + j] = base + j;
                            }
                        } else {
                            o[j] += v;
                        }
                    }
                }
                if !max {
                    o.iter_mut().for_each(|v| *v /= hw as f64);
                }
            }
            (out, arg)
        }
        PoolMode::ChannelAvg => (
            x.chunks_exact(c)
                .map(|px| px.iter().sum::<f64>() / c as f64)
                .collect(),
            Vec::new(),
        ),
        PoolMode::ChannelMax => {
            let mut arg = Vec::with_capacity(b * hw);
            let out = x
                .chunks_exact(c)
                .enumerate()
                .map(|(p, px)| {
                    let (j, v) = px.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (j, &v)| {
                        if v > acc.1 {
                            (j, v)
                        } else {
                            acc
                        }
                    });
                    arg.push(p * c + j);
                    v
                })
                .collect();
            (out, arg)
        }
    }
}

pub(crate) fn pool_backward(dy: &[f64], dims: [usize; 4], mode: PoolMode, arg: &[usize]) -> Vec<f64> {
    let [b, h, w, c] = dims;
    let hw = h * w;
    let mut dx = vec![0.0; b * hw * c];
    match mode {
        PoolMode::GlobalAvg => {
            for bi in 0..b {
                for p in 0..hw {
                    let base = (bi * hw + p) * c;
                    for j in 0..c {
                        dx[base + j] = dy[bi * c + j] / hw as f64;
                    }
                }
            }
        }
        PoolMode::ChannelAvg => {
            for (px, g) in dx.chunks_exact_mut(c).zip(dy) {
                px.iter_mut().for_each(|v| *v = g / c as f64);
            }
        }
        PoolMode::GlobalMax | PoolMode::ChannelMax => {
            for (&i, g) in arg.iter().zip(dy) {
                dx[i] += g;
            }
        }
    }
    dx
}

/// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub(crate) fn avg_pool2_forward(x: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [b, h, w, c] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; b * oh * ow * c];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[((bi * oh + oy) * ow + ox) * c..][..c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = &x[((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c..][..c];
                    for (ov, s) in o.iter_mut().zip(src) {
                        *ov += s;
                    }
                }
                o.iter_mut().for_each(|v| *v *= 0.25);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(dy: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [b, h, w, c] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = &dy[((bi * oh + oy) * ow + ox) * c..][..c];
                for (ddy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let dst = &mut dx[((bi * h + 2 * oy + ddy) * w + 2 * ox + ddx) * c..][..c];
                    for (d, v) in dst.iter_mut().zip(g) {
                        *d += 0.25 * v;
                    }
                }
            }
        }
    }
    dx
}

/// Which singleton axes a gate broadcasts along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum GateKind {
    /// B×1×1×C
    Channel,
    /// B×H×W×1
    Spatial,
}

pub(crate) fn gate_kind(input: &[usize], gate: &[usize]) -> Result<GateKind> {
    match (input, gate) {
        (&[b, _, _, c], &[gb, 1, 1, gc]) if b == gb && c == gc => Ok(GateKind::Channel),
        (&[b, h, w, _], &[gb, gh, gw, 1]) if b == gb && h == gh && w == gw => Ok(GateKind::Spatial),
        _ => Err(Error::shape(
            "broadcast_mul",
            format!("gate {gate:?} is neither B×1×1×C nor B×H×W×1 for input {input:?}"),
        )),
    }
}

#[inline]
pub(crate) fn gate_index(kind: GateKind, flat: usize, dims: [usize; 4]) -> usize {
    let [_, h, w, c] = dims;
    match kind {
        GateKind::Channel => (flat / (h * w * c)) * c + flat % c,
        GateKind::Spatial => flat / c,
    }
}
