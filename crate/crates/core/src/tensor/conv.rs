//! 2D convolution (cross-correlation) with stride, zero padding and groups,
//! plus the fused convolution + per-channel affine + activation unit the
//! network blocks run on.
//!
//! The general path is im2col followed by a fixed-order matmul: for every
//! output element the reduction runs over kernel positions first
//! (row-major) and input channels within each position, always in the same
//! order, so outputs are bitwise reproducible. Depthwise convolution
//! (groups == channels) takes a direct row-kernel path with the same
//! kernel-major accumulation order. Matmuls are tiled over the output
//! plane to stay cache-resident; tiling never splits the reduction, so the
//! summation order is unchanged.

use super::ops::{stable_sigmoid, Activation};
use super::{GradCtx, Tensor};
use crate::error::{Error, Result};

/// Tile width (output positions) for the matmul kernels.
const TILE: usize = 256;

/// Output extent of a convolution along one axis, if the configuration is
/// geometrically valid.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    /// input channels per group
    cg: usize,
    /// output channels per group
    cm: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn reduce_len(&self) -> usize {
        self.cg * self.kh * self.kw
    }
    fn plane_out(&self) -> usize {
        self.oh * self.ow
    }
    fn depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin && self.cg == 1
    }
}

fn validate(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize, groups: usize) -> Result<ConvDims> {
    if stride == 0 {
        return Err(Error::config("conv2d: stride must be positive".to_string()));
    }
    if groups == 0 {
        return Err(Error::config("conv2d: groups must be positive".to_string()));
    }
    let (n, cin, h, w) = match input.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(Error::shape(format!(
                "conv2d: input must be rank-4 N,Cin,H,W, got {other:?}"
            )))
        }
    };
    let (cout, kc, kh, kw) = match kernel.shape() {
        [o, c, kh, kw] => (*o, *c, *kh, *kw),
        other => {
            return Err(Error::shape(format!(
                "conv2d: kernel must be rank-4 Cout,Cin/groups,kh,kw, got {other:?}"
            )))
        }
    };
    if cin % groups != 0 {
        return Err(Error::shape(format!(
            "conv2d: input channels {cin} not divisible by groups {groups}"
        )));
    }
    if cout % groups != 0 {
        return Err(Error::shape(format!(
            "conv2d: output channels {cout} not divisible by groups {groups}"
        )));
    }
    let cg = cin / groups;
    if kc != cg {
        return Err(Error::shape(format!(
            "conv2d: kernel channel dim {kc} must equal input channels per group {cg}"
        )));
    }
    let oh = conv_output_size(h, kh, stride, padding).ok_or_else(|| {
        Error::shape(format!(
            "conv2d: height {h} with kernel {kh}, stride {stride}, padding {padding} yields no output rows"
        ))
    })?;
    let ow = conv_output_size(w, kw, stride, padding).ok_or_else(|| {
        Error::shape(format!(
            "conv2d: width {w} with kernel {kw}, stride {stride}, padding {padding} yields no output columns"
        ))
    })?;
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        cg,
        cm: cout / groups,
        kh,
        kw,
        stride,
        pad: padding,
        groups,
        oh,
        ow,
    })
}

/// Repack the kernel [Cout,cg,kh,kw] into row-major [Cout, R] with
/// R indexed (ki, kj, ci): kernel positions major, input channel minor.
fn repack_kernel(k: &[f64], d: &ConvDims) -> Vec<f64> {
    let rr = d.reduce_len();
    let mut a = vec![0.0; d.cout * rr];
    for co in 0..d.cout {
        for ci in 0..d.cg {
            for ki in 0..d.kh {
                for kj in 0..d.kw {
                    a[co * rr + (ki * d.kw + kj) * d.cg + ci] =
                        k[((co * d.cg + ci) * d.kh + ki) * d.kw + kj];
                }
            }
        }
    }
    a
}

/// Inverse of [`repack_kernel`] for the weight gradient.
fn unpack_kernel_grad(a: &[f64], d: &ConvDims) -> Vec<f64> {
    let rr = d.reduce_len();
    let mut k = vec![0.0; d.cout * d.cg * d.kh * d.kw];
    for co in 0..d.cout {
        for ci in 0..d.cg {
            for ki in 0..d.kh {
                for kj in 0..d.kw {
                    k[((co * d.cg + ci) * d.kh + ki) * d.kw + kj] =
                        a[co * rr + (ki * d.kw + kj) * d.cg + ci];
                }
            }
        }
    }
    k
}

/// Valid output range [lo, hi) along one axis: positions where
/// ow*stride + shift falls inside [0, w).
fn strided_bounds(shift: isize, stride: usize, w: usize, own: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if shift < 0 {
        ((-shift + s - 1) / s) as usize
    } else {
        0
    };
    let hi_signed = (w as isize - shift + s - 1) / s; // ceil((w - shift)/s)
    let hi = hi_signed.max(0) as usize;
    (lo.min(own), hi.min(own))
}

/// col[r][p] = padded-input value for kernel offset r at output position p,
/// for group `g` of one sample.
fn im2col(col: &mut [f64], sample: &[f64], g: usize, d: &ConvDims) {
    let plane_in = d.h * d.w;
    let pp = d.plane_out();
    for ki in 0..d.kh {
        for kj in 0..d.kw {
            let shift = kj as isize - d.pad as isize;
            for ci in 0..d.cg {
                let r = (ki * d.kw + kj) * d.cg + ci;
                let chan = &sample[(g * d.cg + ci) * plane_in..(g * d.cg + ci + 1) * plane_in];
                let dest = &mut col[r * pp..(r + 1) * pp];
                for oh in 0..d.oh {
                    let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                    let drow = &mut dest[oh * d.ow..(oh + 1) * d.ow];
                    if ih < 0 || ih >= d.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &chan[ih as usize * d.w..(ih as usize + 1) * d.w];
                    if d.stride == 1 {
                        let lo = (-shift).max(0) as usize;
                        let hi = ((d.w as isize - shift).max(0) as usize).min(d.ow);
                        let lo = lo.min(d.ow);
                        drow[..lo].fill(0.0);
                        if lo < hi {
                            drow[lo..hi].copy_from_slice(
                                &srow[(lo as isize + shift) as usize
                                    ..(hi as isize + shift) as usize],
                            );
                        }
                        drow[hi.max(lo)..].fill(0.0);
                    } else {
                        for (ow, dv) in drow.iter_mut().enumerate() {
                            let iw = (ow * d.stride) as isize + shift;
                            *dv = if iw < 0 || iw >= d.w as isize {
                                0.0
                            } else {
                                srow[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the column-space gradient back into the input gradient of
/// group `g` of one sample. Mirrors [`im2col`].
fn col2im_add(dx_sample: &mut [f64], dxcol: &[f64], g: usize, d: &ConvDims) {
    let plane_in = d.h * d.w;
    let pp = d.plane_out();
    for ki in 0..d.kh {
        for kj in 0..d.kw {
            let shift = kj as isize - d.pad as isize;
            for ci in 0..d.cg {
                let r = (ki * d.kw + kj) * d.cg + ci;
                let chan =
                    &mut dx_sample[(g * d.cg + ci) * plane_in..(g * d.cg + ci + 1) * plane_in];
                let src = &dxcol[r * pp..(r + 1) * pp];
                for oh in 0..d.oh {
                    let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let srow = &src[oh * d.ow..(oh + 1) * d.ow];
                    let drow = &mut chan[ih as usize * d.w..(ih as usize + 1) * d.w];
                    if d.stride == 1 {
                        let lo = (-shift).max(0) as usize;
                        let hi = ((d.w as isize - shift).max(0) as usize).min(d.ow);
                        for ow in lo..hi {
                            drow[(ow as isize + shift) as usize] += srow[ow];
                        }
                    } else {
                        let (lo, hi) = strided_bounds(shift, d.stride, d.w, d.ow);
                        for ow in lo..hi {
                            drow[(ow * d.stride).wrapping_add_signed(shift)] += srow[ow];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(out: &mut [f64], a: f64, b: &[f64]) {
    for (o, &bv) in out.iter_mut().zip(b) {
        *o += a * bv;
    }
}

/// Four output rows sharing one B-row load.
#[inline]
fn axpy4(
    c0: &mut [f64],
    c1: &mut [f64],
    c2: &mut [f64],
    c3: &mut [f64],
    a: [f64; 4],
    b: &[f64],
) {
    let n = b.len();
    let (c0, c1, c2, c3) = (&mut c0[..n], &mut c1[..n], &mut c2[..n], &mut c3[..n]);
    for i in 0..n {
        let bv = b[i];
        c0[i] += a[0] * bv;
        c1[i] += a[1] * bv;
        c2[i] += a[2] * bv;
        c3[i] += a[3] * bv;
    }
}

/// Two reduction steps per pass: c += a[0..4]*b0 + a[4..8]*b1, applied to
/// four output rows. Each element still accumulates in ascending reduction
/// order.
#[inline]
#[allow(clippy::too_many_arguments)]
fn axpy4x2(
    c0: &mut [f64],
    c1: &mut [f64],
    c2: &mut [f64],
    c3: &mut [f64],
    a: [f64; 8],
    b0: &[f64],
    b1: &[f64],
) {
    let n = b0.len();
    let (c0, c1, c2, c3) = (&mut c0[..n], &mut c1[..n], &mut c2[..n], &mut c3[..n]);
    let b1 = &b1[..n];
    for i in 0..n {
        let (u, v) = (b0[i], b1[i]);
        c0[i] += a[0] * u + a[4] * v;
        c1[i] += a[1] * u + a[5] * v;
        c2[i] += a[2] * u + a[6] * v;
        c3[i] += a[3] * u + a[7] * v;
    }
}

/// Four dot products sharing one B stream; each uses the same fixed
/// four-lane grouping as [`dot4`].
#[inline]
fn dot4_rows(a0: &[f64], a1: &[f64], a2: &[f64], a3: &[f64], b: &[f64]) -> [f64; 4] {
    let n = b.len();
    let (a0, a1, a2, a3) = (&a0[..n], &a1[..n], &a2[..n], &a3[..n]);
    let mut l = [[0.0f64; 4]; 4];
    let chunks = n / 4 * 4;
    let mut i = 0;
    while i < chunks {
        for j in 0..4 {
            let bv = b[i + j];
            l[0][j] += a0[i + j] * bv;
            l[1][j] += a1[i + j] * bv;
            l[2][j] += a2[i + j] * bv;
            l[3][j] += a3[i + j] * bv;
        }
        i += 4;
    }
    let mut tails = [0.0f64; 4];
    while i < n {
        let bv = b[i];
        tails[0] += a0[i] * bv;
        tails[1] += a1[i] * bv;
        tails[2] += a2[i] * bv;
        tails[3] += a3[i] * bv;
        i += 1;
    }
    [
        ((l[0][0] + l[0][1]) + (l[0][2] + l[0][3])) + tails[0],
        ((l[1][0] + l[1][1]) + (l[1][2] + l[1][3])) + tails[1],
        ((l[2][0] + l[2][1]) + (l[2][2] + l[2][3])) + tails[2],
        ((l[3][0] + l[3][1]) + (l[3][2] + l[3][3])) + tails[3],
    ]
}

/// Four-lane dot product with a fixed summation grouping
/// ((l0+l1)+(l2+l3)) + tail, deterministic and vectorizable.
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x4, y4) in ca.zip(cb) {
        for j in 0..4 {
            lanes[j] += x4[j] * y4[j];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + tail
}

/// (sum a[i]*b[i], sum a[i]) with the fixed four-lane grouping of
/// [`dot4`].
#[inline]
fn dot4_with_plain_sum(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n = a.len();
    let b = &b[..n];
    let mut dl = [0.0f64; 4];
    let mut sl = [0.0f64; 4];
    let chunks = n / 4 * 4;
    let mut i = 0;
    while i < chunks {
        for j in 0..4 {
            dl[j] += a[i + j] * b[i + j];
            sl[j] += a[i + j];
        }
        i += 4;
    }
    let (mut dt, mut st) = (0.0f64, 0.0f64);
    while i < n {
        dt += a[i] * b[i];
        st += a[i];
        i += 1;
    }
    (
        ((dl[0] + dl[1]) + (dl[2] + dl[3])) + dt,
        ((sl[0] + sl[1]) + (sl[2] + sl[3])) + st,
    )
}

/// C[m][p] += sum_r A[m][r] * B[r][p], reduction in ascending r, tiled
/// over p for cache residency and blocked four output rows at a time so
/// each B row is loaded once per block.
fn matmul_axpy(c: &mut [f64], a: &[f64], b: &[f64], m: usize, r: usize, p: usize) {
    let mut p0 = 0;
    while p0 < p {
        let p1 = (p0 + TILE).min(p);
        let mut m0 = 0;
        while m0 + 4 <= m {
            let block = &mut c[m0 * p..(m0 + 4) * p];
            let (c0, rest) = block.split_at_mut(p);
            let (c1, rest) = rest.split_at_mut(p);
            let (c2, c3) = rest.split_at_mut(p);
            let mut k = 0;
            while k + 2 <= r {
                axpy4x2(
                    &mut c0[p0..p1],
                    &mut c1[p0..p1],
                    &mut c2[p0..p1],
                    &mut c3[p0..p1],
                    [
                        a[m0 * r + k],
                        a[(m0 + 1) * r + k],
                        a[(m0 + 2) * r + k],
                        a[(m0 + 3) * r + k],
                        a[m0 * r + k + 1],
                        a[(m0 + 1) * r + k + 1],
                        a[(m0 + 2) * r + k + 1],
                        a[(m0 + 3) * r + k + 1],
                    ],
                    &b[k * p + p0..k * p + p1],
                    &b[(k + 1) * p + p0..(k + 1) * p + p1],
                );
                k += 2;
            }
            if k < r {
                axpy4(
                    &mut c0[p0..p1],
                    &mut c1[p0..p1],
                    &mut c2[p0..p1],
                    &mut c3[p0..p1],
                    [
                        a[m0 * r + k],
                        a[(m0 + 1) * r + k],
                        a[(m0 + 2) * r + k],
                        a[(m0 + 3) * r + k],
                    ],
                    &b[k * p + p0..k * p + p1],
                );
            }
            m0 += 4;
        }
        for i in m0..m {
            let crow = &mut c[i * p + p0..i * p + p1];
            let arow = &a[i * r..(i + 1) * r];
            for (k, &av) in arow.iter().enumerate() {
                axpy(crow, av, &b[k * p + p0..k * p + p1]);
            }
        }
        p0 = p1;
    }
}

/// Forward convolution into a fresh buffer; `a` is the repacked kernel.
fn conv_forward_raw(x: &[f64], a: &[f64], d: &ConvDims) -> Vec<f64> {
    let pp = d.plane_out();
    let mut out = vec![0.0; d.n * d.cout * pp];
    if d.depthwise() {
        dw_forward(&mut out, x, a, d);
        return out;
    }
    let rr = d.reduce_len();
    let identity = identity_im2col(d);
    let mut col = if identity { Vec::new() } else { vec![0.0; rr * pp] };
    let sample_len = d.cin * d.h * d.w;
    for ni in 0..d.n {
        let sample = &x[ni * sample_len..(ni + 1) * sample_len];
        for g in 0..d.groups {
            let out_g = &mut out
                [(ni * d.cout + g * d.cm) * pp..(ni * d.cout + (g + 1) * d.cm) * pp];
            let a_g = &a[g * d.cm * rr..(g + 1) * d.cm * rr];
            if identity {
                // 1x1 stride-1 convolution: the column matrix is the input
                // channel block itself.
                let b = &sample[g * d.cg * pp..(g + 1) * d.cg * pp];
                matmul_axpy(out_g, a_g, b, d.cm, rr, pp);
            } else {
                im2col(&mut col, sample, g, d);
                matmul_axpy(out_g, a_g, &col, d.cm, rr, pp);
            }
        }
    }
    out
}

/// 1x1 stride-1 unpadded convolutions have col == input, letting both
/// passes skip the gather/scatter entirely.
fn identity_im2col(d: &ConvDims) -> bool {
    d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0
}

/// Depthwise forward: per channel, kernel taps in row-major order, rows
/// as axpy (stride 1) or strided gathers.
fn dw_forward(out: &mut [f64], x: &[f64], a: &[f64], d: &ConvDims) {
    let pp = d.plane_out();
    let plane_in = d.h * d.w;
    let rr = d.kh * d.kw;
    for nc in 0..d.n * d.cin {
        let c = nc % d.cin;
        let chan = &x[nc * plane_in..(nc + 1) * plane_in];
        let orow_base = nc * pp;
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let kv = a[c * rr + ki * d.kw + kj];
                let shift = kj as isize - d.pad as isize;
                for oh in 0..d.oh {
                    let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let srow = &chan[ih as usize * d.w..(ih as usize + 1) * d.w];
                    let orow = &mut out[orow_base + oh * d.ow..orow_base + (oh + 1) * d.ow];
                    if d.stride == 1 {
                        let lo = (-shift).max(0) as usize;
                        let hi = ((d.w as isize - shift).max(0) as usize).min(d.ow);
                        if lo < hi {
                            axpy(
                                &mut orow[lo..hi],
                                kv,
                                &srow[(lo as isize + shift) as usize
                                    ..(hi as isize + shift) as usize],
                            );
                        }
                    } else {
                        let (lo, hi) = strided_bounds(shift, d.stride, d.w, d.ow);
                        for ow in lo..hi {
                            orow[ow] +=
                                kv * srow[(ow * d.stride).wrapping_add_signed(shift)];
                        }
                    }
                }
            }
        }
    }
}

/// Backward pass shared by the plain and fused ops. Returns input and
/// kernel gradients (kernel layout) on demand.
fn conv_backward_raw(
    x: &[f64],
    dy: &[f64],
    a: &[f64],
    d: &ConvDims,
    needs_dx: bool,
    needs_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    if d.depthwise() {
        return dw_backward(x, dy, a, d, needs_dx, needs_dw);
    }
    let rr = d.reduce_len();
    let pp = d.plane_out();
    let sample_len = d.cin * d.h * d.w;
    let identity = identity_im2col(d);

    let mut dx = needs_dx.then(|| vec![0.0; x.len()]);
    let mut dwa = needs_dw.then(|| vec![0.0; d.cout * rr]);
    let mut col = if needs_dw && !identity { vec![0.0; rr * pp] } else { Vec::new() };
    let mut dxcol = if needs_dx && !identity { vec![0.0; rr * pp] } else { Vec::new() };

    for ni in 0..d.n {
        let sample = &x[ni * sample_len..(ni + 1) * sample_len];
        for g in 0..d.groups {
            let dy_g = &dy[(ni * d.cout + g * d.cm) * pp..(ni * d.cout + (g + 1) * d.cm) * pp];
            if let Some(dwa) = dwa.as_mut() {
                let dwa_g = &mut dwa[g * d.cm * rr..(g + 1) * d.cm * rr];
                if identity {
                    let b = &sample[g * d.cg * pp..(g + 1) * d.cg * pp];
                    weight_grad_from_cols(dwa_g, dy_g, b, d.cm, rr, pp);
                } else {
                    im2col(&mut col, sample, g, d);
                    weight_grad_from_cols(dwa_g, dy_g, &col, d.cm, rr, pp);
                }
            }
            if let Some(dx) = dx.as_mut() {
                let a_g = &a[g * d.cm * rr..(g + 1) * d.cm * rr];
                if identity {
                    let dst = &mut dx[ni * sample_len + g * d.cg * pp
                        ..ni * sample_len + (g + 1) * d.cg * pp];
                    input_grad_to_cols(dst, a_g, dy_g, d.cm, rr, pp);
                } else {
                    dxcol.fill(0.0);
                    input_grad_to_cols(&mut dxcol, a_g, dy_g, d.cm, rr, pp);
                    col2im_add(&mut dx[ni * sample_len..(ni + 1) * sample_len], &dxcol, g, d);
                }
            }
        }
    }
    (dx, dwa.map(|w| unpack_kernel_grad(&w, d)))
}

/// dW[m][r] += sum_p dy[m][p] * col[r][p]: blocked dot products, four dy
/// rows per col-row pass, tiles ascending in p.
fn weight_grad_from_cols(
    dwa_g: &mut [f64],
    dy_g: &[f64],
    col: &[f64],
    cm: usize,
    rr: usize,
    pp: usize,
) {
    let mut p0 = 0;
    while p0 < pp {
        let p1 = (p0 + TILE).min(pp);
        let mut m0 = 0;
        while m0 + 4 <= cm {
            let dy0 = &dy_g[m0 * pp + p0..m0 * pp + p1];
            let dy1 = &dy_g[(m0 + 1) * pp + p0..(m0 + 1) * pp + p1];
            let dy2 = &dy_g[(m0 + 2) * pp + p0..(m0 + 2) * pp + p1];
            let dy3 = &dy_g[(m0 + 3) * pp + p0..(m0 + 3) * pp + p1];
            for r in 0..rr {
                let crow = &col[r * pp + p0..r * pp + p1];
                let sums = dot4_rows(dy0, dy1, dy2, dy3, crow);
                let base = m0 * rr + r;
                dwa_g[base] += sums[0];
                dwa_g[base + rr] += sums[1];
                dwa_g[base + 2 * rr] += sums[2];
                dwa_g[base + 3 * rr] += sums[3];
            }
            m0 += 4;
        }
        for mi in m0..cm {
            let dyr = &dy_g[mi * pp + p0..mi * pp + p1];
            for r in 0..rr {
                dwa_g[mi * rr + r] += dot4(dyr, &col[r * pp + p0..r * pp + p1]);
            }
        }
        p0 = p1;
    }
}

/// dst[r][p] += sum_m A[m][r] * dy[m][p], ascending m, four dst rows per
/// dy-row pass, tiled over p.
fn input_grad_to_cols(
    dst: &mut [f64],
    a_g: &[f64],
    dy_g: &[f64],
    cm: usize,
    rr: usize,
    pp: usize,
) {
    let mut p0 = 0;
    while p0 < pp {
        let p1 = (p0 + TILE).min(pp);
        let mut r0 = 0;
        while r0 + 4 <= rr {
            let block = &mut dst[r0 * pp..(r0 + 4) * pp];
            let (x0, rest) = block.split_at_mut(pp);
            let (x1, rest) = rest.split_at_mut(pp);
            let (x2, x3) = rest.split_at_mut(pp);
            let mut mi = 0;
            while mi + 2 <= cm {
                let a0 = &a_g[mi * rr..(mi + 1) * rr];
                let a1 = &a_g[(mi + 1) * rr..(mi + 2) * rr];
                axpy4x2(
                    &mut x0[p0..p1],
                    &mut x1[p0..p1],
                    &mut x2[p0..p1],
                    &mut x3[p0..p1],
                    [
                        a0[r0],
                        a0[r0 + 1],
                        a0[r0 + 2],
                        a0[r0 + 3],
                        a1[r0],
                        a1[r0 + 1],
                        a1[r0 + 2],
                        a1[r0 + 3],
                    ],
                    &dy_g[mi * pp + p0..mi * pp + p1],
                    &dy_g[(mi + 1) * pp + p0..(mi + 1) * pp + p1],
                );
                mi += 2;
            }
            if mi < cm {
                let arow = &a_g[mi * rr..(mi + 1) * rr];
                axpy4(
                    &mut x0[p0..p1],
                    &mut x1[p0..p1],
                    &mut x2[p0..p1],
                    &mut x3[p0..p1],
                    [arow[r0], arow[r0 + 1], arow[r0 + 2], arow[r0 + 3]],
                    &dy_g[mi * pp + p0..mi * pp + p1],
                );
            }
            r0 += 4;
        }
        for r in r0..rr {
            let drow = &mut dst[r * pp + p0..r * pp + p1];
            for mi in 0..cm {
                axpy(drow, a_g[mi * rr + r], &dy_g[mi * pp + p0..mi * pp + p1]);
            }
        }
        p0 = p1;
    }
}

/// Depthwise backward, direct kernels.
fn dw_backward(
    x: &[f64],
    dy: &[f64],
    a: &[f64],
    d: &ConvDims,
    needs_dx: bool,
    needs_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let pp = d.plane_out();
    let plane_in = d.h * d.w;
    let rr = d.kh * d.kw;
    let mut dx = needs_dx.then(|| vec![0.0; x.len()]);
    let mut dwa = needs_dw.then(|| vec![0.0; d.cout * rr]);

    for nc in 0..d.n * d.cin {
        let c = nc % d.cin;
        let chan = &x[nc * plane_in..(nc + 1) * plane_in];
        let dy_c = &dy[nc * pp..(nc + 1) * pp];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let shift = kj as isize - d.pad as isize;
                if let Some(dwa) = dwa.as_mut() {
                    let mut acc = 0.0;
                    for oh in 0..d.oh {
                        let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        let srow = &chan[ih as usize * d.w..(ih as usize + 1) * d.w];
                        let dyrow = &dy_c[oh * d.ow..(oh + 1) * d.ow];
                        if d.stride == 1 {
                            let lo = (-shift).max(0) as usize;
                            let hi = ((d.w as isize - shift).max(0) as usize).min(d.ow);
                            if lo < hi {
                                acc += dot4(
                                    &dyrow[lo..hi],
                                    &srow[(lo as isize + shift) as usize
                                        ..(hi as isize + shift) as usize],
                                );
                            }
                        } else {
                            let (lo, hi) = strided_bounds(shift, d.stride, d.w, d.ow);
                            let mut s = 0.0;
                            for ow in lo..hi {
                                s += dyrow[ow]
                                    * srow[(ow * d.stride).wrapping_add_signed(shift)];
                            }
                            acc += s;
                        }
                    }
                    dwa[c * rr + ki * d.kw + kj] += acc;
                }
                if let Some(dx) = dx.as_mut() {
                    let kv = a[c * rr + ki * d.kw + kj];
                    let dchan = &mut dx[nc * plane_in..(nc + 1) * plane_in];
                    for oh in 0..d.oh {
                        let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        let drow =
                            &mut dchan[ih as usize * d.w..(ih as usize + 1) * d.w];
                        let dyrow = &dy_c[oh * d.ow..(oh + 1) * d.ow];
                        if d.stride == 1 {
                            let lo = (-shift).max(0) as usize;
                            let hi = ((d.w as isize - shift).max(0) as usize).min(d.ow);
                            if lo < hi {
                                axpy(
                                    &mut drow[(lo as isize + shift) as usize
                                        ..(hi as isize + shift) as usize],
                                    kv,
                                    &dyrow[lo..hi],
                                );
                            }
                        } else {
                            let (lo, hi) = strided_bounds(shift, d.stride, d.w, d.ow);
                            for ow in lo..hi {
                                drow[(ow * d.stride).wrapping_add_signed(shift)] +=
                                    kv * dyrow[ow];
                            }
                        }
                    }
                }
            }
        }
    }
    // dw gradients for depthwise come out in (ki,kj) order == kernel layout
    (dx, dwa)
}

impl Tensor {
    /// Cross-correlate `self` [N,Cin,H,W] with `kernel`
    /// [Cout,Cin/groups,kh,kw].
    pub fn conv2d(
        &self,
        kernel: &Tensor,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor> {
        let dims = validate(self, kernel, stride, padding, groups)?;
        let a = repack_kernel(kernel.data(), &dims);
        let out = conv_forward_raw(self.data(), &a, &dims);
        Tensor::from_op(
            "conv2d",
            vec![dims.n, dims.cout, dims.oh, dims.ow],
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                let (dx, dk) = conv_backward_raw(
                    ctx.parents[0].data(),
                    ctx.upstream,
                    &a,
                    &dims,
                    ctx.needs(0),
                    ctx.needs(1),
                );
                Ok(vec![dx, dk])
            }),
        )
    }

    /// Fused convolution + per-channel affine (gamma, beta) + optional
    /// activation: one graph node instead of three, used by every network
    /// block. Gradients flow to the input, kernel, gamma and beta.
    pub fn conv_unit(
        &self,
        kernel: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        stride: usize,
        padding: usize,
        groups: usize,
        act: Option<Activation>,
    ) -> Result<Tensor> {
        let dims = validate(self, kernel, stride, padding, groups)?;
        if gamma.shape() != [dims.cout] || beta.shape() != [dims.cout] {
            return Err(Error::shape(format!(
                "conv_unit: gamma {:?} / beta {:?} must have shape [{}]",
                gamma.shape(),
                beta.shape(),
                dims.cout
            )));
        }
        let a = repack_kernel(kernel.data(), &dims);
        let conv_out = conv_forward_raw(self.data(), &a, &dims);
        let pp = dims.plane_out();
        let gm = gamma.data();
        let bt = beta.data();

        let mut out = vec![0.0; conv_out.len()];
        // Sigmoid factors captured for the silu backward.
        let mut sig: Vec<f64> = Vec::new();
        if act == Some(Activation::Silu) {
            sig = vec![0.0; conv_out.len()];
        }
        for nc in 0..dims.n * dims.cout {
            let c = nc % dims.cout;
            let (g, b) = (gm[c], bt[c]);
            let y = &conv_out[nc * pp..(nc + 1) * pp];
            let o = &mut out[nc * pp..(nc + 1) * pp];
            match act {
                None => {
                    for (ov, &yv) in o.iter_mut().zip(y) {
                        *ov = g * yv + b;
                    }
                }
                Some(Activation::Relu) => {
                    for (ov, &yv) in o.iter_mut().zip(y) {
                        let v = g * yv + b;
                        *ov = if v > 0.0 { v } else { 0.0 };
                    }
                }
                Some(Activation::Sigmoid) => {
                    for (ov, &yv) in o.iter_mut().zip(y) {
                        *ov = stable_sigmoid(g * yv + b);
                    }
                }
                Some(Activation::Silu) => {
                    let srow = &mut sig[nc * pp..(nc + 1) * pp];
                    for ((ov, sv), &yv) in o.iter_mut().zip(srow.iter_mut()).zip(y) {
                        let v = g * yv + b;
                        let s = stable_sigmoid(v);
                        *sv = s;
                        *ov = v * s;
                    }
                }
            }
        }

        Tensor::from_op(
            "conv_unit",
            vec![dims.n, dims.cout, dims.oh, dims.ow],
            out,
            vec![self.clone(), kernel.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                conv_unit_backward(ctx, &dims, &a, &conv_out, &sig, act)
            }),
        )
    }
}

fn conv_unit_backward(
    ctx: &GradCtx<'_>,
    d: &ConvDims,
    a: &[f64],
    conv_out: &[f64],
    sig: &[f64],
    act: Option<Activation>,
) -> Result<Vec<Option<Vec<f64>>>> {
    let pp = d.plane_out();
    let gm = ctx.parents[2].data();
    let bt = ctx.parents[3].data();
    let g_up = ctx.upstream;

    // d_pre = upstream * act'(gamma*y + beta), plus the per-channel
    // reductions for dgamma/dbeta, all in one pass.
    let mut d_pre = vec![0.0; g_up.len()];
    let mut dgamma = vec![0.0; d.cout];
    let mut dbeta = vec![0.0; d.cout];
    for nc in 0..d.n * d.cout {
        let c = nc % d.cout;
        let (gam, bet) = (gm[c], bt[c]);
        let y = &conv_out[nc * pp..(nc + 1) * pp];
        let up = &g_up[nc * pp..(nc + 1) * pp];
        let dp = &mut d_pre[nc * pp..(nc + 1) * pp];
        let out = &ctx.out[nc * pp..(nc + 1) * pp];
        match act {
            None => {
                dp.copy_from_slice(up);
            }
            Some(Activation::Relu) => {
                for ((dpv, &uv), &ov) in dp.iter_mut().zip(up).zip(out) {
                    *dpv = if ov > 0.0 { uv } else { 0.0 };
                }
            }
            Some(Activation::Sigmoid) => {
                for ((dpv, &uv), &ov) in dp.iter_mut().zip(up).zip(out) {
                    *dpv = uv * ov * (1.0 - ov);
                }
            }
            Some(Activation::Silu) => {
                let srow = &sig[nc * pp..(nc + 1) * pp];
                for (((dpv, &uv), &yv), &sv) in dp.iter_mut().zip(up).zip(y).zip(srow) {
                    let v = gam * yv + bet;
                    *dpv = uv * sv * (1.0 + v * (1.0 - sv));
                }
            }
        }
        // dgamma[c] += sum d_pre*y, dbeta[c] += sum d_pre; fixed four-lane
        // grouping keeps the reductions vectorizable and deterministic.
        let sums = dot4_with_plain_sum(dp, y);
        dgamma[c] += sums.0;
        dbeta[c] += sums.1;
        // gradient into the convolution output: d_pre * gamma
        for dpv in dp.iter_mut() {
            *dpv *= gam;
        }
    }

    let (dx, dk) = conv_backward_raw(
        ctx.parents[0].data(),
        &d_pre,
        a,
        d,
        ctx.needs(0),
        ctx.needs(1),
    );
    Ok(vec![
        dx,
        dk,
        ctx.needs(2).then_some(dgamma),
        ctx.needs(3).then_some(dbeta),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::tensor::tests::random_tensor;

    /// Definition-following convolution: six nested loops, no packing.
    fn conv_oracle(
        x: &Tensor,
        k: &Tensor,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> (Vec<usize>, Vec<f64>) {
        let (n, cin, h, w) = match x.shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            _ => panic!("rank 4"),
        };
        let (cout, cg, kh, kw) = match k.shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            _ => panic!("rank 4"),
        };
        let cm = cout / groups;
        let oh = conv_output_size(h, kh, stride, pad).unwrap();
        let ow = conv_output_size(w, kw, stride, pad).unwrap();
        let xd = x.data();
        let kd = k.data();
        let mut out = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                let g = co / cm;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cg {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (i * stride + ki) as isize - pad as isize;
                                    let iw = (j * stride + kj) as isize - pad as isize;
                                    if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let xv = xd[((ni * cin + g * cg + ci) * h + ih as usize) * w
                                        + iw as usize];
                                    let kv = kd[((co * cg + ci) * kh + ki) * kw + kj];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out[((ni * cout + co) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        (vec![n, cout, oh, ow], out)
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "index {i}: {x} vs {y} (|diff| = {})",
                (x - y).abs()
            );
        }
    }

    #[test]
    fn constant_inputs_two_by_two_kernel() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9], false).unwrap();
        let k = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0; 4], false).unwrap();
        let y = x.conv2d(&k, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = CounterRng::new(1);
        let x = random_tensor(&mut rng, &[1, 1, 5, 6], false);
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0; // center of 3x3
        let k = Tensor::from_vec(&[1, 1, 3, 3], kd, false).unwrap();
        let y = x.conv2d(&k, 1, 1, 1).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_close(y.data(), x.data(), 0.0);
    }

    #[test]
    fn strided_padded_conv_matches_naive_oracle() {
        let mut rng = CounterRng::new(2);
        let x = random_tensor(&mut rng, &[2, 3, 8, 8], false);
        let k = random_tensor(&mut rng, &[4, 3, 3, 3], false);
        let y = x.conv2d(&k, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        let (shape, expect) = conv_oracle(&x, &k, 2, 1, 1);
        assert_eq!(y.shape(), &shape[..]);
        assert_close(y.data(), &expect, 1e-12);
    }

    #[test]
    fn wide_strided_conv_matches_oracle_across_tiles() {
        // spatial plane larger than one tile
        let mut rng = CounterRng::new(9);
        let x = random_tensor(&mut rng, &[1, 3, 40, 40], false);
        let k = random_tensor(&mut rng, &[5, 3, 3, 3], false);
        for (s, p) in [(1, 1), (2, 1), (3, 0)] {
            let y = x.conv2d(&k, s, p, 1).unwrap();
            let (shape, expect) = conv_oracle(&x, &k, s, p, 1);
            assert_eq!(y.shape(), &shape[..]);
            assert_close(y.data(), &expect, 1e-12);
        }
    }

    #[test]
    fn grouped_and_depthwise_match_oracle() {
        let mut rng = CounterRng::new(3);
        // grouped: 6 in, 4 out, 2 groups
        let x = random_tensor(&mut rng, &[2, 6, 7, 7], false);
        let k = random_tensor(&mut rng, &[4, 3, 3, 3], false);
        let y = x.conv2d(&k, 1, 1, 2).unwrap();
        let (_, expect) = conv_oracle(&x, &k, 1, 1, 2);
        assert_close(y.data(), &expect, 1e-12);

        // depthwise: groups == channels, strides 1 and 2, kernels 3 and 5
        for (kside, s, p) in [(3, 1, 1), (3, 2, 1), (5, 2, 2), (5, 1, 2)] {
            let x = random_tensor(&mut rng, &[2, 8, 9, 9], false);
            let k = random_tensor(&mut rng, &[8, 1, kside, kside], false);
            let y = x.conv2d(&k, s, p, 8).unwrap();
            let (shape, expect) = conv_oracle(&x, &k, s, p, 8);
            assert_eq!(y.shape(), &shape[..]);
            assert_close(y.data(), &expect, 1e-12);
        }
    }

    #[test]
    fn stride_one_pad_one_k3_preserves_96() {
        assert_eq!(conv_output_size(96, 3, 1, 1), Some(96));
        assert_eq!(conv_output_size(96, 3, 2, 1), Some(48));
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let x = Tensor::zeros(&[1, 4, 6, 6], false);
        let k = Tensor::zeros(&[4, 4, 3, 3], false);
        assert!(matches!(
            x.conv2d(&k, 0, 1, 1),
            Err(crate::error::Error::Config(_))
        ));
        assert!(matches!(
            x.conv2d(&k, 1, 1, 0),
            Err(crate::error::Error::Config(_))
        ));
        // channels not divisible by groups
        assert!(matches!(
            x.conv2d(&k, 1, 1, 3),
            Err(crate::error::Error::Shape(_))
        ));
        // kernel larger than padded input
        let kbig = Tensor::zeros(&[1, 4, 9, 9], false);
        assert!(matches!(
            x.conv2d(&kbig, 1, 0, 1),
            Err(crate::error::Error::Shape(_))
        ));
        // kernel channel dim mismatch
        let kbad = Tensor::zeros(&[4, 3, 3, 3], false);
        assert!(matches!(
            x.conv2d(&kbad, 1, 1, 1),
            Err(crate::error::Error::Shape(_))
        ));
    }

    #[test]
    fn conv_determinism_bitwise() {
        let mut rng = CounterRng::new(4);
        let x = random_tensor(&mut rng, &[2, 4, 10, 10], false);
        let k = random_tensor(&mut rng, &[6, 4, 3, 3], false);
        let y1 = x.conv2d(&k, 2, 1, 1).unwrap();
        let y2 = x.conv2d(&k, 2, 1, 1).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn conv_unit_matches_unfused_composition() {
        let mut rng = CounterRng::new(5);
        for (groups, cin, cout, s) in [(1usize, 3usize, 5usize, 1usize), (4, 4, 4, 2)] {
            let x = random_tensor(&mut rng, &[2, cin, 9, 9], false);
            let k = random_tensor(&mut rng, &[cout, cin / groups, 3, 3], false);
            let gamma = random_tensor(&mut rng, &[cout], false);
            let beta = random_tensor(&mut rng, &[cout], false);
            for act in [None, Some(Activation::Silu), Some(Activation::Relu)] {
                let fused = x.conv_unit(&k, &gamma, &beta, s, 1, groups, act).unwrap();
                let mut plain = x
                    .conv2d(&k, s, 1, groups)
                    .unwrap()
                    .channel_affine(&gamma, &beta)
                    .unwrap();
                if let Some(a) = act {
                    plain = plain.activation(a).unwrap();
                }
                assert_eq!(fused.shape(), plain.shape());
                assert_close(fused.data(), plain.data(), 1e-13);
            }
        }
    }

    #[test]
    fn conv_unit_gradients_match_unfused_graph() {
        let mut rng = CounterRng::new(6);
        let x = random_tensor(&mut rng, &[1, 3, 7, 7], true);
        let k = random_tensor(&mut rng, &[4, 3, 3, 3], true);
        let gamma = random_tensor(&mut rng, &[4], true);
        let beta = random_tensor(&mut rng, &[4], true);
        let w = random_tensor(&mut rng, &[1, 4, 7, 7], false);

        let fused = x
            .conv_unit(&k, &gamma, &beta, 1, 1, 1, Some(Activation::Silu))
            .unwrap();
        fused.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let fused_grads: Vec<Vec<f64>> = [&x, &k, &gamma, &beta]
            .iter()
            .map(|t| t.take_grad().unwrap())
            .collect();

        let plain = x
            .conv2d(&k, 1, 1, 1)
            .unwrap()
            .channel_affine(&gamma, &beta)
            .unwrap()
            .silu()
            .unwrap();
        plain.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let plain_grads: Vec<Vec<f64>> = [&x, &k, &gamma, &beta]
            .iter()
            .map(|t| t.take_grad().unwrap())
            .collect();

        for (f, p) in fused_grads.iter().zip(&plain_grads) {
            assert_close(f, p, 1e-12);
        }
    }
}
