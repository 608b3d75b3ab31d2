//! Forward and backward kernels over flat slices.
//!
//! Convolution is implemented once for three spatial axes; 2D convolution
//! runs through the same code with a depth-1 input and kernel.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Geometry of a cross-correlation over `(depth, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        cin: usize,
        cout: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for ax in 0..3 {
            let (n, k, s, p) = (input[ax], kernel[ax], stride[ax], pad[ax]);
            if k % 2 == 0 {
                return Err(Error::invalid(op, format!("kernel size {k} must be odd")));
            }
            if s == 0 {
                return Err(Error::invalid(op, "stride must be positive"));
            }
            if n == 0 {
                return Err(Error::invalid(op, "input has a zero-sized spatial axis"));
            }
            let span = n + 2 * p;
            if span < k || (span - k) % s != 0 {
                return Err(Error::invalid(
                    op,
                    format!("({n} + 2*{p} - {k}) / {s} + 1 is not a positive integer"),
                ));
            }
            output[ax] = (span - k) / s + 1;
        }
        Ok(ConvGeom {
            cin,
            cout,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_plane(&self) -> usize {
        self.output.iter().product()
    }
}

/// Output indices `o` along one axis whose source `o*stride + k - pad` is in range.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let (out_len, in_len, s, p, k) = (
        out_len as isize,
        in_len as isize,
        stride as isize,
        pad as isize,
        k as isize,
    );
    let lo = if k >= p { 0 } else { (p - k + s - 1) / s };
    let hi_src = in_len - 1 + p - k;
    let hi = if hi_src < 0 { 0 } else { (hi_src / s + 1).min(out_len) };
    (lo as usize, hi.max(lo) as usize)
}

#[inline]
fn axpy<R: Real>(alpha: R, x: &[R], y: &mut [R]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Eight independent partial sums so the loop vectorizes; the combination
/// order is fixed, so results do not depend on threading.
#[inline]
fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let mut acc = [R::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = R::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads() > 1
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Runs `f(index, chunk)` over consecutive `chunk`-sized pieces of `buf`,
/// in parallel when a multi-threaded pool is active.
fn for_each_chunk<R: Real>(buf: &mut [R], chunk: usize, f: impl Fn(usize, &mut [R]) + Sync + Send) {
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = parallel_enabled;
    buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Upper bound on im2col scratch, in elements.
const COL_BUDGET: usize = 1 << 18;

impl ConvGeom {
    /// A 1×1×1 kernel with unit stride and no padding reads the input as is.
    pub fn is_pointwise(&self) -> bool {
        self.taps() == 1 && self.stride == [1; 3] && self.pad == [0; 3]
    }

    /// Output positions per im2col tile.
    pub fn col_tile(&self) -> usize {
        (COL_BUDGET / (self.cin * self.taps()).max(1)).clamp(1, self.out_plane())
    }

    /// Scratch the convolution kernels need.
    pub fn col_len(&self) -> usize {
        if self.is_pointwise() {
            0
        } else {
            self.cin * self.taps() * self.col_tile()
        }
    }

    fn tap(&self, t: usize) -> [usize; 3] {
        let [_, kh, kw] = self.kernel;
        [t / (kh * kw), (t / kw) % kh, t % kw]
    }

    /// Input row `(iz, iy)` under tap `k` for output row `(oz, oy)`, if in range.
    #[inline]
    fn source_row(&self, oz: usize, oy: usize, k: [usize; 3]) -> Option<usize> {
        let iz = (oz * self.stride[0] + k[0]).checked_sub(self.pad[0]).filter(|&v| v < self.input[0])?;
        let iy = (oy * self.stride[1] + k[1]).checked_sub(self.pad[1]).filter(|&v| v < self.input[1])?;
        Some((iz * self.input[1] + iy) * self.input[2])
    }
}

/// Calls `f(oz, oy, ox0, ox1, j0)` for each output row segment covering
/// positions `p0..p0 + len`; the segment starts at tile offset `j0`.
#[inline]
fn for_rows(g: &ConvGeom, p0: usize, len: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let [_, oh, ow] = g.output;
    let end = p0 + len;
    let mut p = p0;
    while p < end {
        let (row, ox0) = (p / ow, p % ow);
        let ox1 = ow.min(ox0 + end - p);
        f(row / oh, row % oh, ox0, ox1, p - p0);
        p += ox1 - ox0;
    }
}

/// `col[(ci·taps + t)·len + j]` = input under tap `t` at output position
/// `p0 + j`, zero where the tap falls in padding.
fn im2col<R: Real>(g: &ConvGeom, x: &[R], p0: usize, len: usize, col: &mut [R]) {
    let (taps, pin) = (g.taps(), g.in_plane());
    let (ow, iw, sx, px) = (g.output[2], g.input[2], g.stride[2], g.pad[2]);
    for_each_chunk(&mut col[..g.cin * taps * len], len, |r, dst| {
        let (ci, t) = (r / taps, r % taps);
        let src = &x[ci * pin..(ci + 1) * pin];
        let k = g.tap(t);
        let (vx0, vx1) = valid_range(ow, iw, sx, px, k[2]);
        for_rows(g, p0, len, |oz, oy, ox0, ox1, j0| {
            let seg = &mut dst[j0..j0 + ox1 - ox0];
            let (a, b) = (ox0.max(vx0), ox1.min(vx1));
            let Some(base) = g.source_row(oz, oy, k).filter(|_| a < b) else {
                seg.fill(R::zero());
                return;
            };
            seg[..a - ox0].fill(R::zero());
            seg[b - ox0..].fill(R::zero());
            let inner = &mut seg[a - ox0..b - ox0];
            if sx == 1 {
                let s = base + a + k[2] - px;
                inner.copy_from_slice(&src[s..s + (b - a)]);
            } else {
                for (j, v) in inner.iter_mut().enumerate() {
                    *v = src[base + (a + j) * sx + k[2] - px];
                }
            }
        });
    });
}

/// Scatter-adds a column tile back onto the input planes.
fn col2im_add<R: Real>(g: &ConvGeom, col: &[R], p0: usize, len: usize, gin: &mut [R]) {
    let taps = g.taps();
    let (ow, iw, sx, px) = (g.output[2], g.input[2], g.stride[2], g.pad[2]);
    for_each_chunk(gin, g.in_plane(), |ci, plane| {
        for t in 0..taps {
            let src = &col[(ci * taps + t) * len..][..len];
            let k = g.tap(t);
            let (vx0, vx1) = valid_range(ow, iw, sx, px, k[2]);
            for_rows(g, p0, len, |oz, oy, ox0, ox1, j0| {
                let (a, b) = (ox0.max(vx0), ox1.min(vx1));
                let Some(base) = g.source_row(oz, oy, k).filter(|_| a < b) else {
                    return;
                };
                let seg = &src[j0 + a - ox0..j0 + b - ox0];
                if sx == 1 {
                    let s = base + a + k[2] - px;
                    for (o, &v) in plane[s..s + (b - a)].iter_mut().zip(seg) {
                        *o += v;
                    }
                } else {
                    for (j, &v) in seg.iter().enumerate() {
                        plane[base + (a + j) * sx + k[2] - px] += v;
                    }
                }
            });
        }
    });
}

/// `out[co, p0..p0+len] += Σ_k w[co, k] · col[k, ..]`.
fn gemm_tile<R: Real>(w: &[R], col: &[R], kdim: usize, len: usize, out: &mut [R], pout: usize, p0: usize) {
    for_each_chunk(out, pout, |co, row| {
        let r = &mut row[p0..p0 + len];
        let wrow = &w[co * kdim..(co + 1) * kdim];
        for (kk, &wv) in wrow.iter().enumerate() {
            axpy(wv, &col[kk * len..(kk + 1) * len], r);
        }
    });
}

/// `out` is overwritten; `col` needs [`ConvGeom::col_len`] elements.
pub fn conv_forward<R: Real>(g: &ConvGeom, x: &[R], w: &[R], bias: Option<&[R]>, out: &mut [R], col: &mut [R]) {
    let pout = g.out_plane();
    let kdim = g.cin * g.taps();
    for (co, row) in out.chunks_mut(pout).enumerate() {
        row.fill(bias.map_or(R::zero(), |b| b[co]));
    }
    if g.is_pointwise() {
        gemm_tile(w, x, kdim, pout, out, pout, 0);
        return;
    }
    let tile = g.col_tile();
    for p0 in (0..pout).step_by(tile) {
        let len = tile.min(pout - p0);
        im2col(g, x, p0, len, col);
        gemm_tile(w, &col[..kdim * len], kdim, len, out, pout, p0);
    }
}

/// Gradient with respect to the input; `gin` is overwritten.
pub fn conv_backward_input<R: Real>(g: &ConvGeom, gout: &[R], w: &[R], gin: &mut [R], col: &mut [R]) {
    let (pin, pout) = (g.in_plane(), g.out_plane());
    let kdim = g.cin * g.taps();
    if g.is_pointwise() {
        for_each_chunk(gin, pin, |ci, row| {
            row.fill(R::zero());
            for co in 0..g.cout {
                axpy(w[co * kdim + ci], &gout[co * pout..(co + 1) * pout], row);
            }
        });
        return;
    }
    gin.fill(R::zero());
    let tile = g.col_tile();
    for p0 in (0..pout).step_by(tile) {
        let len = tile.min(pout - p0);
        for_each_chunk(&mut col[..kdim * len], len, |kk, row| {
            row.fill(R::zero());
            for co in 0..g.cout {
                axpy(w[co * kdim + kk], &gout[co * pout + p0..][..len], row);
            }
        });
        col2im_add(g, &col[..kdim * len], p0, len, gin);
    }
}

/// Gradient with respect to the weights; `gw` is overwritten.
pub fn conv_backward_weight<R: Real>(g: &ConvGeom, gout: &[R], x: &[R], gw: &mut [R], col: &mut [R]) {
    let pout = g.out_plane();
    let kdim = g.cin * g.taps();
    if g.is_pointwise() {
        for_each_chunk(gw, kdim, |co, row| {
            let go = &gout[co * pout..(co + 1) * pout];
            for (ci, v) in row.iter_mut().enumerate() {
                *v = dot(go, &x[ci * pout..(ci + 1) * pout]);
            }
        });
        return;
    }
    gw.fill(R::zero());
    let tile = g.col_tile();
    for p0 in (0..pout).step_by(tile) {
        let len = tile.min(pout - p0);
        im2col(g, x, p0, len, col);
        let col = &col[..kdim * len];
        for_each_chunk(gw, kdim, |co, row| {
            let go = &gout[co * pout + p0..][..len];
            for (kk, v) in row.iter_mut().enumerate() {
                *v += dot(go, &col[kk * len..(kk + 1) * len]);
            }
        });
    }
}

pub fn conv_backward_bias<R: Real>(g: &ConvGeom, gout: &[R], gb: &mut [R]) {
    let pout = g.out_plane();
    for (co, b) in gb.iter_mut().enumerate() {
        *b = gout[co * pout..(co + 1) * pout].iter().copied().sum();
    }
}

/// `c = a · b` with `a: m×k`, `b: k×n`; `c` is overwritten.
pub fn matmul_nn<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        crow.fill(R::zero());
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn matmul_nt_acc<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`.
pub fn matmul_tn_acc<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            axpy(a[p * m + i], brow, &mut c[i * n..(i + 1) * n]);
        }
    }
}

/// Source sample for one output index of a half-pixel-center linear resize.
///
/// The neighbour pair is clamped to the input range but the weight is not,
/// so samples past the outermost centres extrapolate linearly.
#[inline]
pub fn lerp_source(o: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    if in_len == 1 {
        return (0, 0, 0.0);
    }
    let src = (o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let i0 = (src.floor().max(0.0) as usize).min(in_len - 2);
    (i0, i0 + 1, src - i0 as f64)
}

fn lerp_table<R: Real>(in_len: usize, out_len: usize) -> Vec<(usize, usize, R)> {
    (0..out_len)
        .map(|t| {
            let (i0, i1, w) = lerp_source(t, in_len, out_len);
            (i0, i1, R::lit(w))
        })
        .collect()
}

/// Linear resize of the middle axis of an `outer × in_len × inner` buffer.
pub fn resize_axis_forward<R: Real>(x: &[R], out: &mut [R], outer: usize, in_len: usize, out_len: usize, inner: usize) {
    let table = lerp_table::<R>(in_len, out_len);
    for o in 0..outer {
        let src = &x[o * in_len * inner..(o + 1) * in_len * inner];
        let dst = &mut out[o * out_len * inner..(o + 1) * out_len * inner];
        if inner == 1 {
            for (d, &(i0, i1, w)) in dst.iter_mut().zip(&table) {
                *d = src[i0] + w * (src[i1] - src[i0]);
            }
            continue;
        }
        for (t, &(i0, i1, w)) in table.iter().enumerate() {
            let a = &src[i0 * inner..(i0 + 1) * inner];
            let b = &src[i1 * inner..(i1 + 1) * inner];
            for ((d, &av), &bv) in dst[t * inner..(t + 1) * inner].iter_mut().zip(a).zip(b) {
                *d = av + w * (bv - av);
            }
        }
    }
}

/// Adjoint of [`resize_axis_forward`]; accumulates into `gin`.
pub fn resize_axis_backward<R: Real>(gout: &[R], gin: &mut [R], outer: usize, in_len: usize, out_len: usize, inner: usize) {
    let table = lerp_table::<R>(in_len, out_len);
    for o in 0..outer {
        let go = &gout[o * out_len * inner..(o + 1) * out_len * inner];
        let gi = &mut gin[o * in_len * inner..(o + 1) * in_len * inner];
        if inner == 1 {
            for (&g, &(i0, i1, w)) in go.iter().zip(&table) {
                gi[i0] += (R::one() - w) * g;
                gi[i1] += w * g;
            }
            continue;
        }
        for (t, &(i0, i1, w)) in table.iter().enumerate() {
            let one_minus = R::one() - w;
            let g = &go[t * inner..(t + 1) * inner];
            for (d, &gv) in gi[i0 * inner..(i0 + 1) * inner].iter_mut().zip(g) {
                *d += one_minus * gv;
            }
            for (d, &gv) in gi[i1 * inner..(i1 + 1) * inner].iter_mut().zip(g) {
                *d += w * gv;
            }
        }
    }
}

/// Block-mean pooling of `c × d × h × w` with per-axis `factor`; edge blocks
/// average only the voxels they contain.
pub fn avg_pool_forward<R: Real>(x: &[R], out: &mut [R], c: usize, dims: [usize; 3], factor: [usize; 3], out_dims: [usize; 3]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out_dims;
    out.fill(R::zero());
    for ch in 0..c {
        let xin = &x[ch * d * h * w..];
        let o = &mut out[ch * od * oh * ow..][..od * oh * ow];
        for z in 0..d {
            for y in 0..h {
                let row = &xin[(z * h + y) * w..][..w];
                let orow = &mut o[((z / factor[0]) * oh + y / factor[1]) * ow..][..ow];
                for (xi, &v) in row.iter().enumerate() {
                    orow[xi / factor[2]] += v;
                }
            }
        }
        for (i, v) in o.iter_mut().enumerate() {
            let (bz, by, bx) = (i / (oh * ow), (i / ow) % oh, i % ow);
            let cnt = block_len(bz, factor[0], d) * block_len(by, factor[1], h) * block_len(bx, factor[2], w);
            *v /= R::lit(cnt as f64);
        }
    }
}

#[inline]
fn block_len(b: usize, f: usize, n: usize) -> usize {
    (n - b * f).min(f)
}

pub fn avg_pool_backward<R: Real>(gout: &[R], gin: &mut [R], c: usize, dims: [usize; 3], factor: [usize; 3], out_dims: [usize; 3]) {
    let [d, h, w] = dims;
    let [_, oh, ow] = out_dims;
    let plane_out: usize = out_dims.iter().product();
    for ch in 0..c {
        let go = &gout[ch * plane_out..][..plane_out];
        let gi = &mut gin[ch * d * h * w..][..d * h * w];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (bz, by, bx) = (z / factor[0], y / factor[1], x / factor[2]);
                    let cnt = block_len(bz, factor[0], d) * block_len(by, factor[1], h) * block_len(bx, factor[2], w);
                    gi[(z * h + y) * w + x] += go[(bz * oh + by) * ow + bx] / R::lit(cnt as f64);
                }
            }
        }
    }
}
