use smallvec::SmallVec;

use super::kernels::{self, ConvGeom};
use super::{Node, Op, Pool, Tape, Var};
use crate::error::{Error, Result};
use crate::flops::rules;
use crate::tensor::{numel, split_at_axis, Real, Shape};

impl<R: Real> Tape<R> {
    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, op: Op<R>, name: &'static str, f: impl Fn(R) -> R) -> Result<Var> {
        let n = self.nodes[x.0].value.numel();
        let mut buf = self.pool.take(n);
        for (o, &v) in buf.iter_mut().zip(self.nodes[x.0].value.data()) {
            *o = f(v);
        }
        let shape = self.nodes[x.0].value.shape().into();
        self.record(shape, buf, op, &[x], rules::elementwise(n), name)
    }

    fn map_binary(&mut self, a: Var, b: Var, op: Op<R>, name: &'static str, f: impl Fn(R, R) -> R) -> Result<Var> {
        self.check_same(name, a, b)?;
        let n = self.nodes[a.0].value.numel();
        let mut buf = self.pool.take(n);
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        for ((o, &x), &y) in buf.iter_mut().zip(da).zip(db) {
            *o = f(x, y);
        }
        let shape = self.nodes[a.0].value.shape().into();
        self.record(shape, buf, op, &[a, b], rules::elementwise(n), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.map_binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.map_binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.map_binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: R) -> Result<Var> {
        self.map_unary(x, Op::Scale(x, c), "scale", |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: R) -> Result<Var> {
        self.map_unary(x, Op::AddScalar(x), "add_scalar", |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Neg(x), "neg", |v| -v)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Relu(x), "relu", |v| if v <= R::zero() { R::zero() } else { v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    /// `s · x` for a one-element tensor `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(s), &[1]));
        }
        let c = self.value(s).item();
        let n = self.value(x).numel();
        let mut buf = self.pool.take(n);
        for (o, &v) in buf.iter_mut().zip(self.nodes[x.0].value.data()) {
            *o = c * v;
        }
        let shape = self.shape(x).into();
        self.record(shape, buf, Op::ScaleBy { s, x }, &[s, x], rules::elementwise(n), "scale_by")
    }

    /// Scales channel `c` (leading axis) of `x` by `s[c]`.
    pub fn scale_channels(&mut self, s: Var, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() || self.shape(s) != [xs[0]] {
            return Err(Error::shape("scale_channels", self.shape(s), xs));
        }
        let n = self.value(x).numel();
        let inner = n / xs[0];
        let mut buf = self.pool.take(n);
        let (sd, xd) = (self.nodes[s.0].value.data(), self.nodes[x.0].value.data());
        for (c, (o, v)) in buf.chunks_mut(inner).zip(xd.chunks(inner)).enumerate() {
            for (o, &v) in o.iter_mut().zip(v) {
                *o = sd[c] * v;
            }
        }
        let shape = self.shape(x).into();
        self.record(shape, buf, Op::ScaleChannels { s, x }, &[s, x], rules::elementwise(n), "scale_channels")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut buf = self.pool.take(m * n);
        kernels::matmul_nn(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut buf, m, k, n);
        self.record(Shape::from_slice(&[m, n]), buf, Op::MatMul(a, b), &[a, b], rules::matmul(m, k, n), "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.shape();
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let mut buf = self.pool.take(m * n);
        let src = self.nodes[x.0].value.data();
        for i in 0..m {
            for j in 0..n {
                buf[j * m + i] = src[i * n + j];
            }
        }
        self.record(Shape::from_slice(&[n, m]), buf, Op::Transpose(x), &[x], 0, "transpose")
    }

    /// Adds `b[j]` to every row of the matrix `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::shape("add_row_bias", sx, sb));
        }
        let n = sx[0] * sx[1];
        let cols = sx[1];
        let mut buf = self.pool.take(n);
        let (xd, bd) = (self.nodes[x.0].value.data(), self.nodes[b.0].value.data());
        for (orow, xrow) in buf.chunks_mut(cols).zip(xd.chunks(cols)) {
            for ((o, &v), &bv) in orow.iter_mut().zip(xrow).zip(bd) {
                *o = v + bv;
            }
        }
        let shape = self.shape(x).into();
        self.record(shape, buf, Op::AddRowBias { x, b }, &[x, b], rules::elementwise(n), "add_row_bias")
    }

    fn conv(&mut self, name: &'static str, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_shape: Shape) -> Result<Var> {
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(name, self.shape(b), &[geom.cout]));
            }
        }
        let n = geom.cout * geom.out_plane();
        let mut buf = self.pool.take(n);
        let mut col = self.pool.take(geom.col_len());
        kernels::conv_forward(
            &geom,
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            b.map(|b| self.nodes[b.0].value.data()),
            &mut buf,
            &mut col,
        );
        self.pool.give(col);
        let flops = rules::conv(geom.cin, geom.cout, geom.taps(), geom.out_plane(), b.is_some());
        let mut parents: SmallVec<[Var; 3]> = SmallVec::from_slice(&[x, w]);
        parents.extend(b);
        self.record(out_shape, buf, Op::Conv { x, w, b, geom }, &parents, flops, name)
    }

    /// Cross-correlation of `x: C_in×H×W` with `w: C_out×C_in×kh×kw`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let geom = ConvGeom::new("conv2d", sx[0], sw[0], [1, sx[1], sx[2]], [1, sw[2], sw[3]], [1, stride, stride], [0, pad, pad])?;
        let shape = Shape::from_slice(&[sw[0], geom.output[1], geom.output[2]]);
        self.conv("conv2d", x, w, b, geom, shape)
    }

    /// Cross-correlation of `x: C_in×D×H×W` with `w: C_out×C_in×kd×kh×kw`, zero padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 5 || sw[1] != sx[0] {
            return Err(Error::shape("conv3d", sx, sw));
        }
        let geom = ConvGeom::new(
            "conv3d",
            sx[0],
            sw[0],
            [sx[1], sx[2], sx[3]],
            [sw[2], sw[3], sw[4]],
            [stride; 3],
            [pad; 3],
        )?;
        let shape = Shape::from_slice(&[sw[0], geom.output[0], geom.output[1], geom.output[2]]);
        self.conv("conv3d", x, w, b, geom, shape)
    }

    /// Arithmetic mean over `axis`; the axis is removed.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let s = self.nodes[x.0].value.shape();
        let (outer, len, inner) = split_at_axis(s, axis);
        let mut shape: Shape = s.into();
        shape.remove(axis);
        let mut buf = self.pool.take_zeroed(outer * inner);
        let src = self.nodes[x.0].value.data();
        for o in 0..outer {
            let dst = &mut buf[o * inner..(o + 1) * inner];
            for a in 0..len {
                for (d, &v) in dst.iter_mut().zip(&src[(o * len + a) * inner..][..inner]) {
                    *d += v;
                }
            }
        }
        let inv = R::one() / R::lit(len as f64);
        for v in buf.iter_mut() {
            *v *= inv;
        }
        let flops = rules::mean_axis(outer * len * inner, outer * inner);
        self.record(shape, buf, Op::MeanAxis { x, axis }, &[x], flops, "mean_axis")
    }

    /// Inserts a new axis of length `size` at position `axis`, replicating `x`.
    pub fn broadcast_axis(&mut self, x: Var, axis: usize, size: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if axis > rank {
            return Err(Error::InvalidAxis {
                op: "broadcast_axis",
                axis,
                rank,
            });
        }
        if size == 0 {
            return Err(Error::invalid("broadcast_axis", "size must be at least 1"));
        }
        let mut shape: Shape = self.shape(x).into();
        shape.insert(axis, size);
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut buf = self.pool.take(outer * size * inner);
        let src = self.nodes[x.0].value.data();
        if inner == 1 {
            for (dst, &v) in buf.chunks_exact_mut(size).zip(src) {
                dst.fill(v);
            }
        } else {
            for o in 0..outer {
                let row = &src[o * inner..(o + 1) * inner];
                for a in 0..size {
                    buf[(o * size + a) * inner..][..inner].copy_from_slice(row);
                }
            }
        }
        self.record(shape, buf, Op::Broadcast { x, axis }, &[x], 0, "broadcast_axis")
    }

    /// Half-pixel-center linear resize of one axis to `len`.
    pub fn resize_axis(&mut self, x: Var, axis: usize, len: usize) -> Result<Var> {
        self.check_axis("resize_axis", x, axis)?;
        if len == 0 {
            return Err(Error::invalid("resize_axis", "target length must be at least 1"));
        }
        let s = self.nodes[x.0].value.shape();
        let (outer, in_len, inner) = split_at_axis(s, axis);
        let mut shape: Shape = s.into();
        shape[axis] = len;
        let mut buf = self.pool.take(outer * len * inner);
        kernels::resize_axis_forward(self.nodes[x.0].value.data(), &mut buf, outer, in_len, len, inner);
        let n = buf.len();
        self.record(shape, buf, Op::ResizeAxis { x, axis }, &[x], rules::resize_axis(n), "resize_axis")
    }

    /// Trilinear resize of a `C×D×H×W` volume as three separable linear passes.
    /// Axes whose size already matches are left untouched.
    pub fn trilinear_resize(&mut self, x: Var, dims: [usize; 3]) -> Result<Var> {
        let s = self.nodes[x.0].value.shape();
        if s.len() != 4 {
            return Err(Error::invalid("trilinear_resize", format!("expected C×D×H×W, got {s:?}")));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("trilinear_resize", "target dims must be at least 1"));
        }
        let mut y = x;
        for (ax, &len) in dims.iter().enumerate() {
            if self.shape(y)[ax + 1] != len {
                y = self.resize_axis(y, ax + 1, len)?;
            }
        }
        Ok(y)
    }

    /// Block-mean pooling of a `C×D×H×W` volume; output dims are `ceil(D/f)`.
    pub fn avg_pool3d(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let s = self.nodes[x.0].value.shape();
        if s.len() != 4 || factor.contains(&0) {
            return Err(Error::invalid("avg_pool3d", format!("shape {s:?}, factor {factor:?}")));
        }
        let (c, dims) = (s[0], [s[1], s[2], s[3]]);
        let out_dims = [0, 1, 2].map(|a| dims[a].div_ceil(factor[a]));
        let n_out = c * numel(&out_dims);
        let mut buf = self.pool.take(n_out);
        kernels::avg_pool_forward(self.nodes[x.0].value.data(), &mut buf, c, dims, factor, out_dims);
        let shape = Shape::from_slice(&[c, out_dims[0], out_dims[1], out_dims[2]]);
        let flops = rules::avg_pool(c * numel(&dims), n_out);
        self.record(shape, buf, Op::AvgPool { x, factor }, &[x], flops, "avg_pool3d")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let s = self.nodes[x.0].value.shape();
        let (outer, len, inner) = split_at_axis(s, axis);
        let n = outer * len * inner;
        let mut buf = self.pool.take(n);
        let src = self.nodes[x.0].value.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut m = R::neg_infinity();
                for a in 0..len {
                    m = m.max(src[at(a)]);
                }
                let mut total = R::zero();
                for a in 0..len {
                    let e = (src[at(a)] - m).exp();
                    buf[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    buf[at(a)] /= total;
                }
            }
        }
        let shape = s.into();
        self.record(shape, buf, Op::Softmax { x, axis }, &[x], rules::softmax(n), "softmax")
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: R) -> Result<Var> {
        let s = self.nodes[x.0].value.shape();
        let Some(&cols) = s.last() else {
            return Err(Error::invalid("layer_norm", "scalar input"));
        };
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::shape("layer_norm", self.shape(gain), &[cols]));
        }
        if eps <= R::zero() {
            return Err(Error::invalid("layer_norm", "epsilon must be positive"));
        }
        let n = numel(s);
        let rows = n / cols;
        let mut buf = self.pool.take(n);
        let mut stats = self.pool.take(2 * rows);
        let (xd, gd, bd) = (
            self.nodes[x.0].value.data(),
            self.nodes[gain.0].value.data(),
            self.nodes[bias.0].value.data(),
        );
        let inv_n = R::one() / R::lit(cols as f64);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<R>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_n;
            let rstd = R::one() / (var + eps).sqrt();
            stats[2 * r] = mean;
            stats[2 * r + 1] = rstd;
            for (j, o) in buf[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                *o = (row[j] - mean) * rstd * gd[j] + bd[j];
            }
        }
        let shape = s.into();
        self.record(shape, buf, Op::LayerNorm { x, gain, bias, stats }, &[x, gain, bias], rules::layer_norm(n), "layer_norm")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let mut buf = self.pool.take(1);
        buf[0] = self.value(x).sum();
        self.record(Shape::new(), buf, Op::Sum(x), &[x], rules::sum(n), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let mut buf = self.pool.take(1);
        buf[0] = self.value(x).sum() / R::lit(n as f64);
        self.record(Shape::new(), buf, Op::Mean(x), &[x], rules::mean(n), "mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.nodes[x.0].value.shape();
        if numel(s) != numel(shape) {
            return Err(Error::shape("reshape", s, shape));
        }
        let mut buf = self.pool.take(numel(shape));
        buf.copy_from_slice(self.nodes[x.0].value.data());
        self.record(shape.into(), buf, Op::Reshape(x), &[x], 0, "reshape")
    }

    /// The slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let s = self.nodes[x.0].value.shape();
        if len == 0 || start + len > s[axis] {
            return Err(Error::invalid("narrow", format!("[{start}, {}) exceeds axis of length {}", start + len, s[axis])));
        }
        let (outer, in_len, inner) = split_at_axis(s, axis);
        let mut shape: Shape = s.into();
        shape[axis] = len;
        let mut buf = self.pool.take(outer * len * inner);
        let src = self.nodes[x.0].value.data();
        for o in 0..outer {
            buf[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[(o * in_len + start) * inner..][..len * inner]);
        }
        self.record(shape, buf, Op::Narrow { x, axis, start }, &[x], 0, "narrow")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat", "no inputs"));
        };
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(base, axis);
        let mut shape: Shape = base.into();
        shape[axis] = total;
        let mut buf = self.pool.take(outer * total * inner);
        let mut offset = 0;
        for &p in parts {
            let len = self.nodes[p.0].value.shape()[axis];
            let src = self.nodes[p.0].value.data();
            for o in 0..outer {
                buf[(o * total + offset) * inner..][..len * inner]
                    .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let op = Op::Concat {
            parts: SmallVec::from_slice(parts),
            axis,
        };
        self.record(shape, buf, op, parts, 0, "concat")
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        self.check_same("bce_with_logits", logits, target)?;
        let (zd, td) = (self.nodes[logits.0].value.data(), self.nodes[target.0].value.data());
        let n = zd.len();
        let mut total = R::zero();
        for (&z, &t) in zd.iter().zip(td) {
            total += z.max(R::zero()) - z * t + (-z.abs()).exp().ln_1p();
        }
        let mut buf = self.pool.take(1);
        buf[0] = total / R::lit(n as f64);
        self.record(Shape::new(), buf, Op::BceWithLogits { logits, target }, &[logits, target], rules::bce_with_logits(n), "bce_with_logits")
    }

    /// `-log softmax(logits)[label]` over a vector of class scores.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let zd = self.nodes[logits.0].value.data();
        let k = zd.len();
        if label >= k {
            return Err(Error::invalid("cross_entropy", format!("label {label} out of range for {k} classes")));
        }
        let m = zd.iter().copied().fold(R::neg_infinity(), R::max);
        let lse = m + zd.iter().map(|&z| (z - m).exp()).sum::<R>().ln();
        let mut buf = self.pool.take(1);
        buf[0] = lse - zd[label];
        self.record(Shape::new(), buf, Op::CrossEntropy { logits, label }, &[logits], rules::cross_entropy(k), "cross_entropy")
    }
}

#[inline]
fn sigmoid<R: Real>(v: R) -> R {
    if v >= R::zero() {
        R::one() / (R::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (R::one() + e)
    }
}

/// Zero-initialized gradient slot for `v`, or `None` if `v` is not differentiable.
fn slot<'a, R: Real>(nodes: &[Node<R>], grads: &'a mut [Option<Vec<R>>], pool: &mut Pool<R>, v: Var) -> Option<&'a mut Vec<R>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let g = &mut grads[v.0];
    if g.is_none() {
        *g = Some(pool.take_zeroed(nodes[v.0].value.numel()));
    }
    g.as_mut()
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(super) fn backward_node<R: Real>(nodes: &[Node<R>], grads: &mut [Option<Vec<R>>], pool: &mut Pool<R>, i: usize, g: &[R]) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(gv) = slot(nodes, grads, pool, v) {
                    add_into(gv, g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, pool, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(nodes, grads, pool, *b) {
                for (d, &s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Mul(a, b) => {
            for (v, other) in [(*a, *b), (*b, *a)] {
                if let Some(gv) = slot(nodes, grads, pool, v) {
                    for ((d, &s), &o) in gv.iter_mut().zip(g).zip(val(other)) {
                        *d += s * o;
                    }
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d += *c * s;
                }
            }
        }
        Op::AddScalar(x) => {
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                add_into(gx, g);
            }
        }
        Op::Neg(x) => {
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Relu(x) => {
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                for ((d, &s), &v) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if v > R::zero() {
                        *d += s;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                for ((d, &s), &y) in gx.iter_mut().zip(g).zip(out) {
                    *d += s * y * (R::one() - y);
                }
            }
        }
        Op::ScaleBy { s, x } => {
            let c = val(*s)[0];
            if let Some(gs) = slot(nodes, grads, pool, *s) {
                gs[0] += g.iter().zip(val(*x)).map(|(&a, &b)| a * b).sum::<R>();
            }
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                for (d, &v) in gx.iter_mut().zip(g) {
                    *d += c * v;
                }
            }
        }
        Op::ScaleChannels { s, x } => {
            let sd = val(*s);
            let inner = g.len() / sd.len();
            if let Some(gs) = slot(nodes, grads, pool, *s) {
                for (c, d) in gs.iter_mut().enumerate() {
                    let range = c * inner..(c + 1) * inner;
                    *d += g[range.clone()].iter().zip(&val(*x)[range]).map(|(&a, &b)| a * b).sum::<R>();
                }
            }
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                for (c, (d, gc)) in gx.chunks_mut(inner).zip(g.chunks(inner)).enumerate() {
                    for (d, &v) in d.iter_mut().zip(gc) {
                        *d += sd[c] * v;
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if let Some(ga) = slot(nodes, grads, pool, *a) {
                kernels::matmul_nt_acc(g, val(*b), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, pool, *b) {
                kernels::matmul_tn_acc(val(*a), g, gb, k, m, n);
            }
        }
        Op::Transpose(x) => {
            let s = nodes[x.0].value.shape();
            let (m, n) = (s[0], s[1]);
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::AddRowBias { x, b } => {
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                add_into(gx, g);
            }
            if let Some(gb) = slot(nodes, grads, pool, *b) {
                let cols = gb.len();
                for row in g.chunks(cols) {
                    add_into(gb, row);
                }
            }
        }
        Op::Conv { x, w, b, geom } => {
            let mut col = pool.take(geom.col_len());
            if nodes[x.0].requires_grad {
                let mut tmp = pool.take(nodes[x.0].value.numel());
                kernels::conv_backward_input(geom, g, val(*w), &mut tmp, &mut col);
                if let Some(gx) = slot(nodes, grads, pool, *x) {
                    add_into(gx, &tmp);
                }
                pool.give(tmp);
            }
            if nodes[w.0].requires_grad {
                let mut tmp = pool.take(nodes[w.0].value.numel());
                kernels::conv_backward_weight(geom, g, val(*x), &mut tmp, &mut col);
                if let Some(gw) = slot(nodes, grads, pool, *w) {
                    add_into(gw, &tmp);
                }
                pool.give(tmp);
            }
            if let Some(b) = b {
                if nodes[b.0].requires_grad {
                    let mut tmp = pool.take(geom.cout);
                    kernels::conv_backward_bias(geom, g, &mut tmp);
                    if let Some(gb) = slot(nodes, grads, pool, *b) {
                        add_into(gb, &tmp);
                    }
                    pool.give(tmp);
                }
            }
            pool.give(col);
        }
        Op::MeanAxis { x, axis } => {
            let (outer, len, inner) = split_at_axis(nodes[x.0].value.shape(), *axis);
            let inv = R::one() / R::lit(len as f64);
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                for o in 0..outer {
                    let go = &g[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        for (d, &s) in gx[(o * len + a) * inner..][..inner].iter_mut().zip(go) {
                            *d += s * inv;
                        }
                    }
                }
            }
        }
        Op::Broadcast { x, axis } => {
            let (outer, len, inner) = split_at_axis(nodes[i].value.shape(), *axis);
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                if inner == 1 {
                    for (d, row) in gx.iter_mut().zip(g.chunks_exact(len)) {
                        *d += row.iter().copied().fold(R::zero(), |acc, v| acc + v);
                    }
                } else {
                    for o in 0..outer {
                        let dst = &mut gx[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            add_into(dst, &g[(o * len + a) * inner..][..inner]);
                        }
                    }
                }
            }
        }
        Op::ResizeAxis { x, axis } => {
            let (outer, in_len, inner) = split_at_axis(nodes[x.0].value.shape(), *axis);
            let out_len = nodes[i].value.shape()[*axis];
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                kernels::resize_axis_backward(g, gx, outer, in_len, out_len, inner);
            }
        }
        Op::AvgPool { x, factor } => {
            let s = nodes[x.0].value.shape();
            let so = nodes[i].value.shape();
            let (c, dims, out_dims) = (s[0], [s[1], s[2], s[3]], [so[1], so[2], so[3]]);
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                kernels::avg_pool_backward(g, gx, c, dims, *factor, out_dims);
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_at_axis(nodes[i].value.shape(), *axis);
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + j;
                        let dotp: R = (0..len).map(|a| g[at(a)] * out[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] += out[at(a)] * (g[at(a)] - dotp);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, stats } => {
            let cols = nodes[gain.0].value.numel();
            let rows = g.len() / cols;
            let (xd, gd) = (val(*x), val(*gain));
            let xhat = |r: usize, j: usize| (xd[r * cols + j] - stats[2 * r]) * stats[2 * r + 1];
            if let Some(gb) = slot(nodes, grads, pool, *bias) {
                for row in g.chunks(cols) {
                    add_into(gb, row);
                }
            }
            if let Some(gg) = slot(nodes, grads, pool, *gain) {
                for r in 0..rows {
                    for j in 0..cols {
                        gg[j] += g[r * cols + j] * xhat(r, j);
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                let inv_n = R::one() / R::lit(cols as f64);
                for r in 0..rows {
                    let mut mean_d = R::zero();
                    let mut mean_dx = R::zero();
                    for j in 0..cols {
                        let d = g[r * cols + j] * gd[j];
                        mean_d += d;
                        mean_dx += d * xhat(r, j);
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    let rstd = stats[2 * r + 1];
                    for j in 0..cols {
                        let d = g[r * cols + j] * gd[j];
                        gx[r * cols + j] += rstd * (d - mean_d - xhat(r, j) * mean_dx);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                let s = g[0] / R::lit(gx.len() as f64);
                for d in gx.iter_mut() {
                    *d += s;
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                add_into(gx, g);
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, in_len, inner) = split_at_axis(nodes[x.0].value.shape(), *axis);
            let len = nodes[i].value.shape()[*axis];
            if let Some(gx) = slot(nodes, grads, pool, *x) {
                for o in 0..outer {
                    add_into(
                        &mut gx[(o * in_len + start) * inner..][..len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                    );
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_at_axis(nodes[i].value.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.shape()[*axis];
                if let Some(gp) = slot(nodes, grads, pool, p) {
                    for o in 0..outer {
                        add_into(
                            &mut gp[o * len * inner..(o + 1) * len * inner],
                            &g[(o * total + offset) * inner..][..len * inner],
                        );
                    }
                }
                offset += len;
            }
        }
        Op::BceWithLogits { logits, target } => {
            let (zd, td) = (val(*logits), val(*target));
            let scale = g[0] / R::lit(zd.len() as f64);
            if let Some(gz) = slot(nodes, grads, pool, *logits) {
                for ((d, &z), &t) in gz.iter_mut().zip(zd).zip(td) {
                    *d += scale * (sigmoid(z) - t);
                }
            }
            if let Some(gt) = slot(nodes, grads, pool, *target) {
                for (d, &z) in gt.iter_mut().zip(zd) {
                    *d -= scale * z;
                }
            }
        }
        Op::CrossEntropy { logits, label } => {
            let zd = val(*logits);
            let m = zd.iter().copied().fold(R::neg_infinity(), R::max);
            let total: R = zd.iter().map(|&z| (z - m).exp()).sum();
            if let Some(gz) = slot(nodes, grads, pool, *logits) {
                for (k, (d, &z)) in gz.iter_mut().zip(zd).enumerate() {
                    let p = (z - m).exp() / total;
                    let onehot = if k == *label { R::one() } else { R::zero() };
                    *d += g[0] * (p - onehot);
                }
            }
        }
    }
}
