//! Differentiable primitives recorded on a [`Graph`].

use rand::Rng as _;

use super::conv::{conv_output_len, ConvGeometry};
use super::gemm::gemm;
use super::graph::{NormLayout, Op};
use super::{lit, row_major_strides, Float, Graph, Var};
use crate::error::{cfg_err, dim_err, Error, Result};

fn permute_data<F: Float>(data: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    'outer: loop {
        for i in 0..inner {
            out.push(data[offset + i * inner_stride]);
        }
        // advance the odometer over all but the last axis
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                break 'outer;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    out
}

fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Float> Graph<F> {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{op}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, value, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(shape, value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s: F = lit(s);
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    /// `x[..., j] + b[j]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let width = *self.shape(x).last().expect("rank >= 1");
        if self.shape(b) != [width] {
            return Err(dim_err!(
                "add_row: bias shape {:?} does not match last axis {width}",
                self.shape(b)
            ));
        }
        let bias = self.value(b).to_vec();
        let value = self
            .value(x)
            .chunks(width)
            .flat_map(|row| row.iter().zip(&bias).map(|(&v, &c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(shape, value, Op::AddRow(x, b), needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s: F = lit(slope);
        self.unary(x, |v| if v > F::zero() { v } else { v * s }, Op::LeakyRelu(x, s))
    }

    /// `x` for positive inputs, `exp(x) - 1` otherwise.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > F::zero() { v } else { v.exp_m1() },
            Op::Elu(x),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() || shape.contains(&0) {
            return Err(dim_err!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(x)
            ));
        }
        let value = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), needs))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("permute: {perm:?} is not a permutation of rank {}", shape.len()));
        }
        let value = permute_data(self.value(x), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let needs = self.needs(x);
        Ok(self.push(out_shape, value, Op::Permute(x, perm.to_vec()), needs))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(dim_err!("concat: axis {axis} out of range for rank {}", first.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(dim_err!("concat: shape {s:?} incompatible with {first:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!(
                "narrow: [{start}, {}) out of range on axis {axis} of {shape:?}",
                start + len
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(x);
        Ok(self.push(out_shape, value, Op::Narrow { input: x, axis, start }, needs))
    }

    /// Batched matrix product over the trailing two axes. Leading axes must
    /// agree. `trans_a` / `trans_b` transpose the trailing axes of an operand.
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(dim_err!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (m, k) = if trans_a { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (k2, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != k2 {
            return Err(dim_err!("matmul: inner dimensions {k} and {k2} differ ({sa:?} x {sb:?})"));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut value = vec![F::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    trans_a,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut value[i * m * n..(i + 1) * m * n],
                    F::zero(),
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            shape,
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    /// `x · wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let fan_in = *xs.last().expect("rank >= 1");
        if ws.len() != 2 || ws[1] != fan_in {
            return Err(dim_err!("linear: weight {ws:?} cannot consume input {xs:?}"));
        }
        let fan_out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(dim_err!("linear: bias {:?} for {fan_out} outputs", self.shape(b)));
            }
        }
        let rows = self.value(x).len() / fan_in;
        let mut value = vec![F::zero(); rows * fan_out];
        gemm(rows, fan_in, fan_out, self.value(x), false, self.value(w), true, &mut value, F::zero());
        if let Some(b) = b {
            let bias = self.value(b);
            for row in value.chunks_mut(fan_out) {
                for (v, &c) in row.iter_mut().zip(bias) {
                    *v += c;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = fan_out;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            shape,
            value,
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            },
            needs,
        ))
    }

    /// General convolution on `[N, C, D, H, W]` with a
    /// `[C_out, C_in, kd, kh, kw]` kernel.
    pub fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
        dilation: [usize; 3],
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(dim_err!("conv: expected rank-5 input and kernel, got {xs:?} and {ws:?}"));
        }
        if ws[1] != xs[1] {
            return Err(dim_err!(
                "conv: kernel expects {} input channels (axis 1 of {ws:?}) but input has {} (axis 1 of {xs:?})",
                ws[1],
                xs[1]
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(dim_err!("conv: bias {:?} for {} output channels", self.shape(b), ws[0]));
            }
        }
        let geom = ConvGeometry::new(
            xs[0],
            xs[1],
            ws[0],
            [xs[2], xs[3], xs[4]],
            [ws[2], ws[3], ws[4]],
            stride,
            padding,
            dilation,
        )?;
        let value = geom.forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let shape = vec![xs[0], ws[0], geom.output[0], geom.output[1], geom.output[2]];
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(shape, value, Op::Conv { x, w, b, geom }, needs))
    }

    /// `[N, C_in, T]` ⊛ `[C_out, C_in, k]` with symmetric padding.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(dim_err!("conv1d: expected rank-3 input and kernel, got {xs:?} and {ws:?}"));
        }
        let x5 = self.reshape(x, &[xs[0], xs[1], xs[2], 1, 1])?;
        let w5 = self.reshape(w, &[ws[0], ws[1], ws[2], 1, 1])?;
        let y = self.conv(x5, w5, b, [1, 1, 1], [padding, 0, 0], [dilation, 1, 1])?;
        let t = self.shape(y)[2];
        self.reshape(y, &[xs[0], ws[0], t])
    }

    /// `[N, C_in, H, W]` ⊛ `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(dim_err!("conv2d: expected rank-4 input and kernel, got {xs:?} and {ws:?}"));
        }
        let x5 = self.reshape(x, &[xs[0], xs[1], 1, xs[2], xs[3]])?;
        let w5 = self.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let y = self.conv(x5, w5, b, [1, stride, stride], [0, padding, padding], [1, 1, 1])?;
        let s = self.shape(y).to_vec();
        self.reshape(y, &[s[0], s[1], s[3], s[4]])
    }

    /// Max pooling over the three trailing axes of `[N, C, D, H, W]`;
    /// padded positions never win.
    pub fn max_pool3d(&mut self, x: Var, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(dim_err!("max_pool3d: expected rank-5 input, got {xs:?}"));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = conv_output_len(xs[a + 2], kernel[a], stride[a], padding[a], 1).ok_or_else(|| {
                dim_err!(
                    "max_pool3d: axis {} of length {} too small for kernel {}",
                    a + 2,
                    xs[a + 2],
                    kernel[a]
                )
            })?;
        }
        let planes = xs[0] * xs[1];
        let (id, ih, iw) = (xs[2], xs[3], xs[4]);
        let in_plane = id * ih * iw;
        let out_plane = out[0] * out[1] * out[2];
        let src = self.value(x);
        let mut value = Vec::with_capacity(planes * out_plane);
        let mut argmax = Vec::with_capacity(planes * out_plane);
        for p in 0..planes {
            let base = p * in_plane;
            for z in 0..out[0] {
                for y in 0..out[1] {
                    for xo in 0..out[2] {
                        let mut best = F::neg_infinity();
                        let mut best_i = usize::MAX;
                        for a in 0..kernel[0] {
                            let sz = (z * stride[0] + a) as isize - padding[0] as isize;
                            if sz < 0 || sz as usize >= id {
                                continue;
                            }
                            for b in 0..kernel[1] {
                                let sy = (y * stride[1] + b) as isize - padding[1] as isize;
                                if sy < 0 || sy as usize >= ih {
                                    continue;
                                }
                                for c in 0..kernel[2] {
                                    let sx = (xo * stride[2] + c) as isize - padding[2] as isize;
                                    if sx < 0 || sx as usize >= iw {
                                        continue;
                                    }
                                    let i = base + (sz as usize * ih + sy as usize) * iw + sx as usize;
                                    if best_i == usize::MAX || src[i] > best {
                                        best = src[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        value.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
        let shape = vec![xs[0], xs[1], out[0], out[1], out[2]];
        let needs = self.needs(x);
        Ok(self.push(shape, value, Op::MaxPool { x, argmax }, needs))
    }

    /// Mean over the trailing `axes` axes.
    pub fn mean_trailing(&mut self, x: Var, axes: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axes == 0 || axes >= xs.len() {
            return Err(dim_err!("mean_trailing: cannot reduce {axes} axes of {xs:?}"));
        }
        let span: usize = xs[xs.len() - axes..].iter().product();
        let inv: F = F::one() / lit(span as f64);
        let value = self
            .value(x)
            .chunks(span)
            .map(|c| c.iter().copied().sum::<F>() * inv)
            .collect();
        let needs = self.needs(x);
        Ok(self.push(xs[..xs.len() - axes].to_vec(), value, Op::MeanTrailing { x, span }, needs))
    }

    /// `[N, C, H, W] -> [N, C]`: adaptive average pooling to a 1×1 map.
    pub fn adaptive_avg_pool2d(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 4 {
            return Err(dim_err!("adaptive_avg_pool2d: expected rank 4, got {:?}", self.shape(x)));
        }
        self.mean_trailing(x, 2)
    }

    /// `[B, T, D] -> [B, D]`, averaging only the first `lengths[b]` steps.
    pub fn masked_time_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || lengths.len() != xs[0] {
            return Err(dim_err!("masked_time_mean: input {xs:?} with {} lengths", lengths.len()));
        }
        let (t, d) = (xs[1], xs[2]);
        if lengths.iter().any(|&l| l == 0 || l > t) {
            return Err(dim_err!("masked_time_mean: lengths {lengths:?} must lie in 1..={t}"));
        }
        let src = self.value(x);
        let mut value = vec![F::zero(); xs[0] * d];
        for (b, &len) in lengths.iter().enumerate() {
            let inv = F::one() / lit(len as f64);
            let dst = &mut value[b * d..(b + 1) * d];
            for step in 0..len {
                for (o, &v) in dst.iter_mut().zip(&src[(b * t + step) * d..][..d]) {
                    *o += v;
                }
            }
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![xs[0], d],
            value,
            Op::MaskedTimeMean {
                x,
                lengths: lengths.to_vec(),
            },
            needs,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis where `keep[i] == false` entries get
    /// probability 0. A row with nothing kept is all zeros.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(dim_err!(
                "masked_softmax: mask of {} for input {:?}",
                keep.len(),
                self.shape(x)
            ));
        }
        Ok(self.softmax_impl(x, Some(keep)))
    }

    fn softmax_impl(&mut self, x: Var, keep: Option<&[bool]>) -> Var {
        let width = *self.shape(x).last().expect("rank >= 1");
        let src = self.value(x);
        let mut value = vec![F::zero(); src.len()];
        for (r, (row, out)) in src.chunks(width).zip(value.chunks_mut(width)).enumerate() {
            let kept = |j: usize| keep.map_or(true, |k| k[r * width + j]);
            let mut max = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if kept(j) && v > max {
                    max = v;
                }
            }
            if max == F::neg_infinity() {
                continue;
            }
            let mut total = F::zero();
            for (j, (&v, o)) in row.iter().zip(out.iter_mut()).enumerate() {
                if kept(j) {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            out.iter_mut().for_each(|o| *o /= total);
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, value, Op::Softmax(x), needs)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let width = *self.shape(x).last().expect("rank >= 1");
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(dim_err!("layer_norm: affine parameters must have shape [{width}]"));
        }
        let rows = self.value(x).len() / width;
        let layout = NormLayout::Row { rows, width };
        Ok(self.normalize(x, gamma, beta, layout, None, eps).0)
    }

    /// Batch normalization of `[N, C, ...]` per channel.
    ///
    /// With `running = None` the batch statistics are used and returned as
    /// `(mean, unbiased variance)` for the caller to fold into its running
    /// estimates; otherwise the given `(mean, variance)` are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[F], &[F])>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<F>, Vec<F>)>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(dim_err!("batch_norm: expected [N, C, ...], got {xs:?}"));
        }
        let channels = xs[1];
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(dim_err!(
                "batch_norm: affine parameters {:?} do not match {channels} channels",
                self.shape(gamma)
            ));
        }
        if let Some((m, v)) = running {
            if m.len() != channels || v.len() != channels {
                return Err(dim_err!("batch_norm: running statistics do not match {channels} channels"));
            }
        }
        let layout = NormLayout::Channel {
            outer: xs[0],
            channels,
            inner: xs[2..].iter().product(),
        };
        let (v, stats) = self.normalize(x, gamma, beta, layout, running, eps);
        Ok((v, stats))
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        fixed: Option<(&[F], &[F])>,
        eps: f64,
    ) -> (Var, Option<(Vec<F>, Vec<F>)>) {
        let eps: F = lit(eps);
        let src = self.value(x);
        let n = src.len();
        let (groups, count) = match layout {
            NormLayout::Channel { outer, channels, inner } => (channels, outer * inner),
            NormLayout::Row { rows, width } => (rows, width),
        };
        // group of element e and its affine index
        let locate = |e: usize| -> (usize, usize) {
            match layout {
                NormLayout::Channel { channels, inner, .. } => {
                    let c = (e / inner) % channels;
                    (c, c)
                }
                NormLayout::Row { width, .. } => (e / width, e % width),
            }
        };
        let (mean, var, stats) = match fixed {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let mut mean = vec![F::zero(); groups];
                for (e, &v) in src.iter().enumerate() {
                    mean[locate(e).0] += v;
                }
                let inv_count = F::one() / lit(count as f64);
                mean.iter_mut().for_each(|m| *m *= inv_count);
                let mut var = vec![F::zero(); groups];
                for (e, &v) in src.iter().enumerate() {
                    let g = locate(e).0;
                    let d = v - mean[g];
                    var[g] += d * d;
                }
                let unbiased: Vec<F> = if count > 1 {
                    let inv = F::one() / lit((count - 1) as f64);
                    var.iter().map(|&v| v * inv).collect()
                } else {
                    var.clone()
                };
                var.iter_mut().for_each(|v| *v *= inv_count);
                let stats = matches!(layout, NormLayout::Channel { .. }).then(|| (mean.clone(), unbiased));
                (mean, var, stats)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![F::zero(); n];
        let mut value = vec![F::zero(); n];
        for e in 0..n {
            let (g, a) = locate(e);
            xhat[e] = (src[e] - mean[g]) * inv_std[g];
            value[e] = gv[a] * xhat[e] + bv[a];
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            shape,
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                batch_stats: fixed.is_none(),
            },
            needs,
        );
        (v, stats)
    }

    /// `[B, N] ⊕ [B, M] -> [B, N, M]` with `out[b, i, j] = a[b, i] + c[b, j]`.
    pub fn outer_add(&mut self, a: Var, c: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sc = self.shape(c).to_vec();
        if sa.len() != 2 || sc.len() != 2 || sa[0] != sc[0] {
            return Err(dim_err!("outer_add: incompatible shapes {sa:?} and {sc:?}"));
        }
        let (batch, n, m) = (sa[0], sa[1], sc[1]);
        let av = self.value(a);
        let cv = self.value(c);
        let mut value = Vec::with_capacity(batch * n * m);
        for b in 0..batch {
            for i in 0..n {
                let ai = av[b * n + i];
                value.extend(cv[b * m..(b + 1) * m].iter().map(|&cj| ai + cj));
            }
        }
        let needs = self.needs(a) || self.needs(c);
        Ok(self.push(vec![batch, n, m], value, Op::OuterAdd { a, b: c }, needs))
    }

    /// Inverted dropout; identity in eval mode or for `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(cfg_err!("dropout probability {p} outside [0, 1)"));
        }
        if !self.is_train() || p == 0.0 {
            return Ok(x);
        }
        let keep: F = lit(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<F> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let value = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape, value, Op::Dropout { x, mask }, needs))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![total], Op::Sum(x), needs)
    }

    /// Mean cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(dim_err!("cross_entropy: logits {ls:?} for {} labels", labels.len()));
        }
        let classes = ls[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        let src = self.value(logits);
        let mut probs = vec![F::zero(); src.len()];
        let mut loss = F::zero();
        for (b, (row, p)) in src.chunks(classes).zip(probs.chunks_mut(classes)).enumerate() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for (o, &v) in p.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            p.iter_mut().for_each(|o| *o /= total);
            loss += max + total.ln() - row[labels[b]];
        }
        loss /= lit(labels.len() as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Applies the backward rule of node `i` given its output gradient.
    pub(crate) fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g.iter().zip(self.value(*b)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = g.iter().zip(self.value(*a)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|&v| v * *s).collect()),
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.needs(*b) {
                    let width = self.value(*b).len();
                    let mut db = vec![F::zero(); width];
                    for row in g.chunks(width) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(&node.value)
                    .map(|(&gv, &y)| if y > F::zero() { gv } else { F::zero() })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::LeakyRelu(x, s) => {
                let d = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&gv, &v)| if v > F::zero() { gv } else { gv * *s })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Elu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).iter().zip(&node.value))
                    .map(|(&gv, (&v, &y))| if v > F::zero() { gv } else { gv * (y + F::one()) })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Permute(x, perm) => {
                let d = permute_data(g, &node.shape, &inverse_permutation(perm));
                self.accumulate(grads, *x, d);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..][..len]);
                        }
                        self.accumulate(grads, v, d);
                    }
                    offset += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = self.shape(*input);
                let (outer, n, inner) = split_axis(in_shape, *axis);
                let len = node.shape[*axis];
                let mut d = vec![F::zero(); outer * n * inner];
                for o in 0..outer {
                    d[(o * n + start) * inner..][..len * inner]
                        .copy_from_slice(&g[o * len * inner..][..len * inner]);
                }
                self.accumulate(grads, *input, d);
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs(*a) {
                    let mut da = vec![F::zero(); batch * m * k];
                    for i in 0..*batch {
                        let gi = &g[i * m * n..][..m * n];
                        let bi = &bv[i * k * n..][..k * n];
                        let di = &mut da[i * m * k..][..m * k];
                        if *trans_a {
                            gemm(k, n, m, bi, *trans_b, gi, true, di, F::zero());
                        } else {
                            gemm(m, n, k, gi, false, bi, !*trans_b, di, F::zero());
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); batch * k * n];
                    for i in 0..*batch {
                        let gi = &g[i * m * n..][..m * n];
                        let ai = &av[i * m * k..][..m * k];
                        let di = &mut db[i * k * n..][..k * n];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, *trans_a, di, F::zero());
                        } else {
                            gemm(k, m, n, ai, !*trans_a, gi, false, di, F::zero());
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            } => {
                if self.needs(*x) {
                    let mut dx = vec![F::zero(); rows * fan_in];
                    gemm(*rows, *fan_out, *fan_in, g, false, self.value(*w), false, &mut dx, F::zero());
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![F::zero(); fan_out * fan_in];
                    gemm(*fan_out, *rows, *fan_in, g, true, self.value(*x), false, &mut dw, F::zero());
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![F::zero(); *fan_out];
                        for row in g.chunks(*fan_out) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = geom.backward(self.value(*x), self.value(*w), g, self.needs(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![F::zero(); self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::MeanTrailing { x, span } => {
                let inv = F::one() / lit(*span as f64);
                let d = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, *span)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::MaskedTimeMean { x, lengths } => {
                let xs = self.shape(*x);
                let (t, d) = (xs[1], xs[2]);
                let mut dx = vec![F::zero(); self.value(*x).len()];
                for (b, &len) in lengths.iter().enumerate() {
                    let inv = F::one() / lit(len as f64);
                    for step in 0..len {
                        for (o, &gv) in dx[(b * t + step) * d..][..d].iter_mut().zip(&g[b * d..][..d]) {
                            *o = gv * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let width = *node.shape.last().expect("rank >= 1");
                let mut d = vec![F::zero(); g.len()];
                for ((gr, yr), dr) in g.chunks(width).zip(node.value.chunks(width)).zip(d.chunks_mut(width)) {
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = y * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                batch_stats,
            } => self.norm_backward(g, *x, *gamma, *beta, xhat, inv_std, *layout, *batch_stats, grads),
            Op::OuterAdd { a, b } => {
                let (batch, n, m) = (node.shape[0], node.shape[1], node.shape[2]);
                if self.needs(*a) {
                    let mut da = vec![F::zero(); batch * n];
                    for (r, row) in g.chunks(m).enumerate() {
                        da[r] = row.iter().copied().sum();
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); batch * m];
                    for bi in 0..batch {
                        for i in 0..n {
                            for j in 0..m {
                                db[bi * m + j] += g[(bi * n + i) * m + j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Dropout { x, mask } => {
                let d = g.iter().zip(mask).map(|(&a, &b)| a * b).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / lit(labels.len() as f64);
                let mut d: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (b, &l) in labels.iter().enumerate() {
                    d[b * classes + l] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        g: &[F],
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[F],
        inv_std: &[F],
        layout: NormLayout,
        batch_stats: bool,
        grads: &mut [Option<Vec<F>>],
    ) {
        let gv = self.value(gamma);
        let locate = |e: usize| -> (usize, usize) {
            match layout {
                NormLayout::Channel { channels, inner, .. } => {
                    let c = (e / inner) % channels;
                    (c, c)
                }
                NormLayout::Row { width, .. } => (e / width, e % width),
            }
        };
        let (groups, count) = match layout {
            NormLayout::Channel { outer, channels, inner } => (channels, outer * inner),
            NormLayout::Row { rows, width } => (rows, width),
        };
        let affine = gv.len();
        let mut dgamma = vec![F::zero(); affine];
        let mut dbeta = vec![F::zero(); affine];
        for (e, &gvv) in g.iter().enumerate() {
            let a = locate(e).1;
            dgamma[a] += gvv * xhat[e];
            dbeta[a] += gvv;
        }
        if self.needs(x) {
            let mut dx = vec![F::zero(); g.len()];
            if batch_stats {
                let mut sum_d = vec![F::zero(); groups];
                let mut sum_dx = vec![F::zero(); groups];
                for (e, &gvv) in g.iter().enumerate() {
                    let (grp, a) = locate(e);
                    let dxhat = gvv * gv[a];
                    sum_d[grp] += dxhat;
                    sum_dx[grp] += dxhat * xhat[e];
                }
                let m: F = lit(count as f64);
                for (e, &gvv) in g.iter().enumerate() {
                    let (grp, a) = locate(e);
                    let dxhat = gvv * gv[a];
                    dx[e] = inv_std[grp] / m * (m * dxhat - sum_d[grp] - xhat[e] * sum_dx[grp]);
                }
            } else {
                for (e, &gvv) in g.iter().enumerate() {
                    let (grp, a) = locate(e);
                    dx[e] = gvv * gv[a] * inv_std[grp];
                }
            }
            self.accumulate(grads, x, dx);
        }
        self.accumulate(grads, gamma, dgamma);
        self.accumulate(grads, beta, dbeta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, Tensor};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let out = permute_data(&data, &[2, 3, 4], &[2, 0, 1]);
        // out[k, i, j] = in[i, j, k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(out[(k * 2 + i) * 3 + j], data[(i * 3 + j) * 4 + k]);
                }
            }
        }
        assert_eq!(permute_data(&out, &[4, 2, 3], &inverse_permutation(&[2, 0, 1])), data);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.constant(t(&[4], &[0.0; 4]));
        let y = g.softmax(x);
        assert_eq!(g.value(y), &[0.25; 4]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]));
        let y = g.masked_softmax(x, &[true, false, true, false, false, false]).unwrap();
        let v = g.value(y);
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert_eq!(&v[3..], &[0.0; 3]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new(Mode::Train);
        let x = g.input(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]), true);
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().input(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::<f64>::new(Mode::Train);
        let x = g.input(t(&[2], &[1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        assert_eq!(g.backward(s).unwrap().input(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::<f64>::new(Mode::Train);
        let x = g.input(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn batch_norm_identities() {
        // per-channel mean 0 and variance 1 passes through (up to eps)
        let mut g = Graph::<f64>::new(Mode::Train);
        let x = g.constant(t(&[4, 1], &[1.0, -1.0, 1.0, -1.0]));
        let gamma = g.constant(t(&[1], &[1.0]));
        let beta = g.constant(t(&[1], &[0.0]));
        let (y, stats) = g.batch_norm(x, gamma, beta, None, 1e-5).unwrap();
        for (a, b) in g.value(y).iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert!((a - b).abs() < 1e-5);
        }
        let (mean, var) = stats.unwrap();
        assert_eq!(mean, vec![0.0]);
        assert!((var[0] - 4.0 / 3.0).abs() < 1e-12);

        // gamma 0 yields beta; a constant channel yields beta
        let gamma0 = g.constant(t(&[1], &[0.0]));
        let beta3 = g.constant(t(&[1], &[3.0]));
        let (y, _) = g.batch_norm(x, gamma0, beta3, None, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 3.0));
        let c = g.constant(t(&[4, 1], &[2.5; 4]));
        let (y, _) = g.batch_norm(c, gamma, beta3, None, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn adaptive_pool_of_constant_map() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.constant(Tensor::full(&[2, 3, 5, 5], 1.75));
        let y = g.adaptive_avg_pool2d(x).unwrap();
        assert_eq!(g.shape(y), &[2, 3]);
        assert!(g.value(y).iter().all(|&v| (v - 1.75).abs() < 1e-15));
    }

    #[test]
    fn pooling_shape_and_too_small_input() {
        let mut g = Graph::<f32>::new(Mode::Eval);
        let x = g.constant(Tensor::zeros(&[1, 64, 30, 44, 44]));
        let y = g.max_pool3d(x, [1, 3, 3], [1, 2, 2], [0, 1, 1]).unwrap();
        assert_eq!(g.shape(y), &[1, 64, 30, 22, 22]);
        let small = g.constant(Tensor::zeros(&[1, 1, 1, 2, 2]));
        assert!(matches!(
            g.max_pool3d(small, [1, 3, 3], [1, 2, 2], [0, 0, 0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
        let mut g = Graph::<f64>::with_seed(Mode::Train, 1);
        let x = g.constant(Tensor::full(&[1000], 1.0));
        let y = g.dropout(x, 0.5).unwrap();
        let kept = g.value(y).iter().filter(|&&v| v == 2.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.constant(Tensor::zeros(&[1, 100]));
        let l = g.cross_entropy(x, &[3]).unwrap();
        assert!((g.value(l)[0] - 100f64.ln()).abs() < 1e-12);
        let x = g.constant(t(&[1, 3], &[0.0, 1e4, 0.0]));
        let l = g.cross_entropy(x, &[1]).unwrap();
        assert_eq!(g.value(l)[0], 0.0);
        assert!(matches!(g.cross_entropy(x, &[3]), Err(Error::Label { label: 3, classes: 3 })));
    }
}
