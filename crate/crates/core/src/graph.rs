//! Reverse-mode autodiff tape.
//!
//! Ops append nodes holding their forward value; `backward` walks the tape
//! in reverse and accumulates vector-Jacobian products. Gradients only flow
//! through subtrees that contain a trainable leaf, so freezing a parameter
//! block is just binding it as a constant.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

enum Op<T> {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, T),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    /// `y = v * M + b` for a row vector `v`.
    VecMat {
        v: NodeId,
        m: NodeId,
        b: NodeId,
    },
    /// `y = W x + b`.
    Linear {
        w: NodeId,
        b: NodeId,
        x: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
        col: Vec<T>,
    },
    InstanceNorm {
        x: NodeId,
        invstd: Vec<T>,
    },
    UpsampleNearest2(NodeId),
    AvgPool2(NodeId),
    GlobalAvgPool(NodeId),
    GlobalMaxPool {
        x: NodeId,
        arg: Vec<usize>,
    },
    ChannelMean(NodeId),
    ChannelMax {
        x: NodeId,
        arg: Vec<usize>,
    },
    MulChannelGate {
        x: NodeId,
        gate: NodeId,
    },
    MulSpatialGate {
        x: NodeId,
        gate: NodeId,
    },
    ConcatChannels {
        parts: Vec<NodeId>,
    },
    WeightedSum {
        maps: Vec<NodeId>,
        weights: NodeId,
    },
    MaskRenorm {
        omega0: NodeId,
        mask: Vec<bool>,
    },
    Reshape(NodeId),
    Slice1d {
        x: NodeId,
        start: usize,
    },
    MeanAbsDiff(NodeId, NodeId),
    SumAll(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable leaf: gradients are tracked through it.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable input: no gradient flows into or through it alone.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Constant, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(shape_err!("add: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.axpy(T::one(), vb);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(shape_err!("sub: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.axpy(-T::one(), vb);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(shape_err!("mul: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let out = self.value(a).map(|v| v * s);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, s), needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: T) -> NodeId {
        let out = self.value(a).map(|v| v + s);
        let needs = self.needs(a);
        self.push(out, Op::AddScalar(a), needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(a);
        self.push(out, Op::Relu(a), needs)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> NodeId {
        let out = self
            .value(a)
            .map(|v| if v > T::zero() { v } else { v * slope });
        let needs = self.needs(a);
        self.push(out, Op::LeakyRelu(a, slope), needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        let needs = self.needs(a);
        self.push(out, Op::Sigmoid(a), needs)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v.tanh());
        let needs = self.needs(a);
        self.push(out, Op::Tanh(a), needs)
    }

    /// Softmax over a rank-1 tensor.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        v.dims1()?;
        let max = v
            .data()
            .iter()
            .cloned()
            .fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
        let exps: Vec<T> = v.data().iter().map(|&x| (x - max).exp()).collect();
        let sum = exps.iter().fold(T::zero(), |s, &e| s + e);
        let out = Tensor::from_vec(v.shape(), exps.into_iter().map(|e| e / sum).collect())?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Softmax(a), needs))
    }

    /// Row-vector times matrix plus bias: `v[r] * m[r,c] + b[c]`.
    pub fn vecmat(&mut self, v: NodeId, m: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(m).dims2()?;
        let vn = self.value(v).dims1()?;
        let bn = self.value(b).dims1()?;
        if vn != rows || bn != cols {
            return Err(shape_err!(
                "vecmat: v[{vn}] * m[{rows},{cols}] + b[{bn}]"
            ));
        }
        let mut out = self.value(b).data().to_vec();
        // y[j] += sum_i v[i] m[i,j]
        linalg::gemm_acc(1, cols, rows, self.value(v).data(), self.value(m).data(), &mut out);
        let out = Tensor::from_vec(&[cols], out)?;
        let needs = self.needs(v) || self.needs(m) || self.needs(b);
        Ok(self.push(out, Op::VecMat { v, m, b }, needs))
    }

    /// Fully connected layer: `w[out,in] * x[in] + b[out]`.
    pub fn linear(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
        let (o, i) = self.value(w).dims2()?;
        let xn = self.value(x).dims1()?;
        let bn = self.value(b).dims1()?;
        if xn != i || bn != o {
            return Err(shape_err!("linear: w[{o},{i}] x[{xn}] b[{bn}]"));
        }
        let mut out = self.value(b).data().to_vec();
        linalg::matvec_acc(o, i, self.value(w).data(), self.value(x).data(), &mut out);
        let out = Tensor::from_vec(&[o], out)?;
        let needs = self.needs(w) || self.needs(b) || self.needs(x);
        Ok(self.push(out, Op::Linear { w, b, x }, needs))
    }

    /// 2-D convolution of `x[cin,h,w]` with `w[cout,cin,kh,kw]` and `b[cout]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (cin, h, w_dim) = self.value(x).dims3()?;
        let ws = self.value(w).shape();
        if ws.len() != 4 {
            return Err(shape_err!("conv kernel must be rank 4, got {:?}", ws));
        }
        let (cout, kcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kcin != cin {
            return Err(shape_err!("conv: input has {cin} channels, kernel expects {kcin}"));
        }
        if self.value(b).dims1()? != cout {
            return Err(shape_err!("conv: bias length != {cout}"));
        }
        if h + 2 * pad < kh || w_dim + 2 * pad < kw {
            return Err(shape_err!("conv: {h}x{w_dim} too small for {kh}x{kw} kernel"));
        }
        let ho = linalg::conv_out_dim(h, kh, stride, pad);
        let wo = linalg::conv_out_dim(w_dim, kw, stride, pad);
        let col = linalg::im2col(self.value(x).data(), cin, h, w_dim, kh, kw, stride, pad);
        let mut out = vec![T::zero(); cout * ho * wo];
        // bias broadcast per output channel
        for (oc, chunk) in out.chunks_mut(ho * wo).enumerate() {
            let bv = self.value(b).data()[oc];
            for v in chunk.iter_mut() {
                *v = bv;
            }
        }
        linalg::gemm_acc(
            cout,
            ho * wo,
            cin * kh * kw,
            self.value(w).data(),
            &col,
            &mut out,
        );
        let geom = ConvGeom {
            cin,
            h,
            w: w_dim,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        // The unfolded input is only kept when a backward pass will need it.
        let col = if needs { col } else { Vec::new() };
        let out = Tensor::from_vec(&[cout, ho, wo], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, col }, needs))
    }

    /// Per-channel normalization over the spatial plane.
    pub fn instance_norm(&mut self, x: NodeId, eps: T) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        let hw = h * w;
        let mut out = vec![T::zero(); c * hw];
        let mut invstd = vec![T::zero(); c];
        let data = self.value(x).data();
        for ci in 0..c {
            let plane = &data[ci * hw..(ci + 1) * hw];
            let mut mean = T::zero();
            for &v in plane {
                mean = mean + v;
            }
            mean = mean / T::of(hw as f64);
            let mut var = T::zero();
            for &v in plane {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / T::of(hw as f64);
            let is = T::one() / (var + eps).sqrt();
            invstd[ci] = is;
            for (o, &v) in out[ci * hw..(ci + 1) * hw].iter_mut().zip(plane.iter()) {
                *o = (v - mean) * is;
            }
        }
        let out = Tensor::from_vec(&[c, h, w], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::InstanceNorm { x, invstd }, needs))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        let mut out = vec![T::zero(); c * 4 * h * w];
        let data = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let v = data[(ci * h + iy) * w + ix];
                    let base = ci * h2 * w2;
                    out[base + (2 * iy) * w2 + 2 * ix] = v;
                    out[base + (2 * iy) * w2 + 2 * ix + 1] = v;
                    out[base + (2 * iy + 1) * w2 + 2 * ix] = v;
                    out[base + (2 * iy + 1) * w2 + 2 * ix + 1] = v;
                }
            }
        }
        let out = Tensor::from_vec(&[c, h2, w2], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::UpsampleNearest2(x), needs))
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("avg_pool2 needs even dims, got {h}x{w}"));
        }
        let (h2, w2) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); c * h2 * w2];
        for ci in 0..c {
            for oy in 0..h2 {
                for ox in 0..w2 {
                    let base = ci * h * w;
                    let s = data[base + (2 * oy) * w + 2 * ox]
                        + data[base + (2 * oy) * w + 2 * ox + 1]
                        + data[base + (2 * oy + 1) * w + 2 * ox]
                        + data[base + (2 * oy + 1) * w + 2 * ox + 1];
                    out[(ci * h2 + oy) * w2 + ox] = s * quarter;
                }
            }
        }
        let out = Tensor::from_vec(&[c, h2, w2], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::AvgPool2(x), needs))
    }

    /// `[c,h,w] -> [c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        let hw = T::of((h * w) as f64);
        let data = self.value(x).data();
        let out: Vec<T> = (0..c)
            .map(|ci| {
                let mut s = T::zero();
                for &v in &data[ci * h * w..(ci + 1) * h * w] {
                    s = s + v;
                }
                s / hw
            })
            .collect();
        let out = Tensor::from_vec(&[c], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), needs))
    }

    /// `[c,h,w] -> [c]` spatial max (first maximum wins ties).
    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        let hw = h * w;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(c);
        let mut arg = Vec::with_capacity(c);
        for ci in 0..c {
            let plane = &data[ci * hw..(ci + 1) * hw];
            let mut best = plane[0];
            let mut best_i = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            out.push(best);
            arg.push(best_i);
        }
        let out = Tensor::from_vec(&[c], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::GlobalMaxPool { x, arg }, needs))
    }

    /// `[c,h,w] -> [1,h,w]` mean across channels.
    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        let hw = h * w;
        let data = self.value(x).data();
        let cf = T::of(c as f64);
        let mut out = vec![T::zero(); hw];
        for ci in 0..c {
            for (o, &v) in out.iter_mut().zip(&data[ci * hw..(ci + 1) * hw]) {
                *o = *o + v;
            }
        }
        for o in out.iter_mut() {
            *o = *o / cf;
        }
        let out = Tensor::from_vec(&[1, h, w], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::ChannelMean(x), needs))
    }

    /// `[c,h,w] -> [1,h,w]` max across channels (first maximum wins ties).
    pub fn channel_max(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        let hw = h * w;
        let data = self.value(x).data();
        let mut out = vec![T::zero(); hw];
        let mut arg = vec![0usize; hw];
        for p in 0..hw {
            let mut best = data[p];
            let mut best_c = 0;
            for ci in 1..c {
                let v = data[ci * hw + p];
                if v > best {
                    best = v;
                    best_c = ci;
                }
            }
            out[p] = best;
            arg[p] = best_c;
        }
        let out = Tensor::from_vec(&[1, h, w], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::ChannelMax { x, arg }, needs))
    }

    /// Scale every channel plane of `x[c,h,w]` by `gate[c]`.
    pub fn mul_channel_gate(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(gate).dims1()? != c {
            return Err(shape_err!("channel gate length != {c}"));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let gd = self.value(gate).data();
        let mut out = vec![T::zero(); c * hw];
        for ci in 0..c {
            let gv = gd[ci];
            for (o, &v) in out[ci * hw..(ci + 1) * hw].iter_mut().zip(&xd[ci * hw..(ci + 1) * hw]) {
                *o = v * gv;
            }
        }
        let out = Tensor::from_vec(&[c, h, w], out)?;
        let needs = self.needs(x) || self.needs(gate);
        Ok(self.push(out, Op::MulChannelGate { x, gate }, needs))
    }

    /// Scale every pixel column of `x[c,h,w]` by `gate[1,h,w]`.
    pub fn mul_spatial_gate(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        let (gc, gh, gw) = self.value(gate).dims3()?;
        if gc != 1 || gh != h || gw != w {
            return Err(shape_err!("spatial gate must be [1,{h},{w}]"));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let gd = self.value(gate).data();
        let mut out = vec![T::zero(); c * hw];
        for ci in 0..c {
            for p in 0..hw {
                out[ci * hw + p] = xd[ci * hw + p] * gd[p];
            }
        }
        let out = Tensor::from_vec(&[c, h, w], out)?;
        let needs = self.needs(x) || self.needs(gate);
        Ok(self.push(out, Op::MulSpatialGate { x, gate }, needs))
    }

    /// Concatenate `[c_i,h,w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err!("concat of zero tensors"));
        }
        let (_, h, w) = self.value(parts[0]).dims3()?;
        let mut total_c = 0;
        for &p in parts {
            let (c, ph, pw) = self.value(p).dims3()?;
            if ph != h || pw != w {
                return Err(shape_err!("concat: mismatched spatial dims"));
            }
            total_c += c;
        }
        let mut out = Vec::with_capacity(total_c * h * w);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(&[total_c, h, w], out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Linear combination of equally shaped maps with a weight vector.
    ///
    /// Terms with an exactly zero weight are skipped and the first retained
    /// term is assigned rather than accumulated, so a one-hot weight vector
    /// reproduces its map bit for bit.
    pub fn weighted_sum(&mut self, maps: &[NodeId], weights: NodeId) -> Result<NodeId> {
        let n = self.value(weights).dims1()?;
        if n != maps.len() {
            return Err(shape_err!(
                "weighted_sum: {} maps vs weight length {n}",
                maps.len()
            ));
        }
        if maps.is_empty() {
            return Err(shape_err!("weighted_sum of zero maps"));
        }
        let shape = self.value(maps[0]).shape().to_vec();
        for &m in maps {
            if self.value(m).shape() != shape.as_slice() {
                return Err(shape_err!("weighted_sum: mismatched map shapes"));
            }
        }
        let wd = self.value(weights).data().to_vec();
        let mut out: Option<Tensor<T>> = None;
        for (i, &m) in maps.iter().enumerate() {
            let wi = wd[i];
            if wi == T::zero() {
                continue;
            }
            match out.as_mut() {
                None => out = Some(self.value(m).map(|v| v * wi)),
                Some(acc) => acc.axpy(wi, self.value(m)),
            }
        }
        let out = out.unwrap_or_else(|| Tensor::zeros(&shape));
        let needs = self.needs(weights) || maps.iter().any(|&m| self.needs(m));
        Ok(self.push(
            out,
            Op::WeightedSum {
                maps: maps.to_vec(),
                weights,
            },
            needs,
        ))
    }

    /// Zero out masked-off entries and renormalize the rest to sum to one.
    pub fn mask_renorm(&mut self, omega0: NodeId, mask: &[bool]) -> Result<NodeId> {
        let n = self.value(omega0).dims1()?;
        if mask.len() != n {
            return Err(shape_err!("mask length {} != {n}", mask.len()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyAvailableSet);
        }
        let d = self.value(omega0).data();
        let mut s = T::zero();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                s = s + d[i];
            }
        }
        if !(s > T::zero()) {
            return Err(Error::NonFiniteInput(alloc::format!(
                "mask_renorm: nonpositive available mass {s}"
            )));
        }
        let out: Vec<T> = (0..n)
            .map(|i| if mask[i] { d[i] / s } else { T::zero() })
            .collect();
        let out = Tensor::from_vec(&[n], out)?;
        let needs = self.needs(omega0);
        Ok(self.push(
            out,
            Op::MaskRenorm {
                omega0,
                mask: mask.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Contiguous slice of a rank-1 tensor.
    pub fn slice1d(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let n = self.value(x).dims1()?;
        if start + len > n {
            return Err(shape_err!("slice {start}..{} of length-{n} vector", start + len));
        }
        let out = Tensor::from_vec(&[len], self.value(x).data()[start..start + len].to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Slice1d { x, start }, needs))
    }

    /// Mean absolute difference, as a scalar node.
    pub fn mean_abs_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(shape_err!(
                "mean_abs_diff: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            ));
        }
        let n = T::of(va.numel() as f64);
        let mut s = T::zero();
        for (&x, &y) in va.data().iter().zip(vb.data().iter()) {
            s = s + (x - y).abs();
        }
        let out = Tensor::scalar(s / n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MeanAbsDiff(a, b), needs))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s = s + v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    /// Accumulate `scale * contribution` into the gradient slot.
    fn acc_grad(
        grads: &mut [Option<Tensor<T>>],
        nodes: &[Node<T>],
        id: NodeId,
        make: impl FnOnce() -> Tensor<T>,
    ) {
        if !nodes[id.0].needs_grad {
            return;
        }
        let t = make();
        match &mut grads[id.0] {
            Some(g) => g.axpy(T::one(), &t),
            slot @ None => *slot = Some(t),
        }
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// node on a path from a trainable leaf to the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward root must be scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                Self::acc_grad(grads, nodes, *a, || g.clone());
                Self::acc_grad(grads, nodes, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                Self::acc_grad(grads, nodes, *a, || g.clone());
                Self::acc_grad(grads, nodes, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                Self::acc_grad(grads, nodes, *a, || {
                    let vb = nodes[b.0].value.data();
                    let data = g.data().iter().zip(vb.iter()).map(|(&gv, &bv)| gv * bv).collect();
                    Tensor::from_vec(g.shape(), data).unwrap()
                });
                Self::acc_grad(grads, nodes, *b, || {
                    let va = nodes[a.0].value.data();
                    let data = g.data().iter().zip(va.iter()).map(|(&gv, &av)| gv * av).collect();
                    Tensor::from_vec(g.shape(), data).unwrap()
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                Self::acc_grad(grads, nodes, *a, || g.map(|v| v * s));
            }
            Op::AddScalar(a) => {
                Self::acc_grad(grads, nodes, *a, || g.clone());
            }
            Op::Relu(a) => {
                Self::acc_grad(grads, nodes, *a, || {
                    let y = node.value.data();
                    let data = g
                        .data()
                        .iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                        .collect();
                    Tensor::from_vec(g.shape(), data).unwrap()
                });
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                Self::acc_grad(grads, nodes, *a, || {
                    let x = nodes[a.0].value.data();
                    let data = g
                        .data()
                        .iter()
                        .zip(x.iter())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * slope })
                        .collect();
                    Tensor::from_vec(g.shape(), data).unwrap()
                });
            }
            Op::Sigmoid(a) => {
                Self::acc_grad(grads, nodes, *a, || {
                    let y = node.value.data();
                    let data = g
                        .data()
                        .iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect();
                    Tensor::from_vec(g.shape(), data).unwrap()
                });
            }
            Op::Tanh(a) => {
                Self::acc_grad(grads, nodes, *a, || {
                    let y = node.value.data();
                    let data = g
                        .data()
                        .iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                        .collect();
                    Tensor::from_vec(g.shape(), data).unwrap()
                });
            }
            Op::Softmax(a) => {
                Self::acc_grad(grads, nodes, *a, || {
                    let y = node.value.data();
                    let mut dot = T::zero();
                    for (&gv, &yv) in g.data().iter().zip(y.iter()) {
                        dot = dot + gv * yv;
                    }
                    let data = g
                        .data()
                        .iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| yv * (gv - dot))
                        .collect();
                    Tensor::from_vec(g.shape(), data).unwrap()
                });
            }
            Op::VecMat { v, m, b } => {
                let (rows, cols) = nodes[m.0].value.dims2().unwrap();
                Self::acc_grad(grads, nodes, *v, || {
                    // dv[i] = sum_j m[i,j] g[j]
                    let mut out = vec![T::zero(); rows];
                    linalg::matvec_acc(rows, cols, nodes[m.0].value.data(), g.data(), &mut out);
                    Tensor::from_vec(&[rows], out).unwrap()
                });
                Self::acc_grad(grads, nodes, *m, || {
                    let mut out = vec![T::zero(); rows * cols];
                    linalg::outer_acc(rows, cols, nodes[v.0].value.data(), g.data(), &mut out);
                    Tensor::from_vec(&[rows, cols], out).unwrap()
                });
                Self::acc_grad(grads, nodes, *b, || g.clone());
            }
            Op::Linear { w, b, x } => {
                let (o, i) = nodes[w.0].value.dims2().unwrap();
                Self::acc_grad(grads, nodes, *w, || {
                    let mut out = vec![T::zero(); o * i];
                    linalg::outer_acc(o, i, g.data(), nodes[x.0].value.data(), &mut out);
                    Tensor::from_vec(&[o, i], out).unwrap()
                });
                Self::acc_grad(grads, nodes, *b, || g.clone());
                Self::acc_grad(grads, nodes, *x, || {
                    let mut out = vec![T::zero(); i];
                    linalg::matvec_t_acc(o, i, nodes[w.0].value.data(), g.data(), &mut out);
                    Tensor::from_vec(&[i], out).unwrap()
                });
            }
            Op::Conv2d { x, w, b, geom, col } => {
                let gm = *geom;
                let k = gm.cin * gm.kh * gm.kw;
                let n = gm.ho * gm.wo;
                Self::acc_grad(grads, nodes, *w, || {
                    let mut gw = vec![T::zero(); gm.cout * k];
                    linalg::gemm_abt(gm.cout, n, k, g.data(), col, &mut gw);
                    Tensor::from_vec(&[gm.cout, gm.cin, gm.kh, gm.kw], gw).unwrap()
                });
                Self::acc_grad(grads, nodes, *b, || {
                    let gb: Vec<T> = g
                        .data()
                        .chunks(n)
                        .map(|row| {
                            let mut s = T::zero();
                            for &v in row {
                                s = s + v;
                            }
                            s
                        })
                        .collect();
                    Tensor::from_vec(&[gm.cout], gb).unwrap()
                });
                Self::acc_grad(grads, nodes, *x, || {
                    let mut gcol = vec![T::zero(); k * n];
                    linalg::gemm_atb(gm.cout, n, k, nodes[w.0].value.data(), g.data(), &mut gcol);
                    let mut gx = vec![T::zero(); gm.cin * gm.h * gm.w];
                    linalg::col2im_acc(
                        &gcol, gm.cin, gm.h, gm.w, gm.kh, gm.kw, gm.stride, gm.pad, &mut gx,
                    );
                    Tensor::from_vec(&[gm.cin, gm.h, gm.w], gx).unwrap()
                });
            }
            Op::InstanceNorm { x, invstd } => {
                Self::acc_grad(grads, nodes, *x, || {
                    let (c, h, w) = node.value.dims3().unwrap();
                    let hw = h * w;
                    let hw_t = T::of(hw as f64);
                    let y = node.value.data();
                    let mut out = vec![T::zero(); c * hw];
                    for ci in 0..c {
                        let yp = &y[ci * hw..(ci + 1) * hw];
                        let gp = &g.data()[ci * hw..(ci + 1) * hw];
                        let mut mean_g = T::zero();
                        let mut mean_gy = T::zero();
                        for (&gv, &yv) in gp.iter().zip(yp.iter()) {
                            mean_g = mean_g + gv;
                            mean_gy = mean_gy + gv * yv;
                        }
                        mean_g = mean_g / hw_t;
                        mean_gy = mean_gy / hw_t;
                        let is = invstd[ci];
                        for ((o, &gv), &yv) in
                            out[ci * hw..(ci + 1) * hw].iter_mut().zip(gp).zip(yp)
                        {
                            *o = is * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    Tensor::from_vec(&[c, h, w], out).unwrap()
                });
            }
            Op::UpsampleNearest2(x) => {
                Self::acc_grad(grads, nodes, *x, || {
                    let (c, h2, w2) = node.value.dims3().unwrap();
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut out = vec![T::zero(); c * h * w];
                    let gd = g.data();
                    for ci in 0..c {
                        for iy in 0..h {
                            for ix in 0..w {
                                let base = ci * h2 * w2;
                                let s = gd[base + (2 * iy) * w2 + 2 * ix]
                                    + gd[base + (2 * iy) * w2 + 2 * ix + 1]
                                    + gd[base + (2 * iy + 1) * w2 + 2 * ix]
                                    + gd[base + (2 * iy + 1) * w2 + 2 * ix + 1];
                                out[(ci * h + iy) * w + ix] = s;
                            }
                        }
                    }
                    Tensor::from_vec(&[c, h, w], out).unwrap()
                });
            }
            Op::AvgPool2(x) => {
                Self::acc_grad(grads, nodes, *x, || {
                    let (c, h, w) = nodes[x.0].value.dims3().unwrap();
                    let (h2, w2) = (h / 2, w / 2);
                    let quarter = T::of(0.25);
                    let mut out = vec![T::zero(); c * h * w];
                    let gd = g.data();
                    for ci in 0..c {
                        for oy in 0..h2 {
                            for ox in 0..w2 {
                                let gv = gd[(ci * h2 + oy) * w2 + ox] * quarter;
                                let base = ci * h * w;
                                out[base + (2 * oy) * w + 2 * ox] = gv;
                                out[base + (2 * oy) * w + 2 * ox + 1] = gv;
                                out[base + (2 * oy + 1) * w + 2 * ox] = gv;
                                out[base + (2 * oy + 1) * w + 2 * ox + 1] = gv;
                            }
                        }
                    }
                    Tensor::from_vec(&[c, h, w], out).unwrap()
                });
            }
            Op::GlobalAvgPool(x) => {
                Self::acc_grad(grads, nodes, *x, || {
                    let (c, h, w) = nodes[x.0].value.dims3().unwrap();
                    let hw = h * w;
                    let inv = T::one() / T::of(hw as f64);
                    let mut out = vec![T::zero(); c * hw];
                    for ci in 0..c {
                        let gv = g.data()[ci] * inv;
                        for o in out[ci * hw..(ci + 1) * hw].iter_mut() {
                            *o = gv;
                        }
                    }
                    Tensor::from_vec(&[c, h, w], out).unwrap()
                });
            }
            Op::GlobalMaxPool { x, arg } => {
                Self::acc_grad(grads, nodes, *x, || {
                    let (c, h, w) = nodes[x.0].value.dims3().unwrap();
                    let hw = h * w;
                    let mut out = vec![T::zero(); c * hw];
                    for ci in 0..c {
                        out[ci * hw + arg[ci]] = g.data()[ci];
                    }
                    Tensor::from_vec(&[c, h, w], out).unwrap()
                });
            }
            Op::ChannelMean(x) => {
                Self::acc_grad(grads, nodes, *x, || {
                    let (c, h, w) = nodes[x.0].value.dims3().unwrap();
                    let hw = h * w;
                    let inv = T::one() / T::of(c as f64);
                    let mut out = vec![T::zero(); c * hw];
                    for ci in 0..c {
                        for (o, &gv) in out[ci * hw..(ci + 1) * hw].iter_mut().zip(g.data()) {
                            *o = gv * inv;
                        }
                    }
                    Tensor::from_vec(&[c, h, w], out).unwrap()
                });
            }
            Op::ChannelMax { x, arg } => {
                Self::acc_grad(grads, nodes, *x, || {
                    let (c, h, w) = nodes[x.0].value.dims3().unwrap();
                    let hw = h * w;
                    let mut out = vec![T::zero(); c * hw];
                    for (p, (&ci, &gv)) in arg.iter().zip(g.data()).enumerate() {
                        out[ci * hw + p] = gv;
                    }
                    Tensor::from_vec(&[c, h, w], out).unwrap()
                });
            }
            Op::MulChannelGate { x, gate } => {
                let (c, h, w) = nodes[x.0].value.dims3().unwrap();
                let hw = h * w;
                Self::acc_grad(grads, nodes, *x, || {
                    let gd = nodes[gate.0].value.data();
                    let mut out = vec![T::zero(); c * hw];
                    for ci in 0..c {
                        let gv = gd[ci];
                        for (o, &gg) in out[ci * hw..(ci + 1) * hw]
                            .iter_mut()
                            .zip(&g.data()[ci * hw..(ci + 1) * hw])
                        {
                            *o = gg * gv;
                        }
                    }
                    Tensor::from_vec(&[c, h, w], out).unwrap()
                });
                Self::acc_grad(grads, nodes, *gate, || {
                    let xd = nodes[x.0].value.data();
                    let out: Vec<T> = (0..c)
                        .map(|ci| {
                            let mut s = T::zero();
                            for (&gg, &xv) in g.data()[ci * hw..(ci + 1) * hw]
                                .iter()
                                .zip(&xd[ci * hw..(ci + 1) * hw])
                            {
                                s = s + gg * xv;
                            }
                            s
                        })
                        .collect();
                    Tensor::from_vec(&[c], out).unwrap()
                });
            }
            Op::MulSpatialGate { x, gate } => {
                let (c, h, w) = nodes[x.0].value.dims3().unwrap();
                let hw = h * w;
                Self::acc_grad(grads, nodes, *x, || {
                    let gd = nodes[gate.0].value.data();
                    let mut out = vec![T::zero(); c * hw];
                    for ci in 0..c {
                        for p in 0..hw {
                            out[ci * hw + p] = g.data()[ci * hw + p] * gd[p];
                        }
                    }
                    Tensor::from_vec(&[c, h, w], out).unwrap()
                });
                Self::acc_grad(grads, nodes, *gate, || {
                    let xd = nodes[x.0].value.data();
                    let mut out = vec![T::zero(); hw];
                    for ci in 0..c {
                        for (p, o) in out.iter_mut().enumerate() {
                            *o = *o + g.data()[ci * hw + p] * xd[ci * hw + p];
                        }
                    }
                    Tensor::from_vec(&[1, h, w], out).unwrap()
                });
            }
            Op::ConcatChannels { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    let shape = nodes[p.0].value.shape().to_vec();
                    let start = offset;
                    offset += len;
                    Self::acc_grad(grads, nodes, p, || {
                        Tensor::from_vec(&shape, g.data()[start..start + len].to_vec()).unwrap()
                    });
                }
            }
            Op::WeightedSum { maps, weights } => {
                let wd = nodes[weights.0].value.data().to_vec();
                for (i, &m) in maps.iter().enumerate() {
                    let wi = wd[i];
                    if wi != T::zero() {
                        Self::acc_grad(grads, nodes, m, || g.map(|v| v * wi));
                    }
                }
                Self::acc_grad(grads, nodes, *weights, || {
                    let out: Vec<T> = maps
                        .iter()
                        .map(|&m| {
                            let md = nodes[m.0].value.data();
                            let mut s = T::zero();
                            for (&gv, &mv) in g.data().iter().zip(md.iter()) {
                                s = s + gv * mv;
                            }
                            s
                        })
                        .collect();
                    Tensor::from_vec(&[maps.len()], out).unwrap()
                });
            }
            Op::MaskRenorm { omega0, mask } => {
                Self::acc_grad(grads, nodes, *omega0, || {
                    let d = nodes[omega0.0].value.data();
                    let y = node.value.data();
                    let mut s = T::zero();
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            s = s + d[i];
                        }
                    }
                    let mut dot = T::zero();
                    for (&gv, &yv) in g.data().iter().zip(y.iter()) {
                        dot = dot + gv * yv;
                    }
                    let out: Vec<T> = (0..d.len())
                        .map(|i| {
                            if mask[i] {
                                (g.data()[i] - dot) / s
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    Tensor::from_vec(&[d.len()], out).unwrap()
                });
            }
            Op::Reshape(x) => {
                Self::acc_grad(grads, nodes, *x, || {
                    g.clone()
                        .reshaped(nodes[x.0].value.shape())
                        .expect("reshape backward")
                });
            }
            Op::Slice1d { x, start } => {
                Self::acc_grad(grads, nodes, *x, || {
                    let n = nodes[x.0].value.numel();
                    let mut out = vec![T::zero(); n];
                    out[*start..start + g.numel()].copy_from_slice(g.data());
                    Tensor::from_vec(&[n], out).unwrap()
                });
            }
            Op::MeanAbsDiff(a, b) => {
                let gs = g.data()[0];
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                let n = T::of(va.len() as f64);
                let sign = |x: T, y: T| {
                    if x > y {
                        T::one()
                    } else if x < y {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                Self::acc_grad(grads, nodes, *a, || {
                    let data = va
                        .iter()
                        .zip(vb.iter())
                        .map(|(&x, &y)| gs * sign(x, y) / n)
                        .collect();
                    Tensor::from_vec(nodes[a.0].value.shape(), data).unwrap()
                });
                Self::acc_grad(grads, nodes, *b, || {
                    let data = va
                        .iter()
                        .zip(vb.iter())
                        .map(|(&x, &y)| -(gs * sign(x, y)) / n)
                        .collect();
                    Tensor::from_vec(nodes[b.0].value.shape(), data).unwrap()
                });
            }
            Op::SumAll(x) => {
                let gs = g.data()[0];
                Self::acc_grad(grads, nodes, *x, || {
                    Tensor::full(nodes[x.0].value.shape(), gs)
                });
            }
        }
    }
}
