//! Shared encoder, task-conditioned decoder, and the hypernetwork-generated
//! convolution they are built from.
//!
//! The encoder is a plain convolutional stack shared across all sequences.
//! Every convolution in the decoder (and in the attention block, see
//! `fusion`) is a `HyperConvLayer`: a two-layer perceptron maps the binary
//! conditioning code to the flattened kernel and bias of an ordinary
//! convolution of the declared geometry.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
#[allow(unused_imports)]
use num_traits::Float as _;


/// Epsilon inside instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;
/// Hidden width of the kernel-generating perceptron.
pub const HYPER_HIDDEN: usize = 64;

/// Records the trainable leaves bound into a graph so the optimizer can map
/// gradients back to named parameters.
#[derive(Default)]
pub struct ParamBindings {
    entries: Vec<(String, NodeId)>,
}

impl ParamBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(String, NodeId)] {
        &self.entries
    }

    pub fn bind_tensor<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        name: String,
        t: &Tensor<T>,
        trainable: bool,
    ) -> NodeId {
        if trainable {
            let id = g.leaf(t.clone());
            self.entries.push((name, id));
            id
        } else {
            g.constant(t.clone())
        }
    }
}

fn kaiming_kernel<T: Scalar>(rng: &mut Rng, cout: usize, cin: usize, kh: usize, kw: usize) -> Tensor<T> {
    let fan_in = (cin * kh * kw) as f64;
    let std = (2.0 / fan_in).sqrt();
    let data = (0..cout * cin * kh * kw)
        .map(|_| rng.normal_scaled::<T>(std))
        .collect();
    Tensor::from_vec(&[cout, cin, kh, kw], data).unwrap()
}

/// Ordinary convolution layer with owned parameters.
#[derive(Debug, Clone)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(rng: &mut Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvLayer {
            weight: kaiming_kernel(rng, cout, cin, k, k),
            bias: Tensor::zeros(&[cout]),
            stride,
            pad,
        }
    }

    pub fn bind(
        &self,
        g: &mut Graph<T>,
        binds: &mut ParamBindings,
        name: &str,
        trainable: bool,
    ) -> ConvNodes {
        ConvNodes {
            w: binds.bind_tensor(g, format!("{name}.weight"), &self.weight, trainable),
            b: binds.bind_tensor(g, format!("{name}.bias"), &self.bias, trainable),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn visit_named(&self, name: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{name}.weight"), &self.weight);
        f(format!("{name}.bias"), &self.bias);
    }

    pub fn visit_named_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{name}.weight"), &mut self.weight);
        f(format!("{name}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy)]
pub struct ConvNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvNodes {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, self.w, self.b, self.stride, self.pad)
    }
}

/// Convolution whose kernel and bias are emitted by a small perceptron from
/// a conditioning code.
#[derive(Debug, Clone)]
pub struct HyperConvLayer<T> {
    /// `[hidden, code_len]`
    pub w1: Tensor<T>,
    /// `[hidden]`
    pub b1: Tensor<T>,
    /// `[kernel_len + cout, hidden]`
    pub w2: Tensor<T>,
    /// `[kernel_len + cout]`; initialized so the generated kernel starts at
    /// a Kaiming sample and the generated bias at zero.
    pub b2: Tensor<T>,
    pub kernel_shape: [usize; 4],
    pub code_len: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> HyperConvLayer<T> {
    pub fn new(
        rng: &mut Rng,
        code_len: usize,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let kernel_len = cout * cin * k * k;
        let w1_std = (2.0 / code_len as f64).sqrt();
        let w1 = Tensor::from_vec(
            &[HYPER_HIDDEN, code_len],
            (0..HYPER_HIDDEN * code_len)
                .map(|_| rng.normal_scaled::<T>(w1_std))
                .collect(),
        )
        .unwrap();
        let b1 = Tensor::zeros(&[HYPER_HIDDEN]);
        let w2 = Tensor::from_vec(
            &[kernel_len + cout, HYPER_HIDDEN],
            (0..(kernel_len + cout) * HYPER_HIDDEN)
                .map(|_| rng.normal_scaled::<T>(1e-3))
                .collect(),
        )
        .unwrap();
        let mut b2 = Tensor::zeros(&[kernel_len + cout]);
        let kaiming = kaiming_kernel::<T>(rng, cout, cin, k, k);
        b2.data_mut()[..kernel_len].copy_from_slice(kaiming.data());
        HyperConvLayer {
            w1,
            b1,
            w2,
            b2,
            kernel_shape: [cout, cin, k, k],
            code_len,
            stride,
            pad,
        }
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_shape.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        self.kernel_shape[0]
    }

    pub fn bind(
        &self,
        g: &mut Graph<T>,
        binds: &mut ParamBindings,
        name: &str,
        trainable: bool,
    ) -> HyperConvNodes {
        HyperConvNodes {
            w1: binds.bind_tensor(g, format!("{name}.w1"), &self.w1, trainable),
            b1: binds.bind_tensor(g, format!("{name}.b1"), &self.b1, trainable),
            w2: binds.bind_tensor(g, format!("{name}.w2"), &self.w2, trainable),
            b2: binds.bind_tensor(g, format!("{name}.b2"), &self.b2, trainable),
            kernel_shape: self.kernel_shape,
            code_len: self.code_len,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn visit_named(&self, name: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{name}.w1"), &self.w1);
        f(format!("{name}.b1"), &self.b1);
        f(format!("{name}.w2"), &self.w2);
        f(format!("{name}.b2"), &self.b2);
    }

    pub fn visit_named_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{name}.w1"), &mut self.w1);
        f(format!("{name}.b1"), &mut self.b1);
        f(format!("{name}.w2"), &mut self.w2);
        f(format!("{name}.b2"), &mut self.b2);
    }
}

#[derive(Clone, Copy)]
pub struct HyperConvNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub kernel_shape: [usize; 4],
    pub code_len: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Kernel and bias nodes generated for one conditioning code; reusable for
/// multiple applications within the same graph.
#[derive(Clone, Copy)]
pub struct GeneratedConv {
    pub kernel: NodeId,
    pub bias: NodeId,
    pub stride: usize,
    pub pad: usize,
}

impl HyperConvNodes {
    /// Run the hypernetwork for one code node.
    pub fn generate<T: Scalar>(&self, g: &mut Graph<T>, code: NodeId) -> Result<GeneratedConv> {
        let got = g.value(code).dims1()?;
        if got != self.code_len {
            return Err(Error::CodeLengthError {
                expected: self.code_len,
                got,
            });
        }
        let hidden = g.linear(self.w1, self.b1, code)?;
        let hidden = g.relu(hidden);
        let flat = g.linear(self.w2, self.b2, hidden)?;
        let kernel_len: usize = self.kernel_shape.iter().product();
        let kernel = g.slice1d(flat, 0, kernel_len)?;
        let kernel = g.reshape(kernel, &self.kernel_shape)?;
        let bias = g.slice1d(flat, kernel_len, self.kernel_shape[0])?;
        Ok(GeneratedConv {
            kernel,
            bias,
            stride: self.stride,
            pad: self.pad,
        })
    }
}

impl GeneratedConv {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, self.kernel, self.bias, self.stride, self.pad)
    }
}

/// Convolve `input` with the kernel the layer's hypernetwork emits for
/// `code`.
pub fn hyperconv_forward<T: Scalar>(
    layer: &HyperConvLayer<T>,
    input: &Tensor<T>,
    code: &[T],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut binds = ParamBindings::new();
    let nodes = layer.bind(&mut g, &mut binds, "hyperconv", false);
    let code = g.constant(Tensor::from_vec(&[code.len()], code.to_vec())?);
    let x = g.constant(input.clone());
    let gen = nodes.generate(&mut g, code)?;
    let y = gen.apply(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// Encoder: stem, two stride-2 downsampling stages, two residual blocks.
/// Unconditioned and shared across all sequences.
#[derive(Debug, Clone)]
pub struct EncoderParams<T> {
    pub stem: ConvLayer<T>,
    pub down1: ConvLayer<T>,
    pub down2: ConvLayer<T>,
    pub res1a: ConvLayer<T>,
    pub res1b: ConvLayer<T>,
    pub res2a: ConvLayer<T>,
    pub res2b: ConvLayer<T>,
    pub channels: usize,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn new(rng: &mut Rng, channels: usize) -> Self {
        let c = channels;
        EncoderParams {
            stem: ConvLayer::new(rng, 1, c, 7, 1, 3),
            down1: ConvLayer::new(rng, c, c, 3, 2, 1),
            down2: ConvLayer::new(rng, c, c, 3, 2, 1),
            res1a: ConvLayer::new(rng, c, c, 3, 1, 1),
            res1b: ConvLayer::new(rng, c, c, 3, 1, 1),
            res2a: ConvLayer::new(rng, c, c, 3, 1, 1),
            res2b: ConvLayer::new(rng, c, c, 3, 1, 1),
            channels,
        }
    }

    pub fn bind(
        &self,
        g: &mut Graph<T>,
        binds: &mut ParamBindings,
        trainable: bool,
    ) -> EncoderNodes {
        EncoderNodes {
            stem: self.stem.bind(g, binds, "encoder.stem", trainable),
            down1: self.down1.bind(g, binds, "encoder.down1", trainable),
            down2: self.down2.bind(g, binds, "encoder.down2", trainable),
            res1a: self.res1a.bind(g, binds, "encoder.res1a", trainable),
            res1b: self.res1b.bind(g, binds, "encoder.res1b", trainable),
            res2a: self.res2a.bind(g, binds, "encoder.res2a", trainable),
            res2b: self.res2b.bind(g, binds, "encoder.res2b", trainable),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.stem.visit_named("encoder.stem", f);
        self.down1.visit_named("encoder.down1", f);
        self.down2.visit_named("encoder.down2", f);
        self.res1a.visit_named("encoder.res1a", f);
        self.res1b.visit_named("encoder.res1b", f);
        self.res2a.visit_named("encoder.res2a", f);
        self.res2b.visit_named("encoder.res2b", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.stem.visit_named_mut("encoder.stem", f);
        self.down1.visit_named_mut("encoder.down1", f);
        self.down2.visit_named_mut("encoder.down2", f);
        self.res1a.visit_named_mut("encoder.res1a", f);
        self.res1b.visit_named_mut("encoder.res1b", f);
        self.res2a.visit_named_mut("encoder.res2a", f);
        self.res2b.visit_named_mut("encoder.res2b", f);
    }
}

#[derive(Clone, Copy)]
pub struct EncoderNodes {
    stem: ConvNodes,
    down1: ConvNodes,
    down2: ConvNodes,
    res1a: ConvNodes,
    res1b: ConvNodes,
    res2a: ConvNodes,
    res2b: ConvNodes,
}

fn conv_in_relu<T: Scalar>(g: &mut Graph<T>, conv: ConvNodes, x: NodeId) -> Result<NodeId> {
    let y = conv.apply(g, x)?;
    let y = g.instance_norm(y, T::of(INSTANCE_NORM_EPS))?;
    Ok(g.relu(y))
}

fn res_block<T: Scalar>(
    g: &mut Graph<T>,
    a: ConvNodes,
    b: ConvNodes,
    x: NodeId,
) -> Result<NodeId> {
    let t = conv_in_relu(g, a, x)?;
    let t = b.apply(g, t)?;
    let t = g.instance_norm(t, T::of(INSTANCE_NORM_EPS))?;
    g.add(x, t)
}

impl EncoderNodes {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, image: NodeId) -> Result<NodeId> {
        let x = conv_in_relu(g, self.stem, image)?;
        let x = conv_in_relu(g, self.down1, x)?;
        let x = conv_in_relu(g, self.down2, x)?;
        let x = res_block(g, self.res1a, self.res1b, x)?;
        res_block(g, self.res2a, self.res2b, x)
    }
}

fn check_image<T: Scalar>(image: &Tensor<T>) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 1 {
        return Err(shape_err!("expected single-channel image, got {c} channels"));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(shape_err!("image dims {h}x{w} must be divisible by 4"));
    }
    if !image.is_all_finite() {
        return Err(Error::NonFiniteInput(alloc::string::String::from("image")));
    }
    Ok(())
}

/// Encode a `[1,H,W]` image to `[C,H/4,W/4]` features.
pub fn encode<T: Scalar>(enc: &EncoderParams<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    check_image(image)?;
    let mut g = Graph::new();
    let mut binds = ParamBindings::new();
    let nodes = enc.bind(&mut g, &mut binds, false);
    let x = g.constant(image.clone());
    let out = nodes.forward(&mut g, x)?;
    Ok(g.value(out).clone())
}

/// Decoder: mirror of the encoder with every convolution generated from the
/// target code. Output saturates into (-1, 1).
#[derive(Debug, Clone)]
pub struct DecoderParams<T> {
    pub res1a: HyperConvLayer<T>,
    pub res1b: HyperConvLayer<T>,
    pub res2a: HyperConvLayer<T>,
    pub res2b: HyperConvLayer<T>,
    pub up1: HyperConvLayer<T>,
    pub up2: HyperConvLayer<T>,
    pub out: HyperConvLayer<T>,
    pub channels: usize,
    pub code_len: usize,
}

impl<T: Scalar> DecoderParams<T> {
    pub fn new(rng: &mut Rng, channels: usize, code_len: usize) -> Self {
        let c = channels;
        let l = code_len;
        DecoderParams {
            res1a: HyperConvLayer::new(rng, l, c, c, 3, 1, 1),
            res1b: HyperConvLayer::new(rng, l, c, c, 3, 1, 1),
            res2a: HyperConvLayer::new(rng, l, c, c, 3, 1, 1),
            res2b: HyperConvLayer::new(rng, l, c, c, 3, 1, 1),
            up1: HyperConvLayer::new(rng, l, c, c, 3, 1, 1),
            up2: HyperConvLayer::new(rng, l, c, c, 3, 1, 1),
            out: HyperConvLayer::new(rng, l, c, 1, 7, 1, 3),
            channels,
            code_len,
        }
    }

    pub fn bind(
        &self,
        g: &mut Graph<T>,
        binds: &mut ParamBindings,
        trainable: bool,
    ) -> DecoderNodes {
        DecoderNodes {
            res1a: self.res1a.bind(g, binds, "decoder.res1a", trainable),
            res1b: self.res1b.bind(g, binds, "decoder.res1b", trainable),
            res2a: self.res2a.bind(g, binds, "decoder.res2a", trainable),
            res2b: self.res2b.bind(g, binds, "decoder.res2b", trainable),
            up1: self.up1.bind(g, binds, "decoder.up1", trainable),
            up2: self.up2.bind(g, binds, "decoder.up2", trainable),
            out: self.out.bind(g, binds, "decoder.out", trainable),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.res1a.visit_named("decoder.res1a", f);
        self.res1b.visit_named("decoder.res1b", f);
        self.res2a.visit_named("decoder.res2a", f);
        self.res2b.visit_named("decoder.res2b", f);
        self.up1.visit_named("decoder.up1", f);
        self.up2.visit_named("decoder.up2", f);
        self.out.visit_named("decoder.out", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.res1a.visit_named_mut("decoder.res1a", f);
        self.res1b.visit_named_mut("decoder.res1b", f);
        self.res2a.visit_named_mut("decoder.res2a", f);
        self.res2b.visit_named_mut("decoder.res2b", f);
        self.up1.visit_named_mut("decoder.up1", f);
        self.up2.visit_named_mut("decoder.up2", f);
        self.out.visit_named_mut("decoder.out", f);
    }
}

#[derive(Clone, Copy)]
pub struct DecoderNodes {
    res1a: HyperConvNodes,
    res1b: HyperConvNodes,
    res2a: HyperConvNodes,
    res2b: HyperConvNodes,
    up1: HyperConvNodes,
    up2: HyperConvNodes,
    out: HyperConvNodes,
}

/// Kernels generated for one target code; apply to any number of features.
#[derive(Clone, Copy)]
pub struct DecoderGenerated {
    res1a: GeneratedConv,
    res1b: GeneratedConv,
    res2a: GeneratedConv,
    res2b: GeneratedConv,
    up1: GeneratedConv,
    up2: GeneratedConv,
    out: GeneratedConv,
}

impl DecoderNodes {
    pub fn generate<T: Scalar>(&self, g: &mut Graph<T>, code: NodeId) -> Result<DecoderGenerated> {
        Ok(DecoderGenerated {
            res1a: self.res1a.generate(g, code)?,
            res1b: self.res1b.generate(g, code)?,
            res2a: self.res2a.generate(g, code)?,
            res2b: self.res2b.generate(g, code)?,
            up1: self.up1.generate(g, code)?,
            up2: self.up2.generate(g, code)?,
            out: self.out.generate(g, code)?,
        })
    }
}

fn gen_in_relu<T: Scalar>(g: &mut Graph<T>, conv: GeneratedConv, x: NodeId) -> Result<NodeId> {
    let y = conv.apply(g, x)?;
    let y = g.instance_norm(y, T::of(INSTANCE_NORM_EPS))?;
    Ok(g.relu(y))
}

fn gen_res_block<T: Scalar>(
    g: &mut Graph<T>,
    a: GeneratedConv,
    b: GeneratedConv,
    x: NodeId,
) -> Result<NodeId> {
    let t = gen_in_relu(g, a, x)?;
    let t = b.apply(g, t)?;
    let t = g.instance_norm(t, T::of(INSTANCE_NORM_EPS))?;
    g.add(x, t)
}

impl DecoderGenerated {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, features: NodeId) -> Result<NodeId> {
        let x = gen_res_block(g, self.res1a, self.res1b, features)?;
        let x = gen_res_block(g, self.res2a, self.res2b, x)?;
        let x = g.upsample_nearest2(x)?;
        let x = gen_in_relu(g, self.up1, x)?;
        let x = g.upsample_nearest2(x)?;
        let x = gen_in_relu(g, self.up2, x)?;
        let x = self.out.apply(g, x)?;
        Ok(g.tanh(x))
    }
}

/// Decode `[C,H/4,W/4]` features into a `[1,H,W]` image under a target
/// code of length `N`.
pub fn decode<T: Scalar>(
    dec: &DecoderParams<T>,
    features: &Tensor<T>,
    code: &[T],
) -> Result<Tensor<T>> {
    let (c, _, _) = features.dims3()?;
    if c != dec.channels {
        return Err(shape_err!(
            "decoder expects {} feature channels, got {c}",
            dec.channels
        ));
    }
    if code.len() != dec.code_len {
        return Err(Error::CodeLengthError {
            expected: dec.code_len,
            got: code.len(),
        });
    }
    let mut g = Graph::new();
    let mut binds = ParamBindings::new();
    let nodes = dec.bind(&mut g, &mut binds, false);
    let code = g.constant(Tensor::from_vec(&[code.len()], code.to_vec())?);
    let gen = nodes.generate(&mut g, code)?;
    let x = g.constant(features.clone());
    let out = gen.forward(&mut g, x)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, BuildFn};

    fn rand_image(rng: &mut Rng, h: usize, w: usize) -> Tensor<f64> {
        let data = (0..h * w).map(|_| rng.range(-1.0, 1.0)).collect();
        Tensor::from_vec(&[1, h, w], data).unwrap()
    }

    #[test]
    fn encode_shape_and_determinism() {
        let mut rng = Rng::new(5);
        let enc = EncoderParams::<f64>::new(&mut rng, 8);
        let img = rand_image(&mut rng, 64, 64);
        let f1 = encode(&enc, &img).unwrap();
        let f2 = encode(&enc, &img).unwrap();
        assert_eq!(f1.shape(), &[8, 16, 16]);
        assert_eq!(f1.data(), f2.data());
    }

    #[test]
    fn encode_rejects_bad_input() {
        let mut rng = Rng::new(5);
        let enc = EncoderParams::<f64>::new(&mut rng, 4);
        let img = rand_image(&mut rng, 62, 64);
        assert!(matches!(encode(&enc, &img), Err(Error::ShapeError(_))));
        let mut img = rand_image(&mut rng, 64, 64);
        img.data_mut()[12] = f64::NAN;
        assert!(matches!(encode(&enc, &img), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn decode_round_shape_and_code_sensitivity() {
        let mut rng = Rng::new(6);
        let enc = EncoderParams::<f64>::new(&mut rng, 6);
        let dec = DecoderParams::<f64>::new(&mut rng, 6, 4);
        let img = rand_image(&mut rng, 32, 32);
        let feats = encode(&enc, &img).unwrap();
        let code_a = [0.0, 1.0, 0.0, 0.0];
        let code_b = [0.0, 0.0, 1.0, 0.0];
        let ya = decode(&dec, &feats, &code_a).unwrap();
        let yb = decode(&dec, &feats, &code_b).unwrap();
        assert_eq!(ya.shape(), img.shape());
        assert!(ya.data().iter().all(|v| v.abs() < 1.0));
        assert_ne!(ya.data(), yb.data(), "different target codes should differ");

        let err = decode(&dec, &feats, &[1.0, 0.0]);
        assert!(matches!(err, Err(Error::CodeLengthError { .. })));
    }

    #[test]
    fn hyperconv_identity_and_zero_kernels() {
        // Force the generated output: zero hypernetwork, bias = identity kernel.
        let mut rng = Rng::new(7);
        let mut layer = HyperConvLayer::<f64>::new(&mut rng, 4, 1, 1, 1, 1, 0);
        for v in layer.w1.data_mut() {
            *v = 0.0;
        }
        for v in layer.w2.data_mut() {
            *v = 0.0;
        }
        layer.b2.data_mut()[0] = 1.0; // 1x1 kernel = 1
        layer.b2.data_mut()[1] = 0.0; // bias = 0
        let x = rand_image(&mut rng, 8, 8);
        let code = [1.0, 0.0, 0.0, 1.0];
        let y = hyperconv_forward(&layer, &x, &code).unwrap();
        assert_eq!(y.data(), x.data(), "identity kernel must pass input through");

        layer.b2.data_mut()[0] = 0.0;
        let y = hyperconv_forward(&layer, &x, &code).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0), "zero kernel, zero bias");
    }

    #[test]
    fn hyperconv_is_linear_in_input_after_bias_correction() {
        let mut rng = Rng::new(8);
        let layer = HyperConvLayer::<f64>::new(&mut rng, 4, 3, 2, 3, 1, 1);
        let code = [1.0, 0.0, 1.0, 0.0];
        let shape = [3usize, 6, 6];
        let mk = |rng: &mut Rng| {
            Tensor::<f64>::from_vec(
                &shape,
                (0..shape.iter().product::<usize>())
                    .map(|_| rng.normal())
                    .collect(),
            )
            .unwrap()
        };
        let x = mk(&mut rng);
        let y = mk(&mut rng);
        let (alpha, beta) = (0.37, -1.21);

        let zero = Tensor::<f64>::zeros(&shape);
        let bias_map = hyperconv_forward(&layer, &zero, &code).unwrap();
        let fx = hyperconv_forward(&layer, &x, &code).unwrap();
        let fy = hyperconv_forward(&layer, &y, &code).unwrap();
        let mut combo = Tensor::<f64>::zeros(&shape);
        combo.axpy(alpha, &x);
        combo.axpy(beta, &y);
        let fc = hyperconv_forward(&layer, &combo, &code).unwrap();

        // f(ax+by) - bias = a (f(x)-bias) + b (f(y)-bias)
        let mut max_rel: f64 = 0.0;
        for i in 0..fc.numel() {
            let lhs = fc.data()[i] - bias_map.data()[i];
            let rhs = alpha * (fx.data()[i] - bias_map.data()[i])
                + beta * (fy.data()[i] - bias_map.data()[i]);
            let denom = lhs.abs().max(rhs.abs()).max(1e-9);
            max_rel = max_rel.max((lhs - rhs).abs() / denom);
        }
        assert!(max_rel < 1e-6, "max rel {max_rel}");
    }

    #[test]
    fn hyperconv_gradients_match_finite_differences() {
        let mut rng = Rng::new(9);
        let layer = HyperConvLayer::<f64>::new(&mut rng, 8, 5, 3, 3, 1, 1);
        let x = Tensor::<f64>::from_vec(
            &[5, 8, 8],
            (0..5 * 8 * 8).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let code: alloc::vec::Vec<f64> = alloc::vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let meta = (layer.kernel_shape, layer.stride, layer.pad);

        let build: &BuildFn<'_, f64> = &|g, ids| {
            // ids: [x, w1, b1, w2, b2]
            let code = g.constant(Tensor::from_vec(&[8], code.clone()).unwrap());
            let hidden = g.linear(ids[1], ids[2], code)?;
            let hidden = g.relu(hidden);
            let flat = g.linear(ids[3], ids[4], hidden)?;
            let klen: usize = meta.0.iter().product();
            let kernel = g.slice1d(flat, 0, klen)?;
            let kernel = g.reshape(kernel, &meta.0)?;
            let bias = g.slice1d(flat, klen, meta.0[0])?;
            let y = g.conv2d(ids[0], kernel, bias, meta.1, meta.2)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        };
        let inputs = [
            x,
            layer.w1.clone(),
            layer.b1.clone(),
            layer.w2.clone(),
            layer.b2.clone(),
        ];
        let err = check_gradients(build, &inputs, 1e-5).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
