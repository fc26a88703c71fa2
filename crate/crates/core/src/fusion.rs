//! Task-specific fusion: learned contribution weights over the available
//! sequences, an attention residual over the stacked features, and the
//! enhanced map that localizes what the residual changed.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::{
    DecoderParams, EncoderParams, GeneratedConv, HyperConvLayer, HyperConvNodes, ParamBindings,
};
use crate::graph::Graph;
use crate::codec::TaskCode;
use crate::error::{shape_err, Error, Result};
use crate::graph::NodeId;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor added to the softmax output so masked renormalization never
/// divides by zero.
pub const WEIGHT_EPSILON: f64 = 1e-5;

/// Channel-bottleneck reduction inside the attention block.
pub const ATTENTION_REDUCTION: usize = 8;

/// Parameters of the fully connected weight predictor: `omega0 =
/// softmax(code * w + b) + epsilon` for the `2N`-length code.
#[derive(Debug, Clone)]
pub struct FusionParams<T> {
    /// `[2N, N]`
    pub w: Tensor<T>,
    /// `[N]`
    pub b: Tensor<T>,
    pub n: usize,
}

impl<T: Scalar> FusionParams<T> {
    /// Zero initialization: every task starts at a uniform average over its
    /// available sequences.
    pub fn new(n: usize) -> Self {
        FusionParams {
            w: Tensor::zeros(&[2 * n, n]),
            b: Tensor::zeros(&[n]),
            n,
        }
    }

    pub fn bind(
        &self,
        g: &mut Graph<T>,
        binds: &mut ParamBindings,
        trainable: bool,
    ) -> FusionNodes {
        FusionNodes {
            w: binds.bind_tensor(g, String::from("fusion.w"), &self.w, trainable),
            b: binds.bind_tensor(g, String::from("fusion.b"), &self.b, trainable),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(String::from("fusion.w"), &self.w);
        f(String::from("fusion.b"), &self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(String::from("fusion.w"), &mut self.w);
        f(String::from("fusion.b"), &mut self.b);
    }
}

#[derive(Clone, Copy)]
pub struct FusionNodes {
    pub w: NodeId,
    pub b: NodeId,
}

impl FusionNodes {
    /// `softmax(code * w + b) + epsilon` on the graph.
    pub fn initial_weights_on<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        code: NodeId,
    ) -> Result<NodeId> {
        let logits = g.vecmat(code, self.w, self.b)?;
        let sm = g.softmax(logits)?;
        Ok(g.add_scalar(sm, T::of(WEIGHT_EPSILON)))
    }
}

/// Contribution weights on the probability simplex restricted to the
/// available sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights<T> {
    omega: Vec<T>,
}

impl<T: Scalar> FusionWeights<T> {
    pub fn omega(&self) -> &[T] {
        &self.omega
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    fn from_masked(omega: Vec<T>) -> Self {
        FusionWeights { omega }
    }
}

/// Per-sequence encoder features with exact zero placeholders for the
/// missing ones.
#[derive(Debug, Clone)]
pub struct FeatureStack<T> {
    maps: Vec<Tensor<T>>,
    availability: Vec<bool>,
}

impl<T: Scalar> FeatureStack<T> {
    /// Assemble a stack from the available feature maps; missing slots are
    /// zero-filled at the shared shape.
    pub fn new(maps: Vec<Option<Tensor<T>>>) -> Result<Self> {
        let shape = maps
            .iter()
            .flatten()
            .next()
            .ok_or(Error::EmptyAvailableSet)?
            .shape()
            .to_vec();
        let mut out = Vec::with_capacity(maps.len());
        let mut availability = Vec::with_capacity(maps.len());
        for m in maps {
            match m {
                Some(t) => {
                    if t.shape() != shape.as_slice() {
                        return Err(shape_err!(
                            "stack maps disagree: {:?} vs {:?}",
                            t.shape(),
                            shape
                        ));
                    }
                    out.push(t);
                    availability.push(true);
                }
                None => {
                    out.push(Tensor::zeros(&shape));
                    availability.push(false);
                }
            }
        }
        Ok(FeatureStack {
            maps: out,
            availability,
        })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn maps(&self) -> &[Tensor<T>] {
        &self.maps
    }

    pub fn availability(&self) -> &[bool] {
        &self.availability
    }

    pub fn map_shape(&self) -> &[usize] {
        self.maps[0].shape()
    }
}

/// Nonnegative per-pixel magnitude of the attention residual's effect on
/// the synthesized image.
#[derive(Debug, Clone)]
pub struct TsemMap<T> {
    data: Tensor<T>,
}

impl<T: Scalar> TsemMap<T> {
    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }
}

/// Initial weights `softmax(code * w + b) + epsilon` over all `N`
/// sequences, before masking.
pub fn initial_weights<T: Scalar>(code: &TaskCode, params: &FusionParams<T>) -> Result<Vec<T>> {
    if params.n != code.n() {
        return Err(Error::CodeLengthError {
            expected: params.n,
            got: code.n(),
        });
    }
    let mut g = Graph::new();
    let mut binds = ParamBindings::new();
    let nodes = params.bind(&mut g, &mut binds, false);
    let code_node = g.constant(Tensor::from_vec(&[2 * code.n()], code.full_vec::<T>())?);
    let out = nodes.initial_weights_on(&mut g, code_node)?;
    Ok(g.value(out).data().to_vec())
}

/// Mask the initial weights to the available set and renormalize to sum
/// one. Masked entries are exactly zero.
pub fn fusion_weights<T: Scalar>(omega0: &[T], src_flags: &[bool]) -> Result<FusionWeights<T>> {
    if omega0.len() != src_flags.len() {
        return Err(shape_err!(
            "omega0 length {} vs mask length {}",
            omega0.len(),
            src_flags.len()
        ));
    }
    let mut g = Graph::new();
    let omega0 = g.constant(Tensor::from_vec(&[omega0.len()], omega0.to_vec())?);
    let omega = g.mask_renorm(omega0, src_flags)?;
    Ok(FusionWeights::from_masked(g.value(omega).data().to_vec()))
}

/// Linear combination of the stacked features under the given weights,
/// summed in ascending sequence order. A one-hot weight vector returns the
/// selected map bit for bit.
pub fn fuse_features<T: Scalar>(
    stack: &FeatureStack<T>,
    weights: &FusionWeights<T>,
) -> Result<Tensor<T>> {
    if stack.len() != weights.len() {
        return Err(shape_err!(
            "stack of {} maps vs {} weights",
            stack.len(),
            weights.len()
        ));
    }
    let mut g = Graph::new();
    let map_ids: Vec<NodeId> = stack
        .maps
        .iter()
        .map(|m| g.constant(m.clone()))
        .collect();
    let w = g.constant(Tensor::from_vec(
        &[weights.len()],
        weights.omega().to_vec(),
    )?);
    let fused = g.weighted_sum(&map_ids, w)?;
    Ok(g.value(fused).clone())
}

/// Attention block over the channel-concatenated stack: channel gate, then
/// spatial gate, then a 1x1 projection back to the fused width. Every
/// convolution is generated from the full `[src || tgt]` code.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub ch_reduce: HyperConvLayer<T>,
    pub ch_expand: HyperConvLayer<T>,
    pub spatial: HyperConvLayer<T>,
    pub project: HyperConvLayer<T>,
    pub n: usize,
    pub channels: usize,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(rng: &mut Rng, n: usize, channels: usize) -> Self {
        let stacked = n * channels;
        let hidden = (stacked / ATTENTION_REDUCTION).max(1);
        let code_len = 2 * n;
        AttentionParams {
            ch_reduce: HyperConvLayer::new(rng, code_len, stacked, hidden, 1, 1, 0),
            ch_expand: HyperConvLayer::new(rng, code_len, hidden, stacked, 1, 1, 0),
            spatial: HyperConvLayer::new(rng, code_len, 2, 1, 7, 1, 3),
            project: HyperConvLayer::new(rng, code_len, stacked, channels, 1, 1, 0),
            n,
            channels,
        }
    }

    pub fn bind(
        &self,
        g: &mut Graph<T>,
        binds: &mut ParamBindings,
        trainable: bool,
    ) -> AttentionNodes {
        AttentionNodes {
            ch_reduce: self.ch_reduce.bind(g, binds, "attention.ch_reduce", trainable),
            ch_expand: self.ch_expand.bind(g, binds, "attention.ch_expand", trainable),
            spatial: self.spatial.bind(g, binds, "attention.spatial", trainable),
            project: self.project.bind(g, binds, "attention.project", trainable),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.ch_reduce.visit_named("attention.ch_reduce", f);
        self.ch_expand.visit_named("attention.ch_expand", f);
        self.spatial.visit_named("attention.spatial", f);
        self.project.visit_named("attention.project", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.ch_reduce.visit_named_mut("attention.ch_reduce", f);
        self.ch_expand.visit_named_mut("attention.ch_expand", f);
        self.spatial.visit_named_mut("attention.spatial", f);
        self.project.visit_named_mut("attention.project", f);
    }
}

#[derive(Clone, Copy)]
pub struct AttentionNodes {
    ch_reduce: HyperConvNodes,
    ch_expand: HyperConvNodes,
    spatial: HyperConvNodes,
    project: HyperConvNodes,
}

#[derive(Clone, Copy)]
pub struct AttentionGenerated {
    ch_reduce: GeneratedConv,
    ch_expand: GeneratedConv,
    spatial: GeneratedConv,
    project: GeneratedConv,
}

impl AttentionNodes {
    pub fn generate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        code: NodeId,
    ) -> Result<AttentionGenerated> {
        Ok(AttentionGenerated {
            ch_reduce: self.ch_reduce.generate(g, code)?,
            ch_expand: self.ch_expand.generate(g, code)?,
            spatial: self.spatial.generate(g, code)?,
            project: self.project.generate(g, code)?,
        })
    }
}

impl AttentionGenerated {
    /// `stacked [N*C, H', W'] -> residual [C, H', W']`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, stacked: NodeId) -> Result<NodeId> {
        // Channel attention: shared bottleneck over avg- and max-pooled
        // descriptors, applied as 1x1 convolutions on [C,1,1] tensors.
        let (c, _, _) = g.value(stacked).dims3()?;
        let avg = g.global_avg_pool(stacked)?;
        let avg = g.reshape(avg, &[c, 1, 1])?;
        let max = g.global_max_pool(stacked)?;
        let max = g.reshape(max, &[c, 1, 1])?;
        let branch = |g: &mut Graph<T>, x: NodeId, gen: &Self| -> Result<NodeId> {
            let y = gen.ch_reduce.apply(g, x)?;
            let y = g.relu(y);
            gen.ch_expand.apply(g, y)
        };
        let a = branch(g, avg, self)?;
        let m = branch(g, max, self)?;
        let gate = g.add(a, m)?;
        let gate = g.sigmoid(gate);
        let gate = g.reshape(gate, &[c])?;
        let gated = g.mul_channel_gate(stacked, gate)?;

        // Spatial attention: 7x7 convolution over channel-wise mean/max.
        let mean_map = g.channel_mean(gated)?;
        let max_map = g.channel_max(gated)?;
        let desc = g.concat_channels(&[mean_map, max_map])?;
        let sgate = self.spatial.apply(g, desc)?;
        let sgate = g.sigmoid(sgate);
        let refined = g.mul_spatial_gate(gated, sgate)?;

        // Project back to the fused feature width.
        self.project.apply(g, refined)
    }
}

/// Task-specific attention residual for a feature stack.
pub fn task_attention<T: Scalar>(
    stack: &FeatureStack<T>,
    code: &TaskCode,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    if code.n() != params.n || stack.len() != params.n {
        return Err(shape_err!(
            "attention built for {} sequences, got stack {} / code {}",
            params.n,
            stack.len(),
            code.n()
        ));
    }
    let mut g = Graph::new();
    let mut binds = ParamBindings::new();
    let nodes = params.bind(&mut g, &mut binds, false);
    let code_node = g.constant(Tensor::from_vec(&[2 * code.n()], code.full_vec::<T>())?);
    let gen = nodes.generate(&mut g, code_node)?;
    let map_ids: Vec<NodeId> = stack.maps.iter().map(|m| g.constant(m.clone())).collect();
    let stacked = g.concat_channels(&map_ids)?;
    let out = gen.forward(&mut g, stacked)?;
    Ok(g.value(out).clone())
}

/// Elementwise `|x_attended - x_plain|`.
pub fn tsem<T: Scalar>(x_plain: &Tensor<T>, x_attended: &Tensor<T>) -> Result<TsemMap<T>> {
    if !x_plain.same_shape(x_attended) {
        return Err(shape_err!(
            "tsem: {:?} vs {:?}",
            x_plain.shape(),
            x_attended.shape()
        ));
    }
    let data = x_plain
        .data()
        .iter()
        .zip(x_attended.data().iter())
        .map(|(&p, &a)| (a - p).abs())
        .collect();
    Ok(TsemMap {
        data: Tensor::from_vec(x_plain.shape(), data)?,
    })
}

/// Everything the full pipeline produces for one task.
#[derive(Debug, Clone)]
pub struct SynthesisOutput<T> {
    /// Decode of the weighted average alone.
    pub x_plain: Tensor<T>,
    /// Decode of the weighted average plus the attention residual; this is
    /// the reported synthesis result.
    pub x_attended: Tensor<T>,
    pub omega: FusionWeights<T>,
    pub tsem: TsemMap<T>,
}

/// Graph handles for the pipeline, used by the training loop.
pub struct SynthesisGraph {
    pub x_plain: NodeId,
    pub x_attended: NodeId,
    pub omega: NodeId,
    pub fused: NodeId,
}

/// All trainable blocks of the network.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    pub decoder: DecoderParams<T>,
    pub fusion: FusionParams<T>,
    pub attention: AttentionParams<T>,
    pub n: usize,
    pub channels: usize,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(seed: u64, n: usize, channels: usize) -> Self {
        let mut rng = Rng::new(seed);
        ModelParams {
            encoder: EncoderParams::new(&mut rng, channels),
            decoder: DecoderParams::new(&mut rng, channels, n),
            fusion: FusionParams::new(n),
            attention: AttentionParams::new(&mut rng, n, channels),
            n,
            channels,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
        self.fusion.visit(f);
        self.attention.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
        self.fusion.visit_mut(f);
        self.attention.visit_mut(f);
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.is_all_finite());
        ok
    }
}

/// Which blocks bind as trainable leaves when building a pipeline graph.
#[derive(Debug, Clone, Copy)]
pub struct Trainability {
    pub encoder: bool,
    pub decoder: bool,
    pub fusion: bool,
    pub attention: bool,
}

impl Trainability {
    pub fn frozen() -> Self {
        Trainability {
            encoder: false,
            decoder: false,
            fusion: false,
            attention: false,
        }
    }
}

/// Build the full synthesis pipeline on a graph.
///
/// `images[i]` must be present exactly for the sequences the code marks
/// available; they are encoded by the shared encoder, missing slots become
/// zero placeholders, and both decode branches share one set of generated
/// decoder kernels.
pub fn synthesize_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    binds: &mut ParamBindings,
    model: &ModelParams<T>,
    images: &[Option<Tensor<T>>],
    code: &TaskCode,
    train: Trainability,
) -> Result<SynthesisGraph> {
    if images.len() != code.n() || code.n() != model.n {
        return Err(shape_err!(
            "expected {} image slots, got {}",
            model.n,
            images.len()
        ));
    }
    for (i, slot) in images.iter().enumerate() {
        if code.is_available(i) != slot.is_some() {
            return Err(Error::InvalidArgument(format!(
                "image slot {i} inconsistent with code availability"
            )));
        }
    }

    let enc_nodes = model.encoder.bind(g, binds, train.encoder);
    let dec_nodes = model.decoder.bind(g, binds, train.decoder);
    let fus_nodes = model.fusion.bind(g, binds, train.fusion);
    let att_nodes = model.attention.bind(g, binds, train.attention);

    // Encode available sequences; zero placeholders elsewhere.
    let mut feat_ids: Vec<Option<NodeId>> = Vec::with_capacity(model.n);
    let mut spatial = None;
    for slot in images.iter() {
        match slot {
            Some(img) => {
                let x = g.constant(img.clone());
                let f = enc_nodes.forward(g, x)?;
                let (_, h, w) = g.value(f).dims3()?;
                spatial = Some((h, w));
                feat_ids.push(Some(f));
            }
            None => feat_ids.push(None),
        }
    }
    let (fh, fw) = spatial.ok_or(Error::EmptyAvailableSet)?;
    let zero_shape = [model.channels, fh, fw];
    let feat_ids: Vec<NodeId> = feat_ids
        .into_iter()
        .map(|f| f.unwrap_or_else(|| g.constant(Tensor::zeros(&zero_shape))))
        .collect();

    // Contribution weights.
    let full_code = g.constant(Tensor::from_vec(&[2 * model.n], code.full_vec::<T>())?);
    let omega0 = fus_nodes.initial_weights_on(g, full_code)?;
    let omega = g.mask_renorm(omega0, &code.src_flags())?;

    // Weighted average and attention residual.
    let fused = g.weighted_sum(&feat_ids, omega)?;
    let att_gen = att_nodes.generate(g, full_code)?;
    let stacked = g.concat_channels(&feat_ids)?;
    let residual = att_gen.forward(g, stacked)?;
    let refined = g.add(fused, residual)?;

    // Both branches decode through the same generated kernels.
    let tgt_code = g.constant(Tensor::from_vec(&[model.n], code.tgt_vec::<T>())?);
    let dec_gen = dec_nodes.generate(g, tgt_code)?;
    let x_plain = dec_gen.forward(g, fused)?;
    let x_attended = dec_gen.forward(g, refined)?;

    Ok(SynthesisGraph {
        x_plain,
        x_attended,
        omega,
        fused,
    })
}

/// Run the full pipeline for one sample.
pub fn synthesize<T: Scalar>(
    model: &ModelParams<T>,
    images: &[Option<Tensor<T>>],
    code: &TaskCode,
) -> Result<SynthesisOutput<T>> {
    let mut g = Graph::new();
    let mut binds = ParamBindings::new();
    let sg = synthesize_on_graph(
        &mut g,
        &mut binds,
        model,
        images,
        code,
        Trainability::frozen(),
    )?;
    let x_plain = g.value(sg.x_plain).clone();
    let x_attended = g.value(sg.x_attended).clone();
    let omega = FusionWeights::from_masked(g.value(sg.omega).data().to_vec());
    let map = tsem(&x_plain, &x_attended)?;
    Ok(SynthesisOutput {
        x_plain,
        x_attended,
        omega,
        tsem: map,
    })
}
