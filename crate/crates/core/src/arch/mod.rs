//! The model zoo: a shared encoder and the eight decoder designs compared
//! against each other, plus the accounting used to reason about them
//! (trainable parameters, inference storage, receptive field).

mod io;

pub use io::{load_model, save_model};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{
    add, batch_norm_eval, batch_norm_train, conv2d, depthwise_conv2d, max_unpool2x2, maxpool2x2,
    relu, softmax_channels, transposed_conv2d, upsample_fixed, BatchStats, ConvParams, Mode,
    PoolIndices,
};
use crate::scalar::Float;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Shape, Tensor};
use crate::train::he_init_from;

/// Upsampling kernels in the deconvolution-based decoders are 8x8; with
/// stride 2 and padding 3 each stage doubles the resolution exactly.
pub const UPSAMPLE_KERNEL: usize = 8;
pub const UPSAMPLE_STRIDE: usize = 2;
pub const UPSAMPLE_PAD: usize = 3;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum VariantKind {
    SegNetBasic,
    SegNetBasicSingleChannelDecoder,
    SegNetBasicEncoderAddition,
    FcnBasic,
    FcnBasicNoAddition,
    FcnBasicNoDimReduction,
    FcnBasicNoAdditionNoDimReduction,
    BilinearInterpolation,
}

impl VariantKind {
    pub const ALL: [VariantKind; 8] = [
        VariantKind::SegNetBasic,
        VariantKind::SegNetBasicSingleChannelDecoder,
        VariantKind::SegNetBasicEncoderAddition,
        VariantKind::FcnBasic,
        VariantKind::FcnBasicNoAddition,
        VariantKind::FcnBasicNoDimReduction,
        VariantKind::FcnBasicNoAdditionNoDimReduction,
        VariantKind::BilinearInterpolation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::SegNetBasic => "segnet-basic",
            VariantKind::SegNetBasicSingleChannelDecoder => "segnet-basic-single-channel-decoder",
            VariantKind::SegNetBasicEncoderAddition => "segnet-basic-encoder-addition",
            VariantKind::FcnBasic => "fcn-basic",
            VariantKind::FcnBasicNoAddition => "fcn-basic-no-addition",
            VariantKind::FcnBasicNoDimReduction => "fcn-basic-no-dim-reduction",
            VariantKind::FcnBasicNoAdditionNoDimReduction => {
                "fcn-basic-no-addition-no-dim-reduction"
            }
            VariantKind::BilinearInterpolation => "bilinear-interpolation",
        }
    }

    pub fn from_name(s: &str) -> Option<VariantKind> {
        VariantKind::ALL.iter().copied().find(|v| v.name() == s)
    }

    pub fn id(self) -> u32 {
        VariantKind::ALL.iter().position(|&v| v == self).unwrap() as u32
    }

    pub fn from_id(id: u32) -> Option<VariantKind> {
        VariantKind::ALL.get(id as usize).copied()
    }

    /// Whether the decoders consume stored max-pooling indices.
    pub fn uses_pool_indices(self) -> bool {
        matches!(
            self,
            VariantKind::SegNetBasic
                | VariantKind::SegNetBasicSingleChannelDecoder
                | VariantKind::SegNetBasicEncoderAddition
        )
    }

    fn fcn_reduces_dims(self) -> bool {
        matches!(self, VariantKind::FcnBasic | VariantKind::FcnBasicNoAddition)
    }

    /// Whether the decoders add stored encoder feature maps.
    pub fn adds_encoder_maps(self) -> bool {
        matches!(
            self,
            VariantKind::SegNetBasicEncoderAddition
                | VariantKind::FcnBasic
                | VariantKind::FcnBasicNoDimReduction
        )
    }
}

/// One encoder stage: `convs` conv->BN->ReLU layers at `channels` feature
/// maps, followed by the 2x2 pool. The basic variants use one conv per
/// stage; deeper schedules (e.g. the 13-layer configuration) use more.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct StageSpec {
    pub channels: usize,
    pub convs: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Float> BatchNorm<T> {
    fn new(channels: usize) -> BatchNorm<T> {
        BatchNorm {
            scale: Tensor::ones(Shape::new(1, channels, 1, 1)).requires_grad(true),
            shift: Tensor::zeros(Shape::new(1, channels, 1, 1)).requires_grad(true),
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
        }
    }
}

/// Bias-free convolution followed by batch norm.
#[derive(Clone, Debug)]
struct ConvBnLayer<T> {
    weight: Tensor<T>,
    bn: BatchNorm<T>,
}

#[derive(Clone, Debug)]
struct EncoderStage<T> {
    layers: Vec<ConvBnLayer<T>>,
}

#[derive(Clone, Debug)]
enum DecoderStage<T> {
    /// Unpool with the paired encoder's indices, then conv->BN layers
    /// (depthwise single-channel filters in the smaller variant).
    SegNet { layers: Vec<ConvBnLayer<T>>, depthwise: bool, indices_from: usize },
    /// Learned 8x8 stride-2 transposed convolution, bilinear-initialized.
    Fcn { deconv_weight: Tensor<T> },
    /// Fixed bilinear 2x upsampling; nothing trainable.
    FixedBilinear,
}

/// Input preprocessing carried with the model so prediction matches
/// training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preproc {
    pub lcn: bool,
    pub lcn_window: usize,
    pub lcn_sigma: f64,
}

impl Default for Preproc {
    fn default() -> Self {
        Preproc { lcn: true, lcn_window: 9, lcn_sigma: 2.0 }
    }
}

/// A built network: layer inventory, parameters and hyperparameters for one
/// decoder variant.
#[derive(Clone, Debug)]
pub struct ModelSpec<T> {
    kind: VariantKind,
    stages: Vec<StageSpec>,
    kernel: usize,
    num_classes: usize,
    input_channels: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub preproc: Preproc,
    encoders: Vec<EncoderStage<T>>,
    decoders: Vec<DecoderStage<T>>,
    /// Per encoder level; Some only where an FCN variant compresses that
    /// level's pooled map with 1x1xC xK filters.
    dim_reducers: Vec<Option<Tensor<T>>>,
    classifier: Tensor<T>,
    /// Shared fixed (1,1,8,8) kernel for the bilinear variant.
    upsample_kernel: Option<Tensor<T>>,
}

/// Everything a forward pass produces and stores.
#[derive(Clone, Debug)]
pub struct ForwardArtifacts<T> {
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
    pub stored_indices: Vec<PoolIndices>,
    pub stored_encoder_maps: Vec<Tensor<T>>,
}

/// Name -> tape node mapping for the parameters bound during a recorded
/// forward pass.
pub struct ParamBindings {
    nodes: HashMap<String, NodeId>,
}

impl ParamBindings {
    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.nodes.get(name).copied()
    }
}

struct Binder<'a, T: Float> {
    tape: Option<&'a Tape<T>>,
    nodes: HashMap<String, NodeId>,
}

impl<'a, T: Float> Binder<'a, T> {
    fn bind(&mut self, name: String, t: &Tensor<T>) -> Tensor<T> {
        match self.tape {
            Some(tape) => {
                // a tensor already attached to the current tape keeps its
                // node, so callers may pre-attach parameters themselves
                if let Some(id) = t.node() {
                    self.nodes.insert(name, id);
                    return t.clone();
                }
                let leaf = tape.leaf(t);
                self.nodes.insert(name, leaf.node().unwrap());
                leaf
            }
            None => t.detached(),
        }
    }
}

fn mirror_channels(stages: &[StageSpec], level: usize) -> usize {
    if level == 0 {
        stages[0].channels
    } else {
        stages[level - 1].channels
    }
}

/// Build one of the eight variants with a uniform schedule: `depth` stages
/// of one `channels`-map convolution each.
pub fn build_variant<T: Float>(
    kind: VariantKind,
    num_classes: usize,
    depth: usize,
    channels: usize,
    kernel: usize,
    seed: u64,
) -> Result<ModelSpec<T>> {
    let stages = vec![StageSpec { channels, convs: 1 }; depth];
    build_variant_stages(kind, num_classes, &stages, kernel, seed)
}

/// Build a variant over an explicit per-stage schedule; `(64,2),(128,2),
/// (256,3),(512,3),(512,3)` with kernel 3 gives the 13-layer configuration.
pub fn build_variant_stages<T: Float>(
    kind: VariantKind,
    num_classes: usize,
    stages: &[StageSpec],
    kernel: usize,
    seed: u64,
) -> Result<ModelSpec<T>> {
    if num_classes < 2 {
        return Err(Error::invalid("build_variant", format!("K must be >= 2, got {num_classes}")));
    }
    if stages.is_empty() {
        return Err(Error::invalid("build_variant", "depth must be >= 1"));
    }
    if kernel % 2 == 0 || kernel == 0 {
        return Err(Error::invalid("build_variant", format!("kernel must be odd, got {kernel}")));
    }
    for (i, st) in stages.iter().enumerate() {
        if st.channels < 1 || st.convs < 1 {
            return Err(Error::invalid(
                "build_variant",
                format!("stage {i} must have channels >= 1 and convs >= 1"),
            ));
        }
    }
    if kind == VariantKind::SegNetBasicSingleChannelDecoder
        && stages.iter().any(|s| s.channels != stages[0].channels)
    {
        return Err(Error::invalid(
            "build_variant",
            "single-channel decoder filters require a uniform channel schedule",
        ));
    }

    let input_channels = 3usize;
    let depth = stages.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pad = kernel / 2;
    let _ = pad;

    let mut encoders = Vec::with_capacity(depth);
    let mut in_ch = input_channels;
    for st in stages {
        let mut layers = Vec::with_capacity(st.convs);
        for _ in 0..st.convs {
            let fan_in = in_ch * kernel * kernel;
            let weight = he_init_from::<T>(
                Shape::new(st.channels, in_ch, kernel, kernel),
                fan_in,
                &mut rng,
            )
            .requires_grad(true);
            layers.push(ConvBnLayer { weight, bn: BatchNorm::new(st.channels) });
            in_ch = st.channels;
        }
        encoders.push(EncoderStage { layers });
    }

    let mut decoders = Vec::with_capacity(depth);
    let mut upsample_kernel = None;
    match kind {
        VariantKind::SegNetBasic
        | VariantKind::SegNetBasicEncoderAddition
        | VariantKind::SegNetBasicSingleChannelDecoder => {
            let depthwise = kind == VariantKind::SegNetBasicSingleChannelDecoder;
            for d in 0..depth {
                let e = depth - 1 - d;
                let m = stages[e].convs;
                let mut layers = Vec::with_capacity(m);
                let mut cur = stages[e].channels;
                for j in 0..m {
                    let out_ch = if j + 1 == m { mirror_channels(stages, e) } else { cur };
                    let weight = if depthwise {
                        he_init_from::<T>(
                            Shape::new(cur, 1, kernel, kernel),
                            kernel * kernel,
                            &mut rng,
                        )
                    } else {
                        he_init_from::<T>(
                            Shape::new(out_ch, cur, kernel, kernel),
                            cur * kernel * kernel,
                            &mut rng,
                        )
                    }
                    .requires_grad(true);
                    layers.push(ConvBnLayer { weight, bn: BatchNorm::new(out_ch) });
                    cur = out_ch;
                }
                decoders.push(DecoderStage::SegNet { layers, depthwise, indices_from: e });
            }
        }
        VariantKind::FcnBasic
        | VariantKind::FcnBasicNoAddition
        | VariantKind::FcnBasicNoDimReduction
        | VariantKind::FcnBasicNoAdditionNoDimReduction => {
            for d in 0..depth {
                let e = depth - 1 - d;
                let (cin, cout) = if kind.fcn_reduces_dims() {
                    (num_classes, num_classes)
                } else {
                    (stages[e].channels, mirror_channels(stages, e))
                };
                let deconv_weight =
                    bilinear_diag_init::<T>(UPSAMPLE_KERNEL, UPSAMPLE_STRIDE, cin, cout)
                        .requires_grad(true);
                decoders.push(DecoderStage::Fcn { deconv_weight });
            }
        }
        VariantKind::BilinearInterpolation => {
            for _ in 0..depth {
                decoders.push(DecoderStage::FixedBilinear);
            }
            upsample_kernel =
                Some(crate::ops::bilinear_kernel_for_stride::<T>(UPSAMPLE_KERNEL, UPSAMPLE_STRIDE, 1));
        }
    }

    let mut dim_reducers: Vec<Option<Tensor<T>>> = vec![None; depth];
    if kind.fcn_reduces_dims() {
        let reduce_all = kind == VariantKind::FcnBasic;
        for (level, slot) in dim_reducers.iter_mut().enumerate() {
            if reduce_all || level == depth - 1 {
                let c = stages[level].channels;
                *slot = Some(
                    he_init_from::<T>(Shape::new(num_classes, c, 1, 1), c, &mut rng)
                        .requires_grad(true),
                );
            }
        }
    }

    let classifier_in = match kind {
        VariantKind::FcnBasic | VariantKind::FcnBasicNoAddition => num_classes,
        VariantKind::BilinearInterpolation => stages[depth - 1].channels,
        _ => mirror_channels(stages, 0),
    };
    let classifier =
        he_init_from::<T>(Shape::new(num_classes, classifier_in, 1, 1), classifier_in, &mut rng)
            .requires_grad(true);

    Ok(ModelSpec {
        kind,
        stages: stages.to_vec(),
        kernel,
        num_classes,
        input_channels,
        bn_epsilon: 1e-5,
        bn_momentum: 0.1,
        preproc: Preproc::default(),
        encoders,
        decoders,
        dim_reducers,
        classifier,
        upsample_kernel,
    })
}

/// (c_in, c_out, k, k) transposed-conv weight with channel i upsampling onto
/// channel i via bilinear interpolation weights, zeros elsewhere.
fn bilinear_diag_init<T: Float>(k: usize, factor: usize, c_in: usize, c_out: usize) -> Tensor<T> {
    let plane = crate::ops::bilinear_kernel_for_stride::<T>(k, factor, 1);
    let mut data = vec![T::ZERO; c_in * c_out * k * k];
    for ch in 0..c_in.min(c_out) {
        let base = (ch * c_out + ch) * k * k;
        data[base..base + k * k].copy_from_slice(plane.data());
    }
    Tensor::from_vec(data, Shape::new(c_in, c_out, k, k)).unwrap()
}

impl<T: Float> ModelSpec<T> {
    pub fn kind(&self) -> VariantKind {
        self.kind
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    /// Feature maps in the first stage (64 in the basic configuration).
    pub fn first_stage_channels(&self) -> usize {
        self.stages[0].channels
    }

    /// (decoder position, encoder position) index-transfer pairing, 0-based:
    /// decoder d consumes the indices captured by encoder depth-1-d. Empty
    /// for variants that do not reuse pooling indices.
    pub fn index_pairing(&self) -> Vec<(usize, usize)> {
        self.decoders
            .iter()
            .enumerate()
            .filter_map(|(d, dec)| match dec {
                DecoderStage::SegNet { indices_from, .. } => Some((d, *indices_from)),
                _ => None,
            })
            .collect()
    }

    /// Ordered (name, tensor) list of every trainable parameter. Fixed
    /// bilinear kernels are not parameters.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, enc) in self.encoders.iter().enumerate() {
            for (j, layer) in enc.layers.iter().enumerate() {
                out.push((format!("enc{i}.{j}.conv.weight"), &layer.weight));
                out.push((format!("enc{i}.{j}.bn.scale"), &layer.bn.scale));
                out.push((format!("enc{i}.{j}.bn.shift"), &layer.bn.shift));
            }
        }
        for (i, dec) in self.decoders.iter().enumerate() {
            match dec {
                DecoderStage::SegNet { layers, .. } => {
                    for (j, layer) in layers.iter().enumerate() {
                        out.push((format!("dec{i}.{j}.conv.weight"), &layer.weight));
                        out.push((format!("dec{i}.{j}.bn.scale"), &layer.bn.scale));
                        out.push((format!("dec{i}.{j}.bn.shift"), &layer.bn.shift));
                    }
                }
                DecoderStage::Fcn { deconv_weight } => {
                    out.push((format!("dec{i}.deconv.weight"), deconv_weight));
                }
                DecoderStage::FixedBilinear => {}
            }
        }
        for (level, red) in self.dim_reducers.iter().enumerate() {
            if let Some(w) = red {
                out.push((format!("dimred{level}.weight"), w));
            }
        }
        out.push(("classifier.weight".to_string(), &self.classifier));
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (i, enc) in self.encoders.iter_mut().enumerate() {
            for (j, layer) in enc.layers.iter_mut().enumerate() {
                out.push((format!("enc{i}.{j}.conv.weight"), &mut layer.weight));
                out.push((format!("enc{i}.{j}.bn.scale"), &mut layer.bn.scale));
                out.push((format!("enc{i}.{j}.bn.shift"), &mut layer.bn.shift));
            }
        }
        for (i, dec) in self.decoders.iter_mut().enumerate() {
            match dec {
                DecoderStage::SegNet { layers, .. } => {
                    for (j, layer) in layers.iter_mut().enumerate() {
                        out.push((format!("dec{i}.{j}.conv.weight"), &mut layer.weight));
                        out.push((format!("dec{i}.{j}.bn.scale"), &mut layer.bn.scale));
                        out.push((format!("dec{i}.{j}.bn.shift"), &mut layer.bn.shift));
                    }
                }
                DecoderStage::Fcn { deconv_weight } => {
                    out.push((format!("dec{i}.deconv.weight"), deconv_weight));
                }
                DecoderStage::FixedBilinear => {}
            }
        }
        for (level, red) in self.dim_reducers.iter_mut().enumerate() {
            if let Some(w) = red {
                out.push((format!("dimred{level}.weight"), w));
            }
        }
        out.push(("classifier.weight".to_string(), &mut self.classifier));
        out
    }

    /// Batch-norm layers in forward-traversal order.
    pub(crate) fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out: Vec<&mut BatchNorm<T>> = Vec::new();
        for enc in self.encoders.iter_mut() {
            for layer in enc.layers.iter_mut() {
                out.push(&mut layer.bn);
            }
        }
        for dec in self.decoders.iter_mut() {
            if let DecoderStage::SegNet { layers, .. } = dec {
                for layer in layers.iter_mut() {
                    out.push(&mut layer.bn);
                }
            }
        }
        out
    }

    /// Exact count of trainable scalar parameters.
    pub fn count_params(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn validate_input<T: Float>(spec: &ModelSpec<T>, x: &Tensor<T>) -> Result<()> {
    let s = x.shape();
    if s.c != spec.input_channels {
        return Err(Error::ChannelMismatch {
            op: "forward",
            expected: spec.input_channels,
            got: s.c,
        });
    }
    let div = 1usize << spec.depth();
    if s.h % div != 0 || s.w % div != 0 || s.h / div == 0 || s.w / div == 0 {
        return Err(Error::invalid(
            "forward",
            format!("input {}x{} must be divisible by 2^depth = {div}", s.h, s.w),
        ));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn apply_conv_bn<T: Float>(
    tape: Option<&Tape<T>>,
    binder: &mut Binder<T>,
    bn_stats: &mut Vec<BatchStats<T>>,
    mode: Mode,
    name: &str,
    layer: &ConvBnLayer<T>,
    depthwise: bool,
    kernel: usize,
    epsilon: f64,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let weight = binder.bind(format!("{name}.conv.weight"), &layer.weight);
    let params = ConvParams::new(weight, None, 1, kernel / 2);
    let y = if depthwise {
        depthwise_conv2d(tape, x, &params)?
    } else {
        conv2d(tape, x, &params)?
    };
    let scale = binder.bind(format!("{name}.bn.scale"), &layer.bn.scale);
    let shift = binder.bind(format!("{name}.bn.shift"), &layer.bn.shift);
    match mode {
        Mode::Train => {
            let (y, stats) = batch_norm_train(tape, &y, &scale, &shift, epsilon)?;
            bn_stats.push(stats);
            Ok(y)
        }
        Mode::Eval => batch_norm_eval(
            tape,
            &y,
            &scale,
            &shift,
            &layer.bn.running_mean,
            &layer.bn.running_var,
            epsilon,
        ),
    }
}

fn engine<T: Float>(
    spec: &ModelSpec<T>,
    x: &Tensor<T>,
    mode: Mode,
    tape: Option<&Tape<T>>,
    binder: &mut Binder<T>,
    bn_stats: &mut Vec<BatchStats<T>>,
) -> Result<ForwardArtifacts<T>> {
    validate_input(spec, x)?;
    let depth = spec.depth();
    let eps = spec.bn_epsilon;

    let mut cur = x.clone();
    let mut pooled: Vec<Tensor<T>> = Vec::with_capacity(depth);
    let mut indices: Vec<PoolIndices> = Vec::with_capacity(depth);
    let mut prepool: Vec<(usize, usize)> = Vec::with_capacity(depth);
    for (i, enc) in spec.encoders.iter().enumerate() {
        for (j, layer) in enc.layers.iter().enumerate() {
            cur = apply_conv_bn(
                tape,
                binder,
                bn_stats,
                mode,
                &format!("enc{i}.{j}"),
                layer,
                false,
                spec.kernel,
                eps,
                &cur,
            )?;
            cur = relu(tape, &cur);
        }
        prepool.push((cur.shape().h, cur.shape().w));
        let (p, idx) = maxpool2x2(tape, &cur)?;
        pooled.push(p.clone());
        indices.push(idx);
        cur = p;
    }

    let mut stored_encoder_maps: Vec<Tensor<T>> = Vec::new();
    match spec.kind {
        VariantKind::SegNetBasic
        | VariantKind::SegNetBasicSingleChannelDecoder
        | VariantKind::SegNetBasicEncoderAddition => {
            for (d, dec) in spec.decoders.iter().enumerate() {
                let DecoderStage::SegNet { layers, depthwise, indices_from } = dec else {
                    unreachable!()
                };
                let e = *indices_from;
                let (ph, pw) = prepool[e];
                cur = max_unpool2x2(tape, &cur, &indices[e], ph, pw)?;
                for (j, layer) in layers.iter().enumerate() {
                    cur = apply_conv_bn(
                        tape,
                        binder,
                        bn_stats,
                        mode,
                        &format!("dec{d}.{j}"),
                        layer,
                        *depthwise,
                        spec.kernel,
                        eps,
                        &cur,
                    )?;
                }
                if spec.kind == VariantKind::SegNetBasicEncoderAddition && d + 1 < depth {
                    let skip = &pooled[e - 1];
                    stored_encoder_maps.push(skip.detached());
                    cur = add(tape, &cur, skip)?;
                }
            }
        }
        VariantKind::FcnBasic
        | VariantKind::FcnBasicNoAddition
        | VariantKind::FcnBasicNoDimReduction
        | VariantKind::FcnBasicNoAdditionNoDimReduction => {
            let reduce = |binder: &mut Binder<T>, level: usize, t: &Tensor<T>| -> Result<Tensor<T>> {
                let w = spec.dim_reducers[level].as_ref().expect("dim reducer present");
                let bound = binder.bind(format!("dimred{level}.weight"), w);
                conv2d(tape, t, &ConvParams::new(bound, None, 1, 0))
            };
            cur = if spec.kind.fcn_reduces_dims() {
                reduce(binder, depth - 1, &pooled[depth - 1])?
            } else {
                pooled[depth - 1].clone()
            };
            let with_addition = matches!(
                spec.kind,
                VariantKind::FcnBasic | VariantKind::FcnBasicNoDimReduction
            );
            for (d, dec) in spec.decoders.iter().enumerate() {
                let DecoderStage::Fcn { deconv_weight } = dec else { unreachable!() };
                let bound = binder.bind(format!("dec{d}.deconv.weight"), deconv_weight);
                let params = ConvParams::new(bound, None, UPSAMPLE_STRIDE, UPSAMPLE_PAD);
                cur = transposed_conv2d(tape, &cur, &params)?;
                if with_addition && d + 1 < depth {
                    let e = depth - 2 - d;
                    let skip = if spec.kind.fcn_reduces_dims() {
                        reduce(binder, e, &pooled[e])?
                    } else {
                        pooled[e].clone()
                    };
                    stored_encoder_maps.push(skip.detached());
                    cur = add(tape, &cur, &skip)?;
                }
            }
        }
        VariantKind::BilinearInterpolation => {
            let kernel = spec.upsample_kernel.as_ref().expect("bilinear kernel present");
            for _ in 0..depth {
                cur = upsample_fixed(tape, &cur, kernel, UPSAMPLE_STRIDE, UPSAMPLE_PAD)?;
            }
        }
    }

    let classifier = binder.bind("classifier.weight".to_string(), &spec.classifier);
    let logits = conv2d(tape, &cur, &ConvParams::new(classifier, None, 1, 0))?;
    let probabilities = softmax_channels(None, &logits.detached());

    Ok(ForwardArtifacts { logits, probabilities, stored_indices: indices, stored_encoder_maps })
}

/// Inference forward pass: batch norm uses running statistics, nothing is
/// recorded, the model is untouched. Safe to call concurrently on a shared
/// model.
pub fn forward_eval<T: Float>(spec: &ModelSpec<T>, batch: &Tensor<T>) -> Result<ForwardArtifacts<T>> {
    let mut binder = Binder { tape: None, nodes: HashMap::new() };
    let mut stats = Vec::new();
    engine(spec, batch, Mode::Eval, None, &mut binder, &mut stats)
}

/// Training forward pass recorded on `tape`: batch norm normalizes with
/// batch statistics and the running statistics are updated. Returns the
/// artifacts plus the parameter-to-tape-node bindings the optimizer needs.
pub fn forward_train<T: Float>(
    spec: &mut ModelSpec<T>,
    tape: &Tape<T>,
    batch: &Tensor<T>,
) -> Result<(ForwardArtifacts<T>, ParamBindings)> {
    let mut binder = Binder { tape: Some(tape), nodes: HashMap::new() };
    let mut stats = Vec::new();
    let artifacts = engine(spec, batch, Mode::Train, Some(tape), &mut binder, &mut stats)?;
    let momentum = spec.bn_momentum;
    let layers = spec.bn_layers_mut();
    debug_assert_eq!(layers.len(), stats.len());
    for (bn, st) in layers.into_iter().zip(&stats) {
        crate::ops::update_running_stats(&mut bn.running_mean, &mut bn.running_var, st, momentum);
    }
    Ok((artifacts, ParamBindings { nodes: binder.nodes }))
}

/// What a variant must keep around at inference time, using the paper's
/// first-layer convention: the feature map (or index) storage of the first
/// encoder's pooled output at (h/2) x (w/2).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StorageReport {
    pub bytes_indices: u64,
    pub bytes_encoder_maps: u64,
    /// Stored channel count relative to Table-style accounting: indices-only
    /// variants report 1, K compressed maps report K, full maps report the
    /// channel count, fixed upsampling reports 0.
    pub multiplier: u32,
    /// The no-addition deconvolution variant stores nothing by design; it is
    /// flagged rather than conflated with the genuinely zero-cost variants.
    pub multiplier_not_applicable: bool,
}

pub fn storage_cost<T: Float>(
    spec: &ModelSpec<T>,
    h: usize,
    w: usize,
    precision_bytes: usize,
) -> Result<StorageReport> {
    // only the first pooling layer enters the accounting, so the input just
    // has to survive one 2x2 pool
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid("storage_cost", format!("{h}x{w} must be even")));
    }
    let windows = (h as u64 / 2) * (w as u64 / 2);
    let c1 = spec.first_stage_channels() as u64;
    let k = spec.num_classes as u64;

    let bytes_indices = if spec.kind.uses_pool_indices() {
        (c1 * windows * 2).div_ceil(8)
    } else {
        0
    };
    let (stored_maps, multiplier, na) = match spec.kind {
        VariantKind::SegNetBasic | VariantKind::SegNetBasicSingleChannelDecoder => (0, 1, false),
        VariantKind::SegNetBasicEncoderAddition => (c1, c1 as u32, false),
        VariantKind::FcnBasic => (k, k as u32, false),
        VariantKind::FcnBasicNoAddition => (0, 0, true),
        VariantKind::FcnBasicNoDimReduction => (c1, c1 as u32, false),
        VariantKind::FcnBasicNoAdditionNoDimReduction => (0, 0, false),
        VariantKind::BilinearInterpolation => (0, 0, false),
    };
    Ok(StorageReport {
        bytes_indices,
        bytes_encoder_maps: stored_maps * windows * precision_bytes as u64,
        multiplier,
        multiplier_not_applicable: na,
    })
}

/// Receptive field of one deepest-layer unit under
/// [conv(k, stride 1) -> pool(2, stride 2)] x depth, via the standard
/// recurrence r += (k-1)*j for the conv and r += j; j *= 2 for the pool.
pub fn receptive_field(depth: usize, kernel: usize) -> usize {
    let mut r = 1usize;
    let mut j = 1usize;
    for _ in 0..depth {
        r += (kernel - 1) * j;
        r += j;
        j *= 2;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build_f32(kind: VariantKind) -> ModelSpec<f32> {
        build_variant(kind, 11, 4, 64, 7, 1).unwrap()
    }

    /// Closed-form parameter inventory, written independently of the
    /// builder's bookkeeping.
    fn closed_form_params(kind: VariantKind, k: usize, depth: usize, ch: usize, ker: usize) -> usize {
        let ker2 = ker * ker;
        // encoder: first conv from RGB, the rest ch->ch; 2 BN params per map
        let mut total = ker2 * 3 * ch + (depth - 1) * ker2 * ch * ch + depth * 2 * ch;
        match kind {
            VariantKind::SegNetBasic | VariantKind::SegNetBasicEncoderAddition => {
                total += depth * (ker2 * ch * ch + 2 * ch); // dense decoder conv + BN
                total += ch * k; // 1x1 classifier
            }
            VariantKind::SegNetBasicSingleChannelDecoder => {
                total += depth * (ker2 * ch + 2 * ch); // depthwise decoder conv + BN
                total += ch * k;
            }
            VariantKind::FcnBasic => {
                total += depth * ch * k; // 1x1xCxK dim reduction at every level
                total += depth * 64 * k * k; // 8x8 KxK deconv kernels
                total += k * k; // classifier on K channels
            }
            VariantKind::FcnBasicNoAddition => {
                total += ch * k; // only the deepest level is compressed
                total += depth * 64 * k * k;
                total += k * k;
            }
            VariantKind::FcnBasicNoDimReduction
            | VariantKind::FcnBasicNoAdditionNoDimReduction => {
                total += depth * 64 * ch * ch; // 8x8 CxC deconv kernels
                total += ch * k;
            }
            VariantKind::BilinearInterpolation => {
                total += ch * k; // encoder + classifier only
            }
        }
        total
    }

    #[test]
    fn count_params_matches_closed_form_for_all_variants() {
        for kind in VariantKind::ALL {
            let spec = build_f32(kind);
            let want = closed_form_params(kind, 11, 4, 64, 7);
            assert_eq!(spec.count_params(), want, "{}", kind.name());
        }
    }

    #[test]
    fn table_scale_parameter_totals() {
        // published totals in millions, +/-6%
        for (kind, published) in [
            (VariantKind::SegNetBasic, 1.425),
            (VariantKind::SegNetBasicSingleChannelDecoder, 0.625),
            (VariantKind::FcnBasic, 0.65),
            (VariantKind::FcnBasicNoDimReduction, 1.625),
        ] {
            let got = build_f32(kind).count_params() as f64 / 1e6;
            let rel = (got - published).abs() / published;
            assert!(rel < 0.06, "{}: {got}M vs {published}M ({rel:.3})", kind.name());
        }
    }

    #[test]
    fn params_ordering_mirrors_table() {
        let p = |k| build_f32(k).count_params();
        assert!(
            p(VariantKind::SegNetBasicSingleChannelDecoder) < p(VariantKind::FcnBasic)
                && p(VariantKind::FcnBasic) < p(VariantKind::SegNetBasic)
                && p(VariantKind::SegNetBasic) < p(VariantKind::FcnBasicNoDimReduction)
        );
    }

    #[test]
    fn fcn_dim_reduction_layer_sizes() {
        let spec = build_f32(VariantKind::FcnBasic);
        let reducers: Vec<_> = spec
            .named_parameters()
            .into_iter()
            .filter(|(n, _)| n.starts_with("dimred"))
            .collect();
        assert_eq!(reducers.len(), 4);
        for (_, t) in reducers {
            assert_eq!(t.numel(), 64 * 11); // 1x1x64xK filters
        }
    }

    #[test]
    fn doubling_channels_increases_count() {
        for kind in VariantKind::ALL {
            let small = build_variant::<f32>(kind, 11, 4, 32, 7, 1).unwrap().count_params();
            let big = build_variant::<f32>(kind, 11, 4, 64, 7, 1).unwrap().count_params();
            assert!(big > small, "{}", kind.name());
        }
    }

    #[test]
    fn bilinear_has_no_trainable_upsampling() {
        let spec = build_f32(VariantKind::BilinearInterpolation);
        assert!(spec
            .named_parameters()
            .iter()
            .all(|(n, _)| !n.contains("deconv") && !n.contains("dec")));
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(build_variant::<f32>(VariantKind::SegNetBasic, 1, 4, 64, 7, 1).is_err());
        assert!(build_variant::<f32>(VariantKind::SegNetBasic, 11, 0, 64, 7, 1).is_err());
        assert!(build_variant::<f32>(VariantKind::SegNetBasic, 11, 4, 0, 7, 1).is_err());
        assert!(build_variant::<f32>(VariantKind::SegNetBasic, 11, 4, 64, 6, 1).is_err());
    }

    #[test]
    fn receptive_field_values() {
        assert_eq!(receptive_field(4, 7), 106);
        assert_eq!(receptive_field(1, 1), 2);
        assert_eq!(receptive_field(2, 3), 10);
    }

    #[test]
    fn index_pairing_is_reversed() {
        let spec = build_f32(VariantKind::SegNetBasic);
        assert_eq!(spec.index_pairing(), vec![(0, 3), (1, 2), (2, 1), (3, 0)]);
        let fcn = build_f32(VariantKind::FcnBasic);
        assert!(fcn.index_pairing().is_empty());
    }

    #[test]
    fn forward_restores_resolution_for_all_variants() {
        let x = Tensor::<f32>::full(Shape::new(2, 3, 32, 32), 0.1);
        for kind in VariantKind::ALL {
            let spec = build_variant::<f32>(kind, 11, 4, 8, 7, 3).unwrap();
            let art = forward_eval(&spec, &x).unwrap();
            assert_eq!(art.logits.shape(), Shape::new(2, 11, 32, 32), "{}", kind.name());
            assert_eq!(art.probabilities.shape(), art.logits.shape());
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let spec = build_variant::<f32>(VariantKind::SegNetBasic, 5, 2, 8, 3, 9).unwrap();
        let x = he_init_from::<f32>(
            Shape::new(1, 3, 16, 16),
            1,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let a = forward_eval(&spec, &x).unwrap();
        let b = forward_eval(&spec, &x).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let spec = build_variant::<f32>(VariantKind::SegNetBasic, 5, 4, 8, 7, 1).unwrap();
        let odd = Tensor::<f32>::zeros(Shape::new(1, 3, 24, 32));
        assert!(forward_eval(&spec, &odd).is_err()); // 24 not divisible by 16
        let wrong_ch = Tensor::<f32>::zeros(Shape::new(1, 4, 32, 32));
        assert!(forward_eval(&spec, &wrong_ch).is_err());
    }

    #[test]
    fn unpooled_maps_are_sparse_before_decoder_conv() {
        // the engine's unpool output has at most 25% nonzeros; observe it via
        // the round-trip property on a real forward's stored indices
        let spec = build_variant::<f32>(VariantKind::SegNetBasic, 5, 2, 8, 3, 4).unwrap();
        let x = he_init_from::<f32>(
            Shape::new(1, 3, 16, 16),
            1,
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        let art = forward_eval(&spec, &x).unwrap();
        assert_eq!(art.stored_indices.len(), 2);
        let idx = &art.stored_indices[1];
        let (n, c, h, w) = idx.dims();
        let pooled = Tensor::<f32>::ones(Shape::new(n, c, h, w));
        let up = max_unpool2x2(None, &pooled, idx, 2 * h, 2 * w).unwrap();
        let nz = up.iter().filter(|&&v| v != 0.0).count();
        assert!(nz * 4 <= up.numel());
    }

    #[test]
    fn stored_encoder_maps_follow_variant_convention() {
        let x = Tensor::<f32>::full(Shape::new(1, 3, 32, 32), 0.2);
        for kind in VariantKind::ALL {
            let spec = build_variant::<f32>(kind, 6, 4, 8, 7, 3).unwrap();
            let art = forward_eval(&spec, &x).unwrap();
            let expect_maps = kind.adds_encoder_maps();
            assert_eq!(!art.stored_encoder_maps.is_empty(), expect_maps, "{}", kind.name());
            if kind == VariantKind::FcnBasic {
                for m in &art.stored_encoder_maps {
                    assert_eq!(m.shape().c, 6, "compressed to K channels");
                }
            }
            if kind == VariantKind::SegNetBasicEncoderAddition {
                for m in &art.stored_encoder_maps {
                    assert_eq!(m.shape().c, 8, "full encoder channels");
                }
            }
        }
    }

    #[test]
    fn storage_cost_reproduces_the_headline_arithmetic() {
        // 64 float32 maps at 180x240 and the K=11 compressed alternative
        let enc_add = build_f32(VariantKind::SegNetBasicEncoderAddition);
        let r = storage_cost(&enc_add, 360, 480, 4).unwrap();
        assert_eq!(r.bytes_encoder_maps, 11_059_200);
        let fcn = build_f32(VariantKind::FcnBasic);
        let r = storage_cost(&fcn, 360, 480, 4).unwrap();
        assert_eq!(r.bytes_encoder_maps, 1_900_800);
        // index cost: 2 bits per 2x2 window, 64 channels at 180x240 windows
        let segnet = build_f32(VariantKind::SegNetBasic);
        let r = storage_cost(&segnet, 360, 480, 4).unwrap();
        assert_eq!(r.bytes_indices, 691_200);
        assert_eq!(r.bytes_encoder_maps, 0);
    }

    #[test]
    fn storage_multipliers_match_the_table_at_k11() {
        let expect = [
            (VariantKind::SegNetBasic, 1, false),
            (VariantKind::SegNetBasicEncoderAddition, 64, false),
            (VariantKind::SegNetBasicSingleChannelDecoder, 1, false),
            (VariantKind::FcnBasic, 11, false),
            (VariantKind::FcnBasicNoAddition, 0, true),
            (VariantKind::FcnBasicNoDimReduction, 64, false),
            (VariantKind::FcnBasicNoAdditionNoDimReduction, 0, false),
            (VariantKind::BilinearInterpolation, 0, false),
        ];
        for (kind, mult, na) in expect {
            let spec = build_f32(kind);
            let r = storage_cost(&spec, 360, 480, 4).unwrap();
            assert_eq!(r.multiplier, mult, "{}", kind.name());
            assert_eq!(r.multiplier_not_applicable, na, "{}", kind.name());
        }
    }

    #[test]
    fn bilinear_upsampling_kernel_is_outside_the_gradient_graph() {
        use crate::tape::{backward, Tape};
        let mut spec = build_variant::<f32>(VariantKind::BilinearInterpolation, 4, 2, 6, 3, 3).unwrap();
        let x = Tensor::<f32>::full(Shape::new(1, 3, 16, 16), 0.4);
        let tape = Tape::new();
        let (art, bindings) = forward_train(&mut spec, &tape, &x).unwrap();
        let loss = crate::ops::sum_all(Some(&tape), &art.logits);
        let mut grads = backward(&tape, &loss).unwrap();
        // every trainable parameter received a gradient buffer; the fixed
        // upsampling kernel is not among the bound tensors at all
        for (name, _) in spec.named_parameters() {
            let node = bindings.node(&name).unwrap_or_else(|| panic!("{name} unbound"));
            assert!(grads.take(node).is_some(), "{name} has no gradient");
            assert!(!name.contains("upsample"), "{name}");
        }
    }

    #[test]
    fn models_and_tensors_move_across_threads() {
        fn assert_send<T: Send>() {}
        assert_send::<Tensor<f32>>();
        assert_send::<ModelSpec<f32>>();
        assert_send::<crate::ops::PoolIndices>();
    }

    #[test]
    fn thirteen_layer_schedule_builds_and_runs() {
        let stages = [
            StageSpec { channels: 64, convs: 2 },
            StageSpec { channels: 128, convs: 2 },
            StageSpec { channels: 256, convs: 3 },
            StageSpec { channels: 512, convs: 3 },
            StageSpec { channels: 512, convs: 3 },
        ];
        let spec =
            build_variant_stages::<f32>(VariantKind::SegNetBasic, 11, &stages, 3, 1).unwrap();
        assert_eq!(spec.depth(), 5);
        // 13 encoder convolutions
        let enc_convs = spec
            .named_parameters()
            .iter()
            .filter(|(n, _)| n.starts_with("enc") && n.ends_with("conv.weight"))
            .count();
        assert_eq!(enc_convs, 13);
        let x = Tensor::<f32>::full(Shape::new(1, 3, 32, 32), 0.05);
        let art = forward_eval(&spec, &x).unwrap();
        assert_eq!(art.logits.shape(), Shape::new(1, 11, 32, 32));
    }
}
