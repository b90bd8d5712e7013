//! The network's named building blocks, each a composition of tensor
//! primitives with its own weights: stem downsampling, ShuffleNetV2 S1/S2
//! units, SPPF, ECA channel attention and fast-normalized weighted fusion.

use thiserror::Error;

use crate::tensor::{
    batchnorm_infer, channel_shuffle, channel_split, concat_channels, conv1d_channels, conv2d,
    global_avg_pool, maxpool2d, sigmoid_scalar, silu, ConvWeights, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("stem expects 3 input channels and spatial dims divisible by 4, got ({c},{h},{w})")]
    BadStemInput { c: usize, h: usize, w: usize },
    #[error("s1 unit requires an even channel count, got {c}")]
    OddChannels { c: usize },
    #[error("s2 unit produced a zero-sized spatial output from ({h},{w})")]
    ZeroSpatial { h: usize, w: usize },
    #[error("fusion node has {weights} weights but received {inputs} inputs")]
    FusionArity { weights: usize, inputs: usize },
    #[error("fusion inputs disagree on shape: {a:?} vs {b:?}")]
    FusionShape {
        a: (usize, usize, usize, usize),
        b: (usize, usize, usize, usize),
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, BlockError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Silu,
}

/// Inference batch norm parameters for one channel axis.
#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BnParams {
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            mean: vec![0.0; c],
            var: vec![1.0; c],
            eps: 0.0,
        }
    }
}

/// Conv + BN + optional SiLU, the unit every larger block is assembled from.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: ConvWeights,
    pub bn: BnParams,
    pub act: Activation,
}

pub fn conv_bn_act(x: &Tensor, w: &ConvBnAct) -> Result<Tensor> {
    let y = conv2d(x, &w.conv)?;
    let y = batchnorm_infer(&y, &w.bn.gamma, &w.bn.beta, &w.bn.mean, &w.bn.var, w.bn.eps)?;
    Ok(match w.act {
        Activation::None => y,
        Activation::Silu => silu(&y),
    })
}

/// Stem weights: strided entry conv, the conv branch pair, and the final
/// 1x1 projection after concatenating with the pooled branch.
#[derive(Debug, Clone)]
pub struct StemWeights {
    pub conv1: ConvBnAct,
    pub branch_a1: ConvBnAct,
    pub branch_a2: ConvBnAct,
    pub proj: ConvBnAct,
}

/// Dual-branch downsampling entry: 3x3/s2 conv, then {1x1 -> 3x3/s2 conv}
/// concatenated with a 2x2/s2 max pool, projected back by 1x1 conv.
/// Input (n,3,h,w) with h,w divisible by 4 -> (n,24,h/4,w/4).
pub fn stem_block(x: &Tensor, w: &StemWeights) -> Result<Tensor> {
    let (_, c, h, wd) = x.shape();
    if c != 3 || h % 4 != 0 || wd % 4 != 0 || h == 0 || wd == 0 {
        return Err(BlockError::BadStemInput { c, h, w: wd });
    }
    let t = conv_bn_act(x, &w.conv1)?;
    let a = conv_bn_act(&conv_bn_act(&t, &w.branch_a1)?, &w.branch_a2)?;
    let b = maxpool2d(&t, 2, 2, 0)?;
    let cat = concat_channels(&[&a, &b])?;
    conv_bn_act(&cat, &w.proj)
}

/// Right-branch weights of the stride-1 shuffle unit.
#[derive(Debug, Clone)]
pub struct S1Weights {
    pub pw1: ConvBnAct,
    pub dw: ConvBnAct,
    pub pw2: ConvBnAct,
}

/// Stride-1 shuffle unit: split channels in half, leave the left branch
/// untouched, run the right through 1x1 / depthwise 3x3 / 1x1, concat and
/// shuffle with g=2. Shape preserving.
pub fn shuffle_unit_s1(x: &Tensor, w: &S1Weights) -> Result<Tensor> {
    let c = x.c();
    if c % 2 != 0 {
        return Err(BlockError::OddChannels { c });
    }
    let (left, right) = channel_split(x, c / 2)?;
    let r = conv_bn_act(&right, &w.pw1)?;
    let r = conv_bn_act(&r, &w.dw)?;
    let r = conv_bn_act(&r, &w.pw2)?;
    let cat = concat_channels(&[&left, &r])?;
    Ok(channel_shuffle(&cat, 2)?)
}

#[derive(Debug, Clone)]
pub struct S2Weights {
    pub left_dw: ConvBnAct,
    pub left_pw: ConvBnAct,
    pub right_pw1: ConvBnAct,
    pub right_dw: ConvBnAct,
    pub right_pw2: ConvBnAct,
}

/// Stride-2 shuffle unit: both branches downsample by a depthwise stride-2
/// conv, channels are adjusted by 1x1 convs, then concat and shuffle with
/// g=2. Halves the resolution; output channels come from the weights.
pub fn shuffle_unit_s2(x: &Tensor, w: &S2Weights) -> Result<Tensor> {
    let (_, _, h, wd) = x.shape();
    if (h + 1) / 2 == 0 || (wd + 1) / 2 == 0 {
        return Err(BlockError::ZeroSpatial { h, w: wd });
    }
    let a = conv_bn_act(&conv_bn_act(x, &w.left_dw)?, &w.left_pw)?;
    let b = conv_bn_act(x, &w.right_pw1)?;
    let b = conv_bn_act(&b, &w.right_dw)?;
    let b = conv_bn_act(&b, &w.right_pw2)?;
    let cat = concat_channels(&[&a, &b])?;
    Ok(channel_shuffle(&cat, 2)?)
}

#[derive(Debug, Clone)]
pub struct SppfWeights {
    pub reduce: ConvBnAct,
    pub expand: ConvBnAct,
}

/// SPPF: 1x1 reduce to c/2, three chained k x k stride-1 max pools, concat
/// of all four maps, 1x1 expand back to c. Shape preserving.
pub fn sppf(x: &Tensor, w: &SppfWeights, k: usize) -> Result<Tensor> {
    let t = conv_bn_act(x, &w.reduce)?;
    let p1 = maxpool2d(&t, k, 1, k / 2)?;
    let p2 = maxpool2d(&p1, k, 1, k / 2)?;
    let p3 = maxpool2d(&p2, k, 1, k / 2)?;
    let cat = concat_channels(&[&t, &p1, &p2, &p3])?;
    conv_bn_act(&cat, &w.expand)
}

/// ECA parameters: the shared 1-d kernel over the channel descriptor.
#[derive(Debug, Clone)]
pub struct EcaParams {
    pub kernel: Vec<f32>,
}

/// Adaptive ECA kernel size: |log2(c)/gamma + b/gamma| rounded to the
/// nearest odd integer >= 1 (half up, even values bumped to the next odd).
pub fn eca_kernel_size(c: usize, gamma: f64, b: f64) -> usize {
    let raw = ((c as f64).log2() / gamma + b / gamma).abs();
    let mut k = (raw + 0.5).floor() as i64;
    if k % 2 == 0 {
        k += 1;
    }
    k.max(1) as usize
}

/// ECA channel attention: global average pool each channel, run the 1-d
/// conv over the channel descriptor, sigmoid-gate, scale the input.
pub fn eca(x: &Tensor, params: &EcaParams) -> Result<Tensor> {
    let (n, c, h, w) = x.shape();
    let pooled = global_avg_pool(x);
    let mut out = x.clone();
    let hw = h * w;
    for ni in 0..n {
        let desc: Vec<f32> = (0..c).map(|ci| pooled.at(ni, ci, 0, 0)).collect();
        let gates = conv1d_channels(&desc, &params.kernel)?;
        for ci in 0..c {
            let g = sigmoid_scalar(gates[ci]);
            let off = (ni * c + ci) * hw;
            for v in &mut out.data_mut()[off..off + hw] {
                *v *= g;
            }
        }
    }
    Ok(out)
}

/// A weighted-fusion node: raw learnable weights (clamped at zero before
/// normalization), the stabilizer epsilon, and the 3x3 conv applied after
/// the weighted sum.
#[derive(Debug, Clone)]
pub struct FusionNode {
    pub raw_weights: Vec<f32>,
    pub epsilon: f32,
    pub post_conv: ConvBnAct,
}

/// Normalized fusion coefficients u_i / (sum u_j + eps) with u = max(w, 0).
/// Computed in f64 so the eps -> 0 limit holds well below f32 resolution.
pub fn fusion_coefficients(raw_weights: &[f32], epsilon: f32) -> Vec<f64> {
    let clamped: Vec<f64> = raw_weights.iter().map(|&w| f64::from(w).max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    let denom = total + f64::from(epsilon);
    clamped
        .iter()
        .map(|&u| if denom == 0.0 { 0.0 } else { u / denom })
        .collect()
}

/// The normalized weighted sum over equally shaped inputs, without the
/// post-fusion conv.
pub fn fuse_weighted(inputs: &[&Tensor], raw_weights: &[f32], epsilon: f32) -> Result<Tensor> {
    if inputs.len() != raw_weights.len() {
        return Err(BlockError::FusionArity {
            weights: raw_weights.len(),
            inputs: inputs.len(),
        });
    }
    let first = inputs.first().ok_or(TensorError::EmptyList)?;
    for t in inputs.iter().skip(1) {
        if t.shape() != first.shape() {
            return Err(BlockError::FusionShape {
                a: first.shape(),
                b: t.shape(),
            });
        }
    }
    let coeffs = fusion_coefficients(raw_weights, epsilon);
    let (n, c, h, w) = first.shape();
    let mut out = Tensor::zeros(n, c, h, w);
    for (t, &k) in inputs.iter().zip(&coeffs) {
        if k == 0.0 {
            continue;
        }
        let k = k as f32;
        for (d, &s) in out.data_mut().iter_mut().zip(t.data()) {
            *d += k * s;
        }
    }
    Ok(out)
}

/// Full fusion node: normalized weighted sum followed by 3x3 conv + BN + SiLU.
pub fn fast_fusion(inputs: &[&Tensor], node: &FusionNode) -> Result<Tensor> {
    let fused = fuse_weighted(inputs, &node.raw_weights, node.epsilon)?;
    conv_bn_act(&fused, &node.post_conv)
}
