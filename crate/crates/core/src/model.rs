//! Full model assembly: the shuffle backbone with stem, SPPF and ECA, the
//! weighted bidirectional fusion neck, and the three detection heads, plus
//! the weight manifest, parameter/FLOP counting, deterministic init and the
//! binary weight file format.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::{Read, Write};

use indexmap::IndexMap;
use thiserror::Error;

use crate::blocks::{
    self, Activation, BlockError, BnParams, ConvBnAct, EcaParams, S1Weights, S2Weights,
    SppfWeights, StemWeights,
};
use crate::rng::{fnv1a64, SplitMix64};
use crate::tensor::{conv2d, upsample_nearest2x, ConvWeights, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("inconsistent channel plan at {block}: {detail}")]
    BadPlan { block: String, detail: String },
    #[error("input must be (n,3,S,S) with S divisible by 32, got ({n},{c},{h},{w})")]
    BadInput {
        n: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    #[error("pyramid shapes are not a factor-2 ladder: {0}")]
    BadPyramid(String),
    #[error("unknown weight tensor `{0}`")]
    UnknownWeight(String),
    #[error("weight `{name}` has dims {got:?}, expected {expected:?}")]
    ShapeDivergence {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("weight file missing tensor `{0}`")]
    MissingWeight(String),
    #[error("bad weight file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ModelError>;

/// Per-level anchor priors, (width, height) pairs in input pixels.
#[derive(Debug, Clone)]
pub struct AnchorTable {
    pub levels: [[(f32, f32); 3]; 3],
}

impl Default for AnchorTable {
    fn default() -> Self {
        Self {
            levels: [
                [(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)],
                [(30.0, 61.0), (62.0, 45.0), (59.0, 119.0)],
                [(116.0, 90.0), (156.0, 198.0), (373.0, 326.0)],
            ],
        }
    }
}

/// Declarative model configuration. The stage plan follows the 1.0x shuffle
/// reference widths; the neck projects everything to one common width.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub input_size: usize,
    pub class_count: usize,
    pub stem_channels: usize,
    pub stage_widths: [usize; 3],
    pub stage_repeats: [usize; 3],
    pub neck_width: usize,
    pub anchors: AnchorTable,
    pub strides: [usize; 3],
    pub bn_eps: f32,
    pub fusion_eps: f32,
    pub sppf_kernel: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_size: 640,
            class_count: 4,
            stem_channels: 24,
            stage_widths: [116, 232, 464],
            stage_repeats: [3, 7, 3],
            neck_width: 128,
            anchors: AnchorTable::default(),
            strides: [8, 16, 32],
            bn_eps: 1e-5,
            fusion_eps: 1e-4,
            sppf_kernel: 5,
        }
    }
}

impl ModelSpec {
    /// 3 anchors x (x, y, w, h, objectness, classes) per head level.
    pub fn head_channels(&self) -> usize {
        3 * (5 + self.class_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Trainable,
    RunningStat,
}

#[derive(Debug, Clone)]
pub struct WeightTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
    pub kind: WeightKind,
}

impl WeightTensor {
    pub fn elements(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Ordered name -> tensor map for everything the model owns.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    entries: IndexMap<String, WeightTensor>,
}

impl Manifest {
    pub fn add(&mut self, name: &str, dims: Vec<usize>, kind: WeightKind) {
        let len = dims.iter().product();
        self.entries.insert(
            name.to_string(),
            WeightTensor {
                dims,
                data: vec![0.0; len],
                kind,
            },
        );
    }

    pub fn add_conv_bn(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, groups: usize) {
        self.add(
            &format!("{prefix}.conv.weight"),
            vec![c_out, c_in / groups, k, k],
            WeightKind::Trainable,
        );
        for p in ["gamma", "beta"] {
            self.add(&format!("{prefix}.bn.{p}"), vec![c_out], WeightKind::Trainable);
        }
        for p in ["mean", "var"] {
            self.add(&format!("{prefix}.bn.{p}"), vec![c_out], WeightKind::RunningStat);
        }
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut WeightTensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &WeightTensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut WeightTensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Headline parameter count: trainable tensors only.
    pub fn trainable_params(&self) -> usize {
        self.entries
            .values()
            .filter(|t| t.kind == WeightKind::Trainable)
            .map(|t| t.elements())
            .sum()
    }

    /// BN running statistics, reported separately from the headline count.
    pub fn running_stat_params(&self) -> usize {
        self.entries
            .values()
            .filter(|t| t.kind == WeightKind::RunningStat)
            .map(|t| t.elements())
            .sum()
    }
}

/// The assembled graph: spec plus every weight tensor, addressable by name.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub weights: Manifest,
}

/// Construct the weight manifest for the spec. Weights start zeroed; call
/// [`init_weights`] or [`load_weights`] to materialize them.
pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    for (i, w) in spec.stage_widths.iter().enumerate() {
        if w % 2 != 0 {
            return Err(ModelError::BadPlan {
                block: format!("stage{}", i + 2),
                detail: format!("width {w} must be even"),
            });
        }
    }
    if spec.class_count == 0 {
        return Err(ModelError::BadPlan {
            block: "head".into(),
            detail: "class_count must be positive".into(),
        });
    }
    if spec.neck_width == 0 || spec.stem_channels % 2 != 0 {
        return Err(ModelError::BadPlan {
            block: "neck".into(),
            detail: "neck width must be positive and stem channels even".into(),
        });
    }

    let mut m = Manifest::default();
    let stem = spec.stem_channels;

    // stem
    m.add_conv_bn("backbone.stem.conv1", 3, stem, 3, 1);
    m.add_conv_bn("backbone.stem.branch_a1", stem, stem / 2, 1, 1);
    m.add_conv_bn("backbone.stem.branch_a2", stem / 2, stem, 3, 1);
    m.add_conv_bn("backbone.stem.proj", 2 * stem, stem, 1, 1);

    // shuffle stages
    let mut c_in = stem;
    for (si, (&width, &repeats)) in spec
        .stage_widths
        .iter()
        .zip(spec.stage_repeats.iter())
        .enumerate()
    {
        let stage = format!("backbone.stage{}", si + 2);
        let half = width / 2;
        // stride-2 unit
        let p = format!("{stage}.0");
        m.add_conv_bn(&format!("{p}.left_dw"), c_in, c_in, 3, c_in);
        m.add_conv_bn(&format!("{p}.left_pw"), c_in, half, 1, 1);
        m.add_conv_bn(&format!("{p}.right_pw1"), c_in, half, 1, 1);
        m.add_conv_bn(&format!("{p}.right_dw"), half, half, 3, half);
        m.add_conv_bn(&format!("{p}.right_pw2"), half, half, 1, 1);
        // stride-1 units
        for r in 1..=repeats {
            let p = format!("{stage}.{r}");
            m.add_conv_bn(&format!("{p}.right_pw1"), half, half, 1, 1);
            m.add_conv_bn(&format!("{p}.right_dw"), half, half, 3, half);
            m.add_conv_bn(&format!("{p}.right_pw2"), half, half, 1, 1);
        }
        c_in = width;
    }

    // sppf on the deepest stage
    let deep = spec.stage_widths[2];
    m.add_conv_bn("backbone.sppf.reduce", deep, deep / 2, 1, 1);
    m.add_conv_bn("backbone.sppf.expand", 2 * deep, deep, 1, 1);

    // eca after sppf
    let k = blocks::eca_kernel_size(deep, 2.0, 1.0);
    m.add("backbone.eca.kernel", vec![k], WeightKind::Trainable);

    // neck: projections, two-level top-down, bottom-up with same-level skip
    let w = spec.neck_width;
    m.add_conv_bn("neck.proj3", spec.stage_widths[0], w, 1, 1);
    m.add_conv_bn("neck.proj4", spec.stage_widths[1], w, 1, 1);
    m.add_conv_bn("neck.proj5", spec.stage_widths[2], w, 1, 1);
    for (name, arity) in [("td4", 2usize), ("out3", 2), ("out4", 3), ("out5", 2)] {
        m.add(&format!("neck.{name}.weights"), vec![arity], WeightKind::Trainable);
        m.add_conv_bn(&format!("neck.{name}.post"), w, w, 3, 1);
    }
    m.add_conv_bn("neck.down34", w, w, 3, 1);
    m.add_conv_bn("neck.down45", w, w, 3, 1);

    // heads
    let hc = spec.head_channels();
    for level in ["p3", "p4", "p5"] {
        m.add(
            &format!("head.{level}.conv.weight"),
            vec![hc, w, 1, 1],
            WeightKind::Trainable,
        );
        m.add(&format!("head.{level}.conv.bias"), vec![hc], WeightKind::Trainable);
    }

    Ok(Model {
        spec: spec.clone(),
        weights: m,
    })
}

/// Weight fetcher that records every access, so forward passes can assert
/// each tensor is consumed exactly once.
struct Fetcher<'a> {
    model: &'a Model,
    used: RefCell<BTreeMap<String, usize>>,
}

impl<'a> Fetcher<'a> {
    fn new(model: &'a Model) -> Self {
        Self {
            model,
            used: RefCell::new(BTreeMap::new()),
        }
    }

    fn raw(&self, name: &str) -> Result<&'a WeightTensor> {
        let t = self
            .model
            .weights
            .get(name)
            .ok_or_else(|| ModelError::UnknownWeight(name.to_string()))?;
        *self.used.borrow_mut().entry(name.to_string()).or_insert(0) += 1;
        Ok(t)
    }

    fn vec(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self.raw(name)?.data.clone())
    }

    /// Conv + BN weights under `prefix`, with stride and activation chosen by
    /// the call site. Padding is k/2; groups inferred from the kernel shape.
    fn cba(&self, prefix: &str, c_in: usize, stride: usize, act: Activation) -> Result<ConvBnAct> {
        let kt = self.raw(&format!("{prefix}.conv.weight"))?;
        let (c_out, cg, kh, kw) = (kt.dims[0], kt.dims[1], kt.dims[2], kt.dims[3]);
        let kernel = Tensor::new(c_out, cg, kh, kw, kt.data.clone())?;
        Ok(ConvBnAct {
            conv: ConvWeights {
                kernel,
                bias: None,
                stride,
                padding: kh / 2,
                groups: c_in / cg,
            },
            bn: BnParams {
                gamma: self.vec(&format!("{prefix}.bn.gamma"))?,
                beta: self.vec(&format!("{prefix}.bn.beta"))?,
                mean: self.vec(&format!("{prefix}.bn.mean"))?,
                var: self.vec(&format!("{prefix}.bn.var"))?,
                eps: self.model.spec.bn_eps,
            },
            act,
        })
    }

    fn s1(&self, prefix: &str, c: usize) -> Result<S1Weights> {
        let half = c / 2;
        Ok(S1Weights {
            pw1: self.cba(&format!("{prefix}.right_pw1"), half, 1, Activation::Silu)?,
            dw: self.cba(&format!("{prefix}.right_dw"), half, 1, Activation::None)?,
            pw2: self.cba(&format!("{prefix}.right_pw2"), half, 1, Activation::Silu)?,
        })
    }

    fn s2(&self, prefix: &str, c_in: usize, c_out: usize) -> Result<S2Weights> {
        let half = c_out / 2;
        Ok(S2Weights {
            left_dw: self.cba(&format!("{prefix}.left_dw"), c_in, 2, Activation::None)?,
            left_pw: self.cba(&format!("{prefix}.left_pw"), c_in, 1, Activation::Silu)?,
            right_pw1: self.cba(&format!("{prefix}.right_pw1"), c_in, 1, Activation::Silu)?,
            right_dw: self.cba(&format!("{prefix}.right_dw"), half, 2, Activation::None)?,
            right_pw2: self.cba(&format!("{prefix}.right_pw2"), half, 1, Activation::Silu)?,
        })
    }

    fn fusion_node(&self, prefix: &str, w: usize) -> Result<blocks::FusionNode> {
        Ok(blocks::FusionNode {
            raw_weights: self.vec(&format!("{prefix}.weights"))?,
            epsilon: self.model.spec.fusion_eps,
            post_conv: self.cba(&format!("{prefix}.post"), w, 1, Activation::Silu)?,
        })
    }
}

fn backbone_fw(f: &Fetcher, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let spec = &f.model.spec;
    let (n, c, h, w) = x.shape();
    if c != 3 || h != w || h % 32 != 0 || h == 0 {
        return Err(ModelError::BadInput { n, c, h, w });
    }
    let stem = StemWeights {
        conv1: f.cba("backbone.stem.conv1", 3, 2, Activation::Silu)?,
        branch_a1: f.cba("backbone.stem.branch_a1", spec.stem_channels, 1, Activation::Silu)?,
        branch_a2: f.cba("backbone.stem.branch_a2", spec.stem_channels / 2, 2, Activation::Silu)?,
        proj: f.cba("backbone.stem.proj", 2 * spec.stem_channels, 1, Activation::Silu)?,
    };
    let mut t = blocks::stem_block(x, &stem)?;

    let mut c_in = spec.stem_channels;
    let mut pyramids = Vec::new();
    for (si, (&width, &repeats)) in spec
        .stage_widths
        .iter()
        .zip(spec.stage_repeats.iter())
        .enumerate()
    {
        let stage = format!("backbone.stage{}", si + 2);
        t = blocks::shuffle_unit_s2(&t, &f.s2(&format!("{stage}.0"), c_in, width)?)?;
        for r in 1..=repeats {
            t = blocks::shuffle_unit_s1(&t, &f.s1(&format!("{stage}.{r}"), width)?)?;
        }
        c_in = width;
        pyramids.push(t.clone());
    }

    let deep = spec.stage_widths[2];
    let sppf_w = SppfWeights {
        reduce: f.cba("backbone.sppf.reduce", deep, 1, Activation::Silu)?,
        expand: f.cba("backbone.sppf.expand", 2 * deep, 1, Activation::Silu)?,
    };
    let p5 = blocks::sppf(&pyramids[2], &sppf_w, spec.sppf_kernel)?;
    let p5 = blocks::eca(
        &p5,
        &EcaParams {
            kernel: f.vec("backbone.eca.kernel")?,
        },
    )?;

    Ok((pyramids[0].clone(), pyramids[1].clone(), p5))
}

fn check_ladder(p3: &Tensor, p4: &Tensor, p5: &Tensor) -> Result<()> {
    let (a, b, c) = (p3.shape(), p4.shape(), p5.shape());
    if a.2 != 2 * b.2 || a.3 != 2 * b.3 || b.2 != 2 * c.2 || b.3 != 2 * c.3 || a.0 != b.0 || b.0 != c.0
    {
        return Err(ModelError::BadPyramid(format!("{a:?} / {b:?} / {c:?}")));
    }
    Ok(())
}

fn neck_fw(f: &Fetcher, p3: &Tensor, p4: &Tensor, p5: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    check_ladder(p3, p4, p5)?;
    let spec = &f.model.spec;
    let w = spec.neck_width;
    let p3p = blocks::conv_bn_act(p3, &f.cba("neck.proj3", spec.stage_widths[0], 1, Activation::Silu)?)?;
    let p4p = blocks::conv_bn_act(p4, &f.cba("neck.proj4", spec.stage_widths[1], 1, Activation::Silu)?)?;
    let p5p = blocks::conv_bn_act(p5, &f.cba("neck.proj5", spec.stage_widths[2], 1, Activation::Silu)?)?;

    let td4 = blocks::fast_fusion(&[&p4p, &upsample_nearest2x(&p5p)], &f.fusion_node("neck.td4", w)?)?;
    let n3 = blocks::fast_fusion(&[&p3p, &upsample_nearest2x(&td4)], &f.fusion_node("neck.out3", w)?)?;
    let d34 = blocks::conv_bn_act(&n3, &f.cba("neck.down34", w, 2, Activation::Silu)?)?;
    // the same-level skip gives the middle output node three inputs
    let n4 = blocks::fast_fusion(&[&p4p, &td4, &d34], &f.fusion_node("neck.out4", w)?)?;
    let d45 = blocks::conv_bn_act(&n4, &f.cba("neck.down45", w, 2, Activation::Silu)?)?;
    let n5 = blocks::fast_fusion(&[&p5p, &d45], &f.fusion_node("neck.out5", w)?)?;
    Ok((n3, n4, n5))
}

fn head_one(f: &Fetcher, level: &str, x: &Tensor) -> Result<Tensor> {
    let kt = f.raw(&format!("head.{level}.conv.weight"))?;
    let kernel = Tensor::new(kt.dims[0], kt.dims[1], kt.dims[2], kt.dims[3], kt.data.clone())?;
    let bias = f.vec(&format!("head.{level}.conv.bias"))?;
    Ok(conv2d(
        x,
        &ConvWeights {
            kernel,
            bias: Some(bias),
            stride: 1,
            padding: 0,
            groups: 1,
        },
    )?)
}

fn head_fw(f: &Fetcher, n3: &Tensor, n4: &Tensor, n5: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    Ok((
        head_one(f, "p3", n3)?,
        head_one(f, "p4", n4)?,
        head_one(f, "p5", n5)?,
    ))
}

/// Backbone only: three pyramid maps at strides 8/16/32, ECA applied to the
/// deepest (post-SPPF) map.
pub fn backbone_forward(m: &Model, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    backbone_fw(&Fetcher::new(m), x)
}

/// Fusion neck only; inputs must form a factor-2 pyramid ladder.
pub fn mbifpn_forward(
    m: &Model,
    p3: &Tensor,
    p4: &Tensor,
    p5: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    neck_fw(&Fetcher::new(m), p3, p4, p5)
}

/// Detection heads only: per level 1x1 conv to 3*(5+nc) raw channels.
pub fn head_forward(
    m: &Model,
    n3: &Tensor,
    n4: &Tensor,
    n5: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    head_fw(&Fetcher::new(m), n3, n4, n5)
}

/// End-to-end forward: backbone, neck, heads.
pub fn forward(m: &Model, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    forward_with_usage(m, x).map(|(o, _)| o)
}

/// Forward that also returns how many times each weight tensor was fetched.
pub fn forward_with_usage(
    m: &Model,
    x: &Tensor,
) -> Result<((Tensor, Tensor, Tensor), BTreeMap<String, usize>)> {
    let f = Fetcher::new(m);
    let (p3, p4, p5) = backbone_fw(&f, x)?;
    let (n3, n4, n5) = neck_fw(&f, &p3, &p4, &p5)?;
    let out = head_fw(&f, &n3, &n4, &n5)?;
    Ok((out, f.used.into_inner()))
}

/// Headline parameter count: trainable tensors only. BN running statistics
/// are available separately via [`Manifest::running_stat_params`].
pub fn count_params(m: &Model) -> usize {
    m.weights.trainable_params()
}

fn conv_flops(out_elems: u64, c_in_per_group: u64, kk: u64) -> u64 {
    2 * out_elems * c_in_per_group * kk
}

/// Analytic FLOP count at the given square input size. Convention: a conv
/// costs 2 x MACs, BN 2 and activations 1 per element, pooling k^2-1
/// comparisons per output.
pub fn count_flops(m: &Model, input_size: usize) -> u64 {
    let spec = &m.spec;
    let s = input_size as u64;
    let mut total: u64 = 0;

    let conv_bn_act = |c_in: u64, c_out: u64, k: u64, out_hw: u64, groups: u64, act: bool| {
        let out_elems = c_out * out_hw;
        conv_flops(out_elems, c_in / groups, k * k) + 2 * out_elems + if act { out_elems } else { 0 }
    };

    let stem = spec.stem_channels as u64;
    let h2 = (s / 2) * (s / 2);
    let h4 = (s / 4) * (s / 4);
    total += conv_bn_act(3, stem, 3, h2, 1, true);
    total += conv_bn_act(stem, stem / 2, 1, h2, 1, true);
    total += conv_bn_act(stem / 2, stem, 3, h4, 1, true);
    total += 3 * stem * h4; // 2x2 max pool: k^2-1 per output
    total += conv_bn_act(2 * stem, stem, 1, h4, 1, true);

    let mut c_in = stem;
    let mut hw = h4;
    for (&width, &repeats) in spec.stage_widths.iter().zip(spec.stage_repeats.iter()) {
        let width = width as u64;
        let half = width / 2;
        hw /= 4; // stride-2 unit halves each spatial dim
        total += conv_bn_act(c_in, c_in, 3, hw, c_in, false); // left dw
        total += conv_bn_act(c_in, half, 1, hw, 1, true); // left pw
        total += conv_bn_act(c_in, half, 1, hw * 4, 1, true); // right pw1, pre-downsample
        total += conv_bn_act(half, half, 3, hw, half, false); // right dw
        total += conv_bn_act(half, half, 1, hw, 1, true); // right pw2
        for _ in 0..repeats {
            total += conv_bn_act(half, half, 1, hw, 1, true);
            total += conv_bn_act(half, half, 3, hw, half, false);
            total += conv_bn_act(half, half, 1, hw, 1, true);
        }
        c_in = width;
    }

    // sppf at the deepest resolution
    let deep = spec.stage_widths[2] as u64;
    let k = spec.sppf_kernel as u64;
    total += conv_bn_act(deep, deep / 2, 1, hw, 1, true);
    total += 3 * (k * k - 1) * (deep / 2) * hw;
    total += conv_bn_act(2 * deep, deep, 1, hw, 1, true);

    // eca: global average pool, 1-d conv, sigmoid, per-element scale
    total += deep * hw; // pooling reduction
    let ek = m
        .weights
        .get("backbone.eca.kernel")
        .map(|t| t.dims[0] as u64)
        .unwrap_or(1);
    total += 2 * deep * ek + deep; // conv1d + sigmoid
    total += deep * hw; // gating multiply

    // neck
    let w = spec.neck_width as u64;
    let hw3 = hw * 16;
    let hw4 = hw * 4;
    let hw5 = hw;
    total += conv_bn_act(spec.stage_widths[0] as u64, w, 1, hw3, 1, true);
    total += conv_bn_act(spec.stage_widths[1] as u64, w, 1, hw4, 1, true);
    total += conv_bn_act(spec.stage_widths[2] as u64, w, 1, hw5, 1, true);
    for (arity, out_hw) in [(2u64, hw4), (2, hw3), (3, hw4), (2, hw5)] {
        total += 2 * arity * w * out_hw; // weighted sum
        total += conv_bn_act(w, w, 3, out_hw, 1, true); // post conv
    }
    total += conv_bn_act(w, w, 3, hw4, 1, true); // down 3->4
    total += conv_bn_act(w, w, 3, hw5, 1, true); // down 4->5

    // heads (1x1 conv with bias)
    let hc = spec.head_channels() as u64;
    for out_hw in [hw3, hw4, hw5] {
        total += conv_flops(hc * out_hw, w, 1);
    }

    total
}

/// Deterministic weight init. Every tensor gets its own SplitMix64 stream
/// seeded by `seed + fnv1a64(name)`, so init is order-independent.
pub fn init_weights(m: &mut Model, seed: u64) {
    for (name, t) in m.weights.iter_mut() {
        let mut rng = SplitMix64::new(seed.wrapping_add(fnv1a64(name.as_bytes())));
        if name.ends_with(".conv.weight") {
            let fan_in: usize = t.dims[1..].iter().product();
            let bound = (1.0 / fan_in as f64).sqrt();
            for v in &mut t.data {
                *v = rng.uniform(-bound, bound) as f32;
            }
        } else if name.ends_with(".conv.bias")
            || name.ends_with(".bn.beta")
            || name.ends_with(".bn.mean")
        {
            t.data.fill(0.0);
        } else if name.ends_with(".bn.gamma") || name.ends_with(".bn.var") {
            t.data.fill(1.0);
        } else if name.ends_with(".weights") {
            t.data.fill(1.0); // fusion raw weights
        } else if name.ends_with("eca.kernel") {
            let bound = (1.0 / t.dims[0] as f64).sqrt();
            for v in &mut t.data {
                *v = rng.uniform(-bound, bound) as f32;
            }
        } else {
            t.data.fill(0.0);
        }
    }
}

const WEIGHT_MAGIC: &[u8; 4] = b"NWTS";
const WEIGHT_VERSION: u32 = 1;

/// Binary weight file: "NWTS", u32 version, u32 tensor count; per tensor a
/// u16 name length, UTF-8 name, u8 rank, rank x u32 dims, then LE f32 data.
pub fn save_weights(m: &Model, w: &mut impl Write) -> Result<()> {
    w.write_all(WEIGHT_MAGIC)?;
    w.write_all(&WEIGHT_VERSION.to_le_bytes())?;
    w.write_all(&(m.weights.len() as u32).to_le_bytes())?;
    for (name, t) in m.weights.iter() {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.dims.len() as u8])?;
        for d in &t.dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_weights(spec: &ModelSpec, r: &mut impl Read) -> Result<Model> {
    let mut model = build_model(spec)?;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != WEIGHT_MAGIC {
        return Err(ModelError::BadFile(format!(
            "bad magic {magic:?}, expected \"NWTS\""
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != WEIGHT_VERSION {
        return Err(ModelError::BadFile(format!("unsupported version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf);
    if count as usize != model.weights.len() {
        return Err(ModelError::BadFile(format!(
            "file has {count} tensors, spec expects {}",
            model.weights.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ModelError::BadFile("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            r.read_exact(&mut u32buf)?;
            dims.push(u32::from_le_bytes(u32buf) as usize);
        }
        let expected = model
            .weights
            .get(&name)
            .ok_or_else(|| ModelError::UnknownWeight(name.clone()))?
            .dims
            .clone();
        if dims != expected {
            return Err(ModelError::ShapeDivergence {
                name,
                got: dims,
                expected,
            });
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut u32buf)?;
            data.push(f32::from_le_bytes(u32buf));
        }
        model.weights.get_mut(&name).unwrap().data = data;
        seen.insert(name);
    }
    // every spec tensor must have arrived
    for (name, _) in model.weights.iter() {
        if !seen.contains(name) {
            return Err(ModelError::MissingWeight(name.clone()));
        }
    }
    // trailing bytes forbidden
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(ModelError::BadFile("trailing bytes after last tensor".into()));
    }
    Ok(model)
}
