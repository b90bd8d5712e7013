//! Dense NCHW f32 tensors and the primitive kernels the network blocks are
//! composed from: convolution (im2col + GEMM), inference batch norm,
//! activations, pooling, channel reshuffling and a raw fixture file format.

use std::io::{Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape ({n},{c},{h},{w}) = {expected}")]
    DataLength {
        len: usize,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        expected: usize,
    },
    #[error("input has {input_c} channels but kernel expects {expected_c} (groups={groups})")]
    ChannelMismatch {
        input_c: usize,
        expected_c: usize,
        groups: usize,
    },
    #[error("channel count {c_out} not divisible by groups {groups}")]
    GroupMismatch { c_out: usize, groups: usize },
    #[error("kernel {k_h}x{k_w} larger than padded input {h}x{w} (pad={pad})")]
    KernelTooLarge {
        k_h: usize,
        k_w: usize,
        h: usize,
        w: usize,
        pad: usize,
    },
    #[error("per-channel vector length {len} does not match channel count {c}")]
    VectorLength { len: usize, c: usize },
    #[error("tensors disagree on {dim}: {a} vs {b}")]
    DimMismatch {
        dim: &'static str,
        a: usize,
        b: usize,
    },
    #[error("channel split at {c1} invalid for {c} channels")]
    BadSplit { c1: usize, c: usize },
    #[error("channel count {c} not divisible by shuffle groups {g}")]
    BadShuffle { c: usize, g: usize },
    #[error("1-d kernel length {k} must be odd and non-zero")]
    BadKernel1d { k: usize },
    #[error("empty tensor list")]
    EmptyList,
    #[error("bad tensor file: {0}")]
    BadFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, TensorError>;

/// Dense NCHW tensor of f32, contiguous row-major in (n, c, h, w) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        let expected = n * c * h * w;
        if data.len() != expected {
            return Err(TensorError::DataLength {
                len: data.len(),
                n,
                c,
                h,
                w,
                expected,
            });
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn full(n: usize, c: usize, h: usize, w: usize, v: f32) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![v; n * c * h * w],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[((n * self.c + c) * self.h + h) * self.w + w]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        self.data[((n * self.c + c) * self.h + h) * self.w + w] = v;
    }

    /// One (n, c) spatial plane as a slice of length h*w.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.h * self.w;
        let off = (n * self.c + c) * hw;
        &self.data[off..off + hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Convolution weights: kernel shaped (c_out, c_in/groups, k_h, k_w).
#[derive(Debug, Clone)]
pub struct ConvWeights {
    pub kernel: Tensor,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvWeights {
    pub fn c_out(&self) -> usize {
        self.kernel.n()
    }

    pub fn c_in(&self) -> usize {
        self.kernel.c() * self.groups
    }
}

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// 2-D convolution (cross-correlation), zero padding, arbitrary groups.
/// Lowered to an im2col patch matrix and a per-group GEMM.
pub fn conv2d(x: &Tensor, w: &ConvWeights) -> Result<Tensor> {
    let (n, c, h, wd) = x.shape();
    let (c_out, cg, k_h, k_w) = w.kernel.shape();
    let groups = w.groups.max(1);
    if c != cg * groups {
        return Err(TensorError::ChannelMismatch {
            input_c: c,
            expected_c: cg * groups,
            groups,
        });
    }
    if c_out % groups != 0 {
        return Err(TensorError::GroupMismatch { c_out, groups });
    }
    if let Some(b) = &w.bias {
        if b.len() != c_out {
            return Err(TensorError::VectorLength {
                len: b.len(),
                c: c_out,
            });
        }
    }
    let pad = w.padding;
    if k_h > h + 2 * pad || k_w > wd + 2 * pad {
        return Err(TensorError::KernelTooLarge {
            k_h,
            k_w,
            h,
            w: wd,
            pad,
        });
    }
    let stride = w.stride.max(1);
    let oh = conv_out_dim(h, k_h, stride, pad);
    let ow = conv_out_dim(wd, k_w, stride, pad);
    let cog = c_out / groups;
    let patch = cg * k_h * k_w;
    let sites = oh * ow;

    let mut out = Tensor::zeros(n, c_out, oh, ow);
    let mut cols = vec![0.0f32; patch * sites];

    for ni in 0..n {
        for g in 0..groups {
            // im2col for this group's input channels
            for (ci, ch) in (g * cg..(g + 1) * cg).enumerate() {
                let plane = x.plane(ni, ch);
                for kh in 0..k_h {
                    for kw in 0..k_w {
                        let row = (ci * k_h + kh) * k_w + kw;
                        let dst = &mut cols[row * sites..(row + 1) * sites];
                        for oy in 0..oh {
                            let iy = (oy * stride + kh) as isize - pad as isize;
                            for ox in 0..ow {
                                let ix = (ox * stride + kw) as isize - pad as isize;
                                dst[oy * ow + ox] = if iy < 0
                                    || ix < 0
                                    || iy >= h as isize
                                    || ix >= wd as isize
                                {
                                    0.0
                                } else {
                                    plane[iy as usize * wd + ix as usize]
                                };
                            }
                        }
                    }
                }
            }
            // GEMM: (cog x patch) * (patch x sites)
            for co in 0..cog {
                let oc = g * cog + co;
                let krow = &w.kernel.data()[oc * patch..(oc + 1) * patch];
                let base = ((ni * c_out + oc) * oh) * ow;
                let dst = &mut out.data[base..base + sites];
                if let Some(b) = &w.bias {
                    dst.fill(b[oc]);
                }
                for (p, &kv) in krow.iter().enumerate() {
                    if kv == 0.0 {
                        continue;
                    }
                    let src = &cols[p * sites..(p + 1) * sites];
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d += kv * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inference-mode batch norm: per channel (x - mean)/sqrt(var + eps) * gamma + beta.
pub fn batchnorm_infer(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let (n, c, h, w) = x.shape();
    for (name, v) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        if v.len() != c {
            let _ = name;
            return Err(TensorError::VectorLength { len: v.len(), c });
        }
    }
    let mut out = x.clone();
    let hw = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let scale = gamma[ci] / (var[ci] + eps).sqrt();
            let shift = beta[ci] - mean[ci] * scale;
            let off = (ni * c + ci) * hw;
            for v in &mut out.data[off..off + hw] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(out)
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid_scalar(v))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn leaky_relu(x: &Tensor, slope: f32) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// Sliding-window max. Padded cells use -inf semantics and never win.
pub fn maxpool2d(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.shape();
    if k > h + 2 * pad || k > w + 2 * pad {
        return Err(TensorError::KernelTooLarge {
            k_h: k,
            k_w: k,
            h,
            w,
            pad,
        });
    }
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut out = Tensor::zeros(n, c, oh, ow);
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.plane(ni, ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = plane[iy as usize * w + ix as usize];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.set(ni, ci, oy, ox, best);
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor 2x upsampling: every pixel becomes a 2x2 block.
pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.shape();
    let mut out = Tensor::zeros(n, c, 2 * h, 2 * w);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xw in 0..w {
                    let v = x.at(ni, ci, y, xw);
                    out.set(ni, ci, 2 * y, 2 * xw, v);
                    out.set(ni, ci, 2 * y, 2 * xw + 1, v);
                    out.set(ni, ci, 2 * y + 1, 2 * xw, v);
                    out.set(ni, ci, 2 * y + 1, 2 * xw + 1, v);
                }
            }
        }
    }
    out
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or(TensorError::EmptyList)?;
    let (n, _, h, w) = first.shape();
    let mut c_total = 0;
    for x in xs {
        let (xn, xc, xh, xw) = x.shape();
        if xn != n {
            return Err(TensorError::DimMismatch { dim: "n", a: n, b: xn });
        }
        if xh != h {
            return Err(TensorError::DimMismatch { dim: "h", a: h, b: xh });
        }
        if xw != w {
            return Err(TensorError::DimMismatch { dim: "w", a: w, b: xw });
        }
        c_total += xc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * c_total * hw);
    for ni in 0..n {
        for x in xs {
            let off = ni * x.c() * hw;
            data.extend_from_slice(&x.data()[off..off + x.c() * hw]);
        }
    }
    Tensor::new(n, c_total, h, w, data)
}

pub fn channel_split(x: &Tensor, c1: usize) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.shape();
    if c1 == 0 || c1 >= c {
        return Err(TensorError::BadSplit { c1, c });
    }
    let hw = h * w;
    let mut a = Vec::with_capacity(n * c1 * hw);
    let mut b = Vec::with_capacity(n * (c - c1) * hw);
    for ni in 0..n {
        let off = ni * c * hw;
        a.extend_from_slice(&x.data()[off..off + c1 * hw]);
        b.extend_from_slice(&x.data()[off + c1 * hw..off + c * hw]);
    }
    Ok((Tensor::new(n, c1, h, w, a)?, Tensor::new(n, c - c1, h, w, b)?))
}

/// Channel shuffle: reshape channels to (g, c/g), transpose, flatten.
/// A pure permutation; values are copied untouched.
pub fn channel_shuffle(x: &Tensor, g: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.shape();
    if g == 0 || c % g != 0 {
        return Err(TensorError::BadShuffle { c, g });
    }
    let per = c / g;
    let hw = h * w;
    let mut out = Tensor::zeros(n, c, h, w);
    for ni in 0..n {
        for gi in 0..g {
            for pi in 0..per {
                let src_c = gi * per + pi;
                let dst_c = pi * g + gi;
                let src = (ni * c + src_c) * hw;
                let dst = (ni * c + dst_c) * hw;
                out.data[dst..dst + hw].copy_from_slice(&x.data()[src..src + hw]);
            }
        }
    }
    Ok(out)
}

/// Per-channel spatial mean; output shaped (n, c, 1, 1).
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.shape();
    let hw = (h * w) as f32;
    let mut out = Tensor::zeros(n, c, 1, 1);
    for ni in 0..n {
        for ci in 0..c {
            let s: f32 = x.plane(ni, ci).iter().sum();
            out.set(ni, ci, 0, 0, s / hw);
        }
    }
    out
}

/// 1-D cross-correlation over a length-c channel descriptor, zero padded by
/// k/2 so the output length equals the input length. Kernel length must be odd.
pub fn conv1d_channels(v: &[f32], kernel: &[f32]) -> Result<Vec<f32>> {
    let k = kernel.len();
    if k == 0 || k % 2 == 0 {
        return Err(TensorError::BadKernel1d { k });
    }
    let half = (k / 2) as isize;
    let c = v.len();
    let mut out = vec![0.0f32; c];
    for i in 0..c as isize {
        let mut acc = 0.0;
        for (j, &kv) in kernel.iter().enumerate() {
            let src = i + j as isize - half;
            if src >= 0 && src < c as isize {
                acc += kv * v[src as usize];
            }
        }
        out[i as usize] = acc;
    }
    Ok(out)
}

const TENSOR_MAGIC: &[u8; 4] = b"NTSR";

/// Write the raw fixture format: "NTSR", 4 LE u32 dims, then LE f32 payload.
pub fn write_tensor(t: &Tensor, w: &mut impl Write) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    let (n, c, h, wd) = t.shape();
    for d in [n, c, h, wd] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(TensorError::BadFile(format!(
            "bad magic {:?}, expected \"NTSR\"",
            magic
        )));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let len = dims.iter().product();
    let mut data = Vec::with_capacity(len);
    let mut buf = [0u8; 4];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    Tensor::new(dims[0], dims[1], dims[2], dims[3], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tensor_from(vals: &[f32], n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(n, c, h, w, vals.to_vec()).unwrap()
    }

    /// Plain 6-loop convolution used as the oracle for the im2col path.
    pub(crate) fn conv2d_naive(x: &Tensor, w: &ConvWeights) -> Tensor {
        let (n, _c, h, wd) = x.shape();
        let (c_out, cg, k_h, k_w) = w.kernel.shape();
        let groups = w.groups.max(1);
        let cog = c_out / groups;
        let stride = w.stride.max(1);
        let pad = w.padding;
        let oh = conv_out_dim(h, k_h, stride, pad);
        let ow = conv_out_dim(wd, k_w, stride, pad);
        let mut out = Tensor::zeros(n, c_out, oh, ow);
        for ni in 0..n {
            for oc in 0..c_out {
                let g = oc / cog;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = w.bias.as_ref().map_or(0.0, |b| b[oc]);
                        for ci in 0..cg {
                            for ky in 0..k_h {
                                for kx in 0..k_w {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.at(ni, g * cg + ci, iy as usize, ix as usize)
                                        * w.kernel.at(oc, ci, ky, kx);
                                }
                            }
                        }
                        out.set(ni, oc, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    pub(crate) fn random_tensor(rng: &mut crate::rng::SplitMix64, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..n * c * h * w)
            .map(|_| rng.uniform(-2.0, 2.0) as f32)
            .collect();
        Tensor::new(n, c, h, w, data).unwrap()
    }

    #[test]
    fn conv_identity_1x1() {
        let x = tensor_from(&[1.0, -2.0, 3.0, 0.5], 1, 1, 2, 2);
        let w = ConvWeights {
            kernel: tensor_from(&[1.0], 1, 1, 1, 1),
            bias: None,
            stride: 1,
            padding: 0,
            groups: 1,
        };
        assert_eq!(conv2d(&x, &w).unwrap(), x);
    }

    #[test]
    fn conv_all_ones_3x3() {
        let x = Tensor::full(1, 1, 3, 3, 1.0);
        let w = ConvWeights {
            kernel: Tensor::full(1, 1, 3, 3, 1.0),
            bias: None,
            stride: 1,
            padding: 0,
            groups: 1,
        };
        let out = conv2d(&x, &w).unwrap();
        assert_eq!(out.shape(), (1, 1, 1, 1));
        assert_eq!(out.data()[0], 9.0);
    }

    #[test]
    fn conv_depthwise_identity_center() {
        let c = 4;
        let mut kernel = Tensor::zeros(c, 1, 3, 3);
        for ci in 0..c {
            kernel.set(ci, 0, 1, 1, 1.0);
        }
        let w = ConvWeights {
            kernel,
            bias: None,
            stride: 1,
            padding: 1,
            groups: c,
        };
        let mut rng = crate::rng::SplitMix64::new(1);
        let x = random_tensor(&mut rng, 1, c, 5, 5);
        assert_eq!(conv2d(&x, &w).unwrap(), x);
    }

    #[test]
    fn conv_channel_mismatch_names_dims() {
        let x = Tensor::zeros(1, 3, 4, 4);
        let w = ConvWeights {
            kernel: Tensor::zeros(2, 4, 1, 1),
            bias: None,
            stride: 1,
            padding: 0,
            groups: 1,
        };
        let err = conv2d(&x, &w).unwrap_err();
        assert!(matches!(
            err,
            TensorError::ChannelMismatch {
                input_c: 3,
                expected_c: 4,
                ..
            }
        ));
    }

    #[test]
    fn conv_matches_naive_on_random_configs() {
        let mut rng = crate::rng::SplitMix64::new(99);
        for _ in 0..25 {
            let groups = [1usize, 2, 4][rng.below(3)];
            let cg = 1 + rng.below(3);
            let c_in = groups * cg;
            let c_out = groups * (1 + rng.below(3));
            let k = [1usize, 3, 5][rng.below(3)];
            let stride = 1 + rng.below(2);
            let pad = rng.below(3);
            let h = k + rng.below(10);
            let w = k + rng.below(10);
            let n = 1 + rng.below(2);
            let x = random_tensor(&mut rng, n, c_in, h, w);
            let cw = ConvWeights {
                kernel: random_tensor(&mut rng, c_out, cg, k, k),
                bias: Some((0..c_out).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()),
                stride,
                padding: pad,
                groups,
            };
            if k > h + 2 * pad || k > w + 2 * pad {
                continue;
            }
            let fast = conv2d(&x, &cw).unwrap();
            let naive = conv2d_naive(&x, &cw);
            assert_eq!(fast.shape(), naive.shape());
            for (a, b) in fast.data().iter().zip(naive.data()) {
                assert!((a - b).abs() <= 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn batchnorm_identity_and_arith() {
        let x = tensor_from(&[7.0], 1, 1, 1, 1);
        let id = batchnorm_infer(&x, &[1.0], &[0.0], &[0.0], &[1.0], 0.0).unwrap();
        assert_eq!(id, x);
        let y = batchnorm_infer(&x, &[2.0], &[1.0], &[5.0], &[4.0], 0.0).unwrap();
        assert!((y.data()[0] - 3.0).abs() < 1e-6);
        let z = batchnorm_infer(&x, &[0.0], &[9.0], &[5.0], &[4.0], 0.0).unwrap();
        assert_eq!(z.data()[0], 9.0);
    }

    #[test]
    fn batchnorm_length_mismatch() {
        let x = Tensor::zeros(1, 2, 1, 1);
        assert!(batchnorm_infer(&x, &[1.0], &[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], 1e-5).is_err());
    }

    #[test]
    fn activation_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let z = silu(&tensor_from(&[0.0], 1, 1, 1, 1));
        assert_eq!(z.data()[0], 0.0);
        let l = leaky_relu(&tensor_from(&[-2.0], 1, 1, 1, 1), 0.1);
        assert!((l.data()[0] + 0.2).abs() < 1e-7);
        let r = relu(&tensor_from(&[-3.0, 2.0], 1, 1, 1, 2));
        assert_eq!(r.data(), &[0.0, 2.0]);
    }

    #[test]
    fn maxpool_cases() {
        let x = tensor_from(&[1.0, 2.0, 3.0, 4.0], 1, 1, 2, 2);
        assert_eq!(maxpool2d(&x, 1, 1, 0).unwrap(), x);
        let m = maxpool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(m.shape(), (1, 1, 1, 1));
        assert_eq!(m.data()[0], 4.0);
        assert!(maxpool2d(&x, 7, 1, 1).is_err());
    }

    #[test]
    fn maxpool_cascade_equals_wide_kernel() {
        let mut rng = crate::rng::SplitMix64::new(3);
        for _ in 0..5 {
            let x = random_tensor(&mut rng, 1, 4, 16, 16);
            let twice = maxpool2d(&maxpool2d(&x, 5, 1, 2).unwrap(), 5, 1, 2).unwrap();
            let once = maxpool2d(&x, 9, 1, 4).unwrap();
            assert_eq!(twice, once);
        }
    }

    #[test]
    fn upsample_cases() {
        let x = tensor_from(&[7.0], 1, 1, 1, 1);
        let up = upsample_nearest2x(&x);
        assert_eq!(up, tensor_from(&[7.0; 4], 1, 1, 2, 2));

        let x = tensor_from(&[1.0, 2.0, 3.0, 4.0], 1, 1, 2, 2);
        let up = upsample_nearest2x(&x);
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );

        // stride-2 subsampling inverts the upsample
        let mut down = Tensor::zeros(1, 1, 2, 2);
        for y in 0..2 {
            for xw in 0..2 {
                down.set(0, 0, y, xw, up.at(0, 0, 2 * y, 2 * xw));
            }
        }
        assert_eq!(down, x);
    }

    #[test]
    fn split_concat_roundtrip() {
        let mut rng = crate::rng::SplitMix64::new(5);
        let x = random_tensor(&mut rng, 2, 4, 3, 3);
        let (a, b) = channel_split(&x, 2).unwrap();
        assert_eq!(concat_channels(&[&a, &b]).unwrap(), x);
        let (a, b) = channel_split(&x, 3).unwrap();
        assert_eq!(b.c(), 1);
        assert_eq!(concat_channels(&[&a, &b]).unwrap(), x);
        assert!(channel_split(&x, 0).is_err());
        assert!(channel_split(&x, 4).is_err());
    }

    #[test]
    fn concat_shape() {
        let a = Tensor::zeros(1, 2, 2, 2);
        let b = Tensor::zeros(1, 3, 2, 2);
        assert_eq!(concat_channels(&[&a, &b]).unwrap().shape(), (1, 5, 2, 2));
        let c = Tensor::zeros(1, 3, 3, 2);
        assert!(concat_channels(&[&a, &c]).is_err());
    }

    fn shuffle_order(c: usize, g: usize) -> Vec<usize> {
        // apply the shuffle to a tensor whose channel i holds the value i
        let data: Vec<f32> = (0..c).map(|i| i as f32).collect();
        let t = Tensor::new(1, c, 1, 1, data).unwrap();
        channel_shuffle(&t, g)
            .unwrap()
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect()
    }

    #[test]
    fn shuffle_permutations() {
        assert_eq!(shuffle_order(4, 1), vec![0, 1, 2, 3]);
        assert_eq!(shuffle_order(4, 2), vec![0, 2, 1, 3]);
        assert_eq!(shuffle_order(6, 2), vec![0, 3, 1, 4, 2, 5]);
        assert!(channel_shuffle(&Tensor::zeros(1, 5, 1, 1), 2).is_err());
    }

    #[test]
    fn shuffle_double_inversion_and_multiset() {
        let mut rng = crate::rng::SplitMix64::new(11);
        for &(c, g) in &[(4usize, 2usize), (6, 2), (6, 3), (12, 4), (8, 2)] {
            let x = random_tensor(&mut rng, 1, c, 2, 2);
            let back = channel_shuffle(&channel_shuffle(&x, g).unwrap(), c / g).unwrap();
            assert_eq!(back, x);

            let shuffled = channel_shuffle(&x, g).unwrap();
            let mut orig: Vec<Vec<u32>> = (0..c)
                .map(|ci| x.plane(0, ci).iter().map(|v| v.to_bits()).collect())
                .collect();
            let mut perm: Vec<Vec<u32>> = (0..c)
                .map(|ci| shuffled.plane(0, ci).iter().map(|v| v.to_bits()).collect())
                .collect();
            orig.sort();
            perm.sort();
            assert_eq!(orig, perm);
        }
    }

    #[test]
    fn gap_cases() {
        let x = Tensor::full(1, 2, 3, 3, 4.5);
        let g = global_avg_pool(&x);
        assert_eq!(g.shape(), (1, 2, 1, 1));
        assert_eq!(g.data(), &[4.5, 4.5]);
        let x = tensor_from(&[1.0, 2.0, 3.0, 4.0], 1, 1, 2, 2);
        assert_eq!(global_avg_pool(&x).data()[0], 2.5);
        let x = tensor_from(&[3.25], 1, 1, 1, 1);
        assert_eq!(global_avg_pool(&x).data()[0], 3.25);
    }

    #[test]
    fn conv1d_cases() {
        assert_eq!(conv1d_channels(&[1.0, 2.0, 3.0], &[1.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(
            conv1d_channels(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]).unwrap(),
            vec![3.0, 6.0, 5.0]
        );
        assert_eq!(
            conv1d_channels(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap(),
            vec![0.0, 0.0, 0.0]
        );
        assert!(conv1d_channels(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn tensor_file_roundtrip() {
        let mut rng = crate::rng::SplitMix64::new(17);
        let t = random_tensor(&mut rng, 2, 3, 4, 5);
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 16 + 2 * 3 * 4 * 5 * 4);
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor(&mut bad.as_slice()).is_err());
        let short = &buf[..buf.len() - 2];
        assert!(read_tensor(&mut &short[..]).is_err());
    }

    proptest! {
        #[test]
        fn conv_shape_formula(
            stride in 1usize..3,
            k in prop::sample::select(vec![1usize, 3, 5]),
            pad in 0usize..3,
            h in 1usize..12,
            w in 1usize..12,
            c in 1usize..4,
        ) {
            prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
            let x = Tensor::zeros(1, c, h, w);
            let cw = ConvWeights {
                kernel: Tensor::zeros(2, c, k, k),
                bias: None,
                stride,
                padding: pad,
                groups: 1,
            };
            let out = conv2d(&x, &cw).unwrap();
            prop_assert_eq!(out.shape(), (1, 2, (h + 2*pad - k)/stride + 1, (w + 2*pad - k)/stride + 1));
            let pooled = maxpool2d(&x, k, stride, pad).unwrap();
            prop_assert_eq!(pooled.shape(), (1, c, (h + 2*pad - k)/stride + 1, (w + 2*pad - k)/stride + 1));
        }

        #[test]
        fn shuffle_inverts(c in prop::sample::select(vec![2usize,4,6,8,12,16]), seed in 0u64..50) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let x = random_tensor(&mut rng, 1, c, 2, 3);
            for g in 1..=c {
                if c % g != 0 { continue; }
                let back = channel_shuffle(&channel_shuffle(&x, g).unwrap(), c / g).unwrap();
                prop_assert_eq!(&back, &x);
            }
        }
    }
}
