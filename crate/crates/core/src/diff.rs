//! Small layer library with hand-written analytic gradients.
//!
//! Tensors are single samples laid out row-major: images are `[C, H, W]`,
//! vectors are `[N]`. Convolution is cross-correlation (no kernel flip) with
//! "same" zero padding of `kernel / 2`. Max-pool ties resolve to the first
//! element in row-major order.
//!
//! [`check_gradient`] compares any analytic gradient against central finite
//! differences and is used throughout the test suite.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::scalar::{self, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("{context}: shape mismatch, expected {expected:?}, found {found:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("cache from a {found} forward pass passed to {expected} backward")]
    StaleCache {
        expected: &'static str,
        found: &'static str,
    },
    #[error("{0}: input has zero norm")]
    ZeroNorm(&'static str),
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("objective is not finite at probe {probe}")]
    NonFinite { probe: String },
    #[error("{0}")]
    Objective(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;

fn shape_err(context: impl Into<String>, expected: &[usize], found: &[usize]) -> DiffError {
    DiffError::Shape {
        context: context.into(),
        expected: expected.to_vec(),
        found: found.to_vec(),
    }
}

#[derive(Clone, PartialEq)]
pub struct NdArray<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: fmt::Debug> fmt::Debug for NdArray<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NdArray")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<S: Scalar> NdArray<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("NdArray::from_vec", &[n], &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn vector(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err("NdArray::add_assign", &self.shape, &other.shape));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, factor: S) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn cast<T: Scalar>(&self) -> NdArray<T> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::lit(x.as_f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Relu,
    MaxPool2d,
    GlobalAvgPool,
    Dense,
    L2Norm,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d => "maxpool2d",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Dense => "dense",
            LayerKind::L2Norm => "l2norm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    L2Norm,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::MaxPool2d { .. } => LayerKind::MaxPool2d,
            LayerSpec::GlobalAvgPool => LayerKind::GlobalAvgPool,
            LayerSpec::Dense { .. } => LayerKind::Dense,
            LayerSpec::L2Norm => LayerKind::L2Norm,
        }
    }

    /// Trainable parameters as (suffix, shape, fan_in); weights first, then bias.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                vec![
                    ("weight", vec![out_channels, in_channels, kernel, kernel], fan_in),
                    ("bias", vec![out_channels], fan_in),
                ]
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features], in_features),
                ("bias", vec![out_features], in_features),
            ],
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0,
            LayerSpec::MaxPool2d { size, stride } => size > 0 && stride > 0,
            LayerSpec::Dense {
                in_features,
                out_features,
            } => in_features > 0 && out_features > 0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(DiffError::InvalidSpec(format!("{self:?}")))
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let ctx = self.kind().name();
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let [c, h, w] = image_dims(ctx, input)?;
                if c != in_channels {
                    return Err(shape_err(ctx, &[in_channels, h, w], input));
                }
                let pad = kernel / 2;
                if kernel > h + 2 * pad || kernel > w + 2 * pad {
                    return Err(DiffError::InvalidSpec(format!(
                        "kernel {kernel} larger than padded input {h}x{w}"
                    )));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ])
            }
            LayerSpec::MaxPool2d { size, stride } => {
                let [c, h, w] = image_dims(ctx, input)?;
                if size > h || size > w {
                    return Err(DiffError::InvalidSpec(format!(
                        "pool window {size} larger than input {h}x{w}"
                    )));
                }
                Ok(vec![c, (h - size) / stride + 1, (w - size) / stride + 1])
            }
            LayerSpec::GlobalAvgPool => {
                let [c, _, _] = image_dims(ctx, input)?;
                Ok(vec![c])
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let n: usize = input.iter().product();
                if n != in_features {
                    return Err(shape_err(ctx, &[in_features], input));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Relu | LayerSpec::L2Norm => Ok(input.to_vec()),
        }
    }
}

fn image_dims(ctx: &str, shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(DiffError::Shape {
            context: format!("{ctx} expects a [C, H, W] input"),
            expected: vec![],
            found: shape.to_vec(),
        }),
    }
}

/// State saved by [`layer_forward`] for the matching [`layer_backward`].
#[derive(Debug, Clone)]
pub struct Cache<S>(CacheInner<S>);

#[derive(Debug, Clone)]
enum CacheInner<S> {
    Conv2d {
        input_shape: Vec<usize>,
        out_h: usize,
        out_w: usize,
        cols: Vec<S>,
    },
    Relu {
        active: Vec<bool>,
        shape: Vec<usize>,
    },
    MaxPool2d {
        input_shape: Vec<usize>,
        out_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input_shape: Vec<usize>,
    },
    Dense {
        input: Vec<S>,
        input_shape: Vec<usize>,
    },
    L2Norm {
        output: Vec<S>,
        shape: Vec<usize>,
        norm: S,
    },
}

impl<S> Cache<S> {
    pub fn kind(&self) -> LayerKind {
        match self.0 {
            CacheInner::Conv2d { .. } => LayerKind::Conv2d,
            CacheInner::Relu { .. } => LayerKind::Relu,
            CacheInner::MaxPool2d { .. } => LayerKind::MaxPool2d,
            CacheInner::GlobalAvgPool { .. } => LayerKind::GlobalAvgPool,
            CacheInner::Dense { .. } => LayerKind::Dense,
            CacheInner::L2Norm { .. } => LayerKind::L2Norm,
        }
    }
}

fn expect_params<'a, S: Scalar>(
    spec: &LayerSpec,
    params: &[&'a NdArray<S>],
) -> Result<(&'a NdArray<S>, &'a NdArray<S>)> {
    let shapes = spec.param_shapes();
    if params.len() != shapes.len() {
        return Err(DiffError::InvalidSpec(format!(
            "{} expects {} parameter arrays, got {}",
            spec.kind().name(),
            shapes.len(),
            params.len()
        )));
    }
    for ((name, shape, _), p) in shapes.iter().zip(params) {
        if p.shape() != shape.as_slice() {
            return Err(shape_err(
                format!("{} {name}", spec.kind().name()),
                shape,
                p.shape(),
            ));
        }
    }
    Ok((params[0], params[1]))
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<S> {
    let pad = kernel / 2;
    let hw = out_h * out_w;
    let mut cols = vec![S::zero(); c * kernel * kernel * hw];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = ((ch * kernel + ki) * kernel + kj) * hw;
                let dst = &mut cols[row..row + hw];
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *v = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<S> {
    let pad = kernel / 2;
    let hw = out_h * out_w;
    let mut x = vec![S::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = ((ch * kernel + ki) * kernel + kj) * hw;
                let src = &cols[row..row + hw];
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..out_w {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Runs one layer forward. `params` holds `[weight, bias]` for conv2d and
/// dense, and is empty for the other kinds.
pub fn layer_forward<S: Scalar>(
    spec: &LayerSpec,
    params: &[&NdArray<S>],
    input: &NdArray<S>,
) -> Result<(NdArray<S>, Cache<S>)> {
    let out_shape = spec.output_shape(input.shape())?;
    if !matches!(spec, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. }) && !params.is_empty() {
        return Err(DiffError::InvalidSpec(format!(
            "{} takes no parameters",
            spec.kind().name()
        )));
    }
    let x = input.data();
    match *spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            let (weight, bias) = expect_params(spec, params)?;
            let [c, h, w] = image_dims("conv2d", input.shape())?;
            let (out_h, out_w) = (out_shape[1], out_shape[2]);
            let hw = out_h * out_w;
            let cols = im2col(x, c, h, w, kernel, stride, out_h, out_w);
            let mut out = vec![S::zero(); out_channels * hw];
            for (row, &b) in out.chunks_exact_mut(hw).zip(bias.data()) {
                row.iter_mut().for_each(|v| *v = b);
            }
            S::gemm(
                out_channels,
                in_channels * kernel * kernel,
                hw,
                weight.data(),
                false,
                &cols,
                false,
                &mut out,
                true,
            );
            Ok((
                NdArray::from_vec(&out_shape, out)?,
                Cache(CacheInner::Conv2d {
                    input_shape: input.shape().to_vec(),
                    out_h,
                    out_w,
                    cols,
                }),
            ))
        }
        LayerSpec::Relu => {
            let active: Vec<bool> = x.iter().map(|&v| v > S::zero()).collect();
            let out = x.iter().map(|&v| v.max(S::zero())).collect();
            Ok((
                NdArray::from_vec(&out_shape, out)?,
                Cache(CacheInner::Relu {
                    active,
                    shape: out_shape.clone(),
                }),
            ))
        }
        LayerSpec::MaxPool2d { size, stride } => {
            let [c, h, w] = image_dims("maxpool2d", input.shape())?;
            let (out_h, out_w) = (out_shape[1], out_shape[2]);
            let mut out = Vec::with_capacity(c * out_h * out_w);
            let mut argmax = Vec::with_capacity(out.capacity());
            for ch in 0..c {
                let base = ch * h * w;
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut best = base + oy * stride * w + ox * stride;
                        for dy in 0..size {
                            let row = base + (oy * stride + dy) * w + ox * stride;
                            for idx in row..row + size {
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                }
            }
            Ok((
                NdArray::from_vec(&out_shape, out)?,
                Cache(CacheInner::MaxPool2d {
                    input_shape: input.shape().to_vec(),
                    out_shape,
                    argmax,
                }),
            ))
        }
        LayerSpec::GlobalAvgPool => {
            let [c, h, w] = image_dims("global_avg_pool", input.shape())?;
            let n = S::lit((h * w) as f64);
            let out = (0..c)
                .map(|ch| x[ch * h * w..(ch + 1) * h * w].iter().copied().sum::<S>() / n)
                .collect();
            Ok((
                NdArray::from_vec(&out_shape, out)?,
                Cache(CacheInner::GlobalAvgPool {
                    input_shape: input.shape().to_vec(),
                }),
            ))
        }
        LayerSpec::Dense {
            in_features,
            out_features,
        } => {
            let (weight, bias) = expect_params(spec, params)?;
            let mut out = bias.data().to_vec();
            S::gemm(out_features, in_features, 1, weight.data(), false, x, false, &mut out, true);
            Ok((
                NdArray::from_vec(&out_shape, out)?,
                Cache(CacheInner::Dense {
                    input: x.to_vec(),
                    input_shape: input.shape().to_vec(),
                }),
            ))
        }
        LayerSpec::L2Norm => {
            let norm = scalar::l2_norm(x);
            if norm == S::zero() || !norm.is_finite() {
                return Err(DiffError::ZeroNorm("l2norm"));
            }
            let out: Vec<S> = x.iter().map(|&v| v / norm).collect();
            Ok((
                NdArray::from_vec(&out_shape, out.clone())?,
                Cache(CacheInner::L2Norm {
                    output: out,
                    shape: out_shape,
                    norm,
                }),
            ))
        }
    }
}

/// Backward pass for one layer. Returns the gradient with respect to the
/// layer input and, for parameterised layers, `[d weight, d bias]`.
pub fn layer_backward<S: Scalar>(
    spec: &LayerSpec,
    params: &[&NdArray<S>],
    cache: &Cache<S>,
    grad_output: &NdArray<S>,
) -> Result<(NdArray<S>, Vec<NdArray<S>>)> {
    if cache.kind() != spec.kind() {
        return Err(DiffError::StaleCache {
            expected: spec.kind().name(),
            found: cache.kind().name(),
        });
    }
    let g = grad_output.data();
    match (*spec, &cache.0) {
        (
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            },
            CacheInner::Conv2d {
                input_shape,
                out_h,
                out_w,
                cols,
            },
        ) => {
            let (weight, _) = expect_params(spec, params)?;
            let hw = out_h * out_w;
            check_grad_shape(spec, &[out_channels, *out_h, *out_w], grad_output)?;
            let k = in_channels * kernel * kernel;
            let mut d_weight = vec![S::zero(); out_channels * k];
            S::gemm(out_channels, hw, k, g, false, cols, true, &mut d_weight, false);
            let d_bias: Vec<S> = g.chunks_exact(hw).map(|r| r.iter().copied().sum()).collect();
            let mut d_cols = vec![S::zero(); k * hw];
            S::gemm(k, out_channels, hw, weight.data(), true, g, false, &mut d_cols, false);
            let [c, h, w] = image_dims("conv2d", input_shape)?;
            let d_input = col2im(&d_cols, c, h, w, kernel, stride, *out_h, *out_w);
            Ok((
                NdArray::from_vec(input_shape, d_input)?,
                vec![
                    NdArray::from_vec(weight.shape(), d_weight)?,
                    NdArray::vector(d_bias),
                ],
            ))
        }
        (LayerSpec::Relu, CacheInner::Relu { active, shape }) => {
            check_grad_shape(spec, shape, grad_output)?;
            let d = g
                .iter()
                .zip(active)
                .map(|(&v, &a)| if a { v } else { S::zero() })
                .collect();
            Ok((NdArray::from_vec(shape, d)?, Vec::new()))
        }
        (
            LayerSpec::MaxPool2d { .. },
            CacheInner::MaxPool2d {
                input_shape,
                out_shape,
                argmax,
            },
        ) => {
            check_grad_shape(spec, out_shape, grad_output)?;
            let mut d = vec![S::zero(); input_shape.iter().product()];
            for (&idx, &v) in argmax.iter().zip(g) {
                d[idx] += v;
            }
            Ok((NdArray::from_vec(input_shape, d)?, Vec::new()))
        }
        (LayerSpec::GlobalAvgPool, CacheInner::GlobalAvgPool { input_shape }) => {
            let [c, h, w] = image_dims("global_avg_pool", input_shape)?;
            check_grad_shape(spec, &[c], grad_output)?;
            let n = S::lit((h * w) as f64);
            let mut d = Vec::with_capacity(c * h * w);
            for &v in g {
                d.extend(std::iter::repeat_n(v / n, h * w));
            }
            Ok((NdArray::from_vec(input_shape, d)?, Vec::new()))
        }
        (
            LayerSpec::Dense {
                in_features,
                out_features,
            },
            CacheInner::Dense { input, input_shape },
        ) => {
            let (weight, _) = expect_params(spec, params)?;
            check_grad_shape(spec, &[out_features], grad_output)?;
            let mut d_weight = vec![S::zero(); out_features * in_features];
            S::gemm(out_features, 1, in_features, g, false, input, false, &mut d_weight, false);
            let mut d_input = vec![S::zero(); in_features];
            S::gemm(in_features, out_features, 1, weight.data(), true, g, false, &mut d_input, false);
            Ok((
                NdArray::from_vec(input_shape, d_input)?,
                vec![
                    NdArray::from_vec(weight.shape(), d_weight)?,
                    NdArray::vector(g.to_vec()),
                ],
            ))
        }
        (LayerSpec::L2Norm, CacheInner::L2Norm { output, shape, norm }) => {
            check_grad_shape(spec, shape, grad_output)?;
            // (I - p pᵀ) g / ‖x‖
            let radial = scalar::dot(output, g);
            let d = output
                .iter()
                .zip(g)
                .map(|(&p, &gi)| (gi - p * radial) / *norm)
                .collect();
            Ok((NdArray::from_vec(shape, d)?, Vec::new()))
        }
        _ => Err(DiffError::StaleCache {
            expected: spec.kind().name(),
            found: cache.kind().name(),
        }),
    }
}

fn check_grad_shape<S: Scalar>(spec: &LayerSpec, expected: &[usize], g: &NdArray<S>) -> Result<()> {
    if g.shape() != expected {
        return Err(shape_err(
            format!("{} backward grad_output", spec.kind().name()),
            expected,
            g.shape(),
        ));
    }
    Ok(())
}

/// Cosine similarity together with its gradient in both arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct Cosine<S> {
    pub value: S,
    pub grad_a: Vec<S>,
    pub grad_b: Vec<S>,
}

pub fn cosine_similarity<S: Scalar>(a: &[S], b: &[S]) -> Result<Cosine<S>> {
    if a.len() != b.len() {
        return Err(shape_err("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let na = scalar::l2_norm(a);
    let nb = scalar::l2_norm(b);
    if na == S::zero() || nb == S::zero() {
        return Err(DiffError::ZeroNorm("cosine_similarity"));
    }
    let value = scalar::dot(a, b) / (na * nb);
    let inv = S::one() / (na * nb);
    let grad_a = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y * inv - value * x / (na * na))
        .collect();
    let grad_b = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x * inv - value * y / (nb * nb))
        .collect();
    Ok(Cosine {
        value: value.max(-S::one()).min(S::one()),
        grad_a,
        grad_b,
    })
}

pub type GradientMap<S> = BTreeMap<String, NdArray<S>>;

/// Named parameters with matching gradient accumulators. Iteration order is
/// the lexicographic order of names.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<S> {
    params: BTreeMap<String, NdArray<S>>,
    grads: GradientMap<S>,
}

impl<S: Scalar> Default for ParameterStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            grads: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NdArray<S>) {
        let name = name.into();
        self.grads.insert(name.clone(), NdArray::zeros(value.shape()));
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&NdArray<S>> {
        self.params
            .get(name)
            .ok_or_else(|| DiffError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut NdArray<S>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| DiffError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut NdArray<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(NdArray::len).sum()
    }

    pub fn grad(&self, name: &str) -> Result<&NdArray<S>> {
        self.grads
            .get(name)
            .ok_or_else(|| DiffError::MissingParam(name.to_string()))
    }

    pub fn grads(&self) -> &GradientMap<S> {
        &self.grads
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = S::zero());
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &NdArray<S>) -> Result<()> {
        self.grads
            .get_mut(name)
            .ok_or_else(|| DiffError::MissingParam(name.to_string()))?
            .add_assign(grad)
    }

    /// Adds every entry of `grads` into the accumulators, in name order.
    pub fn accumulate_all(&mut self, grads: &GradientMap<S>) -> Result<()> {
        for (name, g) in grads {
            self.accumulate_grad(name, g)?;
        }
        Ok(())
    }

    /// Copies every parameter of `other` into this store.
    pub fn extend_from(&mut self, other: &ParameterStore<S>) {
        for (name, value) in other.iter() {
            self.insert(name, value.clone());
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        let mut out = ParameterStore::new();
        for (name, value) in self.iter() {
            out.insert(name, value.cast());
        }
        out
    }
}

/// Scalar function of a parameter store with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &ParameterStore<f64>) -> Result<f64>;
    fn value_and_grad(&self, params: &ParameterStore<f64>) -> Result<(f64, GradientMap<f64>)>;
}

/// Adapts a closure returning `(value, gradient)` into an [`Objective`].
pub struct FnObjective<F>(pub F);

impl<F> Objective for FnObjective<F>
where
    F: Fn(&ParameterStore<f64>) -> Result<(f64, GradientMap<f64>)>,
{
    fn value(&self, params: &ParameterStore<f64>) -> Result<f64> {
        Ok((self.0)(params)?.0)
    }

    fn value_and_grad(&self, params: &ParameterStore<f64>) -> Result<(f64, GradientMap<f64>)> {
        (self.0)(params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max relative error {:.3e} over {} coordinates",
            self.max_rel_error, self.coordinates
        )?;
        if let Some((name, idx)) = &self.worst {
            write!(
                f,
                " (worst {name}[{idx}]: analytic {:.6e}, numeric {:.6e})",
                self.analytic, self.numeric
            )?;
        }
        Ok(())
    }
}

/// Compares the analytic gradient of `objective` at `point` with central
/// differences `(f(x + εe) − f(x − εe)) / 2ε` on every coordinate. Relative
/// error uses the denominator `max(1, |analytic|, |numeric|)`.
pub fn check_gradient<O: Objective + ?Sized>(
    objective: &O,
    point: &ParameterStore<f64>,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let (value, analytic) = objective.value_and_grad(point)?;
    if !value.is_finite() {
        return Err(DiffError::NonFinite {
            probe: "base point".into(),
        });
    }
    let mut probe = point.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let names: Vec<String> = point.names().map(str::to_string).collect();
    for name in &names {
        let len = point.get(name)?.len();
        let zeros;
        let grad = match analytic.get(name) {
            Some(g) => g.data(),
            None => {
                zeros = vec![0.0; len];
                &zeros
            }
        };
        if grad.len() != len {
            return Err(shape_err(
                format!("analytic gradient for {name}"),
                point.get(name)?.shape(),
                &[grad.len()],
            ));
        }
        for i in 0..len {
            let orig = point.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + epsilon;
            let plus = objective.value(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - epsilon;
            let minus = objective.value(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(DiffError::NonFinite {
                    probe: format!("{name}[{i}]"),
                });
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> NdArray<f64> {
        NdArray::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity_forward_and_transpose_backward() {
        let spec = LayerSpec::Dense {
            in_features: 3,
            out_features: 3,
        };
        let w = arr(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let b = arr(&[3], &[0.; 3]);
        let x = arr(&[3], &[0.5, -2.0, 3.0]);
        let (y, _) = layer_forward(&spec, &[&w, &b], &x).unwrap();
        assert_eq!(y.data(), x.data());

        let w = arr(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let spec = LayerSpec::Dense {
            in_features: 3,
            out_features: 2,
        };
        let b = arr(&[2], &[0.; 2]);
        let (_, cache) = layer_forward(&spec, &[&w, &b], &x).unwrap();
        let (gx, _) = layer_backward(&spec, &[&w, &b], &cache, &arr(&[2], &[1., 0.])).unwrap();
        assert_eq!(gx.data(), &[1., 2., 3.]);
    }

    #[test]
    fn relu_forward_backward() {
        let (y, cache) = layer_forward(&LayerSpec::Relu, &[], &arr(&[3], &[-1., 0., 2.])).unwrap();
        assert_eq!(y.data(), &[0., 0., 2.]);
        let (_, cache2) = layer_forward(&LayerSpec::Relu, &[], &arr(&[2], &[-1., 2.])).unwrap();
        let (g, _) = layer_backward(&LayerSpec::Relu, &[], &cache2, &arr(&[2], &[1., 1.])).unwrap();
        assert_eq!(g.data(), &[0., 1.]);
        drop(cache);
    }

    #[test]
    fn conv_identity_kernel() {
        let spec = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 1,
            stride: 1,
        };
        let x = arr(&[1, 2, 3], &[1., 2., 3., 4., 5., 6.]);
        let (y, _) = layer_forward(&spec, &[&arr(&[1, 1, 1, 1], &[1.]), &arr(&[1], &[0.])], &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_same_padding_preserves_shape_for_odd_kernels() {
        for kernel in [1, 3, 5, 7] {
            let spec = LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel,
                stride: 1,
            };
            assert_eq!(spec.output_shape(&[2, 9, 11]).unwrap(), vec![3, 9, 11]);
        }
    }

    #[test]
    fn conv_is_cross_correlation() {
        // kernel [[0,0,0],[0,0,1],[0,0,0]] picks the right neighbour
        let spec = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            stride: 1,
        };
        let mut k = vec![0.; 9];
        k[5] = 1.;
        let x = arr(&[1, 1, 3], &[1., 2., 3.]);
        let (y, _) = layer_forward(&spec, &[&arr(&[1, 1, 3, 3], &k), &arr(&[1], &[0.])], &x).unwrap();
        assert_eq!(y.data(), &[2., 3., 0.]);
    }

    #[test]
    fn maxpool_ties_go_to_first_index() {
        let spec = LayerSpec::MaxPool2d { size: 2, stride: 2 };
        let x = arr(&[1, 2, 2], &[5., 5., 5., 5.]);
        let (y, cache) = layer_forward(&spec, &[], &x).unwrap();
        assert_eq!(y.data(), &[5.]);
        let (g, _) = layer_backward(&spec, &[], &cache, &arr(&[1, 1, 1], &[1.])).unwrap();
        assert_eq!(g.data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn global_avg_pool_means_each_channel() {
        let x = arr(&[2, 1, 2], &[1., 3., 10., 20.]);
        let (y, _) = layer_forward(&LayerSpec::GlobalAvgPool, &[], &x).unwrap();
        assert_eq!(y.data(), &[2., 15.]);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (_, cache) = layer_forward(&LayerSpec::Relu, &[], &arr(&[2], &[1., 2.])).unwrap();
        let err = layer_backward(&LayerSpec::L2Norm, &[], &cache, &arr(&[2], &[1., 1.])).unwrap_err();
        assert_eq!(
            err,
            DiffError::StaleCache {
                expected: "l2norm",
                found: "relu"
            }
        );
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let spec = LayerSpec::Dense {
            in_features: 4,
            out_features: 2,
        };
        let err = spec.output_shape(&[3]).unwrap_err();
        assert_eq!(
            err,
            DiffError::Shape {
                context: "dense".into(),
                expected: vec![4],
                found: vec![3]
            }
        );
        let conv = LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 1,
            kernel: 3,
            stride: 1,
        };
        assert!(matches!(conv.output_shape(&[1, 4, 4]), Err(DiffError::Shape { .. })));
    }

    #[test]
    fn l2norm_zero_input_errors() {
        assert_eq!(
            layer_forward(&LayerSpec::L2Norm, &[], &arr(&[2], &[0., 0.])).unwrap_err(),
            DiffError::ZeroNorm("l2norm")
        );
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1., 0.], &[1., 0.]).unwrap().value, 1.0);
        assert_eq!(cosine_similarity(&[1., 0.], &[0., 1.]).unwrap().value, 0.0);
        // 32 / (sqrt(14) sqrt(77))
        let c = cosine_similarity::<f64>(&[1., 2., 3.], &[4., 5., 6.]).unwrap().value;
        assert!((c - 0.974_631_8).abs() < 1e-6);
        assert!(matches!(
            cosine_similarity(&[0., 0.], &[1., 0.]),
            Err(DiffError::ZeroNorm(_))
        ));
    }

    #[test]
    fn gradcheck_linear_and_constant() {
        let mut point = ParameterStore::new();
        point.insert("x", arr(&[3], &[0.3, -1.2, 2.0]));
        let c = [1.5, -0.25, 4.0];
        let linear = FnObjective(|p: &ParameterStore<f64>| {
            let x = p.get("x")?.data();
            let v = x.iter().zip(&c).map(|(a, b)| a * b).sum();
            let mut g = GradientMap::new();
            g.insert("x".into(), arr(&[3], &c));
            Ok((v, g))
        });
        assert!(check_gradient(&linear, &point, 1e-5).unwrap().max_rel_error <= 1e-10);

        let constant = FnObjective(|_: &ParameterStore<f64>| Ok((7.0, GradientMap::new())));
        let r = check_gradient(&constant, &point, 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn gradcheck_detects_wrong_gradient_and_non_finite() {
        let mut point = ParameterStore::new();
        point.insert("x", arr(&[1], &[1.0]));
        let wrong = FnObjective(|p: &ParameterStore<f64>| {
            let x = p.get("x")?.data()[0];
            let mut g = GradientMap::new();
            g.insert("x".into(), arr(&[1], &[x])); // true derivative is 2x
            Ok((x * x, g))
        });
        assert!(check_gradient(&wrong, &point, 1e-5).unwrap().max_rel_error > 0.4);

        let blowup = FnObjective(|p: &ParameterStore<f64>| {
            let x = p.get("x")?.data()[0];
            let v = if x > 1.0 { f64::INFINITY } else { x };
            Ok((v, GradientMap::new()))
        });
        assert!(matches!(
            check_gradient(&blowup, &point, 1e-5),
            Err(DiffError::NonFinite { .. })
        ));
    }
}
