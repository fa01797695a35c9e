//! Network graphs: layer list, shape inference, parameters, execution and
//! weight serialization.

mod config;
mod exec;
mod layer;
mod preset;
mod weights;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hash::Hasher;
use thiserror::Error;

use crate::anchors::AnchorSet;
use crate::nn::{self, BatchNormParams, ConvParams};
use crate::tensor::{Scalar, Shape, ShapeError, Tensor};

pub use config::{canonical_text, parse_config};
pub use exec::{Gradients, HeadOutput, LayerCache, LayerGrads, TrainPass};
pub use layer::{LayerKind, LayerSpec};
pub use preset::{build_edge_yolo, build_edge_yolo_with, PresetOptions, EDGE_YOLO_416};
pub use weights::{load_weights, save_weights, serialized_size, weights_to_bytes, WeightsError, HEADER_LEN, MAGIC, VERSION};

pub const DEFAULT_CLASSES: usize = 80;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: layer {layer}: unknown layer kind `{kind}`")]
    UnknownLayer { line: usize, layer: usize, kind: String },
    #[error("line {line}: layer {layer} routes forward to layer {target}")]
    ForwardRef { line: usize, layer: usize, target: usize },
    #[error("layer {layer} (line {line}): {source}")]
    Shape {
        layer: usize,
        line: usize,
        #[source]
        source: ShapeError,
    },
    #[error("invalid heads: {0}")]
    Heads(String),
    #[error("anchors: {0}")]
    Anchors(String),
    #[error("network input must be {expected}, got {got}")]
    Input { expected: Shape, got: Shape },
    #[error("graph has no weights loaded")]
    Unweighted,
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl NetError {
    fn shape(spec: &LayerSpec, source: ShapeError) -> Self {
        NetError::Shape {
            layer: spec.index,
            line: spec.line,
            source,
        }
    }
}

/// Parameters of one convolutional layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub conv: ConvParams<T>,
    pub bn: Option<BatchNormParams<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn param_count(&self) -> usize {
        self.conv.weights.shape().len() + self.conv.bias.len() + self.bn.as_ref().map_or(0, |b| 4 * b.channels())
    }
}

/// A layered detector graph.
///
/// Layers execute in list order; shapes are inferred once at construction
/// for a batch of one.
#[derive(Debug, Clone)]
pub struct NetGraph<T = f32> {
    input: (usize, usize, usize),
    num_classes: usize,
    layers: Vec<LayerSpec>,
    shapes: Vec<Shape>,
    anchors: Option<AnchorSet>,
    params: Option<Vec<Option<LayerParams<T>>>>,
}

impl<T: Scalar> NetGraph<T> {
    /// Validates references and heads and infers every layer's output shape.
    /// `input` is `(width, height, channels)`.
    pub fn from_layers(input: (usize, usize, usize), num_classes: usize, layers: Vec<LayerSpec>) -> Result<Self, NetError> {
        let (w, h, c) = input;
        let in_shape = Shape::new(1, c, h, w);
        let mut shapes: Vec<Shape> = Vec::with_capacity(layers.len());
        for (i, spec) in layers.iter().enumerate() {
            if spec.index != i {
                return Err(NetError::Parse {
                    line: spec.line,
                    msg: format!("layer listed at position {i} has index {}", spec.index),
                });
            }
            let src_shape = |s: Option<usize>| s.map_or(in_shape, |j| shapes[j]);
            let out = match &spec.kind {
                LayerKind::Conv {
                    kernel,
                    stride,
                    filters,
                    ..
                } => {
                    let src = src_shape(spec.sources()[0]);
                    let p = ConvParams::<T>::zeros(*kernel, *stride, src.c, *filters);
                    p.validate()
                        .and_then(|_| p.output_shape(src))
                        .map_err(|e| NetError::shape(spec, e))?
                }
                LayerKind::Max { kernel, stride } => nn::max_pool_output_shape(src_shape(spec.sources()[0]), *kernel, *stride)
                    .map_err(|e| NetError::shape(spec, e))?,
                LayerKind::Route { refs, split } => {
                    if let Some(&r) = refs.iter().find(|&&r| r >= i) {
                        return Err(NetError::ForwardRef {
                            line: spec.line,
                            layer: i,
                            target: r,
                        });
                    }
                    let ins: Vec<Shape> = refs.iter().map(|&r| shapes[r]).collect();
                    nn::route_output_shape(&ins, *split).map_err(|e| NetError::shape(spec, e))?
                }
                LayerKind::Upsample => {
                    let s = src_shape(spec.sources()[0]);
                    Shape::new(s.n, s.c, 2 * s.h, 2 * s.w)
                }
                LayerKind::Head { .. } => {
                    let s = src_shape(spec.sources()[0]);
                    if s.c % (5 + num_classes) != 0 {
                        return Err(NetError::shape(
                            spec,
                            ShapeError::mismatch(
                                "head channels",
                                format!("a multiple of 5 + {num_classes}"),
                                s.c,
                            ),
                        ));
                    }
                    s
                }
            };
            shapes.push(out);
        }
        let g = NetGraph {
            input,
            num_classes,
            layers,
            shapes,
            anchors: None,
            params: None,
        };
        g.check_heads()?;
        Ok(g)
    }

    fn check_heads(&self) -> Result<(), NetError> {
        let heads = self.heads();
        let mut seen: Vec<usize> = heads.iter().map(|&(_, s)| s).collect();
        seen.sort_unstable();
        if seen.iter().enumerate().any(|(i, &s)| i != s) {
            return Err(NetError::Heads(format!(
                "scale indices must be 0..{} without repeats, got {seen:?}",
                heads.len()
            )));
        }
        let per: Vec<usize> = heads
            .iter()
            .map(|&(l, _)| self.shapes[l].c / (5 + self.num_classes))
            .collect();
        if per.windows(2).any(|w| w[0] != w[1]) {
            return Err(NetError::Heads(format!("heads disagree on anchors per scale: {per:?}")));
        }
        Ok(())
    }

    /// `(width, height, channels)` of the network input.
    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn input_shape(&self) -> Shape {
        let (w, h, c) = self.input;
        Shape::new(1, c, h, w)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Output shape of every layer for a batch of one.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Input shape of layer `i` (for concatenating routes, of the first source).
    pub fn layer_input_shape(&self, i: usize) -> Shape {
        match self.layers[i].sources()[0] {
            None => self.input_shape(),
            Some(j) => self.shapes[j],
        }
    }

    /// `(layer index, scale index)` of each head, in layer order.
    pub fn heads(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::Head { scale_index } => Some((l.index, scale_index)),
                _ => None,
            })
            .collect()
    }

    /// Anchors per grid cell, from the head channel count.
    pub fn anchors_per_scale(&self) -> Option<usize> {
        self.heads()
            .first()
            .map(|&(l, _)| self.shapes[l].c / (5 + self.num_classes))
    }

    pub fn anchors(&self) -> Option<&AnchorSet> {
        self.anchors.as_ref()
    }

    pub fn set_anchors(&mut self, anchors: AnchorSet) -> Result<(), NetError> {
        let heads = self.heads().len();
        let per = self.anchors_per_scale().unwrap_or(0);
        if anchors.len() != heads * per {
            return Err(NetError::Anchors(format!(
                "{heads} heads with {per} anchors each need {} anchors, got {}",
                heads * per,
                anchors.len()
            )));
        }
        self.anchors = Some(anchors);
        Ok(())
    }

    pub fn with_anchors(mut self, anchors: AnchorSet) -> Result<Self, NetError> {
        self.set_anchors(anchors)?;
        Ok(self)
    }

    pub fn canonical_text(&self) -> String {
        canonical_text(self)
    }

    /// FNV-1a (64-bit) of the canonical text.
    pub fn signature(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(self.canonical_text().as_bytes());
        h.finish()
    }

    pub fn is_weighted(&self) -> bool {
        self.params.is_some()
    }

    pub fn params(&self) -> Option<&[Option<LayerParams<T>>]> {
        self.params.as_deref()
    }

    pub fn params_mut(&mut self) -> Option<&mut [Option<LayerParams<T>>]> {
        self.params.as_deref_mut()
    }

    pub fn clear_params(&mut self) {
        self.params = None;
    }

    /// Indices of layers that carry parameters.
    pub fn parameterized_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.kind.is_parameterized())
            .map(|l| l.index)
            .collect()
    }

    /// All-zero convolutions with identity batch norm.
    pub fn init_zero(&mut self) {
        self.init_with(|_, _| T::zero());
    }

    /// Uniform ±sqrt(6 / fan_in) convolution weights, zero biases and
    /// identity batch norm.
    pub fn init_random(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.init_with(|fan_in, _| {
            let bound = (6.0 / fan_in as f64).sqrt();
            T::from_f64(rng.random_range(-bound..bound))
        });
    }

    fn init_with(&mut self, mut weight: impl FnMut(usize, usize) -> T) {
        let mut params = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let p = match self.layers[i].kind {
                LayerKind::Conv {
                    kernel,
                    stride,
                    filters,
                    batch_norm,
                    ..
                } => {
                    let cin = self.layer_input_shape(i).c;
                    let fan_in = cin * kernel * kernel;
                    let ws = Shape::new(filters, cin, kernel, kernel);
                    let data = (0..ws.len()).map(|j| weight(fan_in, j)).collect();
                    Some(LayerParams {
                        conv: ConvParams {
                            kernel,
                            stride,
                            weights: Tensor::from_vec(ws, data).expect("shape matches"),
                            bias: vec![T::zero(); filters],
                        },
                        bn: batch_norm.then(|| BatchNormParams::identity(filters)),
                    })
                }
                _ => None,
            };
            params.push(p);
        }
        self.params = Some(params);
    }

    /// Installs parameters, checking they match every layer's geometry.
    pub fn set_params(&mut self, params: Vec<Option<LayerParams<T>>>) -> Result<(), NetError> {
        if params.len() != self.layers.len() {
            return Err(NetError::Parse {
                line: 0,
                msg: format!("expected parameters for {} layers, got {}", self.layers.len(), params.len()),
            });
        }
        for (i, p) in params.iter().enumerate() {
            let spec = &self.layers[i];
            match (&spec.kind, p) {
                (
                    LayerKind::Conv {
                        kernel,
                        stride,
                        filters,
                        batch_norm,
                        ..
                    },
                    Some(p),
                ) => {
                    let cin = self.layer_input_shape(i).c;
                    let want = Shape::new(*filters, cin, *kernel, *kernel);
                    if p.conv.weights.shape() != want || p.conv.stride != *stride || p.conv.kernel != *kernel {
                        return Err(NetError::shape(
                            spec,
                            ShapeError::mismatch("conv parameters", want, p.conv.weights.shape()),
                        ));
                    }
                    p.conv.validate().map_err(|e| NetError::shape(spec, e))?;
                    match (&p.bn, batch_norm) {
                        (Some(bn), true) => {
                            bn.validate().map_err(|e| NetError::shape(spec, e))?;
                            if bn.channels() != *filters {
                                return Err(NetError::shape(
                                    spec,
                                    ShapeError::mismatch("batch norm channels", filters, bn.channels()),
                                ));
                            }
                        }
                        (None, false) => {}
                        _ => {
                            return Err(NetError::shape(
                                spec,
                                ShapeError::mismatch("batch norm presence", batch_norm, p.bn.is_some()),
                            ))
                        }
                    }
                }
                (LayerKind::Conv { .. }, None) => {
                    return Err(NetError::shape(spec, ShapeError::mismatch("conv parameters", "present", "missing")))
                }
                (_, Some(_)) => {
                    return Err(NetError::shape(
                        spec,
                        ShapeError::mismatch("parameters for unparameterized layer", "none", "some"),
                    ))
                }
                (_, None) => {}
            }
        }
        self.params = Some(params);
        Ok(())
    }

    /// Converts parameters to another scalar width.
    pub fn cast<U: Scalar>(&self) -> NetGraph<U> {
        let conv_vec = |v: &[T]| v.iter().map(|&x| U::from_f64(x.as_f64())).collect::<Vec<U>>();
        NetGraph {
            input: self.input,
            num_classes: self.num_classes,
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            anchors: self.anchors.clone(),
            params: self.params.as_ref().map(|ps| {
                ps.iter()
                    .map(|p| {
                        p.as_ref().map(|p| LayerParams {
                            conv: ConvParams {
                                kernel: p.conv.kernel,
                                stride: p.conv.stride,
                                weights: p.conv.weights.cast(),
                                bias: conv_vec(&p.conv.bias),
                            },
                            bn: p.bn.as_ref().map(|b| BatchNormParams {
                                gamma: conv_vec(&b.gamma),
                                beta: conv_vec(&b.beta),
                                running_mean: conv_vec(&b.running_mean),
                                running_var: conv_vec(&b.running_var),
                                eps: U::from_f64(b.eps.as_f64()),
                            }),
                        })
                    })
                    .collect()
            }),
        }
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params
            .as_ref()
            .map(|ps| ps.iter().flatten().map(LayerParams::param_count).sum())
            .unwrap_or(0)
    }
}
