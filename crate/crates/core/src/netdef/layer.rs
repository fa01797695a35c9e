use std::fmt;

use crate::nn::{Activation, DEFAULT_LEAKY_SLOPE};

/// What a layer computes.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Convolution, followed by batch norm and activation unless `linear`.
    Conv {
        kernel: usize,
        stride: usize,
        filters: usize,
        batch_norm: bool,
        activation: Activation,
    },
    Max {
        kernel: usize,
        stride: usize,
    },
    /// Concatenation of earlier layers' outputs, or one half of a single
    /// layer's channels when `split` is set.
    Route {
        refs: Vec<usize>,
        split: Option<usize>,
    },
    Upsample,
    /// Marks the previous layer's output as raw predictions for one scale.
    /// Scale 0 is the coarsest grid.
    Head {
        scale_index: usize,
    },
}

impl LayerKind {
    /// The CBL unit: convolution + batch norm + leaky ReLU.
    pub fn cbl(kernel: usize, stride: usize, filters: usize) -> Self {
        LayerKind::Conv {
            kernel,
            stride,
            filters,
            batch_norm: true,
            activation: Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE),
        }
    }

    /// Head output convolution: no batch norm, no activation.
    pub fn linear_conv(kernel: usize, filters: usize) -> Self {
        LayerKind::Conv {
            kernel,
            stride: 1,
            filters,
            batch_norm: false,
            activation: Activation::Linear,
        }
    }

    pub fn route(refs: &[usize]) -> Self {
        LayerKind::Route {
            refs: refs.to_vec(),
            split: None,
        }
    }

    pub fn split(source: usize, half: usize) -> Self {
        LayerKind::Route {
            refs: vec![source],
            split: Some(half),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Max { .. } => "max",
            LayerKind::Route { .. } => "route",
            LayerKind::Upsample => "upsample",
            LayerKind::Head { .. } => "head",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerKind::Conv { .. })
    }
}

/// Renders the layer in the config grammar.
impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::Conv {
                kernel,
                stride,
                filters,
                batch_norm,
                activation,
            } => {
                write!(f, "conv {kernel}x{kernel}/{stride} {filters}")?;
                match (batch_norm, activation) {
                    (false, Activation::Linear) => f.write_str(" linear"),
                    (true, Activation::LeakyRelu(a)) if *a == DEFAULT_LEAKY_SLOPE => Ok(()),
                    (true, act) => write!(f, " act={act}"),
                    (false, act) => write!(f, " nobn act={act}"),
                }
            }
            LayerKind::Max { kernel, stride } => write!(f, "max {kernel}x{kernel}/{stride}"),
            LayerKind::Route { refs, split } => {
                f.write_str("route")?;
                for r in refs {
                    write!(f, " {r}")?;
                }
                if let Some(h) = split {
                    write!(f, " split {h}")?;
                }
                Ok(())
            }
            LayerKind::Upsample => f.write_str("upsample"),
            LayerKind::Head { scale_index } => write!(f, "head {scale_index}"),
        }
    }
}

/// One layer of a [`NetGraph`](super::NetGraph).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    /// 1-based source line in the config text, or 0 for programmatic graphs.
    pub line: usize,
}

impl LayerSpec {
    /// Indices of the layers whose outputs feed this one. `None` denotes the
    /// network input.
    pub fn sources(&self) -> Vec<Option<usize>> {
        match &self.kind {
            LayerKind::Route { refs, .. } => refs.iter().map(|&r| Some(r)).collect(),
            _ => vec![self.index.checked_sub(1)],
        }
    }
}
