//! Binary weight files.
//!
//! ```text
//! magic     b"EYWT"
//! version   u32
//! layers    u32   number of parameterized layers
//! signature u64   FNV-1a of the graph's canonical text
//! per parameterized layer, in graph order:
//!   [gamma, beta, running_mean, running_var]   (batch-normed layers only)
//!   conv weights (Cout·Cin·K·K), bias (Cout)
//! ```
//!
//! All integers and values are little-endian; values are IEEE-754 `f32`.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{LayerKind, LayerParams, NetGraph};
use crate::nn::{batchnorm::DEFAULT_EPS, BatchNormParams, ConvParams};
use crate::tensor::{Scalar, Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"EYWT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("bad magic {0:02x?}, expected EYWT")]
    BadMagic([u8; 4]),
    #[error("unsupported weights format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("graph signature mismatch: file {found:016x}, graph {expected:016x}")]
    Signature { found: u64, expected: u64 },
    #[error("file holds {found} parameterized layers, graph has {expected}")]
    LayerCount { found: u32, expected: u32 },
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated parameter blob in layer {layer}")]
    Truncated { layer: usize },
    #[error("{0} trailing bytes after the last layer")]
    TrailingData(usize),
    #[error("graph has no weights to save")]
    Unweighted,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Exact byte length [`save_weights`] produces for `g`.
pub fn serialized_size<T: Scalar>(g: &NetGraph<T>) -> usize {
    let mut values = 0;
    for l in g.layers() {
        if let LayerKind::Conv {
            kernel,
            filters,
            batch_norm,
            ..
        } = l.kind
        {
            let cin = g.layer_input_shape(l.index).c;
            values += kernel * kernel * cin * filters + filters;
            if batch_norm {
                values += 4 * filters;
            }
        }
    }
    HEADER_LEN + 4 * values
}

fn write_values<T: Scalar>(sink: &mut impl Write, values: &[T]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    sink.write_all(&buf)
}

pub fn save_weights<T: Scalar>(g: &NetGraph<T>, mut sink: impl Write) -> Result<(), WeightsError> {
    let params = g.params().ok_or(WeightsError::Unweighted)?;
    let count = params.iter().flatten().count() as u32;
    sink.write_all(&MAGIC)?;
    sink.write_all(&VERSION.to_le_bytes())?;
    sink.write_all(&count.to_le_bytes())?;
    sink.write_all(&g.signature().to_le_bytes())?;
    for p in params.iter().flatten() {
        if let Some(bn) = &p.bn {
            write_values(&mut sink, &bn.gamma)?;
            write_values(&mut sink, &bn.beta)?;
            write_values(&mut sink, &bn.running_mean)?;
            write_values(&mut sink, &bn.running_var)?;
        }
        write_values(&mut sink, p.conv.weights.data())?;
        write_values(&mut sink, &p.conv.bias)?;
    }
    sink.flush()?;
    Ok(())
}

pub fn weights_to_bytes<T: Scalar>(g: &NetGraph<T>) -> Result<Vec<u8>, WeightsError> {
    let mut buf = Vec::with_capacity(serialized_size(g));
    save_weights(g, &mut buf)?;
    Ok(buf)
}

fn read_values<T: Scalar>(src: &mut impl Read, n: usize, layer: usize) -> Result<Vec<T>, WeightsError> {
    let mut buf = vec![0u8; n * 4];
    src.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WeightsError::Truncated { layer },
        _ => WeightsError::Io(e),
    })?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect())
}

/// Reads a weights file into a copy of `g`. The graph is returned only if
/// the whole file parsed; `g` itself is never modified.
pub fn load_weights<T: Scalar>(g: &NetGraph<T>, mut source: impl Read) -> Result<NetGraph<T>, WeightsError> {
    let mut header = [0u8; HEADER_LEN];
    source.read_exact(&mut header).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WeightsError::TruncatedHeader,
        _ => WeightsError::Io(e),
    })?;
    let magic: [u8; 4] = header[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(WeightsError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(WeightsError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes"));
    let signature = u64::from_le_bytes(header[12..20].try_into().expect("8 bytes"));
    if signature != g.signature() {
        return Err(WeightsError::Signature {
            found: signature,
            expected: g.signature(),
        });
    }
    let expected = g.parameterized_layers().len() as u32;
    if count != expected {
        return Err(WeightsError::LayerCount { found: count, expected });
    }

    let mut params = Vec::with_capacity(g.layers().len());
    for l in g.layers() {
        let LayerKind::Conv {
            kernel,
            stride,
            filters,
            batch_norm,
            ..
        } = l.kind
        else {
            params.push(None);
            continue;
        };
        let i = l.index;
        let bn = if batch_norm {
            Some(BatchNormParams {
                gamma: read_values(&mut source, filters, i)?,
                beta: read_values(&mut source, filters, i)?,
                running_mean: read_values(&mut source, filters, i)?,
                running_var: read_values(&mut source, filters, i)?,
                eps: T::from_f64(DEFAULT_EPS),
            })
        } else {
            None
        };
        let cin = g.layer_input_shape(i).c;
        let ws = Shape::new(filters, cin, kernel, kernel);
        let weights = Tensor::from_vec(ws, read_values(&mut source, ws.len(), i)?).expect("length matches shape");
        let bias = read_values(&mut source, filters, i)?;
        params.push(Some(LayerParams {
            conv: ConvParams {
                kernel,
                stride,
                weights,
                bias,
            },
            bn,
        }));
    }
    let mut rest = Vec::new();
    source.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(WeightsError::TrailingData(rest.len()));
    }
    let mut out = g.clone();
    out.set_params(params).map_err(|e| WeightsError::Io(io::Error::other(e.to_string())))?;
    Ok(out)
}
