//! Max pooling. Stride-1 pools are same-padded with −∞ so the spatial size
//! is preserved; strided pools are unpadded.

use crate::tensor::{Scalar, Shape, ShapeError, Tensor};

fn geometry(h: usize, w: usize, kernel: usize, stride: usize) -> Result<(usize, usize, usize), ShapeError> {
    if kernel == 0 {
        return Err(ShapeError::mismatch("max pool kernel", ">= 1", kernel));
    }
    match stride {
        1 => Ok((h, w, (kernel - 1) / 2)),
        2 => {
            if h < kernel || w < kernel {
                return Err(ShapeError::mismatch(
                    "max pool input extent",
                    format!(">= {kernel}"),
                    format!("{h}x{w}"),
                ));
            }
            Ok(((h - kernel) / 2 + 1, (w - kernel) / 2 + 1, 0))
        }
        s => Err(ShapeError::mismatch("max pool stride", "1 or 2", s)),
    }
}

pub fn max_pool_output_shape(input: Shape, kernel: usize, stride: usize) -> Result<Shape, ShapeError> {
    let (oh, ow, _) = geometry(input.h, input.w, kernel, stride)?;
    Ok(Shape::new(input.n, input.c, oh, ow))
}

pub fn max_pool<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>, ShapeError> {
    Ok(max_pool_with_argmax(input, kernel, stride)?.0)
}

/// Forward pool that also returns, for each output cell, the flat input
/// index of the selected maximum (first in scan order on ties).
pub fn max_pool_with_argmax<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>), ShapeError> {
    let s = input.shape();
    let out_shape = max_pool_output_shape(s, kernel, stride)?;
    let (_, _, pad) = geometry(s.h, s.w, kernel, stride)?;
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = vec![0usize; out_shape.len()];
    let data = input.data();
    let mut o = 0;
    for plane_idx in 0..s.n * s.c {
        let base = plane_idx * s.plane();
        for oy in 0..out_shape.h {
            let y0 = (oy * stride) as isize - pad as isize;
            let ys = y0.max(0) as usize..((y0 + kernel as isize).min(s.h as isize)) as usize;
            for ox in 0..out_shape.w {
                let x0 = (ox * stride) as isize - pad as isize;
                let xs = x0.max(0) as usize..((x0 + kernel as isize).min(s.w as isize)) as usize;
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for y in ys.clone() {
                    for x in xs.clone() {
                        let i = base + y * s.w + x;
                        if best_i == usize::MAX || data[i] > best {
                            best = data[i];
                            best_i = i;
                        }
                    }
                }
                out.data_mut()[o] = best;
                argmax[o] = best_i;
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to the input cell that produced the maximum.
pub fn max_pool_backward<T: Scalar>(input_shape: Shape, argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    assert_eq!(argmax.len(), grad_out.shape().len(), "max pool argmax length");
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        gd[i] = gd[i] + v;
    }
    g
}
