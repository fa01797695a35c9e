//! Nearest-neighbour 2× upsampling and route (concatenate / channel split).

use crate::tensor::{Scalar, Shape, ShapeError, Tensor};

pub fn upsample2x<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let mut out = Tensor::zeros(out_shape);
    let ow = out_shape.w;
    for (src, dst) in input.data().chunks(s.plane()).zip(out.data_mut().chunks_mut(out_shape.plane())) {
        for y in 0..s.h {
            for x in 0..s.w {
                let v = src[y * s.w + x];
                let o = 2 * y * ow + 2 * x;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + ow] = v;
                dst[o + ow + 1] = v;
            }
        }
    }
    out
}

/// Sums each 2×2 output-gradient block back onto its source cell.
pub fn upsample2x_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let gs = grad_out.shape();
    assert!(gs.h.is_multiple_of(2) && gs.w.is_multiple_of(2), "upsample gradient must have even extent");
    let s = Shape::new(gs.n, gs.c, gs.h / 2, gs.w / 2);
    let mut g = Tensor::zeros(s);
    for (src, dst) in grad_out.data().chunks(gs.plane()).zip(g.data_mut().chunks_mut(s.plane())) {
        for y in 0..s.h {
            for x in 0..s.w {
                let o = 2 * y * gs.w + 2 * x;
                dst[y * s.w + x] = src[o] + src[o + 1] + src[o + gs.w] + src[o + gs.w + 1];
            }
        }
    }
    g
}

/// Output shape of a route over inputs of the given shapes.
pub fn route_output_shape(inputs: &[Shape], split: Option<usize>) -> Result<Shape, ShapeError> {
    let first = *inputs
        .first()
        .ok_or_else(|| ShapeError::mismatch("route inputs", "at least one", 0))?;
    if let Some(half) = split {
        if inputs.len() != 1 {
            return Err(ShapeError::mismatch("split route inputs", 1, inputs.len()));
        }
        if half > 1 {
            return Err(ShapeError::mismatch("split half index", "0 or 1", half));
        }
        if first.c % 2 != 0 {
            return Err(ShapeError::mismatch("split route channels", "an even count", first.c));
        }
        return Ok(Shape { c: first.c / 2, ..first });
    }
    let mut c = 0;
    for s in inputs {
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(ShapeError::mismatch(
                "route input extent",
                format!("{}x_x{}x{}", first.n, first.h, first.w),
                s,
            ));
        }
        c += s.c;
    }
    Ok(Shape { c, ..first })
}

/// Channel concatenation in argument order, or the selected contiguous half
/// of a single input's channels when `split` is set.
pub fn route<T: Scalar>(inputs: &[&Tensor<T>], split: Option<usize>) -> Result<Tensor<T>, ShapeError> {
    let shapes: Vec<Shape> = inputs.iter().map(|t| t.shape()).collect();
    let out_shape = route_output_shape(&shapes, split)?;
    let mut data = Vec::with_capacity(out_shape.len());
    if let Some(half) = split {
        let t = inputs[0];
        let s = t.shape();
        let part = out_shape.item_len();
        for n in 0..s.n {
            let item = t.item(n);
            data.extend_from_slice(&item[half * part..(half + 1) * part]);
        }
    } else {
        for n in 0..out_shape.n {
            for t in inputs {
                data.extend_from_slice(t.item(n));
            }
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Splits the route's output gradient back onto its inputs.
pub fn route_backward<T: Scalar>(grad_out: &Tensor<T>, input_shapes: &[Shape], split: Option<usize>) -> Vec<Tensor<T>> {
    let gs = grad_out.shape();
    if let Some(half) = split {
        let s = input_shapes[0];
        let mut g = Tensor::zeros(s);
        let part = gs.item_len();
        for n in 0..s.n {
            g.item_mut(n)[half * part..(half + 1) * part].copy_from_slice(grad_out.item(n));
        }
        return vec![g];
    }
    let mut grads: Vec<Tensor<T>> = input_shapes.iter().map(|&s| Tensor::zeros(s)).collect();
    for n in 0..gs.n {
        let item = grad_out.item(n);
        let mut off = 0;
        for g in grads.iter_mut() {
            let len = g.shape().item_len();
            g.item_mut(n).copy_from_slice(&item[off..off + len]);
            off += len;
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_single_value() {
        let t = Tensor::<f32>::full(Shape::new(1, 1, 1, 1), 7.0);
        let u = upsample2x(&t);
        assert_eq!(u.shape(), Shape::new(1, 1, 2, 2));
        assert!(u.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn upsample_checkerboard_blocks() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let u = upsample2x(&t);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 0.0, 0.0,
            1.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 1.0,
            0.0, 0.0, 1.0, 1.0,
        ];
        assert_eq!(u.data(), &expected);
    }

    #[test]
    fn upsample_13_to_26() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 8, 13, 13));
        assert_eq!(upsample2x(&t).shape(), Shape::new(1, 8, 26, 26));
    }

    #[test]
    fn concat_channel_counts() {
        let a = Shape::new(1, 32, 104, 104);
        assert_eq!(route_output_shape(&[a, a], None).unwrap().c, 64);
        let b = Shape::new(1, 128, 52, 52);
        assert_eq!(route_output_shape(&[b; 4], None).unwrap().c, 512);
    }

    #[test]
    fn single_input_is_identity() {
        let t = Tensor::<f64>::from_fn(Shape::new(2, 3, 2, 2), |n, c, y, x| (n * 100 + c * 10 + y * 2 + x) as f64);
        assert_eq!(route(&[&t], None).unwrap(), t);
    }

    #[test]
    fn split_then_concat_round_trip() {
        let t = Tensor::<f64>::from_fn(Shape::new(2, 4, 3, 2), |n, c, y, x| (n * 100 + c * 10 + y * 2 + x) as f64);
        let lo = route(&[&t], Some(0)).unwrap();
        let hi = route(&[&t], Some(1)).unwrap();
        assert_eq!(lo.get(1, 1, 2, 1), t.get(1, 1, 2, 1));
        assert_eq!(hi.get(1, 0, 0, 0), t.get(1, 2, 0, 0));
        assert_eq!(route(&[&lo, &hi], None).unwrap(), t);
    }

    #[test]
    fn route_errors() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let b = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2));
        assert!(route(&[&a, &b], None).is_err());
        let odd = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        assert!(route(&[&odd], Some(0)).is_err());
        assert!(route(&[&a, &a], Some(1)).is_err());
    }
}
