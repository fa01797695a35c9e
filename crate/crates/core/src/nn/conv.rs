//! Same-padded 2-D convolution via im2col + GEMM.

use rayon::prelude::*;

use crate::tensor::{Scalar, Shape, ShapeError, Tensor};

/// Convolution weights and geometry.
///
/// Padding is always `kernel / 2` (same-padding), so a stride-1 convolution
/// preserves the spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    pub kernel: usize,
    pub stride: usize,
    /// Shape `(filters, in_channels, kernel, kernel)`.
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(kernel: usize, stride: usize, weights: Tensor<T>, bias: Vec<T>) -> Result<Self, ShapeError> {
        let p = ConvParams {
            kernel,
            stride,
            weights,
            bias,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(kernel: usize, stride: usize, in_channels: usize, filters: usize) -> Self {
        ConvParams {
            kernel,
            stride,
            weights: Tensor::zeros(Shape::new(filters, in_channels, kernel, kernel)),
            bias: vec![T::zero(); filters],
        }
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(ShapeError::mismatch("conv kernel", "odd positive size", self.kernel));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(ShapeError::mismatch("conv stride", "1 or 2", self.stride));
        }
        let ws = self.weights.shape();
        if ws.h != self.kernel || ws.w != self.kernel {
            return Err(ShapeError::mismatch(
                "conv weight kernel extent",
                format!("{0}x{0}", self.kernel),
                format!("{}x{}", ws.h, ws.w),
            ));
        }
        if self.bias.len() != ws.n {
            return Err(ShapeError::mismatch("conv bias length", ws.n, self.bias.len()));
        }
        Ok(())
    }

    #[inline]
    pub fn filters(&self) -> usize {
        self.weights.shape().n
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    #[inline]
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape, ShapeError> {
        if input.c != self.in_channels() {
            return Err(ShapeError::mismatch("conv input channels", self.in_channels(), input.c));
        }
        let (h, w) = conv_out_hw(input.h, input.w, self.kernel, self.stride);
        Ok(Shape::new(input.n, self.filters(), h, w))
    }
}

/// `floor((H + 2·pad − K) / stride) + 1` with `pad = K / 2`.
pub fn conv_out_hw(h: usize, w: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let pad = kernel / 2;
    let f = |x: usize| (x + 2 * pad - kernel) / stride + 1;
    (f(h), f(w))
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new<T: Scalar>(input: Shape, p: &ConvParams<T>) -> Self {
        let (oh, ow) = conv_out_hw(input.h, input.w, p.kernel, p.stride);
        Geometry {
            cin: input.c,
            h: input.h,
            w: input.w,
            k: p.kernel,
            s: p.stride,
            pad: p.pad(),
            oh,
            ow,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source coordinate for output position `o` and kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let v = (o * self.s + t) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < extent).then_some(v as usize)
    }

    fn im2col<T: Scalar>(&self, item: &[T], col: &mut [T]) {
        let cols = self.col_cols();
        for ci in 0..self.cin {
            let plane = &item[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.src(oy, ky, self.h) {
                            None => out_row.fill(T::zero()),
                            Some(iy) => {
                                let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, d) in out_row.iter_mut().enumerate() {
                                    *d = match self.src(ox, kx, self.w) {
                                        Some(ix) => src_row[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], item: &mut [T]) {
        let cols = self.col_cols();
        item.fill(T::zero());
        for ci in 0..self.cin {
            let plane = &mut item[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let Some(iy) = self.src(oy, ky, self.h) else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                let d = &mut plane[iy * self.w + ix];
                                *d = *d + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution: each output cell is the kernel dotted with the
/// zero-padded receptive field, plus bias.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>, ShapeError> {
    p.validate()?;
    let out_shape = p.output_shape(input.shape())?;
    let g = Geometry::new(input.shape(), p);
    let cout = p.filters();
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(out_shape);
    let in_len = input.shape().item_len();
    let w = p.weights.data();

    out.data_mut()
        .par_chunks_mut(out_shape.item_len())
        .enumerate()
        .for_each(|(n, dst)| {
            let item = &input.data()[n * in_len..(n + 1) * in_len];
            for (co, plane) in dst.chunks_mut(cols).enumerate() {
                plane.fill(p.bias[co]);
            }
            let mut scratch;
            let col: &[T] = if g.is_pointwise() {
                item
            } else {
                scratch = vec![T::zero(); rows * cols];
                g.im2col(item, &mut scratch);
                &scratch
            };
            T::gemm(
                cout,
                rows,
                cols,
                T::one(),
                w,
                rows as isize,
                1,
                col,
                cols as isize,
                1,
                T::one(),
                dst,
                cols as isize,
                1,
            );
        });
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// Gradients of a scalar loss with respect to the input, weights and bias
/// of [`conv2d`], given the gradient at its output.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>, ShapeError> {
    let out_shape = p.output_shape(input.shape())?;
    if grad_out.shape() != out_shape {
        return Err(ShapeError::mismatch("conv output gradient", out_shape, grad_out.shape()));
    }
    let g = Geometry::new(input.shape(), p);
    let cout = p.filters();
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_len = input.shape().item_len();
    let out_len = out_shape.item_len();
    let w = p.weights.data();

    let per_item: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..input.shape().n)
        .into_par_iter()
        .map(|n| {
            let item = &input.data()[n * in_len..(n + 1) * in_len];
            let gout = &grad_out.data()[n * out_len..(n + 1) * out_len];
            let mut scratch;
            let col: &[T] = if g.is_pointwise() {
                item
            } else {
                scratch = vec![T::zero(); rows * cols];
                g.im2col(item, &mut scratch);
                &scratch
            };
            // dW = dOut · colᵀ
            let mut dw = vec![T::zero(); cout * rows];
            T::gemm(
                cout,
                cols,
                rows,
                T::one(),
                gout,
                cols as isize,
                1,
                col,
                1,
                cols as isize,
                T::zero(),
                &mut dw,
                rows as isize,
                1,
            );
            let db: Vec<T> = gout.chunks(cols).map(|c| c.iter().copied().sum()).collect();
            // dcol = Wᵀ · dOut
            let mut dcol = vec![T::zero(); rows * cols];
            T::gemm(
                rows,
                cout,
                cols,
                T::one(),
                w,
                1,
                rows as isize,
                gout,
                cols as isize,
                1,
                T::zero(),
                &mut dcol,
                cols as isize,
                1,
            );
            let dx = if g.is_pointwise() {
                dcol
            } else {
                let mut dx = vec![T::zero(); in_len];
                g.col2im(&dcol, &mut dx);
                dx
            };
            (dx, dw, db)
        })
        .collect();

    let mut grad_in = Vec::with_capacity(input.shape().len());
    let mut grad_w = vec![T::zero(); cout * rows];
    let mut grad_b = vec![T::zero(); cout];
    for (dx, dw, db) in per_item {
        grad_in.extend_from_slice(&dx);
        for (a, b) in grad_w.iter_mut().zip(dw) {
            *a = *a + b;
        }
        for (a, b) in grad_b.iter_mut().zip(db) {
            *a = *a + b;
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), grad_in)?,
        weights: Tensor::from_vec(p.weights.shape(), grad_w)?,
        bias: grad_b,
    })
}
