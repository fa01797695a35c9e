//! Per-channel batch normalization.
//!
//! Inference uses the running statistics and folds into a per-channel
//! affine transform. Training normalizes with the statistics of the current
//! batch and reports them so the caller can update the running averages.

use crate::tensor::{Scalar, ShapeError, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNormParams<T> {
    /// Identity-initialized parameters (`gamma = 1`, `var = 1`, everything else 0).
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64(DEFAULT_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        let c = self.gamma.len();
        for (name, v) in [
            ("batch norm beta", &self.beta),
            ("batch norm running mean", &self.running_mean),
            ("batch norm running variance", &self.running_var),
        ] {
            if v.len() != c {
                return Err(ShapeError::mismatch(name, c, v.len()));
            }
        }
        if let Some(v) = self.running_var.iter().find(|v| **v < T::zero()) {
            return Err(ShapeError::mismatch("batch norm running variance", ">= 0", v));
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(), ShapeError> {
        self.validate()?;
        if input.shape().c != self.channels() {
            return Err(ShapeError::mismatch(
                "batch norm input channels",
                self.channels(),
                input.shape().c,
            ));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` such that inference output is `scale·x + shift`.
    pub fn fold(&self) -> (Vec<T>, Vec<T>) {
        (0..self.channels())
            .map(|c| {
                let scale = self.gamma[c] / (self.running_var[c] + self.eps).sqrt();
                (scale, self.beta[c] - scale * self.running_mean[c])
            })
            .unzip()
    }

    /// `running = momentum·running + (1 − momentum)·batch`; the batch variance
    /// is converted to its unbiased estimate first.
    pub fn update_running(&mut self, stats: &BatchStats<T>, momentum: T) {
        let m = stats.count as f64;
        let unbias = if m > 1.0 { T::from_f64(m / (m - 1.0)) } else { T::one() };
        let keep = T::one() - momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = momentum * self.running_mean[c] + keep * stats.mean[c];
            self.running_var[c] = momentum * self.running_var[c] + keep * stats.var[c] * unbias;
        }
    }
}

/// Inference-mode normalization: `gamma·(x − mean)/sqrt(var + eps) + beta`.
pub fn batch_norm<T: Scalar>(input: &Tensor<T>, p: &BatchNormParams<T>) -> Result<Tensor<T>, ShapeError> {
    p.check_input(input)?;
    let (scale, shift) = p.fold();
    let s = input.shape();
    let plane = s.plane();
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let c = i % s.c;
        for v in chunk {
            *v = scale[c] * *v + shift[c];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward pass of [`batch_norm`] (running statistics held constant).
pub fn batch_norm_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &BatchNormParams<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>, ShapeError> {
    p.check_input(input)?;
    if grad_out.shape() != input.shape() {
        return Err(ShapeError::mismatch("batch norm output gradient", input.shape(), grad_out.shape()));
    }
    let s = input.shape();
    let plane = s.plane();
    let inv_std: Vec<T> = (0..s.c).map(|c| T::one() / (p.running_var[c] + p.eps).sqrt()).collect();
    let mut dx = grad_out.clone();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for (i, (gchunk, xchunk)) in dx.data_mut().chunks_mut(plane).zip(input.data().chunks(plane)).enumerate() {
        let c = i % s.c;
        for (g, &x) in gchunk.iter_mut().zip(xchunk) {
            let x_hat = (x - p.running_mean[c]) * inv_std[c];
            dgamma[c] = dgamma[c] + *g * x_hat;
            dbeta[c] = dbeta[c] + *g;
            *g = *g * p.gamma[c] * inv_std[c];
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

/// Statistics of one training batch, per channel.
#[derive(Debug, Clone)]
pub struct BatchStats<T = f32> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of values reduced per channel (`n·h·w`).
    pub count: usize,
}

/// Forward state kept for [`batch_norm_train_backward`].
#[derive(Debug, Clone)]
pub struct BatchNormCache<T = f32> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub stats: BatchStats<T>,
}

/// Training-mode normalization using the batch's own mean and variance.
pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    p: &BatchNormParams<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>), ShapeError> {
    p.check_input(input)?;
    let s = input.shape();
    let plane = s.plane();
    let count = s.n * plane;
    let inv_count = T::one() / T::from_f64(count as f64);

    let mut mean = vec![T::zero(); s.c];
    for (i, chunk) in input.data().chunks(plane).enumerate() {
        let c = i % s.c;
        mean[c] = mean[c] + chunk.iter().copied().sum::<T>();
    }
    mean.iter_mut().for_each(|m| *m = *m * inv_count);
    let mut var = vec![T::zero(); s.c];
    for (i, chunk) in input.data().chunks(plane).enumerate() {
        let c = i % s.c;
        var[c] = var[c] + chunk.iter().map(|&x| (x - mean[c]) * (x - mean[c])).sum::<T>();
    }
    var.iter_mut().for_each(|v| *v = *v * inv_count);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + p.eps).sqrt()).collect();

    let mut x_hat = input.clone();
    for (i, chunk) in x_hat.data_mut().chunks_mut(plane).enumerate() {
        let c = i % s.c;
        for v in chunk {
            *v = (*v - mean[c]) * inv_std[c];
        }
    }
    let mut out = x_hat.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let c = i % s.c;
        for v in chunk {
            *v = p.gamma[c] * *v + p.beta[c];
        }
    }
    Ok((
        out,
        BatchNormCache {
            x_hat,
            inv_std,
            stats: BatchStats { mean, var, count },
        },
    ))
}

/// Backward pass of [`batch_norm_train`], including the dependence of the
/// batch statistics on the input.
pub fn batch_norm_train_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    p: &BatchNormParams<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>, ShapeError> {
    let s = cache.x_hat.shape();
    if grad_out.shape() != s {
        return Err(ShapeError::mismatch("batch norm output gradient", s, grad_out.shape()));
    }
    let plane = s.plane();
    let m = T::from_f64(cache.stats.count as f64);

    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for (i, (g, xh)) in grad_out.data().chunks(plane).zip(cache.x_hat.data().chunks(plane)).enumerate() {
        let c = i % s.c;
        for (&g, &xh) in g.iter().zip(xh) {
            dgamma[c] = dgamma[c] + g * xh;
            dbeta[c] = dbeta[c] + g;
        }
    }
    // dx = gamma·inv_std/m · (m·g − Σg − x̂·Σ(g·x̂))
    let mut dx = grad_out.clone();
    for (i, (g, xh)) in dx.data_mut().chunks_mut(plane).zip(cache.x_hat.data().chunks(plane)).enumerate() {
        let c = i % s.c;
        let k = p.gamma[c] * cache.inv_std[c] / m;
        for (g, &xh) in g.iter_mut().zip(xh) {
            *g = k * (m * *g - dbeta[c] - xh * dgamma[c]);
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}
