//! Graph execution: inference forward, training forward with caches, and
//! reverse-mode gradients through every layer.

use super::layer::LayerKind;
use super::{LayerParams, NetError, NetGraph};
use crate::nn::{self, BatchNormCache};
use crate::tensor::{Scalar, Shape, Tensor};

/// Raw predictions of one head: per cell and anchor, `t_x, t_y, t_w, t_h`,
/// an objectness logit and one logit per class.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<T = f32> {
    /// 0 is the coarsest grid.
    pub scale_index: usize,
    /// Shape `(n, A·(5+C), S_h, S_w)`.
    pub raw: Tensor<T>,
}

impl<T: Scalar> HeadOutput<T> {
    /// Grid size `(S_h, S_w)`.
    pub fn grid(&self) -> (usize, usize) {
        let s = self.raw.shape();
        (s.h, s.w)
    }
}

/// Per-layer state retained by [`NetGraph::forward_train`].
#[derive(Debug, Clone)]
pub enum LayerCache<T = f32> {
    Conv {
        bn: Option<BatchNormCache<T>>,
        /// Activation input.
        pre_act: Tensor<T>,
    },
    Max {
        argmax: Vec<usize>,
    },
    Pass,
}

/// Everything the backward pass needs from one training forward.
#[derive(Debug, Clone)]
pub struct TrainPass<T = f32> {
    pub input: Tensor<T>,
    pub outputs: Vec<Tensor<T>>,
    pub caches: Vec<LayerCache<T>>,
}

impl<T: Scalar> TrainPass<T> {
    /// Head outputs sorted by scale index.
    pub fn heads(&self, g: &NetGraph<T>) -> Vec<HeadOutput<T>> {
        let mut heads: Vec<_> = g
            .heads()
            .into_iter()
            .map(|(l, scale_index)| HeadOutput {
                scale_index,
                raw: self.outputs[l].clone(),
            })
            .collect();
        heads.sort_by_key(|h| h.scale_index);
        heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub gamma: Option<Vec<T>>,
    pub beta: Option<Vec<T>>,
}

/// Parameter gradients, aligned with the graph's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub layers: Vec<Option<LayerGrads<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|g| {
            g.weights.data().iter().all(|v| v.is_finite())
                && g.bias.iter().all(|v| v.is_finite())
                && g.gamma.iter().flatten().all(|v| v.is_finite())
                && g.beta.iter().flatten().all(|v| v.is_finite())
        })
    }

    /// Largest absolute gradient entry.
    pub fn max_abs(&self) -> T {
        let mut m = T::zero();
        for g in self.layers.iter().flatten() {
            let all = g
                .weights
                .data()
                .iter()
                .chain(&g.bias)
                .chain(g.gamma.iter().flatten())
                .chain(g.beta.iter().flatten());
            for v in all {
                m = m.max(v.abs());
            }
        }
        m
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> NetGraph<T> {
    fn check_input(&self, input: &Tensor<T>) -> Result<&[Option<LayerParams<T>>], NetError> {
        let params = self.params().ok_or(NetError::Unweighted)?;
        let want = self.input_shape().with_batch(input.shape().n);
        if input.shape() != want {
            return Err(NetError::Input {
                expected: want,
                got: input.shape(),
            });
        }
        Ok(params)
    }

    fn conv_params<'a>(&self, params: &'a [Option<LayerParams<T>>], i: usize) -> &'a LayerParams<T> {
        params[i].as_ref().expect("conv layer has parameters")
    }

    /// Inference forward. Returns the head outputs sorted by scale index
    /// (coarsest grid first).
    pub fn forward(&self, input: &Tensor<T>) -> Result<Vec<HeadOutput<T>>, NetError> {
        let outputs = self.run_inference(input, false)?;
        let mut heads: Vec<HeadOutput<T>> = self
            .heads()
            .into_iter()
            .map(|(l, scale_index)| HeadOutput {
                scale_index,
                raw: outputs[l].clone().expect("head outputs are retained"),
            })
            .collect();
        heads.sort_by_key(|h| h.scale_index);
        Ok(heads)
    }

    /// Inference forward returning every layer's output.
    pub fn forward_all(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>, NetError> {
        Ok(self
            .run_inference(input, true)?
            .into_iter()
            .map(|t| t.expect("all outputs retained"))
            .collect())
    }

    fn run_inference(&self, input: &Tensor<T>, keep_all: bool) -> Result<Vec<Option<Tensor<T>>>, NetError> {
        let params = self.check_input(input)?;
        let n = self.layers.len();
        // Last layer reading each output; heads are always kept.
        let mut last_use: Vec<usize> = (0..n).collect();
        for l in &self.layers {
            for s in l.sources().into_iter().flatten() {
                last_use[s] = last_use[s].max(l.index);
            }
            if matches!(l.kind, LayerKind::Head { .. }) {
                last_use[l.index] = usize::MAX;
            }
        }
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; n];
        for (i, spec) in self.layers.iter().enumerate() {
            let src = |s: Option<usize>| -> &Tensor<T> {
                match s {
                    None => input,
                    Some(j) => outputs[j].as_ref().expect("source output retained"),
                }
            };
            let shape_err = |e| NetError::shape(spec, e);
            let out = match &spec.kind {
                LayerKind::Conv {
                    batch_norm: _,
                    activation,
                    ..
                } => {
                    let p = self.conv_params(params, i);
                    let mut z = nn::conv2d(src(spec.sources()[0]), &p.conv).map_err(shape_err)?;
                    if let Some(bn) = &p.bn {
                        z = nn::batch_norm(&z, bn).map_err(shape_err)?;
                    }
                    nn::activate(&z, *activation)
                }
                LayerKind::Max { kernel, stride } => {
                    nn::max_pool(src(spec.sources()[0]), *kernel, *stride).map_err(shape_err)?
                }
                LayerKind::Route { refs, split } => {
                    let ins: Vec<&Tensor<T>> = refs.iter().map(|&r| src(Some(r))).collect();
                    nn::route(&ins, *split).map_err(shape_err)?
                }
                LayerKind::Upsample => nn::upsample2x(src(spec.sources()[0])),
                LayerKind::Head { .. } => src(spec.sources()[0]).clone(),
            };
            outputs[i] = Some(out);
            if !keep_all {
                for s in spec.sources().into_iter().flatten() {
                    if last_use[s] == i {
                        outputs[s] = None;
                    }
                }
            }
        }
        Ok(outputs)
    }

    /// Training forward: batch norm uses batch statistics, and all
    /// intermediate state is retained for [`NetGraph::backward`].
    pub fn forward_train(&self, input: &Tensor<T>) -> Result<TrainPass<T>, NetError> {
        let params = self.check_input(input)?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let src = |s: Option<usize>| -> &Tensor<T> {
                match s {
                    None => input,
                    Some(j) => &outputs[j],
                }
            };
            let shape_err = |e| NetError::shape(spec, e);
            let (out, cache) = match &spec.kind {
                LayerKind::Conv { activation, .. } => {
                    let p = self.conv_params(params, i);
                    let z = nn::conv2d(src(spec.sources()[0]), &p.conv).map_err(shape_err)?;
                    let (pre_act, bn) = match &p.bn {
                        Some(bnp) => {
                            let (y, c) = nn::batch_norm_train(&z, bnp).map_err(shape_err)?;
                            (y, Some(c))
                        }
                        None => (z, None),
                    };
                    let out = nn::activate(&pre_act, *activation);
                    (out, LayerCache::Conv { bn, pre_act })
                }
                LayerKind::Max { kernel, stride } => {
                    let (out, argmax) =
                        nn::max_pool_with_argmax(src(spec.sources()[0]), *kernel, *stride).map_err(shape_err)?;
                    (out, LayerCache::Max { argmax })
                }
                LayerKind::Route { refs, split } => {
                    let ins: Vec<&Tensor<T>> = refs.iter().map(|&r| src(Some(r))).collect();
                    (nn::route(&ins, *split).map_err(shape_err)?, LayerCache::Pass)
                }
                LayerKind::Upsample => (nn::upsample2x(src(spec.sources()[0])), LayerCache::Pass),
                LayerKind::Head { .. } => (src(spec.sources()[0]).clone(), LayerCache::Pass),
            };
            outputs.push(out);
            caches.push(cache);
        }
        Ok(TrainPass {
            input: input.clone(),
            outputs,
            caches,
        })
    }

    /// Reverse pass. `head_grads` are the loss gradients at each head's raw
    /// output, sorted by scale index like [`TrainPass::heads`].
    pub fn backward(&self, pass: &TrainPass<T>, head_grads: &[Tensor<T>]) -> Result<Gradients<T>, NetError> {
        let params = self.params().ok_or(NetError::Unweighted)?;
        let mut heads = self.heads();
        heads.sort_by_key(|&(_, s)| s);
        if heads.len() != head_grads.len() {
            return Err(NetError::Heads(format!(
                "expected {} head gradients, got {}",
                heads.len(),
                head_grads.len()
            )));
        }
        let n = self.layers.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        for (&(l, _), g) in heads.iter().zip(head_grads) {
            if g.shape() != pass.outputs[l].shape() {
                return Err(NetError::Input {
                    expected: pass.outputs[l].shape(),
                    got: g.shape(),
                });
            }
            accumulate(&mut grads[l], g.clone());
        }

        let mut param_grads: Vec<Option<LayerGrads<T>>> = vec![None; n];
        for i in (0..n).rev() {
            let spec = &self.layers[i];
            let shape_err = |e| NetError::shape(spec, e);
            let Some(g) = grads[i].take() else {
                if let LayerKind::Conv { .. } = spec.kind {
                    param_grads[i] = Some(zero_grads(self.conv_params(params, i)));
                }
                continue;
            };
            let src_out = |s: Option<usize>| -> &Tensor<T> {
                match s {
                    None => &pass.input,
                    Some(j) => &pass.outputs[j],
                }
            };
            let first = spec.sources()[0];
            let mut push = |s: Option<usize>, t: Tensor<T>| {
                if let Some(j) = s {
                    accumulate(&mut grads[j], t);
                }
            };
            match (&spec.kind, &pass.caches[i]) {
                (LayerKind::Conv { activation, .. }, LayerCache::Conv { bn, pre_act }) => {
                    let p = self.conv_params(params, i);
                    let d_pre = nn::activate_backward(pre_act, *activation, &g);
                    let (dz, gamma, beta) = match (&p.bn, bn) {
                        (Some(bnp), Some(cache)) => {
                            let bg = nn::batch_norm_train_backward(cache, bnp, &d_pre).map_err(shape_err)?;
                            (bg.input, Some(bg.gamma), Some(bg.beta))
                        }
                        _ => (d_pre, None, None),
                    };
                    let cg = nn::conv2d_backward(src_out(first), &p.conv, &dz).map_err(shape_err)?;
                    param_grads[i] = Some(LayerGrads {
                        weights: cg.weights,
                        bias: cg.bias,
                        gamma,
                        beta,
                    });
                    push(first, cg.input);
                }
                (LayerKind::Max { .. }, LayerCache::Max { argmax }) => {
                    push(first, nn::max_pool_backward(src_out(first).shape(), argmax, &g));
                }
                (LayerKind::Route { refs, split }, _) => {
                    let shapes: Vec<Shape> = refs.iter().map(|&r| pass.outputs[r].shape()).collect();
                    for (&r, t) in refs.iter().zip(nn::route_backward(&g, &shapes, *split)) {
                        push(Some(r), t);
                    }
                }
                (LayerKind::Upsample, _) => push(first, nn::upsample2x_backward(&g)),
                (LayerKind::Head { .. }, _) => push(first, g),
                _ => unreachable!("cache kind matches layer kind"),
            }
        }
        Ok(Gradients { layers: param_grads })
    }

    /// `θ ← θ − η·∇θ` for every convolution and batch-norm affine parameter.
    pub fn apply_sgd(&mut self, grads: &Gradients<T>, eta: T) -> Result<(), NetError> {
        let params = self.params_mut().ok_or(NetError::Unweighted)?;
        for (p, g) in params.iter_mut().zip(&grads.layers) {
            let (Some(p), Some(g)) = (p.as_mut(), g.as_ref()) else {
                continue;
            };
            for (w, &d) in p.conv.weights.data_mut().iter_mut().zip(g.weights.data()) {
                *w = *w - eta * d;
            }
            for (b, &d) in p.conv.bias.iter_mut().zip(&g.bias) {
                *b = *b - eta * d;
            }
            if let (Some(bn), Some(dg), Some(db)) = (p.bn.as_mut(), &g.gamma, &g.beta) {
                for (v, &d) in bn.gamma.iter_mut().zip(dg) {
                    *v = *v - eta * d;
                }
                for (v, &d) in bn.beta.iter_mut().zip(db) {
                    *v = *v - eta * d;
                }
            }
        }
        Ok(())
    }

    /// Folds the batch statistics of a training pass into the running
    /// averages used at inference.
    pub fn update_running_stats(&mut self, pass: &TrainPass<T>, momentum: T) -> Result<(), NetError> {
        let params = self.params_mut().ok_or(NetError::Unweighted)?;
        for (p, cache) in params.iter_mut().zip(&pass.caches) {
            if let (Some(LayerParams { bn: Some(bn), .. }), LayerCache::Conv { bn: Some(c), .. }) = (p.as_mut(), cache) {
                bn.update_running(&c.stats, momentum);
            }
        }
        Ok(())
    }
}

fn zero_grads<T: Scalar>(p: &LayerParams<T>) -> LayerGrads<T> {
    LayerGrads {
        weights: Tensor::zeros(p.conv.weights.shape()),
        bias: vec![T::zero(); p.conv.bias.len()],
        gamma: p.bn.as_ref().map(|b| vec![T::zero(); b.channels()]),
        beta: p.bn.as_ref().map(|b| vec![T::zero(); b.channels()]),
    }
}
