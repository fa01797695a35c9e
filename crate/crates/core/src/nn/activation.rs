use std::fmt;
use std::str::FromStr;

use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.1;

/// Elementwise nonlinearity applied after a convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// No activation (head output convolutions).
    Linear,
    /// `x` for `x ≥ 0`, `alpha·x` otherwise.
    LeakyRelu(f64),
    Relu,
    /// `x·tanh(ln(1 + eˣ))`
    Mish,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Linear => f.write_str("linear"),
            Activation::LeakyRelu(a) if *a == DEFAULT_LEAKY_SLOPE => f.write_str("leaky"),
            Activation::LeakyRelu(a) => write!(f, "leaky={a}"),
            Activation::Relu => f.write_str("relu"),
            Activation::Mish => f.write_str("mish"),
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Activation::Linear),
            "leaky" => Ok(Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE)),
            "relu" => Ok(Activation::Relu),
            "mish" => Ok(Activation::Mish),
            _ => {
                let alpha = s
                    .strip_prefix("leaky=")
                    .and_then(|a| a.parse::<f64>().ok())
                    .ok_or_else(|| format!("unknown activation `{s}`"))?;
                if alpha > 0.0 && alpha < 1.0 {
                    Ok(Activation::LeakyRelu(alpha))
                } else {
                    Err(format!("leaky slope must be in (0, 1), got {alpha}"))
                }
            }
        }
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Linear => x,
            Activation::LeakyRelu(a) => {
                if x >= T::zero() {
                    x
                } else {
                    T::from_f64(a) * x
                }
            }
            Activation::Relu => x.max(T::zero()),
            Activation::Mish => {
                let xf = x.as_f64();
                T::from_f64(xf * softplus(xf).tanh())
            }
        }
    }

    /// Derivative at `x` (one-sided from the right at the kinks).
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Linear => T::one(),
            Activation::LeakyRelu(a) => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::from_f64(a)
                }
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Mish => {
                let xf = x.as_f64();
                let t = softplus(xf).tanh();
                T::from_f64(t + xf * (1.0 - t * t) * sigmoid(xf))
            }
        }
    }
}

pub fn activate<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    if kind == Activation::Linear {
        return input.clone();
    }
    input.map(|x| kind.apply(x))
}

/// Gradient at the input given the gradient at the output.
pub fn activate_backward<T: Scalar>(input: &Tensor<T>, kind: Activation, grad_out: &Tensor<T>) -> Tensor<T> {
    assert_eq!(input.shape(), grad_out.shape(), "activation gradient shape");
    if kind == Activation::Linear {
        return grad_out.clone();
    }
    let mut g = grad_out.clone();
    for (g, &x) in g.data_mut().iter_mut().zip(input.data()) {
        *g = *g * kind.derivative(x);
    }
    g
}
