//! Parameter containers and initialization.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Scalar;

/// One 3x3 convolution: kernel `(c_out, c_in, 3, 3)` plus a per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<A> {
    pub kernel: Array4<A>,
    pub bias: Array1<A>,
}

impl<A: Scalar> ConvParams<A> {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Self {
            kernel: Array4::zeros((c_out, c_in, 3, 3)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape()[1]
    }

    /// Delta kernel: channel i maps to channel i through the center tap, bias 0.
    /// Composed with ReLU on non-negative input this is an exact identity.
    pub fn identity(width: usize) -> Self {
        let mut p = Self::zeros(width, width);
        for c in 0..width {
            p.kernel[[c, c, 1, 1]] = A::one();
        }
        p
    }
}

/// Affine head over flattened pooled features: `weight` is `(classes, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<A> {
    pub weight: Array2<A>,
    pub bias: Array1<A>,
}

impl<A: Scalar> LinearParams<A> {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weight: Array2::zeros((classes, dim)),
            bias: Array1::zeros(classes),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Per-channel batch normalization state. `scale`/`shift` are trained;
/// the running statistics are updated in training mode and used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<A> {
    pub scale: Array1<A>,
    pub shift: Array1<A>,
    pub running_mean: Array1<A>,
    pub running_var: Array1<A>,
    pub eps: A,
    pub momentum: A,
}

impl<A: Scalar> BatchNormParams<A> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Array1::ones(channels),
            shift: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: A::from_f64(1e-5),
            momentum: A::from_f64(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Parameters of one trained block: the 3x3 convolution and its optional
/// batch normalization. The downsampling operator in front carries no
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<A> {
    pub conv: ConvParams<A>,
    pub bn: Option<BatchNormParams<A>>,
}

/// Parameters of one auxiliary classifier: `k-1` convolutions (each with
/// optional batch norm) and the linear head over quadrant-averaged features.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxParams<A> {
    pub convs: Vec<ConvParams<A>>,
    pub bns: Vec<Option<BatchNormParams<A>>>,
    pub head: LinearParams<A>,
}

impl<A: Scalar> AuxParams<A> {
    /// Total parameter scalar count (used in summaries).
    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.kernel.len() + c.bias.len()).sum::<usize>()
            + self
                .bns
                .iter()
                .flatten()
                .map(|b| b.scale.len() + b.shift.len())
                .sum::<usize>()
            + self.head.weight.len()
            + self.head.bias.len()
    }
}

/// Fan-in-scaled Gaussian kernel init (variance 2/fan_in), zero bias.
pub fn init_conv<A: Scalar, R: Rng>(rng: &mut R, c_out: usize, c_in: usize) -> ConvParams<A> {
    let std = (2.0 / (c_in * 9) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let kernel = Array4::from_shape_simple_fn((c_out, c_in, 3, 3), || {
        A::from_f64(normal.sample(rng))
    });
    ConvParams {
        kernel,
        bias: Array1::zeros(c_out),
    }
}

/// Gaussian head init with variance 1/dim, zero bias.
pub fn init_linear<A: Scalar, R: Rng>(rng: &mut R, classes: usize, dim: usize) -> LinearParams<A> {
    let std = (1.0 / dim as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let weight = Array2::from_shape_simple_fn((classes, dim), || A::from_f64(normal.sample(rng)));
    LinearParams {
        weight,
        bias: Array1::zeros(classes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_has_center_taps_only() {
        let p = ConvParams::<f64>::identity(3);
        let mut nonzero = 0;
        for ((co, ci, ky, kx), &v) in p.kernel.indexed_iter() {
            if v != 0.0 {
                nonzero += 1;
                assert_eq!(co, ci);
                assert_eq!((ky, kx), (1, 1));
                assert_eq!(v, 1.0);
            }
        }
        assert_eq!(nonzero, 3);
        assert!(p.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn conv_init_matches_fan_in_variance() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let p: ConvParams<f64> = init_conv(&mut rng, 64, 32);
        let n = p.kernel.len() as f64;
        let mean = p.kernel.iter().sum::<f64>() / n;
        let var = p.kernel.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = 2.0 / (32.0 * 9.0);
        assert!((var - expected).abs() < expected * 0.1, "var {var} vs {expected}");
        assert!(p.bias.iter().all(|&b| b == 0.0));
    }
}
