use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Real;

/// Convolution (or pointwise) weights, offset-major `[offset][c_in][c_out]`,
/// with bias and gradient accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub kernel_volume: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub weight_grad: Vec<T>,
    pub bias_grad: Vec<T>,
}

impl<T: Real> ParamTensor<T> {
    pub fn zeros(name: impl Into<String>, kernel_volume: usize, c_in: usize, c_out: usize) -> Self {
        let n = kernel_volume * c_in * c_out;
        ParamTensor {
            name: name.into(),
            kernel_volume,
            c_in,
            c_out,
            weight: vec![T::zero(); n],
            bias: vec![T::zero(); c_out],
            weight_grad: vec![T::zero(); n],
            bias_grad: vec![T::zero(); c_out],
        }
    }

    /// He-normal weights scaled by fan-in, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(
        name: impl Into<String>,
        kernel_volume: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(name, kernel_volume, c_in, c_out);
        let fan_in = (kernel_volume * c_in).max(1) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        for w in &mut p.weight {
            *w = T::lit(normal.sample(rng));
        }
        p
    }

    /// Weight block of one kernel offset, `c_in x c_out` row-major.
    #[inline]
    pub fn offset_weight(&self, o: usize) -> &[T] {
        let s = self.c_in * self.c_out;
        &self.weight[o * s..(o + 1) * s]
    }

    pub fn zero_grad(&mut self) {
        self.weight_grad.iter_mut().for_each(|g| *g = T::zero());
        self.bias_grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Mutable view of one named tensor, exposed to optimizers and checkpoints.
/// Buffers such as running statistics have no gradient.
pub struct ParamView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [T],
    pub grad: Option<&'a mut [T]>,
}

pub trait Parameters<T> {
    /// Visits every tensor in a fixed order.
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>));

    fn zero_grad(&mut self)
    where
        T: Real,
    {
        self.visit_params(&mut |v| {
            if let Some(g) = v.grad {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
        });
    }
}

impl<T: Real> Parameters<T> for ParamTensor<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        f(ParamView {
            name: format!("{}.weight", self.name),
            shape: vec![self.kernel_volume, self.c_in, self.c_out],
            value: &mut self.weight,
            grad: Some(&mut self.weight_grad),
        });
        f(ParamView {
            name: format!("{}.bias", self.name),
            shape: vec![self.c_out],
            value: &mut self.bias,
            grad: Some(&mut self.bias_grad),
        });
    }
}
