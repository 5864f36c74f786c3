//! Row-wise layers: affine map, ReLU, residual add, and feature normalization.

use super::param::{ParamTensor, ParamView, Parameters};
use super::tensor::{Real, SparseTensor};
use crate::error::{Error, Result};

/// Per-row affine map using a `kernel_volume == 1` parameter tensor.
pub fn pointwise_linear<T: Real>(t: &SparseTensor<T>, p: &ParamTensor<T>) -> Result<SparseTensor<T>> {
    if p.kernel_volume != 1 || t.channels() != p.c_in {
        return Err(Error::ShapeMismatch(format!(
            "{}: linear expects {} input channels and a 1-offset kernel",
            p.name, p.c_in
        )));
    }
    let c_out = p.c_out;
    let mut out = Vec::with_capacity(t.len() * c_out);
    for r in 0..t.len() {
        let start = out.len();
        out.extend_from_slice(&p.bias);
        let acc = &mut out[start..];
        for (ci, &xv) in t.row(r).iter().enumerate() {
            let wr = &p.weight[ci * c_out..(ci + 1) * c_out];
            for (a, &w) in acc.iter_mut().zip(wr) {
                *a += xv * w;
            }
        }
    }
    Ok(t.with_features_unchecked(out, c_out))
}

pub fn pointwise_linear_backward<T: Real>(
    t: &SparseTensor<T>,
    p: &mut ParamTensor<T>,
    grad_out: &[T],
) -> Result<Vec<T>> {
    let (c_in, c_out) = (p.c_in, p.c_out);
    if grad_out.len() != t.len() * c_out || t.channels() != c_in {
        return Err(Error::ShapeMismatch(format!("{}: linear backward", p.name)));
    }
    let mut gx = vec![T::zero(); t.len() * c_in];
    for r in 0..t.len() {
        let x = t.row(r);
        let g = &grad_out[r * c_out..(r + 1) * c_out];
        for ci in 0..c_in {
            let wr = &p.weight[ci * c_out..(ci + 1) * c_out];
            let mut s = T::zero();
            for (&w, &gv) in wr.iter().zip(g) {
                s += w * gv;
            }
            gx[r * c_in + ci] = s;
            let dw = &mut p.weight_grad[ci * c_out..(ci + 1) * c_out];
            for (d, &gv) in dw.iter_mut().zip(g) {
                *d += x[ci] * gv;
            }
        }
        for (b, &gv) in p.bias_grad.iter_mut().zip(g) {
            *b += gv;
        }
    }
    Ok(gx)
}

pub fn relu<T: Real>(t: &SparseTensor<T>) -> SparseTensor<T> {
    let out = t.features().iter().map(|&v| v.max(T::zero())).collect();
    t.with_features_unchecked(out, t.channels())
}

/// Gradient of ReLU given the layer's input features.
pub fn relu_backward<T: Real>(input: &[T], grad_out: &[T]) -> Vec<T> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect()
}

/// Elementwise sum of two tensors over the same coordinate set.
pub fn sparse_add<T: Real>(a: &SparseTensor<T>, b: &SparseTensor<T>) -> Result<SparseTensor<T>> {
    if !a.same_coords(b) {
        return Err(Error::CoordMismatch(format!(
            "sparse_add over {} and {} rows with different sites",
            a.len(),
            b.len()
        )));
    }
    if a.channels() != b.channels() {
        return Err(Error::ShapeMismatch(format!(
            "sparse_add channels {} vs {}",
            a.channels(),
            b.channels()
        )));
    }
    let out = a
        .features()
        .iter()
        .zip(b.features())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(a.with_features_unchecked(out, a.channels()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel standardization over active rows with learned scale/shift.
/// Training mode normalizes with batch statistics and updates running
/// statistics; eval mode uses the running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm<T> {
    pub name: String,
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub gamma_grad: Vec<T>,
    pub beta_grad: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

impl<T: Real> FeatureNorm<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        FeatureNorm {
            name: name.into(),
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            gamma_grad: vec![T::zero(); channels],
            beta_grad: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-7),
        }
    }

    pub fn forward(&mut self, t: &SparseTensor<T>, mode: Mode) -> Result<(SparseTensor<T>, NormCache<T>)> {
        let c = self.channels;
        if t.channels() != c {
            return Err(Error::ShapeMismatch(format!(
                "{}: norm over {} channels got {}",
                self.name,
                c,
                t.channels()
            )));
        }
        let n = t.len();
        let (mean, var) = if mode == Mode::Train && n > 0 {
            let (mean, var) = channel_stats(t.features(), c);
            for k in 0..c {
                let m = self.momentum;
                self.running_mean[k] = (T::one() - m) * self.running_mean[k] + m * mean[k];
                self.running_var[k] = (T::one() - m) * self.running_var[k] + m * var[k];
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        let mut normalized = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(n * c);
        for row in t.features().chunks(c.max(1)) {
            for k in 0..c {
                let xh = (row[k] - mean[k]) * inv_std[k];
                normalized.push(xh);
                out.push(self.gamma[k] * xh + self.beta[k]);
            }
        }
        Ok((
            t.with_features_unchecked(out, c),
            NormCache {
                normalized,
                inv_std,
                mode,
            },
        ))
    }

    pub fn backward(&mut self, cache: &NormCache<T>, grad_out: &[T]) -> Vec<T> {
        let c = self.channels;
        let n = grad_out.len() / c.max(1);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (g, xh) in grad_out.chunks(c.max(1)).zip(cache.normalized.chunks(c.max(1))) {
            for k in 0..c {
                sum_g[k] += g[k];
                sum_gx[k] += g[k] * xh[k];
            }
        }
        for k in 0..c {
            self.beta_grad[k] += sum_g[k];
            self.gamma_grad[k] += sum_gx[k];
        }
        let mut gx = vec![T::zero(); grad_out.len()];
        if n == 0 {
            return gx;
        }
        let nf = T::from_usize(n).expect("row count");
        for r in 0..n {
            for k in 0..c {
                let i = r * c + k;
                let scale = self.gamma[k] * cache.inv_std[k];
                gx[i] = match cache.mode {
                    Mode::Train => {
                        scale
                            * (grad_out[i]
                                - sum_g[k] / nf
                                - cache.normalized[i] * sum_gx[k] / nf)
                    }
                    Mode::Eval => scale * grad_out[i],
                };
            }
        }
        gx
    }
}

/// Biased per-channel mean and variance of a row-major matrix.
pub fn channel_stats<T: Real>(features: &[T], channels: usize) -> (Vec<T>, Vec<T>) {
    let n = features.len() / channels.max(1);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    if n == 0 {
        return (mean, var);
    }
    let nf = T::from_usize(n).expect("row count");
    for row in features.chunks(channels) {
        for k in 0..channels {
            mean[k] += row[k];
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / nf);
    for row in features.chunks(channels) {
        for k in 0..channels {
            let d = row[k] - mean[k];
            var[k] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = *v / nf);
    (mean, var)
}

impl<T: Real> Parameters<T> for FeatureNorm<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        let c = self.channels;
        f(ParamView {
            name: format!("{}.gamma", self.name),
            shape: vec![c],
            value: &mut self.gamma,
            grad: Some(&mut self.gamma_grad),
        });
        f(ParamView {
            name: format!("{}.beta", self.name),
            shape: vec![c],
            value: &mut self.beta,
            grad: Some(&mut self.beta_grad),
        });
        f(ParamView {
            name: format!("{}.running_mean", self.name),
            shape: vec![c],
            value: &mut self.running_mean,
            grad: None,
        });
        f(ParamView {
            name: format!("{}.running_var", self.name),
            shape: vec![c],
            value: &mut self.running_var,
            grad: None,
        });
    }
}
