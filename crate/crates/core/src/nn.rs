//! Trainable building blocks with explicit forward caches and backward passes.

use rand::Rng;

use crate::error::Result;
use crate::sparse::{
    conv_backward, conv_forward, flops_of, inverse_conv_backward, inverse_conv_forward,
    relu_backward, ConvSpec, FeatureNorm, FlopsReport, Mode, NormCache, ParamTensor, ParamView,
    Parameters, Rulebook, SparseTensor,
};

pub type Tensor = SparseTensor<f64>;

/// Per-pass state: train/eval mode and the FLOPs log.
#[derive(Debug)]
pub struct Ctx {
    pub mode: Mode,
    pub flops: FlopsReport,
}

impl Ctx {
    pub fn new(mode: Mode) -> Self {
        Ctx {
            mode,
            flops: FlopsReport::new(),
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Rulebook-driven sparse convolution (submanifold or regular).
    Sparse,
    /// Transposed pass over a paired down-sampling rulebook.
    Inverse,
}

/// Sparse convolution, optional feature norm, optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub kind: ConvKind,
    pub spec: ConvSpec,
    pub conv: ParamTensor<f64>,
    pub norm: Option<FeatureNorm<f64>>,
    pub relu: bool,
}

#[derive(Clone, Debug)]
pub struct ConvUnitCache {
    input: Tensor,
    norm: Option<NormCache<f64>>,
    pre_relu: Vec<f64>,
}

impl ConvUnit {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        kind: ConvKind,
        spec: ConvSpec,
        c_in: usize,
        c_out: usize,
        norm: bool,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        ConvUnit {
            kind,
            spec,
            conv: ParamTensor::kaiming(format!("{name}.conv"), spec.volume(), c_in, c_out, rng),
            norm: norm.then(|| FeatureNorm::new(format!("{name}.norm"), c_out)),
            relu,
        }
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out
    }

    pub fn forward(&mut self, x: &Tensor, rb: &Rulebook, ctx: &mut Ctx) -> Result<(Tensor, ConvUnitCache)> {
        let y = match self.kind {
            ConvKind::Sparse => {
                ctx.flops.record(
                    self.conv.name.clone(),
                    flops_of(rb, self.conv.c_in, self.conv.c_out),
                    rb.n_out(),
                );
                conv_forward(x, rb, &self.conv)?
            }
            ConvKind::Inverse => {
                ctx.flops.record(
                    self.conv.name.clone(),
                    crate::sparse::conv_flops(rb.num_pairs(), rb.n_in(), self.conv.c_in, self.conv.c_out),
                    rb.n_in(),
                );
                inverse_conv_forward(x, rb, &self.conv)?
            }
        };
        let (y, norm_cache) = match &mut self.norm {
            Some(n) => {
                let (y, c) = n.forward(&y, ctx.mode)?;
                (y, Some(c))
            }
            None => (y, None),
        };
        let pre_relu = if self.relu {
            y.features().to_vec()
        } else {
            Vec::new()
        };
        let y = if self.relu { crate::sparse::relu(&y) } else { y };
        Ok((
            y,
            ConvUnitCache {
                input: x.clone(),
                norm: norm_cache,
                pre_relu,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ConvUnitCache, rb: &Rulebook, grad: &[f64]) -> Result<Vec<f64>> {
        let mut g = if self.relu {
            relu_backward(&cache.pre_relu, grad)
        } else {
            grad.to_vec()
        };
        if let (Some(n), Some(c)) = (&mut self.norm, &cache.norm) {
            g = n.backward(c, &g);
        }
        match self.kind {
            ConvKind::Sparse => conv_backward(&cache.input, rb, &mut self.conv, &g),
            ConvKind::Inverse => inverse_conv_backward(&cache.input, rb, &mut self.conv, &g),
        }
    }
}

impl Parameters<f64> for ConvUnit {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, f64>)) {
        self.conv.visit_params(f);
        if let Some(n) = &mut self.norm {
            n.visit_params(f);
        }
    }
}

/// Adds `src` into `dst` elementwise.
pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}
