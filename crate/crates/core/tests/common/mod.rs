//! Dense reference implementations and finite-difference helpers shared by
//! the integration tests.

#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use sparsedet::sparse::{
    conv_forward, densify, inverse_conv_forward, regular_rulebook, submanifold_rulebook, ConvSpec, Coord,
    Dense, Grid, ParamTensor, Parameters, SparseTensor,
};

pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvType {
    Submanifold,
    Regular,
    Inverse,
}

/// One randomized convolution problem.
#[derive(Clone, Debug)]
pub struct ConvInstance {
    pub input: SparseTensor<f64>,
    pub spec: ConvSpec,
    pub param: ParamTensor<f64>,
}

pub fn random_grid<R: Rng>(rng: &mut R, ndim: usize, max_side: usize) -> Grid {
    let side = |rng: &mut R| rng.gen_range(1..=max_side);
    if ndim == 2 {
        Grid::new2(side(rng), side(rng)).unwrap()
    } else {
        Grid::new3(side(rng), side(rng), side(rng)).unwrap()
    }
}

/// Random distinct sites of `grid` over `batches` batches, with features.
pub fn random_sparse<R: Rng>(rng: &mut R, grid: Grid, batches: usize, channels: usize, density: f64) -> SparseTensor<f64> {
    let [dx, dy, dz] = grid.dims();
    let mut coords = Vec::new();
    for b in 0..batches {
        for z in 0..dz {
            for y in 0..dy {
                for x in 0..dx {
                    if rng.gen_bool(density) {
                        coords.push(Coord::new3(b as i32, x as i32, y as i32, z as i32));
                    }
                }
            }
        }
    }
    let features = (0..coords.len() * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    SparseTensor::new(grid, coords, features, channels).unwrap()
}

pub fn random_param<R: Rng>(rng: &mut R, volume: usize, c_in: usize, c_out: usize, with_bias: bool) -> ParamTensor<f64> {
    let mut p = ParamTensor::zeros("oracle", volume, c_in, c_out);
    p.weight.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
    if with_bias {
        p.bias.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
    }
    p
}

/// Grids up to 16 per axis, up to 8 channels, zero bias. Regular and
/// inverse instances share the same down-sampling spec family.
pub fn random_instance(seed: u64, kind: ConvType) -> ConvInstance {
    let mut r = rng(seed);
    let ndim = if r.gen_bool(0.5) { 2 } else { 3 };
    let max_side = if ndim == 2 { 16 } else { 10 };
    let grid = random_grid(&mut r, ndim, max_side);
    let batches = r.gen_range(1..=2);
    let c_in = r.gen_range(1..=8);
    let c_out = r.gen_range(1..=8);
    let density = r.gen_range(0.05..0.4);
    let spec = match kind {
        ConvType::Submanifold => ConvSpec::submanifold(ndim, [1, 3, 5][r.gen_range(0..3)]),
        ConvType::Regular | ConvType::Inverse => loop {
            let k = [1, 3, 5][r.gen_range(0..3)];
            let s = r.gen_range(1..=3);
            let p = r.gen_range(0..k);
            let spec = ConvSpec::regular(ndim, k, s, p);
            if spec.output_grid(grid).is_ok() {
                break spec;
            }
        },
    };
    let input = random_sparse(&mut r, grid, batches, c_in, density);
    let param = random_param(&mut r, spec.volume(), c_in, c_out, false);
    ConvInstance { input, spec, param }
}

fn spatial(grid: Grid) -> impl Iterator<Item = [usize; 3]> {
    let [dx, dy, dz] = grid.dims();
    (0..dz).flat_map(move |z| (0..dy).flat_map(move |y| (0..dx).map(move |x| [x, y, z])))
}

/// Input index reached by tap `k` from output index `y`, if inside `grid`.
fn tap_source(spec: &ConvSpec, y: [usize; 3], o: usize, grid: Grid) -> Option<[usize; 3]> {
    let k = spec.tap(o);
    let dims = grid.dims();
    let mut x = [0usize; 3];
    for a in 0..3 {
        let v = (y[a] * spec.stride[a] + k[a]) as i64 - spec.padding[a] as i64;
        if v < 0 || v >= dims[a] as i64 {
            return None;
        }
        x[a] = v as usize;
    }
    Some(x)
}

/// Plain dense convolution of a zero-filled array, evaluated everywhere.
pub fn dense_conv(x: &Dense<f64>, p: &ParamTensor<f64>, spec: &ConvSpec, out_grid: Grid) -> Dense<f64> {
    let mut out = Dense::zeros(x.batches, out_grid, p.c_out);
    for b in 0..x.batches {
        for y in spatial(out_grid) {
            let mut acc = p.bias.clone();
            for o in 0..spec.volume() {
                if let Some(src) = tap_source(spec, y, o, x.grid) {
                    let w = p.offset_weight(o);
                    for (ci, &v) in x.at(b, src).iter().enumerate() {
                        for co in 0..p.c_out {
                            acc[co] += v * w[ci * p.c_out + co];
                        }
                    }
                }
            }
            out.at_mut(b, y).copy_from_slice(&acc);
        }
    }
    out
}

/// Dense transposed convolution: scatters every output-grid value back
/// through each tap onto the input grid.
pub fn dense_conv_transposed(y: &Dense<f64>, p: &ParamTensor<f64>, spec: &ConvSpec, in_grid: Grid) -> Dense<f64> {
    let mut out = Dense::zeros(y.batches, in_grid, p.c_out);
    for b in 0..y.batches {
        for x in spatial(in_grid) {
            out.at_mut(b, x).copy_from_slice(&p.bias);
        }
        for yi in spatial(y.grid) {
            for o in 0..spec.volume() {
                if let Some(src) = tap_source(spec, yi, o, in_grid) {
                    let w = p.offset_weight(o);
                    let vals = y.at(b, yi).to_vec();
                    let dst = out.at_mut(b, src);
                    for (ci, &v) in vals.iter().enumerate() {
                        for co in 0..p.c_out {
                            dst[co] += v * w[ci * p.c_out + co];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output sites of a regular conv: those whose receptive field holds an
/// active input, found by scanning the dense occupancy.
pub fn dense_support(t: &SparseTensor<f64>, spec: &ConvSpec, out_grid: Grid) -> Vec<Coord> {
    let d = densify(&SparseTensor::new(t.grid(), t.coords().to_vec(), vec![1.0; t.len()], 1).unwrap());
    let mut out = Vec::new();
    for b in 0..d.batches {
        for y in spatial(out_grid) {
            if (0..spec.volume()).any(|o| tap_source(spec, y, o, t.grid()).is_some_and(|x| d.at(b, x)[0] != 0.0)) {
                out.push(Coord::new3(b as i32, y[0] as i32, y[1] as i32, y[2] as i32));
            }
        }
    }
    out.sort();
    out
}

pub fn close(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()) + 1e-12
}

/// Sparse result against the dense oracle: same sites, values within
/// `rtol` on them, and exactly zero on every other site of both.
pub fn check_against_dense(sparse: &SparseTensor<f64>, expected_sites: &[Coord], oracle: &Dense<f64>, rtol: f64) -> Result<(), String> {
    if sparse.coords() != expected_sites {
        return Err(format!(
            "site sets differ: {} sparse vs {} expected",
            sparse.len(),
            expected_sites.len()
        ));
    }
    let mut got = Dense::zeros(oracle.batches, oracle.grid, oracle.channels);
    for (i, c) in sparse.coords().iter().enumerate() {
        let idx = [c.idx[0] as usize, c.idx[1] as usize, c.idx[2] as usize];
        got.at_mut(c.batch as usize, idx).copy_from_slice(sparse.row(i));
    }
    let active: std::collections::HashSet<Coord> = expected_sites.iter().copied().collect();
    for b in 0..oracle.batches {
        for x in spatial(oracle.grid) {
            let c = Coord::new3(b as i32, x[0] as i32, x[1] as i32, x[2] as i32);
            let (g, o) = (got.at(b, x), oracle.at(b, x));
            if active.contains(&c) {
                if let Some(k) = (0..g.len()).find(|&k| !close(g[k], o[k], rtol)) {
                    return Err(format!("{c:?} channel {k}: sparse {} oracle {}", g[k], o[k]));
                }
            } else if g.iter().chain(o).any(|&v| v != 0.0) {
                return Err(format!("{c:?} is inactive but carries a nonzero value"));
            }
        }
    }
    Ok(())
}

/// Runs one instance of `kind` through the sparse path and the dense oracle.
pub fn check_conv_instance(inst: &ConvInstance, kind: ConvType, rtol: f64) -> Result<(), String> {
    let t = &inst.input;
    let e = |e: sparsedet::Error| e.to_string();
    match kind {
        ConvType::Submanifold => {
            let rb = submanifold_rulebook(t.grid(), t.coords(), &inst.spec).map_err(e)?;
            let y = conv_forward(t, &rb, &inst.param).map_err(e)?;
            let full = dense_conv(&densify(t), &inst.param, &inst.spec, t.grid());
            // the dense result is defined everywhere; the oracle keeps input sites
            let mut masked = Dense::zeros(full.batches, full.grid, full.channels);
            for c in t.coords() {
                let idx = [c.idx[0] as usize, c.idx[1] as usize, c.idx[2] as usize];
                masked.at_mut(c.batch as usize, idx).copy_from_slice(full.at(c.batch as usize, idx));
            }
            check_against_dense(&y, t.coords(), &masked, rtol)
        }
        ConvType::Regular => {
            let out_grid = inst.spec.output_grid(t.grid()).map_err(e)?;
            let rb = regular_rulebook(t.grid(), t.coords(), &inst.spec).map_err(e)?;
            let y = conv_forward(t, &rb, &inst.param).map_err(e)?;
            let sites = dense_support(t, &inst.spec, out_grid);
            let oracle = dense_conv(&densify(t), &inst.param, &inst.spec, out_grid);
            check_against_dense(&y, &sites, &oracle, rtol)
        }
        ConvType::Inverse => {
            // down-sample first, then map the coarse features back
            let rb = regular_rulebook(t.grid(), t.coords(), &inst.spec).map_err(e)?;
            let mut r = rng(t.len() as u64);
            let coarse = SparseTensor::new(
                rb.out_grid(),
                rb.out_coords().to_vec(),
                (0..rb.n_out() * inst.param.c_in).map(|_| r.gen_range(-1.0..1.0)).collect(),
                inst.param.c_in,
            )
            .map_err(e)?;
            let up = inverse_conv_forward(&coarse, &rb, &inst.param).map_err(e)?;
            let batches = t.coords().last().map_or(1, |c| c.batch as usize + 1);
            let mut dense_coarse = Dense::zeros(batches, rb.out_grid(), inst.param.c_in);
            for (i, c) in coarse.coords().iter().enumerate() {
                let idx = [c.idx[0] as usize, c.idx[1] as usize, c.idx[2] as usize];
                dense_coarse.at_mut(c.batch as usize, idx).copy_from_slice(coarse.row(i));
            }
            let full = dense_conv_transposed(&dense_coarse, &inst.param, &inst.spec, t.grid());
            let mut masked = Dense::zeros(full.batches, full.grid, full.channels);
            for c in t.coords() {
                let idx = [c.idx[0] as usize, c.idx[1] as usize, c.idx[2] as usize];
                masked.at_mut(c.batch as usize, idx).copy_from_slice(full.at(c.batch as usize, idx));
            }
            check_against_dense(&up, t.coords(), &masked, rtol)
        }
    }
}

/// Flattened copy of every trainable value (tensors with gradients).
pub fn param_values<P: Parameters<f64> + ?Sized>(m: &mut P) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit_params(&mut |v| {
        if v.grad.is_some() {
            out.extend_from_slice(v.value);
        }
    });
    out
}

pub fn param_grads<P: Parameters<f64> + ?Sized>(m: &mut P) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit_params(&mut |v| {
        if let Some(g) = v.grad {
            out.extend_from_slice(g);
        }
    });
    out
}

/// Overwrites trainable value number `k` in `param_values` order and
/// returns the previous value.
pub fn set_param<P: Parameters<f64> + ?Sized>(m: &mut P, k: usize, value: f64) -> f64 {
    let mut base = 0;
    let mut old = f64::NAN;
    m.visit_params(&mut |v| {
        if v.grad.is_none() {
            return;
        }
        let n = v.value.len();
        if k >= base && k < base + n {
            old = v.value[k - base];
            v.value[k - base] = value;
        }
        base += n;
    });
    old
}

/// Central difference of `f` along coordinate `k` of `x`.
pub fn central_diff(x: &mut [f64], k: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let x0 = x[k];
    x[k] = x0 + FD_STEP;
    let up = f(x);
    x[k] = x0 - FD_STEP;
    let down = f(x);
    x[k] = x0;
    (up - down) / (2.0 * FD_STEP)
}

/// Relative agreement of an analytic and a numeric derivative. The absolute
/// floor covers derivatives that vanish up to finite-difference round-off.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_RTOL * analytic.abs().max(numeric.abs()) + 1e-7
}

/// Checks `grad` against central differences of `f` at up to `max_checks`
/// evenly spaced coordinates.
pub fn check_input_grad(x: &[f64], grad: &[f64], max_checks: usize, mut f: impl FnMut(&[f64]) -> f64) -> Result<(), String> {
    assert_eq!(x.len(), grad.len());
    let mut x = x.to_vec();
    let step = (x.len() / max_checks.max(1)).max(1);
    for k in (0..x.len()).step_by(step) {
        let num = central_diff(&mut x, k, &mut f);
        if !grad_close(grad[k], num) {
            return Err(format!("coordinate {k}: analytic {} numeric {num}", grad[k]));
        }
    }
    Ok(())
}

/// Same for trainable values of `m`; `loss` must not touch the gradients.
pub fn check_param_grad<P: Parameters<f64>>(
    m: &mut P,
    grad: &[f64],
    max_checks: usize,
    mut loss: impl FnMut(&mut P) -> f64,
) -> Result<(), String> {
    let n = grad.len();
    let step = (n / max_checks.max(1)).max(1);
    for k in (0..n).step_by(step) {
        let x0 = set_param(m, k, f64::NAN);
        set_param(m, k, x0 + FD_STEP);
        let up = loss(m);
        set_param(m, k, x0 - FD_STEP);
        let down = loss(m);
        set_param(m, k, x0);
        let num = (up - down) / (2.0 * FD_STEP);
        if !grad_close(grad[k], num) {
            return Err(format!("parameter {k}: analytic {} numeric {num}", grad[k]));
        }
    }
    Ok(())
}

/// Fixed random projection used to reduce a tensor to a scalar.
pub fn probe(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
