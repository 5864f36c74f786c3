//! Gather-multiply-scatter kernels shared by every convolution type.
//!
//! Each output row sums its contributions in rulebook order, so results are
//! bitwise identical regardless of how rows are split across threads.

use rayon::prelude::*;

use super::param::ParamTensor;
use super::rulebook::{Csr, Rulebook};
use super::tensor::{Real, SparseTensor};
use crate::error::{Error, Result};

const PAR_MIN_ROWS: usize = 512;

fn gather_rows<T: Real>(
    x: &[T],
    c_in: usize,
    rows: &Csr,
    p: &ParamTensor<T>,
    n_out: usize,
) -> Vec<T> {
    let c_out = p.c_out;
    let mut out = vec![T::zero(); n_out * c_out];
    let kernel = |(j, acc): (usize, &mut [T])| {
        acc.copy_from_slice(&p.bias);
        for &(o, i) in rows.row(j) {
            let w = p.offset_weight(o as usize);
            let xi = &x[i as usize * c_in..(i as usize + 1) * c_in];
            for (ci, &xv) in xi.iter().enumerate() {
                if xv.is_zero() {
                    continue;
                }
                let wr = &w[ci * c_out..(ci + 1) * c_out];
                for (a, &wv) in acc.iter_mut().zip(wr) {
                    *a += xv * wv;
                }
            }
        }
    };
    if n_out >= PAR_MIN_ROWS {
        out.par_chunks_mut(c_out.max(1))
            .enumerate()
            .with_min_len(64)
            .for_each(kernel);
    } else {
        out.chunks_mut(c_out.max(1)).enumerate().for_each(kernel);
    }
    out
}

/// `grad_x[r] = sum over (o, s) of W_o * grad_y[s]`.
fn scatter_back<T: Real>(
    grad_y: &[T],
    rows: &Csr,
    p: &ParamTensor<T>,
    n_x: usize,
) -> Vec<T> {
    let (c_in, c_out) = (p.c_in, p.c_out);
    let mut gx = vec![T::zero(); n_x * c_in];
    let kernel = |(r, acc): (usize, &mut [T])| {
        for &(o, s) in rows.row(r) {
            let w = p.offset_weight(o as usize);
            let gy = &grad_y[s as usize * c_out..(s as usize + 1) * c_out];
            for (ci, a) in acc.iter_mut().enumerate() {
                let wr = &w[ci * c_out..(ci + 1) * c_out];
                let mut sum = T::zero();
                for (&wv, &g) in wr.iter().zip(gy) {
                    sum += wv * g;
                }
                *a += sum;
            }
        }
    };
    if n_x >= PAR_MIN_ROWS {
        gx.par_chunks_mut(c_in.max(1))
            .enumerate()
            .with_min_len(64)
            .for_each(kernel);
    } else {
        gx.chunks_mut(c_in.max(1)).enumerate().for_each(kernel);
    }
    gx
}

/// Accumulates weight and bias gradients. `transposed` swaps which side of
/// each pair is the layer input.
fn accumulate_param_grads<T: Real>(
    x: &[T],
    grad_y: &[T],
    rb: &Rulebook,
    p: &mut ParamTensor<T>,
    transposed: bool,
) {
    let (c_in, c_out) = (p.c_in, p.c_out);
    let block = c_in * c_out;
    let per_offset: Vec<Vec<T>> = (0..rb.kernel_volume())
        .into_par_iter()
        .map(|o| {
            let mut dw = vec![T::zero(); block];
            for &(i, j) in rb.pairs(o) {
                let (a, b) = if transposed { (j, i) } else { (i, j) };
                let xa = &x[a as usize * c_in..(a as usize + 1) * c_in];
                let gb = &grad_y[b as usize * c_out..(b as usize + 1) * c_out];
                for (ci, &xv) in xa.iter().enumerate() {
                    if xv.is_zero() {
                        continue;
                    }
                    let row = &mut dw[ci * c_out..(ci + 1) * c_out];
                    for (d, &g) in row.iter_mut().zip(gb) {
                        *d += xv * g;
                    }
                }
            }
            dw
        })
        .collect();
    for (o, dw) in per_offset.into_iter().enumerate() {
        for (acc, v) in p.weight_grad[o * block..(o + 1) * block].iter_mut().zip(dw) {
            *acc += v;
        }
    }
    for row in grad_y.chunks(c_out.max(1)) {
        for (acc, &g) in p.bias_grad.iter_mut().zip(row) {
            *acc += g;
        }
    }
}

fn check_shapes<T: Real>(
    t: &SparseTensor<T>,
    p: &ParamTensor<T>,
    rb: &Rulebook,
) -> Result<()> {
    if t.channels() != p.c_in {
        return Err(Error::ShapeMismatch(format!(
            "{}: input has {} channels, weights expect {}",
            p.name,
            t.channels(),
            p.c_in
        )));
    }
    if p.kernel_volume != rb.kernel_volume() {
        return Err(Error::ShapeMismatch(format!(
            "{}: weights have {} offsets, rulebook has {}",
            p.name,
            p.kernel_volume,
            rb.kernel_volume()
        )));
    }
    Ok(())
}

/// `out[j] = bias + sum over (i, j) pairs of offset o of W_o^T in[i]`.
pub fn conv_forward<T: Real>(
    t: &SparseTensor<T>,
    rb: &Rulebook,
    p: &ParamTensor<T>,
) -> Result<SparseTensor<T>> {
    check_shapes(t, p, rb)?;
    if t.grid() != rb.in_grid() || t.coords() != rb.in_coords() {
        return Err(Error::CoordMismatch(format!(
            "{}: rulebook was built for different input coordinates",
            p.name
        )));
    }
    let out = gather_rows(t.features(), p.c_in, rb.by_out(), p, rb.n_out());
    Ok(SparseTensor::from_canonical(
        rb.out_grid(),
        rb.out_coords().to_vec(),
        out,
        p.c_out,
    ))
}

/// Returns the input gradient and accumulates into `p`'s gradients.
pub fn conv_backward<T: Real>(
    t: &SparseTensor<T>,
    rb: &Rulebook,
    p: &mut ParamTensor<T>,
    grad_out: &[T],
) -> Result<Vec<T>> {
    check_shapes(t, p, rb)?;
    if grad_out.len() != rb.n_out() * p.c_out || t.len() != rb.n_in() {
        return Err(Error::ShapeMismatch(format!(
            "{}: grad_out has {} values, expected {}",
            p.name,
            grad_out.len(),
            rb.n_out() * p.c_out
        )));
    }
    let gx = scatter_back(grad_out, rb.by_in(), p, rb.n_in());
    accumulate_param_grads(t.features(), grad_out, rb, p, false);
    Ok(gx)
}

/// Transposed convolution over a down-sampling rulebook: maps the rulebook's
/// output sites back onto exactly its input sites.
pub fn inverse_conv_forward<T: Real>(
    t: &SparseTensor<T>,
    paired: &Rulebook,
    p: &ParamTensor<T>,
) -> Result<SparseTensor<T>> {
    check_shapes(t, p, paired)?;
    if t.grid() != paired.out_grid() || t.coords() != paired.out_coords() {
        return Err(Error::CoordMismatch(format!(
            "{}: input does not match the paired rulebook's output sites",
            p.name
        )));
    }
    let out = gather_rows(t.features(), p.c_in, paired.by_in(), p, paired.n_in());
    Ok(SparseTensor::from_canonical(
        paired.in_grid(),
        paired.in_coords().to_vec(),
        out,
        p.c_out,
    ))
}

pub fn inverse_conv_backward<T: Real>(
    t: &SparseTensor<T>,
    paired: &Rulebook,
    p: &mut ParamTensor<T>,
    grad_out: &[T],
) -> Result<Vec<T>> {
    check_shapes(t, p, paired)?;
    if grad_out.len() != paired.n_in() * p.c_out || t.len() != paired.n_out() {
        return Err(Error::ShapeMismatch(format!(
            "{}: grad_out has {} values, expected {}",
            p.name,
            grad_out.len(),
            paired.n_in() * p.c_out
        )));
    }
    let gx = scatter_back(grad_out, paired.by_out(), p, paired.n_out());
    accumulate_param_grads(t.features(), grad_out, paired, p, true);
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::rulebook::{build_rulebook_regular, build_rulebook_submanifold, ConvSpec};
    use crate::sparse::tensor::{Coord, Grid};

    fn identity_kernel(c: usize, spec: &ConvSpec) -> ParamTensor<f64> {
        let vol = spec.volume();
        let mut p = ParamTensor::zeros("id", vol, c, c);
        let center = vol / 2;
        for i in 0..c {
            p.weight[center * c * c + i * c + i] = 1.0;
        }
        p
    }

    fn sample() -> SparseTensor<f64> {
        let g = Grid::new3(4, 4, 4).unwrap();
        let coords = vec![
            Coord::new3(0, 0, 0, 0),
            Coord::new3(0, 1, 0, 0),
            Coord::new3(0, 1, 1, 0),
            Coord::new3(0, 3, 3, 3),
        ];
        let feats: Vec<f64> = (0..8).map(|v| v as f64 * 0.5 - 1.0).collect();
        SparseTensor::new(g, coords, feats, 2).unwrap()
    }

    #[test]
    fn identity_kernel_passes_features_through() {
        let t = sample();
        let spec = ConvSpec::submanifold(3, 3);
        let rb = build_rulebook_submanifold(&t, &spec).unwrap();
        let out = conv_forward(&t, &rb, &identity_kernel(2, &spec)).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn single_voxel_is_center_affine() {
        let g = Grid::new2(3, 3).unwrap();
        let t = SparseTensor::new(g, vec![Coord::new2(0, 1, 1)], vec![2.0, -1.0], 2).unwrap();
        let spec = ConvSpec::submanifold(2, 3);
        let rb = build_rulebook_submanifold(&t, &spec).unwrap();
        let mut p = ParamTensor::zeros("p", 9, 2, 3);
        for (k, w) in p.weight.iter_mut().enumerate() {
            *w = k as f64 * 0.1;
        }
        p.bias = vec![1.0, 2.0, 3.0];
        let out = conv_forward(&t, &rb, &p).unwrap();
        let wc = p.offset_weight(4);
        for co in 0..3 {
            let want = p.bias[co] + 2.0 * wc[co] - wc[3 + co];
            assert!((out.row(0)[co] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let t = sample();
        let spec = ConvSpec::submanifold(3, 3);
        let rb = build_rulebook_submanifold(&t, &spec).unwrap();
        let mut p = identity_kernel(2, &spec);
        let gx = conv_backward(&t, &rb, &mut p, &vec![0.0; t.len() * 2]).unwrap();
        assert!(gx.iter().all(|v| *v == 0.0));
        assert!(p.weight_grad.iter().all(|v| *v == 0.0));
        assert!(p.bias_grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_kernel_backward_is_identity() {
        let t = sample();
        let spec = ConvSpec::submanifold(3, 3);
        let rb = build_rulebook_submanifold(&t, &spec).unwrap();
        let mut p = identity_kernel(2, &spec);
        let g: Vec<f64> = (0..8).map(|v| v as f64 - 3.0).collect();
        let gx = conv_backward(&t, &rb, &mut p, &g).unwrap();
        assert_eq!(gx, g);
        assert_eq!(p.bias_grad, vec![-3.0 + -1.0 + 1.0 + 3.0, -2.0 + 0.0 + 2.0 + 4.0]);
    }

    #[test]
    fn inverse_restores_coordinates() {
        let t = sample();
        let down = ConvSpec::regular(3, 3, 2, 1);
        let rb = build_rulebook_regular(&t, &down).unwrap();
        let p_down = ParamTensor::zeros("d", 27, 2, 2);
        let low = conv_forward(&t, &rb, &p_down).unwrap();
        let p_up = ParamTensor::zeros("u", 27, 2, 2);
        let up = inverse_conv_forward(&low, &rb, &p_up).unwrap();
        assert_eq!(up.coords(), t.coords());
        assert_eq!(up.grid(), t.grid());
    }

    #[test]
    fn inverse_with_unit_kernel_is_affine_passthrough() {
        let t = sample();
        let spec = ConvSpec::regular(3, 1, 1, 0);
        let rb = build_rulebook_regular(&t, &spec).unwrap();
        let mut p = ParamTensor::zeros("u", 1, 2, 2);
        p.weight = vec![2.0, 0.0, 1.0, -1.0];
        p.bias = vec![0.5, -0.5];
        let up = inverse_conv_forward(&t, &rb, &p).unwrap();
        for r in 0..t.len() {
            let x = t.row(r);
            assert_eq!(up.row(r)[0], 0.5 + 2.0 * x[0] + 1.0 * x[1]);
            assert_eq!(up.row(r)[1], -0.5 - x[1]);
        }
    }

    #[test]
    fn inverse_rejects_foreign_input() {
        let t = sample();
        let rb = build_rulebook_regular(&t, &ConvSpec::regular(3, 3, 2, 1)).unwrap();
        let p = ParamTensor::zeros("u", 27, 2, 2);
        assert!(matches!(
            inverse_conv_forward(&t, &rb, &p),
            Err(Error::CoordMismatch(_))
        ));
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let t = sample();
        let spec = ConvSpec::submanifold(3, 3);
        let rb = build_rulebook_submanifold(&t, &spec).unwrap();
        let p = ParamTensor::<f64>::zeros("p", 27, 3, 2);
        assert!(matches!(conv_forward(&t, &rb, &p), Err(Error::ShapeMismatch(_))));
    }
}
