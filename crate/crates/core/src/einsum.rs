//! The context-routed low-rank contraction `...ld,cdr,crD,...lc -> ...lD`.
//!
//! Tokens are grouped by context id and each group is pushed through its
//! own `A[c]` then `B[c]`, so the only temporaries are `[L_c, d]`,
//! `[L_c, r]` and `[L_c, D]` blocks. No `d x D` product is ever formed.

use alloc::vec;
use alloc::vec::Vec;

use crate::adaptors::ContextId;
use crate::error::{Error, Result};
use crate::kernels::{gemm, MatMut, MatRef};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct EinsumDims {
    pub contexts: usize,
    pub d_in: usize,
    pub rank: usize,
    pub d_out: usize,
}

impl EinsumDims {
    pub fn from_shapes(x: &[usize], a: &[usize], b: &[usize], rows: usize) -> Result<(Self, usize)> {
        if x.is_empty() || a.len() != 3 || b.len() != 3 {
            return Err(Error::dim("einsum_context", x, a));
        }
        let d_in = x[x.len() - 1];
        let n_rows: usize = x[..x.len() - 1].iter().product();
        if a[1] != d_in {
            return Err(Error::dim("einsum_context", x, a));
        }
        if b[0] != a[0] || b[1] != a[2] {
            return Err(Error::dim("einsum_context", a, b));
        }
        if rows != n_rows {
            return Err(Error::dim("einsum_context", x, &[rows]));
        }
        Ok((
            EinsumDims {
                contexts: a[0],
                d_in,
                rank: a[2],
                d_out: b[2],
            },
            n_rows,
        ))
    }
}

/// Row indices per context, in ascending row order.
fn groups(ctx: &[usize], contexts: usize) -> Vec<Vec<usize>> {
    let mut g = vec![Vec::new(); contexts];
    for (l, &c) in ctx.iter().enumerate() {
        g[c].push(l);
    }
    g
}

fn gather(src: &[f32], width: usize, rows: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

fn scatter(dst: &mut [f32], width: usize, rows: &[usize], src: &[f32], accumulate: bool) {
    for (i, &r) in rows.iter().enumerate() {
        let d = &mut dst[r * width..(r + 1) * width];
        let s = &src[i * width..(i + 1) * width];
        if accumulate {
            d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        } else {
            d.copy_from_slice(s);
        }
    }
}

/// Returns `(delta [L, D], t = x·A[c] [L, r])`; `t` is kept for backward.
pub(crate) fn forward(x: &[f32], a: &[f32], b: &[f32], ctx: &[usize], dims: EinsumDims) -> (Vec<f32>, Vec<f32>) {
    let EinsumDims { contexts, d_in, rank, d_out } = dims;
    let rows = ctx.len();
    let mut out = vec![0.0; rows * d_out];
    let mut t = vec![0.0; rows * rank];
    for (c, idx) in groups(ctx, contexts).iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let lc = idx.len();
        let a_c = MatRef::new(&a[c * d_in * rank..(c + 1) * d_in * rank], d_in, rank);
        let b_c = MatRef::new(&b[c * rank * d_out..(c + 1) * rank * d_out], rank, d_out);
        if lc == rows {
            gemm(1.0, MatRef::new(x, rows, d_in), a_c, 0.0, MatMut::new(&mut t, rows, rank));
            gemm(1.0, MatRef::new(&t, rows, rank), b_c, 0.0, MatMut::new(&mut out, rows, d_out));
            break;
        }
        let xc = gather(x, d_in, idx);
        let mut tc = vec![0.0; lc * rank];
        gemm(1.0, MatRef::new(&xc, lc, d_in), a_c, 0.0, MatMut::new(&mut tc, lc, rank));
        let mut hc = vec![0.0; lc * d_out];
        gemm(1.0, MatRef::new(&tc, lc, rank), b_c, 0.0, MatMut::new(&mut hc, lc, d_out));
        scatter(&mut t, rank, idx, &tc, false);
        scatter(&mut out, d_out, idx, &hc, false);
    }
    (out, t)
}

pub(crate) struct EinsumGrads<'g> {
    pub dx: Option<&'g mut [f32]>,
    pub da: Option<&'g mut [f32]>,
    pub db: Option<&'g mut [f32]>,
}

/// Accumulates gradients for `x`, `A` and `B` given upstream `g [L, D]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    x: &[f32],
    a: &[f32],
    b: &[f32],
    t: &[f32],
    ctx: &[usize],
    dims: EinsumDims,
    g: &[f32],
    mut out: EinsumGrads<'_>,
) {
    let EinsumDims { contexts, d_in, rank, d_out } = dims;
    for (c, idx) in groups(ctx, contexts).iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let lc = idx.len();
        let gc = gather(g, d_out, idx);
        let tc = gather(t, rank, idx);
        let gm = MatRef::new(&gc, lc, d_out);
        let a_off = c * d_in * rank..(c + 1) * d_in * rank;
        let b_off = c * rank * d_out..(c + 1) * rank * d_out;
        if let Some(db) = out.db.as_deref_mut() {
            gemm(
                1.0,
                MatRef::new(&tc, lc, rank).t(),
                gm,
                1.0,
                MatMut::new(&mut db[b_off.clone()], rank, d_out),
            );
        }
        if out.da.is_none() && out.dx.is_none() {
            continue;
        }
        let mut dt = vec![0.0; lc * rank];
        gemm(
            1.0,
            gm,
            MatRef::new(&b[b_off], rank, d_out).t(),
            0.0,
            MatMut::new(&mut dt, lc, rank),
        );
        if let Some(da) = out.da.as_deref_mut() {
            let xc = gather(x, d_in, idx);
            gemm(
                1.0,
                MatRef::new(&xc, lc, d_in).t(),
                MatRef::new(&dt, lc, rank),
                1.0,
                MatMut::new(&mut da[a_off.clone()], d_in, rank),
            );
        }
        if let Some(dx) = out.dx.as_deref_mut() {
            let mut dxc = vec![0.0; lc * d_in];
            gemm(
                1.0,
                MatRef::new(&dt, lc, rank),
                MatRef::new(&a[a_off], d_in, rank).t(),
                0.0,
                MatMut::new(&mut dxc, lc, d_in),
            );
            scatter(dx, d_in, idx, &dxc, true);
        }
    }
}

pub(crate) fn check_routing(ctx: &[ContextId], contexts: usize) -> Result<Vec<usize>> {
    ctx.iter()
        .map(|c| {
            let id = c.index();
            if id < contexts {
                Ok(id)
            } else {
                Err(Error::Routing { id, contexts })
            }
        })
        .collect()
}

/// Decodes a row-wise one-hot selector `[..., L, C]` into context ids.
pub fn one_hot_to_ids(s: &Tensor) -> Result<Vec<ContextId>> {
    let c = *s.shape().last().ok_or_else(|| Error::Contract("selector must have rank >= 1".into()))?;
    s.data()
        .chunks(c)
        .enumerate()
        .map(|(row, vals)| {
            let ones = vals.iter().filter(|&&v| v == 1.0).count();
            let zeros = vals.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != c {
                return Err(Error::Contract(alloc::format!("selector row {row} is not one-hot: {vals:?}")));
            }
            Ok(ContextId::new(vals.iter().position(|&v| v == 1.0).unwrap()))
        })
        .collect()
}

/// `δh[l] = (x[l]·A[c_l])·B[c_l]` for `x [..., L, d]`, `A [C, d, r]`,
/// `B [C, r, D]` and one context id per row of `x`.
pub fn einsum_context(x: &Tensor, a: &Tensor, b: &Tensor, ctx: &[ContextId]) -> Result<Tensor> {
    let (dims, _) = EinsumDims::from_shapes(x.shape(), a.shape(), b.shape(), ctx.len())?;
    let ids = check_routing(ctx, dims.contexts)?;
    let (out, _) = forward(x.data(), a.data(), b.data(), &ids, dims);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dims.d_out;
    Tensor::new(&shape, out)
}

/// Same contraction with the selector given as a one-hot tensor `[..., L, C]`.
pub fn einsum_context_one_hot(x: &Tensor, a: &Tensor, b: &Tensor, s: &Tensor) -> Result<Tensor> {
    if s.shape().last() != a.shape().first() {
        return Err(Error::dim("einsum_context", s.shape(), a.shape()));
    }
    let ids = one_hot_to_ids(s)?;
    einsum_context(x, a, b, &ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_b_gives_zero_delta() {
        let mut rng = crate::rng::seeded(1);
        let x = crate::rng::uniform_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let a = crate::rng::uniform_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);
        let b = Tensor::zeros(&[2, 2, 5]);
        let ctx = [0, 1, 1, 0].map(ContextId::new);
        let out = einsum_context(&x, &a, &b, &ctx).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_expansion() {
        let x = Tensor::new(&[1, 2], alloc::vec![1.0, 0.0]).unwrap();
        let a = Tensor::new(&[1, 2, 1], alloc::vec![2.0, 0.0]).unwrap();
        let b = Tensor::new(&[1, 1, 2], alloc::vec![3.0, 4.0]).unwrap();
        let s = Tensor::new(&[1, 1], alloc::vec![1.0]).unwrap();
        let out = einsum_context_one_hot(&x, &a, &b, &s).unwrap();
        assert_eq!(out.data(), &[6.0, 8.0]);
    }

    #[test]
    fn rejects_non_one_hot_selector() {
        let s = Tensor::new(&[2, 2], alloc::vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        assert!(matches!(one_hot_to_ids(&s), Err(Error::Contract(_))));
        let s = Tensor::new(&[1, 2], alloc::vec![1.0, 1.0]).unwrap();
        assert!(one_hot_to_ids(&s).is_err());
    }

    #[test]
    fn dimension_and_routing_errors() {
        let x = Tensor::zeros(&[2, 3]);
        let a = Tensor::zeros(&[2, 4, 1]);
        let b = Tensor::zeros(&[2, 1, 2]);
        let ctx = [ContextId::new(0), ContextId::new(0)];
        assert!(matches!(einsum_context(&x, &a, &b, &ctx), Err(Error::Dimension { .. })));
        let a = Tensor::zeros(&[2, 3, 1]);
        let bad = [ContextId::new(0), ContextId::new(2)];
        assert!(matches!(einsum_context(&x, &a, &b, &bad), Err(Error::Routing { id: 2, contexts: 2 })));
    }

    #[test]
    fn leading_batch_dims_flatten() {
        let mut rng = crate::rng::seeded(5);
        let x = crate::rng::uniform_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let a = crate::rng::uniform_tensor(&mut rng, &[2, 4, 2], -1.0, 1.0);
        let b = crate::rng::uniform_tensor(&mut rng, &[2, 2, 5], -1.0, 1.0);
        let ctx: Vec<ContextId> = [0, 1, 1, 0, 0, 1].iter().map(|&c| ContextId::new(c)).collect();
        let out = einsum_context(&x, &a, &b, &ctx).unwrap();
        assert_eq!(out.shape(), &[2, 3, 5]);
    }
}
