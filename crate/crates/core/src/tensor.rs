//! Dense fp32 tensors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;

/// Dense row-major fp32 array with an optional gradient slot.
///
/// An empty shape denotes a scalar. Every dimension is positive and
/// `shape.iter().product() == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(alloc::format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "tensor dimensions must be positive");
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Switching a tensor to frozen drops any gradient it holds.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient slot. Frozen tensors never hold a gradient.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::Contract("gradient written to a frozen tensor".into()));
        }
        if g.len() != self.data.len() {
            return Err(Error::dim("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f32>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().expect("row() on a scalar");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Matrix product over the two trailing dimensions with numpy-style
/// broadcasting of the leading batch dimensions.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = MatmulPlan::new(a.shape(), b.shape())?;
    let data = plan.forward(a.data(), b.data());
    Tensor::new(&plan.out_shape, data)
}

/// Softmax over the trailing dimension, stabilised by row-max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    out.requires_grad = false;
    out.grad = None;
    out.data.chunks_mut(n).for_each(kernels::softmax_in_place);
    out
}

/// `x / sqrt(mean(x²) + 1e-5) * scale` over the trailing dimension.
pub fn rms_norm(x: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().unwrap_or(&1);
    if scale.shape() != [d] {
        return Err(Error::dim("rms_norm", x.shape(), scale.shape()));
    }
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(d) {
        let inv = kernels::inv_rms(row);
        row.iter_mut()
            .zip(scale.data())
            .for_each(|(v, s)| *v = *v * inv * s);
    }
    Tensor::new(x.shape(), data)
}

/// Shape bookkeeping for a broadcasting batched matmul.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `(a_batch, b_batch)` matrix index pairs, one per output matrix.
    pub pairs: Vec<(usize, usize)>,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::dim("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::dim("matmul", a, b));
        }
        let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let rank = ab.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ab), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::dim("matmul", a, b));
            }
            batch.push(x.max(y));
        }
        let total: usize = batch.iter().product();
        let mut pairs = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            let (mut ia, mut ib) = (0, 0);
            for d in 0..rank {
                ia = ia * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
                ib = ib * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
            }
            pairs.push((ia, ib));
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatmulPlan { m, k, n, pairs, out_shape })
    }

    pub fn forward(&self, a: &[f32], b: &[f32]) -> Vec<f32> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![0.0; self.pairs.len() * m * n];
        for (o, &(ia, ib)) in self.pairs.iter().enumerate() {
            kernels::gemm(
                1.0,
                kernels::MatRef::new(&a[ia * m * k..(ia + 1) * m * k], m, k),
                kernels::MatRef::new(&b[ib * k * n..(ib + 1) * k * n], k, n),
                0.0,
                kernels::MatMut::new(&mut out[o * m * n..(o + 1) * m * n], m, n),
            );
        }
        out
    }

    /// Accumulates `dA += dC·Bᵀ` and/or `dB += Aᵀ·dC`, summing over
    /// broadcast batch dimensions.
    pub fn backward(
        &self,
        a: &[f32],
        b: &[f32],
        dc: &[f32],
        mut da: Option<&mut [f32]>,
        mut db: Option<&mut [f32]>,
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        for (o, &(ia, ib)) in self.pairs.iter().enumerate() {
            let g = kernels::MatRef::new(&dc[o * m * n..(o + 1) * m * n], m, n);
            if let Some(da) = da.as_deref_mut() {
                let bm = kernels::MatRef::new(&b[ib * k * n..(ib + 1) * k * n], k, n);
                kernels::gemm(
                    1.0,
                    g,
                    bm.t(),
                    1.0,
                    kernels::MatMut::new(&mut da[ia * m * k..(ia + 1) * m * k], m, k),
                );
            }
            if let Some(db) = db.as_deref_mut() {
                let am = kernels::MatRef::new(&a[ia * m * k..(ia + 1) * m * k], m, k);
                kernels::gemm(
                    1.0,
                    am.t(),
                    g,
                    1.0,
                    kernels::MatMut::new(&mut db[ib * k * n..(ib + 1) * k * n], k, n),
                );
            }
        }
    }
}
