//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Values are written once when an op is recorded and never mutated. Leaf
//! parameters are borrowed, so frozen weights are never copied onto the
//! tape. A node needs a gradient only if one of its inputs does; frozen
//! subgraphs record no backward work at all.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::einsum::{self, EinsumDims, EinsumGrads};
use crate::error::{Error, Result};
use crate::kernels::{self, gemm, MatMut, MatRef};
use crate::tensor::{MatmulPlan, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Buf<'a> {
    Borrowed(&'a [f32]),
    Owned(Vec<f32>),
}

impl Buf<'_> {
    fn as_slice(&self) -> &[f32] {
        match self {
            Buf::Borrowed(s) => s,
            Buf::Owned(v) => v,
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, plan: MatmulPlan },
    Add { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    Sum { x: Var },
    Softmax { x: Var },
    RmsNorm { x: Var, scale: Var, inv: Vec<f32> },
    Silu { x: Var },
    SwiGlu { u: Var },
    Gather { table: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Einsum { x: Var, a: Var, b: Var, ctx: Vec<usize>, dims: EinsumDims, t: Vec<f32> },
    ContextAdd { h: Var, table: Var, ctx: Vec<usize> },
    ContextMul { x: Var, table: Var, ctx: Vec<usize> },
    Rope { x: Var, heads: usize, positions: Vec<usize>, freqs: Vec<f32> },
    CausalAttention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f32> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weight: f32, probs: Vec<f32> },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Buf<'a>,
    requires_grad: bool,
    name: Option<String>,
    op: Op,
}

/// Ordered record of a forward computation. Inputs always precede the ops
/// that consume them, so a single reverse sweep is a valid topological
/// traversal.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of every trainable leaf on a tape after one backward sweep.
#[derive(Debug, Clone)]
pub struct Grads {
    leaves: Vec<(Var, Option<String>, Vec<f32>)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.leaves.iter().find(|(w, _, _)| *w == v).map(|(_, _, g)| g.as_slice())
    }

    pub fn by_name(&self, name: &str) -> Option<&[f32]> {
        self.leaves
            .iter()
            .find(|(_, n, _)| n.as_deref() == Some(name))
            .map(|(_, _, g)| g.as_slice())
    }

    /// Named leaf gradients in registration order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.leaves
            .iter()
            .filter_map(|(_, n, g)| n.as_deref().map(|n| (n, g.as_slice())))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("tape values keep their shape")
    }

    fn push(&mut self, shape: Vec<usize>, value: Buf<'a>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.as_slice().len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            name: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an owned leaf; it is trainable iff the tensor says so.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, Buf::Owned(t.into_data()), rg, Op::Leaf)
    }

    /// Records a non-trainable owned value.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "constant shape");
        self.push(shape.to_vec(), Buf::Owned(data), false, Op::Leaf)
    }

    /// Borrows a parameter without copying it.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Buf::Borrowed(t.data()), t.requires_grad(), Op::Leaf)
    }

    /// Like [`Tape::param`]; trainable leaves also remember `name` so their
    /// gradients can be looked up after backward.
    pub fn param_named(&mut self, name: impl FnOnce() -> String, t: &'a Tensor) -> Var {
        let v = self.param(t);
        if t.requires_grad() {
            self.nodes[v.0].name = Some(name());
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let out = plan.forward(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        let shape = plan.out_shape.clone();
        Ok(self.push(shape, Buf::Owned(out), rg, Op::MatMul { a, b, plan }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), Buf::Owned(out), rg, Op::Add { a, b }))
    }

    /// Adds a `[n]` row to every trailing-dimension row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(x));
        if self.shape(row) != [n] {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(&[x, row]);
        Ok(self.push(self.shape(x).to_vec(), Buf::Owned(out), rg, Op::AddRow { x, row }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), Buf::Owned(out), rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), Buf::Owned(out), rg, Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum::<f32>();
        let rg = self.rg(&[x]);
        self.push(Vec::new(), Buf::Owned(vec![s]), rg, Op::Sum { x })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, n) = rows_cols(self.shape(x));
        let mut out = self.value(x).to_vec();
        out.chunks_mut(n).for_each(kernels::softmax_in_place);
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), Buf::Owned(out), rg, Op::Softmax { x })
    }

    pub fn rms_norm(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (_, d) = rows_cols(self.shape(x));
        if self.shape(scale) != [d] {
            return Err(Error::dim("rms_norm", self.shape(x), self.shape(scale)));
        }
        let s = self.value(scale);
        let mut out = self.value(x).to_vec();
        let mut inv = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let r = kernels::inv_rms(row);
            inv.push(r);
            row.iter_mut().zip(s).for_each(|(v, g)| *v = *v * r * g);
        }
        let rg = self.rg(&[x, scale]);
        Ok(self.push(self.shape(x).to_vec(), Buf::Owned(out), rg, Op::RmsNorm { x, scale, inv }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::silu(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), Buf::Owned(out), rg, Op::Silu { x })
    }

    /// `[rows, 2n] -> [rows, n]`: `silu(gate) ⊙ value` with the gate in the
    /// first half of each row.
    pub fn swiglu(&mut self, u: Var) -> Result<Var> {
        let (rows, w) = rows_cols(self.shape(u));
        if w % 2 != 0 || self.shape(u).len() != 2 {
            return Err(Error::dim("swiglu", self.shape(u), &[rows, w / 2]));
        }
        let n = w / 2;
        let mut out = Vec::with_capacity(rows * n);
        for row in self.value(u).chunks(w) {
            let (g, v) = row.split_at(n);
            out.extend(g.iter().zip(v).map(|(&g, &v)| kernels::silu(g) * v));
        }
        let rg = self.rg(&[u]);
        Ok(self.push(vec![rows, n], Buf::Owned(out), rg, Op::SwiGlu { u }))
    }

    /// Selects rows of a rank-2 `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::dim("gather_rows", shape, &[idx.len()]));
        }
        let (rows, n) = (shape[0], shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(alloc::format!("row {bad} out of range for {rows} rows")));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![idx.len(), n],
            Buf::Owned(out),
            rg,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Stacks rank-2 blocks of equal width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(parts[0])[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != n {
                return Err(Error::dim("concat_rows", self.shape(parts[0]), s));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(
            vec![rows, n],
            Buf::Owned(out),
            rg,
            Op::ConcatRows { parts: parts.to_vec() },
        ))
    }

    /// Context-routed low-rank delta; see [`crate::einsum`].
    pub fn einsum_context(&mut self, x: Var, a: Var, b: Var, ctx: &[usize]) -> Result<Var> {
        let (dims, rows) = EinsumDims::from_shapes(self.shape(x), self.shape(a), self.shape(b), ctx.len())?;
        if let Some(&bad) = ctx.iter().find(|&&c| c >= dims.contexts) {
            return Err(Error::Routing {
                id: bad,
                contexts: dims.contexts,
            });
        }
        let (out, t) = einsum::forward(self.value(x), self.value(a), self.value(b), ctx, dims);
        let rg = self.rg(&[x, a, b]);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = dims.d_out;
        debug_assert_eq!(rows, ctx.len());
        Ok(self.push(
            shape,
            Buf::Owned(out),
            rg,
            Op::Einsum {
                x,
                a,
                b,
                ctx: ctx.to_vec(),
                dims,
                t,
            },
        ))
    }

    fn check_context_table(&self, op: &'static str, x: Var, table: Var, ctx: &[usize]) -> Result<usize> {
        let (rows, n) = rows_cols(self.shape(x));
        let ts = self.shape(table);
        if ts.len() != 2 || ts[1] != n || ctx.len() != rows {
            return Err(Error::dim(op, self.shape(x), ts));
        }
        if let Some(&bad) = ctx.iter().find(|&&c| c >= ts[0]) {
            return Err(Error::Routing { id: bad, contexts: ts[0] });
        }
        Ok(n)
    }

    /// `h[l] + table[ctx[l]]`.
    pub fn context_add(&mut self, h: Var, table: Var, ctx: &[usize]) -> Result<Var> {
        let n = self.check_context_table("context_add", h, table, ctx)?;
        let t = self.value(table);
        let out = self
            .value(h)
            .chunks(n)
            .zip(ctx)
            .flat_map(|(row, &c)| row.iter().zip(&t[c * n..(c + 1) * n]).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(&[h, table]);
        Ok(self.push(
            self.shape(h).to_vec(),
            Buf::Owned(out),
            rg,
            Op::ContextAdd {
                h,
                table,
                ctx: ctx.to_vec(),
            },
        ))
    }

    /// `x[l] ⊙ table[ctx[l]]`.
    pub fn context_mul(&mut self, x: Var, table: Var, ctx: &[usize]) -> Result<Var> {
        let n = self.check_context_table("context_mul", x, table, ctx)?;
        let t = self.value(table);
        let out = self
            .value(x)
            .chunks(n)
            .zip(ctx)
            .flat_map(|(row, &c)| row.iter().zip(&t[c * n..(c + 1) * n]).map(|(a, b)| a * b))
            .collect();
        let rg = self.rg(&[x, table]);
        Ok(self.push(
            self.shape(x).to_vec(),
            Buf::Owned(out),
            rg,
            Op::ContextMul {
                x,
                table,
                ctx: ctx.to_vec(),
            },
        ))
    }

    /// Rotary embedding on `[L, heads * d_head]`, one position per row.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: f32) -> Result<Var> {
        let (rows, width) = rows_cols(self.shape(x));
        if heads == 0 || width % heads != 0 || !(width / heads).is_multiple_of(2) {
            return Err(Error::Config(alloc::format!(
                "rope needs an even head width, got width {width} over {heads} heads"
            )));
        }
        if positions.len() != rows {
            return Err(Error::dim("rope", self.shape(x), &[positions.len()]));
        }
        let dh = width / heads;
        let freqs = kernels::rope_frequencies(dh, base);
        let mut out = self.value(x).to_vec();
        kernels::rope_rows(&mut out, width, dh, positions, &freqs, 1.0);
        let rg = self.rg(&[x]);
        Ok(self.push(
            self.shape(x).to_vec(),
            Buf::Owned(out),
            rg,
            Op::Rope {
                x,
                heads,
                positions: positions.to_vec(),
                freqs,
            },
        ))
    }

    /// Multi-head causal self-attention on `[L, d_model]` inputs. Position
    /// `i` attends to `j <= i` only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::dim("causal_attention", &shape, self.shape(k)));
        }
        let (l, dm) = (shape[0], shape[1]);
        if heads == 0 || dm % heads != 0 {
            return Err(Error::Config(alloc::format!("{dm} not divisible into {heads} heads")));
        }
        let dh = dm / heads;
        let scale = 1.0 / libm::sqrtf(dh as f32);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * dm];
        for h in 0..heads {
            let p = &mut probs[h * l * l..(h + 1) * l * l];
            gemm(
                scale,
                MatRef::strided(&qv[h * dh..], l, dh, dm, 1),
                MatRef::strided(&kv[h * dh..], l, dh, dm, 1).t(),
                0.0,
                MatMut::new(p, l, l),
            );
            for (i, row) in p.chunks_mut(l).enumerate() {
                kernels::softmax_in_place(&mut row[..=i]);
                row[i + 1..].fill(0.0);
            }
            gemm(
                1.0,
                MatRef::new(p, l, l),
                MatRef::strided(&vv[h * dh..], l, dh, dm, 1),
                0.0,
                MatMut::strided(&mut out[h * dh..], l, dh, dm, 1),
            );
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(shape, Buf::Owned(out), rg, Op::CausalAttention { q, k, v, heads, probs }))
    }

    /// Post-softmax attention weights `[heads, L, L]` of a recorded
    /// attention op.
    pub fn attention_probs(&self, v: Var) -> Option<&[f32]> {
        match &self.nodes[v.0].op {
            Op::CausalAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `weight * Σ_r −log softmax(logits[r])[targets[r]]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weight: f32) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::dim("cross_entropy", shape, &[targets.len()]));
        }
        let v = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Contract(alloc::format!("target {bad} outside vocabulary of {v}")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            kernels::softmax_in_place(row);
            // `f32::max` would swallow a NaN here and hide a diverged step.
            let p = row[t];
            total -= f64::from(libm::logf(if p.is_nan() { p } else { p.max(f32::MIN_POSITIVE) }));
        }
        let rg = self.rg(&[logits]);
        let loss = (total * f64::from(weight)) as f32;
        Ok(self.push(
            Vec::new(),
            Buf::Owned(vec![loss]),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weight,
                probs,
            },
        ))
    }

    /// One reverse sweep from a scalar `loss`. Every trainable leaf gets a
    /// gradient (zeros when the loss does not depend on it); frozen leaves
    /// get none.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; n.value.as_slice().len()]);
                (Var(i), n.name.clone(), g)
            })
            .collect();
        Ok(Grads { leaves })
    }

    /// Removes the gradient buffer of `v` (allocating zeros) for in-place
    /// accumulation; pair with [`Tape::put_slot`].
    fn take_slot(&self, grads: &mut [Option<Vec<f32>>], v: Var) -> Option<Vec<f32>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.as_slice().len();
        Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; n]))
    }

    fn put_slot(grads: &mut [Option<Vec<f32>>], v: Var, buf: Option<Vec<f32>>) {
        let Some(buf) = buf else { return };
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&buf).for_each(|(a, b)| *a += b),
            slot => *slot = Some(buf),
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut [f32]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.as_slice().len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = self.take_slot(grads, *a);
                let mut gb = self.take_slot(grads, *b);
                plan.backward(av, bv, g, ga.as_deref_mut(), gb.as_deref_mut());
                Self::put_slot(grads, *a, ga);
                Self::put_slot(grads, *b, gb);
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(s) = self.slot(grads, *row) {
                    let n = s.len();
                    for gr in g.chunks(n) {
                        s.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for ((x, gi), bi) in s.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += b * c);
                }
            }
            Op::Sum { x } => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Softmax { x } => {
                let (_, n) = rows_cols(&node.shape);
                let p = node.value.as_slice();
                if let Some(s) = self.slot(grads, *x) {
                    for ((dx, pr), gr) in s.chunks_mut(n).zip(p.chunks(n)).zip(g.chunks(n)) {
                        kernels::softmax_backward_row(pr, gr, dx);
                    }
                }
            }
            Op::RmsNorm { x, scale, inv } => {
                let d = *node.shape.last().unwrap();
                let (xv, sv) = (self.value(*x), self.value(*scale));
                if let Some(s) = self.slot(grads, *scale) {
                    for ((xr, gr), r) in xv.chunks(d).zip(g.chunks(d)).zip(inv) {
                        for j in 0..d {
                            s[j] += gr[j] * xr[j] * r;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    for (((dx, xr), gr), &r) in s.chunks_mut(d).zip(xv.chunks(d)).zip(g.chunks(d)).zip(inv) {
                        let dot: f32 = (0..d).map(|j| gr[j] * sv[j] * xr[j]).sum();
                        let k = r * r * r * dot / d as f32;
                        for j in 0..d {
                            dx[j] += r * gr[j] * sv[j] - xr[j] * k;
                        }
                    }
                }
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                if let Some(s) = self.slot(grads, *x) {
                    for ((d, gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *d += gi * kernels::silu_grad(xi);
                    }
                }
            }
            Op::SwiGlu { u } => {
                let uv = self.value(*u);
                let n = node.shape[1];
                if let Some(s) = self.slot(grads, *u) {
                    for ((du, ur), gr) in s.chunks_mut(2 * n).zip(uv.chunks(2 * n)).zip(g.chunks(n)) {
                        for j in 0..n {
                            let (gate, val) = (ur[j], ur[n + j]);
                            let sg = kernels::sigmoid(gate);
                            du[j] += gr[j] * val * sg * (1.0 + gate * (1.0 - sg));
                            du[n + j] += gr[j] * gate * sg;
                        }
                    }
                }
            }
            Op::Gather { table, idx } => {
                let n = node.shape[1];
                if let Some(s) = self.slot(grads, *table) {
                    for (&r, gr) in idx.iter().zip(g.chunks(n)) {
                        s[r * n..(r + 1) * n].iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(s) = self.slot(grads, p) {
                        s.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b);
                    }
                    off += len;
                }
            }
            Op::Einsum { x, a, b, ctx, dims, t } => {
                let mut dx = self.take_slot(grads, *x);
                let mut da = self.take_slot(grads, *a);
                let mut db = self.take_slot(grads, *b);
                einsum::backward(
                    self.value(*x),
                    self.value(*a),
                    self.value(*b),
                    t,
                    ctx,
                    *dims,
                    g,
                    EinsumGrads {
                        dx: dx.as_deref_mut(),
                        da: da.as_deref_mut(),
                        db: db.as_deref_mut(),
                    },
                );
                for (v, buf) in [(*x, dx), (*a, da), (*b, db)] {
                    Self::put_slot(grads, v, buf);
                }
            }
            Op::ContextAdd { h, table, ctx } => {
                let n = *node.shape.last().unwrap();
                if let Some(s) = self.slot(grads, *h) {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(s) = self.slot(grads, *table) {
                    for (gr, &c) in g.chunks(n).zip(ctx) {
                        s[c * n..(c + 1) * n].iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ContextMul { x, table, ctx } => {
                let n = *node.shape.last().unwrap();
                let (xv, tv) = (self.value(*x), self.value(*table));
                if let Some(s) = self.slot(grads, *x) {
                    for ((dx, gr), &c) in s.chunks_mut(n).zip(g.chunks(n)).zip(ctx) {
                        let tr = &tv[c * n..(c + 1) * n];
                        for j in 0..n {
                            dx[j] += gr[j] * tr[j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *table) {
                    for ((xr, gr), &c) in xv.chunks(n).zip(g.chunks(n)).zip(ctx) {
                        let dt = &mut s[c * n..(c + 1) * n];
                        for j in 0..n {
                            dt[j] += gr[j] * xr[j];
                        }
                    }
                }
            }
            Op::Rope { x, heads, positions, freqs } => {
                let width = *node.shape.last().unwrap();
                let dh = width / heads;
                if let Some(s) = self.slot(grads, *x) {
                    let mut back = g.to_vec();
                    kernels::rope_rows(&mut back, width, dh, positions, freqs, -1.0);
                    s.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
                }
            }
            Op::CausalAttention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weight,
                probs,
            } => {
                let n = self.shape(*logits)[1];
                let scale = g[0] * weight;
                if let Some(s) = self.slot(grads, *logits) {
                    for ((dr, pr), &t) in s.chunks_mut(n).zip(probs.chunks(n)).zip(targets) {
                        for j in 0..n {
                            dr[j] += scale * pr[j];
                        }
                        dr[t] -= scale;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (l, dm) = (self.shape(q)[0], self.shape(q)[1]);
        let dh = dm / heads;
        let scale = 1.0 / libm::sqrtf(dh as f32);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = self.take_slot(grads, q);
        let mut dk = self.take_slot(grads, k);
        let mut dv = self.take_slot(grads, v);
        let mut dp = vec![0.0; l * l];
        let mut ds = vec![0.0; l * l];
        for h in 0..heads {
            let p = &probs[h * l * l..(h + 1) * l * l];
            let go = MatRef::strided(&g[h * dh..], l, dh, dm, 1);
            if let Some(dv) = dv.as_deref_mut() {
                gemm(
                    1.0,
                    MatRef::new(p, l, l).t(),
                    go,
                    1.0,
                    MatMut::strided(&mut dv[h * dh..], l, dh, dm, 1),
                );
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            gemm(
                1.0,
                go,
                MatRef::strided(&vv[h * dh..], l, dh, dm, 1).t(),
                0.0,
                MatMut::new(&mut dp, l, l),
            );
            ds.fill(0.0);
            for i in 0..l {
                let row = i * l..i * l + i + 1;
                kernels::softmax_backward_row(&p[row.clone()], &dp[row.clone()], &mut ds[row]);
            }
            if let Some(dq) = dq.as_deref_mut() {
                gemm(
                    scale,
                    MatRef::new(&ds, l, l),
                    MatRef::strided(&kv[h * dh..], l, dh, dm, 1),
                    1.0,
                    MatMut::strided(&mut dq[h * dh..], l, dh, dm, 1),
                );
            }
            if let Some(dk) = dk.as_deref_mut() {
                gemm(
                    scale,
                    MatRef::new(&ds, l, l).t(),
                    MatRef::strided(&qv[h * dh..], l, dh, dm, 1),
                    1.0,
                    MatMut::strided(&mut dk[h * dh..], l, dh, dm, 1),
                );
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            Self::put_slot(grads, var, buf);
        }
    }
}
