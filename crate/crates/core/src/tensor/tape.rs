use std::sync::Arc;


use super::scalar::Scalar;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

#[derive(Clone, Copy, Debug)]
pub enum UnaryKind {
    Neg,
    Relu,
    Exp,
    Ln,
    Sqrt,
    Sin,
    Cos,
    Sigmoid,
    Recip,
}

#[derive(Clone, Copy, Debug)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(UnaryKind, usize),
    Binary(BinaryKind, usize, usize),
    AddScalar(usize, f64),
    MulScalar(usize, f64),
    Matmul { a: usize, b: usize },
    Transpose(usize),
    Reshape(usize),
    SumAll(usize),
    SumAxis { x: usize, axis: usize },
    MeanAxis { x: usize, axis: usize },
    AddRow { x: usize, row: usize },
    MulRow { x: usize, row: usize },
    AddCol { x: usize, col: usize },
    MulCol { x: usize, col: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    IndexSelect { x: usize, idx: Arc<Vec<usize>> },
    GatherRows { x: usize, idx: Arc<Vec<usize>> },
    Softmax { x: usize, axis: usize },
    CumsumExclusive { x: usize, axis: usize },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape: every operation appends a node holding its forward
/// value, so the node list doubles as the computation record (topologically
/// ordered by construction). `backward` walks it in reverse; `replay`
/// recomputes every forward value in place.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Decompose `shape` around `axis` into (outer, len, inner) extents.
fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {} out of range for shape {:?}", axis, shape);
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}


fn mm_nn<T: Scalar>(a: &[T], b: &[T], _m: usize, k: usize, n: usize, out: &mut [T]) {
    let body = |i: usize, row: &mut [T]| {
        for l in 0..k {
            let a_il = a[i * k + l];
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                row[j] = row[j] + a_il * b_row[j];
            }
        }
    };
    for (i, row) in out.chunks_mut(n).enumerate() {
        body(i, row);
    }
}

/// C[m,n] = A[k,m]^T * B[k,n]
fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    // Accumulate rank-1 updates row by row of A and B: every read is
    // stride-1 and C (usually small) stays cached. Per-entry summation
    // order over l is unchanged from a plain dot product.
    for l in 0..k {
        let a_row = &a[l * m..(l + 1) * m];
        let b_row = &b[l * n..(l + 1) * n];
        for (i, &a_li) in a_row.iter().enumerate() {
            let row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] = row[j] + a_li * b_row[j];
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `id`. Zeros when the
    /// tensor requires grad but lies on no path to the loss.
    pub fn grad(&self, id: TensorId) -> Vec<T> {
        match &self.grads.get(id.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![T::zero(); self.nodes[id.0].value.len()],
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, requires_grad: bool) -> TensorId {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> TensorId {
        assert_eq!(
            numel(shape),
            data.len(),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(shape.to_vec(), data, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> TensorId {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(&[1], vec![T::from_f64(v)])
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorId {
        let data = vec![T::zero(); numel(shape)];
        self.constant(shape, data)
    }

    fn unary(&mut self, kind: UnaryKind, x: TensorId) -> TensorId {
        let xin = &self.nodes[x.0];
        let value: Vec<T> = xin
            .value
            .iter()
            .map(|&v| match kind {
                UnaryKind::Neg => -v,
                UnaryKind::Relu => {
                    if v > T::zero() {
                        v
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Exp => v.exp(),
                UnaryKind::Ln => v.ln(),
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Sin => v.sin(),
                UnaryKind::Cos => v.cos(),
                UnaryKind::Sigmoid => T::one() / (T::one() + (-v).exp()),
                UnaryKind::Recip => T::one() / v,
            })
            .collect();
        let shape = xin.shape.clone();
        let rg = xin.requires_grad;
        self.push(shape, value, Op::Unary(kind, x.0), rg)
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn ln(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Ln, x)
    }
    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn sin(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Sin, x)
    }
    pub fn cos(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Cos, x)
    }
    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn recip(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Recip, x)
    }

    fn binary(&mut self, kind: BinaryKind, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "elementwise op on mismatched shapes {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value: Vec<T> = av
            .iter()
            .zip(bv.iter())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(shape, value, Op::Binary(kind, a.0, b.0), rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let cv = T::from_f64(c);
        let value: Vec<T> = self.nodes[x.0].value.iter().map(|&v| v + cv).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x.0);
        self.push(shape, value, Op::AddScalar(x.0, c), rg)
    }

    pub fn mul_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let cv = T::from_f64(c);
        let value: Vec<T> = self.nodes[x.0].value.iter().map(|&v| v * cv).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x.0);
        self.push(shape, value, Op::MulScalar(x.0, c), rg)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul dimension mismatch: {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![T::zero(); m * n];
        mm_nn(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut value);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(vec![m, n], value, Op::Matmul { a: a.0, b: b.0 }, rg)
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let s = &self.nodes[x.0].shape;
        assert_eq!(s.len(), 2, "transpose expects a matrix, got shape {:?}", s);
        let (m, n) = (s[0], s[1]);
        let v = &self.nodes[x.0].value;
        let mut value = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = v[i * n + j];
            }
        }
        let rg = self.rg(x.0);
        self.push(vec![n, m], value, Op::Transpose(x.0), rg)
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        assert_eq!(
            numel(shape),
            self.nodes[x.0].value.len(),
            "reshape of {:?} to incompatible shape {:?}",
            self.nodes[x.0].shape,
            shape
        );
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(x.0);
        self.push(shape.to_vec(), value, Op::Reshape(x.0), rg)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut acc = T::zero();
        for &v in &self.nodes[x.0].value {
            acc = acc + v;
        }
        let rg = self.rg(x.0);
        self.push(vec![1], vec![acc], Op::SumAll(x.0), rg)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].value.len();
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> TensorId {
        let (outer, len, inner) = axis_view(&self.nodes[x.0].shape, axis);
        let v = &self.nodes[x.0].value;
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    value[o * inner + i] = value[o * inner + i] + v[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = self.nodes[x.0].shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x.0);
        self.push(shape, value, Op::SumAxis { x: x.0, axis }, rg)
    }

    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> TensorId {
        let (outer, len, inner) = axis_view(&self.nodes[x.0].shape, axis);
        let v = &self.nodes[x.0].value;
        let scale = T::one() / T::from_f64(len as f64);
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    value[o * inner + i] = value[o * inner + i] + v[(o * len + l) * inner + i];
                }
            }
        }
        for v in value.iter_mut() {
            *v = *v * scale;
        }
        let mut shape = self.nodes[x.0].shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x.0);
        self.push(shape, value, Op::MeanAxis { x: x.0, axis }, rg)
    }

    /// `[n, c] + [c]`, broadcasting the row over every row of `x`.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> TensorId {
        let (sx, sr) = (&self.nodes[x.0].shape, &self.nodes[row.0].shape);
        assert!(
            sx.len() == 2 && sr.len() == 1 && sx[1] == sr[0],
            "add_row: {:?} with row {:?}",
            sx,
            sr
        );
        let (n, c) = (sx[0], sx[1]);
        let xv = &self.nodes[x.0].value;
        let rv = &self.nodes[row.0].value;
        let mut value = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                value.push(xv[i * c + j] + rv[j]);
            }
        }
        let rg = self.rg(x.0) || self.rg(row.0);
        self.push(vec![n, c], value, Op::AddRow { x: x.0, row: row.0 }, rg)
    }

    pub fn mul_row(&mut self, x: TensorId, row: TensorId) -> TensorId {
        let (sx, sr) = (&self.nodes[x.0].shape, &self.nodes[row.0].shape);
        assert!(
            sx.len() == 2 && sr.len() == 1 && sx[1] == sr[0],
            "mul_row: {:?} with row {:?}",
            sx,
            sr
        );
        let (n, c) = (sx[0], sx[1]);
        let xv = &self.nodes[x.0].value;
        let rv = &self.nodes[row.0].value;
        let mut value = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                value.push(xv[i * c + j] * rv[j]);
            }
        }
        let rg = self.rg(x.0) || self.rg(row.0);
        self.push(vec![n, c], value, Op::MulRow { x: x.0, row: row.0 }, rg)
    }

    /// `[n, c] + [n]`, broadcasting the column entry over each row.
    pub fn add_col(&mut self, x: TensorId, col: TensorId) -> TensorId {
        let (sx, sc) = (&self.nodes[x.0].shape, &self.nodes[col.0].shape);
        assert!(
            sx.len() == 2 && sc.len() == 1 && sx[0] == sc[0],
            "add_col: {:?} with col {:?}",
            sx,
            sc
        );
        let (n, c) = (sx[0], sx[1]);
        let xv = &self.nodes[x.0].value;
        let cv = &self.nodes[col.0].value;
        let mut value = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                value.push(xv[i * c + j] + cv[i]);
            }
        }
        let rg = self.rg(x.0) || self.rg(col.0);
        self.push(vec![n, c], value, Op::AddCol { x: x.0, col: col.0 }, rg)
    }

    pub fn mul_col(&mut self, x: TensorId, col: TensorId) -> TensorId {
        let (sx, sc) = (&self.nodes[x.0].shape, &self.nodes[col.0].shape);
        assert!(
            sx.len() == 2 && sc.len() == 1 && sx[0] == sc[0],
            "mul_col: {:?} with col {:?}",
            sx,
            sc
        );
        let (n, c) = (sx[0], sx[1]);
        let xv = &self.nodes[x.0].value;
        let cv = &self.nodes[col.0].value;
        let mut value = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                value.push(xv[i * c + j] * cv[i]);
            }
        }
        let rg = self.rg(x.0) || self.rg(col.0);
        self.push(vec![n, c], value, Op::MulCol { x: x.0, col: col.0 }, rg)
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> TensorId {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let base = self.nodes[parts[0].0].shape.clone();
        let mut total = 0usize;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            assert_eq!(s.len(), base.len(), "concat rank mismatch {:?} vs {:?}", s, base);
            for (d, (&a, &b)) in s.iter().zip(base.iter()).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {:?} vs {:?} on axis {}", s, base, axis);
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let (outer, _, inner) = axis_view(&shape, axis);
        let mut value = vec![T::zero(); numel(&shape)];
        for o in 0..outer {
            let mut off = 0usize;
            for &p in parts {
                let plen = self.nodes[p.0].shape[axis];
                let pv = &self.nodes[p.0].value;
                let src = &pv[o * plen * inner..(o + 1) * plen * inner];
                let dst_start = (o * total + off) * inner;
                value[dst_start..dst_start + plen * inner].copy_from_slice(src);
                off += plen;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p.0));
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(shape, value, Op::Concat { parts: ids, axis }, rg)
    }

    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> TensorId {
        let sx = self.nodes[x.0].shape.clone();
        let (outer, alen, inner) = axis_view(&sx, axis);
        assert!(
            start + len <= alen,
            "slice [{}, {}) out of range for axis {} of shape {:?}",
            start,
            start + len,
            axis,
            sx
        );
        let xv = &self.nodes[x.0].value;
        let mut shape = sx;
        shape[axis] = len;
        let mut value = vec![T::zero(); numel(&shape)];
        for o in 0..outer {
            let src = &xv[(o * alen + start) * inner..(o * alen + start + len) * inner];
            value[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let rg = self.rg(x.0);
        self.push(shape, value, Op::Slice { x: x.0, axis, start }, rg)
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        self.slice(x, 0, start, len)
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        self.slice(x, 1, start, len)
    }

    /// Arbitrary element gather from the flattened input:
    /// `out[i] = x[idx[i]]`, reshaped to `out_shape`. Backward scatter-adds.
    pub fn index_select(&mut self, x: TensorId, idx: Arc<Vec<usize>>, out_shape: &[usize]) -> TensorId {
        assert_eq!(
            numel(out_shape),
            idx.len(),
            "index_select output shape {:?} does not match {} indices",
            out_shape,
            idx.len()
        );
        let xv = &self.nodes[x.0].value;
        let value: Vec<T> = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x.0);
        self.push(out_shape.to_vec(), value, Op::IndexSelect { x: x.0, idx }, rg)
    }

    /// Row gather from a matrix: `out[r, :] = x[idx[r], :]`.
    pub fn gather_rows(&mut self, x: TensorId, idx: Arc<Vec<usize>>) -> TensorId {
        let s = &self.nodes[x.0].shape;
        assert_eq!(s.len(), 2, "gather_rows expects a matrix, got {:?}", s);
        let (n, c) = (s[0], s[1]);
        let xv = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(idx.len() * c);
        for &r in idx.iter() {
            assert!(r < n, "gather_rows index {} out of range for {} rows", r, n);
            value.extend_from_slice(&xv[r * c..(r + 1) * c]);
        }
        let rg = self.rg(x.0);
        self.push(vec![idx.len(), c], value, Op::GatherRows { x: x.0, idx }, rg)
    }

    /// Numerically stable softmax along `axis`: max-subtracted exponentials
    /// normalized so each slice sums to one.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let (outer, len, inner) = axis_view(&shape, axis);
        let xv = &self.nodes[x.0].value;
        let mut value = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = xv[at(0)];
                for l in 1..len {
                    if xv[at(l)] > mx {
                        mx = xv[at(l)];
                    }
                }
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (xv[at(l)] - mx).exp();
                    value[at(l)] = e;
                    sum = sum + e;
                }
                for l in 0..len {
                    value[at(l)] = value[at(l)] / sum;
                }
            }
        }
        let rg = self.rg(x.0);
        self.push(shape, value, Op::Softmax { x: x.0, axis }, rg)
    }

    /// Exclusive prefix sum along `axis`: `out[.., l, ..] = sum_{j<l} x[.., j, ..]`.
    pub fn cumsum_exclusive(&mut self, x: TensorId, axis: usize) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let (outer, len, inner) = axis_view(&shape, axis);
        let xv = &self.nodes[x.0].value;
        let mut value = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut acc = T::zero();
                for l in 0..len {
                    value[at(l)] = acc;
                    acc = acc + xv[at(l)];
                }
            }
        }
        let rg = self.rg(x.0);
        self.push(shape, value, Op::CumsumExclusive { x: x.0, axis }, rg)
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
    /// across multiple uses of a tensor; nodes off the loss path keep a zero
    /// gradient.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].shape
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g = upper[0].take().unwrap();
            // First contribution moves in; later ones accumulate in place.
            let mut acc = |idx: usize, contrib: Vec<T>| {
                if !self.nodes[idx].requires_grad {
                    return;
                }
                match &mut lower[idx] {
                    Some(slot) => {
                        for (s, c) in slot.iter_mut().zip(contrib) {
                            *s = *s + c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Unary(kind, x) => {
                    let xv = &self.nodes[*x].value;
                    let yv = &node.value;
                    let contrib: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gj)| match kind {
                            UnaryKind::Neg => -gj,
                            UnaryKind::Relu => {
                                if xv[j] > T::zero() {
                                    gj
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Exp => gj * yv[j],
                            UnaryKind::Ln => gj / xv[j],
                            UnaryKind::Sqrt => gj / (T::from_f64(2.0) * yv[j]),
                            UnaryKind::Sin => gj * xv[j].cos(),
                            UnaryKind::Cos => -gj * xv[j].sin(),
                            UnaryKind::Sigmoid => gj * yv[j] * (T::one() - yv[j]),
                            UnaryKind::Recip => -gj * yv[j] * yv[j],
                        })
                        .collect();
                    acc(*x, contrib);
                }
                Op::Binary(kind, a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    match kind {
                        BinaryKind::Add => {
                            acc(*a, g.clone());
                            acc(*b, g.clone());
                        }
                        BinaryKind::Sub => {
                            acc(*a, g.clone());
                            acc(*b, g.iter().map(|&v| -v).collect());
                        }
                        BinaryKind::Mul => {
                            acc(*a, g.iter().zip(bv).map(|(&gj, &b)| gj * b).collect());
                            acc(*b, g.iter().zip(av).map(|(&gj, &a)| gj * a).collect());
                        }
                        BinaryKind::Div => {
                            acc(*a, g.iter().zip(bv).map(|(&gj, &b)| gj / b).collect());
                            acc(
                                *b,
                                g.iter()
                                    .enumerate()
                                    .map(|(j, &gj)| -gj * av[j] / (bv[j] * bv[j]))
                                    .collect(),
                            );
                        }
                    }
                }
                Op::AddScalar(x, _) => acc(*x, g.clone()),
                Op::MulScalar(x, c) => {
                    let cv = T::from_f64(*c);
                    acc(*x, g.iter().map(|&v| v * cv).collect());
                }
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let nn = self.nodes[*b].shape[1];
                    // dA = dC * B^T, dB = A^T * dC. B is transposed up front
                    // so both products run the stride-1 kernel.
                    let bv = &self.nodes[*b].value;
                    let mut bt = vec![T::zero(); k * nn];
                    for l in 0..k {
                        for j in 0..nn {
                            bt[j * k + l] = bv[l * nn + j];
                        }
                    }
                    let mut da = vec![T::zero(); m * k];
                    mm_nn(&g, &bt, m, nn, k, &mut da);
                    let mut db = vec![T::zero(); k * nn];
                    mm_tn(&self.nodes[*a].value, &g, k, m, nn, &mut db);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Transpose(x) => {
                    let (n2, m2) = (node.shape[0], node.shape[1]);
                    let mut contrib = vec![T::zero(); m2 * n2];
                    for j in 0..n2 {
                        for l in 0..m2 {
                            contrib[l * n2 + j] = g[j * m2 + l];
                        }
                    }
                    acc(*x, contrib);
                }
                Op::Reshape(x) => acc(*x, g.clone()),
                Op::SumAll(x) => {
                    let len = self.nodes[*x].value.len();
                    acc(*x, vec![g[0]; len]);
                }
                Op::SumAxis { x, axis } => {
                    let (outer, len, inner) = axis_view(&self.nodes[*x].shape, *axis);
                    let mut contrib = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            for j in 0..inner {
                                contrib[(o * len + l) * inner + j] = g[o * inner + j];
                            }
                        }
                    }
                    acc(*x, contrib);
                }
                Op::MeanAxis { x, axis } => {
                    let (outer, len, inner) = axis_view(&self.nodes[*x].shape, *axis);
                    let scale = T::one() / T::from_f64(len as f64);
                    let mut contrib = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            for j in 0..inner {
                                contrib[(o * len + l) * inner + j] = g[o * inner + j] * scale;
                            }
                        }
                    }
                    acc(*x, contrib);
                }
                Op::AddRow { x, row } => {
                    let (n2, c) = (node.shape[0], node.shape[1]);
                    acc(*x, g.clone());
                    let mut rg_ = vec![T::zero(); c];
                    for i2 in 0..n2 {
                        for j in 0..c {
                            rg_[j] = rg_[j] + g[i2 * c + j];
                        }
                    }
                    acc(*row, rg_);
                }
                Op::MulRow { x, row } => {
                    let (n2, c) = (node.shape[0], node.shape[1]);
                    let xv = &self.nodes[*x].value;
                    let rv = &self.nodes[*row].value;
                    let mut gx = vec![T::zero(); n2 * c];
                    let mut gr = vec![T::zero(); c];
                    for i2 in 0..n2 {
                        for j in 0..c {
                            gx[i2 * c + j] = g[i2 * c + j] * rv[j];
                            gr[j] = gr[j] + g[i2 * c + j] * xv[i2 * c + j];
                        }
                    }
                    acc(*x, gx);
                    acc(*row, gr);
                }
                Op::AddCol { x, col } => {
                    let (n2, c) = (node.shape[0], node.shape[1]);
                    acc(*x, g.clone());
                    let mut gc = vec![T::zero(); n2];
                    for i2 in 0..n2 {
                        for j in 0..c {
                            gc[i2] = gc[i2] + g[i2 * c + j];
                        }
                    }
                    acc(*col, gc);
                }
                Op::MulCol { x, col } => {
                    let (n2, c) = (node.shape[0], node.shape[1]);
                    let xv = &self.nodes[*x].value;
                    let cv = &self.nodes[*col].value;
                    let mut gx = vec![T::zero(); n2 * c];
                    let mut gc = vec![T::zero(); n2];
                    for i2 in 0..n2 {
                        for j in 0..c {
                            gx[i2 * c + j] = g[i2 * c + j] * cv[i2];
                            gc[i2] = gc[i2] + g[i2 * c + j] * xv[i2 * c + j];
                        }
                    }
                    acc(*x, gx);
                    acc(*col, gc);
                }
                Op::Concat { parts, axis } => {
                    let total = node.shape[*axis];
                    let (outer, _, inner) = axis_view(&node.shape, *axis);
                    let mut off = 0usize;
                    for &p in parts {
                        let plen = self.nodes[p].shape[*axis];
                        let mut contrib = vec![T::zero(); plen * outer * inner];
                        for o in 0..outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + plen) * inner];
                            contrib[o * plen * inner..(o + 1) * plen * inner].copy_from_slice(src);
                        }
                        acc(p, contrib);
                        off += plen;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let (outer, alen, inner) = axis_view(&self.nodes[*x].shape, *axis);
                    let len = node.shape[*axis];
                    let mut contrib = vec![T::zero(); outer * alen * inner];
                    for o in 0..outer {
                        let dst = &mut contrib
                            [(o * alen + start) * inner..(o * alen + start + len) * inner];
                        dst.copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(*x, contrib);
                }
                Op::IndexSelect { x, idx } => {
                    let mut contrib = vec![T::zero(); self.nodes[*x].value.len()];
                    for (j, &src) in idx.iter().enumerate() {
                        contrib[src] = contrib[src] + g[j];
                    }
                    acc(*x, contrib);
                }
                Op::GatherRows { x, idx } => {
                    let c = node.shape[1];
                    let mut contrib = vec![T::zero(); self.nodes[*x].value.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            contrib[src * c + j] = contrib[src * c + j] + g[r * c + j];
                        }
                    }
                    acc(*x, contrib);
                }
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = axis_view(&node.shape, *axis);
                    let yv = &node.value;
                    let mut contrib = vec![T::zero(); yv.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + j;
                            let mut dot = T::zero();
                            for l in 0..len {
                                dot = dot + yv[at(l)] * g[at(l)];
                            }
                            for l in 0..len {
                                contrib[at(l)] = yv[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                    acc(*x, contrib);
                }
                Op::CumsumExclusive { x, axis } => {
                    // d x[l] = sum_{j>l} g[j]
                    let (outer, len, inner) = axis_view(&node.shape, *axis);
                    let mut contrib = vec![T::zero(); node.value.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + j;
                            let mut acc_g = T::zero();
                            for l in (0..len).rev() {
                                contrib[at(l)] = acc_g;
                                acc_g = acc_g + g[at(l)];
                            }
                        }
                    }
                    acc(*x, contrib);
                }
            }
            upper[0] = Some(g);
        }
        self.grads = grads;
    }

    /// Recompute every recorded node's forward value in tape order. Leaves
    /// keep their stored values; the result is bitwise identical to the
    /// original execution at fixed precision.
    pub fn replay(&mut self) {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            let value: Vec<T> = match &op {
                Op::Leaf => continue,
                Op::Unary(kind, x) => {
                    let xv = &self.nodes[*x].value;
                    xv.iter()
                        .map(|&v| match kind {
                            UnaryKind::Neg => -v,
                            UnaryKind::Relu => {
                                if v > T::zero() {
                                    v
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Exp => v.exp(),
                            UnaryKind::Ln => v.ln(),
                            UnaryKind::Sqrt => v.sqrt(),
                            UnaryKind::Sin => v.sin(),
                            UnaryKind::Cos => v.cos(),
                            UnaryKind::Sigmoid => T::one() / (T::one() + (-v).exp()),
                            UnaryKind::Recip => T::one() / v,
                        })
                        .collect()
                }
                _ => {
                    // Re-run the generic path by rebuilding on a scratch tape is
                    // wasteful; instead recompute in place per op kind.
                    self.recompute(i, &op)
                }
            };
            self.nodes[i].value = value;
        }
    }

    fn recompute(&self, i: usize, op: &Op) -> Vec<T> {
        let node = &self.nodes[i];
        match op {
            Op::Leaf | Op::Unary(..) => unreachable!(),
            Op::Binary(kind, a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                av.iter()
                    .zip(bv)
                    .map(|(&x, &y)| match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                        BinaryKind::Div => x / y,
                    })
                    .collect()
            }
            Op::AddScalar(x, c) => {
                let cv = T::from_f64(*c);
                self.nodes[*x].value.iter().map(|&v| v + cv).collect()
            }
            Op::MulScalar(x, c) => {
                let cv = T::from_f64(*c);
                self.nodes[*x].value.iter().map(|&v| v * cv).collect()
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let mut out = vec![T::zero(); m * n];
                mm_nn(&self.nodes[*a].value, &self.nodes[*b].value, m, k, n, &mut out);
                out
            }
            Op::Transpose(x) => {
                let s = &self.nodes[*x].shape;
                let (m, n) = (s[0], s[1]);
                let v = &self.nodes[*x].value;
                let mut out = vec![T::zero(); m * n];
                for i2 in 0..m {
                    for j in 0..n {
                        out[j * m + i2] = v[i2 * n + j];
                    }
                }
                out
            }
            Op::Reshape(x) => self.nodes[*x].value.clone(),
            Op::SumAll(x) => {
                let mut acc = T::zero();
                for &v in &self.nodes[*x].value {
                    acc = acc + v;
                }
                vec![acc]
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = axis_view(&self.nodes[*x].shape, *axis);
                let v = &self.nodes[*x].value;
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for j in 0..inner {
                            out[o * inner + j] = out[o * inner + j] + v[(o * len + l) * inner + j];
                        }
                    }
                }
                if matches!(op, Op::MeanAxis { .. }) {
                    let scale = T::one() / T::from_f64(len as f64);
                    for v in out.iter_mut() {
                        *v = *v * scale;
                    }
                }
                out
            }
            Op::AddRow { x, row } | Op::MulRow { x, row } => {
                let (n, c) = (node.shape[0], node.shape[1]);
                let xv = &self.nodes[*x].value;
                let rv = &self.nodes[*row].value;
                let mut out = Vec::with_capacity(n * c);
                for i2 in 0..n {
                    for j in 0..c {
                        out.push(if matches!(op, Op::AddRow { .. }) {
                            xv[i2 * c + j] + rv[j]
                        } else {
                            xv[i2 * c + j] * rv[j]
                        });
                    }
                }
                out
            }
            Op::AddCol { x, col } | Op::MulCol { x, col } => {
                let (n, c) = (node.shape[0], node.shape[1]);
                let xv = &self.nodes[*x].value;
                let cv = &self.nodes[*col].value;
                let mut out = Vec::with_capacity(n * c);
                for i2 in 0..n {
                    for j in 0..c {
                        out.push(if matches!(op, Op::AddCol { .. }) {
                            xv[i2 * c + j] + cv[i2]
                        } else {
                            xv[i2 * c + j] * cv[i2]
                        });
                    }
                }
                out
            }
            Op::Concat { parts, axis } => {
                let total = node.shape[*axis];
                let (outer, _, inner) = axis_view(&node.shape, *axis);
                let mut out = vec![T::zero(); node.value.len()];
                for o in 0..outer {
                    let mut off = 0usize;
                    for &p in parts {
                        let plen = self.nodes[p].shape[*axis];
                        let pv = &self.nodes[p].value;
                        let src = &pv[o * plen * inner..(o + 1) * plen * inner];
                        let dst = (o * total + off) * inner;
                        out[dst..dst + plen * inner].copy_from_slice(src);
                        off += plen;
                    }
                }
                out
            }
            Op::Slice { x, axis, start } => {
                let (outer, alen, inner) = axis_view(&self.nodes[*x].shape, *axis);
                let len = node.shape[*axis];
                let xv = &self.nodes[*x].value;
                let mut out = vec![T::zero(); node.value.len()];
                for o in 0..outer {
                    let src = &xv[(o * alen + start) * inner..(o * alen + start + len) * inner];
                    out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
                }
                out
            }
            Op::IndexSelect { x, idx } => {
                let xv = &self.nodes[*x].value;
                idx.iter().map(|&j| xv[j]).collect()
            }
            Op::GatherRows { x, idx } => {
                let c = self.nodes[*x].shape[1];
                let xv = &self.nodes[*x].value;
                let mut out = Vec::with_capacity(idx.len() * c);
                for &r in idx.iter() {
                    out.extend_from_slice(&xv[r * c..(r + 1) * c]);
                }
                out
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_view(&node.shape, *axis);
                let xv = &self.nodes[*x].value;
                let mut out = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let mut mx = xv[at(0)];
                        for l in 1..len {
                            if xv[at(l)] > mx {
                                mx = xv[at(l)];
                            }
                        }
                        let mut sum = T::zero();
                        for l in 0..len {
                            let e = (xv[at(l)] - mx).exp();
                            out[at(l)] = e;
                            sum = sum + e;
                        }
                        for l in 0..len {
                            out[at(l)] = out[at(l)] / sum;
                        }
                    }
                }
                out
            }
            Op::CumsumExclusive { x, axis } => {
                let (outer, len, inner) = axis_view(&node.shape, *axis);
                let xv = &self.nodes[*x].value;
                let mut out = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let mut acc = T::zero();
                        for l in 0..len {
                            out[at(l)] = acc;
                            acc = acc + xv[at(l)];
                        }
                    }
                }
                out
            }
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}
