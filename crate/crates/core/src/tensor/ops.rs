use super::{gemm, numel, Element, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn wants(parents: &[Tensor<impl Element>], i: usize) -> bool {
    parents[i].requires_grad()
}

/// Row-major strides.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn axis_index(op: &'static str, rank: usize, axis: isize) -> Result<usize> {
    let a = if axis < 0 { rank as isize + axis } else { axis };
    if a < 0 || a as usize >= rank {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for rank {rank}"),
        ));
    }
    Ok(a as usize)
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, p| {
                vec![
                    wants(p, 0).then(|| g.to_vec()),
                    wants(p, 1).then(|| g.to_vec()),
                ]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, p| {
                vec![
                    wants(p, 0).then(|| g.to_vec()),
                    wants(p, 1).then(|| g.iter().map(|&v| -v).collect()),
                ]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, p| {
                let ga =
                    wants(p, 0).then(|| g.iter().zip(p[1].data()).map(|(&g, &b)| g * b).collect());
                let gb =
                    wants(p, 1).then(|| g.iter().zip(p[0].data()).map(|(&g, &a)| g * a).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|&v| v * s).collect())]),
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v.max(T::zero())).collect();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, p| {
                vec![Some(
                    g.iter()
                        .zip(p[0].data())
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let out = data.clone();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(&out)
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect(),
                )]
            }),
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = T::one() / T::lit(n as f64);
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(
            "mean",
            Vec::new(),
            vec![s * inv],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0] * inv; n])]),
        )
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&self, axis: isize) -> Result<Tensor<T>> {
        let ax = axis_index("sum_axis", self.rank(), axis)?;
        let shape = self.shape();
        let outer: usize = shape[..ax].iter().product();
        let len = shape[ax];
        let inner: usize = shape[ax + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let x = self.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(ax);
        Ok(Tensor::from_op(
            "sum_axis",
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Swap two axes (materialized; the result is contiguous).
    pub fn transpose(&self, a: isize, b: isize) -> Result<Tensor<T>> {
        let rank = self.rank();
        let a = axis_index("transpose", rank, a)?;
        let b = axis_index("transpose", rank, b)?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), &perm);
        Ok(Tensor::from_op(
            "transpose",
            out_shape.clone(),
            data,
            vec![self.clone()],
            // a single swap is its own inverse
            Box::new(move |g, _| vec![Some(permute_data(g, &out_shape, &perm))]),
        ))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: isize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = first.rank();
        let ax = axis_index("concat", rank, axis)?;
        for p in parts {
            let ok = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == ax || x == y);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {ax}", first.shape(), p.shape()),
                ));
            }
        }
        let outer: usize = first.shape()[..ax].iter().product();
        let inner: usize = first.shape()[ax + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[ax]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[ax] = total;
        Ok(Tensor::from_op(
            "concat",
            shape,
            data,
            parts.iter().map(|&p| p.clone()).collect(),
            Box::new(move |g, parents| {
                let mut grads = Vec::with_capacity(parents.len());
                let mut offset = 0;
                for (i, &l) in lens.iter().enumerate() {
                    if parents[i].requires_grad() {
                        let mut gp = Vec::with_capacity(outer * l * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[start..start + l * inner]);
                        }
                        grads.push(Some(gp));
                    } else {
                        grads.push(None);
                    }
                    offset += l;
                }
                grads
            }),
        ))
    }

    /// Channel concatenation: axis 1 of `B×C×H×W` maps, axis 0 of `C×H×W` maps.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let rank = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?
            .rank();
        if rank < 3 {
            return Err(Error::shape(
                "concat_channels",
                format!("feature maps must have rank 3 or 4, got {rank}"),
            ));
        }
        Self::concat(parts, rank as isize - 3)
    }

    /// The sub-range `[start, start+len)` of `axis`.
    pub fn narrow(&self, axis: isize, start: usize, len: usize) -> Result<Tensor<T>> {
        let ax = axis_index("narrow", self.rank(), axis)?;
        let dim = self.shape()[ax];
        if len == 0 || start + len > dim {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} exceeds dim {dim}", start + len),
            ));
        }
        let outer: usize = self.shape()[..ax].iter().product();
        let inner: usize = self.shape()[ax + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * dim + start) * inner;
            data.extend_from_slice(&self.data()[s..s + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[ax] = len;
        Ok(Tensor::from_op(
            "narrow",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    let s = (o * dim + start) * inner;
                    gx[s..s + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Gather slices along axis 0 (indices may repeat).
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let rows = self.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "index_select",
                format!("index {bad} out of range for leading dim {rows}"),
            ));
        }
        if indices.is_empty() {
            return Err(Error::shape("index_select", "empty index list"));
        }
        let inner: usize = self.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&self.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            "index_select",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); rows * inner];
                for (k, &i) in idx.iter().enumerate() {
                    for (d, &s) in gx[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g[k * inner..(k + 1) * inner])
                    {
                        *d += s;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Matrix product of `M×K` by `K×N`, or batched `B×M×K` by `B×K×N`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => return Err(mismatch()),
        };
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                false,
                false,
                m,
                k,
                n,
                &self.data()[bi * m * k..(bi + 1) * m * k],
                &other.data()[bi * k * n..(bi + 1) * k * n],
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(Tensor::from_op(
            "matmul",
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p| {
                let (a, b) = (p[0].data(), p[1].data());
                // a.grad += g·bᵀ, b.grad += aᵀ·g
                let ga = wants(p, 0).then(|| {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        gemm(
                            false,
                            true,
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &b[bi * k * n..(bi + 1) * k * n],
                            T::zero(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    ga
                });
                let gb = wants(p, 1).then(|| {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        gemm(
                            true,
                            false,
                            k,
                            m,
                            n,
                            &a[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            T::zero(),
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Divide every row (last axis) by `sqrt(sum of squares + eps)`.
    pub fn l2_normalize_rows(&self, eps: T) -> Result<Tensor<T>> {
        if eps <= T::zero() {
            return Err(Error::Contract(format!(
                "l2_normalize_rows: eps must be > 0, got {eps}"
            )));
        }
        let cols = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("l2_normalize_rows", "rank-0 input"))?;
        let x = self.data();
        let rows = x.len() / cols;
        let mut inv_norm = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let ss: T = row.iter().map(|&v| v * v).sum();
            let inv = T::one() / (ss + eps).sqrt();
            inv_norm.push(inv);
            out.extend(row.iter().map(|&v| v * inv));
        }
        let y = out.clone();
        Ok(Tensor::from_op(
            "l2_normalize_rows",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = (gr[c] - yr[c] * dot) * inv_norm[r];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `x` of shape `N×M` plus a bias row of length `M` added to every row.
    pub fn add_row_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let m = *self.shape().last().unwrap_or(&0);
        if bias.numel() != m || self.rank() != 2 {
            return Err(Error::shape(
                "add_row_bias",
                format!("{:?} + bias {:?}", self.shape(), bias.shape()),
            ));
        }
        let b = bias.data();
        let data = self
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &b)| x + b))
            .collect();
        Ok(Tensor::from_op(
            "add_row_bias",
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, p| {
                let gb = wants(p, 1).then(|| {
                    let mut gb = vec![T::zero(); m];
                    for row in g.chunks(m) {
                        for (d, &v) in gb.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    gb
                });
                vec![wants(p, 0).then(|| g.to_vec()), gb]
            }),
        ))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor` on the way back.
    pub fn scale_grad(&self, factor: T) -> Tensor<T> {
        Tensor::from_op(
            "scale_grad",
            self.shape().to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|&v| v * factor).collect())]),
        )
    }
}

/// Copy `data` (row-major, `shape`) into the layout given by axis permutation `perm`.
pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    loop {
        out.push(data[src]);
        // odometer increment over the output index
        let mut d = rank;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}
