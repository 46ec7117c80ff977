//! Shape manipulation, elementwise arithmetic, reductions and matmul.

use super::{common_precision, gemm, numel_of, strides_of, Tensor};
use crate::error::{Error, Result};

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        out.extend_from_slice(data);
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_step = step[last];
    loop {
        for i in 0..inner {
            out.push(data[offset + i * inner_step]);
        }
        // advance the multi-index over all but the innermost axis
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += step[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= step[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
fn blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel_of(&shape[..axis]),
        shape[axis],
        numel_of(&shape[axis + 1..]),
    )
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            self.precision(),
            vec![self.clone()],
            |_, _, g| vec![Some(g.to_vec())],
        )
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} for rank {rank}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_data(self.data(), self.shape(), axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let grad_shape = out_shape.clone();
        Tensor::from_op(
            "permute",
            out_shape,
            data,
            self.precision(),
            vec![self.clone()],
            move |_, _, g| vec![Some(permute_data(g, &grad_shape, &inverse))],
        )
    }

    /// Swaps the first two axes of a rank-3 tensor (`H×W×C -> W×H×C`).
    pub fn transpose_spatial(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::dim("transpose_spatial", format!("{:?}", self.shape())));
        }
        self.permute(&[1, 0, 2])
    }

    /// The sub-range `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::dim(
                "narrow",
                format!("axis {axis} range {start}+{len} of {:?}", self.shape()),
            ));
        }
        let (outer, extent, inner) = blocks(self.shape(), axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        Tensor::from_op(
            "narrow",
            out_shape,
            data,
            self.precision(),
            vec![self.clone()],
            move |_, _, g| {
                let mut gi = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    gi[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gi)]
            },
        )
    }

    /// Index `index` along `axis`, dropping that axis.
    pub fn select(&self, axis: usize, index: usize) -> Result<Tensor> {
        let n = self.narrow(axis, index, 1)?;
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        n.reshape(&shape)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let precision = common_precision("concat", &refs)?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::dim("concat", format!("axis {axis} for rank {rank}")));
        }
        for t in tensors {
            let ok = t.rank() == rank
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", t.shape(), first.shape()),
                ));
            }
        }
        let (outer, _, inner) = blocks(first.shape(), axis);
        let extents: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &e) in tensors.iter().zip(&extents) {
                data.extend_from_slice(&t.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        Tensor::from_op(
            "concat",
            out_shape,
            data,
            precision,
            tensors.to_vec(),
            move |_, _, g| {
                let mut grads: Vec<Vec<f64>> =
                    extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gi, &e) in grads.iter_mut().zip(&extents) {
                        gi.extend_from_slice(&g[pos..pos + e * inner]);
                        pos += e * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            },
        )
    }

    /// Pads `axis` with `before`/`after` slabs filled with `value`. The
    /// padded entries are constants; no gradient flows into them.
    pub fn pad_axis(&self, axis: usize, before: usize, after: usize, value: f64) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::dim("pad_axis", format!("axis {axis} of {:?}", self.shape())));
        }
        let (outer, extent, inner) = blocks(self.shape(), axis);
        let padded = before + extent + after;
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = padded;
        let mut data = Vec::with_capacity(outer * padded * inner);
        for o in 0..outer {
            data.extend(std::iter::repeat_n(value, before * inner));
            data.extend_from_slice(&self.data()[o * extent * inner..(o + 1) * extent * inner]);
            data.extend(std::iter::repeat_n(value, after * inner));
        }
        Tensor::from_op(
            "pad_axis",
            out_shape,
            data,
            self.precision(),
            vec![self.clone()],
            move |_, _, g| {
                let mut gi = Vec::with_capacity(outer * extent * inner);
                for o in 0..outer {
                    let base = (o * padded + before) * inner;
                    gi.extend_from_slice(&g[base..base + extent * inner]);
                }
                vec![Some(gi)]
            },
        )
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let precision = common_precision("add", &[self, other])?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            precision,
            vec![self.clone(), other.clone()],
            |_, _, g| vec![Some(g.to_vec()), Some(g.to_vec())],
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let precision = common_precision("sub", &[self, other])?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            precision,
            vec![self.clone(), other.clone()],
            |_, _, g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        )
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let precision = common_precision("mul", &[self, other])?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            precision,
            vec![self.clone(), other.clone()],
            |p, _, g| {
                let ga = g.iter().zip(p[1].data()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(p[0].data()).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            },
        )
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            self.precision(),
            vec![self.clone()],
            move |_, _, g| vec![Some(g.iter().map(|v| v * factor).collect())],
        )
    }

    /// `x[..., c] + bias[c]`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let c = *self.shape().last().unwrap_or(&1);
        if bias.shape() != [c] {
            return Err(Error::dim("add_bias", format!("{:?} + {:?}", self.shape(), bias.shape())));
        }
        let precision = common_precision("add_bias", &[self, bias])?;
        let b = bias.data();
        let data = self
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        Tensor::from_op(
            "add_bias",
            self.shape().to_vec(),
            data,
            precision,
            vec![self.clone(), bias.clone()],
            move |_, _, g| {
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![Some(g.to_vec()), Some(gb)]
            },
        )
    }

    /// `x[c, h, w] * map[h, w]`, broadcasting the map over the leading axis.
    pub fn mul_spatial(&self, map: &Tensor) -> Result<Tensor> {
        if self.rank() != 3 || map.shape() != &self.shape()[1..] {
            return Err(Error::dim("mul_spatial", format!("{:?} * {:?}", self.shape(), map.shape())));
        }
        let precision = common_precision("mul_spatial", &[self, map])?;
        let hw = map.numel();
        let m = map.data();
        let data = self
            .data()
            .chunks(hw)
            .flat_map(|plane| plane.iter().zip(m).map(|(x, w)| x * w))
            .collect();
        Tensor::from_op(
            "mul_spatial",
            self.shape().to_vec(),
            data,
            precision,
            vec![self.clone(), map.clone()],
            move |p, _, g| {
                let x = p[0].data();
                let m = p[1].data();
                let mut gx = Vec::with_capacity(g.len());
                let mut gm = vec![0.0; hw];
                for (gp, xp) in g.chunks(hw).zip(x.chunks(hw)) {
                    for i in 0..hw {
                        gx.push(gp[i] * m[i]);
                        gm[i] += gp[i] * xp[i];
                    }
                }
                vec![Some(gx), Some(gm)]
            },
        )
    }

    pub fn sum(&self) -> Result<Tensor> {
        let n = self.numel();
        let total: f64 = self.data().iter().sum();
        Tensor::from_op(
            "sum",
            vec![],
            vec![total],
            self.precision(),
            vec![self.clone()],
            move |_, _, g| vec![Some(vec![g[0]; n])],
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Matrix product over the last two axes. Leading (batch) axes must match,
    /// or `other` may be a plain matrix shared across the batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul_impl(self, other, false)
    }

    /// `self @ other^T` over the last two axes.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        matmul_impl(self, other, true)
    }
}

fn matmul_impl(a: &Tensor, b: &Tensor, b_t: bool) -> Result<Tensor> {
    let op = if b_t { "matmul_t" } else { "matmul" };
    let precision = common_precision(op, &[a, b])?;
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::dim(op, format!("{:?} @ {:?}", a.shape(), b.shape())));
    }
    let (lead_a, mat_a) = a.shape().split_at(a.rank() - 2);
    let (lead_b, mat_b) = b.shape().split_at(b.rank() - 2);
    let (m, k) = (mat_a[0], mat_a[1]);
    let (kb, n) = if b_t { (mat_b[1], mat_b[0]) } else { (mat_b[0], mat_b[1]) };
    let shared_b = lead_b.is_empty();
    if k != kb || (!shared_b && lead_a != lead_b) {
        return Err(Error::dim(op, format!("{:?} @ {:?}", a.shape(), b.shape())));
    }
    let mut out_shape = lead_a.to_vec();
    out_shape.extend([m, n]);

    if shared_b {
        // a batch against one matrix is a single tall product
        let rows = numel_of(lead_a) * m;
        let mut data = vec![0.0; rows * n];
        gemm(rows, k, n, a.data(), false, b.data(), b_t, &mut data, false);
        return Tensor::from_op(op, out_shape, data, precision, vec![a.clone(), b.clone()], move |p, _, g| {
            let mut ga = vec![0.0; rows * k];
            // dA = dC · Bᵀ
            gemm(rows, n, k, g, false, p[1].data(), !b_t, &mut ga, false);
            let mut gb = vec![0.0; k * n];
            if b_t {
                // B stored n×k: dB = dCᵀ · A
                gemm(n, rows, k, g, true, p[0].data(), false, &mut gb, false);
            } else {
                gemm(k, rows, n, p[0].data(), true, g, false, &mut gb, false);
            }
            vec![Some(ga), Some(gb)]
        });
    }

    let batch = numel_of(lead_a);
    let mut data = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..],
            false,
            &b.data()[i * k * n..],
            b_t,
            &mut data[i * m * n..],
            false,
        );
    }
    Tensor::from_op(op, out_shape, data, precision, vec![a.clone(), b.clone()], move |p, _, g| {
        let (ad, bd) = (p[0].data(), p[1].data());
        let mut ga = vec![0.0; batch * m * k];
        let mut gb = vec![0.0; batch * k * n];
        for i in 0..batch {
            let gi = &g[i * m * n..(i + 1) * m * n];
            gemm(m, n, k, gi, false, &bd[i * k * n..], !b_t, &mut ga[i * m * k..], false);
            if b_t {
                gemm(n, m, k, gi, true, &ad[i * m * k..], false, &mut gb[i * k * n..], false);
            } else {
                gemm(k, m, n, &ad[i * m * k..], true, gi, false, &mut gb[i * k * n..], false);
            }
        }
        vec![Some(ga), Some(gb)]
    })
}
