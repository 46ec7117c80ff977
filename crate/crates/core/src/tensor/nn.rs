//! Nonlinearities and normalizations.

use super::{common_precision, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    pub fn relu(&self) -> Result<Tensor> {
        if super::branch::recording() {
            super::branch::record(self.data().iter().map(|&v| usize::from(v > 0.0)));
        }
        let data = self.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            self.precision(),
            vec![self.clone()],
            |p, _, g| {
                let gx = g
                    .iter()
                    .zip(p[0].data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Some(gx)]
            },
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| sigmoid(v)).collect();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            data,
            self.precision(),
            vec![self.clone()],
            |_, y, g| vec![Some(g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())],
        )
    }

    /// Softmax over the last axis. Entries whose `mask` is `false` are
    /// excluded from the normalization and come out exactly zero.
    pub fn softmax_masked(&self, mask: Option<&[bool]>) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| Error::dim("softmax_masked", "rank 0"))?;
        if let Some(m) = mask {
            if m.len() != self.numel() {
                return Err(Error::dim(
                    "softmax_masked",
                    format!("mask has {} entries for {:?}", m.len(), self.shape()),
                ));
            }
        }
        let mut out = vec![0.0; self.numel()];
        for (row, (x, y)) in self.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[row * n + j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| x[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row });
            }
            let mut denom = 0.0;
            for j in 0..n {
                if keep(j) {
                    let e = (x[j] - max).exp();
                    y[j] = e;
                    denom += e;
                }
            }
            y.iter_mut().for_each(|v| *v /= denom);
        }
        Tensor::from_op(
            "softmax_masked",
            self.shape().to_vec(),
            out,
            self.precision(),
            vec![self.clone()],
            move |_, y, g| {
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), gxr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(gx)]
            },
        )
    }

    /// Normalizes each vector along the last axis to zero mean and unit
    /// (biased) variance, then applies `gamma * x + beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let c = *self.shape().last().ok_or_else(|| Error::dim("layer_norm", "rank 0"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dim(
                "layer_norm",
                format!("{:?} with gamma {:?} beta {:?}", self.shape(), gamma.shape(), beta.shape()),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let precision = common_precision("layer_norm", &[self, gamma, beta])?;
        let rows = self.numel() / c;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        let (gd, bd) = (gamma.data(), beta.data());
        for r in 0..rows {
            let x = &self.data()[r * c..(r + 1) * c];
            let mean = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (x[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = gd[j] * xh + bd[j];
            }
        }
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            precision,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |p, _, g| {
                let gd = p[1].data();
                let mut gx = vec![0.0; g.len()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for r in 0..rows {
                    let gr = &g[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = gr[j] * gd[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                        ggamma[j] += gr[j] * xh[j];
                        gbeta[j] += gr[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        gx[r * c + j] = inv_std[r] * (gr[j] * gd[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            },
        )
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
