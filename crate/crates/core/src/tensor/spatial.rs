//! Convolution, pooling and upsampling on `C×H×W` feature maps.

use super::{common_precision, gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
}

fn out_extent(extent: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Result<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = extent + 2 * pad;
    if padded < span || (padded - span) % stride != 0 {
        return Err(Error::dim(
            "conv2d",
            format!("extent {extent} with kernel {k}, stride {stride}, pad {pad}, dilation {dilation} is not integral"),
        ));
    }
    Ok((padded - span) / stride + 1)
}

impl ConvGeom {
    /// Input coordinate hit by output `o` and kernel tap `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t * self.dilation) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Range of output columns whose source column for tap `b` is in bounds.
    fn valid_cols(&self, b: usize) -> (usize, usize) {
        let lo = (0..self.ow).find(|&o| self.src(o, b, self.w).is_some());
        match lo {
            None => (0, 0),
            Some(lo) => {
                let hi = (lo..self.ow).rev().find(|&o| self.src(o, b, self.w).is_some()).unwrap();
                (lo, hi + 1)
            }
        }
    }

    /// Copies the input samples seen by tap `(a, b)` into `cols` (`cin × oh·ow`).
    fn gather(&self, x: &[f64], a: usize, b: usize, cols: &mut [f64]) {
        let (lo, hi) = self.valid_cols(b);
        let ohw = self.oh * self.ow;
        cols.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..self.cin {
            for oy in 0..self.oh {
                let Some(iy) = self.src(oy, a, self.h) else { continue };
                let row = &x[(ci * self.h + iy) * self.w..(ci * self.h + iy + 1) * self.w];
                let dst = &mut cols[ci * ohw + oy * self.ow..ci * ohw + (oy + 1) * self.ow];
                for ox in lo..hi {
                    dst[ox] = row[ox * self.stride + b * self.dilation - self.pad];
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::gather`].
    fn scatter_add(&self, cols: &[f64], a: usize, b: usize, dx: &mut [f64]) {
        let (lo, hi) = self.valid_cols(b);
        let ohw = self.oh * self.ow;
        for ci in 0..self.cin {
            for oy in 0..self.oh {
                let Some(iy) = self.src(oy, a, self.h) else { continue };
                let row = &mut dx[(ci * self.h + iy) * self.w..(ci * self.h + iy + 1) * self.w];
                let src = &cols[ci * ohw + oy * self.ow..ci * ohw + (oy + 1) * self.ow];
                for ox in lo..hi {
                    row[ox * self.stride + b * self.dilation - self.pad] += src[ox];
                }
            }
        }
    }
}

/// Kernel slice for one tap as a contiguous `cout × cin` matrix.
fn tap_kernel(k: &[f64], cout: usize, cin: usize, kh: usize, kw: usize, a: usize, b: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(cout * cin);
    for co in 0..cout {
        for ci in 0..cin {
            out.push(k[((co * cin + ci) * kh + a) * kw + b]);
        }
    }
    out
}

/// Separable bilinear sampling table for one axis: `(i0, i1, t)` per output.
fn bilinear_table(extent: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..extent * factor)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (extent - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn expect_chw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(op, format!("expected C×H×W, got {:?}", t.shape()))),
    }
}

impl Tensor {
    /// Zero-padded cross-correlation of a `C_in×H×W` map with a
    /// `C_out×C_in×kh×kw` kernel, plus an optional per-channel bias.
    pub fn conv2d(
        &self,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Tensor> {
        let (cin, h, w) = expect_chw(self, "conv2d")?;
        let (cout, kh, kw) = match *kernel.shape() {
            [co, ci, kh, kw] if ci == cin => (co, kh, kw),
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!("kernel {:?} for input {:?}", kernel.shape(), self.shape()),
                ))
            }
        };
        if stride == 0 || dilation == 0 {
            return Err(Error::dim("conv2d", "stride and dilation must be positive"));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::dim("conv2d", format!("bias {:?} for {cout} outputs", b.shape())));
            }
        }
        let mut inputs = vec![self, kernel];
        inputs.extend(bias);
        let precision = common_precision("conv2d", &inputs)?;
        let geom = ConvGeom {
            cin,
            h,
            w,
            oh: out_extent(h, kh, stride, pad, dilation)?,
            ow: out_extent(w, kw, stride, pad, dilation)?,
            stride,
            pad,
            dilation,
        };
        let ohw = geom.oh * geom.ow;
        let mut out = vec![0.0; cout * ohw];
        if let Some(b) = bias {
            for (plane, bv) in out.chunks_mut(ohw).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v = *bv);
            }
        }
        let mut cols = vec![0.0; cin * ohw];
        for a in 0..kh {
            for b in 0..kw {
                geom.gather(self.data(), a, b, &mut cols);
                let kt = tap_kernel(kernel.data(), cout, cin, kh, kw, a, b);
                gemm(cout, cin, ohw, &kt, false, &cols, false, &mut out, true);
            }
        }
        let mut parents = vec![self.clone(), kernel.clone()];
        parents.extend(bias.cloned());
        Tensor::from_op(
            "conv2d",
            vec![cout, geom.oh, geom.ow],
            out,
            precision,
            parents,
            move |p, _, g| {
                let (x, k) = (p[0].data(), p[1].data());
                let want_x = p[0].requires_grad();
                let want_k = p[1].requires_grad();
                let mut gx = want_x.then(|| vec![0.0; cin * h * w]);
                let mut gk = want_k.then(|| vec![0.0; cout * cin * kh * kw]);
                let mut cols = vec![0.0; cin * ohw];
                let mut gk_tap = vec![0.0; cout * cin];
                for a in 0..kh {
                    for b in 0..kw {
                        if let Some(gk) = gk.as_mut() {
                            geom.gather(x, a, b, &mut cols);
                            gemm(cout, ohw, cin, g, false, &cols, true, &mut gk_tap, false);
                            for co in 0..cout {
                                for ci in 0..cin {
                                    gk[((co * cin + ci) * kh + a) * kw + b] = gk_tap[co * cin + ci];
                                }
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            let kt = tap_kernel(k, cout, cin, kh, kw, a, b);
                            gemm(cin, cout, ohw, &kt, true, g, false, &mut cols, false);
                            geom.scatter_add(&cols, a, b, gx);
                        }
                    }
                }
                let mut grads = vec![gx, gk];
                if p.len() == 3 {
                    grads.push(Some(g.chunks(ohw).map(|plane| plane.iter().sum()).collect()));
                }
                grads
            },
        )
    }

    /// Non-overlapping `window×window` pooling.
    pub fn pool2d(&self, kind: PoolKind, window: usize) -> Result<Tensor> {
        let (c, h, w) = expect_chw(self, "pool2d")?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::dim("pool2d", format!("window {window} on {h}×{w}")));
        }
        let (oh, ow) = (h / window, w / window);
        let x = self.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        // flat input index routed to each output (max) or unused (avg)
        let mut argmax = Vec::with_capacity(if kind == PoolKind::Max { c * oh * ow } else { 0 });
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (f64::NEG_INFINITY, 0usize);
                    let mut total = 0.0;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = (ch * h + oy * window + dy) * w + ox * window + dx;
                            total += x[idx];
                            if x[idx] > best.0 {
                                best = (x[idx], idx);
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            out.push(best.0);
                            argmax.push(best.1);
                        }
                        PoolKind::Avg => out.push(total / (window * window) as f64),
                    }
                }
            }
        }
        super::branch::record(argmax.iter().copied());
        let n = c * h * w;
        Tensor::from_op(
            "pool2d",
            vec![c, oh, ow],
            out,
            self.precision(),
            vec![self.clone()],
            move |_, _, g| {
                let mut gx = vec![0.0; n];
                match kind {
                    PoolKind::Max => {
                        for (gv, &idx) in g.iter().zip(&argmax) {
                            gx[idx] += gv;
                        }
                    }
                    PoolKind::Avg => {
                        let norm = 1.0 / (window * window) as f64;
                        for ch in 0..c {
                            for iy in 0..h {
                                for ix in 0..w {
                                    gx[(ch * h + iy) * w + ix] =
                                        g[(ch * oh + iy / window) * ow + ix / window] * norm;
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            },
        )
    }

    /// Reduces each channel map to one value: `C×H×W -> C`.
    pub fn global_pool(&self, kind: PoolKind) -> Result<Tensor> {
        let (c, h, w) = expect_chw(self, "global_pool")?;
        let hw = h * w;
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for plane in self.data().chunks(hw) {
            match kind {
                PoolKind::Max => {
                    let (i, v) = plane
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                    out.push(v);
                    argmax.push(i);
                }
                PoolKind::Avg => out.push(plane.iter().sum::<f64>() / hw as f64),
            }
        }
        super::branch::record(argmax.iter().copied());
        Tensor::from_op(
            "global_pool",
            vec![c],
            out,
            self.precision(),
            vec![self.clone()],
            move |_, _, g| {
                let mut gx = vec![0.0; c * hw];
                for ch in 0..c {
                    match kind {
                        PoolKind::Max => gx[ch * hw + argmax[ch]] = g[ch],
                        PoolKind::Avg => gx[ch * hw..(ch + 1) * hw]
                            .iter_mut()
                            .for_each(|v| *v = g[ch] / hw as f64),
                    }
                }
                vec![Some(gx)]
            },
        )
    }

    /// Bilinear upsampling with half-pixel centers, clamped at the borders.
    /// Accepts `C×H×W` or a single `H×W` map.
    pub fn bilinear_upsample(&self, factor: usize) -> Result<Tensor> {
        let (c, h, w) = match *self.shape() {
            [c, h, w] => (c, h, w),
            [h, w] => (1, h, w),
            _ => return Err(Error::dim("bilinear_upsample", format!("{:?}", self.shape()))),
        };
        if factor == 0 {
            return Err(Error::dim("bilinear_upsample", "factor must be positive"));
        }
        let (fh, fw) = (h * factor, w * factor);
        let rows = bilinear_table(h, factor);
        let cols = bilinear_table(w, factor);
        let x = self.data();
        // along width first, then height
        let mut wide = vec![0.0; c * h * fw];
        for ch in 0..c {
            for y in 0..h {
                let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
                let dst = &mut wide[(ch * h + y) * fw..(ch * h + y + 1) * fw];
                for (d, &(i0, i1, t)) in dst.iter_mut().zip(&cols) {
                    *d = src[i0] + t * (src[i1] - src[i0]);
                }
            }
        }
        let mut out = vec![0.0; c * fh * fw];
        for ch in 0..c {
            for (oy, &(i0, i1, t)) in rows.iter().enumerate() {
                let r0 = (ch * h + i0) * fw;
                let r1 = (ch * h + i1) * fw;
                let dst = (ch * fh + oy) * fw;
                for ox in 0..fw {
                    let (a, b) = (wide[r0 + ox], wide[r1 + ox]);
                    out[dst + ox] = a + t * (b - a);
                }
            }
        }
        let mut shape = self.shape().to_vec();
        let rank = shape.len();
        shape[rank - 2] = fh;
        shape[rank - 1] = fw;
        Tensor::from_op(
            "bilinear_upsample",
            shape,
            out,
            self.precision(),
            vec![self.clone()],
            move |_, _, g| {
                let mut gwide = vec![0.0; c * h * fw];
                for ch in 0..c {
                    for (oy, &(i0, i1, t)) in rows.iter().enumerate() {
                        let src = (ch * fh + oy) * fw;
                        for ox in 0..fw {
                            let gv = g[src + ox];
                            gwide[(ch * h + i0) * fw + ox] += gv * (1.0 - t);
                            gwide[(ch * h + i1) * fw + ox] += gv * t;
                        }
                    }
                }
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        let src = &gwide[(ch * h + y) * fw..(ch * h + y + 1) * fw];
                        let dst = &mut gx[(ch * h + y) * w..(ch * h + y + 1) * w];
                        for (gv, &(i0, i1, t)) in src.iter().zip(&cols) {
                            dst[i0] += gv * (1.0 - t);
                            dst[i1] += gv * t;
                        }
                    }
                }
                vec![Some(gx)]
            },
        )
    }
}
