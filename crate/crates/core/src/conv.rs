//! Standard convolutional building blocks over `B×C×H×W` tensors.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tensor};

/// Weights and geometry of a 2-D convolution.
///
/// `weight` is `outC×inC×k×k`; `bias`, when present, has `outC` entries.
#[derive(Debug, Clone)]
pub struct Conv2dParams<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> Conv2dParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize) -> Self {
        Conv2dParams {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Shape bookkeeping shared by the standard and deformable convolutions.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new<T: Element>(
        op: &'static str,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (is, ws) = (input.shape(), weight.shape());
        if is.len() != 4 {
            return Err(Error::shape(
                op,
                format!("input must be B×C×H×W, got {is:?}"),
            ));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape(
                op,
                format!("weight must be outC×inC×k×k, got {ws:?}"),
            ));
        }
        if ws[1] != is[1] {
            return Err(Error::shape(
                op,
                format!("input channels {} vs weight {ws:?} (input {is:?})", is[1]),
            ));
        }
        if let Some(b) = bias {
            if b.numel() != ws[0] {
                return Err(Error::shape(
                    op,
                    format!("bias {:?} for {} output channels", b.shape(), ws[0]),
                ));
            }
        }
        if stride == 0 {
            return Err(Error::Config(format!("{op}: stride must be positive")));
        }
        let k = ws[2];
        let (h, w) = (is[2], is[3]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                op,
                format!("kernel {k} with padding {pad} does not fit {h}×{w} input"),
            ));
        }
        Ok(ConvGeom {
            batch: is[0],
            c_in: is[1],
            h,
            w,
            c_out: ws[0],
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Rows of the column matrix (`inC·k·k`).
    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Output positions per image.
    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_size(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_size(&self) -> usize {
        self.c_out * self.positions()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input coordinate hit by kernel tap `t` at output index `o`, or `None`
    /// when it lands in the zero padding.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let v = (o * self.stride + t) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < limit).then_some(v as usize)
    }

    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let p = self.positions();
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.src(oy, ky, self.h) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                for (ox, d) in line.iter_mut().enumerate() {
                                    *d = match self.src(ox, kx, self.w) {
                                        Some(ix) => plane[iy * self.w + ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Element>(&self, cols: &[T], gx: &mut [T]) {
        let p = self.positions();
        for c in 0..self.c_in {
            let plane = &mut gx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let Some(iy) = self.src(oy, ky, self.h) else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                plane[iy * self.w + ix] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Multiply a column matrix by the weights and add the bias: one image.
pub(crate) fn project_columns<T: Element>(
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
    cols: &[T],
    out: &mut [T],
) {
    let p = g.positions();
    gemm(
        false,
        false,
        g.c_out,
        g.col_rows(),
        p,
        weight,
        cols,
        T::zero(),
        out,
    );
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(p).zip(b) {
            for v in row {
                *v += bv;
            }
        }
    }
}

/// Weight and bias gradients plus column gradients for one image.
pub(crate) fn project_columns_backward<T: Element>(
    g: &ConvGeom,
    weight: &[T],
    cols: &[T],
    grad_out: &[T],
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
    grad_cols: Option<&mut [T]>,
) {
    let p = g.positions();
    let kk = g.col_rows();
    if let Some(gw) = grad_weight {
        gemm(false, true, g.c_out, p, kk, grad_out, cols, T::one(), gw);
    }
    if let Some(gb) = grad_bias {
        for (d, row) in gb.iter_mut().zip(grad_out.chunks(p)) {
            *d += row.iter().copied().sum();
        }
    }
    if let Some(gc) = grad_cols {
        gemm(true, false, kk, g.c_out, p, weight, grad_out, T::zero(), gc);
    }
}

/// 2-D cross-correlation (no kernel flip) with zero padding.
pub fn conv2d<T: Element>(input: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let g = ConvGeom::new(
        "conv2d",
        input,
        &p.weight,
        p.bias.as_ref(),
        p.stride,
        p.padding,
    )?;
    let x = input.data();
    let wt = p.weight.data();
    let bias = p.bias.as_ref().map(|b| b.data());
    let mut out = vec![T::zero(); g.batch * g.out_size()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.positions()]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.in_size()..(b + 1) * g.in_size()];
        let ob = &mut out[b * g.out_size()..(b + 1) * g.out_size()];
        if g.is_pointwise() {
            project_columns(&g, wt, bias, xb, ob);
        } else {
            g.im2col(xb, &mut cols);
            project_columns(&g, wt, bias, &cols, ob);
        }
    }

    let mut parents = vec![input.clone(), p.weight.clone()];
    if let Some(b) = &p.bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        "conv2d",
        vec![g.batch, g.c_out, g.oh, g.ow],
        out,
        parents,
        Box::new(move |grad, ps| {
            let x = ps[0].data();
            let wt = ps[1].data();
            let want_x = ps[0].requires_grad();
            let want_w = ps[1].requires_grad();
            let want_b = ps.get(2).is_some_and(|b| b.requires_grad());
            let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
            let mut gw = want_w.then(|| vec![T::zero(); wt.len()]);
            let mut gb = want_b.then(|| vec![T::zero(); g.c_out]);
            let pointwise = g.is_pointwise();
            let mut cols = vec![
                T::zero();
                if pointwise {
                    0
                } else {
                    g.col_rows() * g.positions()
                }
            ];
            let mut gcols = vec![
                T::zero();
                if want_x {
                    g.col_rows() * g.positions()
                } else {
                    0
                }
            ];
            for b in 0..g.batch {
                let xb = &x[b * g.in_size()..(b + 1) * g.in_size()];
                let gob = &grad[b * g.out_size()..(b + 1) * g.out_size()];
                let colsb: &[T] = if pointwise {
                    xb
                } else {
                    if want_w {
                        g.im2col(xb, &mut cols);
                    }
                    &cols
                };
                project_columns_backward(
                    &g,
                    wt,
                    colsb,
                    gob,
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                    want_x.then_some(gcols.as_mut_slice()),
                );
                if let Some(gx) = gx.as_mut() {
                    let gxb = &mut gx[b * g.in_size()..(b + 1) * g.in_size()];
                    if pointwise {
                        for (d, &s) in gxb.iter_mut().zip(&gcols) {
                            *d += s;
                        }
                    } else {
                        g.col2im_add(&gcols, gxb);
                    }
                }
            }
            let mut out = vec![gx, gw];
            if ps.len() == 3 {
                out.push(gb);
            }
            out
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running averages.
    Training,
    /// Normalize with the running averages.
    Inference,
}

/// Per-channel batch normalization state.
#[derive(Debug, Clone)]
pub struct BatchNormState<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    pub mode: BnMode,
}

impl<T: Element> BatchNormState<T> {
    /// gamma = 1, beta = 0, running stats (0, 1), momentum 0.1, eps 1e-5.
    pub fn new(channels: usize, mode: BnMode) -> Result<Self> {
        Ok(BatchNormState {
            gamma: Tensor::param(vec![T::one(); channels], &[channels])?,
            beta: Tensor::param(vec![T::zero(); channels], &[channels])?,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
            mode,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Batch normalization over the `B, H, W` axes of a `B×C×H×W` tensor.
///
/// In training mode the running statistics in `state` are updated by an
/// exponential moving average (unbiased variance); gamma and beta are
/// applied last in both modes.
pub fn batchnorm2d<T: Element>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 4 || s[1] != state.channels() || state.beta.numel() != s[1] {
        return Err(Error::shape(
            "batchnorm2d",
            format!("input {s:?} vs {} channels", state.channels()),
        ));
    }
    if state.eps <= T::zero() {
        return Err(Error::Contract("batchnorm2d: eps must be > 0".into()));
    }
    let (batch, ch, hw) = (s[0], s[1], s[2] * s[3]);
    let n = batch * hw;
    let x = input.data();
    let gamma = state.gamma.data();
    let beta = state.beta.data();
    let at = move |b: usize, c: usize| (b * ch + c) * hw;

    let (mean, inv_std): (Vec<T>, Vec<T>) = match state.mode {
        BnMode::Training => {
            if n < 2 {
                return Err(Error::DegenerateStatistics(n));
            }
            let nf = T::lit(n as f64);
            let mut mean = vec![T::zero(); ch];
            let mut var = vec![T::zero(); ch];
            for c in 0..ch {
                let mut acc = T::zero();
                for b in 0..batch {
                    acc += x[at(b, c)..at(b, c) + hw].iter().copied().sum::<T>();
                }
                let m = acc / nf;
                let mut sq = T::zero();
                for b in 0..batch {
                    sq += x[at(b, c)..at(b, c) + hw]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<T>();
                }
                mean[c] = m;
                var[c] = sq / nf;
            }
            let mo = state.momentum;
            let unbias = nf / T::lit((n - 1) as f64);
            for c in 0..ch {
                state.running_mean[c] = (T::one() - mo) * state.running_mean[c] + mo * mean[c];
                state.running_var[c] =
                    (T::one() - mo) * state.running_var[c] + mo * var[c] * unbias;
            }
            let inv = var
                .iter()
                .map(|&v| T::one() / (v + state.eps).sqrt())
                .collect();
            (mean, inv)
        }
        BnMode::Inference => (
            state.running_mean.clone(),
            state
                .running_var
                .iter()
                .map(|&v| T::one() / (v + state.eps).sqrt())
                .collect(),
        ),
    };

    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let r = at(b, c)..at(b, c) + hw;
            for i in r {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = gamma[c] * h + beta[c];
            }
        }
    }

    let training = state.mode == BnMode::Training;
    Ok(Tensor::from_op(
        "batchnorm2d",
        s.to_vec(),
        out,
        vec![input.clone(), state.gamma.clone(), state.beta.clone()],
        Box::new(move |g, ps| {
            let gamma = ps[1].data();
            let mut dgamma = vec![T::zero(); ch];
            let mut dbeta = vec![T::zero(); ch];
            for b in 0..batch {
                for c in 0..ch {
                    for i in at(b, c)..at(b, c) + hw {
                        dgamma[c] += g[i] * xhat[i];
                        dbeta[c] += g[i];
                    }
                }
            }
            let gx = ps[0].requires_grad().then(|| {
                let mut gx = vec![T::zero(); g.len()];
                let nf = T::lit(n as f64);
                for c in 0..ch {
                    let k = gamma[c] * inv_std[c];
                    // dbeta = Σ g, dgamma = Σ g·x̂
                    let (sum_g, sum_gx) = (dbeta[c], dgamma[c]);
                    for b in 0..batch {
                        for i in at(b, c)..at(b, c) + hw {
                            gx[i] = if training {
                                k * (g[i] - sum_g / nf - xhat[i] * sum_gx / nf)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                gx
            });
            vec![
                gx,
                ps[1].requires_grad().then_some(dgamma),
                ps[2].requires_grad().then_some(dbeta),
            ]
        }),
    ))
}

/// 2×2 max pooling with stride 2 (floor on odd sizes). Gradients go to the
/// first maximal element of each window in row-major order.
pub fn maxpool2x2<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::shape(
            "maxpool2x2",
            format!("need B×C×H×W with H, W ≥ 2, got {s:?}"),
        ));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let n_in = x.len();
    Ok(Tensor::from_op(
        "maxpool2x2",
        vec![s[0], s[1], oh, ow],
        out,
        vec![input.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); n_in];
            for (&i, &v) in argmax.iter().zip(g) {
                gx[i] += v;
            }
            vec![Some(gx)]
        }),
    ))
}

/// Affine map `input·weights + bias` for `B×D` input and `D×M` weights.
pub fn fully_connected<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if input.rank() != 2 || weights.rank() != 2 || input.shape()[1] != weights.shape()[0] {
        return Err(Error::shape(
            "fully_connected",
            format!("input {:?} vs weights {:?}", input.shape(), weights.shape()),
        ));
    }
    input.matmul(weights)?.add_row_bias(bias)
}
