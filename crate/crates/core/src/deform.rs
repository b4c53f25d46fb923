//! Deformable 2-D convolution: every kernel tap samples the input at a
//! learned fractional offset, read by bilinear interpolation.
//!
//! Offset channel layout is tap-major with interleaved pairs: channels
//! `2i` and `2i+1` hold `(Δx, Δy)` of kernel tap `i`, taps in row-major
//! kernel order. One offset field is shared by all input channels.

use crate::conv::{conv2d, project_columns, project_columns_backward, Conv2dParams, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// One of the four interpolation neighbours: flat index into an `H×W`
/// plane, its weight, and the weight's derivatives w.r.t. `x` and `y`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap<T> {
    pub idx: usize,
    pub w: T,
    pub dwdx: T,
    pub dwdy: T,
}

/// Neighbours of `(x, y)` that lie inside an `h×w` plane. Positions with
/// `x ∉ (-1, w)` or `y ∉ (-1, h)` have none.
pub(crate) fn bilinear_taps<T: Element>(h: usize, w: usize, x: T, y: T) -> ([Tap<T>; 4], usize) {
    let empty = Tap {
        idx: 0,
        w: T::zero(),
        dwdx: T::zero(),
        dwdy: T::zero(),
    };
    let mut taps = [empty; 4];
    let neg1 = -T::one();
    if !(x > neg1 && y > neg1 && x < T::lit(w as f64) && y < T::lit(h as f64)) {
        return (taps, 0);
    }
    let (x0f, y0f) = (x.floor(), y.floor());
    let (lx, ly) = (x - x0f, y - y0f);
    let (hx, hy) = (T::one() - lx, T::one() - ly);
    let x0 = x0f.to_f64() as isize;
    let y0 = y0f.to_f64() as isize;
    let corners = [
        (y0, x0, hy * hx, -hy, -hx),
        (y0, x0 + 1, hy * lx, hy, -lx),
        (y0 + 1, x0, ly * hx, -ly, hx),
        (y0 + 1, x0 + 1, ly * lx, ly, lx),
    ];
    let mut n = 0;
    for (yy, xx, wt, dx, dy) in corners {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            taps[n] = Tap {
                idx: yy as usize * w + xx as usize,
                w: wt,
                dwdx: dx,
                dwdy: dy,
            };
            n += 1;
        }
    }
    (taps, n)
}

/// Bilinear read of every channel of a `C×H×W` feature at `coords = [x, y]`.
///
/// Differentiable w.r.t. both the feature values and the coordinates.
/// Neighbours outside the plane read as zero.
pub fn bilinear_sample<T: Element>(feature: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    let s = feature.shape();
    if s.len() != 3 || coords.numel() != 2 {
        return Err(Error::shape(
            "bilinear_sample",
            format!(
                "feature {s:?} (want C×H×W), coords {:?} (want 2)",
                coords.shape()
            ),
        ));
    }
    let (x, y) = (coords.data()[0], coords.data()[1]);
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::Numeric(format!(
            "bilinear_sample at non-finite ({x}, {y})"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (taps, n) = bilinear_taps(h, w, x, y);
    let taps = taps[..n].to_vec();
    let f = feature.data();
    let out: Vec<T> = (0..c)
        .map(|ch| {
            let plane = &f[ch * h * w..(ch + 1) * h * w];
            taps.iter().map(|t| t.w * plane[t.idx]).sum()
        })
        .collect();
    Ok(Tensor::from_op(
        "bilinear_sample",
        vec![c],
        out,
        vec![feature.clone(), coords.clone()],
        Box::new(move |g, ps| {
            let f = ps[0].data();
            let gf = ps[0].requires_grad().then(|| {
                let mut gf = vec![T::zero(); f.len()];
                for ch in 0..c {
                    for t in &taps {
                        gf[ch * h * w + t.idx] += g[ch] * t.w;
                    }
                }
                gf
            });
            let gc = ps[1].requires_grad().then(|| {
                let (mut gx, mut gy) = (T::zero(), T::zero());
                for ch in 0..c {
                    for t in &taps {
                        let v = f[ch * h * w + t.idx];
                        gx += g[ch] * t.dwdx * v;
                        gy += g[ch] * t.dwdy * v;
                    }
                }
                vec![gx, gy]
            });
            vec![gf, gc]
        }),
    ))
}

/// Main kernel plus the convolution that predicts its offsets.
#[derive(Debug, Clone)]
pub struct DeformConvParams<T: Element> {
    pub main: Conv2dParams<T>,
    /// Must produce `2k²` channels at the main convolution's output size.
    pub offset: Conv2dParams<T>,
    /// When false, no gradient reaches the offset predictor.
    pub offset_trainable: bool,
}

/// Offset field `B×2k²×H'×W'` predicted by a plain convolution.
pub fn predict_offsets<T: Element>(
    input: &Tensor<T>,
    p: &DeformConvParams<T>,
) -> Result<Tensor<T>> {
    let k = p.main.kernel();
    if p.offset.out_channels() != 2 * k * k {
        return Err(Error::shape(
            "predict_offsets",
            format!(
                "offset predictor has {} output channels, kernel {k}×{k} needs {}",
                p.offset.out_channels(),
                2 * k * k
            ),
        ));
    }
    let field = if p.offset_trainable {
        conv2d(input, &p.offset)?
    } else {
        let frozen = Conv2dParams::new(
            p.offset.weight.detach(),
            p.offset.bias.as_ref().map(Tensor::detach),
            p.offset.stride,
            p.offset.padding,
        );
        conv2d(input, &frozen)?
    };
    let main = ConvGeom::new(
        "predict_offsets",
        input,
        &p.main.weight,
        None,
        p.main.stride,
        p.main.padding,
    )?;
    if field.shape()[2] != main.oh || field.shape()[3] != main.ow {
        return Err(Error::shape(
            "predict_offsets",
            format!(
                "offset field {:?} vs convolution output {}×{}",
                field.shape(),
                main.oh,
                main.ow
            ),
        ));
    }
    Ok(field)
}

/// Deformable convolution whose offsets come from `p.offset`.
pub fn deform_conv2d<T: Element>(input: &Tensor<T>, p: &DeformConvParams<T>) -> Result<Tensor<T>> {
    let offsets = predict_offsets(input, p)?;
    deform_conv2d_with_offsets(input, &offsets, &p.main)
}

struct DeformGeom {
    conv: ConvGeom,
}

impl DeformGeom {
    /// Sampling position `(x, y)` of tap `(ky, kx)` at output `(oy, ox)`.
    #[inline]
    fn base(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> (f64, f64) {
        let g = &self.conv;
        (
            (ox * g.stride + kx) as f64 - g.pad as f64,
            (oy * g.stride + ky) as f64 - g.pad as f64,
        )
    }

    fn offsets_len(&self) -> usize {
        2 * self.conv.k * self.conv.k * self.conv.positions()
    }

    /// Bilinearly sampled column matrix for one image, plus the taps used.
    fn columns<T: Element>(
        &self,
        x: &[T],
        off: &[T],
        cols: &mut [T],
        taps: &mut Vec<([Tap<T>; 4], usize)>,
    ) {
        let g = &self.conv;
        let p = g.positions();
        let kk = g.k * g.k;
        let plane = g.h * g.w;
        taps.clear();
        for t in 0..kk {
            let (ky, kx) = (t / g.k, t % g.k);
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let pos = oy * g.ow + ox;
                    let (bx, by) = self.base(oy, ox, ky, kx);
                    let sx = T::lit(bx) + off[(2 * t) * p + pos];
                    let sy = T::lit(by) + off[(2 * t + 1) * p + pos];
                    taps.push(bilinear_taps(g.h, g.w, sx, sy));
                }
            }
        }
        for c in 0..g.c_in {
            let xc = &x[c * plane..(c + 1) * plane];
            for t in 0..kk {
                let row = &mut cols[(c * kk + t) * p..(c * kk + t + 1) * p];
                for (pos, v) in row.iter_mut().enumerate() {
                    let (tp, n) = &taps[t * p + pos];
                    *v = tp[..*n].iter().map(|tap| tap.w * xc[tap.idx]).sum();
                }
            }
        }
    }
}

/// Deformable convolution with an explicit offset field `B×2k²×H'×W'`.
///
/// Differentiable w.r.t. input, kernel weights, bias, and offsets.
pub fn deform_conv2d_with_offsets<T: Element>(
    input: &Tensor<T>,
    offsets: &Tensor<T>,
    main: &Conv2dParams<T>,
) -> Result<Tensor<T>> {
    let conv = ConvGeom::new(
        "deform_conv2d",
        input,
        &main.weight,
        main.bias.as_ref(),
        main.stride,
        main.padding,
    )?;
    let geom = DeformGeom { conv };
    let want = [conv.batch, 2 * conv.k * conv.k, conv.oh, conv.ow];
    if offsets.shape() != want {
        return Err(Error::shape(
            "deform_conv2d",
            format!("offset field {:?}, expected {want:?}", offsets.shape()),
        ));
    }
    if let Some(bad) = offsets.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "deform_conv2d: non-finite offset {bad}"
        )));
    }

    let x = input.data();
    let off = offsets.data();
    let bias = main.bias.as_ref().map(|b| b.data());
    let mut out = vec![T::zero(); conv.batch * conv.out_size()];
    let mut cols = vec![T::zero(); conv.col_rows() * conv.positions()];
    let mut taps = Vec::new();
    for b in 0..conv.batch {
        geom.columns(
            &x[b * conv.in_size()..(b + 1) * conv.in_size()],
            &off[b * geom.offsets_len()..(b + 1) * geom.offsets_len()],
            &mut cols,
            &mut taps,
        );
        project_columns(
            &conv,
            main.weight.data(),
            bias,
            &cols,
            &mut out[b * conv.out_size()..(b + 1) * conv.out_size()],
        );
    }

    let mut parents = vec![input.clone(), offsets.clone(), main.weight.clone()];
    if let Some(bias) = &main.bias {
        parents.push(bias.clone());
    }
    Ok(Tensor::from_op(
        "deform_conv2d",
        vec![conv.batch, conv.c_out, conv.oh, conv.ow],
        out,
        parents,
        Box::new(move |grad, ps| {
            let g = &geom.conv;
            let (x, off, wt) = (ps[0].data(), ps[1].data(), ps[2].data());
            let want_x = ps[0].requires_grad();
            let want_off = ps[1].requires_grad();
            let want_w = ps[2].requires_grad();
            let want_b = ps.get(3).is_some_and(|b| b.requires_grad());
            let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
            let mut goff = want_off.then(|| vec![T::zero(); off.len()]);
            let mut gw = want_w.then(|| vec![T::zero(); wt.len()]);
            let mut gb = want_b.then(|| vec![T::zero(); g.c_out]);
            let p = g.positions();
            let kk = g.k * g.k;
            let plane = g.h * g.w;
            let mut cols = vec![T::zero(); g.col_rows() * p];
            let mut gcols = vec![T::zero(); g.col_rows() * p];
            let mut taps = Vec::new();
            let need_cols_grad = want_x || want_off;
            for b in 0..g.batch {
                let xb = &x[b * g.in_size()..(b + 1) * g.in_size()];
                let ob = &off[b * geom.offsets_len()..(b + 1) * geom.offsets_len()];
                geom.columns(xb, ob, &mut cols, &mut taps);
                project_columns_backward(
                    g,
                    wt,
                    &cols,
                    &grad[b * g.out_size()..(b + 1) * g.out_size()],
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                    need_cols_grad.then_some(gcols.as_mut_slice()),
                );
                if !need_cols_grad {
                    continue;
                }
                for c in 0..g.c_in {
                    let xc = &xb[c * plane..(c + 1) * plane];
                    for t in 0..kk {
                        let row = &gcols[(c * kk + t) * p..(c * kk + t + 1) * p];
                        for (pos, &gv) in row.iter().enumerate() {
                            let (tp, n) = &taps[t * p + pos];
                            if let Some(gx) = gx.as_mut() {
                                let base = b * g.in_size() + c * plane;
                                for tap in &tp[..*n] {
                                    gx[base + tap.idx] += gv * tap.w;
                                }
                            }
                            if let Some(goff) = goff.as_mut() {
                                let (mut dx, mut dy) = (T::zero(), T::zero());
                                for tap in &tp[..*n] {
                                    dx += tap.dwdx * xc[tap.idx];
                                    dy += tap.dwdy * xc[tap.idx];
                                }
                                let base = b * geom.offsets_len();
                                goff[base + (2 * t) * p + pos] += gv * dx;
                                goff[base + (2 * t + 1) * p + pos] += gv * dy;
                            }
                        }
                    }
                }
            }
            let mut out = vec![gx, goff, gw];
            if ps.len() == 4 {
                out.push(gb);
            }
            out
        }),
    ))
}
