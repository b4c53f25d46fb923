//! Naive loop references shared by the oracle and acceptance targets.
#![allow(dead_code)]

use parn::attention::NORM_EPS;
use parn::conv::Conv2dParams;
use parn::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fill(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn t(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
    Tensor::new(data, shape).unwrap()
}

/// Largest `|g − w| / (1 + |w|)`.
pub fn max_dev(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / (1.0 + w.abs()))
        .fold(0.0, f64::max)
}

/// Bilinear read of one `h×w` plane with zeros outside.
pub fn bilinear_ref(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let mut acc = 0.0;
    for (yy, xx) in [
        (y0, x0),
        (y0, x0 + 1.0),
        (y0 + 1.0, x0),
        (y0 + 1.0, x0 + 1.0),
    ] {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            continue;
        }
        let wt = (1.0 - (x - xx).abs()).max(0.0) * (1.0 - (y - yy).abs()).max(0.0);
        acc += wt * plane[yy as usize * w + xx as usize];
    }
    acc
}

#[derive(Debug, Clone)]
pub struct ConvCase {
    pub b: usize,
    pub c: usize,
    pub o: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvCase {
    pub fn random(rng: &mut ChaCha8Rng) -> ConvCase {
        ConvCase {
            b: rng.random_range(1..3),
            c: rng.random_range(1..4),
            o: rng.random_range(1..4),
            h: rng.random_range(3..8),
            w: rng.random_range(3..8),
            k: if rng.random_bool(0.5) { 1 } else { 3 },
            stride: rng.random_range(1..3),
            pad: rng.random_range(0..2),
        }
    }

    pub fn out(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn input_len(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub fn weight_len(&self) -> usize {
        self.o * self.c * self.k * self.k
    }

    pub fn offsets_shape(&self) -> [usize; 4] {
        let (oh, ow) = self.out();
        [self.b, 2 * self.k * self.k, oh, ow]
    }

    pub fn params(&self, wt: &[f64], bias: &[f64]) -> Conv2dParams<f64> {
        Conv2dParams::new(
            t(wt.to_vec(), &[self.o, self.c, self.k, self.k]),
            Some(t(bias.to_vec(), &[self.o])),
            self.stride,
            self.pad,
        )
    }
}

/// Naive deformable convolution. Zero offsets give the plain convolution.
pub fn deform_ref(cs: &ConvCase, x: &[f64], off: &[f64], wt: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow) = cs.out();
    let kk = cs.k * cs.k;
    let mut out = Vec::new();
    for b in 0..cs.b {
        for o in 0..cs.o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..cs.c {
                        let plane = &x[(b * cs.c + c) * cs.h * cs.w..][..cs.h * cs.w];
                        for ky in 0..cs.k {
                            for kx in 0..cs.k {
                                let tap = ky * cs.k + kx;
                                let at = |ch: usize| off[((b * 2 * kk + ch) * oh + oy) * ow + ox];
                                let sx = (ox * cs.stride + kx) as f64 - cs.pad as f64 + at(2 * tap);
                                let sy =
                                    (oy * cs.stride + ky) as f64 - cs.pad as f64 + at(2 * tap + 1);
                                let v = bilinear_ref(plane, cs.h, cs.w, sx, sy);
                                acc += wt[((o * cs.c + c) * cs.k + ky) * cs.k + kx] * v;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// `p1×p2` cosine similarities between the rows of `a` and `b` (`c` columns).
pub fn cosine_ref(a: &[f64], b: &[f64], c: usize) -> Vec<f64> {
    let norm = |r: &[f64]| (r.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
    let mut out = Vec::new();
    for ra in a.chunks(c) {
        for rb in b.chunks(c) {
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out.push(dot / (norm(ra) * norm(rb)));
        }
    }
    out
}

/// Row `i` of the result is `Σ_j m[i][j] · v[j]`; `m` is `p1×p2`, `v` is `p2×c`.
pub fn weighted_rows_ref(m: &[f64], p1: usize, p2: usize, v: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; p1 * c];
    for i in 0..p1 {
        for j in 0..p2 {
            for k in 0..c {
                out[i * c + k] += m[i * p2 + j] * v[j * c + k];
            }
        }
    }
    out
}

/// Transpose of a `rows×cols` matrix.
pub fn transpose_ref(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = m[i * cols + j];
        }
    }
    out
}
