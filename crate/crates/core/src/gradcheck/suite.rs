//! Randomized finite-difference checks over every differentiable operation.
//!
//! Each case draws small random inputs (all dimensions ≤ 6), pushes them
//! through one operation, and reduces the output with a fixed random
//! readout `sum(out ⊙ R)`. Inputs are kept away from non-differentiable
//! points (ReLU zeros, pooling ties, integer sampling coordinates).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradReport};
use crate::attention::{
    cross_attention_map, dca_forward, distribute_cross, distribute_self, embed_channels,
    expand_channels, self_attention_map, to_positions, AttentionVariant, DcaParams,
};
use crate::conv::{
    batchnorm2d, conv2d, fully_connected, maxpool2x2, BatchNormState, BnMode, Conv2dParams,
};
use crate::deform::{bilinear_sample, deform_conv2d, deform_conv2d_with_offsets, DeformConvParams};
use crate::error::{Error, Result};
use crate::model::{relation_head, HeadParams};
use crate::tensor::Tensor;
use crate::train::mse_episode_loss;

/// Gradient factor applied to the corrupted op's output.
const CORRUPT_FACTOR: f64 = 1.5;

/// Minimum distance of ReLU pre-activations from zero.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub trials: usize,
    pub seed: u64,
    pub h: f64,
    pub tolerance: f64,
    /// Name of a case whose backward is deliberately scaled, to show the
    /// checker catches it.
    pub corrupt_op: Option<String>,
    /// Restrict the run to these case names.
    pub only: Option<Vec<String>>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            trials: 100,
            seed: 0x5eed,
            h: 1e-5,
            tolerance: 1e-4,
            corrupt_op: None,
            only: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    /// Trial index that produced `max_rel_error`.
    pub worst_trial: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

/// One registered check.
pub struct Case {
    pub name: &'static str,
    run: fn(&mut Trial) -> Result<GradReport>,
}

pub const CASES: &[Case] = &[
    Case {
        name: "add",
        run: case_add,
    },
    Case {
        name: "sub",
        run: case_sub,
    },
    Case {
        name: "mul",
        run: case_mul,
    },
    Case {
        name: "scale",
        run: case_scale,
    },
    Case {
        name: "relu",
        run: case_relu,
    },
    Case {
        name: "sigmoid",
        run: case_sigmoid,
    },
    Case {
        name: "sigmoid_relu_chain",
        run: case_activation_chain,
    },
    Case {
        name: "sum_mean",
        run: case_sum_mean,
    },
    Case {
        name: "sum_axis",
        run: case_sum_axis,
    },
    Case {
        name: "reshape_transpose",
        run: case_reshape_transpose,
    },
    Case {
        name: "concat_narrow",
        run: case_concat_narrow,
    },
    Case {
        name: "index_select",
        run: case_index_select,
    },
    Case {
        name: "matmul",
        run: case_matmul,
    },
    Case {
        name: "matmul_batched",
        run: case_matmul_batched,
    },
    Case {
        name: "l2_normalize_rows",
        run: case_l2_normalize,
    },
    Case {
        name: "fully_connected",
        run: case_fully_connected,
    },
    Case {
        name: "conv2d",
        run: case_conv2d,
    },
    Case {
        name: "conv_relu_pipeline",
        run: case_conv_relu,
    },
    Case {
        name: "batchnorm2d_training",
        run: case_bn_training,
    },
    Case {
        name: "batchnorm2d_inference",
        run: case_bn_inference,
    },
    Case {
        name: "maxpool2x2",
        run: case_maxpool,
    },
    Case {
        name: "bilinear_sample",
        run: case_bilinear,
    },
    Case {
        name: "deform_conv2d_offsets",
        run: case_deform_offsets,
    },
    Case {
        name: "deform_conv2d",
        run: case_deform_full,
    },
    Case {
        name: "embed_expand",
        run: case_embed_expand,
    },
    Case {
        name: "cross_attention",
        run: case_cross_attention,
    },
    Case {
        name: "self_attention",
        run: case_self_attention,
    },
    Case {
        name: "dca_forward",
        run: case_dca,
    },
    Case {
        name: "relation_head",
        run: case_relation_head,
    },
    Case {
        name: "mse_loss",
        run: case_mse,
    },
];

/// Run every registered case (or the `only` subset) for `trials` trials.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    if opts.trials == 0 {
        return Err(Error::Config("gradcheck: trials must be positive".into()));
    }
    let known = |n: &str| CASES.iter().any(|c| c.name == n);
    if let Some(op) = &opts.corrupt_op {
        if !known(op) {
            return Err(Error::Config(format!(
                "gradcheck: unknown op {op:?} for corruption"
            )));
        }
    }
    if let Some(only) = &opts.only {
        if let Some(bad) = only.iter().find(|n| !known(n)) {
            return Err(Error::Config(format!("gradcheck: unknown op {bad:?}")));
        }
    }

    let mut cases = Vec::new();
    for (idx, case) in CASES.iter().enumerate() {
        if let Some(only) = &opts.only {
            if !only.iter().any(|n| n == case.name) {
                continue;
            }
        }
        let mut trial = Trial {
            rng: ChaCha8Rng::seed_from_u64(
                opts.seed ^ (idx as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            ),
            corrupt: opts.corrupt_op.as_deref() == Some(case.name),
            h: opts.h,
        };
        let (mut worst, mut worst_trial) = (0.0f64, 0);
        for t in 0..opts.trials {
            let err = (case.run)(&mut trial)?.max_error();
            // NaN compares false, so record it explicitly as the worst.
            if err.is_nan() || err > worst {
                worst = if err.is_nan() { f64::INFINITY } else { err };
                worst_trial = t;
            }
        }
        cases.push(CaseResult {
            name: case.name,
            trials: opts.trials,
            max_rel_error: worst,
            worst_trial,
            passed: worst < opts.tolerance,
        });
    }
    Ok(SuiteReport {
        tolerance: opts.tolerance,
        cases,
    })
}

struct Trial {
    rng: ChaCha8Rng,
    corrupt: bool,
    h: f64,
}

impl Trial {
    fn dim(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        Tensor::new(data, shape).expect("shape and data agree")
    }

    /// Values with magnitude in `[0.05, 1)` and random sign.
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = self.rng.random_range(0.05..1.0);
                if self.rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(data, shape).expect("shape and data agree")
    }

    /// Distinct values at least 0.08 apart, in random order.
    fn distinct(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut data: Vec<f64> = (0..n)
            .map(|i| i as f64 * 0.1 - n as f64 * 0.05 + self.rng.random_range(0.0..0.01))
            .collect();
        data.shuffle(&mut self.rng);
        Tensor::new(data, shape).expect("shape and data agree")
    }

    /// Integer part in `[lo, hi]` plus a fraction in `[0.1, 0.9]`.
    fn fractional(&mut self, shape: &[usize], lo: i32, hi: i32) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(lo..=hi) as f64 + self.rng.random_range(0.1..0.9))
            .collect();
        Tensor::new(data, shape).expect("shape and data agree")
    }

    fn conv(
        &mut self,
        c_out: usize,
        c_in: usize,
        k: usize,
        bias: bool,
        stride: usize,
        pad: usize,
    ) -> Conv2dParams<f64> {
        let w = self.uniform(&[c_out, c_in, k, k], -1.0, 1.0);
        let b = bias.then(|| self.uniform(&[c_out], -0.5, 0.5));
        Conv2dParams::new(w, b, stride, pad)
    }

    /// Check `inputs ↦ sum(f(inputs) ⊙ R)` for a fresh random `R` with entries
    /// bounded away from zero.
    fn check<F>(&mut self, inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
    where
        F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    {
        let shape = f(inputs)?.shape().to_vec();
        let r = self.away_from_zero(&shape);
        let corrupt = self.corrupt;
        grad_check(
            |x| {
                let out = f(x)?;
                let out = if corrupt {
                    out.scale_grad(CORRUPT_FACTOR)
                } else {
                    out
                };
                Ok(out.mul(&r)?.sum())
            },
            inputs,
            self.h,
        )
    }
}

fn conv_from(
    x: &[Tensor<f64>],
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
) -> Conv2dParams<f64> {
    Conv2dParams::new(x[w].clone(), b.map(|i| x[i].clone()), stride, pad)
}

fn case_add(t: &mut Trial) -> Result<GradReport> {
    let s = [t.dim(1, 6), t.dim(1, 6)];
    let (a, b) = (t.uniform(&s, -2.0, 2.0), t.uniform(&s, -2.0, 2.0));
    t.check(&[a, b], |x| x[0].add(&x[1]))
}

fn case_sub(t: &mut Trial) -> Result<GradReport> {
    let s = [t.dim(1, 6), t.dim(1, 6)];
    let (a, b) = (t.uniform(&s, -2.0, 2.0), t.uniform(&s, -2.0, 2.0));
    t.check(&[a, b], |x| x[0].sub(&x[1]))
}

fn case_mul(t: &mut Trial) -> Result<GradReport> {
    let s = [t.dim(1, 6), t.dim(1, 6), t.dim(1, 3)];
    let (a, b) = (t.away_from_zero(&s), t.away_from_zero(&s));
    t.check(&[a, b], |x| x[0].mul(&x[1])?.mul(&x[0]))
}

fn case_scale(t: &mut Trial) -> Result<GradReport> {
    let s = [t.dim(1, 6)];
    let a = t.uniform(&s, -2.0, 2.0);
    let k = t.rng.random_range(-3.0..3.0);
    t.check(&[a], move |x| Ok(x[0].scale(k)))
}

fn case_relu(t: &mut Trial) -> Result<GradReport> {
    let s = [t.dim(1, 6), t.dim(1, 6)];
    let a = t.away_from_zero(&s);
    t.check(&[a], |x| Ok(x[0].relu()))
}

fn case_sigmoid(t: &mut Trial) -> Result<GradReport> {
    let s = [t.dim(1, 6), t.dim(1, 6)];
    let a = t.uniform(&s, -4.0, 4.0);
    t.check(&[a], |x| Ok(x[0].sigmoid()))
}

fn case_activation_chain(t: &mut Trial) -> Result<GradReport> {
    let s = [t.dim(1, 6)];
    let a = t.away_from_zero(&s);
    t.check(&[a], |x| x[0].relu().sigmoid().mul(&x[0].sigmoid()))
}

fn case_sum_mean(t: &mut Trial) -> Result<GradReport> {
    let s = [t.dim(1, 6), t.dim(1, 6)];
    let a = t.uniform(&s, -2.0, 2.0);
    t.check(&[a], |x| x[0].sum().mul(&x[0].mean()))
}

fn case_sum_axis(t: &mut Trial) -> Result<GradReport> {
    let s = [t.dim(1, 4), t.dim(1, 4), t.dim(1, 4)];
    let axis = t.rng.random_range(0..6i64) as isize - 3;
    let a = t.uniform(&s, -2.0, 2.0);
    t.check(&[a], move |x| x[0].sum_axis(axis))
}

fn case_reshape_transpose(t: &mut Trial) -> Result<GradReport> {
    let s = [t.dim(1, 4), t.dim(1, 4), t.dim(1, 4)];
    let (p, q) = (
        t.rng.random_range(0..3i64) as isize,
        t.rng.random_range(0..3i64) as isize,
    );
    let a = t.uniform(&s, -2.0, 2.0);
    let flat = [s[0] * s[1], s[2]];
    t.check(&[a], move |x| {
        x[0].transpose(p, q)?.reshape(&flat)?.transpose(0, 1)
    })
}

fn case_concat_narrow(t: &mut Trial) -> Result<GradReport> {
    let (b, h, w) = (t.dim(1, 2), t.dim(1, 4), t.dim(1, 4));
    let (c1, c2) = (t.dim(1, 4), t.dim(1, 4));
    let a = t.uniform(&[b, c1, h, w], -2.0, 2.0);
    let c = t.uniform(&[b, c2, h, w], -2.0, 2.0);
    let start = t.rng.random_range(0..c1 + c2);
    let len = t.rng.random_range(1..=c1 + c2 - start);
    t.check(&[a, c], move |x| {
        Tensor::concat_channels(&[&x[0], &x[1], &x[0]])?.narrow(1, start, len)
    })
}

fn case_index_select(t: &mut Trial) -> Result<GradReport> {
    let s = [t.dim(1, 6), t.dim(1, 4)];
    let n = t.dim(1, 6);
    let idx: Vec<usize> = (0..n).map(|_| t.rng.random_range(0..s[0])).collect();
    let a = t.uniform(&s, -2.0, 2.0);
    t.check(&[a], move |x| x[0].index_select(&idx))
}

fn case_matmul(t: &mut Trial) -> Result<GradReport> {
    let (m, k, n) = (t.dim(1, 6), t.dim(1, 6), t.dim(1, 6));
    let a = t.uniform(&[m, k], -1.0, 1.0);
    let b = t.uniform(&[k, n], -1.0, 1.0);
    t.check(&[a, b], |x| x[0].matmul(&x[1]))
}

fn case_matmul_batched(t: &mut Trial) -> Result<GradReport> {
    let (bt, m, k, n) = (t.dim(1, 3), t.dim(1, 6), t.dim(1, 6), t.dim(1, 6));
    let a = t.uniform(&[bt, m, k], -1.0, 1.0);
    let b = t.uniform(&[bt, n, k], -1.0, 1.0);
    t.check(&[a, b], |x| x[0].matmul(&x[1].transpose(1, 2)?))
}

fn case_l2_normalize(t: &mut Trial) -> Result<GradReport> {
    // A one-column row normalizes to a constant ±1 with no gradient signal.
    let s = [t.dim(1, 3), t.dim(1, 6), t.dim(2, 6)];
    let a = t.away_from_zero(&s);
    t.check(&[a], |x| x[0].l2_normalize_rows(1e-12))
}

fn case_fully_connected(t: &mut Trial) -> Result<GradReport> {
    let (b, d, m) = (t.dim(1, 6), t.dim(1, 6), t.dim(1, 6));
    let x0 = t.uniform(&[b, d], -1.0, 1.0);
    let w = t.uniform(&[d, m], -1.0, 1.0);
    let bias = t.uniform(&[m], -1.0, 1.0);
    t.check(&[x0, w, bias], |x| fully_connected(&x[0], &x[1], &x[2]))
}

fn case_conv2d(t: &mut Trial) -> Result<GradReport> {
    let k = t.dim(1, 3);
    let (stride, pad) = (t.dim(1, 2), t.dim(0, 1));
    let (h, w) = (t.dim(k.max(2), 6), t.dim(k.max(2), 6));
    let (ci, co, b) = (t.dim(1, 3), t.dim(1, 3), t.dim(1, 2));
    let input = t.uniform(&[b, ci, h, w], -1.0, 1.0);
    let p = t.conv(co, ci, k, true, stride, pad);
    let bias = p.bias.clone().expect("bias requested");
    t.check(&[input, p.weight, bias], move |x| {
        conv2d(&x[0], &conv_from(x, 1, Some(2), stride, pad))
    })
}

fn case_conv_relu(t: &mut Trial) -> Result<GradReport> {
    loop {
        let (h, w) = (t.dim(3, 6), t.dim(3, 6));
        let input = t.uniform(&[1, 2, h, w], -1.0, 1.0);
        let p = t.conv(3, 2, 3, true, 1, 1);
        let pre = conv2d(&input, &p)?;
        if pre.data().iter().any(|v| v.abs() < KINK_MARGIN) {
            continue;
        }
        let bias = p.bias.clone().expect("bias requested");
        return t.check(&[input, p.weight, bias], |x| {
            Ok(conv2d(&x[0], &conv_from(x, 1, Some(2), 1, 1))?.relu())
        });
    }
}

fn bn_state(
    x: &[Tensor<f64>],
    mode: BnMode,
    mean: &[f64],
    var: &[f64],
) -> Result<BatchNormState<f64>> {
    let mut s = BatchNormState::new(x[1].numel(), mode)?;
    s.gamma = x[1].clone();
    s.beta = x[2].clone();
    s.running_mean = mean.to_vec();
    s.running_var = var.to_vec();
    Ok(s)
}

fn case_bn_training(t: &mut Trial) -> Result<GradReport> {
    let c = t.dim(1, 3);
    let s = [2, c, t.dim(2, 3), t.dim(2, 3)];
    let input = t.uniform(&s, -2.0, 2.0);
    let gamma = t.uniform(&[c], 0.5, 1.5);
    let beta = t.uniform(&[c], -0.5, 0.5);
    t.check(&[input, gamma, beta], move |x| {
        let mut st = bn_state(x, BnMode::Training, &vec![0.0; c], &vec![1.0; c])?;
        batchnorm2d(&x[0], &mut st)
    })
}

fn case_bn_inference(t: &mut Trial) -> Result<GradReport> {
    let c = t.dim(1, 3);
    let s = [t.dim(1, 2), c, t.dim(1, 3), t.dim(1, 3)];
    let input = t.uniform(&s, -2.0, 2.0);
    let gamma = t.uniform(&[c], 0.5, 1.5);
    let beta = t.uniform(&[c], -0.5, 0.5);
    let mean = t.uniform(&[c], -0.5, 0.5).to_vec();
    let var = t.uniform(&[c], 0.5, 2.0).to_vec();
    t.check(&[input, gamma, beta], move |x| {
        let mut st = bn_state(x, BnMode::Inference, &mean, &var)?;
        batchnorm2d(&x[0], &mut st)
    })
}

fn case_maxpool(t: &mut Trial) -> Result<GradReport> {
    let s = [t.dim(1, 2), t.dim(1, 3), t.dim(2, 6), t.dim(2, 6)];
    let a = t.distinct(&s);
    t.check(&[a], |x| maxpool2x2(&x[0]))
}

fn case_bilinear(t: &mut Trial) -> Result<GradReport> {
    let (c, h, w) = (t.dim(1, 3), t.dim(1, 6), t.dim(1, 6));
    let f = t.uniform(&[c, h, w], -2.0, 2.0);
    let x = t.fractional(&[1], -1, w as i32 - 1).to_vec()[0];
    let y = t.fractional(&[1], -1, h as i32 - 1).to_vec()[0];
    let coords = Tensor::new(vec![x, y], &[2])?;
    t.check(&[f, coords], |x| bilinear_sample(&x[0], &x[1]))
}

fn case_deform_offsets(t: &mut Trial) -> Result<GradReport> {
    let k = t.dim(1, 3);
    let (stride, pad) = (t.dim(1, 2), t.dim(0, 1));
    let (h, w) = (t.dim(k.max(2), 5), t.dim(k.max(2), 5));
    let (ci, co, b) = (t.dim(1, 2), t.dim(1, 2), t.dim(1, 2));
    let input = t.uniform(&[b, ci, h, w], -1.0, 1.0);
    let p = t.conv(co, ci, k, true, stride, pad);
    let (oh, ow) = (
        (h + 2 * pad - k) / stride + 1,
        (w + 2 * pad - k) / stride + 1,
    );
    let offsets = t.fractional(&[b, 2 * k * k, oh, ow], -2, 1);
    let bias = p.bias.clone().expect("bias requested");
    t.check(&[input, offsets, p.weight, bias], move |x| {
        deform_conv2d_with_offsets(&x[0], &x[1], &conv_from(x, 2, Some(3), stride, pad))
    })
}

fn case_deform_full(t: &mut Trial) -> Result<GradReport> {
    let (h, w) = (t.dim(3, 5), t.dim(3, 5));
    let ci = t.dim(1, 2);
    let input = t.uniform(&[1, ci, h, w], -1.0, 1.0);
    let main = t.conv(2, ci, 3, true, 1, 1);
    // Bias n + 0.5 and small weights keep every predicted offset's fraction
    // inside (0.2, 0.8).
    let pw = t
        .uniform(&[18, ci, 3, 3], -1.0, 1.0)
        .scale(0.25 / (9 * ci) as f64);
    let pb = t
        .fractional(&[18], -1, 0)
        .to_vec()
        .iter()
        .map(|v| v.floor() + 0.5)
        .collect();
    let pb = Tensor::new(pb, &[18])?;
    let mb = main.bias.clone().expect("bias requested");
    t.check(&[input, main.weight, mb, pw, pb], |x| {
        let p = DeformConvParams {
            main: conv_from(x, 1, Some(2), 1, 1),
            offset: conv_from(x, 3, Some(4), 1, 1),
            offset_trainable: true,
        };
        deform_conv2d(&x[0], &p)
    })
}

fn dca_from(x: &[Tensor<f64>], base: usize) -> DcaParams<f64> {
    DcaParams {
        embed: conv_from(x, base, None, 1, 0),
        expand: conv_from(x, base + 1, None, 1, 0),
        baseline: None,
    }
}

fn case_embed_expand(t: &mut Trial) -> Result<GradReport> {
    let (c, cp) = (t.dim(2, 4), t.dim(1, 2));
    let (h, w) = (t.dim(1, 3), t.dim(1, 3));
    let b = t.dim(1, 2);
    let f = t.uniform(&[b, c, h, w], -1.0, 1.0);
    let e = t.uniform(&[cp, c, 1, 1], -1.0, 1.0);
    let x = t.uniform(&[c, cp, 1, 1], -1.0, 1.0);
    t.check(&[f, e, x], move |x| {
        let p = dca_from(x, 1);
        expand_channels(&to_positions(&embed_channels(&x[0], &p)?)?, &p, (h, w))
    })
}

fn case_cross_attention(t: &mut Trial) -> Result<GradReport> {
    let (b, c) = (t.dim(1, 2), t.dim(1, 4));
    let (p1, p2) = (t.dim(1, 6), t.dim(1, 6));
    let f1 = t.away_from_zero(&[b, p1, c]);
    let f2 = t.away_from_zero(&[b, p2, c]);
    t.check(&[f1, f2], |x| {
        let a = cross_attention_map(&x[0], &x[1])?;
        let (f21, f12) = distribute_cross(&a, &x[0], &x[1])?;
        Tensor::concat(
            &[
                &f21.reshape(&[f21.numel()])?,
                &f12.reshape(&[f12.numel()])?,
                &a.values.reshape(&[a.values.numel()])?,
            ],
            0,
        )
    })
}

fn case_self_attention(t: &mut Trial) -> Result<GradReport> {
    let (b, p, c) = (t.dim(1, 2), t.dim(1, 6), t.dim(1, 4));
    let f = t.away_from_zero(&[b, p, c]);
    t.check(&[f], |x| {
        let a = self_attention_map(&x[0])?;
        let out = distribute_self(&a, &x[0])?;
        Tensor::concat(
            &[
                &out.reshape(&[out.numel()])?,
                &a.values.reshape(&[a.values.numel()])?,
            ],
            0,
        )
    })
}

fn case_dca(t: &mut Trial) -> Result<GradReport> {
    let variant = [
        AttentionVariant::Sca,
        AttentionVariant::Cca,
        AttentionVariant::Dca,
    ][t.rng.random_range(0..3)];
    // Two embedding channels: with one, normalized rows are a sign function.
    let f1 = t.uniform(&[1, 2, 3, 3], -1.0, 1.0);
    let f2 = t.uniform(&[1, 2, 3, 3], -1.0, 1.0);
    let e = t.uniform(&[2, 2, 1, 1], -1.0, 1.0);
    let x = t.uniform(&[2, 2, 1, 1], -1.0, 1.0);
    t.check(&[f1, f2, e, x], move |x| {
        dca_forward(&x[0], &x[1], &dca_from(x, 2), variant)
    })
}

fn head_from(x: &[Tensor<f64>]) -> Result<HeadParams<f64>> {
    Ok(HeadParams {
        conv1: conv_from(x, 1, Some(2), 1, 1),
        bn1: bn_state(&x[2..5], BnMode::Inference, &[0.1, -0.1], &[1.2, 0.8])?,
        conv2: conv_from(x, 5, Some(6), 1, 1),
        bn2: bn_state(&x[6..9], BnMode::Inference, &[0.0, 0.2], &[0.9, 1.1])?,
        fc1_w: x[9].clone(),
        fc1_b: x[10].clone(),
        fc2_w: x[11].clone(),
        fc2_b: x[12].clone(),
    })
}

/// Pre-activation values of every ReLU in the head.
/// True if some 2×2 pooling window has a positive maximum within `KINK_MARGIN`
/// of its runner-up.
fn pool_near_tie(x: &Tensor<f64>) -> bool {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    x.data().chunks_exact(h * w).any(|plane| {
        (0..h / 2).any(|i| {
            (0..w / 2).any(|j| {
                let mut v = [
                    plane[2 * i * w + 2 * j],
                    plane[2 * i * w + 2 * j + 1],
                    plane[(2 * i + 1) * w + 2 * j],
                    plane[(2 * i + 1) * w + 2 * j + 1],
                ];
                v.sort_by(|a, b| b.total_cmp(a));
                v[0] > 0.0 && v[0] - v[1] < KINK_MARGIN
            })
        })
    })
}

fn head_pre_activations(x: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut h = head_from(x)?;
    let a1 = batchnorm2d(&conv2d(&x[0], &h.conv1)?, &mut h.bn1)?;
    let a2 = batchnorm2d(&conv2d(&maxpool2x2(&a1.relu())?, &h.conv2)?, &mut h.bn2)?;
    let p2 = maxpool2x2(&a2.relu())?;
    let b = p2.shape()[0];
    let z = fully_connected(&p2.reshape(&[b, p2.numel() / b])?, &h.fc1_w, &h.fc1_b)?;
    Ok(vec![a1, a2, z])
}

fn case_relation_head(t: &mut Trial) -> Result<GradReport> {
    loop {
        // Two pools on 4×4 leave one position, so the FC input is `c`.
        let (b, c, hidden) = (t.dim(2, 3), 2, t.dim(2, 4));
        // Weights scaled by fan-in keep the sigmoid away from saturation,
        // where every gradient shrinks below the difference noise floor.
        let fan = |n: usize| (3.0 / n as f64).sqrt();
        let ins = vec![
            t.uniform(&[b, 2 * c, 4, 4], -1.0, 1.0),
            t.uniform(&[c, 2 * c, 3, 3], -fan(18 * c), fan(18 * c)),
            t.uniform(&[c], -0.2, 0.2),
            t.uniform(&[c], 0.5, 1.5),
            t.uniform(&[c], -0.5, 0.5),
            t.uniform(&[c, c, 3, 3], -fan(9 * c), fan(9 * c)),
            t.uniform(&[c], -0.2, 0.2),
            t.uniform(&[c], 0.5, 1.5),
            t.uniform(&[c], -0.5, 0.5),
            t.uniform(&[c, hidden], -fan(c), fan(c)),
            t.uniform(&[hidden], -0.5, 0.5),
            t.uniform(&[hidden, 1], -fan(hidden), fan(hidden)),
            t.uniform(&[1], -0.5, 0.5),
        ];
        let pre = head_pre_activations(&ins)?;
        let near_kink = pre
            .iter()
            .any(|a| a.data().iter().any(|v| v.abs() < KINK_MARGIN))
            || pre[..2].iter().any(|a| pool_near_tie(&a.relu()));
        if near_kink {
            continue;
        }
        return t.check(&ins, |x| relation_head(&x[0], &mut head_from(x)?));
    }
}

fn case_mse(t: &mut Trial) -> Result<GradReport> {
    let (q, c) = (t.dim(1, 6), t.dim(2, 5));
    let scores = t.uniform(&[q * c], 0.01, 0.99).reshape(&[q, c])?;
    let labels: Vec<usize> = (0..q).map(|_| t.rng.random_range(0..c)).collect();
    t.check(&[scores], move |x| mse_episode_loss(&x[0], &labels))
}
