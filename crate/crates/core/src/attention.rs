//! Cross- and self-correlation attention between two feature maps.
//!
//! Both inputs are embedded by one shared 1×1 convolution (`C → C'`),
//! flattened to one row per spatial position, and compared by cosine
//! similarity. The resulting maps redistribute the *unnormalized*
//! embedded rows, and one shared 1×1 convolution expands each result
//! back to `C` channels.
//!
//! Feature maps are batched `B×C×H×W`; position-row tensors are
//! `B×HW×C'` (or unbatched `HW×C'`).

use std::fmt;
use std::str::FromStr;

use crate::conv::{conv2d, Conv2dParams};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Guard added under the square root of row norms; zero rows stay zero.
pub const NORM_EPS: f64 = 1e-12;

/// What the attention block feeds to the relation head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    /// `[f1, f2]`
    None,
    /// `[conv1×1(f1), conv1×1(f2)]`
    Baseline,
    /// `[f1, f2, f11, f22]`
    Sca,
    /// `[f1, f2, f12, f21]`
    Cca,
    /// `[f1, f2, f11, f12, f21, f22]`
    Dca,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 5] = [
        AttentionVariant::None,
        AttentionVariant::Baseline,
        AttentionVariant::Sca,
        AttentionVariant::Cca,
        AttentionVariant::Dca,
    ];

    /// Channel multiplier of the concatenated output relative to `C`.
    pub fn output_factor(self) -> usize {
        match self {
            AttentionVariant::None | AttentionVariant::Baseline => 2,
            AttentionVariant::Sca | AttentionVariant::Cca => 4,
            AttentionVariant::Dca => 6,
        }
    }

    pub fn uses_correlation(self) -> bool {
        matches!(
            self,
            AttentionVariant::Sca | AttentionVariant::Cca | AttentionVariant::Dca
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::None => "none",
            AttentionVariant::Baseline => "baseline",
            AttentionVariant::Sca => "sca",
            AttentionVariant::Cca => "cca",
            AttentionVariant::Dca => "dca",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown attention variant {s:?} (expected none|baseline|sca|cca|dca)"
                ))
            })
    }
}

/// Shared 1×1 embedding and expansion layers.
#[derive(Debug, Clone)]
pub struct DcaParams<T: Element> {
    /// `C → C'`, shared by both inputs and by the cross and self paths.
    pub embed: Conv2dParams<T>,
    /// `C' → C`, shared by all four attention outputs.
    pub expand: Conv2dParams<T>,
    /// `C → C` layer of the baseline variant.
    pub baseline: Option<Conv2dParams<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Cross,
    SelfCorrelation,
}

/// Cosine similarities between every pair of positions.
#[derive(Debug, Clone)]
pub struct AttentionMap<T: Element> {
    /// `P1×P2` (or `B×P1×P2`).
    pub values: Tensor<T>,
    pub kind: AttentionKind,
}

fn check_pointwise<T: Element>(op: &'static str, p: &Conv2dParams<T>) -> Result<()> {
    if p.kernel() != 1 || p.stride != 1 || p.padding != 0 {
        return Err(Error::Config(format!(
            "{op}: expected a 1×1 stride-1 unpadded convolution, got k={} stride={} pad={}",
            p.kernel(),
            p.stride,
            p.padding
        )));
    }
    Ok(())
}

/// Shared 1×1 channel embedding, `B×C×H×W → B×C'×H×W`.
pub fn embed_channels<T: Element>(f: &Tensor<T>, p: &DcaParams<T>) -> Result<Tensor<T>> {
    check_pointwise("embed_channels", &p.embed)?;
    conv2d(f, &p.embed)
}

/// `B×C×H×W → B×HW×C` (one row per position).
pub fn to_positions<T: Element>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            "to_positions",
            format!("need B×C×H×W, got {s:?}"),
        ));
    }
    f.reshape(&[s[0], s[1], s[2] * s[3]])?.transpose(1, 2)
}

/// `B×HW×C → B×C×H×W`.
pub fn from_positions<T: Element>(rows: &Tensor<T>, spatial: (usize, usize)) -> Result<Tensor<T>> {
    let s = rows.shape();
    if s.len() != 3 || s[1] != spatial.0 * spatial.1 {
        return Err(Error::shape(
            "from_positions",
            format!("rows {s:?} for spatial {}×{}", spatial.0, spatial.1),
        ));
    }
    rows.transpose(1, 2)?
        .reshape(&[s[0], s[2], spatial.0, spatial.1])
}

/// `A = normalize(f1p) · normalize(f2p)ᵀ`, shape `P1×P2`.
pub fn cross_attention_map<T: Element>(
    f1p: &Tensor<T>,
    f2p: &Tensor<T>,
) -> Result<AttentionMap<T>> {
    let (a, b) = (f1p.shape(), f2p.shape());
    let ok = a.len() == b.len()
        && (a.len() == 2 || a.len() == 3)
        && a.last() == b.last()
        && (a.len() == 2 || a[0] == b[0]);
    if !ok {
        return Err(Error::shape(
            "cross_attention_map",
            format!("{a:?} vs {b:?}"),
        ));
    }
    let eps = T::lit(NORM_EPS);
    let n1 = f1p.l2_normalize_rows(eps)?;
    let n2 = f2p.l2_normalize_rows(eps)?;
    let values = n1.matmul(&n2.transpose(-2, -1)?)?;
    Ok(AttentionMap {
        values,
        kind: AttentionKind::Cross,
    })
}

/// `(f21, f12) = (Aᵀ·f1p, A·f2p)`.
pub fn distribute_cross<T: Element>(
    a: &AttentionMap<T>,
    f1p: &Tensor<T>,
    f2p: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let at = a.values.transpose(-2, -1)?;
    let f21 = at.matmul(f1p)?;
    let f12 = a.values.matmul(f2p)?;
    Ok((f21, f12))
}

/// `A = normalize(fp) · normalize(fp)ᵀ`.
pub fn self_attention_map<T: Element>(fp: &Tensor<T>) -> Result<AttentionMap<T>> {
    let mut m = cross_attention_map(fp, fp)?;
    m.kind = AttentionKind::SelfCorrelation;
    Ok(m)
}

/// `Aᵀ·fp`.
pub fn distribute_self<T: Element>(a: &AttentionMap<T>, fp: &Tensor<T>) -> Result<Tensor<T>> {
    let s = a.values.shape();
    if s[s.len() - 1] != s[s.len() - 2] {
        return Err(Error::shape(
            "distribute_self",
            format!("map {s:?} is not square"),
        ));
    }
    a.values.transpose(-2, -1)?.matmul(fp)
}

/// Position rows `B×HW×C'` back to a `B×C×H×W` map through the shared expansion.
pub fn expand_channels<T: Element>(
    f: &Tensor<T>,
    p: &DcaParams<T>,
    spatial: (usize, usize),
) -> Result<Tensor<T>> {
    check_pointwise("expand_channels", &p.expand)?;
    conv2d(&from_positions(f, spatial)?, &p.expand)
}

/// The four attention outputs of a pair, before expansion.
#[derive(Debug, Clone)]
pub struct Correlated<T: Element> {
    pub f11: Tensor<T>,
    pub f12: Tensor<T>,
    pub f21: Tensor<T>,
    pub f22: Tensor<T>,
    pub cross: AttentionMap<T>,
    pub self1: AttentionMap<T>,
    pub self2: AttentionMap<T>,
}

/// Embed both inputs and compute all cross and self outputs (position rows).
pub fn correlate<T: Element>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    p: &DcaParams<T>,
) -> Result<Correlated<T>> {
    let e1 = to_positions(&embed_channels(f1, p)?)?;
    let e2 = to_positions(&embed_channels(f2, p)?)?;
    let cross = cross_attention_map(&e1, &e2)?;
    let (f21, f12) = distribute_cross(&cross, &e1, &e2)?;
    let self1 = self_attention_map(&e1)?;
    let self2 = self_attention_map(&e2)?;
    let f11 = distribute_self(&self1, &e1)?;
    let f22 = distribute_self(&self2, &e2)?;
    Ok(Correlated {
        f11,
        f12,
        f21,
        f22,
        cross,
        self1,
        self2,
    })
}

/// Combine a sample feature `f1` and a query feature `f2` (both `B×C×H×W`)
/// into the relation head's input.
pub fn dca_forward<T: Element>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    p: &DcaParams<T>,
    variant: AttentionVariant,
) -> Result<Tensor<T>> {
    if f1.shape() != f2.shape() || f1.rank() != 4 {
        return Err(Error::shape(
            "dca_forward",
            format!("{:?} vs {:?}", f1.shape(), f2.shape()),
        ));
    }
    let spatial = (f1.shape()[2], f1.shape()[3]);
    match variant {
        AttentionVariant::None => Tensor::concat_channels(&[f1, f2]),
        AttentionVariant::Baseline => {
            let conv = p.baseline.as_ref().ok_or_else(|| {
                Error::Config("dca_forward: baseline variant needs a baseline 1×1 layer".into())
            })?;
            check_pointwise("baseline", conv)?;
            Tensor::concat_channels(&[&conv2d(f1, conv)?, &conv2d(f2, conv)?])
        }
        AttentionVariant::Sca | AttentionVariant::Cca | AttentionVariant::Dca => {
            let c = correlate(f1, f2, p)?;
            let expand = |t: &Tensor<T>| expand_channels(t, p, spatial);
            match variant {
                AttentionVariant::Sca => {
                    Tensor::concat_channels(&[f1, f2, &expand(&c.f11)?, &expand(&c.f22)?])
                }
                AttentionVariant::Cca => {
                    Tensor::concat_channels(&[f1, f2, &expand(&c.f12)?, &expand(&c.f21)?])
                }
                _ => Tensor::concat_channels(&[
                    f1,
                    f2,
                    &expand(&c.f11)?,
                    &expand(&c.f12)?,
                    &expand(&c.f21)?,
                    &expand(&c.f22)?,
                ]),
            }
        }
    }
}
