//! Causal multi-head attention and the explicit layers that run the descent.
//!
//! Attention is evaluated literally: score matrix, causal mask, row
//! normalization, value aggregation. Updates at one depth are computed from
//! the previous depth for all positions at once.

mod augment;
mod construct;
mod model;

pub use augment::{build_t0_approx, build_t0_exact, AugmentationLayer};
pub use construct::{build_descent_layer, DescentLayer, HeadDoc, LayerOptions, WeightsDoc};
pub use model::{equivalence_report, Augmentation, EquivalenceReport, TransformerModel};

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{softmax, Kernel, Variant};

/// Map from raw scores to attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Id,
    Exp,
    Softmax,
}

impl Normalization {
    pub const ALL: [Normalization; 3] = [Normalization::Id, Normalization::Exp, Normalization::Softmax];

    /// Kernel and attention-matrix variant of the descent this normalization runs.
    pub fn descent_config(self) -> (Kernel, Variant) {
        match self {
            Normalization::Id => (Kernel::Id, Variant::Raw),
            Normalization::Exp => (Kernel::Exp, Variant::Raw),
            Normalization::Softmax => (Kernel::Exp, Variant::SoftmaxNormalized),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Id => "id",
            Normalization::Exp => "exp",
            Normalization::Softmax => "softmax",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" => Ok(Normalization::Id),
            "exp" => Ok(Normalization::Exp),
            "softmax" => Ok(Normalization::Softmax),
            other => Err(Error::InvalidParameter(format!(
                "unknown normalization `{other}`"
            ))),
        }
    }
}

/// Offsets of the blocks of an augmented token
/// `(prev, p¹, cur, p², cur_copy, u) ∈ R^{4d+2}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub d: usize,
}

impl Layout {
    pub fn new(d: usize) -> Self {
        Self { d }
    }
    pub fn width(&self) -> usize {
        4 * self.d + 2
    }
    pub fn prev(&self) -> usize {
        0
    }
    pub fn p1(&self) -> usize {
        self.d
    }
    pub fn cur(&self) -> usize {
        self.d + 1
    }
    pub fn p2(&self) -> usize {
        2 * self.d + 1
    }
    pub fn cur_copy(&self) -> usize {
        2 * self.d + 2
    }
    pub fn u(&self) -> usize {
        3 * self.d + 2
    }
    /// Number of leading coordinates the descent layer never writes.
    pub fn frozen(&self) -> usize {
        3 * self.d + 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub heads: Vec<AttentionHead>,
    pub normalization: Normalization,
}

impl AttentionLayer {
    fn check(&self, tokens: &DMatrix<f64>) -> Result<()> {
        for (h, head) in self.heads.iter().enumerate() {
            if head.w_q.ncols() != tokens.ncols()
                || head.w_k.ncols() != tokens.ncols()
                || head.w_v.ncols() != tokens.ncols()
                || head.w_q.nrows() != head.w_k.nrows()
            {
                return Err(Error::DimensionMismatch(format!(
                    "head {h}: W_Q {:?}, W_K {:?}, W_V {:?} for tokens of width {}",
                    head.w_q.shape(),
                    head.w_k.shape(),
                    head.w_v.shape(),
                    tokens.ncols()
                )));
            }
        }
        let out = self.heads.first().map(|h| h.w_v.nrows());
        if self.heads.iter().any(|h| Some(h.w_v.nrows()) != out) {
            return Err(Error::DimensionMismatch("heads disagree on output width".into()));
        }
        Ok(())
    }

    /// Masked scores `⟨W_Q e_t, W_K e_s⟩` for `s ≤ t`; entries above the diagonal are 0.
    pub fn scores(&self, head: usize, tokens: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(tokens)?;
        let h = &self.heads[head];
        let q = tokens * h.w_q.transpose();
        let k = tokens * h.w_k.transpose();
        let t = tokens.nrows();
        let mut s = DMatrix::zeros(t, t);
        for i in 0..t {
            for j in 0..=i {
                s[(i, j)] = q.row(i).dot(&k.row(j));
            }
        }
        Ok(s)
    }

    /// Causal attention weights of one head.
    pub fn attention(&self, head: usize, tokens: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut a = self.scores(head, tokens)?;
        let t = tokens.nrows();
        for i in 0..t {
            match self.normalization {
                Normalization::Id => {}
                Normalization::Exp => {
                    for j in 0..=i {
                        a[(i, j)] = a[(i, j)].exp();
                    }
                }
                Normalization::Softmax => {
                    let row: Vec<f64> = (0..=i).map(|j| a[(i, j)]).collect();
                    for (j, w) in softmax(&row).into_iter().enumerate() {
                        a[(i, j)] = w;
                    }
                }
            }
        }
        Ok(a)
    }

    /// `Σ_h Σ_{s≤t} A^h[t][s] W^h_V e_s` for every `t`; the residual is added by the caller.
    pub fn forward(&self, tokens: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(tokens)?;
        let t = tokens.nrows();
        let width = self.heads.first().map_or(tokens.ncols(), |h| h.w_v.nrows());
        let mut out = DMatrix::zeros(t, width);
        for (h, head) in self.heads.iter().enumerate() {
            let a = self.attention(h, tokens)?;
            let v = tokens * head.w_v.transpose();
            out += a * v;
        }
        Ok(out)
    }
}
