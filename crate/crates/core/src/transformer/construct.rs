//! The two-head layer whose residual update is one causal descent step.
//!
//! Head 1 compares `cur` blocks, so its scores are `⟨x_t, x_s⟩`, and moves
//! `−η u_s` into the `u` slot. Head 2 compares `(cur, p²)` with `(prev, p¹)`,
//! giving `⟨x_t, x_{s−1}⟩ + 1{s = 1}`, and moves `η x_s` (read from the
//! `cur_copy` slot, empty at `s = 1`) into the `u` slot. The `+1` at `s = 1`
//! makes both heads share the same softmax denominator on unit tokens.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{AttentionHead, AttentionLayer, Layout, Normalization};
use crate::error::{Error, Result};
use crate::linalg::{from_rows, to_rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOptions {
    /// Pad `W_Q`, `W_K` with zero rows to `(4d+2)×(4d+2)`.
    pub square: bool,
    /// Keep the `p¹` key coordinate that adds `1{s = 1}` to head-2 scores.
    /// Turning it off is an ablation that breaks the softmax construction.
    pub bos_offset: bool,
}

impl Default for LayerOptions {
    fn default() -> Self {
        Self {
            square: false,
            bos_offset: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentLayer {
    pub d: usize,
    pub eta: f64,
    pub attention: AttentionLayer,
}

fn block_selector(rows: usize, width: usize, start: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, width);
    for i in 0..rows {
        m[(i, start + i)] = 1.0;
    }
    m
}

fn pad_rows(m: DMatrix<f64>, rows: usize) -> DMatrix<f64> {
    let r = m.nrows();
    m.insert_rows(r, rows - r, 0.0)
}

pub fn build_descent_layer(
    d: usize,
    eta: f64,
    normalization: Normalization,
    options: LayerOptions,
) -> Result<DescentLayer> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidParameter(format!("step size must be positive, got {eta}")));
    }
    if d == 0 {
        return Err(Error::InvalidParameter("dimension must be at least 1".into()));
    }
    let l = Layout::new(d);
    let width = l.width();

    let q1 = block_selector(d, width, l.cur());
    let k1 = q1.clone();
    let mut v1 = DMatrix::zeros(width, width);
    for i in 0..d {
        v1[(l.u() + i, l.u() + i)] = -eta;
    }

    let q2 = block_selector(d + 1, width, l.cur());
    let mut k2 = block_selector(d + 1, width, l.prev());
    if !options.bos_offset {
        k2[(d, l.p1())] = 0.0;
    }
    let mut v2 = DMatrix::zeros(width, width);
    for i in 0..d {
        v2[(l.u() + i, l.cur_copy() + i)] = eta;
    }

    let (q1, k1, q2, k2) = if options.square {
        (
            pad_rows(q1, width),
            pad_rows(k1, width),
            pad_rows(q2, width),
            pad_rows(k2, width),
        )
    } else {
        (q1, k1, q2, k2)
    };

    Ok(DescentLayer {
        d,
        eta,
        attention: AttentionLayer {
            heads: vec![
                AttentionHead {
                    w_q: q1,
                    w_k: k1,
                    w_v: v1,
                },
                AttentionHead {
                    w_q: q2,
                    w_k: k2,
                    w_v: v2,
                },
            ],
            normalization,
        },
    })
}

/// JSON layout of the layer weights; matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsDoc {
    pub d: usize,
    pub eta: f64,
    pub normalization: Normalization,
    pub heads: Vec<HeadDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDoc {
    #[serde(rename = "WQ")]
    pub w_q: Vec<Vec<f64>>,
    #[serde(rename = "WK")]
    pub w_k: Vec<Vec<f64>>,
    #[serde(rename = "WV")]
    pub w_v: Vec<Vec<f64>>,
}

impl DescentLayer {
    pub fn to_doc(&self) -> WeightsDoc {
        WeightsDoc {
            d: self.d,
            eta: self.eta,
            normalization: self.attention.normalization,
            heads: self
                .attention
                .heads
                .iter()
                .map(|h| HeadDoc {
                    w_q: to_rows(&h.w_q),
                    w_k: to_rows(&h.w_k),
                    w_v: to_rows(&h.w_v),
                })
                .collect(),
        }
    }

    pub fn from_doc(doc: &WeightsDoc) -> Result<Self> {
        let heads = doc
            .heads
            .iter()
            .map(|h| {
                Ok(AttentionHead {
                    w_q: from_rows(&h.w_q)?,
                    w_k: from_rows(&h.w_k)?,
                    w_v: from_rows(&h.w_v)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let width = Layout::new(doc.d).width();
        if heads.iter().any(|h| h.w_v.shape() != (width, width)) {
            return Err(Error::DimensionMismatch(format!(
                "value matrices must be {width}x{width}"
            )));
        }
        Ok(Self {
            d: doc.d,
            eta: doc.eta,
            attention: AttentionLayer {
                heads,
                normalization: doc.normalization,
            },
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("weights serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: WeightsDoc =
            serde_json::from_str(s).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Self::from_doc(&doc)
    }

    /// One residual application `e ↦ e + T(e)`.
    pub fn apply(&self, tokens: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(tokens + self.attention.forward(tokens)?)
    }
}
