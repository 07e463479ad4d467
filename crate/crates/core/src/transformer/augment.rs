//! Building the augmented tokens `e⁰_t` from `x_{0:T}` (with `x_0 = 0`).
//!
//! The exact map is the limit of a two-head softmax layer with alternating
//! positional scalars `p_t = (−1)^t n t` followed by a gated feedforward;
//! [`AugmentationLayer`] evaluates that layer at finite sharpness `n`.

use nalgebra::DMatrix;

use super::{AttentionHead, AttentionLayer, Layout, Normalization};
use crate::error::{Error, Result};

/// `e⁰_t = (x_{t−1}, 0, x_t, 1, x_t, 0)` for `t > 1` and
/// `e⁰_1 = (0, 1, x_1, 1, 0, 0)`.
pub fn build_t0_exact(tokens: &DMatrix<f64>) -> DMatrix<f64> {
    let (t, d) = tokens.shape();
    let l = Layout::new(d);
    let mut e = DMatrix::zeros(t, l.width());
    for i in 0..t {
        if i == 0 {
            e[(i, l.p1())] = 1.0;
        } else {
            e.view_mut((i, l.prev()), (1, d)).copy_from(&tokens.row(i - 1));
            e.view_mut((i, l.cur_copy()), (1, d)).copy_from(&tokens.row(i));
        }
        e.view_mut((i, l.cur()), (1, d)).copy_from(&tokens.row(i));
        e[(i, l.p2())] = 1.0;
    }
    e
}

/// The finite-sharpness token-augmentation layer.
#[derive(Debug, Clone)]
pub struct AugmentationLayer {
    d: usize,
    sharpness: f64,
    attention: AttentionLayer,
}

impl AugmentationLayer {
    pub fn new(d: usize, sharpness: f64) -> Result<Self> {
        if !(sharpness >= 1.0) || !sharpness.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sharpness must be a finite value >= 1, got {sharpness}"
            )));
        }
        // Inputs are (x_t, p_t) ∈ R^{d+1}; outputs are (a, b, c) ∈ R^{3d}.
        let selector = |sign: f64| {
            let mut m = DMatrix::zeros(1, d + 1);
            m[(0, d)] = sign;
            m
        };
        let value = |block: usize| {
            let mut m = DMatrix::zeros(3 * d, d + 1);
            for i in 0..d {
                m[(block * d + i, i)] = 1.0;
            }
            m
        };
        let attention = AttentionLayer {
            heads: vec![
                // Scores −p_s p_t: peaked at s = t − 1.
                AttentionHead {
                    w_q: selector(1.0),
                    w_k: selector(-1.0),
                    w_v: value(0),
                },
                // Scores p_s p_t: peaked at s = t.
                AttentionHead {
                    w_q: selector(1.0),
                    w_k: selector(1.0),
                    w_v: value(1),
                },
            ],
            normalization: Normalization::Softmax,
        };
        Ok(Self {
            d,
            sharpness,
            attention,
        })
    }

    pub fn sharpness(&self) -> f64 {
        self.sharpness
    }

    pub fn attention_layer(&self) -> &AttentionLayer {
        &self.attention
    }

    /// `p_t = (−1)^t n t` for `t = 0..=len`.
    pub fn positions(&self, len: usize) -> Vec<f64> {
        (0..=len)
            .map(|t| {
                let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
                sign * self.sharpness * t as f64
            })
            .collect()
    }

    /// Rows `(x_t, p_t)` for `t = 0..=T`, with the beginning-of-sequence token `x_0 = 0`.
    pub fn inputs(&self, tokens: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (t, d) = tokens.shape();
        if d != self.d {
            return Err(Error::DimensionMismatch(format!(
                "layer built for d = {}, tokens have d = {d}",
                self.d
            )));
        }
        let p = self.positions(t);
        let mut x = DMatrix::zeros(t + 1, d + 1);
        for i in 0..t {
            x.view_mut((i + 1, 0), (1, d)).copy_from(&tokens.row(i));
        }
        for (i, pi) in p.into_iter().enumerate() {
            x[(i, d)] = pi;
        }
        Ok(x)
    }

    /// Attention weights of head `head` (0: previous token, 1: current token)
    /// over `x_{0:T}`; row/column 0 is the beginning-of-sequence token.
    pub fn attention(&self, head: usize, tokens: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.attention.attention(head, &self.inputs(tokens)?)
    }

    /// `2 / (1 + e^{n‖a‖})`, which tends to `1{a = 0}`.
    pub fn gate(&self, norm: f64) -> f64 {
        2.0 / (1.0 + (self.sharpness * norm).exp())
    }

    /// Approximate `e⁰_{1:T}`: the attention output `(a, b, 0) ≈ (x_{t−1}, x_t, 0)`
    /// mapped to `(a, g, b, 1, (1 − g) b, 0)` with `g` the gate of `‖a‖`.
    pub fn forward(&self, tokens: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = self.d;
        let l = Layout::new(d);
        let attended = self.attention.forward(&self.inputs(tokens)?)?;
        let t = tokens.nrows();
        let mut e = DMatrix::zeros(t, l.width());
        for i in 0..t {
            let row = attended.row(i + 1);
            let a = row.columns(0, d);
            let b = row.columns(d, d);
            let g = self.gate(a.norm());
            e.view_mut((i, l.prev()), (1, d)).copy_from(&a);
            e[(i, l.p1())] = g;
            e.view_mut((i, l.cur()), (1, d)).copy_from(&b);
            e[(i, l.p2())] = 1.0;
            e.view_mut((i, l.cur_copy()), (1, d)).copy_from(&(b * (1.0 - g)));
        }
        Ok(e)
    }
}

/// Finite-sharpness augmented tokens.
pub fn build_t0_approx(tokens: &DMatrix<f64>, sharpness: f64) -> Result<DMatrix<f64>> {
    AugmentationLayer::new(tokens.ncols(), sharpness)?.forward(tokens)
}
