//! Kernel evaluation, Gram matrices and the causal attention matrices that
//! drive the descent.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|‖x‖ - 1|` above which the matrix builders log a warning.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-8;

/// The two kernels on the sphere: `⟨x, y⟩` and `exp(⟨x, y⟩)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Id,
    Exp,
}

impl Kernel {
    /// Kernel value as a function of the inner product.
    #[inline]
    pub fn from_inner(self, inner: f64) -> f64 {
        match self {
            Kernel::Id => inner,
            Kernel::Exp => inner.exp(),
        }
    }

    pub fn eval(self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), y.len(), "kernel arguments differ in dimension");
        self.from_inner(x.iter().zip(y).map(|(a, b)| a * b).sum())
    }

    /// `k(x, x)` for any unit vector `x`.
    pub fn unit_diagonal(self) -> f64 {
        self.from_inner(1.0)
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Id => "id",
            Kernel::Exp => "exp",
        })
    }
}

impl FromStr for Kernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" => Ok(Kernel::Id),
            "exp" => Ok(Kernel::Exp),
            other => Err(Error::InvalidParameter(format!("unknown kernel `{other}`"))),
        }
    }
}

/// Whether attention rows are the raw kernel values or normalized to sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Raw,
    #[serde(rename = "softmax")]
    SoftmaxNormalized,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Raw => "raw",
            Variant::SoftmaxNormalized => "softmax",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Variant::Raw),
            "softmax" | "normalized" => Ok(Variant::SoftmaxNormalized),
            other => Err(Error::InvalidParameter(format!("unknown variant `{other}`"))),
        }
    }
}

/// Lower-triangular causal attention matrix `A` over a token list.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    entries: DMatrix<f64>,
    variant: Variant,
    kernel: Kernel,
}

impl AttentionMatrix {
    pub fn build(kernel: Kernel, variant: Variant, tokens: &DMatrix<f64>) -> Result<Self> {
        let t = tokens.nrows();
        if t == 0 {
            return Err(Error::Empty("attention matrix needs at least one token"));
        }
        if variant == Variant::SoftmaxNormalized && kernel != Kernel::Exp {
            return Err(Error::Unsupported(
                "row normalization is only defined for the exp kernel".into(),
            ));
        }
        warn_if_not_unit(tokens);

        let mut entries = DMatrix::zeros(t, t);
        for i in 0..t {
            match variant {
                Variant::Raw => {
                    for j in 0..=i {
                        entries[(i, j)] = kernel.from_inner(tokens.row(i).dot(&tokens.row(j)));
                    }
                }
                Variant::SoftmaxNormalized => {
                    let scores: Vec<f64> =
                        (0..=i).map(|j| tokens.row(i).dot(&tokens.row(j))).collect();
                    for (j, w) in softmax(&scores).into_iter().enumerate() {
                        entries[(i, j)] = w;
                    }
                }
            }
        }
        Ok(Self {
            entries,
            variant,
            kernel,
        })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    #[inline]
    pub fn get(&self, t: usize, s: usize) -> f64 {
        self.entries[(t, s)]
    }
}

/// Symmetric Gram matrix `G[i][j] = k(x_i, x_j)`.
pub fn gram(kernel: Kernel, tokens: &DMatrix<f64>) -> DMatrix<f64> {
    warn_if_not_unit(tokens);
    let t = tokens.nrows();
    let mut g = DMatrix::zeros(t, t);
    for i in 0..t {
        for j in 0..=i {
            let v = kernel.from_inner(tokens.row(i).dot(&tokens.row(j)));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Numerically stable softmax of one score row (max subtracted first).
///
/// When the maximum is not finite the row saturates to a one-hot vector at
/// the first arg-max.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let arg = scores.iter().position(|&s| s == max).unwrap_or(0);
        return (0..scores.len()).map(|j| if j == arg { 1.0 } else { 0.0 }).collect();
    }
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn warn_if_not_unit(tokens: &DMatrix<f64>) {
    if let Some((i, n)) = tokens
        .row_iter()
        .map(|r| r.norm())
        .enumerate()
        .find(|(_, n)| (n - 1.0).abs() > UNIT_NORM_TOLERANCE)
    {
        log::warn!("token {} has norm {} (expected unit norm)", i + 1, n);
    }
}
