use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{build_descent_layer, build_t0_approx, build_t0_exact, DescentLayer, LayerOptions, Layout, Normalization};
use crate::descent;
use crate::error::{Error, Result};
use crate::kernels::AttentionMatrix;

/// How the augmented tokens `e⁰` are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augmentation {
    Exact,
    Approx { sharpness: f64 },
}

/// `n` residual applications of one descent layer followed by the projection
/// onto the `u` slot.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub augmentation: Augmentation,
    pub layer: DescentLayer,
}

impl TransformerModel {
    pub fn new(d: usize, eta: f64, normalization: Normalization) -> Result<Self> {
        Ok(Self {
            augmentation: Augmentation::Exact,
            layer: build_descent_layer(d, eta, normalization, LayerOptions::default())?,
        })
    }

    pub fn with_layer(layer: DescentLayer, augmentation: Augmentation) -> Self {
        Self { augmentation, layer }
    }

    pub fn augment(&self, tokens: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if tokens.ncols() != self.layer.d {
            return Err(Error::DimensionMismatch(format!(
                "model built for d = {}, tokens have d = {}",
                self.layer.d,
                tokens.ncols()
            )));
        }
        match self.augmentation {
            Augmentation::Exact => Ok(build_t0_exact(tokens)),
            Augmentation::Approx { sharpness } => build_t0_approx(tokens, sharpness),
        }
    }

    /// `e^0, e^1, …, e^n`.
    pub fn trajectory(&self, tokens: &DMatrix<f64>, n: usize) -> Result<Vec<DMatrix<f64>>> {
        let mut e = self.augment(tokens)?;
        let mut out = Vec::with_capacity(n + 1);
        out.push(e.clone());
        for _ in 0..n {
            e = self.layer.apply(&e)?;
            out.push(e.clone());
        }
        Ok(out)
    }

    /// `M^n(x_{1:t})` for every `t`, one row per position.
    pub fn forward(&self, tokens: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
        let mut e = self.augment(tokens)?;
        for _ in 0..n {
            e = self.layer.apply(&e)?;
        }
        Ok(project(&e, self.layer.d))
    }
}

/// The last `d` coordinates of each augmented token.
pub fn project(e: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    e.columns(Layout::new(d).u(), d).into_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub normalization: Normalization,
    pub eta: f64,
    pub depth: usize,
    pub bos_offset: bool,
    /// `max_t ‖u-slot of e^k_t − u^k_t‖_∞` for `k = 0..=depth`.
    pub per_depth: Vec<f64>,
    pub max_gap: f64,
}

/// Runs the constructed model and the descent side by side and reports the
/// largest discrepancy between the `u` slots and the descent iterates.
pub fn equivalence_report(
    tokens: &DMatrix<f64>,
    normalization: Normalization,
    eta: f64,
    n: usize,
    bos_offset: bool,
) -> Result<EquivalenceReport> {
    let d = tokens.ncols();
    let layer = build_descent_layer(
        d,
        eta,
        normalization,
        LayerOptions {
            square: false,
            bos_offset,
        },
    )?;
    let model = TransformerModel::with_layer(layer, Augmentation::Exact);
    let model_traj = model.trajectory(tokens, n)?;

    let (kernel, variant) = normalization.descent_config();
    let matrix = AttentionMatrix::build(kernel, variant, tokens)?;
    let descent_traj = descent::trajectory(&matrix, tokens, eta, n)?;

    let per_depth: Vec<f64> = model_traj
        .iter()
        .zip(&descent_traj)
        .map(|(e, u)| crate::linalg::max_abs_diff(&project(e, d), u))
        .collect();
    let max_gap = per_depth.iter().copied().fold(0.0, f64::max);
    Ok(EquivalenceReport {
        normalization,
        eta,
        depth: n,
        bos_offset,
        per_depth,
        max_gap,
    })
}
