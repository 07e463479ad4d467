//! Projector algebra in Gram coordinates.
//!
//! Every quantity here lives in the span of the features `φ(x_1), …, φ(x_T)`.
//! A vector `v = Σ_s c_s φ(x_s)` is stored as its coefficient vector `c`, the
//! inner product is `⟨a, b⟩ = aᵀ G b`, and the projector onto the complement
//! of `ν_t = φ(x_t)/√k(x_t, x_t)` acts as `c ↦ c − e_t (G c)_t / G_tt`. The
//! span is invariant under every `P_t`, so these finite computations are exact.
//!
//! Indices in this module are 0-based: token `x_1` is index 0.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kernels::{gram, Kernel};
use crate::linalg::{orthogonality_defect, spectral_radius};

/// Orthogonality tolerance for the linear-case closed forms.
pub const ORTHOGONAL_TOLERANCE: f64 = 1e-8;

/// Largest Gram condition number accepted by [`periodic_contraction_norm`].
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct GramFrame {
    gram: DMatrix<f64>,
    source: Option<(Kernel, DMatrix<f64>)>,
}

impl GramFrame {
    pub fn new(kernel: Kernel, tokens: &DMatrix<f64>) -> Self {
        Self {
            gram: gram(kernel, tokens),
            source: Some((kernel, tokens.clone())),
        }
    }

    /// Frame over an abstract Gram matrix (no tokens attached).
    pub fn from_gram(gram: DMatrix<f64>) -> Result<Self> {
        if !gram.is_square() {
            return Err(Error::DimensionMismatch("Gram matrix must be square".into()));
        }
        if let Some(i) = (0..gram.nrows()).find(|&i| !(gram[(i, i)] > 0.0)) {
            return Err(Error::SingularDiagonal {
                index: i,
                value: gram[(i, i)],
            });
        }
        Ok(Self { gram, source: None })
    }

    pub fn len(&self) -> usize {
        self.gram.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.gram.nrows() == 0
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn kernel(&self) -> Option<Kernel> {
        self.source.as_ref().map(|s| s.0)
    }

    pub fn tokens(&self) -> Option<&DMatrix<f64>> {
        self.source.as_ref().map(|s| &s.1)
    }

    /// `‖φ(x_t)‖ = √k(x_t, x_t)`.
    pub fn normalizer(&self, t: usize) -> f64 {
        self.gram[(t, t)].sqrt()
    }

    pub fn inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.dot(&(&self.gram * b))
    }

    pub fn norm(&self, c: &DVector<f64>) -> f64 {
        self.inner(c, c).max(0.0).sqrt()
    }

    /// Coefficients of the unit feature `ν_t`.
    pub fn unit_feature(&self, t: usize) -> DVector<f64> {
        let mut e = DVector::zeros(self.len());
        e[t] = 1.0 / self.normalizer(t);
        e
    }

    /// `⟨ν_s, ν_t⟩ = G_st / √(G_ss G_tt)`.
    pub fn unit_inner(&self, s: usize, t: usize) -> f64 {
        self.gram[(s, t)] / (self.normalizer(s) * self.normalizer(t))
    }

    fn check_index(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::InvalidParameter(format!(
                "projector index {t} out of range for {} features",
                self.len()
            )));
        }
        Ok(())
    }

    /// `P_t v` for a coefficient vector `v`.
    pub fn project(&self, t: usize, c: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_index(t)?;
        if c.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "coefficient vector has {} entries, frame has {}",
                c.len(),
                self.len()
            )));
        }
        let mut out = c.clone();
        out[t] -= self.gram.row(t).dot(&c.transpose()) / self.gram[(t, t)];
        Ok(out)
    }

    /// Coefficient matrix of `P_t`: `I − e_t G[t,:] / G_tt`.
    pub fn projector_matrix(&self, t: usize) -> Result<DMatrix<f64>> {
        self.check_index(t)?;
        let n = self.len();
        let mut m = DMatrix::identity(n, n);
        let g_tt = self.gram[(t, t)];
        for j in 0..n {
            m[(t, j)] -= self.gram[(t, j)] / g_tt;
        }
        Ok(m)
    }

    /// `P_{i_1} P_{i_2} ⋯ P_{i_k} v` for `order = [i_1, …, i_k]`; the last
    /// listed projector is applied first. An empty order is the identity.
    pub fn projector_product(&self, order: &[usize], v: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = v.clone();
        for &i in order.iter().rev() {
            out = self.project(i, &out)?;
        }
        Ok(out)
    }

    /// Coefficient matrix of `P_{i_1} ⋯ P_{i_k}`.
    pub fn projector_product_matrix(&self, order: &[usize]) -> Result<DMatrix<f64>> {
        let n = self.len();
        let mut m = DMatrix::identity(n, n);
        for &i in order {
            m *= self.projector_matrix(i)?;
        }
        Ok(m)
    }
}

/// `W_t x = Σ_s μ_s k(x_s, x)` over the first `mu.nrows()` frame tokens.
pub fn wt_apply(frame: &GramFrame, mu: &DMatrix<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    let (kernel, tokens) = frame
        .source
        .as_ref()
        .ok_or_else(|| Error::Unsupported("frame has no tokens attached".into()))?;
    if mu.nrows() > tokens.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} dual coefficients for {} tokens",
            mu.nrows(),
            tokens.nrows()
        )));
    }
    if x.len() != tokens.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "query has dimension {}, tokens have {}",
            x.len(),
            tokens.ncols()
        )));
    }
    let mut out = DVector::zeros(mu.ncols());
    for s in 0..mu.nrows() {
        let k = kernel.from_inner(tokens.row(s).transpose().dot(x));
        out += mu.row(s).transpose() * k;
    }
    Ok(out)
}

/// With the dot-product kernel `W_t` is the `d×d` matrix `Σ_s μ_s x_sᵀ`.
pub fn linear_wt(tokens: &DMatrix<f64>, mu: &DMatrix<f64>) -> DMatrix<f64> {
    let t = mu.nrows();
    mu.transpose() * tokens.rows(0, t)
}

fn check_orthogonal(w: &DMatrix<f64>, x1: &DVector<f64>) -> Result<()> {
    if !w.is_square() || w.nrows() != x1.len() {
        return Err(Error::DimensionMismatch(format!(
            "W is {:?}, x_1 has {} entries",
            w.shape(),
            x1.len()
        )));
    }
    let defect = orthogonality_defect(w);
    if !(defect <= ORTHOGONAL_TOLERANCE) {
        return Err(Error::NotOrthogonal(defect));
    }
    Ok(())
}

fn complement_projector(x: &DVector<f64>) -> DMatrix<f64> {
    let d = x.len();
    DMatrix::identity(d, d) - x * x.transpose()
}

/// Closed form `Δ_t = W_t − W = −(W(I − x_1x_1ᵀ))^t W^{−t+1}` for `t ≥ 1`.
pub fn linear_delta(w: &DMatrix<f64>, x1: &DVector<f64>, t: usize) -> Result<DMatrix<f64>> {
    check_orthogonal(w, x1)?;
    if t == 0 {
        return Err(Error::InvalidParameter("t must be at least 1".into()));
    }
    let m = w * complement_projector(x1);
    let wt = w.transpose();
    let d = w.nrows();
    let mut power = DMatrix::identity(d, d);
    for _ in 0..t {
        power = &m * power;
    }
    let mut inv = DMatrix::identity(d, d);
    for _ in 1..t {
        inv = &wt * inv;
    }
    Ok(-(power * inv))
}

/// `−W P_1 ⋯ P_t` with explicit `d×d` projectors `P_s = I − x_s x_sᵀ` along
/// the trajectory `x_s = W^{s−1} x_1`.
pub fn projector_delta(w: &DMatrix<f64>, x1: &DVector<f64>, t: usize) -> Result<DMatrix<f64>> {
    check_orthogonal(w, x1)?;
    if t == 0 {
        return Err(Error::InvalidParameter("t must be at least 1".into()));
    }
    let d = w.nrows();
    let mut prod = DMatrix::identity(d, d);
    let mut x = x1.clone();
    for _ in 0..t {
        prod *= complement_projector(&x);
        x = w * x;
    }
    Ok(-(w * prod))
}

/// `ρ(W(I − x_1x_1ᵀ))`.
pub fn linear_spectral_radius(w: &DMatrix<f64>, x1: &DVector<f64>) -> Result<f64> {
    check_orthogonal(w, x1)?;
    Ok(spectral_radius(&(w * complement_projector(x1))))
}

/// `max_{s,t} |⟨ν_{s+r}, ν_{t+r}⟩ − ⟨ν_s, ν_t⟩|` for one shift `r`.
pub fn stationarity_defect_at(frame: &GramFrame, r: usize) -> f64 {
    let n = frame.len();
    let mut worst: f64 = 0.0;
    for s in 0..n.saturating_sub(r) {
        for t in 0..n - r {
            worst = worst.max((frame.unit_inner(s + r, t + r) - frame.unit_inner(s, t)).abs());
        }
    }
    worst
}

/// Worst stationarity violation over all shifts that fit in the frame.
pub fn stationarity_check(frame: &GramFrame) -> f64 {
    (0..frame.len())
        .map(|r| stationarity_defect_at(frame, r))
        .fold(0.0, f64::max)
}

fn check_conditioning(g: &DMatrix<f64>) -> Result<()> {
    let eig = SymmetricEigen::new(g.clone()).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if !(min > 0.0) || max / min > MAX_CONDITION {
        let cond = if min > 0.0 { max / min } else { f64::INFINITY };
        return Err(Error::IllConditioned(cond));
    }
    Ok(())
}

/// Operator norm of `Π = P_1 ⋯ P_n` on the span of one period's features.
///
/// Solves the generalized problem `λ_max(MᵀGM, G)` by whitening with the
/// Cholesky factor `G = LLᵀ` and taking the top eigenvalue of
/// `L⁻¹ MᵀGM L⁻ᵀ`.
pub fn periodic_contraction_norm(frame: &GramFrame) -> Result<f64> {
    let n = frame.len();
    if n == 0 {
        return Err(Error::Empty("frame has no features"));
    }
    let g = frame.gram();
    check_conditioning(g)?;
    let order: Vec<usize> = (0..n).collect();
    let m = frame.projector_product_matrix(&order)?;
    let chol = g
        .clone()
        .cholesky()
        .ok_or(Error::IllConditioned(f64::INFINITY))?;
    let l = chol.l();
    let a = m.transpose() * g * &m;
    let left = l
        .solve_lower_triangular(&a)
        .ok_or(Error::IllConditioned(f64::INFINITY))?;
    let whitened_t = l
        .solve_lower_triangular(&left.transpose())
        .ok_or(Error::IllConditioned(f64::INFINITY))?;
    let sym = (&whitened_t + whitened_t.transpose()) * 0.5;
    let top = SymmetricEigen::new(sym).eigenvalues.max();
    Ok(top.max(0.0).sqrt())
}

/// Spectral radius of `Π = P_1 ⋯ P_n`, the asymptotic per-period contraction.
pub fn periodic_contraction_radius(frame: &GramFrame) -> Result<f64> {
    let order: Vec<usize> = (0..frame.len()).collect();
    Ok(spectral_radius(&frame.projector_product_matrix(&order)?))
}
