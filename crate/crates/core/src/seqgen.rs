//! Autoregressive sequence generators for the four instances.
//!
//! Every generator is driven by a `ChaCha8Rng` seeded from the caller's `u64`,
//! so identical parameters and seed give bit-identical tokens on every platform.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::linalg::{from_rows, to_rows};

type C64 = Complex<f64>;

/// Two base tokens closer than this (in `1 - ⟨x_i, x_j⟩`) count as duplicates.
pub const DUPLICATE_TOLERANCE: f64 = 1e-6;

const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instance {
    /// `x_{t+1} = W x_t`, dot-product kernel.
    LinearOrthogonal,
    /// `x_{t+1} = Ω x_t`, exponential kernel.
    ExpOrthogonal,
    /// A random cycle of unit tokens repeated, exponential kernel.
    Periodic,
    /// Unitary mixing with a phase non-linearity on `C^p ≅ R^{2p}`.
    PhaseModulated,
}

impl Instance {
    pub fn number(self) -> u8 {
        match self {
            Instance::LinearOrthogonal => 1,
            Instance::ExpOrthogonal => 2,
            Instance::Periodic => 3,
            Instance::PhaseModulated => 4,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Instance::LinearOrthogonal),
            2 => Ok(Instance::ExpOrthogonal),
            3 => Ok(Instance::Periodic),
            4 => Ok(Instance::PhaseModulated),
            _ => Err(Error::InvalidParameter(format!("unknown instance {n}"))),
        }
    }

    /// The kernel the convergence theory pairs with this instance.
    pub fn kernel(self) -> Kernel {
        match self {
            Instance::LinearOrthogonal => Kernel::Id,
            _ => Kernel::Exp,
        }
    }
}

impl fmt::Display for Instance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for Instance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "linear_orthogonal" => Ok(Instance::LinearOrthogonal),
            "exp" | "exp_orthogonal" => Ok(Instance::ExpOrthogonal),
            "periodic" => Ok(Instance::Periodic),
            "phase" | "phase_modulated" => Ok(Instance::PhaseModulated),
            other => other
                .parse::<u8>()
                .map_err(|_| Error::InvalidParameter(format!("unknown instance `{other}`")))
                .and_then(Instance::from_number),
        }
    }
}

/// The generator's hidden parameters, disclosed for oracle checks.
#[derive(Debug, Clone, PartialEq)]
pub enum HiddenParams {
    Orthogonal {
        w: DMatrix<f64>,
    },
    Periodic {
        period: usize,
        base: DMatrix<f64>,
    },
    PhaseModulated {
        u: DMatrix<C64>,
        theta: Vec<f64>,
        q: f64,
    },
}

impl HiddenParams {
    /// Applies the hidden map to one token, when the map is defined on all of R^d.
    pub fn apply(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            HiddenParams::Orthogonal { w } => Some(w * x),
            HiddenParams::PhaseModulated { u, theta, q } => Some(phase_modulated_map(u, theta, *q, x)),
            HiddenParams::Periodic { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    /// One token per row, `x_1` first.
    pub tokens: DMatrix<f64>,
    pub instance: Instance,
    pub hidden: HiddenParams,
    pub seed: u64,
}

impl Sequence {
    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn token(&self, t: usize) -> DVector<f64> {
        self.tokens.row(t).transpose()
    }

    /// Leading `t` tokens.
    pub fn prefix(&self, t: usize) -> DMatrix<f64> {
        self.tokens.rows(0, t).into_owned()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(&SequenceDoc::from(self))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: SequenceDoc =
            serde_json::from_str(s).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        doc.try_into()
    }
}

/// Uniform draw on `S^{d-1}` (normalized standard Gaussian).
pub fn sample_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// columns of `Q` re-signed so that `R` has a positive diagonal.
pub fn sample_orthogonal_with<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if d == 0 {
        return Err(Error::InvalidParameter("dimension must be at least 1".into()));
    }
    let z = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = z.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

pub fn sample_orthogonal(d: usize, seed: u64) -> Result<DMatrix<f64>> {
    sample_orthogonal_with(d, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Haar-distributed unitary matrix, by the same QR recipe over `C`.
pub fn sample_unitary_with<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Result<DMatrix<C64>> {
    if p == 0 {
        return Err(Error::InvalidParameter("dimension must be at least 1".into()));
    }
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let z = DMatrix::from_fn(p, p, |_, _| {
        C64::new(
            rng.sample::<f64, _>(StandardNormal) * scale,
            rng.sample::<f64, _>(StandardNormal) * scale,
        )
    });
    let qr = z.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..p {
        let rjj = r[(j, j)];
        let n = rjj.norm();
        if n > 0.0 {
            let phase = rjj / n;
            for i in 0..p {
                q[(i, j)] *= phase;
            }
        }
    }
    Ok(q)
}

/// Orthogonal-map sequence `x_{t+1} = W x_t` from explicit `W` and `x_1`.
pub fn orthogonal_sequence(
    instance: Instance,
    w: DMatrix<f64>,
    x1: &DVector<f64>,
    len: usize,
    seed: u64,
) -> Result<Sequence> {
    let d = x1.len();
    if w.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "W is {:?}, token dimension {d}",
            w.shape()
        )));
    }
    if len < 2 {
        return Err(Error::InvalidParameter("sequence length must be at least 2".into()));
    }
    let mut tokens = DMatrix::zeros(len, d);
    let mut x = x1.clone();
    tokens.row_mut(0).copy_from(&x.transpose());
    for t in 1..len {
        x = &w * &x;
        tokens.row_mut(t).copy_from(&x.transpose());
    }
    Ok(Sequence {
        tokens,
        instance,
        hidden: HiddenParams::Orthogonal { w },
        seed,
    })
}

fn generate_orthogonal(instance: Instance, d: usize, len: usize, seed: u64) -> Result<Sequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = sample_orthogonal_with(d, &mut rng)?;
    let x1 = sample_sphere(d, &mut rng);
    orthogonal_sequence(instance, w, &x1, len, seed)
}

/// Instance (1): `x_{t+1} = W x_t` with Haar `W`, `x_1` uniform on the sphere.
pub fn generate_linear(d: usize, len: usize, seed: u64) -> Result<Sequence> {
    generate_orthogonal(Instance::LinearOrthogonal, d, len, seed)
}

/// Instance (2): same generator as instance (1), paired with the exp kernel.
pub fn generate_exp_orthogonal(d: usize, len: usize, seed: u64) -> Result<Sequence> {
    generate_orthogonal(Instance::ExpOrthogonal, d, len, seed)
}

/// Instance (3): `period` distinct uniform tokens, tiled `repeats` times.
pub fn generate_periodic(d: usize, period: usize, repeats: usize, seed: u64) -> Result<Sequence> {
    if period < 2 {
        return Err(Error::InvalidParameter("period must be at least 2".into()));
    }
    if repeats == 0 || d == 0 {
        return Err(Error::InvalidParameter(
            "repeats and dimension must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base: Vec<DVector<f64>> = Vec::with_capacity(period);
    let mut rejections = 0;
    while base.len() < period {
        let x = sample_sphere(d, &mut rng);
        if base
            .iter()
            .any(|b| (b.dot(&x) - 1.0).abs() < DUPLICATE_TOLERANCE)
        {
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(Error::InvalidParameter(format!(
                    "could not draw {period} distinct tokens in dimension {d}"
                )));
            }
            continue;
        }
        base.push(x);
    }
    let base = DMatrix::from_fn(period, d, |i, j| base[i][j]);
    let tokens = DMatrix::from_fn(period * repeats, d, |i, j| base[(i % period, j)]);
    Ok(Sequence {
        tokens,
        instance: Instance::Periodic,
        hidden: HiddenParams::Periodic { period, base },
        seed,
    })
}

/// One step of the instance-(4) map on `R^{2p}`.
///
/// Packs `z_j = x_{2j-1} + i x_{2j}`, applies `U`, replaces each phase `φ` by
/// `θ_j + q φ` keeping the modulus, applies `U^*` and unpacks.
pub fn phase_modulated_map(u: &DMatrix<C64>, theta: &[f64], q: f64, x: &DVector<f64>) -> DVector<f64> {
    let p = theta.len();
    assert_eq!(x.len(), 2 * p);
    let z = DVector::from_fn(p, |j, _| C64::new(x[2 * j], x[2 * j + 1]));
    let z1 = u * z;
    let z2 = DVector::from_fn(p, |j, _| {
        let w = z1[j];
        // arg(0) is taken as 0; the modulus then zeroes the component anyway.
        let arg = if w.re == 0.0 && w.im == 0.0 { 0.0 } else { w.arg() };
        C64::from_polar(w.norm(), theta[j] + q * arg)
    });
    let next = u.adjoint() * z2;
    DVector::from_fn(2 * p, |i, _| {
        let c = next[i / 2];
        if i % 2 == 0 {
            c.re
        } else {
            c.im
        }
    })
}

pub fn phase_modulated_sequence(
    u: DMatrix<C64>,
    theta: Vec<f64>,
    q: f64,
    x1: &DVector<f64>,
    len: usize,
    seed: u64,
) -> Result<Sequence> {
    let p = theta.len();
    if p == 0 || u.shape() != (p, p) || x1.len() != 2 * p {
        return Err(Error::DimensionMismatch(format!(
            "U is {:?}, theta has {p} entries, x_1 has {}",
            u.shape(),
            x1.len()
        )));
    }
    if len < 2 {
        return Err(Error::InvalidParameter("sequence length must be at least 2".into()));
    }
    let x1 = x1.normalize();
    let mut tokens = DMatrix::zeros(len, 2 * p);
    let mut x = x1;
    tokens.row_mut(0).copy_from(&x.transpose());
    for t in 1..len {
        x = phase_modulated_map(&u, &theta, q, &x);
        tokens.row_mut(t).copy_from(&x.transpose());
    }
    Ok(Sequence {
        tokens,
        instance: Instance::PhaseModulated,
        hidden: HiddenParams::PhaseModulated { u, theta, q },
        seed,
    })
}

/// Instance (4) with random `U`, phases `θ_j ~ U[0, 2π)` and unit `x_1 ∈ R^{2p}`.
pub fn generate_phase_modulated(p: usize, len: usize, q: f64, seed: u64) -> Result<Sequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = sample_unitary_with(p, &mut rng)?;
    let theta: Vec<f64> = (0..p).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let x1 = sample_sphere(2 * p, &mut rng);
    phase_modulated_sequence(u, theta, q, &x1, len, seed)
}

/// JSON layout of a [`Sequence`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceDoc {
    pub dim: usize,
    pub instance: Instance,
    pub seed: u64,
    pub tokens: Vec<Vec<f64>>,
    pub hidden: HiddenDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HiddenDoc {
    Orthogonal {
        w: Vec<Vec<f64>>,
    },
    Periodic {
        period: usize,
        base: Vec<Vec<f64>>,
    },
    PhaseModulated {
        u_re: Vec<Vec<f64>>,
        u_im: Vec<Vec<f64>>,
        theta: Vec<f64>,
        q: f64,
    },
}

impl From<&Sequence> for SequenceDoc {
    fn from(s: &Sequence) -> Self {
        let hidden = match &s.hidden {
            HiddenParams::Orthogonal { w } => HiddenDoc::Orthogonal { w: to_rows(w) },
            HiddenParams::Periodic { period, base } => HiddenDoc::Periodic {
                period: *period,
                base: to_rows(base),
            },
            HiddenParams::PhaseModulated { u, theta, q } => HiddenDoc::PhaseModulated {
                u_re: to_rows(&u.map(|c| c.re)),
                u_im: to_rows(&u.map(|c| c.im)),
                theta: theta.clone(),
                q: *q,
            },
        };
        SequenceDoc {
            dim: s.dim(),
            instance: s.instance,
            seed: s.seed,
            tokens: to_rows(&s.tokens),
            hidden,
        }
    }
}

impl TryFrom<SequenceDoc> for Sequence {
    type Error = Error;
    fn try_from(doc: SequenceDoc) -> Result<Self> {
        let tokens = from_rows(&doc.tokens)?;
        if tokens.nrows() > 0 && tokens.ncols() != doc.dim {
            return Err(Error::DimensionMismatch(format!(
                "tokens have {} columns, dim is {}",
                tokens.ncols(),
                doc.dim
            )));
        }
        let hidden = match doc.hidden {
            HiddenDoc::Orthogonal { w } => HiddenParams::Orthogonal { w: from_rows(&w)? },
            HiddenDoc::Periodic { period, base } => HiddenParams::Periodic {
                period,
                base: from_rows(&base)?,
            },
            HiddenDoc::PhaseModulated { u_re, u_im, theta, q } => {
                let re = from_rows(&u_re)?;
                let im = from_rows(&u_im)?;
                if re.shape() != im.shape() {
                    return Err(Error::DimensionMismatch("U real/imag parts differ".into()));
                }
                HiddenParams::PhaseModulated {
                    u: re.zip_map(&im, C64::new),
                    theta,
                    q,
                }
            }
        };
        Ok(Sequence {
            tokens,
            instance: doc.instance,
            hidden,
            seed: doc.seed,
        })
    }
}
