use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use crate::descent;
use crate::error::{Error, Result};
use crate::kernels::Variant;
use crate::rkhs;
use crate::seqgen::{self, Instance};
use crate::transformer::{equivalence_report, Normalization};

/// Gap above which the transformer and the descent are considered to disagree.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-10;
/// `ρ` below this counts as a strict spectral gap.
pub const SPECTRAL_GAP_THRESHOLD: f64 = 1.0 - 1e-12;
pub const ROTATION_TOLERANCE: f64 = 1e-10;

/// Rendered command output and whether its built-in checks held.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub text: String,
    pub passed: bool,
}

/// Everything an output echoes about how it was produced.
#[derive(Debug, Clone, Serialize)]
pub struct Metadata<'a> {
    pub command: &'a str,
    pub version: &'static str,
    pub config: &'a ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    /// Period of each seed's sequence (periodic family only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub periods: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

impl<'a> Metadata<'a> {
    pub fn new(command: &'a str, config: &'a ExperimentConfig) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            dim: Some(config.dim()),
            length: (config.instance != Instance::Periodic).then(|| config.length()),
            periods: (config.instance == Instance::Periodic)
                .then(|| config.seed_values().iter().map(|&s| config.period_for(s)).collect()),
            kernel: None,
            eta: None,
        }
    }

    fn comment_lines(&self) -> String {
        let value = serde_json::to_value(self).expect("metadata serializes");
        let mut out = String::new();
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                out.push_str(&format!("# {k}: {v}\n"));
            }
        }
        out
    }
}

/// Squared-error curves of several sequences, aligned on `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveOutput {
    pub seeds: Vec<u64>,
    /// `per_seed[i][t-1]`, truncated to the shortest sequence.
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl CurveOutput {
    pub fn new(seeds: Vec<u64>, mut per_seed: Vec<Vec<f64>>) -> Self {
        let len = per_seed.iter().map(Vec::len).min().unwrap_or(0);
        for c in &mut per_seed {
            c.truncate(len);
        }
        let k = per_seed.len() as f64;
        let mean = (0..len)
            .map(|i| per_seed.iter().map(|c| c[i]).sum::<f64>() / k)
            .collect();
        Self { seeds, per_seed, mean }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn to_csv(&self, meta: &Metadata) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["t".to_string(), "mean".to_string()];
        header.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut row = vec![(i + 1).to_string(), fmt_f64(self.mean[i])];
            row.extend(self.per_seed.iter().map(|c| fmt_f64(c[i])));
            w.write_record(&row).map_err(csv_err)?;
        }
        Ok(meta.comment_lines() + &into_string(w)?)
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidParameter(format!("csv: {e}"))
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidParameter(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

pub fn figure2_curves(cfg: &ExperimentConfig) -> Result<CurveOutput> {
    cfg.validate()?;
    let kernel = cfg.kernel()?;
    let seeds = cfg.seed_values();
    let curves = seeds
        .par_iter()
        .map(|&s| descent::error_curve(&cfg.sequence(s)?.tokens, kernel, cfg.variant))
        .collect::<Result<Vec<_>>>()?;
    if cfg.instance == Instance::Periodic && cfg.period.is_none() {
        log::info!("periods drawn per sequence; curves truncated to the shortest one");
    }
    Ok(CurveOutput::new(seeds, curves))
}

/// Per-seed squared-error curves and their mean as CSV.
pub fn figure2(cfg: &ExperimentConfig) -> Result<Outcome> {
    let curves = figure2_curves(cfg)?;
    let mut meta = Metadata::new("figure2", cfg);
    meta.kernel = Some(cfg.kernel()?.to_string());
    meta.eta = resolved_eta(cfg).ok();
    Ok(Outcome {
        text: curves.to_csv(&meta)?,
        passed: true,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceEntry {
    pub normalization: Normalization,
    pub eta: f64,
    /// Largest gap per seed, over all depths and positions.
    pub per_seed: Vec<f64>,
    pub max_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceOutput<'a> {
    pub meta: Metadata<'a>,
    pub tolerance: f64,
    pub entries: Vec<EquivalenceEntry>,
    pub max_gap: f64,
    pub passed: bool,
    /// Set when the beginning-of-sequence offset was ablated, so a failing
    /// softmax entry is the expected outcome.
    pub expected_failure: bool,
}

pub fn equivalence_entries(cfg: &ExperimentConfig) -> Result<Vec<EquivalenceEntry>> {
    cfg.validate()?;
    let seqs = cfg
        .seed_values()
        .into_par_iter()
        .map(|s| cfg.sequence(s))
        .collect::<Result<Vec<_>>>()?;
    Normalization::ALL
        .iter()
        .map(|&n| {
            let (kernel, variant) = n.descent_config();
            let eta = cfg.eta.resolve(kernel, variant)?;
            let per_seed = seqs
                .par_iter()
                .map(|s| equivalence_report(&s.tokens, n, eta, cfg.depth, !cfg.ablate_bos).map(|r| r.max_gap))
                .collect::<Result<Vec<_>>>()?;
            let max_gap = per_seed.iter().copied().fold(0.0, f64::max);
            Ok(EquivalenceEntry {
                normalization: n,
                eta,
                per_seed,
                max_gap,
            })
        })
        .collect()
}

/// Transformer-versus-descent gaps for every normalization as JSON.
pub fn equivalence(cfg: &ExperimentConfig) -> Result<Outcome> {
    let entries = equivalence_entries(cfg)?;
    let max_gap = entries.iter().map(|e| e.max_gap).fold(0.0, f64::max);
    let passed = entries.iter().all(|e| e.max_gap <= EQUIVALENCE_TOLERANCE);
    let out = EquivalenceOutput {
        meta: Metadata::new("equivalence", cfg),
        tolerance: EQUIVALENCE_TOLERANCE,
        entries,
        max_gap,
        passed,
        expected_failure: cfg.ablate_bos,
    };
    Ok(Outcome {
        text: to_json(&out),
        passed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    /// Bin `i` counts `ρ ∈ [i/bins, (i+1)/bins)`; the last bin is closed.
    pub counts: Vec<usize>,
    /// Draws with `ρ ≥ 1 − 1e−12`.
    pub tail: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RotationCheck {
    pub angles: usize,
    pub max_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralOutput<'a> {
    pub meta: Metadata<'a>,
    pub dim: usize,
    pub draws: usize,
    pub fraction_below_one: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub histogram: Histogram,
    pub rotation: RotationCheck,
    pub passed: bool,
}

/// `ρ(W(I − x₁x₁ᵀ))` for `draws` independent Haar `W` and uniform `x₁`.
pub fn spectral_radii(d: usize, draws: usize, seed: u64, force_identity: bool) -> Result<Vec<f64>> {
    (0..draws as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i));
            let w = if force_identity {
                DMatrix::identity(d, d)
            } else {
                seqgen::sample_orthogonal_with(d, &mut rng)?
            };
            let x1 = seqgen::sample_sphere(d, &mut rng);
            rkhs::linear_spectral_radius(&w, &x1)
        })
        .collect()
}

/// Largest `|ρ − |cos θ||` over `θ_k = kπ/(m+1)`, `k = 1..m`, for planar rotations.
pub fn rotation_grid_error(m: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 1..=m {
        let theta = k as f64 * std::f64::consts::PI / (m + 1) as f64;
        let (s, c) = theta.sin_cos();
        let w = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let x1 = seqgen::sample_sphere(2, &mut rng);
        let rho = rkhs::linear_spectral_radius(&w, &x1)?;
        worst = worst.max((rho - c.abs()).abs());
    }
    Ok(worst)
}

pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let mut counts = vec![0; bins];
    for &v in values {
        let i = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Histogram {
        counts,
        tail: values.iter().filter(|&&v| v >= SPECTRAL_GAP_THRESHOLD).count(),
    }
}

/// Spectral statistics of the linear instance as JSON.
pub fn spectral(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let d = cfg.dim();
    if cfg.draws == 0 {
        return Err(Error::InvalidParameter("draws must be at least 1".into()));
    }
    let mut radii = spectral_radii(d, cfg.draws, cfg.seed, cfg.force_identity)?;
    radii.sort_by(f64::total_cmp);
    let below = radii.iter().filter(|&&r| r < SPECTRAL_GAP_THRESHOLD).count();
    let rotation = RotationCheck {
        angles: 64,
        max_error: rotation_grid_error(64, cfg.seed)?,
    };
    let passed = rotation.max_error <= ROTATION_TOLERANCE;
    let mut meta = Metadata::new("spectral", cfg);
    meta.length = None;
    let out = SpectralOutput {
        meta,
        dim: d,
        draws: cfg.draws,
        fraction_below_one: below as f64 / radii.len() as f64,
        min: radii[0],
        median: radii[radii.len() / 2],
        max: radii[radii.len() - 1],
        histogram: histogram(&radii, 20),
        rotation,
        passed,
    };
    Ok(Outcome {
        text: to_json(&out),
        passed,
    })
}

/// Successive projections `P_j ⋯ P_t ν` for `j = t, …, 1`, where `P_j`
/// removes the component along the unit direction `directions[j-1]`.
pub fn projector_chain(directions: &[DVector<f64>], nu: &DVector<f64>) -> Vec<(usize, DVector<f64>)> {
    let mut v = nu.clone();
    let mut out = Vec::with_capacity(directions.len());
    for (j, dir) in directions.iter().enumerate().rev() {
        let n = dir.normalize();
        v -= &n * n.dot(&v);
        out.push((j + 1, v.clone()));
    }
    out
}

/// Norm chain of random projections as CSV.
pub fn projector_demo(cfg: &ExperimentConfig) -> Result<Outcome> {
    let d = cfg.dim.unwrap_or(3);
    let t = cfg.length.unwrap_or(6);
    if d == 0 || t == 0 {
        return Err(Error::InvalidParameter("dim and length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let directions: Vec<_> = (0..t).map(|_| seqgen::sample_sphere(d, &mut rng)).collect();
    let nu = seqgen::sample_sphere(d, &mut rng);
    let chain = projector_chain(&directions, &nu);

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["j".to_string(), "norm".to_string()];
    header.extend((1..=d).map(|i| format!("v{i}")));
    w.write_record(&header).map_err(csv_err)?;
    let mut row = vec![(t + 1).to_string(), fmt_f64(nu.norm())];
    row.extend(nu.iter().map(|&x| fmt_f64(x)));
    w.write_record(&row).map_err(csv_err)?;
    let mut passed = true;
    let mut last = nu.norm();
    for (j, v) in &chain {
        let norm = v.norm();
        passed &= norm <= last + 1e-12;
        last = norm;
        let mut row = vec![j.to_string(), fmt_f64(norm)];
        row.extend(v.iter().map(|&x| fmt_f64(x)));
        w.write_record(&row).map_err(csv_err)?;
    }
    let mut meta = Metadata::new("projector-demo", cfg);
    meta.dim = Some(d);
    meta.length = Some(t);
    meta.kernel = Some("id".into());
    Ok(Outcome {
        text: meta.comment_lines() + &into_string(w)?,
        passed,
    })
}

/// Distance of the softmax descent iterates to the fixed point, per depth and
/// position, as CSV with the `(1 − 1/t)^n` reference column.
pub fn depth_gap(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let seeds = cfg.seed_values();
    let gaps = seeds
        .par_iter()
        .map(|&s| descent::softmax_depth_gap(&cfg.sequence(s)?.tokens, cfg.depth))
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "n", "t", "gap", "reference"]).map_err(csv_err)?;
    for (seed, g) in seeds.iter().zip(&gaps) {
        for (n, (row, reference)) in g.gaps.iter().zip(&g.reference).enumerate() {
            for (t, (gap, r)) in row.iter().zip(reference).enumerate() {
                w.write_record([
                    seed.to_string(),
                    n.to_string(),
                    (t + 1).to_string(),
                    fmt_f64(*gap),
                    fmt_f64(*r),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    let mut meta = Metadata::new("depth-gap", cfg);
    meta.kernel = Some("exp".into());
    meta.eta = Some(1.0);
    Ok(Outcome {
        text: meta.comment_lines() + &into_string(w)?,
        passed: true,
    })
}

/// The first configured sequence as JSON.
pub fn gen(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let seq = cfg.sequence(cfg.seed)?;
    let text = seq
        .to_json()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(Outcome {
        text: text + "\n",
        passed: true,
    })
}

/// Resolved step size for the configured kernel and variant, if valid.
pub fn resolved_eta(cfg: &ExperimentConfig) -> Result<f64> {
    let kernel = cfg.kernel()?;
    if kernel == crate::Kernel::Id && cfg.variant == Variant::SoftmaxNormalized {
        return Err(Error::Unsupported("softmax normalization needs the exp kernel".into()));
    }
    cfg.eta.resolve(kernel, cfg.variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expcli::config::EtaSpec;

    fn small(instance: Instance) -> ExperimentConfig {
        ExperimentConfig {
            instance,
            dim: Some(4),
            length: Some(12),
            period: Some(5),
            repeats: 3,
            depth: 4,
            seeds: 3,
            draws: 20,
            ..Default::default()
        }
    }

    #[test]
    fn curve_mean_is_arithmetic_mean() {
        let c = CurveOutput::new(vec![0, 1], vec![vec![1.0, 2.0, 3.0], vec![3.0, 4.0]]);
        assert_eq!(c.mean, vec![2.0, 3.0]);
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn figure2_row_count_and_echo() {
        let cfg = small(Instance::ExpOrthogonal);
        let out = figure2(&cfg).unwrap();
        let data: Vec<&str> = out.text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data[0], "t,mean,seed_0,seed_1,seed_2");
        assert_eq!(data.len() - 1, 11);
        assert!(out.text.contains("# config:"));
        let periodic = figure2(&small(Instance::Periodic)).unwrap();
        let rows = periodic.text.lines().filter(|l| !l.starts_with('#')).count();
        assert_eq!(rows - 1, 14);
    }

    #[test]
    fn figure2_is_deterministic() {
        let cfg = small(Instance::PhaseModulated);
        assert_eq!(figure2(&cfg).unwrap(), figure2(&cfg).unwrap());
    }

    #[test]
    fn figure2_rejects_mismatched_kernel() {
        let mut cfg = small(Instance::LinearOrthogonal);
        cfg.kernel = Some(crate::Kernel::Exp);
        assert!(figure2(&cfg).is_err());
    }

    #[test]
    fn equivalence_passes_and_ablation_fails() {
        let cfg = small(Instance::ExpOrthogonal);
        assert!(equivalence(&cfg).unwrap().passed);
        let ablated = ExperimentConfig {
            ablate_bos: true,
            ..cfg.clone()
        };
        let entries = equivalence_entries(&ablated).unwrap();
        assert!(entries[2].max_gap > EQUIVALENCE_TOLERANCE);
        assert!(entries[..2].iter().all(|e| e.max_gap <= EQUIVALENCE_TOLERANCE));
        let zero = ExperimentConfig { depth: 0, ..cfg };
        assert!(equivalence_entries(&zero).unwrap().iter().all(|e| e.max_gap == 0.0));
    }

    #[test]
    fn equivalence_rejects_nilpotent_for_softmax() {
        let cfg = ExperimentConfig {
            eta: EtaSpec::Nilpotent,
            ..small(Instance::ExpOrthogonal)
        };
        assert!(equivalence(&cfg).is_err());
    }

    #[test]
    fn identity_lands_in_the_tail() {
        let r = spectral_radii(5, 10, 0, true).unwrap();
        assert!(r.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        let h = histogram(&r, 20);
        assert_eq!(h.tail, 10);
        assert_eq!(h.counts[19], 10);
    }

    #[test]
    fn rotation_grid_matches_cosine() {
        assert!(rotation_grid_error(32, 3).unwrap() <= ROTATION_TOLERANCE);
    }

    #[test]
    fn projector_chain_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dirs: Vec<_> = (0..6).map(|_| seqgen::sample_sphere(3, &mut rng)).collect();
        let first = projector_chain(&dirs, &dirs[5]);
        assert!(first[0].1.norm() < 1e-15);
        let nu = seqgen::sample_sphere(3, &mut rng);
        let chain = projector_chain(&dirs, &nu);
        assert_eq!(chain.iter().map(|c| c.0).collect::<Vec<_>>(), vec![6, 5, 4, 3, 2, 1]);
        for w in chain.windows(2) {
            assert!(w[1].1.norm() <= w[0].1.norm() + 1e-15);
        }
        assert!(chain[5].1.norm() < chain[0].1.norm());
    }

    #[test]
    fn depth_gap_csv_shape() {
        let cfg = ExperimentConfig {
            seeds: 1,
            ..small(Instance::ExpOrthogonal)
        };
        let out = depth_gap(&cfg).unwrap();
        let rows = out.text.lines().filter(|l| !l.starts_with('#')).count();
        assert_eq!(rows, 1 + 5 * 12);
    }

    #[test]
    fn gen_roundtrips() {
        let cfg = small(Instance::LinearOrthogonal);
        let text = gen(&cfg).unwrap().text;
        let seq = seqgen::Sequence::from_json(&text).unwrap();
        assert_eq!(seq.tokens, cfg.sequence(cfg.seed).unwrap().tokens);
    }
}
