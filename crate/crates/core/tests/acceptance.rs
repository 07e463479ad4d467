//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test --test acceptance` (add `--release` for speed).

use std::process::ExitCode;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ckd::descent;
use ckd::expcli::commands::{rotation_grid_error, spectral_radii};
use ckd::fit::log_linear_fit_indexed;
use ckd::rkhs::{self, GramFrame};
use ckd::seqgen;
use ckd::transformer::{build_t0_approx, build_t0_exact, equivalence_report, Normalization};
use ckd::{AttentionMatrix, Kernel, Variant};

struct Verdict {
    passed: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Verdict);

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn random_tokens(t: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(t, d);
    for i in 0..t {
        x.row_mut(i).copy_from(&seqgen::sample_sphere(d, &mut rng).transpose());
    }
    x
}

fn mean_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let len = curves.iter().map(Vec::len).min().unwrap();
    (0..len)
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
        .collect()
}

fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn equivalence() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let s = seqgen::generate_exp_orthogonal(8, 12, seed).unwrap();
        for n in Normalization::ALL {
            let (kernel, variant) = n.descent_config();
            let eta = ckd::expcli::EtaSpec::Auto.resolve(kernel, variant).unwrap();
            let r = equivalence_report(&s.tokens, n, eta, 15, true).unwrap();
            worst = worst.max(r.per_depth.iter().copied().fold(0.0, f64::max));
        }
    }
    verdict(worst <= 1e-10, format!("max gap {worst:.3e} (tol 1e-10)"))
}

fn nilpotency() -> Verdict {
    let mut worst_exact: f64 = 0.0;
    let mut smallest_before = f64::INFINITY;
    for kernel in [Kernel::Id, Kernel::Exp] {
        for seed in 0..5 {
            let x = random_tokens(12, 5, 100 + seed);
            for t in 2..=12 {
                let p = x.rows(0, t).into_owned();
                let a = AttentionMatrix::build(kernel, Variant::Raw, &p).unwrap();
                let eta = 1.0 / a.get(0, 0);
                let ustar = descent::fixed_point(&a, &p).unwrap();
                let traj = descent::trajectory(&a, &p, eta, t + 3).unwrap();
                for u in &traj[t..] {
                    worst_exact = worst_exact.max((u - &ustar).norm());
                }
                smallest_before = smallest_before.min((&traj[t - 1] - &ustar).norm());
            }
        }
    }
    verdict(
        worst_exact <= 1e-11 && smallest_before > 1e-6,
        format!(
            "max ‖u^n − u*‖ for n ≥ t: {worst_exact:.3e} (tol 1e-11); min at n = t−1: {smallest_before:.3e} (need > 1e-6)"
        ),
    )
}

fn dual_identity() -> Verdict {
    let mut worst: f64 = 0.0;
    for (kernel, s) in [
        (Kernel::Id, seqgen::generate_linear(15, 201, 7).unwrap()),
        (Kernel::Exp, seqgen::generate_exp_orthogonal(15, 201, 7).unwrap()),
        (Kernel::Exp, seqgen::generate_periodic(15, 25, 9, 7).unwrap()),
    ] {
        let x = s.tokens.rows(0, 201).into_owned();
        let k = ckd::kernels::gram(kernel, &x);
        // Direct interpolation solve with nalgebra's own triangular solver.
        let lower = k.rows(0, 200).columns(0, 200).lower_triangle();
        let targets = x.rows(1, 200).into_owned();
        let mu = lower.solve_lower_triangular(&targets).unwrap();
        let a = AttentionMatrix::build(kernel, Variant::Raw, &x).unwrap();
        let ustar = descent::fixed_point(&a, &x).unwrap();
        let k11 = a.get(0, 0);
        for t in 0..200 {
            let lhs = x.row(t + 1) - ustar.row(t);
            worst = worst.max((lhs - mu.row(t) * k11).norm());
        }
    }
    verdict(worst <= 1e-8, format!("max residual {worst:.3e} over t ≤ 200 (tol 1e-8)"))
}

fn linear_closed_form() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let d = 2 + (seed as usize % 14);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = seqgen::sample_orthogonal_with(d, &mut rng).unwrap();
        let x1 = seqgen::sample_sphere(d, &mut rng);
        for t in 1..=50 {
            let closed = rkhs::linear_delta(&w, &x1, t).unwrap();
            let proj = rkhs::projector_delta(&w, &x1, t).unwrap();
            worst = worst.max(max_abs(&closed, &proj));
        }
    }
    let rot = rotation_grid_error(64, 0).unwrap();
    verdict(
        worst <= 1e-9 && rot <= 1e-10,
        format!("closed form vs projectors {worst:.3e} (tol 1e-9); rotation |ρ − |cos θ|| {rot:.3e} (tol 1e-10)"),
    )
}

fn spectral_gap() -> Verdict {
    let radii = spectral_radii(15, 1000, 0, false).unwrap();
    let frac = radii.iter().filter(|&&r| r < 1.0).count() as f64 / radii.len() as f64;
    let curves: Vec<Vec<f64>> = (0..5)
        .map(|seed| {
            let s = seqgen::generate_linear(15, 150, seed).unwrap();
            descent::error_curve(&s.tokens, Kernel::Id, Variant::Raw).unwrap()
        })
        .collect();
    let mean = mean_curve(&curves);
    let last = *mean.last().unwrap();
    let fit = log_linear_fit_indexed(&mean, 1e-28).unwrap();
    verdict(
        frac >= 0.99 && last < 1e-6 && fit.r_squared > 0.95,
        format!(
            "fraction ρ < 1: {frac:.3} (need ≥ 0.99); final mean error {last:.3e} (need < 1e-6); R² {:.3} (need > 0.95)",
            fit.r_squared
        ),
    )
}

fn periodic_contraction() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for period in [20, 30, 40] {
        let s = seqgen::generate_periodic(15, period, 20, 11).unwrap();
        let frame = GramFrame::new(Kernel::Exp, &s.tokens.rows(0, period).into_owned());
        let norm = rkhs::periodic_contraction_norm(&frame).unwrap();
        let radius = rkhs::periodic_contraction_radius(&frame).unwrap();
        let curve = descent::error_curve(&s.tokens, Kernel::Exp, Variant::Raw).unwrap();
        // Fit after the first period, above the floating-point floor.
        let fit = log_linear_fit_indexed(&curve[period..], 1e-28).unwrap();
        let observed = fit.slope * period as f64;
        let predicted = 2.0 * norm.ln();
        let ratio = observed / predicted;
        let pass = norm < 1.0 && (0.5..=2.0).contains(&ratio);
        ok &= pass;
        parts.push(format!(
            "t_p={period}: ‖Π‖={norm:.4}, per-period log slope {observed:.4} vs 2·log‖Π‖ {predicted:.4} (ratio {ratio:.2}; 2·log ρ(Π) {:.4})",
            2.0 * radius.ln()
        ));
    }
    verdict(ok, parts.join("; ") + " (need ‖Π‖ < 1, ratio in [0.5, 2])")
}

fn instance_two_decay() -> Verdict {
    let curves: Vec<Vec<f64>> = (0..5)
        .map(|seed| {
            let s = seqgen::generate_exp_orthogonal(15, 201, seed).unwrap();
            descent::error_curve(&s.tokens, Kernel::Exp, Variant::Raw).unwrap()
        })
        .collect();
    let mean = mean_curve(&curves);
    let ratio = mean[199] / mean[9];
    verdict(
        ratio < 0.1,
        format!("error(t=200)/error(t=10) = {:.3e}/{:.3e} = {ratio:.4} (need < 0.1)", mean[199], mean[9]),
    )
}

fn instance_four_decay() -> Verdict {
    let curves: Vec<Vec<f64>> = (0..5)
        .map(|seed| {
            let s = seqgen::generate_phase_modulated(2, 151, 2.0, seed).unwrap();
            descent::error_curve(&s.tokens, Kernel::Exp, Variant::Raw).unwrap()
        })
        .collect();
    let mean = mean_curve(&curves);
    verdict(
        mean[149] < mean[9],
        format!("error(t=150) {:.3e} vs error(t=10) {:.3e}", mean[149], mean[9]),
    )
}

fn augmentation() -> Verdict {
    let mut at_50: f64 = 0.0;
    let mut monotone = true;
    for seed in 0..5 {
        let s = seqgen::generate_linear(4, 10, seed).unwrap();
        let exact = build_t0_exact(&s.tokens);
        let gaps: Vec<f64> = [5.0, 10.0, 20.0, 50.0]
            .iter()
            .map(|&n| max_abs(&build_t0_approx(&s.tokens, n).unwrap(), &exact))
            .collect();
        monotone &= gaps.windows(2).all(|w| w[1] <= w[0]);
        at_50 = at_50.max(gaps[3]);
    }
    verdict(
        at_50 <= 1e-6 && monotone,
        format!("gap at n=50 {at_50:.3e} (tol 1e-6); non-increasing over n ∈ {{5,10,20,50}}: {monotone}"),
    )
}

fn oracle_equivalence() -> Verdict {
    let configs = [
        (Kernel::Id, Variant::Raw),
        (Kernel::Exp, Variant::Raw),
        (Kernel::Exp, Variant::SoftmaxNormalized),
    ];
    let mut worst: f64 = 0.0;
    let mut prefix_exact = true;
    for (kernel, variant) in configs {
        for seed in 0..5 {
            let x = random_tokens(64, 4, 300 + seed);
            for t in 1..=6 {
                let p = x.rows(0, t).into_owned();
                let a = AttentionMatrix::build(kernel, variant, &p).unwrap();
                let m = a.entries();
                let off = m - DMatrix::from_diagonal(&m.diagonal());
                let mut next = DMatrix::zeros(t, 4);
                for i in 0..t.saturating_sub(1) {
                    next.row_mut(i).copy_from(&p.row(i + 1));
                }
                // Only x_{2:t} enter through the strictly lower part of A.
                let dense = m.clone().try_inverse().unwrap() * off * next;
                worst = worst.max(max_abs(&dense, &descent::fixed_point(&a, &p).unwrap()));
            }
            let full_a = AttentionMatrix::build(kernel, variant, &x).unwrap();
            let full = descent::fixed_point(&full_a, &x).unwrap();
            for t in 1..=64 {
                let p = x.rows(0, t).into_owned();
                let a = AttentionMatrix::build(kernel, variant, &p).unwrap();
                let u = descent::fixed_point(&a, &p).unwrap();
                prefix_exact &= u == full.rows(0, t).into_owned();
            }
        }
    }
    verdict(
        worst <= 1e-9 && prefix_exact,
        format!("triangular vs dense {worst:.3e} (tol 1e-9); prefix invariance bit-exact for t ≤ 64: {prefix_exact}"),
    )
}

fn softmax_depth_gap() -> Verdict {
    let mut violations = 0usize;
    let mut checked = 0usize;
    let mut final_max: f64 = 0.0;
    for seed in 0..5 {
        let s = seqgen::generate_exp_orthogonal(15, 50, seed).unwrap();
        let g = descent::softmax_depth_gap(&s.tokens, 200).unwrap();
        for w in g.gaps.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                checked += 1;
                if *b > a * (1.0 + 1e-9) + 1e-12 {
                    violations += 1;
                }
            }
        }
        final_max = final_max.max(g.gaps[200].iter().copied().fold(0.0, f64::max));
    }
    verdict(
        violations == 0,
        format!(
            "{violations} increases in {checked} (n, t) pairs; largest gap at n=200: {final_max:.3e} (diagnostic only)"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("transformer equals descent", equivalence),
        ("nilpotent step size", nilpotency),
        ("fixed point and dual coefficients", dual_identity),
        ("linear closed form", linear_closed_form),
        ("almost-sure spectral gap", spectral_gap),
        ("periodic contraction", periodic_contraction),
        ("instance 2 decay", instance_two_decay),
        ("instance 4 decay", instance_four_decay),
        ("token augmentation", augmentation),
        ("oracle equivalence", oracle_equivalence),
        ("softmax depth gap", softmax_depth_gap),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag}  {name}: {}", i + 1, v.detail);
        failed += usize::from(!v.passed);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
