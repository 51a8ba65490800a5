//! Fast structural oracle suite behind the `check` subcommand: cubic-root
//! residuals, kernel round trips, finite-difference gradient/Hessian
//! checks, brute-force proximal oracles in low dimension, firm
//! nonexpansiveness sampling, adjoint probes, and the sampled
//! triangle-scaling report.

use nalgebra::{DMatrix, DVector};
use rand_distr::StandardNormal;

use rand::Rng;

use crate::kernel::{solve_scale_cubic, tsp_worst_ratio, Kernel};
use crate::linops::{finite_difference, gaussian_matrix, haar_dictionary, seeded_rng};
use crate::model::{
    grad_fd_error, hessian_fd_error, PhaseRetrieval, PhaseRetrievalData, Quadratic, SmoothTerm,
};
use crate::reg::{aligned_blocks, Regularizer};
use crate::Result;

#[derive(Debug, Clone)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckItem {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckItem {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Objective of the D-prox subproblem under the quartic kernel:
/// `tau R(z) + psi(z) - <p, z>` (equal to the divergence form up to a
/// constant in `z`).
pub fn dprox_objective(reg: &Regularizer, kernel: &Kernel, p: &DVector<f64>, tau: f64, z: &DVector<f64>) -> f64 {
    let r = match reg {
        Regularizer::Zero => 0.0,
        _ => reg.value(z) / reg.lambda().max(f64::MIN_POSITIVE),
    };
    tau * r + kernel.value(z) - p.dot(z)
}

/// Plain Nelder-Mead on a black-box objective; good enough to pin the
/// D-prox minimizers to ~1e-7 in dimension <= 5.
pub fn nelder_mead(
    f: &dyn Fn(&DVector<f64>) -> f64,
    start: &DVector<f64>,
    scale: f64,
    iters: usize,
) -> DVector<f64> {
    let n = start.len();
    let mut simplex: Vec<DVector<f64>> = (0..=n)
        .map(|i| {
            let mut v = start.clone();
            if i > 0 {
                v[i - 1] += scale;
            }
            v
        })
        .collect();
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    for _ in 0..iters {
        // Order ascending by value.
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let ordered: Vec<DVector<f64>> = idx.iter().map(|&i| simplex[i].clone()).collect();
        let ordered_vals: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        simplex = ordered;
        values = ordered_vals;

        let spread = (&simplex[n] - &simplex[0]).norm();
        if spread < 1e-12 && (values[n] - values[0]).abs() < 1e-15 {
            break;
        }

        let centroid = simplex[..n]
            .iter()
            .fold(DVector::zeros(n), |acc, v| acc + v)
            / n as f64;
        let reflected = &centroid * 2.0 - &simplex[n];
        let fr = f(&reflected);
        if fr < values[0] {
            let expanded = &centroid + (&reflected - &centroid) * 2.0;
            let fe = f(&expanded);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
        } else {
            let contracted = &centroid + (&simplex[n] - &centroid) * 0.5;
            let fc = f(&contracted);
            if fc < values[n] {
                simplex[n] = contracted;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    simplex[i] = &simplex[0] + (&simplex[i] - &simplex[0]) * 0.5;
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=n)
        .min_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap())
        .unwrap();
    simplex[best].clone()
}

/// Brute-force D-prox: coarse random scan for a starting region, then
/// multi-start Nelder-Mead polish. Independent of the cubic-reduction path.
pub fn dprox_bruteforce(
    reg: &Regularizer,
    kernel: &Kernel,
    p: &DVector<f64>,
    tau: f64,
    seed: u64,
) -> DVector<f64> {
    let n = p.len();
    let f = |z: &DVector<f64>| dprox_objective(reg, kernel, p, tau, z);
    let mut rng = seeded_rng(seed, 99);
    // The minimizer lies in the ball |z| <= |grad psi^-1(p)|.
    let radius = kernel.grad_inverse(p).norm().max(0.1);
    let mut best: Option<(f64, DVector<f64>)> = None;
    let consider = |z: DVector<f64>, best: &mut Option<(f64, DVector<f64>)>| {
        let v = f(&z);
        if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
            *best = Some((v, z));
        }
    };
    for _ in 0..200 {
        let z = DVector::from_fn(n, |_, _| radius * 2.0 * (rng.random::<f64>() - 0.5));
        consider(z, &mut best);
    }
    consider(DVector::zeros(n), &mut best);
    consider(p.clone(), &mut best);
    let coarse = best.unwrap().1;
    let mut polished = coarse.clone();
    for (start, scale) in [
        (coarse.clone(), radius * 0.5),
        (DVector::zeros(n), radius * 0.25),
        (kernel.grad_inverse(p), radius * 0.1),
        (polished.clone(), 1e-3),
    ] {
        let candidate = nelder_mead(&f, &start, scale.max(1e-6), 4000);
        if f(&candidate) < f(&polished) {
            polished = candidate;
        }
    }
    // Final tightening from the incumbent.
    for scale in [1e-4, 1e-6] {
        let candidate = nelder_mead(&f, &polished, scale, 2000);
        if f(&candidate) < f(&polished) {
            polished = candidate;
        }
    }
    polished
}

/// Finite-difference gradient check as a reusable item so a corrupted
/// gradient implementation is caught (and testable by injection).
pub fn gradient_check(term: &dyn SmoothTerm, trials: usize, seed: u64, tol: f64) -> CheckItem {
    let mut rng = seeded_rng(seed, 5);
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let x = DVector::from_fn(term.dim(), |_, _| {
            1.5 * rng.sample::<f64, _>(StandardNormal)
        });
        worst = worst.max(grad_fd_error(term, &x, 1e-5));
    }
    CheckItem::new(
        "gradient finite differences",
        worst <= tol,
        format!("max relative error {worst:.3e} (tol {tol:.1e})"),
    )
}

/// The full fast oracle battery. Any failure means the build is broken.
pub fn run_checks(kappa: f64, prox_cases: usize, seed: u64) -> Result<Vec<CheckItem>> {
    let mut items = Vec::new();
    let mut rng = seeded_rng(seed, 1);

    // Cubic residuals.
    {
        let mut worst = 0.0_f64;
        for _ in 0..1000 {
            let c = 10.0_f64.powf(rng.random::<f64>() * 12.0 - 6.0);
            let t = solve_scale_cubic(c)?;
            worst = worst.max((t * t * t - t * t - c).abs() / c.max(1.0));
        }
        items.push(CheckItem::new(
            "cubic root residuals",
            worst <= 1e-12,
            format!("max scaled residual {worst:.3e} (tol 1e-12)"),
        ));
    }

    // Kernel gradient round trip.
    {
        let kernel = Kernel::quartic(6);
        let mut worst = 0.0_f64;
        for _ in 0..1000 {
            let x = DVector::from_fn(6, |_, _| 5.0 * rng.sample::<f64, _>(StandardNormal));
            let back = kernel.grad_inverse(&kernel.grad(&x));
            worst = worst.max((&back - &x).norm() / (1.0 + x.norm()));
        }
        items.push(CheckItem::new(
            "kernel gradient round trip",
            worst <= 1e-10,
            format!("max relative error {worst:.3e} (tol 1e-10)"),
        ));
    }

    // Gradient and Hessian finite differences on a random instance.
    {
        let op = gaussian_matrix(12, 6, seed);
        let xbar = DVector::from_fn(6, |i, _| if i % 2 == 0 { 1.0 } else { 0.0 });
        let data = PhaseRetrievalData::from_planted(op, xbar)?;
        let term = PhaseRetrieval::with_smad_constant(data, 1.0);
        items.push(gradient_check(&term, 20, seed, 1e-5));
        let mut worst = 0.0_f64;
        for _ in 0..10 {
            let x = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
            worst = worst.max(hessian_fd_error(&term, &x, 1e-5));
        }
        items.push(CheckItem::new(
            "hessian finite differences",
            worst <= 1e-4,
            format!("max relative error {worst:.3e} (tol 1e-4)"),
        ));
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, -0.5]);
        let quad = Quadratic::new(q, DVector::from_column_slice(&[0.2, -0.1]))?;
        items.push(CheckItem {
            name: "quadratic gradient finite differences".into(),
            ..gradient_check(&quad, 20, seed + 1, 1e-6)
        });
    }

    // Brute-force proximal oracles in dimensions <= 5.
    {
        let kernel5 = Kernel::quartic(5);
        let blocks = aligned_blocks(4, 2)?;
        let regs: Vec<(&str, Regularizer, Kernel)> = vec![
            ("l1 D-prox vs brute force", Regularizer::l1(1.0), kernel5.clone()),
            (
                "group D-prox vs brute force",
                Regularizer::group_l1(1.0, blocks, 4)?,
                Kernel::quartic(4),
            ),
            ("tv D-prox vs brute force", Regularizer::tv(1.0), kernel5),
        ];
        for (name, reg, kernel) in regs {
            let n = kernel.dim();
            let mut worst = 0.0_f64;
            for case in 0..prox_cases {
                let p = DVector::from_fn(n, |_, _| 4.0 * (rng.random::<f64>() - 0.5));
                let tau = 0.05 + rng.random::<f64>();
                let fast = reg.dprox(&kernel, &p, tau)?;
                let brute = dprox_bruteforce(&reg, &kernel, &p, tau, seed + case as u64);
                worst = worst.max((&fast - &brute).amax());
            }
            items.push(CheckItem::new(
                name,
                worst <= 1e-5,
                format!("max l-inf gap {worst:.3e} over {prox_cases} cases (tol 1e-5)"),
            ));
        }
    }

    // Firm nonexpansiveness sampling.
    {
        let kernel = Kernel::quartic(6);
        let blocks = aligned_blocks(6, 3)?;
        let regs: Vec<(&str, Regularizer)> = vec![
            ("l1", Regularizer::l1(1.0)),
            ("group", Regularizer::group_l1(1.0, blocks, 6)?),
            ("tv", Regularizer::tv(1.0)),
        ];
        let mut worst = f64::INFINITY;
        for (_, reg) in &regs {
            for _ in 0..500 {
                let p = DVector::from_fn(6, |_, _| 6.0 * (rng.random::<f64>() - 0.5));
                let q = DVector::from_fn(6, |_, _| 6.0 * (rng.random::<f64>() - 0.5));
                let jp = reg.dprox(&kernel, &p, 0.4)?;
                let jq = reg.dprox(&kernel, &q, 0.4)?;
                worst = worst.min((&jp - &jq).dot(&(&p - &q)) - (&jp - &jq).norm_squared());
            }
        }
        items.push(CheckItem::new(
            "firm nonexpansiveness (500 pairs per regularizer)",
            worst >= -1e-10,
            format!("min slack {worst:.3e} (tol -1e-10)"),
        ));
    }

    // Adjoint probes.
    {
        let mut worst = gaussian_matrix(20, 10, seed).adjoint_mismatch(50, seed);
        worst = worst.max(finite_difference(16)?.adjoint_mismatch(50, seed));
        worst = worst.max(haar_dictionary(16, 2)?.adjoint_mismatch(50, seed));
        items.push(CheckItem::new(
            "adjoint probes",
            worst <= 1e-10,
            format!("max relative mismatch {worst:.3e} (tol 1e-10)"),
        ));
    }

    // Triangle-scaling report for the configured exponent.
    {
        let kernel = Kernel::quartic(3).with_kappa(kappa);
        let ratio = tsp_worst_ratio(&kernel, kappa, 10_000, 5.0, seed);
        items.push(CheckItem::new(
            "triangle scaling worst ratio",
            ratio.is_finite() && ratio > 0.0,
            format!("kappa = {kappa}: worst sampled ratio {ratio:.6} on radius-5 ball"),
        ));
    }

    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_battery_passes() {
        let items = run_checks(2.0, 5, 7).unwrap();
        for item in &items {
            assert!(item.passed, "{}: {}", item.name, item.detail);
        }
    }

    #[test]
    fn bruteforce_agrees_on_known_case() {
        // soft((3, 0.5), 1) = (2, 0), t = 2: minimizer (1, 0).
        let reg = Regularizer::l1(1.0);
        let kernel = Kernel::quartic(2);
        let p = DVector::from_column_slice(&[3.0, 0.5]);
        let z = dprox_bruteforce(&reg, &kernel, &p, 1.0, 3);
        assert!((z[0] - 1.0).abs() <= 1e-6 && z[1].abs() <= 1e-6, "got {z:?}");
    }

    #[test]
    fn gradient_check_catches_sign_error() {
        struct BrokenGrad(PhaseRetrieval);
        impl SmoothTerm for BrokenGrad {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn value(&self, x: &DVector<f64>) -> f64 {
                self.0.value(x)
            }
            fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
                let mut g = self.0.grad(x);
                g[0] = -g[0];
                g
            }
            fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
                unreachable!()
            }
            fn smad_constant(&self) -> f64 {
                1.0
            }
        }
        let op = gaussian_matrix(8, 4, 2);
        let xbar = DVector::from_element(4, 1.0);
        let data = PhaseRetrievalData::from_planted(op, xbar).unwrap();
        let term = PhaseRetrieval::with_smad_constant(data, 1.0);
        let good = gradient_check(&term, 10, 4, 1e-5);
        assert!(good.passed);
        let broken = BrokenGrad(PhaseRetrieval::with_smad_constant(
            term.data().clone(),
            1.0,
        ));
        let bad = gradient_check(&broken, 10, 4, 1e-5);
        assert!(!bad.passed, "sign error must be detected");
    }
}
