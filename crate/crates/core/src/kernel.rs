//! Legendre kernels and their Bregman divergences.
//!
//! The workhorse is the quartic kernel `psi(x) = ||x||^4/4 + ||x||^2/2`,
//! which is 1-strongly convex with full domain and whose gradient can be
//! inverted exactly through a scalar cubic. The Euclidean kernel
//! `||x||^2/2` is kept alongside for cross-checks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum KernelKind {
    Quartic,
    Euclidean,
}

/// A strongly convex Legendre kernel on R^n with an exactly invertible
/// gradient.
#[derive(Debug, Clone)]
pub struct Kernel {
    kind: KernelKind,
    dim: usize,
    kappa: f64,
}

impl Kernel {
    /// The kernel `||x||^4/4 + ||x||^2/2` with strong-convexity modulus 1.
    ///
    /// The triangle scaling exponent defaults to 2; it is a run parameter,
    /// not a property certified by construction.
    pub fn quartic(dim: usize) -> Self {
        assert!(dim >= 1, "kernel dimension must be positive");
        Kernel {
            kind: KernelKind::Quartic,
            dim,
            kappa: 2.0,
        }
    }

    /// The energy kernel `||x||^2/2` (gradient = identity), used as a
    /// Euclidean reference in oracles.
    pub fn euclidean(dim: usize) -> Self {
        assert!(dim >= 1, "kernel dimension must be positive");
        Kernel {
            kind: KernelKind::Euclidean,
            dim,
            kappa: 2.0,
        }
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        assert!(
            kappa > 1.0 && kappa <= 2.0,
            "triangle scaling exponent must lie in (1, 2]"
        );
        self.kappa = kappa;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Strong-convexity modulus; 1 for both shipped kernels.
    pub fn sigma(&self) -> f64 {
        1.0
    }

    pub fn is_quartic(&self) -> bool {
        self.kind == KernelKind::Quartic
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let r2 = x.norm_squared();
        match self.kind {
            KernelKind::Quartic => 0.25 * r2 * r2 + 0.5 * r2,
            KernelKind::Euclidean => 0.5 * r2,
        }
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            KernelKind::Quartic => x * (x.norm_squared() + 1.0),
            KernelKind::Euclidean => x.clone(),
        }
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        match self.kind {
            KernelKind::Quartic => {
                let mut h = DMatrix::identity(n, n) * (x.norm_squared() + 1.0);
                h.syger(2.0, x, x, 1.0);
                // syger fills only the lower triangle; mirror it.
                h.fill_upper_triangle_with_lower_triangle();
                h
            }
            KernelKind::Euclidean => DMatrix::identity(n, n),
        }
    }

    /// Hessian-vector product without forming the matrix.
    pub fn hessian_vector(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            KernelKind::Quartic => v * (x.norm_squared() + 1.0) + x * (2.0 * x.dot(v)),
            KernelKind::Euclidean => v.clone(),
        }
    }

    /// Exact inverse of the kernel gradient.
    ///
    /// For the quartic kernel, `grad(z) = p` forces `z = p/t` where `t >= 1`
    /// solves `t^3 - t^2 = ||p||^2`.
    pub fn grad_inverse(&self, p: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            KernelKind::Quartic => {
                let t = solve_scale_cubic(p.norm_squared())
                    .expect("norm_squared is nonnegative");
                p / t
            }
            KernelKind::Euclidean => p.clone(),
        }
    }
}

/// Unique real root `t >= 1` of `t^3 - t^2 = c` for `c >= 0`.
///
/// Newton from `t0 = 1 + c^(1/3)` (where the residual is already
/// nonnegative), safeguarded by bisection on `[1, 1 + sqrt(c) + c^(1/3)]`.
pub fn solve_scale_cubic(c: f64) -> Result<f64> {
    if !c.is_finite() || c < 0.0 {
        return Err(Error::Domain(format!(
            "scale cubic needs a finite nonnegative target, got {c}"
        )));
    }
    if c == 0.0 {
        return Ok(1.0);
    }
    let g = |t: f64| (t - 1.0) * t * t - c;
    let mut lo = 1.0_f64;
    let mut hi = 1.0 + c.sqrt() + c.cbrt();
    let mut t = 1.0 + c.cbrt();
    let tol = 1e-13 * c.max(1.0);
    for _ in 0..200 {
        let gt = g(t);
        if gt.abs() <= tol {
            return Ok(t);
        }
        if gt > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let dg = t * (3.0 * t - 2.0);
        let newton = t - gt / dg;
        t = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(t)
}

/// Bregman divergence `psi(x) - psi(y) - <grad psi(y), x - y>`.
///
/// For the quartic kernel this is evaluated in a rearranged form whose terms
/// are individually nonnegative, so the result does not go negative by
/// cancellation when `x` and `y` nearly coincide.
pub fn bregman_divergence(kernel: &Kernel, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let d = x - y;
    let dd = d.norm_squared();
    match kernel.kind {
        KernelKind::Euclidean => 0.5 * dd,
        KernelKind::Quartic => {
            let yd = y.dot(&d);
            let sx = x.norm_squared();
            let sy = y.norm_squared();
            let q = yd + 0.25 * dd;
            q * q + 0.25 * dd * (sx + sy - 0.25 * dd) + 0.5 * dd
        }
    }
}

/// Triangle-scaling ratio for a single `(x, y, z, a)` tuple:
/// `D((1-a)x + ay, (1-a)x + az) / (a^kappa D(y, z))`.
///
/// Returns `None` when the reference divergence `D(y, z)` is below 1e-14.
pub fn tsp_ratio(
    kernel: &Kernel,
    kappa: f64,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
    a: f64,
) -> Option<f64> {
    let denom = bregman_divergence(kernel, y, z);
    if denom < 1e-14 {
        return None;
    }
    if a == 0.0 {
        return Some(0.0);
    }
    let u = x * (1.0 - a) + y * a;
    let v = x * (1.0 - a) + z * a;
    Some(bregman_divergence(kernel, &u, &v) / (a.powf(kappa) * denom))
}

/// Worst observed triangle-scaling ratio over Monte-Carlo samples in the
/// ball of the given radius. A value `<= C` certifies the triangle scaling
/// property with multiplicative factor `C` on that domain.
pub fn tsp_worst_ratio(
    kernel: &Kernel,
    kappa: f64,
    samples: usize,
    domain_radius: f64,
    seed: u64,
) -> f64 {
    assert!(samples >= 1 && domain_radius > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = kernel.dim();
    let mut worst = 0.0_f64;
    let draw = |rng: &mut ChaCha8Rng| -> DVector<f64> {
        let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = g.norm();
        if norm == 0.0 {
            return g;
        }
        // Uniform radius in the ball.
        let r = domain_radius * rng.random::<f64>().powf(1.0 / n as f64);
        g * (r / norm)
    };
    for _ in 0..samples {
        let x = draw(&mut rng);
        let y = draw(&mut rng);
        let z = draw(&mut rng);
        let a = rng.random::<f64>();
        if let Some(r) = tsp_ratio(kernel, kappa, &x, &y, &z, a) {
            worst = worst.max(r);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec(entries: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(entries)
    }

    /// Bracketed bisection on [1, 1 + sqrt(c) + c^(1/3)], independent of the
    /// Newton path used by `solve_scale_cubic`.
    fn cubic_bisection_oracle(c: f64) -> f64 {
        let g = |t: f64| t * t * t - t * t - c;
        let (mut lo, mut hi) = (1.0_f64, 1.0 + c.sqrt() + c.cbrt());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quartic_zero_case() {
        let k = Kernel::quartic(3);
        let z = vec(&[0.0, 0.0, 0.0]);
        assert_eq!(k.value(&z), 0.0);
        assert_eq!(k.grad(&z), z);
    }

    #[test]
    fn quartic_direct_evaluation() {
        let k = Kernel::quartic(2);
        let x = vec(&[2.0, 0.0]);
        assert_eq!(k.value(&x), 6.0);
        assert_eq!(k.grad(&x), vec(&[10.0, 0.0]));
    }

    #[test]
    fn quartic_hessian_eigenvalues_at_basis_vector() {
        // hess(e1) = 2 I + 2 e1 e1^T has spectrum {4, 2, ..., 2}.
        for n in [2usize, 5] {
            let k = Kernel::quartic(n);
            let mut e1 = DVector::zeros(n);
            e1[0] = 1.0;
            let mut eigs: Vec<f64> = k.hessian(&e1).symmetric_eigen().eigenvalues.iter().copied().collect();
            eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert!((eigs[n - 1] - 4.0).abs() < 1e-12);
            for &e in &eigs[..n - 1] {
                assert!((e - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hessian_symmetric() {
        let k = Kernel::quartic(4);
        let x = vec(&[0.3, -1.2, 0.0, 2.5]);
        let h = k.hessian(&x);
        assert!((&h - h.transpose()).norm() < 1e-12);
    }

    #[test]
    fn cubic_trivial_roots() {
        assert_eq!(solve_scale_cubic(0.0).unwrap(), 1.0);
        assert!((solve_scale_cubic(4.0).unwrap() - 2.0).abs() < 1e-12);
        // 5^3 - 5^2 = 100 exactly.
        assert!((solve_scale_cubic(100.0).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn cubic_rejects_negative() {
        assert!(solve_scale_cubic(-1.0).is_err());
    }

    #[test]
    fn cubic_matches_bisection_oracle() {
        for &c in &[1e-8, 0.5, 100.0, 1e4, 3.7e8] {
            let t = solve_scale_cubic(c).unwrap();
            let oracle = cubic_bisection_oracle(c);
            assert!(
                (t - oracle).abs() <= 1e-10 * oracle,
                "c={c}: newton {t} vs bisection {oracle}"
            );
            assert!((t * t * t - t * t - c).abs() <= 1e-12 * c.max(1.0));
        }
    }

    #[test]
    fn cubic_monotone_in_target() {
        let mut prev = 0.0;
        for i in 0..400 {
            let c = 1e-6 * (1.1f64).powi(i);
            let t = solve_scale_cubic(c).unwrap();
            assert!(t >= prev, "root not nondecreasing at c={c}");
            prev = t;
        }
    }

    #[test]
    fn grad_inverse_trivial() {
        let k = Kernel::quartic(3);
        assert_eq!(k.grad_inverse(&vec(&[0.0, 0.0, 0.0])), vec(&[0.0, 0.0, 0.0]));
        // ||p|| = 2 gives t = 2 exactly.
        let p = vec(&[2.0, 0.0, 0.0]);
        assert!((k.grad_inverse(&p) - vec(&[1.0, 0.0, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn grad_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = Kernel::quartic(5);
        for _ in 0..1000 {
            let x = DVector::from_fn(5, |_, _| 10.0 * (rng.random::<f64>() - 0.5) * 2.0);
            let back = k.grad_inverse(&k.grad(&x));
            assert!(
                (&back - &x).norm() <= 1e-10 * (1.0 + x.norm()),
                "roundtrip failed at x = {x:?}"
            );
            let p = k.grad(&x);
            if p.norm() > 0.0 {
                let fwd = k.grad(&k.grad_inverse(&p));
                assert!((&fwd - &p).norm() <= 1e-10 * p.norm());
            }
        }
    }

    #[test]
    fn divergence_examples() {
        let k = Kernel::quartic(3);
        let x = vec(&[1.0, 0.0, 0.0]);
        let zero = vec(&[0.0, 0.0, 0.0]);
        assert_eq!(bregman_divergence(&k, &x, &x), 0.0);
        assert!((bregman_divergence(&k, &x, &zero) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn divergence_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Kernel::quartic(4);
        for _ in 0..200 {
            let x = DVector::from_fn(4, |_, _| 6.0 * (rng.random::<f64>() - 0.5));
            let y = DVector::from_fn(4, |_, _| 6.0 * (rng.random::<f64>() - 0.5));
            let naive = k.value(&x) - k.value(&y) - k.grad(&y).dot(&(&x - &y));
            let stable = bregman_divergence(&k, &x, &y);
            assert!(
                (naive - stable).abs() <= 1e-10 * (1.0 + naive.abs()),
                "forms disagree: {naive} vs {stable}"
            );
        }
    }

    #[test]
    fn divergence_lower_bound_and_strong_convexity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = Kernel::quartic(6);
        for _ in 0..1000 {
            let x = DVector::from_fn(6, |_, _| 8.0 * (rng.random::<f64>() - 0.5));
            let y = DVector::from_fn(6, |_, _| 8.0 * (rng.random::<f64>() - 0.5));
            let d = bregman_divergence(&k, &x, &y);
            assert!(d >= 0.5 * (&x - &y).norm_squared() - 1e-9);
            let h = DVector::from_fn(6, |_, _| rng.random::<f64>() - 0.5);
            let quad = h.dot(&(k.hessian(&x) * &h));
            assert!(quad >= h.norm_squared() - 1e-10);
        }
    }

    #[test]
    fn tsp_ratio_degenerate_choices() {
        let k = Kernel::quartic(3);
        let x = vec(&[0.5, -0.2, 0.1]);
        let y = vec(&[1.0, 0.3, -0.4]);
        let z = vec(&[-0.7, 0.9, 0.2]);
        let r1 = tsp_ratio(&k, 2.0, &x, &y, &z, 1.0).unwrap();
        assert!((r1 - 1.0).abs() < 1e-12, "a=1 must give ratio 1, got {r1}");
        let r0 = tsp_ratio(&k, 2.0, &x, &y, &z, 0.0).unwrap();
        assert_eq!(r0, 0.0);
    }

    #[test]
    fn tsp_worst_ratio_finite() {
        let k = Kernel::quartic(3);
        let worst = tsp_worst_ratio(&k, 2.0, 10_000, 5.0, 42);
        assert!(worst.is_finite() && worst > 0.0);
        // Same seed, same report.
        assert_eq!(worst, tsp_worst_ratio(&k, 2.0, 10_000, 5.0, 42));
    }

    #[test]
    fn euclidean_kernel_basics() {
        let k = Kernel::euclidean(3);
        let x = vec(&[1.0, 2.0, -1.0]);
        assert_eq!(k.grad(&x), x);
        assert_eq!(k.grad_inverse(&x), x);
        assert_eq!(bregman_divergence(&k, &x, &vec(&[0.0, 0.0, 0.0])), 3.0);
    }
}
