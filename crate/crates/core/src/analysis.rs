//! Runtime verification of the convergence theory: activity identification,
//! local linearization and spectral rate prediction, restricted injectivity,
//! empirical rate fits, and the saddle-escape study for the smooth case.

use nalgebra::{Complex, DMatrix, DVector};
use rand_distr::StandardNormal;
use rayon::prelude::*;

use rand::Rng;

use crate::kernel::Kernel;
use crate::linops::{seeded_rng, stream};
use crate::model::SmoothTerm;
use crate::solver::{imd_step, relative_error_certificates, IterationTrace, Problem, SolverState};
use crate::{Error, Result};

/// Smallest `K` such that the recorded support fingerprint equals
/// `reference` for all `k >= K`; `None` when the pattern never stabilizes
/// on the reference.
pub fn detect_identification(trace: &IterationTrace, reference: u64) -> Option<usize> {
    let hashes: Vec<u64> = trace.records.iter().map(|r| r.support_hash).collect();
    if *hashes.last()? != reference {
        return None;
    }
    let mut k = hashes.len() - 1;
    while k > 0 && hashes[k - 1] == reference {
        k -= 1;
    }
    Some(k)
}

/// Orthonormal basis of the range of an orthogonal projector, one column
/// per eigenvalue close to 1.
pub fn projector_basis(p: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = p.clone().symmetric_eigen();
    let cols: Vec<usize> = (0..p.ncols())
        .filter(|&j| eig.eigenvalues[j] > 0.5)
        .collect();
    let mut basis = DMatrix::zeros(p.nrows(), cols.len());
    for (out, &j) in cols.iter().enumerate() {
        basis.set_column(out, &eig.eigenvectors.column(j));
    }
    basis
}

#[derive(Debug, Clone, Copy)]
pub struct SigmaEstimate {
    /// Largest `sigma >= 0` with `hess F - sigma hess psi >= 0` on the
    /// tangent space (0 when the pencil is indefinite there).
    pub sigma: f64,
    /// Smallest generalized eigenvalue before clamping.
    pub raw_min: f64,
    /// Tangent space was trivial; `sigma` is a +inf sentinel.
    pub trivial_tangent: bool,
}

impl SigmaEstimate {
    pub fn restricted_injectivity_holds(&self) -> bool {
        self.trivial_tangent || self.raw_min > 0.0
    }
}

/// Restricted-injectivity modulus at `x_star`: smallest generalized
/// eigenvalue of `(P hess F P, P hess psi P)` restricted to `range(P)`.
pub fn estimate_sigma(
    smooth: &dyn SmoothTerm,
    kernel: &Kernel,
    x_star: &DVector<f64>,
    p_t: &DMatrix<f64>,
) -> Result<SigmaEstimate> {
    let basis = projector_basis(p_t);
    if basis.ncols() == 0 {
        return Ok(SigmaEstimate {
            sigma: f64::INFINITY,
            raw_min: f64::INFINITY,
            trivial_tangent: true,
        });
    }
    let a = symmetrize(&(basis.tr_mul(&(smooth.hessian(x_star) * &basis))));
    let c = symmetrize(&(basis.tr_mul(&(kernel.hessian(x_star) * &basis))));
    let chol = c
        .cholesky()
        .ok_or_else(|| Error::Numerical("kernel pencil not positive definite".into()))?;
    // L^-1 A L^-T is symmetric with the same generalized eigenvalues.
    let linv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let s = symmetrize(&(&linv * a * linv.transpose()));
    let raw_min = s
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(SigmaEstimate {
        sigma: raw_min.max(0.0),
        raw_min,
        trivial_tangent: false,
    })
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Local linearization at a critical point, assembled in an orthonormal
/// basis of the tangent space (dimension `d`), so the companion matrix is
/// dense `2d x 2d` with no spurious ambient zero modes.
pub struct LocalModel {
    pub tangent_dim: usize,
    pub gamma: f64,
    pub a: f64,
    pub kappa: f64,
    /// `gamma * B^T hess F(x*) B`
    pub h_f: DMatrix<f64>,
    /// `B^T hess psi(x*) B`
    pub h_psi: DMatrix<f64>,
    /// `H_psi - H_F`
    pub v: DMatrix<f64>,
    /// Riemannian curvature correction (zero for polyhedral penalties).
    pub u: DMatrix<f64>,
    /// `(H_psi + U)^{-1}`
    pub w: DMatrix<f64>,
    /// Companion form `[[(2a-a^2) WV, (1-a)^2 WV], [I, 0]]`.
    pub m: DMatrix<f64>,
    /// Eigenvalues of `WV` (real: WV is similar to a symmetric matrix).
    pub wv_eigs: Vec<f64>,
    /// Eigenvalues of `M`.
    pub m_eigs: Vec<Complex<f64>>,
    /// Spectral radius of `M`.
    pub rho: f64,
    /// `lambda_max(hess psi(x*))` in the ambient space.
    pub lambda_max_psi: f64,
    /// Proximal fixed-point residual of `x*` (criticality measure).
    pub fixed_point_residual: f64,
}

/// Build the local model. `u_correction`, when given, is the ambient
/// `gamma * P hess(G|_M) P` matrix for non-polyhedral penalties; polyhedral
/// penalties contribute nothing.
pub fn build_local_model(
    problem: &Problem,
    x_star: &DVector<f64>,
    p_t: &DMatrix<f64>,
    gamma: f64,
    a: f64,
    u_correction: Option<&DMatrix<f64>>,
) -> Result<LocalModel> {
    let kernel = &problem.kernel;
    let basis = projector_basis(p_t);
    let d = basis.ncols();
    if d == 0 {
        return Err(Error::InvalidArgument(
            "trivial tangent space: no local model".into(),
        ));
    }
    let h_f = symmetrize(&(basis.tr_mul(&(problem.smooth.hessian(x_star) * &basis)))) * gamma;
    let h_psi = symmetrize(&(basis.tr_mul(&(kernel.hessian(x_star) * &basis))));
    let u = match u_correction {
        Some(amb) => symmetrize(&(basis.tr_mul(&(amb * &basis)))),
        None => DMatrix::zeros(d, d),
    };
    let v = &h_psi - &h_f;
    let hu = &h_psi + &u;
    let chol = hu.clone().cholesky().ok_or_else(|| {
        Error::Numerical("H_psi + U not positive definite (cannot happen for sigma_psi > 0)".into())
    })?;
    let w = chol.inverse();
    // Eigenvalues of WV through the symmetric congruence L^-1 V L^-T.
    let linv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let s = symmetrize(&(&linv * &v * linv.transpose()));
    let mut wv_eigs: Vec<f64> = s.symmetric_eigen().eigenvalues.iter().copied().collect();
    wv_eigs.sort_by(|x, y| x.partial_cmp(y).unwrap());

    let wv = &w * &v;
    let b = 2.0 * a - a * a;
    let c = (1.0 - a) * (1.0 - a);
    let mut m = DMatrix::zeros(2 * d, 2 * d);
    m.view_mut((0, 0), (d, d)).copy_from(&(&wv * b));
    m.view_mut((0, d), (d, d)).copy_from(&(&wv * c));
    m.view_mut((d, 0), (d, d))
        .copy_from(&DMatrix::identity(d, d));
    let m_eigs: Vec<Complex<f64>> = m.complex_eigenvalues().iter().copied().collect();
    let rho = m_eigs.iter().map(|e| e.norm()).fold(0.0, f64::max);

    let lambda_max_psi = kernel
        .hessian(x_star)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);

    let p = kernel.grad(x_star) - problem.smooth.grad(x_star) * gamma;
    let fixed_point_residual = (problem.dprox(&p, gamma)? - x_star).norm();

    Ok(LocalModel {
        tangent_dim: d,
        gamma,
        a,
        kappa: kernel.kappa(),
        h_f,
        h_psi,
        v,
        u,
        w,
        m,
        wv_eigs,
        m_eigs,
        rho,
        lambda_max_psi,
        fixed_point_residual,
    })
}

/// Spectral radius of the companion matrix by direct eigensolve, together
/// with the root moduli of the per-eigenvalue quadratic
/// `rho^2 - (2a - a^2) rho eta - (1 - a)^2 eta = 0`.
pub struct SpectralRate {
    pub rho_direct: f64,
    pub rho_quadratic: f64,
    /// Largest gap between the sorted direct and quadratic root moduli.
    pub max_gap: f64,
    /// Per-eta root moduli pairs, in the order of `wv_eigs`.
    pub roots: Vec<(f64, [f64; 2])>,
}

pub fn quadratic_root_moduli(eta: f64, a: f64) -> [f64; 2] {
    let b = 2.0 * a - a * a;
    let c = (1.0 - a) * (1.0 - a);
    let disc = b * b * eta * eta + 4.0 * c * eta;
    if disc >= 0.0 {
        let sq = disc.sqrt();
        [
            0.5 * (b * eta + sq).abs(),
            0.5 * (b * eta - sq).abs(),
        ]
    } else {
        // Conjugate pair: |rho|^2 equals the constant term -c*eta > 0.
        let modulus = (-c * eta).sqrt();
        [modulus, modulus]
    }
}

pub fn spectral_rate(model: &LocalModel) -> SpectralRate {
    let mut quad_moduli: Vec<f64> = Vec::with_capacity(2 * model.wv_eigs.len());
    let mut roots = Vec::with_capacity(model.wv_eigs.len());
    for &eta in &model.wv_eigs {
        let pair = quadratic_root_moduli(eta, model.a);
        quad_moduli.extend_from_slice(&pair);
        roots.push((eta, pair));
    }
    let mut direct_moduli: Vec<f64> = model.m_eigs.iter().map(|e| e.norm()).collect();
    quad_moduli.sort_by(|x, y| x.partial_cmp(y).unwrap());
    direct_moduli.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let max_gap = quad_moduli
        .iter()
        .zip(direct_moduli.iter())
        .map(|(q, d)| (q - d).abs())
        .fold(0.0, f64::max);
    SpectralRate {
        rho_direct: model.rho,
        rho_quadratic: quad_moduli.last().copied().unwrap_or(0.0),
        max_gap,
        roots,
    }
}

/// Inertia band of values `a` for which the spectral argument guarantees
/// contraction, evaluated literally; it can be empty for badly conditioned
/// points, in which case only the computed `rho(M)` is meaningful.
#[derive(Debug, Clone, Copy)]
pub struct AdmissibleBand {
    pub lower: f64,
    pub upper: f64,
}

impl AdmissibleBand {
    pub fn is_empty(&self) -> bool {
        !(self.lower < self.upper && self.lower < 1.0)
    }

    pub fn contains(&self, a: f64) -> bool {
        !self.is_empty() && a > self.lower && a < self.upper
    }
}

pub fn admissible_inertia_band(
    sigma: f64,
    l: f64,
    lambda_max_psi: f64,
    sigma_psi: f64,
    kappa: f64,
) -> AdmissibleBand {
    let q_f = l / sigma;
    let q_psi = lambda_max_psi / sigma_psi;
    let exponent = 1.0 / (kappa - 1.0);
    AdmissibleBand {
        lower: (q_f * (q_psi - 1.0)).powf(exponent),
        upper: (q_f * (q_psi + 1.0)).powf(exponent),
    }
}

/// Least-squares geometric rate of the distance series over its tail.
#[derive(Debug, Clone, Copy)]
pub struct RateFit {
    pub rho: f64,
    pub slope: f64,
    pub points_used: usize,
    /// Set when the fitted slope is nonnegative (no contraction).
    pub non_contractive: bool,
}

/// Fit `log(err)` against `k` over the trailing `tail_fraction` of the
/// points whose error exceeds `floor`.
pub fn fit_rate_series(points: &[(f64, f64)], tail_fraction: f64, floor: f64) -> Result<RateFit> {
    assert!((0.0..=1.0).contains(&tail_fraction) && tail_fraction > 0.0);
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, e)| *e > floor)
        .map(|&(k, e)| (k, e.ln()))
        .collect();
    let take = ((pts.len() as f64) * tail_fraction).ceil() as usize;
    let tail = &pts[pts.len() - take.min(pts.len())..];
    if tail.len() < 10 {
        return Err(Error::Numerical(format!(
            "rate fit undefined: only {} usable tail points above the floor",
            tail.len()
        )));
    }
    let n = tail.len() as f64;
    let mean_k = tail.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_e = tail.iter().map(|p| p.1).sum::<f64>() / n;
    let cov = tail
        .iter()
        .map(|p| (p.0 - mean_k) * (p.1 - mean_e))
        .sum::<f64>();
    let var = tail.iter().map(|p| (p.0 - mean_k).powi(2)).sum::<f64>();
    let slope = cov / var;
    Ok(RateFit {
        rho: slope.exp(),
        slope,
        points_used: tail.len(),
        non_contractive: slope >= 0.0,
    })
}

/// Fit `log |x_k - reference|` against `k` over the trailing
/// `tail_fraction` of usable points. Points below the numerical floor
/// (1e-13, or the resolution limit implied by the final step norm when the
/// reference is the run's own limit) are discarded.
pub fn fit_empirical_rate(
    trace: &IterationTrace,
    reference: &DVector<f64>,
    tail_fraction: f64,
) -> Result<RateFit> {
    let final_step = trace.final_step_norm();
    let floor = 1e-13_f64.max(if final_step.is_finite() {
        100.0 * final_step
    } else {
        0.0
    });
    let points: Vec<(f64, f64)> = trace
        .iterates
        .iter()
        .enumerate()
        .map(|(k, x)| (k as f64, (x - reference).norm()))
        .collect();
    fit_rate_series(&points, tail_fraction, floor)
}

/// Spectrum of the fixed-point map Jacobian for the smooth iteration
/// (`G = 0`) at a critical point:
/// `DT = [[(2a-a^2) C, (1-a)^2 C], [I, 0]]` with
/// `C = I - gamma hess psi(x*)^-1 hess F(x*)`.
pub struct JacobianSpectrum {
    pub eigs: Vec<Complex<f64>>,
    pub max_modulus: f64,
    pub det: f64,
    pub grad_residual: f64,
}

pub fn jacobian_t_spectrum(
    smooth: &dyn SmoothTerm,
    kernel: &Kernel,
    x_star: &DVector<f64>,
    gamma: f64,
    a: f64,
) -> Result<JacobianSpectrum> {
    let n = x_star.len();
    let hpsi = kernel.hessian(x_star);
    let hf = smooth.hessian(x_star);
    let hpsi_inv = hpsi
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("kernel Hessian not positive definite".into()))?
        .inverse();
    let c_mat = DMatrix::identity(n, n) - hpsi_inv * hf * gamma;
    let b = 2.0 * a - a * a;
    let c = (1.0 - a) * (1.0 - a);
    let mut dt = DMatrix::zeros(2 * n, 2 * n);
    dt.view_mut((0, 0), (n, n)).copy_from(&(&c_mat * b));
    dt.view_mut((0, n), (n, n)).copy_from(&(&c_mat * c));
    dt.view_mut((n, 0), (n, n))
        .copy_from(&DMatrix::identity(n, n));
    let eigs: Vec<Complex<f64>> = dt.complex_eigenvalues().iter().copied().collect();
    let max_modulus = eigs.iter().map(|e| e.norm()).fold(0.0, f64::max);
    let det = dt.determinant();
    Ok(JacobianSpectrum {
        eigs,
        max_modulus,
        det,
        grad_residual: smooth.grad(x_star).norm(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum CriticalClass {
    Minimum,
    StrictSaddle,
    OtherCritical,
}

/// A known critical point of the smooth objective with its classification.
#[derive(Debug, Clone)]
pub struct CriticalPoint {
    pub point: DVector<f64>,
    pub class: CriticalClass,
}

/// Classify a critical point of a smooth term by the signature of its
/// Hessian: strictly positive definite = minimum, a strictly negative
/// direction = strict saddle, otherwise degenerate.
pub fn classify_critical_point(
    smooth: &dyn SmoothTerm,
    point: DVector<f64>,
    tol: f64,
) -> CriticalPoint {
    let eigs = smooth.hessian(&point).symmetric_eigen().eigenvalues;
    let min = eigs.iter().copied().fold(f64::INFINITY, f64::min);
    let class = if min > tol {
        CriticalClass::Minimum
    } else if min < -tol {
        CriticalClass::StrictSaddle
    } else {
        CriticalClass::OtherCritical
    };
    CriticalPoint { point, class }
}

#[derive(Debug, Clone)]
pub struct EscapeConfig {
    pub n_trials: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub budget: usize,
    pub a: f64,
    pub classify_radius: f64,
    pub tol: f64,
}

impl Default for EscapeConfig {
    fn default() -> Self {
        EscapeConfig {
            n_trials: 100,
            init_scale: 1.0,
            seed: 0,
            budget: 100_000,
            a: 0.9,
            classify_radius: 1e-3,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub enum TrialOutcome {
    /// Converged within `classify_radius` of catalog entry `index`.
    Catalog { index: usize, distance: f64 },
    /// Converged somewhere not in the catalog.
    OffCatalog { final_norm: f64 },
    /// Step tolerance not reached within the budget.
    BudgetExceeded { final_norm: f64 },
    /// Iterates left the floating-point range.
    Diverged,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct EscapeCounts {
    pub minima: usize,
    pub strict_saddles: usize,
    pub other_critical: usize,
    pub off_catalog: usize,
    pub budget_exceeded: usize,
    pub diverged: usize,
}

pub struct EscapeReport {
    pub outcomes: Vec<TrialOutcome>,
    pub counts: EscapeCounts,
    /// Fixed-point Jacobian spectrum at each catalogued point.
    pub catalog_spectra: Vec<JacobianSpectrum>,
    pub config: EscapeConfig,
}

/// Run inertial mirror descent from `n_trials` Gaussian initializations and
/// classify each limit against the catalog. Trials use independent RNG
/// substreams and run in parallel; the report is deterministic in the seed.
pub fn escape_study(
    smooth: &(dyn SmoothTerm + Sync),
    kernel: &Kernel,
    catalog: &[CriticalPoint],
    config: &EscapeConfig,
) -> Result<EscapeReport> {
    let n = smooth.dim();
    let l = smooth.smad_constant();
    let a = config.a;
    let gamma = a.powf(kernel.kappa() - 1.0) / l;
    let outcomes: Vec<TrialOutcome> = (0..config.n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = seeded_rng(config.seed, stream::ESCAPE_BASE + trial as u64);
            let x0 = DVector::from_fn(n, |_, _| {
                config.init_scale * rng.sample::<f64, _>(StandardNormal)
            });
            let mut state = SolverState {
                x_prev: x0.clone(),
                z: x0.clone(),
                x: x0,
                a,
                gamma,
                k: 0,
                last_y: None,
            };
            let mut converged = false;
            for _ in 0..config.budget {
                state = match imd_step(&state, smooth, kernel, a, gamma) {
                    Ok(s) => s,
                    Err(_) => return TrialOutcome::Diverged,
                };
                if (&state.x - &state.x_prev).norm() <= config.tol * (1.0 + state.x.norm()) {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return TrialOutcome::BudgetExceeded {
                    final_norm: state.x.norm(),
                };
            }
            let nearest = catalog
                .iter()
                .enumerate()
                .map(|(i, c)| (i, (&state.x - &c.point).norm()))
                .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap());
            match nearest {
                Some((index, distance)) if distance <= config.classify_radius => {
                    TrialOutcome::Catalog { index, distance }
                }
                _ => TrialOutcome::OffCatalog {
                    final_norm: state.x.norm(),
                },
            }
        })
        .collect();

    let mut counts = EscapeCounts::default();
    for outcome in &outcomes {
        match outcome {
            TrialOutcome::Catalog { index, .. } => match catalog[*index].class {
                CriticalClass::Minimum => counts.minima += 1,
                CriticalClass::StrictSaddle => counts.strict_saddles += 1,
                CriticalClass::OtherCritical => counts.other_critical += 1,
            },
            TrialOutcome::OffCatalog { .. } => counts.off_catalog += 1,
            TrialOutcome::BudgetExceeded { .. } => counts.budget_exceeded += 1,
            TrialOutcome::Diverged => counts.diverged += 1,
        }
    }

    let catalog_spectra = catalog
        .iter()
        .map(|c| jacobian_t_spectrum(smooth, kernel, &c.point, gamma, a))
        .collect::<Result<Vec<_>>>()?;

    Ok(EscapeReport {
        outcomes,
        counts,
        catalog_spectra,
        config: config.clone(),
    })
}

/// Pass thresholds for the descent-like conditions.
#[derive(Debug, Clone, Copy)]
pub struct DescentThresholds {
    /// C1 passes when the worst per-step decrease ratio stays above this.
    pub c1_min: f64,
    /// C2 passes when the empirical relative-error constant stays below.
    pub c2_max: f64,
    /// C3 passes when the tail objective deviation (relative to
    /// `1 + |Phi_last|`) stays below.
    pub c3_tol: f64,
}

impl Default for DescentThresholds {
    fn default() -> Self {
        DescentThresholds {
            c1_min: 0.0,
            c2_max: f64::INFINITY,
            c3_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DescentReport {
    /// Worst per-step sufficient-decrease ratio
    /// `(Psi_k - Psi_{k+1}) / |x_k - x_{k-1}|^2` over non-degenerate steps.
    pub rho1: f64,
    /// First record index whose Lyapunov value increased beyond slack
    /// relative to its predecessor.
    pub c1_violation: Option<usize>,
    /// Empirical relative-error constant
    /// `max_k |v_{k+1}| / (|x_{k+1} - x_k| + |x_k - x_{k-1}|)`.
    pub rho2: f64,
    /// Largest tail deviation `|Phi(x_k) - Phi(x_last)|` over the last
    /// quarter of the run.
    pub c3_deviation: f64,
    pub c1_pass: bool,
    pub c2_pass: bool,
    pub c3_pass: bool,
}

impl DescentReport {
    pub fn all_pass(&self) -> bool {
        self.c1_pass && self.c2_pass && self.c3_pass
    }
}

/// Evaluate the three descent-like conditions on a recorded run.
pub fn descent_conditions_report(
    trace: &IterationTrace,
    problem: &Problem,
    thresholds: &DescentThresholds,
) -> DescentReport {
    let records = &trace.records;
    let mut rho1 = f64::INFINITY;
    let mut c1_violation = None;
    for k in 1..records.len() {
        let decrease = records[k - 1].lyapunov - records[k].lyapunov;
        if decrease < -1e-9 * (1.0 + records[k - 1].lyapunov.abs()) && c1_violation.is_none() {
            c1_violation = Some(k);
        }
        // Ratio against the step entering x_{k-1}; skip near-zero steps.
        if k >= 2 {
            let step_sq = records[k - 1].step_norm * records[k - 1].step_norm;
            if step_sq > 1e-24 {
                rho1 = rho1.min(decrease / step_sq);
            }
        }
    }

    let mut rho2 = 0.0_f64;
    if trace.iterates.len() >= 3 {
        let certificates = relative_error_certificates(trace, problem);
        for k in 1..trace.iterates.len() - 1 {
            let denom = records[k + 1].step_norm + records[k].step_norm;
            if denom > 1e-13 {
                let (v1, v2) = certificates[k];
                rho2 = rho2.max((v1 * v1 + v2 * v2).sqrt() / denom);
            }
        }
    }

    let phi_last = records.last().map_or(0.0, |r| r.phi);
    let tail_start = records.len().saturating_sub(records.len() / 4).max(1) - 1;
    let c3_deviation = records[tail_start..]
        .iter()
        .map(|r| (r.phi - phi_last).abs())
        .fold(0.0, f64::max);

    DescentReport {
        rho1,
        c1_violation,
        rho2,
        c3_deviation,
        c1_pass: c1_violation.is_none() && rho1 >= thresholds.c1_min,
        c2_pass: rho2.is_finite() && rho2 <= thresholds.c2_max,
        c3_pass: c3_deviation <= thresholds.c3_tol * (1.0 + phi_last.abs()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::LinearOperator;
    use crate::model::{PhaseRetrieval, PhaseRetrievalData, Quadratic};
    use crate::reg::Regularizer;
    use crate::solver::{run, InertialSchedule, IterationRecord, RunConfig};

    fn synthetic_trace(dists: &[f64]) -> IterationTrace {
        // 1-D trace whose iterate distances to 0 are prescribed.
        let records = (0..dists.len())
            .map(|k| IterationRecord {
                k,
                phi: 0.0,
                f: 0.0,
                g: 0.0,
                lyapunov: 0.0,
                step_norm: 0.0,
                bregman_step: 0.0,
                a: 1.0,
                gamma: 1.0,
                support_hash: 0,
                dist_to_ref: dists[k],
            })
            .collect();
        IterationTrace {
            records,
            iterates: dists
                .iter()
                .map(|d| DVector::from_column_slice(&[*d]))
                .collect(),
            converged: true,
            kappa: 2.0,
            l: 1.0,
        }
    }

    #[test]
    fn identification_detection() {
        let mut trace = synthetic_trace(&vec![1.0; 10]);
        for (k, r) in trace.records.iter_mut().enumerate() {
            r.support_hash = if k < 6 { 111 } else { 42 };
        }
        assert_eq!(detect_identification(&trace, 42), Some(6));
        for r in trace.records.iter_mut() {
            r.support_hash = 42;
        }
        assert_eq!(detect_identification(&trace, 42), Some(0));
        assert_eq!(detect_identification(&trace, 7), None);
        // Flip at k = 5, constant afterwards: stabilizes at 6.
        for (k, r) in trace.records.iter_mut().enumerate() {
            r.support_hash = if k == 5 { 9 } else { 42 };
        }
        assert_eq!(detect_identification(&trace, 42), Some(6));
    }

    #[test]
    fn sigma_estimation_cases() {
        // hess F proportional to hess psi on the tangent space: sigma = c.
        let n = 3;
        let kernel = Kernel::quartic(n);
        let x = DVector::from_column_slice(&[0.5, -0.2, 0.1]);
        let c = 0.37;
        let q = kernel.hessian(&x) * c;
        let term = Quadratic::new(q, DVector::zeros(n)).unwrap();
        let p = DMatrix::identity(n, n);
        let est = estimate_sigma(&term, &kernel, &x, &p).unwrap();
        assert!((est.sigma - c).abs() < 1e-10);

        // Indefinite pencil clamps to zero.
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let term = Quadratic::new(q, DVector::zeros(2)).unwrap();
        let kernel2 = Kernel::quartic(2);
        let x2 = DVector::zeros(2);
        let est = estimate_sigma(&term, &kernel2, &x2, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(est.sigma, 0.0);
        assert!(!est.restricted_injectivity_holds());

        // Trivial tangent space.
        let est = estimate_sigma(&term, &kernel2, &x2, &DMatrix::zeros(2, 2)).unwrap();
        assert!(est.trivial_tangent && est.sigma.is_infinite());
    }

    #[test]
    fn sigma_matches_dense_generalized_oracle() {
        let mut rng = crate::linops::seeded_rng(31, 0);
        let n = 6;
        let kernel = Kernel::quartic(n);
        let x = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let raw = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let q = (&raw + raw.transpose()) * 0.5 + DMatrix::identity(n, n) * 2.0;
        let term = Quadratic::new(q.clone(), DVector::zeros(n)).unwrap();
        // 3-dimensional tangent space spanned by coordinates {0, 2, 4}.
        let mut p = DMatrix::zeros(n, n);
        for i in [0usize, 2, 4] {
            p[(i, i)] = 1.0;
        }
        let est = estimate_sigma(&term, &kernel, &x, &p).unwrap();
        // Dense oracle: scan the Rayleigh quotient over random tangent
        // directions for an upper bound, and verify PSD at sigma - eps.
        let basis = projector_basis(&p);
        let a = basis.tr_mul(&(term.hessian(&x) * &basis));
        let c = basis.tr_mul(&(kernel.hessian(&x) * &basis));
        let mut upper = f64::INFINITY;
        for _ in 0..20_000 {
            let h = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
            upper = upper.min(h.dot(&(&a * &h)) / h.dot(&(&c * &h)));
        }
        assert!(est.sigma <= upper + 1e-10);
        let gap = &a - &c * (est.sigma - 1e-10);
        let min_eig = gap
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        assert!(min_eig >= -1e-8);
    }

    fn one_d_problem(a_sens: f64, y: f64, l: f64, reg: Regularizer) -> Problem {
        let op = LinearOperator::from_matrix(DMatrix::from_row_slice(1, 1, &[a_sens]));
        let data = PhaseRetrievalData::new(op, DVector::from_column_slice(&[y])).unwrap();
        Problem::new(
            Kernel::quartic(1),
            Box::new(PhaseRetrieval::with_smad_constant(data, l)),
            reg,
        )
    }

    #[test]
    fn local_model_scalar_hand_computation() {
        // F = x^4/4 (A=[1], y=[0]); at x = 1: hess psi = 4, hess F = 3.
        let problem = one_d_problem(1.0, 0.0, 3.0, Regularizer::Zero);
        let x = DVector::from_column_slice(&[1.0]);
        let gamma = 0.2;
        let p = DMatrix::identity(1, 1);
        let model = build_local_model(&problem, &x, &p, gamma, 1.0, None).unwrap();
        assert!((model.h_psi[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((model.h_f[(0, 0)] - 3.0 * gamma).abs() < 1e-12);
        assert!((model.v[(0, 0)] - (4.0 - 0.6)).abs() < 1e-12);
        assert!((model.w[(0, 0)] - 0.25).abs() < 1e-12);
        let eta = model.wv_eigs[0];
        assert!((eta - (1.0 - 0.75 * gamma)).abs() < 1e-12);
        // a = 1: spec(M) = {0} u spec(WV).
        let mut moduli: Vec<f64> = model.m_eigs.iter().map(|e| e.norm()).collect();
        moduli.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!(moduli[0].abs() < 1e-12);
        assert!((moduli[1] - eta.abs()) < 1e-10);
        // W eigenvalues in (0, 1/sigma_psi].
        assert!(model.w[(0, 0)] > 0.0 && model.w[(0, 0)] <= 1.0 + 1e-12);
    }

    #[test]
    fn spectral_rate_consistency() {
        // Random symmetric pencil, inertial a = 0.8: direct eigensolve of M
        // against the per-eta quadratic roots.
        let mut rng = crate::linops::seeded_rng(33, 0);
        let n = 5;
        let kernel = Kernel::quartic(n);
        let x = DVector::from_fn(n, |_, _| 0.6 * (rng.random::<f64>() - 0.5));
        let raw = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let q = (&raw + raw.transpose()) * 0.5 + DMatrix::identity(n, n);
        let term = Quadratic::new(q, DVector::zeros(n)).unwrap();
        let problem = Problem::new(kernel, Box::new(term), Regularizer::Zero);
        let model = build_local_model(
            &problem,
            &x,
            &DMatrix::identity(n, n),
            0.15,
            0.8,
            None,
        )
        .unwrap();
        let rate = spectral_rate(&model);
        assert!(
            rate.max_gap <= 1e-8,
            "direct vs quadratic gap {}",
            rate.max_gap
        );
        assert!((rate.rho_direct - rate.rho_quadratic).abs() <= 1e-8);
    }

    #[test]
    fn quadratic_roots_degenerate_cases() {
        // a = 1, eta = 0.7: roots {0, 0.7}.
        let r = quadratic_root_moduli(0.7, 1.0);
        assert!((r[0] - 0.7).abs() < 1e-15 && r[1].abs() < 1e-15);
        // eta = 0: double root at zero.
        let r = quadratic_root_moduli(0.0, 0.5);
        assert_eq!(r, [0.0, 0.0]);
    }

    #[test]
    fn rate_fit_geometric_and_constant() {
        let dists: Vec<f64> = (0..60).map(|k| 0.9_f64.powi(k)).collect();
        let trace = synthetic_trace(&dists);
        let fit = fit_empirical_rate(&trace, &DVector::from_column_slice(&[0.0]), 1.0).unwrap();
        assert!((fit.rho - 0.9).abs() < 1e-12);
        assert!(!fit.non_contractive);

        let trace = synthetic_trace(&vec![0.5; 40]);
        let fit = fit_empirical_rate(&trace, &DVector::from_column_slice(&[0.0]), 1.0).unwrap();
        assert!((fit.rho - 1.0).abs() < 1e-12);
        assert!(fit.non_contractive);

        let trace = synthetic_trace(&[1.0, 0.5, 0.25]);
        assert!(fit_empirical_rate(&trace, &DVector::from_column_slice(&[0.0]), 1.0).is_err());
    }

    #[test]
    fn jacobian_spectrum_saddle_and_minimum() {
        let kernel = Kernel::quartic(2);
        // Strict saddle of the indefinite quadratic at the origin.
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let term = Quadratic::new(q, DVector::zeros(2)).unwrap();
        let spec =
            jacobian_t_spectrum(&term, &kernel, &DVector::zeros(2), 0.5, 0.9).unwrap();
        assert!(spec.max_modulus > 1.0, "saddle must be unstable");
        assert!(spec.det.abs() > 1e-12);
        assert!(spec.grad_residual < 1e-15);

        // Strongly convex quadratic at its minimizer: all |lambda| < 1 for
        // a = 1 (spectrum {0} u {1 - gamma q_i / psi-curvature}).
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let term = Quadratic::new(q.clone(), DVector::zeros(2)).unwrap();
        let spec =
            jacobian_t_spectrum(&term, &kernel, &DVector::zeros(2), 0.1, 1.0).unwrap();
        assert!(spec.max_modulus < 1.0);
        // Closed form at x* = 0: hess psi = I, modes 1 - gamma * q_i.
        let expected = (1.0 - 0.1 * 0.5_f64).max(1.0 - 0.1 * 2.0);
        assert!((spec.max_modulus - expected).abs() < 1e-10);

        // det DT != 0 away from critical points too (a < 1).
        let x = DVector::from_column_slice(&[0.3, -0.8]);
        let spec = jacobian_t_spectrum(&term, &kernel, &x, 0.1, 0.9).unwrap();
        assert!(spec.det.abs() > 1e-12);
    }

    #[test]
    fn escape_study_convex_case() {
        let kernel = Kernel::quartic(2);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let term = Quadratic::new(q, DVector::zeros(2)).unwrap();
        let catalog = vec![classify_critical_point(&term, DVector::zeros(2), 1e-8)];
        assert_eq!(catalog[0].class, CriticalClass::Minimum);
        let config = EscapeConfig {
            n_trials: 20,
            budget: 50_000,
            ..Default::default()
        };
        let report = escape_study(&term, &kernel, &catalog, &config).unwrap();
        assert_eq!(report.counts.minima, 20);
        // Determinism.
        let again = escape_study(&term, &kernel, &catalog, &config).unwrap();
        assert_eq!(
            serde_json::to_string(&report.outcomes).unwrap(),
            serde_json::to_string(&again.outcomes).unwrap()
        );
    }

    #[test]
    fn descent_report_on_real_run_and_adversarial() {
        let problem = one_d_problem(1.1, 0.6, 6.0, Regularizer::Zero);
        let config = RunConfig {
            schedule: InertialSchedule::constant(0.9).unwrap(),
            init_seed: 3,
            ..Default::default()
        };
        let mut trace = run(&problem, &config).unwrap();
        let report = descent_conditions_report(&trace, &problem, &DescentThresholds::default());
        assert!(report.c1_pass, "C1 failed: {report:?}");
        assert!(report.c2_pass && report.rho2.is_finite());
        assert!(report.c3_pass, "C3 deviation {}", report.c3_deviation);

        // Inject a Lyapunov increase and expect C1 to point at it.
        let j = trace.records.len() / 2;
        trace.records[j].lyapunov += 1.0;
        let report = descent_conditions_report(&trace, &problem, &DescentThresholds::default());
        assert!(!report.c1_pass);
        assert_eq!(report.c1_violation, Some(j));
    }
}
