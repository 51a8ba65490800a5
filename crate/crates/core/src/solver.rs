//! The inertial Bregman proximal gradient iteration, its mirror-descent
//! specialization, inertia schedules with the admissibility condition, and
//! per-iteration trace recording.
//!
//! One step of the three-sequence recursion, with `gamma_k = a_k^(kappa-1)/L`:
//!
//! ```text
//! y_k     = z_k + a_k (x_k - z_k)
//! x_{k+1} = (grad psi + gamma_k dG)^{-1} (grad psi(y_k) - gamma_k grad F(y_k))
//! z_{k+1} = x_k + a_k (x_{k+1} - x_k)
//! ```
//!
//! With `a_k = 1` the recursion collapses to the plain Bregman proximal
//! gradient; with `G = 0` the prox is the exact kernel gradient inversion
//! (inertial mirror descent).

use std::fmt::Write as _;

use nalgebra::DVector;
use rand_distr::StandardNormal;

use rand::Rng;

use crate::kernel::{bregman_divergence, Kernel};
use crate::linops::{seeded_rng, stream};
use crate::model::SmoothTerm;
use crate::reg::{default_support_eps, Regularizer};
use crate::{Error, Result};

/// Composite problem `Phi = F + G` together with the kernel geometry it is
/// solved under.
pub struct Problem {
    pub kernel: Kernel,
    pub smooth: Box<dyn SmoothTerm>,
    pub reg: Regularizer,
}

impl Problem {
    pub fn new(kernel: Kernel, smooth: Box<dyn SmoothTerm>, reg: Regularizer) -> Self {
        assert_eq!(kernel.dim(), smooth.dim(), "kernel/term dimension mismatch");
        Problem { kernel, smooth, reg }
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        self.smooth.value(x) + self.reg.value(x)
    }

    /// D-prox at the transformed point `p` with step `gamma`.
    pub fn dprox(&self, p: &DVector<f64>, gamma: f64) -> Result<DVector<f64>> {
        self.reg.dprox(&self.kernel, p, gamma * self.reg.lambda())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleMode {
    /// `a_k = 1`: no inertia.
    Bpg,
    /// Fixed inertia after the unit start value.
    Constant(f64),
    /// `a_k = (k+1)/(k+1+alpha)`.
    Polynomial(f64),
}

/// Inertia schedule. `a_0 = 1` always (initialization line of the
/// recursion); from `k = 1` on the mode decides, clamped to
/// `[a_low, a_high]` and optionally frozen from a switch index onward.
#[derive(Debug, Clone, PartialEq)]
pub struct InertialSchedule {
    pub mode: ScheduleMode,
    pub a_low: f64,
    pub a_high: f64,
    pub freeze_at: Option<usize>,
}

impl InertialSchedule {
    pub fn bpg() -> Self {
        InertialSchedule {
            mode: ScheduleMode::Bpg,
            a_low: 1.0,
            a_high: 1.0,
            freeze_at: None,
        }
    }

    pub fn constant(a: f64) -> Result<Self> {
        if !(0.0 < a && a <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "constant inertia must lie in (0, 1], got {a}"
            )));
        }
        Ok(InertialSchedule {
            mode: ScheduleMode::Constant(a),
            a_low: a,
            a_high: 1.0,
            freeze_at: None,
        })
    }

    pub fn polynomial(alpha: f64) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "polynomial schedule needs alpha > 0, got {alpha}"
            )));
        }
        Ok(InertialSchedule {
            mode: ScheduleMode::Polynomial(alpha),
            a_low: 1.0 / (1.0 + alpha),
            a_high: 1.0,
            freeze_at: None,
        })
    }

    pub fn with_freeze(mut self, k: usize) -> Self {
        self.freeze_at = Some(k);
        self
    }

    /// Inertia value `a_k`.
    pub fn value(&self, k: usize) -> f64 {
        if k == 0 {
            return 1.0;
        }
        let k_eff = match self.freeze_at {
            Some(kf) => k.min(kf.max(1)),
            None => k,
        };
        let raw = match self.mode {
            ScheduleMode::Bpg => 1.0,
            ScheduleMode::Constant(a) => a,
            ScheduleMode::Polynomial(alpha) => (k_eff as f64 + 1.0) / (k_eff as f64 + 1.0 + alpha),
        };
        raw.clamp(self.a_low, self.a_high)
    }
}

/// One pairwise admissibility check of the schedule condition
/// `(a_{k+1}^{1-kappa} + 1)^{1/kappa} (1 - a_{k+1}) < a_k^{1/kappa-1}/(1 - a_k)`,
/// the right side being infinite at `a_k = 1`.
pub fn schedule_pair_admissible(a_k: f64, a_next: f64, kappa: f64) -> bool {
    let lhs = (a_next.powf(1.0 - kappa) + 1.0).powf(1.0 / kappa) * (1.0 - a_next);
    let rhs = if a_k >= 1.0 {
        f64::INFINITY
    } else {
        a_k.powf(1.0 / kappa - 1.0) / (1.0 - a_k)
    };
    // Strict inequality with relative slack so that the a = 1 boundary does
    // not flip on rounding.
    lhs < rhs + 1e-12 * rhs.abs().max(1.0)
}

#[derive(Debug, Clone)]
pub struct ScheduleReport {
    pub horizon: usize,
    pub kappa: f64,
    /// Indices `k` whose pair `(a_k, a_{k+1})` violates the condition.
    pub violations: Vec<usize>,
}

impl ScheduleReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first_violation(&self) -> Option<usize> {
        self.violations.first().copied()
    }
}

/// Check the admissibility condition over `k = 0..horizon`.
pub fn schedule_validate(
    schedule: &InertialSchedule,
    kappa: f64,
    horizon: usize,
) -> ScheduleReport {
    assert!(horizon >= 2);
    let mut violations = Vec::new();
    for k in 0..horizon {
        if !schedule_pair_admissible(schedule.value(k), schedule.value(k + 1), kappa) {
            violations.push(k);
        }
    }
    ScheduleReport {
        horizon,
        kappa,
        violations,
    }
}

/// Mutable state of the three-sequence recursion at iteration `k`.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub x: DVector<f64>,
    pub x_prev: DVector<f64>,
    pub z: DVector<f64>,
    /// Inertia `a_k` for the upcoming step.
    pub a: f64,
    /// Step `gamma_k = a_k^(kappa-1) / L`.
    pub gamma: f64,
    pub k: usize,
    /// Extrapolated point used to produce the current `x` (empty at k = 0).
    pub last_y: Option<DVector<f64>>,
}

impl SolverState {
    pub fn initial(x0: DVector<f64>, schedule: &InertialSchedule, kappa: f64, l: f64) -> Self {
        let a = schedule.value(0);
        SolverState {
            x_prev: x0.clone(),
            z: x0.clone(),
            x: x0,
            a,
            gamma: a.powf(kappa - 1.0) / l,
            k: 0,
            last_y: None,
        }
    }
}

/// One inertial Bregman proximal gradient step.
pub fn ibpg_step(
    state: &SolverState,
    problem: &Problem,
    schedule: &InertialSchedule,
) -> Result<SolverState> {
    let kappa = problem.kernel.kappa();
    let l = problem.smooth.smad_constant();
    let a = state.a;
    let y = &state.z + (&state.x - &state.z) * a;
    let p = problem.kernel.grad(&y) - problem.smooth.grad(&y) * state.gamma;
    let x_next = problem.dprox(&p, state.gamma)?;
    if x_next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            iteration: state.k,
            reason: "non-finite iterate after proximal step".into(),
        });
    }
    let z_next = &state.x + (&x_next - &state.x) * a;
    let a_next = schedule.value(state.k + 1);
    Ok(SolverState {
        x_prev: state.x.clone(),
        z: z_next,
        x: x_next,
        a: a_next,
        gamma: a_next.powf(kappa - 1.0) / l,
        k: state.k + 1,
        last_y: Some(y),
    })
}

/// One inertial mirror descent step (`G = 0`): the prox degenerates to the
/// exact kernel gradient inversion, with fixed `a` and `gamma`.
pub fn imd_step(
    state: &SolverState,
    smooth: &dyn SmoothTerm,
    kernel: &Kernel,
    a: f64,
    gamma: f64,
) -> Result<SolverState> {
    let y = &state.z + (&state.x - &state.z) * a;
    let p = kernel.grad(&y) - smooth.grad(&y) * gamma;
    let x_next = kernel.grad_inverse(&p);
    if x_next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            iteration: state.k,
            reason: "non-finite iterate in mirror descent step".into(),
        });
    }
    let z_next = &state.x + (&x_next - &state.x) * a;
    Ok(SolverState {
        x_prev: state.x.clone(),
        z: z_next,
        x: x_next,
        a,
        gamma,
        k: state.k + 1,
        last_y: Some(y),
    })
}

/// Lyapunov value `Phi(x_k) + a_{k-1}^(1-kappa) L D_psi(x_k, x_{k-1})`
/// (the unknown `inf Phi` shift is dropped; monotonicity is unaffected).
pub fn lyapunov_value(
    problem: &Problem,
    x: &DVector<f64>,
    x_prev: &DVector<f64>,
    a_prev: f64,
    l: f64,
) -> f64 {
    let kappa = problem.kernel.kappa();
    problem.objective(x)
        + a_prev.powf(1.0 - kappa) * l * bregman_divergence(&problem.kernel, x, x_prev)
}

/// Per-iteration scalar record; column order matches the trace CSV.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub k: usize,
    pub phi: f64,
    pub f: f64,
    pub g: f64,
    pub lyapunov: f64,
    pub step_norm: f64,
    pub bregman_step: f64,
    pub a: f64,
    pub gamma: f64,
    pub support_hash: u64,
    pub dist_to_ref: f64,
}

/// Full run history: scalar records plus (optionally) the iterates
/// themselves for post-hoc analysis.
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    pub iterates: Vec<DVector<f64>>,
    pub converged: bool,
    pub kappa: f64,
    pub l: f64,
}

pub const TRACE_CSV_HEADER: &str =
    "k,phi,f,g,lyapunov,step_norm,bregman_step,a_k,gamma_k,support_hash,dist_to_ref";

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_iterate(&self) -> &DVector<f64> {
        self.iterates.last().expect("trace retains iterates")
    }

    pub fn final_step_norm(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.step_norm)
    }

    /// Replays the recursion over the stored iterates to recover the
    /// auxiliary sequences: returns `(y_k, z_k)` for `k = 0..len-1`
    /// (`y_k` is the point whose prox produced `x_{k+1}`).
    pub fn reconstruct_aux(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut zs = Vec::with_capacity(self.iterates.len());
        let mut ys = Vec::with_capacity(self.iterates.len());
        let mut z = self.iterates[0].clone();
        for k in 0..self.iterates.len() {
            let a = self.records[k].a;
            let x = &self.iterates[k];
            let y = &z + (x - &z) * a;
            zs.push(z.clone());
            ys.push(y);
            if k + 1 < self.iterates.len() {
                z = x + (&self.iterates[k + 1] - x) * a;
            }
        }
        (ys, zs)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{TRACE_CSV_HEADER}");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.k,
                r.phi,
                r.f,
                r.g,
                r.lyapunov,
                r.step_norm,
                r.bregman_step,
                r.a,
                r.gamma,
                r.support_hash,
                r.dist_to_ref
            );
        }
        out
    }
}

/// Driver configuration. Stopping rule:
/// `|x_k - x_{k-1}| <= tol * (1 + |x_k|)`.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub schedule: InertialSchedule,
    pub init_seed: u64,
    pub init_amplitude: f64,
    pub x0: Option<DVector<f64>>,
    pub reference: Option<DVector<f64>>,
    /// Record `min(|x - r|, |x + r|)` instead of `|x - r|`; quadratic
    /// measurements cannot distinguish the global sign.
    pub sign_invariant_reference: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_iters: 50_000,
            tol: 1e-10,
            schedule: InertialSchedule::bpg(),
            init_seed: 0,
            init_amplitude: 1.0,
            x0: None,
            reference: None,
            sign_invariant_reference: false,
        }
    }
}

/// A failed run carrying whatever trace was recorded before the failure.
pub struct RunFailure {
    pub error: Error,
    pub partial: IterationTrace,
}

impl std::fmt::Debug for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "RunFailure({}, {} records)",
            self.error,
            self.partial.len()
        )
    }
}

/// Run the iteration until the stopping rule or the iteration cap.
pub fn run(problem: &Problem, config: &RunConfig) -> std::result::Result<IterationTrace, RunFailure> {
    let n = problem.dim();
    let l = problem.smooth.smad_constant();
    let kappa = problem.kernel.kappa();
    let x0 = match &config.x0 {
        Some(x) => {
            assert_eq!(x.len(), n, "explicit initializer has wrong dimension");
            x.clone()
        }
        None => {
            let mut rng = seeded_rng(config.init_seed, stream::INIT);
            DVector::from_fn(n, |_, _| {
                config.init_amplitude * rng.sample::<f64, _>(StandardNormal)
            })
        }
    };

    let mut state = SolverState::initial(x0, &config.schedule, kappa, l);
    let mut records = Vec::new();
    let mut iterates = Vec::new();
    let record = |state: &SolverState, a_prev: f64| -> IterationRecord {
        let f = problem.smooth.value(&state.x);
        let g = problem.reg.value(&state.x);
        let bregman_step = bregman_divergence(&problem.kernel, &state.x, &state.x_prev);
        let step_norm = (&state.x - &state.x_prev).norm();
        let eps = default_support_eps(&state.x);
        IterationRecord {
            k: state.k,
            phi: f + g,
            f,
            g,
            lyapunov: f + g + a_prev.powf(1.0 - kappa) * l * bregman_step,
            step_norm,
            bregman_step,
            a: state.a,
            gamma: state.gamma,
            support_hash: problem.reg.support_of(&state.x, eps).fingerprint(),
            dist_to_ref: config.reference.as_ref().map_or(f64::NAN, |r| {
                let d = (&state.x - r).norm();
                if config.sign_invariant_reference {
                    d.min((&state.x + r).norm())
                } else {
                    d
                }
            }),
        }
    };

    records.push(record(&state, 1.0));
    iterates.push(state.x.clone());

    let mut converged = false;
    while state.k < config.max_iters {
        let a_prev = state.a;
        state = match ibpg_step(&state, problem, &config.schedule) {
            Ok(next) => next,
            Err(error) => {
                return Err(RunFailure {
                    error,
                    partial: IterationTrace {
                        records,
                        iterates,
                        converged: false,
                        kappa,
                        l,
                    },
                })
            }
        };
        records.push(record(&state, a_prev));
        iterates.push(state.x.clone());
        let step_norm = records.last().unwrap().step_norm;
        if step_norm <= config.tol * (1.0 + state.x.norm()) {
            converged = true;
            break;
        }
    }

    Ok(IterationTrace {
        records,
        iterates,
        converged,
        kappa,
        l,
    })
}

/// Subgradient certificates `v_{k+1} = (v1, v2)` of the Lyapunov function
/// for every recorded step `k -> k+1`:
/// `v1 = (grad F(x_{k+1}) - grad F(y_k)) + a^(1-kappa) L (grad psi(y_k) - grad psi(x_k))`,
/// `v2 = -a^(1-kappa) L hess psi(x_k) (x_{k+1} - x_k)`.
pub fn relative_error_certificates(trace: &IterationTrace, problem: &Problem) -> Vec<(f64, f64)> {
    if trace.iterates.len() < 2 {
        return Vec::new();
    }
    let (ys, _) = trace.reconstruct_aux();
    let mut out = Vec::with_capacity(trace.iterates.len() - 1);
    for k in 0..trace.iterates.len() - 1 {
        let a = trace.records[k].a;
        let scale = a.powf(1.0 - trace.kappa) * trace.l;
        let x_next = &trace.iterates[k + 1];
        let x = &trace.iterates[k];
        let y = &ys[k];
        let v1 = (problem.smooth.grad(x_next) - problem.smooth.grad(y))
            + (problem.kernel.grad(y) - problem.kernel.grad(x)) * scale;
        let v2 = problem.kernel.hessian_vector(x, &(x_next - x)) * (-scale);
        out.push((v1.norm(), v2.norm()));
    }
    out
}

/// Certificate for a single step; see [`relative_error_certificates`].
pub fn relative_error_certificate(
    trace: &IterationTrace,
    problem: &Problem,
    k: usize,
) -> (f64, f64) {
    assert!(k + 1 < trace.iterates.len(), "step k -> k+1 not in trace");
    let (ys, _) = trace.reconstruct_aux();
    let a = trace.records[k].a;
    let scale = a.powf(1.0 - trace.kappa) * trace.l;
    let x_next = &trace.iterates[k + 1];
    let x = &trace.iterates[k];
    let y = &ys[k];
    let v1 = (problem.smooth.grad(x_next) - problem.smooth.grad(y))
        + (problem.kernel.grad(y) - problem.kernel.grad(x)) * scale;
    let v2 = problem.kernel.hessian(x) * (x_next - x) * (-scale);
    (v1.norm(), v2.norm())
}
