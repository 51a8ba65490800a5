//! Instance construction from a config, run orchestration, artifact
//! persistence, and the post-hoc rate prediction report.
//!
//! A run directory contains: `config.toml` (echo of the parsed config),
//! `trace.csv`, `summary.json`, `plotdata.csv` (iteration vs relative error
//! with the predicted-rate line), `final_iterate.txt`, and for signal
//! problems `planted.txt` / `recovered.txt`. Everything except
//! `timings.json` is a deterministic function of config and code version.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    admissible_inertia_band, build_local_model, classify_critical_point, descent_conditions_report,
    detect_identification, escape_study, estimate_sigma, fit_empirical_rate, fit_rate_series,
    spectral_rate, CriticalPoint, DescentThresholds, EscapeConfig, EscapeReport,
};
use crate::kernel::Kernel;
use crate::linops::{
    gaussian_matrix, haar_dictionary, measurements_group, measurements_l1, measurements_tv,
    planted_signal, read_vector, seeded_rng, write_vector, LinearOperator, SignalKind,
};
use crate::model::{
    estimate_smad_constant, estimate_smad_sampled, PhaseRetrieval, PhaseRetrievalData, Quadratic,
    SmoothTerm, SynthesisSmooth, WithSmadConstant,
};
use crate::reg::{aligned_blocks, default_support_eps, Regularizer};
use crate::solver::{run, IterationTrace, Problem, RunConfig};
use crate::{Error, Result};

use super::config::{EscapeSection, ExperimentConfig, InitMode, ProblemKind, SmoothnessMode, ToyKind};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// A fully built instance, ready to run.
pub struct BuiltExperiment {
    pub problem: Problem,
    pub run_config: RunConfig,
    pub planted: Option<DVector<f64>>,
    /// Synthesis dictionary when the iterate lives in coefficient space.
    pub reconstructor: Option<LinearOperator>,
    pub measurements: usize,
    pub l_used: f64,
}

impl BuiltExperiment {
    /// Map an iterate to signal space (identity unless synthesis).
    pub fn reconstruct(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.reconstructor {
            Some(w) => w.apply(x),
            None => x.clone(),
        }
    }
}

fn build_toy(toy: ToyKind) -> Result<(Box<dyn SmoothTerm>, Vec<CriticalPoint>)> {
    match toy {
        ToyKind::DoubleWell => {
            let op = LinearOperator::from_matrix(DMatrix::from_row_slice(1, 1, &[1.0]));
            let data = PhaseRetrievalData::new(op, DVector::from_column_slice(&[1.0]))?;
            // L = (3|a|^4 + |a|^2 y) = 4.
            let term = PhaseRetrieval::with_smad_constant(data, 4.0);
            let catalog = [-1.0, 0.0, 1.0]
                .iter()
                .map(|&v| {
                    classify_critical_point(&term, DVector::from_column_slice(&[v]), 1e-8)
                })
                .collect();
            Ok((Box::new(term), catalog))
        }
        ToyKind::IndefiniteQuadratic => {
            let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
            let term = Quadratic::new(q, DVector::zeros(2))?;
            let catalog = vec![classify_critical_point(&term, DVector::zeros(2), 1e-8)];
            Ok((Box::new(term), catalog))
        }
        ToyKind::ConvexQuadratic => {
            let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
            let term = Quadratic::new(q, DVector::zeros(2))?;
            let catalog = vec![classify_critical_point(&term, DVector::zeros(2), 1e-8)];
            Ok((Box::new(term), catalog))
        }
    }
}

/// Build the problem instance an experiment config describes.
pub fn build_experiment(config: &ExperimentConfig) -> Result<BuiltExperiment> {
    config.validate()?;
    let p = &config.problem;
    let n = p.n;
    let schedule = config.build_schedule()?;
    let kappa = config.schedule.kappa;

    if p.kind == ProblemKind::SmoothToy {
        let (term, _) = build_toy(p.toy.unwrap())?;
        if term.dim() != n {
            return Err(Error::Config(format!(
                "problem.n = {n} does not match the toy dimension {}",
                term.dim()
            )));
        }
        let l = config.solver.l_override.unwrap_or(term.smad_constant());
        let term: Box<dyn SmoothTerm> = if l == term.smad_constant() {
            term
        } else {
            Box::new(WithSmadConstant::new(term, l))
        };
        let kernel = Kernel::quartic(n).with_kappa(kappa);
        let problem = Problem::new(kernel, term, Regularizer::Zero);
        return Ok(BuiltExperiment {
            problem,
            run_config: RunConfig {
                max_iters: config.solver.max_iters,
                tol: config.solver.tol,
                schedule,
                init_seed: config.seeds.init,
                init_amplitude: config.solver.init_amplitude,
                x0: None,
                reference: None,
                sign_invariant_reference: false,
            },
            planted: None,
            reconstructor: None,
            measurements: 0,
            l_used: l,
        });
    }

    let (signal_kind, m_recipe) = match p.kind {
        ProblemKind::L1 => {
            let s = p.sparsity.unwrap();
            (SignalKind::Sparse { nonzeros: s }, measurements_l1(s, n))
        }
        ProblemKind::Group => {
            let blocks = p.blocks.unwrap();
            let block_size = p.block_size.unwrap();
            (
                SignalKind::BlockSparse { blocks, block_size },
                measurements_group(blocks * block_size, n),
            )
        }
        ProblemKind::TvAnalysis | ProblemKind::HaarSynthesis => {
            let s = p.sparsity.unwrap();
            (
                SignalKind::PiecewiseConstant { jumps: s },
                measurements_tv(s, n),
            )
        }
        ProblemKind::SmoothToy => unreachable!(),
    };
    let m = p.measurements.unwrap_or(m_recipe);

    let mut op = gaussian_matrix(m, n, config.seeds.matrix);
    if p.normalize_rows {
        op = op.scaled(1.0 / (n as f64).sqrt());
    }
    let xbar = planted_signal(signal_kind, n, config.seeds.signal)?;
    let data = PhaseRetrievalData::from_planted(op, xbar.clone())?;

    let kernel_n = Kernel::quartic(n).with_kappa(kappa);
    let a_terminal = config.terminal_inertia();
    let base_l = match (config.solver.l_override, config.solver.gamma_override) {
        (Some(l), _) => l,
        (None, Some(gamma)) => a_terminal.powf(kappa - 1.0) / gamma,
        (None, None) => match config.solver.l_mode {
            SmoothnessMode::Deterministic => {
                estimate_smad_constant(&data, &kernel_n, 100, config.seeds.matrix)?
            }
            SmoothnessMode::Sampled => {
                estimate_smad_sampled(&data, &kernel_n, 100, config.seeds.matrix)?
            }
        },
    };
    let smooth_base = PhaseRetrieval::with_smad_constant(data, base_l);

    let (problem, reconstructor, l_used, reference) = match p.kind {
        ProblemKind::L1 => {
            let problem = Problem::new(
                kernel_n,
                Box::new(smooth_base),
                Regularizer::l1(p.lambda),
            );
            (problem, None, base_l, Some(xbar.clone()))
        }
        ProblemKind::Group => {
            let blocks = aligned_blocks(n, p.block_size.unwrap())?;
            let reg = Regularizer::group_l1(p.lambda, blocks, n)?;
            let problem = Problem::new(kernel_n, Box::new(smooth_base), reg);
            (problem, None, base_l, Some(xbar.clone()))
        }
        ProblemKind::TvAnalysis => {
            let problem = Problem::new(
                kernel_n,
                Box::new(smooth_base),
                Regularizer::tv(p.lambda),
            );
            (problem, None, base_l, Some(xbar.clone()))
        }
        ProblemKind::HaarSynthesis => {
            let dict = haar_dictionary(n, p.haar_levels.unwrap())?;
            let dim = dict.cols();
            let syn =
                SynthesisSmooth::with_smad_constant(smooth_base, dict.clone(), base_l.max(1.0));
            let l_syn = match (config.solver.l_override, config.solver.gamma_override) {
                (None, None) => match config.solver.l_mode {
                    SmoothnessMode::Deterministic => {
                        SynthesisSmooth::new(
                            PhaseRetrieval::with_smad_constant(syn.base().data().clone(), base_l),
                            dict.clone(),
                            &kernel_n,
                            config.seeds.matrix,
                        )?
                        .smad_constant()
                    }
                    SmoothnessMode::Sampled => syn.estimate_smad_sampled(50, config.seeds.matrix)?,
                },
                _ => base_l,
            };
            let term: Box<dyn SmoothTerm> = if l_syn == syn.smad_constant() {
                Box::new(syn)
            } else {
                Box::new(WithSmadConstant::new(Box::new(syn), l_syn))
            };
            let kernel_p = Kernel::quartic(dim).with_kappa(kappa);
            let problem = Problem::new(kernel_p, term, Regularizer::l1(p.lambda));
            (problem, Some(dict), l_syn, None)
        }
        ProblemKind::SmoothToy => unreachable!(),
    };

    let x0 = match config.solver.init_mode {
        InitMode::Gaussian => None,
        InitMode::NearPlanted => {
            // Anchor in iterate space: the planted signal itself, or its
            // minimum-norm coefficients under the synthesis dictionary.
            let anchor = match &reconstructor {
                None => xbar.clone(),
                Some(dict) => dict
                    .dense()
                    .clone()
                    .svd(true, true)
                    .solve(&xbar, 1e-12)
                    .map_err(|e| Error::Numerical(e.to_string()))?,
            };
            let dim = anchor.len();
            let mut rng = seeded_rng(config.seeds.init, crate::linops::stream::INIT);
            let g = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let scale = config.solver.init_amplitude * anchor.norm() / (dim as f64).sqrt();
            Some(&anchor + g * scale)
        }
    };

    Ok(BuiltExperiment {
        run_config: RunConfig {
            max_iters: config.solver.max_iters,
            tol: config.solver.tol,
            schedule,
            init_seed: config.seeds.init,
            init_amplitude: config.solver.init_amplitude,
            x0,
            reference,
            sign_invariant_reference: true,
        },
        problem,
        planted: Some(xbar),
        reconstructor,
        measurements: m,
        l_used,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescentSummary {
    pub rho1: f64,
    pub rho2: f64,
    pub c3_deviation: f64,
    pub c1_pass: bool,
    pub c2_pass: bool,
    pub c3_pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub converged: bool,
    pub iterations: usize,
    pub measurements: usize,
    pub l_used: f64,
    pub terminal_a: f64,
    pub terminal_gamma: f64,
    pub final_objective: f64,
    pub final_step_norm: f64,
    pub lyapunov_violations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dist_to_planted: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identification_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub support_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nd_margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_predicted: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_observed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectral_consistency_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub descent: Option<DescentSummary>,
}

pub struct RunOutput {
    pub summary: RunSummary,
    pub trace: IterationTrace,
    pub run_dir: PathBuf,
}

fn count_lyapunov_violations(trace: &IterationTrace) -> usize {
    trace
        .records
        .windows(2)
        .filter(|w| w[1].lyapunov > w[0].lyapunov + 1e-9 * (1.0 + w[0].lyapunov.abs()))
        .count()
}

fn write_deterministic(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)?;
    Ok(())
}

/// Run the experiment and write all artifacts under `run_dir`.
///
/// On divergence the partial trace and a `failure.json` are still written
/// and the error is propagated (the CLI maps it to its own exit code).
pub fn run_experiment(config: &ExperimentConfig, run_dir: &Path) -> Result<RunOutput> {
    let started = Instant::now();
    let built = build_experiment(config)?;
    std::fs::create_dir_all(run_dir)?;
    write_deterministic(&run_dir.join("config.toml"), &config.to_toml())?;

    let trace = match run(&built.problem, &built.run_config) {
        Ok(trace) => trace,
        Err(failure) => {
            write_deterministic(&run_dir.join("trace.csv"), &failure.partial.to_csv())?;
            let msg = serde_json::json!({
                "schema_version": SUMMARY_SCHEMA_VERSION,
                "error": failure.error.to_string(),
                "records": failure.partial.len(),
            });
            write_deterministic(
                &run_dir.join("failure.json"),
                &serde_json::to_string_pretty(&msg).unwrap(),
            )?;
            return Err(failure.error);
        }
    };

    let last = trace.records.last().expect("trace never empty");
    let x_final = trace.final_iterate().clone();
    let terminal_a = last.a;
    let terminal_gamma = last.gamma;

    let mut summary = RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        converged: trace.converged,
        iterations: trace.len() - 1,
        measurements: built.measurements,
        l_used: built.l_used,
        terminal_a,
        terminal_gamma,
        final_objective: last.phi,
        final_step_norm: last.step_norm,
        lyapunov_violations: count_lyapunov_violations(&trace),
        dist_to_planted: built.planted.as_ref().map(|xb| {
            let rec = built.reconstruct(&x_final);
            (&rec - xb).norm().min((&rec + xb).norm())
        }),
        identification_k: None,
        support_size: None,
        nd_margin: None,
        sigma: None,
        rho_predicted: None,
        rho_observed: None,
        rho_gap: None,
        spectral_consistency_gap: None,
        descent: None,
    };

    let eps = default_support_eps(&x_final);
    let final_pattern = built.problem.reg.support_of(&x_final, eps);
    summary.support_size = Some(final_pattern.len());

    if config.analysis.identify {
        summary.identification_k = detect_identification(&trace, final_pattern.fingerprint());
        summary.nd_margin = built
            .problem
            .reg
            .nd_margin(&x_final, &built.problem.smooth.grad(&x_final), eps);
    }

    if config.analysis.predict_rate && trace.converged {
        let p_t = built.problem.reg.tangent_projector(&x_final, eps);
        let u = match built.problem.reg.is_polyhedral() {
            true => None,
            false => Some(built.problem.reg.local_curvature(&x_final, terminal_gamma, eps)),
        };
        if let Ok(model) = build_local_model(
            &built.problem,
            &x_final,
            &p_t,
            terminal_gamma,
            terminal_a,
            u.as_ref(),
        ) {
            let rate = spectral_rate(&model);
            summary.rho_predicted = Some(rate.rho_direct);
            summary.spectral_consistency_gap = Some(rate.max_gap);
            if let Ok(est) = estimate_sigma(
                built.problem.smooth.as_ref(),
                &built.problem.kernel,
                &x_final,
                &p_t,
            ) {
                summary.sigma = Some(est.sigma);
            }
            if let Ok(fit) = fit_empirical_rate(&trace, &x_final, config.analysis.tail_fraction) {
                summary.rho_observed = Some(fit.rho);
                summary.rho_gap = Some((fit.rho - rate.rho_direct).abs());
            }
        }
    }

    if config.analysis.descent_report {
        let report =
            descent_conditions_report(&trace, &built.problem, &DescentThresholds::default());
        summary.descent = Some(DescentSummary {
            rho1: report.rho1,
            rho2: report.rho2,
            c3_deviation: report.c3_deviation,
            c1_pass: report.c1_pass,
            c2_pass: report.c2_pass,
            c3_pass: report.c3_pass,
        });
    }

    write_deterministic(&run_dir.join("trace.csv"), &trace.to_csv())?;
    write_deterministic(
        &run_dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    write_deterministic(
        &run_dir.join("plotdata.csv"),
        &plot_data(&trace, &x_final, summary.identification_k, summary.rho_predicted),
    )?;
    write_vector(&run_dir.join("final_iterate.txt"), &x_final)?;
    if let Some(xbar) = &built.planted {
        write_vector(&run_dir.join("planted.txt"), xbar)?;
        write_vector(&run_dir.join("recovered.txt"), &built.reconstruct(&x_final))?;
    }
    // Wall-clock timing lives outside the deterministic artifact set.
    let timing = serde_json::json!({
        "wall_seconds": started.elapsed().as_secs_f64(),
    });
    write_deterministic(
        &run_dir.join("timings.json"),
        &serde_json::to_string_pretty(&timing).unwrap(),
    )?;

    Ok(RunOutput {
        summary,
        trace,
        run_dir: run_dir.to_path_buf(),
    })
}

/// Iteration vs relative error (to the run's own limit), with the
/// predicted geometric line anchored at the identification index.
fn plot_data(
    trace: &IterationTrace,
    x_final: &DVector<f64>,
    identification_k: Option<usize>,
    rho_predicted: Option<f64>,
) -> String {
    let scale = x_final.norm().max(1e-30);
    let rel: Vec<f64> = trace
        .iterates
        .iter()
        .map(|x| (x - x_final).norm() / scale)
        .collect();
    let anchor = identification_k.unwrap_or(0);
    let anchor_err = rel.get(anchor).copied().unwrap_or(f64::NAN);
    let mut out = String::from("k,rel_err,predicted\n");
    for (k, e) in rel.iter().enumerate() {
        let predicted = match rho_predicted {
            Some(rho) if k >= anchor && anchor_err.is_finite() && anchor_err > 0.0 => {
                anchor_err * rho.powi((k - anchor) as i32)
            }
            _ => f64::NAN,
        };
        let _ = writeln!(out, "{k},{e},{predicted}");
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictReport {
    pub gamma: f64,
    pub a: f64,
    pub tangent_dim: usize,
    pub sigma: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub rho_predicted: f64,
    pub rho_observed: Option<f64>,
    pub rho_gap: Option<f64>,
    pub spectral_consistency_gap: f64,
    pub band_lower: f64,
    pub band_upper: f64,
    pub band_empty: bool,
    pub fixed_point_residual: f64,
    pub nd_margin: Option<f64>,
    /// With no inertia the companion spectrum is {0} plus the WV spectrum.
    pub bpg_mode: bool,
}

/// Post-hoc rate prediction from a completed run directory: rebuilds the
/// instance from the config echo, loads the final iterate, and compares
/// the companion-matrix spectral radius with the observed tail rate.
pub fn predict_rate_report(run_dir: &Path) -> Result<PredictReport> {
    let config = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let summary_text = std::fs::read_to_string(run_dir.join("summary.json"))
        .map_err(|e| Error::Config(format!("missing summary.json: {e}")))?;
    let summary: RunSummary =
        serde_json::from_str(&summary_text).map_err(|e| Error::Config(e.to_string()))?;
    if summary.schema_version != SUMMARY_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported summary schema_version {}",
            summary.schema_version
        )));
    }
    if !summary.converged {
        return Err(Error::InvalidArgument(
            "run did not converge; the final iterate is not a critical point and the local model \
             would be meaningless"
                .into(),
        ));
    }
    let built = build_experiment(&config)?;
    let x_final = read_vector(&run_dir.join("final_iterate.txt"))?;
    if x_final.len() != built.problem.dim() {
        return Err(Error::DimensionMismatch {
            expected: built.problem.dim(),
            got: x_final.len(),
        });
    }
    let eps = default_support_eps(&x_final);
    let p_t = built.problem.reg.tangent_projector(&x_final, eps);
    let a = summary.terminal_a;
    let gamma = summary.terminal_gamma;
    let u = match built.problem.reg.is_polyhedral() {
        true => None,
        false => Some(built.problem.reg.local_curvature(&x_final, gamma, eps)),
    };
    let model = build_local_model(&built.problem, &x_final, &p_t, gamma, a, u.as_ref())?;
    let rate = spectral_rate(&model);
    let est = estimate_sigma(
        built.problem.smooth.as_ref(),
        &built.problem.kernel,
        &x_final,
        &p_t,
    )?;
    let band = admissible_inertia_band(
        est.sigma,
        built.problem.smooth.smad_constant(),
        model.lambda_max_psi,
        built.problem.kernel.sigma(),
        built.problem.kernel.kappa(),
    );

    // Observed rate from the persisted plot data.
    let plot_text = std::fs::read_to_string(run_dir.join("plotdata.csv"))?;
    let mut points = Vec::new();
    for line in plot_text.lines().skip(1) {
        let mut cols = line.split(',');
        let (Some(k), Some(e)) = (cols.next(), cols.next()) else {
            continue;
        };
        if let (Ok(k), Ok(e)) = (k.parse::<f64>(), e.parse::<f64>()) {
            points.push((k, e));
        }
    }
    let rho_observed = fit_rate_series(&points, config.analysis.tail_fraction, 1e-12)
        .ok()
        .map(|f| f.rho);

    Ok(PredictReport {
        gamma,
        a,
        tangent_dim: model.tangent_dim,
        sigma: est.sigma,
        eta_min: model.wv_eigs.first().copied().unwrap_or(f64::NAN),
        eta_max: model.wv_eigs.last().copied().unwrap_or(f64::NAN),
        rho_predicted: rate.rho_direct,
        rho_observed,
        rho_gap: rho_observed.map(|r| (r - rate.rho_direct).abs()),
        spectral_consistency_gap: rate.max_gap,
        band_lower: band.lower,
        band_upper: band.upper,
        band_empty: band.is_empty(),
        fixed_point_residual: model.fixed_point_residual,
        nd_margin: built.problem.reg.nd_margin(
            &x_final,
            &built.problem.smooth.grad(&x_final),
            eps,
        ),
        bpg_mode: a == 1.0,
    })
}

pub struct EscapeOutput {
    pub report: EscapeReport,
    pub json: String,
}

/// Run the saddle-escape study described by the config (smooth-toy only)
/// and serialize the report.
pub fn run_escape(config: &ExperimentConfig, out_path: Option<&Path>) -> Result<EscapeOutput> {
    config.validate()?;
    if config.problem.kind != ProblemKind::SmoothToy {
        return Err(Error::Config(
            "the escape study needs problem.kind = \"smooth-toy\"".into(),
        ));
    }
    let toy = config.problem.toy.unwrap();
    let (term, catalog) = build_toy(toy)?;
    let section = config.escape.clone().unwrap_or_else(EscapeSection::default);
    let escape_config = EscapeConfig {
        n_trials: section.trials,
        init_scale: section.init_scale,
        seed: config.seeds.init,
        budget: section.budget,
        a: section.a,
        classify_radius: section.classify_radius,
        tol: config.solver.tol,
    };
    let kernel = Kernel::quartic(term.dim()).with_kappa(config.schedule.kappa);
    let report = escape_study(term.as_ref(), &kernel, &catalog, &escape_config)?;

    let catalog_json: Vec<serde_json::Value> = catalog
        .iter()
        .zip(report.catalog_spectra.iter())
        .map(|(c, s)| {
            serde_json::json!({
                "point": c.point.as_slice(),
                "class": c.class,
                "jacobian_max_modulus": s.max_modulus,
                "jacobian_abs_det": s.det.abs(),
                "grad_residual": s.grad_residual,
            })
        })
        .collect();
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "toy": toy,
        "trials": report.config.n_trials,
        "inertia": report.config.a,
        "classify_radius": report.config.classify_radius,
        "counts": report.counts,
        "catalog": catalog_json,
        "outcomes": report.outcomes,
    }))
    .unwrap();
    if let Some(path) = out_path {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_deterministic(path, &json)?;
    }
    Ok(EscapeOutput { report, json })
}

/// Paper-scale l1 preset: n = 128, s = 12 nonzeros, lambda = 1e-5, no
/// inertia, the published constant step size, and normalized rows so that
/// step size is admissible.
pub fn paper_l1_preset() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        r#"
schema_version = 1

[problem]
kind = "l1"
n = 128
sparsity = 12
lambda = 1e-5
normalize_rows = true

[schedule]
mode = "bpg"

[solver]
gamma_override = 0.32998900036665445 # 0.99 / (3 + 1e-4)

[seeds]
matrix = 7
signal = 11
init = 13
"#,
    )
    .expect("preset parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_l1_config(seed: u64) -> ExperimentConfig {
        let text = format!(
            r#"
schema_version = 1

[problem]
kind = "l1"
n = 32
sparsity = 4
lambda = 1e-5
normalize_rows = true

[schedule]
mode = "bpg"

[analysis]
descent_report = true

[seeds]
matrix = {seed}
signal = {}
init = {}
"#,
            seed + 1,
            seed + 2
        );
        ExperimentConfig::from_toml(&text).unwrap()
    }

    #[test]
    fn build_produces_consistent_instance() {
        let config = desk_l1_config(1);
        let built = build_experiment(&config).unwrap();
        assert_eq!(built.problem.dim(), 32);
        // ln(32) * 0.5 * 8 = 13.86 -> 14
        assert_eq!(built.measurements, 14);
        assert!(built.l_used > 0.0);
    }

    #[test]
    fn run_writes_deterministic_artifacts() {
        let config = desk_l1_config(3);
        let dir1 = std::env::temp_dir().join("ibpg-test-run-a");
        let dir2 = std::env::temp_dir().join("ibpg-test-run-b");
        let out1 = run_experiment(&config, &dir1).unwrap();
        let _out2 = run_experiment(&config, &dir2).unwrap();
        assert!(out1.summary.converged);
        for name in [
            "config.toml",
            "trace.csv",
            "summary.json",
            "plotdata.csv",
            "final_iterate.txt",
            "planted.txt",
            "recovered.txt",
        ] {
            let a = std::fs::read(dir1.join(name)).unwrap();
            let b = std::fs::read(dir2.join(name)).unwrap();
            assert_eq!(a, b, "artifact {name} not byte-identical");
        }
        assert_eq!(out1.summary.lyapunov_violations, 0);
        let _ = std::fs::remove_dir_all(&dir1);
        let _ = std::fs::remove_dir_all(&dir2);
    }

    #[test]
    fn predict_rate_roundtrip() {
        let config = desk_l1_config(5);
        let dir = std::env::temp_dir().join("ibpg-test-run-predict");
        let out = run_experiment(&config, &dir).unwrap();
        assert!(out.summary.converged);
        let report = predict_rate_report(&dir).unwrap();
        assert!(report.bpg_mode);
        assert!(report.rho_predicted > 0.0 && report.rho_predicted < 1.0);
        if let (Some(obs), Some(pred)) = (report.rho_observed, Some(report.rho_predicted)) {
            assert!((obs - pred).abs() <= 0.05, "obs {obs} vs pred {pred}");
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn escape_on_double_well() {
        let text = r#"
schema_version = 1

[problem]
kind = "smooth-toy"
n = 1
toy = "double-well"

[schedule]
mode = "constant"
a = 0.9

[escape]
trials = 25
budget = 60000

[seeds]
matrix = 1
signal = 1
init = 9
"#;
        let config = ExperimentConfig::from_toml(text).unwrap();
        let out = run_escape(&config, None).unwrap();
        assert_eq!(out.report.counts.strict_saddles, 0);
        assert_eq!(out.report.counts.minima, 25);
    }
}
