use ibpg::harness::{build_experiment, ExperimentConfig};
use ibpg::solver::run;

fn paper(m: usize, amp: f64, tol: f64, seed: u64) -> String {
    format!(
        r#"
schema_version = 1

[problem]
kind = "l1"
n = 128
sparsity = 12
lambda = 1e-5
measurements = {m}

[schedule]
mode = "bpg"

[solver]
gamma_override = 0.32998900036665445
init_mode = "near-planted"
init_amplitude = {amp}
tol = {tol}

[seeds]
matrix = {}
signal = {}
init = {}
"#,
        7 + seed,
        11 + seed,
        13 + seed
    )
}

fn main() {
    for (m, amp) in [(512usize, 0.1f64), (512, 0.05), (1024, 0.3), (1024, 0.1)] {
        for seed in 0..2u64 {
            let text = paper(m, amp, 1e-10, seed);
            let config = ExperimentConfig::from_toml(&text).unwrap();
            let built = build_experiment(&config).unwrap();
            let trace = match run(&built.problem, &built.run_config) {
                Ok(t) => t,
                Err(f) => {
                    println!("paper m={m} amp={amp} seed={seed}: DIVERGED {}", f.error);
                    continue;
                }
            };
            let lyap_viol = trace
                .records
                .windows(2)
                .filter(|w| w[1].lyapunov > w[0].lyapunov + 1e-9 * (1.0 + w[0].lyapunov.abs()))
                .count();
            // Support size trajectory to see consolidation.
            let eps_now = |x: &nalgebra::DVector<f64>| ibpg::reg::default_support_eps(x);
            let supp_at = |k: usize| {
                let x = &trace.iterates[k.min(trace.iterates.len() - 1)];
                built.problem.reg.support_of(x, eps_now(x)).len()
            };
            println!(
                "paper m={m} amp={amp} seed={seed}: conv={} iters={} dist={:.2e} lyapviol={} supp@[100,300,1000,5000,end]={:?} steps@[100,1000,10000,end]=[{:.1e},{:.1e},{:.1e},{:.1e}]",
                trace.converged,
                trace.len() - 1,
                trace.records.last().unwrap().dist_to_ref,
                lyap_viol,
                [supp_at(100), supp_at(300), supp_at(1000), supp_at(5000), supp_at(trace.len() - 1)],
                trace.records[100.min(trace.len()-1)].step_norm,
                trace.records[1000.min(trace.len()-1)].step_norm,
                trace.records[10000.min(trace.len()-1)].step_norm,
                trace.records.last().unwrap().step_norm,
            );
        }
    }
    // Haar with a workable lambda.
    for lambda in [1e-3f64, 1e-2] {
        let text = format!(
            r#"
schema_version = 1

[problem]
kind = "haar-synthesis"
n = 32
sparsity = 4
haar_levels = 3
lambda = {lambda}
measurements = 128

[schedule]
mode = "bpg"

[solver]
l_mode = "sampled"
init_mode = "near-planted"
init_amplitude = 0.3
max_iters = 30000
tol = 1e-9

[seeds]
matrix = 100
signal = 110
init = 120
"#
        );
        let config = ExperimentConfig::from_toml(&text).unwrap();
        let built = build_experiment(&config).unwrap();
        let trace = match run(&built.problem, &built.run_config) {
            Ok(t) => t,
            Err(f) => {
                println!("haar lambda={lambda}: DIVERGED {}", f.error);
                continue;
            }
        };
        let v = trace.final_iterate();
        let recon = built.reconstruct(v);
        let xbar = built.planted.as_ref().unwrap();
        let rec_err = (&recon - xbar).norm().min((&recon + xbar).norm()) / xbar.norm();
        let eps = ibpg::reg::default_support_eps(v);
        println!(
            "haar lambda={lambda}: conv={} iters={} coeff_supp={} recon_rel_err={:.2e} L={:.1}",
            trace.converged,
            trace.len() - 1,
            built.problem.reg.support_of(v, eps).len(),
            rec_err,
            built.l_used,
        );
    }
}
