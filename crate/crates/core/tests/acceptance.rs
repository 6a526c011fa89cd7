//! Acceptance gate: one line per criterion, non-zero exit if any fails.

mod common;

use std::time::Instant;

use common::{mixed_spec, pure_jump_spec, random_direction, random_spec, tanh_spec};
use mflq::linalg::{asymmetry, inf_norm_diff, min_eigenvalue};
use mflq::oracle::{certification_battery, certify_convention};
use mflq::simulator::{
    directional_derivative, simulate_paths_with, stationarity_report, Recording, SimOptions,
};
use mflq::{
    estimate_cost, feedback_gains, optimal_value, propagate_mean, simulate_paths, solve_riccati, ControlLaw,
    ModelSpec, Vector,
};

const SEED: u64 = 42;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn feedback(spec: &ModelSpec) -> ControlLaw {
    let sol = solve_riccati(spec).unwrap();
    ControlLaw::Feedback(feedback_gains(spec, &sol).unwrap())
}

fn o1() -> Outcome {
    let start = Instant::now();
    let report = certify_convention(&certification_battery()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let matched: Vec<String> = report
        .instances
        .iter()
        .map(|e| format!("{}={}", e.instance_id, serde_json::to_value(e.matched).unwrap().as_str().unwrap()))
        .collect();
    outcome(
        report.passed() && secs < 30.0,
        format!("{} ({secs:.1} s, limit 30 s)", matched.join(" ")),
    )
}

fn r1() -> Outcome {
    let exact = 1f64.tanh();
    let p0 = |steps: usize| solve_riccati(&tanh_spec(steps)).unwrap().p[0][(0, 0)];
    let err = (p0(1000) - exact).abs();
    let ratio = (p0(10) - exact).abs() / (p0(20) - exact).abs();
    outcome(
        err <= 1e-8 && (12.0..=20.0).contains(&ratio),
        format!("|P(0)-tanh(1)| = {err:.2e} (tol 1e-8), RK4 ratio h=0.1/0.05 = {ratio:.2} (range [12, 20])"),
    )
}

fn r2() -> Outcome {
    let worst = (0..20)
        .map(|seed| {
            let spec = random_spec(seed, false);
            let sol = solve_riccati(&spec).unwrap();
            sol.p.iter().zip(&sol.pi).map(|(p, pi)| inf_norm_diff(p, pi)).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    outcome(worst <= 1e-10, format!("max |Pi-P| over 20 bar-free instances = {worst:.2e} (tol 1e-10)"))
}

fn r3() -> Outcome {
    let (mut asym, mut min_eig) = (0.0f64, f64::INFINITY);
    for (seed, mean_field) in (0..20).map(|s| (s, false)).chain((100..120).map(|s| (s, true))) {
        let sol = solve_riccati(&random_spec(seed, mean_field)).unwrap();
        for m in sol.p.iter().chain(&sol.pi) {
            asym = asym.max(asymmetry(m));
            min_eig = min_eig.min(min_eigenvalue(m));
        }
    }
    outcome(
        asym <= 1e-10 && min_eig >= -1e-8,
        format!("40 instances: max asymmetry {asym:.2e} (tol 1e-10), min eigenvalue {min_eig:.3e} (tol -1e-8)"),
    )
}

fn v1_v2() -> (Outcome, Outcome) {
    let spec = tanh_spec(1000);
    let sol = solve_riccati(&spec).unwrap();
    let law = ControlLaw::Feedback(feedback_gains(&spec, &sol).unwrap());

    let start = Instant::now();
    let ens = simulate_paths(&spec, &law, 10_000, SEED).unwrap();
    let cost = estimate_cost(&spec, &ens);
    let secs = start.elapsed().as_secs_f64();
    let value = optimal_value(&sol, &spec.x0);
    let gap = (cost.mean - value).abs();
    let v1 = outcome(
        gap <= 3.0 * cost.stderr && secs < 60.0,
        format!(
            "MC cost {:.8} vs value {value:.8}: |gap| = {gap:.3e}, 3*stderr = {:.3e} ({secs:.1} s, limit 60 s)",
            cost.mean,
            3.0 * cost.stderr
        ),
    );

    let optimal = stationarity_report(&spec, &sol, &ens).unwrap();
    let dir = vec![Vector::from_element(1, 1.0); spec.n_steps];
    let perturbed = ControlLaw::perturbed(&law, &dir, 0.1);
    let ens = simulate_paths(&spec, &perturbed, 10_000, SEED).unwrap();
    let off = stationarity_report(&spec, &sol, &ens).unwrap();
    let v2 = outcome(
        optimal.relative() <= 1e-2 && off.rms > 5.0 * optimal.rms,
        format!(
            "relative residual {:.2e} (tol 1e-2); eps=0.1 residual {:.3e} vs 5x optimal {:.3e}",
            optimal.relative(),
            off.rms,
            5.0 * optimal.rms
        ),
    );
    (v1, v2)
}

fn v3() -> Outcome {
    let spec = tanh_spec(1000);
    let law = feedback(&spec);
    let mut pass = true;
    let mut parts = Vec::new();
    for k in 0..5 {
        let dir = random_direction(1000 + k, &spec);
        let rep = directional_derivative(&spec, &law, &dir, &[0.2, 0.1, 0.05], 10_000, SEED).unwrap();
        let ok = rep.linear.abs() <= 3.0 * rep.linear_stderr && rep.quadratic > 0.0;
        pass &= ok;
        parts.push(format!(
            "v{k}: lin {:.2e} (3se {:.1e}) quad {:.3}",
            rep.linear,
            3.0 * rep.linear_stderr,
            rep.quadratic
        ));
    }
    outcome(pass, parts.join("; "))
}

fn v4() -> Outcome {
    let spec = pure_jump_spec(100);
    let law = ControlLaw::OpenLoop(vec![Vector::zeros(1); spec.n_steps]);
    let opts = SimOptions {
        recording: Recording::Summary,
        threads: None,
    };
    let start = Instant::now();
    let ens = simulate_paths_with(&spec, &law, 100_000, SEED, opts).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let gap = (ens.mean_x[spec.n_steps][0] - spec.x0[0]).abs();
    let se = ens.terminal_stderr(0);
    outcome(
        gap <= 3.0 * se && secs < 60.0,
        format!("|mean X(T) - x0| = {gap:.3e}, 3*stderr = {:.3e} ({secs:.1} s, limit 60 s)", 3.0 * se),
    )
}

fn m1() -> Outcome {
    let spec = mixed_spec(200);
    let law = feedback(&spec);
    let ens = simulate_paths(&spec, &law, 10_000, SEED).unwrap();
    let mean = propagate_mean(&spec, &law).unwrap();
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for i in 0..=spec.n_steps {
        for j in 0..spec.n {
            let gap = (ens.mean_x[i][j] - mean.ex[i][j]).abs();
            let se = ens.state_stderr(i, j).unwrap();
            pass &= gap <= 3.0 * se;
            if se > 0.0 {
                worst = worst.max(gap / se);
            }
        }
    }
    outcome(pass, format!("max |gap|/stderr over 201 nodes x 2 coords = {worst:.2} (limit 3)"))
}

fn d1() -> Outcome {
    let spec = mixed_spec(100);
    let fb = feedback(&spec);
    let dir = random_direction(7, &spec);
    let perturbed = ControlLaw::perturbed(&fb, &dir, 0.2);
    let mut pass = true;
    for law in [&fb, &perturbed] {
        let run = |threads| {
            let opts = SimOptions {
                recording: Recording::Summary,
                threads: Some(threads),
            };
            let ens = simulate_paths_with(&spec, law, 4_000, SEED, opts).unwrap();
            (estimate_cost(&spec, &ens), ens.path_costs)
        };
        let (a, pa) = run(1);
        let (b, pb) = run(4);
        pass &= a.mean.to_bits() == b.mean.to_bits() && a.stderr.to_bits() == b.stderr.to_bits() && pa == pb;
    }
    outcome(pass, "feedback and perturbed laws, 1 vs 4 workers: bitwise-equal cost summaries".into())
}

fn main() {
    let (v1, v2) = v1_v2();
    let results = [
        ("O1", o1()),
        ("R1", r1()),
        ("R2", r2()),
        ("R3", r3()),
        ("V1", v1),
        ("V2", v2),
        ("V3", v3()),
        ("V4", v4()),
        ("M1", m1()),
        ("D1", d1()),
    ];
    for (id, o) in &results {
        println!("{id} {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(id, _)| *id).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
