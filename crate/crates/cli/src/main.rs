use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use mflq::oracle::{certification_battery, certify_convention, certify_instance, CertificationReport};
use mflq::simulator::{
    directional_derivative, random_direction, simulate_paths_with, stationarity_report, Recording, SimOptions,
    SimulationSummary,
};
use mflq::{
    estimate_cost, feedback_gains, meanflow, optimal_value, propagate_mean, riccati, solve_riccati, validate_model,
    ControlLaw, Error, ModelSpec, Vector,
};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "mflq", version, about = "Mean-field linear-quadratic control with jumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the Riccati pair and write gains, mean flow and optimal value.
    Solve(Common),
    /// Simulate the optimal feedback law and write an ensemble summary.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mc: MonteCarlo,
        /// Also write the first N paths to paths.csv.
        #[arg(long, value_name = "N")]
        paths_csv: Option<usize>,
    },
    /// Check stationarity and directional derivatives of the optimal law.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mc: MonteCarlo,
        /// Perturbation sizes for the directional scan.
        #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.1, 0.05], value_parser = positive_f64)]
        eps: Vec<f64>,
        /// Number of random directions.
        #[arg(long, default_value_t = 5, value_parser = positive_usize)]
        directions: usize,
    },
    /// Compare the Riccati value with the scenario-tree oracle.
    Certify {
        /// Certify this model instead of the built-in battery.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Largest oracle step count tried for --model.
        #[arg(long, default_value_t = 3, value_parser = positive_usize)]
        steps: usize,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the time step; the grid becomes round(T/h) steps.
    #[arg(long, value_parser = positive_f64)]
    h: Option<f64>,
}

#[derive(Args)]
struct MonteCarlo {
    #[arg(long, default_value_t = 10_000, value_parser = positive_usize)]
    paths: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        Ok(_) => Err(format!("{s} is not a positive number")),
        Err(e) => Err(e.to_string()),
    }
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be positive".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

enum Failure {
    Invalid(String),
    Numerical(Error),
    Check,
    Other(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::SingularSigma { .. }
            | Error::BlowUp { .. }
            | Error::NonFiniteState { .. }
            | Error::SingularHessian
            | Error::TreeTooLarge(_)
            | Error::JumpProbability { .. } => Failure::Numerical(e),
            Error::Json(_) | Error::Malformed(_) | Error::DimensionMismatch { .. } | Error::NonFinite { .. } => {
                Failure::Invalid(e.to_string())
            }
            e => Failure::Other(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn load(common: &Common) -> Result<ModelSpec, Failure> {
    let mut spec = ModelSpec::from_path(&common.model)?;
    if let Some(h) = common.h {
        let steps = (spec.horizon / h).round().max(1.0) as usize;
        info!("resampling {} steps to {steps}", spec.n_steps);
        spec = spec.with_steps(steps);
    }
    let report = validate_model(&spec)?;
    if !report.is_valid() {
        return Err(Failure::Invalid(report.to_string()));
    }
    fs::create_dir_all(&common.out)?;
    Ok(spec)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn feedback(spec: &ModelSpec) -> Result<(mflq::RiccatiSolution, ControlLaw), Failure> {
    let sol = solve_riccati(spec)?;
    let gains = feedback_gains(spec, &sol)?;
    Ok((sol, ControlLaw::Feedback(gains)))
}

fn solve(common: &Common) -> Outcome {
    let spec = load(common)?;
    let sol = solve_riccati(&spec)?;
    let gains = feedback_gains(&spec, &sol)?;
    riccati::write_csv(create(&common.out, "riccati.csv")?, &spec, &sol, &gains)?;
    let mean = propagate_mean(&spec, &ControlLaw::Feedback(gains))?;
    meanflow::write_csv(create(&common.out, "mean.csv")?, &spec, &mean)?;
    let value = optimal_value(&sol, &spec.x0);
    write_json(
        &common.out,
        "value.json",
        &json!({ "value": value, "n_steps": spec.n_steps, "h": spec.step() }),
    )?;
    println!("{value}");
    Ok(())
}

fn simulate(common: &Common, mc: &MonteCarlo, paths_csv: Option<usize>) -> Outcome {
    let spec = load(common)?;
    let (sol, law) = feedback(&spec)?;
    let opts = SimOptions {
        recording: Recording::Full,
        threads: None,
    };
    let ens = simulate_paths_with(&spec, &law, mc.paths, mc.seed, opts)?;
    let cost = estimate_cost(&spec, &ens);
    let residual = stationarity_report(&spec, &sol, &ens)?;
    let summary = SimulationSummary {
        cost_mean: cost.mean,
        cost_stderr: cost.stderr,
        stationarity_residual: Some(residual.rms),
        paths: mc.paths,
        h: spec.step(),
        seed: mc.seed,
    };
    write_json(&common.out, "summary.json", &serde_json::to_value(&summary).map_err(Error::from)?)?;
    if let Some(k) = paths_csv {
        ens.write_csv(create(&common.out, "paths.csv")?, k)?;
    }
    println!("{} ± {}", cost.mean, cost.stderr);
    Ok(())
}

fn verify(common: &Common, mc: &MonteCarlo, eps: &[f64], directions: usize) -> Outcome {
    let spec = load(common)?;
    let (sol, law) = feedback(&spec)?;
    let opts = SimOptions {
        recording: Recording::Full,
        threads: None,
    };
    let ens = simulate_paths_with(&spec, &law, mc.paths, mc.seed, opts)?;
    let optimal = stationarity_report(&spec, &sol, &ens)?;
    drop(ens);
    let shift = vec![Vector::from_element(spec.m, 1.0); spec.n_steps];
    let off = simulate_paths_with(&spec, &ControlLaw::perturbed(&law, &shift, 0.1), mc.paths, mc.seed, opts)?;
    let perturbed = stationarity_report(&spec, &sol, &off)?;
    drop(off);
    let stationarity_ok = optimal.relative() <= 1e-2 && perturbed.rms > 5.0 * optimal.rms;
    info!("stationarity: relative {:.3e}, perturbed rms {:.3e}", optimal.relative(), perturbed.rms);

    let mut passed = stationarity_ok;
    let mut scans = Vec::with_capacity(directions);
    for k in 0..directions {
        let dir = random_direction(&spec, mc.seed.wrapping_add(1000 + k as u64));
        let rep = directional_derivative(&spec, &law, &dir, eps, mc.paths, mc.seed)?;
        let ok = rep.linear.abs() <= 3.0 * rep.linear_stderr && rep.quadratic > 0.0;
        info!("direction {k}: linear {:.3e} ± {:.3e}, quadratic {:.4}", rep.linear, rep.linear_stderr, rep.quadratic);
        passed &= ok;
        scans.push(json!({ "direction": k, "passed": ok, "report": rep }));
    }

    let out = json!({
        "passed": passed,
        "M": mc.paths,
        "seed": mc.seed,
        "h": spec.step(),
        "stationarity": {
            "passed": stationarity_ok,
            "relative_rms": optimal.relative(),
            "rms": optimal.rms,
            "perturbed_rms": perturbed.rms,
        },
        "directional": scans,
    });
    write_json(&common.out, "verify.json", &out)?;
    println!("{}", if passed { "PASS" } else { "FAIL" });
    if passed {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn certify(model: Option<&Path>, out: &Path, steps: usize) -> Outcome {
    let report = match model {
        Some(path) => {
            let spec = ModelSpec::from_path(path)?;
            let validation = validate_model(&spec)?;
            if !validation.is_valid() {
                return Err(Failure::Invalid(validation.to_string()));
            }
            let id = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            CertificationReport {
                instances: vec![certify_instance(&id, &spec, steps)?],
            }
        }
        None => certify_convention(&certification_battery())?,
    };
    fs::create_dir_all(out)?;
    let passed = report.passed();
    write_json(
        out,
        "certify.json",
        &json!({ "passed": passed, "instances": report.instances }),
    )?;
    for e in &report.instances {
        println!("{} {}", e.instance_id, serde_json::to_value(e.matched).map_err(Error::from)?.as_str().unwrap_or("?"));
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Solve(common) => solve(common),
        Command::Simulate { common, mc, paths_csv } => simulate(common, mc, *paths_csv),
        Command::Verify {
            common,
            mc,
            eps,
            directions,
        } => verify(common, mc, eps, *directions),
        Command::Certify { model, out, steps } => certify(model.as_deref(), out, *steps),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Invalid(report)) => {
            eprintln!("invalid model:\n{}", report.trim_end());
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
