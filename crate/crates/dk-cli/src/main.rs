//! `dk` — experiment runner for the measure-valued particle verification
//! suites.
//!
//! `dk run <config> [--workers N] [--out DIR]` executes the suites selected
//! by a JSON configuration and writes `summary.json` plus one CSV per suite;
//! `dk describe <model>` prints a model's dynamics; `dk version` prints the
//! version.  Exit codes: 0 all suites pass, 1 statistical failure, 2 invalid
//! configuration, 3 runtime abort.
//!
//! Runs are deterministic: a fixed (config, seed) reproduces every artifact
//! byte for byte, independent of the worker count.

mod config;

use clap::{Parser, Subcommand};
use config::{ExperimentConfig, SuiteKind, ValidatedRun};
use dk_core::suites::{
    duality_suite, exhaustion_suite, girsanov_suite, martingale_suite, mgf_suite, moments_suite,
    simulate_suite, SuiteOutcome, SummaryEntry,
};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dk",
    version,
    about = "Simulator and verification harness for conservative measure-valued particle dynamics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the verification suites selected by a JSON configuration file.
    Run {
        /// Path to the experiment configuration (JSON).
        config: PathBuf,
        /// Worker threads for replica-level parallelism (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory (overrides the config's `output` field).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a model's particle dynamics, measure-valued counterpart, and caveats.
    Describe {
        /// Model kind: inertial_langevin | active_matter | interacting_vfp | flocking | linear_ou
        model: String,
    },
    /// Print the version string.
    Version,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            workers,
            out,
        } => run(&config, workers, out),
        Command::Describe { model } => describe(&model),
        Command::Version => {
            say(&format!("dk {}", env!("CARGO_PKG_VERSION")));
            ExitCode::SUCCESS
        }
    }
}

/// Prints a line to stdout, tolerating a closed pipe (`dk ... | head`).
fn say(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

/// Full run summary; field order is the stable key order of `summary.json`.
#[derive(Serialize)]
struct Summary<'a> {
    version: &'static str,
    config_hash: String,
    pass: bool,
    entries: Vec<SummaryEntry>,
    config: &'a ExperimentConfig,
}

fn run(path: &Path, workers: Option<usize>, out_flag: Option<PathBuf>) -> ExitCode {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("config error: cannot read {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    let mut cfg: ExperimentConfig = match serde_json::from_str(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!(
                "config error at line {}, column {}: {e}",
                e.line(),
                e.column()
            );
            return ExitCode::from(2);
        }
    };
    cfg.make_effective();
    let validated = match cfg.validate() {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = workers {
        if n == 0 {
            eprintln!("config error: --workers must be at least 1");
            return ExitCode::from(2);
        }
    }

    let out_dir = out_flag.unwrap_or_else(|| {
        PathBuf::from(cfg.output.clone().unwrap_or_else(|| "dk-out".to_string()))
    });

    let outcomes = match execute(&cfg, &validated, workers) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("runtime error: {e}");
            return ExitCode::from(3);
        }
    };

    if let Err(e) = write_artifacts(&cfg, &outcomes, &out_dir) {
        eprintln!("runtime error: cannot write artifacts to {}: {e}", out_dir.display());
        return ExitCode::from(3);
    }

    let mut pass = true;
    for outcome in &outcomes {
        say(&format!(
            "suite {}: {}",
            outcome.suite,
            if outcome.pass { "PASS" } else { "FAIL" }
        ));
        pass &= outcome.pass;
    }
    say(&format!(
        "summary: {} ({})",
        if pass { "PASS" } else { "FAIL" },
        out_dir.join("summary.json").display()
    ));
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn execute(
    cfg: &ExperimentConfig,
    run: &ValidatedRun,
    workers: Option<usize>,
) -> dk_core::Result<Vec<SuiteOutcome>> {
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| dk_core::Error::Numerical(format!("worker pool: {e}")))?
            .install(|| dispatch(cfg, run)),
        None => dispatch(cfg, run),
    }
}

fn dispatch(cfg: &ExperimentConfig, run: &ValidatedRun) -> dk_core::Result<Vec<SuiteOutcome>> {
    let (model, mu0, grid) = (&run.model, &run.mu0, &run.grid);
    let (replicas, inner) = (cfg.budgets.replicas, cfg.budgets.inner_samples);
    let seed = cfg.seed;
    let missing =
        |suite: &str| dk_core::Error::InvalidInput(format!("{suite} section vanished after validation"));
    let mut outcomes = Vec::with_capacity(cfg.suites.len());
    for suite in &cfg.suites {
        let outcome = match suite {
            SuiteKind::Simulate => simulate_suite(model, mu0, grid, replicas, seed)?,
            SuiteKind::Martingale => {
                let s = cfg.martingale.as_ref().ok_or_else(|| missing("martingale"))?;
                martingale_suite(model, mu0, grid, &s.test_functions, replicas, seed)?
            }
            SuiteKind::Duality => {
                let s = cfg.duality.as_ref().ok_or_else(|| missing("duality"))?;
                let t = s.t.unwrap_or(grid.t_end);
                duality_suite(model, mu0, &s.phi, t, grid.dt, replicas, inner, seed)?
            }
            SuiteKind::Mgf => {
                let s = cfg.mgf.as_ref().ok_or_else(|| missing("mgf"))?;
                let t = s.t.unwrap_or(grid.t_end);
                mgf_suite(model, mu0, &s.set, &s.lambdas, t, grid.dt, replicas, seed)?
            }
            SuiteKind::Girsanov => {
                let s = cfg.girsanov.as_ref().ok_or_else(|| missing("girsanov"))?;
                let free = run
                    .girsanov_free
                    .as_ref()
                    .ok_or_else(|| missing("girsanov free model"))?;
                let t = s.t.unwrap_or(grid.t_end);
                girsanov_suite(
                    model,
                    free,
                    mu0,
                    &s.phi,
                    s.observable,
                    t,
                    grid.dt,
                    replicas,
                    seed,
                )?
            }
            SuiteKind::Moments => moments_suite(model, mu0, grid, replicas, seed)?,
            SuiteKind::Exhaustion => {
                let s = cfg.exhaustion.as_ref().ok_or_else(|| missing("exhaustion"))?;
                let t = s.t.unwrap_or(grid.t_end);
                exhaustion_suite(model, s.radius, &s.probes, t, grid.dt, inner, seed)?
            }
        };
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

fn write_artifacts(
    cfg: &ExperimentConfig,
    outcomes: &[SuiteOutcome],
    out_dir: &Path,
) -> std::io::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for outcome in outcomes {
        std::fs::write(out_dir.join(format!("{}.csv", outcome.suite)), &outcome.csv)?;
    }
    let canonical = serde_json::to_string(cfg).expect("config serialization is infallible");
    let summary = Summary {
        version: env!("CARGO_PKG_VERSION"),
        config_hash: format!("{:016x}", config::fnv1a64(canonical.as_bytes())),
        pass: outcomes.iter().all(|o| o.pass),
        entries: outcomes
            .iter()
            .flat_map(|o| o.entries.iter().cloned())
            .collect(),
        config: cfg,
    };
    let mut body =
        serde_json::to_string_pretty(&summary).expect("summary serialization is infallible");
    body.push('\n');
    std::fs::write(out_dir.join("summary.json"), body)
}

fn describe(name: &str) -> ExitCode {
    let text = match name {
        "inertial_langevin" => {
            "inertial_langevin - kinetic Langevin particles, z = (x, v) in R^(2d)\n\
             \n\
             Particle SDE (n particles, independent Brownian motions):\n\
             \x20 dx_i = alpha v_i dt\n\
             \x20 dv_i = -alpha (gamma v_i + grad U(x_i)) dt + sqrt(2 alpha) dW_i\n\
             \n\
             The empirical measure mu = (1/alpha) sum_i delta_{(x_i, v_i)} solves the\n\
             Vlasov-Fokker-Planck SPDE (alpha = 1 display):\n\
             \x20 d mu = [Lap_v mu + div_v((gamma v + grad U) mu) - v . grad_x mu] dt\n\
             \x20        + div_v(sqrt(2 mu) dW)\n\
             \n\
             Parameters: dim (d >= 1), gamma >= 0, potential (zero | quadratic).\n\
             alpha sets the atom weight 1/alpha and the noise scale sqrt(alpha).\n\
             \n\
             Caveats: the growth bound and the martingale tests require a potential\n\
             with bounded Hessian; the double-well potential is available only\n\
             through the library's explicit unbounded-potential constructor and is\n\
             excluded from the moments suite."
        }
        "active_matter" => {
            "active_matter - planar self-propelled particle, z = (x1, x2, theta)\n\
             \n\
             Particle SDE:\n\
             \x20 dx_i = alpha v0 (cos theta_i, sin theta_i) dt\n\
             \x20 dtheta_i = sqrt(alpha) dB_i\n\
             \n\
             The empirical measure solves (alpha = 1):\n\
             \x20 d mu = [(1/2) d2/dtheta2 mu - v0 (cos theta, sin theta) . grad_x mu] dt\n\
             \x20        + d/dtheta(sqrt(mu) dW)\n\
             \n\
             Parameters: speed v0 > 0.  Force-free counterpart of `flocking`:\n\
             identical drift and noise, no alignment interaction.\n\
             \n\
             Caveats: position coordinates are unbounded (no torus wrap); the\n\
             angle is not reduced mod 2 pi, which is immaterial for the catalogued\n\
             test functions."
        }
        "interacting_vfp" => {
            "interacting_vfp - kinetic Langevin particles with a smooth velocity-\n\
             block pair force, z = (x, v) in R^(2d)\n\
             \n\
             Particle SDE:\n\
             \x20 dx_i = alpha v_i dt\n\
             \x20 dv_i = [-alpha (gamma v_i + grad U(x_i)) + F_mu(x_i)] dt + sqrt(2 alpha) dW_i\n\
             \x20 F_mu(x) = (1/alpha) sum_j f(x - x_j),  f(u) = coupling u exp(-|u|^2/(2 width^2))\n\
             \n\
             The force derives from the interaction functional\n\
             G(mu) = (1/2) <mu, v . F_mu>: F_mu = sigma sigma^T grad_v (dG/dmu).\n\
             \n\
             Parameters: dim, gamma, potential, coupling, width.\n\
             \n\
             Caveats: the change-of-measure suite assumes small coupling (the\n\
             exponential moment condition holds trivially for bounded kernels);\n\
             the kernel and its first two derivatives are bounded by construction."
        }
        "flocking" => {
            "flocking - planar self-propelled particles with angular alignment,\n\
             z = (x1, x2, theta)\n\
             \n\
             Particle SDE:\n\
             \x20 dx_i = alpha v0 (cos theta_i, sin theta_i) dt\n\
             \x20 dtheta_i = F_mu(x_i, theta_i) dt + sqrt(alpha) dB_i\n\
             \x20 F_mu(x, theta) = (1/alpha) sum_j chi_R(|x - x_j|) H'(theta - theta_j)\n\
             \x20 H(t) = -align cos t\n\
             \n\
             chi_R is the C^1 smoothstep cutoff: 1 on [0, radius], 0 beyond\n\
             radius + margin.  The force derives from the interaction functional\n\
             G(mu) = (1/2) <mu x mu, chi_R(|x - x'|) H(theta - theta')>:\n\
             F = sigma sigma^T grad_theta (dG/dmu).\n\
             \n\
             Parameters: speed v0, align (coupling strength), radius, margin.\n\
             Force-free counterpart: `active_matter` with the same speed.\n\
             \n\
             Caveats: the pair interaction counts the self-pair (chi(0) H(0) is a\n\
             constant shift of G and does not affect forces); the reweighting\n\
             suite assumes small align."
        }
        "linear_ou" => {
            "linear_ou - two-dimensional linear test model, z = (x, v)\n\
             \n\
             Particle SDE:\n\
             \x20 dx_i = alpha v_i dt\n\
             \x20 dv_i = -alpha (gamma v_i + x_i) dt + sqrt(2 alpha) dW_i\n\
             \n\
             A Gaussian process with closed-form mean and covariance (matrix\n\
             exponential / Lyapunov integral); the oracle model behind the weak-\n\
             order, Cole-Hopf, and duality reference checks.\n\
             \n\
             Parameters: gamma >= 0.\n\
             \n\
             Caveats: none beyond the shared catalogue hypotheses (C^2 bounded\n\
             test functions)."
        }
        other => {
            eprintln!(
                "unknown model kind '{other}'; known kinds: inertial_langevin, \
                 active_matter, interacting_vfp, flocking, linear_ou"
            );
            return ExitCode::from(2);
        }
    };
    say(text);
    ExitCode::SUCCESS
}
