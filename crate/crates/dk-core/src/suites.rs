//! Experiment drivers: each suite runs one verification campaign over a
//! replica ensemble and returns summary statistics plus a plot-ready CSV
//! artifact.
//!
//! Replica work is parallelized with rayon, but every reduction happens
//! sequentially in replica order over an index-ordered buffer, so results
//! are bitwise independent of the worker count.  Together with the
//! counter-based noise streams this makes entire runs byte-reproducible
//! from (config, seed) alone.

use crate::duality::{exhaustion_probe, laplace_check, mgf_identity};
use crate::girsanov::{ito_functional_trace, reweighting_check, Observable};
use crate::integrate::{simulate, Ensemble, Scheme};
use crate::martingale::{
    increment_test, martingale_statistic, qv_test_with_dt, MartingaleTrace, Z_THRESHOLD,
};
use crate::measure::{gronwall_bound, ProbeSet};
use crate::models::{ModelSpec, TestFunction};
use crate::rng::{NoiseStream, StreamClass};
use crate::statistics::StreamingMoments;
use crate::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

/// One line of the run summary: a named statistic, its value and
/// uncertainty, the pass band, and the verdict.
#[derive(Clone, Debug, Serialize)]
pub struct SummaryEntry {
    pub suite: &'static str,
    pub statistic: String,
    pub value: f64,
    pub stderr: f64,
    pub band: [f64; 2],
    pub pass: bool,
}

/// Result of one suite: summary entries, a CSV artifact, and the suite
/// verdict (the conjunction of its gating entries).
#[derive(Clone, Debug, Serialize)]
pub struct SuiteOutcome {
    pub suite: &'static str,
    pub entries: Vec<SummaryEntry>,
    pub csv: String,
    pub pass: bool,
}

/// Time discretization shared by the trajectory suites: integrator scheme,
/// step, horizon, and the number of evenly spaced checkpoints (including
/// both endpoints) at which statistics are recorded.
#[derive(Clone, Copy, Debug)]
pub struct GridSpec {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    pub checkpoints: usize,
}

impl GridSpec {
    /// Number of integrator steps; the horizon must sit on the step grid.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt must be positive"));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::invalid("t_end must be positive"));
        }
        let steps = (self.t_end / self.dt).round();
        if steps < 1.0 || (steps * self.dt - self.t_end).abs() > 1e-9 * self.t_end {
            return Err(Error::invalid(format!(
                "t_end {} is not a multiple of dt {}",
                self.t_end, self.dt
            )));
        }
        Ok(steps as usize)
    }

    /// Step-grid indices of the checkpoints: `checkpoints` evenly spaced
    /// values including 0 and the final step, deduplicated on coarse grids.
    pub fn checkpoint_indices(&self) -> Result<Vec<usize>> {
        if self.checkpoints < 2 {
            return Err(Error::invalid("need at least 2 checkpoints"));
        }
        let steps = self.steps()?;
        let c = self.checkpoints;
        let mut idx: Vec<usize> = (0..c)
            .map(|i| ((i * steps) as f64 / (c - 1) as f64).round() as usize)
            .collect();
        idx.dedup();
        Ok(idx)
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// Restriction of a full-grid trace to the checkpoint indices.  The
/// cumulative quantities (predicted and realized quadratic variation) keep
/// their fine-grid values, so checkpoint statistics are exactly those of
/// the full trace.
fn compress(trace: &MartingaleTrace, idx: &[usize]) -> MartingaleTrace {
    MartingaleTrace {
        times: idx.iter().map(|&j| trace.times[j]).collect(),
        values: idx.iter().map(|&j| trace.values[j]).collect(),
        predicted_qv: idx.iter().map(|&j| trace.predicted_qv[j]).collect(),
        realized_qv: idx.iter().map(|&j| trace.realized_qv[j]).collect(),
    }
}

/// Per-replica (mass, second moment) at the checkpoints, replica-parallel.
fn moment_rows(
    model: &ModelSpec,
    mu0: &Ensemble,
    grid: &GridSpec,
    replicas: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<Vec<(f64, f64)>>)> {
    if replicas < 2 {
        return Err(Error::invalid("need at least 2 replicas"));
    }
    let idx = grid.checkpoint_indices()?;
    let rows: Vec<Vec<(f64, f64)>> = (0..replicas)
        .into_par_iter()
        .map(|r| -> Result<Vec<(f64, f64)>> {
            let stream = NoiseStream::new(seed, StreamClass::Simulation, r as u64);
            let traj = simulate(model, mu0, grid.t_end, grid.dt, grid.scheme, &stream)?;
            Ok(idx
                .iter()
                .map(|&j| {
                    let mu = traj.snapshot(j).as_measure();
                    (mu.mass(), mu.second_moment())
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let times = idx.iter().map(|&j| j as f64 * grid.dt).collect();
    Ok((times, rows))
}

/// Plain evolution smoke suite: replica-mean mass and second moment per
/// checkpoint, with exact mass conservation as the gating statistic.
pub fn simulate_suite(
    model: &ModelSpec,
    mu0: &Ensemble,
    grid: &GridSpec,
    replicas: usize,
    seed: u64,
) -> Result<SuiteOutcome> {
    let (times, rows) = moment_rows(model, mu0, grid, replicas, seed)?;
    let mass0 = mu0.as_measure().mass();
    let mut mass_drift = 0.0f64;
    let mut acc: Vec<StreamingMoments> = times.iter().map(|_| StreamingMoments::new()).collect();
    let mut mass_mean = vec![0.0; times.len()];
    for row in &rows {
        for (j, &(mass, sm)) in row.iter().enumerate() {
            mass_drift = mass_drift.max((mass - mass0).abs());
            mass_mean[j] += mass;
            acc[j].push(sm);
        }
    }
    for m in &mut mass_mean {
        *m /= replicas as f64;
    }
    let mut csv = String::from("time,mass,second_moment,second_moment_stderr\n");
    let mut terminal = None;
    for (j, &t) in times.iter().enumerate() {
        let est = acc[j].estimate()?;
        csv.push_str(&format!(
            "{},{},{},{}\n",
            fmt(t),
            fmt(mass_mean[j]),
            fmt(est.mean),
            fmt(est.stderr)
        ));
        terminal = Some(est);
    }
    let mut entries = vec![SummaryEntry {
        suite: "simulate",
        statistic: "mass_drift".into(),
        value: mass_drift,
        stderr: 0.0,
        band: [0.0, 0.0],
        pass: mass_drift == 0.0,
    }];
    // A-priori second-moment sanity where the growth bound applies.
    if let Ok(bound) = gronwall_bound(model, &mu0.as_measure(), grid.t_end) {
        let est = terminal.expect("at least one checkpoint");
        entries.push(SummaryEntry {
            suite: "simulate",
            statistic: "terminal_second_moment".into(),
            value: est.mean,
            stderr: est.stderr,
            band: [0.0, bound],
            pass: est.mean <= bound + Z_THRESHOLD * est.stderr,
        });
    }
    let pass = entries.iter().all(|e| e.pass);
    Ok(SuiteOutcome {
        suite: "simulate",
        entries,
        csv,
        pass,
    })
}

/// Martingale verification: for each test function, all checkpoint-pair
/// increments must be mean-zero within `Z_THRESHOLD` standard errors and
/// the realized/predicted quadratic-variation ratio must sit in the
/// discretization-aware band.
pub fn martingale_suite(
    model: &ModelSpec,
    mu0: &Ensemble,
    grid: &GridSpec,
    phis: &[TestFunction],
    replicas: usize,
    seed: u64,
) -> Result<SuiteOutcome> {
    if phis.is_empty() {
        return Err(Error::invalid("martingale suite needs test functions"));
    }
    let idx = grid.checkpoint_indices()?;
    let per_replica: Vec<Vec<MartingaleTrace>> = (0..replicas)
        .into_par_iter()
        .map(|r| -> Result<Vec<MartingaleTrace>> {
            let stream = NoiseStream::new(seed, StreamClass::Simulation, r as u64);
            let traj = simulate(model, mu0, grid.t_end, grid.dt, grid.scheme, &stream)?;
            phis.iter()
                .map(|phi| Ok(compress(&martingale_statistic(model, &traj, phi)?, &idx)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut by_phi: Vec<Vec<MartingaleTrace>> =
        (0..phis.len()).map(|_| Vec::with_capacity(replicas)).collect();
    for row in per_replica {
        for (i, trace) in row.into_iter().enumerate() {
            by_phi[i].push(trace);
        }
    }
    let mut entries = Vec::new();
    let mut csv = String::from("phi,check,s,t,value,stderr,score,pass\n");
    for (i, traces) in by_phi.iter().enumerate() {
        let checkpoints = traces[0].times.clone();
        let increments = increment_test(traces, &checkpoints)?;
        let mut max_z = 0.0f64;
        for c in &increments.increments {
            max_z = max_z.max(c.z.abs());
            csv.push_str(&format!(
                "{i},increment,{},{},{},{},{},{}\n",
                fmt(c.s),
                fmt(c.t),
                fmt(c.mean),
                fmt(c.stderr),
                fmt(c.z),
                c.pass
            ));
        }
        entries.push(SummaryEntry {
            suite: "martingale",
            statistic: format!("increment_max_abs_z_phi{i}"),
            value: max_z,
            stderr: 0.0,
            band: [0.0, Z_THRESHOLD],
            pass: increments.pass,
        });
        let qv_report = qv_test_with_dt(traces, grid.t_end, grid.dt)?;
        let qv = qv_report.qv.as_ref().expect("qv test always reports a check");
        let score = if qv.stderr > 0.0 {
            (qv.ratio - 1.0) / qv.stderr
        } else {
            0.0
        };
        csv.push_str(&format!(
            "{i},qv,{},{},{},{},{},{}\n",
            fmt(0.0),
            fmt(qv.t),
            fmt(qv.ratio),
            fmt(qv.stderr),
            fmt(score),
            qv.pass
        ));
        entries.push(SummaryEntry {
            suite: "martingale",
            statistic: format!("qv_ratio_phi{i}"),
            value: qv.ratio,
            stderr: qv.stderr,
            band: [qv.lower, qv.upper],
            pass: qv.pass,
        });
    }
    let pass = entries.iter().all(|e| e.pass);
    Ok(SuiteOutcome {
        suite: "martingale",
        entries,
        csv,
        pass,
    })
}

/// Second-moment suite: the replica-mean ⟨μ_t, |z|²⟩ must stay below the
/// a-priori growth bound at every checkpoint, with 3·stderr slack.
pub fn moments_suite(
    model: &ModelSpec,
    mu0: &Ensemble,
    grid: &GridSpec,
    replicas: usize,
    seed: u64,
) -> Result<SuiteOutcome> {
    let (times, rows) = moment_rows(model, mu0, grid, replicas, seed)?;
    let mu0_measure = mu0.as_measure();
    let mut csv = String::from("time,second_moment,second_moment_stderr,bound,pass\n");
    let mut worst_fraction = 0.0f64;
    let mut all_pass = true;
    for (j, &t) in times.iter().enumerate() {
        let mut acc = StreamingMoments::new();
        for row in &rows {
            acc.push(row[j].1);
        }
        let est = acc.estimate()?;
        let bound = gronwall_bound(model, &mu0_measure, t)?;
        let pass = est.mean <= bound + Z_THRESHOLD * est.stderr;
        all_pass &= pass;
        worst_fraction = worst_fraction.max((est.mean - Z_THRESHOLD * est.stderr) / bound);
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt(t),
            fmt(est.mean),
            fmt(est.stderr),
            fmt(bound),
            pass
        ));
    }
    let entries = vec![SummaryEntry {
        suite: "moments",
        statistic: "second_moment_bound_fraction".into(),
        value: worst_fraction,
        stderr: 0.0,
        band: [0.0, 1.0],
        pass: all_pass,
    }];
    Ok(SuiteOutcome {
        suite: "moments",
        entries,
        csv,
        pass: all_pass,
    })
}

/// Laplace-duality suite: E e^{−⟨μ_t,φ⟩} against the product of per-atom
/// semigroup factors, within 3·combined stderr + 2·dt.
#[allow(clippy::too_many_arguments)]
pub fn duality_suite(
    model: &ModelSpec,
    mu0: &Ensemble,
    phi: &TestFunction,
    t: f64,
    dt: f64,
    outer_replicas: usize,
    inner_samples: usize,
    seed: u64,
) -> Result<SuiteOutcome> {
    let report = laplace_check(model, mu0, phi, t, outer_replicas, inner_samples, dt, seed)?;
    let combined =
        (report.lhs.stderr * report.lhs.stderr + report.rhs.stderr * report.rhs.stderr).sqrt();
    let mut csv = String::from("quantity,value,stderr\n");
    csv.push_str(&format!("lhs,{},{}\n", fmt(report.lhs.mean), fmt(report.lhs.stderr)));
    csv.push_str(&format!("rhs,{},{}\n", fmt(report.rhs.mean), fmt(report.rhs.stderr)));
    csv.push_str(&format!("difference,{},{}\n", fmt(report.difference), fmt(combined)));
    csv.push_str(&format!("tolerance,{},{}\n", fmt(report.tolerance), fmt(0.0)));
    let entries = vec![SummaryEntry {
        suite: "duality",
        statistic: "laplace_gap".into(),
        value: report.difference,
        stderr: combined,
        band: [0.0, report.tolerance],
        pass: report.pass,
    }];
    let pass = report.pass;
    Ok(SuiteOutcome {
        suite: "duality",
        entries,
        csv,
        pass,
    })
}

/// Set-mass moment-generating-function suite: exact integrality of
/// α·μ_t(A) and the product identity for E e^{−λ α μ_t(A)} at each λ.
#[allow(clippy::too_many_arguments)]
pub fn mgf_suite(
    model: &ModelSpec,
    mu0: &Ensemble,
    set: &ProbeSet,
    lambdas: &[f64],
    t: f64,
    dt: f64,
    replicas: usize,
    seed: u64,
) -> Result<SuiteOutcome> {
    let report = mgf_identity(model, mu0, set, t, lambdas, replicas, dt, seed)?;
    let max_z = report
        .lines
        .iter()
        .fold(0.0f64, |acc, line| acc.max(line.z.abs()));
    let lines_pass = report.lines.iter().all(|line| line.pass);
    let entries = vec![
        SummaryEntry {
            suite: "mgf",
            statistic: "mgf_max_abs_z".into(),
            value: max_z,
            stderr: 0.0,
            band: [0.0, Z_THRESHOLD],
            pass: lines_pass,
        },
        SummaryEntry {
            suite: "mgf",
            statistic: "mass_integrality_defect".into(),
            value: report.max_integrality_defect,
            stderr: 0.0,
            band: [0.0, 1e-9],
            pass: report.max_integrality_defect <= 1e-9,
        },
    ];
    let pass = report.pass;
    Ok(SuiteOutcome {
        suite: "mgf",
        entries,
        csv: report.to_csv(),
        pass,
    })
}

/// Change-of-measure suite: unit mean weight, the reweighting identity in
/// both directions, and an effective-sample-size advisory.  The CSV holds
/// the replica-0 functional trace.
#[allow(clippy::too_many_arguments)]
pub fn girsanov_suite(
    interacting: &ModelSpec,
    free: &ModelSpec,
    mu0: &Ensemble,
    phi: &TestFunction,
    observable: Observable,
    t: f64,
    dt: f64,
    replicas: usize,
    seed: u64,
) -> Result<SuiteOutcome> {
    let report = reweighting_check(
        interacting, free, mu0, phi, observable, t, replicas, dt, seed,
    )?;
    let stream = NoiseStream::new(seed, StreamClass::Simulation, 0);
    let traj = simulate(interacting, mu0, t, dt, Scheme::EulerMaruyama, &stream)?;
    let trace = ito_functional_trace(interacting, &traj)?;
    let weight_band = Z_THRESHOLD * report.mean_weight.stderr;
    let ess_fraction = report.ess / replicas as f64;
    let entries = vec![
        SummaryEntry {
            suite: "girsanov",
            statistic: "mean_weight".into(),
            value: report.mean_weight.mean,
            stderr: report.mean_weight.stderr,
            band: [1.0 - weight_band, 1.0 + weight_band],
            pass: (report.mean_weight.mean - 1.0).abs() <= weight_band,
        },
        SummaryEntry {
            suite: "girsanov",
            statistic: "reweight_gap".into(),
            value: report.difference,
            stderr: 0.0,
            band: [0.0, report.tolerance],
            pass: report.pass,
        },
        SummaryEntry {
            suite: "girsanov",
            statistic: "converse_gap".into(),
            value: report.converse_difference,
            stderr: 0.0,
            band: [0.0, report.converse_tolerance],
            pass: report.converse_pass,
        },
        // Advisory only: a weight-degeneracy warning, not a gate.
        SummaryEntry {
            suite: "girsanov",
            statistic: "ess_fraction_advisory".into(),
            value: ess_fraction,
            stderr: 0.0,
            band: [0.5, 1.0],
            pass: !report.low_ess,
        },
    ];
    let pass = entries[..3].iter().all(|e| e.pass);
    Ok(SuiteOutcome {
        suite: "girsanov",
        entries,
        csv: trace.to_csv(),
        pass,
    })
}

/// Exhaustion suite: sup over probe starting points of the semigroup
/// acting on a centered-ball indicator stays bounded away from 1 by at
/// least 5 standard errors.
pub fn exhaustion_suite(
    model: &ModelSpec,
    radius: f64,
    probes: &[Vec<f64>],
    t: f64,
    dt: f64,
    inner_samples: usize,
    seed: u64,
) -> Result<SuiteOutcome> {
    let report = exhaustion_probe(model, radius, t, probes, inner_samples, dt, seed)?;
    let k = model.state_dim();
    let mut csv = String::new();
    for a in 0..k {
        csv.push_str(&format!("x{a},"));
    }
    csv.push_str("value,stderr\n");
    for probe in &report.probes {
        for x in &probe.point {
            csv.push_str(&fmt(*x));
            csv.push(',');
        }
        csv.push_str(&format!("{},{}\n", fmt(probe.value), fmt(probe.stderr)));
    }
    let pass = report.gap_sigmas >= 5.0;
    let entries = vec![SummaryEntry {
        suite: "exhaustion",
        statistic: "sup_probe_mass".into(),
        value: report.max_value,
        stderr: report.max_stderr,
        band: [0.0, 1.0],
        pass,
    }];
    Ok(SuiteOutcome {
        suite: "exhaustion",
        entries,
        csv,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelKind, PotentialSpec};

    fn linear_ou() -> ModelSpec {
        ModelSpec::new(ModelKind::LinearOu { gamma: 1.0 }, 1.0).unwrap()
    }

    fn three_atoms() -> Ensemble {
        Ensemble::new(vec![0.4, 0.0, -0.3, 0.2, 0.1, -0.5], 2, 1.0).unwrap()
    }

    fn grid() -> GridSpec {
        GridSpec {
            scheme: Scheme::EulerMaruyama,
            dt: 5e-3,
            t_end: 0.2,
            checkpoints: 5,
        }
    }

    #[test]
    fn checkpoint_indices_cover_both_endpoints_evenly() {
        let g = grid();
        let idx = g.checkpoint_indices().unwrap();
        assert_eq!(idx, vec![0, 10, 20, 30, 40]);
        let coarse = GridSpec {
            dt: 0.1,
            t_end: 0.2,
            checkpoints: 11,
            scheme: Scheme::EulerMaruyama,
        };
        let idx = coarse.checkpoint_indices().unwrap();
        assert_eq!(idx.first(), Some(&0));
        assert_eq!(idx.last(), Some(&2));
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(GridSpec {
            t_end: 0.2037,
            ..grid()
        }
        .steps()
        .is_err());
    }

    #[test]
    fn simulate_suite_reports_exact_mass_conservation() {
        let out = simulate_suite(&linear_ou(), &three_atoms(), &grid(), 60, 7).unwrap();
        assert!(out.pass);
        assert_eq!(out.entries[0].statistic, "mass_drift");
        assert_eq!(out.entries[0].value, 0.0);
        // Header plus one row per checkpoint.
        assert_eq!(out.csv.lines().count(), 1 + 5);
    }

    #[test]
    fn martingale_suite_passes_on_the_linear_model() {
        let phis = vec![TestFunction::GaussianBump {
            center: vec![0.0, 0.0],
            width: 1.0,
            amplitude: 1.0,
        }];
        let out = martingale_suite(&linear_ou(), &three_atoms(), &grid(), &phis, 150, 21).unwrap();
        assert!(out.pass, "entries: {:?}", out.entries);
        assert_eq!(out.entries.len(), 2);
        assert!(out.csv.starts_with("phi,check,s,t,"));
    }

    #[test]
    fn moments_suite_stays_below_the_growth_bound() {
        let out = moments_suite(&linear_ou(), &three_atoms(), &grid(), 80, 3).unwrap();
        assert!(out.pass);
        assert!(out.entries[0].value < 1.0);
    }

    #[test]
    fn moments_suite_rejects_models_without_a_growth_constant() {
        let model = ModelSpec::new_with_unbounded_potential(
            ModelKind::InertialLangevin {
                dim: 1,
                gamma: 1.0,
                potential: PotentialSpec::DoubleWell {
                    quartic: 1.0,
                    quadratic: 1.0,
                },
            },
            1.0,
        )
        .unwrap();
        let ens = Ensemble::new(vec![0.1, 0.0], 2, 1.0).unwrap();
        assert!(moments_suite(&model, &ens, &grid(), 10, 3).is_err());
    }

    #[test]
    fn girsanov_suite_produces_trace_csv_and_passes() {
        let interacting = ModelSpec::new(
            ModelKind::Flocking {
                speed: 1.0,
                align: 0.2,
                radius: 1.0,
                margin: 0.25,
            },
            1.0,
        )
        .unwrap();
        let free = ModelSpec::new(ModelKind::ActiveMatter { speed: 1.0 }, 1.0).unwrap();
        let ens = Ensemble::new(
            vec![0.2, 0.0, 0.3, -0.2, 0.1, 1.4, 0.0, 0.2, 2.6],
            3,
            1.0,
        )
        .unwrap();
        let phi = TestFunction::GaussianBump {
            center: vec![0.0, 0.0, 0.5],
            width: 1.2,
            amplitude: 1.0,
        };
        let out = girsanov_suite(
            &interacting,
            &free,
            &ens,
            &phi,
            Observable::ExpPairing,
            0.2,
            5e-3,
            400,
            9,
        )
        .unwrap();
        assert!(out.pass, "entries: {:?}", out.entries);
        assert!(out.csv.starts_with("time,functional,martingale,qv,weight"));
        assert_eq!(out.entries.len(), 4);
    }

    #[test]
    fn exhaustion_suite_csv_lists_probe_coordinates() {
        let probes = vec![vec![0.0, 0.0], vec![1.5, 0.5], vec![-1.5, -0.5]];
        let out = exhaustion_suite(&linear_ou(), 1.0, &probes, 0.5, 5e-3, 300, 13).unwrap();
        assert!(out.pass, "entries: {:?}", out.entries);
        assert!(out.csv.starts_with("x0,x1,value,stderr"));
        assert_eq!(out.csv.lines().count(), 1 + probes.len());
    }
}
