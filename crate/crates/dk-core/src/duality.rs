//! Semigroup Monte Carlo, the Cole-Hopf transform, the Laplace duality, the
//! moment-generating-function identity behind atomicity rigidity, and the
//! exhaustion probe.
//!
//! For the force-free dynamics the law of the measure-valued process is
//! characterized by E e^{−⟨μ_t,φ⟩} = e^{−⟨μ₀,V_tφ⟩} with the Cole-Hopf
//! transform V_tφ = −α ln(P_{αt} e^{−φ/α}), where (P_s) is the semigroup of
//! the unit-rate diffusion dz = b dt + σ dW.  Every operation here estimates
//! P by Monte Carlo over `sample_l_diffusion` paths; the particle dynamics
//! runs at rate α, so the semigroup is always evaluated at the rescaled
//! time αt.  All checks are restricted to force-free models; interacting
//! models are related to them by reweighting, not by a direct formula.

use crate::integrate::{simulate_terminal, sample_l_diffusion, Ensemble, Scheme};
use crate::models::{ModelSpec, TestFunction};
use crate::rng::{NoiseStream, StreamClass};
use crate::statistics::{MCEstimate, StreamingMoments};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

/// Allowance constant for time-discretization bias in the Laplace check:
/// the acceptance band is 3·combined stderr + `DUALITY_DT_ALLOWANCE`·dt.
pub const DUALITY_DT_ALLOWANCE: f64 = 2.0;

/// Monte Carlo estimate of a semigroup value P_t f(z).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SemigroupEstimate {
    /// Raw sample mean (not clamped, even for 0 ≤ f ≤ 1).
    pub value: f64,
    pub stderr: f64,
    pub n_inner: usize,
    pub dt: f64,
}

/// Sample mean of f over paths of the unit-rate diffusion started at z.
pub fn semigroup_mc<F>(
    model: &ModelSpec,
    f: F,
    z: &[f64],
    t: f64,
    n_inner: usize,
    dt: f64,
    noise: &NoiseStream,
) -> Result<SemigroupEstimate>
where
    F: Fn(&[f64]) -> f64,
{
    if n_inner < 2 {
        return Err(Error::invalid("semigroup estimate needs at least 2 inner samples"));
    }
    let k = model.state_dim();
    if z.len() != k {
        return Err(Error::invalid(format!(
            "start point has dimension {}, model state dimension is {k}",
            z.len()
        )));
    }
    let terminal = sample_l_diffusion(model, z, t, n_inner, dt, noise)?;
    let mut acc = StreamingMoments::new();
    for point in terminal.chunks_exact(k) {
        let value = f(point);
        if !value.is_finite() {
            return Err(Error::invalid("integrand returned a non-finite value"));
        }
        acc.push(value);
    }
    let est = acc.estimate()?;
    Ok(SemigroupEstimate {
        value: est.mean,
        stderr: est.stderr,
        n_inner,
        dt,
    })
}

/// Cole-Hopf transform V_tφ(z) = −α ln(P_{αt} e^{−φ/α})(z) by inner Monte
/// Carlo.  At t = 0 the value φ(z) is returned exactly, without sampling.
pub fn cole_hopf(
    model: &ModelSpec,
    phi: &TestFunction,
    z: &[f64],
    t: f64,
    alpha: f64,
    n_inner: usize,
    dt: f64,
    noise: &NoiseStream,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    phi.validate(model.state_dim())?;
    if t == 0.0 {
        return Ok(phi.value(z));
    }
    let inner = semigroup_mc(
        model,
        |y| (-phi.value(y) / alpha).exp(),
        z,
        alpha * t,
        n_inner,
        dt,
        noise,
    )?;
    if inner.value <= 0.0 {
        return Err(Error::Numerical(format!(
            "inner semigroup estimate {} is not positive; the transform is undefined",
            inner.value
        )));
    }
    Ok(-alpha * inner.value.ln())
}

/// Two-sided Laplace-duality comparison at one time.
#[derive(Clone, Debug, Serialize)]
pub struct LaplaceReport {
    /// Replica mean of e^{−⟨μ_t,φ⟩} from full particle simulation.
    pub lhs: MCEstimate,
    /// exp(−⟨μ₀, V_tφ⟩) from per-atom inner semigroup estimates, with the
    /// error pushed through the exponential by the delta method.
    pub rhs: MCEstimate,
    pub difference: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Verifies E e^{−⟨μ_t,φ⟩} = e^{−⟨μ₀,V_tφ⟩} for a force-free model by
/// independent Monte Carlo on both sides.  The pass band is
/// 3·combined stderr + `DUALITY_DT_ALLOWANCE`·dt.
pub fn laplace_check(
    model: &ModelSpec,
    mu0: &Ensemble,
    phi: &TestFunction,
    t: f64,
    outer_replicas: usize,
    inner_samples: usize,
    dt: f64,
    seed: u64,
) -> Result<LaplaceReport> {
    if model.is_interacting() {
        return Err(Error::invalid(
            "the Laplace duality holds for force-free models only",
        ));
    }
    if outer_replicas < 2 {
        return Err(Error::invalid("need at least 2 outer replicas"));
    }
    phi.validate(model.state_dim())?;
    let alpha = mu0.alpha();

    // Replica-parallel map, sequential replica-order reduction: bitwise
    // independent of the worker count.
    let values: Vec<f64> = (0..outer_replicas)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let stream = NoiseStream::new(seed, StreamClass::Simulation, r as u64);
            let terminal = simulate_terminal(model, mu0, t, dt, Scheme::EulerMaruyama, &stream)?;
            Ok((-terminal.as_measure().pair(phi)).exp())
        })
        .collect::<Result<_>>()?;
    let mut outer = StreamingMoments::new();
    for v in values {
        outer.push(v);
    }
    let lhs = outer.estimate()?;

    // rhs: exp(−Σ_i V_tφ(z_i)/α) = Π_i P̂_{αt} e^{−φ/α}(z_i), atom-parallel.
    let measure = mu0.as_measure();
    let inners: Vec<SemigroupEstimate> = (0..measure.n_atoms())
        .into_par_iter()
        .map(|i| {
            let stream = NoiseStream::new(seed, StreamClass::Semigroup, i as u64);
            semigroup_mc(
                model,
                |y| (-phi.value(y) / alpha).exp(),
                measure.atom(i),
                alpha * t,
                inner_samples,
                dt,
                &stream,
            )
        })
        .collect::<Result<_>>()?;
    let mut log_rhs = 0.0;
    let mut rel_var = 0.0;
    for (i, inner) in inners.iter().enumerate() {
        if inner.value <= 0.0 {
            return Err(Error::Numerical(format!(
                "inner semigroup estimate {} at atom {i} is not positive",
                inner.value
            )));
        }
        log_rhs += inner.value.ln();
        rel_var += (inner.stderr / inner.value).powi(2);
    }
    let rhs_value = log_rhs.exp();
    let rhs = MCEstimate {
        mean: rhs_value,
        stderr: rhs_value * rel_var.sqrt(),
        n: inner_samples as u64,
    };

    let difference = (lhs.mean - rhs.mean).abs();
    let tolerance =
        3.0 * (lhs.stderr * lhs.stderr + rhs.stderr * rhs.stderr).sqrt() + DUALITY_DT_ALLOWANCE * dt;
    Ok(LaplaceReport {
        lhs,
        rhs,
        difference,
        tolerance,
        pass: difference <= tolerance,
    })
}

/// One λ line of the moment-generating-function comparison.
#[derive(Clone, Debug, Serialize)]
pub struct MgfLine {
    pub lambda: f64,
    /// Replica mean of exp(−λ·α·μ_t(A)).
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// Π_atoms (1 + (e^{−λ} − 1)·P̂_{αt}1_A(z_i)), delta-method stderr.
    pub rhs: f64,
    pub rhs_stderr: f64,
    pub z: f64,
    pub pass: bool,
}

/// Outcome of the moment-generating-function identity check.
#[derive(Clone, Debug, Serialize)]
pub struct MgfReport {
    pub lines: Vec<MgfLine>,
    /// Largest deviation of α·μ_t(A) from its nearest integer over every
    /// replica (exactly 0: set masses are atom counts by construction).
    pub max_integrality_defect: f64,
    pub pass: bool,
}

impl MgfReport {
    /// CSV rendering: lambda, lhs, lhs_se, rhs, rhs_se, z, pass.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,lhs,lhs_se,rhs,rhs_se,z,pass\n");
        for line in &self.lines {
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
                line.lambda, line.lhs, line.lhs_stderr, line.rhs, line.rhs_stderr, line.z, line.pass
            ));
        }
        out
    }
}

/// Verifies the moment-generating-function identity
/// E exp(−λ·α·μ_t(A)) = exp(⟨μ₀, α ln(1 + (e^{−λ}−1) P_{αt}1_A)⟩)
/// for a force-free model, at each λ ≥ 0.  The left side is exact in
/// structure: α·μ_t(A) is the number of atoms inside A, an integer on every
/// replica.  `replicas` is used for the outer ensemble count and for the
/// per-atom inner semigroup budget alike.
pub fn mgf_identity(
    model: &ModelSpec,
    mu0: &Ensemble,
    set: &crate::measure::ProbeSet,
    t: f64,
    lambdas: &[f64],
    replicas: usize,
    dt: f64,
    seed: u64,
) -> Result<MgfReport> {
    if model.is_interacting() {
        return Err(Error::invalid(
            "the moment-generating-function identity holds for force-free models only",
        ));
    }
    if lambdas.iter().any(|&l| l < 0.0) {
        return Err(Error::invalid("lambda values must be nonnegative"));
    }
    if replicas < 2 {
        return Err(Error::invalid("need at least 2 replicas"));
    }
    let alpha = mu0.alpha();

    // One simulation pass; per-replica atom counts in A (replica-parallel,
    // replica-order reduction).
    let rows: Vec<(f64, f64)> = (0..replicas)
        .into_par_iter()
        .map(|r| -> Result<(f64, f64)> {
            let stream = NoiseStream::new(seed, StreamClass::Simulation, r as u64);
            let terminal = simulate_terminal(model, mu0, t, dt, Scheme::EulerMaruyama, &stream)?;
            let measure = terminal.as_measure();
            let count = measure.atoms().filter(|z| set.contains(z)).count() as f64;
            let mass_route = alpha * measure.set_mass(set);
            Ok((count, (mass_route - count).abs()))
        })
        .collect::<Result<_>>()?;
    let mut counts = Vec::with_capacity(replicas);
    let mut max_defect: f64 = 0.0;
    for (count, defect) in rows {
        counts.push(count);
        max_defect = max_defect.max(defect);
    }

    // One inner semigroup estimate of P_{αt}1_A per initial atom.
    let initial = mu0.as_measure();
    let hits: Vec<SemigroupEstimate> = (0..initial.n_atoms())
        .into_par_iter()
        .map(|i| {
            let stream = NoiseStream::new(seed, StreamClass::Semigroup, i as u64);
            semigroup_mc(
                model,
                |y| if set.contains(y) { 1.0 } else { 0.0 },
                initial.atom(i),
                alpha * t,
                replicas,
                dt,
                &stream,
            )
        })
        .collect::<Result<_>>()?;

    let mut lines = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut acc = StreamingMoments::new();
        for &m in &counts {
            acc.push((-lambda * m).exp());
        }
        let lhs = acc.estimate()?;
        let c = (-lambda).exp() - 1.0;
        let mut log_rhs = 0.0;
        let mut var_log = 0.0;
        for est in &hits {
            let factor = 1.0 + c * est.value;
            if factor <= 0.0 {
                return Err(Error::Numerical(format!(
                    "factor 1+(e^{{−λ}}−1)·P̂ = {factor} is not positive at λ = {lambda}"
                )));
            }
            log_rhs += factor.ln();
            var_log += (c * est.stderr / factor).powi(2);
        }
        let rhs = log_rhs.exp();
        let rhs_stderr = rhs * var_log.sqrt();
        let combined = (lhs.stderr * lhs.stderr + rhs_stderr * rhs_stderr).sqrt();
        let z = if combined == 0.0 {
            if lhs.mean == rhs { 0.0 } else { f64::INFINITY }
        } else {
            (lhs.mean - rhs) / combined
        };
        lines.push(MgfLine {
            lambda,
            lhs: lhs.mean,
            lhs_stderr: lhs.stderr,
            rhs,
            rhs_stderr,
            z,
            pass: z.abs() <= 3.0,
        });
    }
    let pass = lines.iter().all(|l| l.pass) && max_defect <= 1e-9;
    Ok(MgfReport {
        lines,
        max_integrality_defect: max_defect,
        pass,
    })
}

/// Semigroup value of a ball indicator at one probe point.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeValue {
    pub point: Vec<f64>,
    pub value: f64,
    pub stderr: f64,
}

/// Exhaustion-probe summary: the largest estimated P_{t}1_{B(0,r)} over a
/// probe grid, and how many standard errors it sits below 1.
#[derive(Clone, Debug, Serialize)]
pub struct ExhaustionReport {
    pub radius: f64,
    pub t: f64,
    pub probes: Vec<ProbeValue>,
    pub max_value: f64,
    pub max_stderr: f64,
    /// (1 − max_value)/stderr at the arg-max probe (infinite when the
    /// estimate is noiseless).
    pub gap_sigmas: f64,
}

/// Estimates sup_z P_t 1_{B(0,r)}(z) over a finite probe grid.  Supports —
/// does not prove — that the semigroup keeps indicator masses of bounded
/// sets away from 1.
pub fn exhaustion_probe(
    model: &ModelSpec,
    radius: f64,
    t: f64,
    grid: &[Vec<f64>],
    n_inner: usize,
    dt: f64,
    seed: u64,
) -> Result<ExhaustionReport> {
    if !(t > 0.0) {
        return Err(Error::invalid("the exhaustion probe needs t > 0"));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("the exhaustion probe needs a positive radius"));
    }
    if grid.is_empty() {
        return Err(Error::invalid("the probe grid is empty"));
    }
    let k = model.state_dim();
    let ball = crate::measure::ProbeSet::Ball {
        center: vec![0.0; k],
        radius,
    };
    let estimates: Vec<SemigroupEstimate> = grid
        .par_iter()
        .enumerate()
        .map(|(j, z)| {
            let stream = NoiseStream::new(seed, StreamClass::Semigroup, j as u64);
            semigroup_mc(
                model,
                |y| if ball.contains(y) { 1.0 } else { 0.0 },
                z,
                t,
                n_inner,
                dt,
                &stream,
            )
        })
        .collect::<Result<_>>()?;
    let mut probes = Vec::with_capacity(grid.len());
    let (mut max_value, mut max_stderr) = (f64::NEG_INFINITY, 0.0);
    for (z, est) in grid.iter().zip(&estimates) {
        if est.value > max_value {
            max_value = est.value;
            max_stderr = est.stderr;
        }
        probes.push(ProbeValue {
            point: z.clone(),
            value: est.value,
            stderr: est.stderr,
        });
    }
    let gap_sigmas = if max_stderr == 0.0 {
        if max_value < 1.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        (1.0 - max_value) / max_stderr
    };
    Ok(ExhaustionReport {
        radius,
        t,
        probes,
        max_value,
        max_stderr,
        gap_sigmas,
    })
}
