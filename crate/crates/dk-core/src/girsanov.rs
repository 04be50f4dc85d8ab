//! The Itô-formula martingale of an interaction functional, its stochastic
//! exponential, and the change-of-measure equivalence between interacting
//! and force-free ensembles.
//!
//! For a catalogued interaction functional G the process
//!
//!   M^G_t = G(μ_t) − G(μ₀) − ∫₀ᵗ ⟨μ_s, αL δG + F_{μ_s}·∇δG⟩ ds
//!           − ½ ∫₀ᵗ ⟨μ_s, σσᵀ : D δ²G⟩ ds,
//!
//! with (Dψ)(z) = ∂_{1,i}∂_{2,j}ψ(z, z), is a martingale under the
//! interacting dynamics with quadratic variation
//! [M^G]_t = ∫₀ᵗ ⟨μ_s, |σᵀ∇δG|²⟩ ds.  Because the interaction force is
//! exactly F = σσᵀ∇δG, removing the drift F·∇φ from every test-function
//! martingale requires the density dQ/dP = ℰ(−M^G) = e^{−M^G − ½[M^G]}:
//! under that reweighting the interacting ensemble has the law of the
//! force-free one.  (The stochastic exponential of +M^G also has unit mean,
//! but doubles the interaction drift instead of cancelling it; the
//! sign-flip fault test below demonstrates the difference empirically.)

use crate::integrate::{simulate, Ensemble, Scheme, Trajectory};
use crate::martingale::MartingaleTrace;
use crate::models::{ModelSpec, TestFunction, MAX_STATE_DIM};
use crate::rng::{NoiseStream, StreamClass};
use crate::statistics::{weighted_mean, MCEstimate, StreamingMoments};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Allowance constant for time-discretization bias in the reweighting
/// band: 3·combined stderr + `REWEIGHT_DT_ALLOWANCE`·dt.
pub const REWEIGHT_DT_ALLOWANCE: f64 = 2.0;

/// M^G along one trajectory together with its compensators, quadratic
/// variation, and stochastic-exponential weight.
#[derive(Clone, Debug)]
pub struct FunctionalTrace {
    pub times: Vec<f64>,
    /// G(μ_t) per grid point.
    pub functional: Vec<f64>,
    /// M^G_t per grid point; values[0] = 0.
    pub values: Vec<f64>,
    /// Quadratic variation [M^G]_t = ∫⟨μ_s, |σᵀ∇δG|²⟩ ds, trapezoidal.
    pub qv: Vec<f64>,
    /// Reweighting density ℰ(−M^G)_t = exp(−M^G_t − ½[M^G]_t); positive
    /// everywhere, 1 at t = 0.
    pub weights: Vec<f64>,
}

impl FunctionalTrace {
    /// Terminal weight ℰ(−M^G) at the end of the grid.
    pub fn terminal_weight(&self) -> f64 {
        *self.weights.last().expect("traces have at least one point")
    }

    /// Reinterprets M^G as a martingale trace (predicted quadratic
    /// variation from the Γ-integrand, realized from squared increments) so
    /// the martingale-module tests apply to it unchanged.
    pub fn as_martingale_trace(&self) -> MartingaleTrace {
        let mut realized = Vec::with_capacity(self.values.len());
        realized.push(0.0);
        for j in 1..self.values.len() {
            let inc = self.values[j] - self.values[j - 1];
            realized.push(realized[j - 1] + inc * inc);
        }
        MartingaleTrace {
            times: self.times.clone(),
            values: self.values.clone(),
            predicted_qv: self.qv.clone(),
            realized_qv: realized,
        }
    }

    /// CSV rendering: time, G, M^G, quadratic variation, weight.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,functional,martingale,qv,weight\n");
        for j in 0..self.times.len() {
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                self.times[j], self.functional[j], self.values[j], self.qv[j], self.weights[j]
            ));
        }
        out
    }
}

/// Evaluates M^G, its quadratic variation, and ℰ(−M^G) along a recorded
/// trajectory of an interacting model.  All time integrals use the
/// trapezoidal rule on the trajectory grid.
pub fn ito_functional_trace(model: &ModelSpec, traj: &Trajectory) -> Result<FunctionalTrace> {
    if !model.is_interacting() {
        return Err(Error::invalid(
            "the functional martingale needs a model with an interaction functional",
        ));
    }
    if traj.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    let k = model.state_dim();
    let m = traj.len();
    let mut functional = Vec::with_capacity(m);
    let mut drift_integrand = Vec::with_capacity(m);
    let mut qv_integrand = Vec::with_capacity(m);
    let mut b = [0.0; MAX_STATE_DIM];
    let mut force = [0.0; MAX_STATE_DIM];
    for snap in traj.snapshots() {
        if snap.dim() != k {
            return Err(Error::invalid("trajectory dimension does not match the model"));
        }
        let alpha = snap.alpha();
        let mu = snap.as_measure();
        functional.push(model.interaction_functional(&mu)?);
        let mut sum_drift = 0.0;
        let mut sum_qv = 0.0;
        for i in 0..snap.n_particles() {
            let z = snap.particle(i);
            let var = model.variation_g(&mu, z)?;
            model.drift(z, &mut b[..k])?;
            model.interaction_force_into(&mu, z, &mut force[..k])?;
            // αLδG with L = b·∇ + ½ σσᵀ:∇², plus the interaction drift.
            let mut generator: f64 =
                b[..k].iter().zip(&var.gradient).map(|(a, g)| a * g).sum();
            let sv = model.second_variation_g(&mu, z, z)?;
            let mut qv_term = 0.0;
            let mut d_term = 0.0;
            for &(row, val) in model.noise_rows() {
                generator += 0.5 * val * val * var.hessian[row * k + row];
                let t = val * var.gradient[row];
                qv_term += t * t;
                d_term += val * val * sv.mixed[row * k + row];
            }
            sum_drift += alpha * generator
                + force[..k]
                    .iter()
                    .zip(&var.gradient)
                    .map(|(f, g)| f * g)
                    .sum::<f64>()
                + 0.5 * d_term;
            sum_qv += qv_term;
        }
        drift_integrand.push(sum_drift / alpha);
        qv_integrand.push(sum_qv / alpha);
    }
    let times = traj.times().to_vec();
    let mut values = Vec::with_capacity(m);
    let mut qv = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    values.push(0.0);
    qv.push(0.0);
    weights.push(1.0);
    let mut compensator = 0.0;
    let mut qv_acc = 0.0;
    for j in 1..m {
        let h = times[j] - times[j - 1];
        compensator += 0.5 * h * (drift_integrand[j - 1] + drift_integrand[j]);
        qv_acc += 0.5 * h * (qv_integrand[j - 1] + qv_integrand[j]);
        let m_val = functional[j] - functional[0] - compensator;
        values.push(m_val);
        qv.push(qv_acc);
        weights.push((-m_val - 0.5 * qv_acc).exp());
    }
    Ok(FunctionalTrace {
        times,
        functional,
        values,
        qv,
        weights,
    })
}

/// Path observable Φ(μ_t) compared across the change of measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    /// Φ = e^{−⟨μ_t, φ⟩} (bounded; the Laplace-functional observable).
    ExpPairing,
    /// Φ = ⟨μ_t, φ⟩.
    Pairing,
}

impl Observable {
    fn evaluate(&self, terminal: &Ensemble, phi: &TestFunction) -> f64 {
        let pairing = terminal.as_measure().pair(phi);
        match self {
            Observable::ExpPairing => (-pairing).exp(),
            Observable::Pairing => pairing,
        }
    }
}

/// Outcome of the change-of-measure comparison.
#[derive(Clone, Debug, Serialize)]
pub struct ReweightReport {
    /// E over interacting replicas of ℰ(−M^G)·Φ.
    pub weighted: MCEstimate,
    /// E over force-free replicas of Φ.
    pub free: MCEstimate,
    /// E over interacting replicas of ℰ(−M^G); the theoretical value is 1.
    pub mean_weight: MCEstimate,
    /// Effective sample size (Σw)²/Σw² of the interacting weights.
    pub ess: f64,
    /// True when ess < 0.5·replicas (weight degeneracy warning).
    pub low_ess: bool,
    pub difference: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Converse direction: E over interacting replicas of Φ (plain).
    pub converse_plain: MCEstimate,
    /// Converse direction: E over force-free replicas of ℰ(−M^G)^{-1}·Φ,
    /// with the trace evaluated along the force-free path.
    pub converse_reweighted: MCEstimate,
    pub converse_difference: f64,
    pub converse_tolerance: f64,
    pub converse_pass: bool,
}

/// Checks that the free and interacting drifts coincide (the pair differs
/// only by the interaction force) and that noise and mass scale agree.
pub fn validate_model_pair(interacting: &ModelSpec, free: &ModelSpec) -> Result<()> {
    if !interacting.is_interacting() {
        return Err(Error::invalid("first model must carry an interaction"));
    }
    if free.is_interacting() {
        return Err(Error::invalid("second model must be force-free"));
    }
    if interacting.state_dim() != free.state_dim()
        || interacting.noise_dim() != free.noise_dim()
        || interacting.noise_rows() != free.noise_rows()
    {
        return Err(Error::invalid(
            "model pair mismatch: state or noise structure differs",
        ));
    }
    if interacting.alpha() != free.alpha() {
        return Err(Error::invalid("model pair mismatch: alpha differs"));
    }
    let k = interacting.state_dim();
    let mut bi = vec![0.0; k];
    let mut bf = vec![0.0; k];
    // Deterministic probe points; the drifts must agree exactly.
    for p in 0..8 {
        let z: Vec<f64> = (0..k)
            .map(|a| 0.37 * ((p * k + a) as f64 * 0.71).sin())
            .collect();
        interacting.drift(&z, &mut bi)?;
        free.drift(&z, &mut bf)?;
        if bi != bf {
            return Err(Error::invalid(
                "model pair mismatch: drifts differ, the free model is not the force-free counterpart",
            ));
        }
    }
    Ok(())
}

/// Verifies E_P[ℰ(−M^G)·Φ] = E_Q[Φ] by independent simulation of the
/// interacting law P and the force-free law Q, plus the converse identity
/// E_P[Φ] = E_Q[ℰ(−M^G)^{-1}·Φ].  The pass band on each direction is
/// 3·combined stderr + `REWEIGHT_DT_ALLOWANCE`·dt.
#[allow(clippy::too_many_arguments)]
pub fn reweighting_check(
    interacting: &ModelSpec,
    free: &ModelSpec,
    mu0: &Ensemble,
    phi: &TestFunction,
    observable: Observable,
    t: f64,
    replicas: usize,
    dt: f64,
    seed: u64,
) -> Result<ReweightReport> {
    validate_model_pair(interacting, free)?;
    if replicas < 2 {
        return Err(Error::invalid("need at least 2 replicas"));
    }
    phi.validate(interacting.state_dim())?;

    // Interacting side: weights and observables from P-paths.  Replica-
    // parallel map, replica-order reduction (bitwise worker-independent).
    let p_rows: Vec<(f64, f64)> = (0..replicas)
        .into_par_iter()
        .map(|r| -> Result<(f64, f64)> {
            let stream = NoiseStream::new(seed, StreamClass::Simulation, r as u64);
            let traj = simulate(interacting, mu0, t, dt, Scheme::EulerMaruyama, &stream)?;
            let trace = ito_functional_trace(interacting, &traj)?;
            Ok((trace.terminal_weight(), observable.evaluate(traj.last(), phi)))
        })
        .collect::<Result<_>>()?;
    let mut weights = Vec::with_capacity(replicas);
    let mut observables = Vec::with_capacity(replicas);
    let mut weighted_acc = StreamingMoments::new();
    let mut plain_acc = StreamingMoments::new();
    let mut weight_acc = StreamingMoments::new();
    for (w, obs) in p_rows {
        weights.push(w);
        observables.push(obs);
        weighted_acc.push(w * obs);
        plain_acc.push(obs);
        weight_acc.push(w);
    }
    let weighted = weighted_acc.estimate()?;
    let converse_plain = plain_acc.estimate()?;
    let mean_weight = weight_acc.estimate()?;
    let (_, ess) = weighted_mean(&observables, &weights)?;

    // Force-free side: independent replicas (offset stream ids).  ℰ(−M^G)
    // is a path functional; along Q-paths its inverse reweights Q back to P.
    let q_rows: Vec<(f64, f64)> = (0..replicas)
        .into_par_iter()
        .map(|r| -> Result<(f64, f64)> {
            let stream = NoiseStream::new(seed, StreamClass::Simulation, (replicas + r) as u64);
            let traj = simulate(free, mu0, t, dt, Scheme::EulerMaruyama, &stream)?;
            let obs = observable.evaluate(traj.last(), phi);
            let trace = ito_functional_trace(interacting, &traj)?;
            Ok((obs, obs / trace.terminal_weight()))
        })
        .collect::<Result<_>>()?;
    let mut free_acc = StreamingMoments::new();
    let mut converse_acc = StreamingMoments::new();
    for (obs, conv) in q_rows {
        free_acc.push(obs);
        converse_acc.push(conv);
    }
    let free_est = free_acc.estimate()?;
    let converse_reweighted = converse_acc.estimate()?;

    let difference = (weighted.mean - free_est.mean).abs();
    let tolerance = 3.0
        * (weighted.stderr * weighted.stderr + free_est.stderr * free_est.stderr).sqrt()
        + REWEIGHT_DT_ALLOWANCE * dt;
    let converse_difference = (converse_plain.mean - converse_reweighted.mean).abs();
    let converse_tolerance = 3.0
        * (converse_plain.stderr * converse_plain.stderr
            + converse_reweighted.stderr * converse_reweighted.stderr)
            .sqrt()
        + REWEIGHT_DT_ALLOWANCE * dt;
    Ok(ReweightReport {
        weighted,
        free: free_est,
        mean_weight,
        ess,
        low_ess: ess < 0.5 * replicas as f64,
        difference,
        tolerance,
        pass: difference <= tolerance,
        converse_plain,
        converse_reweighted,
        converse_difference,
        converse_tolerance,
        converse_pass: converse_difference <= converse_tolerance,
    })
}
