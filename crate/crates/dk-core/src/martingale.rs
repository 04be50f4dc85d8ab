//! The martingale statistic of the measure-valued solution and its
//! statistical tests.
//!
//! For a test function φ the process
//!   M_t(φ) = ⟨μ_t, φ⟩ − ∫₀ᵗ ⟨μ_s, αLφ + F_{μ_s}·∇φ⟩ ds
//! is a martingale with quadratic variation ∫₀ᵗ ⟨μ_s, |σᵀ∇φ|²⟩ ds.  This
//! module evaluates both along recorded trajectories (trapezoidal rule on
//! the simulation grid) and checks the zero-mean-increment property and the
//! realized/predicted quadratic-variation ratio over replica ensembles.

use crate::integrate::Trajectory;
use crate::models::{ModelSpec, TestFunction, MAX_STATE_DIM};
use crate::statistics::StreamingMoments;
use crate::{Error, Result};
use serde::Serialize;

/// Multiplier C in the quadratic-variation discretization allowance
/// δ(dt) = C·dt.  The realized sum of squared increments of the Euler chain
/// carries an O(dt) bias relative to the continuous quadratic variation;
/// C = 5 covers the catalogued models at their documented step sizes with
/// slack (measured bias constants are ≲ 3).
pub const QV_ALLOWANCE_PER_DT: f64 = 5.0;

/// Statistical threshold, in standard errors, for every martingale test.
pub const Z_THRESHOLD: f64 = 3.0;

/// M_t(φ) along one trajectory together with predicted and realized
/// quadratic variation.
#[derive(Clone, Debug)]
pub struct MartingaleTrace {
    pub times: Vec<f64>,
    /// M_t(φ) per grid point; values[0] = ⟨μ₀, φ⟩.
    pub values: Vec<f64>,
    /// ∫₀ᵗ ⟨μ_s, |σᵀ∇φ|²⟩ ds, trapezoidal, nondecreasing from 0.
    pub predicted_qv: Vec<f64>,
    /// Running sum of squared increments of M, nondecreasing from 0.
    pub realized_qv: Vec<f64>,
}

impl MartingaleTrace {
    /// Index of the grid point at time `t` (within rounding).
    pub fn index_of(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&u| (u - t).abs() <= 1e-9 * t.abs().max(1.0))
            .ok_or_else(|| Error::invalid(format!("time {t} is not on the trace grid")))
    }

    /// CSV rendering: time, M, predicted_qv, realized_qv.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,martingale,predicted_qv,realized_qv\n");
        for i in 0..self.times.len() {
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e}\n",
                self.times[i], self.values[i], self.predicted_qv[i], self.realized_qv[i]
            ));
        }
        out
    }
}

/// One zero-mean-increment check over a checkpoint pair.
#[derive(Clone, Debug, Serialize)]
pub struct IncrementCheck {
    pub s: f64,
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
    pub z: f64,
    pub pass: bool,
    /// True when the replica increments were identically zero (0/0 z-score).
    pub degenerate: bool,
}

/// Quadratic-variation ratio check at one time.
#[derive(Clone, Debug, Serialize)]
pub struct QvCheck {
    pub t: f64,
    pub dt: f64,
    pub realized_mean: f64,
    pub predicted_mean: f64,
    /// realized/predicted replica-mean ratio (1 when degenerate).
    pub ratio: f64,
    /// Standard error of the ratio (delta method with replica covariance).
    pub stderr: f64,
    /// C·dt discretization allowance.
    pub allowance: f64,
    pub lower: f64,
    pub upper: f64,
    pub pass: bool,
    /// True when both sides vanish (e.g. constant φ).
    pub degenerate: bool,
}

/// Outcome of the martingale diagnostics: increment checks and, for
/// `qv_test`, the ratio check.
#[derive(Clone, Debug, Serialize)]
pub struct TestReport {
    pub increments: Vec<IncrementCheck>,
    pub qv: Option<QvCheck>,
    pub pass: bool,
}

/// Evaluates M_t(φ), its compensator integrand, and both quadratic
/// variations along a trajectory.
pub fn martingale_statistic(
    model: &ModelSpec,
    traj: &Trajectory,
    phi: &TestFunction,
) -> Result<MartingaleTrace> {
    if traj.len() < 2 {
        return Err(Error::invalid("martingale statistic needs at least two grid points"));
    }
    phi.validate(model.state_dim())?;
    let k = model.state_dim();
    let interacting = model.is_interacting();
    let m = traj.len();
    let mut pairings = Vec::with_capacity(m);
    let mut drift_integrand = Vec::with_capacity(m);
    let mut qv_integrand = Vec::with_capacity(m);
    let mut grad = [0.0; MAX_STATE_DIM];
    let mut b = [0.0; MAX_STATE_DIM];
    let mut force = [0.0; MAX_STATE_DIM];
    for snap in traj.snapshots() {
        if snap.dim() != k {
            return Err(Error::invalid("trajectory dimension does not match the model"));
        }
        let alpha = snap.alpha();
        let mu = snap.as_measure();
        let mut sum_phi = 0.0;
        let mut sum_drift = 0.0;
        let mut sum_qv = 0.0;
        for i in 0..snap.n_particles() {
            let z = snap.particle(i);
            sum_phi += phi.value(z);
            phi.gradient_into(z, &mut grad[..k]);
            model.drift(z, &mut b[..k])?;
            let mut generator: f64 = b[..k].iter().zip(&grad[..k]).map(|(a, g)| a * g).sum();
            let mut qv_term = 0.0;
            for &(row, val) in model.noise_rows() {
                generator += 0.5 * val * val * phi.second_partial(z, row, row);
                let t = val * grad[row];
                qv_term += t * t;
            }
            let mut term = alpha * generator;
            if interacting {
                model.interaction_force_into(&mu, z, &mut force[..k])?;
                term += force[..k].iter().zip(&grad[..k]).map(|(f, g)| f * g).sum::<f64>();
            }
            sum_drift += term;
            sum_qv += qv_term;
        }
        pairings.push(sum_phi / alpha);
        drift_integrand.push(sum_drift / alpha);
        qv_integrand.push(sum_qv / alpha);
    }
    let times = traj.times().to_vec();
    let mut values = Vec::with_capacity(m);
    let mut predicted = Vec::with_capacity(m);
    let mut realized = Vec::with_capacity(m);
    let mut compensator = 0.0;
    let mut pred_acc = 0.0;
    let mut real_acc = 0.0;
    values.push(pairings[0]);
    predicted.push(0.0);
    realized.push(0.0);
    for j in 1..m {
        let h = times[j] - times[j - 1];
        compensator += 0.5 * h * (drift_integrand[j - 1] + drift_integrand[j]);
        pred_acc += 0.5 * h * (qv_integrand[j - 1] + qv_integrand[j]);
        let value = pairings[j] - compensator;
        let increment = value - values[j - 1];
        real_acc += increment * increment;
        values.push(value);
        predicted.push(pred_acc);
        realized.push(real_acc);
    }
    Ok(MartingaleTrace {
        times,
        values,
        predicted_qv: predicted,
        realized_qv: realized,
    })
}

fn common_grid_index(replicas: &[MartingaleTrace], t: f64) -> Result<usize> {
    let idx = replicas[0].index_of(t)?;
    for r in replicas {
        if r.times.len() != replicas[0].times.len() {
            return Err(Error::invalid("replica traces must share their time grid"));
        }
    }
    Ok(idx)
}

/// Zero-mean-increment test: for every checkpoint pair s < t, the replica
/// mean of M_t − M_s must be within 3 standard errors of zero.
pub fn increment_test(replicas: &[MartingaleTrace], checkpoints: &[f64]) -> Result<TestReport> {
    if replicas.len() < 100 {
        return Err(Error::invalid(format!(
            "increment test needs at least 100 replicas, got {}",
            replicas.len()
        )));
    }
    if checkpoints.len() < 2 {
        return Err(Error::invalid("increment test needs at least two checkpoints"));
    }
    let indices: Vec<usize> = checkpoints
        .iter()
        .map(|&t| common_grid_index(replicas, t))
        .collect::<Result<_>>()?;
    let mut checks = Vec::new();
    for a in 0..indices.len() {
        for b in (a + 1)..indices.len() {
            let (is, it) = (indices[a], indices[b]);
            let mut acc = StreamingMoments::new();
            for r in replicas {
                acc.push(r.values[it] - r.values[is]);
            }
            let est = acc.estimate()?;
            let degenerate = est.stderr == 0.0;
            let z = if degenerate {
                0.0
            } else {
                est.mean / est.stderr
            };
            let pass = if degenerate {
                est.mean == 0.0
            } else {
                z.abs() <= Z_THRESHOLD
            };
            checks.push(IncrementCheck {
                s: checkpoints[a],
                t: checkpoints[b],
                mean: est.mean,
                stderr: est.stderr,
                z,
                pass,
                degenerate,
            });
        }
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(TestReport {
        increments: checks,
        qv: None,
        pass,
    })
}

/// Quadratic-variation test at time t: the replica-mean ratio
/// realized/predicted must lie in 1 ± (C·dt + 3·stderr).  The
/// discretization allowance uses the trace's own (uniform) grid spacing.
pub fn qv_test(replicas: &[MartingaleTrace], t: f64) -> Result<TestReport> {
    if replicas.is_empty() {
        return Err(Error::invalid("quadratic-variation test needs replicas"));
    }
    let grid = &replicas[0].times;
    if grid.len() < 2 {
        return Err(Error::invalid("trace grid too short"));
    }
    let dt = grid[1] - grid[0];
    if grid
        .windows(2)
        .any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1e-12))
    {
        return Err(Error::invalid("quadratic-variation test requires a uniform grid"));
    }
    qv_test_with_dt(replicas, t, dt)
}

/// Quadratic-variation test with an explicit integrator step for the
/// discretization allowance — for traces downsampled to checkpoints,
/// whose grid spacing no longer equals the step the values were
/// accumulated at.
pub fn qv_test_with_dt(replicas: &[MartingaleTrace], t: f64, dt: f64) -> Result<TestReport> {
    if replicas.is_empty() {
        return Err(Error::invalid("quadratic-variation test needs replicas"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid("step size must be positive"));
    }
    let idx = common_grid_index(replicas, t)?;
    let n = replicas.len() as f64;
    let (mut mr, mut mp) = (0.0, 0.0);
    for r in replicas {
        mr += r.realized_qv[idx];
        mp += r.predicted_qv[idx];
    }
    mr /= n;
    mp /= n;
    let (mut vr, mut vp, mut cov) = (0.0, 0.0, 0.0);
    for r in replicas {
        let dr = r.realized_qv[idx] - mr;
        let dp = r.predicted_qv[idx] - mp;
        vr += dr * dr;
        vp += dp * dp;
        cov += dr * dp;
    }
    let denom = (n - 1.0).max(1.0);
    vr /= denom;
    vp /= denom;
    cov /= denom;
    let allowance = QV_ALLOWANCE_PER_DT * dt;
    let degenerate = mp == 0.0;
    let (ratio, stderr, pass) = if degenerate {
        // Nothing predicted: realized must vanish too (up to roundoff).
        let tol = 1e-12;
        (1.0, 0.0, mr.abs() <= tol)
    } else {
        let ratio = mr / mp;
        // Delta method for X̄/Ȳ with replica covariance.
        let var = (vr / (mp * mp) + vp * mr * mr / mp.powi(4)
            - 2.0 * cov * mr / mp.powi(3))
            / n;
        let stderr = var.max(0.0).sqrt();
        let lower = 1.0 - allowance - Z_THRESHOLD * stderr;
        let upper = 1.0 + allowance + Z_THRESHOLD * stderr;
        (ratio, stderr, ratio >= lower && ratio <= upper)
    };
    let check = QvCheck {
        t,
        dt,
        realized_mean: mr,
        predicted_mean: mp,
        ratio,
        stderr,
        allowance,
        lower: 1.0 - allowance - Z_THRESHOLD * stderr,
        upper: 1.0 + allowance + Z_THRESHOLD * stderr,
        pass,
        degenerate,
    };
    Ok(TestReport {
        increments: Vec::new(),
        qv: Some(check),
        pass,
    })
}
