//! Time stepping of the interacting particle system and of the bare
//! one-particle diffusion.
//!
//! Particles follow dz = [α b(z) + F_μ(z)] dt + √α σ dW with the empirical
//! interaction force evaluated on the pre-step ensemble (explicit scheme).
//! Noise is drawn from counter-based streams keyed by (seed, replica,
//! particle id, step), so a trajectory is a pure function of its
//! configuration and seed regardless of execution order.

use crate::measure::EmpiricalMeasure;
use crate::models::{ModelSpec, MAX_STATE_DIM};
use crate::rng::NoiseStream;
use crate::{Error, Result};

/// Time-stepping scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Explicit Euler–Maruyama, the baseline for every model.
    EulerMaruyama,
    /// Half-kick / half-drift / exact OU velocity / half-drift / half-kick
    /// splitting; kinetic models only.
    KineticSplit,
}

/// A weighted particle configuration at a point in time.
#[derive(Clone, Debug)]
pub struct Ensemble {
    data: Vec<f64>,
    dim: usize,
    alpha: f64,
    time: f64,
    /// Stable particle identities; noise streams are keyed by these, so
    /// permuting particles permutes trajectories exactly.
    ids: Vec<u64>,
}

impl Ensemble {
    /// Builds an ensemble at time 0 with identities 0..n.
    pub fn new(data: Vec<f64>, dim: usize, alpha: f64) -> Result<Self> {
        if dim == 0 || dim > MAX_STATE_DIM {
            return Err(Error::invalid(format!(
                "state dimension must be in 1..={MAX_STATE_DIM}, got {dim}"
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        if data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "data length {} is not a multiple of the dimension {dim}",
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("ensemble coordinates must be finite"));
        }
        let n = data.len() / dim;
        Ok(Self {
            data,
            dim,
            alpha,
            time: 0.0,
            ids: (0..n as u64).collect(),
        })
    }

    /// Draws n particles i.i.d. from an isotropic Gaussian with the given
    /// per-coordinate center and standard deviation, using the
    /// initial-condition stream class.
    pub fn sample_gaussian(
        n: usize,
        center: &[f64],
        std_dev: f64,
        alpha: f64,
        master_seed: u64,
        replica: u64,
    ) -> Result<Self> {
        if !(std_dev.is_finite() && std_dev >= 0.0) {
            return Err(Error::invalid(format!(
                "standard deviation must be nonnegative, got {std_dev}"
            )));
        }
        let dim = center.len();
        let stream = NoiseStream::new(master_seed, crate::rng::StreamClass::InitSampler, replica);
        let mut data = vec![0.0; n * dim];
        for (i, chunk) in data.chunks_exact_mut(dim).enumerate() {
            stream.fill_normals(0, i as u64, chunk);
            for (c, x) in chunk.iter_mut().enumerate() {
                *x = center[c] + std_dev * *x;
            }
        }
        Ensemble::new(data, dim.max(1), alpha)
    }

    pub fn n_particles(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// The empirical measure (1/α) Σ_i δ_{z_i} carried by this ensemble.
    pub fn as_measure(&self) -> EmpiricalMeasure<'_> {
        EmpiricalMeasure::new(&self.data, self.dim, self.alpha)
            .expect("ensemble invariants guarantee a valid measure")
    }

    /// Reorders particles (with their identities) by the given permutation:
    /// new slot i holds old particle perm[i].
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_particles();
        if perm.len() != n {
            return Err(Error::invalid("permutation length must match particle count"));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return Err(Error::invalid("not a permutation"));
            }
            seen[p] = true;
        }
        let mut out = self.clone();
        for (i, &p) in perm.iter().enumerate() {
            out.data[i * self.dim..(i + 1) * self.dim]
                .copy_from_slice(self.particle(p));
            out.ids[i] = self.ids[p];
        }
        Ok(out)
    }
}

/// A recorded trajectory on a uniform grid, t_j = j·dt.
#[derive(Clone, Debug)]
pub struct Trajectory {
    times: Vec<f64>,
    snapshots: Vec<Ensemble>,
    master_seed: u64,
    replica: u64,
}

impl Trajectory {
    /// Assembles a trajectory from recorded parts (synthetic inputs and
    /// reweighting tests).  The grid must be strictly increasing from 0 and
    /// snapshots must agree with it in count and share shape.
    pub fn from_parts(times: Vec<f64>, snapshots: Vec<Ensemble>) -> Result<Self> {
        if times.is_empty() || times[0] != 0.0 {
            return Err(Error::invalid("time grid must start at 0"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("time grid must be strictly increasing"));
        }
        if times.len() != snapshots.len() {
            return Err(Error::invalid("snapshot count must match the grid length"));
        }
        let first = &snapshots[0];
        if snapshots
            .iter()
            .any(|s| s.dim != first.dim || s.n_particles() != first.n_particles() || s.alpha != first.alpha)
        {
            return Err(Error::invalid("snapshots must share shape, count, and alpha"));
        }
        Ok(Self {
            times,
            snapshots,
            master_seed: 0,
            replica: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn snapshot(&self, i: usize) -> &Ensemble {
        &self.snapshots[i]
    }

    pub fn snapshots(&self) -> &[Ensemble] {
        &self.snapshots
    }

    pub fn last(&self) -> &Ensemble {
        self.snapshots.last().expect("trajectory has at least one snapshot")
    }

    /// Uniform grid spacing.
    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    /// Seed record: (master seed, replica index) of the noise stream.
    pub fn seed_record(&self) -> (u64, u64) {
        (self.master_seed, self.replica)
    }
}

/// Advances `src` by one step into `dst` (same shape).  `forces`, when
/// non-empty, holds the pre-step interaction forces, n×k row-major.
fn advance_into(
    model: &ModelSpec,
    scheme: Scheme,
    src: &Ensemble,
    dt: f64,
    noise: &NoiseStream,
    step: u64,
    forces: &[f64],
    dst: &mut Ensemble,
) -> Result<()> {
    let k = src.dim;
    let l = model.noise_dim();
    let alpha = src.alpha;
    let root_alpha_dt = (alpha * dt).sqrt();
    let mut xi = [0.0; MAX_STATE_DIM];
    let mut b = [0.0; MAX_STATE_DIM];
    match scheme {
        Scheme::EulerMaruyama => {
            for i in 0..src.n_particles() {
                let z = src.particle(i);
                let out = &mut dst.data[i * k..(i + 1) * k];
                model.drift(z, &mut b[..k])?;
                for c in 0..k {
                    out[c] = z[c] + alpha * b[c] * dt;
                }
                if !forces.is_empty() {
                    for c in 0..k {
                        out[c] += forces[i * k + c] * dt;
                    }
                }
                noise.fill_normals(step, src.ids[i], &mut xi[..l]);
                model.add_scaled_noise(root_alpha_dt, &xi[..l], out);
                if !out.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite { step, particle: i });
                }
            }
        }
        Scheme::KineticSplit => {
            let (d, gamma, potential) = model.kinetic_params().ok_or_else(|| {
                Error::invalid("the splitting integrator requires a kinetic model")
            })?;
            debug_assert_eq!(k, 2 * d);
            let decay = (-alpha * gamma * dt).exp();
            let noise_std = if gamma > 0.0 {
                ((1.0 - decay * decay) / gamma).sqrt()
            } else {
                (2.0 * alpha * dt).sqrt()
            };
            let mut grad_u = [0.0; MAX_STATE_DIM];
            for i in 0..src.n_particles() {
                let z = src.particle(i);
                let out = &mut dst.data[i * k..(i + 1) * k];
                out.copy_from_slice(z);
                let (x, v) = out.split_at_mut(d);
                // Half kick: conservative force plus the (pre-step)
                // interaction force on the velocity block.
                potential.gradient_into(x, &mut grad_u[..d]);
                for c in 0..d {
                    v[c] -= 0.5 * dt * alpha * grad_u[c];
                }
                if !forces.is_empty() {
                    for c in 0..d {
                        v[c] += 0.5 * dt * forces[i * k + d + c];
                    }
                }
                // Half drift.
                for c in 0..d {
                    x[c] += 0.5 * dt * alpha * v[c];
                }
                // Exact OU velocity update.
                noise.fill_normals(step, src.ids[i], &mut xi[..d]);
                for c in 0..d {
                    v[c] = decay * v[c] + noise_std * xi[c];
                }
                // Half drift, half kick (fresh position gradient; the
                // interaction force stays frozen at its pre-step value).
                for c in 0..d {
                    x[c] += 0.5 * dt * alpha * v[c];
                }
                potential.gradient_into(x, &mut grad_u[..d]);
                for c in 0..d {
                    v[c] -= 0.5 * dt * alpha * grad_u[c];
                }
                if !forces.is_empty() {
                    for c in 0..d {
                        v[c] += 0.5 * dt * forces[i * k + d + c];
                    }
                }
                if !x.iter().all(|a| a.is_finite()) || !v.iter().all(|a| a.is_finite()) {
                    return Err(Error::NonFinite { step, particle: i });
                }
            }
        }
    }
    dst.time = src.time + dt;
    dst.ids.copy_from_slice(&src.ids);
    Ok(())
}

/// Pre-step interaction forces for every particle (empty for
/// non-interacting models).
fn interaction_forces(model: &ModelSpec, ens: &Ensemble) -> Result<Vec<f64>> {
    if !model.is_interacting() || ens.n_particles() == 0 {
        return Ok(Vec::new());
    }
    let k = ens.dim;
    let mu = ens.as_measure();
    let mut forces = vec![0.0; ens.data.len()];
    for i in 0..ens.n_particles() {
        let (head, tail) = forces.split_at_mut(i * k);
        let _ = head;
        model.interaction_force_into(&mu, ens.particle(i), &mut tail[..k])?;
    }
    Ok(forces)
}

fn check_model_ensemble(model: &ModelSpec, ens: &Ensemble, dt: f64) -> Result<()> {
    if ens.dim != model.state_dim() {
        return Err(Error::invalid(format!(
            "ensemble dimension {} does not match model state dimension {}",
            ens.dim,
            model.state_dim()
        )));
    }
    if !(dt.is_finite() && dt >= 0.0) {
        return Err(Error::invalid(format!("dt must be nonnegative, got {dt}")));
    }
    Ok(())
}

/// One explicit Euler–Maruyama step:
/// z ← z + [α b(z) + F_μ(z)] dt + √(α dt) σ ξ.  dt = 0 is the identity.
pub fn em_step(
    model: &ModelSpec,
    ens: &Ensemble,
    dt: f64,
    noise: &NoiseStream,
    step: u64,
) -> Result<Ensemble> {
    check_model_ensemble(model, ens, dt)?;
    let forces = interaction_forces(model, ens)?;
    let mut next = ens.clone();
    if dt > 0.0 {
        advance_into(model, Scheme::EulerMaruyama, ens, dt, noise, step, &forces, &mut next)?;
    }
    Ok(next)
}

/// One splitting step for kinetic models; consistent with `em_step` in the
/// weak sense and exact for the pure OU velocity part.  dt = 0 is the
/// identity.
pub fn kinetic_split_step(
    model: &ModelSpec,
    ens: &Ensemble,
    dt: f64,
    noise: &NoiseStream,
    step: u64,
) -> Result<Ensemble> {
    check_model_ensemble(model, ens, dt)?;
    if model.kinetic_params().is_none() {
        return Err(Error::invalid("the splitting integrator requires a kinetic model"));
    }
    let forces = interaction_forces(model, ens)?;
    let mut next = ens.clone();
    if dt > 0.0 {
        advance_into(model, Scheme::KineticSplit, ens, dt, noise, step, &forces, &mut next)?;
    }
    Ok(next)
}

fn step_count(t_end: f64, dt: f64) -> Result<u64> {
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(Error::invalid(format!("t_end must be positive, got {t_end}")));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let n = (t_end / dt).round();
    if n < 1.0 || ((n * dt - t_end) / t_end).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "dt = {dt} does not divide t_end = {t_end}"
        )));
    }
    Ok(n as u64)
}

/// Simulates the particle system on the uniform grid {0, dt, …, t_end},
/// recording every step.  Deterministic in (model, ens0, dt, scheme, noise).
pub fn simulate(
    model: &ModelSpec,
    ens0: &Ensemble,
    t_end: f64,
    dt: f64,
    scheme: Scheme,
    noise: &NoiseStream,
) -> Result<Trajectory> {
    check_model_ensemble(model, ens0, dt)?;
    if scheme == Scheme::KineticSplit && model.kinetic_params().is_none() {
        return Err(Error::invalid("the splitting integrator requires a kinetic model"));
    }
    let n_steps = step_count(t_end, dt)?;
    let mut snapshots = Vec::with_capacity(n_steps as usize + 1);
    let mut times = Vec::with_capacity(n_steps as usize + 1);
    let mut current = ens0.clone();
    current.time = 0.0;
    snapshots.push(current.clone());
    times.push(0.0);
    let mut next = current.clone();
    for step in 0..n_steps {
        let forces = interaction_forces(model, &current)?;
        advance_into(model, scheme, &current, dt, noise, step, &forces, &mut next)?;
        std::mem::swap(&mut current, &mut next);
        current.time = (step + 1) as f64 * dt;
        times.push(current.time);
        snapshots.push(current.clone());
    }
    Ok(Trajectory {
        times,
        snapshots,
        master_seed: noise.master_seed(),
        replica: noise.replica(),
    })
}

/// As `simulate`, but returns only the terminal ensemble.
pub fn simulate_terminal(
    model: &ModelSpec,
    ens0: &Ensemble,
    t_end: f64,
    dt: f64,
    scheme: Scheme,
    noise: &NoiseStream,
) -> Result<Ensemble> {
    check_model_ensemble(model, ens0, dt)?;
    if scheme == Scheme::KineticSplit && model.kinetic_params().is_none() {
        return Err(Error::invalid("the splitting integrator requires a kinetic model"));
    }
    if t_end == 0.0 {
        let mut copy = ens0.clone();
        copy.time = 0.0;
        return Ok(copy);
    }
    let n_steps = step_count(t_end, dt)?;
    let mut current = ens0.clone();
    current.time = 0.0;
    let mut next = current.clone();
    for step in 0..n_steps {
        let forces = interaction_forces(model, &current)?;
        advance_into(model, scheme, &current, dt, noise, step, &forces, &mut next)?;
        std::mem::swap(&mut current, &mut next);
        current.time = (step + 1) as f64 * dt;
    }
    Ok(current)
}

/// Draws `n_samples` independent approximate samples of the bare diffusion
/// dz = b dt + σ dW (α = 1, no interaction) started at z0 and run to time t
/// by Euler–Maruyama at step dt (a shorter final step absorbs any
/// remainder).  Returns a flat n_samples × k row-major buffer.
pub fn sample_l_diffusion(
    model: &ModelSpec,
    z0: &[f64],
    t: f64,
    n_samples: usize,
    dt: f64,
    noise: &NoiseStream,
) -> Result<Vec<f64>> {
    let k = model.state_dim();
    if z0.len() != k {
        return Err(Error::invalid(format!(
            "start point has dimension {}, model expects {k}",
            z0.len()
        )));
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::invalid(format!("time must be nonnegative, got {t}")));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let l = model.noise_dim();
    let mut out = vec![0.0; n_samples * k];
    let mut b = [0.0; MAX_STATE_DIM];
    let mut xi = [0.0; MAX_STATE_DIM];
    for s in 0..n_samples {
        let z = &mut out[s * k..(s + 1) * k];
        z.copy_from_slice(z0);
        let mut remaining = t;
        let mut step: u64 = 0;
        while remaining > 1e-15 * t.max(1.0) {
            let h = dt.min(remaining);
            model.drift(z, &mut b[..k])?;
            for c in 0..k {
                z[c] += b[c] * h;
            }
            noise.fill_normals(step, s as u64, &mut xi[..l]);
            model.add_scaled_noise(h.sqrt(), &xi[..l], z);
            if !z.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite { step, particle: s });
            }
            remaining -= h;
            step += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelKind, PotentialSpec};
    use crate::oracle::{
        kinetic_baoab_moments, kinetic_euler_moments, kinetic_exact_moments, GaussianMoments,
    };
    use crate::rng::StreamClass;

    fn linear_ou(gamma: f64, alpha: f64) -> ModelSpec {
        ModelSpec::new(ModelKind::LinearOu { gamma }, alpha).unwrap()
    }

    fn stream(seed: u64, replica: u64) -> NoiseStream {
        NoiseStream::new(seed, StreamClass::Simulation, replica)
    }

    /// Sample mean and covariance of (x, v) pairs in a flat buffer.
    fn sample_moments(data: &[f64]) -> (f64, f64, f64, f64, f64) {
        let n = data.len() / 2;
        let (mut mx, mut mv) = (0.0, 0.0);
        for z in data.chunks_exact(2) {
            mx += z[0];
            mv += z[1];
        }
        mx /= n as f64;
        mv /= n as f64;
        let (mut cxx, mut cxv, mut cvv) = (0.0, 0.0, 0.0);
        for z in data.chunks_exact(2) {
            cxx += (z[0] - mx) * (z[0] - mx);
            cxv += (z[0] - mx) * (z[1] - mv);
            cvv += (z[1] - mv) * (z[1] - mv);
        }
        let denom = (n - 1) as f64;
        (mx, mv, cxx / denom, cxv / denom, cvv / denom)
    }

    #[test]
    fn em_step_with_dt_zero_is_the_identity() {
        let model = linear_ou(1.0, 1.0);
        let ens = Ensemble::new(vec![0.3, -0.7, 1.1, 0.2], 2, 1.0).unwrap();
        let next = em_step(&model, &ens, 0.0, &stream(1, 0), 0).unwrap();
        assert_eq!(next.data(), ens.data());
        assert_eq!(next.time(), ens.time());
    }

    /// One Euler step reconstructed by hand from the same noise draw must
    /// match bit for bit.
    #[test]
    fn em_step_matches_manual_update() {
        let model = ModelSpec::new(
            ModelKind::InertialLangevin {
                dim: 1,
                gamma: 0.8,
                potential: PotentialSpec::Quadratic { stiffness: 1.3 },
            },
            1.7,
        )
        .unwrap();
        let (x0, v0, dt, alpha) = (0.4, -0.9, 0.01, 1.7);
        let ens = Ensemble::new(vec![x0, v0], 2, alpha).unwrap();
        let s = stream(99, 3);
        let next = em_step(&model, &ens, dt, &s, 7).unwrap();
        let mut xi = [0.0];
        s.fill_normals(7, 0, &mut xi);
        let expect_x = x0 + alpha * v0 * dt;
        let expect_v = v0 + alpha * (-0.8 * v0 - 1.3 * x0) * dt
            + (alpha * dt).sqrt() * std::f64::consts::SQRT_2 * xi[0];
        assert_eq!(next.particle(0)[0], expect_x);
        assert_eq!(next.particle(0)[1], expect_v);
        assert!((next.time() - dt).abs() < 1e-15);
    }

    /// The Euler chain for the linear model is exactly Gaussian; sampled
    /// moments must match the closed-form chain law within Monte Carlo
    /// error only (no discretization allowance).
    #[test]
    fn em_terminal_moments_match_exact_discrete_chain() {
        let (gamma, alpha, dt, t): (f64, f64, f64, f64) = (1.0, 1.3, 0.05, 1.0);
        let model = linear_ou(gamma, alpha);
        let z0 = [0.5, -0.2];
        let replicas = 40_000usize;
        let steps = (t / dt).round() as usize;
        let mut terminal = Vec::with_capacity(2 * replicas);
        for r in 0..replicas {
            let s = stream(2024, r as u64);
            let mut ens = Ensemble::new(z0.to_vec(), 2, alpha).unwrap();
            for step in 0..steps {
                ens = em_step(&model, &ens, dt, &s, step as u64).unwrap();
            }
            terminal.extend_from_slice(ens.data());
        }
        let (mx, mv, cxx, cxv, cvv) = sample_moments(&terminal);
        let chain = kinetic_euler_moments(
            gamma,
            1.0,
            alpha,
            &vec![dt; steps],
            &GaussianMoments::point(z0[0], z0[1]),
        );
        let n = replicas as f64;
        // Gaussian mean has stderr √(Σ_ii/n); variances have stderr
        // √2·Σ_ii/√n; the cross term √((Σ_xx Σ_vv + Σ_xv²)/n).
        let se_mx = (chain.cov[(0, 0)] / n).sqrt();
        let se_mv = (chain.cov[(1, 1)] / n).sqrt();
        let se_cxx = std::f64::consts::SQRT_2 * chain.cov[(0, 0)] / n.sqrt();
        let se_cvv = std::f64::consts::SQRT_2 * chain.cov[(1, 1)] / n.sqrt();
        let se_cxv = ((chain.cov[(0, 0)] * chain.cov[(1, 1)] + chain.cov[(0, 1)].powi(2)) / n).sqrt();
        assert!((mx - chain.mean[0]).abs() < 4.0 * se_mx, "mean x");
        assert!((mv - chain.mean[1]).abs() < 4.0 * se_mv, "mean v");
        assert!((cxx - chain.cov[(0, 0)]).abs() < 4.0 * se_cxx, "cov xx");
        assert!((cxv - chain.cov[(0, 1)]).abs() < 4.0 * se_cxv, "cov xv");
        assert!((cvv - chain.cov[(1, 1)]).abs() < 4.0 * se_cvv, "cov vv");
    }

    /// Weak order one: the moment error of the Euler chain against the
    /// continuous law scales like dt.  The slope is measured on the exact
    /// chain law (no Monte Carlo), and the Monte Carlo estimate at each dt
    /// is checked against the chain within sampling error.
    #[test]
    fn weak_error_scales_linearly_in_dt() {
        let (gamma, alpha, t): (f64, f64, f64) = (1.0, 1.0, 1.0);
        let model = linear_ou(gamma, alpha);
        let z0 = [1.5, 0.5];
        let init = GaussianMoments::point(z0[0], z0[1]);
        let exact = kinetic_exact_moments(gamma, 1.0, alpha, t, &init);
        let dts = [0.1, 0.05, 0.025];
        let mut chain_err = Vec::new();
        for &dt in &dts {
            let steps = (t / dt).round() as usize;
            let chain = kinetic_euler_moments(gamma, 1.0, alpha, &vec![dt; steps], &init);
            // Aggregate error of the three quadratic observables
            // E x², E v², E xv.
            let errs = [
                (chain.cov[(0, 0)] + chain.mean[0].powi(2))
                    - (exact.cov[(0, 0)] + exact.mean[0].powi(2)),
                (chain.cov[(1, 1)] + chain.mean[1].powi(2))
                    - (exact.cov[(1, 1)] + exact.mean[1].powi(2)),
                (chain.cov[(0, 1)] + chain.mean[0] * chain.mean[1])
                    - (exact.cov[(0, 1)] + exact.mean[0] * exact.mean[1]),
            ];
            chain_err.push(errs.iter().map(|e| e * e).sum::<f64>().sqrt());

            // Monte Carlo at this dt agrees with the exact chain law.
            let replicas = 100_000usize;
            let mut sum = [0.0; 3];
            for r in 0..replicas {
                let s = stream(77, r as u64);
                let mut ens = Ensemble::new(z0.to_vec(), 2, alpha).unwrap();
                for step in 0..steps {
                    ens = em_step(&model, &ens, dt, &s, step as u64).unwrap();
                }
                let z = ens.particle(0);
                sum[0] += z[0] * z[0];
                sum[1] += z[1] * z[1];
                sum[2] += z[0] * z[1];
            }
            let n = replicas as f64;
            let mc = [sum[0] / n, sum[1] / n, sum[2] / n];
            let chain_vals = [
                chain.cov[(0, 0)] + chain.mean[0].powi(2),
                chain.cov[(1, 1)] + chain.mean[1].powi(2),
                chain.cov[(0, 1)] + chain.mean[0] * chain.mean[1],
            ];
            // Conservative stderr bound for second moments of a Gaussian
            // with these scales.
            for (got, want) in mc.iter().zip(chain_vals) {
                let se = 3.0 * (chain.cov[(0, 0)] + chain.cov[(1, 1)] + 1.0) / n.sqrt();
                assert!(
                    (got - want).abs() < 4.0 * se,
                    "MC {got} vs chain {want} at dt {dt}"
                );
            }
        }
        let slope1 = (chain_err[0] / chain_err[1]).ln() / (dts[0] / dts[1]).ln();
        let slope2 = (chain_err[1] / chain_err[2]).ln() / (dts[1] / dts[2]).ln();
        for slope in [slope1, slope2] {
            assert!(
                (0.8..=1.2).contains(&slope),
                "weak-order slope {slope} outside [0.8, 1.2]; errors {chain_err:?}"
            );
        }
    }

    /// With γ = 0 and no potential, the splitting step reduces to free
    /// flight plus the velocity noise injected mid-step; reconstruct it by
    /// hand.
    #[test]
    fn split_step_free_flight_structure() {
        let model = ModelSpec::new(
            ModelKind::InertialLangevin {
                dim: 1,
                gamma: 0.0,
                potential: PotentialSpec::Zero,
            },
            2.0,
        )
        .unwrap();
        let (x0, v0, dt, alpha) = (1.0, -0.5, 0.25, 2.0);
        let ens = Ensemble::new(vec![x0, v0], 2, alpha).unwrap();
        let s = stream(5, 1);
        let next = kinetic_split_step(&model, &ens, dt, &s, 4).unwrap();
        let mut xi = [0.0];
        s.fill_normals(4, 0, &mut xi);
        let v_mid = v0 + (2.0 * alpha * dt).sqrt() * xi[0];
        let expect_x = x0 + 0.5 * dt * alpha * (v0 + v_mid);
        assert_eq!(next.particle(0)[1], v_mid);
        assert!((next.particle(0)[0] - expect_x).abs() < 1e-15);
    }

    /// Pathwise Richardson comparison against Euler with matched noise.
    /// The two schemes place the same Gaussian increment differently within
    /// the step (the splitting exposes the position to half the velocity
    /// noise), so the pathwise difference is O(dt^{3/2}) — halving dt must
    /// shrink it by ≈ 2^{3/2} ≈ 2.83.  Agreement of the *laws* at second
    /// order is covered by the chain-oracle tests.
    #[test]
    fn split_and_euler_steps_agree_to_higher_order() {
        for gamma in [0.0, 1.0] {
            let model = ModelSpec::new(
                ModelKind::InertialLangevin {
                    dim: 1,
                    gamma,
                    potential: PotentialSpec::Quadratic { stiffness: 1.0 },
                },
                1.0,
            )
            .unwrap();
            let ens = Ensemble::new(vec![0.7, -0.3], 2, 1.0).unwrap();
            let mut avg_diff = Vec::new();
            for dt in [0.02, 0.01] {
                let mut total = 0.0;
                for r in 0..400 {
                    let s = stream(11, r);
                    let a = em_step(&model, &ens, dt, &s, 0).unwrap();
                    let b = kinetic_split_step(&model, &ens, dt, &s, 0).unwrap();
                    total += a
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum::<f64>()
                        .sqrt();
                }
                avg_diff.push(total / 400.0);
            }
            let ratio = avg_diff[0] / avg_diff[1];
            assert!(
                (2.4..=4.4).contains(&ratio),
                "γ = {gamma}: step-difference ratio {ratio} outside the \
                 superlinear band [2.4, 4.4]; diffs {avg_diff:?}"
            );
        }
    }

    /// Splitting chain against its exact Gaussian law, started in (and
    /// therefore staying in) the near-stationary regime.
    #[test]
    fn split_chain_matches_oracle_and_stationary_law() {
        let (gamma, alpha, dt, t): (f64, f64, f64, f64) = (1.0, 1.0, 1e-2, 2.0);
        let model = linear_ou(gamma, alpha);
        let steps = (t / dt).round() as usize;
        let replicas = 20_000usize;
        let mut terminal = Vec::with_capacity(2 * replicas);
        for r in 0..replicas {
            let ens = Ensemble::sample_gaussian(1, &[0.0, 0.0], 1.0, alpha, 314, r as u64).unwrap();
            let s = stream(314, r as u64);
            let mut cur = ens;
            for step in 0..steps {
                cur = kinetic_split_step(&model, &cur, dt, &s, step as u64).unwrap();
            }
            terminal.extend_from_slice(cur.data());
        }
        let chain = kinetic_baoab_moments(
            gamma,
            1.0,
            alpha,
            &vec![dt; steps],
            &GaussianMoments::isotropic(1.0),
        );
        let stationary = crate::oracle::kinetic_baoab_stationary(gamma, 1.0, alpha, dt);
        // The chain law after t = 2 relaxation is already at its own fixed
        // point, which in turn is within 0.5% of the continuous invariant
        // covariance I.
        assert!((chain.cov - stationary).norm() < 1e-3);
        for i in 0..2 {
            assert!((stationary[(i, i)] - 1.0).abs() < 5e-3);
        }
        let (mx, mv, cxx, cxv, cvv) = sample_moments(&terminal);
        let n = replicas as f64;
        assert!(mx.abs() < 4.0 * (chain.cov[(0, 0)] / n).sqrt());
        assert!(mv.abs() < 4.0 * (chain.cov[(1, 1)] / n).sqrt());
        assert!(
            (cxx - chain.cov[(0, 0)]).abs()
                < 4.0 * std::f64::consts::SQRT_2 * chain.cov[(0, 0)] / n.sqrt()
        );
        assert!(
            (cvv - chain.cov[(1, 1)]).abs()
                < 4.0 * std::f64::consts::SQRT_2 * chain.cov[(1, 1)] / n.sqrt()
        );
        assert!(
            (cxv - chain.cov[(0, 1)]).abs()
                < 4.0 * ((chain.cov[(0, 0)] * chain.cov[(1, 1)] + chain.cov[(0, 1)].powi(2)) / n)
                    .sqrt()
        );
    }

    #[test]
    fn split_step_rejects_non_kinetic_models() {
        let model = ModelSpec::new(ModelKind::ActiveMatter { speed: 1.0 }, 1.0).unwrap();
        let ens = Ensemble::new(vec![0.0, 0.0, 0.0], 3, 1.0).unwrap();
        assert!(kinetic_split_step(&model, &ens, 0.1, &stream(1, 0), 0).is_err());
    }

    #[test]
    fn simulate_is_deterministic_and_conserves_mass() {
        let model = ModelSpec::new(
            ModelKind::Flocking {
                speed: 1.0,
                align: 0.6,
                radius: 1.0,
                margin: 0.5,
            },
            2.0,
        )
        .unwrap();
        let ens = Ensemble::sample_gaussian(12, &[0.0, 0.0, 0.0], 0.8, 2.0, 7, 0).unwrap();
        let s = stream(7, 0);
        let a = simulate(&model, &ens, 0.5, 0.05, Scheme::EulerMaruyama, &s).unwrap();
        let b = simulate(&model, &ens, 0.5, 0.05, Scheme::EulerMaruyama, &s).unwrap();
        assert_eq!(a.len(), 11);
        assert_eq!(a.times().last().copied(), Some(0.5));
        for (sa, sb) in a.snapshots().iter().zip(b.snapshots()) {
            assert_eq!(sa.data(), sb.data(), "same seed must give identical bits");
            assert_eq!(sa.n_particles(), 12, "mass conservation");
            assert_eq!(sa.alpha(), 2.0);
        }
        assert_eq!(a.seed_record(), (7, 0));
    }

    #[test]
    fn simulate_rejects_incompatible_grids() {
        let model = linear_ou(1.0, 1.0);
        let ens = Ensemble::new(vec![0.0, 0.0], 2, 1.0).unwrap();
        let s = stream(1, 0);
        assert!(simulate(&model, &ens, 1.0, 0.3, Scheme::EulerMaruyama, &s).is_err());
        assert!(simulate(&model, &ens, 0.0, 0.1, Scheme::EulerMaruyama, &s).is_err());
        assert!(simulate(&model, &ens, 1.0, -0.1, Scheme::EulerMaruyama, &s).is_err());
        assert!(simulate(&model, &ens, 1.0, 0.1, Scheme::EulerMaruyama, &s).is_ok());
    }

    #[test]
    fn simulate_handles_the_empty_ensemble() {
        let model = linear_ou(1.0, 1.0);
        let ens = Ensemble::new(vec![], 2, 1.0).unwrap();
        let s = stream(1, 0);
        let traj = simulate(&model, &ens, 0.3, 0.1, Scheme::EulerMaruyama, &s).unwrap();
        assert_eq!(traj.len(), 4);
        for snap in traj.snapshots() {
            assert_eq!(snap.n_particles(), 0);
        }
    }

    /// Noise streams are keyed by particle identity, so permuting the
    /// initial particles permutes the terminal ones exactly (checked on a
    /// non-interacting model where forces cannot reorder the arithmetic).
    #[test]
    fn permutation_equivariance_with_matched_streams() {
        let model = ModelSpec::new(
            ModelKind::InertialLangevin {
                dim: 1,
                gamma: 1.0,
                potential: PotentialSpec::Quadratic { stiffness: 1.0 },
            },
            1.0,
        )
        .unwrap();
        let ens = Ensemble::sample_gaussian(6, &[0.0, 0.0], 1.0, 1.0, 21, 0).unwrap();
        let perm: Vec<usize> = (0..6).rev().collect();
        let permuted = ens.permute(&perm).unwrap();
        let s = stream(21, 0);
        let a = simulate(&model, &ens, 0.5, 0.01, Scheme::EulerMaruyama, &s)
            .unwrap();
        let b = simulate(&model, &permuted, 0.5, 0.01, Scheme::EulerMaruyama, &s)
            .unwrap();
        let ta = a.last();
        let tb = b.last();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(tb.particle(i), ta.particle(p), "slot {i} must hold particle {p}");
            assert_eq!(tb.ids()[i], ta.ids()[p]);
        }
    }

    #[test]
    fn overdamped_blowup_is_reported_with_step_index() {
        // The double-well override admits a drift that explodes under a huge
        // step size; the stepper must fail with a diagnostic rather than
        // return non-finite coordinates.
        let model = ModelSpec::new_with_unbounded_potential(
            ModelKind::InertialLangevin {
                dim: 1,
                gamma: 0.0,
                potential: PotentialSpec::DoubleWell {
                    quartic: 1.0,
                    quadratic: 0.0,
                },
            },
            1.0,
        )
        .unwrap();
        let s = stream(3, 0);
        let mut ens = Ensemble::new(vec![10.0, 0.0], 2, 1.0).unwrap();
        let mut saw_error = false;
        for step in 0..60 {
            match em_step(&model, &ens, 10.0, &s, step) {
                Ok(next) => ens = next,
                Err(Error::NonFinite { .. }) => {
                    saw_error = true;
                    break;
                }
                Err(other) => panic!("unexpected error {other}"),
            }
        }
        assert!(saw_error, "explosion must surface as a NonFinite error");
    }

    #[test]
    fn l_diffusion_time_zero_returns_copies() {
        let model = linear_ou(1.0, 3.0);
        let s = NoiseStream::new(5, StreamClass::Semigroup, 0);
        let out = sample_l_diffusion(&model, &[0.4, -0.2], 0.0, 5, 0.1, &s).unwrap();
        assert_eq!(out.len(), 10);
        for z in out.chunks_exact(2) {
            assert_eq!(z, &[0.4, -0.2]);
        }
    }

    /// Free kinetic velocity marginal is Brownian: v_t ~ N(v₀, 2t)
    /// regardless of dt (the Euler chain is exact in the absence of drift
    /// nonlinearity).  α of the model must be ignored: the bare diffusion
    /// runs at α = 1.
    #[test]
    fn l_diffusion_velocity_marginal_is_brownian() {
        let model = ModelSpec::new(
            ModelKind::InertialLangevin {
                dim: 1,
                gamma: 0.0,
                potential: PotentialSpec::Zero,
            },
            4.0,
        )
        .unwrap();
        let t = 0.7;
        let n = 40_000;
        let s = NoiseStream::new(42, StreamClass::Semigroup, 0);
        let out = sample_l_diffusion(&model, &[0.0, 1.0], t, n, 0.07, &s).unwrap();
        let mean_v: f64 = out.chunks_exact(2).map(|z| z[1]).sum::<f64>() / n as f64;
        let var_v: f64 = out
            .chunks_exact(2)
            .map(|z| (z[1] - mean_v).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        let se_mean = (2.0 * t / n as f64).sqrt();
        let se_var = std::f64::consts::SQRT_2 * 2.0 * t / (n as f64).sqrt();
        assert!((mean_v - 1.0).abs() < 3.0 * se_mean, "mean {mean_v}");
        assert!((var_v - 2.0 * t).abs() < 4.0 * se_var, "var {var_v}");
    }

    /// Full linear-model law against the exact Euler chain, including a
    /// remainder step that does not divide t evenly.
    #[test]
    fn l_diffusion_matches_exact_chain_with_remainder_step() {
        let model = linear_ou(0.5, 2.5);
        let (t, dt) = (0.55, 0.1);
        let n = 30_000;
        let s = NoiseStream::new(43, StreamClass::Semigroup, 1);
        let out = sample_l_diffusion(&model, &[1.0, 0.0], t, n, dt, &s).unwrap();
        // α = 1 bare dynamics: five full steps then a 0.05 remainder.
        let steps = [0.1, 0.1, 0.1, 0.1, 0.1, 0.05];
        let chain =
            kinetic_euler_moments(0.5, 1.0, 1.0, &steps, &GaussianMoments::point(1.0, 0.0));
        let (mx, mv, cxx, cxv, cvv) = sample_moments(&out);
        let nf = n as f64;
        assert!((mx - chain.mean[0]).abs() < 4.0 * (chain.cov[(0, 0)] / nf).sqrt());
        assert!((mv - chain.mean[1]).abs() < 4.0 * (chain.cov[(1, 1)] / nf).sqrt());
        assert!(
            (cxx - chain.cov[(0, 0)]).abs()
                < 4.0 * std::f64::consts::SQRT_2 * chain.cov[(0, 0)] / nf.sqrt()
        );
        assert!(
            (cvv - chain.cov[(1, 1)]).abs()
                < 4.0 * std::f64::consts::SQRT_2 * chain.cov[(1, 1)] / nf.sqrt()
        );
        assert!(
            (cxv - chain.cov[(0, 1)]).abs()
                < 4.0
                    * ((chain.cov[(0, 0)] * chain.cov[(1, 1)] + chain.cov[(0, 1)].powi(2)) / nf)
                        .sqrt()
        );
    }

    #[test]
    fn ensemble_validates_and_permutes() {
        assert!(Ensemble::new(vec![0.0; 3], 2, 1.0).is_err(), "ragged data");
        assert!(Ensemble::new(vec![0.0; 4], 2, 0.0).is_err(), "bad alpha");
        assert!(Ensemble::new(vec![f64::NAN, 0.0], 2, 1.0).is_err());
        let ens = Ensemble::new(vec![1.0, 2.0, 3.0, 4.0], 2, 1.0).unwrap();
        assert!(ens.permute(&[0, 0]).is_err());
        assert!(ens.permute(&[1]).is_err());
        let p = ens.permute(&[1, 0]).unwrap();
        assert_eq!(p.data(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(p.ids(), &[1, 0]);
    }
}
