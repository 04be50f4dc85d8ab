//! Empirical-measure algebra.
//!
//! The simulated state of the measure-valued dynamics is the atomic measure
//! μ = (1/α) Σ_i δ_{z_i}.  This module provides the dual pairing ⟨μ, φ⟩,
//! masses of probe sets, moments, and the a-priori second-moment growth bound
//! E⟨μ_t, e₂⟩ ≤ (⟨μ₀, 1+e₂⟩ + ct)·e^{ct} with an explicit constant c derived
//! from the model's coefficient bounds (see `gronwall_bound`).

use crate::models::{ModelSpec, TestFunction};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Read-only view of an atomic measure with uniform atom weight 1/α.
///
/// Atoms are stored row-major: atom `i` occupies `data[i*k .. (i+1)*k]`.
#[derive(Clone, Copy, Debug)]
pub struct EmpiricalMeasure<'a> {
    data: &'a [f64],
    dim: usize,
    alpha: f64,
}

impl<'a> EmpiricalMeasure<'a> {
    /// Wraps a flat coordinate buffer as an atomic measure.
    pub fn new(data: &'a [f64], dim: usize, alpha: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("measure dimension must be positive"));
        }
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        if data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "coordinate buffer length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { data, dim, alpha })
    }

    /// Number of atoms n.
    pub fn n_atoms(&self) -> usize {
        self.data.len() / self.dim
    }

    /// State dimension k of each atom.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mass scale α (each atom carries weight 1/α).
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Coordinates of atom `i`.
    pub fn atom(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Iterates over atom coordinate slices.
    pub fn atoms(&self) -> impl Iterator<Item = &'a [f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Dual pairing ⟨μ, f⟩ = (1/α) Σ_i f(z_i) for an arbitrary integrand.
    pub fn pair_with<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.atoms().map(f).sum::<f64>() / self.alpha
    }

    /// Dual pairing ⟨μ, φ⟩ with a catalogued test function.
    pub fn pair(&self, phi: &TestFunction) -> f64 {
        self.pair_with(|z| phi.value(z))
    }

    /// Total mass ⟨μ, 1⟩ = n/α.
    pub fn mass(&self) -> f64 {
        self.n_atoms() as f64 / self.alpha
    }

    /// Mass of a probe set, (1/α)·#{i : z_i ∈ A}.  α times this value is an
    /// atom count, hence an exact nonnegative integer.
    pub fn set_mass(&self, set: &ProbeSet) -> f64 {
        let count = self.atoms().filter(|z| set.contains(z)).count();
        count as f64 / self.alpha
    }

    /// Second moment ⟨μ, e₂⟩ with e₂(z) = |z|².
    pub fn second_moment(&self) -> f64 {
        self.pair_with(|z| z.iter().map(|x| x * x).sum())
    }
}

/// Borel probe sets for set-mass and exhaustion checks: balls and axis boxes.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeSet {
    /// Closed ball {z : |z − center| ≤ radius}.
    Ball { center: Vec<f64>, radius: f64 },
    /// Closed axis-aligned box {z : lower ≤ z ≤ upper componentwise}.
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl ProbeSet {
    /// Membership test.  Panics if the point dimension does not match.
    pub fn contains(&self, z: &[f64]) -> bool {
        match self {
            ProbeSet::Ball { center, radius } => {
                assert_eq!(z.len(), center.len(), "probe-set dimension mismatch");
                let d2: f64 = z
                    .iter()
                    .zip(center.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2 <= radius * radius
            }
            ProbeSet::Box { lower, upper } => {
                assert_eq!(z.len(), lower.len(), "probe-set dimension mismatch");
                assert_eq!(z.len(), upper.len(), "probe-set dimension mismatch");
                z.iter()
                    .zip(lower.iter().zip(upper.iter()))
                    .all(|(x, (lo, hi))| *lo <= *x && *x <= *hi)
            }
        }
    }
}

/// A-priori second-moment bound (⟨μ₀, 1+e₂⟩ + ct)·e^{ct}.
///
/// The constant comes from the coefficient bounds: with |b(z)| ≤ K√(1+|z|²),
/// tr(σσᵀ) ≤ K², and |F| ≤ K_F, the generator applied to e₂ satisfies
///   αL e₂ + F·∇e₂ = 2α b·z + α tr(σσᵀ) + 2 F·z ≤ (2αK + αK² + K_F)(1 + e₂),
/// using 2|z| ≤ 1+|z|² and √(1+|z|²)·|z| ≤ 1+|z|².  Grönwall's inequality on
/// ⟨μ_t, 1+e₂⟩ then gives the returned bound (a slight loosening keeps the
/// +ct term for readability).  Full derivation in `docs/numerics.md`.
pub fn gronwall_bound(model: &ModelSpec, mu0: &EmpiricalMeasure, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("time must be nonnegative, got {t}")));
    }
    let k = model.growth_constant()?;
    let kf = model.interaction_bound(mu0.mass());
    let alpha = model.alpha();
    let c = 2.0 * alpha * k + alpha * k * k + kf;
    let m0 = mu0.mass() + mu0.second_moment();
    Ok((m0 + c * t) * (c * t).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelKind, PotentialSpec, TestFunction};
    use crate::rng::{NoiseStream, StreamClass};

    fn bump(center: Vec<f64>, width: f64, amplitude: f64) -> TestFunction {
        TestFunction::GaussianBump {
            center,
            width,
            amplitude,
        }
    }

    #[test]
    fn pairing_of_single_atom_evaluates_the_function() {
        let z = [0.3, -0.7];
        let mu = EmpiricalMeasure::new(&z, 2, 1.0).unwrap();
        let phi = bump(vec![0.0, 0.0], 1.0, 2.0);
        assert_eq!(mu.pair(&phi), phi.value(&z));
    }

    #[test]
    fn pairing_with_alpha_two_halves_the_sum() {
        let data = [1.0, 0.0, 0.0, 2.0];
        let mu = EmpiricalMeasure::new(&data, 2, 2.0).unwrap();
        let phi = bump(vec![0.0, 0.0], 1.5, 1.0);
        let expected = (phi.value(&[1.0, 0.0]) + phi.value(&[0.0, 2.0])) / 2.0;
        assert!((mu.pair(&phi) - expected).abs() < 1e-15);
    }

    /// Monte Carlo pairing against the closed-form Gaussian integral
    /// E a·exp(−|Z−z₀|²/(2s²)) for Z ~ N(0, I_k):
    /// a·(s²/(1+s²))^{k/2}·exp(−|z₀|²/(2(1+s²))).
    #[test]
    fn pairing_matches_gaussian_integral_oracle() {
        let n = 10_000usize;
        let k = 2usize;
        let stream = NoiseStream::new(0xB0B, StreamClass::Synthetic, 0);
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            stream.fill_normals(0, i as u64, &mut data[i * k..(i + 1) * k]);
        }
        let mu = EmpiricalMeasure::new(&data, k, 1.0).unwrap();
        let (s, a, z0) = (0.8, 1.3, [0.5, -0.25]);
        let phi = bump(z0.to_vec(), s, a);
        let s2 = s * s;
        let exact = a * (s2 / (1.0 + s2)) * (-(z0[0] * z0[0] + z0[1] * z0[1]) / (2.0 * (1.0 + s2))).exp();
        // Pairing is mean of n atoms here (alpha=1, mass n): compare per-atom averages.
        let mc = mu.pair(&phi) / mu.mass();
        let rel = (mc - exact).abs() / exact;
        assert!(rel < 3.0 / (n as f64).sqrt(), "relative error {rel} too large");
    }

    #[test]
    fn empty_measure_has_zero_mass_and_moments() {
        let mu = EmpiricalMeasure::new(&[], 3, 2.0).unwrap();
        assert_eq!(mu.mass(), 0.0);
        assert_eq!(mu.second_moment(), 0.0);
        let ball = ProbeSet::Ball {
            center: vec![0.0, 0.0, 0.0],
            radius: 1.0,
        };
        assert_eq!(mu.set_mass(&ball), 0.0);
    }

    #[test]
    fn second_moment_of_two_atoms() {
        let data = [0.0, 0.0, 3.0, 4.0];
        let mu = EmpiricalMeasure::new(&data, 2, 1.0).unwrap();
        assert_eq!(mu.second_moment(), 25.0);
    }

    #[test]
    fn set_mass_counts_atoms_with_weight() {
        let data = [0.0, 0.0];
        let mu = EmpiricalMeasure::new(&data, 2, 2.0).unwrap();
        let ball = ProbeSet::Ball {
            center: vec![0.0, 0.0],
            radius: 1.0,
        };
        assert_eq!(mu.set_mass(&ball), 0.5);
    }

    #[test]
    fn box_membership_is_componentwise() {
        let b = ProbeSet::Box {
            lower: vec![-1.0, 0.0],
            upper: vec![1.0, 2.0],
        };
        assert!(b.contains(&[0.0, 1.0]));
        assert!(b.contains(&[1.0, 2.0]), "boundary is included");
        assert!(!b.contains(&[0.0, 2.5]));
        assert!(!b.contains(&[-1.5, 1.0]));
    }

    #[test]
    fn alpha_times_set_mass_is_integral_on_random_clouds() {
        let k = 3usize;
        let stream = NoiseStream::new(0xA70, StreamClass::Synthetic, 2);
        for trial in 0..20u64 {
            let n = 17;
            let mut data = vec![0.0; n * k];
            for i in 0..n {
                stream.fill_normals(trial, i as u64, &mut data[i * k..(i + 1) * k]);
            }
            let alpha = 1.0 + trial as f64 % 3.0;
            let mu = EmpiricalMeasure::new(&data, k, alpha).unwrap();
            let ball = ProbeSet::Ball {
                center: vec![0.0; k],
                radius: 1.2,
            };
            let scaled = alpha * mu.set_mass(&ball);
            assert_eq!(scaled, scaled.round(), "α·μ(A) must be an atom count");
            assert!((0.0..=n as f64).contains(&scaled));
        }
    }

    #[test]
    fn pairing_with_one_recovers_mass() {
        let data = [0.5, 1.5, -2.0, 0.25, 3.0, -1.0];
        let mu = EmpiricalMeasure::new(&data, 2, 3.0).unwrap();
        assert_eq!(mu.pair_with(|_| 1.0), mu.mass());
    }

    fn langevin_model() -> ModelSpec {
        ModelSpec::new(
            ModelKind::InertialLangevin {
                dim: 1,
                gamma: 1.0,
                potential: PotentialSpec::Quadratic { stiffness: 1.0 },
            },
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn gronwall_bound_at_time_zero_is_initial_pairing() {
        let model = langevin_model();
        let data = [1.0, 1.0];
        let mu = EmpiricalMeasure::new(&data, 2, 1.0).unwrap();
        let b = gronwall_bound(&model, &mu, 0.0).unwrap();
        assert!((b - 3.0).abs() < 1e-14, "⟨μ₀, 1+e₂⟩ = 3, got {b}");
    }

    #[test]
    fn gronwall_bound_is_nondecreasing_in_time() {
        let model = langevin_model();
        let data = [1.0, 1.0];
        let mu = EmpiricalMeasure::new(&data, 2, 1.0).unwrap();
        let mut prev = gronwall_bound(&model, &mu, 0.0).unwrap();
        for i in 1..=20 {
            let b = gronwall_bound(&model, &mu, 0.1 * i as f64).unwrap();
            assert!(b >= prev);
            prev = b;
        }
    }

    /// Frozen evaluation of the documented constant formula:
    /// K = max(√λ_max([[κ², γκ],[γκ, 1+γ²]]), ‖σ‖_F) = (1+√5)/2 for γ=κ=1
    /// (the golden ratio beats √2), c = 2K + K² = 1+3φ ≈ 5.854102, and
    /// bound(1) = (3 + c)·e^c.
    #[test]
    fn gronwall_bound_matches_frozen_constant_evaluation() {
        let model = langevin_model();
        let data = [1.0, 1.0];
        let mu = EmpiricalMeasure::new(&data, 2, 1.0).unwrap();
        let b = gronwall_bound(&model, &mu, 1.0).unwrap();
        let expected = 3087.085796319123;
        assert!(
            (b - expected).abs() / expected < 1e-12,
            "bound {b} vs frozen {expected}"
        );
    }

    #[test]
    fn gronwall_rejects_unbounded_double_well() {
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
        let data = [1.0, 1.0];
        let mu = EmpiricalMeasure::new(&data, 2, 1.0).unwrap();
        assert!(gronwall_bound(&model, &mu, 1.0).is_err());
    }

    #[test]
    fn measure_construction_validates_inputs() {
        assert!(EmpiricalMeasure::new(&[1.0, 2.0, 3.0], 2, 1.0).is_err());
        assert!(EmpiricalMeasure::new(&[1.0, 2.0], 2, 0.0).is_err());
        assert!(EmpiricalMeasure::new(&[1.0, 2.0], 0, 1.0).is_err());
    }
}
