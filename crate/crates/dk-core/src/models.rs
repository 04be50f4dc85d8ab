//! Catalogue of diffusion models with analytic derivatives.
//!
//! Conventions used throughout the crate:
//!   - generator          L = b·∇ + ½ σσᵀ:∇²
//!   - carré du champ     Γ(φ) = ½ |σᵀ∇φ|²
//!   - particle dynamics  dz = [α b(z) + F_μ(z)] dt + √α σ(z) dW
//!   - measure pairing    ⟨μ, φ⟩ = (1/α) Σ_i φ(z_i)
//!
//! All catalogued diffusions are hypoelliptic: noise acts on a strict subset
//! of the coordinates (velocities or the heading angle).  Interacting models
//! carry a pair functional G(μ) whose flat derivatives δG/δμ and δ²G/δμ² are
//! implemented in closed form; the identity σσᵀ∇(δG/δμ) = F_μ ties the
//! interaction force to the functional and is enforced by tests.

use crate::measure::EmpiricalMeasure;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Upper bound on the state dimension of catalogued models; lets hot paths
/// use stack buffers.
pub const MAX_STATE_DIM: usize = 8;

/// Confining potential U acting on the position block of kinetic models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    /// U ≡ 0.
    Zero,
    /// U(x) = (stiffness/2)·|x|².
    Quadratic { stiffness: f64 },
    /// U(x) = (quartic/4)·|x|⁴ − (quadratic/2)·|x|².  Bounded below but with
    /// unbounded Hessian; allowed only through an explicit override.
    DoubleWell { quartic: f64, quadratic: f64 },
}

impl PotentialSpec {
    fn validate(&self) -> Result<()> {
        match self {
            PotentialSpec::Zero => Ok(()),
            PotentialSpec::Quadratic { stiffness } => {
                if stiffness.is_finite() && *stiffness >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "quadratic stiffness must be finite and nonnegative, got {stiffness}"
                    )))
                }
            }
            PotentialSpec::DoubleWell { quartic, quadratic } => {
                if quartic.is_finite() && *quartic > 0.0 && quadratic.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "double-well needs finite quartic > 0 (got {quartic}) and finite quadratic (got {quadratic})"
                    )))
                }
            }
        }
    }

    /// True when ∇²U is uniformly bounded (the standing hypothesis on U).
    pub fn has_bounded_hessian(&self) -> bool {
        !matches!(self, PotentialSpec::DoubleWell { .. })
    }

    /// U(x).
    pub fn value(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|a| a * a).sum();
        match self {
            PotentialSpec::Zero => 0.0,
            PotentialSpec::Quadratic { stiffness } => 0.5 * stiffness * r2,
            PotentialSpec::DoubleWell { quartic, quadratic } => {
                0.25 * quartic * r2 * r2 - 0.5 * quadratic * r2
            }
        }
    }

    /// ∇U(x), written into `out`.
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), out.len());
        match self {
            PotentialSpec::Zero => out.fill(0.0),
            PotentialSpec::Quadratic { stiffness } => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = stiffness * xi;
                }
            }
            PotentialSpec::DoubleWell { quartic, quadratic } => {
                let r2: f64 = x.iter().map(|a| a * a).sum();
                let scale = quartic * r2 - quadratic;
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = scale * xi;
                }
            }
        }
    }

    /// ∇²U(x), written into `out` as a row-major d×d matrix.
    pub fn hessian_into(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        debug_assert_eq!(out.len(), d * d);
        out.fill(0.0);
        match self {
            PotentialSpec::Zero => {}
            PotentialSpec::Quadratic { stiffness } => {
                for i in 0..d {
                    out[i * d + i] = *stiffness;
                }
            }
            PotentialSpec::DoubleWell { quartic, quadratic } => {
                let r2: f64 = x.iter().map(|a| a * a).sum();
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] = 2.0 * quartic * x[i] * x[j];
                    }
                    out[i * d + i] += quartic * r2 - quadratic;
                }
            }
        }
    }
}

/// Bounded C² test functions (the observables φ of the martingale statistic).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    /// φ(z) = amplitude·exp(−|z−center|²/(2·width²)).
    GaussianBump {
        center: Vec<f64>,
        width: f64,
        amplitude: f64,
    },
    /// φ(z) = amplitude·cos(wavevector·z + phase).
    Cosine {
        wavevector: Vec<f64>,
        #[serde(default)]
        phase: f64,
        amplitude: f64,
    },
    /// Pointwise product of two test functions on the same space.
    Product {
        left: Box<TestFunction>,
        right: Box<TestFunction>,
    },
}

impl TestFunction {
    /// Expected argument dimension.
    pub fn dim(&self) -> usize {
        match self {
            TestFunction::GaussianBump { center, .. } => center.len(),
            TestFunction::Cosine { wavevector, .. } => wavevector.len(),
            TestFunction::Product { left, .. } => left.dim(),
        }
    }

    /// Validates parameters and dimension against a state dimension `k`.
    pub fn validate(&self, k: usize) -> Result<()> {
        match self {
            TestFunction::GaussianBump {
                center,
                width,
                amplitude,
            } => {
                if center.len() != k {
                    return Err(Error::invalid(format!(
                        "bump center has dimension {}, expected {k}",
                        center.len()
                    )));
                }
                if !(width.is_finite() && *width > 0.0) {
                    return Err(Error::invalid(format!("bump width must be positive, got {width}")));
                }
                if !amplitude.is_finite() || !center.iter().all(|c| c.is_finite()) {
                    return Err(Error::invalid("bump parameters must be finite"));
                }
                Ok(())
            }
            TestFunction::Cosine {
                wavevector,
                phase,
                amplitude,
            } => {
                if wavevector.len() != k {
                    return Err(Error::invalid(format!(
                        "cosine wavevector has dimension {}, expected {k}",
                        wavevector.len()
                    )));
                }
                if !amplitude.is_finite()
                    || !phase.is_finite()
                    || !wavevector.iter().all(|c| c.is_finite())
                {
                    return Err(Error::invalid("cosine parameters must be finite"));
                }
                Ok(())
            }
            TestFunction::Product { left, right } => {
                left.validate(k)?;
                right.validate(k)
            }
        }
    }

    /// φ(z).
    pub fn value(&self, z: &[f64]) -> f64 {
        match self {
            TestFunction::GaussianBump {
                center,
                width,
                amplitude,
            } => {
                let q: f64 = z
                    .iter()
                    .zip(center)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum();
                amplitude * (-q / (2.0 * width * width)).exp()
            }
            TestFunction::Cosine {
                wavevector,
                phase,
                amplitude,
            } => {
                let arg: f64 = z.iter().zip(wavevector).map(|(a, k)| a * k).sum::<f64>() + phase;
                amplitude * arg.cos()
            }
            TestFunction::Product { left, right } => left.value(z) * right.value(z),
        }
    }

    /// ∇φ(z), written into `out`.
    pub fn gradient_into(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), out.len());
        match self {
            TestFunction::GaussianBump { center, width, .. } => {
                let v = self.value(z);
                let inv_w2 = 1.0 / (width * width);
                for ((o, a), c) in out.iter_mut().zip(z).zip(center) {
                    *o = -v * (a - c) * inv_w2;
                }
            }
            TestFunction::Cosine {
                wavevector,
                phase,
                amplitude,
            } => {
                let arg: f64 = z.iter().zip(wavevector).map(|(a, k)| a * k).sum::<f64>() + phase;
                let s = -amplitude * arg.sin();
                for (o, k) in out.iter_mut().zip(wavevector) {
                    *o = s * k;
                }
            }
            TestFunction::Product { left, right } => {
                let lv = left.value(z);
                let rv = right.value(z);
                let mut tmp = [0.0; MAX_STATE_DIM];
                let tmp = &mut tmp[..z.len()];
                left.gradient_into(z, out);
                right.gradient_into(z, tmp);
                for (o, t) in out.iter_mut().zip(tmp.iter()) {
                    *o = *o * rv + lv * *t;
                }
            }
        }
    }

    /// Single first partial ∂φ/∂z_i.
    pub fn partial(&self, z: &[f64], i: usize) -> f64 {
        match self {
            TestFunction::GaussianBump { center, width, .. } => {
                -self.value(z) * (z[i] - center[i]) / (width * width)
            }
            TestFunction::Cosine {
                wavevector,
                phase,
                amplitude,
            } => {
                let arg: f64 = z.iter().zip(wavevector).map(|(a, k)| a * k).sum::<f64>() + phase;
                -amplitude * arg.sin() * wavevector[i]
            }
            TestFunction::Product { left, right } => {
                left.partial(z, i) * right.value(z) + left.value(z) * right.partial(z, i)
            }
        }
    }

    /// Single second partial ∂²φ/∂z_i∂z_j.
    pub fn second_partial(&self, z: &[f64], i: usize, j: usize) -> f64 {
        match self {
            TestFunction::GaussianBump { center, width, .. } => {
                let inv_w2 = 1.0 / (width * width);
                let di = (z[i] - center[i]) * inv_w2;
                let dj = (z[j] - center[j]) * inv_w2;
                let delta = if i == j { inv_w2 } else { 0.0 };
                self.value(z) * (di * dj - delta)
            }
            TestFunction::Cosine {
                wavevector,
                phase,
                amplitude,
            } => {
                let arg: f64 = z.iter().zip(wavevector).map(|(a, k)| a * k).sum::<f64>() + phase;
                -amplitude * arg.cos() * wavevector[i] * wavevector[j]
            }
            TestFunction::Product { left, right } => {
                left.second_partial(z, i, j) * right.value(z)
                    + left.partial(z, i) * right.partial(z, j)
                    + left.partial(z, j) * right.partial(z, i)
                    + left.value(z) * right.second_partial(z, i, j)
            }
        }
    }

    /// ∇²φ(z), written into `out` as a row-major k×k matrix.
    pub fn hessian_into(&self, z: &[f64], out: &mut [f64]) {
        let k = z.len();
        debug_assert_eq!(out.len(), k * k);
        for i in 0..k {
            for j in 0..=i {
                let h = self.second_partial(z, i, j);
                out[i * k + j] = h;
                out[j * k + i] = h;
            }
        }
    }
}

/// Model family and parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    /// Kinetic Langevin particles: z = (x, v) ∈ ℝ^{2d},
    /// b = (v, −γv − ∇U(x)), σ = √2·(0; I_d).
    InertialLangevin {
        dim: usize,
        gamma: f64,
        potential: PotentialSpec,
    },
    /// Planar self-propelled particle: z = (x₁, x₂, θ),
    /// b = (speed·cos θ, speed·sin θ, 0), σ = (0, 0, 1)ᵀ.
    ActiveMatter { speed: f64 },
    /// Kinetic Langevin particles with a smooth pair force acting on the
    /// velocity block: kernel f(u) = coupling·u·exp(−|u|²/(2·width²)),
    /// F_μ(x) = (1/α) Σ_j f(x − x_j).
    InteractingVfp {
        dim: usize,
        gamma: f64,
        potential: PotentialSpec,
        coupling: f64,
        width: f64,
    },
    /// Active matter with angular pair alignment: H(t) = −align·cos t,
    /// F_μ(x, θ) = (1/α) Σ_j χ_R(|x−x_j|)·H′(θ−θ_j), where χ_R is the C¹
    /// smoothstep cutoff equal to 1 on [0, radius] and 0 beyond
    /// radius+margin.
    Flocking {
        speed: f64,
        align: f64,
        radius: f64,
        margin: f64,
    },
    /// Two-dimensional linear test model: b = (v, −γv − x), σ = (0, √2)ᵀ.
    /// Gaussian law known in closed form; used by oracles.
    LinearOu { gamma: f64 },
}

/// Flat first derivative δG/δμ evaluated at (μ, z): value, z-gradient, and
/// z-Hessian.
#[derive(Clone, Debug)]
pub struct Variation {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Row-major k×k matrix ∇²_z (δG/δμ)(μ, z).
    pub hessian: Vec<f64>,
}

/// Flat second derivative δ²G/δμ² evaluated at (z₁, z₂): value and mixed
/// derivative block.
#[derive(Clone, Debug)]
pub struct SecondVariation {
    pub value: f64,
    /// Row-major k×k matrix with entry (a, b) = ∂²(δ²G/δμ²)/∂z₁_a ∂z₂_b.
    pub mixed: Vec<f64>,
}

/// A validated model: family, mass scale α, and cached structure.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    kind: ModelKind,
    alpha: f64,
    state_dim: usize,
    noise_dim: usize,
    /// σ has exactly one nonzero per column for every catalogued model:
    /// column c carries `sigma_cols[c].1` at row `sigma_cols[c].0`.
    sigma_cols: Vec<(usize, f64)>,
    unbounded_override: bool,
}

impl ModelSpec {
    /// Builds and validates a model.  Rejects the double-well potential;
    /// use [`ModelSpec::new_with_unbounded_potential`] to explore it.
    pub fn new(kind: ModelKind, alpha: f64) -> Result<Self> {
        Self::build(kind, alpha, false)
    }

    /// Builds a model allowing potentials with unbounded Hessian.  Such
    /// models fall outside the standing hypotheses: the a-priori moment
    /// bound refuses them and they are excluded from verification suites.
    pub fn new_with_unbounded_potential(kind: ModelKind, alpha: f64) -> Result<Self> {
        Self::build(kind, alpha, true)
    }

    fn build(kind: ModelKind, alpha: f64, unbounded_override: bool) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        let check_kinetic =
            |dim: usize, gamma: f64, potential: &PotentialSpec| -> Result<()> {
                if dim == 0 || 2 * dim > MAX_STATE_DIM {
                    return Err(Error::invalid(format!(
                        "kinetic dimension must be in 1..={}, got {dim}",
                        MAX_STATE_DIM / 2
                    )));
                }
                if !(gamma.is_finite() && gamma >= 0.0) {
                    return Err(Error::invalid(format!(
                        "friction must be finite and nonnegative, got {gamma}"
                    )));
                }
                potential.validate()?;
                if !potential.has_bounded_hessian() && !unbounded_override {
                    return Err(Error::invalid(
                        "double-well potential has unbounded Hessian; construct with \
                         new_with_unbounded_potential to use it outside verification",
                    ));
                }
                Ok(())
            };
        let (state_dim, noise_dim, sigma_cols) = match &kind {
            ModelKind::InertialLangevin {
                dim,
                gamma,
                potential,
            } => {
                check_kinetic(*dim, *gamma, potential)?;
                let cols = (0..*dim).map(|c| (dim + c, std::f64::consts::SQRT_2)).collect();
                (2 * dim, *dim, cols)
            }
            ModelKind::ActiveMatter { speed } => {
                if !(speed.is_finite() && *speed > 0.0) {
                    return Err(Error::invalid(format!("speed must be positive, got {speed}")));
                }
                (3, 1, vec![(2, 1.0)])
            }
            ModelKind::InteractingVfp {
                dim,
                gamma,
                potential,
                coupling,
                width,
            } => {
                check_kinetic(*dim, *gamma, potential)?;
                if !coupling.is_finite() {
                    return Err(Error::invalid("coupling must be finite"));
                }
                if !(width.is_finite() && *width > 0.0) {
                    return Err(Error::invalid(format!(
                        "interaction width must be positive, got {width}"
                    )));
                }
                let cols = (0..*dim).map(|c| (dim + c, std::f64::consts::SQRT_2)).collect();
                (2 * dim, *dim, cols)
            }
            ModelKind::Flocking {
                speed,
                align,
                radius,
                margin,
            } => {
                if !(speed.is_finite() && *speed > 0.0) {
                    return Err(Error::invalid(format!("speed must be positive, got {speed}")));
                }
                if !align.is_finite() {
                    return Err(Error::invalid("alignment strength must be finite"));
                }
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(Error::invalid(format!("cutoff radius must be positive, got {radius}")));
                }
                if !(margin.is_finite() && *margin > 0.0) {
                    return Err(Error::invalid(format!(
                        "cutoff margin must be positive, got {margin}"
                    )));
                }
                (3, 1, vec![(2, 1.0)])
            }
            ModelKind::LinearOu { gamma } => {
                if !(gamma.is_finite() && *gamma >= 0.0) {
                    return Err(Error::invalid(format!(
                        "friction must be finite and nonnegative, got {gamma}"
                    )));
                }
                (2, 1, vec![(1, std::f64::consts::SQRT_2)])
            }
        };
        Ok(Self {
            kind,
            alpha,
            state_dim,
            noise_dim,
            sigma_cols,
            unbounded_override,
        })
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// State dimension k.
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Noise dimension l.
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// True for position-velocity models (candidates for the splitting
    /// integrator).
    pub fn is_kinetic(&self) -> bool {
        matches!(
            self.kind,
            ModelKind::InertialLangevin { .. } | ModelKind::InteractingVfp { .. } | ModelKind::LinearOu { .. }
        )
    }

    /// True when the model carries an interaction force and functional.
    pub fn is_interacting(&self) -> bool {
        matches!(
            self.kind,
            ModelKind::InteractingVfp { .. } | ModelKind::Flocking { .. }
        )
    }

    /// Position dimension, friction, and potential for kinetic models
    /// (position-velocity split); `None` otherwise.  The linear test model
    /// is kinetic with a unit-stiffness quadratic potential.
    pub fn kinetic_params(&self) -> Option<(usize, f64, &PotentialSpec)> {
        const UNIT_QUADRATIC: PotentialSpec = PotentialSpec::Quadratic { stiffness: 1.0 };
        match &self.kind {
            ModelKind::InertialLangevin {
                dim,
                gamma,
                potential,
            }
            | ModelKind::InteractingVfp {
                dim,
                gamma,
                potential,
                ..
            } => Some((*dim, *gamma, potential)),
            ModelKind::LinearOu { gamma } => Some((1, *gamma, &UNIT_QUADRATIC)),
            _ => None,
        }
    }

    /// True when construction used the unbounded-potential override.
    pub fn has_unbounded_potential(&self) -> bool {
        self.unbounded_override
            && matches!(
                self.kind,
                ModelKind::InertialLangevin {
                    potential: PotentialSpec::DoubleWell { .. },
                    ..
                } | ModelKind::InteractingVfp {
                    potential: PotentialSpec::DoubleWell { .. },
                    ..
                }
            )
    }

    fn ensure_state(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.state_dim {
            return Err(Error::invalid(format!(
                "state has dimension {}, model expects {}",
                z.len(),
                self.state_dim
            )));
        }
        if !z.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid(format!("non-finite state {z:?}")));
        }
        Ok(())
    }

    fn ensure_measure(&self, mu: &EmpiricalMeasure) -> Result<()> {
        if mu.dim() != self.state_dim {
            return Err(Error::invalid(format!(
                "measure atoms have dimension {}, model expects {}",
                mu.dim(),
                self.state_dim
            )));
        }
        Ok(())
    }

    /// Drift b(z), written into `out` (length k).  The α and interaction
    /// scalings are applied by the integrator, not here.
    pub fn drift(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        self.ensure_state(z)?;
        debug_assert_eq!(out.len(), self.state_dim);
        match &self.kind {
            ModelKind::InertialLangevin {
                dim,
                gamma,
                potential,
            }
            | ModelKind::InteractingVfp {
                dim,
                gamma,
                potential,
                ..
            } => {
                let (x, v) = z.split_at(*dim);
                let (ox, ov) = out.split_at_mut(*dim);
                ox.copy_from_slice(v);
                potential.gradient_into(x, ov);
                for (o, vi) in ov.iter_mut().zip(v) {
                    *o = -gamma * vi - *o;
                }
            }
            ModelKind::ActiveMatter { speed } | ModelKind::Flocking { speed, .. } => {
                let theta = z[2];
                out[0] = speed * theta.cos();
                out[1] = speed * theta.sin();
                out[2] = 0.0;
            }
            ModelKind::LinearOu { gamma } => {
                out[0] = z[1];
                out[1] = -gamma * z[1] - z[0];
            }
        }
        Ok(())
    }

    /// Diffusion matrix σ(z) as a row-major k×l matrix.  Constant in z for
    /// every catalogued model; z is validated for the contract's sake.
    pub fn diffusion(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.ensure_state(z)?;
        let mut m = vec![0.0; self.state_dim * self.noise_dim];
        for (c, &(row, val)) in self.sigma_cols.iter().enumerate() {
            m[row * self.noise_dim + c] = val;
        }
        Ok(m)
    }

    /// In-place z += scale·σ·ξ, exploiting the one-entry-per-column
    /// structure of σ.
    #[inline]
    pub fn add_scaled_noise(&self, scale: f64, xi: &[f64], z: &mut [f64]) {
        debug_assert_eq!(xi.len(), self.noise_dim);
        for (c, &(row, val)) in self.sigma_cols.iter().enumerate() {
            z[row] += scale * val * xi[c];
        }
    }

    /// |σᵀ g|² for a gradient vector g.
    #[inline]
    pub fn sigma_t_sq(&self, grad: &[f64]) -> f64 {
        self.sigma_cols
            .iter()
            .map(|&(row, val)| {
                let t = val * grad[row];
                t * t
            })
            .sum()
    }

    /// Rows of the state on which noise acts, with the σ entry value.
    pub fn noise_rows(&self) -> &[(usize, f64)] {
        &self.sigma_cols
    }

    /// Generator Lφ(z) = b·∇φ + ½ σσᵀ:∇²φ.  For kinetic models this equals
    /// b·∇φ + Δ_v φ.
    pub fn apply_generator(&self, phi: &TestFunction, z: &[f64]) -> Result<f64> {
        self.ensure_state(z)?;
        let mut b = [0.0; MAX_STATE_DIM];
        let b = &mut b[..self.state_dim];
        self.drift(z, b)?;
        let mut grad = [0.0; MAX_STATE_DIM];
        let grad = &mut grad[..self.state_dim];
        phi.gradient_into(z, grad);
        let first: f64 = b.iter().zip(grad.iter()).map(|(a, g)| a * g).sum();
        let second: f64 = self
            .sigma_cols
            .iter()
            .map(|&(row, val)| 0.5 * val * val * phi.second_partial(z, row, row))
            .sum();
        Ok(first + second)
    }

    /// Carré du champ Γ(φ)(z) = ½ |σᵀ∇φ(z)|² ≥ 0.
    pub fn carre_du_champ(&self, phi: &TestFunction, z: &[f64]) -> Result<f64> {
        self.ensure_state(z)?;
        let mut grad = [0.0; MAX_STATE_DIM];
        let grad = &mut grad[..self.state_dim];
        phi.gradient_into(z, grad);
        Ok(0.5 * self.sigma_t_sq(grad))
    }

    /// Interaction force F_μ(z), written into `out`.  Identically zero for
    /// non-interacting models.  The measure's own α supplies the atom
    /// weights.
    pub fn interaction_force_into(
        &self,
        mu: &EmpiricalMeasure,
        z: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        self.ensure_state(z)?;
        self.ensure_measure(mu)?;
        debug_assert_eq!(out.len(), self.state_dim);
        out.fill(0.0);
        match &self.kind {
            ModelKind::InteractingVfp {
                dim,
                coupling,
                width,
                ..
            } => {
                let d = *dim;
                let inv_2w2 = 1.0 / (2.0 * width * width);
                let x0 = &z[..d];
                for atom in mu.atoms() {
                    let xj = &atom[..d];
                    let mut r2 = 0.0;
                    for a in 0..d {
                        let u = x0[a] - xj[a];
                        r2 += u * u;
                    }
                    let e = coupling * (-r2 * inv_2w2).exp();
                    for a in 0..d {
                        out[d + a] += e * (x0[a] - xj[a]);
                    }
                }
                let inv_alpha = 1.0 / mu.alpha();
                for o in out[d..].iter_mut() {
                    *o *= inv_alpha;
                }
            }
            ModelKind::Flocking {
                align,
                radius,
                margin,
                ..
            } => {
                let (x0, theta0) = (&z[..2], z[2]);
                let mut acc = 0.0;
                for atom in mu.atoms() {
                    let dx = x0[0] - atom[0];
                    let dy = x0[1] - atom[1];
                    let r = (dx * dx + dy * dy).sqrt();
                    let chi = smoothstep_cutoff(r, *radius, *margin);
                    if chi != 0.0 {
                        acc += chi * align * (theta0 - atom[2]).sin();
                    }
                }
                out[2] = acc / mu.alpha();
            }
            _ => {}
        }
        Ok(())
    }

    /// Interaction force F_μ(z) as a fresh vector.
    pub fn interaction_force(&self, mu: &EmpiricalMeasure, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.state_dim];
        self.interaction_force_into(mu, z, &mut out)?;
        Ok(out)
    }

    /// Interaction functional G(μ).
    ///
    /// Flocking: G(μ) = ½ ∬ χ_R(|x−x′|) H(θ−θ′) dμ dμ, a double sum over
    /// atoms with weight 1/α² including the diagonal (self) pairs — that is
    /// what the double integral literally evaluates to for atomic μ.
    ///
    /// Interacting VFP: G(μ) = ½ ⟨μ, v·F_μ⟩; the ½ makes the force identity
    /// σσᵀ∇(δG/δμ) = F_μ exact.
    pub fn interaction_functional(&self, mu: &EmpiricalMeasure) -> Result<f64> {
        self.ensure_measure(mu)?;
        let inv_a2 = 1.0 / (mu.alpha() * mu.alpha());
        match &self.kind {
            ModelKind::InteractingVfp {
                dim,
                coupling,
                width,
                ..
            } => {
                let d = *dim;
                let inv_2w2 = 1.0 / (2.0 * width * width);
                let mut acc = 0.0;
                for zi in mu.atoms() {
                    let (xi, vi) = zi.split_at(d);
                    for zj in mu.atoms() {
                        let xj = &zj[..d];
                        let mut r2 = 0.0;
                        let mut dot = 0.0;
                        for a in 0..d {
                            let u = xi[a] - xj[a];
                            r2 += u * u;
                            dot += vi[a] * u;
                        }
                        acc += dot * coupling * (-r2 * inv_2w2).exp();
                    }
                }
                Ok(0.5 * inv_a2 * acc)
            }
            ModelKind::Flocking {
                align,
                radius,
                margin,
                ..
            } => {
                let mut acc = 0.0;
                for zi in mu.atoms() {
                    for zj in mu.atoms() {
                        let dx = zi[0] - zj[0];
                        let dy = zi[1] - zj[1];
                        let r = (dx * dx + dy * dy).sqrt();
                        let chi = smoothstep_cutoff(r, *radius, *margin);
                        if chi != 0.0 {
                            acc += chi * (-align * (zi[2] - zj[2]).cos());
                        }
                    }
                }
                Ok(0.5 * inv_a2 * acc)
            }
            _ => Err(Error::invalid(
                "interaction functional is defined only for interacting models",
            )),
        }
    }

    /// Flat derivative δG/δμ at (μ, z) with z-gradient and z-Hessian.
    pub fn variation_g(&self, mu: &EmpiricalMeasure, z: &[f64]) -> Result<Variation> {
        self.ensure_state(z)?;
        self.ensure_measure(mu)?;
        let k = self.state_dim;
        let mut value = 0.0;
        let mut gradient = vec![0.0; k];
        let mut hessian = vec![0.0; k * k];
        let inv_alpha = 1.0 / mu.alpha();
        match &self.kind {
            ModelKind::InteractingVfp {
                dim,
                coupling,
                width,
                ..
            } => {
                // δG/δμ(x₀,v₀) = ½ [ v₀·F_μ(x₀) + (1/α) Σ_j v_j·f(x_j−x₀) ]
                // with f(u) = c·u·e^{−|u|²/(2w²)}.  Combining both sums:
                //   value    = (1/2α) Σ_j (v₀+v_j)·f(u_j),  u_j = x₀−x_j
                //             (f odd: v_j·f(x_j−x₀) = −v_j·f(u_j) ... handled below)
                //   ∇_v      = ½ F_μ(x₀)
                //   ∇_x      = (1/2α) Σ_j Df(u_j)·(v₀−v_j)   (Df symmetric, even)
                //   ∂²/∂x∂x  = (1/2α) Σ_j Σ_c (v₀−v_j)_c D²f_c(u_j)
                //   ∂²/∂x∂v  = (1/2α) Σ_j Df(u_j),   ∂²/∂v∂v = 0.
                let d = *dim;
                let w2 = width * width;
                let inv_2w2 = 1.0 / (2.0 * w2);
                let (x0, v0) = (&z[..d], &z[d..]);
                for zj in mu.atoms() {
                    let (xj, vj) = zj.split_at(d);
                    let mut u = [0.0; MAX_STATE_DIM];
                    let mut r2 = 0.0;
                    for a in 0..d {
                        u[a] = x0[a] - xj[a];
                        r2 += u[a] * u[a];
                    }
                    let e = coupling * (-r2 * inv_2w2).exp();
                    // value: ½(1/α)[v₀·f(u) − v_j·f(−u)... ] — directly:
                    // v₀·f(u_j) + v_j·f(x_j−x₀) = v₀·f(u) − v_j·f(u) = (v₀−v_j)·f(u).
                    let mut dot = 0.0;
                    for a in 0..d {
                        dot += (v0[a] - vj[a]) * u[a];
                    }
                    value += 0.5 * inv_alpha * e * dot;
                    for a in 0..d {
                        // ∇_v block.
                        gradient[d + a] += 0.5 * inv_alpha * e * u[a];
                        // ∇_x block: (Df (v₀−v_j))_a.
                        let mut s = 0.0;
                        for b in 0..d {
                            let df = e * (if a == b { 1.0 } else { 0.0 } - u[a] * u[b] / w2);
                            s += df * (v0[b] - vj[b]);
                            // x-v Hessian block, symmetric halves.
                            hessian[a * k + (d + b)] += 0.5 * inv_alpha * df;
                            hessian[(d + b) * k + a] += 0.5 * inv_alpha * df;
                        }
                        gradient[a] += 0.5 * inv_alpha * s;
                    }
                    // x-x Hessian block: Σ_c dv_c · D²f_{c,a,b}(u).
                    for a in 0..d {
                        for b in 0..d {
                            let mut s = 0.0;
                            for c in 0..d {
                                let dv = v0[c] - vj[c];
                                let kron_cb = if c == b { u[a] } else { 0.0 };
                                let kron_ca = if c == a { u[b] } else { 0.0 };
                                let kron_ab = if a == b { u[c] } else { 0.0 };
                                let d2f = e
                                    * (-(kron_cb + kron_ca + kron_ab) / w2
                                        + u[c] * u[a] * u[b] / (w2 * w2));
                                s += dv * d2f;
                            }
                            hessian[a * k + b] += 0.5 * inv_alpha * s;
                        }
                    }
                }
            }
            ModelKind::Flocking {
                align,
                radius,
                margin,
                ..
            } => {
                // δG/δμ(x,θ) = (1/α) Σ_j χ(r_j) H(θ−θ_j), r_j = |x−x_j|,
                // H(t) = −align·cos t.
                let (x0, theta0) = (&z[..2], z[2]);
                for zj in mu.atoms() {
                    let u = [x0[0] - zj[0], x0[1] - zj[1]];
                    let r = (u[0] * u[0] + u[1] * u[1]).sqrt();
                    if r >= radius + margin {
                        continue;
                    }
                    let dtheta = theta0 - zj[2];
                    let h = -align * dtheta.cos();
                    let hp = align * dtheta.sin();
                    let hpp = align * dtheta.cos();
                    let chi = smoothstep_cutoff(r, *radius, *margin);
                    value += inv_alpha * chi * h;
                    gradient[2] += inv_alpha * chi * hp;
                    hessian[2 * k + 2] += inv_alpha * chi * hpp;
                    if r > *radius {
                        // Radial derivatives vanish on the plateau r ≤ R,
                        // which also covers the self-pair r = 0.
                        let chi_p = smoothstep_cutoff_d1(r, *radius, *margin);
                        let chi_pp = smoothstep_cutoff_d2(r, *radius, *margin);
                        for a in 0..2 {
                            gradient[a] += inv_alpha * chi_p * (u[a] / r) * h;
                            let cross = inv_alpha * chi_p * (u[a] / r) * hp;
                            hessian[a * k + 2] += cross;
                            hessian[2 * k + a] += cross;
                            for b in 0..2 {
                                let kron = if a == b { 1.0 } else { 0.0 };
                                hessian[a * k + b] += inv_alpha
                                    * h
                                    * (chi_pp * u[a] * u[b] / (r * r)
                                        + chi_p * (kron / r - u[a] * u[b] / (r * r * r)));
                            }
                        }
                    }
                }
            }
            _ => {
                return Err(Error::invalid(
                    "flat derivative is defined only for interacting models",
                ))
            }
        }
        Ok(Variation {
            value,
            gradient,
            hessian,
        })
    }

    /// Flat second derivative δ²G/δμ² at (z₁, z₂) with the mixed z₁-z₂
    /// derivative block.  Independent of μ for the catalogued (quadratic)
    /// functionals; the measure argument is kept for dimension checks.
    pub fn second_variation_g(
        &self,
        mu: &EmpiricalMeasure,
        z1: &[f64],
        z2: &[f64],
    ) -> Result<SecondVariation> {
        self.ensure_state(z1)?;
        self.ensure_state(z2)?;
        self.ensure_measure(mu)?;
        let k = self.state_dim;
        let mut mixed = vec![0.0; k * k];
        match &self.kind {
            ModelKind::InteractingVfp {
                dim,
                coupling,
                width,
                ..
            } => {
                // δ²G/δμ²(z₁,z₂) = ½[v₁·f(x₁−x₂) + v₂·f(x₂−x₁)]
                //                = ½ (v₁−v₂)·f(u),  u = x₁−x₂  (f odd).
                let d = *dim;
                let w2 = width * width;
                let (x1, v1) = (&z1[..d], &z1[d..2 * d]);
                let (x2, v2) = (&z2[..d], &z2[d..2 * d]);
                let mut u = [0.0; MAX_STATE_DIM];
                let mut r2 = 0.0;
                for a in 0..d {
                    u[a] = x1[a] - x2[a];
                    r2 += u[a] * u[a];
                }
                let e = coupling * (-r2 / (2.0 * w2)).exp();
                let mut value = 0.0;
                for a in 0..d {
                    value += 0.5 * (v1[a] - v2[a]) * e * u[a];
                }
                // Mixed block: ∂v₁∂v₂ = 0; ∂v₁_a ∂x₂_b = −½ Df_ab(u);
                // ∂x₁_b ∂v₂_a = −½ Df_ab(u); ∂x₁_a ∂x₂_b = ½ Σ_c (v₂−v₁)_c D²f_{c,a,b}(u).
                for a in 0..d {
                    for b in 0..d {
                        let df = e * (if a == b { 1.0 } else { 0.0 } - u[a] * u[b] / w2);
                        mixed[(d + a) * k + b] = -0.5 * df;
                        mixed[b * k + (d + a)] = -0.5 * df;
                        let mut s = 0.0;
                        for c in 0..d {
                            let kron_cb = if c == b { u[a] } else { 0.0 };
                            let kron_ca = if c == a { u[b] } else { 0.0 };
                            let kron_ab = if a == b { u[c] } else { 0.0 };
                            let d2f = e
                                * (-(kron_cb + kron_ca + kron_ab) / w2
                                    + u[c] * u[a] * u[b] / (w2 * w2));
                            s += (v2[c] - v1[c]) * d2f;
                        }
                        mixed[a * k + b] = 0.5 * s;
                    }
                }
                Ok(SecondVariation { value, mixed })
            }
            ModelKind::Flocking {
                align,
                radius,
                margin,
                ..
            } => {
                // δ²G/δμ²(z₁,z₂) = χ(|x₁−x₂|) H(θ₁−θ₂).
                let u = [z1[0] - z2[0], z1[1] - z2[1]];
                let r = (u[0] * u[0] + u[1] * u[1]).sqrt();
                let dtheta = z1[2] - z2[2];
                let h = -align * dtheta.cos();
                let hp = align * dtheta.sin();
                let hpp = align * dtheta.cos();
                let chi = smoothstep_cutoff(r, *radius, *margin);
                let value = chi * h;
                mixed[2 * k + 2] = -chi * hpp;
                if r > *radius && r < radius + margin {
                    let chi_p = smoothstep_cutoff_d1(r, *radius, *margin);
                    let chi_pp = smoothstep_cutoff_d2(r, *radius, *margin);
                    for a in 0..2 {
                        mixed[a * k + 2] = -chi_p * (u[a] / r) * hp;
                        mixed[2 * k + a] = -chi_p * (u[a] / r) * hp;
                        for b in 0..2 {
                            let kron = if a == b { 1.0 } else { 0.0 };
                            mixed[a * k + b] = -h
                                * (chi_pp * u[a] * u[b] / (r * r)
                                    + chi_p * (kron / r - u[a] * u[b] / (r * r * r)));
                        }
                    }
                }
                Ok(SecondVariation { value, mixed })
            }
            _ => Err(Error::invalid(
                "flat derivative is defined only for interacting models",
            )),
        }
    }

    /// Growth constant K with |b(z)| ≤ K√(1+|z|²) and tr(σσᵀ) ≤ K².
    /// Rejects models outside the linear-growth hypotheses (double-well).
    pub fn growth_constant(&self) -> Result<f64> {
        let kinetic_k = |dim: usize, gamma: f64, potential: &PotentialSpec| -> Result<f64> {
            let stiffness = match potential {
                PotentialSpec::Zero => 0.0,
                PotentialSpec::Quadratic { stiffness } => *stiffness,
                PotentialSpec::DoubleWell { .. } => {
                    return Err(Error::invalid(
                        "double-well drift has no linear-growth constant",
                    ))
                }
            };
            // |b(z)|² = |v|² + |γv + κx|² = zᵀ Mᵀ M z blockwise; the largest
            // eigenvalue of [[κ², γκ], [γκ, 1+γ²]] bounds it per coordinate.
            let a = stiffness * stiffness;
            let d = 1.0 + gamma * gamma;
            let c = gamma * stiffness;
            let lmax = 0.5 * ((a + d) + ((a - d) * (a - d) + 4.0 * c * c).sqrt());
            Ok(lmax.sqrt().max((2.0 * dim as f64).sqrt()))
        };
        match &self.kind {
            ModelKind::InertialLangevin {
                dim,
                gamma,
                potential,
            }
            | ModelKind::InteractingVfp {
                dim,
                gamma,
                potential,
                ..
            } => kinetic_k(*dim, *gamma, potential),
            ModelKind::ActiveMatter { speed } | ModelKind::Flocking { speed, .. } => {
                Ok(speed.max(1.0))
            }
            ModelKind::LinearOu { gamma } => {
                let d = 1.0 + gamma * gamma;
                let lmax = 0.5 * ((1.0 + d) + ((1.0 - d) * (1.0 - d) + 4.0 * gamma * gamma).sqrt());
                Ok(lmax.sqrt().max(std::f64::consts::SQRT_2))
            }
        }
    }

    /// Uniform bound K_F on |F_μ| for a measure of the given total mass.
    /// Zero for non-interacting models.
    pub fn interaction_bound(&self, mass: f64) -> f64 {
        match &self.kind {
            // |f(u)| = |c|·r·e^{−r²/(2w²)} peaks at r = w.
            ModelKind::InteractingVfp {
                coupling, width, ..
            } => mass * coupling.abs() * width * (-0.5f64).exp(),
            // |χ H′| ≤ |align|.
            ModelKind::Flocking { align, .. } => mass * align.abs(),
            _ => 0.0,
        }
    }
}

/// C¹ cutoff: 1 on [0, radius], 0 on [radius+margin, ∞), cubic smoothstep
/// 1 − s²(3−2s) with s = (r−radius)/margin in between.
pub fn smoothstep_cutoff(r: f64, radius: f64, margin: f64) -> f64 {
    if r <= radius {
        1.0
    } else if r >= radius + margin {
        0.0
    } else {
        let s = (r - radius) / margin;
        1.0 - s * s * (3.0 - 2.0 * s)
    }
}

/// First derivative of the cutoff: −6s(1−s)/margin on the shoulder, 0
/// elsewhere.
pub fn smoothstep_cutoff_d1(r: f64, radius: f64, margin: f64) -> f64 {
    if r <= radius || r >= radius + margin {
        0.0
    } else {
        let s = (r - radius) / margin;
        -6.0 * s * (1.0 - s) / margin
    }
}

/// Second derivative of the cutoff on the open shoulder (one-sided values at
/// the joints; the jump set has measure zero).
pub fn smoothstep_cutoff_d2(r: f64, radius: f64, margin: f64) -> f64 {
    if r <= radius || r >= radius + margin {
        0.0
    } else {
        let s = (r - radius) / margin;
        6.0 * (2.0 * s - 1.0) / (margin * margin)
    }
}
