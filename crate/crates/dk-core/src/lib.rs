//! Particle-level simulator and verification harness for conservative
//! measure-valued stochastic dynamics of Vlasov-Fokker-Planck type.
//!
//! The object under study is the empirical measure μ_t = (1/α) Σ_i δ_{z_t^i}
//! of n interacting diffusions in ℝ^k,
//!
//! ```text
//! dz_t^i = α b(z_t^i) dt + F_{μ_t}(z_t^i) dt + √α σ(z_t^i) dW_t^i ,
//! ```
//!
//! which solves a stochastic PDE with conservative √density noise. The harness
//! simulates these systems and verifies, as statistical identities at desk
//! scale, the structure that characterizes the measure-valued law:
//!
//! * [`martingale`] — for φ ∈ C_b², M_t(φ) = ⟨μ_t,φ⟩ − ∫⟨μ_s, αLφ + F·∇φ⟩ds
//!   is a martingale with quadratic variation ∫⟨μ_s, |σᵀ∇φ|²⟩ds, where
//!   L = b·∇ + ½σσᵀ:∇².
//! * [`duality`] — for F = 0, the Laplace transform identity
//!   E e^{−⟨μ_t,φ⟩} = e^{−⟨μ₀,V_tφ⟩} with the Cole-Hopf transform
//!   V_tφ = −α ln(P_{αt} e^{−φ/α}), the moment-generating-function identity for
//!   set masses (α μ_t(A) is an integer on every path), and an exhaustion probe
//!   for the semigroup acting on indicators.
//! * [`girsanov`] — the Itô functional martingale M^G for interaction
//!   functionals G(μ), its stochastic exponential, and the change of measure
//!   between interacting and free ensembles.
//! * [`measure`] — empirical-measure algebra and the Grönwall second-moment
//!   bound E⟨μ_t,e₂⟩ ≤ (⟨μ₀,1+e₂⟩ + ct)e^{ct}.
//!
//! [`models`] catalogues the concrete drift/diffusion/interaction choices,
//! [`integrate`] steps the particle SDE with deterministic counter-based noise
//! ([`rng`]), [`oracle`] holds independent closed-form and grid-PDE reference
//! solvers used by the test suites, and [`suites`] wires everything into the
//! reproducible experiment drivers exposed by the `dk` binary.
//!
//! Floating-point determinism is a contract: a fixed seed reproduces every
//! trajectory, estimate, and artifact byte-for-byte, independent of worker
//! count.

pub mod duality;
pub mod girsanov;
pub mod integrate;
pub mod martingale;
pub mod measure;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod statistics;
pub mod suites;

use thiserror::Error;

/// Errors surfaced by simulation and verification operations.
///
/// Statistical test failures are not errors — they are reported as `pass:
/// false` in the relevant report type. Errors mean the computation itself
/// could not proceed.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A particle coordinate left the finite range during integration.
    #[error("non-finite state at step {step}, particle {particle}")]
    NonFinite { step: u64, particle: usize },

    /// A numerical guard tripped (e.g. a positive-integrand mean underflowed
    /// to a non-positive value inside a logarithm).
    #[error("numerical abort: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
