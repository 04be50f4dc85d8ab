//! Closed-form oracles for the linear kinetic test model.
//!
//! The scalar kinetic family dz = αA z dt + √α σ dW with
//!   A = [[0, 1], [−κ, −γ]],   σ = (0, √2)ᵀ
//! is Gaussian, so its law — and the law of the Euler and splitting chains
//! discretizing it — is carried entirely by a mean vector and a 2×2
//! covariance.  Everything here is computed by linear algebra, independent
//! of the simulation code, and serves as ground truth for integrator tests.

use nalgebra::{Matrix2, Matrix4, Vector2};

/// Mean and covariance of a two-dimensional Gaussian law.
#[derive(Clone, Copy, Debug)]
pub struct GaussianMoments {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl GaussianMoments {
    /// Point mass at (x, v).
    pub fn point(x: f64, v: f64) -> Self {
        Self {
            mean: Vector2::new(x, v),
            cov: Matrix2::zeros(),
        }
    }

    /// Centered Gaussian with covariance c·I.
    pub fn isotropic(c: f64) -> Self {
        Self {
            mean: Vector2::zeros(),
            cov: Matrix2::identity() * c,
        }
    }
}

fn drift_matrix(gamma: f64, stiffness: f64, alpha: f64) -> Matrix2<f64> {
    Matrix2::new(0.0, 1.0, -stiffness, -gamma) * alpha
}

fn noise_matrix(alpha: f64) -> Matrix2<f64> {
    Matrix2::new(0.0, 0.0, 0.0, 2.0 * alpha)
}

/// Exact continuous-time moments at time t via the Van Loan block
/// exponential: with C = [[−A, Q], [0, Aᵀ]]·t one has e^C = [[·, G], [0, F]],
/// Φ = Fᵀ and ∫₀ᵗ e^{As} Q e^{Aᵀs} ds = Fᵀ G.
pub fn kinetic_exact_moments(
    gamma: f64,
    stiffness: f64,
    alpha: f64,
    t: f64,
    init: &GaussianMoments,
) -> GaussianMoments {
    let a = drift_matrix(gamma, stiffness, alpha);
    let q = noise_matrix(alpha);
    let mut c = Matrix4::zeros();
    c.fixed_view_mut::<2, 2>(0, 0).copy_from(&(-a * t));
    c.fixed_view_mut::<2, 2>(0, 2).copy_from(&(q * t));
    c.fixed_view_mut::<2, 2>(2, 2).copy_from(&(a.transpose() * t));
    let e = c.exp();
    let g = e.fixed_view::<2, 2>(0, 2).into_owned();
    let f = e.fixed_view::<2, 2>(2, 2).into_owned();
    let phi = f.transpose();
    let gramian = phi * g;
    GaussianMoments {
        mean: phi * init.mean,
        cov: phi * init.cov * phi.transpose() + gramian,
    }
}

/// Exact law of the Euler–Maruyama chain
///   z ← (I + dt·αA) z + √(dt)·√α σ ξ
/// after the given sequence of step sizes.  This is the distribution the
/// simulated chain must match *without* any discretization allowance.
pub fn kinetic_euler_moments(
    gamma: f64,
    stiffness: f64,
    alpha: f64,
    steps: &[f64],
    init: &GaussianMoments,
) -> GaussianMoments {
    let a = drift_matrix(gamma, stiffness, alpha);
    let q = noise_matrix(alpha);
    let mut m = init.mean;
    let mut c = init.cov;
    for &dt in steps {
        let t = Matrix2::identity() + a * dt;
        m = t * m;
        c = t * c * t.transpose() + q * dt;
    }
    GaussianMoments { mean: m, cov: c }
}

/// One-step affine map of the velocity-exact splitting chain
/// (half-kick, half-drift, exact OU velocity update, half-drift, half-kick):
/// returns (T, N) with z ← T z + η, η ~ N(0, N).
fn baoab_step_map(gamma: f64, stiffness: f64, alpha: f64, dt: f64) -> (Matrix2<f64>, Matrix2<f64>) {
    let half_kick = Matrix2::new(1.0, 0.0, -0.5 * alpha * stiffness * dt, 1.0);
    let half_drift = Matrix2::new(1.0, 0.5 * alpha * dt, 0.0, 1.0);
    let decay = (-alpha * gamma * dt).exp();
    let s2 = if gamma > 0.0 {
        (1.0 - decay * decay) / gamma
    } else {
        2.0 * alpha * dt
    };
    let ou = Matrix2::new(1.0, 0.0, 0.0, decay);
    let t = half_kick * half_drift * ou * half_drift * half_kick;
    // Noise is injected mid-step and propagated by the trailing half-drift
    // and half-kick.
    let w = half_kick * half_drift * Vector2::new(0.0, 1.0);
    let n = w * w.transpose() * s2;
    (t, n)
}

/// Exact law of the splitting chain after the given step sizes.
pub fn kinetic_baoab_moments(
    gamma: f64,
    stiffness: f64,
    alpha: f64,
    steps: &[f64],
    init: &GaussianMoments,
) -> GaussianMoments {
    let mut m = init.mean;
    let mut c = init.cov;
    for &dt in steps {
        let (t, n) = baoab_step_map(gamma, stiffness, alpha, dt);
        m = t * m;
        c = t * c * t.transpose() + n;
    }
    GaussianMoments { mean: m, cov: c }
}

/// Stationary covariance of the splitting chain: the fixed point of the
/// discrete Lyapunov recursion C ← T C Tᵀ + N.
pub fn kinetic_baoab_stationary(gamma: f64, stiffness: f64, alpha: f64, dt: f64) -> Matrix2<f64> {
    let (t, n) = baoab_step_map(gamma, stiffness, alpha, dt);
    let mut c = Matrix2::zeros();
    for _ in 0..200_000 {
        let next = t * c * t.transpose() + n;
        let delta = (next - c).norm();
        c = next;
        if delta <= 1e-16 * (1.0 + c.norm()) {
            break;
        }
    }
    c
}

/// E[a·exp(−|Z−c|²/(2w²))] for Z ~ N(mean, cov):
/// a·det(I + cov/w²)^{−1/2}·exp(−½ (mean−c)ᵀ (cov + w²I)^{−1} (mean−c)).
pub fn gaussian_bump_expectation(
    mean: &Vector2<f64>,
    cov: &Matrix2<f64>,
    center: &Vector2<f64>,
    width: f64,
    amplitude: f64,
) -> f64 {
    let w2 = width * width;
    let m = Matrix2::identity() + cov / w2;
    let shifted = cov + Matrix2::identity() * w2;
    let inv = shifted.try_inverse().expect("cov + w²I is positive definite");
    let d = mean - center;
    amplitude * m.determinant().sqrt().recip() * (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp()
}

/// Grid solution ψ(t, ·, ·) of the viscous Hamilton–Jacobi equation on a
/// truncated phase-space square, with bilinear evaluation between nodes.
#[derive(Clone, Debug)]
pub struct HjGrid {
    extent: f64,
    n: usize,
    h: f64,
    values: Vec<f64>,
}

impl HjGrid {
    /// Half-width of the computational square [−extent, extent]².
    pub fn extent(&self) -> f64 {
        self.extent
    }

    /// Nodes per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Bilinear interpolation at (x, v).  Panics outside the domain.
    pub fn value(&self, x: f64, v: f64) -> f64 {
        assert!(
            x.abs() <= self.extent && v.abs() <= self.extent,
            "({x}, {v}) lies outside the solver domain"
        );
        let fx = (x + self.extent) / self.h;
        let fv = (v + self.extent) / self.h;
        let ix = (fx.floor() as usize).min(self.n - 2);
        let iv = (fv.floor() as usize).min(self.n - 2);
        let (tx, tv) = (fx - ix as f64, fv - iv as f64);
        let at = |i: usize, j: usize| self.values[i * self.n + j];
        (1.0 - tx) * (1.0 - tv) * at(ix, iv)
            + tx * (1.0 - tv) * at(ix + 1, iv)
            + (1.0 - tx) * tv * at(ix, iv + 1)
            + tx * tv * at(ix + 1, iv + 1)
    }
}

/// Explicit finite-difference solve of the viscous Hamilton–Jacobi equation
///
///   ∂_t ψ = α(v ∂_x ψ − (γv + x) ∂_v ψ + ∂²_v ψ) − (∂_v ψ)²,  ψ_0 = φ,
///
/// for the two-dimensional linear kinetic test model (unit stiffness, noise
/// √2 on the velocity, so the squared-gradient term carries no prefactor).
/// The domain is the square [−extent, extent]² with homogeneous-outflow
/// (zero-gradient) boundaries; x-advection is differenced with second-order
/// upwinding, the v-direction with centred differences (the physical
/// diffusion keeps the cell Péclet number below one on documented grids).
/// The time step obeys the diffusive and advective stability limits with a
/// 0.4 safety factor.
pub fn solve_hamilton_jacobi<F>(
    gamma: f64,
    alpha: f64,
    phi: F,
    t: f64,
    extent: f64,
    n: usize,
) -> crate::Result<HjGrid>
where
    F: Fn(f64, f64) -> f64,
{
    if !(gamma >= 0.0) || !(alpha > 0.0) || !(t >= 0.0) || !(extent > 0.0) {
        return Err(crate::Error::invalid(
            "Hamilton–Jacobi solve needs gamma ≥ 0, alpha > 0, t ≥ 0, extent > 0",
        ));
    }
    if n < 5 {
        return Err(crate::Error::invalid("grid needs at least 5 nodes per axis"));
    }
    let h = 2.0 * extent / (n - 1) as f64;
    let coord = |i: usize| -extent + i as f64 * h;
    let mut psi: Vec<f64> = (0..n * n)
        .map(|idx| phi(coord(idx / n), coord(idx % n)))
        .collect();
    if t == 0.0 {
        return Ok(HjGrid { extent, n, h, values: psi });
    }
    // Bound on |∂_v ψ| for the nonlinear advective CFL term, from the initial
    // slope (the solution's Lipschitz bound does not grow here).
    let mut slope: f64 = 0.0;
    for i in 0..n {
        for j in 1..n {
            slope = slope.max((psi[i * n + j] - psi[i * n + j - 1]).abs() / h);
        }
    }
    let speed_x = alpha * extent;
    let speed_v = alpha * (gamma + 1.0) * extent + 2.0 * slope;
    let dt_limit = (h * h / (2.0 * alpha))
        .min(h / speed_x.max(1e-12))
        .min(h / speed_v.max(1e-12));
    let steps = (t / (0.4 * dt_limit)).ceil() as usize;
    let dt = t / steps as f64;
    let mut next = psi.clone();
    for _ in 0..steps {
        for i in 0..n {
            let x = coord(i);
            for j in 1..n - 1 {
                let v = coord(j);
                let here = psi[i * n + j];
                let cx = alpha * v;
                // Second-order one-sided x-derivative in the upwind
                // direction, degrading to first order beside the boundary.
                let psi_x = if cx >= 0.0 {
                    if i + 2 < n {
                        (-3.0 * here + 4.0 * psi[(i + 1) * n + j] - psi[(i + 2) * n + j])
                            / (2.0 * h)
                    } else if i + 1 < n {
                        (psi[(i + 1) * n + j] - here) / h
                    } else {
                        0.0
                    }
                } else if i >= 2 {
                    (3.0 * here - 4.0 * psi[(i - 1) * n + j] + psi[(i - 2) * n + j]) / (2.0 * h)
                } else if i >= 1 {
                    (here - psi[(i - 1) * n + j]) / h
                } else {
                    0.0
                };
                let up = psi[i * n + j + 1];
                let down = psi[i * n + j - 1];
                let psi_v = (up - down) / (2.0 * h);
                let psi_vv = (up - 2.0 * here + down) / (h * h);
                let cv = -alpha * (gamma * v + x);
                next[i * n + j] =
                    here + dt * (cx * psi_x + cv * psi_v + alpha * psi_vv - psi_v * psi_v);
            }
        }
        // Homogeneous outflow: copy the adjacent interior value.
        for i in 0..n {
            next[i * n] = next[i * n + 1];
            next[i * n + n - 1] = next[i * n + n - 2];
        }
        std::mem::swap(&mut psi, &mut next);
    }
    Ok(HjGrid { extent, n, h, values: psi })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact value of the transform −α ln(P_{αt} e^{−φ/α}) when
    /// e^{−φ/α} = 1 − β·G with G a unit Gaussian bump: the semigroup acts
    /// linearly and P_s G has the closed Gaussian form.
    fn transformed_bump_reference(
        gamma: f64,
        alpha: f64,
        beta: f64,
        center: &Vector2<f64>,
        width: f64,
        t: f64,
        z: &Vector2<f64>,
    ) -> f64 {
        let law = kinetic_exact_moments(
            gamma,
            1.0,
            1.0,
            alpha * t,
            &GaussianMoments::point(z.x, z.y),
        );
        let pg = gaussian_bump_expectation(&law.mean, &law.cov, center, width, 1.0);
        -alpha * (1.0 - beta * pg).ln()
    }

    #[test]
    fn hamilton_jacobi_preserves_constants() {
        for alpha in [1.0, 2.0] {
            let grid = solve_hamilton_jacobi(1.0, alpha, |_, _| 1.3, 0.4, 4.0, 81).unwrap();
            for i in 0..81 {
                for j in 0..81 {
                    let x = -4.0 + 0.1 * i as f64;
                    let v = -4.0 + 0.1 * j as f64;
                    assert!((grid.value(x, v) - 1.3).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn hamilton_jacobi_matches_transformed_bump_closed_form() {
        let (beta, width, t) = (0.5, 1.0, 0.4);
        let center = Vector2::new(0.3, -0.2);
        for alpha in [1.0, 2.0] {
            let phi = move |x: f64, v: f64| {
                let g = (-((x - center.x).powi(2) + (v - center.y).powi(2))
                    / (2.0 * width * width))
                    .exp();
                -alpha * (1.0 - beta * g).ln()
            };
            let grid = solve_hamilton_jacobi(1.0, alpha, phi, t, 6.0, 241).unwrap();
            for z in [
                Vector2::new(0.0, 0.0),
                Vector2::new(0.7, 0.4),
                Vector2::new(-1.1, 0.5),
                Vector2::new(0.4, -0.9),
            ] {
                let exact = transformed_bump_reference(1.0, alpha, beta, &center, width, t, &z);
                let got = grid.value(z.x, z.y);
                assert!(
                    (got - exact).abs() <= 0.01 * exact.abs().max(1e-3),
                    "alpha={alpha} z=({}, {}): grid {got} vs exact {exact}",
                    z.x,
                    z.y
                );
            }
        }
    }

    #[test]
    fn hamilton_jacobi_error_shrinks_under_grid_refinement() {
        let (beta, width, t) = (0.5, 1.0, 0.4);
        let center = Vector2::new(0.3, -0.2);
        let phi = move |x: f64, v: f64| {
            let g = (-((x - center.x).powi(2) + (v - center.y).powi(2)) / (2.0 * width * width))
                .exp();
            -(1.0 - beta * g).ln()
        };
        let probes = [
            Vector2::new(0.0, 0.0),
            Vector2::new(0.7, 0.4),
            Vector2::new(-0.6, -0.5),
        ];
        let mut errs = Vec::new();
        for n in [121, 241] {
            let grid = solve_hamilton_jacobi(1.0, 1.0, phi, t, 6.0, n).unwrap();
            let mut worst: f64 = 0.0;
            for z in &probes {
                let exact = transformed_bump_reference(1.0, 1.0, beta, &center, width, t, z);
                worst = worst.max((grid.value(z.x, z.y) - exact).abs());
            }
            errs.push(worst);
        }
        assert!(
            errs[1] <= 0.5 * errs[0],
            "halving h must cut the error: {errs:?}"
        );
    }

    #[test]
    fn matrix_exponential_reproduces_rotation() {
        // Guard on the underlying Padé implementation: exp of a generator of
        // rotations is the rotation matrix.
        let theta: f64 = 0.83;
        let g = Matrix4::from_partial_diagonal(&[0.0, 0.0, 0.0, 0.0])
            + {
                let mut m = Matrix4::zeros();
                m[(0, 1)] = theta;
                m[(1, 0)] = -theta;
                m
            };
        let e = g.exp();
        assert!((e[(0, 0)] - theta.cos()).abs() < 1e-14);
        assert!((e[(0, 1)] - theta.sin()).abs() < 1e-14);
        assert!((e[(2, 2)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn exact_moments_at_time_zero_are_the_initial_law() {
        let init = GaussianMoments {
            mean: Vector2::new(0.3, -1.1),
            cov: Matrix2::new(0.5, 0.1, 0.1, 0.9),
        };
        let out = kinetic_exact_moments(1.3, 0.7, 2.0, 0.0, &init);
        assert!((out.mean - init.mean).norm() < 1e-14);
        assert!((out.cov - init.cov).norm() < 1e-14);
    }

    /// Free kinetic motion (γ = κ = 0, α = 1) is integrated Brownian motion
    /// with velocity variance 2t:
    ///   cov = [[2t³/3, t²], [t², 2t]],  mean = (x₀ + t v₀, v₀).
    #[test]
    fn exact_moments_match_integrated_brownian_closed_form() {
        let t = 0.7;
        let init = GaussianMoments::point(0.4, -0.9);
        let out = kinetic_exact_moments(0.0, 0.0, 1.0, t, &init);
        assert!((out.mean[0] - (0.4 + t * -0.9)).abs() < 1e-13);
        assert!((out.mean[1] - -0.9).abs() < 1e-14);
        let expect = Matrix2::new(2.0 * t * t * t / 3.0, t * t, t * t, 2.0 * t);
        assert!(
            (out.cov - expect).norm() < 1e-13,
            "cov {} vs integrated-BM closed form {expect}",
            out.cov
        );
    }

    /// The stationary covariance diag(1/(γκ), 1/γ) is preserved exactly by
    /// the continuous flow, for any α (α only rescales time).
    #[test]
    fn exact_moments_preserve_the_stationary_law() {
        for (gamma, stiffness) in [(1.0, 1.0), (2.0, 1.0), (1.5, 0.5)] {
            let stat = GaussianMoments {
                mean: Vector2::zeros(),
                cov: Matrix2::new(1.0 / (gamma * stiffness), 0.0, 0.0, 1.0 / gamma),
            };
            for t in [0.3, 1.0, 4.0] {
                let out = kinetic_exact_moments(gamma, stiffness, 1.7, t, &stat);
                assert!(out.mean.norm() < 1e-12);
                assert!(
                    (out.cov - stat.cov).norm() < 1e-11,
                    "stationary law must be invariant, drifted to {}",
                    out.cov
                );
            }
        }
    }

    #[test]
    fn euler_chain_converges_to_exact_moments() {
        let init = GaussianMoments::point(1.0, 0.0);
        let (gamma, stiffness, alpha, t) = (1.0, 1.0, 1.3, 0.8);
        let exact = kinetic_exact_moments(gamma, stiffness, alpha, t, &init);
        let mut errs = Vec::new();
        for n in [200usize, 400, 800] {
            let steps = vec![t / n as f64; n];
            let chain = kinetic_euler_moments(gamma, stiffness, alpha, &steps, &init);
            errs.push((chain.cov - exact.cov).norm() + (chain.mean - exact.mean).norm());
        }
        // First-order scheme: halving dt halves the moment error.
        assert!(errs[0] / errs[1] > 1.8 && errs[0] / errs[1] < 2.2, "{errs:?}");
        assert!(errs[1] / errs[2] > 1.8 && errs[1] / errs[2] < 2.2, "{errs:?}");
    }

    #[test]
    fn baoab_chain_is_second_order_and_exact_when_free() {
        let init = GaussianMoments::point(1.0, 0.5);
        let (gamma, stiffness, alpha, t) = (1.0, 1.0, 1.0, 1.0);
        let exact = kinetic_exact_moments(gamma, stiffness, alpha, t, &init);
        let mut errs = Vec::new();
        for n in [50usize, 100, 200] {
            let steps = vec![t / n as f64; n];
            let chain = kinetic_baoab_moments(gamma, stiffness, alpha, &steps, &init);
            errs.push((chain.cov - exact.cov).norm() + (chain.mean - exact.mean).norm());
        }
        assert!(errs[0] / errs[1] > 3.5 && errs[0] / errs[1] < 4.5, "{errs:?}");

        // κ = 0: the splitting integrates the OU velocity exactly, and the
        // position update is exact for the resulting piecewise dynamics up
        // to second order; with γ = κ = 0 the chain is exact in law.
        let free = kinetic_baoab_moments(0.0, 0.0, 1.0, &vec![0.1; 7], &GaussianMoments::point(0.0, 0.0));
        let free_exact = kinetic_exact_moments(0.0, 0.0, 1.0, 0.7, &GaussianMoments::point(0.0, 0.0));
        assert!((free.cov[(1, 1)] - free_exact.cov[(1, 1)]).abs() < 1e-14);
    }

    #[test]
    fn baoab_stationary_matches_continuous_invariant_law_closely() {
        // The documented claim: at dt = 1e-2 the splitting chain's
        // stationary covariance is within 0.5% of diag(1/(γκ), 1/γ).
        let (gamma, stiffness, alpha, dt) = (1.0, 1.0, 1.0, 1e-2);
        let c = kinetic_baoab_stationary(gamma, stiffness, alpha, dt);
        let exact = Matrix2::new(1.0, 0.0, 0.0, 1.0);
        for i in 0..2 {
            for j in 0..2 {
                let err = (c[(i, j)] - exact[(i, j)]).abs();
                assert!(
                    err < 5e-3,
                    "stationary entry ({i},{j}) = {} deviates by {err}",
                    c[(i, j)]
                );
            }
        }
        // And it is the fixed point of the recursion.
        let (t, n) = super::baoab_step_map(gamma, stiffness, alpha, dt);
        assert!((t * c * t.transpose() + n - c).norm() < 1e-12);
    }

    #[test]
    fn bump_expectation_matches_quadrature() {
        let mean = Vector2::new(0.3, -0.2);
        let cov = Matrix2::new(0.8, 0.25, 0.25, 1.1);
        let center = Vector2::new(-0.4, 0.5);
        let (width, amplitude) = (0.9, 1.7);
        let closed = gaussian_bump_expectation(&mean, &cov, &center, width, amplitude);
        // Midpoint quadrature of ∫ N(z; mean, cov)·bump(z) dz on a wide grid.
        let inv = cov.try_inverse().unwrap();
        let det = cov.determinant();
        let norm = 1.0 / (2.0 * std::f64::consts::PI * det.sqrt());
        let (lo, hi, m) = (-8.0, 8.0, 640);
        let h = (hi - lo) / m as f64;
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                let z = Vector2::new(lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h);
                let d = z - mean;
                let dens = norm * (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp();
                let q = z - center;
                let bump = amplitude * (-q.norm_squared() / (2.0 * width * width)).exp();
                acc += dens * bump * h * h;
            }
        }
        assert!(
            (closed - acc).abs() < 1e-6,
            "closed form {closed} vs quadrature {acc}"
        );

        // Degenerate covariance: the expectation collapses to the bump value
        // at the mean.
        let point = gaussian_bump_expectation(&mean, &Matrix2::zeros(), &center, width, amplitude);
        let d = mean - center;
        let direct = amplitude * (-d.norm_squared() / (2.0 * width * width)).exp();
        assert!((point - direct).abs() < 1e-14);
    }
}
