//! Seeded, position-addressable randomness.
//!
//! Every random quantity in the engine is drawn from an [`RngStream`], a
//! `(seed, stream id)` pair backed by ChaCha20. ChaCha's 64-bit stream
//! selector keeps streams independent, and its seekable word counter makes
//! draw `i` of a stream addressable without generating draws `0..i`, which is
//! what lets the SDE backward pass regenerate noise segment by segment.
//!
//! Normals use Box–Muller over pairs of 64-bit words, so normal `i` always
//! comes from word pair `i / 2`.
//!
//! Stream ids are laid out as
//!
//! | bits   | field                              |
//! |--------|------------------------------------|
//! | 56..64 | [`StreamKind`] tag                 |
//! | 24..56 | epoch (or sample / replicate id)   |
//! | 0..24  | index (district, series, ...)      |

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// What a stream is used for; part of the stream id so purposes never collide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum StreamKind {
    Init = 1,
    Posterior = 2,
    Diffusion = 3,
    Bridge = 4,
    Assumptions = 5,
    Predict = 6,
    Eval = 7,
    GradCheck = 8,
}

/// Compose a stream id from its parts. `epoch` is truncated to 32 bits and
/// `index` to 24 bits.
pub fn stream_id(kind: StreamKind, epoch: u64, index: u64) -> u64 {
    debug_assert!(index < 1 << 24, "stream index {index} exceeds 24 bits");
    ((kind as u64) << 56) | ((epoch & 0xFFFF_FFFF) << 24) | (index & 0xFF_FFFF)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn for_kind(seed: u64, kind: StreamKind, epoch: u64, index: u64) -> Self {
        Self::new(seed, stream_id(kind, epoch, index))
    }

    fn generator(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Sequential standard-normal sampler starting at draw 0.
    pub fn normals(&self) -> NormalSampler {
        NormalSampler {
            rng: self.generator(),
            spare: None,
        }
    }

    /// Sequential sampler starting at draw `position`.
    pub fn normals_from(&self, position: u64) -> NormalSampler {
        let mut rng = self.generator();
        // two u64 per Box-Muller pair, two 32-bit words per u64
        rng.set_word_pos(u128::from(position / 2) * 4);
        let mut sampler = NormalSampler { rng, spare: None };
        if position % 2 == 1 {
            sampler.next();
        }
        sampler
    }

    /// Uniform draws in `[0, 1)` with 53 bits of precision.
    pub fn uniforms(&self) -> UniformSampler {
        UniformSampler {
            rng: self.generator(),
        }
    }
}

pub struct NormalSampler {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

fn unit_open_closed(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn unit_closed_open(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl NormalSampler {
    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = unit_open_closed(self.rng.next_u64());
        let u2 = unit_closed_open(self.rng.next_u64());
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn take(&mut self, count: usize) -> Vec<f64> {
        (0..count).map(|_| self.next()).collect()
    }
}

pub struct UniformSampler {
    rng: ChaCha20Rng,
}

impl UniformSampler {
    pub fn next(&mut self) -> f64 {
        unit_closed_open(self.rng.next_u64())
    }
}

/// `count` i.i.d. N(0, 1) draws from the start of `rng`.
pub fn standard_normal(rng: RngStream, count: usize) -> Tensor {
    Tensor::vector(rng.normals().take(count))
}

/// `steps × dim` matrix of independent N(0, dt) increments; entry `(k, j)` is
/// draw `k·dim + j` of the stream scaled by `sqrt(dt)`.
pub fn brownian_increments(rng: RngStream, steps: usize, dt: f64, dim: usize) -> Result<Tensor> {
    increments_window(rng, 0, steps, dt, dim)
}

/// Rows `first_step .. first_step + steps` of the matrix that
/// [`brownian_increments`] would produce, without generating earlier rows.
pub fn increments_window(
    rng: RngStream,
    first_step: usize,
    steps: usize,
    dt: f64,
    dim: usize,
) -> Result<Tensor> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::contract(format!("increment dt must be positive, got {dt}")));
    }
    if dim == 0 {
        return Err(Error::contract("increment dimension must be at least 1"));
    }
    let scale = dt.sqrt();
    let mut sampler = rng.normals_from((first_step * dim) as u64);
    let data = (0..steps * dim).map(|_| scale * sampler.next()).collect();
    Tensor::new(vec![steps, dim], data)
}

/// Anchors and volatility of a Brownian bridge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeSpec {
    pub t_a: f64,
    pub t_b: f64,
    pub x_a: f64,
    pub x_b: f64,
    /// Volatility in value units per square-root time unit.
    pub sigma: f64,
}

impl BridgeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_b > self.t_a) {
            return Err(Error::contract(format!(
                "bridge needs t_b > t_a, got [{}, {}]",
                self.t_a, self.t_b
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::contract(format!("bridge sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Marginal variance at `t`: `σ²(t − t_a)(t_b − t)/(t_b − t_a)`.
    pub fn variance_at(&self, t: f64) -> f64 {
        self.sigma * self.sigma * (t - self.t_a) * (self.t_b - t) / (self.t_b - self.t_a)
    }
}

/// Sample one bridge path at `times`.
///
/// `W` is built as the running sum of independent Gaussian increments over the
/// requested grid (with `t_b` appended if absent), then
/// `x(t) = x_a + r(t)(x_b − x_a) + σ[W(t − t_a) − r(t) W(t_b − t_a)]` with
/// `r(t) = (t − t_a)/(t_b − t_a)`. Endpoints are pinned exactly.
pub fn brownian_bridge(spec: &BridgeSpec, times: &[f64], rng: RngStream) -> Result<Vec<f64>> {
    spec.validate()?;
    for (i, &t) in times.iter().enumerate() {
        if !(t >= spec.t_a && t <= spec.t_b) {
            return Err(Error::contract(format!(
                "bridge time {t} outside [{}, {}]",
                spec.t_a, spec.t_b
            )));
        }
        if i > 0 && t < times[i - 1] {
            return Err(Error::contract("bridge times must be ascending"));
        }
    }

    let mut sampler = rng.normals();
    let mut walk = Vec::with_capacity(times.len());
    let (mut w, mut prev) = (0.0, spec.t_a);
    for &t in times {
        let dt = t - prev;
        if dt > 0.0 {
            w += dt.sqrt() * sampler.next();
        }
        walk.push(w);
        prev = t;
    }
    let tail = spec.t_b - prev;
    let w_end = if tail > 0.0 { w + tail.sqrt() * sampler.next() } else { w };

    let span = spec.t_b - spec.t_a;
    Ok(times
        .iter()
        .zip(walk)
        .map(|(&t, w_t)| {
            if t == spec.t_a {
                spec.x_a
            } else if t == spec.t_b {
                spec.x_b
            } else {
                let r = (t - spec.t_a) / span;
                spec.x_a + r * (spec.x_b - spec.x_a) + spec.sigma * (w_t - r * w_end)
            }
        })
        .collect())
}
