//! Euler–Maruyama integration of the latent SDE, its two backward modes, and
//! empirical checks of the Lipschitz / linear-growth hypotheses.
//!
//! The scheme is `z_{k+1} = z_k + f(z_k, e)·dt + g(z_k, e) ⊙ ΔW_k` with
//! diagonal noise. Increments are always supplied from outside (or
//! regenerated from an [`RngStream`]) so that a backward pass can recompute
//! the exact forward path.
//!
//! Two gradient routes are provided over the same discrete system:
//!
//! * [`backward_direct`] records the whole trajectory on one tape and sweeps
//!   it once; memory grows with the number of steps.
//! * [`backward_replay`] keeps only segment checkpoints during the forward
//!   sweep, then walks segments in reverse, regenerating their noise from the
//!   stream, recomputing states and propagating the adjoint step by step.
//!   With segments of length `ceil(sqrt(T))` at most about `2·sqrt(T)` states
//!   are held at once.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::stochastic::{increments_window, RngStream, StreamKind};

/// States beyond this magnitude abort integration.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Drift and diffusion coefficients of a latent SDE, recorded on a tape.
pub trait LatentDynamics {
    fn params(&self) -> &ParamSet;
    fn latent_dim(&self) -> usize;
    /// Per-path conditioning input (the district embedding for [`Model`]).
    fn context(&self, tape: &mut Tape<'_>, district: usize) -> Result<Var>;
    /// `(f(z), g(z))`, each shaped like `z`.
    fn coefficients(&self, tape: &mut Tape<'_>, z: Var, ctx: Var) -> Result<(Var, Var)>;
}

/// Uniform grid of `points` time points spaced `dt` apart, starting at 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub points: usize,
    pub dt: f64,
}

impl TimeGrid {
    /// `points` steps covering `[0, 1)`: `dt = 1/points`.
    pub fn unit(points: usize) -> Result<Self> {
        Self::new(points, 1.0 / points as f64)
    }

    pub fn new(points: usize, dt: f64) -> Result<Self> {
        if points == 0 {
            return Err(Error::contract("time grid needs at least one point"));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::contract(format!("time grid dt must be positive, got {dt}")));
        }
        Ok(Self { points, dt })
    }

    pub fn transitions(&self) -> usize {
        self.points - 1
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.points).map(|k| k as f64 * self.dt).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPath {
    /// `points × n`; row 0 is the supplied initial state.
    pub states: Tensor,
    /// `(points − 1) × n` Brownian increments that drove the path.
    pub increments: Tensor,
    pub grid: TimeGrid,
    pub district: usize,
}

impl LatentPath {
    pub fn state(&self, k: usize) -> Tensor {
        self.states.row(k).expect("state index")
    }
}

fn check_increments(increments: &Tensor, grid: &TimeGrid, dim: usize) -> Result<()> {
    let expected = [grid.transitions(), dim];
    let ok = increments.shape() == expected
        || (grid.transitions() == 0 && increments.is_empty());
    if !ok {
        return Err(Error::Dimension {
            op: "increments",
            left: expected.to_vec(),
            right: increments.shape().to_vec(),
        });
    }
    Ok(())
}

/// One Euler–Maruyama step recorded on `tape`.
pub fn euler_step<D: LatentDynamics + ?Sized>(
    dynamics: &D,
    tape: &mut Tape<'_>,
    z: Var,
    ctx: Var,
    dw: Var,
    dt: f64,
    step: usize,
) -> Result<Var> {
    let advance = |tape: &mut Tape<'_>| -> Result<Var> {
        let (f, g) = dynamics.coefficients(tape, z, ctx)?;
        let drift = tape.scale(f, dt)?;
        let noise = tape.mul(g, dw)?;
        let partial = tape.add(z, drift)?;
        tape.add(partial, noise)
    };
    let next = advance(tape).map_err(|e| match e {
        Error::Numerical(msg) => Error::numerical(format!("integration step {step}: {msg}")),
        other => other,
    })?;
    if let Some(v) = tape.value(next).data().iter().find(|v| v.abs() > DIVERGENCE_LIMIT) {
        return Err(Error::numerical(format!(
            "integration step {step}: latent state diverged (|z| = {v:e})"
        )));
    }
    Ok(next)
}

/// Integrate on an existing tape. Returns one handle per grid point.
pub fn integrate_on_tape<D: LatentDynamics + ?Sized>(
    dynamics: &D,
    tape: &mut Tape<'_>,
    z0: Var,
    ctx: Var,
    grid: &TimeGrid,
    increments: &Tensor,
) -> Result<Vec<Var>> {
    let n = dynamics.latent_dim();
    check_increments(increments, grid, n)?;
    let mut states = Vec::with_capacity(grid.points);
    states.push(z0);
    let mut z = z0;
    for k in 0..grid.transitions() {
        let dw = tape.leaf(increments.row(k)?);
        z = euler_step(dynamics, tape, z, ctx, dw, grid.dt, k)?;
        states.push(z);
    }
    Ok(states)
}

fn advance_values<D: LatentDynamics + ?Sized>(
    dynamics: &D,
    tape: &mut Tape<'_>,
    district: usize,
    z: &Tensor,
    dw: Tensor,
    dt: f64,
    step: usize,
) -> Result<Tensor> {
    tape.clear();
    let ctx = dynamics.context(tape, district)?;
    let zv = tape.leaf(z.clone());
    let dwv = tape.leaf(dw);
    let next = euler_step(dynamics, tape, zv, ctx, dwv, dt, step)?;
    Ok(tape.value(next).clone())
}

/// Integrate without keeping a differentiable record.
pub fn integrate<D: LatentDynamics + ?Sized>(
    dynamics: &D,
    z0: &Tensor,
    district: usize,
    grid: &TimeGrid,
    increments: &Tensor,
) -> Result<LatentPath> {
    let n = dynamics.latent_dim();
    if z0.shape() != [n] {
        return Err(Error::Dimension {
            op: "integrate z0",
            left: vec![n],
            right: z0.shape().to_vec(),
        });
    }
    check_increments(increments, grid, n)?;
    let mut tape = Tape::new(dynamics.params());
    let mut data = Vec::with_capacity(grid.points * n);
    data.extend_from_slice(z0.data());
    let mut z = z0.clone();
    for k in 0..grid.transitions() {
        z = advance_values(dynamics, &mut tape, district, &z, increments.row(k)?, grid.dt, k)?;
        data.extend_from_slice(z.data());
    }
    Ok(LatentPath {
        states: Tensor::new(vec![grid.points, n], data)?,
        increments: increments.clone(),
        grid: *grid,
        district,
    })
}

/// Per-step loss attached to latent states; the source of the per-step
/// adjoints that drive both backward modes.
pub trait StepLoss {
    /// Scalar loss contribution of state `z` at grid index `step`, or `None`
    /// if this step contributes nothing.
    fn record(&self, tape: &mut Tape<'_>, step: usize, z: Var, ctx: Var) -> Result<Option<Var>>;
}

/// Loss that is linear in the states: `Σ_k ⟨c_k, z_k⟩`, so `dL/dz_k = c_k`.
pub struct LinearStepLoss {
    pub weights: Vec<Tensor>,
}

impl StepLoss for LinearStepLoss {
    fn record(&self, tape: &mut Tape<'_>, step: usize, z: Var, _ctx: Var) -> Result<Option<Var>> {
        let Some(c) = self.weights.get(step) else { return Ok(None) };
        let cv = tape.leaf(c.clone());
        let prod = tape.mul(cv, z)?;
        Ok(Some(tape.sum(prod)?))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayStats {
    /// Largest number of latent state vectors held at any one time.
    pub peak_saved_states: usize,
    pub segments: usize,
    /// Transitions evaluated a second time during the backward sweep.
    pub recomputed_steps: usize,
}

#[derive(Clone, Debug)]
pub struct PathGradients {
    pub loss: f64,
    pub params: Gradients,
    /// `dL/dz_0`.
    pub z0: Tensor,
    pub stats: ReplayStats,
}

fn check_z0(z0: &Tensor, n: usize) -> Result<()> {
    if z0.shape() != [n] {
        return Err(Error::Dimension {
            op: "z0",
            left: vec![n],
            right: z0.shape().to_vec(),
        });
    }
    Ok(())
}

/// Stored-activation backward: the full path and every per-step loss on one tape.
pub fn backward_direct<D: LatentDynamics + ?Sized, L: StepLoss + ?Sized>(
    dynamics: &D,
    z0: &Tensor,
    district: usize,
    grid: &TimeGrid,
    rng: RngStream,
    loss: &L,
) -> Result<PathGradients> {
    let n = dynamics.latent_dim();
    check_z0(z0, n)?;
    let increments = increments_window(rng, 0, grid.transitions(), grid.dt, n)?;
    let mut tape = Tape::new(dynamics.params());
    let ctx = dynamics.context(&mut tape, district)?;
    let z0v = tape.leaf(z0.clone());
    let states = integrate_on_tape(dynamics, &mut tape, z0v, ctx, grid, &increments)?;
    let mut total: Option<Var> = None;
    for (k, &z) in states.iter().enumerate() {
        if let Some(l) = loss.record(&mut tape, k, z, ctx)? {
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
    }
    let Some(total) = total else {
        return Ok(PathGradients {
            loss: 0.0,
            params: Gradients::zeros_like(dynamics.params()),
            z0: Tensor::zeros(&[n]),
            stats: ReplayStats {
                peak_saved_states: grid.points,
                segments: 1,
                recomputed_steps: 0,
            },
        });
    };
    let adj = tape.backward_seeded(&[(total, Tensor::scalar(1.0))])?;
    Ok(PathGradients {
        loss: tape.value(total).item()?,
        z0: adj.wrt(z0v).cloned().unwrap_or_else(|| Tensor::zeros(&[n])),
        params: adj.params,
        stats: ReplayStats {
            peak_saved_states: grid.points,
            segments: 1,
            recomputed_steps: 0,
        },
    })
}

/// Order-sensitive fingerprint of a block of increments.
fn checksum(t: &Tensor) -> u64 {
    t.data().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Default segment length for replay: `ceil(sqrt(points))`.
pub fn default_segment_len(points: usize) -> usize {
    (points as f64).sqrt().ceil().max(1.0) as usize
}

fn loss_value<D: LatentDynamics + ?Sized, L: StepLoss + ?Sized>(
    dynamics: &D,
    tape: &mut Tape<'_>,
    loss: &L,
    district: usize,
    step: usize,
    z: &Tensor,
) -> Result<f64> {
    tape.clear();
    let ctx = dynamics.context(tape, district)?;
    let zv = tape.leaf(z.clone());
    match loss.record(tape, step, zv, ctx)? {
        Some(l) => tape.value(l).item(),
        None => Ok(0.0),
    }
}

/// Checkpointed backward that regenerates noise from `rng_replay`.
///
/// `forward_rng` is the stream that drove the forward pass; its increments are
/// fingerprinted per segment and every regenerated segment must match, or the
/// call fails with [`Error::ReplayMismatch`]. Passing the same stream for both
/// is the normal case.
pub fn backward_replay<D: LatentDynamics + ?Sized, L: StepLoss + ?Sized>(
    dynamics: &D,
    z0: &Tensor,
    district: usize,
    grid: &TimeGrid,
    forward_rng: RngStream,
    rng_replay: RngStream,
    loss: &L,
    segment_len: Option<usize>,
) -> Result<PathGradients> {
    let n = dynamics.latent_dim();
    check_z0(z0, n)?;
    let seg = segment_len.unwrap_or_else(|| default_segment_len(grid.points)).max(1);
    let last = grid.points - 1;
    let segment_transitions = |start: usize| (start + seg).min(last) - start;

    let mut tape = Tape::new(dynamics.params());
    let mut stats = ReplayStats::default();

    // Forward sweep: values only, keep the state at each segment start.
    let mut checkpoints: Vec<(usize, Tensor)> = Vec::new();
    let mut checksums = Vec::new();
    let mut total_loss = 0.0;
    let mut z = z0.clone();
    let mut start = 0;
    while start <= last {
        checkpoints.push((start, z.clone()));
        stats.peak_saved_states = stats.peak_saved_states.max(checkpoints.len());
        let steps = segment_transitions(start);
        let incs = increments_window(forward_rng, start, steps, grid.dt, n)?;
        checksums.push(checksum(&incs));
        let end = (start + seg).min(grid.points);
        for k in start..end {
            total_loss += loss_value(dynamics, &mut tape, loss, district, k, &z)?;
            if k < last {
                z = advance_values(dynamics, &mut tape, district, &z, incs.row(k - start)?, grid.dt, k)?;
            }
        }
        start = end;
    }
    stats.segments = checkpoints.len();

    // Backward sweep over segments in reverse.
    let mut grads = Gradients::zeros_like(dynamics.params());
    let mut carry: Option<Tensor> = None; // dL/dz at the first state of the later segment
    while let Some((start, z_start)) = checkpoints.pop() {
        let segment = checkpoints.len();
        let steps = segment_transitions(start);
        let incs = increments_window(rng_replay, start, steps, grid.dt, n)?;
        let actual = checksum(&incs);
        if actual != checksums[segment] {
            return Err(Error::ReplayMismatch {
                segment,
                expected: checksums[segment],
                actual,
            });
        }

        let end = (start + seg).min(grid.points);
        let mut buffer = Vec::with_capacity(end - start);
        buffer.push(z_start);
        for k in start..end - 1 {
            let next = advance_values(
                dynamics,
                &mut tape,
                district,
                &buffer[k - start],
                incs.row(k - start)?,
                grid.dt,
                k,
            )?;
            stats.recomputed_steps += 1;
            buffer.push(next);
        }
        stats.peak_saved_states = stats.peak_saved_states.max(checkpoints.len() + buffer.len());

        for k in (start..end).rev() {
            tape.clear();
            let ctx = dynamics.context(&mut tape, district)?;
            let zk = tape.leaf(buffer[k - start].clone());
            let mut seeds = Vec::with_capacity(2);
            if k < last {
                let dw = tape.leaf(incs.row(k - start)?);
                let next = euler_step(dynamics, &mut tape, zk, ctx, dw, grid.dt, k)?;
                if let Some(a) = carry.take() {
                    seeds.push((next, a));
                }
            }
            if let Some(l) = loss.record(&mut tape, k, zk, ctx)? {
                seeds.push((l, Tensor::scalar(1.0)));
            }
            let adj = tape.backward_seeded(&seeds)?;
            grads.accumulate(&adj.params);
            carry = adj.wrt(zk).cloned();
        }
    }

    Ok(PathGradients {
        loss: total_loss,
        params: grads,
        z0: carry.unwrap_or_else(|| Tensor::zeros(&[n])),
        stats,
    })
}

/// Empirical counterparts of the embedding bound, global Lipschitz and linear
/// growth constants, measured over a sampled region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub lipschitz_estimate: f64,
    pub growth_constant: f64,
    /// Diffusion part of the growth ratio alone; bounded by the latent size.
    pub diffusion_growth: f64,
    pub embedding_bound: f64,
    pub sample_count: usize,
    /// Half-width of the box latent states are drawn from.
    pub z_radius: f64,
}

/// Box half-width for sampled latent states.
pub const ASSUMPTION_Z_RADIUS: f64 = 3.0;
/// Standard deviation of the perturbation separating the two points of a pair.
pub const ASSUMPTION_PAIR_SCALE: f64 = 0.1;

/// Estimate the constants over `sample_count` pairs `(z, z + δ)` with
/// `z ~ U[−r, r]^n`, `δ ~ N(0, s²I)`, cycling through `districts`.
pub fn verify_assumptions(
    model: &Model,
    districts: &[usize],
    sample_count: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    if sample_count < 2 {
        return Err(Error::contract("assumption check needs at least 2 samples"));
    }
    if districts.is_empty() {
        return Err(Error::contract("assumption check needs at least one district"));
    }
    let n = model.dims.latent;
    let stream = RngStream::for_kind(seed, StreamKind::Assumptions, 0, 0);
    let mut uniforms = stream.uniforms();
    let mut normals = RngStream::for_kind(seed, StreamKind::Assumptions, 1, 0).normals();

    let embeddings: Vec<Tensor> = districts
        .iter()
        .map(|&d| model.embedding_row(d))
        .collect::<Result<_>>()?;
    let embedding_bound = (0..model.districts)
        .map(|d| model.embedding_row(d).map(|r| r.norm()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);

    let mut tape = Tape::new(&model.params);
    let mut eval = |z: &Tensor, d: usize| -> Result<(Tensor, Tensor)> {
        tape.clear();
        let ctx = model.context(&mut tape, d)?;
        let zv = tape.leaf(z.clone());
        let (f, g) = model.coefficients(&mut tape, zv, ctx)?;
        Ok((tape.value(f).clone(), tape.value(g).clone()))
    };

    let (mut lipschitz, mut growth, mut diffusion_growth) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..sample_count {
        let d = districts[i % districts.len()];
        let e_norm2 = embeddings[i % districts.len()].norm().powi(2);
        let z1 = Tensor::vector(
            (0..n)
                .map(|_| (2.0 * uniforms.next() - 1.0) * ASSUMPTION_Z_RADIUS)
                .collect(),
        );
        let delta: Vec<f64> = (0..n).map(|_| ASSUMPTION_PAIR_SCALE * normals.next()).collect();
        let z2 = Tensor::vector(z1.data().iter().zip(&delta).map(|(a, b)| a + b).collect());
        let (f1, g1) = eval(&z1, d)?;
        let (f2, g2) = eval(&z2, d)?;

        let dz_norm = z1.zip_map(&z2, |a, b| a - b).norm();
        if dz_norm > 0.0 {
            let df = f1.zip_map(&f2, |a, b| a - b).norm();
            let dg = g1.zip_map(&g2, |a, b| a - b).norm();
            lipschitz = lipschitz.max((df + dg) / dz_norm);
        }
        let denom = 1.0 + z1.norm().powi(2) + e_norm2;
        let g2n = g1.norm().powi(2);
        growth = growth.max((f1.norm().powi(2) + g2n) / denom);
        diffusion_growth = diffusion_growth.max(g2n / denom);
    }

    Ok(AssumptionReport {
        lipschitz_estimate: lipschitz,
        growth_constant: growth,
        diffusion_growth,
        embedding_bound,
        sample_count,
        z_radius: ASSUMPTION_Z_RADIUS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;

    /// `dz = -θ z dt + σ dW` with hand-set coefficients.
    pub(crate) struct Ou {
        pub theta: f64,
        pub sigma: f64,
        pub params: ParamSet,
    }

    impl LatentDynamics for Ou {
        fn params(&self) -> &ParamSet {
            &self.params
        }
        fn latent_dim(&self) -> usize {
            1
        }
        fn context(&self, tape: &mut Tape<'_>, _district: usize) -> Result<Var> {
            Ok(tape.leaf(Tensor::vector(vec![])))
        }
        fn coefficients(&self, tape: &mut Tape<'_>, z: Var, _ctx: Var) -> Result<(Var, Var)> {
            let f = tape.scale(z, -self.theta)?;
            let g = tape.leaf(Tensor::vector(vec![self.sigma]));
            Ok((f, g))
        }
    }

    fn ou(theta: f64, sigma: f64) -> Ou {
        Ou {
            theta,
            sigma,
            params: ParamSet::new(),
        }
    }

    #[test]
    fn time_grid_unit_spacing() {
        let g = TimeGrid::unit(168).unwrap();
        assert!((g.points as f64 * g.dt - 1.0).abs() < 1e-12);
        let times = g.times();
        assert_eq!(times.len(), 168);
        assert!(times.windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::new(0, 0.1).is_err());
        assert!(TimeGrid::new(4, 0.0).is_err());
    }

    #[test]
    fn zero_coefficients_keep_state_constant() {
        let p = ou(0.0, 0.0);
        let grid = TimeGrid::unit(20).unwrap();
        let inc = crate::stochastic::brownian_increments(RngStream::new(1, 1), 19, grid.dt, 1).unwrap();
        let path = integrate(&p, &Tensor::vector(vec![0.7]), 0, &grid, &inc).unwrap();
        assert!(path.states.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn constant_diffusion_telescopes() {
        let p = ou(0.0, 0.5);
        let grid = TimeGrid::unit(30).unwrap();
        let inc = crate::stochastic::brownian_increments(RngStream::new(2, 1), 29, grid.dt, 1).unwrap();
        let path = integrate(&p, &Tensor::vector(vec![1.0]), 0, &grid, &inc).unwrap();
        let mut expected = 1.0;
        for k in 0..30 {
            assert!((path.states.data()[k] - expected).abs() < 1e-12);
            if k < 29 {
                expected += 0.5 * inc.data()[k];
            }
        }
    }

    #[test]
    fn divergence_guard_reports_step() {
        let p = ou(-2000.0, 0.0);
        let grid = TimeGrid::new(50, 0.01).unwrap();
        let inc = Tensor::zeros(&[49, 1]);
        let err = integrate(&p, &Tensor::vector(vec![1.0]), 0, &grid, &inc).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("step")), "{err}");
    }

    #[test]
    fn increments_shape_checked() {
        let p = ou(1.0, 0.5);
        let grid = TimeGrid::unit(10).unwrap();
        assert!(integrate(&p, &Tensor::vector(vec![0.0]), 0, &grid, &Tensor::zeros(&[8, 1])).is_err());
    }

    fn small_model(seed: u64) -> Model {
        Model::new(Dims::default(), 3, seed).unwrap()
    }

    #[test]
    fn zero_diffusion_path_ignores_noise_and_matches_euler_ode() {
        let mut m = small_model(5);
        for id in m.dynamics_param_ids() {
            if m.params.name(id).starts_with("diffusion") {
                m.params.get_mut(id).data_mut().fill(0.0);
            }
        }
        let grid = TimeGrid::unit(40).unwrap();
        let z0 = Tensor::vector(vec![0.3, -0.4, 0.1, 0.9]);
        let a = crate::stochastic::brownian_increments(RngStream::new(1, 1), 39, grid.dt, 4).unwrap();
        let b = crate::stochastic::brownian_increments(RngStream::new(9, 9), 39, grid.dt, 4).unwrap();
        let pa = integrate(&m, &z0, 1, &grid, &a).unwrap();
        let pb = integrate(&m, &z0, 1, &grid, &b).unwrap();
        assert_eq!(pa.states, pb.states);

        // explicit Euler on the drift alone
        let e = m.embedding_row(1).unwrap();
        let mut z = z0.clone();
        for k in 0..40 {
            assert_eq!(pa.state(k), z);
            let f = m.drift_values(&z, &e).unwrap();
            z = z.zip_map(&f, |zi, fi| zi + fi * grid.dt);
        }
    }

    #[test]
    fn integration_is_deterministic() {
        let m = small_model(6);
        let grid = TimeGrid::unit(30).unwrap();
        let z0 = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);
        let inc = crate::stochastic::brownian_increments(RngStream::new(3, 3), 29, grid.dt, 4).unwrap();
        let a = integrate(&m, &z0, 2, &grid, &inc).unwrap();
        let b = integrate(&m, &z0, 2, &grid, &inc).unwrap();
        assert_eq!(a.states.data(), b.states.data());
        assert_eq!(a.state(0), z0);
    }

    fn decoder_loss_weights(points: usize) -> LinearStepLoss {
        let mut normals = RngStream::new(8, 8).normals();
        LinearStepLoss {
            weights: (0..points).map(|_| Tensor::vector(normals.take(4))).collect(),
        }
    }

    #[test]
    fn single_point_grid_replay_equals_direct_bitwise() {
        let m = small_model(7);
        let grid = TimeGrid::unit(1).unwrap();
        let z0 = Tensor::vector(vec![0.2, -0.1, 0.5, 0.0]);
        let loss = decoder_loss_weights(1);
        let rng = RngStream::new(1, 2);
        let direct = backward_direct(&m, &z0, 0, &grid, rng, &loss).unwrap();
        let replay = backward_replay(&m, &z0, 0, &grid, rng, rng, &loss, None).unwrap();
        assert_eq!(direct.params, replay.params);
        assert_eq!(direct.z0, replay.z0);
    }

    #[test]
    fn two_point_grid_replay_equals_direct() {
        let m = small_model(7);
        let grid = TimeGrid::unit(2).unwrap();
        let z0 = Tensor::vector(vec![0.2, -0.1, 0.5, 0.0]);
        let loss = decoder_loss_weights(2);
        let rng = RngStream::new(1, 2);
        let direct = backward_direct(&m, &z0, 0, &grid, rng, &loss).unwrap();
        let replay = backward_replay(&m, &z0, 0, &grid, rng, rng, &loss, Some(1)).unwrap();
        assert!(direct.params.max_abs_diff(&replay.params) < 1e-14);
        assert!(direct.z0.max_abs_diff(&replay.z0) < 1e-14);
    }

    #[test]
    fn replay_matches_direct_for_various_segment_lengths() {
        let m = small_model(11);
        let grid = TimeGrid::unit(37).unwrap();
        let z0 = Tensor::vector(vec![0.5, -0.3, 0.2, 0.8]);
        let loss = decoder_loss_weights(37);
        let rng = RngStream::new(4, 17);
        let direct = backward_direct(&m, &z0, 2, &grid, rng, &loss).unwrap();
        for seg in [1, 2, 5, 7, 36, 37, 100] {
            let replay = backward_replay(&m, &z0, 2, &grid, rng, rng, &loss, Some(seg)).unwrap();
            assert!(direct.params.max_abs_diff(&replay.params) < 1e-10, "segment {seg}");
            assert!(direct.z0.max_abs_diff(&replay.z0) < 1e-10, "segment {seg}");
            assert!((direct.loss - replay.loss).abs() < 1e-10);
        }
    }

    #[test]
    fn replay_with_wrong_stream_is_rejected() {
        let m = small_model(11);
        let grid = TimeGrid::unit(20).unwrap();
        let z0 = Tensor::vector(vec![0.5, -0.3, 0.2, 0.8]);
        let loss = decoder_loss_weights(20);
        let err = backward_replay(
            &m,
            &z0,
            0,
            &grid,
            RngStream::new(1, 1),
            RngStream::new(1, 2),
            &loss,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ReplayMismatch { .. }));
    }

    #[test]
    fn zero_weight_model_has_zero_constants() {
        let mut m = small_model(3);
        m.params.zero_all();
        let r = verify_assumptions(&m, &[0, 1, 2], 500, 1).unwrap();
        assert_eq!(r.lipschitz_estimate, 0.0);
        assert_eq!(r.growth_constant, 0.0);
        assert_eq!(r.embedding_bound, 0.0);
    }

    #[test]
    fn diffusion_growth_bounded_by_latent_size() {
        let m = small_model(3);
        let r = verify_assumptions(&m, &[0, 1, 2], 2000, 2).unwrap();
        assert!(r.diffusion_growth <= 4.0);
        assert!(r.lipschitz_estimate.is_finite() && r.lipschitz_estimate > 0.0);
        assert!(r.growth_constant.is_finite() && r.growth_constant >= r.diffusion_growth);
        assert!(verify_assumptions(&m, &[0], 1, 2).is_err());
    }
}
