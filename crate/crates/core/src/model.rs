//! Learnable components: district embeddings, the posterior encoder over the
//! initial latent state, drift and diffusion networks, and the decoder head.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Mlp, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::sdesolve::LatentDynamics;
use crate::stochastic::{RngStream, StreamKind};

/// Log-variance outputs are clamped to this range after every forward pass.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Half-width of the uniform embedding initialisation.
pub const EMBEDDING_INIT_BOUND: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Observed indicators per time step.
    pub obs: usize,
    /// Latent state size.
    pub latent: usize,
    /// District embedding size.
    pub embed: usize,
    /// Width of both hidden layers in every network.
    pub hidden: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            obs: 6,
            latent: 4,
            embed: 16,
            hidden: 64,
        }
    }
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if self.obs == 0 || self.latent == 0 || self.embed == 0 || self.hidden == 0 {
            return Err(Error::validation(format!("all model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn encoder_input(&self) -> usize {
        self.obs + self.embed
    }

    pub fn dynamics_input(&self) -> usize {
        self.latent + self.embed
    }
}

/// Mean and log-variance of a diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub mean: Tensor,
    pub logvar: Tensor,
}

/// Tape handles of a [`GaussianHead`].
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub logvar: Var,
}

impl GaussianVars {
    pub fn values(&self, tape: &Tape<'_>) -> GaussianHead {
        GaussianHead {
            mean: tape.value(self.mean).clone(),
            logvar: tape.value(self.logvar).clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub dims: Dims,
    pub districts: usize,
    pub params: ParamSet,
    embeddings: ParamId,
    encoder: Mlp,
    drift: Mlp,
    diffusion: Mlp,
    decoder: Mlp,
}

impl Model {
    /// Fresh model with seeded initialisation. Dense layers are uniform in
    /// `±sqrt(1/fan_in)`; embeddings uniform in `±EMBEDDING_INIT_BOUND`.
    pub fn new(dims: Dims, districts: usize, seed: u64) -> Result<Self> {
        dims.validate()?;
        if districts == 0 {
            return Err(Error::validation("model needs at least one district"));
        }
        let mut uniforms = RngStream::for_kind(seed, StreamKind::Init, 0, 0).uniforms();
        let mut u = || uniforms.next();
        let mut params = ParamSet::new();

        let emb: Vec<f64> = (0..districts * dims.embed)
            .map(|_| (2.0 * u() - 1.0) * EMBEDDING_INIT_BOUND)
            .collect();
        let embeddings = params.add("embeddings", Tensor::new(vec![districts, dims.embed], emb)?);
        let h = dims.hidden;
        let encoder = Mlp::new(
            &mut params,
            "encoder",
            &[dims.encoder_input(), h, h, 2 * dims.latent],
            Activation::Identity,
            &mut u,
        );
        let drift = Mlp::new(
            &mut params,
            "drift",
            &[dims.dynamics_input(), h, h, dims.latent],
            Activation::Identity,
            &mut u,
        );
        let diffusion = Mlp::new(
            &mut params,
            "diffusion",
            &[dims.dynamics_input(), h, h, dims.latent],
            Activation::Tanh,
            &mut u,
        );
        let decoder = Mlp::new(
            &mut params,
            "decoder",
            &[dims.dynamics_input(), h, h, 2 * dims.obs],
            Activation::Identity,
            &mut u,
        );
        Ok(Self {
            dims,
            districts,
            params,
            embeddings,
            encoder,
            drift,
            diffusion,
            decoder,
        })
    }

    pub fn embeddings_id(&self) -> ParamId {
        self.embeddings
    }

    pub fn embedding_row(&self, district: usize) -> Result<Tensor> {
        self.check_district(district)?;
        self.params.get(self.embeddings).row(district)
    }

    /// Parameter ids of the drift and diffusion networks.
    pub fn dynamics_param_ids(&self) -> Vec<ParamId> {
        self.drift
            .layers()
            .iter()
            .chain(self.diffusion.layers())
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    fn check_district(&self, district: usize) -> Result<()> {
        if district >= self.districts {
            return Err(Error::contract(format!(
                "district index {district} out of range (0..{})",
                self.districts
            )));
        }
        Ok(())
    }

    pub fn embed(&self, tape: &mut Tape<'_>, district: usize) -> Result<Var> {
        self.check_district(district)?;
        let table = tape.param(self.embeddings);
        tape.row(table, district)
    }

    fn split_head(&self, tape: &mut Tape<'_>, out: Var, size: usize) -> Result<GaussianVars> {
        let mean = tape.slice(out, 0, size)?;
        let raw = tape.slice(out, size, size)?;
        let logvar = tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok(GaussianVars { mean, logvar })
    }

    fn check_input(&self, tape: &Tape<'_>, v: Var, size: usize, what: &str) -> Result<()> {
        let t = tape.value(v);
        if t.shape() != [size] {
            return Err(Error::Dimension {
                op: "model input",
                left: vec![size],
                right: t.shape().to_vec(),
            });
        }
        if !t.all_finite() {
            return Err(Error::contract(format!("non-finite {what} input")));
        }
        Ok(())
    }

    /// Posterior over `z_0` from the first observation and the embedding.
    pub fn encode(&self, tape: &mut Tape<'_>, y0: Var, e: Var) -> Result<GaussianVars> {
        self.check_input(tape, y0, self.dims.obs, "encoder")?;
        let x = tape.concat(&[y0, e])?;
        let out = self.encoder.forward(tape, x)?;
        self.split_head(tape, out, self.dims.latent)
    }

    pub fn drift(&self, tape: &mut Tape<'_>, z: Var, e: Var) -> Result<Var> {
        let x = tape.concat(&[z, e])?;
        self.drift.forward(tape, x)
    }

    pub fn diffusion(&self, tape: &mut Tape<'_>, z: Var, e: Var) -> Result<Var> {
        let x = tape.concat(&[z, e])?;
        self.diffusion.forward(tape, x)
    }

    /// Observation likelihood head at latent state `z`.
    pub fn decode(&self, tape: &mut Tape<'_>, z: Var, e: Var) -> Result<GaussianVars> {
        self.check_input(tape, z, self.dims.latent, "decoder")?;
        let x = tape.concat(&[z, e])?;
        let out = self.decoder.forward(tape, x)?;
        self.split_head(tape, out, self.dims.obs)
    }

    pub fn encode_values(&self, y0: &Tensor, district: usize) -> Result<GaussianHead> {
        let mut tape = Tape::new(&self.params);
        let e = self.embed(&mut tape, district)?;
        let y = tape.leaf(y0.clone());
        Ok(self.encode(&mut tape, y, e)?.values(&tape))
    }

    pub fn decode_values(&self, z: &Tensor, district: usize) -> Result<GaussianHead> {
        let mut tape = Tape::new(&self.params);
        let e = self.embed(&mut tape, district)?;
        let zv = tape.leaf(z.clone());
        Ok(self.decode(&mut tape, zv, e)?.values(&tape))
    }

    pub fn drift_values(&self, z: &Tensor, e: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let (zv, ev) = (tape.leaf(z.clone()), tape.leaf(e.clone()));
        let f = self.drift(&mut tape, zv, ev)?;
        Ok(tape.value(f).clone())
    }

    pub fn diffusion_values(&self, z: &Tensor, e: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let (zv, ev) = (tape.leaf(z.clone()), tape.leaf(e.clone()));
        let g = self.diffusion(&mut tape, zv, ev)?;
        Ok(tape.value(g).clone())
    }
}

/// `mean + exp(logvar / 2) ⊙ eps`.
pub fn reparameterize(tape: &mut Tape<'_>, head: GaussianVars, eps: Var) -> Result<Var> {
    let (m, e) = (tape.value(head.mean), tape.value(eps));
    if m.shape() != e.shape() {
        return Err(Error::contract(format!(
            "reparameterize: eps shape {:?} does not match head shape {:?}",
            e.shape(),
            m.shape()
        )));
    }
    let half = tape.scale(head.logvar, 0.5)?;
    let std = tape.exp(half)?;
    let noise = tape.mul(std, eps)?;
    tape.add(head.mean, noise)
}

impl LatentDynamics for Model {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn latent_dim(&self) -> usize {
        self.dims.latent
    }

    fn context(&self, tape: &mut Tape<'_>, district: usize) -> Result<Var> {
        self.embed(tape, district)
    }

    fn coefficients(&self, tape: &mut Tape<'_>, z: Var, ctx: Var) -> Result<(Var, Var)> {
        let x = tape.concat(&[z, ctx])?;
        let f = self.drift.forward(tape, x)?;
        let g = self.diffusion.forward(tape, x)?;
        Ok((f, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Gradients;

    fn model() -> Model {
        Model::new(Dims::default(), 5, 42).unwrap()
    }

    fn zeroed() -> Model {
        let mut m = model();
        m.params.zero_all();
        m
    }

    #[test]
    fn layer_shapes_follow_dims() {
        let m = model();
        let shape = |name: &str| m.params.get(m.params.find(name).unwrap()).shape().to_vec();
        assert_eq!(shape("embeddings"), vec![5, 16]);
        assert_eq!(shape("encoder.0.weight"), vec![64, 22]);
        assert_eq!(shape("encoder.2.weight"), vec![8, 64]);
        assert_eq!(shape("drift.0.weight"), vec![64, 20]);
        assert_eq!(shape("drift.1.weight"), vec![64, 64]);
        assert_eq!(shape("drift.2.weight"), vec![4, 64]);
        assert_eq!(shape("diffusion.2.weight"), vec![4, 64]);
        assert_eq!(shape("decoder.0.weight"), vec![64, 20]);
        assert_eq!(shape("decoder.2.weight"), vec![12, 64]);
    }

    #[test]
    fn embedding_rows_within_init_bound_and_index_checked() {
        let m = model();
        for d in 0..5 {
            let row = m.embedding_row(d).unwrap();
            assert!(row.data().iter().all(|v| v.abs() <= EMBEDDING_INIT_BOUND));
        }
        assert!(matches!(m.embedding_row(5), Err(Error::Contract(_))));
    }

    #[test]
    fn head_shapes() {
        let m = model();
        let y0 = Tensor::vector(vec![0.1, -0.3, 0.5, 1.2, -0.8, 0.0]);
        let head = m.encode_values(&y0, 2).unwrap();
        assert_eq!(head.mean.shape(), &[4]);
        assert_eq!(head.logvar.shape(), &[4]);
        let dec = m.decode_values(&head.mean, 2).unwrap();
        assert_eq!(dec.mean.shape(), &[6]);
        assert_eq!(dec.logvar.shape(), &[6]);
        let e = m.embedding_row(2).unwrap();
        assert_eq!(m.drift_values(&head.mean, &e).unwrap().shape(), &[4]);
    }

    #[test]
    fn zero_weights_give_trivial_outputs() {
        let m = zeroed();
        let y0 = Tensor::vector(vec![1.0; 6]);
        let head = m.encode_values(&y0, 0).unwrap();
        assert!(head.mean.data().iter().chain(head.logvar.data()).all(|&v| v == 0.0));
        let z = Tensor::vector(vec![0.4, -2.0, 3.0, 1.0]);
        let e = m.embedding_row(0).unwrap();
        assert!(m.drift_values(&z, &e).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(m.diffusion_values(&z, &e).unwrap().data().iter().all(|&v| v == 0.0));
        let dec = m.decode_values(&z, 0).unwrap();
        assert!(dec.mean.data().iter().chain(dec.logvar.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_distinguishes_districts() {
        let m = model();
        let y0 = Tensor::vector(vec![0.2; 6]);
        assert_ne!(m.encode_values(&y0, 0).unwrap(), m.encode_values(&y0, 1).unwrap());
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let m = model();
        let y0 = Tensor::vector(vec![0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(m.encode_values(&y0, 0), Err(Error::Contract(_))));
        let z = Tensor::vector(vec![f64::INFINITY, 0.0, 0.0, 0.0]);
        assert!(matches!(m.decode_values(&z, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn diffusion_is_bounded() {
        let m = model();
        let mut normals = RngStream::new(1, 1).normals();
        for i in 0..20_000 {
            let z = Tensor::vector(normals.take(4).into_iter().map(|v| 10.0 * v).collect());
            let e = m.embedding_row(i % 5).unwrap();
            let g = m.diffusion_values(&z, &e).unwrap();
            assert!(g.data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn reparameterize_cases() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let mean = tape.leaf(Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]));
        let logvar = tape.leaf(Tensor::vector(vec![0.0; 4]));
        let head = GaussianVars { mean, logvar };
        let zero = tape.leaf(Tensor::vector(vec![0.0; 4]));
        let z = reparameterize(&mut tape, head, zero).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(mean).data());
        let ones = tape.leaf(Tensor::vector(vec![1.0; 4]));
        let z = reparameterize(&mut tape, head, ones).unwrap();
        assert_eq!(tape.value(z).data(), &[1.5, 0.0, 3.0, 1.0]);
        let short = tape.leaf(Tensor::vector(vec![1.0; 3]));
        assert!(matches!(reparameterize(&mut tape, head, short), Err(Error::Contract(_))));
    }

    #[test]
    fn reparameterize_logvar_gradient_matches_finite_difference() {
        let eps = [0.3, -1.1, 0.7, 2.0];
        let mu = [0.1, 0.2, -0.3, 0.4];
        let lv = [0.5, -0.2, 1.3, -2.0];
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let mean = tape.leaf(Tensor::vector(mu.to_vec()));
        let logvar = tape.leaf(Tensor::vector(lv.to_vec()));
        let e = tape.leaf(Tensor::vector(eps.to_vec()));
        let z = reparameterize(&mut tape, GaussianVars { mean, logvar }, e).unwrap();
        let s = tape.sum(z).unwrap();
        let adj = tape.backward_seeded(&[(s, Tensor::scalar(1.0))]).unwrap();
        let g = adj.wrt(logvar).unwrap();
        let f = |lvj: f64, j: usize| mu[j] + (lvj / 2.0).exp() * eps[j];
        for j in 0..4 {
            let h = 1e-5;
            let fd = (f(lv[j] + h, j) - f(lv[j] - h, j)) / (2.0 * h);
            assert!((g.data()[j] - fd).abs() / fd.abs().max(1e-12) < 1e-6);
        }
    }

    /// Loss touching one embedding row: sum of the decoder mean at a fixed z.
    fn decoder_mean_sum(m: &Model, district: usize) -> (f64, Gradients) {
        let mut tape = Tape::new(&m.params);
        let e = m.embed(&mut tape, district).unwrap();
        let z = tape.leaf(Tensor::vector(vec![0.3, -0.2, 0.9, 0.1]));
        let head = m.decode(&mut tape, z, e).unwrap();
        let lv = tape.sum(head.logvar).unwrap();
        let mu = tape.sum(head.mean).unwrap();
        let loss = tape.add(mu, lv).unwrap();
        (tape.value(loss).item().unwrap(), tape.backward(loss).unwrap())
    }

    #[test]
    fn embedding_and_decoder_gradients_match_finite_differences() {
        let m = model();
        let (_, grads) = decoder_mean_sum(&m, 3);
        let emb = m.embeddings_id();
        let emb_grad = grads.get(emb);
        // only row 3 receives gradient
        for d in 0..5 {
            let row = &emb_grad.data()[d * 16..(d + 1) * 16];
            assert_eq!(row.iter().any(|&v| v != 0.0), d == 3);
        }
        let w = m.params.find("decoder.0.weight").unwrap();
        for (id, idx) in [(emb, 3 * 16 + 5), (emb, 3 * 16 + 11), (w, 17), (w, 600)] {
            let h = 1e-5;
            let mut plus = m.clone();
            plus.params.get_mut(id).data_mut()[idx] += h;
            let mut minus = m.clone();
            minus.params.get_mut(id).data_mut()[idx] -= h;
            let fd = (decoder_mean_sum(&plus, 3).0 - decoder_mean_sum(&minus, 3).0) / (2.0 * h);
            let an = grads.get(id).data()[idx];
            assert!((an - fd).abs() / an.abs().max(fd.abs()).max(1e-8) < 1e-6, "{an} vs {fd}");
        }
    }
}
