//! Full-batch variational training, checkpoints, and the value-only
//! inference paths used by evaluation, prediction and gradient checking.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{NormStats, Panel};
use crate::diffcore::{AdamConfig, AdamState, Gradients, Tape, Tensor, Var};
use crate::model::{reparameterize, Dims, GaussianHead, Model};
use crate::objective::{elbo_loss, kl_on_tape, nll_step_on_tape, BetaSchedule, LossBreakdown};
use crate::sdesolve::{
    backward_replay, integrate, integrate_on_tape, LatentPath, StepLoss, TimeGrid,
};
use crate::stochastic::{brownian_increments, standard_normal, RngStream, StreamKind};
use crate::{Error, Result};

/// Districts and Monte Carlo samples share the 24-bit stream index:
/// `sample << SAMPLE_SHIFT | district`.
const SAMPLE_SHIFT: u32 = 12;
const MAX_INDEX: usize = 1 << SAMPLE_SHIFT;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackwardMode {
    /// One tape holds the whole trajectory.
    #[default]
    Direct,
    /// Segment checkpoints with noise regenerated on the backward sweep.
    Replay,
}

impl FromStr for BackwardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "replay" => Ok(Self::Replay),
            other => Err(Error::validation(format!(
                "backward mode must be `direct` or `replay`, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for BackwardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Direct => "direct",
            Self::Replay => "replay",
        })
    }
}

/// Flat training configuration; every field has a default so a config file
/// only needs the keys it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub beta_final: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub backward_mode: BackwardMode,
    /// Replay segment length; `ceil(sqrt(T))` when absent.
    pub segment_len: Option<usize>,
    /// Monte Carlo samples per district per epoch.
    pub mc_samples: usize,
    pub clip_gradients: bool,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub latent: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let beta = BetaSchedule::default();
        let dims = Dims::default();
        Self {
            epochs: 1000,
            lr: adam.lr,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            beta_final: beta.beta_final,
            warmup_epochs: beta.warmup_epochs,
            seed: 0,
            backward_mode: BackwardMode::Direct,
            segment_len: None,
            mc_samples: 1,
            clip_gradients: true,
            grad_clip: 10.0,
            checkpoint_every: 100,
            latent: dims.latent,
            embed: dims.embed,
            hidden: dims.hidden,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::validation(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return fail(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        if !(self.beta_final >= 0.0) || !self.beta_final.is_finite() {
            return fail(format!("beta_final must be >= 0, got {}", self.beta_final));
        }
        if self.mc_samples == 0 || self.mc_samples >= MAX_INDEX {
            return fail(format!("mc_samples must be in 1..{MAX_INDEX}"));
        }
        if self.clip_gradients && !(self.grad_clip > 0.0) {
            return fail(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be at least 1".into());
        }
        if self.segment_len == Some(0) {
            return fail("segment_len must be at least 1".into());
        }
        self.dims(1)?;
        Ok(())
    }

    pub fn dims(&self, obs: usize) -> Result<Dims> {
        let dims = Dims {
            obs,
            latent: self.latent,
            embed: self.embed,
            hidden: self.hidden,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn schedule(&self) -> BetaSchedule {
        BetaSchedule {
            beta_final: self.beta_final,
            warmup_epochs: self.warmup_epochs,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Normalized per-district series and their time grid.
#[derive(Clone, Debug)]
pub struct TrainingData {
    series: Vec<Tensor>,
    grid: TimeGrid,
}

impl TrainingData {
    pub fn new(normalized: &Panel) -> Result<Self> {
        if normalized.districts() >= MAX_INDEX {
            return Err(Error::validation(format!(
                "at most {} districts are supported",
                MAX_INDEX - 1
            )));
        }
        if normalized.months() < 2 {
            return Err(Error::validation("panel needs at least two months"));
        }
        Ok(Self {
            series: (0..normalized.districts()).map(|d| normalized.series(d)).collect(),
            grid: TimeGrid::unit(normalized.months())?,
        })
    }

    pub fn districts(&self) -> usize {
        self.series.len()
    }

    pub fn indicators(&self) -> usize {
        self.series[0].shape()[1]
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn series(&self, district: usize) -> &Tensor {
        &self.series[district]
    }
}

/// Noise for one posterior sample of one district: `ε` for `z_0` and the
/// Brownian increments of the path.
#[derive(Clone, Copy, Debug)]
pub struct SampleStreams {
    pub posterior: RngStream,
    pub diffusion: RngStream,
}

impl SampleStreams {
    pub fn training(seed: u64, epoch: usize, district: usize, sample: usize) -> Self {
        let index = ((sample << SAMPLE_SHIFT) | district) as u64;
        Self {
            posterior: RngStream::for_kind(seed, StreamKind::Posterior, epoch as u64, index),
            diffusion: RngStream::for_kind(seed, StreamKind::Diffusion, epoch as u64, index),
        }
    }

    /// Streams outside training (`Eval`, `Predict`, `GradCheck`).
    pub fn auxiliary(seed: u64, kind: StreamKind, district: usize, sample: usize) -> Self {
        let index = ((sample << SAMPLE_SHIFT) | district) as u64;
        Self {
            posterior: RngStream::for_kind(seed, kind, 0, index),
            diffusion: RngStream::for_kind(seed, kind, 1, index),
        }
    }

    fn draw(&self, latent: usize, grid: &TimeGrid) -> Result<(Tensor, Tensor)> {
        Ok((
            standard_normal(self.posterior, latent),
            brownian_increments(self.diffusion, grid.transitions(), grid.dt, latent)?,
        ))
    }
}

/// Decoder NLL as a per-step loss: `scale · Σ_j [lv + (y − μ)² e^{−lv}]` at each step.
struct DecoderNll<'a> {
    model: &'a Model,
    y: &'a Tensor,
    scale: f64,
}

impl StepLoss for DecoderNll<'_> {
    fn record(&self, tape: &mut Tape<'_>, step: usize, z: Var, ctx: Var) -> Result<Option<Var>> {
        let head = self.model.decode(tape, z, ctx)?;
        nll_step_on_tape(tape, self.y.row(step)?.data(), head, self.scale).map(Some)
    }
}

/// Loss and parameter gradient of one district's ELBO term for a fixed draw
/// of the noise. With `L` samples the NLL is averaged and the KL is exact.
pub fn district_objective(
    model: &Model,
    y: &Tensor,
    district: usize,
    grid: &TimeGrid,
    noise: &[SampleStreams],
    beta: f64,
    mode: BackwardMode,
    segment_len: Option<usize>,
) -> Result<(LossBreakdown, Gradients)> {
    let n = model.dims.latent;
    let obs = model.dims.obs;
    if y.shape() != [grid.points, obs] {
        return Err(Error::Dimension {
            op: "district_objective y",
            left: vec![grid.points, obs],
            right: y.shape().to_vec(),
        });
    }
    let samples = noise.len() as f64;
    let scale = 1.0 / (2.0 * (obs * grid.points) as f64) / samples;
    let mut grads = Gradients::zeros_like(&model.params);
    let mut nll = 0.0;
    let mut kl = 0.0;
    for (s, streams) in noise.iter().enumerate() {
        let eps = standard_normal(streams.posterior, n);
        let mut tape = Tape::new(&model.params);
        let e = model.embed(&mut tape, district)?;
        let y0 = tape.leaf(y.row(0)?);
        let head = model.encode(&mut tape, y0, e)?;
        let epsv = tape.leaf(eps);
        let z0 = reparameterize(&mut tape, head, epsv)?;
        let klv = kl_on_tape(&mut tape, head)?;
        let kl_weight = if s == 0 { beta } else { 0.0 };
        if s == 0 {
            kl = tape.value(klv).item()?;
        }
        match mode {
            BackwardMode::Direct => {
                let incs = brownian_increments(streams.diffusion, grid.transitions(), grid.dt, n)?;
                let states = integrate_on_tape(model, &mut tape, z0, e, grid, &incs)?;
                let loss = DecoderNll { model, y, scale };
                let mut total = None;
                for (k, &z) in states.iter().enumerate() {
                    let l = loss.record(&mut tape, k, z, e)?.expect("every step contributes");
                    total = Some(match total {
                        Some(t) => tape.add(t, l)?,
                        None => l,
                    });
                }
                let total = total.expect("grid has at least one point");
                nll += tape.value(total).item()?;
                let adj = tape.backward_seeded(&[(total, Tensor::scalar(1.0)), (klv, Tensor::scalar(kl_weight))])?;
                grads.accumulate(&adj.params);
            }
            BackwardMode::Replay => {
                let z0_value = tape.value(z0).clone();
                let loss = DecoderNll { model, y, scale };
                let path = backward_replay(
                    model,
                    &z0_value,
                    district,
                    grid,
                    streams.diffusion,
                    streams.diffusion,
                    &loss,
                    segment_len,
                )?;
                nll += path.loss;
                grads.accumulate(&path.params);
                let adj = tape.backward_seeded(&[(z0, path.z0), (klv, Tensor::scalar(kl_weight))])?;
                grads.accumulate(&adj.params);
            }
        }
    }
    let breakdown = LossBreakdown::from_parts(nll, kl, beta);
    if !breakdown.total.is_finite() {
        return Err(Error::numerical(format!("district {district}: non-finite loss")));
    }
    Ok((breakdown, grads))
}

/// Value-only loss of one district for a fixed noise draw; shares no code
/// with the differentiable path beyond the model's forward maps.
pub fn district_loss_value(
    model: &Model,
    y: &Tensor,
    district: usize,
    grid: &TimeGrid,
    noise: &[SampleStreams],
    beta: f64,
) -> Result<LossBreakdown> {
    let mut nll = 0.0;
    let mut kl = 0.0;
    for (s, streams) in noise.iter().enumerate() {
        let (path, head) = sample_path(model, y, district, grid, streams)?;
        let decoded = decode_path(model, &path, district)?;
        let part = elbo_loss(y, &decoded, &head, beta)?;
        nll += part.nll / noise.len() as f64;
        if s == 0 {
            kl = part.kl;
        }
    }
    Ok(LossBreakdown::from_parts(nll, kl, beta))
}

fn sample_path(
    model: &Model,
    y: &Tensor,
    district: usize,
    grid: &TimeGrid,
    streams: &SampleStreams,
) -> Result<(LatentPath, GaussianHead)> {
    let head = model.encode_values(&y.row(0)?, district)?;
    let (eps, incs) = streams.draw(model.dims.latent, grid)?;
    let z0 = Tensor::vector(
        head.mean
            .data()
            .iter()
            .zip(head.logvar.data())
            .zip(eps.data())
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect(),
    );
    Ok((integrate(model, &z0, district, grid, &incs)?, head))
}

fn decode_path(model: &Model, path: &LatentPath, district: usize) -> Result<Vec<GaussianHead>> {
    (0..path.grid.points)
        .map(|k| model.decode_values(&path.state(k), district))
        .collect()
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub nll: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub wall_seconds: f64,
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs; the next epoch has this index.
    pub epoch: usize,
}

impl TrainState {
    pub fn init(config: &TrainConfig, data: &TrainingData) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.dims(data.indicators())?, data.districts(), config.seed)?;
        let adam = AdamState::new(&model.params, config.adam());
        Ok(Self { model, adam, epoch: 0 })
    }
}

/// One full-batch epoch: every district's gradient averaged, optionally
/// clipped, then a single Adam step.
pub fn train_epoch(state: &mut TrainState, data: &TrainingData, config: &TrainConfig) -> Result<EpochLog> {
    let start = Instant::now();
    let epoch = state.epoch;
    let beta = config.schedule().beta_at(epoch);
    let grid = data.grid();
    let model = &state.model;
    if model.districts != data.districts() || model.dims.obs != data.indicators() {
        return Err(Error::validation(format!(
            "model covers {} districts × {} indicators, data has {} × {}",
            model.districts,
            model.dims.obs,
            data.districts(),
            data.indicators()
        )));
    }
    let results: Vec<Result<(LossBreakdown, Gradients)>> = (0..data.districts())
        .into_par_iter()
        .map(|d| {
            let noise: Vec<SampleStreams> = (0..config.mc_samples)
                .map(|s| SampleStreams::training(config.seed, epoch, d, s))
                .collect();
            district_objective(
                model,
                data.series(d),
                d,
                &grid,
                &noise,
                beta,
                config.backward_mode,
                config.segment_len,
            )
            .map_err(|e| match e {
                Error::Numerical(m) => Error::numerical(format!("epoch {epoch}, district {d}: {m}")),
                other => other,
            })
        })
        .collect();

    let count = data.districts() as f64;
    let mut grads = Gradients::zeros_like(&model.params);
    let (mut nll, mut kl) = (0.0, 0.0);
    for r in results {
        let (b, g) = r?;
        nll += b.nll;
        kl += b.kl;
        grads.accumulate(&g);
    }
    grads.scale(1.0 / count);
    let breakdown = LossBreakdown::from_parts(nll / count, kl / count, beta);
    let grad_norm = if config.clip_gradients {
        grads.clip_global_norm(config.grad_clip)
    } else {
        grads.global_norm()
    };
    state.adam.config = config.adam();
    state
        .adam
        .step(&mut state.model.params, &grads)
        .map_err(|e| match e {
            Error::Numerical(m) => Error::numerical(format!("epoch {epoch}: {m}")),
            other => other,
        })?;
    state.epoch += 1;
    Ok(EpochLog {
        epoch,
        nll: breakdown.nll,
        kl: breakdown.kl,
        beta,
        total: breakdown.total,
        grad_norm,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Train until `config.epochs` epochs are complete, calling `after_epoch`
/// once per epoch (checkpointing lives there).
pub fn fit(
    state: &mut TrainState,
    data: &TrainingData,
    config: &TrainConfig,
    mut after_epoch: impl FnMut(&TrainState, &EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let mut logs = Vec::with_capacity(config.epochs.saturating_sub(state.epoch));
    while state.epoch < config.epochs {
        let log = train_epoch(state, data, config)?;
        after_epoch(state, &log)?;
        logs.push(log);
    }
    Ok(logs)
}

pub const CHECKPOINT_FORMAT: &str = "vnsde-checkpoint-1";

/// Self-describing JSON checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Digest of the raw panel the model was trained on.
    pub panel_digest: String,
    pub norm: NormStats,
    pub district_names: Vec<String>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, panel: &Panel, norm: &NormStats, state: &TrainState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            config: config.clone(),
            config_hash: config.hash(),
            panel_digest: panel.digest(),
            norm: norm.clone(),
            district_names: panel.names().to_vec(),
            state: state.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string(self)?;
        json.push('\n');
        crate::data::write_file(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text)
            .map_err(|e| Error::validation(format!("{}: not a checkpoint: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::validation(format!(
                "{}: unsupported checkpoint format `{}`",
                path.display(),
                ckpt.format
            )));
        }
        if ckpt.config.hash() != ckpt.config_hash {
            return Err(Error::validation(format!(
                "{}: stored config does not match its hash",
                path.display()
            )));
        }
        ckpt.state.model.params.all_finite().then_some(()).ok_or_else(|| {
            Error::validation(format!("{}: checkpoint holds non-finite parameters", path.display()))
        })?;
        Ok(ckpt)
    }

    /// Refuse a panel other than the one trained on.
    pub fn check_panel(&self, panel: &Panel) -> Result<()> {
        let digest = panel.digest();
        if digest != self.panel_digest {
            return Err(Error::validation(format!(
                "panel does not match the checkpoint: trained on panel {}…, got {}…; \
                 evaluate with the panel file used for training",
                &self.panel_digest[..12],
                &digest[..12]
            )));
        }
        Ok(())
    }
}

/// Per-district NLL and the aggregate ELBO decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub district_nll: Vec<f64>,
    pub district_kl: Vec<f64>,
    pub summary: LossBreakdown,
    pub samples: usize,
}

/// Monte Carlo estimate of every district's loss on `Eval` streams.
pub fn evaluate(model: &Model, data: &TrainingData, beta: f64, samples: usize, seed: u64) -> Result<Evaluation> {
    if samples == 0 || samples >= MAX_INDEX {
        return Err(Error::validation(format!("samples must be in 1..{MAX_INDEX}")));
    }
    let grid = data.grid();
    let parts: Vec<LossBreakdown> = (0..data.districts())
        .into_par_iter()
        .map(|d| {
            let noise: Vec<SampleStreams> = (0..samples)
                .map(|s| SampleStreams::auxiliary(seed, StreamKind::Eval, d, s))
                .collect();
            district_loss_value(model, data.series(d), d, &grid, &noise, beta)
        })
        .collect::<Result<_>>()?;
    let count = parts.len() as f64;
    let nll = parts.iter().map(|p| p.nll).sum::<f64>() / count;
    let kl = parts.iter().map(|p| p.kl).sum::<f64>() / count;
    Ok(Evaluation {
        district_nll: parts.iter().map(|p| p.nll).collect(),
        district_kl: parts.iter().map(|p| p.kl).collect(),
        summary: LossBreakdown::from_parts(nll, kl, beta),
        samples,
    })
}

/// Predictive mean and standard deviation per month and indicator, in
/// normalized units. Multiple samples combine as an equal-weight mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `T × N`
    pub mean: Tensor,
    /// `T × N`
    pub std: Tensor,
    pub samples: usize,
}

pub fn predict(model: &Model, y: &Tensor, district: usize, samples: usize, seed: u64) -> Result<Prediction> {
    if samples == 0 || samples >= MAX_INDEX {
        return Err(Error::validation(format!("samples must be in 1..{MAX_INDEX}")));
    }
    let grid = TimeGrid::unit(y.shape()[0])?;
    let cells = y.len();
    let mut first = vec![0.0; cells];
    let mut second = vec![0.0; cells];
    for s in 0..samples {
        let streams = SampleStreams::auxiliary(seed, StreamKind::Predict, district, s);
        let (path, _) = sample_path(model, y, district, &grid, &streams)?;
        for (k, head) in decode_path(model, &path, district)?.into_iter().enumerate() {
            let n = head.mean.len();
            for (j, (m, lv)) in head.mean.data().iter().zip(head.logvar.data()).enumerate() {
                first[k * n + j] += m;
                second[k * n + j] += lv.exp() + m * m;
            }
        }
    }
    let inv = 1.0 / samples as f64;
    let mean: Vec<f64> = first.iter().map(|v| v * inv).collect();
    let std: Vec<f64> = second
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s * inv - m * m).max(0.0).sqrt())
        .collect();
    Ok(Prediction {
        mean: Tensor::new(y.shape().to_vec(), mean)?,
        std: Tensor::new(y.shape().to_vec(), std)?,
        samples,
    })
}

/// Fraction of observations inside `mean ± 2·std`.
pub fn band_coverage(y: &Tensor, prediction: &Prediction) -> f64 {
    let inside = y
        .data()
        .iter()
        .zip(prediction.mean.data().iter().zip(prediction.std.data()))
        .filter(|(v, (m, s))| (*v - *m).abs() <= 2.0 * *s)
        .count();
    inside as f64 / y.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub step: f64,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Option<GradCheckEntry>,
    pub mode: BackwardMode,
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compare the analytic gradient of the mean ELBO over `series` against
/// central differences with step `h` on at least `coordinates` parameter
/// entries, spread round-robin over every parameter tensor.
pub fn gradient_check(
    model: &Model,
    series: &[Tensor],
    beta: f64,
    coordinates: usize,
    h: f64,
    seed: u64,
    mode: BackwardMode,
) -> Result<GradCheckReport> {
    if series.is_empty() || series.len() > model.districts {
        return Err(Error::contract(format!(
            "gradient check needs 1..={} district series, got {}",
            model.districts,
            series.len()
        )));
    }
    let grid = TimeGrid::unit(series[0].shape()[0])?;
    let noise: Vec<SampleStreams> = (0..series.len())
        .map(|d| SampleStreams::auxiliary(seed, StreamKind::GradCheck, d, 0))
        .collect();
    let count = series.len() as f64;

    let mut analytic = Gradients::zeros_like(&model.params);
    for (d, y) in series.iter().enumerate() {
        let (_, g) = district_objective(model, y, d, &grid, &noise[d..d + 1], beta, mode, None)?;
        analytic.accumulate(&g);
    }
    analytic.scale(1.0 / count);

    let loss_at = |m: &Model| -> Result<f64> {
        let mut total = 0.0;
        for (d, y) in series.iter().enumerate() {
            total += district_loss_value(m, y, d, &grid, &noise[d..d + 1], beta)?.total;
        }
        Ok(total / count)
    };

    let mut picks = RngStream::for_kind(seed, StreamKind::GradCheck, 2, 0).uniforms();
    let ids: Vec<_> = model.params.ids().collect();
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        coordinates: 0,
        step: h,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        mode,
    };
    let mut k = 0;
    while report.coordinates < coordinates {
        let id = ids[k % ids.len()];
        k += 1;
        let len = model.params.get(id).len();
        let index = ((picks.next() * len as f64) as usize).min(len - 1);
        let original = model.params.get(id).data()[index];
        probe.params.get_mut(id).data_mut()[index] = original + h;
        let plus = loss_at(&probe)?;
        probe.params.get_mut(id).data_mut()[index] = original - h;
        let minus = loss_at(&probe)?;
        probe.params.get_mut(id).data_mut()[index] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.get(id).data()[index];
        let rel = relative_error(a, numeric, GRAD_CHECK_FLOOR);
        report.coordinates += 1;
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(GradCheckEntry {
                param: model.params.name(id).to_string(),
                index,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}
