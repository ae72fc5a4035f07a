//! Command-line front end. Every command writes `manifest.json` into its
//! output directory; `rerun` replays a manifest.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{
    load_anchors, normalize, read_panel, synthesize, write_file, write_panel, NormStats, PanelMeta,
    DEFAULT_SIGMA,
};
use crate::diffcore::Tensor;
use crate::model::{Dims, Model};
use crate::sdesolve::verify_assumptions;
use crate::stochastic::{standard_normal, RngStream, StreamKind};
use crate::training::{
    band_coverage, evaluate, fit, gradient_check, predict, BackwardMode, Checkpoint, TrainConfig,
    TrainState, TrainingData,
};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PANEL_FILE: &str = "panel.csv";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.json";
pub const EVAL_FILE: &str = "eval.csv";
pub const ELBO_FILE: &str = "elbo.json";
pub const VERIFY_FILE: &str = "verify.json";

#[derive(Debug, Parser)]
#[command(name = "vnsde", version, about = "Variational neural SDE for district panel time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Subcommand)]
pub enum Command {
    /// Interpolate survey anchors into a monthly panel.
    Synth(SynthArgs),
    /// Train on a panel.
    Train(TrainArgs),
    /// Per-district NLL and ELBO decomposition of a checkpoint.
    Eval(EvalArgs),
    /// Predictive mean and ±2σ bands for one district.
    Predict(PredictArgs),
    /// Assumption estimates and a finite-difference gradient check.
    Verify(VerifyArgs),
    /// Re-execute the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Clone, Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub anchors: PathBuf,
    /// Bridge volatility in percentage points per √month.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// TOML file with flat `TrainConfig` keys; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    pub backward_mode: Option<BackwardMode>,
    /// Continue from a checkpoint; its stored config is the base.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<BackwardMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub panel: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Monte Carlo samples per district.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub panel: PathBuf,
    /// District name or index; `all` predicts every district.
    #[arg(long)]
    pub district: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Debug, Args)]
pub struct VerifyArgs {
    /// Checkpoint to inspect; a fresh seeded model when omitted.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100_000)]
    pub assumption_samples: usize,
    #[arg(long, default_value_t = 200)]
    pub coordinates: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    #[arg(long, default_value_t = 3)]
    pub districts: usize,
    #[arg(long, default_value_t = 20)]
    pub months: usize,
}

#[derive(Clone, Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write into this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    pub config: Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub wall_seconds: f64,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct Run {
    args: Vec<String>,
    started: u64,
    clock: Instant,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let path = dir.join(name);
        write_file(&path, bytes)?;
        if !self.outputs.contains(&path) {
            self.outputs.push(path);
        }
        Ok(())
    }

    fn finish(self, dir: &Path, command: &str, config: Value, seed: u64, inputs: Vec<PathBuf>) -> Result<()> {
        let manifest = RunManifest {
            command: command.into(),
            args: self.args,
            config,
            seed,
            inputs,
            outputs: self.outputs,
            code_version: env!("CARGO_PKG_VERSION").into(),
            started_unix: self.started,
            finished_unix: unix_now(),
            wall_seconds: self.clock.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Parse and run; returns the process exit code.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let args = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, args: Vec<String>) -> Result<()> {
    let run = Run {
        args,
        started: unix_now(),
        clock: Instant::now(),
        outputs: Vec::new(),
    };
    match command {
        Command::Synth(a) => cmd_synth(&a, run),
        Command::Train(a) => cmd_train(&a, run),
        Command::Eval(a) => cmd_eval(&a, run),
        Command::Predict(a) => cmd_predict(&a, run),
        Command::Verify(a) => cmd_verify(&a, run),
        Command::Rerun(a) => cmd_rerun(&a),
    }
}

fn cmd_synth(a: &SynthArgs, mut run: Run) -> Result<()> {
    let anchors = load_anchors(&a.anchors)?;
    let (panel, report) = synthesize(&anchors, a.sigma, a.seed)?;
    let norm = NormStats::compute(&panel)?;
    prepare_out(&a.out)?;
    let meta = PanelMeta {
        seed: a.seed,
        sigma: a.sigma,
        month0: panel.month0().into(),
        districts: panel.names().to_vec(),
        months: panel.months(),
        indicators: panel.indicators(),
        norm,
        clipped: report.clipped,
    };
    let path = a.out.join(PANEL_FILE);
    write_panel(&path, &panel, &meta)?;
    run.outputs.push(path.clone());
    run.outputs.push(crate::data::sidecar_path(&path));
    println!(
        "synthesized {} districts × {} months × {} indicators; clipped {} of {} cells",
        panel.districts(),
        panel.months(),
        panel.indicators(),
        report.clipped,
        report.cells
    );
    run.finish(
        &a.out,
        "synth",
        json!({ "sigma": a.sigma, "seed": a.seed }),
        a.seed,
        vec![a.anchors.clone()],
    )
}

fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch{epoch:04}.json")
}

fn cmd_train(a: &TrainArgs, mut run: Run) -> Result<()> {
    let (raw, meta) = read_panel(&a.panel)?;
    let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut config = match (&resumed, &a.config) {
        (Some(ck), _) => ck.config.clone(),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            TrainConfig::from_toml(&text)?
        }
        (None, None) => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(lr) = a.lr {
        config.lr = lr;
    }
    if let Some(m) = a.backward_mode {
        config.backward_mode = m;
    }
    config.validate()?;

    let (normalized, norm) = normalize(&raw, Some(&meta.norm))?;
    let data = TrainingData::new(&normalized)?;
    let mut state = match &resumed {
        Some(ck) => {
            ck.check_panel(&raw)?;
            if a.seed.is_some() && a.seed != Some(ck.config.seed) {
                return Err(Error::validation("--seed cannot change when resuming"));
            }
            ck.state.clone()
        }
        None => TrainState::init(&config, &data)?,
    };
    prepare_out(&a.out)?;

    let mut curve = String::from("epoch,nll,kl,beta,total\n");
    let logs = fit(&mut state, &data, &config, |s, log| {
        if s.epoch % config.checkpoint_every == 0 && s.epoch < config.epochs {
            let ck = Checkpoint::new(&config, &raw, &norm, s);
            let json = serde_json::to_string(&ck)? + "\n";
            run.write(&a.out, &checkpoint_name(s.epoch), json.as_bytes())?;
            println!(
                "epoch {:>5}  nll {:+.6}  kl {:.6}  beta {:.4}  total {:+.6}",
                log.epoch, log.nll, log.kl, log.beta, log.total
            );
        }
        Ok(())
    })?;
    for l in &logs {
        curve.push_str(&format!("{},{},{},{},{}\n", l.epoch, l.nll, l.kl, l.beta, l.total));
    }
    run.write(&a.out, LOSS_CURVE_FILE, curve.as_bytes())?;
    let ck = Checkpoint::new(&config, &raw, &norm, &state);
    let json = serde_json::to_string(&ck)? + "\n";
    run.write(&a.out, FINAL_CHECKPOINT, json.as_bytes())?;
    if let Some(last) = logs.last() {
        println!(
            "trained to epoch {}: nll {:+.6}  kl {:.6}  total {:+.6}",
            state.epoch, last.nll, last.kl, last.total
        );
    }
    let mut inputs = vec![a.panel.clone()];
    inputs.extend(a.config.clone());
    inputs.extend(a.resume.clone());
    run.finish(&a.out, "train", serde_json::to_value(&config)?, config.seed, inputs)
}

fn load_for_inference(ckpt: &Path, panel: &Path) -> Result<(Checkpoint, crate::data::Panel, TrainingData)> {
    let ck = Checkpoint::load(ckpt)?;
    let (raw, _) = read_panel(panel)?;
    ck.check_panel(&raw)?;
    let (normalized, _) = normalize(&raw, Some(&ck.norm))?;
    let data = TrainingData::new(&normalized)?;
    Ok((ck, raw, data))
}

fn cmd_eval(a: &EvalArgs, mut run: Run) -> Result<()> {
    let (ck, raw, data) = load_for_inference(&a.ckpt, &a.panel)?;
    let beta = ck.config.beta_final;
    let ev = evaluate(&ck.state.model, &data, beta, a.samples, a.seed)?;
    prepare_out(&a.out)?;

    let mut order: Vec<usize> = (0..ev.district_nll.len()).collect();
    order.sort_by(|&i, &j| ev.district_nll[i].total_cmp(&ev.district_nll[j]).then(i.cmp(&j)));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["district", "nll"])?;
    for &d in &order {
        w.write_record([raw.names()[d].as_str(), &ev.district_nll[d].to_string()])?;
    }
    w.write_record(["Total", &ev.summary.total.to_string()])?;
    let bytes = w.into_inner().map_err(|e| Error::numerical(e.to_string()))?;
    run.write(&a.out, EVAL_FILE, &bytes)?;

    let districts: Vec<Value> = (0..raw.districts())
        .map(|d| json!({ "district": raw.names()[d], "nll": ev.district_nll[d], "kl": ev.district_kl[d] }))
        .collect();
    let elbo = json!({
        "mean_nll": ev.summary.nll,
        "mean_kl": ev.summary.kl,
        "beta": ev.summary.beta,
        "total": ev.summary.total,
        "samples": ev.samples,
        "epoch": ck.state.epoch,
        "districts": districts,
    });
    run.write(&a.out, ELBO_FILE, (serde_json::to_string_pretty(&elbo)? + "\n").as_bytes())?;
    println!(
        "mean nll {:+.6}  mean kl {:.6}  beta {}  total {:+.6}",
        ev.summary.nll, ev.summary.kl, ev.summary.beta, ev.summary.total
    );
    run.finish(
        &a.out,
        "eval",
        json!({ "samples": a.samples, "seed": a.seed, "config_hash": ck.config_hash }),
        a.seed,
        vec![a.ckpt.clone(), a.panel.clone()],
    )
}

pub fn prediction_file(district: usize, indicator: usize) -> String {
    format!("predict_d{district:02}_i{indicator}.csv")
}

fn cmd_predict(a: &PredictArgs, mut run: Run) -> Result<()> {
    let (ck, raw, data) = load_for_inference(&a.ckpt, &a.panel)?;
    let targets: Vec<usize> = if a.district == "all" {
        (0..raw.districts()).collect()
    } else {
        vec![raw.resolve_district(&a.district)?]
    };
    prepare_out(&a.out)?;
    let norm = &ck.norm;
    let mut summary = Vec::new();
    let (mut inside, mut total) = (0usize, 0usize);
    for &d in &targets {
        let y = data.series(d);
        let p = predict(&ck.state.model, y, d, a.samples, a.seed)?;
        let (t_count, n) = (y.shape()[0], y.shape()[1]);
        let cov = band_coverage(y, &p);
        inside += (cov * y.len() as f64).round() as usize;
        total += y.len();
        for i in 0..n {
            let mut csv = String::from("month,observed,mean,lower,upper\n");
            for t in 0..t_count {
                let mean = norm.to_raw(i, p.mean.data()[t * n + i]);
                let sd = p.std.data()[t * n + i] * norm.std[i];
                csv.push_str(&format!(
                    "{t},{},{mean},{},{}\n",
                    raw.get(d, t, i),
                    mean - 2.0 * sd,
                    mean + 2.0 * sd
                ));
            }
            run.write(&a.out, &prediction_file(d, i), csv.as_bytes())?;
        }
        summary.push(json!({ "district": raw.names()[d], "index": d, "coverage": cov }));
    }
    let overall = inside as f64 / total as f64;
    let report = json!({ "samples": a.samples, "coverage": overall, "districts": summary });
    run.write(&a.out, "predict.json", (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    println!("±2σ coverage {:.4} over {} district(s)", overall, targets.len());
    run.finish(
        &a.out,
        "predict",
        json!({ "district": a.district, "samples": a.samples, "seed": a.seed }),
        a.seed,
        vec![a.ckpt.clone(), a.panel.clone()],
    )
}

fn cmd_verify(a: &VerifyArgs, mut run: Run) -> Result<()> {
    let (model, beta) = match &a.ckpt {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            (ck.state.model, ck.config.beta_final)
        }
        None => {
            let cfg = TrainConfig::default();
            (Model::new(Dims::default(), a.districts.max(1), a.seed)?, cfg.beta_final)
        }
    };
    if a.districts == 0 || a.months < 2 {
        return Err(Error::validation("verify needs at least one district and two months"));
    }
    let districts: Vec<usize> = (0..model.districts).collect();
    let assumptions = verify_assumptions(&model, &districts, a.assumption_samples, a.seed)?;
    let checked = a.districts.min(model.districts);
    let series: Vec<Tensor> = (0..checked)
        .map(|d| {
            let rng = RngStream::for_kind(a.seed, StreamKind::GradCheck, 3, d as u64);
            let v = standard_normal(rng, a.months * model.dims.obs);
            Tensor::new(vec![a.months, model.dims.obs], v.into_data())
        })
        .collect::<Result<_>>()?;
    let grad = gradient_check(&model, &series, beta, a.coordinates, a.step, a.seed, BackwardMode::Direct)?;
    prepare_out(&a.out)?;
    let report = json!({
        "assumptions": assumptions,
        "gradient_check": grad,
        "districts_checked": checked,
        "months": a.months,
    });
    run.write(&a.out, VERIFY_FILE, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    println!(
        "lipschitz {:.4}  growth {:.4}  diffusion growth {:.4}  embedding bound {:.4}  grad max rel err {:.3e} over {} coords",
        assumptions.lipschitz_estimate,
        assumptions.growth_constant,
        assumptions.diffusion_growth,
        assumptions.embedding_bound,
        grad.max_rel_error,
        grad.coordinates
    );
    let mut inputs = Vec::new();
    inputs.extend(a.ckpt.clone());
    run.finish(
        &a.out,
        "verify",
        json!({ "coordinates": a.coordinates, "step": a.step, "assumption_samples": a.assumption_samples }),
        a.seed,
        inputs,
    )
}

/// Replace the value following `--out` in recorded args.
fn retarget(args: &[String], out: &Path) -> Vec<String> {
    let mut next = Vec::with_capacity(args.len());
    let mut iter = args.iter();
    while let Some(a) = iter.next() {
        if a == "--out" {
            next.push(a.clone());
            iter.next();
            next.push(out.to_string_lossy().into_owned());
        } else if a.starts_with("--out=") {
            next.push(format!("--out={}", out.display()));
        } else {
            next.push(a.clone());
        }
    }
    next
}

pub fn cmd_rerun(a: &RerunArgs) -> Result<()> {
    let text = fs::read_to_string(&a.manifest).map_err(|e| Error::io(&a.manifest, e))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("{}: not a manifest: {e}", a.manifest.display())))?;
    if manifest.command == "rerun" {
        return Err(Error::validation("manifest records a rerun"));
    }
    let args = match &a.out {
        Some(out) => retarget(&manifest.args, out),
        None => manifest.args.clone(),
    };
    let argv = std::iter::once("vnsde".to_string()).chain(args.iter().cloned());
    let cli = Cli::try_parse_from(argv)
        .map_err(|e| Error::validation(format!("manifest arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(Error::validation("manifest records a rerun"));
    }
    execute(cli.command, args)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retarget_replaces_out_forms() {
        let args: Vec<String> = ["train", "--panel", "p.csv", "--out", "a", "--epochs", "3"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            retarget(&args, Path::new("b")),
            ["train", "--panel", "p.csv", "--out", "b", "--epochs", "3"]
        );
        let args = vec!["eval".to_string(), "--out=x".to_string()];
        assert_eq!(retarget(&args, Path::new("y")), ["eval", "--out=y"]);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_from(["vnsde", "train"]), 2);
        assert_eq!(run_from(["vnsde", "bogus"]), 2);
    }

    #[test]
    fn missing_anchor_file_is_error_1_and_bad_anchor_is_2() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let missing = dir.path().join("none.csv");
        let code = run_from([
            "vnsde", "synth", "--anchors", missing.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "district,district_id,indicator_id,year,value\nx,0,0,2007,101\n").unwrap();
        let code = run_from([
            "vnsde", "synth", "--anchors", bad.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }
}
