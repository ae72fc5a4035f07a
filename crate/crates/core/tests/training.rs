mod common;

use common::*;
use vnsde::data::{load_anchors, normalize, synthesize, DEFAULT_SIGMA};
use vnsde::training::{fit, BackwardMode, TrainConfig, TrainState, TrainingData};

fn fixture(seed: u64) -> TrainingData {
    let anchors = load_anchors(&fixture_anchors()).unwrap();
    let (panel, _) = synthesize(&anchors, DEFAULT_SIGMA, seed).unwrap();
    TrainingData::new(&normalize(&panel, None).unwrap().0).unwrap()
}

#[test]
fn direct_and_replay_trajectories_agree_after_five_epochs() {
    let data = fixture(0);
    let run = |mode| {
        let cfg = TrainConfig { epochs: 5, seed: 8, backward_mode: mode, ..TrainConfig::default() };
        let mut s = TrainState::init(&cfg, &data).unwrap();
        let logs = fit(&mut s, &data, &cfg, |_, _| Ok(())).unwrap();
        (s, logs)
    };
    let (a, la) = run(BackwardMode::Direct);
    let (b, lb) = run(BackwardMode::Replay);
    let mut worst: f64 = 0.0;
    for ((_, pa), (_, pb)) in a.model.params.iter().zip(b.model.params.iter()) {
        worst = worst.max(pa.tensor.max_abs_diff(&pb.tensor));
    }
    assert!(worst <= 1e-8, "parameter sup gap {worst:e}");
    for (x, y) in la.iter().zip(&lb) {
        assert!((x.total - y.total).abs() <= 1e-10);
    }
}

#[test]
fn smoke_run_descends() {
    let data = fixture(0);
    let cfg = TrainConfig { epochs: 100, seed: 0, ..TrainConfig::default() };
    let mut s = TrainState::init(&cfg, &data).unwrap();
    let logs = fit(&mut s, &data, &cfg, |_, _| Ok(())).unwrap();
    let total: Vec<f64> = logs.iter().map(|l| l.total).collect();
    let down = total.windows(2).filter(|w| w[1] <= w[0]).count();
    let frac = down as f64 / (total.len() - 1) as f64;
    let w = 50;
    let last_smoothed = total[total.len() - w..].iter().sum::<f64>() / w as f64;
    println!("epoch-over-epoch decrease on {:.1}% of epochs; smoothed final {last_smoothed:.6} vs initial {:.6}", 100.0 * frac, total[0]);
    assert!(last_smoothed < total[0]);
    assert!(frac >= 0.80, "loss decreased on only {:.1}% of epochs", 100.0 * frac);
}

#[test]
fn every_epoch_log_satisfies_affine_identity() {
    let data = fixture(2);
    let cfg = TrainConfig { epochs: 4, warmup_epochs: 2, seed: 1, hidden: 16, ..TrainConfig::default() };
    let mut s = TrainState::init(&cfg, &data).unwrap();
    let logs = fit(&mut s, &data, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(logs.iter().map(|l| l.beta).collect::<Vec<_>>(), [0.0, 0.05, 0.1, 0.1]);
    for l in &logs {
        assert_eq!(l.total.to_bits(), (l.nll + l.beta * l.kl).to_bits());
    }
}
