//! End-to-end smoke runs of the training loop on small generated data.

use std::time::Instant;

use ctp_core::dynsim::{degrade, simulate_hao, split_dataset};
use ctp_core::model::{CausalMask, CtpConfig, CtpModel};
use ctp_core::rng::Rng;
use ctp_core::trainer::{train, train_baseline, Baseline, TrainConfig};

fn desk_cfg(k: usize, time_scale: f64) -> CtpConfig {
    let mut cfg = CtpConfig::new(k);
    cfg.enc_hidden = 16;
    cfg.deriv_hidden = vec![16, 16];
    cfg.substeps = 2;
    cfg.time_scale = time_scale;
    cfg
}

#[test]
fn short_training_run_reduces_validation_loss() {
    let raw = simulate_hao(96, 42).unwrap();
    let mut rng = Rng::substream(42, "degrade", 0);
    let noisy = degrade(&raw, 0.05, 0.01, &mut rng).unwrap();
    let (train_d, val_d, _test_d) = split_dataset(&noisy, (64, 16, 16), 42).unwrap();

    let cfg = desk_cfg(4, 1.0);
    let mask = CausalMask::init(cfg.dim(), true);
    let mut train_cfg = TrainConfig::default();
    train_cfg.schedule.max_iters = 120;
    train_cfg.schedule.update_interval = 20;
    train_cfg.batch_size = 16;
    train_cfg.lr = 3e-3;

    let mut rng = Rng::substream(7, "init", 0);
    let model = CtpModel::init(cfg, &mut rng).unwrap();
    let t0 = Instant::now();
    let out = train(model, &train_d, &val_d, &mask, &train_cfg, &mut rng).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    eprintln!(
        "smoke: {} steps in {elapsed:.2}s ({:.1} ms/step), val {:.3} -> {:.3}",
        train_cfg.schedule.max_iters,
        1000.0 * elapsed / train_cfg.schedule.max_iters as f64,
        out.log.first().unwrap().l_data,
        out.val_loss
    );
    assert!(
        out.val_loss < out.log.first().unwrap().l_data,
        "validation loss should drop: {} -> {}",
        out.log.first().unwrap().l_data,
        out.val_loss
    );
    assert!(out.log.iter().all(|r| r.l_final.is_finite()));
    // multipliers never decrease
    for w in out.log.windows(2) {
        assert!(w[1].alpha >= w[0].alpha && w[1].rho >= w[0].rho);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let raw = simulate_hao(48, 9).unwrap();
    let (train_d, val_d, _) = split_dataset(&raw, (32, 8, 8), 9).unwrap();
    let cfg = desk_cfg(4, 1.0);
    let mask = CausalMask::init(cfg.dim(), true);
    let mut tc = TrainConfig::default();
    tc.schedule.max_iters = 30;
    tc.schedule.update_interval = 10;
    tc.batch_size = 8;

    let run = || {
        let mut rng = Rng::substream(123, "init", 0);
        let model = CtpModel::init(cfg.clone(), &mut rng).unwrap();
        train(model, &train_d, &val_d, &mask, &tc, &mut rng).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
    for i in 0..a.model.params.len() {
        assert_eq!(a.model.params.buf(i).data, b.model.params.buf(i).data);
    }
}

#[test]
fn baselines_train_without_penalties() {
    let raw = simulate_hao(48, 5).unwrap();
    let (train_d, val_d, _) = split_dataset(&raw, (32, 8, 8), 5).unwrap();
    let mut cfg = desk_cfg(4, 1.0);
    cfg.deriv_hidden = vec![8];
    let mut tc = TrainConfig::default();
    tc.schedule.max_iters = 40;
    tc.schedule.update_interval = 10;
    tc.batch_size = 8;

    for variant in [Baseline::NeuralOde, Baseline::LinearOde] {
        let mut rng = Rng::substream(77, "baseline", 0);
        let out = train_baseline(variant, cfg.clone(), &train_d, &val_d, &tc, &mut rng).unwrap();
        assert!(out.val_loss.is_finite());
        // with all penalty weights zero the objective is the data loss
        for r in &out.log {
            assert_eq!(r.l_final, r.l_data);
            assert_eq!(r.alpha, 0.0);
            assert_eq!(r.rho, 0.0);
        }
    }
}
