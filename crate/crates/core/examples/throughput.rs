//! Timing probe for the pieces that dominate training cost: subband
//! preparation, the forward pass, and one optimizer step. Run with
//! `cargo run -p adafe-core --example throughput` to size experiment
//! budgets for a machine.

use std::time::Instant;

use adafe_core::frontend::{Frontend, FrontendConfig};
use adafe_core::train::tasks::{gen_synthetic_task, TaskKind};
use adafe_core::train::{
    init_run_params, prepare_all, train_with_cache, TrainConfig, Variant,
};

fn main() {
    let base = FrontendConfig::default();
    let fe = Frontend::<f32>::new(Variant::AdaFe.apply(&base)).unwrap();

    let t0 = Instant::now();
    let task = gen_synthetic_task(TaskKind::LoudnessTones, 1);
    println!("task generation: {:?} ({} clips)", t0.elapsed(), task.clips.len());

    let t0 = Instant::now();
    let prepared = prepare_all(&fe, &task).unwrap();
    println!(
        "prepare_all: {:?} ({:.1} ms/clip)",
        t0.elapsed(),
        t0.elapsed().as_secs_f64() * 1e3 / task.clips.len() as f64
    );

    let params = init_run_params(&fe, task.class_count(), 128, 0, true);
    let mut scratch = fe.scratch();
    let t0 = Instant::now();
    let reps = 10;
    for i in 0..reps {
        let _ = fe.run_prepared(&prepared[i], &params, &mut scratch).unwrap();
    }
    let fwd_ms = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;
    println!("inference forward: {fwd_ms:.1} ms/clip (1 s audio)");

    let tcfg = TrainConfig {
        variant: Variant::AdaFe,
        seed: 0,
        max_epochs: 1,
        patience: 1,
        batch_size: 32,
        max_train_clips: 32,
        max_valid_clips: 16,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let (_, report) = train_with_cache(&task, &tcfg, &base, Some(&prepared)).unwrap();
    let total = t0.elapsed().as_secs_f64();
    println!(
        "1 epoch (32 train clips fwd+bwd, 16 valid clips fwd): {total:.2} s \
         -> step {:.1} ms/clip after subtracting eval {:.1} ms/clip",
        (total * 1e3 - 16.0 * fwd_ms) / 32.0,
        fwd_ms
    );
    println!("valid top1 after 1 epoch: {:.3}", report.valid_curve[0]);

    let frozen_cfg = TrainConfig {
        variant: Variant::FrozenQBaseline,
        max_epochs: 3,
        patience: 3,
        max_train_clips: 64,
        max_valid_clips: 32,
        ..tcfg
    };
    let t0 = Instant::now();
    let (_, report) = train_with_cache(&task, &frozen_cfg, &base, Some(&prepared)).unwrap();
    println!(
        "frozen baseline, 3 epochs on 64 clips: {:.2} s (loss {:.3} -> {:.3})",
        t0.elapsed().as_secs_f64(),
        report.loss_curve.first().unwrap(),
        report.loss_curve.last().unwrap()
    );

    let probe = TrainConfig {
        variant: Variant::AdaFe,
        seed: 0,
        max_epochs: 4,
        patience: 4,
        batch_size: 64,
        clip_seconds: 0.5,
        max_train_clips: 320,
        max_valid_clips: 64,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let (_, report) = train_with_cache(&task, &probe, &base, Some(&prepared)).unwrap();
    println!(
        "ada_fe, 320 clips, 0.5 s crops, 4 epochs: {:.1} s, valid curve {:?}, \
         test top1 {:.3}, corr median {:.3}",
        t0.elapsed().as_secs_f64(),
        report
            .valid_curve
            .iter()
            .map(|v| (v * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>(),
        report.top1,
        report.q_energy_corr_median
    );
}
