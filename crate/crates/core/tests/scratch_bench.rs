// Temporary benchmark harness; removed once configs are tuned.
use std::time::Instant;

use flowlite_core::network::{forward, init_weights, ModelConfig, Variant};
use flowlite_core::training::{loss, synth_sample, TrainConfig};

#[test]
#[ignore]
fn bench_toy_step() {
    let mut cfg = ModelConfig::toy();
    cfg.variant = Variant::Cmfd;
    let tc = TrainConfig::default();
    let w = init_weights(&cfg, 1).unwrap();
    let s = synth_sample(7, 64, 64, 8.0, false);

    let t0 = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let out = forward(&s.i1, &s.i2, &cfg, &w).unwrap();
        let parts = loss(&out, &s.u_gt, &tc).unwrap();
        parts.total.backward().unwrap();
    }
    let dt = t0.elapsed();
    println!(
        "CMFD fwd+bwd: {:.1} ms/step  ({} params)",
        dt.as_secs_f64() * 1000.0 / reps as f64,
        w.param_count()
    );

    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = forward(&s.i1, &s.i2, &cfg, &w).unwrap();
    }
    println!(
        "CMFD fwd only: {:.1} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / reps as f64
    );

    let t0 = Instant::now();
    let reports = flowlite_core::gradcheck::run_all(42).unwrap();
    for r in &reports {
        println!("gradcheck {:<18} max_rel_err={:.5} {}", r.op, r.max_rel_err, if r.passed { "PASS" } else { "FAIL" });
    }
    println!("gradcheck total: {:.1} s", t0.elapsed().as_secs_f64());
}
