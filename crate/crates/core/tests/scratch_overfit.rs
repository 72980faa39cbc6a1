// Temporary: can the model overfit a single sample? Separates gradient-path
// problems from data/hyperparameter problems.
use flowlite_core::evaluate::aee;
use flowlite_core::network::{forward, init_weights, ModelConfig, Variant};
use flowlite_core::training::{downscale_flow, loss, synth_sample, Adam, TrainConfig};

#[test]
#[ignore]
fn overfit_single_sample() {
    let cfg = ModelConfig {
        variant: Variant::No,
        ..ModelConfig::toy()
    };
    let tc = TrainConfig {
        level_loss_weights: vec![0.0, 0.005, 0.02, 0.08, 0.32],
        ..TrainConfig::default()
    };
    let sample = synth_sample(3, 64, 64, 8.0, false);
    let mut w = init_weights(&cfg, 1).unwrap();
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    for step in 0..400 {
        let out = forward(&sample.i1, &sample.i2, &cfg, &w).unwrap();
        let parts = loss(&out, &sample.u_gt, &tc).unwrap();
        parts.total.backward().unwrap();
        w = adam.step(&w, |_| 2e-3).unwrap();
        if step % 50 == 0 || step == 399 {
            let out = forward(&sample.i1, &sample.i2, &cfg, &w).unwrap();
            let full = aee(&out.final_flow, &sample.u_gt, None).unwrap();
            let mut per_level = Vec::new();
            for (i, &level) in out.levels.iter().enumerate() {
                let gt_l = downscale_flow(&sample.u_gt, level);
                per_level.push((level, aee(&out.flows[i], &gt_l, None).unwrap()));
            }
            println!(
                "step {step:>4}: loss {:>9.5} full-res AEE {full:>7.4} per-level {per_level:?}",
                parts.total.item()
            );
        }
    }
}
