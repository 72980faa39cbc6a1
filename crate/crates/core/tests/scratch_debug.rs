// Temporary debugging harness for the loss gradient check.
use flowlite_core::network::{forward, init_weights, ModelConfig, Variant, Weights};
use flowlite_core::tensor::Tensor;
use flowlite_core::training::{loss, synth_sample, TrainConfig};
use flowlite_core::Shape;

fn tiny() -> (ModelConfig, TrainConfig) {
    let cfg = ModelConfig {
        num_levels: 3,
        finest_decode_level: 2,
        radius_per_level: vec![1, 1, 1],
        variant: Variant::CmfdMinus,
        weight_sharing: false,
        encoder_widths: vec![3, 4, 4],
        decoder_widths: vec![4],
        generator_widths: vec![3],
        leaky_slope: 0.1,
        skip_coarsest_modules: false,
        skip_finest_modules: false,
    };
    let tc = TrainConfig {
        level_loss_weights: vec![1.0, 1.0, 1.0],
        conf_loss_weight: 0.0,
        image_height: 8,
        image_width: 8,
        max_displacement: 2.0,
        ..TrainConfig::default()
    };
    (cfg, tc)
}

#[test]
#[ignore]
fn localize_loss_gradient_mismatch() {
    let (cfg, tc) = tiny();
    let seed = 42u64;
    let base = init_weights(&cfg, seed).unwrap();

    // Same doctoring as the gradcheck: random values in zero blobs,
    // fractional flow/displacement biases.
    let mut doctored: Vec<(String, Tensor)> = Vec::new();
    for (name, tensor) in base.iter() {
        let mut r = flowlite_core::rng::rng_for_name(seed ^ 0x5eed, name);
        use rand::Rng;
        let live = if name.ends_with("flow_head.bias") {
            Tensor::from_vec(tensor.shape(), vec![0.41, -0.33]).unwrap()
        } else if name.starts_with("fd.") && name.ends_with("out.bias") {
            Tensor::from_vec(tensor.shape(), vec![0.31, -0.27]).unwrap()
        } else if tensor.data().iter().all(|&v| v == 0.0) {
            let d: Vec<f32> = (0..tensor.shape().numel()).map(|_| r.random_range(-0.1..0.1)).collect();
            Tensor::from_vec(tensor.shape(), d).unwrap()
        } else {
            tensor.detach()
        };
        doctored.push((name.clone(), live));
    }

    let sample = synth_sample(seed, 8, 8, 2.0, false);
    let eval = |weights: &[(String, Tensor)]| -> f32 {
        let mut w = Weights::new(Default::default());
        for (n, t) in weights {
            w.insert(n.clone(), t.clone());
        }
        let out = forward(&sample.i1, &sample.i2, &cfg, &w).unwrap();
        loss(&out, &sample.u_gt, &tc).unwrap().total.item()
    };

    // Analytic gradients in one pass.
    let tracked: Vec<(String, Tensor)> = doctored
        .iter()
        .map(|(n, t)| (n.clone(), t.tracked()))
        .collect();
    {
        let mut w = Weights::new(Default::default());
        for (n, t) in &tracked {
            w.insert(n.clone(), t.clone());
        }
        let out = forward(&sample.i1, &sample.i2, &cfg, &w).unwrap();
        loss(&out, &sample.u_gt, &tc).unwrap().total.backward().unwrap();
    }

    let eps = 8e-3f32;
    for (idx, (name, tensor)) in doctored.iter().enumerate() {
        let numel = tensor.shape().numel();
        let ga = tracked[idx].1.grad().unwrap_or_else(|| vec![0.0; numel]);
        let mut worst = 0.0f32;
        let mut worst_j = 0;
        let mut worst_fd = 0.0f32;
        for j in 0..numel {
            let mut probe = |delta: f32| {
                let mut ws = doctored.clone();
                let mut d = ws[idx].1.data().to_vec();
                d[j] += delta;
                ws[idx].1 = Tensor::from_vec(ws[idx].1.shape(), d).unwrap();
                eval(&ws)
            };
            let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
            let rel = (ga[j] - fd).abs() / f32::max(1e-6, fd.abs());
            if rel > worst {
                worst = rel;
                worst_j = j;
                worst_fd = fd;
            }
        }
        if worst > 1e-2 {
            println!(
                "{name}: worst rel {worst:.4} at [{worst_j}] analytic={} fd={}",
                ga[worst_j], worst_fd
            );
        }
    }
    println!("_shape marker {}", Shape::scalar());
}

#[test]
#[ignore]
fn eps_sweep_directional() {
    let (cfg, tc) = tiny();
    let seed = 42u64;
    let base = init_weights(&cfg, seed).unwrap();
    let mut doctored: Vec<(String, Tensor)> = Vec::new();
    for (name, tensor) in base.iter() {
        use rand::Rng;
        let mut r = flowlite_core::rng::rng_for_name(seed ^ 0x5eed, name);
        let live = if name.ends_with("flow_head.bias") {
            Tensor::from_vec(tensor.shape(), vec![0.41, -0.33]).unwrap()
        } else if name.starts_with("fd.") && name.ends_with("out.bias") {
            Tensor::from_vec(tensor.shape(), vec![0.31, -0.27]).unwrap()
        } else if tensor.data().iter().all(|&v| v == 0.0) {
            let d: Vec<f32> = (0..tensor.shape().numel())
                .map(|_| r.random_range(-0.1..0.1))
                .collect();
            Tensor::from_vec(tensor.shape(), d).unwrap()
        } else {
            tensor.detach()
        };
        doctored.push((name.clone(), live.tracked()));
    }
    let sample = synth_sample(seed, 8, 8, 2.0, false);

    {
        let mut w = Weights::new(Default::default());
        for (n, t) in &doctored {
            w.insert(n.clone(), t.clone());
        }
        let out = forward(&sample.i1, &sample.i2, &cfg, &w).unwrap();
        loss(&out, &sample.u_gt, &tc).unwrap().total.backward().unwrap();
    }

    use rand::Rng;
    for dir_seed in [777u64, 778, 779] {
        let mut r = flowlite_core::rng::rng_from(dir_seed);
        let dirs: Vec<Vec<f32>> = doctored
            .iter()
            .map(|(_, t)| {
                (0..t.shape().numel())
                    .map(|_| if r.random_range(0.0..1.0f32) < 0.5 { -1.0 } else { 1.0 })
                    .collect()
            })
            .collect();
        let mut analytic = 0.0f64;
        for (i, (_, t)) in doctored.iter().enumerate() {
            if let Some(g) = t.grad() {
                for (gv, dv) in g.iter().zip(&dirs[i]) {
                    analytic += (*gv as f64) * (*dv as f64);
                }
            }
        }
        let eval = |delta: f32| -> f32 {
            let mut w = Weights::new(Default::default());
            for (i, (n, t)) in doctored.iter().enumerate() {
                let mut d = t.data().to_vec();
                for (v, dv) in d.iter_mut().zip(&dirs[i]) {
                    *v += delta * dv;
                }
                w.insert(n.clone(), Tensor::from_vec(t.shape(), d).unwrap());
            }
            let out = forward(&sample.i1, &sample.i2, &cfg, &w).unwrap();
            loss(&out, &sample.u_gt, &tc).unwrap().total.item()
        };
        println!("dir {dir_seed}: analytic = {analytic}");
        for eps in [4e-3f32, 2e-3, 1e-3, 5e-4, 2e-4, 1e-4, 5e-5] {
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let rel = (analytic as f32 - fd).abs() / fd.abs().max(1e-6);
            println!("  eps={eps:>8}: fd={fd:>12.6} rel={rel:.5}");
        }
    }
}
