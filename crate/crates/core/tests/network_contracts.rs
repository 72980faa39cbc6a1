//! Structural contracts of the assembled pyramid network.

use flowlite_core::cost_volume::auto_correlation;
use flowlite_core::deformation::{deform_flow, DisplacementField, FlowField};
use flowlite_core::modulation::{generate_modulation, ConfidenceMap};
use flowlite_core::network::{forward, init_weights, ModelConfig, Variant};
use flowlite_core::{ConvParams, ConvStack, Shape, Tensor};

use rand::Rng;

fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut r = flowlite_core::rng::rng_from(seed);
    let data: Vec<f32> = (0..3 * h * w).map(|_| r.random_range(0.0..1.0)).collect();
    Tensor::from_vec(Shape::new(1, 3, h, w), data).unwrap()
}

#[test]
fn identity_grafting_on_random_pairs() {
    // Zero-initialized generator final layers: CM equals NO and CMFD
    // equals CM, bit for bit, level by level.
    let toy = ModelConfig::toy;
    for pair in 0..3u64 {
        let i1 = random_image(900 + pair, 64, 64);
        let i2 = random_image(950 + pair, 64, 64);
        let outputs: Vec<_> = [Variant::No, Variant::Cm, Variant::Cmfd]
            .into_iter()
            .map(|variant| {
                let cfg = ModelConfig { variant, ..toy() };
                let w = init_weights(&cfg, 5).unwrap();
                forward(&i1, &i2, &cfg, &w).unwrap()
            })
            .collect();
        for pairwise in outputs.windows(2) {
            let (a, b) = (&pairwise[0], &pairwise[1]);
            assert_eq!(
                a.final_flow.tensor().data(),
                b.final_flow.tensor().data()
            );
            for (fa, fb) in a.flows.iter().zip(&b.flows) {
                assert_eq!(fa.tensor().data(), fb.tensor().data());
            }
        }
    }
}

#[test]
fn resolution_contract() {
    let cfg = ModelConfig::toy();
    let w = init_weights(&cfg, 3).unwrap();
    let i1 = random_image(1, 64, 64);
    let i2 = random_image(2, 64, 64);
    let out = forward(&i1, &i2, &cfg, &w).unwrap();
    assert_eq!(out.levels, vec![5, 4, 3]);
    for (i, &level) in out.levels.iter().enumerate() {
        let s = out.flows[i].tensor().shape();
        assert_eq!(s.h, 64 >> (level - 1));
        assert_eq!(s.w, 64 >> (level - 1));
        assert_eq!(out.confidences[i].tensor().shape().c, 1);
    }
    assert_eq!(out.final_flow.tensor().shape(), Shape::new(1, 2, 64, 64));
}

#[test]
fn upsampling_between_levels_doubles_values() {
    // A constant flow at level k+1 must arrive at level k with doubled
    // values: check through the public upsample contract.
    let flow = Tensor::full(Shape::new(1, 2, 4, 4), 1.5);
    let up = flowlite_core::upsample2x(&flow).scale(2.0);
    assert!(up.data().iter().all(|&v| v == 3.0));
}

#[test]
fn paper_like_widths_parameter_gap() {
    // Directional check mirroring the published model sizes: feature
    // feed-forward costs parameters over the plain decoder, and modulation
    // costs slightly more than feed-forward (under 1%).
    let count = |variant: Variant| -> usize {
        let cfg = ModelConfig {
            variant,
            encoder_widths: vec![32, 64, 96, 128, 192],
            decoder_widths: vec![128, 96, 64],
            generator_widths: vec![113, 85, 56],
            ..ModelConfig::default()
        };
        init_weights(&cfg, 0).unwrap().param_count()
    };
    let no = count(Variant::No);
    let ff = count(Variant::Ff);
    let cm = count(Variant::Cm);
    assert!(no < ff, "NO={no} FF={ff}");
    assert!(ff < cm, "FF={ff} CM={cm}");
    let gap = (cm as f64 - ff as f64) / ff as f64;
    assert!(gap < 0.01, "CM exceeds FF by {:.3}%", gap * 100.0);
}

#[test]
fn modulation_gradients_reach_features_and_confidence() {
    // For generic generator weights, gradients flow through the modulated
    // costs into the cost volume, the features and the confidence map.
    let mut r = flowlite_core::rng::rng_from(11);
    let feat_data: Vec<f32> = (0..4 * 36).map(|_| r.random_range(-1.0..1.0)).collect();
    let f1 = Tensor::from_vec(Shape::new(1, 4, 6, 6), feat_data).unwrap().tracked();
    let cv = auto_correlation(&f1, 1).unwrap();
    let m_data: Vec<f32> = (0..36).map(|_| r.random_range(0.1..0.9)).collect();
    let m_t = Tensor::from_vec(Shape::new(1, 1, 6, 6), m_data).unwrap().tracked();
    let m = ConfidenceMap::new(m_t.clone()).unwrap();

    let mut layers = Vec::new();
    let mut c_in = 9 + 4 + 1;
    for width in [6usize, 4] {
        let kdata: Vec<f32> = (0..width * c_in * 9).map(|_| r.random_range(-0.3..0.3)).collect();
        let kernel = Tensor::from_vec(Shape::new(width, c_in, 3, 3), kdata).unwrap();
        layers.push(ConvParams::new(kernel, Tensor::zeros(Shape::new(1, width, 1, 1)), 1, 1).unwrap());
        c_in = width;
    }
    let out_k: Vec<f32> = (0..18 * c_in * 9).map(|_| r.random_range(-0.3..0.3)).collect();
    layers.push(
        ConvParams::new(
            Tensor::from_vec(Shape::new(18, c_in, 3, 3), out_k).unwrap(),
            Tensor::zeros(Shape::new(1, 18, 1, 1)),
            1,
            1,
        )
        .unwrap(),
    );
    let generator = ConvStack::new(layers, 0.1);

    let mt = generate_modulation(&cv, &f1, &m, &generator).unwrap();
    let modulated = flowlite_core::modulation::modulate(&cv, &mt).unwrap();
    modulated.tensor().sum().backward().unwrap();

    let gf = f1.grad().expect("features should receive gradient");
    let gm = m_t.grad().expect("confidence should receive gradient");
    assert!(gf.iter().any(|&v| v != 0.0));
    assert!(gm.iter().any(|&v| v != 0.0));
}

#[test]
fn deform_gradient_at_zero_displacement_is_spatial_difference() {
    // At d = 0 the derivative of u(x + d) with respect to d_x is the
    // one-sided spatial difference u(x+1) - u(x) (bilinear interpolation
    // takes its right derivative at lattice points).
    let mut r = flowlite_core::rng::rng_from(19);
    let u_data: Vec<f32> = (0..2 * 25).map(|_| r.random_range(-2.0..2.0)).collect();
    let u = FlowField::new(Tensor::from_vec(Shape::new(1, 2, 5, 5), u_data.clone()).unwrap()).unwrap();
    let d_t = Tensor::zeros(Shape::new(1, 2, 5, 5)).tracked();
    let d = DisplacementField::new(d_t.clone()).unwrap();
    let out = deform_flow(&u, &d).unwrap();
    // Scalarize with channel-0 selector so the expected gradient is simple.
    let probe = {
        let mut p = vec![0.0f32; 50];
        p[..25].fill(1.0);
        Tensor::from_vec(Shape::new(1, 2, 5, 5), p).unwrap()
    };
    out.tensor().mul(&probe).unwrap().sum().backward().unwrap();
    let g = d_t.grad().unwrap();
    let s = Shape::new(1, 2, 5, 5);
    for y in 0..5 {
        for x in 0..4 {
            let expected = u_data[s.at(0, 0, y, x + 1)] - u_data[s.at(0, 0, y, x)];
            let got = g[s.at(0, 0, y, x)];
            assert!(
                (got - expected).abs() <= 1e-5,
                "d_x gradient at ({y},{x}): {got} vs {expected}"
            );
        }
    }
    for y in 0..4 {
        for x in 0..5 {
            let expected = u_data[s.at(0, 0, y + 1, x)] - u_data[s.at(0, 0, y, x)];
            let got = g[s.at(0, 1, y, x)];
            assert!(
                (got - expected).abs() <= 1e-5,
                "d_y gradient at ({y},{x}): {got} vs {expected}"
            );
        }
    }
}

#[test]
fn ff_variant_runs_and_differs_from_no() {
    let i1 = random_image(71, 32, 32);
    let i2 = random_image(72, 32, 32);
    let mut cfg = ModelConfig::toy();
    cfg.num_levels = 4;
    cfg.finest_decode_level = 3;
    cfg.radius_per_level = vec![2; 4];
    cfg.encoder_widths = vec![8, 12, 16, 24];
    let run = |variant: Variant| {
        let cfg = ModelConfig { variant, ..cfg.clone() };
        let mut w = init_weights(&cfg, 9).unwrap();
        // Non-zero heads so the two variants actually diverge.
        for name in ["decoder.l4.flow_head.weight", "decoder.l3.flow_head.weight"] {
            let t = w.get(name).unwrap();
            let data: Vec<f32> = (0..t.shape().numel()).map(|i| ((i % 7) as f32 - 3.0) * 0.01).collect();
            let fresh = Tensor::from_vec(t.shape(), data).unwrap().tracked();
            w.insert(name.to_string(), fresh);
        }
        forward(&i1, &i2, &cfg, &w).unwrap()
    };
    let a = run(Variant::No);
    let b = run(Variant::Ff);
    assert_ne!(a.final_flow.tensor().data(), b.final_flow.tensor().data());
}
