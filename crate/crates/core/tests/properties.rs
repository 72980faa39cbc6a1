//! Property tests for the algebraic invariants of the flow layers.

use flowlite_core::cost_volume::{correlation, CostVolume};
use flowlite_core::deformation::{deform_flow, DisplacementField, FlowField};
use flowlite_core::modulation::{modulate, ModulationTensors};
use flowlite_core::{upsample2x, Shape, Tensor};

use proptest::prelude::*;

fn tensor_strategy(shape: Shape, lo: f32, hi: f32) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, shape.numel())
        .prop_map(move |data| Tensor::from_vec(shape, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Matching-cost symmetry: the cost of displacement o at pixel x in
    /// correlation(f1, f2) equals the cost of -o at pixel x+o in
    /// correlation(f2, f1), wherever both are in bounds.
    #[test]
    fn correlation_symmetry(
        f1 in tensor_strategy(Shape::new(1, 3, 4, 4), -1.0, 1.0),
        f2 in tensor_strategy(Shape::new(1, 3, 4, 4), -1.0, 1.0),
    ) {
        let radius = 1usize;
        let a = correlation(&f1, &f2, radius).unwrap();
        let b = correlation(&f2, &f1, radius).unwrap();
        let side = 2 * radius + 1;
        let s = a.tensor().shape();
        for k in 0..side * side {
            let (dx, dy) = a.displacement(k);
            let k_neg = ((radius as isize - dy) as usize) * side + (radius as isize - dx) as usize;
            for y in 0..4isize {
                for x in 0..4isize {
                    let (y2, x2) = (y + dy, x + dx);
                    if y2 < 0 || x2 < 0 || y2 >= 4 || x2 >= 4 {
                        continue;
                    }
                    let va = a.tensor().data()[s.at(0, k, y as usize, x as usize)];
                    let vb = b.tensor().data()[s.at(0, k_neg, y2 as usize, x2 as usize)];
                    prop_assert!((va - vb).abs() <= 1e-6);
                }
            }
        }
    }

    /// Bilinearity: scaling one argument scales every cost by the same factor.
    #[test]
    fn correlation_scales_linearly(
        f1 in tensor_strategy(Shape::new(1, 4, 4, 4), -1.0, 1.0),
        f2 in tensor_strategy(Shape::new(1, 4, 4, 4), -1.0, 1.0),
        scale in 0.25f32..4.0,
    ) {
        let base = correlation(&f1, &f2, 1).unwrap();
        let scaled = correlation(&f1.scale(scale), &f2, 1).unwrap();
        for (a, b) in base.tensor().data().iter().zip(scaled.tensor().data()) {
            prop_assert!((a * scale - b).abs() <= 1e-4 * (1.0 + a.abs() * scale));
        }
    }

    /// Modulation is affine in the cost volume for fixed (alpha, beta).
    #[test]
    fn modulate_is_affine_in_costs(
        c1 in tensor_strategy(Shape::new(1, 9, 3, 3), -2.0, 2.0),
        c2 in tensor_strategy(Shape::new(1, 9, 3, 3), -2.0, 2.0),
        alpha in tensor_strategy(Shape::new(1, 9, 3, 3), -1.5, 1.5),
        beta in tensor_strategy(Shape::new(1, 9, 3, 3), -1.0, 1.0),
        a in -2.0f32..2.0,
        b in -2.0f32..2.0,
    ) {
        let mt = ModulationTensors { alpha: alpha.clone(), beta: beta.clone() };
        let combined = CostVolume::from_tensor(
            c1.scale(a).add(&c2.scale(b)).unwrap(), 1).unwrap();
        let lhs = modulate(&combined, &mt).unwrap();
        // alpha (*) (a c1 + b c2) + beta == a (alpha (*) c1) + b (alpha (*) c2) + beta
        let m1 = c1.mul(&alpha).unwrap().scale(a);
        let m2 = c2.mul(&alpha).unwrap().scale(b);
        let rhs = m1.add(&m2).unwrap().add(&beta).unwrap();
        for (x, y) in lhs.tensor().data().iter().zip(rhs.data()) {
            prop_assert!((x - y).abs() <= 1e-4);
        }
    }

    /// Meta-warping with border padding is a convex combination: outputs
    /// stay inside the per-channel range of the input flow.
    #[test]
    fn deform_flow_stays_in_range(
        u in tensor_strategy(Shape::new(1, 2, 5, 5), -6.0, 6.0),
        d in tensor_strategy(Shape::new(1, 2, 5, 5), -4.0, 4.0),
    ) {
        let flow = FlowField::new(u.clone()).unwrap();
        let disp = DisplacementField::new(d).unwrap();
        let out = deform_flow(&flow, &disp).unwrap();
        for c in 0..2 {
            let src = &u.data()[c * 25..(c + 1) * 25];
            let lo = src.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = src.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for &v in &out.tensor().data()[c * 25..(c + 1) * 25] {
                prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }

    /// Upsampling keeps values inside the input range (interpolation only).
    #[test]
    fn upsample_is_range_preserving(
        x in tensor_strategy(Shape::new(1, 1, 3, 4), -5.0, 5.0),
    ) {
        let y = upsample2x(&x);
        let lo = x.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = x.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for &v in y.data() {
            prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
        }
    }
}
