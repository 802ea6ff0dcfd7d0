use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use selectfusion::fusion::{
    anneal, draw_gumbel, fuse_direct, gumbel_softmax, HardContext, HardFusion, HardGradient, MaskKind, NoiseSource,
    SoftFusion, TemperatureSchedule,
};
use selectfusion::geometry::{
    euler_to_rotation, integrate_relative, relative_between, rotation_to_euler, GlobalPose, RelativePose,
};
use selectfusion::nn::ParameterStore;
use selectfusion::tensor::{Tape, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn pose() -> impl Strategy<Value = RelativePose> {
    (prop::array::uniform3(-2.0f64..2.0), prop::array::uniform3(-0.5f64..0.5)).prop_map(|(p, r)| RelativePose { p, r })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn concat_then_slice_recovers_parts(a in matrix(3, 4), b in matrix(3, 2)) {
        let c = a.concat(&b, 1).unwrap();
        prop_assert_eq!(c.slice(1, 0, 4).unwrap(), a);
        prop_assert_eq!(c.slice(1, 4, 6).unwrap(), b);
    }

    #[test]
    fn softmax_rows_are_distributions(a in matrix(4, 5)) {
        let s = a.softmax(1).unwrap();
        for r in 0..4 {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_angles_round_trip(roll in -3.0f64..3.0, pitch in -1.5f64..1.5, yaw in -3.0f64..3.0) {
        let back = rotation_to_euler(&euler_to_rotation([roll, pitch, yaw]));
        for (x, y) in back.iter().zip([roll, pitch, yaw]) {
            prop_assert!((x - y).abs() < 1e-9, "{back:?} vs {:?}", [roll, pitch, yaw]);
        }
    }

    #[test]
    fn integration_and_differencing_are_inverse(steps in prop::collection::vec(pose(), 1..20)) {
        let globals = integrate_relative(&steps, &GlobalPose::identity());
        prop_assert_eq!(globals.len(), steps.len() + 1);
        for (i, step) in steps.iter().enumerate() {
            let back = relative_between(&globals[i], &globals[i + 1]);
            for (x, y) in back.to_array().iter().zip(step.to_array()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn composition_is_associative(a in pose(), b in pose(), c in pose()) {
        let (a, b, c) = (a.to_isometry(), b.to_isometry(), c.to_isometry());
        let left = (a * b) * c;
        let right = a * (b * c);
        prop_assert!((left.to_homogeneous() - right.to_homogeneous()).abs().max() < 1e-12);
    }

    #[test]
    fn anneal_stays_between_endpoints(start in 0.5f64..3.0, span in 0.0f64..0.49, total in 1usize..100, e in 0usize..100) {
        let s = TemperatureSchedule { tau_start: start, tau_end: start - span, total_epochs: total };
        let e = e.min(total);
        let tau = anneal(e, &s).unwrap();
        prop_assert!(tau <= start + 1e-12 && tau >= start - span - 1e-12);
        if e > 0 {
            prop_assert!(tau <= anneal(e - 1, &s).unwrap());
        }
    }

    #[test]
    fn gumbel_argmax_ignores_temperature(lp in matrix(6, 2), seed in any::<u64>(), t1 in 0.05f64..5.0, t2 in 0.05f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = draw_gumbel(&mut rng, &[6, 2]).eps;
        let p1 = gumbel_softmax(&lp, &eps, t1).unwrap();
        let p2 = gumbel_softmax(&lp, &eps, t2).unwrap();
        for r in 0..6 {
            let (x, y) = (p1.row(r), p2.row(r));
            let tie = ((lp.row(r)[0] + eps.row(r)[0]) - (lp.row(r)[1] + eps.row(r)[1])).abs() < 1e-9;
            if !tie {
                prop_assert_eq!(x[0] > x[1], y[0] > y[1]);
            }
        }
    }

    #[test]
    fn fusion_masks_respect_their_ranges(seed in any::<u64>(), x in matrix(3, 4), y in matrix(3, 4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let soft = SoftFusion::new(&mut store, "soft", 4, &mut rng).unwrap();
        let hard = HardFusion::new(&mut store, "hard", 4, seed % 2 == 0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let a1 = tape.constant(x.clone());
        let a2 = tape.constant(y.clone());

        let direct = fuse_direct(&mut tape, a1, a2).unwrap();
        prop_assert_eq!(direct.mask.kind, MaskKind::Fixed);
        prop_assert!(direct.mask.is_valid());
        prop_assert_eq!(tape.value(direct.z), &x.concat(&y, 1).unwrap());

        let s = soft.forward(&mut tape, &p, a1, a2).unwrap();
        prop_assert_eq!(s.mask.kind, MaskKind::Soft);
        prop_assert!(s.mask.is_valid());

        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut ctx = HardContext {
            noise: NoiseSource::Rng(&mut noise_rng),
            tau: 0.5,
            gradient: HardGradient::StraightThrough,
        };
        let h = hard.forward(&mut tape, &p, a1, a2, &mut ctx).unwrap();
        prop_assert_eq!(h.mask.kind, MaskKind::Hard);
        prop_assert!(h.mask.is_valid());
        let z = tape.value(h.z).data();
        let keep: Vec<f64> = (0..3).flat_map(|b| {
            let mut r = h.mask.s1.row(b).to_vec();
            r.extend_from_slice(h.mask.s2.row(b));
            r
        }).collect();
        let xy = x.concat(&y, 1).unwrap();
        for ((zv, kv), xv) in z.iter().zip(&keep).zip(xy.data()) {
            prop_assert_eq!(*zv, kv * xv);
        }
    }
}
