use proptest::prelude::*;

use stec_core::actions::{bin_action, crop_matrix, ego_action, AffineMat, BinningSpec};
use stec_core::analysis::{centroid_separation, FeatureDump, FeatureRow};
use stec_core::gradcore::forward_backward;
use stec_core::imaging::{augment_view, AugmentPolicy, CropParams, Image, TransformRecord};
use stec_core::objectives::{contrastive_nll, kl_decompose, positives, verify_upper_bound, ActionTreeDist};
use stec_core::optim::{lr_at, Schedule};
use stec_core::rng::rng_for;
use stec_core::Tensor;

fn crop_strategy(size: usize) -> impl Strategy<Value = TransformRecord> {
    (1..=size, 1..=size, any::<bool>())
        .prop_flat_map(move |(w, h, m)| (Just(w), Just(h), 0..=size - w, 0..=size - h, Just(m)))
        .prop_map(move |(width, height, left, top, mirrored)| TransformRecord {
            crop: CropParams {
                left,
                top,
                width,
                height,
            },
            mirrored,
            ..TransformRecord::identity(size, size)
        })
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gradient_is_linear_in_the_loss(xs in prop::collection::vec(-3.0f64..3.0, 6), c in -4.0f64..4.0) {
        let x = Tensor::matrix(2, 3, xs).unwrap();
        let build = |scale: f64| {
            forward_backward(&[("x", x.clone())], |g, v| {
                let sq = g.square(v["x"]);
                let e = g.exp(v["x"]);
                let s = g.add(sq, e)?;
                let m = g.mean(s);
                Ok(g.scale(m, scale))
            })
            .unwrap()
        };
        let (l1, g1) = build(1.0);
        let (lc, gc) = build(c);
        prop_assert!(close(lc.item(), c * l1.item(), 1e-12));
        for (a, b) in g1["x"].data().iter().zip(gc["x"].data()) {
            prop_assert!(close(*b, c * a, 1e-12));
        }
        // d/dx mean(x² + eˣ) = (2x + eˣ) / n
        for (gv, xv) in g1["x"].data().iter().zip(x.data()) {
            prop_assert!(close(*gv, (2.0 * xv + xv.exp()) / 6.0, 1e-12));
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm(xs in prop::collection::vec(-5.0f64..5.0, 12)) {
        prop_assume!(xs.chunks(4).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let x = Tensor::matrix(3, 4, xs).unwrap();
        let (_, _) = forward_backward(&[("x", x)], |g, v| {
            let n = g.l2_normalize_rows(v["x"], 1e-12)?;
            for r in 0..3 {
                let norm: f64 = g.value(n).row(r).iter().map(|v| v * v).sum();
                assert!((norm - 1.0).abs() < 1e-12);
            }
            Ok(g.sum(n))
        })
        .unwrap();
    }

    #[test]
    fn augmented_pixels_stay_in_range(seed in any::<u64>(), res in 8usize..20) {
        let mut rng = rng_for(seed, &[1]);
        let img = Image::from_fn(res, res, |y, x| {
            [(x as f64 / res as f64), (y as f64 / res as f64), ((x + y) % 2) as f64]
        });
        let mut policy = AugmentPolicy::full(res);
        policy.resolution = res;
        let view = augment_view(&img, &policy, &mut rng, 0);
        prop_assert_eq!((view.image.height(), view.image.width()), (res, res));
        prop_assert!(view.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = view.record.crop;
        prop_assert!(c.width >= 1 && c.left + c.width <= res && c.top + c.height <= res);
        prop_assert!((0.0..1.0).contains(&view.record.magnitude()));
    }

    #[test]
    fn egocentric_action_of_a_view_with_itself_is_identity(r in crop_strategy(32)) {
        let m = crop_matrix(&r, 32, 32).unwrap();
        let a = ego_action(&m, &m).unwrap();
        let id = AffineMat::IDENTITY.top_rows();
        prop_assert!(a.iter().zip(id).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn egocentric_actions_compose(x in crop_strategy(24), y in crop_strategy(24), z in crop_strategy(24)) {
        let (mx, my, mz) = (
            crop_matrix(&x, 24, 24).unwrap(),
            crop_matrix(&y, 24, 24).unwrap(),
            crop_matrix(&z, 24, 24).unwrap(),
        );
        let xy = AffineMat::from_top_rows(ego_action(&mx, &my).unwrap());
        let yz = AffineMat::from_top_rows(ego_action(&my, &mz).unwrap());
        let xz = ego_action(&mx, &mz).unwrap();
        let chained = (yz * xy).top_rows();
        prop_assert!(chained.iter().zip(xz).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn crop_matrix_maps_canvas_corners_onto_the_crop(r in crop_strategy(20)) {
        let m = crop_matrix(&r, 20, 20).unwrap();
        let c = r.crop;
        let to_norm = |p: f64, size: usize| 2.0 * p / size as f64 - 1.0;
        let (x0, x1) = (to_norm(c.left as f64, 20), to_norm((c.left + c.width) as f64, 20));
        let (u0, _) = m.apply((-1.0, -1.0));
        let (u1, _) = m.apply((1.0, -1.0));
        let (lo, hi) = if r.mirrored { (u1, u0) } else { (u0, u1) };
        prop_assert!((lo - x0).abs() < 1e-12 && (hi - x1).abs() < 1e-12);
    }

    #[test]
    fn binning_is_monotone_and_in_range(a in -5.0f64..5.0, b in -5.0f64..5.0, k in 0usize..6, bins in 2usize..12) {
        let spec = BinningSpec { bins, ..BinningSpec::default() };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(spec.bin(k, lo) <= spec.bin(k, hi));
        prop_assert!(spec.bin(k, hi) < bins);
        let labels = bin_action(&[a; 6], &spec);
        prop_assert!(labels.iter().all(|l| *l < bins));
    }

    #[test]
    fn kl_splits_into_identity_and_manipulation(ps in 0.01f64..0.99, qs in 0.01f64..0.99, pm in simplex(5), qm in simplex(5)) {
        let p = ActionTreeDist::new(ps, pm).unwrap();
        let q = ActionTreeDist::new(qs, qm).unwrap();
        let k = kl_decompose(&p, &q).unwrap();
        prop_assert!(k.joint >= -1e-15 && k.id >= -1e-15 && k.manip >= -1e-15);
        prop_assert!((k.joint - k.id - k.manip).abs() < 1e-10);
        let same = kl_decompose(&p, &p).unwrap();
        prop_assert!(same.joint.abs() < 1e-15);
    }

    #[test]
    fn contrastive_nll_ignores_a_common_shift(s in prop::collection::vec(-1.0f64..1.0, 2..10), shift in -3.0f64..3.0, tau in 0.05f64..2.0) {
        let pos = s.len() - 1;
        let base = contrastive_nll(&s, pos, tau);
        let moved: Vec<f64> = s.iter().map(|v| v + shift).collect();
        prop_assert!(base >= 0.0);
        prop_assert!(close(base, contrastive_nll(&moved, pos, tau), 1e-9));
    }

    #[test]
    fn identity_bound_holds(seed in any::<u64>(), b in 2usize..9, tau in 0.1f64..1.0) {
        use rand::Rng;
        let mut rng = rng_for(seed, &[2]);
        let n = 2 * b;
        let mut z = Tensor::from_fn(&[n, 5], |_| rng.gen_range(-1.0..1.0));
        for r in 0..n {
            let row = &mut z.data_mut()[r * 5..(r + 1) * 5];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let report = verify_upper_bound(&z, &positives(n), tau, 1e-12).unwrap();
        prop_assert!(report.holds());
        prop_assert_eq!(report.checked, n * (n - 1));
    }

    #[test]
    fn separation_is_invariant_to_rotation_and_translation(
        feats in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 12),
        angle in 0.0f64..6.3,
        shift in prop::collection::vec(-5.0f64..5.0, 2),
    ) {
        let rows: Vec<FeatureRow> = feats
            .iter()
            .enumerate()
            .map(|(i, f)| FeatureRow {
                source_id: i % 3,
                label: (i % 2) as u32,
                augmented: i >= 6,
                magnitude: if i >= 6 { 0.5 } else { 0.0 },
                features: f.clone(),
            })
            .collect();
        let (s, c) = angle.sin_cos();
        let moved: Vec<FeatureRow> = rows
            .iter()
            .map(|r| FeatureRow {
                features: vec![
                    c * r.features[0] - s * r.features[1] + shift[0],
                    s * r.features[0] + c * r.features[1] + shift[1],
                ],
                ..r.clone()
            })
            .collect();
        let a = centroid_separation(&FeatureDump { rows }, 0.3).unwrap();
        let b = centroid_separation(&FeatureDump { rows: moved }, 0.3).unwrap();
        prop_assert!(a.mean >= 0.0);
        prop_assert!(close(a.mean, b.mean, 1e-9));
    }

    #[test]
    fn schedule_stays_between_zero_and_peak(step in 0usize..500, warm in 0usize..50, extra in 1usize..400, peak in 0.01f64..2.0) {
        let s = Schedule { peak, warmup_steps: warm, total_steps: warm + extra };
        let lr = lr_at(step, &s);
        prop_assert!((0.0..=peak).contains(&lr));
        if step >= warm + extra {
            prop_assert!(lr.abs() < 1e-12);
        }
        if step + 1 < warm {
            prop_assert!(lr <= lr_at(step + 1, &s));
        }
    }
}
