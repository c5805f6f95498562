use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nighttrack::curriculum::{pooled_ratios, quota_counts, sampling_ratios, DatasetMeta, Domain};
use nighttrack::synth::{crop_resize_pair, from_region, generate_sequence, to_region, CropConfig, SequenceSpec};
use nighttrack::BBox;

fn any_box() -> impl Strategy<Value = BBox> {
    (0.0..1.0f64, 0.0..1.0f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

fn any_metas() -> impl Strategy<Value = Vec<DatasetMeta>> {
    prop::collection::vec((1usize..50_000, any::<bool>()), 1..8).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (n, night))| DatasetMeta::new(format!("d{i}"), if night { Domain::Night } else { Domain::Day }, n, i))
            .collect()
    })
}

proptest! {
    #[test]
    fn iou_is_bounded_and_symmetric(a in any_box(), b in any_box()) {
        let iou = a.iou(&b);
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert!((iou - b.iou(&a)).abs() < 1e-12);
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_loss_stays_below_two(a in any_box(), b in any_box()) {
        let loss = 1.0 - a.giou(&b);
        prop_assert!((0.0..2.0).contains(&loss), "loss {loss}");
        prop_assert!(a.giou(&b) <= a.iou(&b) + 1e-12);
    }

    #[test]
    fn ratios_form_a_distribution(metas in any_metas(), epoch in 0usize..400, theta in 1.0..300.0f64, cap in any::<bool>()) {
        let r = sampling_ratios(&metas, epoch, theta, cap).unwrap();
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(r.iter().all(|&x| x > 0.0));
        let p = pooled_ratios(&metas).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quotas_add_up(metas in any_metas(), epoch in 0usize..300, pairs in 0usize..5000) {
        let r = sampling_ratios(&metas, epoch, 150.0, false).unwrap();
        prop_assert_eq!(quota_counts(&r, pairs).iter().sum::<usize>(), pairs);
    }

    #[test]
    fn region_mapping_round_trips(b in any_box(), cx in -50.0..150.0f64, cy in -50.0..150.0f64, side in 1.0..400.0f64) {
        let region = (cx, cy, side);
        let back = from_region(&to_region(&b, region), region);
        for (x, y) in back.to_array().iter().zip(b.to_array()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn targets_stay_on_the_canvas(seed in any::<u64>(), night in any::<bool>()) {
        let domain = if night { Domain::Night } else { Domain::Day };
        let spec = SequenceSpec { length: 40, ..SequenceSpec::new(seed, domain) };
        let seq = generate_sequence(&spec).unwrap();
        for b in &seq.boxes {
            let (x1, y1, x2, y2) = b.corners();
            prop_assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= spec.width as f64 && y2 <= spec.height as f64, "{b:?}");
        }
    }
}

#[test]
fn jittered_search_crop_contains_the_target() {
    let crop = CropConfig::default();
    let spec = SequenceSpec { length: 2, ..SequenceSpec::new(5, Domain::Day) };
    let seq = generate_sequence(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let (_, _, gt) = crop_resize_pair(&seq.frames[0], &seq.boxes[0], &seq.frames[1], &seq.boxes[1], &crop, &mut rng).unwrap();
        let (x1, y1, x2, y2) = gt.corners();
        assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0, "target left the search crop: {gt:?}");
    }
}
